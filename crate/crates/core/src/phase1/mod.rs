//! Global multi-fidelity evolutionary search.
//!
//! Each generation mutates the current population, pushes the offspring
//! through successive halving (optionally screened by per-rung surrogates),
//! and keeps the best `n_lf` parents and offspring by constrained NSGA-II.
//! Top-rung measurements accumulate in a [`ParetoArchive`] whose
//! hypervolume drives termination.

pub mod hypervolume;
pub mod mutation;
pub mod nsga2;
pub mod sha;
pub mod surrogate;

use std::collections::{BTreeMap, HashMap, HashSet};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Evaluator, Provenance, Stage};
use crate::feasibility::RepairTrace;
use crate::problem::Problem;
use crate::rng::SeedStreams;
use crate::space::{Config, Embedding};

use hypervolume::{hypervolume, should_stop_phase1};
use mutation::{init_population, mutate_coupled, mutate_sensitivity};
use nsga2::{crowded_better, nsga2_select, Objectives, Ranked};
use sha::{run_sha_generation, NoScreening, ScreeningBank, Screener, ShaLadder, ShaOutcome};
use surrogate::{DEFAULT_HUBER_DELTA, DEFAULT_MIN_PAIRS, DEFAULT_RIDGE};

const OFFSPRING_DEDUP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Params {
    /// Population size is `ladder.n_lf`; offspring per generation match it.
    pub ladder: ShaLadder,
    /// Random edits applied to the prototype for each initial variant.
    pub init_edits: usize,
    pub gamma: f64,
    pub eps_hv: f64,
    pub patience: usize,
    pub eps_den: f64,
    pub max_generations: usize,
    pub huber_delta: f64,
    pub ridge: f64,
    pub min_pairs: usize,
    /// Rank promotions by the screening surrogates once they are trained.
    pub screening: bool,
}

impl Default for Phase1Params {
    fn default() -> Self {
        Phase1Params {
            ladder: ShaLadder::default(),
            init_edits: 2,
            gamma: 2.0,
            eps_hv: 0.01,
            patience: 3,
            eps_den: 1e-9,
            max_generations: 20,
            huber_delta: DEFAULT_HUBER_DELTA,
            ridge: DEFAULT_RIDGE,
            min_pairs: DEFAULT_MIN_PAIRS,
            screening: true,
        }
    }
}

impl Phase1Params {
    pub fn validate(&self) -> Result<()> {
        self.ladder.validate()?;
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.eps_hv >= 0.0) || !(self.eps_den >= 0.0) {
            return Err(Error::InvalidParameter("hypervolume tolerances must be non-negative".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::InvalidParameter("need huber_delta > 0 and ridge >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub config: Config,
    pub embedding: Embedding,
    /// Measured score per step count.
    pub scores: BTreeMap<u64, f64>,
    pub predicted_hf: Option<f64>,
    pub memory_bytes: u64,
    pub violation: u64,
}

impl Individual {
    /// Measured top-rung score, else the predicted one, else the score at the
    /// highest measured rung.
    pub fn fitness(&self, top_steps: u64) -> f64 {
        if let Some(&s) = self.scores.get(&top_steps) {
            return s;
        }
        if let Some(p) = self.predicted_hf {
            return p;
        }
        self.scores.values().next_back().copied().unwrap_or(f64::NEG_INFINITY)
    }

    fn objectives(&self, top_steps: u64) -> Objectives {
        Objectives {
            score: self.fitness(top_steps),
            memory: self.memory_bytes as f64,
            violation: self.violation as f64,
        }
    }
}

/// Feasible, mutually non-dominated top-rung measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub reference_memory: u64,
    pub top_steps: u64,
    pub members: Vec<EvalRecord>,
    pub hv_trace: Vec<f64>,
}

impl ParetoArchive {
    pub fn new(reference_memory: u64, top_steps: u64) -> Self {
        ParetoArchive {
            reference_memory,
            top_steps,
            members: Vec::new(),
            hv_trace: Vec::new(),
        }
    }

    /// Inserts a measured top-rung record. Returns whether it joined the
    /// front.
    ///
    /// # Panics
    /// If the record is not measured at the top rung or exceeds the budget.
    pub fn insert(&mut self, record: &EvalRecord) -> bool {
        assert_eq!(record.steps, self.top_steps, "archive only accepts top-rung measurements");
        assert!(
            record.memory_bytes <= self.reference_memory,
            "archive only accepts feasible records"
        );
        let new = Objectives::feasible(record.score, record.memory_bytes as f64);
        let covered = self.members.iter().any(|m| {
            let old = Objectives::feasible(m.score, m.memory_bytes as f64);
            m.config == record.config || nsga2::dominates(&old, &new) || old == new
        });
        if covered {
            return false;
        }
        self.members.retain(|m| {
            !nsga2::dominates(&new, &Objectives::feasible(m.score, m.memory_bytes as f64))
        });
        self.members.push(record.clone());
        self.members.sort_by(|a, b| a.memory_bytes.cmp(&b.memory_bytes).then(b.score.total_cmp(&a.score)));
        true
    }

    pub fn hypervolume(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self.members.iter().map(|m| (m.score, m.memory_bytes as f64)).collect();
        hypervolume(&pts, self.reference_memory as f64)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn configs(&self) -> Vec<Config> {
        self.members.iter().map(|m| m.config.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTelemetry {
    pub generation: usize,
    pub cohort_sizes: Vec<usize>,
    pub failed: usize,
    /// Whether each non-final rung was ranked by its surrogate.
    pub screened: Vec<bool>,
    /// Surrogate state after this generation's refit.
    pub surrogate_trained: Vec<bool>,
    /// Spearman correlation between the pre-refit predictions and the new
    /// top-rung scores, per rung.
    pub heldout_spearman: Vec<Option<f64>>,
    pub hypervolume: f64,
    pub archive_size: usize,
    /// Cumulative fresh top-rung evaluations.
    pub hf_evaluations: usize,
    pub cohort: Vec<Config>,
    pub promoted: Vec<Config>,
    /// Repair downgrades applied to each layer while generating candidates.
    pub repair_steps_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    HypervolumeConverged,
    GenerationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Result {
    pub prototype: Config,
    pub archive: ParetoArchive,
    pub population: Vec<Individual>,
    pub telemetry: Vec<GenerationTelemetry>,
    pub screening: ScreeningBank,
    pub generations: usize,
    pub stop_reason: StopReason,
}

/// Tracks candidates that went through one successive-halving pass.
fn individuals_from(problem: &Problem, order: &[Config], sha: &ShaOutcome, top: u64) -> Vec<Individual> {
    let mut seen = HashSet::new();
    order
        .iter()
        .filter(|c| seen.insert((*c).clone()))
        .filter_map(|c| {
            let scores = sha.scores.get(c)?.clone();
            let predicted_hf = if scores.contains_key(&top) {
                None
            } else {
                sha.predicted.get(c).copied()
            };
            let memory_bytes = problem.memory(c);
            Some(Individual {
                config: c.clone(),
                embedding: problem.spec.embed(c),
                scores,
                predicted_hf,
                memory_bytes,
                violation: problem.budget.violation(memory_bytes),
            })
        })
        .collect()
}

fn count_repairs(counts: &mut [usize], trace: &RepairTrace) {
    for step in &trace.steps {
        counts[step.layer] += 1;
    }
}

fn tournament<'a, R: Rng + ?Sized>(population: &'a [Individual], ranks: &[Ranked], rng: &mut R) -> &'a Individual {
    let a = rng.random_range(0..population.len());
    let b = rng.random_range(0..population.len());
    if crowded_better(&ranks[b], &ranks[a]) {
        &population[b]
    } else {
        &population[a]
    }
}

/// Merges duplicate configs (keeping the first) and their measurements.
fn merge_individuals(pool: Vec<Individual>) -> Vec<Individual> {
    let mut index: HashMap<Config, usize> = HashMap::new();
    let mut out: Vec<Individual> = Vec::with_capacity(pool.len());
    for ind in pool {
        match index.get(&ind.config) {
            Some(&i) => {
                let kept = &mut out[i];
                kept.scores.extend(ind.scores);
                if ind.predicted_hf.is_some() {
                    kept.predicted_hf = ind.predicted_hf;
                }
            }
            None => {
                index.insert(ind.config.clone(), out.len());
                out.push(ind);
            }
        }
    }
    out
}

/// Runs the evolutionary search until the archive hypervolume stalls or the
/// generation cap is reached.
pub fn run_phase1(
    problem: &Problem,
    evaluator: &mut Evaluator,
    params: &Phase1Params,
    streams: &SeedStreams,
) -> Result<Phase1Result> {
    params.validate()?;
    let ladder = &params.ladder;
    let top = ladder.top_steps();
    let size = ladder.n_lf;
    let layers = problem.num_layers();
    let mut init_rng = streams.rng(SeedStreams::INIT);
    let mut mutation_rng = streams.rng(SeedStreams::MUTATION);

    let prototype = problem.prototype();
    let initial = init_population(problem, &prototype, size, params.init_edits, params.gamma, &mut init_rng);
    let mut bank = ScreeningBank::new(
        &problem.spec,
        ladder.rungs(),
        params.huber_delta,
        params.ridge,
        params.min_pairs,
    );
    let mut archive = ParetoArchive::new(problem.budget.max_bytes, top);
    let mut telemetry = Vec::new();

    let mut population: Vec<Individual> = Vec::new();
    let mut generation = 0;
    let mut offspring = initial;
    let mut repair_counts = vec![0usize; layers];
    let stop_reason = loop {
        let provenance = Provenance::new(Stage::Phase1, generation as u64);
        let screener: &dyn Screener = if params.screening { &bank } else { &NoScreening };
        let sha = run_sha_generation(&offspring, ladder, screener, evaluator, provenance)?;
        let children = individuals_from(problem, &offspring, &sha, top);
        let heldout = bank.update(sha.new_pairs.clone());

        let mut pool = std::mem::take(&mut population);
        pool.extend(children);
        let pool = merge_individuals(pool);
        let objectives: Vec<Objectives> = pool.iter().map(|i| i.objectives(top)).collect();
        let selected = nsga2_select(&objectives, size);
        population = selected.iter().map(|r| pool[r.index].clone()).collect();

        for rec in &sha.promoted {
            archive.insert(rec);
        }
        archive.hv_trace.push(archive.hypervolume());

        telemetry.push(GenerationTelemetry {
            generation,
            cohort_sizes: sha.cohort_sizes(),
            failed: sha.rungs.iter().map(|r| r.failed).sum(),
            screened: sha.rungs.iter().take(ladder.rungs() - 1).map(|r| r.screened).collect(),
            surrogate_trained: bank.trained(),
            heldout_spearman: heldout,
            hypervolume: *archive.hv_trace.last().expect("pushed above"),
            archive_size: archive.len(),
            hf_evaluations: evaluator.backend_calls(top),
            cohort: sha.rungs.first().map(|r| r.cohort.clone()).unwrap_or_default(),
            promoted: sha.promoted.iter().map(|r| r.config.clone()).collect(),
            repair_steps_per_layer: std::mem::replace(&mut repair_counts, vec![0; layers]),
        });
        info!(
            "phase 1 generation {generation}: hv {:.6e}, archive {}, hf evals {}",
            archive.hypervolume(),
            archive.len(),
            evaluator.backend_calls(top)
        );

        if should_stop_phase1(&archive.hv_trace, params.eps_hv, params.patience, params.eps_den) {
            break StopReason::HypervolumeConverged;
        }
        if generation >= params.max_generations {
            break StopReason::GenerationCap;
        }
        generation += 1;

        // reconstruct ranks for tournament selection on the survivors
        let objectives: Vec<Objectives> = population.iter().map(|i| i.objectives(top)).collect();
        let mut ranks = vec![
            Ranked {
                index: 0,
                front: usize::MAX,
                crowding: 0.0
            };
            population.len()
        ];
        for r in nsga2_select(&objectives, population.len()) {
            ranks[r.index] = r;
        }

        let mut seen: HashSet<Config> = population.iter().map(|i| i.config.clone()).collect();
        offspring = Vec::with_capacity(size);
        if population.is_empty() {
            return Err(Error::Evaluation("every phase 1 candidate failed to evaluate".into()));
        }
        for i in 0..size {
            let mut child = None;
            for attempt in 0..=OFFSPRING_DEDUP_ATTEMPTS {
                let parent = tournament(&population, &ranks, &mut mutation_rng);
                let (c, trace) = if i < size / 2 {
                    mutate_sensitivity(problem, &parent.config, params.gamma, &mut mutation_rng)
                } else {
                    mutate_coupled(problem, &parent.config, params.gamma, &mut mutation_rng)
                };
                count_repairs(&mut repair_counts, &trace);
                if !seen.contains(&c) || attempt == OFFSPRING_DEDUP_ATTEMPTS {
                    child = Some(c);
                    break;
                }
            }
            let child = child.expect("loop always yields");
            seen.insert(child.clone());
            offspring.push(child);
        }
    };

    Ok(Phase1Result {
        prototype,
        archive,
        population,
        telemetry,
        screening: bank,
        generations: generation,
        stop_reason,
    })
}

/// One JSON object per line.
pub fn telemetry_jsonl(telemetry: &[GenerationTelemetry]) -> Result<String> {
    let mut out = String::new();
    for t in telemetry {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::json("phase 1 telemetry", e))?);
        out.push('\n');
    }
    Ok(out)
}
