//! Synthetic experiments: screening hit rate and search sample efficiency.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::random_search;
use crate::error::Result;
use crate::evaluator::{Evaluator, Ledger, Provenance, Stage, SyntheticBackend};
use crate::phase1::mutation::init_population;
use crate::phase1::sha::{run_sha_generation, NoScreening, ScreeningBank, ShaLadder};
use crate::phase1::surrogate::{screening_features, TrainingPair};
use crate::phase1::Phase1Params;
use crate::problem::Problem;
use crate::space::Config;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRateSettings {
    /// Configs measured at every rung to train the surrogates.
    pub training_configs: usize,
    /// Atomic edits from the prototype for training and cohort configs.
    pub edits: usize,
    pub gamma: f64,
    pub huber_delta: f64,
    pub ridge: f64,
    pub min_pairs: usize,
}

impl HitRateSettings {
    pub fn from_phase1(params: &Phase1Params, training_configs: usize) -> Self {
        HitRateSettings {
            training_configs,
            edits: params.init_edits,
            gamma: params.gamma,
            huber_delta: params.huber_delta,
            ridge: params.ridge,
            min_pairs: params.min_pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRateTrial {
    /// `|promoted ∩ true top n_hf| / n_hf` with surrogate screening.
    pub surrogate: f64,
    /// Same, ranking by measured scores only.
    pub measured: f64,
    pub surrogate_trained: bool,
}

fn hit_rate(promoted: &[Config], truth: &HashSet<Config>) -> f64 {
    promoted.iter().filter(|c| truth.contains(*c)).count() as f64 / truth.len() as f64
}

/// One paired trial: both rankings see the same noisy measurements of the
/// same cohort; truth is the noise-free top-rung score.
pub fn screening_hit_rate_trial(
    problem: &Problem,
    backend: &SyntheticBackend,
    ladder: &ShaLadder,
    settings: &HitRateSettings,
    seed: u64,
) -> Result<HitRateTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototype = problem.prototype();
    let top = ladder.top_steps();

    let mut training_ev = Evaluator::new(problem.spec.clone(), Box::new(backend.clone()), Ledger::in_memory(), seed);
    let train = init_population(problem, &prototype, settings.training_configs + 1, settings.edits, settings.gamma, &mut rng);
    let mut pairs: Vec<Vec<TrainingPair>> = vec![Vec::new(); ladder.rungs() - 1];
    for c in train.iter().skip(1) {
        let hf = training_ev.evaluate(c, top, Provenance::new(Stage::Adhoc, 0))?.score;
        let embedding = problem.spec.embed(c);
        for (s, &steps) in ladder.step_counts[..ladder.rungs() - 1].iter().enumerate() {
            let lf = training_ev.evaluate(c, steps, Provenance::new(Stage::Adhoc, 0))?;
            pairs[s].push(TrainingPair {
                features: screening_features(lf.score, lf.memory_bytes, &embedding),
                target: hf,
            });
        }
    }
    let mut bank = ScreeningBank::new(&problem.spec, ladder.rungs(), settings.huber_delta, settings.ridge, settings.min_pairs);
    bank.update(pairs);

    let cohort = init_population(problem, &prototype, ladder.n_lf, settings.edits, settings.gamma, &mut rng);
    let mut scored: Vec<(f64, &Config)> = cohort.iter().map(|c| (backend.expected_score(c, top), c)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let truth: HashSet<Config> = scored.iter().take(ladder.n_hf).map(|s| s.1.clone()).collect();

    // fresh evaluators with the trial seed: identical noise for both arms
    let cohort_seed = seed ^ 0x5eed;
    let prov = Provenance::new(Stage::Adhoc, 1);
    let mut ev = Evaluator::new(problem.spec.clone(), Box::new(backend.clone()), Ledger::in_memory(), cohort_seed);
    let plain = run_sha_generation(&cohort, ladder, &NoScreening, &mut ev, prov)?;
    let mut ev = Evaluator::new(problem.spec.clone(), Box::new(backend.clone()), Ledger::in_memory(), cohort_seed);
    let screened = run_sha_generation(&cohort, ladder, &bank, &mut ev, prov)?;
    let configs = |o: &crate::phase1::sha::ShaOutcome| o.promoted.iter().map(|r| r.config.clone()).collect::<Vec<_>>();
    Ok(HitRateTrial {
        surrogate: hit_rate(&configs(&screened), &truth),
        measured: hit_rate(&configs(&plain), &truth),
        surrogate_trained: bank.trained().iter().all(|&t| t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTrial {
    /// Score of the returned configuration.
    pub target: f64,
    /// Top-rung evaluations the search spent until it first measured a score
    /// at least `target`.
    pub search_hf_to_target: usize,
    pub search_hf_total: usize,
    /// `None` when random search did not reach the target within its cap.
    pub random_hf_to_target: Option<usize>,
    pub random_cap: usize,
}

impl EfficiencyTrial {
    /// Random-search count with censored runs counted at the cap.
    pub fn random_or_cap(&self) -> usize {
        self.random_hf_to_target.unwrap_or(self.random_cap)
    }
}

/// Evaluations (1-based, in ledger order) until a top-rung score of at least
/// `target` was first measured.
pub fn evaluations_to_target(scores: &[f64], target: f64) -> Option<usize> {
    scores.iter().position(|&s| s >= target).map(|i| i + 1)
}

/// Random search on the same problem and backend, with a separate evaluator
/// seed, until it reaches `target` or spends `cap` evaluations.
pub fn random_search_to_target(
    problem: &Problem,
    backend: &SyntheticBackend,
    target: f64,
    steps: u64,
    cap: usize,
    seed: u64,
) -> Result<Option<usize>> {
    let mut ev = Evaluator::new(problem.spec.clone(), Box::new(backend.clone()), Ledger::in_memory(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = random_search(problem, &mut ev, cap, steps, &mut rng)?;
    Ok(res.evaluations_to_reach(target))
}
