//! Successive halving over a fixed ladder of training-step counts.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Evaluator, Provenance};
use crate::phase1::surrogate::{
    fit_screening_surrogate, screening_features, ScreeningSurrogate, TrainingPair,
};
use crate::space::{Config, ModelSpec};
use crate::stats::spearman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShaLadder {
    pub step_counts: Vec<u64>,
    pub eta: f64,
    pub n_lf: usize,
    pub n_hf: usize,
}

impl Default for ShaLadder {
    fn default() -> Self {
        ShaLadder {
            step_counts: vec![100, 400, 1600],
            eta: 2.9,
            n_lf: 25,
            n_hf: 3,
        }
    }
}

impl ShaLadder {
    pub fn validate(&self) -> Result<()> {
        if self.step_counts.is_empty() || self.step_counts[0] == 0 {
            return Err(Error::InvalidParameter("step ladder needs positive step counts".into()));
        }
        if self.step_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "step counts {:?} must be strictly increasing",
                self.step_counts
            )));
        }
        if !(self.eta > 1.0) {
            return Err(Error::InvalidParameter(format!("eta {} must exceed 1", self.eta)));
        }
        if self.n_hf == 0 || self.n_hf > self.n_lf {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= n_hf ({}) <= n_lf ({})",
                self.n_hf, self.n_lf
            )));
        }
        Ok(())
    }

    pub fn rungs(&self) -> usize {
        self.step_counts.len()
    }

    pub fn top_steps(&self) -> u64 {
        *self.step_counts.last().expect("validated ladder")
    }

    /// Size of the cohort entering `rung` when `previous` candidates finished
    /// the rung below.
    pub fn keep(&self, rung: usize, previous: usize) -> usize {
        let k = if rung + 1 == self.rungs() {
            self.n_hf
        } else {
            self.n_hf.max((previous as f64 / self.eta).floor() as usize)
        };
        k.min(previous)
    }

    /// Cohort sizes per rung for an initial cohort of `n` with no failures.
    pub fn cohort_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for s in 1..self.rungs() {
            let prev = sizes[s - 1];
            sizes.push(self.keep(s, prev));
        }
        sizes
    }
}

/// Predicts the top-rung score of a candidate from its score at a lower rung.
pub trait Screener {
    fn predict(&self, rung: usize, config: &Config, memory_bytes: u64, score: f64) -> Option<f64>;
}

/// Never predicts; promotion uses measured scores.
pub struct NoScreening;

impl Screener for NoScreening {
    fn predict(&self, _: usize, _: &Config, _: u64, _: f64) -> Option<f64> {
        None
    }
}

/// One screening model per non-final rung plus their accumulated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningBank {
    pub huber_delta: f64,
    pub ridge: f64,
    pub min_pairs: usize,
    pub pairs: Vec<Vec<TrainingPair>>,
    pub models: Vec<ScreeningSurrogate>,
    #[serde(skip)]
    spec: Option<ModelSpec>,
}

impl ScreeningBank {
    pub fn new(spec: &ModelSpec, rungs: usize, huber_delta: f64, ridge: f64, min_pairs: usize) -> Self {
        let n = rungs.saturating_sub(1);
        ScreeningBank {
            huber_delta,
            ridge,
            min_pairs,
            pairs: vec![Vec::new(); n],
            models: vec![ScreeningSurrogate::untrained(huber_delta, ridge, 0); n],
            spec: Some(spec.clone()),
        }
    }

    pub fn trained(&self) -> Vec<bool> {
        self.models.iter().map(|m| m.is_trained()).collect()
    }

    /// Adds pairs, reports the current models' held-out Spearman correlation
    /// on them, then refits every rung.
    pub fn update(&mut self, new_pairs: Vec<Vec<TrainingPair>>) -> Vec<Option<f64>> {
        let mut heldout = Vec::with_capacity(self.models.len());
        for (s, fresh) in new_pairs.into_iter().enumerate().take(self.models.len()) {
            let preds: Option<Vec<f64>> = fresh.iter().map(|p| self.models[s].predict(&p.features)).collect();
            let targets: Vec<f64> = fresh.iter().map(|p| p.target).collect();
            heldout.push(preds.filter(|p| p.len() >= 2).and_then(|p| spearman(&p, &targets)));
            self.pairs[s].extend(fresh);
            self.models[s] = fit_screening_surrogate(&self.pairs[s], self.huber_delta, self.ridge, self.min_pairs);
        }
        heldout
    }
}

impl Screener for ScreeningBank {
    fn predict(&self, rung: usize, config: &Config, memory_bytes: u64, score: f64) -> Option<f64> {
        let model = self.models.get(rung)?;
        if !model.is_trained() {
            return None;
        }
        let spec = self.spec.as_ref()?;
        model.predict(&screening_features(score, memory_bytes, &spec.embed(config)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub steps: u64,
    /// Configs that entered the rung.
    pub cohort: Vec<Config>,
    pub failed: usize,
    /// Whether the ranking that chose the next cohort used predictions.
    pub screened: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ShaOutcome {
    pub rungs: Vec<RungReport>,
    /// Every record produced or looked up, in evaluation order.
    pub records: Vec<EvalRecord>,
    /// Measured score per config and step count.
    pub scores: HashMap<Config, BTreeMap<u64, f64>>,
    /// Top-rung records of the promoted survivors.
    pub promoted: Vec<EvalRecord>,
    /// Prediction of the top-rung score at each candidate's last rung.
    pub predicted: HashMap<Config, f64>,
    /// `(lower-rung features, top-rung score)` for every promoted survivor,
    /// indexed by rung.
    pub new_pairs: Vec<Vec<TrainingPair>>,
}

impl ShaOutcome {
    pub fn cohort_sizes(&self) -> Vec<usize> {
        self.rungs.iter().map(|r| r.cohort.len() - r.failed).collect()
    }
}

/// Runs one successive-halving pass. Failed evaluations shrink the cohort;
/// when every candidate chosen for a rung fails, the next-ranked ones are
/// tried in turn so at least one survives while any remain.
pub fn run_sha_generation(
    candidates: &[Config],
    ladder: &ShaLadder,
    screener: &dyn Screener,
    evaluator: &mut Evaluator,
    provenance: Provenance,
) -> Result<ShaOutcome> {
    ladder.validate()?;
    let mut out = ShaOutcome {
        new_pairs: vec![Vec::new(); ladder.rungs() - 1],
        ..ShaOutcome::default()
    };
    let mut seen = HashSet::new();
    let mut ranked: Vec<Config> = candidates.iter().filter(|c| seen.insert((*c).clone())).cloned().collect();
    let mut take = ranked.len();
    let mut last_records: Vec<EvalRecord> = Vec::new();

    for (s, &steps) in ladder.step_counts.iter().enumerate() {
        let (cohort, reserve) = ranked.split_at(take.min(ranked.len()));
        let mut report = RungReport {
            steps,
            cohort: cohort.to_vec(),
            failed: 0,
            screened: false,
        };
        let mut survivors = Vec::new();
        for result in evaluator.evaluate_batch(cohort, steps, provenance)? {
            match result {
                Ok(rec) => survivors.push(rec),
                Err(e) => {
                    warn!("dropping candidate at T={steps}: {e}");
                    report.failed += 1;
                }
            }
        }
        if s > 0 {
            for c in reserve {
                if !survivors.is_empty() {
                    break;
                }
                report.cohort.push(c.clone());
                match evaluator.evaluate(c, steps, provenance) {
                    Ok(rec) => survivors.push(rec),
                    Err(e @ Error::Evaluation(_)) => {
                        warn!("dropping force-promoted candidate at T={steps}: {e}");
                        report.failed += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for rec in &survivors {
            out.scores.entry(rec.config.clone()).or_default().insert(steps, rec.score);
        }
        out.records.extend(survivors.iter().cloned());

        if s + 1 < ladder.rungs() {
            let mut keyed: Vec<(usize, f64, &EvalRecord)> = Vec::with_capacity(survivors.len());
            let mut screened = true;
            for (i, rec) in survivors.iter().enumerate() {
                match screener.predict(s, &rec.config, rec.memory_bytes, rec.score) {
                    Some(p) => {
                        out.predicted.insert(rec.config.clone(), p);
                        keyed.push((i, p, rec));
                    }
                    None => {
                        screened = false;
                        keyed.push((i, rec.score, rec));
                    }
                }
            }
            if !screened {
                // mixed rankings are not comparable; use measured scores
                keyed = survivors.iter().enumerate().map(|(i, r)| (i, r.score, r)).collect();
            }
            report.screened = screened && !survivors.is_empty();
            keyed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            take = ladder.keep(s + 1, survivors.len());
            ranked = keyed.into_iter().map(|(_, _, r)| r.config.clone()).collect();
        }
        out.rungs.push(report);
        last_records = survivors;
        if last_records.is_empty() {
            break;
        }
    }

    if out.rungs.len() == ladder.rungs() {
        let spec = evaluator.spec();
        for rec in &last_records {
            let scores = &out.scores[&rec.config];
            let embedding = spec.embed(&rec.config);
            for (s, &steps) in ladder.step_counts[..ladder.rungs() - 1].iter().enumerate() {
                out.new_pairs[s].push(TrainingPair {
                    features: screening_features(scores[&steps], rec.memory_bytes, &embedding),
                    target: rec.score,
                });
            }
        }
        out.promoted = last_records;
    }
    Ok(out)
}
