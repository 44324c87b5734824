//! Reference searches: budget-repaired random sampling and exhaustive
//! noiseless enumeration.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Evaluator, Provenance, Stage, SyntheticBackend};
use crate::phase2::utility::UtilitySpec;
use crate::problem::Problem;
use crate::space::{Config, Knob, ModelSpec};

/// Largest design space the oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchResult {
    pub records: Vec<EvalRecord>,
    /// Running maximum of the measured score.
    pub best_so_far: Vec<f64>,
    pub failures: usize,
}

impl RandomSearchResult {
    /// 1-based number of evaluations until the running maximum reaches
    /// `target`.
    pub fn evaluations_to_reach(&self, target: f64) -> Option<usize> {
        self.best_so_far.iter().position(|&b| b >= target).map(|i| i + 1)
    }
}

/// `n_evals` uniformly random configs, each repaired into the budget and
/// measured at `steps`. Failed evaluations are logged and skipped.
pub fn random_search<R: Rng + ?Sized>(
    problem: &Problem,
    evaluator: &mut Evaluator,
    n_evals: usize,
    steps: u64,
    rng: &mut R,
) -> Result<RandomSearchResult> {
    if n_evals == 0 {
        return Err(Error::InvalidParameter("random search needs n_evals >= 1".into()));
    }
    let mut out = RandomSearchResult {
        records: Vec::with_capacity(n_evals),
        best_so_far: Vec::with_capacity(n_evals),
        failures: 0,
    };
    let mut best = f64::NEG_INFINITY;
    for i in 0..n_evals {
        let (config, _) = problem.repair(&problem.random_config(rng));
        match evaluator.evaluate(&config, steps, Provenance::new(Stage::RandomSearch, i as u64)) {
            Ok(rec) => {
                best = best.max(rec.score);
                out.best_so_far.push(best);
                out.records.push(rec);
            }
            Err(e @ Error::Evaluation(_)) => {
                warn!("random search evaluation {i} failed: {e}");
                out.failures += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub config: Config,
    pub score: f64,
    pub memory_bytes: u64,
    pub utility: f64,
}

/// Every config of the design space in mixed-radix order (layer-major, `q`
/// before `r`).
pub fn enumerate_configs(spec: &ModelSpec) -> Result<Vec<Config>> {
    let count = spec.space_size();
    if count > ORACLE_LIMIT {
        return Err(Error::SpaceTooLarge {
            count,
            limit: ORACLE_LIMIT,
        });
    }
    let l = spec.num_layers();
    let radices: Vec<(usize, Knob)> = (0..l).flat_map(|layer| Knob::ALL.map(|k| (layer, k))).collect();
    let mut digits = vec![0usize; radices.len()];
    let mut out = Vec::with_capacity(count as usize);
    loop {
        let mut c = spec.min_config();
        for (&d, &(layer, knob)) in digits.iter().zip(&radices) {
            c.set(knob, layer, spec.ladders.get(knob).value(d));
        }
        out.push(c);
        let mut pos = radices.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < spec.ladders.get(radices[pos].1).len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Noise-free top-rung scores of every feasible config, sorted by utility
/// (bounds over the feasible set; ties by smaller memory). Refuses spaces
/// larger than [`ORACLE_LIMIT`].
pub fn brute_force_oracle(
    problem: &Problem,
    backend: &SyntheticBackend,
    steps: u64,
    alpha: f64,
) -> Result<Vec<OracleEntry>> {
    let mut entries: Vec<OracleEntry> = enumerate_configs(&problem.spec)?
        .into_iter()
        .filter(|c| problem.is_feasible(c))
        .map(|c| OracleEntry {
            score: backend.expected_score(&c, steps),
            memory_bytes: problem.memory(&c),
            config: c,
            utility: 0.0,
        })
        .collect();
    let spec = UtilitySpec::from_observations(alpha, entries.iter().map(|e| (e.score, e.memory_bytes)))?;
    for e in &mut entries {
        e.utility = spec.scalarize(e.score, e.memory_bytes);
    }
    entries.sort_by(|a, b| {
        b.utility
            .total_cmp(&a.utility)
            .then(a.memory_bytes.cmp(&b.memory_bytes))
            .then(a.config.cmp(&b.config))
    });
    Ok(entries)
}

/// Utility bounds of an oracle listing.
pub fn oracle_utility_spec(entries: &[OracleEntry], alpha: f64) -> Result<UtilitySpec> {
    UtilitySpec::from_observations(alpha, entries.iter().map(|e| (e.score, e.memory_bytes)))
}
