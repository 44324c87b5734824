//! Evaluation contract `P(C; T)` and the caching evaluator around it.
//!
//! A [`Backend`] turns an [`EvalRequest`] into a score. The [`Evaluator`]
//! consults the [`Ledger`] first, attaches the resume token of the most
//! advanced earlier evaluation of the same config, retries a failed backend
//! call once and appends every fresh result.

mod external;
mod ledger;
mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::thread;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Config, ModelSpec};

pub use external::{ExternalBackend, WireRequest, WireResponse};
pub use ledger::{Ledger, LedgerKey};
pub use synthetic::{
    synthetic_importance, synthetic_score, SyntheticBackend, SyntheticLatent,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub config: Config,
    pub steps: u64,
    pub seed: u64,
    pub resume_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub score: f64,
    pub token: Option<String>,
    /// Backends that know their own cost report it; otherwise the evaluator
    /// measures elapsed time.
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    External,
}

/// Scores configurations. Implementations must be deterministic for a fixed
/// `(config, steps, seed)`.
pub trait Backend: Send + Sync {
    fn source(&self) -> Source;
    fn evaluate(&self, request: &EvalRequest) -> Result<BackendResponse>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Adhoc,
    Phase1,
    Phase2,
    RandomSearch,
    Oracle,
}

/// Where in a run an evaluation was requested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    /// Generation (phase 1) or iteration (phase 2, baselines).
    pub round: u64,
}

impl Provenance {
    pub fn new(stage: Stage, round: u64) -> Self {
        Provenance { stage, round }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config: Config,
    pub steps: u64,
    pub score: f64,
    pub seed: u64,
    pub memory_bytes: u64,
    pub wall_time_s: f64,
    pub source: Source,
    /// Token issued by the backend for continuing from this checkpoint.
    pub resume_token: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

pub struct Evaluator {
    spec: ModelSpec,
    backend: Box<dyn Backend>,
    ledger: Ledger,
    seed: u64,
    workers: usize,
    backend_calls: BTreeMap<u64, usize>,
    failures: usize,
}

impl Evaluator {
    pub fn new(spec: ModelSpec, backend: Box<dyn Backend>, ledger: Ledger, seed: u64) -> Self {
        Evaluator {
            spec,
            backend,
            ledger,
            seed,
            workers: 1,
            backend_calls: BTreeMap::new(),
            failures: 0,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn into_ledger(self) -> Ledger {
        self.ledger
    }

    /// Fresh (non-cached) backend evaluations at `steps` so far.
    pub fn backend_calls(&self, steps: u64) -> usize {
        self.backend_calls.get(&steps).copied().unwrap_or(0)
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn is_measured(&self, config: &Config, steps: u64) -> bool {
        self.ledger
            .lookup(&self.key(config, steps))
            .is_some()
    }

    fn key(&self, config: &Config, steps: u64) -> LedgerKey {
        LedgerKey {
            config: config.clone(),
            steps,
            seed: self.seed,
        }
    }

    fn request(&self, config: &Config, steps: u64) -> EvalRequest {
        let resume_token = self
            .ledger
            .latest_below(config, self.seed, steps)
            .and_then(|r| r.resume_token.clone());
        EvalRequest {
            config: config.clone(),
            steps,
            seed: self.seed,
            resume_token,
        }
    }

    pub fn evaluate(&mut self, config: &Config, steps: u64, provenance: Provenance) -> Result<EvalRecord> {
        let request = self.request(config, steps);
        self.evaluate_request(&request, provenance)
    }

    /// Evaluates an explicit request. Its seed need not match the
    /// evaluator's default seed.
    pub fn evaluate_request(&mut self, request: &EvalRequest, provenance: Provenance) -> Result<EvalRecord> {
        self.check_request(request)?;
        let key = LedgerKey {
            config: request.config.clone(),
            steps: request.steps,
            seed: request.seed,
        };
        if let Some(hit) = self.ledger.lookup(&key) {
            return Ok(hit.clone());
        }
        let outcome = call_with_retry(self.backend.as_ref(), request);
        self.finish(request, outcome, provenance)
    }

    /// Evaluates many configs at one step count. Cache misses run on up to
    /// `workers` threads; records are appended in input order.
    pub fn evaluate_batch(
        &mut self,
        configs: &[Config],
        steps: u64,
        provenance: Provenance,
    ) -> Result<Vec<Result<EvalRecord>>> {
        let mut requests: Vec<EvalRequest> = Vec::new();
        let mut slot: HashMap<Config, usize> = HashMap::new();
        for c in configs {
            self.spec.validate_config(c)?;
            if !self.is_measured(c, steps) && !slot.contains_key(c) {
                slot.insert(c.clone(), requests.len());
                requests.push(self.request(c, steps));
            }
        }

        let backend = self.backend.as_ref();
        let mut outcomes: Vec<Option<Timed>> = (0..requests.len()).map(|_| None).collect();
        if self.workers <= 1 || requests.len() <= 1 {
            for (o, req) in outcomes.iter_mut().zip(&requests) {
                *o = Some(call_with_retry(backend, req));
            }
        } else {
            let chunk = requests.len().div_ceil(self.workers);
            thread::scope(|scope| {
                for (outs, reqs) in outcomes.chunks_mut(chunk).zip(requests.chunks(chunk)) {
                    scope.spawn(move || {
                        for (o, req) in outs.iter_mut().zip(reqs) {
                            *o = Some(call_with_retry(backend, req));
                        }
                    });
                }
            });
        }

        let mut fresh: Vec<Option<Result<EvalRecord>>> = Vec::with_capacity(requests.len());
        for (req, outcome) in requests.iter().zip(outcomes) {
            let outcome = outcome.expect("every request dispatched");
            fresh.push(Some(match self.finish(req, outcome, provenance) {
                Err(e @ Error::Evaluation(_)) => Err(e),
                Err(other) => return Err(other),
                ok => ok,
            }));
        }

        Ok(configs
            .iter()
            .map(|c| match slot.get(c) {
                Some(&i) => match &fresh[i] {
                    Some(Ok(r)) => Ok(r.clone()),
                    Some(Err(e)) => Err(Error::Evaluation(e.to_string())),
                    None => unreachable!(),
                },
                None => Ok(self
                    .ledger
                    .lookup(&self.key(c, steps))
                    .expect("cached")
                    .clone()),
            })
            .collect())
    }

    fn check_request(&self, request: &EvalRequest) -> Result<()> {
        self.spec.validate_config(&request.config)?;
        if request.steps == 0 {
            return Err(Error::InvalidParameter("steps must be positive".into()));
        }
        Ok(())
    }

    fn finish(&mut self, request: &EvalRequest, outcome: Timed, provenance: Provenance) -> Result<EvalRecord> {
        let (response, elapsed) = match outcome {
            Ok(ok) => ok,
            Err(e) => {
                self.failures += 1;
                warn!("evaluation of {} at T={} failed: {e}", request.config, request.steps);
                return Err(Error::Evaluation(e.to_string()));
            }
        };
        if !response.score.is_finite() {
            self.failures += 1;
            return Err(Error::Evaluation(format!(
                "backend returned non-finite score {}",
                response.score
            )));
        }
        let record = EvalRecord {
            config: request.config.clone(),
            steps: request.steps,
            score: response.score,
            seed: request.seed,
            memory_bytes: self.spec.memory(&request.config),
            wall_time_s: response.wall_time_s.unwrap_or(elapsed),
            source: self.backend.source(),
            resume_token: response.token,
            provenance,
        };
        self.ledger.append(record.clone())?;
        *self.backend_calls.entry(request.steps).or_default() += 1;
        Ok(record)
    }
}

type Timed = Result<(BackendResponse, f64)>;

fn call_with_retry(backend: &dyn Backend, request: &EvalRequest) -> Timed {
    let start = Instant::now();
    let first = backend.evaluate(request);
    let response = match first {
        Ok(r) => r,
        Err(e) => {
            warn!("backend call failed ({e}); retrying once");
            backend.evaluate(request)?
        }
    };
    Ok((response, start.elapsed().as_secs_f64()))
}
