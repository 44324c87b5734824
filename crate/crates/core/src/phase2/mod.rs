//! Local refinement of one operating point.
//!
//! Measured top-rung records are scalarized with [`UtilitySpec`], a GP on the
//! ordinal embedding scores repaired random-walk candidates from a few
//! diverse trust regions by expected improvement, and the single best
//! candidate is measured per iteration.

pub mod gp;
pub mod trust_region;
pub mod utility;

use std::collections::HashSet;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Evaluator, Provenance, Stage};
use crate::problem::Problem;
use crate::rng::SeedStreams;
use crate::space::Config;

use gp::{expected_improvement, fit_gp, GpGrid, GpHyper};
use trust_region::{init_trust_regions, propose_pool, update_region, TrustRegion, TrustRegionParams};
use utility::UtilitySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Params {
    pub alpha: f64,
    pub eps_ei: f64,
    /// Cap on phase 2 top-rung evaluations.
    pub max_evaluations: usize,
    pub gamma: f64,
    pub trust: TrustRegionParams,
    pub gp_grid: GpGrid,
}

impl Default for Phase2Params {
    fn default() -> Self {
        Phase2Params {
            alpha: 0.9,
            eps_ei: 1e-4,
            max_evaluations: 30,
            gamma: 2.0,
            trust: TrustRegionParams::default(),
            gp_grid: GpGrid::default(),
        }
    }
}

impl Phase2Params {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.eps_ei.is_nan() || !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter("need a numeric eps_ei and gamma > 0".into()));
        }
        self.trust.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Iteration {
    pub iteration: usize,
    pub max_ei: f64,
    pub pool_size: usize,
    /// Incumbent utility under the bounds used for this iteration's GP.
    pub incumbent_utility: f64,
    pub region: Option<usize>,
    pub candidate: Option<Config>,
    pub score: Option<f64>,
    pub improved: bool,
    pub failed_candidates: usize,
    pub radii: Vec<usize>,
    pub hyper: Option<GpHyper>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Stop {
    ExpectedImprovement,
    EvaluationCap,
    RegionsCapped,
    PoolExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Result {
    pub best: EvalRecord,
    pub best_utility: f64,
    pub utility: UtilitySpec,
    /// All top-rung records considered, initial ones first.
    pub measured: Vec<EvalRecord>,
    pub evaluations: usize,
    pub regions: Vec<TrustRegion>,
    pub trace: Vec<Phase2Iteration>,
    pub stop_reason: Phase2Stop,
}

fn bounds(alpha: f64, data: &[EvalRecord]) -> UtilitySpec {
    UtilitySpec::from_observations(alpha, data.iter().map(|r| (r.score, r.memory_bytes)))
        .expect("alpha validated and data non-empty")
}

/// Index of the highest utility; ties go to the smaller memory, then the
/// earlier record.
fn incumbent(spec: &UtilitySpec, data: &[EvalRecord]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in data.iter().enumerate() {
        let u = spec.scalarize(r.score, r.memory_bytes);
        let better = u > best.1 || (u == best.1 && r.memory_bytes < data[best.0].memory_bytes);
        if better {
            best = (i, u);
        }
    }
    best
}

/// Refines from the given measured records (any non-top-rung or infeasible
/// entries are ignored) and returns the best measured configuration.
pub fn run_phase2(
    problem: &Problem,
    evaluator: &mut Evaluator,
    initial: &[EvalRecord],
    top_steps: u64,
    params: &Phase2Params,
    streams: &SeedStreams,
) -> Result<Phase2Result> {
    params.validate()?;
    let layers = problem.num_layers();
    let mut seen = HashSet::new();
    let mut data: Vec<EvalRecord> = initial
        .iter()
        .filter(|r| r.steps == top_steps && problem.budget.admits(r.memory_bytes))
        .filter(|r| seen.insert(r.config.clone()))
        .cloned()
        .collect();
    if data.is_empty() {
        return Err(Error::InvalidParameter(
            "phase 2 needs at least one feasible top-rung record".into(),
        ));
    }
    let mut rng = streams.rng(SeedStreams::POOL);

    let spec0 = bounds(params.alpha, &data);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| {
        let (ua, ub) = (
            spec0.scalarize(data[a].score, data[a].memory_bytes),
            spec0.scalarize(data[b].score, data[b].memory_bytes),
        );
        ub.total_cmp(&ua).then(data[a].memory_bytes.cmp(&data[b].memory_bytes)).then(a.cmp(&b))
    });
    let ranked: Vec<Config> = order.iter().map(|&i| data[i].config.clone()).collect();
    let mut regions = init_trust_regions(
        &problem.spec,
        &ranked,
        params.trust.regions,
        params.trust.diversity,
        params.trust.init_radius,
    );
    let max_radius = params.trust.max_radius_for(layers);

    let mut failed: HashSet<Config> = HashSet::new();
    let mut trace = Vec::new();
    let mut evaluations = 0;
    let stop_reason = loop {
        if evaluations >= params.max_evaluations {
            break Phase2Stop::EvaluationCap;
        }
        if regions.iter().all(|r| r.accepted >= params.trust.per_region_cap) {
            break Phase2Stop::RegionsCapped;
        }
        let spec = bounds(params.alpha, &data);
        let ys: Vec<f64> = data.iter().map(|r| spec.scalarize(r.score, r.memory_bytes)).collect();
        let xs: Vec<Vec<f64>> = data.iter().map(|r| problem.spec.embed(&r.config).0).collect();
        let (_, y_plus) = incumbent(&spec, &data);
        let model = fit_gp(&xs, &ys, &params.gp_grid);

        let measured = |c: &Config| failed.contains(c) || evaluator.is_measured(c, top_steps);
        let mut pool = propose_pool(problem, &regions, &params.trust, params.gamma, &measured, &mut rng);
        if pool.is_empty() {
            for r in regions.iter_mut() {
                r.radius = (r.radius + 1).min(max_radius);
            }
            pool = propose_pool(problem, &regions, &params.trust, params.gamma, &measured, &mut rng);
        }
        let mut record = Phase2Iteration {
            iteration: evaluations,
            max_ei: f64::NEG_INFINITY,
            pool_size: pool.len(),
            incumbent_utility: y_plus,
            region: None,
            candidate: None,
            score: None,
            improved: false,
            failed_candidates: 0,
            radii: regions.iter().map(|r| r.radius).collect(),
            hyper: (!model.is_constant()).then(|| model.hyper()),
        };
        if pool.is_empty() {
            trace.push(record);
            break Phase2Stop::PoolExhausted;
        }

        let mut scored: Vec<(f64, usize)> = pool
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let (mu, sd) = model.posterior(&problem.spec.embed(&m.config).0);
                (expected_improvement(mu, sd, y_plus), i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        record.max_ei = scored[0].0;
        if !(record.max_ei >= params.eps_ei) {
            trace.push(record);
            break Phase2Stop::ExpectedImprovement;
        }

        let provenance = Provenance::new(Stage::Phase2, evaluations as u64);
        let mut outcome = None;
        for &(ei, i) in &scored {
            if ei < params.eps_ei {
                break;
            }
            let member = &pool[i];
            match evaluator.evaluate(&member.config, top_steps, provenance) {
                Ok(rec) => {
                    outcome = Some((member.region, rec));
                    break;
                }
                Err(e @ Error::Evaluation(_)) => {
                    warn!("phase 2 candidate {} failed: {e}", member.config);
                    failed.insert(member.config.clone());
                    record.failed_candidates += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let Some((j, rec)) = outcome else {
            trace.push(record);
            continue;
        };

        data.push(rec.clone());
        evaluations += 1;
        let refreshed = bounds(params.alpha, &data);
        let previous_best = data[..data.len() - 1]
            .iter()
            .map(|r| refreshed.scalarize(r.score, r.memory_bytes))
            .fold(f64::NEG_INFINITY, f64::max);
        let improved = refreshed.scalarize(rec.score, rec.memory_bytes) > previous_best;
        regions[j].accepted += 1;
        update_region(&mut regions[j], improved, &rec.config, &params.trust, layers);

        record.region = Some(j);
        record.candidate = Some(rec.config.clone());
        record.score = Some(rec.score);
        record.improved = improved;
        info!(
            "phase 2 iteration {}: EI {:.3e}, region {j}, score {:.5}, improved {improved}",
            record.iteration, record.max_ei, rec.score
        );
        trace.push(record);
    };

    let utility = bounds(params.alpha, &data);
    let (bi, best_utility) = incumbent(&utility, &data);
    Ok(Phase2Result {
        best: data[bi].clone(),
        best_utility,
        utility,
        measured: data,
        evaluations,
        regions,
        trace,
        stop_reason,
    })
}

/// One JSON object per line.
pub fn trace_jsonl(trace: &[Phase2Iteration]) -> Result<String> {
    let mut out = String::new();
    for t in trace {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::json("phase 2 trace", e))?);
        out.push('\n');
    }
    Ok(out)
}
