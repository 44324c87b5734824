//! Discrete trust regions in atomic-edit distance.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Problem;
use crate::space::{Config, Knob, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub center: Config,
    pub radius: usize,
    /// Top-rung evaluations generated from this region.
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionParams {
    pub regions: usize,
    pub diversity: usize,
    pub init_radius: usize,
    pub min_radius: usize,
    /// `None` means twice the number of layers.
    pub max_radius: Option<usize>,
    pub grow: f64,
    pub shrink: f64,
    pub pool_per_region: usize,
    pub per_region_cap: usize,
}

impl Default for TrustRegionParams {
    fn default() -> Self {
        TrustRegionParams {
            regions: 3,
            diversity: 2,
            init_radius: 2,
            min_radius: 1,
            max_radius: None,
            grow: 2.0,
            shrink: 0.5,
            pool_per_region: 256,
            per_region_cap: 5,
        }
    }
}

impl TrustRegionParams {
    pub fn max_radius_for(&self, layers: usize) -> usize {
        self.max_radius.unwrap_or(2 * layers).max(self.min_radius)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.min_radius == 0 || self.pool_per_region == 0 {
            return Err(Error::InvalidParameter(
                "trust regions need regions, min_radius and pool_per_region >= 1".into(),
            ));
        }
        if self.init_radius < self.min_radius || self.max_radius.is_some_and(|m| m < self.init_radius) {
            return Err(Error::InvalidParameter(format!(
                "initial radius {} outside [{}, {:?}]",
                self.init_radius, self.min_radius, self.max_radius
            )));
        }
        if !(self.grow >= 1.0) || !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::InvalidParameter("need grow >= 1 and 0 < shrink <= 1".into()));
        }
        Ok(())
    }
}

/// Greedy diverse centers: candidates in the given order (best first) are
/// accepted when at least `diversity` atomic edits from every accepted one.
pub fn init_trust_regions(
    spec: &ModelSpec,
    ranked: &[Config],
    regions: usize,
    diversity: usize,
    init_radius: usize,
) -> Vec<TrustRegion> {
    let mut out: Vec<TrustRegion> = Vec::new();
    for c in ranked {
        if out.len() >= regions {
            break;
        }
        let far = out.iter().all(|r| {
            spec.atomic_distance(&r.center, c).expect("same design space") >= diversity
        });
        if far {
            out.push(TrustRegion {
                center: c.clone(),
                radius: init_radius,
                accepted: 0,
            });
        }
    }
    out
}

/// Radius (and center) update for the region that produced the last
/// evaluation.
pub fn update_region(region: &mut TrustRegion, improved: bool, new_config: &Config, params: &TrustRegionParams, layers: usize) {
    let factor = if improved { params.grow } else { params.shrink };
    let scaled = (region.radius as f64 * factor).round() as usize;
    region.radius = scaled.clamp(params.min_radius, params.max_radius_for(layers));
    if improved {
        region.center = new_config.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMember {
    pub config: Config,
    pub region: usize,
    /// Walk endpoint before repair.
    pub proposal: Config,
}

/// Repaired random walks of length `1..=radius` from each open region's
/// center. Each step moves one sensitivity-sampled variable one rung
/// (direction uniform, reflected at the ladder ends). Members are distinct
/// and none satisfies `exclude`.
pub fn propose_pool<R: Rng + ?Sized>(
    problem: &Problem,
    regions: &[TrustRegion],
    params: &TrustRegionParams,
    gamma: f64,
    exclude: &dyn Fn(&Config) -> bool,
    rng: &mut R,
) -> Vec<PoolMember> {
    let mut seen: HashSet<Config> = HashSet::new();
    let mut pool = Vec::new();
    for (j, region) in regions.iter().enumerate() {
        if region.accepted >= params.per_region_cap {
            continue;
        }
        for _ in 0..params.pool_per_region {
            let steps = rng.random_range(1..=region.radius.max(1));
            let mut walk = region.center.clone();
            for _ in 0..steps {
                let knob = if rng.random_bool(0.5) { Knob::Q } else { Knob::R };
                let layer = problem.sample_layer(knob, gamma, rng);
                let up = rng.random_bool(0.5);
                walk = problem
                    .spec
                    .step(&walk, layer, knob, up)
                    .or_else(|| problem.spec.step(&walk, layer, knob, !up))
                    .expect("ladders have at least two rungs");
            }
            let (repaired, _) = problem.repair(&walk);
            if exclude(&repaired) || !seen.insert(repaired.clone()) {
                continue;
            }
            pool.push(PoolMember {
                config: repaired,
                region: j,
                proposal: walk,
            });
        }
    }
    pool
}
