//! A search instance: design space, budget and the importance profile that
//! shapes proposals and repair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feasibility::{self, Budget, RepairTrace, REPAIR_EPSILON};
use crate::importance::{normalize_importance, ImportanceProfile};
use crate::space::{Config, Knob, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub spec: ModelSpec,
    pub budget: Budget,
    /// Always normalized.
    pub importance: ImportanceProfile,
}

impl Problem {
    /// Validates the budget and normalizes `importance` if it is raw.
    pub fn new(spec: ModelSpec, budget_bytes: u64, importance: ImportanceProfile) -> Result<Self> {
        let budget = Budget::new(budget_bytes, &spec)?;
        importance.validate(Some(spec.num_layers()))?;
        let importance = if importance.normalized {
            importance
        } else {
            normalize_importance(&importance)
        };
        Ok(Problem {
            spec,
            budget,
            importance,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    pub fn memory(&self, config: &Config) -> u64 {
        self.spec.memory(config)
    }

    pub fn is_feasible(&self, config: &Config) -> bool {
        self.budget.admits(self.memory(config))
    }

    pub fn repair(&self, config: &Config) -> (Config, RepairTrace) {
        feasibility::repair(&self.spec, config, &self.importance, &self.budget)
            .expect("budget admits the all-minimum config")
    }

    pub fn prototype(&self) -> Config {
        feasibility::greedy_fill(&self.spec, &self.importance, &self.budget)
            .expect("profile validated at construction")
    }

    /// Layer-selection weights `(I + eps)^gamma` for one knob.
    pub fn layer_weights(&self, knob: Knob, gamma: f64) -> Vec<f64> {
        self.importance
            .knob(knob)
            .iter()
            .map(|&i| (i + REPAIR_EPSILON).powf(gamma))
            .collect()
    }

    /// Draws a layer with probability proportional to `(I + eps)^gamma`.
    pub fn sample_layer<R: Rng + ?Sized>(&self, knob: Knob, gamma: f64, rng: &mut R) -> usize {
        let weights = self.layer_weights(knob, gamma);
        sample_weighted(&weights, rng)
    }

    /// Uniformly random config (each variable uniform on its ladder).
    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Config {
        random_config_in(&self.spec, rng)
    }
}

/// Uniformly random config over the whole design space, ignoring the budget.
pub fn random_config_in<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Config {
    let l = spec.num_layers();
    let (q, r) = (&spec.ladders.q, &spec.ladders.r);
    Config {
        q: (0..l).map(|_| q.value(rng.random_range(0..q.len()))).collect(),
        r: (0..l).map(|_| r.value(rng.random_range(0..r.len()))).collect(),
    }
}

pub(crate) fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
