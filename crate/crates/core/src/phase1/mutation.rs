//! Population initialization and the two importance-guided mutations.

use std::collections::HashSet;

use rand::Rng;

use crate::feasibility::RepairTrace;
use crate::problem::Problem;
use crate::space::{Config, Knob};

const DEDUP_ATTEMPTS: usize = 10;

fn random_knob<R: Rng + ?Sized>(rng: &mut R) -> Knob {
    if rng.random_bool(0.5) {
        Knob::Q
    } else {
        Knob::R
    }
}

/// One adjacent-rung move with a uniform direction, reflected at the ends.
fn step_reflected<R: Rng + ?Sized>(problem: &Problem, config: &Config, layer: usize, knob: Knob, rng: &mut R) -> Config {
    let up = rng.random_bool(0.5);
    problem
        .spec
        .step(config, layer, knob, up)
        .or_else(|| problem.spec.step(config, layer, knob, !up))
        .expect("ladders have at least two rungs")
}

/// Prototype followed by `size - 1` repaired variants, each `edits` random
/// sensitivity-guided atomic moves away from the prototype.
pub fn init_population<R: Rng + ?Sized>(
    problem: &Problem,
    prototype: &Config,
    size: usize,
    edits: usize,
    gamma: f64,
    rng: &mut R,
) -> Vec<Config> {
    if size == 0 {
        return Vec::new();
    }
    let mut out = vec![prototype.clone()];
    let mut seen: HashSet<Config> = out.iter().cloned().collect();
    while out.len() < size {
        let mut candidate = prototype.clone();
        for attempt in 0..=DEDUP_ATTEMPTS {
            candidate = prototype.clone();
            for _ in 0..edits {
                let knob = random_knob(rng);
                let layer = problem.sample_layer(knob, gamma, rng);
                candidate = step_reflected(problem, &candidate, layer, knob, rng);
            }
            candidate = problem.repair(&candidate).0;
            if !seen.contains(&candidate) || attempt == DEDUP_ATTEMPTS {
                break;
            }
        }
        seen.insert(candidate.clone());
        out.push(candidate);
    }
    out
}

/// Sensitivity-guided mutation: uniform knob, layer drawn with probability
/// proportional to `(I + eps)^gamma`, one reflected step, then repair.
pub fn mutate_sensitivity<R: Rng + ?Sized>(
    problem: &Problem,
    config: &Config,
    gamma: f64,
    rng: &mut R,
) -> (Config, RepairTrace) {
    let knob = random_knob(rng);
    let layer = problem.sample_layer(knob, gamma, rng);
    let moved = step_reflected(problem, config, layer, knob, rng);
    problem.repair(&moved)
}

/// Memory-balanced mutation: one upgrade on a sensitivity-sampled variable,
/// after which repair performs the compensating downgrades. Returns the
/// input unchanged when every variable is at its ladder maximum.
pub fn mutate_coupled<R: Rng + ?Sized>(
    problem: &Problem,
    config: &Config,
    gamma: f64,
    rng: &mut R,
) -> (Config, RepairTrace) {
    let first = random_knob(rng);
    let other = if first == Knob::Q { Knob::R } else { Knob::Q };
    for knob in [first, other] {
        let ladder = problem.spec.ladders.get(knob);
        let mut weights = problem.layer_weights(knob, gamma);
        for (l, w) in weights.iter_mut().enumerate() {
            if config.get(knob, l) == ladder.max() {
                *w = 0.0;
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let layer = crate::problem::sample_weighted(&weights, rng);
        let moved = problem.spec.step(config, layer, knob, true).expect("upgradable");
        return problem.repair(&moved);
    }
    let trace = RepairTrace {
        steps: Vec::new(),
        final_memory: problem.memory(config),
    };
    (config.clone(), trace)
}
