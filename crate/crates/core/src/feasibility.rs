//! Hard memory budget: greedy warm-start fill and the repair projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceProfile;
use crate::space::{Config, Knob, ModelSpec};

/// Smoothing constant in the sensitivity-per-byte ratio.
pub const REPAIR_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_bytes: u64,
}

impl Budget {
    /// Rejects budgets below the all-minimum footprint of `spec`.
    pub fn new(max_bytes: u64, spec: &ModelSpec) -> Result<Self> {
        let minimum = spec.memory(&spec.min_config());
        if max_bytes < minimum {
            return Err(Error::BudgetTooSmall {
                budget: max_bytes,
                minimum,
            });
        }
        Ok(Budget { max_bytes })
    }

    /// `min + fraction * (max - min)` of the footprint range.
    pub fn from_fraction(fraction: f64, spec: &ModelSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "budget fraction {fraction} outside [0, 1]"
            )));
        }
        let lo = spec.memory(&spec.min_config());
        let hi = spec.memory(&spec.max_config());
        Budget::new(lo + ((hi - lo) as f64 * fraction).floor() as u64, spec)
    }

    pub fn admits(&self, memory: u64) -> bool {
        memory <= self.max_bytes
    }

    pub fn violation(&self, memory: u64) -> u64 {
        memory.saturating_sub(self.max_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairStep {
    pub layer: usize,
    pub knob: Knob,
    pub from: u32,
    pub to: u32,
    pub bytes_saved: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RepairTrace {
    pub steps: Vec<RepairStep>,
    pub final_memory: u64,
}

/// Bytes freed by moving `(layer, knob)` one rung down.
pub fn downgrade_saving(spec: &ModelSpec, config: &Config, layer: usize, knob: Knob) -> Result<u64> {
    let lower = spec
        .ladders
        .get(knob)
        .lower(config.get(knob, layer))
        .ok_or(Error::AtLadderMinimum { layer, knob })?;
    let (q, r) = (config.q[layer], config.r[layer]);
    let before = spec.layer_memory(layer, q, r);
    let after = match knob {
        Knob::Q => spec.layer_memory(layer, lower, r),
        Knob::R => spec.layer_memory(layer, q, lower),
    };
    Ok(before - after)
}

fn upgrade_cost(spec: &ModelSpec, config: &Config, layer: usize, knob: Knob) -> Option<(u32, u64)> {
    let higher = spec.ladders.get(knob).higher(config.get(knob, layer))?;
    let (q, r) = (config.q[layer], config.r[layer]);
    let before = spec.layer_memory(layer, q, r);
    let after = match knob {
        Knob::Q => spec.layer_memory(layer, higher, r),
        Knob::R => spec.layer_memory(layer, q, higher),
    };
    Some((higher, after - before))
}

/// Projects `config` into the budget by repeatedly applying the downgrade with
/// the smallest `(importance + eps) / bytes_saved`. Ties go to the smaller
/// ratio, then `q` before `r`, then the lower layer index. Feasible inputs
/// come back unchanged.
pub fn repair(
    spec: &ModelSpec,
    config: &Config,
    importance: &ImportanceProfile,
    budget: &Budget,
) -> Result<(Config, RepairTrace)> {
    spec.validate_config(config)?;
    importance.validate(Some(spec.num_layers()))?;
    let mut current = config.clone();
    let mut memory = spec.memory(&current);
    let mut trace = RepairTrace::default();
    while memory > budget.max_bytes {
        let mut best: Option<(f64, usize, Knob, u64)> = None;
        for knob in Knob::ALL {
            for layer in 0..spec.num_layers() {
                let Ok(saved) = downgrade_saving(spec, &current, layer, knob) else {
                    continue;
                };
                if saved == 0 {
                    continue;
                }
                let ratio = (importance.get(knob, layer) + REPAIR_EPSILON) / saved as f64;
                if best.is_none_or(|(b, ..)| ratio < b) {
                    best = Some((ratio, layer, knob, saved));
                }
            }
        }
        let Some((_, layer, knob, saved)) = best else {
            return Err(Error::BudgetUnreachable {
                memory,
                budget: budget.max_bytes,
            });
        };
        let from = current.get(knob, layer);
        let to = spec.ladders.get(knob).lower(from).expect("checked above");
        current.set(knob, layer, to);
        memory -= saved;
        trace.steps.push(RepairStep {
            layer,
            knob,
            from,
            to,
            bytes_saved: saved,
        });
    }
    trace.final_memory = memory;
    Ok((current, trace))
}

/// Importance-shaped warm-start prototype: from the all-minimum config,
/// repeatedly take the single-rung upgrade with the largest
/// `(importance + eps) / bytes_added` that still fits the budget.
pub fn greedy_fill(spec: &ModelSpec, importance: &ImportanceProfile, budget: &Budget) -> Result<Config> {
    importance.validate(Some(spec.num_layers()))?;
    let mut current = spec.min_config();
    let mut memory = spec.memory(&current);
    if memory > budget.max_bytes {
        return Err(Error::BudgetTooSmall {
            budget: budget.max_bytes,
            minimum: memory,
        });
    }
    loop {
        let headroom = budget.max_bytes - memory;
        let mut best: Option<(f64, usize, Knob, u32, u64)> = None;
        for knob in Knob::ALL {
            for layer in 0..spec.num_layers() {
                let Some((to, cost)) = upgrade_cost(spec, &current, layer, knob) else {
                    continue;
                };
                if cost > headroom {
                    continue;
                }
                let score = if cost == 0 {
                    f64::INFINITY
                } else {
                    (importance.get(knob, layer) + REPAIR_EPSILON) / cost as f64
                };
                if best.is_none_or(|(b, ..)| score > b) {
                    best = Some((score, layer, knob, to, cost));
                }
            }
        }
        let Some((_, layer, knob, to, cost)) = best else {
            return Ok(current);
        };
        current.set(knob, layer, to);
        memory += cost;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::normalize_importance;
    use crate::space::{Ladder, Ladders, LayerCatalog, LayerSpec, MemoryPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make_spec(params: &[(u64, u64)], ladders: Ladders) -> ModelSpec {
        let layers = params
            .iter()
            .enumerate()
            .map(|(i, &(n, d))| LayerSpec {
                name: format!("l{i}"),
                backbone_params: n,
                adapter_targets: vec![(d, d)],
            })
            .collect();
        ModelSpec::new(LayerCatalog::new(layers).unwrap(), ladders, MemoryPolicy::default()).unwrap()
    }

    fn random_spec(rng: &mut ChaCha8Rng, layers: usize) -> ModelSpec {
        let params: Vec<_> = (0..layers)
            .map(|_| (rng.random_range(1_000..200_000u64), rng.random_range(8..512u64)))
            .collect();
        make_spec(&params, Ladders::default())
    }

    fn random_config(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Config {
        let l = spec.num_layers();
        Config {
            q: (0..l).map(|_| spec.ladders.q.value(rng.random_range(0..spec.ladders.q.len()))).collect(),
            r: (0..l).map(|_| spec.ladders.r.value(rng.random_range(0..spec.ladders.r.len()))).collect(),
        }
    }

    fn random_importance(rng: &mut ChaCha8Rng, l: usize) -> ImportanceProfile {
        let raw = ImportanceProfile::raw(
            (0..l).map(|_| rng.random::<f64>()).collect(),
            (0..l).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        normalize_importance(&raw)
    }

    fn random_budget(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Budget {
        Budget::from_fraction(rng.random_range(0.0..1.0), spec).unwrap()
    }

    /// Step-by-step replay of the repair rule using full memory recomputation.
    fn replay_repair(spec: &ModelSpec, c: &Config, imp: &ImportanceProfile, b: &Budget) -> (Config, Vec<(usize, Knob)>) {
        let mut c = c.clone();
        let mut steps = vec![];
        while spec.memory(&c) > b.max_bytes {
            let m = spec.memory(&c);
            let mut cands = vec![];
            for (ki, knob) in [Knob::Q, Knob::R].into_iter().enumerate() {
                for l in 0..spec.num_layers() {
                    if let Some(down) = spec.step(&c, l, knob, false) {
                        let saved = m - spec.memory(&down);
                        if saved > 0 {
                            cands.push(((imp.get(knob, l) + REPAIR_EPSILON) / saved as f64, ki, l, knob, down));
                        }
                    }
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let (_, _, l, knob, down) = cands.into_iter().next().expect("reachable");
            steps.push((l, knob));
            c = down;
        }
        (c, steps)
    }

    /// Replay of the greedy recurrence by exhaustive scoring of every upgrade.
    fn replay_fill(spec: &ModelSpec, imp: &ImportanceProfile, b: &Budget) -> Config {
        let mut c = spec.min_config();
        loop {
            let m = spec.memory(&c);
            let mut cands = vec![];
            for (ki, knob) in [Knob::Q, Knob::R].into_iter().enumerate() {
                for l in 0..spec.num_layers() {
                    if let Some(up) = spec.step(&c, l, knob, true) {
                        let mu = spec.memory(&up);
                        if mu <= b.max_bytes {
                            let added = (mu - m) as f64;
                            cands.push(((imp.get(knob, l) + REPAIR_EPSILON) / added, ki, l, up));
                        }
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            match cands.into_iter().next() {
                Some((.., up)) => c = up,
                None => return c,
            }
        }
    }

    #[test]
    fn budget_rejects_below_minimum() {
        let s = make_spec(&[(800, 16)], Ladders::default());
        let min = s.memory(&s.min_config());
        assert!(Budget::new(min - 1, &s).is_err());
        assert!(Budget::new(min, &s).is_ok());
    }

    #[test]
    fn downgrade_saving_examples() {
        let s = make_spec(&[(800, 16)], Ladders::default());
        let c = Config::uniform(1, 8, 4);
        assert_eq!(downgrade_saving(&s, &c, 0, Knob::Q).unwrap(), 400);
        assert!(matches!(
            downgrade_saving(&s, &c, 0, Knob::R),
            Err(Error::AtLadderMinimum { .. })
        ));
        let c = Config::uniform(1, 4, 16);
        for knob in Knob::ALL {
            let saved = downgrade_saving(&s, &c, 0, knob).unwrap();
            let down = s.step(&c, 0, knob, false).unwrap();
            assert_eq!(s.memory(&down), s.memory(&c) - saved);
        }
    }

    #[test]
    fn repair_feasible_input_unchanged() {
        let s = make_spec(&[(800, 16), (800, 16)], Ladders::default());
        let imp = ImportanceProfile::uniform(2);
        let b = Budget::new(s.memory(&s.max_config()), &s).unwrap();
        let c = s.max_config();
        let (out, trace) = repair(&s, &c, &imp, &b).unwrap();
        assert_eq!(out, c);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn repair_prefers_low_sensitivity_at_equal_savings() {
        let s = make_spec(&[(8000, 16), (8000, 16)], Ladders::default());
        let imp = ImportanceProfile {
            iq: vec![0.9, 0.1],
            ir: vec![1.0, 1.0],
            normalized: true,
        };
        let c = Config::uniform(2, 8, 4);
        let b = Budget::new(s.memory(&c) - 1, &s).unwrap();
        let (out, trace) = repair(&s, &c, &imp, &b).unwrap();
        assert_eq!(trace.steps[0].layer, 1);
        assert_eq!(trace.steps[0].knob, Knob::Q);
        assert_eq!(out.q, vec![8, 4]);
    }

    #[test]
    fn repair_matches_replay_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let s = random_spec(&mut rng, 3);
            let imp = random_importance(&mut rng, 3);
            let b = random_budget(&mut rng, &s);
            let c = random_config(&mut rng, &s);
            let (out, trace) = repair(&s, &c, &imp, &b).unwrap();
            let (oracle, steps) = replay_repair(&s, &c, &imp, &b);
            assert_eq!(out, oracle);
            let got: Vec<_> = trace.steps.iter().map(|st| (st.layer, st.knob)).collect();
            assert_eq!(got, steps);
        }
    }

    #[test]
    fn repair_unreachable_is_reported() {
        let s = make_spec(&[(800, 16)], Ladders::default());
        // bypass the Budget constructor check
        let b = Budget { max_bytes: 1 };
        let err = repair(&s, &s.max_config(), &ImportanceProfile::uniform(1), &b).unwrap_err();
        assert!(matches!(err, Error::BudgetUnreachable { .. }));
    }

    #[test]
    fn repair_protects_most_sensitive_layer() {
        // arithmetic ladders: every downgrade on a knob saves the same bytes
        let ladders = Ladders {
            q: Ladder::new(vec![2, 3, 4, 5]).unwrap(),
            r: Ladder::new(vec![4, 8, 12]).unwrap(),
        };
        let s = make_spec(&[(8000, 32); 5], ladders);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let imp = random_importance(&mut rng, 5);
            let b = random_budget(&mut rng, &s);
            let c = random_config(&mut rng, &s);
            let (_, trace) = repair(&s, &c, &imp, &b).unwrap();
            for knob in Knob::ALL {
                let scores = imp.knob(knob);
                let top = (0..5).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                let mut state = c.clone();
                for st in &trace.steps {
                    if st.knob == knob && st.layer == top {
                        for l in 0..5 {
                            if scores[l] < scores[top] {
                                assert!(s.step(&state, l, knob, false).is_none(), "layer {l} still downgradable");
                            }
                        }
                    }
                    state.set(st.knob, st.layer, st.to);
                }
            }
        }
    }

    #[test]
    fn greedy_fill_bounds() {
        let s = make_spec(&[(4000, 16), (9000, 64), (1000, 8)], Ladders::default());
        let imp = ImportanceProfile::uniform(3);
        let tight = Budget::new(s.memory(&s.min_config()), &s).unwrap();
        assert_eq!(greedy_fill(&s, &imp, &tight).unwrap(), s.min_config());
        let ample = Budget::new(s.memory(&s.max_config()), &s).unwrap();
        assert_eq!(greedy_fill(&s, &imp, &ample).unwrap(), s.max_config());
    }

    #[test]
    fn greedy_fill_matches_replay_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let s = random_spec(&mut rng, 2);
            let imp = random_importance(&mut rng, 2);
            let b = random_budget(&mut rng, &s);
            let got = greedy_fill(&s, &imp, &b).unwrap();
            assert_eq!(got, replay_fill(&s, &imp, &b));
            assert!(s.memory(&got) <= b.max_bytes);
        }
    }

    #[test]
    fn trace_serializes() {
        let t = RepairTrace {
            steps: vec![RepairStep { layer: 1, knob: Knob::R, from: 16, to: 8, bytes_saved: 42 }],
            final_memory: 10,
        };
        let j = serde_json::to_string(&t).unwrap();
        assert!(j.contains("\"knob\":\"r\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn repair_is_sound_and_idempotent(seed in any::<u64>(), layers in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_spec(&mut rng, layers);
            let imp = random_importance(&mut rng, layers);
            let b = random_budget(&mut rng, &s);
            let c = random_config(&mut rng, &s);
            let (out, trace) = repair(&s, &c, &imp, &b).unwrap();
            prop_assert!(s.memory(&out) <= b.max_bytes);
            prop_assert_eq!(trace.final_memory, s.memory(&out));
            prop_assert!(trace.steps.iter().all(|st| st.bytes_saved > 0));
            let bound: usize = (0..layers).map(|l| s.index(&c, Knob::Q, l) + s.index(&c, Knob::R, l)).sum();
            prop_assert!(trace.steps.len() <= bound);
            let (again, t2) = repair(&s, &out, &imp, &b).unwrap();
            prop_assert_eq!(again, out);
            prop_assert!(t2.steps.is_empty());
        }
    }
}
