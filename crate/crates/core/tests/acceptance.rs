//! Acceptance suite. Every test prints one `PASS`/`FAIL` line with the
//! measured values, then asserts the criterion (including its runtime limit).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrsearch::baselines::{brute_force_oracle, oracle_utility_spec};
use qrsearch::evaluator::{synthetic_importance, EvalRecord, Ledger, SyntheticBackend, SyntheticLatent};
use qrsearch::experiments::{
    evaluations_to_target, random_search_to_target, screening_hit_rate_trial, HitRateSettings,
};
use qrsearch::feasibility::{repair, Budget, REPAIR_EPSILON};
use qrsearch::importance::ImportanceProfile;
use qrsearch::manifest::{BudgetSpec, EvaluatorSpec, ImportanceSpec, RunManifest};
use qrsearch::phase1::hypervolume::{hypervolume, should_stop_phase1};
use qrsearch::phase1::nsga2::{non_dominated_fronts, Objectives};
use qrsearch::phase1::{run_phase1, Phase1Params, StopReason};
use qrsearch::phase2::gp::{expected_improvement, fit_gp, matern52, GpGrid};
use qrsearch::phase2::{run_phase2, Phase2Params};
use qrsearch::pipeline::{search, search_into, Session, BEST_FILE, LEDGER_FILE};
use qrsearch::problem::Problem;
use qrsearch::space::{
    layer_memory, Config, Knob, Ladder, Ladders, LayerCatalog, LayerSpec, MemoryPolicy, ModelSpec,
};
use qrsearch::stats::{median, paired_t_test, spearman};

const TOP: u64 = 1600;

fn verdict(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let ok = pass && elapsed < limit;
    println!(
        "{} [{id}] {name}: {detail} ({:.2}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {id} ({name}) not met: {detail}");
    assert!(elapsed < limit, "criterion {id} ({name}) over its runtime limit");
}

/// `layers` identical blocks with one 1024x1024 adapter target.
fn block_spec(layers: usize) -> ModelSpec {
    let layers = (0..layers)
        .map(|i| LayerSpec {
            name: format!("l{i}"),
            backbone_params: 1 << 20,
            adapter_targets: vec![(1024, 1024)],
        })
        .collect();
    ModelSpec::new(LayerCatalog::new(layers).unwrap(), Ladders::default(), MemoryPolicy::default()).unwrap()
}

fn random_ladder(rng: &mut ChaCha8Rng, pool: &[u32]) -> Ladder {
    let mut v: Vec<u32> = pool.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
    if v.len() < 2 {
        v = pool[..2].to_vec();
    }
    Ladder::new(v).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, max_layers: usize) -> ModelSpec {
    let n = rng.random_range(1..=max_layers);
    let layers = (0..n)
        .map(|i| LayerSpec {
            name: format!("layer{i}"),
            backbone_params: rng.random_range(1..5_000_000),
            adapter_targets: (0..rng.random_range(0..4))
                .map(|_| (rng.random_range(1..5000), rng.random_range(1..5000)))
                .collect(),
        })
        .collect();
    let policy = MemoryPolicy {
        adapter_precision_bits: *[4u32, 8, 16, 32, 3].get(rng.random_range(0..5)).unwrap(),
        quant_group_size: rng.random_range(1..300),
        meta_bytes_per_group: rng.random_range(0..9),
    };
    let ladders = Ladders {
        q: random_ladder(rng, &[2, 3, 4, 6, 8, 16]),
        r: random_ladder(rng, &[1, 2, 4, 8, 16, 32, 64]),
    };
    ModelSpec::new(LayerCatalog::new(layers).unwrap(), ladders, policy).unwrap()
}

fn random_config(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Config {
    let pick = |l: &Ladder, rng: &mut ChaCha8Rng| l.values()[rng.random_range(0..l.len())];
    let n = spec.num_layers();
    Config {
        q: (0..n).map(|_| pick(&spec.ladders.q, rng)).collect(),
        r: (0..n).map(|_| pick(&spec.ladders.r, rng)).collect(),
    }
}

/// Re-summation in bits with u128 arithmetic, layers visited in reverse.
#[allow(clippy::manual_div_ceil)]
fn memory_oracle(spec: &ModelSpec, config: &Config) -> u64 {
    let p = spec.policy();
    let mut total: u128 = 0;
    for (i, layer) in spec.catalog().layers().iter().enumerate().rev() {
        let n = layer.backbone_params as u128;
        let weight_bits = n * config.q[i] as u128;
        let groups = (n + p.quant_group_size as u128 - 1) / p.quant_group_size as u128;
        let mut adapter_params: u128 = 0;
        for &(d_in, d_out) in &layer.adapter_targets {
            adapter_params += config.r[i] as u128 * d_in as u128 + config.r[i] as u128 * d_out as u128;
        }
        let adapter_bits = adapter_params * p.adapter_precision_bits as u128;
        total += (weight_bits + 7) / 8 + groups * p.meta_bytes_per_group as u128 + (adapter_bits + 7) / 8;
    }
    u64::try_from(total).unwrap()
}

#[test]
fn criterion_01_memory_accounting() {
    let start = Instant::now();
    let block = LayerSpec {
        name: "blk".into(),
        backbone_params: 16_777_216,
        adapter_targets: vec![(4096, 4096)],
    };
    let hand = layer_memory(&block, 4, 16, &MemoryPolicy::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..100 {
        let spec = random_spec(&mut rng, 12);
        for _ in 0..10 {
            let c = random_config(&spec, &mut rng);
            checked += 1;
            if spec.memory(&c) != memory_oracle(&spec, &c) {
                mismatches += 1;
            }
        }
    }
    verdict(
        1,
        "memory accounting",
        hand == 9_699_328 && mismatches == 0,
        start.elapsed(),
        Duration::from_secs(1),
        format!("hand example {hand} bytes (want 9699328), {mismatches}/{checked} oracle mismatches over 100 catalogs"),
    );
}

/// Replays the downgrade rule step by step from scratch: minimum
/// `(importance + eps) / saved` over every legal one-rung downgrade, ties to
/// `q`, then the lower layer.
fn repair_oracle(spec: &ModelSpec, config: &Config, imp: &ImportanceProfile, budget: u64) -> (Config, usize) {
    let mut c = config.clone();
    let mut steps = 0;
    while memory_oracle(spec, &c) > budget {
        let before = memory_oracle(spec, &c);
        let mut moves: Vec<(f64, usize, usize, Config)> = Vec::new();
        for (k, knob) in [Knob::Q, Knob::R].into_iter().enumerate() {
            for layer in 0..spec.num_layers() {
                let ladder = spec.ladders.get(knob).values();
                let pos = ladder.iter().position(|&v| v == c.get(knob, layer)).unwrap();
                if pos == 0 {
                    continue;
                }
                let next = c.with(knob, layer, ladder[pos - 1]);
                let saved = before - memory_oracle(spec, &next);
                if saved == 0 {
                    continue;
                }
                let value = match knob {
                    Knob::Q => imp.iq[layer],
                    Knob::R => imp.ir[layer],
                };
                moves.push(((value + REPAIR_EPSILON) / saved as f64, k, layer, next));
            }
        }
        let best = moves
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .expect("instances are built with a reachable budget");
        c = best.3;
        steps += 1;
    }
    (c, steps)
}

#[test]
fn criterion_02_repair_soundness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut infeasible_out, mut not_idempotent, mut oracle_mismatch, mut replayed) = (0, 0, 0, 0);
    let mut done = 0;
    while done < 1000 {
        let spec = random_spec(&mut rng, 8);
        let c = random_config(&spec, &mut rng);
        let lo = spec.memory(&spec.min_config());
        let m = spec.memory(&c);
        if m <= lo {
            continue;
        }
        let budget = Budget::new(rng.random_range(lo..m), &spec).unwrap();
        let n = spec.num_layers();
        // coarse values so that ratio ties occur
        let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..4) as f64 / 3.0).collect::<Vec<_>>();
        let imp = ImportanceProfile::raw(draw(&mut rng), draw(&mut rng)).unwrap();
        let (out, trace) = repair(&spec, &c, &imp, &budget).unwrap();
        done += 1;
        if spec.memory(&out) > budget.max_bytes || trace.final_memory != spec.memory(&out) {
            infeasible_out += 1;
        }
        let (again, again_trace) = repair(&spec, &out, &imp, &budget).unwrap();
        if again != out || !again_trace.steps.is_empty() {
            not_idempotent += 1;
        }
        if n == 3 || done % 4 == 0 {
            replayed += 1;
            let (want, steps) = repair_oracle(&spec, &c, &imp, budget.max_bytes);
            if want != out || steps != trace.steps.len() {
                oracle_mismatch += 1;
            }
        }
    }
    // dedicated L=3 instances on the default ladders
    let mut l3 = 0;
    while l3 < 300 {
        let mut spec = random_spec(&mut rng, 3);
        if spec.num_layers() != 3 {
            continue;
        }
        spec.ladders = Ladders::default();
        let c = random_config(&spec, &mut rng);
        let lo = spec.memory(&spec.min_config());
        let m = spec.memory(&c);
        if m <= lo {
            continue;
        }
        let budget = Budget::new(rng.random_range(lo..m), &spec).unwrap();
        let draw = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.random_range(0..4) as f64 / 3.0).collect::<Vec<_>>();
        let imp = ImportanceProfile::raw(draw(&mut rng), draw(&mut rng)).unwrap();
        let (out, trace) = repair(&spec, &c, &imp, &budget).unwrap();
        let (want, steps) = repair_oracle(&spec, &c, &imp, budget.max_bytes);
        if want != out || steps != trace.steps.len() {
            oracle_mismatch += 1;
        }
        replayed += 1;
        l3 += 1;
    }
    verdict(
        2,
        "repair soundness",
        infeasible_out == 0 && not_idempotent == 0 && oracle_mismatch == 0,
        start.elapsed(),
        Duration::from_secs(5),
        format!(
            "1000 infeasible inputs: {infeasible_out} infeasible outputs, {not_idempotent} non-idempotent; {oracle_mismatch}/{replayed} step-replay mismatches"
        ),
    );
}

/// Peels off the points that nothing remaining dominates.
fn brute_force_fronts(points: &[Objectives]) -> Vec<Vec<usize>> {
    let dom = |a: &Objectives, b: &Objectives| {
        let (fa, fb) = (a.violation <= 0.0, b.violation <= 0.0);
        if fa != fb {
            return fa;
        }
        if !fa {
            return a.violation < b.violation;
        }
        !(a.score < b.score || a.memory > b.memory) && (a.score != b.score || a.memory != b.memory)
    };
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> =
            left.iter().copied().filter(|&i| !left.iter().any(|&j| dom(&points[j], &points[i]))).collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

#[test]
fn criterion_03_nsga2_fronts() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatched = 0;
    let mut max_fronts = 0;
    for _ in 0..50 {
        let points: Vec<Objectives> = (0..30)
            .map(|_| Objectives {
                score: rng.random_range(0..8) as f64 / 8.0,
                memory: rng.random_range(0..8) as f64,
                violation: if rng.random_bool(0.2) { rng.random_range(1..4) as f64 } else { 0.0 },
            })
            .collect();
        let fast = non_dominated_fronts(&points);
        let brute = brute_force_fronts(&points);
        max_fronts = max_fronts.max(brute.len());
        if fast != brute {
            mismatched += 1;
        }
    }
    verdict(
        3,
        "NSGA-II fronts",
        mismatched == 0,
        start.elapsed(),
        Duration::from_secs(5),
        format!("{mismatched}/50 populations differ from brute force (up to {max_fronts} fronts)"),
    );
}

#[test]
fn criterion_04_hypervolume() {
    let start = Instant::now();
    let one = hypervolume(&[(0.8, 10.0)], 20.0);
    let two = hypervolume(&[(0.8, 10.0), (0.6, 5.0)], 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mut pts: Vec<(f64, f64)> =
            (0..rng.random_range(1..12)).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..100.0))).collect();
        let base = hypervolume(&pts, 100.0);
        for _ in 0..5 {
            let (s, m) = pts[rng.random_range(0..pts.len())];
            pts.push((s * rng.random_range(0.0..1.0), m + rng.random_range(0.0..(100.0 - m))));
        }
        worst = worst.max((hypervolume(&pts, 100.0) - base).abs());
    }
    verdict(
        4,
        "hypervolume",
        (one - 8.0).abs() <= 1e-12 && (two - 11.0).abs() <= 1e-12 && worst <= 1e-12,
        start.elapsed(),
        Duration::from_secs(1),
        format!("examples {one} and {two} (want 8 and 11), max change from dominated points {worst:e}"),
    );
}

#[test]
fn criterion_05_gp_ei() {
    let start = Instant::now();
    let k1 = matern52(&[0.0], &[1.0], 1.0, 1.0);
    let s5 = 5f64.sqrt();
    let closed = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x[0].sin() + 0.3 * x[1] * x[2] - 0.2 * x[2]).collect();
    let grid = GpGrid {
        noise: vec![1e-12],
        ..GpGrid::default()
    };
    let gp = fit_gp(&xs, &ys, &grid);
    let residual = xs.iter().zip(&ys).map(|(x, y)| (gp.posterior(x).0 - y).abs()).fold(0.0, f64::max);

    // mu equal to the incumbent leaves only the sigma * pdf(0) term
    let ei = expected_improvement(0.3, 0.5, 0.3);
    let ei_closed = 0.5 / (2.0 * std::f64::consts::PI).sqrt();
    let mut monotone = true;
    for i in 0..41 {
        let mu = -1.0 + 0.05 * i as f64;
        let mut prev = expected_improvement(mu, 0.0, 0.0);
        for j in 1..100 {
            let e = expected_improvement(mu, 0.02 * j as f64, 0.0);
            monotone &= e >= prev;
            prev = e;
        }
    }
    verdict(
        5,
        "GP/EI numerics",
        format!("{k1:.5}") == "0.52399"
            && (k1 - closed).abs() < 1e-9
            && residual < 1e-4
            && format!("{ei:.5}") == "0.19947"
            && (ei - ei_closed).abs() <= 1e-6
            && monotone,
        start.elapsed(),
        Duration::from_secs(10),
        format!(
            "matern(1) {k1:.9} (closed form {closed:.9}), interpolation residual {residual:.2e}, EI {ei:.9} (closed form {ei_closed:.9}), monotone in sigma {monotone}"
        ),
    );
}

#[test]
fn criterion_06_screening_benefit() {
    let start = Instant::now();
    let spec = block_spec(16);
    let p1 = Phase1Params::default();
    let settings = HitRateSettings::from_phase1(&p1, 60);
    let (lo, hi) = (spec.memory(&spec.min_config()), spec.memory(&spec.max_config()));
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for t in 0..50u64 {
        let latent = SyntheticLatent::sample(16, 100 + t, 400.0);
        let backend = SyntheticBackend::new(latent.clone(), &spec.ladders, p1.ladder.step_counts[0]).unwrap();
        let problem = Problem::new(spec.clone(), lo + (hi - lo) / 2, synthetic_importance(&latent, 0.0, t)).unwrap();
        let trial = screening_hit_rate_trial(&problem, &backend, &p1.ladder, &settings, t).unwrap();
        assert!(trial.surrogate_trained);
        with.push(trial.surrogate);
        without.push(trial.measured);
    }
    let test = paired_t_test(&with, &without).unwrap();
    verdict(
        6,
        "surrogate screening benefit",
        test.mean_diff > 0.0 && test.p_value < 0.05,
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "L=16, 50 trials: top-3 hit rate {:.3} with surrogate vs {:.3} measured, t {:.2}, one-sided p {:.4}",
            qrsearch::stats::mean(&with),
            qrsearch::stats::mean(&without),
            test.t,
            test.p_value
        ),
    );
}

struct OracleRun {
    hits: usize,
    max_hf: usize,
    ranks: Vec<usize>,
}

fn oracle_runs(importance: ImportanceSpec, noise: Option<f64>) -> OracleRun {
    let mut run = OracleRun { hits: 0, max_hf: 0, ranks: Vec::new() };
    for seed in 0..10 {
        let mut m = RunManifest::synthetic(block_spec(3), BudgetSpec::Fraction(0.5), seed, 1000 + seed);
        m.importance = importance.clone();
        if let (EvaluatorSpec::Synthetic { noise_scale, .. }, Some(n)) = (&mut m.evaluator, noise) {
            *noise_scale = n;
        }
        m.phase1.max_generations = 4;
        m.phase2.max_evaluations = 15;
        let mut s = Session::new(&m, Ledger::in_memory()).unwrap();
        let out = search(&mut s, &m).unwrap();
        let backend = s.synthetic.clone().unwrap();
        let oracle = brute_force_oracle(&s.problem, &backend, TOP, m.alpha()).unwrap();
        let bounds = oracle_utility_spec(&oracle, m.alpha()).unwrap();
        let k = (oracle.len() as f64 * 0.01).ceil() as usize;
        let threshold = oracle[k - 1].utility;
        let u = bounds.scalarize(backend.expected_score(&out.best.config, TOP), s.problem.memory(&out.best.config));
        run.hits += usize::from(u >= threshold);
        run.max_hf = run.max_hf.max(s.evaluator.backend_calls(TOP));
        run.ranks.push(oracle.iter().position(|o| o.config == out.best.config).unwrap() + 1);
    }
    run
}

#[test]
fn criterion_07_oracle_near_optimality() {
    let start = Instant::now();
    let main = oracle_runs(ImportanceSpec::Auto { noise: 0.0 }, None);
    let elapsed = start.elapsed();
    let control = oracle_runs(ImportanceSpec::Uniform, Some(0.0));
    verdict(
        7,
        "oracle near-optimality",
        main.hits >= 9 && main.max_hf <= 30,
        elapsed,
        Duration::from_secs(180),
        format!(
            "L=3, 729 configs: top-1% in {}/10 seeds (ranks {:?}), max {} HF evals; control without noise and with uniform importance: {}/10",
            main.hits, main.ranks, main.max_hf, control.hits
        ),
    );
}

#[test]
fn criterion_08_sample_efficiency() {
    let start = Instant::now();
    let (mut search_hf, mut random_hf, mut first_hit) = (Vec::new(), Vec::new(), Vec::new());
    let mut censored = 0;
    const CAP: usize = 2000;
    for seed in 0..20 {
        let m = RunManifest::synthetic(block_spec(32), BudgetSpec::Fraction(0.5), seed, 2000 + seed);
        let mut s = Session::new(&m, Ledger::in_memory()).unwrap();
        let out = search(&mut s, &m).unwrap();
        let scores: Vec<f64> = s.top_records(TOP).iter().map(|r| r.score).collect();
        first_hit.push(evaluations_to_target(&scores, out.best.score).unwrap() as f64);
        search_hf.push(s.evaluator.backend_calls(TOP) as f64);
        let backend = s.synthetic.clone().unwrap();
        let r = random_search_to_target(&s.problem, &backend, out.best.score, TOP, CAP, seed + 77).unwrap();
        censored += usize::from(r.is_none());
        random_hf.push(r.unwrap_or(CAP) as f64);
    }
    let (ms, mr) = (median(&search_hf), median(&random_hf));
    verdict(
        8,
        "sample efficiency",
        mr >= 5.0 * ms,
        start.elapsed(),
        Duration::from_secs(300),
        format!(
            "L=32, 20 seeds: median random HF to target {mr} ({censored} censored at {CAP}) vs median search HF {ms} (ratio {:.1}, first reached after {})",
            mr / ms,
            median(&first_hit)
        ),
    );
}

/// High compensability on the most sensitive layers: the sampled `b` values
/// sorted and assigned in order of `a`.
fn rank_aligned_latent(layers: usize, seed: u64) -> SyntheticLatent {
    let mut latent = SyntheticLatent::sample(layers, seed, 400.0);
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&x, &y| latent.sensitivity[x].total_cmp(&latent.sensitivity[y]));
    let mut b = latent.compensability.clone();
    b.sort_by(f64::total_cmp);
    for (k, &i) in order.iter().enumerate() {
        latent.compensability[i] = b[k];
    }
    latent
}

#[test]
fn criterion_09_compensation_pattern() {
    let start = Instant::now();
    let mut rhos = Vec::new();
    for seed in 0..10 {
        let latent = rank_aligned_latent(32, 3000 + seed);
        let mut m = RunManifest::synthetic(block_spec(32), BudgetSpec::Fraction(0.5), seed, 0);
        if let EvaluatorSpec::Synthetic { latent: l, .. } = &mut m.evaluator {
            *l = Some(latent);
        }
        let mut s = Session::new(&m, Ledger::in_memory()).unwrap();
        let best = search(&mut s, &m).unwrap().best.config;
        let q: Vec<f64> = best.q.iter().map(|&v| v as f64).collect();
        let r: Vec<f64> = best.r.iter().map(|&v| v as f64).collect();
        rhos.push(spearman(&q, &r).unwrap_or(0.0));
    }
    let med = median(&rhos);
    verdict(
        9,
        "compensation pattern",
        med < 0.0,
        start.elapsed(),
        Duration::from_secs(180),
        format!(
            "L=32, rank-aligned compensability, 10 seeds: median Spearman(q, r) {med:.3}, negative in {}/10 ({:?})",
            rhos.iter().filter(|&&x| x < 0.0).count(),
            rhos.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_10_reproducibility() {
    let start = Instant::now();
    let mut m = RunManifest::synthetic(block_spec(8), BudgetSpec::Fraction(0.4), 11, 12);
    m.workers = 4;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    search_into(&m, a.path()).unwrap();
    search_into(&m, b.path()).unwrap();
    let same = |f: &str| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap();
    let lines = std::fs::read_to_string(a.path().join(LEDGER_FILE)).unwrap().lines().count();
    verdict(
        10,
        "reproducibility",
        same(LEDGER_FILE) && same(BEST_FILE),
        start.elapsed(),
        Duration::from_secs(180),
        format!("ledger ({lines} records) identical {}, best config identical {}", same(LEDGER_FILE), same(BEST_FILE)),
    );
}

#[test]
fn criterion_11_termination() {
    let start = Instant::now();
    let p = Phase1Params::default();
    let flat_stops = should_stop_phase1(&[3.0; 4], p.eps_hv, p.patience, p.eps_den)
        && !should_stop_phase1(&[3.0; 3], p.eps_hv, p.patience, p.eps_den)
        && should_stop_phase1(&[1.0, 2.0, 2.0, 2.0, 2.0], p.eps_hv, p.patience, p.eps_den);

    // every phase 1 run stops exactly when its trace first meets the rule
    let mut rule_consistent = true;
    let mut converged = 0;
    for seed in 0..5 {
        let m = RunManifest::synthetic(block_spec(6), BudgetSpec::Fraction(0.4), seed, 40 + seed);
        let mut s = Session::new(&m, Ledger::in_memory()).unwrap();
        let out = run_phase1(&s.problem, &mut s.evaluator, &m.phase1, &s.streams).unwrap();
        let trace = &out.archive.hv_trace;
        let first = (1..=trace.len()).find(|&g| should_stop_phase1(&trace[..g], p.eps_hv, p.patience, p.eps_den));
        rule_consistent &= match out.stop_reason {
            StopReason::HypervolumeConverged => first == Some(trace.len()),
            StopReason::GenerationCap => first.is_none() && out.generations == m.phase1.max_generations,
        };
        converged += usize::from(out.stop_reason == StopReason::HypervolumeConverged);
    }

    let base = RunManifest::synthetic(block_spec(6), BudgetSpec::Fraction(0.4), 9, 9);
    let mut archive_size = 0;
    let mut phase2 = |params: &Phase2Params| {
        let mut s = Session::new(&base, Ledger::in_memory()).unwrap();
        let p1 = run_phase1(&s.problem, &mut s.evaluator, &base.phase1, &s.streams).unwrap();
        archive_size = p1.archive.len();
        let initial: Vec<EvalRecord> = s.top_records(TOP);
        let before = s.evaluator.backend_calls(TOP);
        let out = run_phase2(&s.problem, &mut s.evaluator, &initial, TOP, params, &s.streams).unwrap();
        (out.evaluations, s.evaluator.backend_calls(TOP) - before)
    };
    let infinite = phase2(&Phase2Params {
        eps_ei: f64::INFINITY,
        ..Phase2Params::default()
    });
    let mut within_cap = true;
    let mut counts = Vec::new();
    for (n_max, regions, per_region) in [(30, 3, 5), (4, 3, 5), (50, 2, 3), (50, 1, 2), (10, 4, 1)] {
        let mut params = Phase2Params {
            eps_ei: 0.0,
            max_evaluations: n_max,
            ..Phase2Params::default()
        };
        params.trust.regions = regions;
        params.trust.per_region_cap = per_region;
        let (evals, calls) = phase2(&params);
        within_cap &= evals <= n_max.min(regions * per_region) && calls <= evals;
        counts.push(format!("{evals}<={}", n_max.min(regions * per_region)));
    }
    verdict(
        11,
        "termination",
        flat_stops && rule_consistent && infinite == (0, 0) && within_cap,
        start.elapsed(),
        Duration::from_secs(60),
        format!(
            "flat traces stop {flat_stops}, phase 1 stops agree with the rule {rule_consistent} ({converged}/5 converged, archive of {} in the reference run); eps_ei=inf gives {} evaluations; caps {}",
            archive_size,
            infinite.0,
            counts.join(", ")
        ),
    );
}
