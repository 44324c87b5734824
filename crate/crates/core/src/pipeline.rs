//! End-to-end runs driven by a [`RunManifest`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Evaluator, Ledger, SyntheticBackend};
use crate::manifest::RunManifest;
use crate::phase1::{run_phase1, telemetry_jsonl, ParetoArchive, Phase1Result};
use crate::phase2::{run_phase2, trace_jsonl, Phase2Result};
use crate::problem::Problem;
use crate::rng::SeedStreams;
use crate::space::Config;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PARETO_FILE: &str = "pareto.json";
pub const BEST_FILE: &str = "best.json";
pub const PHASE1_TELEMETRY_FILE: &str = "phase1_telemetry.jsonl";
pub const PHASE2_TRACE_FILE: &str = "phase2_trace.jsonl";

pub struct Session {
    pub problem: Problem,
    pub evaluator: Evaluator,
    pub streams: SeedStreams,
    /// The synthetic backend, when the run uses one.
    pub synthetic: Option<SyntheticBackend>,
}

impl Session {
    pub fn new(manifest: &RunManifest, ledger: Ledger) -> Result<Self> {
        manifest.validate()?;
        let spec = manifest.model.clone();
        let reference_steps = manifest.phase1.ladder.step_counts[0];
        let (backend, synthetic) = manifest.evaluator.backend(&spec, reference_steps)?;
        let streams = SeedStreams::new(manifest.seed);
        let importance = manifest.importance.resolve(
            spec.num_layers(),
            synthetic.as_ref().map(|b| b.latent()),
            streams.seed_for(SeedStreams::NOISE),
        )?;
        let budget = manifest.budget.resolve(&spec)?;
        let problem = Problem::new(spec.clone(), budget.max_bytes, importance)?;
        let evaluator = Evaluator::new(spec, backend, ledger, manifest.seed).with_workers(manifest.workers);
        Ok(Session {
            problem,
            evaluator,
            streams,
            synthetic,
        })
    }

    /// Top-rung records of this run's seed, in ledger order.
    pub fn top_records(&self, top_steps: u64) -> Vec<EvalRecord> {
        self.evaluator
            .ledger()
            .at_steps(top_steps)
            .filter(|r| r.seed == self.evaluator.seed())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub config: Config,
    pub score: f64,
    pub memory_bytes: u64,
    pub utility: f64,
    pub alpha: f64,
    pub steps: u64,
    pub seed: u64,
}

impl BestConfig {
    pub fn from_phase2(result: &Phase2Result, alpha: f64) -> Self {
        BestConfig {
            config: result.best.config.clone(),
            score: result.best.score,
            memory_bytes: result.best.memory_bytes,
            utility: result.best_utility,
            alpha,
            steps: result.best.steps,
            seed: result.best.seed,
        }
    }
}

pub struct SearchOutcome {
    pub phase1: Phase1Result,
    pub phase2: Phase2Result,
    pub best: BestConfig,
}

/// Phase 1 then phase 2, seeded by every top-rung record in the ledger.
pub fn search(session: &mut Session, manifest: &RunManifest) -> Result<SearchOutcome> {
    let phase1 = run_phase1(&session.problem, &mut session.evaluator, &manifest.phase1, &session.streams)?;
    let phase2 = refine(session, manifest, &[])?;
    let best = BestConfig::from_phase2(&phase2, manifest.alpha());
    Ok(SearchOutcome { phase1, phase2, best })
}

/// Phase 2 from `extra` records plus every top-rung record already in the
/// ledger.
pub fn refine(session: &mut Session, manifest: &RunManifest, extra: &[EvalRecord]) -> Result<Phase2Result> {
    let top = manifest.top_steps();
    let mut initial: Vec<EvalRecord> = extra.to_vec();
    initial.extend(session.top_records(top));
    run_phase2(
        &session.problem,
        &mut session.evaluator,
        &initial,
        top,
        &manifest.phase2,
        &session.streams,
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Creates `out`, saves the manifest and opens the ledger inside it.
pub fn open_run_dir(manifest: &RunManifest, out: &Path) -> Result<Session> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    manifest.save(out.join(MANIFEST_FILE))?;
    let ledger = Ledger::open(out.join(LEDGER_FILE))?;
    Session::new(manifest, ledger)
}

pub fn write_phase1(out: &Path, result: &Phase1Result) -> Result<()> {
    write_json(&out.join(PARETO_FILE), &result.archive)?;
    write_text(&out.join(PHASE1_TELEMETRY_FILE), &telemetry_jsonl(&result.telemetry)?)
}

pub fn write_phase2(out: &Path, result: &Phase2Result, alpha: f64) -> Result<()> {
    write_json(&out.join(BEST_FILE), &BestConfig::from_phase2(result, alpha))?;
    write_text(&out.join(PHASE2_TRACE_FILE), &trace_jsonl(&result.trace)?)
}

pub fn load_archive(path: &Path) -> Result<ParetoArchive> {
    read_json(path)
}

/// Full pipeline into `out`: manifest, ledger, archive, best config, traces.
pub fn search_into(manifest: &RunManifest, out: &Path) -> Result<SearchOutcome> {
    let mut session = open_run_dir(manifest, out)?;
    let outcome = search(&mut session, manifest)?;
    write_phase1(out, &outcome.phase1)?;
    write_phase2(out, &outcome.phase2, manifest.alpha())?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::BudgetSpec;
    use crate::space::{Ladders, LayerCatalog, LayerSpec, MemoryPolicy, ModelSpec};

    fn manifest(seed: u64) -> RunManifest {
        let layers = (0..4)
            .map(|i| LayerSpec {
                name: format!("l{i}"),
                backbone_params: 65536,
                adapter_targets: vec![(256, 256)],
            })
            .collect();
        let model = ModelSpec::new(LayerCatalog::new(layers).unwrap(), Ladders::default(), MemoryPolicy::default())
            .unwrap();
        let mut m = RunManifest::synthetic(model, BudgetSpec::Fraction(0.5), seed, 7);
        m.phase1.max_generations = 2;
        m.phase2.max_evaluations = 4;
        m
    }

    #[test]
    fn search_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(1);
        let out = search_into(&m, dir.path()).unwrap();
        for f in [MANIFEST_FILE, LEDGER_FILE, PARETO_FILE, BEST_FILE, PHASE1_TELEMETRY_FILE, PHASE2_TRACE_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let best: BestConfig = read_json(&dir.path().join(BEST_FILE)).unwrap();
        assert_eq!(best, out.best);
        let archive = load_archive(&dir.path().join(PARETO_FILE)).unwrap();
        assert_eq!(archive, out.phase1.archive);
        let ledger = Ledger::load(dir.path().join(LEDGER_FILE)).unwrap();
        assert!(ledger.records().iter().any(|r| r.config == best.config && r.steps == 1600));
    }
}
