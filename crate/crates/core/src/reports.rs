//! Report bundle rebuilt from a run's ledger and manifest.
//!
//! Everything except the repair table (which needs the pre-repair proposals
//! recorded in the phase 1 telemetry) is recomputed from measurements, so
//! emitting twice on the same inputs writes identical bytes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{OracleEntry, RandomSearchResult};
use crate::error::{Error, Result};
use crate::evaluator::{EvalRecord, Ledger, Stage, SyntheticBackend};
use crate::manifest::RunManifest;
use crate::phase1::{GenerationTelemetry, ParetoArchive};
use crate::phase2::utility::UtilitySpec;
use crate::pipeline::{read_json, write_json, write_text, LEDGER_FILE, MANIFEST_FILE, PHASE1_TELEMETRY_FILE};
use crate::rng::SeedStreams;
use crate::space::Config;
use crate::stats::{mean, spearman};

pub const REPORT_FILE: &str = "report.json";
pub const FRONT_FILE: &str = "pareto_front.csv";
pub const HV_TRACE_FILE: &str = "hv_trace.csv";
pub const BEST_SO_FAR_FILE: &str = "best_so_far.csv";
pub const REPAIR_FILE: &str = "repair_intensity.csv";

pub const TARGET_DEFINITION: &str = "target = measured top-rung score of the returned configuration; \
     hf_to_target = 1-based index of the first top-rung measurement (ledger order) scoring at least the target";

/// Placeholder for a section that could not be produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Omitted {
    pub omitted: String,
}

impl Omitted {
    fn new(reason: &str) -> Self {
        Omitted {
            omitted: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Section<T> {
    Present(T),
    Omitted(Omitted),
}

impl<T> Section<T> {
    pub fn present(&self) -> Option<&T> {
        match self {
            Section::Present(t) => Some(t),
            Section::Omitted(_) => None,
        }
    }
}

fn join(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub memory_bytes: u64,
    pub score: f64,
    pub generation: u64,
    pub q: String,
    pub r: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvRow {
    pub generation: u64,
    pub hypervolume: f64,
    pub archive_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub hf_evaluation: usize,
    pub stage: String,
    pub round: u64,
    pub score: f64,
    pub memory_bytes: u64,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRow {
    pub layer: usize,
    pub name: String,
    pub repair_steps: usize,
    pub iq: f64,
    pub ir: f64,
    /// Latent sensitivity for synthetic runs, `iq` otherwise.
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub total_steps: usize,
    /// Spearman correlation of repair steps with sensitivity.
    pub spearman: Option<f64>,
    pub sensitivity_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub config: Config,
    pub score: f64,
    pub memory_bytes: u64,
    pub utility: f64,
    pub stage: Stage,
    /// Noise-free score, for synthetic runs.
    pub expected_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEfficiency {
    pub definition: String,
    pub target: f64,
    pub hf_to_target: usize,
    pub hf_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScreening {
    pub generation: usize,
    pub screened: Vec<bool>,
    pub heldout_spearman: Vec<Option<f64>>,
    /// `|promoted ∩ true top| / |true top|` against noise-free scores.
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSummary {
    pub generations: Vec<GenerationScreening>,
    /// Mean hit rate over generations ranked by a trained surrogate.
    pub mean_hit_rate_screened: Option<f64>,
    /// Mean hit rate over generations ranked by measured scores.
    pub mean_hit_rate_measured: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Summary {
    pub evaluations: usize,
    /// Incumbent utility before phase 2, under the final bounds.
    pub utility_before: f64,
    pub utility_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub seed: u64,
    pub alpha: f64,
    pub budget_bytes: u64,
    pub top_steps: u64,
    pub evaluations_per_rung: Vec<(u64, usize)>,
    pub phase1_generations: usize,
    pub best: BestSummary,
    pub sample_efficiency: SampleEfficiency,
    pub repair_intensity: Section<RepairSummary>,
    pub screening: Section<ScreeningSummary>,
    pub phase2: Section<Phase2Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub summary: ReportSummary,
    pub front: Vec<FrontRow>,
    pub hv_trace: Vec<HvRow>,
    pub best_so_far: Vec<CurveRow>,
    pub repair: Option<Vec<RepairRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchRow {
    pub evaluation: usize,
    pub score: f64,
    pub memory_bytes: u64,
    pub best_score: f64,
    pub q: String,
    pub r: String,
}

pub fn random_search_rows(result: &RandomSearchResult) -> Vec<RandomSearchRow> {
    result
        .records
        .iter()
        .zip(&result.best_so_far)
        .enumerate()
        .map(|(i, (rec, &best))| RandomSearchRow {
            evaluation: i + 1,
            score: rec.score,
            memory_bytes: rec.memory_bytes,
            best_score: best,
            q: join(&rec.config.q),
            r: join(&rec.config.r),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub rank: usize,
    pub utility: f64,
    pub score: f64,
    pub memory_bytes: u64,
    pub q: String,
    pub r: String,
}

pub fn oracle_rows(entries: &[OracleEntry]) -> Vec<OracleRow> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| OracleRow {
            rank: i + 1,
            utility: e.utility,
            score: e.score,
            memory_bytes: e.memory_bytes,
            q: join(&e.config.q),
            r: join(&e.config.r),
        })
        .collect()
}

fn stage_name(stage: Stage) -> String {
    serde_json::to_value(stage)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn incumbent<'a>(records: &[&'a EvalRecord], spec: &UtilitySpec) -> (&'a EvalRecord, f64) {
    let mut best: Option<(&EvalRecord, f64)> = None;
    for &r in records {
        let u = spec.scalarize(r.score, r.memory_bytes);
        let better = match best {
            None => true,
            Some((b, bu)) => u > bu || (u == bu && r.memory_bytes < b.memory_bytes),
        };
        if better {
            best = Some((r, u));
        }
    }
    best.expect("non-empty")
}

/// Assembles the bundle. `telemetry` is the phase 1 telemetry when
/// available; the repair table and hit rates need it.
pub fn build_report(
    manifest: &RunManifest,
    ledger: &Ledger,
    telemetry: Option<&[GenerationTelemetry]>,
) -> Result<ReportBundle> {
    if ledger.is_empty() {
        return Err(Error::InvalidParameter("cannot report on an empty ledger".into()));
    }
    let spec = &manifest.model;
    let top = manifest.top_steps();
    let budget = manifest.budget.resolve(spec)?;
    let run: Vec<&EvalRecord> = ledger.records().iter().filter(|r| r.seed == manifest.seed).collect();
    let hf: Vec<&EvalRecord> = run.iter().copied().filter(|r| r.steps == top).collect();
    if hf.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "ledger holds no top-rung ({top} steps) measurements for seed {}",
            manifest.seed
        )));
    }
    let (_, synthetic) = manifest.evaluator.backend(spec, manifest.phase1.ladder.step_counts[0])?;

    let mut evaluations_per_rung: Vec<(u64, usize)> = Vec::new();
    for &steps in &manifest.phase1.ladder.step_counts {
        evaluations_per_rung.push((steps, run.iter().filter(|r| r.steps == steps).count()));
    }

    // archive and its trace, replayed generation by generation
    let phase1: Vec<&EvalRecord> = hf.iter().copied().filter(|r| r.provenance.stage == Stage::Phase1).collect();
    // a generation served entirely from cache leaves no record of its own
    let last_generation = phase1
        .iter()
        .map(|r| r.provenance.round)
        .chain(telemetry.iter().flat_map(|t| t.iter().map(|g| g.generation as u64)))
        .max();
    let mut archive = ParetoArchive::new(budget.max_bytes, top);
    let mut hv_trace = Vec::new();
    if let Some(last) = last_generation {
        for g in 0..=last {
            for r in phase1.iter().filter(|r| r.provenance.round == g) {
                if r.memory_bytes <= budget.max_bytes {
                    archive.insert(r);
                }
            }
            hv_trace.push(HvRow {
                generation: g,
                hypervolume: archive.hypervolume(),
                archive_size: archive.len(),
            });
        }
    }
    let front = archive
        .members
        .iter()
        .map(|m| FrontRow {
            memory_bytes: m.memory_bytes,
            score: m.score,
            generation: m.provenance.round,
            q: join(&m.config.q),
            r: join(&m.config.r),
        })
        .collect();

    let mut best_score = f64::NEG_INFINITY;
    let best_so_far = hf
        .iter()
        .enumerate()
        .map(|(i, r)| {
            best_score = best_score.max(r.score);
            CurveRow {
                hf_evaluation: i + 1,
                stage: stage_name(r.provenance.stage),
                round: r.provenance.round,
                score: r.score,
                memory_bytes: r.memory_bytes,
                best_score,
            }
        })
        .collect();

    let feasible: Vec<&EvalRecord> = hf.iter().copied().filter(|r| r.memory_bytes <= budget.max_bytes).collect();
    if feasible.is_empty() {
        return Err(Error::InvalidParameter("no feasible top-rung measurement to report".into()));
    }
    let utility = UtilitySpec::from_observations(manifest.alpha(), feasible.iter().map(|r| (r.score, r.memory_bytes)))?;
    let (best, best_utility) = incumbent(&feasible, &utility);
    let best_summary = BestSummary {
        config: best.config.clone(),
        score: best.score,
        memory_bytes: best.memory_bytes,
        utility: best_utility,
        stage: best.provenance.stage,
        expected_score: synthetic.as_ref().map(|b| b.expected_score(&best.config, top)),
    };
    let sample_efficiency = SampleEfficiency {
        definition: TARGET_DEFINITION.to_string(),
        target: best.score,
        hf_to_target: hf.iter().position(|r| r.score >= best.score).expect("best is measured") + 1,
        hf_total: hf.len(),
    };

    let before: Vec<&EvalRecord> = feasible
        .iter()
        .copied()
        .filter(|r| r.provenance.stage != Stage::Phase2)
        .collect();
    let phase2_evals = feasible.len() - before.len();
    let phase2 = if phase2_evals == 0 {
        Section::Omitted(Omitted::new("no phase 2 evaluations in the ledger"))
    } else if before.is_empty() {
        Section::Omitted(Omitted::new("phase 2 ran without phase 1 measurements"))
    } else {
        Section::Present(Phase2Summary {
            evaluations: phase2_evals,
            utility_before: incumbent(&before, &utility).1,
            utility_after: best_utility,
        })
    };

    let (repair, repair_intensity) = match telemetry {
        Some(t) if !t.is_empty() => {
            let (rows, summary) = repair_table(manifest, t, synthetic.as_ref())?;
            (Some(rows), Section::Present(summary))
        }
        _ => (
            None,
            Section::Omitted(Omitted::new("phase 1 telemetry not found; repair counts are not in the ledger")),
        ),
    };
    let screening = match telemetry {
        Some(t) if !t.is_empty() => Section::Present(screening_summary(t, synthetic.as_ref(), top, manifest.phase1.ladder.n_hf)),
        _ => Section::Omitted(Omitted::new("phase 1 telemetry not found")),
    };

    Ok(ReportBundle {
        summary: ReportSummary {
            seed: manifest.seed,
            alpha: manifest.alpha(),
            budget_bytes: budget.max_bytes,
            top_steps: top,
            evaluations_per_rung,
            phase1_generations: hv_trace.len(),
            best: best_summary,
            sample_efficiency,
            repair_intensity,
            screening,
            phase2,
        },
        front,
        hv_trace,
        best_so_far,
        repair,
    })
}

fn repair_table(
    manifest: &RunManifest,
    telemetry: &[GenerationTelemetry],
    synthetic: Option<&SyntheticBackend>,
) -> Result<(Vec<RepairRow>, RepairSummary)> {
    let spec = &manifest.model;
    let layers = spec.num_layers();
    let importance = manifest.importance.resolve(
        layers,
        synthetic.map(|b| b.latent()),
        SeedStreams::new(manifest.seed).seed_for(SeedStreams::NOISE),
    )?;
    let mut steps = vec![0usize; layers];
    for t in telemetry {
        if t.repair_steps_per_layer.len() != layers {
            return Err(Error::DimensionMismatch {
                expected: layers,
                actual: t.repair_steps_per_layer.len(),
            });
        }
        for (s, c) in steps.iter_mut().zip(&t.repair_steps_per_layer) {
            *s += c;
        }
    }
    let sensitivity: Vec<f64> = match synthetic {
        Some(b) => b.latent().sensitivity.clone(),
        None => importance.iq.clone(),
    };
    let rows: Vec<RepairRow> = (0..layers)
        .map(|l| RepairRow {
            layer: l,
            name: spec.catalog().layers()[l].name.clone(),
            repair_steps: steps[l],
            iq: importance.iq[l],
            ir: importance.ir[l],
            sensitivity: sensitivity[l],
        })
        .collect();
    let counts: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let summary = RepairSummary {
        total_steps: steps.iter().sum(),
        spearman: spearman(&counts, &sensitivity),
        sensitivity_source: if synthetic.is_some() { "latent" } else { "importance_q" }.to_string(),
    };
    Ok((rows, summary))
}

fn screening_summary(
    telemetry: &[GenerationTelemetry],
    synthetic: Option<&SyntheticBackend>,
    top: u64,
    n_hf: usize,
) -> ScreeningSummary {
    let generations: Vec<GenerationScreening> = telemetry
        .iter()
        .map(|t| {
            let hit_rate = synthetic.filter(|_| !t.cohort.is_empty() && !t.promoted.is_empty()).map(|b| {
                let mut scored: Vec<(f64, &Config)> = t.cohort.iter().map(|c| (b.expected_score(c, top), c)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                let k = n_hf.min(scored.len());
                let truth: HashSet<&Config> = scored.iter().take(k).map(|s| s.1).collect();
                t.promoted.iter().filter(|c| truth.contains(c)).count() as f64 / k as f64
            });
            GenerationScreening {
                generation: t.generation,
                screened: t.screened.clone(),
                heldout_spearman: t.heldout_spearman.clone(),
                hit_rate,
            }
        })
        .collect();
    let mean_of = |screened: bool| {
        let v: Vec<f64> = generations
            .iter()
            .filter(|g| g.screened.iter().any(|&s| s) == screened)
            .filter_map(|g| g.hit_rate)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    ScreeningSummary {
        mean_hit_rate_screened: mean_of(true),
        mean_hit_rate_measured: mean_of(false),
        generations,
    }
}

pub fn csv_text<T: Serialize>(rows: &[T], what: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidParameter(format!("{what}: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("{what}: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes the bundle into `out`. A stale repair table is removed when the
/// section is omitted.
pub fn write_report(bundle: &ReportBundle, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(REPORT_FILE), &bundle.summary)?;
    write_text(&out.join(FRONT_FILE), &csv_text(&bundle.front, FRONT_FILE)?)?;
    write_text(&out.join(HV_TRACE_FILE), &csv_text(&bundle.hv_trace, HV_TRACE_FILE)?)?;
    write_text(&out.join(BEST_SO_FAR_FILE), &csv_text(&bundle.best_so_far, BEST_SO_FAR_FILE)?)?;
    let repair_path = out.join(REPAIR_FILE);
    match &bundle.repair {
        Some(rows) => write_text(&repair_path, &csv_text(rows, REPAIR_FILE)?)?,
        None if repair_path.exists() => fs::remove_file(&repair_path).map_err(|e| Error::io(&repair_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn read_telemetry(path: &Path) -> Result<Vec<GenerationTelemetry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

/// Reads the manifest, ledger and (if present) telemetry of a run directory
/// and writes the bundle into `out`.
pub fn emit_reports(run_dir: &Path, out: &Path) -> Result<ReportBundle> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let ledger = Ledger::load(run_dir.join(LEDGER_FILE))?;
    let telemetry_path = run_dir.join(PHASE1_TELEMETRY_FILE);
    let telemetry = if telemetry_path.exists() {
        Some(read_telemetry(&telemetry_path)?)
    } else {
        None
    };
    let bundle = build_report(&manifest, &ledger, telemetry.as_deref())?;
    write_report(&bundle, out)?;
    Ok(bundle)
}
