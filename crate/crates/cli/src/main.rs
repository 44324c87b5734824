use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;

use qrsearch::baselines::{brute_force_oracle, random_search};
use qrsearch::manifest::{BudgetSpec, EvaluatorSpec, ImportanceSpec, RunManifest};
use qrsearch::phase1::run_phase1;
use qrsearch::pipeline::{
    load_archive, open_run_dir, refine, search_into, write_phase1, write_phase2, write_text, BestConfig,
    MANIFEST_FILE,
};
use qrsearch::reports::{csv_text, emit_reports, oracle_rows, random_search_rows};
use qrsearch::rng::SeedStreams;
use qrsearch::space::{Ladder, ModelSpec};

const DEFAULT_OUT: &str = "qrsearch-out";
const RANDOM_SEARCH_FILE: &str = "random_search.csv";
const ORACLE_FILE: &str = "oracle.csv";

/// Per-layer bit-width and adapter-rank search under a hard memory budget.
///
/// Every run writes its manifest and evaluation ledger into `--out`; a
/// second run from the same manifest reproduces the ledger byte for byte.
#[derive(Parser)]
#[command(name = "qrsearch", version)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1 then phase 2, followed by the report bundle.
    Search(RunArgs),
    /// Multi-fidelity evolutionary search only; writes pareto.json.
    Phase1(RunArgs),
    /// Trust-region refinement seeded from a phase 1 archive.
    Phase2 {
        /// Archive written by `phase1`. Its directory supplies the manifest
        /// and ledger unless overridden.
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Random repaired configurations measured at the top rung.
    RandomSearch {
        #[arg(long, default_value_t = 100)]
        n_evals: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Noise-free enumeration of every feasible configuration (synthetic
    /// evaluator, at most 10^4 configurations).
    BruteForce(RunArgs),
    /// Rebuild the report bundle of a run directory.
    Report {
        /// Run directory holding manifest.json and ledger.jsonl.
        #[arg(long)]
        run: PathBuf,
        /// Output directory [default: the run directory].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Load every setting from a saved run manifest; other flags override it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model spec JSON: layer catalog, optional ladders and memory policy.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Memory budget in bytes.
    #[arg(long, conflicts_with = "budget_frac")]
    budget_bytes: Option<u64>,
    /// Memory budget as a fraction between the all-minimum and all-maximum
    /// footprints.
    #[arg(long)]
    budget_frac: Option<f64>,
    /// Comma-separated bit-width ladder [default: 2,4,8].
    #[arg(long, value_delimiter = ',')]
    q_ladder: Option<Vec<u32>>,
    /// Comma-separated rank ladder [default: 4,8,16].
    #[arg(long, value_delimiter = ',')]
    r_ladder: Option<Vec<u32>>,
    /// Score weight of the phase 2 utility [default: 0.9].
    #[arg(long)]
    alpha: Option<f64>,
    /// `synthetic` or `exec:<command>` [default: synthetic].
    #[arg(long)]
    evaluator: Option<String>,
    /// Per-evaluation timeout for `exec:` evaluators, seconds [default: 3600].
    #[arg(long)]
    timeout_s: Option<f64>,
    /// Synthetic evaluator noise scale at the first rung [default: 0.02].
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Synthetic learning-curve time constant in steps [default: 400].
    #[arg(long)]
    tau_learn: Option<f64>,
    /// Importance profile: a JSON file, `auto` (synthetic latent) or
    /// `uniform` [default: auto].
    #[arg(long)]
    importance: Option<String>,
    /// Log-normal noise on `auto` importance [default: 0].
    #[arg(long)]
    importance_noise: Option<f64>,
    /// Run seed; all search randomness derives from it [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the synthetic latent [default: 0].
    #[arg(long)]
    latent_seed: Option<u64>,
    /// Output directory [default: qrsearch-out; `phase2`: the directory of --from].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent evaluations within a rung [default: 1].
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    phase1: Phase1Flags,
    #[command(flatten)]
    phase2: Phase2Flags,
}

#[derive(Args, Clone, Default)]
#[command(next_help_heading = "Phase 1")]
struct Phase1Flags {
    /// Comma-separated fidelity ladder in training steps [default: 100,400,1600].
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<u64>>,
    /// Successive-halving reduction factor [default: 2.9].
    #[arg(long)]
    eta: Option<f64>,
    /// Population size and first-rung cohort [default: 25].
    #[arg(long)]
    n_lf: Option<usize>,
    /// Candidates promoted to the top rung per generation [default: 3].
    #[arg(long)]
    n_hf: Option<usize>,
    /// Random edits per initial variant of the prototype [default: 2].
    #[arg(long)]
    init_edits: Option<usize>,
    /// Importance exponent of mutation layer sampling [default: 2].
    #[arg(long)]
    gamma: Option<f64>,
    /// Relative hypervolume gain counted as stagnation [default: 0.01].
    #[arg(long)]
    eps_hv: Option<f64>,
    /// Stagnant generations before stopping [default: 3].
    #[arg(long)]
    patience: Option<usize>,
    /// Denominator smoothing of the relative gain [default: 1e-9].
    #[arg(long)]
    eps_den: Option<f64>,
    /// Generation cap after the initial one [default: 20].
    #[arg(long)]
    max_generations: Option<usize>,
    /// Huber threshold of the screening surrogate [default: 0.01].
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Ridge penalty of the screening surrogate [default: 0.1].
    #[arg(long)]
    ridge: Option<f64>,
    /// Training pairs needed before a surrogate ranks candidates [default: 8].
    #[arg(long)]
    min_pairs: Option<usize>,
    /// Rank promotions by measured scores only.
    #[arg(long)]
    no_screening: bool,
}

#[derive(Args, Clone, Default)]
#[command(next_help_heading = "Phase 2")]
struct Phase2Flags {
    /// Stop once the best expected improvement falls below this [default: 1e-4].
    #[arg(long)]
    eps_ei: Option<f64>,
    /// Cap on phase 2 top-rung evaluations [default: 30].
    #[arg(long)]
    max_evals: Option<usize>,
    /// Mutation exponent for pool random walks [default: 2].
    #[arg(long)]
    walk_gamma: Option<f64>,
    /// Number of trust regions [default: 3].
    #[arg(long)]
    regions: Option<usize>,
    /// Minimum atomic distance between region centers [default: 2].
    #[arg(long)]
    diversity: Option<usize>,
    /// Initial region radius [default: 2].
    #[arg(long)]
    init_radius: Option<usize>,
    /// Smallest region radius [default: 1].
    #[arg(long)]
    min_radius: Option<usize>,
    /// Largest region radius [default: twice the layer count].
    #[arg(long)]
    max_radius: Option<usize>,
    /// Radius growth factor after an improvement [default: 2].
    #[arg(long)]
    grow: Option<f64>,
    /// Radius shrink factor after a failure [default: 0.5].
    #[arg(long)]
    shrink: Option<f64>,
    /// Random walks per region per iteration [default: 256].
    #[arg(long)]
    pool_per_region: Option<usize>,
    /// Evaluations accepted per region before it closes [default: 5].
    #[arg(long)]
    per_region_cap: Option<usize>,
    /// Comma-separated GP length-scale grid [default: 0.25,0.5,1,2,4,8].
    #[arg(long, value_delimiter = ',')]
    gp_lengths: Option<Vec<f64>>,
    /// Comma-separated GP signal-variance grid [default: 0.5,1,2].
    #[arg(long, value_delimiter = ',')]
    gp_signals: Option<Vec<f64>>,
    /// Comma-separated GP noise-variance grid [default: 1e-4,1e-3,1e-2,1e-1].
    #[arg(long, value_delimiter = ',')]
    gp_noises: Option<Vec<f64>>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model spec {}", path.display()))?;
    Ok(ModelSpec::from_json(&text)?)
}

impl RunArgs {
    /// Manifest from `--manifest`, else `fallback` (when no `--model` is
    /// given and it exists), else built from flags; flags override.
    fn manifest(&self, fallback: Option<&Path>) -> Result<RunManifest> {
        let saved = match &self.manifest {
            Some(path) => Some(path.as_path()),
            None if self.model.is_none() => fallback.filter(|p| p.exists()),
            None => None,
        };
        let mut m = if let Some(path) = saved {
            let mut m = RunManifest::load(path)?;
            if let Some(p) = &self.model {
                m.model = load_model(p)?;
                m.model_path = Some(p.display().to_string());
            }
            m
        } else {
            let Some(model_path) = &self.model else {
                bail!("either --model or --manifest is required");
            };
            let budget = match (self.budget_bytes, self.budget_frac) {
                (Some(b), _) => BudgetSpec::Bytes(b),
                (None, Some(f)) => BudgetSpec::Fraction(f),
                (None, None) => bail!("a budget is required: --budget-bytes or --budget-frac"),
            };
            let mut m = RunManifest::synthetic(
                load_model(model_path)?,
                budget,
                self.seed.unwrap_or(0),
                self.latent_seed.unwrap_or(0),
            );
            m.model_path = Some(model_path.display().to_string());
            m
        };
        if let Some(q) = &self.q_ladder {
            m.model.ladders.q = Ladder::new(q.clone())?;
        }
        if let Some(r) = &self.r_ladder {
            m.model.ladders.r = Ladder::new(r.clone())?;
        }
        if let Some(b) = self.budget_bytes {
            m.budget = BudgetSpec::Bytes(b);
        } else if let Some(f) = self.budget_frac {
            m.budget = BudgetSpec::Fraction(f);
        }
        set(&mut m.seed, self.seed);
        set(&mut m.workers, self.workers);

        if let Some(desc) = &self.evaluator {
            let latent_seed = match &m.evaluator {
                EvaluatorSpec::Synthetic { latent_seed, .. } => *latent_seed,
                EvaluatorSpec::External { .. } => 0,
            };
            m.evaluator = EvaluatorSpec::parse(desc, self.latent_seed.unwrap_or(latent_seed))?;
        }
        match &mut m.evaluator {
            EvaluatorSpec::Synthetic {
                latent_seed,
                noise_scale,
                tau_learn,
                ..
            } => {
                set(latent_seed, self.latent_seed);
                set(noise_scale, self.noise_scale);
                set(tau_learn, self.tau_learn);
                if self.timeout_s.is_some() {
                    bail!("--timeout-s only applies to exec: evaluators");
                }
            }
            EvaluatorSpec::External { timeout_s, .. } => {
                set(timeout_s, self.timeout_s);
                if self.noise_scale.is_some() || self.tau_learn.is_some() || self.latent_seed.is_some() {
                    bail!("--noise-scale, --tau-learn and --latent-seed only apply to the synthetic evaluator");
                }
            }
        }

        let noise = self.importance_noise;
        match self.importance.as_deref() {
            Some("auto") => m.importance = ImportanceSpec::Auto { noise: noise.unwrap_or(0.0) },
            Some("uniform") => m.importance = ImportanceSpec::Uniform,
            Some(path) => m.importance = ImportanceSpec::File { path: path.to_string() },
            None => {
                if let (ImportanceSpec::Auto { noise: n }, Some(v)) = (&mut m.importance, noise) {
                    *n = v;
                }
            }
        }
        if noise.is_some() && !matches!(m.importance, ImportanceSpec::Auto { .. }) {
            bail!("--importance-noise only applies to --importance auto");
        }
        if matches!(m.evaluator, EvaluatorSpec::External { .. }) && matches!(m.importance, ImportanceSpec::Auto { .. }) {
            bail!("exec: evaluators need --importance <profile.json> or --importance uniform");
        }

        let p1 = &self.phase1;
        let ladder = &mut m.phase1.ladder;
        set(&mut ladder.step_counts, p1.steps.clone());
        set(&mut ladder.eta, p1.eta);
        set(&mut ladder.n_lf, p1.n_lf);
        set(&mut ladder.n_hf, p1.n_hf);
        set(&mut m.phase1.init_edits, p1.init_edits);
        set(&mut m.phase1.gamma, p1.gamma);
        set(&mut m.phase1.eps_hv, p1.eps_hv);
        set(&mut m.phase1.patience, p1.patience);
        set(&mut m.phase1.eps_den, p1.eps_den);
        set(&mut m.phase1.max_generations, p1.max_generations);
        set(&mut m.phase1.huber_delta, p1.huber_delta);
        set(&mut m.phase1.ridge, p1.ridge);
        set(&mut m.phase1.min_pairs, p1.min_pairs);
        if p1.no_screening {
            m.phase1.screening = false;
        }

        let p2 = &self.phase2;
        set(&mut m.phase2.alpha, self.alpha);
        set(&mut m.phase2.eps_ei, p2.eps_ei);
        set(&mut m.phase2.max_evaluations, p2.max_evals);
        set(&mut m.phase2.gamma, p2.walk_gamma);
        let tr = &mut m.phase2.trust;
        set(&mut tr.regions, p2.regions);
        set(&mut tr.diversity, p2.diversity);
        set(&mut tr.init_radius, p2.init_radius);
        set(&mut tr.min_radius, p2.min_radius);
        if p2.max_radius.is_some() {
            tr.max_radius = p2.max_radius;
        }
        set(&mut tr.grow, p2.grow);
        set(&mut tr.shrink, p2.shrink);
        set(&mut tr.pool_per_region, p2.pool_per_region);
        set(&mut tr.per_region_cap, p2.per_region_cap);
        set(&mut m.phase2.gp_grid.length, p2.gp_lengths.clone());
        set(&mut m.phase2.gp_grid.signal, p2.gp_signals.clone());
        set(&mut m.phase2.gp_grid.noise, p2.gp_noises.clone());

        m.validate()?;
        Ok(m)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(args) => {
            let m = args.manifest(None)?;
            let out = args.out();
            let outcome = search_into(&m, &out)?;
            emit_reports(&out, &out)?;
            info!(
                "phase 1: {} generations ({:?}); phase 2: {} evaluations ({:?})",
                outcome.phase1.generations,
                outcome.phase1.stop_reason,
                outcome.phase2.evaluations,
                outcome.phase2.stop_reason
            );
            print_json(&outcome.best)
        }
        Command::Phase1(args) => {
            let m = args.manifest(None)?;
            let out = args.out();
            let mut session = open_run_dir(&m, &out)?;
            let result = run_phase1(&session.problem, &mut session.evaluator, &m.phase1, &session.streams)?;
            write_phase1(&out, &result)?;
            info!("phase 1: {} generations ({:?})", result.generations, result.stop_reason);
            print_json(&result.archive.members)
        }
        Command::Phase2 { from, run } => {
            let dir = from.parent().map(Path::to_path_buf).unwrap_or_default();
            let m = run.manifest(Some(&dir.join(MANIFEST_FILE)))?;
            let out = run.out.clone().unwrap_or(dir);
            let archive = load_archive(&from)?;
            if archive.top_steps != m.top_steps() {
                bail!(
                    "archive was measured at {} steps but the manifest's top rung is {}",
                    archive.top_steps,
                    m.top_steps()
                );
            }
            let mut session = open_run_dir(&m, &out)?;
            let result = refine(&mut session, &m, &archive.members)?;
            write_phase2(&out, &result, m.alpha())?;
            info!("phase 2: {} evaluations ({:?})", result.evaluations, result.stop_reason);
            print_json(&BestConfig::from_phase2(&result, m.alpha()))
        }
        Command::RandomSearch { n_evals, run } => {
            let m = run.manifest(None)?;
            let out = run.out();
            let mut session = open_run_dir(&m, &out)?;
            let mut rng = SeedStreams::new(m.seed).rng(SeedStreams::INIT);
            let result = random_search(&session.problem, &mut session.evaluator, n_evals, m.top_steps(), &mut rng)?;
            write_text(&out.join(RANDOM_SEARCH_FILE), &csv_text(&random_search_rows(&result), RANDOM_SEARCH_FILE)?)?;
            let best = result
                .records
                .iter()
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .context("every random-search evaluation failed")?;
            print_json(best)
        }
        Command::BruteForce(args) => {
            let m = args.manifest(None)?;
            let out = args.out();
            let session = open_run_dir(&m, &out)?;
            let Some(backend) = &session.synthetic else {
                bail!("brute-force needs the synthetic evaluator");
            };
            let entries = brute_force_oracle(&session.problem, backend, m.top_steps(), m.alpha())?;
            write_text(&out.join(ORACLE_FILE), &csv_text(&oracle_rows(&entries), ORACLE_FILE)?)?;
            print_json(&entries.first().context("no feasible configuration")?)
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let bundle = emit_reports(&run, &out)?;
            print_json(&bundle.summary)
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    run(cli)
}
