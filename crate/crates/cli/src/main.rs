use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rallykit::config::{ConfigError, GlobalConfig, OUT_DIR_ENV};
use rallykit::dynamics::DragModel;
use rallykit::estimator::{replay, Measurement};
use rallykit::motionlib::{match_clip, MotionLibrary};
use rallykit::output::{
    read_batch_csv, read_replay_jsonl, to_json_pretty_rounded, write_batch_csv, write_convergence_csv,
    write_jsonl, write_replay_jsonl, write_summary_csv, BatchSummary,
};
use rallykit::planner::{plan_strike, PlannerParams};
use rallykit::predictor::StrikePrediction;
use rallykit::simulator::{run_episodes, run_traces, Ablation, MetricsReport, RallyOutcome, SimSetup, TickRecord};

#[derive(Parser)]
#[command(name = "rallykit", version, about = "Ball perception, strike planning and rally simulation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Episodes per batch, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    episodes: Option<usize>,
    /// Output directory (falls back to the config, then $RALLYKIT_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Perception ablation; repeatable.
    #[arg(long, global = true, value_enum)]
    ablate: Vec<AblationArg>,
    /// Flight model used by the world, the filter and the predictor.
    #[arg(long, global = true, value_enum)]
    drag_model: Option<DragArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoCollision,
    NoAdaptiveNoise,
    ZeroInit,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoCollision => Ablation::NoCollision,
            AblationArg::NoAdaptiveNoise => Ablation::NoAdaptiveNoise,
            AblationArg::ZeroInit => Ablation::ZeroInit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DragArg {
    Quadratic,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of simulated rallies and write the batch and convergence reports.
    Simulate {
        /// Also write per-tick traces of every episode.
        #[arg(long)]
        traces: bool,
    },
    /// Run the full pipeline and each ablation on the same launches.
    Ablate,
    /// Run the filter over a JSONL measurement log.
    FilterReplay {
        /// Rows of {t, zx, zy, zz, d}.
        input: PathBuf,
    },
    /// Plan one strike from a predicted hit state.
    Plan {
        /// JSON object {tau, p_hit, v_hit} in the origin frame.
        prediction: PathBuf,
        /// Planner parameters replacing the config's planner section.
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
    },
    /// Build, validate or query a motion library.
    Matchlib {
        #[command(subcommand)]
        action: MatchAction,
    },
    /// Summarize batch CSVs, one row each plus a pooled row.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MatchAction {
    /// Synthesize the configured clip grid into <out>/library.
    Build,
    /// Run the quality checks on a saved library.
    Validate { library: PathBuf },
    /// Nearest clip for a hit point.
    Query {
        /// Saved library; the configured synthetic grid when omitted.
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
        /// Hit point, x,y,z.
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        p_hit: Vector3<f64>,
        /// Anchor point, x,y,z (config default when omitted).
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        anchor: Option<Vector3<f64>>,
        /// Perturbation radius (config default when omitted).
        #[arg(long)]
        eps: Option<f64>,
    },
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] => Ok(Vector3::new(x, y, z)),
        _ => Err("expected x,y,z".into()),
    }
}

enum Failure {
    /// Bad configuration or input parameters.
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

type Outcome = Result<(), Failure>;

struct Ctx {
    cfg: GlobalConfig,
    out: PathBuf,
    ablations: Vec<Ablation>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(path) => GlobalConfig::load(path)?,
            None => GlobalConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(n) = common.episodes {
            cfg.scenario.n_episodes = n;
        }
        if let Some(model) = common.drag_model {
            cfg.set_drag_model(match model {
                DragArg::Quadratic => DragModel::Quadratic,
                DragArg::Linear => DragModel::Linear,
            });
        }
        let ablations: Vec<Ablation> = common.ablate.iter().map(|&a| a.into()).collect();
        cfg.validate()?;
        let env = std::env::var(OUT_DIR_ENV).ok();
        let out = cfg.resolve_out_dir(common.out.as_deref(), env.as_deref());
        Ok(Self { cfg, out, ablations })
    }

    /// Path of `name` inside the output directory, creating the directory.
    fn out_file(&self, name: &str) -> Result<PathBuf, Failure> {
        fs::create_dir_all(&self.out).map_err(runtime(self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn setup(&self) -> Result<SimSetup, Failure> {
        Ok(self.cfg.sim_setup()?)
    }

    fn library(&self) -> Result<Option<MotionLibrary>, Failure> {
        if !self.cfg.motionlib.enabled {
            return Ok(None);
        }
        self.cfg
            .motionlib
            .build_library(self.cfg.seed)
            .map(Some)
            .map_err(runtime("motion library"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(runtime(path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), String>) -> Outcome {
    let mut w = create(path)?;
    f(&mut w).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    w.flush().map_err(runtime(path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(runtime(path.display()))
}

/// Outcomes, traces (empty unless requested) and the aggregate report.
fn batch(
    setup: &SimSetup,
    library: Option<&MotionLibrary>,
    traces: bool,
) -> Result<(Vec<RallyOutcome>, Vec<Vec<TickRecord>>, MetricsReport), Failure> {
    let range = 0..setup.scenario.n_episodes;
    let (outcomes, traces) = if traces {
        run_traces(setup, library, range).map_err(runtime("simulation"))?.into_iter().unzip()
    } else {
        (run_episodes(setup, library, range).map_err(runtime("simulation"))?, Vec::new())
    };
    let report = MetricsReport::from_outcomes(&outcomes, setup.scenario.bin_width);
    Ok((outcomes, traces, report))
}

fn print_summary(label: &str, s: &BatchSummary) {
    let fields: Vec<String> = s.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{label}: {}", fields.join(" "));
}

fn simulate(ctx: &Ctx, traces: bool) -> Outcome {
    let mut setup = ctx.setup()?;
    for &a in &ctx.ablations {
        setup.scenario.ablations = setup.scenario.ablations.with(a);
    }
    let lib = ctx.library()?;
    let (outcomes, trace_sets, report) = batch(&setup, lib.as_ref(), traces)?;
    let seed = setup.seed;
    write_with(&ctx.out_file("config.json")?, |w| {
        writeln!(w, "{}", ctx.cfg.to_json_string()).map_err(|e| e.to_string())
    })?;
    write_with(&ctx.out_file("batch.csv")?, |w| {
        write_batch_csv(w, seed, &outcomes, &report).map_err(|e| e.to_string())
    })?;
    write_with(&ctx.out_file("convergence.csv")?, |w| {
        write_convergence_csv(w, seed, &report).map_err(|e| e.to_string())
    })?;
    if traces {
        write_with(&ctx.out_file("traces.jsonl")?, |w| {
            trace_sets
                .iter()
                .try_for_each(|t| write_jsonl(&mut *w, t))
                .map_err(|e| e.to_string())
        })?;
    }
    println!("seed={seed}");
    print_summary("batch", &BatchSummary::from_report(&report));
    println!("wrote {}", ctx.out.display());
    Ok(())
}

/// The configured pipeline plus one variant per ablation (all three unless
/// `--ablate` picks some), each on the same launches.
fn ablate(ctx: &Ctx) -> Outcome {
    let mut setup = ctx.setup()?;
    let base = setup.scenario.ablations;
    let lib = ctx.library()?;
    let selected = if ctx.ablations.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        ctx.ablations.clone()
    };
    println!("seed={}", setup.seed);
    for variant in std::iter::once(None).chain(selected.into_iter().map(Some)) {
        setup.scenario.ablations = variant.map_or(base, |a| base.with(a));
        let (outcomes, _, report) = batch(&setup, lib.as_ref(), false)?;
        let name = variant.map_or("full", Ablation::name);
        let seed = setup.seed;
        write_with(&ctx.out_file(&format!("report_{name}.csv"))?, |w| {
            write_batch_csv(w, seed, &outcomes, &report).map_err(|e| e.to_string())
        })?;
        print_summary(name, &BatchSummary::from_report(&report));
    }
    println!("wrote {}", ctx.out.display());
    Ok(())
}

fn filter_replay(ctx: &Ctx, input: &Path) -> Outcome {
    let rows = read_replay_jsonl(&read_text(input)?).map_err(runtime(input.display()))?;
    let ms: Vec<Measurement> = rows.into_iter().map(Measurement::from).collect();
    let steps = replay(ctx.cfg.estimator, ctx.cfg.physics, &ms);
    let path = ctx.out_file("estimates.jsonl")?;
    write_with(&path, |w| write_replay_jsonl(w, &steps).map_err(|e| e.to_string()))?;
    let rejected = steps.iter().filter(|s| s.rejected.is_some()).count();
    println!("{} rows, {rejected} rejected; wrote {}", steps.len(), path.display());
    Ok(())
}

fn plan(ctx: &Ctx, prediction: &Path, params: Option<&Path>) -> Outcome {
    let pred: StrikePrediction =
        serde_json::from_str(&read_text(prediction)?).map_err(runtime(prediction.display()))?;
    let params: PlannerParams = match params {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => ctx.cfg.planner,
    };
    params.validate().map_err(|(field, bound)| Failure::Config(format!("invalid `{field}`: must be {bound}")))?;
    let target = ctx.cfg.calibration()?.origin_t_table().transform_point(&params.target);
    let plan = plan_strike(&pred.p_hit, &pred.v_hit, &target, &params).map_err(runtime("plan"))?;
    let json = to_json_pretty_rounded(&plan).map_err(runtime("plan"))?;
    write_with(&ctx.out_file("plan.json")?, |w| writeln!(w, "{json}").map_err(|e| e.to_string()))?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct BuildManifest {
    seed: u64,
    clips: usize,
    accepted: usize,
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    index: usize,
    #[serde(flatten)]
    verdict: &'a rallykit::motionlib::ClipVerdict,
}

#[derive(Serialize)]
struct QueryResult {
    seed: u64,
    index: usize,
    feature: Vector3<f64>,
    distance: f64,
}

fn load_library(ctx: &Ctx, dir: &Path) -> Result<MotionLibrary, Failure> {
    MotionLibrary::load(dir, &ctx.cfg.motionlib.thresholds).map_err(runtime(dir.display()))
}

fn matchlib(ctx: &Ctx, action: &MatchAction) -> Outcome {
    match action {
        MatchAction::Build => {
            let lib = ctx
                .cfg
                .motionlib
                .build_library(ctx.cfg.seed)
                .map_err(runtime("motion library"))?;
            let dir = ctx.out_file("library")?;
            lib.save(&dir).map_err(runtime(dir.display()))?;
            let manifest = BuildManifest {
                seed: ctx.cfg.seed,
                clips: lib.len(),
                accepted: lib.quality().iter().filter(|q| q.accepted).count(),
            };
            let json = to_json_pretty_rounded(&manifest).map_err(runtime("manifest"))?;
            write_with(&ctx.out_file("library_build.json")?, |w| {
                writeln!(w, "{json}").map_err(|e| e.to_string())
            })?;
            println!(
                "seed={} clips={} accepted={}; wrote {}",
                manifest.seed,
                manifest.clips,
                manifest.accepted,
                dir.display()
            );
        }
        MatchAction::Validate { library } => {
            let lib = load_library(ctx, library)?;
            let rows: Vec<VerdictRow> = lib
                .quality()
                .iter()
                .enumerate()
                .map(|(index, verdict)| VerdictRow { index, verdict })
                .collect();
            let path = ctx.out_file("validation.jsonl")?;
            write_with(&path, |w| write_jsonl(w, &rows).map_err(|e| e.to_string()))?;
            let accepted = rows.iter().filter(|r| r.verdict.accepted).count();
            println!("{accepted} of {} clips accepted; wrote {}", rows.len(), path.display());
        }
        MatchAction::Query {
            library,
            p_hit,
            anchor,
            eps,
        } => {
            let lib = match library {
                Some(dir) => load_library(ctx, dir)?,
                None => ctx
                    .cfg
                    .motionlib
                    .build_library(ctx.cfg.seed)
                    .map_err(runtime("motion library"))?,
            };
            let anchor = anchor.unwrap_or(ctx.cfg.scenario.motion_anchor);
            let eps = eps.unwrap_or(ctx.cfg.scenario.match_eps);
            if !(eps >= 0.0) {
                return Err(Failure::Config("--eps must be >= 0".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            let index = match_clip(&lib, p_hit, &anchor, eps, &mut rng).map_err(runtime("query"))?;
            let feature = lib.features()[index];
            let result = QueryResult {
                seed: ctx.cfg.seed,
                index,
                feature,
                distance: (p_hit - anchor - feature).norm(),
            };
            let json = to_json_pretty_rounded(&result).map_err(runtime("query"))?;
            write_with(&ctx.out_file("query.json")?, |w| writeln!(w, "{json}").map_err(|e| e.to_string()))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, inputs: &[PathBuf]) -> Outcome {
    let mut rows = Vec::with_capacity(inputs.len() + 1);
    let mut pooled = Vec::new();
    for path in inputs {
        let batch = read_batch_csv(path).map_err(runtime(path.display()))?;
        rows.push((path.display().to_string(), BatchSummary::from_rows(&batch)));
        pooled.extend(batch);
    }
    rows.push(("pooled".to_string(), BatchSummary::from_rows(&pooled)));
    let path = ctx.out_file("report.csv")?;
    write_with(&path, |w| write_summary_csv(w, &rows).map_err(|e| e.to_string()))?;
    for (label, s) in &rows {
        print_summary(label, s);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let ctx = Ctx::new(&cli.common)?;
    match &cli.command {
        Command::Simulate { traces } => simulate(&ctx, *traces),
        Command::Ablate => ablate(&ctx),
        Command::FilterReplay { input } => filter_replay(&ctx, input),
        Command::Plan { prediction, params } => plan(&ctx, prediction, params.as_deref()),
        Command::Matchlib { action } => matchlib(&ctx, action),
        Command::Report { inputs } => report(&ctx, inputs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
