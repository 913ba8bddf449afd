//! `mbsma` command-line tool: simulate, fit, predict, weight and evaluate.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use mbsma::averaging::{build_prediction_matrix, ma_standard_errors, solve_weights};
use mbsma::harness::{check_capabilities, read_plan, run_experiment, weight_hash, write_report};
use mbsma::joint_model::{fit, FitOptions, FittedJointModel, ModelSpec, QuadratureConfig};
use mbsma::metrics::ipcw_frame;
use mbsma::prediction::{PredictOptions, Predictor};
use mbsma::seeds::{derive_seed, str_tag};
use mbsma::simulation::{generate_dataset, replicate_config, write_simulation, ScenarioRequest};
use mbsma::{io, DataError, Dataset, Error, MetricError, ModelError};

use manifest::ManifestBuilder;

#[derive(Parser, Debug)]
#[command(name = "mbsma", version, about = "Dynamic risk prediction with Brier-score model averaging of joint models")]
struct Cli {
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Monte Carlo draws per prediction.
    #[arg(long, global = true)]
    mc_draws: Option<usize>,
    /// Number of baseline-hazard pieces.
    #[arg(long, global = true)]
    knots: Option<usize>,
    /// Gauss-Hermite points per random-effect dimension.
    #[arg(long, global = true)]
    quad_points: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset from a scenario configuration.
    Simulate {
        /// Scenario request JSON (registry name with overrides, or full config).
        config: PathBuf,
    },
    /// Fit one joint model.
    Fit(FitArgs),
    /// Individual-model predictions for subjects at risk at each landmark.
    Predict(PredictArgs),
    /// Estimate model-averaging weights and averaged predictions.
    Weights(WeightsArgs),
    /// Run an experiment plan and write the scored report.
    Evaluate {
        /// Experiment plan JSON.
        plan: PathBuf,
    },
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Model specification JSON.
    #[arg(long, conflicts_with = "markers")]
    spec: Option<PathBuf>,
    /// Comma-separated 1-based marker ids of a linear-trend model.
    #[arg(long, value_delimiter = ',')]
    markers: Vec<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fitted model JSON files.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long = "landmark", required = true, value_delimiter = ',')]
    landmarks: Vec<f64>,
    #[arg(long = "window", required = true, value_delimiter = ',')]
    windows: Vec<f64>,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// Learning dataset used to estimate the weights.
    #[arg(long)]
    data: PathBuf,
    /// Dataset for averaged predictions (default: the learning dataset).
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long = "landmark", required = true, value_delimiter = ',')]
    landmarks: Vec<f64>,
    #[arg(long)]
    window: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Model(m) => match m {
            ModelError::InvalidSpec(_) | ModelError::DimensionMismatch { .. } => 2,
            ModelError::NoEvents | ModelError::Data(_) => 3,
            ModelError::DimensionCap(_) => 4,
            ModelError::ModeSearch(_)
            | ModelError::Initialization(_)
            | ModelError::InvalidParameters(_)
            | ModelError::NotConverged => 5,
        },
        Error::Metric(m) => match m {
            MetricError::EmptyRiskSet(_) | MetricError::CensoringExhausted(_) | MetricError::ZeroWeights => 3,
            _ => 5,
        },
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    DataError::Io { path: path.display().to_string(), source }.into()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, Error> {
    serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, Error> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn make_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

struct Ctx {
    cli: Cli,
    manifest: ManifestBuilder,
}

impl Ctx {
    fn out(&self) -> Result<PathBuf, Error> {
        self.cli.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
    }

    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions::default();
        if let Some(p) = self.cli.quad_points {
            o.quadrature = QuadratureConfig { points: p, ..o.quadrature };
        }
        o
    }

    fn predict_options(&self) -> PredictOptions {
        let mut o = PredictOptions { seed: self.seed(), ..PredictOptions::default() };
        if let Some(m) = self.cli.mc_draws {
            o.mc_draws = m;
        }
        o
    }

    fn finish(&self, dir: &Path, outputs: &[PathBuf]) -> Result<(), Error> {
        self.manifest.write(dir, outputs).map_err(|e| io_err(dir, e))
    }
}

fn simulate(ctx: &mut Ctx, path: &Path) -> Result<(), Error> {
    let bytes = read_bytes(path)?;
    let mut req: ScenarioRequest = parse_json(path, &bytes)?;
    if let Some(s) = ctx.cli.seed {
        req.seed = Some(s);
    }
    let config = req.resolve()?;
    ctx.manifest.config_bytes(&bytes);
    ctx.manifest.input(path);
    ctx.manifest.effective(&config);
    ctx.manifest.seed("seed", config.seed);
    let out = ctx.out()?;
    make_dir(&out)?;
    let n = req.replicates();
    if n == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    let files = |dir: &Path| {
        [io::LONGITUDINAL_FILE, io::SURVIVAL_FILE, io::MARKERS_FILE, "true_effects.csv", "scenario.json"]
            .iter()
            .map(|f| dir.join(f))
            .collect::<Vec<_>>()
    };
    let start = Instant::now();
    if n == 1 {
        let sim = generate_dataset(&config)?;
        write_simulation(&sim, &out)?;
        ctx.manifest.stages.insert("simulate".into(), start.elapsed().as_secs_f64());
        return ctx.finish(&out, &files(&out));
    }
    let width = n.to_string().len().max(3);
    let dirs: Vec<PathBuf> = (1..=n).map(|r| out.join(format!("rep_{r:0width$}"))).collect();
    let results: Vec<Result<(), Error>> = dirs
        .par_iter()
        .enumerate()
        .map(|(r, dir)| {
            make_dir(dir)?;
            let sim = generate_dataset(&replicate_config(&config, r))?;
            Ok(write_simulation(&sim, dir)?)
        })
        .collect();
    results.into_iter().collect::<Result<Vec<_>, _>>()?;
    ctx.manifest.stages.insert("simulate".into(), start.elapsed().as_secs_f64());
    let mut all = Vec::new();
    for (r, dir) in dirs.iter().enumerate() {
        ctx.manifest.seed("replicate_seed", replicate_config(&config, r).seed);
        ctx.finish(dir, &files(dir))?;
        all.extend(files(dir));
    }
    ctx.manifest.remove_seed("replicate_seed");
    ctx.finish(&out, &all)
}

fn load_dataset(ctx: &mut Ctx, dir: &Path) -> Result<Dataset, Error> {
    ctx.manifest.input(dir);
    Ok(io::read_dataset(dir)?)
}

fn fit_cmd(ctx: &mut Ctx, args: &FitArgs) -> Result<(), Error> {
    let mut spec = match &args.spec {
        Some(p) => {
            let bytes = read_bytes(p)?;
            ctx.manifest.config_bytes(&bytes);
            ctx.manifest.input(p);
            parse_json::<ModelSpec>(p, &bytes)?
        }
        None if !args.markers.is_empty() => ModelSpec::linear(&args.markers, 5),
        None => return Err(Error::Config("either --spec or --markers is required".into())),
    };
    if let Some(k) = ctx.cli.knots {
        spec.baseline.knot_count = k;
    }
    let options = ctx.fit_options();
    ctx.manifest.effective(&(&spec, &options));
    let dataset = load_dataset(ctx, &args.data)?;
    if dataset.n_events() == 0 {
        return Err(ModelError::NoEvents.into());
    }
    let start = Instant::now();
    let fitted = fit(&dataset, &spec, &options)?;
    ctx.manifest.stages.insert("fit".into(), start.elapsed().as_secs_f64());
    info!("{}: log-likelihood {} after {} iterations", fitted.model_id(), fitted.log_likelihood, fitted.iterations);
    if !fitted.converged {
        log::warn!("{}: optimizer did not converge", fitted.model_id());
    }
    let out = ctx.out()?;
    make_dir(&out)?;
    let path = out.join("fitted_model.json");
    fitted.save(&path)?;
    ctx.finish(&out, &[path])
}

fn load_models(ctx: &mut Ctx, paths: &[PathBuf]) -> Result<Vec<FittedJointModel>, Error> {
    paths
        .iter()
        .map(|p| {
            ctx.manifest.input(p);
            Ok(FittedJointModel::load(p)?)
        })
        .collect()
}

fn predict_cmd(ctx: &mut Ctx, args: &PredictArgs) -> Result<(), Error> {
    let dataset = load_dataset(ctx, &args.data)?;
    let models = load_models(ctx, &args.models)?;
    let base = ctx.predict_options();
    ctx.manifest.effective(&(&base, &args.landmarks, &args.windows));
    ctx.manifest.seed("seed", base.seed);
    let start = Instant::now();
    let mut csv = String::from("subject_id,model_id,s,t,pi_hat,mc_se\n");
    for m in &models {
        let opts = PredictOptions { seed: derive_seed(base.seed, &[str_tag(&m.model_id())]), ..base };
        let predictor = Predictor::new(m, &opts)?;
        for &s in &args.landmarks {
            let rows: Vec<_> = dataset
                .at_risk(s)
                .par_iter()
                .map(|&id| predictor.predict_windows(&dataset.truncate_history(id, s)?, &args.windows))
                .collect::<Result<_, ModelError>>()?;
            for p in rows.iter().flatten() {
                let _ =
                    writeln!(csv, "{},{},{},{},{},{}", p.subject, m.model_id(), p.landmark, p.window, p.point, p.mc_se);
            }
        }
    }
    ctx.manifest.stages.insert("predict".into(), start.elapsed().as_secs_f64());
    let out = ctx.out()?;
    make_dir(&out)?;
    let path = write_text(&out.join("predictions.csv"), &csv)?;
    ctx.finish(&out, &[path])
}

#[derive(Serialize)]
struct WeightsOutput {
    landmark: f64,
    window: f64,
    model_ids: Vec<String>,
    weights: Vec<f64>,
    objective: f64,
    kkt_residual: f64,
    iterations: usize,
    hash: String,
}

fn weights_cmd(ctx: &mut Ctx, args: &WeightsArgs) -> Result<(), Error> {
    let learning = load_dataset(ctx, &args.data)?;
    let target = match &args.target {
        Some(dir) => Some(load_dataset(ctx, dir)?),
        None => None,
    };
    let models = load_models(ctx, &args.models)?;
    let opts = ctx.predict_options();
    ctx.manifest.effective(&(&opts, &args.landmarks, args.window));
    ctx.manifest.seed("seed", opts.seed);
    let t = args.window;
    let mut records = Vec::new();
    let mut csv = String::from("subject_id,s,t,pi_hat,se_buckland,se_burnham\n");
    let start = Instant::now();
    for &s in &args.landmarks {
        let frame = ipcw_frame(&learning, s, t)?;
        let matrix = build_prediction_matrix(&models, &learning, s, t, &opts)?;
        let sol = solve_weights(&matrix, &frame)?;
        let preds = match &target {
            Some(d) => ma_standard_errors(&build_prediction_matrix(&models, d, s, t, &opts)?, &sol),
            None => ma_standard_errors(&matrix, &sol),
        };
        for p in &preds {
            let _ = writeln!(csv, "{},{},{},{},{},{}", p.subject, s, t, p.point, p.se_buckland, p.se_burnham);
        }
        records.push(WeightsOutput {
            landmark: s,
            window: t,
            hash: weight_hash(&matrix.model_ids, &sol.weights),
            model_ids: matrix.model_ids.clone(),
            weights: sol.weights,
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
        });
    }
    ctx.manifest.stages.insert("weights".into(), start.elapsed().as_secs_f64());
    let out = ctx.out()?;
    make_dir(&out)?;
    let json = serde_json::to_string_pretty(&records).expect("weights serialize") + "\n";
    let a = write_text(&out.join("weights.json"), &json)?;
    let b = write_text(&out.join("ma_predictions.csv"), &csv)?;
    ctx.finish(&out, &[a, b])
}

fn evaluate_cmd(ctx: &mut Ctx, path: &Path) -> Result<(), Error> {
    let bytes = read_bytes(path)?;
    ctx.manifest.config_bytes(&bytes);
    ctx.manifest.input(path);
    let mut plan = read_plan(path)?;
    if let Some(s) = ctx.cli.seed {
        plan.seed = s;
    }
    if let Some(m) = ctx.cli.mc_draws {
        plan.prediction.mc_draws = m;
    }
    if let Some(k) = ctx.cli.knots {
        plan.knots = k;
    }
    if let Some(p) = ctx.cli.quad_points {
        plan.fit.quadrature.points = p;
    }
    check_capabilities(&plan)?;
    ctx.manifest.effective(&plan);
    ctx.manifest.seed("seed", plan.seed);
    let out = ctx.out()?;
    let start = Instant::now();
    let report = run_experiment(&plan)?;
    let t = report.timings;
    for (k, v) in [("data", t.data), ("fit", t.fit), ("predict", t.predict), ("weight", t.weight), ("score", t.score)] {
        ctx.manifest.stages.insert(k.into(), v);
    }
    ctx.manifest.stages.insert("total".into(), start.elapsed().as_secs_f64());
    let written = write_report(&report, &out)?;
    ctx.finish(&out, &written)
}

fn run(ctx: &mut Ctx) -> Result<(), Error> {
    if let Some(j) = ctx.cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    if ctx.cli.mc_draws == Some(0) || ctx.cli.knots == Some(0) || ctx.cli.quad_points == Some(0) {
        return Err(Error::Config("--mc-draws, --knots and --quad-points must be positive".into()));
    }
    match std::mem::replace(&mut ctx.cli.command, Command::Evaluate { plan: PathBuf::new() }) {
        Command::Simulate { config } => simulate(ctx, &config),
        Command::Fit(a) => fit_cmd(ctx, &a),
        Command::Predict(a) => predict_cmd(ctx, &a),
        Command::Weights(a) => weights_cmd(ctx, &a),
        Command::Evaluate { plan } => evaluate_cmd(ctx, &plan),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MBSMA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut ctx = Ctx { cli, manifest: ManifestBuilder::new(std::env::args().collect()) };
    match run(&mut ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
