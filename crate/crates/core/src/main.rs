//! Command-line surface: data ingestion, basis-size tuning, MCMC fitting,
//! effect summarization, held-out prediction, synthetic-data generation, and
//! the replication study.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use connectome_graphon::data::{ConnectomeDataset, DataError};
use connectome_graphon::inference::{
    edge_plot_data, posterior_predict, summarize_effects, tune_basis_size, TuneReport,
};
use connectome_graphon::model::{Hyperparams, LatentPrior};
use connectome_graphon::samplers::{McmcRun, Sampler, SamplerOptions};
use connectome_graphon::simulate::{
    generate_dataset, run_study, CovariateLaw, Method, StudyConfig, TruthSpec,
};
use connectome_graphon::splines::BasisConfig;

#[derive(Parser)]
#[command(
    name = "conngraph",
    version,
    about = "Graphon-regularized Bayesian regression for multi-subject weighted networks"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for study replications (1 = fully sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the model to an edge/covariate CSV pair by MCMC.
    Fit(FitArgs),
    /// Re-summarize the posterior of an existing checkpoint.
    Summarize(SummarizeArgs),
    /// Held-out prediction metrics from an existing checkpoint.
    Predict(PredictArgs),
    /// AIC grid search over the basis size.
    Tune(TuneArgs),
    /// Generate a synthetic dataset from known graphon truths.
    Simulate(SimulateArgs),
    /// Replication study comparing the Bayesian fit with per-edge ANCOVA.
    Study(StudyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Edge CSV: subject,region_a,region_b,count,mean_length.
    #[arg(long)]
    edges: PathBuf,
    /// Covariate CSV: subject,mci,ad,male,age.
    #[arg(long)]
    covariates: PathBuf,
    /// Include self-edges (j == k) in the edge index set.
    #[arg(long)]
    self_edges: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of B-spline basis functions; omit to pick by AIC.
    #[arg(long)]
    basis_size: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prior on the covariate-effect latents.
    #[arg(long, value_enum)]
    latent_prior: Option<LatentPriorArg>,
    /// Drop the subject random effects from the model.
    #[arg(long)]
    no_random_effects: bool,
    /// Write a resumable checkpoint every N sweeps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Resume from a checkpoint written by a previous fit.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out edge CSV.
    #[arg(long)]
    edges: PathBuf,
    /// Held-out covariate CSV.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    grid_min: usize,
    #[arg(long, default_value_t = 20)]
    grid_max: usize,
    /// Latent sets to average the AIC over.
    #[arg(long, default_value_t = 10)]
    draws: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    regions: usize,
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Error sd of the log-length layer.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Sd of the age covariate.
    #[arg(long, default_value_t = 1.0)]
    age_sd: f64,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    regions: usize,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "500")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    replications: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "bayes,ancova")]
    methods: Vec<MethodArg>,
    #[arg(long)]
    basis_size: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    age_sd: f64,
    /// Skip the full-sample estimation-accuracy table.
    #[arg(long)]
    no_estimation: bool,
    /// Also fit on half of each replication and score held-out prediction.
    #[arg(long)]
    prediction: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LatentPriorArg {
    BetaMixture,
    LogitNormal,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bayes,
    Ancova,
}

// ---------------------------------------------------------------------------
// Config file

/// Flat TOML config; every key optional, command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    a: Option<f64>,
    m: Option<f64>,
    q: Option<f64>,
    b1: Option<f64>,
    b2: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    d1: Option<f64>,
    d2: Option<f64>,
    latent_prior: Option<String>,
    burn_in: Option<usize>,
    samples: Option<usize>,
    thin: Option<usize>,
    seed: Option<u64>,
    basis_size: Option<usize>,
    random_effects: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))
    }

    fn hyperparams(&self) -> Result<Hyperparams, CliError> {
        let mut h = Hyperparams::default();
        if let Some(v) = self.a {
            h.a = v;
        }
        if let Some(v) = self.m {
            h.m_shape = v;
        }
        if let Some(v) = self.q {
            h.q = v;
        }
        if let Some(v) = self.b1 {
            h.b1 = v;
        }
        if let Some(v) = self.b2 {
            h.b2 = v;
        }
        if let Some(v) = self.c1 {
            h.c1 = v;
        }
        if let Some(v) = self.c2 {
            h.c2 = v;
        }
        if let Some(v) = self.d1 {
            h.d1 = v;
        }
        if let Some(v) = self.d2 {
            h.d2 = v;
        }
        if let Some(p) = &self.latent_prior {
            h.latent_prior = match p.as_str() {
                "beta_mixture" => LatentPrior::BetaMixture,
                "logit_normal" => LatentPrior::LogitNormal,
                other => {
                    return Err(CliError::Invalid(format!(
                        "unknown latent_prior {other:?} (expected beta_mixture or logit_normal)"
                    )))
                }
            };
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug)]
enum CliError {
    /// Missing or unreadable/unparsable inputs (exit code 2).
    Input(String),
    /// Bad configuration or invariant violations (exit code 3).
    Invalid(String),
    /// Runtime failures (exit code 1).
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Invalid(_) => 3,
            CliError::Run(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Invalid(m) | CliError::Run(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Artifact I/O

/// Write atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .and_then(|()| fs::rename(&tmp, path))
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", dir.display())))
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Run(format!("csv serialization: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Run(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Run(format!("csv encoding: {e}")))
}

fn json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Run(format!("json: {e}")))
}

/// Resumable fit state: the sampler (with its RNG) plus everything collected
/// so far.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    sampler: Sampler,
    run: McmcRun,
}

impl Checkpoint {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Input(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("checkpoint {}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, json_string(self)?.as_bytes())
    }
}

fn trace_csv(run: &McmcRun) -> String {
    let mut out = String::from(
        "iter,log_likelihood,sigma2,\
         alpha_length,alpha_presence,alpha_count,\
         clusters_length,clusters_presence,clusters_count,\
         accept_theta3,accept_gamma3,accept_eta3,accept_xi,accept_delta,\
         step_theta3,step_gamma3,step_eta3,step_xi,step_delta\n",
    );
    for r in &run.trace {
        let _ = write!(out, "{},{},{}", r.iter, r.log_likelihood, r.sigma2);
        for v in r.alpha {
            let _ = write!(out, ",{v}");
        }
        for v in r.num_clusters {
            let _ = write!(out, ",{v}");
        }
        for v in r.accept {
            let _ = write!(out, ",{v}");
        }
        for v in r.step {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands

fn load_dataset(args: &DataArgs) -> Result<ConnectomeDataset, CliError> {
    let data = ConnectomeDataset::from_csv_files(&args.edges, &args.covariates, args.self_edges)?;
    data.validate()?;
    Ok(data)
}

fn sampler_options(file: &FileConfig) -> SamplerOptions {
    SamplerOptions {
        burn_in: file.burn_in.unwrap_or(5000),
        samples: file.samples.unwrap_or(5000),
        thin: file.thin.unwrap_or(1),
        seed: file.seed.unwrap_or(1),
        random_effects: file.random_effects.unwrap_or(true),
        ..SamplerOptions::default()
    }
}

fn pick_basis_size(
    requested: Option<usize>,
    data: &ConnectomeDataset,
    seed: u64,
    out: &Path,
) -> Result<usize, CliError> {
    if let Some(k) = requested {
        return Ok(k);
    }
    let grid: Vec<usize> = (7..=20).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7475_6e65); // "tune" stream
    let report = tune_basis_size(data, &grid, 10, &mut rng)
        .map_err(|e| CliError::Run(format!("basis-size tuning: {e}")))?;
    write_atomic(&out.join("tune.csv"), csv_string(&report.rows)?.as_bytes())?;
    eprintln!("basis size chosen by AIC: K = {}", report.chosen);
    Ok(report.chosen)
}

fn summarize_to_dir(
    run: &McmcRun,
    cfg: &BasisConfig,
    data: &ConnectomeDataset,
    out: &Path,
) -> Result<(), CliError> {
    let rows = summarize_effects(&run.draws, cfg, &data.region_names)
        .map_err(|e| CliError::Run(format!("effect summary: {e}")))?;
    write_atomic(&out.join("effects.csv"), csv_string(&rows)?.as_bytes())?;
    let plot = edge_plot_data(&rows, &data.region_names);
    write_atomic(&out.join("edge_plot.json"), json_string(&plot)?.as_bytes())?;
    write_atomic(&out.join("trace.csv"), trace_csv(run).as_bytes())?;
    Ok(())
}

fn cmd_fit(args: &FitArgs, file: &FileConfig) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let checkpoint_path = args.out.join("checkpoint.json");

    let mut ckpt = if let Some(resume) = &args.resume {
        Checkpoint::load(resume)?
    } else {
        let data = load_dataset(&args.data)?;
        let mut opts = sampler_options(file);
        if let Some(v) = args.burn_in {
            opts.burn_in = v;
        }
        if let Some(v) = args.samples {
            opts.samples = v;
        }
        if let Some(v) = args.thin {
            opts.thin = v;
        }
        if let Some(v) = args.seed {
            opts.seed = v;
        }
        if args.no_random_effects {
            opts.random_effects = false;
        }
        let mut hyper = file.hyperparams()?;
        if let Some(p) = args.latent_prior {
            hyper.latent_prior = match p {
                LatentPriorArg::BetaMixture => LatentPrior::BetaMixture,
                LatentPriorArg::LogitNormal => LatentPrior::LogitNormal,
            };
        }
        let k = pick_basis_size(
            args.basis_size.or(file.basis_size),
            &data,
            opts.seed,
            &args.out,
        )?;
        let cfg = BasisConfig::cubic(k)
            .map_err(|e| CliError::Invalid(format!("basis size {k}: {e}")))?;
        Checkpoint {
            sampler: Sampler::new(data, cfg, hyper, opts),
            run: McmcRun {
                draws: Vec::new(),
                trace: Vec::new(),
                step_sizes: [0.0; 5],
                accept_rates: [0.0; 5],
            },
        }
    };

    let chunk = if args.checkpoint_every == 0 {
        usize::MAX
    } else {
        args.checkpoint_every
    };
    loop {
        let finished = ckpt.sampler.advance(&mut ckpt.run, chunk);
        ckpt.save(&checkpoint_path)?;
        eprintln!(
            "sweep {}/{}",
            ckpt.sampler.iter,
            ckpt.sampler.target_iters()
        );
        if finished {
            break;
        }
    }

    summarize_to_dir(&ckpt.run, &ckpt.sampler.cfg, &ckpt.sampler.data, &args.out)
}

fn cmd_summarize(args: &SummarizeArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    summarize_to_dir(&ckpt.run, &ckpt.sampler.cfg, &ckpt.sampler.data, &args.out)
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let heldout = ConnectomeDataset::from_csv_files(
        &args.edges,
        &args.covariates,
        ckpt.sampler.data.self_edges,
    )?;
    heldout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let metrics = posterior_predict(
        &ckpt.run.draws,
        &ckpt.sampler.cfg,
        &ckpt.sampler.hyper,
        &heldout,
        ckpt.sampler.opts.random_effects,
        &mut rng,
    )
    .map_err(|e| CliError::Run(format!("prediction: {e}")))?;
    let text = json_string(&metrics)?;
    write_atomic(&args.out.join("prediction.json"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}

fn cmd_tune(args: &TuneArgs, file: &FileConfig) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    if args.grid_min < 4 || args.grid_max < args.grid_min {
        return Err(CliError::Invalid(format!(
            "bad grid [{}, {}]: need 4 <= min <= max",
            args.grid_min, args.grid_max
        )));
    }
    let data = load_dataset(&args.data)?;
    let grid: Vec<usize> = (args.grid_min..=args.grid_max).collect();
    let seed = args.seed.or(file.seed).unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report: TuneReport = tune_basis_size(&data, &grid, args.draws, &mut rng)
        .map_err(|e| CliError::Run(format!("basis-size tuning: {e}")))?;
    write_atomic(&args.out.join("tune.csv"), csv_string(&report.rows)?.as_bytes())?;
    println!("chosen basis size: {}", report.chosen);
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, file: &FileConfig) -> Result<(), CliError> {
    if args.regions < 2 || args.subjects < 1 {
        return Err(CliError::Invalid(
            "need at least 2 regions and 1 subject".into(),
        ));
    }
    ensure_out_dir(&args.out)?;
    let seed = args.seed.or(file.seed).unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = TruthSpec::sample(args.regions, args.sigma, &mut rng);
    let law = CovariateLaw {
        age_sd: args.age_sd,
    };
    let data = generate_dataset(&truth, args.subjects, &law, &mut rng);
    let mut edges = Vec::new();
    data.write_edges_csv(&mut edges)
        .map_err(|e| CliError::Run(format!("edge csv: {e}")))?;
    let mut covs = Vec::new();
    data.write_covariates_csv(&mut covs)
        .map_err(|e| CliError::Run(format!("covariate csv: {e}")))?;
    write_atomic(&args.out.join("edges.csv"), &edges)?;
    write_atomic(&args.out.join("covariates.csv"), &covs)?;
    write_atomic(&args.out.join("truth.json"), json_string(&truth)?.as_bytes())?;
    Ok(())
}

fn cmd_study(args: &StudyArgs, file: &FileConfig) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let mut sampler = sampler_options(file);
    sampler.burn_in = args.burn_in.or(file.burn_in).unwrap_or(1000);
    sampler.samples = args.samples.or(file.samples).unwrap_or(1000);
    sampler.random_effects = file.random_effects.unwrap_or(false);
    let config = StudyConfig {
        num_regions: args.regions,
        sample_sizes: args.sizes.clone(),
        replications: args.replications,
        seed: args.seed.or(file.seed).unwrap_or(1),
        methods: args
            .methods
            .iter()
            .map(|m| match m {
                MethodArg::Bayes => Method::Bayes,
                MethodArg::Ancova => Method::Ancova,
            })
            .collect(),
        num_basis: args.basis_size.or(file.basis_size).unwrap_or(7),
        sigma_true: args.sigma,
        covariates: CovariateLaw {
            age_sd: args.age_sd,
        },
        estimation: !args.no_estimation,
        prediction: args.prediction,
        sampler,
    };
    let report = run_study(&config).map_err(|e| CliError::Run(e.to_string()))?;
    write_atomic(&args.out.join("accuracy.csv"), report.accuracy_csv().as_bytes())?;
    write_atomic(
        &args.out.join("prediction.csv"),
        report.prediction_csv().as_bytes(),
    )?;
    let mut md = report.accuracy_markdown();
    md.push_str(&report.prediction_markdown());
    write_atomic(&args.out.join("report.md"), md.as_bytes())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if cli.threads == 0 {
        return Err(CliError::Invalid("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .ok();
    match &cli.cmd {
        Cmd::Fit(a) => cmd_fit(a, &file),
        Cmd::Summarize(a) => cmd_summarize(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Tune(a) => cmd_tune(a, &file),
        Cmd::Simulate(a) => cmd_simulate(a, &file),
        Cmd::Study(a) => cmd_study(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
