use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use labeldp::analysis;
use labeldp::mechanisms::Support;
use labeldp::optlp::{LpBackend, SolverOptions, DEFAULT_GRID_SIZE};
use labeldp::pipeline::{self, BudgetSplit, GridEpsilon, RandomizerConfig};
use labeldp::sim::{run_experiment, ExperimentConfig, MechanismSpec};
use labeldp::{Error, LabelSet, Prior, RandomSource, RandomizerMatrix};

#[derive(Parser)]
#[command(
    name = "labeldp",
    version,
    about = "Unbiased label randomization for regression under label differential privacy"
)]
#[command(after_help = "Set LABELDP_LOG to error, warn, info or debug to control diagnostics on standard error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a private prior from labels and solve for the optimal unbiased randomizer.
    Compute(ComputeArgs),
    /// Privatize a label file with a saved randomizer or a named mechanism.
    Randomize(RandomizeArgs),
    /// Laplace-noised estimate of the label distribution.
    EstimatePrior(EstimatePriorArgs),
    /// Report bias, variance, noisy label loss and structure of a randomizer.
    Evaluate(EvaluateArgs),
    /// Check that a randomizer is unbiased, ε-DP and within the support bound.
    Verify(VerifyArgs),
    /// Run a synthetic training experiment described by a JSON config.
    Simulate(SimulateArgs),
    /// Loss as a function of the output grid mesh or of ε.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug)]
enum PriorEpsilon {
    Auto,
    Fixed(f64),
}

fn parse_prior_epsilon(s: &str) -> Result<PriorEpsilon, String> {
    if s == "auto" {
        return Ok(PriorEpsilon::Auto);
    }
    s.parse::<f64>().map(PriorEpsilon::Fixed).map_err(|_| format!("expected 'auto' or a number, got '{s}'"))
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    ColumnGeneration,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridEpsilonArg {
    Randomization,
    PriorEstimation,
}

#[derive(Clone, Copy, ValueEnum)]
enum SupportArg {
    Continuous,
    Discrete,
}

#[derive(Args)]
struct BudgetArgs {
    /// Total privacy budget for the run.
    #[arg(long)]
    epsilon: f64,
    /// Budget for prior estimation: 'auto' uses min(sqrt(k/n), ε/2).
    #[arg(long, default_value = "auto", value_parser = parse_prior_epsilon)]
    prior_epsilon: PriorEpsilon,
}

#[derive(Args)]
struct SolverArgs {
    /// Number of output grid points.
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    /// Budget share that sets the grid endpoints.
    #[arg(long, value_enum, default_value = "randomization")]
    grid_epsilon: GridEpsilonArg,
    /// Let outputs take any value in the grid range.
    #[arg(long)]
    continuous: bool,
    #[arg(long, value_enum, default_value = "column-generation")]
    backend: BackendArg,
}

impl SolverArgs {
    fn config(&self) -> RandomizerConfig {
        RandomizerConfig {
            grid_size: self.grid,
            grid_epsilon: match self.grid_epsilon {
                GridEpsilonArg::Randomization => GridEpsilon::Randomization,
                GridEpsilonArg::PriorEstimation => GridEpsilon::PriorEstimation,
            },
            continuous: self.continuous,
            solver: solver_options(self.backend),
        }
    }
}

fn solver_options(backend: BackendArg) -> SolverOptions {
    let backend = match backend {
        BackendArg::ColumnGeneration => LpBackend::ColumnGeneration,
        BackendArg::Dense => LpBackend::Dense,
    };
    SolverOptions { backend, ..Default::default() }
}

#[derive(Args)]
struct ComputeArgs {
    /// One-column CSV of labels, optionally headed 'label'.
    #[arg(long)]
    labels_file: PathBuf,
    /// Public label set as a comma-separated list; defaults to the distinct labels in the file.
    #[arg(long, value_delimiter = ',')]
    label_set: Option<Vec<f64>>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Seed for the prior estimate; a fresh one is printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Randomizer JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the estimated prior as JSON.
    #[arg(long)]
    prior_out: Option<PathBuf>,
}

#[derive(Args)]
struct RandomizeArgs {
    /// Randomizer JSON from `compute`.
    #[arg(long, conflicts_with_all = ["mechanism", "epsilon"])]
    randomizer: Option<PathBuf>,
    /// Baseline mechanism to build instead of loading a randomizer.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MechanismSpec::NAMES))]
    mechanism: Option<String>,
    /// Total privacy budget when building a mechanism.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Budget for prior estimation for rr-on-bins and opt-unbiased.
    #[arg(long, default_value = "auto", value_parser = parse_prior_epsilon)]
    prior_epsilon: PriorEpsilon,
    #[arg(long, value_delimiter = ',')]
    label_set: Option<Vec<f64>>,
    /// Noise support for laplace and staircase mechanisms.
    #[arg(long, value_enum, default_value = "continuous")]
    support: SupportArg,
    /// Clip range LO,HI for the clipped mechanisms; defaults to the label range.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    clip: Option<Vec<f64>>,
    /// Output grid size for opt-unbiased.
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    /// Labels to privatize.
    #[arg(long = "in")]
    input: PathBuf,
    /// Noisy label CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep the original label column in the output. Not private.
    #[arg(long)]
    keep_original: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimatePriorArgs {
    #[arg(long)]
    labels_file: PathBuf,
    #[arg(long, value_delimiter = ',')]
    label_set: Option<Vec<f64>>,
    /// Budget spent on the histogram.
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Prior JSON output; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PriorSource {
    /// Prior JSON as written by `estimate-prior`.
    #[arg(long, conflicts_with = "labels_file")]
    prior: Option<PathBuf>,
    /// Use the empirical label distribution of this file. Not private.
    #[arg(long)]
    labels_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Randomizer JSON.
    #[arg(long)]
    randomizer: PathBuf,
    #[command(flatten)]
    source: PriorSource,
    /// Report JSON output; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Randomizer JSON.
    randomizer: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Per-cell CSV output.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Summary JSON output; standard output when omitted.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Optimal unbiased loss on nested grids of increasing mesh.
    Discretization,
    /// Noisy label loss of the main mechanisms across ε.
    Epsilon,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    source: PriorSource,
    /// Uniform prior over this comma-separated label set.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["prior", "labels_file"])]
    uniform: Option<Vec<f64>>,
    /// Privacy level for the discretization sweep.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Grid intervals for the discretization sweep.
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    meshes: Vec<usize>,
    /// Privacy levels for the ε sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
    epsilons: Vec<f64>,
    /// Grid points for the ε sweep.
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    #[arg(long, value_enum, default_value = "column-generation")]
    backend: BackendArg,
    /// CSV output; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LABELDP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Compute(a) => compute(a),
        Command::Randomize(a) => randomize(a),
        Command::EstimatePrior(a) => estimate_prior(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Verify(a) => verify(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn seed_or_fresh(seed: Option<u64>) -> RandomSource {
    let seed = seed.unwrap_or_else(|| {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let s = (nanos as u64) ^ ((std::process::id() as u64) << 32);
        eprintln!("seed: {s} (pass --seed {s} to reproduce)");
        s
    });
    RandomSource::new(seed)
}

fn read_labels(path: &Path) -> CliResult<Vec<f64>> {
    pipeline::read_labels_file(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn label_set_for(explicit: Option<Vec<f64>>, labels: &[f64]) -> CliResult<LabelSet> {
    match explicit {
        Some(mut v) => {
            v.sort_by(f64::total_cmp);
            v.dedup();
            Ok(LabelSet::new(v).map_err(|e| Failure::Usage(format!("--label-set: {e}")))?)
        }
        None => {
            warn!("no --label-set given; using the distinct labels in the input, which is not private");
            Ok(LabelSet::from_observed(labels)?)
        }
    }
}

fn resolve_split(budget: PriorEpsilon, epsilon: f64, k: usize, n: usize) -> CliResult<BudgetSplit> {
    Ok(match budget {
        PriorEpsilon::Auto => pipeline::split_budget(epsilon, k, n)?,
        PriorEpsilon::Fixed(e1) => BudgetSplit::with_prior_epsilon(epsilon, e1)?,
    })
}

/// Opens `path` for writing, or standard output.
fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_randomizer(path: &Path) -> CliResult<RandomizerMatrix> {
    RandomizerMatrix::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_prior(path: &Path) -> CliResult<Prior> {
    let file = File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let p: Prior = serde_json::from_reader(io::BufReader::new(file))
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    // Deserialization skips the constructor's checks.
    Ok(Prior::new(p.labels().clone(), p.probs().to_vec())?)
}

fn empirical_prior(labels: &[f64], label_set: &LabelSet) -> CliResult<Prior> {
    let counts = pipeline::label_counts(labels, label_set)?;
    Ok(Prior::from_weights(label_set.clone(), &counts)?)
}

fn compute(a: ComputeArgs) -> CliResult<()> {
    let labels = read_labels(&a.labels_file)?;
    let set = label_set_for(a.label_set, &labels)?;
    let split = resolve_split(a.budget.prior_epsilon, a.budget.epsilon, set.len(), labels.len())?;
    let mut rng = seed_or_fresh(a.seed);
    let prior = pipeline::estimate_prior_laplace(&labels, &set, split.epsilon1, &mut rng)?;
    let matrix = pipeline::build_randomizer(&prior, split, &a.solver.config())?;
    matrix.save(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    if let Some(p) = &a.prior_out {
        write_json(Some(p), &prior)?;
    }
    info!("randomizer has {} outputs", matrix.outputs().len());
    println!("epsilon1 = {}", split.epsilon1);
    println!("epsilon2 = {}", split.epsilon2);
    Ok(())
}

fn mechanism_spec(a: &RandomizeArgs) -> CliResult<MechanismSpec> {
    let name = a.mechanism.as_deref().unwrap_or("opt-unbiased");
    let mut spec = MechanismSpec::from_name(name)?;
    let support = match a.support {
        SupportArg::Continuous => Support::Continuous,
        SupportArg::Discrete => Support::Discrete,
    };
    let range = a.clip.as_ref().map(|c| [c[0], c[1]]);
    match &mut spec {
        MechanismSpec::Laplace { support: s } | MechanismSpec::Staircase { support: s } => *s = support,
        MechanismSpec::LaplaceClipped { support: s, clip } | MechanismSpec::StaircaseClipped { support: s, clip } => {
            *s = support;
            *clip = range;
        }
        MechanismSpec::OptUnbiased { grid_size, .. } => *grid_size = Some(a.grid),
        _ => {}
    }
    if range.is_some() && !matches!(spec, MechanismSpec::LaplaceClipped { .. } | MechanismSpec::StaircaseClipped { .. })
    {
        return Err(Failure::Usage(format!("--clip does not apply to {name}")));
    }
    Ok(spec)
}

fn randomize(a: RandomizeArgs) -> CliResult<()> {
    let labels = read_labels(&a.input)?;
    let rng = seed_or_fresh(a.seed);
    let noisy = match &a.randomizer {
        Some(path) => {
            let matrix = load_randomizer(path)?;
            info!("randomizing at epsilon = {}", matrix.epsilon());
            pipeline::randomize_labels(&matrix, &labels, &rng)?
        }
        None => {
            let spec = mechanism_spec(&a)?;
            let epsilon = a
                .epsilon
                .ok_or_else(|| Failure::Usage("pass --randomizer, or --epsilon with an optional --mechanism".into()))?;
            let set = label_set_for(a.label_set.clone(), &labels)?;
            let prior = if spec.needs_prior() {
                let split = resolve_split(a.prior_epsilon, epsilon, set.len(), labels.len())?;
                info!("budget split: epsilon1 = {}, epsilon2 = {}", split.epsilon1, split.epsilon2);
                Some((pipeline::estimate_prior_laplace(&labels, &set, split.epsilon1, &mut rng.fork(0))?, split))
            } else {
                None
            };
            let mechanism = spec.build(&set, epsilon, prior.as_ref().map(|(p, s)| (p, *s)))?;
            mechanism.apply(&labels, &rng.fork(1))?
        }
    };
    let originals = a.keep_original.then_some(labels.as_slice());
    if a.keep_original {
        warn!("--keep-original writes the true labels next to the noisy ones");
    }
    match &a.out {
        Some(p) => pipeline::write_noisy_labels_file(p, originals, &noisy)
            .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => pipeline::write_noisy_labels(io::stdout().lock(), originals, &noisy)?,
    }
    Ok(())
}

fn estimate_prior(a: EstimatePriorArgs) -> CliResult<()> {
    let labels = read_labels(&a.labels_file)?;
    let set = label_set_for(a.label_set, &labels)?;
    let mut rng = seed_or_fresh(a.seed);
    let prior = pipeline::estimate_prior_laplace(&labels, &set, a.epsilon, &mut rng)?;
    write_json(a.out.as_deref(), &prior)
}

fn prior_from(source: &PriorSource, label_set: &LabelSet) -> CliResult<Option<Prior>> {
    if let Some(p) = &source.prior {
        return Ok(Some(load_prior(p)?));
    }
    if let Some(f) = &source.labels_file {
        return Ok(Some(empirical_prior(&read_labels(f)?, label_set)?));
    }
    Ok(None)
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let matrix = load_randomizer(&a.randomizer)?;
    let prior = prior_from(&a.source, matrix.inputs())?;
    if let Some(p) = &prior {
        if p.labels() != matrix.inputs() {
            return Err(Failure::Data("prior and randomizer have different label sets".into()));
        }
    }
    let report = analysis::report(&matrix, prior.as_ref())?;
    write_json(a.out.as_deref(), &report)
}

fn verify(a: VerifyArgs) -> CliResult<()> {
    let matrix = load_randomizer(&a.randomizer)?;
    let report = analysis::report(&matrix, None)?;
    write_json(None, &report)?;
    let f = report.structure_flags;
    let failed: Vec<&str> = [("unbiased", f.unbiased), ("dp", f.dp_satisfied), ("support bound", f.support_bound_ok)]
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!("verification failed: {}", failed.join(", "))))
    }
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Failure::Data(format!("{}: {e}", a.config.display())))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", a.config.display())))?;
    let report = run_experiment(&config)?;
    if let Some(p) = &a.out_csv {
        let mut w = sink(Some(p))?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    let mut w = sink(a.out_json.as_deref())?;
    writeln!(w, "{}", report.summary_json()?)?;
    w.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let prior = match (&a.uniform, &a.source.prior, &a.source.labels_file) {
        (Some(v), _, _) => Prior::uniform(label_set_for(Some(v.clone()), &[])?),
        (None, Some(p), _) => load_prior(p)?,
        (None, None, Some(f)) => {
            let labels = read_labels(f)?;
            empirical_prior(&labels, &LabelSet::from_observed(&labels)?)?
        }
        (None, None, None) => return Err(Failure::Usage("pass --prior, --labels-file or --uniform".into())),
    };
    let options = solver_options(a.backend);
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    match a.kind {
        SweepKind::Discretization => {
            for p in analysis::discretization_sweep(&prior, a.epsilon, &a.meshes, &options)? {
                w.serialize(p)?;
            }
        }
        SweepKind::Epsilon => {
            for p in analysis::epsilon_sweep(&prior, &a.epsilons, a.grid, &options)? {
                w.serialize(p)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
