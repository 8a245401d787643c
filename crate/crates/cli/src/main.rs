use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rwoc_core::harness::{
    self, alloc::TrackingAllocator, bench_backward, memory_exponent, read_dataset, read_results, write_dataset,
    write_results, ExperimentSpec, Method, Noise, Protocol, ResultLine,
};
use rwoc_core::models::{relative_error, ModelKind, ModelParams};
use rwoc_core::robust::RobustConfig;
use rwoc_core::train::{
    am_train, condition_numbers, condition_numbers_numeric, least_squares_train, oracle_train, robot_robust_train,
    robot_train, rs_train, AmUpdate, Init, RsConfig, TrainConfig,
};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "rwoc", version, about = "Regression without correspondence")]
struct Cli {
    /// Only print errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Debug logging.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair as CSV.
    Gen(GenArgs),
    /// Fit a model on a CSV dataset and write its parameters as JSON.
    Train(TrainArgs),
    /// Relative test error of saved parameters.
    Eval(EvalArgs),
    /// Time and memory of one forward solve and exact backward pass per size.
    Bench(BenchArgs),
    /// Condition-number table for equicorrelated designs.
    Cond(CondArgs),
    /// Run an experiment spec and write JSON-lines results.
    Run(RunArgs),
    /// Print the summary lines of a results file.
    Summary { results: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Unlabeled,
    Nonlinear,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "unlabeled")]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// `x` features (nonlinear protocol only).
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    e: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    /// Signal-to-noise ratio; overrides --noise-var.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    shuffle_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives train.csv, test.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Zeros,
    Random,
    Rs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "robot")]
    method: Method,
    #[arg(long, default_value = "linear")]
    model: ModelKind,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Defaults to the number of `D1` rows.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "zeros")]
    init: InitArg,
    /// Start from parameters saved by an earlier `train`; overrides --init.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    rho1: f64,
    #[arg(long, default_value_t = 1e-3)]
    rho2: f64,
    #[arg(long, default_value_t = 200_000)]
    rs_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    inlier_tol: f64,
    /// Exact least-squares update for AM instead of one gradient step.
    #[arg(long)]
    am_exact: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,300,1000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the rows as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CondArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    d1: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    d2: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    rho: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,1")]
    lambda: Vec<f64>,
    /// Add the eigenvalue-based values as extra columns.
    #[arg(long)]
    numeric: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec as JSON; the flags below are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "unlabeled")]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    e: usize,
    #[arg(long)]
    noise_var: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    shuffle_frac: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    rho1: Option<f64>,
    #[arg(long)]
    rho2: Option<f64>,
    /// Print the resolved spec as JSON and exit.
    #[arg(long)]
    print_spec: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "error"
    } else if cli.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Cond(a) => cond(a),
        Command::Run(a) => run(a),
        Command::Summary { results } => {
            for line in read_results(&results)? {
                if let ResultLine::Summary { method, runs, mean, std } = line {
                    println!("{method:<14} runs {runs:>3}  mean {mean:.6}  std {std:.6}");
                }
            }
            Ok(())
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_params(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen(a: GenArgs) -> Result<()> {
    let (split, kind) = match a.protocol {
        ProtocolArg::Unlabeled => {
            let noise = a.snr.map_or(Noise::Variance(a.noise_var), Noise::Snr);
            (harness::gen_unlabeled_sensing(a.n, a.e, noise, a.shuffle_frac, a.seed)?, ModelKind::Linear)
        }
        ProtocolArg::Nonlinear => (harness::gen_nonlinear(a.n, a.d, a.e, a.noise_var, a.seed)?, ModelKind::Sine),
    };
    fs::create_dir_all(&a.out)?;
    write_dataset(&a.out.join("train.csv"), &split.train)?;
    write_dataset(&a.out.join("test.csv"), &split.test)?;
    write_json(&a.out.join("truth.json"), &ModelParams::new(kind, split.w_true))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let rs = RsConfig { iters: a.rs_iters, inlier_tol: a.inlier_tol, ..RsConfig::default() };
    let init = match (&a.init_from, a.init) {
        (Some(p), _) => Init::Explicit(read_params(p)?.w.as_slice().to_vec()),
        (None, InitArg::Zeros) => Init::Zeros,
        (None, InitArg::Random) => Init::RandomNormal,
        (None, InitArg::Rs) => Init::FromRs(rs.clone()),
    };
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        iters: a.iters,
        batch_size: a.batch_size.unwrap_or(data.n()),
        epsilon: a.epsilon,
        seed: a.seed,
        init,
        ..TrainConfig::default()
    };
    let report = match a.method {
        Method::Robot => robot_train(&data, a.model, &cfg)?,
        Method::RobotRobust => robot_robust_train(&data, a.model, &cfg, &RobustConfig::new(a.epsilon, a.rho1, a.rho2))?,
        Method::Am => {
            let update = if a.am_exact { AmUpdate::ExactLeastSquares } else { AmUpdate::GradientStep };
            am_train(&data, a.model, &cfg, update)?
        }
        Method::Ls => least_squares_train(&data, a.model, &cfg)?,
        Method::Oracle => oracle_train(&data, a.model, &cfg)?,
        Method::Rs => rs_train(&data, &cfg, &rs)?,
    };
    if report.unconverged_solves > 0 {
        log::warn!("{} inner solves stopped above tolerance", report.unconverged_solves);
    }
    if let Some(last) = report.objective_trace.last() {
        log::info!("final objective {last:.6e} after {:.2}s", report.wall_time);
    }
    write_json(&a.out, &report.final_params)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let params = read_params(&a.params)?;
    let data = read_dataset(&a.data)?;
    println!("{:.8e}", relative_error(&params, &data)?);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let rows = bench_backward(&a.n, a.epsilon, a.seed)?;
    println!("{:>6} {:>10} {:>10} {:>8} {:>14}", "n", "forward_s", "backward_s", "iters", "peak_bytes");
    for r in &rows {
        let peak = r.peak_bytes.map_or("-".to_string(), |b| b.to_string());
        println!("{:>6} {:>10.4} {:>10.4} {:>8} {:>14}", r.n, r.forward_s, r.backward_s, r.sinkhorn_iters, peak);
    }
    if let Some(k) = memory_exponent(&rows) {
        println!("peak memory ~ n^{k:.2}");
    }
    if let Some(out) = a.out {
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(out, text)?;
    }
    Ok(())
}

fn cond(a: CondArgs) -> Result<()> {
    print!("d1,d2,rho,lambda,c_am,c_robot");
    if a.numeric {
        print!(",c_am_numeric,c_robot_numeric");
    }
    println!();
    for &d1 in &a.d1 {
        for &d2 in &a.d2 {
            for &rho in &a.rho {
                for &lambda in &a.lambda {
                    let (am, robot) = condition_numbers(d1, d2, rho, lambda)?;
                    print!("{d1},{d2},{rho},{lambda},{am},{robot}");
                    if a.numeric {
                        let (nam, nrobot) = condition_numbers_numeric(d1, d2, rho, lambda)?;
                        print!(",{nam},{nrobot}");
                    }
                    println!();
                }
            }
        }
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let mut s = match a.protocol {
                ProtocolArg::Unlabeled => ExperimentSpec::unlabeled_sensing(a.n, a.e),
                ProtocolArg::Nonlinear => ExperimentSpec::nonlinear(a.n, a.d, a.e),
            };
            s.seeds = a.seeds.clone();
            s
        }
    };
    apply_overrides(&mut spec, &a);
    if a.print_spec {
        println!("{}", serde_json::to_string_pretty(&spec)?);
        return Ok(());
    }
    let Some(out) = &a.out else { bail!("--out is required unless --print-spec is given") };
    let lines = harness::run_experiment(&spec)?;
    write_results(out, &lines)?;
    let failed = lines.iter().filter(|l| matches!(l, ResultLine::Failed { .. })).count();
    for line in &lines {
        if let ResultLine::Summary { method, runs, mean, std } = line {
            println!("{method:<14} runs {runs:>3}  mean {mean:.6}  std {std:.6}");
        }
    }
    if failed > 0 {
        log::warn!("{failed} runs failed; see {}", out.display());
    }
    Ok(())
}

fn apply_overrides(spec: &mut ExperimentSpec, a: &RunArgs) {
    if let Some(v) = a.noise_var {
        spec.noise_var = v;
        spec.snr = None;
    }
    if a.snr.is_some() {
        spec.snr = a.snr;
    }
    if let Some(f) = a.shuffle_frac {
        spec.shuffle_frac = f;
    }
    if let Some(m) = &a.methods {
        spec.methods = m.clone();
    }
    if let Some(v) = a.learning_rate {
        spec.train.learning_rate = v;
    }
    if let Some(v) = a.iters {
        spec.train.iters = v;
    }
    if let Some(v) = a.batch_size {
        spec.train.batch_size = v;
    }
    if let Some(v) = a.epsilon {
        spec.train.epsilon = v;
        spec.robust.epsilon = v;
    }
    if let Some(v) = a.rho1 {
        spec.robust.rho1 = v;
    }
    if let Some(v) = a.rho2 {
        spec.robust.rho2 = v;
    }
    if spec.protocol == Protocol::NonlinearRegression && spec.methods.contains(&Method::Rs) {
        log::warn!("consensus only supports the linear model");
    }
}
