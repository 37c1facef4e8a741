use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drk_core::bench::{self, BenchOp};
use drk_core::data::{self, DatasetSpec, ToySample};
use drk_core::gradcheck::suite::{self, Target, DEFAULT_INSTANCES};
use drk_core::metrics::{evaluate, MaskPair, DEFAULT_BINARIZE_THRESHOLD};
use drk_core::model::MicroModel;
use drk_core::train::{self, AblationTable, TrainConfig};

const THREADS_ENV: &str = "DRK_THREADS";

#[derive(Parser, Debug)]
#[command(name = "drk", version, about = "Deformable enhancement block toolkit")]
struct Cli {
    /// Worker threads for the numeric kernels (falls back to DRK_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference gradient checks
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic dataset
    MakeData(MakeDataArgs),
    /// Train the micro model
    Train(TrainArgs),
    /// Score predictions against ground-truth masks
    Eval(EvalArgs),
    /// Four-variant ablation
    Ablate(AblateArgs),
    /// Kernel micro-benchmark
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Module name or `all`
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
}

#[derive(Args, Debug)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint and history CSV
    #[arg(long)]
    out: PathBuf,
    /// `key = value` overrides of the default configuration
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of predicted `<id>.mask.pgm` files
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINARIZE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Runs seeds 0..N
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Table CSV path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_parser = parse_op)]
    op: BenchOp,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
}

fn parse_op(s: &str) -> Result<BenchOp, String> {
    BenchOp::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn check(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<drk_core::Error> for Failure {
    fn from(e: drk_core::Error) -> Self {
        use drk_core::Error as E;
        let code = match e {
            E::Numeric(_) | E::Training(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn init_threads(flag: Option<usize>) -> CliResult {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(v.trim().parse().map_err(|_| {
                Failure::usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))
            })?),
            _ => None,
        },
    };
    match n {
        Some(0) => Err(Failure::usage("thread count must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot start thread pool: {e}"))),
        None => Ok(()),
    }
}

fn require_dir(path: &Path) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::usage(format!("directory not found: {}", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("file not found: {}", path.display())))
    }
}

fn load_data(dir: &Path) -> CliResult<Vec<ToySample>> {
    require_dir(dir)?;
    Ok(data::load(dir)?)
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            require_file(p)?;
            TrainConfig::from_file(p)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                require_dir(parent)?;
            }
            fs::write(p, text)
                .map_err(|e| Failure::usage(format!("cannot write {}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let targets = if a.module == "all" {
        Target::ALL.to_vec()
    } else {
        let t = Target::parse(&a.module).ok_or_else(|| {
            let names: Vec<_> = Target::ALL.iter().map(|t| t.name()).collect();
            Failure::usage(format!(
                "unknown module '{}', expected all or one of {}",
                a.module,
                names.join(", ")
            ))
        })?;
        vec![t]
    };
    let mut failed = Vec::new();
    for t in targets {
        let report = suite::run(t, a.seed, a.instances)?;
        println!("{}", report.line());
        if !report.passed() {
            failed.push(t.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn make_data(a: MakeDataArgs) -> CliResult {
    let spec = DatasetSpec {
        n_samples: a.n,
        image_size: a.size,
        seed: a.seed,
        ..DatasetSpec::default()
    };
    let samples = data::generate(&spec)?;
    data::save(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let samples = load_data(&a.data)?;
    let outcome = train::train(&samples, &cfg, Some(&a.out))?;
    if let Some(last) = outcome.history.last() {
        eprintln!("epoch {} loss {:.6}", last.epoch, last.loss_total);
    }
    if let Some(rep) = &outcome.final_eval {
        println!("val_miou={}", rep.miou);
    }
    println!("checkpoint={}", a.out.join(train::CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.threshold) {
        return Err(Failure::usage("threshold must lie in [0, 1)"));
    }
    let samples = load_data(&a.data)?;
    let report = if let Some(ckpt) = &a.ckpt {
        require_file(ckpt)?;
        let model = MicroModel::load(ckpt)?;
        let idx: Vec<usize> = (0..samples.len()).collect();
        train::evaluate_model(&model, &samples, &idx, a.threshold)?
    } else {
        let dir = a.pred.as_deref().expect("clap enforces ckpt or pred");
        require_dir(dir)?;
        let ids: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        let preds = data::read_masks(dir, &ids)?;
        let pairs: Vec<MaskPair> = samples
            .into_iter()
            .zip(preds)
            .map(|(s, pred)| MaskPair {
                pred,
                gt: s.mask,
                sample_id: s.sample_id,
            })
            .collect();
        evaluate(&pairs)?
    };
    emit(&report.to_csv(), a.out.as_deref())?;
    eprintln!("miou={}", report.miou);
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    let mut base = load_config(a.config.as_deref())?;
    base.eval_every_epoch = false;
    let samples = load_data(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let table: AblationTable = train::ablate(&samples, &base, &seeds, |v, seed, rep| {
        eprintln!("{} seed {seed}: miou {:.4}", v.name(), rep.miou);
    })?;
    emit(&table.to_csv(), a.out.as_deref())
}

fn bench_cmd(a: BenchArgs) -> CliResult {
    let r = bench::run(a.op, a.size, a.iters)?;
    println!("{r}");
    Ok(())
}
