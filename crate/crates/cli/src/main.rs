use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cachesort::analysis::{Estimator, Formula};
use cachesort::experiment::{
    compare, compare_table, evaluate, generate_keys, predict_rows, read_rows, simulate, sortbench,
    write_phase_rows, write_rows, BenchRun, DistSpec, Preset, SimSpec, SimVariant,
};
use cachesort::radix_float::{
    read_key_file, read_key_header, write_key_file, FloatFormat, FloatKey,
};
use cachesort::CacheGeometry;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cache-miss simulator, miss predictor and cache-tuned float sorter.
#[derive(Debug, Parser)]
#[command(name = "cachesort", version)]
struct Cli {
    /// Directory for output files when `--out` is not given.
    #[arg(long, global = true, env = "CACHESORT_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the random access processes (or a traced permute) through the cache simulator.
    Simulate(SimulateArgs),
    /// Evaluate miss formulas.
    Predict(PredictArgs),
    /// Check predictions against simulations from one or more CSV files.
    Compare(CompareArgs),
    /// Sort float keys with the tuned plan (and optionally the single-pass plan), simulating every access.
    Sortbench(SortbenchArgs),
    /// Write a key file of model floats in [0, 1).
    Genkeys(GenkeysArgs),
}

#[derive(Debug, Args)]
struct GeometryArgs {
    /// Named geometry: paper-L2 (B=8, C=8192) or tiny (B=8, C=128).
    #[arg(long, default_value = "paper-L2")]
    preset: Preset,
    /// Words per block; overrides the preset.
    #[arg(short = 'B', long = "block-words")]
    block_words: Option<u64>,
    /// Blocks in the cache; overrides the preset.
    #[arg(short = 'C', long = "cache-blocks")]
    cache_blocks: Option<u64>,
}

impl GeometryArgs {
    fn geometry(&self) -> Result<CacheGeometry> {
        let base = self.preset.geometry();
        let b = self.block_words.unwrap_or(base.block_size());
        let c = self.cache_blocks.unwrap_or(base.num_blocks());
        Ok(CacheGeometry::new(b, c)?)
    }
}

#[derive(Debug, Args)]
struct DistArgs {
    /// Class distribution: uniform:K, geometric:K or float:E:M.
    #[arg(long, conflicts_with_all = ["uniform_k", "dist_file"])]
    dist: Option<DistSpec>,
    /// Uniform distribution over K classes.
    #[arg(short = 'k', long = "uniform-k", conflicts_with = "dist_file")]
    uniform_k: Option<usize>,
    /// File of class weights, separated by whitespace or commas.
    #[arg(long)]
    dist_file: Option<PathBuf>,
}

impl DistArgs {
    fn spec(&self) -> Result<DistSpec> {
        if let Some(d) = &self.dist {
            return Ok(d.clone());
        }
        if let Some(k) = self.uniform_k {
            return Ok(DistSpec::Uniform(k));
        }
        if let Some(path) = &self.dist_file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            return Ok(DistSpec::from_weights_text(&text)?);
        }
        bail!("no distribution given; use --dist, -k or --dist-file")
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    geom: GeometryArgs,
    #[command(flatten)]
    dist: DistArgs,
    /// inplace, outofplace, sequences or sort-trace.
    #[arg(long, default_value = "inplace")]
    variant: SimVariant,
    /// Rounds (keys) per run.
    #[arg(short = 'n', long, default_value_t = 1_000_000)]
    n: u64,
    /// A seed count (`30` means seeds 0..30) or a comma-separated list.
    #[arg(long, default_value = "1")]
    seeds: Seeds,
    /// Output CSV; `-` for stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    geom: GeometryArgs,
    #[command(flatten)]
    dist: DistArgs,
    /// Formulas to evaluate (comma-separated). Defaults to those that apply to `--variant`.
    #[arg(long, value_delimiter = ',')]
    formula: Vec<Formula>,
    /// Pick the formulas that bound this variant.
    #[arg(long)]
    variant: Option<SimVariant>,
    #[arg(short = 'n', long, default_value_t = 1_000_000)]
    n: u64,
    /// Monte Carlo samples per class for thm1 and thm4.
    #[arg(long, default_value_t = Estimator::default().samples)]
    samples: usize,
    /// Seed of the Monte Carlo estimator.
    #[arg(long, default_value_t = 0)]
    estimator_seed: u64,
    /// Print every summand of each formula to stderr.
    #[arg(long)]
    show_terms: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// CSV files holding simulation and prediction rows.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Markdown report; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Width {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct SortbenchArgs {
    #[command(flatten)]
    geom: GeometryArgs,
    /// Key file written by `genkeys`. Without it, keys are generated.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 1_000_000)]
    n: usize,
    /// Seed for generated keys and for the memory layout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    format: Width,
    /// Split point of the tuned plan; must lie in [1/n, 1/log2 n].
    #[arg(long)]
    theta: Option<f64>,
    /// Also run the single-pass baseline plan.
    #[arg(long)]
    naive: bool,
    /// Per-phase miss counts as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenkeysArgs {
    #[arg(short = 'n', long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    format: Width,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

impl std::str::FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed `{x}`: {e}"))
        };
        if s.contains(',') {
            return s.split(',').map(parse).collect::<Result<_, _>>().map(Seeds);
        }
        Ok(Seeds((0..parse(s)?).collect()))
    }
}

/// A failure that maps to a specific exit code.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn output(
    out: &Option<PathBuf>,
    out_dir: &Option<PathBuf>,
    default_name: &str,
) -> Result<Box<dyn Write>> {
    let path = match (out, out_dir) {
        (Some(p), _) if p == Path::new("-") => None,
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir.join(default_name))
        }
        (None, None) => None,
    };
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(&p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_simulate(args: SimulateArgs, out_dir: &Option<PathBuf>) -> Result<()> {
    let spec = SimSpec {
        variant: args.variant,
        geom: args.geom.geometry()?,
        dist: args.dist.spec()?,
        n: args.n,
        seeds: args.seeds.0,
    };
    let rows = simulate(&spec)?;
    let mut out = output(&args.out, out_dir, "simulate.csv")?;
    write_rows(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn cmd_predict(args: PredictArgs, out_dir: &Option<PathBuf>) -> Result<()> {
    let geom = args.geom.geometry()?;
    let dist = args.dist.spec()?;
    let formulas: Vec<Formula> = match (&args.formula[..], args.variant) {
        ([], Some(v)) => v.formulas(&dist).to_vec(),
        ([], None) => bail!("give --formula or --variant"),
        (f, _) => f.to_vec(),
    };
    let est = Estimator {
        samples: args.samples,
        seed: args.estimator_seed,
        ..Estimator::default()
    };
    let mut rows = Vec::new();
    for &f in &formulas {
        rows.extend(predict_rows(f, geom, &dist, args.n, &est));
        if args.show_terms {
            match evaluate(f, geom, &dist, args.n, &est) {
                Ok(report) => {
                    for t in &report.terms {
                        eprintln!("{f} {} = {:.9}", t.name, t.value);
                    }
                    eprintln!("{f} rate = {:.9}", report.rate);
                }
                Err(e) => eprintln!("{f}: inapplicable: {e}"),
            }
        }
    }
    let mut out = output(&args.out, out_dir, "predict.csv")?;
    write_rows(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn cmd_compare(args: CompareArgs, out_dir: &Option<PathBuf>) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        rows.extend(
            read_rows(BufReader::new(file))
                .with_context(|| format!("reading {}", path.display()))?,
        );
    }
    let points = compare(&rows).map_err(|e| CheckFailed(e.to_string()))?;
    let mut out = output(&args.out, out_dir, "compare.md")?;
    out.write_all(compare_table(&points).as_bytes())?;
    out.flush()?;
    let failed = points.iter().filter(|p| !p.passed()).count();
    if failed > 0 {
        return Err(CheckFailed(format!(
            "{failed} of {} parameter points failed",
            points.len()
        ))
        .into());
    }
    Ok(())
}

fn load_or_generate<F: FloatKey>(args: &SortbenchArgs) -> Result<Vec<F>> {
    match &args.keys {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Ok(read_key_file(BufReader::new(file))?)
        }
        None => Ok(generate_keys(args.n, args.seed)),
    }
}

fn bench<F: FloatKey>(args: &SortbenchArgs) -> Result<Vec<BenchRun>> {
    let keys: Vec<F> = load_or_generate(args)?;
    Ok(sortbench(
        &keys,
        args.geom.geometry()?,
        args.seed,
        args.theta,
        args.naive,
    )?)
}

fn cmd_sortbench(args: SortbenchArgs, out_dir: &Option<PathBuf>) -> Result<()> {
    let width = match &args.keys {
        Some(path) => {
            let mut file =
                File::open(path).with_context(|| format!("opening {}", path.display()))?;
            match read_key_header(&mut file)?.0 {
                f if f == FloatFormat::F32 => Width::F32,
                _ => Width::F64,
            }
        }
        None => args.format,
    };
    let runs = match width {
        Width::F32 => bench::<f32>(&args)?,
        Width::F64 => bench::<f64>(&args)?,
    };

    let mut out = output(&args.out, out_dir, "sortbench.csv")?;
    write_phase_rows(&mut out, &runs)?;
    out.flush()?;

    for run in &runs {
        eprintln!(
            "{}: correct={} n={} passes={} misses={} accesses={} misses/key={:.4} wall={:.3}s (local, not reproducible)",
            run.plan,
            run.correct,
            run.report.n,
            run.report.passes,
            run.misses_total,
            run.accesses_total,
            run.misses_total as f64 / run.report.n.max(1) as f64,
            run.wall_seconds
        );
    }
    if let Some(bad) = runs.iter().find(|r| !r.correct) {
        return Err(CheckFailed(format!("{} plan produced unsorted output", bad.plan)).into());
    }
    Ok(())
}

fn cmd_genkeys(args: GenkeysArgs, out_dir: &Option<PathBuf>) -> Result<()> {
    let out = output(&args.out, out_dir, "keys.bin")?;
    match args.format {
        Width::F32 => write_key_file(out, &generate_keys::<f32>(args.n, args.seed))?,
        Width::F64 => write_key_file(out, &generate_keys::<f64>(args.n, args.seed))?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let dir = cli.out_dir;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &dir),
        Command::Predict(a) => cmd_predict(a, &dir),
        Command::Compare(a) => cmd_compare(a, &dir),
        Command::Sortbench(a) => cmd_sortbench(a, &dir),
        Command::Genkeys(a) => cmd_genkeys(a, &dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
