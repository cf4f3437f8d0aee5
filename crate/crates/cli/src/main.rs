use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mcsvm::dataset::{parse_libsvm, Normalizer};
use mcsvm::dist::{llw_distributed_train, ww_distributed_train, TcpTransport};
use mcsvm::eval::{evaluate, EvalReport};
use mcsvm::sched::{build_schedule, chunk_classes, two_level_schedule};
use mcsvm::synth::{synthetic, SynthSpec};
use mcsvm::{llw, ovr, ww, Error, NormalizationMode, SolverConfig, SparseDataset, TrainStats, WeightMatrix};

#[derive(Parser)]
#[command(name = "mcsvm", version, about = "Multi-class linear SVMs (LLW, WW, one-vs-rest) by dual coordinate ascent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, write it and its per-epoch statistics.
    Train(TrainArgs),
    /// Print one predicted label per sample.
    Predict(ApplyArgs),
    /// Score a model on labeled data.
    Evaluate(ApplyArgs),
    /// Train and print the objective trace as CSV.
    GapTrace(TrainArgs),
    /// Time a fixed number of epochs over a grid of worker counts.
    Bench(BenchArgs),
    /// Print the class pairing rounds as CSV.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    Llw,
    Ww,
    Ovr,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Norm {
    None,
    L2,
    Var,
}

impl From<Norm> for NormalizationMode {
    fn from(n: Norm) -> Self {
        match n {
            Norm::None => NormalizationMode::None,
            Norm::L2 => NormalizationMode::UnitNorm,
            Norm::Var => NormalizationMode::UnitVariance,
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "ww")]
    solver: Solver,
    /// log10 of the regularization constant.
    #[arg(long = "logC", allow_hyphen_values = true, conflicts_with = "c")]
    log_c: Option<f64>,
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value = "none")]
    normalize: Norm,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long)]
    no_shrink: bool,
    /// Bundle classes per worker for WW instead of a flat round robin.
    #[arg(long)]
    bundled: bool,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig> {
        let c = match (self.c, self.log_c) {
            (Some(c), _) => c,
            (None, Some(l)) => 10f64.powf(l),
            (None, None) => 1.0,
        };
        let cfg = SolverConfig {
            c,
            epsilon: self.eps,
            max_epochs: self.max_epochs,
            seed: self.seed,
            num_workers: self.workers,
            shrinking: !self.no_shrink,
            ww_schedule: if self.bundled {
                mcsvm::solver::WwScheduleKind::Bundled
            } else {
                mcsvm::solver::WwScheduleKind::Flat
            },
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out data, normalized with the training set's fit and scored after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Runs with seeds seed, seed+1, ...; output paths get a `.N` suffix.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Comma-separated host:port of every node, in rank order.
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Seconds to wait for peers.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    normalize: Norm,
    /// Training data to fit `--normalize var` on.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Where to write the output (stdout if absent); evaluate writes a CSV row.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    solver: SolverArgs,
    /// Benchmark data; a synthetic set is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic set as samples,classes,dim,nnz.
    #[arg(long, value_delimiter = ',', default_value = "20000,32,5000,20")]
    synth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    grid: Vec<usize>,
    /// Epochs per run.
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    classes: usize,
    /// Split classes into this many bundles and print the two-level plan.
    #[arg(long)]
    bundles: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCSVM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether every training run converged.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => train(&args, false),
        Command::GapTrace(args) => train(&args, true),
        Command::Predict(args) => predict(&args).map(|_| true),
        Command::Evaluate(args) => evaluate_cmd(&args).map(|_| true),
        Command::Bench(args) => bench(&args).map(|_| true),
        Command::Schedule(args) => schedule(&args).map(|_| true),
    }
}

fn load(path: &Path) -> Result<SparseDataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    parse_libsvm(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// `stats.csv` becomes `stats.2.csv` for the second of several repeats.
fn numbered(path: &Path, run: usize, repeats: usize) -> PathBuf {
    if repeats <= 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{}.{}", run + 1, ext.to_string_lossy()),
        None => format!("{stem}.{}", run + 1),
    };
    path.with_file_name(name)
}

struct Trained {
    model: Option<WeightMatrix>,
    stats: TrainStats,
    alpha_density: f64,
}

fn fit(ds: &SparseDataset, cfg: &SolverConfig, args: &TrainArgs) -> Result<Trained> {
    if args.nodes.len() > 1 {
        if args.rank >= args.nodes.len() {
            bail!("--rank {} is out of range for {} nodes", args.rank, args.nodes.len());
        }
        let timeout = Duration::from_secs(args.timeout);
        let mut t = TcpTransport::connect(args.rank, &args.nodes, ds.content_hash(), timeout)?;
        let out = match args.solver.solver {
            Solver::Llw => llw_distributed_train(ds, cfg, &mut t)?,
            Solver::Ww => ww_distributed_train(ds, cfg, &mut t)?,
            Solver::Ovr => bail!("the ovr solver does not run distributed"),
        };
        return Ok(Trained {
            model: out.model,
            stats: out.stats,
            alpha_density: out.alpha_density,
        });
    }
    Ok(match args.solver.solver {
        Solver::Llw => {
            let (w, st, stats) = llw::train(ds, cfg)?;
            Trained { model: Some(w), alpha_density: st.alpha_density(ds), stats }
        }
        Solver::Ww => {
            let (w, st, stats) = ww::train(ds, cfg)?;
            Trained { model: Some(w), alpha_density: st.alpha_density(ds), stats }
        }
        Solver::Ovr => {
            let (w, st, stats) = ovr::train(ds, cfg)?;
            Trained { model: Some(w), alpha_density: st.alpha_density(), stats }
        }
    })
}

fn train(args: &TrainArgs, trace_to_stdout: bool) -> Result<bool> {
    let base = args.solver.config()?;
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let raw = load(&args.data)?;
    let normalizer = Normalizer::fit(&raw, args.solver.normalize.into());
    let ds = normalizer.apply(&raw);
    let test = args.test.as_deref().map(load).transpose()?.map(|t| normalizer.apply(&t));
    info!("{} samples, {} classes, {} features", ds.len(), ds.num_classes(), ds.dim());

    let mut all_converged = true;
    for run in 0..args.repeats {
        let cfg = SolverConfig { seed: base.seed + run as u64, ..base.clone() };
        let trained = fit(&ds, &cfg, args)?;
        let stats = &trained.stats;
        all_converged &= stats.converged;

        if let Some(path) = &args.stats {
            stats.write_csv(output(Some(&numbered(path, run, args.repeats)))?)?;
        } else if trace_to_stdout {
            stats.write_csv(io::stdout().lock())?;
        }
        if let (Some(path), Some(model)) = (&args.model, &trained.model) {
            let path = numbered(path, run, args.repeats);
            let mut out = output(Some(&path))?;
            model.write_to(&mut out)?;
            out.flush()?;
        }
        if !trace_to_stdout {
            println!(
                "run {} seed {}: converged={} epochs={} dual={:.10e} gap={}",
                run + 1,
                cfg.seed,
                stats.converged,
                stats.epochs_run(),
                stats.final_dual().unwrap_or(f64::NAN),
                stats.final_gap().map_or("n/a".into(), |g| format!("{g:.3e}")),
            );
        }
        if let (Some(test), Some(model)) = (&test, &trained.model) {
            print!("{}", evaluate(model, test, Some(trained.alpha_density))?);
        }
    }
    Ok(all_converged)
}

fn apply_inputs(args: &ApplyArgs) -> Result<(WeightMatrix, Option<SparseDataset>)> {
    let file = File::open(&args.model).with_context(|| format!("cannot open {}", args.model.display()))?;
    let model = WeightMatrix::read_from(BufReader::new(file))
        .with_context(|| format!("cannot read model {}", args.model.display()))?;
    let mode: NormalizationMode = args.normalize.into();
    let data = match load(&args.data) {
        Ok(d) => d,
        Err(e) if matches!(e.downcast_ref::<Error>(), Some(Error::EmptyDataset)) => return Ok((model, None)),
        Err(e) => return Err(e),
    };
    let normalizer = match (mode, &args.fit) {
        (NormalizationMode::UnitVariance, Some(p)) => Normalizer::fit(&load(p)?, mode),
        (NormalizationMode::UnitVariance, None) => bail!("--normalize var needs --fit TRAINING_DATA"),
        _ => Normalizer::fit(&data, mode),
    };
    Ok((model, Some(normalizer.apply(&data))))
}

fn predict(args: &ApplyArgs) -> Result<()> {
    let (model, data) = apply_inputs(args)?;
    let mut out = output(args.output.as_deref())?;
    for x in data.iter().flat_map(|d| d.samples()) {
        writeln!(out, "{}", model.label_names()[model.predict(x)])?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate_cmd(args: &ApplyArgs) -> Result<()> {
    let (model, data) = apply_inputs(args)?;
    let Some(data) = data else {
        bail!("{} has no samples to evaluate", args.data.display());
    };
    let report: EvalReport = evaluate(&model, &data, None)?;
    print!("{report}");
    if let Some(path) = &args.output {
        let mut out = output(Some(path))?;
        writeln!(out, "{}", EvalReport::CSV_HEADER)?;
        writeln!(out, "{}", report.csv_row())?;
        out.flush()?;
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let ds = match &args.data {
        Some(p) => Normalizer::fit(&load(p)?, args.solver.normalize.into()).apply(&load(p)?),
        None => {
            let [samples, classes, dim, nnz] = args.synth[..] else {
                bail!("--synth expects samples,classes,dim,nnz");
            };
            synthetic(&SynthSpec { samples, classes, dim, nnz, signal: 0.5, seed: args.solver.seed })?
        }
    };
    let mut grid = args.grid.clone();
    if !grid.contains(&1) {
        grid.insert(0, 1);
    }
    let base = SolverConfig {
        c: 1.0,
        // fixed work per run: no shrinking and a band too narrow to stop early
        epsilon: f64::MIN_POSITIVE,
        max_epochs: args.rounds,
        shrinking: false,
        trace_objective: false,
        ..args.solver.config()?
    };
    let name = match args.solver.solver {
        Solver::Llw => "llw",
        Solver::Ww => "ww",
        Solver::Ovr => "ovr",
    };
    let mut times = Vec::new();
    for &workers in &grid {
        let cfg = SolverConfig { num_workers: workers, ..base.clone() };
        let start = Instant::now();
        match args.solver.solver {
            Solver::Llw => drop(llw::train(&ds, &cfg)?),
            Solver::Ww => drop(ww::train(&ds, &cfg)?),
            Solver::Ovr => drop(ovr::train(&ds, &cfg)?),
        }
        times.push((workers, start.elapsed().as_secs_f64()));
        info!("{name} with {workers} workers: {:.3}s", times.last().unwrap().1);
    }
    let t1 = times.iter().find(|t| t.0 == 1).map(|t| t.1).unwrap_or(f64::NAN);
    let mut out = output(args.stats.as_deref())?;
    writeln!(out, "solver,workers,nodes,seconds,speedup")?;
    for (workers, secs) in times {
        writeln!(out, "{name},{workers},1,{secs:.6},{:.4}", t1 / secs)?;
    }
    out.flush()?;
    Ok(())
}

fn schedule(args: &ScheduleArgs) -> Result<()> {
    let mut out = output(None)?;
    // classes are printed 1-based
    match args.bundles {
        None => {
            writeln!(out, "round,a,b")?;
            for (r, round) in build_schedule(args.classes)?.rounds.iter().enumerate() {
                for &(a, b) in &round.pairs {
                    writeln!(out, "{},{},{}", r + 1, a + 1, b + 1)?;
                }
            }
        }
        Some(k) => {
            let plan = two_level_schedule(&chunk_classes(args.classes, k, None))?;
            writeln!(out, "stage,round,a,b")?;
            for (stage, rounds) in [("local", &plan.local_rounds), ("bundle", &plan.bundle_rounds)] {
                for (r, round) in rounds.iter().enumerate() {
                    for &(a, b) in &round.pairs {
                        if stage == "local" {
                            writeln!(out, "{stage},{},{},{}", r + 1, a + 1, b + 1)?;
                        } else {
                            for (x, y) in plan.cross_pairs(a, b) {
                                writeln!(out, "{stage},{},{},{}", r + 1, x + 1, y + 1)?;
                            }
                        }
                    }
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}
