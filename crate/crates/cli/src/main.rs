use std::fmt::Display;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attic_core::baselines::Strategy;
use attic_core::curves::{emit_curves, parse_csv, Curves};
use attic_core::exec::Exec;
use attic_core::experiment::{ExperimentConfig, ExperimentRecord};
use attic_core::imageio::write_png;
use attic_core::rundir::{load_config, load_record, load_trace, replay_dir, run_to_dir, trace_strip};
use attic_core::world::{export_pool, fine_grained_fraction, sample_pool};
use attic_core::{seed, Error};
use attic_service::{serve, ServeOptions, ServiceMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attic", version, about = "Adversarial creation of training pairs for attribute rankers")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a dotted config key, e.g. `--set adversarial.control_lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the world pool and export it as PNGs with JSON sidecars.
    World {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment into a run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of strategies × attributes × seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "real,jitter,semantic_jitter,random_synthesis,attic")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Defaults to every attribute of the world.
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Live)]
        mode: ModeArg,
    },
    /// Merge run directories (searched recursively) into one curve table.
    Curves {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write curves.csv and summary.csv here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render archived synthetic pairs and compare bytes.
    Replay {
        dir: PathBuf,
        /// Check a seeded random subset of this many pairs.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Print the probe trajectory and write trace_b<k>.png strips.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Live,
    Oracle,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(msg: impl Display) -> Self {
        Self {
            code: 2,
            message: msg.to_string(),
        }
    }

    fn runtime(msg: impl Display) -> Self {
        Self {
            code: 3,
            message: msg.to_string(),
        }
    }

    fn io(msg: impl Display) -> Self {
        Self {
            code: 4,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Self::validation(e),
            Error::Io(_) | Error::Png(_) => Self::io(e),
            Error::Batch { ref source, .. } if matches!(**source, Error::Io(_)) => Self::io(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

type Outcome = Result<(), Failure>;

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn world(cfg: &ConfigArgs, out: &Path) -> Outcome {
    let cfg = load(cfg)?;
    let pool = sample_pool(&cfg.world, seed::derive(cfg.seed, &["world"]))?;
    export_pool(&pool, out)?;
    for a in 0..cfg.world.num_attributes {
        println!(
            "attribute {a}: fine-grained share {:.3}",
            fine_grained_fraction(&pool, a, cfg.world.tau_discard)
        );
    }
    println!("wrote {} images to {}", pool.len(), out.display());
    Ok(())
}

fn print_record(record: &ExperimentRecord) {
    for r in &record.rows {
        println!(
            "{} attr {} seed {} batch {}: accuracy {:.4} gain {:+.4} labels {} rejected {:.3}",
            record.strategy, record.attribute, record.seed, r.batch, r.accuracy, r.gain_vs_real, r.labels_used, r.rejection_rate
        );
    }
}

fn run(cfg: &ConfigArgs, out: &Path, exec: Exec) -> Outcome {
    let cfg = load(cfg)?;
    let state = run_to_dir(cfg, out, exec)?;
    print_record(&state.record);
    Ok(())
}

fn sweep(cfg: &ConfigArgs, strategies: &[String], seeds: &[u64], attributes: &[usize], out: &Path, exec: Exec) -> Outcome {
    let base = load(cfg)?;
    let strategies: Vec<Strategy> = strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let attributes: Vec<usize> = if attributes.is_empty() {
        (0..base.world.num_attributes).collect()
    } else {
        attributes.to_vec()
    };
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &attribute in &attributes {
            for &seed in seeds {
                let mut c = base.clone();
                c.strategy = strategy;
                c.attribute = attribute;
                c.seed = seed;
                c.validate()?;
                cells.push((out.join(strategy.name()).join(format!("a{attribute}")).join(format!("s{seed}")), c));
            }
        }
    }
    // Cells run in parallel; each cell is sequential inside.
    let records = exec.map(&cells, |(dir, c)| {
        run_to_dir(c.clone(), dir, Exec::Sequential).map(|s| s.record)
    });
    let records: Vec<ExperimentRecord> = records.into_iter().collect::<Result<_, _>>()?;
    let curves = emit_curves(&records)?;
    fs::write(out.join("curves.csv"), curves.to_csv())?;
    fs::write(out.join("summary.csv"), curves.summary_csv())?;
    print_summary(&curves);
    Ok(())
}

fn print_summary(curves: &Curves) {
    println!("strategy,attribute,batch,mean_gain,mean_accuracy,runs");
    for r in curves.summary.iter().filter(|r| r.attribute.is_none()) {
        println!("{},all,{},{:+.4},{:.4},{}", r.strategy, r.batch, r.mean_gain, r.mean_accuracy, r.runs);
    }
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if dir.join("record.json").is_file() {
        found.push(dir.to_owned());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for e in entries.into_iter().filter(|p| p.is_dir()) {
        find_runs(&e, found)?;
    }
    Ok(())
}

fn curves(dirs: &[PathBuf], out: Option<&Path>) -> Outcome {
    let mut runs = Vec::new();
    for d in dirs {
        if d.is_file() {
            // A bare curves.csv: validate and echo it.
            let rows = parse_csv(&fs::read_to_string(d)?)?;
            println!("{}: {} rows", d.display(), rows.len());
            continue;
        }
        find_runs(d, &mut runs)?;
    }
    if runs.is_empty() {
        return if dirs.iter().all(|d| d.is_file()) {
            Ok(())
        } else {
            Err(Failure::validation("no run directories found"))
        };
    }
    let records: Vec<ExperimentRecord> = runs.iter().map(|r| load_record(r)).collect::<Result<_, _>>()?;
    let curves = emit_curves(&records)?;
    match out {
        Some(o) => {
            fs::create_dir_all(o)?;
            fs::write(o.join("curves.csv"), curves.to_csv())?;
            fs::write(o.join("summary.csv"), curves.summary_csv())?;
        }
        None => print!("{}", curves.to_csv()),
    }
    print_summary(&curves);
    Ok(())
}

fn replay(dir: &Path, sample: Option<usize>, sample_seed: u64, trace: bool) -> Outcome {
    let report = replay_dir(dir, sample, sample_seed)?;
    println!(
        "replayed {} pairs ({} without generator inputs skipped): {} mismatched",
        report.checked,
        report.skipped,
        report.mismatches.len()
    );
    if trace {
        let generator = load_config(dir)?.world.generator()?;
        let points = load_trace(dir)?;
        let mut batches: Vec<usize> = points.iter().map(|p| p.batch).collect();
        batches.dedup();
        for p in &points {
            println!("{}", serde_json::to_string(p).expect("serializable"));
        }
        for b in batches {
            let strip: Vec<_> = points.iter().filter(|p| p.batch == b).cloned().collect();
            let path = dir.join(format!("trace_b{b}.png"));
            write_png(&path, &trace_strip(&generator, &strip)?)?;
            eprintln!("wrote {}", path.display());
        }
    }
    if report.ok() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("replay mismatch: {}", report.mismatches.join(", "))))
    }
}

fn serve_cmd(host: &str, port: u16, data_dir: PathBuf, mode: ModeArg, exec: Exec) -> Outcome {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::validation(format!("bad address: {e}")))?;
    let mode = match mode {
        ModeArg::Live => ServiceMode::Live,
        ModeArg::Oracle => ServiceMode::Oracle,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(serve(ServeOptions {
            addr,
            data_dir,
            mode,
            exec,
        }))
        .map_err(Failure::io)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let outcome = match &cli.command {
        Command::World { cfg, out } => world(cfg, out),
        Command::Run { cfg, out } => run(cfg, out, exec),
        Command::Sweep {
            cfg,
            strategies,
            seeds,
            attributes,
            out,
        } => sweep(cfg, strategies, seeds, attributes, out, exec),
        Command::Serve {
            port,
            host,
            data_dir,
            mode,
        } => serve_cmd(host, *port, data_dir.clone(), *mode, exec),
        Command::Curves { dirs, out } => curves(dirs, out.as_deref()),
        Command::Replay {
            dir,
            sample,
            sample_seed,
            trace,
        } => replay(dir, *sample, *sample_seed, *trace),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
