use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prefnash_bench::record::fmt_f64;
use prefnash_bench::{evaluate_run, run_repeats, BenchError, ExperimentConfig, Registry};

#[derive(Parser)]
#[command(name = "prefnash", version, about = "Learn generalized Nash equilibria from preference queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run {
        config: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds, starting at the base seed.
        #[arg(long)]
        repeat: Option<usize>,
        /// Output directory (default `runs/<problem>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the registered problems.
    ListProblems,
    /// Recompute the final metrics of a finished run.
    Evaluate { run_dir: PathBuf },
}

fn run(config: &Path, seed: Option<u64>, repeat: Option<usize>, out: Option<PathBuf>) -> Result<(), BenchError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = repeat {
        cfg.repeat = r;
    }
    cfg.validate()?;
    let out = out
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.problem, cfg.seed)));
    let records = run_repeats(&cfg, &Registry::default(), Some(&out))?;
    for r in &records {
        print!("{}", r.summary());
    }
    println!("output: {}", out.display());
    Ok(())
}

fn evaluate(dir: &Path) -> Result<(), BenchError> {
    let ev = evaluate_run(dir, &Registry::default())?;
    println!("status = {}", ev.status.as_str());
    println!("x = [{}]", ev.x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", "));
    for (i, m) in ev.metrics.iter().enumerate() {
        println!("metric[{i}] = {}", fmt_f64(*m));
    }
    if let Some(e) = ev.ref_error {
        println!("ref_error = {}", fmt_f64(e));
    }
    if let Some(r) = ev.rmse {
        println!("rmse = {}", fmt_f64(r));
    }
    println!("stored_gap = {}", fmt_f64(ev.stored_gap));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run { config, seed, repeat, out } => run(&config, seed, repeat, out),
        Command::ListProblems => {
            for (id, summary) in Registry::default().list() {
                println!("{id:<22} {summary}");
            }
            Ok(())
        }
        Command::Evaluate { run_dir } => evaluate(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
