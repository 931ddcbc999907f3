use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qpong::experiment::{
    cmd_analyze, cmd_train, read_trajectory, record_episode, render_trajectory, resolve_output_root, write_trajectory,
    ExperimentConfig, TrainOptions, OUT_ENV_VAR,
};
use qpong::verify::run_all;
use qpong::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUN: u8 = 3;

#[derive(Parser)]
#[command(name = "qpong", version, about = "Hybrid quantum-classical PPO on two-player Pong")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output root [default: config output_dir, then $QPONG_OUT, then ./runs]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (config, seed) cell of an experiment matrix.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Only cells whose `<slug>/<seed>` contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run cells that are already complete.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Aggregate finished runs into summary/curve CSVs and a CKA heatmap.
    Analyze {
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the built-in invariant suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a trajectory as text frames.
    Replay {
        /// Trajectory file (JSON lines).
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        trajectory: Option<PathBuf>,
        /// Run directory `<out>/<slug>/<seed>`; plays one greedy episode.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        env_seed: u64,
        /// Also write the played trajectory here.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        every: usize,
        #[arg(long, default_value_t = 41)]
        width: usize,
        #[arg(long, default_value_t = 15)]
        height: usize,
    },
}

fn failure(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Toml(_) => ExitCode::from(EXIT_USAGE),
        _ => ExitCode::from(EXIT_RUN),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, filter, jobs, force, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return failure(&e),
            };
            match cfg.validate() {
                Ok(counts) => {
                    for (slug, n) in counts {
                        println!("{slug}: {n} backbone parameters");
                    }
                }
                Err(e) => return failure(&e),
            }
            let root = resolve_output_root(out.out.as_deref(), Some(&cfg));
            println!("output root {} (override with --out or ${OUT_ENV_VAR})", root.display());
            let opts = TrainOptions { filter, jobs, force };
            match cmd_train(&cfg, &root, &opts) {
                Ok(report) => {
                    println!(
                        "{} completed, {} skipped, {} failed",
                        report.completed.len(),
                        report.skipped.len(),
                        report.failed.len()
                    );
                    for (name, err) in &report.failed {
                        eprintln!("failed {name}: {err}");
                    }
                    if report.failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_RUN)
                    }
                }
                Err(e) => failure(&e),
            }
        }
        Command::Analyze { out } => {
            let root = resolve_output_root(out.out.as_deref(), None);
            match cmd_analyze(&root) {
                Ok(report) => {
                    for row in &report.rows {
                        println!("{}", row.to_csv());
                    }
                    if !report.degenerate.is_empty() {
                        println!("zero-variance representations: {}", report.degenerate.join(", "));
                    }
                    for f in &report.files {
                        println!("wrote {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => failure(&e),
            }
        }
        Command::Verify { seed } => {
            let reports = run_all(seed);
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{:<18} {} cases={:<6} failures={:<4} max_error={:.3e} tol={:.1e}",
                    r.name,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.cases,
                    r.failures,
                    r.max_error,
                    r.tolerance
                );
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Command::Replay { trajectory, run, env_seed, dump, every, width, height } => {
            if width < 3 || height < 3 {
                return failure(&Error::usage("frame must be at least 3x3"));
            }
            let records = match (trajectory, run) {
                (Some(path), _) => read_trajectory(&path),
                (None, Some(dir)) => record_episode(&dir, env_seed),
                (None, None) => Err(Error::usage("pass --trajectory or --run")),
            };
            let records = match records {
                Ok(r) => r,
                Err(e) => return failure(&e),
            };
            if let Some(path) = dump {
                if let Err(e) = write_trajectory(&path, &records) {
                    return failure(&e);
                }
            }
            print!("{}", render_trajectory(&records, every, width, height));
            let total: f64 = records.iter().map(|r| r.reward).sum();
            println!("{} steps, return {total}", records.len());
            ExitCode::SUCCESS
        }
    }
}
