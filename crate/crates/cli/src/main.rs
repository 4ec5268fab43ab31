use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drscl_core::experiment::{
    emit_plotdata, load_run_record, run_baseline_singles, run_continual, sweep, RunConfig, RunRecord, SweepAxis,
};
use drscl_core::Error;

mod verify;

#[derive(Parser)]
#[command(name = "drscl", version, about = "Douglas-Rachford splitting continual learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate on the configured task stream.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from per-seed checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Repeat the run over values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, lambda_stab, gamma or lambda_r
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Train one fresh model per task and report its accuracy.
    Baselines {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize finished runs and write long-format plot data.
    Report {
        /// Run output directories (each containing run.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        plotdata: Option<PathBuf>,
    },
    /// Run the built-in oracle and property checks.
    Verify,
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_record(rec: &RunRecord) {
    for o in &rec.outcomes {
        match (&o.record, &o.error) {
            (Some(r), _) => {
                let m = &r.metrics;
                println!(
                    "{} seed {}: ACC {:.4} BWT {} FWT {} mean forgetting {:.4} bound violations {}/{}",
                    rec.config.method.name(),
                    o.seed,
                    m.acc,
                    m.bwt.map_or("-".into(), |b| format!("{b:.4}")),
                    m.fwt.map_or("-".into(), |f| format!("{f:.4}")),
                    m.mean_forgetting(),
                    m.bound_violations,
                    m.bound_transitions,
                );
            }
            (None, Some(e)) => println!("{} seed {}: FAILED {e}", rec.config.method.name(), o.seed),
            (None, None) => {}
        }
    }
    if let Some((m, s)) = rec.mean_acc() {
        println!("{}: ACC {m:.4} +/- {s:.4}", rec.config.method.name());
    }
}

/// Exit status for a run record: 3 if any seed failed numerically, 1 for other failures.
fn record_status(rec: &RunRecord) -> ExitCode {
    if rec.outcomes.iter().any(|o| o.numerical) {
        ExitCode::from(3)
    } else if rec.failures().next().is_some() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn error_status(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Json(_) => ExitCode::from(2),
        e if e.is_numerical() => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { common, resume } => {
            let cfg = load_config(&common)?;
            let rec = run_continual(&cfg, resume)?;
            print_record(&rec);
            Ok(record_status(&rec))
        }
        Command::Sweep { common, axis, values } => {
            let axis = SweepAxis::parse(&axis)?;
            let cfg = load_config(&common)?;
            let (records, rows) = sweep(&cfg, axis, &values)?;
            println!("{},mean_acc,std_acc,runs_ok,runs_failed", axis.name());
            for r in &rows {
                println!("{},{:.4},{:.4},{},{}", r.value, r.mean_acc, r.std_acc, r.runs_ok, r.runs_failed);
            }
            let n = emit_plotdata(&records, cfg.out_dir.join("plotdata.csv"))?;
            log::info!("wrote {n} plot rows");
            Ok(ExitCode::SUCCESS)
        }
        Command::Baselines { common } => {
            let cfg = load_config(&common)?;
            for (seed, accs) in run_baseline_singles(&cfg)? {
                let cells: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
                println!("seed {seed}: {}", cells.join(" "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs, plotdata } => {
            let records = runs.iter().map(load_run_record).collect::<Result<Vec<_>, _>>()?;
            for rec in &records {
                print_record(rec);
            }
            if let Some(path) = plotdata {
                let n = emit_plotdata(&records, &path)?;
                println!("wrote {n} rows to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let mut ok = true;
            for check in verify::run_all() {
                println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
                ok &= check.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_status(&e)
        }
    }
}
