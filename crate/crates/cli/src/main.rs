use std::path::PathBuf;
use std::process::ExitCode;

use agile_cli::gradcheck::{self, MODULES};
use agile_cli::{bench, cmd_ablate, cmd_eval, cmd_train, write_file, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agileformer", about = "Deformable U-shaped segmentation transformer on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Central-difference gradient checks.
    Gradcheck {
        /// Run every op of this module.
        #[arg(long)]
        module: Option<String>,
        /// Run a single op.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
    },
    /// Train on the seeded synthetic split and write artifacts into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the seeded test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write predicted masks, one sample per line.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train every variant along one axis and print `variant,dsc`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// attention, posenc or embedding.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median-of-5 forward timings, printed as `variant,L,micros`.
    Bench {
        /// Comma-separated attention kinds, or `all`.
        #[arg(long, default_value = "nmsa,full")]
        op: String,
        /// Comma-separated `HxW` token grids.
        #[arg(long, default_value = "32x32,32x64,64x64")]
        sizes: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_gradcheck(module: Option<String>, op: Option<String>, seed: u64, trials: u64) -> Result<bool, CliError> {
    let all = gradcheck::registry();
    if let Some(m) = &module {
        if !MODULES.contains(&m.as_str()) {
            return Err(CliError::Usage(format!("unknown module `{m}`; modules: {}", MODULES.join(", "))));
        }
    }
    if let Some(o) = &op {
        if !all.iter().any(|g| g.name == o) {
            return Err(CliError::Usage(format!("unknown op `{o}`; ops: {}", gradcheck::op_names().join(", "))));
        }
    }
    let selected: Vec<_> = all
        .iter()
        .filter(|g| module.as_deref().is_none_or(|m| g.module == m))
        .filter(|g| op.as_deref().is_none_or(|o| g.name == o))
        .collect();
    if selected.is_empty() {
        return Err(CliError::Usage("no op matches both --module and --op".into()));
    }
    let mut ok = true;
    for g in selected {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let report = g.run(seed.wrapping_add(t))?;
            for grp in &report.groups {
                println!("{} trial {t} {} {:.3e}", g.name, grp.name, grp.max_rel_err);
            }
            worst = worst.max(report.worst());
        }
        let pass = worst < g.tol;
        ok &= pass;
        println!("{} {} worst {:.3e} tol {:.0e} {}", g.module, g.name, worst, g.tol, if pass { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(&p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Gradcheck { module, op, seed, trials } => run_gradcheck(module, op, seed, trials),
        Command::Train { config, out } => {
            let report = cmd_train(&config, &out)?;
            print!("{}", report.summary());
            Ok(true)
        }
        Command::Eval { checkpoint, config, dump } => {
            let report = cmd_eval(&checkpoint, &config, dump.as_deref())?;
            print!("{}", report.summary());
            Ok(true)
        }
        Command::Ablate { config, axis, out } => {
            let csv = cmd_ablate(&config, &axis)?;
            emit(&csv, out)?;
            Ok(true)
        }
        Command::Bench { op, sizes, seed, out } => {
            let kinds = bench::parse_ops(&op)?;
            let sizes = bench::parse_sizes(&sizes)?;
            let rows = bench::run(&kinds, &sizes, seed)?;
            emit(&bench::to_csv(&rows), out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
