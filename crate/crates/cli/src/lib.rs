//! Batch entry points: gradient checks, training, evaluation, ablations and
//! attention benchmarks.

pub mod bench;
pub mod config;
pub mod gradcheck;

use std::fmt::Write as _;
use std::path::Path;

use agile_core::checkpoint;
use agile_core::data::{gen_split, SegmentationSample};
use agile_core::deform::EmbedKind;
use agile_core::metrics::EvalReport;
use agile_core::network::{AttentionMix, Network};
use agile_core::params::ParamStore;
use agile_core::posenc::PosEncKind;
use agile_core::train::{evaluate, train_with, TrainLog};

pub use config::{ConfigError, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.agfk";
pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] agile_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    Ok(RunConfig::parse(&text)?)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io(path))
}

/// Seeded train and test splits of a run.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>), CliError> {
    let d = &cfg.data;
    let train = gen_split(d.seed, "train", d.train_count, d.num_classes, d.height, d.width)?;
    let test = gen_split(d.seed, "test", d.test_count, d.num_classes, d.height, d.width)?;
    Ok((train, test))
}

pub struct Experiment {
    pub net: Network,
    pub store: ParamStore,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Builds, trains and evaluates one configuration.
pub fn run_experiment(cfg: &RunConfig, mut on_row: impl FnMut(&agile_core::train::LogRow)) -> Result<Experiment, CliError> {
    let (train, test) = datasets(cfg)?;
    let (net, mut store) = Network::build(&cfg.model, cfg.train.seed)?;
    let log = train_with(&net, &mut store, &train, &cfg.train, &mut on_row)?;
    let (report, _) = evaluate(&net, &store, &test)?;
    Ok(Experiment { net, store, log, report })
}

fn progress(row: &agile_core::train::LogRow) {
    eprintln!("step {:>5}  lr {:.3e}  loss {:.5}  dsc {:.4}", row.step, row.lr, row.loss, row.dsc);
}

pub fn cmd_train(config: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let cfg = read_config(config)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let exp = run_experiment(&cfg, progress)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &exp.store)?;
    write_file(&out.join(LOG_FILE), exp.log.to_csv())?;
    write_file(&out.join(METRICS_FILE), exp.report.summary())?;
    write_file(&out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(exp.report)
}

/// Rebuilds the network, loads the checkpoint and scores the seeded test
/// split. With `dump`, writes one line of space-separated labels per sample.
pub fn cmd_eval(checkpoint_path: &Path, config: &Path, dump: Option<&Path>) -> Result<EvalReport, CliError> {
    let cfg = read_config(config)?;
    let (net, mut store) = Network::build(&cfg.model, cfg.train.seed)?;
    checkpoint::load_into(checkpoint_path, &mut store)?;
    let (_, test) = datasets(&cfg)?;
    let (report, preds) = evaluate(&net, &store, &test)?;
    if let Some(path) = dump {
        let mut s = String::new();
        for p in &preds {
            let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        write_file(path, s)?;
    }
    Ok(report)
}

pub const AXES: &[&str] = &["attention", "posenc", "embedding"];

/// The configurations compared along one ablation axis, labelled.
pub fn ablation_variants(cfg: &RunConfig, axis: &str) -> Result<Vec<(String, RunConfig)>, CliError> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let out: Vec<(String, RunConfig)> = match axis {
        "attention" => [AttentionMix::NmsaDmsa, AttentionMix::WmsaWmsa]
            .into_iter()
            .map(|k| (k.name().to_string(), with(&|c| c.model.attention = k)))
            .collect(),
        "posenc" => [PosEncKind::MsDepe, PosEncKind::Cpe, PosEncKind::None]
            .into_iter()
            .map(|k| (k.name().to_string(), with(&|c| c.model.posenc = k)))
            .collect(),
        "embedding" => [EmbedKind::Deformable, EmbedKind::Rigid]
            .into_iter()
            .map(|k| (k.name().to_string(), with(&|c| c.model.embedding = k)))
            .collect(),
        other => {
            return Err(CliError::Usage(format!("unknown axis `{other}`; expected one of {}", AXES.join(", "))));
        }
    };
    Ok(out)
}

/// CSV `variant,dsc` of the final mean test DSC per variant.
pub fn cmd_ablate(config: &Path, axis: &str) -> Result<String, CliError> {
    let cfg = read_config(config)?;
    let variants = ablation_variants(&cfg, axis)?;
    let mut csv = String::from("variant,dsc\n");
    for (name, c) in variants {
        eprintln!("variant {name}");
        let exp = run_experiment(&c, progress)?;
        let _ = writeln!(csv, "{name},{}", exp.report.dsc_mean());
    }
    Ok(csv)
}
