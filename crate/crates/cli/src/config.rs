//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! variant = nano
//! embed_dims = 16, 32, 64, 128
//! [train]
//! lr = 0.003
//! ```
//!
//! Keys may appear in any order; unset keys take the variant preset or the
//! defaults below. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use agile_core::deform::EmbedKind;
use agile_core::loss::LossConfig;
use agile_core::network::{AttentionMix, NetworkConfig};
use agile_core::posenc::PosEncKind;
use agile_core::train::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config line {line}, key `{key}`: {message}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to one line.
    pub line: usize,
    pub key: String,
    pub message: String,
}

fn err(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            train_count: 200,
            test_count: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Includes the `[ablation]` choices.
    pub model: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: NetworkConfig::nano(),
            data: DataConfig::default(),
            train: TrainConfig {
                lr: 3e-3,
                batch: 2,
                ..TrainConfig::default()
            },
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "model",
        &[
            "variant",
            "embed_dims",
            "heads",
            "depths",
            "decoder_depths",
            "neighborhood",
            "window",
            "patch_size",
            "num_classes",
            "deep_supervision",
        ],
    ),
    ("data", &["image_size", "num_classes", "train_count", "test_count", "seed"]),
    ("train", &["lr", "steps", "batch", "lambda", "seed", "log_every"]),
    ("ablation", &["attention", "posenc", "embedding"]),
];

struct Entry {
    line: usize,
    value: String,
}

struct Fields(BTreeMap<(String, String), Entry>);

impl Fields {
    fn take<T: FromStr>(&mut self, section: &str, key: &str, into: &mut T) -> Result<(), ConfigError> {
        if let Some(e) = self.0.remove(&(section.to_string(), key.to_string())) {
            *into = e
                .value
                .parse()
                .map_err(|_| err(e.line, key, format!("cannot parse `{}`", e.value)))?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, section: &str, key: &str, into: &mut T, f: impl Fn(&str) -> Option<T>) -> Result<(), ConfigError> {
        if let Some(e) = self.0.remove(&(section.to_string(), key.to_string())) {
            *into = f(&e.value).ok_or_else(|| err(e.line, key, format!("invalid value `{}`", e.value)))?;
        }
        Ok(())
    }

    fn line(&self, section: &str, key: &str) -> usize {
        self.0.get(&(section.to_string(), key.to_string())).map_or(0, |e| e.line)
    }
}

fn list<const N: usize>(s: &str) -> Option<[usize; N]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

fn extent(s: &str) -> Option<(usize, usize)> {
    match s.split_once('x') {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => s.trim().parse().ok().map(|n| (n, n)),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut fields = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(n, _)| *n)
                        .ok_or_else(|| err(line, name, "unknown section"))?,
                );
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| err(line, s, "expected `key = value`"))?;
            let key = key.trim();
            let sec = section.ok_or_else(|| err(line, key, "key outside any section"))?;
            let known = SECTIONS.iter().find(|(n, _)| *n == sec).unwrap().1;
            if !known.contains(&key) {
                return Err(err(line, key, format!("unknown key in [{sec}]")));
            }
            let entry = Entry {
                line,
                value: value.trim().to_string(),
            };
            if fields.insert((sec.to_string(), key.to_string()), entry).is_some() {
                return Err(err(line, key, "duplicate key"));
            }
        }
        let mut f = Fields(fields);
        let mut cfg = RunConfig::default();

        let mut variant = cfg.model.variant.clone();
        let vline = f.line("model", "variant");
        f.take("model", "variant", &mut variant)?;
        cfg.model = NetworkConfig::by_name(&variant).ok_or_else(|| err(vline, "variant", format!("unknown variant `{variant}`")))?;
        let m = &mut cfg.model;
        f.take_with("model", "embed_dims", &mut m.embed_dims, list)?;
        f.take_with("model", "heads", &mut m.heads, list)?;
        f.take_with("model", "depths", &mut m.depths, list)?;
        f.take_with("model", "decoder_depths", &mut m.decoder_depths, list)?;
        f.take("model", "neighborhood", &mut m.neighborhood)?;
        f.take("model", "window", &mut m.window)?;
        f.take("model", "patch_size", &mut m.patch_size)?;
        let ncline = f.line("model", "num_classes");
        f.take("model", "num_classes", &mut m.num_classes)?;
        f.take("model", "deep_supervision", &mut m.deep_supervision)?;
        f.take_with("ablation", "attention", &mut m.attention, AttentionMix::parse)?;
        f.take_with("ablation", "posenc", &mut m.posenc, PosEncKind::parse)?;
        f.take_with("ablation", "embedding", &mut m.embedding, EmbedKind::parse)?;

        let d = &mut cfg.data;
        d.num_classes = cfg.model.num_classes;
        let size_line = f.line("data", "image_size");
        let mut size = (d.height, d.width);
        f.take_with("data", "image_size", &mut size, extent)?;
        (d.height, d.width) = size;
        let dcline = f.line("data", "num_classes");
        f.take("data", "num_classes", &mut d.num_classes)?;
        f.take("data", "train_count", &mut d.train_count)?;
        f.take("data", "test_count", &mut d.test_count)?;
        f.take("data", "seed", &mut d.seed)?;

        let t = &mut cfg.train;
        f.take("train", "lr", &mut t.lr)?;
        f.take("train", "steps", &mut t.steps)?;
        f.take("train", "batch", &mut t.batch)?;
        let lline = f.line("train", "lambda");
        f.take("train", "lambda", &mut t.loss.lambda)?;
        f.take("train", "seed", &mut t.seed)?;
        f.take("train", "log_every", &mut t.log_every)?;
        debug_assert!(f.0.is_empty());

        if cfg.data.num_classes != cfg.model.num_classes {
            return Err(err(
                dcline.max(ncline),
                "num_classes",
                format!("[data] has {} classes but [model] has {}", cfg.data.num_classes, cfg.model.num_classes),
            ));
        }
        cfg.model.validate().map_err(|e| match e {
            agile_core::Error::Config { field, message } => {
                let line = f_line_hint(text, &field);
                err(line, &field, message)
            }
            other => err(0, "model", other.to_string()),
        })?;
        LossConfig::new(cfg.train.loss.lambda).map_err(|e| err(lline, "lambda", e.to_string()))?;
        cfg.train.validate().map_err(|e| match e {
            agile_core::Error::Config { field, message } => err(f_line_hint(text, &field), &field, message),
            other => err(0, "train", other.to_string()),
        })?;
        let m = cfg.model.required_multiple();
        if cfg.data.height % m != 0 || cfg.data.width % m != 0 {
            return Err(err(
                size_line,
                "image_size",
                format!("{}x{} is not a multiple of {m}", cfg.data.height, cfg.data.width),
            ));
        }
        if cfg.data.train_count == 0 {
            return Err(err(f_line_hint(text, "train_count"), "train_count", "must be >= 1"));
        }
        if cfg.data.test_count == 0 {
            return Err(err(f_line_hint(text, "test_count"), "test_count", "must be >= 1"));
        }
        Ok(cfg)
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "variant = {}", m.variant);
        let _ = writeln!(s, "embed_dims = {}", join(&m.embed_dims));
        let _ = writeln!(s, "heads = {}", join(&m.heads));
        let _ = writeln!(s, "depths = {}", join(&m.depths));
        let _ = writeln!(s, "decoder_depths = {}", join(&m.decoder_depths));
        let _ = writeln!(s, "neighborhood = {}", m.neighborhood);
        let _ = writeln!(s, "window = {}", m.window);
        let _ = writeln!(s, "patch_size = {}", m.patch_size);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "deep_supervision = {}", m.deep_supervision);
        let d = &self.data;
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "image_size = {}x{}", d.height, d.width);
        let _ = writeln!(s, "num_classes = {}", d.num_classes);
        let _ = writeln!(s, "train_count = {}", d.train_count);
        let _ = writeln!(s, "test_count = {}", d.test_count);
        let _ = writeln!(s, "seed = {}", d.seed);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lambda = {}", t.loss.lambda);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "\n[ablation]");
        let _ = writeln!(s, "attention = {}", m.attention.name());
        let _ = writeln!(s, "posenc = {}", m.posenc.name());
        let _ = writeln!(s, "embedding = {}", m.embedding.name());
        s
    }
}

/// Line of the first `key =` assignment in `text`, or 0.
fn f_line_hint(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| l.split('=').next().is_some_and(|k| k.trim() == key))
        .map_or(0, |i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = RunConfig::parse("[model]\nvariant = nano\nwidth = 3\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (3, "width"));
        let e = RunConfig::parse("[train]\nlr = fast\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "lr"));
        let e = RunConfig::parse("[model]\nheads = 3, 2, 4, 8\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "heads"));
        let e = RunConfig::parse("[data]\nimage_size = 40\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "image_size"));
        let e = RunConfig::parse("[optim]\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (1, "optim"));
        let e = RunConfig::parse("[train]\nsteps = 1\nsteps = 2\n").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn class_counts_must_agree() {
        let e = RunConfig::parse("[model]\nnum_classes = 4\n[data]\nnum_classes = 3\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (4, "num_classes"));
        let c = RunConfig::parse("[model]\nnum_classes = 4\n").unwrap();
        assert_eq!(c.data.num_classes, 4);
    }

    #[test]
    fn extent_forms() {
        assert_eq!(extent("64"), Some((64, 64)));
        assert_eq!(extent("32x64"), Some((32, 64)));
        assert_eq!(extent("x"), None);
    }
}
