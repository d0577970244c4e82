//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sar_core::{AnchorSource, GmmSpec, Mode, SarConfig, SgdConfig, TrainConfig};

use crate::error::CliError;

/// Every accepted key with its default and a one-line description.
/// `output_dir` has no default and must be supplied.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "output_dir",
        "",
        "directory receiving all outputs (required)",
    ),
    (
        "data_dir",
        "",
        "directory with train.csv/test.csv from gen-data; empty generates inline",
    ),
    ("classes", "10", "number of classes C"),
    ("input_dim", "16", "input dimensionality"),
    (
        "n_max",
        "500",
        "training samples of the most frequent class",
    ),
    ("beta", "100", "imbalance factor N_max / N_min"),
    (
        "class_separation",
        "5",
        "minimum distance between class means, in noise units",
    ),
    ("noise_sigma", "1", "isotropic noise standard deviation"),
    ("data_seed", "0", "dataset seed, shared by all runs"),
    ("test_per_class", "50", "balanced test samples per class"),
    ("anchor_source", "nd", "anchor generator: nd, om or mes"),
    (
        "anchor_seed",
        "0",
        "seed of the anchors and the embedding head",
    ),
    (
        "mode",
        "sar",
        "training mode for `train`: ce, cr, sar or proto",
    ),
    ("seed", "1", "training seed for `train`"),
    ("seeds", "1,2,3,4,5", "training seeds for `compare`"),
    ("modes", "ce,cr,sar,proto", "modes for `compare`"),
    (
        "consistency",
        "true",
        "report cross-seed consistency in `compare`",
    ),
    ("jobs", "1", "concurrent runs in `compare`"),
    ("epochs", "60", "training epochs"),
    ("batch_size", "64", "minibatch size"),
    ("lr", "0.01", "base learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0005", "L2 weight decay"),
    ("poly_power", "0.9", "polynomial decay exponent"),
    ("hidden", "64,64", "hidden widths of the feature extractor"),
    ("feature_dim", "16", "feature and anchor dimensionality D"),
    ("head_hidden", "16", "hidden width of the embedding head"),
    ("lambda1", "1", "weight of the auxiliary anchor loss"),
    ("lambda2", "0.1", "weight of the feature-to-anchor pull"),
    ("tau", "0.9", "confidence filter threshold"),
    ("delta", "0.8", "confidence gate of the semantic-anchor EMA"),
    ("alpha", "0.999", "EMA decay of the semantic anchors"),
    (
        "proto_lambda",
        "0.1",
        "weight of the prototype pull in proto mode",
    ),
    (
        "proto_bank_momentum",
        "0.9",
        "momentum of the prototype bank",
    ),
    (
        "eval_every",
        "0",
        "evaluate every this many epochs; 0 disables",
    ),
    (
        "log_anchors",
        "true",
        "record embedded and semantic anchors in the train log",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub data: GmmSpec,
    pub test_per_class: usize,
    pub anchor_source: AnchorSource,
    pub anchor_seed: u64,
    pub mode: Mode,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub consistency: bool,
    pub jobs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub poly_power: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub sar: SarConfig,
    pub proto_lambda: f64,
    pub proto_bank_momentum: f64,
    pub eval_every: usize,
    pub log_anchors: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(CliError::Config(format!(
            "{key} must list at least one value"
        )));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Collects `key=value` pairs from files, code and command-line overrides;
/// later pairs win.
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    pairs: Vec<(String, String)>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a config file. Blank lines and `#` comments are skipped; a key
    /// may appear only once per file.
    pub fn file(mut self, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    n + 1
                ))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!(
                    "{}:{}: duplicate key {k}",
                    path.display(),
                    n + 1
                )));
            }
            self.pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(self)
    }

    pub fn set(mut self, key: &str, value: &str) -> Self {
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    /// Parses `--key value` and `--key=value` tokens.
    pub fn overrides(mut self, args: &[String]) -> Result<Self, CliError> {
        let mut it = args.iter();
        while let Some(tok) = it.next() {
            let body = tok
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected --key, got {tok:?}")))?;
            let (k, v) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("--{body} needs a value")))?;
                    (body.to_string(), v.clone())
                }
            };
            self.pairs.push((k.replace('-', "_"), v));
        }
        Ok(self)
    }

    pub fn build(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::defaults();
        let mut output_dir = None;
        for (k, v) in &self.pairs {
            if k == "output_dir" {
                if v.trim().is_empty() {
                    return Err(CliError::Config("output_dir must not be empty".into()));
                }
                output_dir = Some(PathBuf::from(v.trim()));
            } else {
                cfg.set(k, v)?;
            }
        }
        cfg.output_dir =
            output_dir.ok_or_else(|| CliError::Config("missing required key output_dir".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    fn defaults() -> Self {
        let data = GmmSpec::default();
        Self {
            output_dir: PathBuf::new(),
            data_dir: None,
            data,
            test_per_class: 50,
            anchor_source: AnchorSource::Nd,
            anchor_seed: 0,
            mode: Mode::Sar,
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            modes: Mode::ALL.to_vec(),
            consistency: true,
            jobs: 1,
            epochs: 60,
            batch_size: 64,
            optimizer: SgdConfig::default(),
            poly_power: 0.9,
            hidden: vec![64, 64],
            feature_dim: 16,
            head_hidden: 16,
            sar: SarConfig::default(),
            proto_lambda: 0.1,
            proto_bank_momentum: 0.9,
            eval_every: 0,
            log_anchors: true,
        }
    }

    /// Applies one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "data_dir" => {
                self.data_dir = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()));
            }
            "classes" => self.data.classes = parse(key, v)?,
            "input_dim" => self.data.input_dim = parse(key, v)?,
            "n_max" => self.data.n_max = parse(key, v)?,
            "beta" => self.data.beta = parse(key, v)?,
            "class_separation" => self.data.class_separation = parse(key, v)?,
            "noise_sigma" => self.data.noise_sigma = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "anchor_source" => self.anchor_source = parse(key, v)?,
            "anchor_seed" => self.anchor_seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "modes" => self.modes = parse_list(key, v)?,
            "consistency" => self.consistency = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.optimizer.base_lr = parse(key, v)?,
            "momentum" => self.optimizer.momentum = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "lambda1" => self.sar.lambda1 = parse(key, v)?,
            "lambda2" => self.sar.lambda2 = parse(key, v)?,
            "tau" => self.sar.tau = parse(key, v)?,
            "delta" => self.sar.delta = parse(key, v)?,
            "alpha" => self.sar.alpha = parse(key, v)?,
            "proto_lambda" => self.proto_lambda = parse(key, v)?,
            "proto_bank_momentum" => self.proto_bank_momentum = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "log_anchors" => self.log_anchors = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(CliError::Config(
                "feature_dim and head_hidden must be positive".into(),
            ));
        }
        if self.optimizer.base_lr <= 0.0 || !self.optimizer.base_lr.is_finite() {
            return Err(CliError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Training configuration for one run; anchors are attached by the caller.
    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            sar: self.sar,
            proto_lambda: self.proto_lambda,
            proto_bank_momentum: self.proto_bank_momentum,
            anchors: None,
            optimizer: self.optimizer,
            poly_power: self.poly_power,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            eval_every: self.eval_every,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            head_hidden: Some(self.head_hidden),
            log_anchors: self.log_anchors,
        }
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (key, _, _) in KEYS {
            let value = match *key {
                "output_dir" => self.output_dir.display().to_string(),
                "data_dir" => self
                    .data_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                "classes" => self.data.classes.to_string(),
                "input_dim" => self.data.input_dim.to_string(),
                "n_max" => self.data.n_max.to_string(),
                "beta" => self.data.beta.to_string(),
                "class_separation" => self.data.class_separation.to_string(),
                "noise_sigma" => self.data.noise_sigma.to_string(),
                "data_seed" => self.data.seed.to_string(),
                "test_per_class" => self.test_per_class.to_string(),
                "anchor_source" => self.anchor_source.to_string(),
                "anchor_seed" => self.anchor_seed.to_string(),
                "mode" => self.mode.to_string(),
                "seed" => self.seed.to_string(),
                "seeds" => join(&self.seeds),
                "modes" => join(&self.modes),
                "consistency" => self.consistency.to_string(),
                "jobs" => self.jobs.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.optimizer.base_lr.to_string(),
                "momentum" => self.optimizer.momentum.to_string(),
                "weight_decay" => self.optimizer.weight_decay.to_string(),
                "poly_power" => self.poly_power.to_string(),
                "hidden" => join(&self.hidden),
                "feature_dim" => self.feature_dim.to_string(),
                "head_hidden" => self.head_hidden.to_string(),
                "lambda1" => self.sar.lambda1.to_string(),
                "lambda2" => self.sar.lambda2.to_string(),
                "tau" => self.sar.tau.to_string(),
                "delta" => self.sar.delta.to_string(),
                "alpha" => self.sar.alpha.to_string(),
                "proto_lambda" => self.proto_lambda.to_string(),
                "proto_bank_momentum" => self.proto_bank_momentum.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "log_anchors" => self.log_anchors.to_string(),
                other => unreachable!("key {other} has no echo"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ConfigBuilder {
        ConfigBuilder::new().set("output_dir", "out")
    }

    #[test]
    fn defaults_match_table() {
        let cfg = base().build().unwrap();
        let mut b = ConfigBuilder::new();
        for (k, d, _) in KEYS {
            b = b.set(k, if *k == "output_dir" { "out" } else { d });
        }
        assert_eq!(b.build().unwrap(), cfg);
        assert_eq!(cfg.sar.lambda1, 1.0);
        assert_eq!(cfg.sar.lambda2, 0.1);
        assert_eq!(cfg.sar.tau, 0.9);
        assert_eq!(cfg.sar.delta, 0.8);
        assert_eq!(cfg.sar.alpha, 0.999);
        assert_eq!(cfg.optimizer.base_lr, 0.01);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 0.0005);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = base()
            .set("modes", "sar,ce")
            .set("beta", "12.5")
            .build()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, cfg.echo()).unwrap();
        assert_eq!(ConfigBuilder::new().file(&p).unwrap().build().unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let e = base().set("lamda1", "1").build().unwrap_err();
        assert!(e.to_string().contains("lamda1"));
        let e = ConfigBuilder::new().build().unwrap_err();
        assert!(e.to_string().contains("output_dir"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_both_forms() {
        let args: Vec<String> = ["--epochs", "3", "--lambda2=0.05", "--batch-size", "8"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cfg = base().overrides(&args).unwrap().build().unwrap();
        assert_eq!((cfg.epochs, cfg.sar.lambda2, cfg.batch_size), (3, 0.05, 8));
        assert!(base().overrides(&["--epochs".into()]).is_err());
        assert!(base().overrides(&["epochs".into()]).is_err());
    }

    #[test]
    fn file_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "epochs = 2\n# note\nepochs = 3\n").unwrap();
        assert!(ConfigBuilder::new()
            .file(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }
}
