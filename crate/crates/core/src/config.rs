//! Flat `key = value` run settings.
//!
//! Values are layered: built-in defaults, then a config file, then
//! command-line overrides. Unknown keys are errors at every layer.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{LinearizationScheme, SchemeKind};
use crate::cg::CgConfig;
use crate::data::{gen_blobs, gen_two_moons, load_mnist_idx, Dataset};
use crate::error::{Error, Result};
use crate::implicit_grad::IgMode;
use crate::models::{Activation, AttackLoss, ModelSpec};
use crate::trainers::{Method, Schedule, TrainRunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Blobs,
    Mnist,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "blobs" => Ok(DatasetKind::Blobs),
            "mnist" => Ok(DatasetKind::Mnist),
            _ => Err(Error::Config(format!(
                "unknown dataset '{s}' (expected moons, blobs or mnist)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Mnist => "mnist",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub dataset: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub centers: usize,
    pub spread: f64,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub mnist_limit: Option<usize>,
    pub test_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainRunConfig,
    pub metrics_out: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
}

/// Every accepted key, in the order `describe` lists them.
pub const KEYS: &[&str] = &[
    "dataset",
    "n",
    "noise",
    "centers",
    "spread",
    "mnist_images",
    "mnist_labels",
    "mnist_limit",
    "test_fraction",
    "hidden",
    "activation",
    "method",
    "epochs",
    "batch_size",
    "epsilon",
    "lambda",
    "alpha2_ratio",
    "lr_peak",
    "schedule",
    "momentum",
    "weight_decay",
    "ga_coeff",
    "linearization",
    "linearization_step",
    "attack_loss",
    "ig_mode",
    "cg_tol",
    "cg_max_iters",
    "seed",
    "early_stop",
    "eval_pgd_steps",
    "eval_pgd_restarts",
    "eval_ga_samples",
    "eval_limit",
    "metrics_out",
    "checkpoint_out",
];

impl Default for Settings {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Moons,
            n: 512,
            noise: 0.1,
            centers: 3,
            spread: 1.0,
            mnist_images: PathBuf::from("data/mnist5k-images-idx3-ubyte"),
            mnist_labels: PathBuf::from("data/mnist5k-labels-idx1-ubyte"),
            mnist_limit: None,
            test_fraction: 0.2,
            hidden: vec![64],
            activation: Activation::Relu,
            train: TrainRunConfig::new(Method::FastBat, 0.1),
            metrics_out: None,
            checkpoint_out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean '{value}' for '{key}'"
        ))),
    }
}

impl Settings {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = value.parse()?,
            "n" => self.n = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "centers" => self.centers = parse(key, value)?,
            "spread" => self.spread = parse(key, value)?,
            "mnist_images" => self.mnist_images = PathBuf::from(value),
            "mnist_labels" => self.mnist_labels = PathBuf::from(value),
            "mnist_limit" => self.mnist_limit = optional(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "activation" => self.activation = value.parse()?,
            "method" => t.method = value.parse()?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "lambda" => t.lambda = optional(key, value)?,
            "alpha2_ratio" => t.alpha2_ratio = parse(key, value)?,
            "lr_peak" => t.lr_peak = parse(key, value)?,
            "schedule" => t.schedule = value.parse::<Schedule>()?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "ga_coeff" => t.ga_coeff = optional(key, value)?,
            "linearization" => {
                t.linearization = LinearizationScheme {
                    kind: value.parse::<SchemeKind>()?,
                    ..t.linearization
                }
            }
            "linearization_step" => t.linearization.step = optional(key, value)?,
            "attack_loss" => t.attack_loss = value.parse::<AttackLoss>()?,
            "ig_mode" => {
                t.ig_mode = match value {
                    "free" => IgMode::HessianFree,
                    "aware" => IgMode::HessianAware(match t.ig_mode {
                        IgMode::HessianAware(cg) => cg,
                        IgMode::HessianFree => CgConfig::default(),
                    }),
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid ig_mode '{value}' (expected free or aware)"
                        )))
                    }
                }
            }
            "cg_tol" | "cg_max_iters" => {
                let IgMode::HessianAware(cg) = &mut t.ig_mode else {
                    return Err(Error::Config(format!(
                        "'{key}' requires ig_mode = aware set before it"
                    )));
                };
                if key == "cg_tol" {
                    cg.tol = parse(key, value)?;
                } else {
                    cg.max_iters = parse(key, value)?;
                }
            }
            "seed" => t.seed = parse(key, value)?,
            "early_stop" => t.early_stop = parse_bool(key, value)?,
            "eval_pgd_steps" => t.eval_pgd_steps = parse(key, value)?,
            "eval_pgd_restarts" => t.eval_pgd_restarts = parse(key, value)?,
            "eval_ga_samples" => t.eval_ga_samples = parse(key, value)?,
            "eval_limit" => t.eval_limit = optional(key, value)?,
            "metrics_out" => self.metrics_out = Some(PathBuf::from(value)),
            "checkpoint_out" => self.checkpoint_out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults, then `file` pairs, then `overrides`, each layer in order.
    pub fn layered(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        for (k, v) in file.iter().chain(overrides) {
            s.set(k, v)?;
        }
        s.train.validate()?;
        Ok(s)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let seed = self.seed();
        let ds = match self.dataset {
            DatasetKind::Moons => gen_two_moons(self.n, self.noise, seed)?,
            DatasetKind::Blobs => gen_blobs(self.n, self.centers, self.spread, seed)?,
            DatasetKind::Mnist => {
                load_mnist_idx(&self.mnist_images, &self.mnist_labels, self.mnist_limit)?
            }
        };
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(ds.with_split(self.test_fraction, seed))
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        ModelSpec::mlp(dataset.dim(), self.hidden.clone(), dataset.num_classes)
            .with_activation(self.activation)
            .with_seed(self.seed())
    }
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown config key '{key}'",
                lineno + 1
            )));
        }
        if pairs.iter().any(|(existing, _)| existing == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
        pairs.push((key.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let p = parse_config("# run\nepsilon = 0.3\n\nepochs=4  # short\n").unwrap();
        assert_eq!(p, pairs(&[("epsilon", "0.3"), ("epochs", "4")]));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(parse_config("epsilonn = 0.3").is_err());
        assert!(parse_config("epochs = 1\nepochs = 2").is_err());
        assert!(parse_config("epochs 2").is_err());
        assert!(Settings::default().set("bogus", "1").is_err());
        assert!(Settings::default().set("epochs", "two").is_err());
    }

    #[test]
    fn precedence_matrix() {
        // (file sets it, cli sets it) → expected epochs
        for (file, cli, expected) in [
            (false, false, 10),
            (true, false, 3),
            (false, true, 7),
            (true, true, 7),
        ] {
            let f = if file {
                pairs(&[("epochs", "3")])
            } else {
                vec![]
            };
            let c = if cli {
                pairs(&[("epochs", "7")])
            } else {
                vec![]
            };
            assert_eq!(Settings::layered(&f, &c).unwrap().train.epochs, expected);
        }
    }

    #[test]
    fn typed_keys() {
        let s = Settings::layered(
            &pairs(&[
                ("hidden", "32, 16"),
                ("ig_mode", "aware"),
                ("cg_tol", "1e-8"),
            ]),
            &pairs(&[
                ("lambda", "0.5"),
                ("linearization", "random_corner"),
                ("early_stop", "false"),
            ]),
        )
        .unwrap();
        assert_eq!(s.hidden, vec![32, 16]);
        assert_eq!(
            s.train.ig_mode,
            IgMode::HessianAware(CgConfig {
                tol: 1e-8,
                max_iters: 500
            })
        );
        assert_eq!(s.train.lambda, Some(0.5));
        assert_eq!(s.train.linearization.kind, SchemeKind::RandomCorner);
        assert!(!s.train.early_stop);
        assert!(Settings::default().set("cg_tol", "1e-8").is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let samples = [
            ("dataset", "blobs"),
            ("mnist_images", "a"),
            ("mnist_labels", "b"),
            ("mnist_limit", "none"),
            ("activation", "swish"),
            ("method", "pgd2_at"),
            ("lambda", "none"),
            ("schedule", "constant"),
            ("ga_coeff", "none"),
            ("linearization", "uniform_random"),
            ("linearization_step", "0.1"),
            ("attack_loss", "true_logit"),
            ("ig_mode", "free"),
            ("early_stop", "true"),
            ("eval_limit", "none"),
            ("metrics_out", "m.csv"),
            ("checkpoint_out", "c.bin"),
            ("hidden", "8"),
        ];
        for key in KEYS {
            let mut s = Settings::default();
            if key.starts_with("cg_") {
                s.set("ig_mode", "aware").unwrap();
            }
            let value = samples
                .iter()
                .find(|(k, _)| k == key)
                .map_or("1", |(_, v)| v);
            s.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
