//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. `include = path` splices another
//! file in place, resolved relative to the including file; later keys
//! override earlier ones. Every key has a default, and [`RunConfig::to_text`]
//! writes all of them, so a parsed config always re-serializes identically.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::{AmbiguousPair, SceneGenSpec};
use crate::disambig::{MultiTaskLossConfig, SoftLoss};
use crate::error::{invalid, Result};
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub native_resolution: usize,
    pub ambiguous_pairs: Vec<AmbiguousPair>,
    pub intra_class_variation: f64,
    pub imbalance: f64,
    pub resolutions: Vec<usize>,
    /// One network name per resolution, or empty for the built-in stack of each size.
    pub networks: Vec<String>,
    pub fusion_weights: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub precision: Precision,
    pub seed: u64,
    pub tau: f64,
    pub lambda: f64,
    pub soft_loss: SoftLoss,
    pub soft_ten_crop: bool,
    pub partition: Option<PathBuf>,
    pub knowledge: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = SceneGenSpec::default();
        let t = TrainConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            num_classes: g.num_classes,
            images_per_class: g.images_per_class,
            val_per_class: g.val_per_class,
            test_per_class: g.test_per_class,
            native_resolution: g.resolution,
            ambiguous_pairs: g.ambiguous_pairs,
            intra_class_variation: g.intra_class_variation,
            imbalance: g.imbalance,
            resolutions: vec![32, 48],
            networks: Vec::new(),
            fusion_weights: Vec::new(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            precision: t.precision,
            seed: 0,
            tau: 0.5,
            lambda: t.loss.lambda,
            soft_loss: t.loss.soft_loss,
            soft_ten_crop: false,
            partition: None,
            knowledge: None,
            out: PathBuf::from("runs"),
        }
    }
}

fn list<T, F: Fn(&str) -> Result<T>>(v: &str, f: F) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse {v:?}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.num_classes" => self.num_classes = num(key, v)?,
            "data.images_per_class" => self.images_per_class = num(key, v)?,
            "data.val_per_class" => self.val_per_class = num(key, v)?,
            "data.test_per_class" => self.test_per_class = num(key, v)?,
            "data.resolution" => self.native_resolution = num(key, v)?,
            "data.ambiguous_pairs" => {
                self.ambiguous_pairs = list(v, |p| {
                    let parts: Vec<&str> = p.split(':').collect();
                    if parts.len() != 3 {
                        return Err(invalid(format!("{key}: expected a:b:separation, got {p:?}")));
                    }
                    Ok(AmbiguousPair {
                        a: num(key, parts[0])?,
                        b: num(key, parts[1])?,
                        separation: num(key, parts[2])?,
                    })
                })?
            }
            "data.intra_class_variation" => self.intra_class_variation = num(key, v)?,
            "data.imbalance" => self.imbalance = num(key, v)?,
            "resolutions" => self.resolutions = list(v, |s| num(key, s))?,
            "networks" => self.networks = list(v, |s| Ok(s.to_string()))?,
            "fusion_weights" => self.fusion_weights = list(v, |s| num(key, s))?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.learning_rate" => self.learning_rate = num(key, v)?,
            "train.momentum" => self.momentum = num(key, v)?,
            "train.lr_milestones" => self.lr_milestones = list(v, |s| num(key, s))?,
            "train.lr_decay" => self.lr_decay = num(key, v)?,
            "train.precision" => self.precision = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "soft_loss" => self.soft_loss = v.parse()?,
            "soft_ten_crop" => self.soft_ten_crop = num(key, v)?,
            "partition" => self.partition = opt_path(v),
            "knowledge" => self.knowledge = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`. Includes are read from `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        let mut stack = BTreeSet::new();
        self.apply_inner(text, base, &mut stack)
    }

    fn apply_inner(&mut self, text: &str, base: &Path, stack: &mut BTreeSet<PathBuf>) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "include" {
                let path = base.join(value);
                let canon = path
                    .canonicalize()
                    .map_err(|e| invalid(format!("include {}: {e}", path.display())))?;
                if !stack.insert(canon.clone()) {
                    return Err(invalid(format!("config include cycle through {}", path.display())));
                }
                let inner = String::from_utf8_lossy(&crate::io::read_file(&path)?).into_owned();
                let dir = path.parent().unwrap_or(Path::new("."));
                self.apply_inner(&inner, dir, stack)?;
                stack.remove(&canon);
            } else {
                self.set(key, value)?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, Path::new("."))?;
        Ok(c)
    }

    /// Defaults overridden by the file, then checked.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut stack = BTreeSet::new();
        stack.insert(
            path.canonicalize()
                .map_err(|e| invalid(format!("config {}: {e}", path.display())))?,
        );
        let text = String::from_utf8_lossy(&crate::io::read_file(path)?).into_owned();
        c.apply_inner(&text, path.parent().unwrap_or(Path::new(".")), &mut stack)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let pairs: Vec<String> = self
            .ambiguous_pairs
            .iter()
            .map(|p| format!("{}:{}:{}", p.a, p.b, p.separation))
            .collect();
        let rows: Vec<(&str, String)> = vec![
            ("data.dir", self.data_dir.display().to_string()),
            ("data.num_classes", self.num_classes.to_string()),
            ("data.images_per_class", self.images_per_class.to_string()),
            ("data.val_per_class", self.val_per_class.to_string()),
            ("data.test_per_class", self.test_per_class.to_string()),
            ("data.resolution", self.native_resolution.to_string()),
            ("data.ambiguous_pairs", pairs.join(", ")),
            ("data.intra_class_variation", self.intra_class_variation.to_string()),
            ("data.imbalance", self.imbalance.to_string()),
            ("resolutions", join(&self.resolutions)),
            ("networks", self.networks.join(", ")),
            ("fusion_weights", join(&self.fusion_weights)),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.lr_milestones", join(&self.lr_milestones)),
            ("train.lr_decay", self.lr_decay.to_string()),
            ("train.precision", self.precision.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("soft_loss", self.soft_loss.to_string()),
            ("soft_ten_crop", self.soft_ten_crop.to_string()),
            ("partition", show_path(&self.partition)),
            ("knowledge", show_path(&self.knowledge)),
            ("out", self.out.display().to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Range checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.train_config().validate()?;
        if self.resolutions.is_empty() {
            return Err(invalid("at least one resolution is required"));
        }
        if !self.networks.is_empty() && self.networks.len() != self.resolutions.len() {
            return Err(invalid("networks must list one name per resolution"));
        }
        if !self.fusion_weights.is_empty() {
            crate::multires::predict::validate_weights(&self.fusion_weights, self.resolutions.len())?;
        }
        if !(self.tau >= 0.0) {
            return Err(invalid("tau must be non-negative"));
        }
        for p in [&self.partition, &self.knowledge].into_iter().flatten() {
            if !p.exists() {
                return Err(invalid(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneGenSpec {
        SceneGenSpec {
            num_classes: self.num_classes,
            images_per_class: self.images_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            resolution: self.native_resolution,
            ambiguous_pairs: self.ambiguous_pairs.clone(),
            intra_class_variation: self.intra_class_variation,
            seed: self.seed,
            imbalance: self.imbalance,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lr_milestones: self.lr_milestones.clone(),
            lr_decay: self.lr_decay,
            seed: self.seed,
            precision: self.precision,
            loss: MultiTaskLossConfig {
                lambda: self.lambda,
                soft_loss: self.soft_loss,
            },
        }
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.data_dir.join(format!("{split}.mrsd"))
    }
}
