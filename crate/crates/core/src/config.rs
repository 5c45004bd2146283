//! Experiment configuration: TOML schema, validation and hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationPolicy, CifarVariant, SyntheticSpec};
use crate::error::{Error, Result};
use crate::networks::BackboneSpec;
use crate::trainer::{MethodVariant, OptimSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory of the CIFAR binary files. Absent in a file means absent,
    /// so a config survives a round trip through TOML unchanged.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Where synthetic sets are cached; no caching when absent.
    pub cache_dir: Option<PathBuf>,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub difficulty: f64,
    /// Keep only the first `per_class` training images of each class.
    pub per_class: Option<usize>,
    pub augment: bool,
    pub pad: usize,
    pub flip_prob: f64,
    /// Background batch producers; 0 builds batches inline.
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Cifar100,
            path: Some(PathBuf::from("data/cifar-100-binary")),
            cache_dir: None,
            classes: 100,
            train_size: 50_000,
            test_size: 10_000,
            image_size: 32,
            difficulty: crate::data::DEFAULT_DIFFICULTY,
            per_class: None,
            augment: true,
            pad: 4,
            flip_prob: 0.5,
            workers: 2,
        }
    }
}

impl DataConfig {
    pub fn class_count(&self) -> usize {
        match self.kind {
            DataKind::Synthetic => self.classes,
            DataKind::Cifar10 => 10,
            DataKind::Cifar100 => 100,
        }
    }

    pub fn side(&self) -> usize {
        match self.kind {
            DataKind::Synthetic => self.image_size,
            _ => crate::data::CIFAR_SIDE,
        }
    }

    pub fn cifar_variant(&self) -> Option<CifarVariant> {
        match self.kind {
            DataKind::Synthetic => None,
            DataKind::Cifar10 => Some(CifarVariant::Cifar10),
            DataKind::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            train_size: self.train_size,
            test_size: self.test_size,
            channels: 3,
            image_size: self.image_size,
            difficulty: self.difficulty,
            seed,
        }
    }

    pub fn augmentation(&self) -> Option<AugmentationPolicy> {
        self.augment.then(|| AugmentationPolicy {
            pad: self.pad,
            flip_prob: self.flip_prob,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of common students.
    pub students: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            students: 2,
            widths: vec![16, 32, 64],
            blocks_per_stage: 3,
        }
    }
}

/// Distribution the leader's KL term mimics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// Softened mean of the common students' logits.
    Ensemble,
    /// Softened fusion-classifier logits.
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Multiplies every `T^2`-scaled KL mimicry term.
    pub lambda_kl: f64,
    pub lambda_div: f64,
    pub lambda_fea: f64,
    pub lambda_self: f64,
    pub alpha: f64,
    pub leader_kl_target: KlTarget,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            lambda_kl: 1.0,
            lambda_div: 1e-5,
            lambda_fea: 10.0,
            lambda_self: 1e3,
            alpha: 1.0,
            leader_kl_target: KlTarget::Ensemble,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Abort when any loss exceeds this value.
    pub divergence_threshold: f64,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            eval_batch_size: 256,
            divergence_threshold: 1e4,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub variant: MethodVariant,
    /// Run directory; relative paths are resolved by the caller.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Students, leader, fusion module and aligner.
    pub optim: OptimSpec,
    /// Self-distillation modules.
    pub sd_optim: OptimSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "ffsd".into(),
            seed: 0,
            variant: MethodVariant::FfsdFull,
            output_dir: PathBuf::from("runs/ffsd"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            optim: OptimSpec::default(),
            sd_optim: OptimSpec {
                weight_decay: 1e-4,
                ..OptimSpec::adam(1e-3)
            },
        }
    }
}

/// `[optim]` keys that `[sd_optim]` inherits when it leaves them out.
const SD_INHERITED: &[&str] = &["weight_decay", "milestones", "gamma", "warmup_epochs"];

impl ExperimentConfig {
    /// Parses TOML; unknown keys are errors naming the key.
    ///
    /// Schedule and weight decay keys missing from `[sd_optim]` are taken
    /// from `[optim]`, so the self-distillation modules decay with the
    /// students unless told otherwise.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let optim = match table.get("optim") {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => toml::Table::new(),
        };
        if let toml::Value::Table(sd) = table
            .entry("sd_optim")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            for key in SD_INHERITED {
                if let (Some(v), false) = (optim.get(*key), sd.contains_key(*key)) {
                    sd.insert(key.to_string(), v.clone());
                }
            }
            // A partial table starts from the Adam default, not the SGD one.
            let defaults = toml::Table::try_from(&ExperimentConfig::default().sd_optim).expect("serializable");
            for (k, v) in defaults {
                sd.entry(k).or_insert(v);
            }
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical form: every key, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hex sha256 of the canonical form with `output_dir` and `name` blanked,
    /// so the hash identifies the experiment rather than where it is stored.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.name = String::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            input_size: self.data.side(),
            widths: self.model.widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            classes: self.data.class_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.students < 1 {
            return Err(Error::config("model.students must be at least 1"));
        }
        self.backbone().validate()?;
        let d = &self.distill;
        if !d.temperature.is_finite() || d.temperature < 1.0 {
            return Err(Error::config(format!("distill.temperature must be >= 1, got {}", d.temperature)));
        }
        for (k, v) in [
            ("lambda_kl", d.lambda_kl),
            ("lambda_div", d.lambda_div),
            ("lambda_fea", d.lambda_fea),
            ("lambda_self", d.lambda_self),
            ("alpha", d.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("distill.{k} must be finite and nonnegative, got {v}")));
            }
        }
        self.optim.validate("optim")?;
        self.sd_optim.validate("sd_optim")?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_batch_size == 0 || t.checkpoint_every == 0 {
            return Err(Error::config("train.epochs, batch sizes and checkpoint_every must be positive"));
        }
        if !(t.divergence_threshold > 0.0) {
            return Err(Error::config("train.divergence_threshold must be positive"));
        }
        match self.data.kind {
            DataKind::Synthetic => self.data.synthetic_spec(self.seed).validate()?,
            _ if self.data.path.is_none() => return Err(Error::config("data.path is required for CIFAR")),
            _ => {}
        }
        if self.data.per_class == Some(0) {
            return Err(Error::config("data.per_class must be positive"));
        }
        Ok(())
    }
}

/// Human-readable list of keys whose values differ between two configs.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> String {
    fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    flatten("", &toml::Value::try_from(a).expect("serializable"), &mut fa);
    flatten("", &toml::Value::try_from(b).expect("serializable"), &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    let diffs: Vec<String> = keys
        .into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            format!(
                "{k}: {} -> {}",
                fa.get(k).map_or("<absent>", String::as_str),
                fb.get(k).map_or("<absent>", String::as_str)
            )
        })
        .collect();
    if diffs.is_empty() {
        "no differing keys".into()
    } else {
        diffs.join("; ")
    }
}

/// Grid of runs: every variant x student count x seed over one base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Base experiment, relative to the grid file.
    pub base: PathBuf,
    pub variants: Vec<MethodVariant>,
    pub seeds: Vec<u64>,
    /// Student counts to sweep; the base value when absent.
    #[serde(default)]
    pub students: Option<Vec<usize>>,
    pub output_dir: PathBuf,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: GridConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if grid.variants.is_empty() || grid.seeds.is_empty() {
            return Err(Error::config("grid needs at least one variant and one seed"));
        }
        let base_path = path.parent().unwrap_or(Path::new(".")).join(&grid.base);
        let base = ExperimentConfig::load(&base_path)?;
        Ok((grid, base))
    }

    /// Cell configs in (variant, students, seed) order.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        let students = self.students.clone().unwrap_or_else(|| vec![base.model.students]);
        let mut out = Vec::new();
        for &v in &self.variants {
            for &n in &students {
                for &seed in &self.seeds {
                    let mut c = base.clone();
                    c.variant = v;
                    c.model.students = n;
                    c.seed = seed;
                    c.name = format!("{v}-n{n}-s{seed}");
                    c.validate()?;
                    c.output_dir = self.output_dir.join(&c.hash()[..16]);
                    out.push(c);
                }
            }
        }
        Ok(out)
    }
}
