use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::archive;
use super::iteration::{compute_iteration, IterationGrads, IterationSettings, Layout};
use super::optim::Optimizer;
use crate::config::{config_diff, DataKind, ExperimentConfig};
use crate::data::{load_cifar, Batch, BatchPlan, LabeledImageSet, Normalization};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_group, CosineRepresentation, EvalReport};
use crate::networks::{build_group, component_names, StudentGroup, BN_MOMENTUM};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";

/// Metrics of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub sd_lr: f64,
    /// Per-iteration loss values averaged over the epoch.
    pub train: BTreeMap<String, f64>,
    pub eval: EvalReport,
}

/// Final summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_eval: EvalReport,
    /// Loss values of the very first iteration.
    pub initial_metrics: BTreeMap<String, f64>,
    pub history: Vec<EpochRecord>,
    pub param_counts: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: String,
    epoch: usize,
    components: Vec<String>,
    optimizer_steps: BTreeMap<String, u64>,
    initial_metrics: BTreeMap<String, f64>,
    history: Vec<EpochRecord>,
}

/// Loads the configured train and test splits.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let d = &config.data;
    let (train, test) = match d.kind {
        DataKind::Synthetic => {
            let spec = d.synthetic_spec(config.seed);
            match &d.cache_dir {
                Some(dir) => spec.load_or_generate(dir)?,
                None => spec.generate()?,
            }
        }
        DataKind::Cifar10 | DataKind::Cifar100 => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("data.path is required for CIFAR"))?;
            load_cifar(path, d.cifar_variant().expect("cifar kind"))?
        }
    };
    let train = match d.per_class {
        Some(k) => train.first_per_class(k)?,
        None => train,
    };
    Ok((train, test))
}

/// Applies precomputed gradients and batch-norm updates. Components without
/// gradients keep their parameters and optimizer state.
pub fn apply_iteration(group: &mut StudentGroup, optimizers: &mut [Optimizer], step: &IterationGrads, lr: f64, sd_lr: f64) {
    let lay = Layout::new(group.n());
    let first_sd = lay.sd(0);
    for (idx, (_, params)) in group.components_mut().into_iter().enumerate() {
        if let Some(g) = &step.grads[idx] {
            let rate = if idx >= first_sd { sd_lr } else { lr };
            optimizers[idx].step(params, g, rate);
        }
        params.apply_bn_updates(&step.bn_updates[idx], BN_MOMENTUM);
    }
}

/// One optimization step of every component on `batch`.
pub fn train_iteration(
    group: &mut StudentGroup,
    optimizers: &mut [Optimizer],
    batch: &Batch,
    settings: &IterationSettings<'_>,
    lr: f64,
    sd_lr: f64,
) -> Result<BTreeMap<String, f64>> {
    let step = compute_iteration(group, batch, settings)?;
    apply_iteration(group, optimizers, &step, lr, sd_lr);
    Ok(step.metrics)
}

/// Training state of one run.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub group: StudentGroup,
    pub optimizers: Vec<Optimizer>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub initial_metrics: BTreeMap<String, f64>,
    pub train_set: Arc<LabeledImageSet>,
    pub test_set: Arc<LabeledImageSet>,
    pub norm: Normalization,
    pub cosine: CosineRepresentation,
}

fn new_optimizers(config: &ExperimentConfig, group: &StudentGroup) -> Vec<Optimizer> {
    let first_sd = Layout::new(group.n()).sd(0);
    group
        .components()
        .into_iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let spec = if i >= first_sd { &config.sd_optim } else { &config.optim };
            Optimizer::new(spec.clone(), p)
        })
        .collect()
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::with_data(config, Arc::new(train), Arc::new(test))
    }

    /// Fresh state on already loaded data.
    pub fn with_data(config: ExperimentConfig, train: Arc<LabeledImageSet>, test: Arc<LabeledImageSet>) -> Result<Self> {
        config.validate()?;
        let spec = config.backbone();
        if train.image_shape() != (spec.in_channels, spec.input_size, spec.input_size) || train.classes() != spec.classes {
            return Err(Error::config(format!(
                "data images {:?} with {} classes do not match the model input ({}, {}, {}) with {} classes",
                train.image_shape(),
                train.classes(),
                spec.in_channels,
                spec.input_size,
                spec.input_size,
                spec.classes
            )));
        }
        let group = build_group(&spec, config.model.students, config.seed)?;
        let optimizers = new_optimizers(&config, &group);
        let norm = Normalization::from_set(&train);
        Ok(Trainer {
            config,
            group,
            optimizers,
            epoch: 0,
            history: Vec::new(),
            initial_metrics: BTreeMap::new(),
            train_set: train,
            test_set: test,
            norm,
            cosine: CosineRepresentation::Features,
        })
    }

    pub fn settings(&self) -> IterationSettings<'_> {
        IterationSettings {
            variant: self.config.variant,
            distill: &self.config.distill,
            divergence_threshold: self.config.train.divergence_threshold,
        }
    }

    pub fn batch_plan(&self) -> Result<BatchPlan> {
        BatchPlan::new(
            Arc::clone(&self.train_set),
            self.config.train.batch_size.min(self.train_set.len()),
            crate::seeds::derive_seed(self.config.seed, "data"),
            self.config.data.augmentation(),
            self.norm.clone(),
        )
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_group(
            &self.group,
            self.config.variant,
            &self.test_set,
            &self.norm,
            self.config.train.eval_batch_size,
            self.cosine,
        )
    }

    /// Trains one epoch and evaluates.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let plan = self.batch_plan()?;
        let per_epoch = plan.len();
        let epoch = self.epoch;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut lr = 0.0;
        let mut sd_lr = 0.0;
        let mut iters = 0usize;
        let started = Instant::now();
        for (it, batch) in plan.epoch(epoch, self.config.data.workers).enumerate() {
            lr = self.config.optim.lr_at(epoch, it, per_epoch);
            sd_lr = self.config.sd_optim.lr_at(epoch, it, per_epoch);
            let settings = IterationSettings {
                variant: self.config.variant,
                distill: &self.config.distill,
                divergence_threshold: self.config.train.divergence_threshold,
            };
            let metrics = train_iteration(&mut self.group, &mut self.optimizers, &batch, &settings, lr, sd_lr)?;
            if epoch == 0 && it == 0 {
                self.initial_metrics = metrics.clone();
            }
            for (k, v) in metrics {
                *sums.entry(k).or_insert(0.0) += v;
            }
            iters += 1;
        }
        let train = sums.into_iter().map(|(k, v)| (k, v / iters as f64)).collect();
        let eval = self.evaluate()?;
        self.epoch += 1;
        log::info!(
            "epoch {}/{} ({:.1}s): students {:?} ens {:.2} fusion {:?} leader {:?}",
            self.epoch,
            self.config.train.epochs,
            started.elapsed().as_secs_f64(),
            eval.student_acc,
            eval.ens_acc,
            eval.fusion_acc,
            eval.leader_acc
        );
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            sd_lr,
            train,
            eval,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn report(&self) -> Result<ExperimentReport> {
        let final_eval = match self.history.last() {
            Some(r) => r.eval.clone(),
            None => self.evaluate()?,
        };
        Ok(ExperimentReport {
            name: self.config.name.clone(),
            config_hash: self.config.hash(),
            variant: self.config.variant.to_string(),
            seed: self.config.seed,
            epochs: self.epoch,
            final_eval,
            initial_metrics: self.initial_metrics.clone(),
            history: self.history.clone(),
            param_counts: self
                .group
                .components()
                .into_iter()
                .map(|(n, p)| (n, p.count()))
                .collect(),
        })
    }

    /// Writes `dir` atomically: archives go to a sibling directory that
    /// replaces `dir` once complete.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(tmp.join("params")).map_err(|e| Error::io(&tmp, e))?;
        fs::create_dir_all(tmp.join("optim")).map_err(|e| Error::io(&tmp, e))?;
        let mut steps = BTreeMap::new();
        for ((name, params), opt) in self.group.components().into_iter().zip(&self.optimizers) {
            archive::write(&tmp.join("params").join(format!("{name}.ffw")), &params.named_tensors())?;
            let state = opt.state_tensors(params.names());
            let refs: Vec<(&str, &crate::tensor::Tensor)> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
            archive::write(&tmp.join("optim").join(format!("{name}.ffw")), &refs)?;
            steps.insert(name, opt.steps());
        }
        let manifest = Manifest {
            config_hash: self.config.hash(),
            config: self.config.to_toml(),
            epoch: self.epoch,
            components: component_names(self.group.n()),
            optimizer_steps: steps,
            initial_metrics: self.initial_metrics.clone(),
            history: self.history.clone(),
        };
        let path = tmp.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(|e| Error::io(&path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    /// Restores the state saved in `dir`. `config` must hash identically to
    /// the checkpoint's configuration.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let manifest = read_manifest(dir)?;
        let hash = self.config.hash();
        if manifest.config_hash != hash {
            let saved = ExperimentConfig::from_toml(&manifest.config)?;
            return Err(Error::HashMismatch {
                expected: manifest.config_hash,
                found: hash,
                diff: config_diff(&saved, &self.config),
            });
        }
        let names = component_names(self.group.n());
        for (((name, params), opt), expected) in self
            .group
            .components_mut()
            .into_iter()
            .zip(self.optimizers.iter_mut())
            .zip(&names)
        {
            debug_assert_eq!(&name, expected);
            let ppath = dir.join("params").join(format!("{name}.ffw"));
            params
                .load_named(archive::read(&ppath)?)
                .map_err(|e| Error::format(&ppath, e.to_string()))?;
            let opath = dir.join("optim").join(format!("{name}.ffw"));
            let steps = *manifest
                .optimizer_steps
                .get(&name)
                .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("no optimizer step count for {name}")))?;
            opt.load_state(params.names(), steps, archive::read(&opath)?)
                .map_err(|e| Error::format(&opath, e.to_string()))?;
        }
        self.epoch = manifest.epoch;
        self.history = manifest.history;
        self.initial_metrics = manifest.initial_metrics;
        Ok(())
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Configuration stored in a checkpoint directory.
pub fn checkpoint_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&read_manifest(dir)?.config)
}

/// Per-epoch CSV with the configuration hash on every row.
pub fn metrics_csv(config_hash: &str, history: &[EpochRecord]) -> String {
    let n = history.first().map_or(0, |r| r.eval.student_acc.len());
    let keys: BTreeSet<&String> = history.iter().flat_map(|r| r.train.keys()).collect();
    let mut out = String::from("config_hash,epoch,lr,sd_lr");
    for i in 1..=n {
        let _ = write!(out, ",student{i}_acc");
    }
    out.push_str(",student_mean_acc,ens_acc,fusion_acc,leader_acc,cosine");
    for k in &keys {
        let _ = write!(out, ",loss.{k}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in history {
        let _ = write!(out, "{config_hash},{},{},{}", r.epoch, r.lr, r.sd_lr);
        for a in &r.eval.student_acc {
            let _ = write!(out, ",{a}");
        }
        let _ = write!(
            out,
            ",{},{},{},{},{}",
            r.eval.student_mean_acc,
            r.eval.ens_acc,
            opt(r.eval.fusion_acc),
            opt(r.eval.leader_acc),
            opt(r.eval.cosine)
        );
        for k in &keys {
            let _ = write!(out, ",{}", opt(r.train.get(*k).copied()));
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `config` to completion in `out_dir`, writing `config.toml`,
/// `metrics.csv`, `report.json` and a checkpoint. With `resume`, an existing
/// checkpoint in `out_dir` is continued (its configuration hash must match).
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<ExperimentReport> {
    let mut trainer = Trainer::new(config.clone())?;
    run_with_trainer(&mut trainer, out_dir, resume)
}

pub fn run_with_trainer(trainer: &mut Trainer, out_dir: &Path, resume: bool) -> Result<ExperimentReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt: PathBuf = out_dir.join(CHECKPOINT_DIR);
    if resume && ckpt.join(MANIFEST).exists() {
        trainer.load_checkpoint(&ckpt)?;
        log::info!("resuming {} after epoch {}", out_dir.display(), trainer.epoch);
    }
    let hash = trainer.config.hash();
    write_text(
        &out_dir.join("config.toml"),
        &format!("# config_hash = \"{hash}\"\n{}", trainer.config.to_toml()),
    )?;
    let epochs = trainer.config.train.epochs;
    while trainer.epoch < epochs {
        trainer.train_epoch()?;
        write_text(&out_dir.join(METRICS_CSV), &metrics_csv(&hash, &trainer.history))?;
        if trainer.epoch % trainer.config.train.checkpoint_every == 0 || trainer.epoch == epochs {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    let report = trainer.report()?;
    write_text(
        &out_dir.join(REPORT_JSON),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    Ok(report)
}
