//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! cohort.size = 4
//! diversity.td = true
//! member.2.hidden = 128,64
//! ```
//!
//! Every key has a default, unknown keys are rejected, and [`RunConfig::to_text`]
//! writes the complete canonical form, which round-trips through
//! [`RunConfig::parse`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentationSpec;
use crate::distill::{DistillLossKind, DistillSpec, DistillTraining};
use crate::encoder::{EncoderArch, PretrainOptions};
use crate::error::{Error, Result};
use crate::losses::{DmlLossKind, DmlLossSpec, PairSamplerSpec, SamplerKind};
use crate::mutual::LambdaSchedule;
use crate::optim::AdamConfig;
use crate::rng::{self, purpose};
use crate::trainer::{CohortConfig, Diversity};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemberOverride {
    pub hidden: Option<Vec<usize>>,
    pub embed: Option<usize>,
    pub update_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_classes: usize,
    pub data_images_per_class: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_seed: u64,
    /// Class fractions for (pretext, train, test).
    pub data_split: (f64, f64, f64),
    pub model_hidden: Vec<usize>,
    pub model_embed: usize,
    /// 1-based member number → per-member overrides.
    pub members: BTreeMap<usize, MemberOverride>,
    pub cohort_size: usize,
    pub diversity: Diversity,
    pub lambda: LambdaSchedule,
    pub loss_kind: DmlLossKind,
    /// Defaults depend on the loss kind when unset.
    pub loss_margin: Option<f64>,
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub sampler: PairSamplerSpec,
    pub augmentation: AugmentationSpec,
    pub optimizer: AdamConfig,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub train_epochs: usize,
    pub pretrain: PretrainOptions,
    /// Members start from the pretrained backbone (otherwise from scratch).
    pub pretrain_shared: bool,
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
    pub distill: DistillSpec,
    pub distill_epochs: usize,
    pub distill_lr: f64,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub trace_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_classes: 100,
            data_images_per_class: 16,
            data_height: 24,
            data_width: 24,
            data_seed: 7,
            data_split: (0.4, 0.3, 0.3),
            model_hidden: vec![128, 64],
            model_embed: 32,
            members: BTreeMap::new(),
            cohort_size: 4,
            diversity: Diversity::ALL,
            lambda: LambdaSchedule::default(),
            loss_kind: DmlLossKind::Triplet,
            loss_margin: None,
            loss_alpha: 2.0,
            loss_beta: 0.5,
            sampler: PairSamplerSpec::default(),
            augmentation: AugmentationSpec::default(),
            optimizer: AdamConfig::default(),
            batch_classes: 8,
            batch_per_class: 5,
            train_epochs: 90,
            pretrain: PretrainOptions::default(),
            pretrain_shared: true,
            eval_every: 10,
            eval_ks: vec![1, 2, 4, 8],
            distill: DistillSpec::default(),
            distill_epochs: 12,
            distill_lr: 1e-3,
            seeds: vec![1, 2, 3, 4, 5],
            workers: 0,
            trace_timing: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Keys that do not change results and are left out of the config hash.
const UNHASHED: [&str; 2] = ["seeds", "workers"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            // `#` starts a comment anywhere on the line.
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| config_err(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. Used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.classes" => self.data_classes = num(key, v)?,
            "data.images_per_class" => self.data_images_per_class = num(key, v)?,
            "data.height" => self.data_height = num(key, v)?,
            "data.width" => self.data_width = num(key, v)?,
            "data.seed" => self.data_seed = num(key, v)?,
            "data.split" => {
                let f: Vec<f64> = list(key, v)?;
                if f.len() != 3 {
                    return Err(config_err(format!("{key}: expected three fractions")));
                }
                self.data_split = (f[0], f[1], f[2]);
            }
            "model.hidden" => self.model_hidden = list(key, v)?,
            "model.embed" => self.model_embed = num(key, v)?,
            "cohort.size" => self.cohort_size = num(key, v)?,
            "diversity" => self.diversity = Diversity::parse(v)?,
            "diversity.md" => self.diversity.md = flag(key, v)?,
            "diversity.td" => self.diversity.td = flag(key, v)?,
            "diversity.vd" => self.diversity.vd = flag(key, v)?,
            "lambda.target" => self.lambda.target = num(key, v)?,
            "lambda.warmup_epochs" => self.lambda.warmup_epochs = num(key, v)?,
            "loss.kind" => self.loss_kind = DmlLossKind::parse(v)?,
            "loss.margin" => self.loss_margin = Some(num(key, v)?),
            "loss.alpha" => self.loss_alpha = num(key, v)?,
            "loss.beta" => self.loss_beta = num(key, v)?,
            "sampler.kind" => self.sampler.kind = SamplerKind::parse(v)?,
            "sampler.cutoff_lower" => self.sampler.cutoff_lower = num(key, v)?,
            "sampler.nonzero_loss_cutoff" => self.sampler.nonzero_loss_cutoff = num(key, v)?,
            "sampler.weight_cap" => self.sampler.weight_cap = num(key, v)?,
            "aug.crop_min" => self.augmentation.crop_fraction_range.0 = num(key, v)?,
            "aug.crop_max" => self.augmentation.crop_fraction_range.1 = num(key, v)?,
            "aug.flip_prob" => self.augmentation.horizontal_flip_prob = num(key, v)?,
            "aug.noise_sigma" => self.augmentation.gaussian_noise_sigma = num(key, v)?,
            "optim.lr" => self.optimizer.lr = num(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = num(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = num(key, v)?,
            "optim.eps" => self.optimizer.eps = num(key, v)?,
            "optim.weight_decay" => self.optimizer.weight_decay = num(key, v)?,
            "batch.classes" => self.batch_classes = num(key, v)?,
            "batch.per_class" => self.batch_per_class = num(key, v)?,
            "train.epochs" => self.train_epochs = num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(key, v)?,
            "pretrain.lr" => self.pretrain.optimizer.lr = num(key, v)?,
            "pretrain.shared" => self.pretrain_shared = flag(key, v)?,
            "eval.every" => self.eval_every = num(key, v)?,
            "eval.ks" => self.eval_ks = list(key, v)?,
            "distill.losses" => {
                self.distill.losses = v
                    .split(',')
                    .map(|s| DistillLossKind::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "distill.distance_weight" => self.distill.distance_weight = num(key, v)?,
            "distill.angle_weight" => self.distill.angle_weight = num(key, v)?,
            "distill.compact_weight" => self.distill.compact_weight = num(key, v)?,
            "distill.use_dml" => self.distill.use_dml = flag(key, v)?,
            "distill.epochs" => self.distill_epochs = num(key, v)?,
            "distill.lr" => self.distill_lr = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "trace.timing" => self.trace_timing = flag(key, v)?,
            _ => return self.set_member(key, v),
        }
        Ok(())
    }

    fn set_member(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || config_err(format!("unknown key {key:?}"));
        let mut parts = key.splitn(3, '.');
        if parts.next() != Some("member") {
            return Err(unknown());
        }
        let idx: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
        if idx == 0 {
            return Err(config_err("member numbers start at 1"));
        }
        let field = parts.next().ok_or_else(unknown)?;
        let entry = self.members.entry(idx).or_default();
        match field {
            "hidden" => entry.hidden = Some(list(key, v)?),
            "embed" => entry.embed = Some(num(key, v)?),
            "update_prob" => entry.update_prob = Some(num(key, v)?),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Canonical `(key, value)` list; member overrides follow the shared keys.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(&str, String)> = vec![
            ("data.classes", self.data_classes.to_string()),
            ("data.images_per_class", self.data_images_per_class.to_string()),
            ("data.height", self.data_height.to_string()),
            ("data.width", self.data_width.to_string()),
            ("data.seed", self.data_seed.to_string()),
            (
                "data.split",
                join(&[self.data_split.0, self.data_split.1, self.data_split.2]),
            ),
            ("model.hidden", join(&self.model_hidden)),
            ("model.embed", self.model_embed.to_string()),
            ("cohort.size", self.cohort_size.to_string()),
            ("diversity.md", self.diversity.md.to_string()),
            ("diversity.td", self.diversity.td.to_string()),
            ("diversity.vd", self.diversity.vd.to_string()),
            ("lambda.target", self.lambda.target.to_string()),
            ("lambda.warmup_epochs", self.lambda.warmup_epochs.to_string()),
            ("loss.kind", self.loss_kind.name().to_string()),
            ("loss.margin", self.loss_spec().margin.to_string()),
            ("loss.alpha", self.loss_alpha.to_string()),
            ("loss.beta", self.loss_beta.to_string()),
            ("sampler.kind", self.sampler.kind.name().to_string()),
            ("sampler.cutoff_lower", self.sampler.cutoff_lower.to_string()),
            ("sampler.nonzero_loss_cutoff", self.sampler.nonzero_loss_cutoff.to_string()),
            ("sampler.weight_cap", self.sampler.weight_cap.to_string()),
            ("aug.crop_min", self.augmentation.crop_fraction_range.0.to_string()),
            ("aug.crop_max", self.augmentation.crop_fraction_range.1.to_string()),
            ("aug.flip_prob", self.augmentation.horizontal_flip_prob.to_string()),
            ("aug.noise_sigma", self.augmentation.gaussian_noise_sigma.to_string()),
            ("optim.lr", self.optimizer.lr.to_string()),
            ("optim.beta1", self.optimizer.beta1.to_string()),
            ("optim.beta2", self.optimizer.beta2.to_string()),
            ("optim.eps", self.optimizer.eps.to_string()),
            ("optim.weight_decay", self.optimizer.weight_decay.to_string()),
            ("batch.classes", self.batch_classes.to_string()),
            ("batch.per_class", self.batch_per_class.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.optimizer.lr.to_string()),
            ("pretrain.shared", self.pretrain_shared.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.ks", join(&self.eval_ks)),
            (
                "distill.losses",
                self.distill.losses.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            ),
            ("distill.distance_weight", self.distill.distance_weight.to_string()),
            ("distill.angle_weight", self.distill.angle_weight.to_string()),
            ("distill.compact_weight", self.distill.compact_weight.to_string()),
            ("distill.use_dml", self.distill.use_dml.to_string()),
            ("distill.epochs", self.distill_epochs.to_string()),
            ("distill.lr", self.distill_lr.to_string()),
            ("trace.timing", self.trace_timing.to_string()),
            ("seeds", join(&self.seeds)),
            ("workers", self.workers.to_string()),
        ];
        let mut out: Vec<(String, String)> = e.drain(..).map(|(k, v)| (k.to_string(), v)).collect();
        for (idx, m) in &self.members {
            if let Some(h) = &m.hidden {
                out.push((format!("member.{idx}.hidden"), join(h)));
            }
            if let Some(d) = m.embed {
                out.push((format!("member.{idx}.embed"), d.to_string()));
            }
            if let Some(p) = m.update_prob {
                out.push((format!("member.{idx}.update_prob"), p.to_string()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 prefix over every result-affecting key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn input_dim(&self) -> usize {
        self.data_height * self.data_width
    }

    /// Architecture of 0-based member `l`.
    pub fn member_arch(&self, l: usize) -> Result<EncoderArch> {
        let o = self.members.get(&(l + 1));
        let hidden = o
            .and_then(|m| m.hidden.clone())
            .unwrap_or_else(|| self.model_hidden.clone());
        let embed = o.and_then(|m| m.embed).unwrap_or(self.model_embed);
        EncoderArch::new(self.input_dim(), hidden, embed)
    }

    pub fn archs(&self) -> Result<Vec<EncoderArch>> {
        (0..self.cohort_size).map(|l| self.member_arch(l)).collect()
    }

    pub fn loss_spec(&self) -> DmlLossSpec {
        let base = DmlLossSpec::for_kind(self.loss_kind);
        DmlLossSpec {
            margin: self.loss_margin.unwrap_or(base.margin),
            alpha: self.loss_alpha,
            beta: self.loss_beta,
            ..base
        }
    }

    pub fn update_probabilities(&self) -> Option<Vec<f64>> {
        if self.members.values().all(|m| m.update_prob.is_none()) {
            return None;
        }
        let defaults = if self.diversity.td {
            crate::trainer::halving_update_probabilities(self.cohort_size)
        } else {
            vec![1.0; self.cohort_size]
        };
        Some(
            defaults
                .into_iter()
                .enumerate()
                .map(|(l, p)| {
                    self.members
                        .get(&(l + 1))
                        .and_then(|m| m.update_prob)
                        .unwrap_or(p)
                })
                .collect(),
        )
    }

    /// Cohort trainer settings for one run seed.
    pub fn cohort_config(&self, seed: u64) -> Result<CohortConfig> {
        let mut c = CohortConfig::new(self.archs()?, self.diversity);
        c.update_probabilities = self.update_probabilities();
        c.augmentation = self.augmentation.clone();
        c.lambda = self.lambda;
        c.optimizer = self.optimizer.clone();
        c.loss = self.loss_spec();
        c.sampler = self.sampler.clone();
        c.classes_per_batch = self.batch_classes;
        c.per_class = self.batch_per_class;
        c.epochs = self.train_epochs;
        c.seed = seed;
        c.workers = self.workers;
        c.record_timing = self.trace_timing;
        c.validate()?;
        Ok(c)
    }

    /// Base seed for projection-head initialization in run `seed`.
    pub fn head_seed(&self, seed: u64) -> u64 {
        rng::derive(seed, &[purpose::HEAD_INIT])
    }

    pub fn distill_training(&self, seed: u64) -> DistillTraining {
        DistillTraining {
            epochs: self.distill_epochs,
            classes_per_batch: self.batch_classes,
            per_class: self.batch_per_class,
            optimizer: AdamConfig {
                lr: self.distill_lr,
                ..self.optimizer.clone()
            },
            loss: self.loss_spec(),
            sampler: self.sampler.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(strip(&e));
        if self.cohort_size == 0 {
            return Err(config_err("cohort.size must be at least 1"));
        }
        if let Some(&bad) = self.members.keys().find(|&&k| k > self.cohort_size) {
            return Err(config_err(format!(
                "member.{bad} configured but cohort.size is {}",
                self.cohort_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must list at least one seed"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval.every must be positive"));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(config_err("eval.ks must list positive values"));
        }
        if self.data_height == 0 || self.data_width == 0 {
            return Err(config_err("image extents must be positive"));
        }
        let (a, b, c) = self.data_split;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && ((a + b + c) - 1.0).abs() < 1e-9) {
            return Err(config_err("data.split fractions must be positive and sum to 1"));
        }
        self.cohort_config(0).map_err(wrap)?;
        self.distill.validate().map_err(wrap)?;
        self.pretrain.optimizer.validate().map_err(wrap)?;
        if !(self.distill_lr > 0.0) {
            return Err(config_err("distill.lr must be positive"));
        }
        Ok(())
    }
}

/// The message of `e` without its category prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}
