//! Cohort training loop.
//!
//! Each iteration draws one shared P×K mini-batch. Every member then
//! augments it with its own transforms, embeds it and publishes its relation
//! matrix. After a barrier each member assembles its metric learning loss and
//! mutual loss against the published peer matrices, flips its update coin and,
//! on heads, applies one Adam step. A second barrier closes the iteration.
//!
//! Members are spread over worker threads in contiguous groups. All
//! randomness is keyed by `(run seed, purpose, member, iteration)`, so any
//! worker count yields bit-identical results.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use rand::Rng;

use crate::augment::{AugmentationSpec, Transform};
use crate::data::{sample_batch, Batch, Dataset};
use crate::encoder::{EncoderArch, EncoderParams, Encoded, HeadSeeding};
use crate::error::{invalid, Error, Result};
use crate::losses::{dml_loss, sample_pairs, DmlLossSpec, PairSamplerSpec};
use crate::mutual::{mutual_loss, relation_matrix, total_loss, LambdaSchedule, RelationMatrix};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, purpose};
use crate::tensor::{Graph, Tensor, Var};

/// Which cohort diversities are enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Diversity {
    /// Model diversity: distinct projection-head initializations.
    pub md: bool,
    /// Temporal diversity: Bernoulli-gated updates with `p = 2^-(l-1)`.
    pub td: bool,
    /// View diversity: independently sampled augmentations per member.
    pub vd: bool,
}

impl Diversity {
    pub const NONE: Self = Self {
        md: false,
        td: false,
        vd: false,
    };
    pub const ALL: Self = Self {
        md: true,
        td: true,
        vd: true,
    };

    /// Parses `none`, `md`, `md+td`, `td+vd`, ... (order-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        let mut d = Self::NONE;
        if s == "none" || s.is_empty() {
            return Ok(d);
        }
        for part in s.split('+') {
            match part.trim() {
                "md" => d.md = true,
                "td" => d.td = true,
                "vd" => d.vd = true,
                other => return Err(invalid(format!("unknown diversity {other:?}"))),
            }
        }
        Ok(d)
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.md, "md"), (self.td, "td"), (self.vd, "vd")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn any(&self) -> bool {
        self.md || self.td || self.vd
    }
}

/// `p^l = 2^-(l-1)` for members `l = 1..=size`.
pub fn halving_update_probabilities(size: usize) -> Vec<f64> {
    (0..size).map(|l| 0.5f64.powi(l as i32)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    /// One architecture per member; the cohort size is its length.
    pub archs: Vec<EncoderArch>,
    pub diversity: Diversity,
    /// Explicit per-member update probabilities, overriding the TD default.
    pub update_probabilities: Option<Vec<f64>>,
    /// Augmentation family sampled per member when view diversity is on.
    pub augmentation: AugmentationSpec,
    pub lambda: LambdaSchedule,
    pub optimizer: AdamConfig,
    pub loss: DmlLossSpec,
    pub sampler: PairSamplerSpec,
    pub classes_per_batch: usize,
    pub per_class: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; 0 means one per member.
    pub workers: usize,
    /// Record wall-clock milliseconds per member and iteration.
    pub record_timing: bool,
}

impl CohortConfig {
    pub fn new(archs: Vec<EncoderArch>, diversity: Diversity) -> Self {
        Self {
            archs,
            diversity,
            update_probabilities: None,
            augmentation: AugmentationSpec::default(),
            lambda: LambdaSchedule::default(),
            optimizer: AdamConfig::default(),
            loss: DmlLossSpec::default(),
            sampler: PairSamplerSpec::default(),
            classes_per_batch: 8,
            per_class: 5,
            epochs: 20,
            seed: 1,
            workers: 0,
            record_timing: false,
        }
    }

    pub fn size(&self) -> usize {
        self.archs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.per_class
    }

    pub fn update_probabilities(&self) -> Vec<f64> {
        match &self.update_probabilities {
            Some(p) => p.clone(),
            None if self.diversity.td => halving_update_probabilities(self.size()),
            None => vec![1.0; self.size()],
        }
    }

    /// The augmentation actually applied: identity unless view diversity is on.
    pub fn view_augmentation(&self) -> AugmentationSpec {
        if self.diversity.vd {
            self.augmentation.clone()
        } else {
            AugmentationSpec::identity()
        }
    }

    pub fn head_seeding(&self) -> HeadSeeding {
        if self.diversity.md {
            HeadSeeding::PerMember
        } else {
            HeadSeeding::Shared
        }
    }

    pub fn effective_workers(&self) -> usize {
        match self.workers {
            0 => self.size(),
            w => w.min(self.size()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(invalid("cohort size must be at least 1"));
        }
        for a in &self.archs {
            a.validate()?;
        }
        let probs = self.update_probabilities();
        if probs.len() != self.size() {
            return Err(invalid(format!(
                "{} update probabilities for a cohort of {}",
                probs.len(),
                self.size()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(invalid(format!("update probability {p} outside (0, 1]")));
        }
        if self.diversity.td && probs[0] != 1.0 {
            return Err(invalid("the first member must always update under temporal diversity"));
        }
        if self.batch_size() < 2 {
            return Err(invalid("mini-batch needs at least 2 images"));
        }
        self.augmentation.validate()?;
        self.lambda.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// 0-based member index (written 1-based to CSV).
    pub member: usize,
    pub loss_dml: f64,
    pub loss_dm2: f64,
    pub loss_total: f64,
    pub lambda: f64,
    pub updated: bool,
    pub phase_ms: f64,
}

pub const TRACE_HEADER: &str = "iteration,member,loss_dml,loss_dm2,loss_total,lambda,updated,phase_ms";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
}

impl TrainTrace {
    pub fn for_member(&self, member: usize) -> impl Iterator<Item = &TrainRecord> {
        self.records.iter().filter(move |r| r.member == member)
    }

    pub fn update_rate(&self, member: usize) -> f64 {
        let (n, u) = self
            .for_member(member)
            .fold((0usize, 0usize), |(n, u), r| (n + 1, u + usize::from(r.updated)));
        if n == 0 {
            0.0
        } else {
            u as f64 / n as f64
        }
    }

    /// Mean DML loss of `member` over its last `window` records.
    pub fn tail_mean_dml(&self, member: usize, window: usize) -> f64 {
        let v: Vec<f64> = self.for_member(member).map(|r| r.loss_dml).collect();
        let tail = &v[v.len().saturating_sub(window)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, config_hash: &str, out: &mut W) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.member + 1,
                r.loss_dml,
                r.loss_dm2,
                r.loss_total,
                r.lambda,
                u8::from(r.updated),
                r.phase_ms
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberState {
    pub params: EncoderParams,
    pub adam: AdamState,
}

impl MemberState {
    pub fn new(params: EncoderParams) -> Self {
        let adam = AdamState::new(params.tensors());
        Self { params, adam }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.bit_eq(&other.params) && self.adam.bit_eq(&other.adam)
    }
}

/// Resumable cohort trainer over the classes in `train_classes`.
pub struct CohortTrainer<'a> {
    config: CohortConfig,
    dataset: &'a Dataset,
    train_classes: Vec<usize>,
    train_size: usize,
    members: Vec<MemberState>,
    iteration: usize,
    trace: TrainTrace,
}

impl<'a> CohortTrainer<'a> {
    pub fn new(
        config: CohortConfig,
        dataset: &'a Dataset,
        train_classes: &[usize],
        init: Vec<EncoderParams>,
    ) -> Result<Self> {
        config.validate()?;
        if init.len() != config.size() {
            return Err(invalid(format!(
                "{} initial parameter sets for a cohort of {}",
                init.len(),
                config.size()
            )));
        }
        for (l, (p, a)) in init.iter().zip(&config.archs).enumerate() {
            if p.arch() != *a {
                return Err(invalid(format!("member {} parameters do not match its arch", l + 1)));
            }
        }
        let train_size = dataset.indices_of(train_classes).len();
        if train_size < config.batch_size() {
            return Err(invalid(format!(
                "train split has {train_size} images, fewer than one batch of {}",
                config.batch_size()
            )));
        }
        Ok(Self {
            config,
            dataset,
            train_classes: train_classes.to_vec(),
            train_size,
            members: init.into_iter().map(MemberState::new).collect(),
            iteration: 0,
            trace: TrainTrace::default(),
        })
    }

    pub fn config(&self) -> &CohortConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn iterations_per_epoch(&self) -> usize {
        (self.train_size / self.config.batch_size()).max(1)
    }

    /// Fractional epoch reached after `iteration` completed iterations.
    pub fn epoch_at(&self, iteration: usize) -> f64 {
        (iteration * self.config.batch_size()) as f64 / self.train_size as f64
    }

    pub fn members(&self) -> &[MemberState] {
        &self.members
    }

    pub fn params(&self) -> Vec<EncoderParams> {
        self.members.iter().map(|m| m.params.clone()).collect()
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (Vec<MemberState>, TrainTrace) {
        (self.members, self.trace)
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        self.run_iterations(self.iterations_per_epoch())
    }

    pub fn run_iterations(&mut self, count: usize) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let size = self.config.size();
        let group = size.div_ceil(self.config.effective_workers());
        let n_groups = size.div_ceil(group);
        let shared = Shared {
            config: &self.config,
            dataset: self.dataset,
            train_classes: &self.train_classes,
            train_size: self.train_size,
            probabilities: self.config.update_probabilities(),
            view: self.config.view_augmentation(),
            barrier: Barrier::new(n_groups),
            slots: (0..size).map(|_| Mutex::new(None)).collect(),
            failed: AtomicBool::new(false),
            first_error: Mutex::new(None),
        };
        let start = self.iteration;
        let results: Vec<Vec<TrainRecord>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .members
                .chunks_mut(group)
                .enumerate()
                .map(|(gi, chunk)| {
                    let shared = &shared;
                    s.spawn(move || shared.worker(gi * group, chunk, start, count))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("cohort worker panicked"))
                .collect()
        });
        if let Some(err) = shared.first_error.into_inner().expect("error slot") {
            return Err(err);
        }
        let mut records: Vec<TrainRecord> = results.into_iter().flatten().collect();
        records.sort_by_key(|r| (r.iteration, r.member));
        self.trace.records.extend(records);
        self.iteration += count;
        Ok(())
    }
}

/// State visible to every worker during one call to `run_iterations`.
struct Shared<'s> {
    config: &'s CohortConfig,
    dataset: &'s Dataset,
    train_classes: &'s [usize],
    train_size: usize,
    probabilities: Vec<f64>,
    view: AugmentationSpec,
    barrier: Barrier,
    /// Relation matrices published in the inference phase of the current iteration.
    slots: Vec<Mutex<Option<Tensor>>>,
    failed: AtomicBool,
    first_error: Mutex<Option<Error>>,
}

/// A member's forward pass kept alive across the barrier.
struct Inference {
    graph: Graph,
    encoded: Encoded,
    psi: Var,
    elapsed_ms: f64,
}

impl Shared<'_> {
    fn fail(&self, member: usize, iteration: usize, err: Error) {
        let mut slot = self.first_error.lock().expect("error slot");
        if slot.is_none() {
            *slot = Some(Error::Worker {
                member: member + 1,
                iteration,
                source: Box::new(err),
            });
        }
        self.failed.store(true, Ordering::SeqCst);
    }

    fn worker(&self, first: usize, members: &mut [MemberState], start: usize, count: usize) -> Vec<TrainRecord> {
        let mut records = Vec::with_capacity(members.len() * count);
        for iteration in start..start + count {
            let mut batch_rng = rng::stream(self.config.seed, &[purpose::BATCH, iteration as u64]);
            let batch = sample_batch(
                self.dataset,
                self.train_classes,
                self.config.classes_per_batch,
                self.config.per_class,
                &mut batch_rng,
            );
            let mut inferences = Vec::with_capacity(members.len());
            let batch = match batch {
                Ok(batch) => {
                    for (k, m) in members.iter().enumerate() {
                        let member = first + k;
                        match self.infer(member, iteration, &m.params, &batch) {
                            Ok(inf) => inferences.push(inf),
                            Err(e) => {
                                self.fail(member, iteration, e);
                                break;
                            }
                        }
                    }
                    Some(batch)
                }
                Err(e) => {
                    self.fail(first, iteration, e);
                    None
                }
            };

            // Barrier: every relation matrix of this iteration is published.
            self.barrier.wait();
            if self.failed.load(Ordering::SeqCst) {
                break;
            }

            let batch = batch.expect("checked above");
            for (k, (m, inf)) in members.iter_mut().zip(inferences).enumerate() {
                let member = first + k;
                match self.update(member, iteration, m, inf, &batch) {
                    Ok(r) => records.push(r),
                    Err(e) => {
                        self.fail(member, iteration, e);
                        break;
                    }
                }
            }

            // Closes the iteration before any slot is overwritten.
            self.barrier.wait();
            if self.failed.load(Ordering::SeqCst) {
                break;
            }
        }
        records
    }

    fn infer(&self, member: usize, iteration: usize, params: &EncoderParams, batch: &Batch) -> Result<Inference> {
        let t0 = Instant::now();
        let (h, w) = (self.dataset.height, self.dataset.width);
        let transforms: Vec<Transform> = if self.view.identity_only {
            vec![Transform::identity(); batch.len()]
        } else {
            let mut r = rng::stream(self.config.seed, &[purpose::VIEW, member as u64, iteration as u64]);
            self.view.sample_n(batch.len(), &mut r)
        };
        let mut data = Vec::with_capacity(batch.len() * h * w);
        for (&i, t) in batch.indices.iter().zip(&transforms) {
            data.extend(t.apply(&self.dataset.images[i].pixels, h, w));
        }
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(vec![batch.len(), h * w], data)?);
        let encoded = params.forward(&mut graph, x, true)?;
        let psi = relation_matrix(&mut graph, encoded.embeddings)?;
        let published = RelationMatrix {
            values: graph.value(psi).clone(),
            member,
            iteration,
        };
        published.check(2.0 + 1e-9)?;
        *self.slots[member].lock().expect("slot") = Some(published.values);
        Ok(Inference {
            graph,
            encoded,
            psi,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn update(
        &self,
        member: usize,
        iteration: usize,
        state: &mut MemberState,
        inf: Inference,
        batch: &Batch,
    ) -> Result<TrainRecord> {
        let t0 = Instant::now();
        let Inference {
            mut graph,
            encoded,
            psi,
            elapsed_ms,
        } = inf;
        let peers: Vec<Tensor> = self
            .slots
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != member)
            .map(|(k, slot)| {
                slot.lock()
                    .expect("slot")
                    .clone()
                    .ok_or_else(|| Error::Invariant(format!("relation matrix of member {} missing", k + 1)))
            })
            .collect::<Result<_>>()?;
        let peer_refs: Vec<&Tensor> = peers.iter().collect();

        let emb = graph.value(encoded.embeddings).clone();
        let mut mining = rng::stream(self.config.seed, &[purpose::MINING, iteration as u64]);
        let triplets = sample_pairs(&emb, &batch.labels, &self.config.sampler, &mut mining)?;
        let dml = dml_loss(&mut graph, encoded.embeddings, &triplets, &self.config.loss)?;
        let dm2 = mutual_loss(&mut graph, psi, &peer_refs)?;
        let epoch = (iteration * self.config.batch_size()) as f64 / self.train_size as f64;
        let lambda = self.config.lambda.at(epoch);
        let total = total_loss(&mut graph, dml.loss, dm2, lambda)?;

        let mut gate = rng::stream(self.config.seed, &[purpose::GATE, member as u64, iteration as u64]);
        let updated = gate.random_bool(self.probabilities[member]);
        if updated {
            graph.backward(total)?;
            let grads: Vec<&Tensor> = encoded
                .params
                .iter()
                .map(|&v| graph.grad(v).expect("parameter leaf has a gradient"))
                .collect();
            adam_step(
                &self.config.optimizer,
                &mut state.params.tensors_mut(),
                &grads,
                &mut state.adam,
            )?;
        }
        let phase_ms = if self.config.record_timing {
            elapsed_ms + t0.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(TrainRecord {
            iteration,
            member,
            loss_dml: graph.value(dml.loss).item(),
            loss_dm2: graph.value(dm2).item(),
            loss_total: graph.value(total).item(),
            lambda,
            updated,
            phase_ms,
        })
    }
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub members: Vec<MemberState>,
    pub trace: TrainTrace,
}

impl TrainOutcome {
    pub fn params(&self) -> Vec<EncoderParams> {
        self.members.iter().map(|m| m.params.clone()).collect()
    }
}

/// Runs `config.epochs` epochs, calling `on_epoch(epoch, trainer)` after each
/// (1-based epoch numbers).
pub fn train_cohort(
    config: &CohortConfig,
    dataset: &Dataset,
    train_classes: &[usize],
    init: Vec<EncoderParams>,
    mut on_epoch: impl FnMut(usize, &CohortTrainer<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = CohortTrainer::new(config.clone(), dataset, train_classes, init)?;
    for epoch in 1..=config.epochs {
        trainer.run_epoch()?;
        on_epoch(epoch, &trainer)?;
    }
    let (members, trace) = trainer.into_parts();
    Ok(TrainOutcome { members, trace })
}
