//! Relational distillation from a trained cohort into a single student.
//!
//! Targets are computed in the teacher ensemble's concatenated embedding
//! space and enter the student graph as constants. Because only distances
//! and angles are transferred, the student's embedding size is free.

use crate::data::{sample_batch, Dataset};
use crate::encoder::EncoderParams;
use crate::error::{invalid, Result};
use crate::eval::ensemble_embed;
use crate::losses::{dml_loss, sample_pairs, DmlLossSpec, PairSamplerSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, purpose};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistillLossKind {
    /// Huber on mean-normalized pairwise distances.
    RkdDistance,
    /// Huber on the cosines of all anchor-centred angles.
    RkdAngle,
    /// Squared error on raw pairwise distances.
    Compact,
}

impl DistillLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rkd-distance" => Ok(Self::RkdDistance),
            "rkd-angle" => Ok(Self::RkdAngle),
            "compact" => Ok(Self::Compact),
            _ => Err(invalid(format!("unknown distillation loss {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RkdDistance => "rkd-distance",
            Self::RkdAngle => "rkd-angle",
            Self::Compact => "compact",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSpec {
    pub losses: Vec<DistillLossKind>,
    pub distance_weight: f64,
    pub angle_weight: f64,
    pub compact_weight: f64,
    /// Add the metric learning loss of the student on top.
    pub use_dml: bool,
}

impl Default for DistillSpec {
    /// Distance + angle, no metric learning loss.
    fn default() -> Self {
        Self {
            losses: vec![DistillLossKind::RkdDistance, DistillLossKind::RkdAngle],
            distance_weight: 20.0,
            angle_weight: 40.0,
            compact_weight: 10.0,
            use_dml: false,
        }
    }
}

impl DistillSpec {
    pub fn compact() -> Self {
        Self {
            losses: vec![DistillLossKind::Compact],
            ..Self::default()
        }
    }

    pub fn weight(&self, kind: DistillLossKind) -> f64 {
        match kind {
            DistillLossKind::RkdDistance => self.distance_weight,
            DistillLossKind::RkdAngle => self.angle_weight,
            DistillLossKind::Compact => self.compact_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(invalid("no distillation loss selected"));
        }
        let mut seen = self.losses.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.losses.len() {
            return Err(invalid("duplicate distillation loss"));
        }
        for w in [self.distance_weight, self.angle_weight, self.compact_weight] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("distillation weight {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

fn off_diagonal(n: usize) -> Vec<usize> {
    (0..n * n).filter(|k| k / n != k % n).collect()
}

fn rows(g: &Graph, x: Var) -> Result<usize> {
    let (n, _) = g.value(x).dims2()?;
    if n < 3 {
        return Err(invalid(format!("relational distillation needs at least 3 rows, got {n}")));
    }
    Ok(n)
}

/// Off-diagonal pairwise distances as a vector.
fn pair_distances(g: &mut Graph, x: Var) -> Result<Var> {
    let n = rows(g, x)?;
    let d = g.pairwise_dist(x)?;
    g.gather(d, &off_diagonal(n))
}

/// Off-diagonal distances divided by their mean; left raw when all are 0.
fn normalized_distances(g: &mut Graph, x: Var) -> Result<Var> {
    let d = pair_distances(g, x)?;
    let mu = g.mean(d);
    if g.value(mu).item() > 0.0 {
        g.div_by(d, mu)
    } else {
        Ok(d)
    }
}

/// Cosines `cos∠(e_i − e_j, e_k − e_j)` for every anchor `j`, flattened.
fn angle_cosines(g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let n = rows(g, x)?;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let o = g.select_rows(x, &others)?;
        let anchor = g.select_rows(x, &[j])?;
        let diff = g.sub_row(o, anchor)?;
        let u = g.l2_normalize(diff)?;
        let ut = g.transpose(u)?;
        out.push(g.matmul(u, ut)?);
    }
    Ok(out)
}

/// Evaluates `f` on a constant copy of `teacher` in a scratch graph, so that
/// targets are computed by exactly the same arithmetic as the student side.
fn targets<T>(teacher: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<T>, read: impl Fn(&Graph, T) -> Vec<Tensor>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(teacher.clone());
    let v = f(&mut g, x)?;
    Ok(read(&g, v))
}

fn huber_mean(g: &mut Graph, s: Var, t: &Tensor) -> Result<Var> {
    let t = g.constant(t.clone());
    let diff = g.sub(s, t)?;
    let h = g.huber(diff);
    Ok(g.mean(h))
}

fn check_rows(g: &Graph, student: Var, teacher: &Tensor) -> Result<()> {
    let (ns, _) = g.value(student).dims2()?;
    let (nt, _) = teacher.dims2()?;
    if ns != nt {
        return Err(invalid(format!("student has {ns} rows, teacher {nt}")));
    }
    Ok(())
}

pub fn rkd_distance_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    check_rows(g, student, teacher)?;
    let t = targets(teacher, normalized_distances, |g, v| vec![g.value(v).clone()])?;
    let s = normalized_distances(g, student)?;
    huber_mean(g, s, &t[0])
}

pub fn rkd_angle_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    check_rows(g, student, teacher)?;
    let t = targets(teacher, angle_cosines, |g, vs| vs.into_iter().map(|v| g.value(v).clone()).collect())?;
    let s = angle_cosines(g, student)?;
    let mut acc: Option<Var> = None;
    for (sv, tv) in s.into_iter().zip(&t) {
        let term = huber_mean(g, sv, tv)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let n = t.len() as f64;
    Ok(g.scale(acc.expect("at least 3 anchors"), 1.0 / n))
}

pub fn compact_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    check_rows(g, student, teacher)?;
    let t = targets(teacher, pair_distances, |g, v| vec![g.value(v).clone()])?;
    let s = pair_distances(g, student)?;
    let t = g.constant(t[0].clone());
    let diff = g.sub(s, t)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Individual (unweighted) terms and their weighted sum.
pub struct DistillTerms {
    pub total: Var,
    pub terms: Vec<(DistillLossKind, Var)>,
}

pub fn distill_loss(g: &mut Graph, student: Var, teacher: &Tensor, spec: &DistillSpec) -> Result<DistillTerms> {
    spec.validate()?;
    let mut terms = Vec::with_capacity(spec.losses.len());
    let mut total: Option<Var> = None;
    for &kind in &spec.losses {
        let term = match kind {
            DistillLossKind::RkdDistance => rkd_distance_loss(g, student, teacher)?,
            DistillLossKind::RkdAngle => rkd_angle_loss(g, student, teacher)?,
            DistillLossKind::Compact => compact_loss(g, student, teacher)?,
        };
        terms.push((kind, term));
        let weighted = g.scale(term, spec.weight(kind));
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(DistillTerms {
        total: total.expect("validated non-empty"),
        terms,
    })
}

/// Concatenated teacher embeddings of a stacked batch.
pub fn teacher_embed(teachers: &[EncoderParams], batch: &Tensor) -> Result<Tensor> {
    let parts = teachers.iter().map(|t| t.embed(batch)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    ensemble_embed(&refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillTraining {
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub per_class: usize,
    pub optimizer: AdamConfig,
    /// Used only when the spec enables the metric learning loss.
    pub loss: DmlLossSpec,
    pub sampler: PairSamplerSpec,
    pub seed: u64,
}

impl Default for DistillTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            classes_per_batch: 8,
            per_class: 5,
            optimizer: AdamConfig::default(),
            loss: DmlLossSpec::default(),
            sampler: PairSamplerSpec::default(),
            seed: 1,
        }
    }
}

pub struct DistillOutcome {
    pub student: EncoderParams,
    /// Weighted total loss per iteration.
    pub losses: Vec<f64>,
}

/// Trains `student` to match the relational structure of the teacher ensemble
/// on batches from `train_classes`. Teachers are frozen.
pub fn distill(
    teachers: &[EncoderParams],
    mut student: EncoderParams,
    dataset: &Dataset,
    train_classes: &[usize],
    spec: &DistillSpec,
    training: &DistillTraining,
) -> Result<DistillOutcome> {
    spec.validate()?;
    training.optimizer.validate()?;
    if teachers.is_empty() {
        return Err(invalid("distillation needs at least one teacher"));
    }
    let n = training.classes_per_batch * training.per_class;
    let train_size = dataset.indices_of(train_classes).len();
    if n < 3 || train_size < n {
        return Err(invalid(format!("cannot draw batches of {n} from {train_size} images")));
    }
    let per_epoch = (train_size / n).max(1);
    let mut adam = AdamState::new(student.tensors());
    let mut losses = Vec::with_capacity(per_epoch * training.epochs);
    for it in 0..per_epoch * training.epochs {
        let it64 = it as u64;
        let mut batch_rng = rng::stream(training.seed, &[purpose::DISTILL, 0, it64]);
        let batch = sample_batch(
            dataset,
            train_classes,
            training.classes_per_batch,
            training.per_class,
            &mut batch_rng,
        )?;
        let x_data = dataset.stack(&batch.indices);
        let teacher = teacher_embed(teachers, &x_data)?;

        let mut g = Graph::new();
        let x = g.constant(x_data);
        let enc = student.forward(&mut g, x, true)?;
        let mut total = distill_loss(&mut g, enc.embeddings, &teacher, spec)?.total;
        if spec.use_dml {
            let emb = g.value(enc.embeddings).clone();
            let mut mining = rng::stream(training.seed, &[purpose::DISTILL, 1, it64]);
            let triplets = sample_pairs(&emb, &batch.labels, &training.sampler, &mut mining)?;
            let dml = dml_loss(&mut g, enc.embeddings, &triplets, &training.loss)?;
            total = g.add(total, dml.loss)?;
        }
        losses.push(g.value(total).item());
        g.backward(total)?;
        let grads: Vec<&Tensor> = enc
            .params
            .iter()
            .map(|&v| g.grad(v).expect("parameter leaf has a gradient"))
            .collect();
        adam_step(&training.optimizer, &mut student.tensors_mut(), &grads, &mut adam)?;
    }
    Ok(DistillOutcome { student, losses })
}
