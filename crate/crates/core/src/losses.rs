//! Metric learning objectives and intra-batch tuple mining.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    DistanceWeighted,
    SemiHard,
    AllPairs,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distance-weighted" => Ok(Self::DistanceWeighted),
            "semi-hard" => Ok(Self::SemiHard),
            "all-pairs" => Ok(Self::AllPairs),
            other => Err(invalid(format!("unknown sampler {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DistanceWeighted => "distance-weighted",
            Self::SemiHard => "semi-hard",
            Self::AllPairs => "all-pairs",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSamplerSpec {
    pub kind: SamplerKind,
    /// Distances are clamped from below to this value before weighting.
    pub cutoff_lower: f64,
    /// Negatives at or beyond this distance get zero weight (they cannot
    /// produce a non-zero triplet loss).
    pub nonzero_loss_cutoff: f64,
    /// Upper clamp on an individual sampling weight.
    pub weight_cap: f64,
}

impl Default for PairSamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::DistanceWeighted,
            cutoff_lower: 0.5,
            nonzero_loss_cutoff: 1.4,
            weight_cap: 1e8,
        }
    }
}

impl PairSamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_lower > 0.0 && self.cutoff_lower < 2.0) {
            return Err(invalid(format!("cutoff_lower {} must lie in (0, 2)", self.cutoff_lower)));
        }
        if !(self.nonzero_loss_cutoff > 0.0) || !(self.weight_cap > 0.0) {
            return Err(invalid("sampler cutoffs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Lower clamp on the sphere density before inversion.
const DENSITY_FLOOR: f64 = 1e-8;

/// Log of the pairwise-distance density of uniform points on the unit
/// sphere in `dim` dimensions, up to a constant:
/// `(dim − 2)·ln d + ((dim − 3)/2)·ln(1 − d²/4)`.
pub fn log_sphere_density(dist: f64, dim: usize) -> f64 {
    let dim = dim as f64;
    (dim - 2.0) * dist.ln() + 0.5 * (dim - 3.0) * (1.0 - 0.25 * dist * dist).ln()
}

/// Sampling weight of a negative at distance `dist` for distance-weighted mining.
pub fn distance_weight(dist: f64, dim: usize, spec: &PairSamplerSpec) -> f64 {
    if dist >= spec.nonzero_loss_cutoff {
        return 0.0;
    }
    let d = dist.clamp(spec.cutoff_lower, 2.0 - 1e-6);
    let q = log_sphere_density(d, dim).exp().max(DENSITY_FLOOR);
    (1.0 / q).min(spec.weight_cap)
}

/// Euclidean distance matrix without gradient bookkeeping.
pub fn distance_matrix(embeddings: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(embeddings.clone());
    let d = g.pairwise_dist(x)?;
    Ok(g.value(d).clone())
}

/// Mines `(anchor, positive, negative)` triplets from a labelled batch.
pub fn sample_pairs<R: Rng + ?Sized>(
    embeddings: &Tensor,
    labels: &[usize],
    spec: &PairSamplerSpec,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    spec.validate()?;
    let (n, dim) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(invalid("batch has a single class; no negatives available"));
    }
    let dist = distance_matrix(embeddings)?;
    let mut out = Vec::new();
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[a]).collect();
        match spec.kind {
            SamplerKind::AllPairs => {
                for &p in &positives {
                    out.extend(negatives.iter().map(|&k| Triplet {
                        anchor: a,
                        positive: p,
                        negative: k,
                    }));
                }
            }
            SamplerKind::SemiHard => {
                for &p in &positives {
                    let dap = dist.at(a, p);
                    let closest = |pool: &mut dyn Iterator<Item = usize>| {
                        pool.min_by(|&x, &y| dist.at(a, x).total_cmp(&dist.at(a, y)).then(x.cmp(&y)))
                    };
                    let negative = closest(&mut negatives.iter().copied().filter(|&k| dist.at(a, k) > dap))
                        .or_else(|| closest(&mut negatives.iter().copied()))
                        .expect("at least one negative");
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative,
                    });
                }
            }
            SamplerKind::DistanceWeighted => {
                let mut weights: Vec<f64> = negatives
                    .iter()
                    .map(|&k| distance_weight(dist.at(a, k), dim, spec))
                    .collect();
                if weights.iter().all(|&w| w == 0.0) {
                    weights.iter_mut().for_each(|w| *w = 1.0);
                }
                let picker = WeightedIndex::new(&weights)
                    .map_err(|e| invalid(format!("distance weights: {e}")))?;
                for &p in &positives {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: negatives[picker.sample(rng)],
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmlLossKind {
    Triplet,
    Contrastive,
    BinomialDeviance,
}

impl DmlLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Self::Triplet),
            "contrastive" => Ok(Self::Contrastive),
            "binomial-deviance" => Ok(Self::BinomialDeviance),
            other => Err(invalid(format!("unknown loss {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Triplet => "triplet",
            Self::Contrastive => "contrastive",
            Self::BinomialDeviance => "binomial-deviance",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmlLossSpec {
    pub kind: DmlLossKind,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl DmlLossSpec {
    pub fn triplet() -> Self {
        Self {
            kind: DmlLossKind::Triplet,
            margin: 0.2,
            alpha: 2.0,
            beta: 0.5,
        }
    }

    pub fn contrastive() -> Self {
        Self {
            kind: DmlLossKind::Contrastive,
            margin: 1.0,
            ..Self::triplet()
        }
    }

    pub fn binomial_deviance() -> Self {
        Self {
            kind: DmlLossKind::BinomialDeviance,
            ..Self::triplet()
        }
    }

    pub fn for_kind(kind: DmlLossKind) -> Self {
        match kind {
            DmlLossKind::Triplet => Self::triplet(),
            DmlLossKind::Contrastive => Self::contrastive(),
            DmlLossKind::BinomialDeviance => Self::binomial_deviance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin > 0.0 && self.alpha > 0.0 && self.beta > 0.0 {
            Ok(())
        } else {
            Err(invalid(format!("loss hyperparameters must be positive: {self:?}")))
        }
    }
}

impl Default for DmlLossSpec {
    fn default() -> Self {
        Self::triplet()
    }
}

pub struct DmlLoss {
    pub loss: Var,
    /// Set when no tuples were mined; `loss` is then the constant 0.
    pub empty: bool,
}

/// Metric learning loss over mined triplets. Pair-based losses use each
/// triplet as one positive pair `(a, p)` and one negative pair `(a, n)`.
pub fn dml_loss(g: &mut Graph, embeddings: Var, triplets: &[Triplet], spec: &DmlLossSpec) -> Result<DmlLoss> {
    spec.validate()?;
    let (n, _) = g.value(embeddings).dims2()?;
    if triplets.is_empty() {
        log::debug!("dml_loss: no tuples mined, loss defined as 0");
        return Ok(DmlLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
    {
        return Err(invalid(format!("triplet {t:?} out of range for batch of {n}")));
    }
    let pos_idx: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.positive).collect();
    let neg_idx: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.negative).collect();
    let loss = match spec.kind {
        DmlLossKind::Triplet => {
            let d = g.pairwise_dist(embeddings)?;
            let dap = g.gather(d, &pos_idx)?;
            let dan = g.gather(d, &neg_idx)?;
            let diff = g.sub(dap, dan)?;
            let shifted = g.add_scalar(diff, spec.margin);
            let h = g.hinge(shifted);
            g.mean(h)
        }
        DmlLossKind::Contrastive => {
            let d = g.pairwise_dist(embeddings)?;
            let dp = g.gather(d, &pos_idx)?;
            let dn = g.gather(d, &neg_idx)?;
            let pos_sq = g.square(dp);
            let pos = g.sum(pos_sq);
            let neg_flip = g.scale(dn, -1.0);
            let neg_gap = g.add_scalar(neg_flip, spec.margin);
            let neg_h = g.hinge(neg_gap);
            let neg_sq = g.square(neg_h);
            let neg = g.sum(neg_sq);
            let total = g.add(pos, neg)?;
            g.scale(total, 1.0 / (2 * triplets.len()) as f64)
        }
        DmlLossKind::BinomialDeviance => {
            let et = g.transpose(embeddings)?;
            let sim = g.matmul(embeddings, et)?;
            let sp = g.gather(sim, &pos_idx)?;
            let sn = g.gather(sim, &neg_idx)?;
            let zp = g.scale(sp, -spec.alpha);
            let zp = g.add_scalar(zp, spec.alpha * spec.beta);
            let zn = g.scale(sn, spec.alpha);
            let zn = g.add_scalar(zn, -spec.alpha * spec.beta);
            let pos = softplus_sum(g, zp);
            let neg = softplus_sum(g, zn);
            let total = g.add(pos, neg)?;
            g.scale(total, 1.0 / (2 * triplets.len()) as f64)
        }
    };
    Ok(DmlLoss { loss, empty: false })
}

fn softplus_sum(g: &mut Graph, z: Var) -> Var {
    let e = g.exp(z);
    let one_plus = g.add_scalar(e, 1.0);
    let l = g.log(one_plus);
    g.sum(l)
}
