//! Relation matrices and the mutual objective exchanged across the cohort.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Pairwise Euclidean distances of one member's embeddings on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub values: Tensor,
    pub member: usize,
    pub iteration: usize,
}

impl RelationMatrix {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    /// Symmetric, zero diagonal, entries within `[0, max_entry]`.
    pub fn check(&self, max_entry: f64) -> Result<()> {
        let n = self.n();
        for i in 0..n {
            if self.values.at(i, i) != 0.0 {
                return Err(Error::Invariant(format!(
                    "relation matrix of member {} has non-zero diagonal at {i}",
                    self.member + 1
                )));
            }
            for j in (i + 1)..n {
                let v = self.values.at(i, j);
                if v.to_bits() != self.values.at(j, i).to_bits() || !(0.0..=max_entry).contains(&v) {
                    return Err(Error::Invariant(format!(
                        "relation matrix of member {} invalid at ({i}, {j}): {v}",
                        self.member + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `Ψ[k][l] = ‖e_k − e_l‖₂` on the graph.
pub fn relation_matrix(g: &mut Graph, embeddings: Var) -> Result<Var> {
    let (n, _) = g.value(embeddings).dims2()?;
    if n < 2 {
        return Err(invalid(format!("relation matrix needs at least 2 rows, got {n}")));
    }
    g.pairwise_dist(embeddings)
}

pub fn relation_matrix_values(embeddings: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let psi = relation_matrix(&mut g, e)?;
    Ok(g.value(psi).clone())
}

/// `(1/N²) Σ_ij (Ψ_l[i][j] − Ψ_k[i][j])²`. The peer matrix enters as a
/// constant, so no gradient reaches the sender.
pub fn mutual_pair_loss(g: &mut Graph, psi: Var, peer: &Tensor) -> Result<Var> {
    let own = g.value(psi);
    if own.shape() != peer.shape() {
        return Err(Error::ShapeMismatch {
            op: "mutual_pair_loss",
            lhs: own.shape().to_vec(),
            rhs: peer.shape().to_vec(),
        });
    }
    let target = g.constant(peer.clone());
    let diff = g.sub(psi, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Graph-level variant taking the peer as a node; the peer is detached.
pub fn mutual_pair_loss_detached(g: &mut Graph, psi: Var, peer: Var) -> Result<Var> {
    let target = g.value(peer).clone();
    mutual_pair_loss(g, psi, &target)
}

/// Average of [`mutual_pair_loss`] over all peers. Without peers (a cohort of
/// one) the mutual term is the constant 0.
pub fn mutual_loss(g: &mut Graph, psi: Var, peers: &[&Tensor]) -> Result<Var> {
    if peers.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for peer in peers {
        let term = mutual_pair_loss(g, psi, peer)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let total = acc.expect("non-empty peers");
    Ok(g.scale(total, 1.0 / peers.len() as f64))
}

/// `dml + λ·dm2`.
pub fn total_loss(g: &mut Graph, dml: Var, dm2: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(dm2, lambda);
    g.add(dml, weighted)
}

/// Linear warm-up of the mutual weight from 0 to `target` over
/// `warmup_epochs`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub target: f64,
    pub warmup_epochs: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            target: 20.0,
            warmup_epochs: 3.0,
        }
    }
}

impl LambdaSchedule {
    pub fn constant(target: f64) -> Self {
        Self {
            target,
            warmup_epochs: 0.0,
        }
    }

    /// λ at a fractional epoch (`iterations · N / train_size`).
    pub fn at(&self, epoch: f64) -> f64 {
        if self.warmup_epochs <= 0.0 || epoch >= self.warmup_epochs {
            self.target
        } else {
            self.target * (epoch.max(0.0) / self.warmup_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target >= 0.0 && self.warmup_epochs >= 0.0 {
            Ok(())
        } else {
            Err(invalid(format!("invalid lambda schedule {self:?}")))
        }
    }
}
