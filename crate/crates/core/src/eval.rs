//! Zero-shot retrieval evaluation and training-curve summaries.

use std::collections::BTreeMap;
use std::io::Write;

use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

/// Recall@K for each `k` in `ks`: the fraction of items whose `k` nearest
/// neighbours (Euclidean, self excluded, ties broken by ascending index)
/// contain at least one item of the same class.
pub fn recall_at_k(embeddings: &Tensor, labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let (m, _) = embeddings.dims2()?;
    if m < 2 {
        return Err(invalid(format!("recall@k needs at least 2 items, got {m}")));
    }
    if labels.len() != m {
        return Err(invalid(format!("{} labels for {m} items", labels.len())));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(invalid("k must be positive"));
    }
    // Rank of the first same-class neighbour per query; recall@k counts ranks < k.
    let mut first_hit = Vec::with_capacity(m);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for q in 0..m {
        order.clear();
        let eq = embeddings.row(q);
        for j in (0..m).filter(|&j| j != q) {
            let d: f64 = eq
                .iter()
                .zip(embeddings.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            order.push((d, j));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        first_hit.push(order.iter().position(|&(_, j)| labels[j] == labels[q]));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| matches!(r, Some(r) if *r < k)).count();
            hits as f64 / m as f64
        })
        .collect())
}

/// Row-wise concatenation of member embeddings (no re-normalization).
pub fn ensemble_embed(members: &[&Tensor]) -> Result<Tensor> {
    if members.is_empty() {
        return Err(invalid("ensemble of zero members"));
    }
    Tensor::concat_cols(members)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub epoch: usize,
    pub split: String,
    pub ks: Vec<usize>,
    /// `members[l][i]` is Recall@`ks[i]` of member `l`.
    pub members: Vec<Vec<f64>>,
    pub ensemble: Vec<f64>,
}

impl RetrievalReport {
    pub fn member_recall(&self, member: usize, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        self.members.get(member).map(|r| r[i])
    }

    pub fn ensemble_recall(&self, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.ensemble[i])
    }

    /// CSV rows `epoch,config,member,k,recall`; the ensemble uses member `ensemble`.
    pub fn write_rows<W: Write>(&self, config: &str, out: &mut W) -> Result<()> {
        for (l, recalls) in self.members.iter().enumerate() {
            for (k, r) in self.ks.iter().zip(recalls) {
                writeln!(out, "{},{},{},{},{}", self.epoch, config, l + 1, k, r)?;
            }
        }
        for (k, r) in self.ks.iter().zip(&self.ensemble) {
            writeln!(out, "{},{},ensemble,{},{}", self.epoch, config, k, r)?;
        }
        Ok(())
    }
}

pub const REPORT_HEADER: &str = "epoch,config,member,k,recall";

/// Embeds `indices` with every member and evaluates members and their
/// concatenation ensemble.
pub fn evaluate_cohort(
    params: &[EncoderParams],
    dataset: &Dataset,
    indices: &[usize],
    ks: &[usize],
    epoch: usize,
    split: &str,
) -> Result<RetrievalReport> {
    let labels = dataset.labels(indices);
    let embeddings = params
        .iter()
        .map(|p| p.embed_dataset(dataset, indices))
        .collect::<Result<Vec<_>>>()?;
    let members = embeddings
        .iter()
        .map(|e| recall_at_k(e, &labels, ks))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = embeddings.iter().collect();
    let ensemble = recall_at_k(&ensemble_embed(&refs)?, &labels, ks)?;
    Ok(RetrievalReport {
        epoch,
        split: split.to_string(),
        ks: ks.to_vec(),
        members,
        ensemble,
    })
}

/// One point of a test Recall@1 curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub config_id: String,
    /// Member number (1-based) or `ensemble`.
    pub series: String,
    pub recall1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub config_id: String,
    pub series: String,
    pub peak: f64,
    pub peak_epoch: usize,
    pub final_value: f64,
    pub final_epoch: usize,
}

impl CurveSummary {
    /// `peak − final`, never negative.
    pub fn degradation(&self) -> f64 {
        self.peak - self.final_value
    }
}

pub const CURVE_HEADER: &str = "epoch,config_id,member_or_ensemble,recall@1";

pub fn curve_points(reports: &[RetrievalReport], config_id: &str) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for r in reports {
        for l in 0..r.members.len() {
            if let Some(v) = r.member_recall(l, 1) {
                out.push(CurvePoint {
                    epoch: r.epoch,
                    config_id: config_id.to_string(),
                    series: (l + 1).to_string(),
                    recall1: v,
                });
            }
        }
        if let Some(v) = r.ensemble_recall(1) {
            out.push(CurvePoint {
                epoch: r.epoch,
                config_id: config_id.to_string(),
                series: "ensemble".into(),
                recall1: v,
            });
        }
    }
    out
}

/// Peak and final Recall@1 per `(config, series)`.
pub fn overfit_curve(points: &[CurvePoint]) -> Vec<CurveSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        groups
            .entry((p.config_id.clone(), p.series.clone()))
            .or_default()
            .push(p);
    }
    groups
        .into_iter()
        .map(|((config_id, series), mut pts)| {
            pts.sort_by_key(|p| p.epoch);
            let last = pts.last().expect("non-empty group");
            let peak = pts
                .iter()
                .max_by(|a, b| a.recall1.total_cmp(&b.recall1).then(b.epoch.cmp(&a.epoch)))
                .expect("non-empty group");
            CurveSummary {
                config_id,
                series,
                peak: peak.recall1,
                peak_epoch: peak.epoch,
                final_value: last.recall1,
                final_epoch: last.epoch,
            }
        })
        .collect()
}

pub fn write_curve<W: Write>(points: &[CurvePoint], out: &mut W) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.epoch, p.config_id, p.series, p.recall1).map_err(Error::from)?;
    }
    Ok(())
}
