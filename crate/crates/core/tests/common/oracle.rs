//! Loop-based reference implementations and the checks comparing the
//! library against them.

use std::collections::BTreeSet;

use super::{normal, rng};
use dm2::eval::recall_at_k;
use dm2::losses::{sample_pairs, PairSamplerSpec, SamplerKind, Triplet};
use dm2::mutual::{mutual_loss, mutual_pair_loss, relation_matrix, relation_matrix_values, total_loss};
use dm2::{Graph, Tensor};
use rand::Rng;

const TRIALS: u64 = 200;

/// `Err` carries the first disagreement.
pub type Outcome = Result<(), String>;

macro_rules! ensure_eq {
    ($a:expr, $b:expr $(,)?) => {
        ensure_eq!($a, $b, "")
    };
    ($a:expr, $b:expr, $($fmt:tt)*) => {{
        let (a, b) = (&$a, &$b);
        if a != b {
            return Err(format!("{}: {:?} != {:?}", format!($($fmt)*), a, b));
        }
    }};
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn oracle_relation(e: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = e.len();
    let mut psi = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let mut s = 0.0;
                for k in 0..e[i].len() {
                    let d = e[i][k] - e[j][k];
                    s += d * d;
                }
                psi[i][j] = s.sqrt();
            }
        }
    }
    psi
}

fn oracle_pair_loss(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = a[i][j] - b[i][j];
            s += d * d;
        }
    }
    s / (n * n) as f64
}

fn matrix(m: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// Random batch size in `2..=8` and embedding width in `1..=5`.
fn batch(seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let d = r.random_range(1..=5);
    normal(&mut r, &[n, d])
}

pub fn check_relation_matrix() -> Outcome {
    for t in 0..TRIALS {
        let e = batch(t);
        let mut g = Graph::new();
        let v = g.constant(e.clone());
        let psi = relation_matrix(&mut g, v).unwrap();
        let expected = oracle_relation(&rows(&e));
        ensure_eq!(rows(g.value(psi)), expected, "trial {t}");
    }
    Ok(())
}

pub fn check_mutual_pair_loss() -> Outcome {
    let mut g = Graph::new();
    let own = g.constant(matrix(&[vec![0.0, 5.0], vec![5.0, 0.0]]));
    let l = mutual_pair_loss(&mut g, own, &matrix(&[vec![0.0, 3.0], vec![3.0, 0.0]])).unwrap();
    ensure_eq!(g.value(l).item(), 2.0);

    for t in 0..TRIALS {
        let a = batch(t);
        let (n, d) = a.dims2().unwrap();
        let b = normal(&mut rng(t + 10_000), &[n, d]);
        let pa = oracle_relation(&rows(&a));
        let pb = oracle_relation(&rows(&b));
        let mut g = Graph::new();
        let v = g.constant(a);
        let psi = relation_matrix(&mut g, v).unwrap();
        let l = mutual_pair_loss(&mut g, psi, &matrix(&pb)).unwrap();
        ensure_eq!(g.value(l).item(), oracle_pair_loss(&pa, &pb), "trial {t}");
    }
    Ok(())
}

pub fn check_mutual_loss() -> Outcome {
    for t in 0..TRIALS {
        let own = batch(t);
        let (n, d) = own.dims2().unwrap();
        let peers_count = 1 + (t as usize % 4);
        let peer_emb: Vec<Tensor> = (0..peers_count)
            .map(|k| normal(&mut rng(t * 31 + k as u64 + 20_000), &[n, d]))
            .collect();
        let po = oracle_relation(&rows(&own));
        let pp: Vec<Vec<Vec<f64>>> = peer_emb.iter().map(|p| oracle_relation(&rows(p))).collect();
        let mut acc = 0.0;
        for p in &pp {
            acc += oracle_pair_loss(&po, p);
        }
        let expected = acc * (1.0 / peers_count as f64);

        let peers: Vec<Tensor> = peer_emb.iter().map(|p| relation_matrix_values(p).unwrap()).collect();
        let refs: Vec<&Tensor> = peers.iter().collect();
        let mut g = Graph::new();
        let v = g.constant(own);
        let psi = relation_matrix(&mut g, v).unwrap();
        let l = mutual_loss(&mut g, psi, &refs).unwrap();
        ensure_eq!(g.value(l).item(), expected, "trial {t}");
    }
    Ok(())
}

pub fn check_total_loss() -> Outcome {
    for t in 0..TRIALS {
        let mut r = rng(t + 30_000);
        let dml: f64 = r.random_range(0.0..3.0);
        let dm2: f64 = r.random_range(0.0..3.0);
        let lambda: f64 = r.random_range(0.0..25.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(dml));
        let b = g.constant(Tensor::scalar(dm2));
        let l = total_loss(&mut g, a, b, lambda).unwrap();
        ensure_eq!(g.value(l).item(), dml + lambda * dm2, "trial {t}");
    }
    Ok(())
}

/// Recall@k without sorting: a query hits at `k` iff some same-class item
/// has fewer than `k` items ranked ahead of it.
fn oracle_recall(e: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = e.len();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..e[i].len() {
            let d = e[i][c] - e[j][c];
            s += d * d;
        }
        s
    };
    let mut hits = 0;
    for q in 0..n {
        let mut hit = false;
        for j in 0..n {
            if j == q || labels[j] != labels[q] {
                continue;
            }
            let mut ahead = 0;
            for i in 0..n {
                if i != q && i != j && (dist(q, i) < dist(q, j) || (dist(q, i) == dist(q, j) && i < j)) {
                    ahead += 1;
                }
            }
            if ahead < k {
                hit = true;
            }
        }
        if hit {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

pub fn check_recall_at_k() -> Outcome {
    for t in 0..TRIALS {
        let mut r = rng(t + 40_000);
        let n = r.random_range(2..=8);
        let d = r.random_range(1..=3);
        // Coarse integer coordinates make distance ties common.
        let e: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2..=2) as f64).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let ks = [1, 2, 4, 8];
        let got = recall_at_k(&matrix(&e), &labels, &ks).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            ensure_eq!(got[i], oracle_recall(&e, &labels, k), "trial {t} k={k}");
        }
    }
    Ok(())
}

fn oracle_all_pairs(labels: &[usize]) -> BTreeSet<Triplet> {
    let n = labels.len();
    let mut out = BTreeSet::new();
    for a in 0..n {
        for p in 0..n {
            for k in 0..n {
                if p != a && labels[p] == labels[a] && labels[k] != labels[a] {
                    out.insert(Triplet {
                        anchor: a,
                        positive: p,
                        negative: k,
                    });
                }
            }
        }
    }
    out
}

pub fn check_all_pairs() -> Outcome {
    let spec = PairSamplerSpec {
        kind: SamplerKind::AllPairs,
        ..Default::default()
    };
    let e = normal(&mut rng(1), &[4, 3]);
    let got = sample_pairs(&e, &[0, 0, 1, 1], &spec, &mut rng(2)).unwrap();
    ensure_eq!(got.len(), 8);

    for t in 0..TRIALS {
        let mut r = rng(t + 50_000);
        let n = r.random_range(2..=8);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            labels[0] = labels[0] + 1;
        }
        let e = normal(&mut r, &[n, 4]);
        let got = sample_pairs(&e, &labels, &spec, &mut r).unwrap();
        let set: BTreeSet<Triplet> = got.iter().copied().collect();
        ensure_eq!(set.len(), got.len(), "duplicates in trial {t}");
        ensure_eq!(set, oracle_all_pairs(&labels), "trial {t}");
    }
    Ok(())
}
