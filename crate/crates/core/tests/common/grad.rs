//! Finite-difference gradient cases shared by the gradient and acceptance suites.

use super::{check, normal, rel_err, rng, uniform, weighted_sum, H};
use dm2::distill::{compact_loss, rkd_angle_loss, rkd_distance_loss};
use dm2::encoder::{Backbone, EncoderArch, EncoderParams};
use dm2::losses::{distance_matrix, dml_loss, sample_pairs, DmlLossSpec, PairSamplerSpec, SamplerKind, Triplet};
use dm2::mutual::{mutual_loss, mutual_pair_loss, relation_matrix, relation_matrix_values, total_loss};
use dm2::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-4;

/// Worst relative error of one op or loss over its random instances.
#[derive(Debug)]
pub struct Case {
    pub name: &'static str,
    pub worst: f64,
    pub instances: u64,
}

impl Case {
    pub fn passes(&self, tol: f64) -> bool {
        self.instances >= INSTANCES && self.worst < tol
    }
}

fn primitive(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Case {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let inputs = make(&mut rng(1000 + i));
        let err = check(&inputs, |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out, 77 + i)
        });
        worst = worst.max(err);
    }
    Case {
        name,
        worst,
        instances: INSTANCES,
    }
}

/// Values bounded away from `0` so relu/hinge kinks are never crossed.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = normal(r, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Values bounded away from the huber transition at `±1`.
fn away_from_one(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape, -2.5, 2.5);
    for v in t.data_mut() {
        if (v.abs() - 1.0).abs() < 0.05 {
            *v *= 1.2;
        }
    }
    t
}

pub fn elementwise_ops() -> Vec<Case> {
    let two = |r: &mut ChaCha8Rng| vec![normal(r, &[3, 4]), normal(r, &[3, 4])];
    vec![
        primitive("add", two, |g, v| g.add(v[0], v[1])),
        primitive("sub", two, |g, v| g.sub(v[0], v[1])),
        primitive("mul", two, |g, v| g.mul(v[0], v[1])),
        primitive("scale", |r| vec![normal(r, &[2, 5])], |g, v| Ok(g.scale(v[0], -1.7))),
        primitive("add_scalar", |r| vec![normal(r, &[2, 5])], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        primitive(
            "div_by",
            |r| vec![normal(r, &[3, 3]), uniform(r, &[1], 0.5, 2.0)],
            |g, v| g.div_by(v[0], v[1]),
        ),
        primitive("relu", |r| vec![away_from_zero(r, &[4, 4])], |g, v| Ok(g.relu(v[0]))),
        primitive("hinge", |r| vec![away_from_zero(r, &[4, 4])], |g, v| Ok(g.hinge(v[0]))),
        primitive("exp", |r| vec![normal(r, &[3, 3])], |g, v| Ok(g.exp(v[0]))),
        primitive("log", |r| vec![uniform(r, &[3, 3], 0.2, 3.0)], |g, v| Ok(g.log(v[0]))),
        primitive("sqrt", |r| vec![uniform(r, &[3, 3], 0.2, 3.0)], |g, v| Ok(g.sqrt(v[0]))),
        primitive("square", |r| vec![normal(r, &[3, 3])], |g, v| Ok(g.square(v[0]))),
        primitive("huber", |r| vec![away_from_one(r, &[4, 4])], |g, v| Ok(g.huber(v[0]))),
    ]
}

pub fn structural_ops() -> Vec<Case> {
    vec![
        primitive("matmul", |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        primitive("transpose", |r| vec![normal(r, &[3, 4])], |g, v| g.transpose(v[0])),
        primitive("add_row", |r| vec![normal(r, &[3, 4]), normal(r, &[1, 4])], |g, v| g.add_row(v[0], v[1])),
        primitive("sub_row", |r| vec![normal(r, &[3, 4]), normal(r, &[1, 4])], |g, v| g.sub_row(v[0], v[1])),
        primitive("gather", |r| vec![normal(r, &[3, 3])], |g, v| g.gather(v[0], &[0, 4, 4, 8, 2])),
        primitive("select_rows", |r| vec![normal(r, &[4, 3])], |g, v| g.select_rows(v[0], &[3, 1, 1])),
        primitive(
            "concat_cols",
            |r| vec![normal(r, &[3, 2]), normal(r, &[3, 4])],
            |g, v| g.concat_cols(&[v[0], v[1]]),
        ),
        primitive("sum", |r| vec![normal(r, &[3, 4])], |g, v| Ok(g.sum(v[0]))),
        primitive("mean", |r| vec![normal(r, &[3, 4])], |g, v| Ok(g.mean(v[0]))),
        primitive("row_norm", |r| vec![normal(r, &[4, 3])], |g, v| g.row_norm(v[0])),
        primitive("l2_normalize", |r| vec![normal(r, &[4, 3])], |g, v| g.l2_normalize(v[0])),
        primitive("pairwise_sqdist", |r| vec![normal(r, &[5, 3])], |g, v| g.pairwise_sqdist(v[0])),
        primitive("pairwise_dist", |r| vec![normal(r, &[5, 3])], |g, v| g.pairwise_dist(v[0])),
        primitive(
            "softmax_cross_entropy",
            |r| vec![normal(r, &[4, 5])],
            |g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]),
        ),
    ]
}

// ---- losses composed through the encoder ----

const INPUT: usize = 10;

fn encoder(seed: u64) -> EncoderParams {
    let arch = EncoderArch::new(INPUT, vec![8], 4).unwrap();
    let backbone = Backbone::random(&arch, seed).unwrap();
    EncoderParams::new(backbone, seed ^ 0x5a5a, 4)
}

/// Gradient of `loss(encode(x))` w.r.t. every encoder parameter.
fn check_encoder(params: &EncoderParams, x: &Tensor, loss: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let enc = params.forward(&mut g, xv, true).unwrap();
    let l = loss(&mut g, enc.embeddings).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = enc.params.iter().map(|&p| g.grad(p).unwrap().data().to_vec()).collect();

    let eval = |p: &EncoderParams| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = p.forward(&mut g, xv, false).unwrap();
        let l = loss(&mut g, enc.embeddings).unwrap();
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (t, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut p = params.clone();
            p.tensors_mut()[t].data_mut()[j] += H;
            let up = eval(&p);
            p.tensors_mut()[t].data_mut()[j] -= 2.0 * H;
            let down = eval(&p);
            numeric[j] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

struct Instance {
    params: EncoderParams,
    x: Tensor,
    embeddings: Tensor,
    triplets: Vec<Triplet>,
}

fn instance(i: u64) -> Instance {
    let mut r = rng(9000 + i);
    let params = encoder(i + 1);
    let x = normal(&mut r, &[8, INPUT]);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let embeddings = params.embed(&x).unwrap();
    let spec = PairSamplerSpec {
        kind: SamplerKind::AllPairs,
        ..Default::default()
    };
    let triplets = sample_pairs(&embeddings, &labels, &spec, &mut r).unwrap();
    Instance {
        params,
        x,
        embeddings,
        triplets,
    }
}

/// `kink` measures how far a triplet sits from the loss's hinge transition;
/// draws closer than 1e-3 are skipped.
fn dml_case(name: &'static str, spec: DmlLossSpec, kink: impl Fn(&Tensor, &Triplet) -> f64) -> Case {
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for i in 0..200 {
        if used == INSTANCES {
            break;
        }
        let inst = instance(i);
        let d = distance_matrix(&inst.embeddings).unwrap();
        if inst.triplets.iter().any(|t| kink(&d, t) < 1e-3) {
            continue;
        }
        used += 1;
        let err = check_encoder(&inst.params, &inst.x, &|g, e| Ok(dml_loss(g, e, &inst.triplets, &spec)?.loss));
        worst = worst.max(err);
    }
    Case {
        name,
        worst,
        instances: used,
    }
}

fn peers(i: u64, n: usize) -> Vec<Tensor> {
    (0..3)
        .map(|k| relation_matrix_values(&normal(&mut rng(400 + 10 * i + k), &[n, 4])).unwrap())
        .collect()
}

fn encoder_case(name: &'static str, make: impl Fn(u64, &Instance) -> f64) -> Case {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        worst = worst.max(make(i, &instance(i)));
    }
    Case {
        name,
        worst,
        instances: INSTANCES,
    }
}

fn distill_case(name: &'static str, loss: fn(&mut Graph, Var, &Tensor) -> Result<Var>) -> Case {
    encoder_case(name, |i, inst| {
        let teacher = normal(&mut rng(700 + i), &[8, 6]);
        check_encoder(&inst.params, &inst.x, &|g, e| loss(g, e, &teacher))
    })
}

pub fn losses() -> Vec<Case> {
    let triplet = DmlLossSpec::triplet();
    let tm = triplet.margin;
    let contrastive = DmlLossSpec::contrastive();
    let cm = contrastive.margin;
    vec![
        dml_case("triplet", triplet, move |d, t| {
            (d.at(t.anchor, t.positive) - d.at(t.anchor, t.negative) + tm).abs()
        }),
        dml_case("contrastive", contrastive, move |d, t| (cm - d.at(t.anchor, t.negative)).abs()),
        dml_case("binomial-deviance", DmlLossSpec::binomial_deviance(), |_, _| 1.0),
        encoder_case("mutual-pair", |i, inst| {
            let ps = peers(i, 8);
            check_encoder(&inst.params, &inst.x, &|g, e| {
                let psi = relation_matrix(g, e)?;
                mutual_pair_loss(g, psi, &ps[0])
            })
        }),
        encoder_case("mutual", |i, inst| {
            let ps = peers(i, 8);
            check_encoder(&inst.params, &inst.x, &|g, e| {
                let psi = relation_matrix(g, e)?;
                let refs: Vec<&Tensor> = ps.iter().collect();
                mutual_loss(g, psi, &refs)
            })
        }),
        encoder_case("total", |i, inst| {
            let ps = peers(i, 8);
            check_encoder(&inst.params, &inst.x, &|g, e| {
                let dml = dml_loss(g, e, &inst.triplets, &DmlLossSpec::binomial_deviance())?.loss;
                let psi = relation_matrix(g, e)?;
                let refs: Vec<&Tensor> = ps.iter().collect();
                let dm2 = mutual_loss(g, psi, &refs)?;
                total_loss(g, dml, dm2, 7.5)
            })
        }),
        distill_case("rkd-distance", rkd_distance_loss),
        distill_case("rkd-angle", rkd_angle_loss),
        distill_case("compact", compact_loss),
    ]
}
