mod common;

use common::{normal, rng};
use dm2::augment::AugmentationSpec;
use dm2::data::{generate_dataset_sized, sample_batch};
use dm2::distill::{compact_loss, rkd_angle_loss, rkd_distance_loss};
use dm2::encoder::{Backbone, EncoderArch, EncoderParams};
use dm2::eval::{ensemble_embed, recall_at_k};
use dm2::losses::{dml_loss, sample_pairs, DmlLossSpec, PairSamplerSpec, SamplerKind};
use dm2::mutual::{mutual_loss, relation_matrix, relation_matrix_values};
use dm2::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor> {
    (2usize..9, 1usize..6).prop_flat_map(|(n, d)| matrix(n, d))
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let u = g.l2_normalize(v).unwrap();
    g.value(u).clone()
}

/// Random orthogonal matrix via Gram–Schmidt on a seeded Gaussian matrix.
fn rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let m = normal(&mut rng(seed), &[d, d]);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = m.row(i).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sqdist_symmetric_zero_diagonal(x in sized_matrix()) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let d = g.pairwise_sqdist(v).unwrap();
        let d = g.value(d);
        let n = d.shape()[0];
        for i in 0..n {
            prop_assert_eq!(d.at(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.at(i, j).to_bits(), d.at(j, i).to_bits());
            }
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(x in sized_matrix()) {
        let u = unit_rows(&x);
        let (n, _) = u.dims2().unwrap();
        for i in 0..n {
            let input: f64 = x.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            if input >= 1e-8 {
                let nrm: f64 = u.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
                prop_assert!((nrm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_backward_repeats_bitwise(x in sized_matrix(), w in matrix(5, 3)) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let (_, d) = x.dims2().unwrap();
            let wv = g.param(Tensor::new(vec![d, 3], w.data()[..d * 3].to_vec()).unwrap());
            let h = g.matmul(xv, wv).unwrap();
            let e = g.l2_normalize(h).unwrap();
            let psi = g.pairwise_dist(e).unwrap();
            let l = g.mean(psi);
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
        };
        let (a, ga, wa) = run();
        let (b, gb, wb) = run();
        prop_assert_eq!(a, b);
        prop_assert!(ga.bit_eq(&gb) && wa.bit_eq(&wb));
    }

    #[test]
    fn relation_matrix_of_unit_embeddings_is_bounded(x in sized_matrix()) {
        let psi = relation_matrix_values(&unit_rows(&x)).unwrap();
        let n = psi.shape()[0];
        for i in 0..n {
            prop_assert_eq!(psi.at(i, i), 0.0);
            for j in 0..n {
                prop_assert!(psi.at(i, j) >= 0.0 && psi.at(i, j) <= 2.0 + 1e-12);
                prop_assert_eq!(psi.at(i, j), psi.at(j, i));
            }
        }
    }

    #[test]
    fn mutual_loss_ignores_peer_order(n in 2usize..9, peers in 1usize..5, seed in any::<u64>()) {
        let own = normal(&mut rng(seed), &[n, 3]);
        let mut ps: Vec<Tensor> = (0..peers)
            .map(|k| relation_matrix_values(&normal(&mut rng(seed ^ (k as u64 + 1)), &[n, 3])).unwrap())
            .collect();
        let eval = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let v = g.constant(own.clone());
            let psi = relation_matrix(&mut g, v).unwrap();
            let refs: Vec<&Tensor> = ps.iter().collect();
            let l = mutual_loss(&mut g, psi, &refs).unwrap();
            g.value(l).item()
        };
        let before = eval(&ps);
        ps.shuffle(&mut rng(seed.wrapping_add(7)));
        let after = eval(&ps);
        prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn recall_invariant_under_isometry(n in 2usize..20, d in 1usize..5, seed in any::<u64>()) {
        let e = normal(&mut rng(seed), &[n, d]);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let q = rotation(d, seed ^ 0xabc);
        let shift = normal(&mut rng(seed ^ 0xdef), &[1, d]);
        let mut rotated = Vec::with_capacity(n * d);
        for i in 0..n {
            for r in &q {
                let dot: f64 = e.row(i).iter().zip(r).map(|(a, b)| a * b).sum();
                rotated.push(dot + shift.data()[rotated.len() % d]);
            }
        }
        let rotated = Tensor::new(vec![n, d], rotated).unwrap();
        let ks = [1, 2, 4];
        prop_assert_eq!(recall_at_k(&e, &labels, &ks).unwrap(), recall_at_k(&rotated, &labels, &ks).unwrap());
    }

    #[test]
    fn ensemble_of_copies_matches_single(n in 2usize..20, seed in any::<u64>()) {
        let e = unit_rows(&normal(&mut rng(seed), &[n, 4]));
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let joint = ensemble_embed(&[&e, &e, &e]).unwrap();
        let ks = [1, 2, 4, 8];
        prop_assert_eq!(recall_at_k(&e, &labels, &ks).unwrap(), recall_at_k(&joint, &labels, &ks).unwrap());
    }

    #[test]
    fn rkd_angle_ignores_scale(n in 3usize..9, seed in any::<u64>(), scale in 0.1f64..10.0) {
        let student = normal(&mut rng(seed), &[n, 4]);
        let teacher = normal(&mut rng(seed ^ 1), &[n, 5]);
        let scaled = teacher.map(|v| v * 10.0);
        let s2 = student.map(|v| v * scale);
        let eval = |s: &Tensor, t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(s.clone());
            let l = rkd_angle_loss(&mut g, v, t).unwrap();
            g.value(l).item()
        };
        let base = eval(&student, &teacher);
        prop_assert!((base - eval(&student, &scaled)).abs() <= 1e-12);
        prop_assert!((base - eval(&s2, &teacher)).abs() <= 1e-12);
    }

    #[test]
    fn distill_losses_vanish_on_matching_structure(n in 3usize..9, seed in any::<u64>(), scale in 0.2f64..5.0) {
        let t = normal(&mut rng(seed), &[n, 4]);
        let eval = |f: fn(&mut Graph, dm2::Var, &Tensor) -> dm2::Result<dm2::Var>, s: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(s.clone());
            let l = f(&mut g, v, &t).unwrap();
            g.value(l).item()
        };
        // Same relational structure up to scale: distance and angle vanish, compact does not.
        let scaled = t.map(|v| v * scale);
        prop_assert_eq!(eval(rkd_distance_loss, &t), 0.0);
        prop_assert_eq!(eval(compact_loss, &t), 0.0);
        prop_assert!(eval(rkd_distance_loss, &scaled) < 1e-20);
        if (scale - 1.0).abs() > 0.05 {
            prop_assert!(eval(compact_loss, &scaled) > 0.0);
        }
        let other = normal(&mut rng(seed ^ 5), &[n, 4]);
        prop_assert!(eval(rkd_distance_loss, &other) > 0.0);
    }

    #[test]
    fn dml_losses_are_non_negative(seed in any::<u64>(), kind in 0usize..3) {
        let e = unit_rows(&normal(&mut rng(seed), &[8, 4]));
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let spec = PairSamplerSpec { kind: SamplerKind::AllPairs, ..Default::default() };
        let trips = sample_pairs(&e, &labels, &spec, &mut rng(seed)).unwrap();
        let loss = [DmlLossSpec::triplet(), DmlLossSpec::contrastive(), DmlLossSpec::binomial_deviance()][kind].clone();
        let mut g = Graph::new();
        let v = g.constant(e);
        let l = dml_loss(&mut g, v, &trips, &loss).unwrap().loss;
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn collapsed_separated_classes_have_zero_margin_loss(p in 2usize..5, k in 2usize..4, seed in any::<u64>()) {
        // Each class sits on one point; classes are axis-aligned unit vectors (pairwise √2 > margin).
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..p {
            for _ in 0..k {
                data.extend((0..p).map(|j| if j == c { 1.0 } else { 0.0 }));
                labels.push(c);
            }
        }
        let e = Tensor::new(vec![p * k, p], data).unwrap();
        let spec = PairSamplerSpec { kind: SamplerKind::AllPairs, ..Default::default() };
        let trips = sample_pairs(&e, &labels, &spec, &mut rng(seed)).unwrap();
        for loss in [DmlLossSpec::triplet(), DmlLossSpec::contrastive()] {
            let mut g = Graph::new();
            let v = g.constant(e.clone());
            let l = dml_loss(&mut g, v, &trips, &loss).unwrap().loss;
            prop_assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn relabeling_leaves_loss_unchanged(seed in any::<u64>(), sampler in 0usize..3) {
        let e = unit_rows(&normal(&mut rng(seed), &[8, 4]));
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let relabeled: Vec<usize> = labels.iter().map(|&l| [7, 2, 9, 4][l]).collect();
        let kind = [SamplerKind::AllPairs, SamplerKind::SemiHard, SamplerKind::DistanceWeighted][sampler];
        let spec = PairSamplerSpec { kind, ..Default::default() };
        let a = sample_pairs(&e, &labels, &spec, &mut rng(seed ^ 3)).unwrap();
        let b = sample_pairs(&e, &relabeled, &spec, &mut rng(seed ^ 3)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sampler_never_pairs_same_class_as_negative(seed in any::<u64>(), sampler in 0usize..3) {
        let e = unit_rows(&normal(&mut rng(seed), &[12, 4]));
        let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let kind = [SamplerKind::AllPairs, SamplerKind::SemiHard, SamplerKind::DistanceWeighted][sampler];
        let spec = PairSamplerSpec { kind, ..Default::default() };
        for t in sample_pairs(&e, &labels, &spec, &mut rng(seed)).unwrap() {
            prop_assert!(t.anchor != t.positive);
            prop_assert_eq!(labels[t.anchor], labels[t.positive]);
            prop_assert_ne!(labels[t.anchor], labels[t.negative]);
        }
    }

    #[test]
    fn encoder_outputs_lie_on_sphere(seed in any::<u64>(), n in 1usize..6) {
        let arch = EncoderArch::new(6, vec![5, 4], 3).unwrap();
        let params = EncoderParams::new(Backbone::random(&arch, seed).unwrap(), seed ^ 9, 3);
        let e = params.embed(&normal(&mut rng(seed), &[n, 6])).unwrap();
        for i in 0..n {
            let nrm: f64 = e.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((nrm - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batches_are_class_balanced(seed in any::<u64>(), p in 1usize..6, k in 1usize..5) {
        let ds = generate_dataset_sized(8, 6, 3, 8, 8).unwrap();
        let classes: Vec<usize> = (0..8).collect();
        let b = sample_batch(&ds, &classes, p, k, &mut rng(seed)).unwrap();
        prop_assert_eq!(b.len(), p * k);
        let mut seen = std::collections::BTreeMap::new();
        for (&i, &l) in b.indices.iter().zip(&b.labels) {
            prop_assert_eq!(ds.labels(&[i])[0], l);
            *seen.entry(l).or_insert(0) += 1;
        }
        prop_assert_eq!(seen.len(), p);
        prop_assert!(seen.values().all(|&c| c == k));
        let distinct: std::collections::BTreeSet<_> = b.indices.iter().collect();
        prop_assert_eq!(distinct.len(), b.len());
    }

    #[test]
    fn augmented_images_stay_valid(seed in any::<u64>()) {
        let ds = generate_dataset_sized(4, 6, seed, 10, 9).unwrap();
        let spec = AugmentationSpec::default();
        let t = spec.sample(&mut rng(seed));
        let img = ds.stack(&[0]);
        let out = t.apply(img.data(), 10, 9);
        prop_assert_eq!(out.len(), 90);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
