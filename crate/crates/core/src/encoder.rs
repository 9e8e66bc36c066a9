//! MLP embedding encoders: relu backbone, linear projection, L2 normalization.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, purpose, StreamRng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            embed_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Desk-scale default: 24×24 inputs, hidden `[256, 128]`, 32-d embeddings.
    pub fn desk_default(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![256, 128],
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("encoder dims must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(invalid(format!(
                "encoder needs at least one positive hidden layer, got {:?}",
                self.hidden_dims
            )));
        }
        Ok(())
    }

    pub fn last_hidden(&self) -> usize {
        *self.hidden_dims.last().expect("validated arch has a hidden layer")
    }
}

/// Affine map `x·W + b` with `W: in×out`, `b: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `[−1/√fan_in, 1/√fan_in]` for weights and bias.
    pub fn uniform(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("sized");
        let bias = Tensor::vector(draw(fan_out));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn bind(&self, g: &mut Graph, requires_grad: bool) -> (Var, Var) {
        (
            g.leaf(self.weight.clone(), requires_grad),
            g.leaf(self.bias.clone(), requires_grad),
        )
    }

    fn apply(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.weight.bit_eq(&other.weight) && self.bias.bit_eq(&other.bias)
    }
}

/// Stack of relu-activated hidden layers shared by pretraining and the cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Linear>,
}

impl Backbone {
    pub fn random(arch: &EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, &[purpose::BACKBONE_INIT]);
        let mut fan_in = arch.input_dim;
        let layers = arch
            .hidden_dims
            .iter()
            .map(|&h| {
                let l = Linear::uniform(fan_in, h, &mut r);
                fan_in = h;
                l
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(Linear::out_dim).collect()
    }

    pub fn matches(&self, arch: &EncoderArch) -> bool {
        self.input_dim() == arch.input_dim && self.hidden_dims() == arch.hidden_dims
    }

    fn forward(&self, g: &mut Graph, x: Var, requires_grad: bool, vars: &mut Vec<Var>) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let (w, b) = layer.bind(g, requires_grad);
            vars.extend([w, b]);
            let z = Linear::apply(g, h, w, b)?;
            h = g.relu(z);
        }
        Ok(h)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }
}

/// Trainable parameters of one cohort member.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub backbone: Backbone,
    pub head: Linear,
}

/// Graph handles produced by [`EncoderParams::forward`].
pub struct Encoded {
    /// `N×d` unit-norm embeddings.
    pub embeddings: Var,
    /// Parameter leaves in [`EncoderParams::tensors`] order.
    pub params: Vec<Var>,
}

impl EncoderParams {
    pub fn new(backbone: Backbone, head_seed: u64, embed_dim: usize) -> Self {
        let mut r = rng::stream(head_seed, &[purpose::HEAD_INIT]);
        let fan_in = *backbone.hidden_dims().last().expect("non-empty backbone");
        let head = Linear::uniform(fan_in, embed_dim, &mut r);
        Self { backbone, head }
    }

    pub fn arch(&self) -> EncoderArch {
        EncoderArch {
            input_dim: self.backbone.input_dim(),
            hidden_dims: self.backbone.hidden_dims(),
            embed_dim: self.head.out_dim(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.head.out_dim()
    }

    /// Parameters in canonical order: backbone layers, then the head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.layers.len() + 2);
        for l in &self.backbone.layers {
            out.extend([&l.weight, &l.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.layers.len() + 2);
        for l in &mut self.backbone.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.backbone.layers.len() {
            out.push(format!("backbone.{i}.weight"));
            out.push(format!("backbone.{i}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.tensors().into_iter().cloned()).collect()
    }

    pub fn from_named(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let mut layers = Vec::new();
        while entries.iter().any(|(n, _)| *n == format!("backbone.{}.weight", layers.len())) {
            let i = layers.len();
            layers.push(Linear {
                weight: find(&format!("backbone.{i}.weight"))?,
                bias: find(&format!("backbone.{i}.bias"))?,
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("checkpoint has no backbone layers".into()));
        }
        let head = Linear {
            weight: find("head.weight")?,
            bias: find("head.bias")?,
        };
        let params = Self {
            backbone: Backbone { layers },
            head,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut fan_in = self.backbone.input_dim();
        let layers = self.backbone.layers.iter().chain(std::iter::once(&self.head));
        for l in layers {
            let (i, o) = l.weight.dims2()?;
            if i != fan_in || l.bias.shape() != [o] {
                return Err(Error::Format(format!(
                    "inconsistent layer shapes {:?} / {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            fan_in = o;
        }
        Ok(())
    }

    /// Records the encoder on `g` for an `N×input_dim` batch.
    pub fn forward(&self, g: &mut Graph, x: Var, requires_grad: bool) -> Result<Encoded> {
        let (_, cols) = g.value(x).dims2()?;
        if cols != self.backbone.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![self.backbone.input_dim()],
            });
        }
        let mut params = Vec::new();
        let h = self.backbone.forward(g, x, requires_grad, &mut params)?;
        let (w, b) = self.head.bind(g, requires_grad);
        params.extend([w, b]);
        let z = Linear::apply(g, h, w, b)?;
        let embeddings = g.l2_normalize(z)?;
        Ok(Encoded { embeddings, params })
    }

    /// Unit-norm embeddings without gradient bookkeeping.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let enc = self.forward(&mut g, x, false)?;
        Ok(g.value(enc.embeddings).clone())
    }

    /// Embeds `images` in chunks to bound graph memory.
    pub fn embed_dataset(&self, dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in indices.chunks(256) {
            parts.push(self.embed(&dataset.stack(chunk))?);
        }
        let d = self.embed_dim();
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![indices.len(), d], data)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.backbone.bit_eq(&other.backbone) && self.head.bit_eq(&other.head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 50,
            optimizer: AdamConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    /// Classification accuracy of the discarded pretext head on the pretext images.
    pub train_accuracy: f64,
}

/// Pretext classification over `classes` with a temporary linear classifier;
/// only the backbone is kept.
pub fn pretrain_backbone(
    arch: &EncoderArch,
    dataset: &Dataset,
    classes: &[usize],
    opts: &PretrainOptions,
    seed: u64,
) -> Result<PretrainOutcome> {
    arch.validate()?;
    opts.optimizer.validate()?;
    if classes.is_empty() {
        return Err(invalid("pretext split is empty"));
    }
    if arch.input_dim != dataset.pixels_per_image() {
        return Err(invalid(format!(
            "arch input {} does not match {} pixels per image",
            arch.input_dim,
            dataset.pixels_per_image()
        )));
    }
    let mut indices = dataset.indices_of(classes);
    if indices.is_empty() {
        return Err(invalid("pretext split has no images"));
    }
    let class_slot = |c: usize| classes.iter().position(|&k| k == c).expect("pretext class");
    let labels: Vec<usize> = indices.iter().map(|&i| class_slot(dataset.images[i].class_id)).collect();
    let label_of: std::collections::HashMap<usize, usize> =
        indices.iter().copied().zip(labels.iter().copied()).collect();

    let mut backbone = Backbone::random(arch, seed)?;
    let mut head_rng = rng::stream(seed, &[purpose::PRETRAIN, 0]);
    let mut classifier = Linear::uniform(arch.last_hidden(), classes.len(), &mut head_rng);
    let n_params = 2 * backbone.layers.len() + 2;
    let mut state = {
        let mut ts: Vec<&Tensor> = Vec::with_capacity(n_params);
        for l in &backbone.layers {
            ts.extend([&l.weight, &l.bias]);
        }
        ts.extend([&classifier.weight, &classifier.bias]);
        AdamState::new(ts)
    };

    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        indices.shuffle(&mut rng::stream(seed, &[purpose::PRETRAIN, 1, epoch as u64]));
        for chunk in indices.chunks(batch) {
            let ys: Vec<usize> = chunk.iter().map(|i| label_of[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(dataset.stack(chunk));
            let mut vars = Vec::with_capacity(n_params);
            let h = backbone.forward(&mut g, x, true, &mut vars)?;
            let (w, b) = classifier.bind(&mut g, true);
            vars.extend([w, b]);
            let logits = Linear::apply(&mut g, h, w, b)?;
            let loss = g.softmax_cross_entropy(logits, &ys)?;
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| g.grad(v).expect("parameter grad").clone())
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(n_params);
            for l in &mut backbone.layers {
                params.push(&mut l.weight);
                params.push(&mut l.bias);
            }
            params.push(&mut classifier.weight);
            params.push(&mut classifier.bias);
            adam_step(&opts.optimizer, &mut params, &grad_refs, &mut state)?;
        }
    }

    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let mut g = Graph::new();
        let x = g.constant(dataset.stack(chunk));
        let mut vars = Vec::new();
        let h = backbone.forward(&mut g, x, false, &mut vars)?;
        let (w, b) = classifier.bind(&mut g, false);
        let logits = Linear::apply(&mut g, h, w, b)?;
        let lt = g.value(logits);
        for (r, i) in chunk.iter().enumerate() {
            let row = lt.row(r);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("non-empty row");
            correct += usize::from(pred == label_of[i]);
        }
    }
    Ok(PretrainOutcome {
        backbone,
        train_accuracy: correct as f64 / indices.len() as f64,
    })
}

/// How projection-head seeds are assigned across a cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSeeding {
    /// Member `l` uses `base + l`.
    PerMember,
    /// Every member uses `base`.
    Shared,
}

/// Builds initial parameters for every member of `archs`.
///
/// With `shared_backbone`, member `l` copies the pretrained backbone whose
/// hidden layout matches its arch; otherwise each backbone is freshly
/// initialized from `head_seed_base + l`.
pub fn init_cohort_params(
    archs: &[EncoderArch],
    pretrained: &[Backbone],
    head_seed_base: u64,
    seeding: HeadSeeding,
    shared_backbone: bool,
) -> Result<Vec<EncoderParams>> {
    if archs.is_empty() {
        return Err(invalid("cohort size must be at least 1"));
    }
    archs
        .iter()
        .enumerate()
        .map(|(l, arch)| {
            arch.validate()?;
            let backbone = if shared_backbone {
                pretrained
                    .iter()
                    .find(|b| b.matches(arch))
                    .cloned()
                    .ok_or_else(|| {
                        invalid(format!(
                            "no pretrained backbone for member {} with hidden layers {:?}",
                            l + 1,
                            arch.hidden_dims
                        ))
                    })?
            } else {
                Backbone::random(arch, head_seed_base.wrapping_add(l as u64))?
            };
            let head_seed = match seeding {
                HeadSeeding::PerMember => head_seed_base.wrapping_add(l as u64),
                HeadSeeding::Shared => head_seed_base,
            };
            Ok(EncoderParams::new(backbone, head_seed, arch.embed_dim))
        })
        .collect()
}
