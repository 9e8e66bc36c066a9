//! Procedural shape-image dataset, class splits and P×K batch sampling.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeImage {
    /// Row-major `height × width` grayscale values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub class_id: usize,
    pub instance_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Bar,
    ];

    pub fn for_class(class_id: usize) -> Self {
        Self::ALL[class_id % Self::ALL.len()]
    }
}

/// Geometry shared by every image of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub family: ShapeFamily,
    /// Half-extent of the major axis in normalized `[-1, 1]` coordinates.
    pub size: f64,
    /// Minor/major axis ratio.
    pub eccentricity: f64,
    pub stroke: f64,
    pub orientation: f64,
}

impl ClassStyle {
    pub fn sample(seed: u64, class_id: usize) -> Self {
        let mut r = rng::stream(seed, &[purpose::DATA_CLASS, class_id as u64]);
        ClassStyle {
            family: ShapeFamily::for_class(class_id),
            size: r.random_range(0.35..0.75),
            eccentricity: r.random_range(0.4..1.0),
            stroke: r.random_range(0.12..0.32),
            orientation: r.random_range(0.0..PI),
        }
    }

    /// Signed distance (negative inside) at a point in the shape frame.
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let a = self.size;
        let b = self.size * self.eccentricity;
        let half_stroke = 0.5 * self.stroke;
        match self.family {
            ShapeFamily::Ellipse => ellipse_sd(x, y, a, b),
            ShapeFamily::Rectangle => box_sd(x, y, a, b),
            ShapeFamily::Triangle => {
                let verts = [(-a, -b), (a, -b), (0.0, b)];
                let mut sd = f64::NEG_INFINITY;
                for k in 0..3 {
                    let (x0, y0) = verts[k];
                    let (x1, y1) = verts[(k + 1) % 3];
                    let (ex, ey) = (x1 - x0, y1 - y0);
                    let len = (ex * ex + ey * ey).sqrt();
                    // Vertices are counter-clockwise; outward normal is (ey, -ex).
                    let d = ((x - x0) * ey - (y - y0) * ex) / len;
                    sd = sd.max(d);
                }
                sd
            }
            ShapeFamily::Cross => box_sd(x, y, a, half_stroke).min(box_sd(x, y, half_stroke, b)),
            ShapeFamily::Ring => ellipse_sd(x, y, a, b).abs() - half_stroke,
            ShapeFamily::Bar => box_sd(x, y, a, half_stroke),
        }
    }
}

fn ellipse_sd(x: f64, y: f64, a: f64, b: f64) -> f64 {
    let k = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
    (k - 1.0) * a.min(b)
}

fn box_sd(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let qx = x.abs() - hx;
    let qy = y.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Per-instance nuisance parameters.
#[derive(Clone, Copy, Debug)]
struct InstancePose {
    rotation: f64,
    shift_x: f64,
    shift_y: f64,
    scale: f64,
    background: f64,
    foreground: f64,
    /// Mirrored left-right, so every class is flip-invariant.
    mirror: bool,
}

const ROTATION_JITTER: f64 = 0.35;
const SHIFT_JITTER: f64 = 0.15;
// Wide enough to cover the zoom of the crop augmentation.
const SCALE_JITTER: f64 = 0.25;
const PIXEL_NOISE: f64 = 0.03;

pub fn render(style: &ClassStyle, instance_seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut r = rng::stream(instance_seed, &[purpose::DATA_INSTANCE]);
    let pose = InstancePose {
        rotation: style.orientation + r.random_range(-ROTATION_JITTER..ROTATION_JITTER),
        shift_x: r.random_range(-SHIFT_JITTER..SHIFT_JITTER),
        shift_y: r.random_range(-SHIFT_JITTER..SHIFT_JITTER),
        scale: r.random_range(1.0 - SCALE_JITTER..1.0 + SCALE_JITTER),
        background: r.random_range(0.1..0.25),
        foreground: r.random_range(0.7..0.9),
        mirror: r.random_bool(0.5),
    };
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let (sin, cos) = pose.rotation.sin_cos();
    let pixel = 2.0 / width.min(height) as f64;
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let mut u = (col as f64 + 0.5) / width as f64 * 2.0 - 1.0;
            if pose.mirror {
                u = -u;
            }
            u -= pose.shift_x;
            let v = (row as f64 + 0.5) / height as f64 * 2.0 - 1.0 - pose.shift_y;
            let x = (cos * u + sin * v) / pose.scale;
            let y = (-sin * u + cos * v) / pose.scale;
            let sd = style.signed_distance(x, y) * pose.scale;
            let coverage = (0.5 - sd / pixel).clamp(0.0, 1.0);
            let value = pose.background + (pose.foreground - pose.background) * coverage;
            out.push((value + noise.sample(&mut r)).clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<ShapeImage>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_images(height: usize, width: usize, images: Vec<ShapeImage>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image extents must be positive"));
        }
        let n_classes = images.iter().map(|im| im.class_id + 1).max().unwrap_or(0);
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, im) in images.iter().enumerate() {
            if im.pixels.len() != height * width {
                return Err(Error::Format(format!(
                    "image {i} has {} pixels, expected {}",
                    im.pixels.len(),
                    height * width
                )));
            }
            by_class[im.class_id].push(i);
        }
        Ok(Self {
            height,
            width,
            images,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn class_indices(&self, class_id: usize) -> &[usize] {
        self.by_class.get(class_id).map_or(&[], |v| v.as_slice())
    }

    /// All image indices belonging to `classes`, class-major.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&c| self.class_indices(c).iter().copied())
            .collect()
    }

    /// Stacks the selected images into an `n × (H·W)` matrix.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let d = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.images[i].pixels);
        }
        Tensor::new(vec![indices.len(), d], data).expect("consistent image sizes")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.images[i].class_id).collect()
    }

    /// Writes the text snapshot: a `DM2DATA v1 H W n` header, then per image a
    /// `class_id instance_seed` line followed by `H` lines of `W` values.
    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<()> {
        self.write_snapshot_tagged(out, None)
    }

    /// Like [`Dataset::write_snapshot`], with an optional `# config_hash=`
    /// line after the header.
    pub fn write_snapshot_tagged<W: Write>(&self, mut out: W, config_hash: Option<&str>) -> Result<()> {
        writeln!(out, "DM2DATA v1 {} {} {}", self.height, self.width, self.images.len())?;
        if let Some(h) = config_hash {
            writeln!(out, "# config_hash={h}")?;
        }
        for im in &self.images {
            writeln!(out, "{} {}", im.class_id, im.instance_seed)?;
            for row in im.pixels.chunks(self.width) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        Ok(Self::read_snapshot_tagged(input)?.0)
    }

    /// Reads a snapshot and its config hash tag, if any.
    pub fn read_snapshot_tagged<R: BufRead>(input: R) -> Result<(Self, Option<String>)> {
        let mut lines = input.lines().peekable();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty snapshot".into()))??;
        let mut tag = None;
        if let Some(Ok(l)) = lines.peek() {
            if let Some(h) = l.strip_prefix("# config_hash=") {
                tag = Some(h.to_string());
                lines.next();
            }
        }
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("unexpected end of snapshot reading {what}")))?
                .map_err(Error::from)
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "DM2DATA" || fields[1] != "v1" {
            return Err(Error::Format(format!("bad snapshot header: {header:?}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer {s:?} in header")))
        };
        let (height, width, n) = (parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            let meta = next("image header")?;
            let mut it = meta.split_whitespace();
            let class_id = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("image {i}: bad class id")))?;
            let instance_seed = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("image {i}: bad instance seed")))?;
            let mut pixels = Vec::with_capacity(height * width);
            for _ in 0..height {
                let row = next("pixel row")?;
                let before = pixels.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Format(format!("image {i}: bad pixel {tok:?}")))?;
                    pixels.push(v);
                }
                if pixels.len() - before != width {
                    return Err(Error::Format(format!("image {i}: row has wrong width")));
                }
            }
            images.push(ShapeImage {
                pixels,
                class_id,
                instance_seed,
            });
        }
        Ok((Self::from_images(height, width, images)?, tag))
    }
}

pub fn generate_dataset(n_classes: usize, images_per_class: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_sized(n_classes, images_per_class, seed, DEFAULT_SIZE, DEFAULT_SIZE)
}

pub fn generate_dataset_sized(
    n_classes: usize,
    images_per_class: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    if n_classes < 4 {
        return Err(invalid(format!("need at least 4 classes, got {n_classes}")));
    }
    if images_per_class < 6 {
        return Err(invalid(format!(
            "need at least 6 images per class, got {images_per_class}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(invalid("image extents must be positive"));
    }
    let mut images = Vec::with_capacity(n_classes * images_per_class);
    for class_id in 0..n_classes {
        let style = ClassStyle::sample(seed, class_id);
        for k in 0..images_per_class {
            let instance_seed = rng::derive(seed, &[purpose::DATA_INSTANCE, class_id as u64, k as u64]);
            images.push(ShapeImage {
                pixels: render(&style, instance_seed, height, width),
                class_id,
                instance_seed,
            });
        }
    }
    Dataset::from_images(height, width, images)
}

/// Pairwise-disjoint class sets for pretext pretraining, metric training and
/// zero-shot testing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub pretext_classes: Vec<usize>,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub images_per_class: usize,
}

pub fn make_splits(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    let (fp, ft, fe) = fractions;
    if !(fp > 0.0 && ft > 0.0 && fe > 0.0) || ((fp + ft + fe) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.n_classes();
    let n_pre = (fp * n as f64).round() as usize;
    let n_train = (ft * n as f64).round() as usize;
    let n_test = n.saturating_sub(n_pre + n_train);
    if n_pre < 2 || n_train < 2 || n_test < 2 {
        return Err(invalid(format!(
            "{n} classes give split sizes {n_pre}/{n_train}/{n_test}; each needs at least 2"
        )));
    }
    let mut classes: Vec<usize> = (0..n).collect();
    classes.shuffle(&mut rng::stream(seed, &[purpose::SPLIT]));
    let mut pretext = classes[..n_pre].to_vec();
    let mut train = classes[n_pre..n_pre + n_train].to_vec();
    let mut test = classes[n_pre + n_train..].to_vec();
    pretext.sort_unstable();
    train.sort_unstable();
    test.sort_unstable();
    let images_per_class = (0..n).map(|c| dataset.class_indices(c).len()).min().unwrap_or(0);
    Ok(SplitSpec {
        pretext_classes: pretext,
        train_classes: train,
        test_classes: test,
        images_per_class,
    })
}

/// Image indices and labels of one P×K mini-batch, class-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `classes_per_batch` distinct classes uniformly from `classes`, then
/// `per_class` distinct images of each.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes: &[usize],
    classes_per_batch: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<Batch> {
    if classes_per_batch == 0 || per_class == 0 {
        return Err(invalid("P and K must be positive"));
    }
    let eligible: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|&c| dataset.class_indices(c).len() >= per_class)
        .collect();
    if eligible.len() < classes_per_batch {
        return Err(invalid(format!(
            "only {} classes have {per_class} images; batch needs {classes_per_batch}",
            eligible.len()
        )));
    }
    let mut indices = Vec::with_capacity(classes_per_batch * per_class);
    let mut labels = Vec::with_capacity(classes_per_batch * per_class);
    for ci in index::sample(rng, eligible.len(), classes_per_batch) {
        let class = eligible[ci];
        let members = dataset.class_indices(class);
        for ii in index::sample(rng, members.len(), per_class) {
            indices.push(members[ii]);
            labels.push(class);
        }
    }
    Ok(Batch { indices, labels })
}
