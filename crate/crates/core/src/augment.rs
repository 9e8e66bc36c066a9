//! The augmentation family used for view diversity: random crop with
//! bilinear resize back to full size, horizontal flip, additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    /// Range of the kept fraction of each side before resizing back.
    pub crop_fraction_range: (f64, f64),
    pub horizontal_flip_prob: f64,
    pub gaussian_noise_sigma: f64,
    /// Disables every transform; sampling always yields the identity.
    pub identity_only: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_fraction_range: (0.8, 1.0),
            horizontal_flip_prob: 0.5,
            gaussian_noise_sigma: 0.05,
            identity_only: false,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            identity_only: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid(format!("crop fraction range {lo}..{hi} must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(invalid("flip probability must lie in [0, 1]"));
        }
        if !(self.gaussian_noise_sigma >= 0.0 && self.gaussian_noise_sigma.is_finite()) {
            return Err(invalid("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        if self.identity_only {
            return Transform::identity();
        }
        let (lo, hi) = self.crop_fraction_range;
        let frac = |r: &mut R| if hi > lo { r.random_range(lo..=hi) } else { lo };
        let fw = frac(rng);
        let fh = frac(rng);
        let crop = if fw < 1.0 || fh < 1.0 {
            let x0 = rng.random_range(0.0..=1.0 - fw);
            let y0 = rng.random_range(0.0..=1.0 - fh);
            Some(Crop { x0, y0, w: fw, h: fh })
        } else {
            None
        };
        let flip = rng.random_bool(self.horizontal_flip_prob);
        let noise_seed = rng.random();
        Transform {
            crop,
            flip,
            noise_sigma: self.gaussian_noise_sigma,
            noise_seed,
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transform> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Crop window in fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

/// A fully sampled augmentation. Applying it is a pure function of the
/// stored parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub crop: Option<Crop>,
    pub flip: bool,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip: false,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop.is_none() && !self.flip && self.noise_sigma == 0.0
    }

    pub fn apply(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        if self.is_identity() {
            return image.to_vec();
        }
        let mut out = match self.crop {
            Some(c) => crop_resize(image, height, width, c),
            None => image.to_vec(),
        };
        if self.flip {
            for row in out.chunks_mut(width) {
                row.reverse();
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            let mut r = rng::stream(self.noise_seed, &[purpose::NOISE]);
            for v in &mut out {
                *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
        out
    }
}

fn crop_resize(image: &[f64], height: usize, width: usize, c: Crop) -> Vec<f64> {
    let at = |y: usize, x: usize| image[y * width + x];
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        // Pixel centers of the output grid mapped into the crop window.
        let fy = (c.y0 + (row as f64 + 0.5) / height as f64 * c.h) * height as f64 - 0.5;
        let fy = fy.clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ty = fy - y0 as f64;
        for col in 0..width {
            let fx = (c.x0 + (col as f64 + 0.5) / width as f64 * c.w) * width as f64 - 0.5;
            let fx = fx.clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let tx = fx - x0 as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    out
}
