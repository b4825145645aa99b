//! Weak and strong stochastic views.
//!
//! Vector rows get Gaussian noise scaled by each feature's standard
//! deviation; the strong policy adds feature dropout and a global scale
//! jitter on top. Image rows get flip/shift as the weak view and two ops drawn
//! from a small pool (shift, cutout, contrast, brightness, flip) as the strong
//! view.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::ImageGeom;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Weak noise, in units of per-feature standard deviation.
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout: f64,
    pub strong_scale_lo: f64,
    pub strong_scale_hi: f64,
    pub image_n_ops: usize,
    /// Image op magnitude in `[0, 1]`.
    pub image_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_sigma: 0.05,
            strong_sigma: 0.2,
            strong_dropout: 0.1,
            strong_scale_lo: 0.8,
            strong_scale_hi: 1.2,
            image_n_ops: 2,
            image_magnitude: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(self.weak_sigma >= 0.0 && self.strong_sigma >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.strong_dropout) {
            return bad("dropout must lie in [0, 1]");
        }
        if !(self.strong_scale_lo > 0.0 && self.strong_scale_lo <= self.strong_scale_hi) {
            return bad("scale range must satisfy 0 < lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.image_magnitude) {
            return bad("image magnitude must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Weak,
    Strong,
}

/// A ready-to-apply augmentation for one data domain.
#[derive(Clone, Debug)]
pub struct AugmentPolicy {
    kind: PolicyKind,
    config: AugmentConfig,
    feature_std: Vec<f64>,
    image: Option<ImageGeom>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ImageOp {
    Shift,
    Cutout,
    Contrast,
    Brightness,
    Flip,
}

const IMAGE_OPS: [ImageOp; 5] = [
    ImageOp::Shift,
    ImageOp::Cutout,
    ImageOp::Contrast,
    ImageOp::Brightness,
    ImageOp::Flip,
];

impl AugmentPolicy {
    pub fn new(kind: PolicyKind, config: &AugmentConfig, feature_std: &[f64], image: Option<ImageGeom>) -> Result<Self> {
        config.validate()?;
        if let Some(g) = image {
            if g.len() != feature_std.len() {
                return Err(Error::Dimension(format!(
                    "image {g:?} vs {} features",
                    feature_std.len()
                )));
            }
        }
        Ok(AugmentPolicy {
            kind,
            config: config.clone(),
            feature_std: feature_std.to_vec(),
            image,
        })
    }

    pub fn weak(config: &AugmentConfig, feature_std: &[f64], image: Option<ImageGeom>) -> Result<Self> {
        AugmentPolicy::new(PolicyKind::Weak, config, feature_std, image)
    }

    pub fn strong(config: &AugmentConfig, feature_std: &[f64], image: Option<ImageGeom>) -> Result<Self> {
        AugmentPolicy::new(PolicyKind::Strong, config, feature_std, image)
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// Augments one example row into `out` (same length).
    pub fn apply_into<R: Rng + ?Sized>(&self, x: &[f64], out: &mut [f64], rng: &mut R) {
        out.copy_from_slice(x);
        match (self.kind, self.image) {
            (PolicyKind::Weak, None) => self.weak_vector(out, rng),
            (PolicyKind::Strong, None) => self.strong_vector(out, rng),
            (PolicyKind::Weak, Some(g)) => weak_image(out, g, rng),
            (PolicyKind::Strong, Some(g)) => self.strong_image(out, g, rng),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out, rng);
        out
    }

    fn add_noise<R: Rng + ?Sized>(&self, out: &mut [f64], sigma: f64, rng: &mut R) {
        if sigma == 0.0 {
            return;
        }
        for (v, s) in out.iter_mut().zip(&self.feature_std) {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma * s * e;
        }
    }

    fn weak_vector<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        self.add_noise(out, self.config.weak_sigma, rng);
    }

    fn strong_vector<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        let c = &self.config;
        if c.strong_dropout > 0.0 {
            for v in out.iter_mut() {
                if rng.random::<f64>() < c.strong_dropout {
                    *v = 0.0;
                }
            }
        }
        if c.strong_scale_hi > c.strong_scale_lo {
            let s = rng.random_range(c.strong_scale_lo..c.strong_scale_hi);
            for v in out.iter_mut() {
                *v *= s;
            }
        } else if c.strong_scale_lo != 1.0 {
            for v in out.iter_mut() {
                *v *= c.strong_scale_lo;
            }
        }
        self.add_noise(out, c.strong_sigma, rng);
    }

    fn strong_image<R: Rng + ?Sized>(&self, out: &mut [f64], g: ImageGeom, rng: &mut R) {
        let m = self.config.image_magnitude;
        if m == 0.0 {
            return;
        }
        for _ in 0..self.config.image_n_ops {
            let op = *IMAGE_OPS.choose(rng).expect("op pool is non-empty");
            match op {
                ImageOp::Shift => {
                    let max = ((0.3 * m * g.width as f64).round() as i64).max(1);
                    let dy = rng.random_range(-max..=max);
                    let dx = rng.random_range(-max..=max);
                    shift(out, g, dy, dx);
                }
                ImageOp::Cutout => {
                    let side = ((0.5 * m * g.width.min(g.height) as f64).round() as usize).max(1);
                    let cy = rng.random_range(0..g.height);
                    let cx = rng.random_range(0..g.width);
                    cutout(out, g, cy, cx, side);
                }
                ImageOp::Contrast => {
                    let f = rng.random_range(1.0 - m..=1.0 + m);
                    for ch in 0..g.channels {
                        let plane = &mut out[ch * g.height * g.width..(ch + 1) * g.height * g.width];
                        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                        for v in plane.iter_mut() {
                            *v = mean + (*v - mean) * f;
                        }
                    }
                }
                ImageOp::Brightness => {
                    let d = rng.random_range(-m..=m);
                    for (v, s) in out.iter_mut().zip(&self.feature_std) {
                        *v += d * s;
                    }
                }
                ImageOp::Flip => {
                    if rng.random::<f64>() < m {
                        flip_horizontal(out, g);
                    }
                }
            }
        }
    }
}

fn weak_image<R: Rng + ?Sized>(out: &mut [f64], g: ImageGeom, rng: &mut R) {
    if rng.random::<f64>() < 0.5 {
        flip_horizontal(out, g);
    }
    let max = (0.125 * g.width as f64).floor() as i64;
    if max > 0 {
        let dy = rng.random_range(-max..=max);
        let dx = rng.random_range(-max..=max);
        shift(out, g, dy, dx);
    }
}

fn flip_horizontal(img: &mut [f64], g: ImageGeom) {
    for row in img.chunks_mut(g.width) {
        row.reverse();
    }
}

/// Translates every channel by `(dy, dx)` pixels, filling with zeros.
fn shift(img: &mut [f64], g: ImageGeom, dy: i64, dx: i64) {
    if dy == 0 && dx == 0 {
        return;
    }
    let src = img.to_vec();
    let (h, w) = (g.height as i64, g.width as i64);
    for ch in 0..g.channels {
        let base = ch * g.height * g.width;
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y - dy, x - dx);
                img[base + (y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                    src[base + (sy * w + sx) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn cutout(img: &mut [f64], g: ImageGeom, cy: usize, cx: usize, side: usize) {
    let half = side / 2;
    let (y0, x0) = (cy.saturating_sub(half), cx.saturating_sub(half));
    let (y1, x1) = ((y0 + side).min(g.height), (x0 + side).min(g.width));
    for ch in 0..g.channels {
        for y in y0..y1 {
            for x in x0..x1 {
                img[(ch * g.height + y) * g.width + x] = 0.0;
            }
        }
    }
}
