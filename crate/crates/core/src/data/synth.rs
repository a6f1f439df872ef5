//! Synthetic paired-modality fingerprints.
//!
//! An identity is a smooth phase field: a plane wave at the identity's ridge
//! frequency, bent by two quadratic terms and wound once around a core point.
//! Renders evaluate that field at geometrically perturbed coordinates, so warps
//! need no resampling. Contact-based renders are high contrast with a mild
//! elastic jitter; contactless renders have lower contrast, a small perspective
//! warp, Gaussian blur and additive noise.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Image, Modality, Rotation, Sample, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_key, keyed_rng};

pub const MIN_FREQUENCY: f64 = 0.05;
pub const MAX_FREQUENCY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityParams {
    /// Ridge frequency in cycles per pixel.
    pub frequency: f64,
    /// Base ridge-normal angle (radians) and two curvature coefficients.
    pub orientation: [f64; 3],
    /// Core position as a fraction of the image side, `(x, y)` in `[0.3, 0.7]²`.
    pub core: (f64, f64),
    /// Winding of the phase around the core, `±1`.
    pub winding: f64,
    pub phase: f64,
    pub seed: u64,
}

impl IdentityParams {
    /// Core position in pixels for a `height×width` render.
    pub fn core_px(&self, height: usize, width: usize) -> (f64, f64) {
        (self.core.0 * width as f64, self.core.1 * height as f64)
    }

    fn phase_at(&self, x: f64, y: f64, height: usize, width: usize) -> f64 {
        let (cx, cy) = self.core_px(height, width);
        let side = height.min(width) as f64;
        let (u, v) = (x - cx, y - cy);
        let [theta, c1, c2] = self.orientation;
        2.0 * PI * self.frequency * (u * theta.cos() + v * theta.sin())
            + c1 * (u * u - v * v) / side
            + c2 * u * v / side
            + self.winding * v.atan2(u)
            + self.phase
    }
}

/// Deterministic identity parameters for `identity_seed`.
pub fn synth_identity(identity_seed: u64) -> IdentityParams {
    let mut rng = keyed_rng(identity_seed, "identity", &[]);
    IdentityParams {
        frequency: rng.random_range(MIN_FREQUENCY..=MAX_FREQUENCY),
        orientation: [
            rng.random_range(0.0..PI),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        ],
        core: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
        winding: if rng.random::<bool>() { 1.0 } else { -1.0 },
        phase: rng.random_range(0.0..2.0 * PI),
        seed: identity_seed,
    }
}

fn gaussian_blur(pixels: &mut [f64], height: usize, width: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * pixels[r * width + tap(c as isize + k as isize - radius, width)])
                .sum::<f64>()
                / norm;
        }
    }
    for r in 0..height {
        for c in 0..width {
            pixels[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[tap(r as isize + k as isize - radius, height) * width + c])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Renders one 8-bit-quantized `height×width` impression.
pub fn render_fingerprint(
    id: &IdentityParams,
    modality: Modality,
    sample_seed: u64,
    height: usize,
    width: usize,
) -> Image {
    let mut rng = keyed_rng(id.seed, modality.as_str(), &[sample_seed]);
    let side = height.min(width) as f64;
    let (mx, my) = (width as f64 / 2.0, height as f64 / 2.0);
    let tx = rng.random_range(-1.0..1.0);
    let ty = rng.random_range(-1.0..1.0);
    let mut values = vec![0.0f64; height * width];
    match modality {
        Modality::Cb => {
            let amp = rng.random_range(0.0..0.6);
            let (w1, w2) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
            let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for r in 0..height {
                for c in 0..width {
                    let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                    let xs = x + tx + amp * (2.0 * PI * w1 * y / side + p1).sin();
                    let ys = y + ty + amp * (2.0 * PI * w2 * x / side + p2).sin();
                    values[r * width + c] = 0.5 + 0.48 * id.phase_at(xs, ys, height, width).cos();
                }
            }
        }
        Modality::Cl => {
            let mut a = [0.0; 4];
            for v in &mut a {
                *v = rng.random_range(-0.04..0.04);
            }
            let persp = (
                rng.random_range(-0.06..0.06) / side,
                rng.random_range(-0.06..0.06) / side,
            );
            let contrast = rng.random_range(0.18..0.26);
            let sigma = rng.random_range(0.5..0.9);
            for r in 0..height {
                for c in 0..width {
                    let (x, y) = (c as f64 + 0.5 - mx, r as f64 + 0.5 - my);
                    let w = 1.0 + persp.0 * x + persp.1 * y;
                    let xs = ((1.0 + a[0]) * x + a[1] * y + tx) / w + mx;
                    let ys = (a[2] * x + (1.0 + a[3]) * y + ty) / w + my;
                    values[r * width + c] = 0.5 + contrast * id.phase_at(xs, ys, height, width).cos();
                }
            }
            gaussian_blur(&mut values, height, width, sigma);
            let noise = Normal::new(0.0, 0.03).expect("valid std");
            for v in &mut values {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Image::from_fn(height, width, |r, c| values[r * width + c].clamp(0.0, 1.0) as f32).quantized()
}

/// `(max − min) / (max + min)` over all pixels.
pub fn michelson_contrast(image: &Image) -> f64 {
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    if hi + lo == 0.0 {
        0.0
    } else {
        (hi - lo) / (hi + lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// The last `test_identities` identities form the test split.
    pub test_identities: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            samples_per_modality: 4,
            height: 32,
            width: 32,
            seed: 0,
            test_identities: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.samples_per_modality == 0 {
            return Err(Error::Config("samples per modality must be positive".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "image size {}x{} is too small",
                self.height, self.width
            )));
        }
        if self.test_identities > self.identities {
            return Err(Error::Config(format!(
                "{} test identities out of {}",
                self.test_identities, self.identities
            )));
        }
        Ok(())
    }
}

/// Samples (with paths relative to the corpus root) and their rendered images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub samples: Vec<Sample>,
    pub images: Vec<Image>,
}

/// Renders `identities × samples_per_modality × 2` images; identity `i` is
/// subject `i / 2`, finger `i % 2`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut jobs = Vec::new();
    for i in 0..cfg.identities {
        let params = synth_identity(derive_key(cfg.seed, "identity", &[i as u64]));
        let subject_id = format!("{:03}", i / 2);
        let finger_id = (i % 2).to_string();
        let split = if i >= cfg.identities - cfg.test_identities {
            Split::Test
        } else {
            Split::Train
        };
        for modality in [Modality::Cl, Modality::Cb] {
            for k in 0..cfg.samples_per_modality {
                samples.push(Sample {
                    image_path: PathBuf::from(format!("images/{subject_id}_{finger_id}_{modality}_{k}.png")),
                    subject_id: subject_id.clone(),
                    finger_id: finger_id.clone(),
                    modality,
                    split,
                    rotation: Rotation::NONE,
                });
                jobs.push((params, modality, k as u64));
            }
        }
    }
    let images = jobs
        .par_iter()
        .map(|(p, m, k)| render_fingerprint(p, *m, *k, cfg.height, cfg.width))
        .collect();
    Ok(SynthCorpus { samples, images })
}
