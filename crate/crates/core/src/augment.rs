//! Randomized nine-stage post-processing for domain randomization.
//!
//! With probability `outer_gate_prob` the pipeline runs at all. If it does, the
//! nine stages are shuffled and each runs with probability `stage_prob`. Every
//! stage reads the output of the previous one, sees `max` recomputed from its
//! input, and its output is clamped at zero.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drr::Image;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Smoothing,
    Offset,
    LinearScaling,
    Renormalization,
    PixelwiseOffset,
    SaltAndPepper,
    GaussianNoise,
    PoissonNoise,
    NonlinearScaling,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Smoothing,
        Stage::Offset,
        Stage::LinearScaling,
        Stage::Renormalization,
        Stage::PixelwiseOffset,
        Stage::SaltAndPepper,
        Stage::GaussianNoise,
        Stage::PoissonNoise,
        Stage::NonlinearScaling,
    ];
}

/// Intervals are `[lo, hi]`; entries suffixed `_frac` are multiples of the
/// current image maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub outer_gate_prob: f64,
    pub stage_prob: f64,
    pub smoothing_kernels: [usize; 2],
    pub offset_frac: [f64; 2],
    pub linear_scale: [f64; 2],
    pub renorm_lo_frac: [f64; 2],
    pub renorm_hi_frac: [f64; 2],
    pub pixel_offset_ab: [f64; 2],
    pub pixel_offset_c: [f64; 2],
    pub salt_pepper_frac: [f64; 2],
    pub gaussian_mean_frac: [f64; 2],
    pub gaussian_std_frac: f64,
    pub poisson_scale: f64,
    pub nonlinear_scale_ab: [f64; 2],
    pub nonlinear_scale_c: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            outer_gate_prob: 0.5,
            stage_prob: 0.5,
            smoothing_kernels: [3, 5],
            offset_frac: [-0.2, 0.15],
            linear_scale: [0.8, 1.15],
            renorm_lo_frac: [-0.04, 0.02],
            renorm_hi_frac: [0.9, 1.05],
            pixel_offset_ab: [0.9, 1.05],
            pixel_offset_c: [-0.4, 0.4],
            salt_pepper_frac: [0.02, 0.04],
            gaussian_mean_frac: [-0.15, 0.1],
            gaussian_std_frac: 0.05,
            poisson_scale: 255.0,
            nonlinear_scale_ab: [0.8, 1.1],
            nonlinear_scale_c: [-0.5, 0.5],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(AugmentError::InvalidConfig(format!("{name} = {p} not in [0, 1]")))
            }
        };
        prob("outer_gate_prob", self.outer_gate_prob)?;
        prob("stage_prob", self.stage_prob)?;
        for (name, r) in [
            ("offset_frac", self.offset_frac),
            ("linear_scale", self.linear_scale),
            ("renorm_lo_frac", self.renorm_lo_frac),
            ("renorm_hi_frac", self.renorm_hi_frac),
            ("pixel_offset_ab", self.pixel_offset_ab),
            ("pixel_offset_c", self.pixel_offset_c),
            ("salt_pepper_frac", self.salt_pepper_frac),
            ("gaussian_mean_frac", self.gaussian_mean_frac),
            ("nonlinear_scale_ab", self.nonlinear_scale_ab),
            ("nonlinear_scale_c", self.nonlinear_scale_c),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(AugmentError::InvalidConfig(format!("{name} = {r:?} is not ordered")));
            }
        }
        if self.renorm_lo_frac[1] >= self.renorm_hi_frac[0] {
            return Err(AugmentError::InvalidConfig(
                "renormalization bounds overlap".into(),
            ));
        }
        if self.smoothing_kernels.iter().any(|k| k % 2 == 0 || *k == 0) {
            return Err(AugmentError::InvalidConfig("smoothing kernels must be odd".into()));
        }
        if !(self.gaussian_std_frac >= 0.0 && self.poisson_scale > 0.0) {
            return Err(AugmentError::InvalidConfig("noise parameters".into()));
        }
        Ok(())
    }
}

/// What a run of [`augment_traced`] did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentTrace {
    pub gated_on: bool,
    /// Stage order drawn for this run (empty when gated off).
    pub order: Vec<Stage>,
    /// Stages actually applied, in order.
    pub applied: Vec<Stage>,
}

pub fn augment(img: &Image, cfg: &AugmentConfig, seed: u64) -> Image {
    augment_traced(img, cfg, seed, |_, _| {}).0
}

/// Runs the pipeline and calls `hook` after every applied stage.
pub fn augment_traced(
    img: &Image,
    cfg: &AugmentConfig,
    seed: u64,
    mut hook: impl FnMut(Stage, &Image),
) -> (Image, AugmentTrace) {
    let mut g = rng::stream(seed, &[rng::tag_str("augment")]);
    let mut trace = AugmentTrace::default();
    let mut out = img.clone();
    if g.random::<f64>() >= cfg.outer_gate_prob {
        return (out, trace);
    }
    trace.gated_on = true;
    let mut order = Stage::ALL.to_vec();
    order.shuffle(&mut g);
    trace.order = order.clone();
    for stage in order {
        if g.random::<f64>() >= cfg.stage_prob {
            continue;
        }
        apply_stage(stage, &mut out, cfg, &mut g);
        out.data.iter_mut().for_each(|x| {
            if !(*x > 0.0) {
                *x = 0.0;
            }
        });
        trace.applied.push(stage);
        hook(stage, &out);
    }
    (out, trace)
}

fn uniform(g: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        g.random_range(r[0]..r[1])
    }
}

fn apply_stage(stage: Stage, img: &mut Image, cfg: &AugmentConfig, g: &mut ChaCha8Rng) {
    let max = img.max();
    match stage {
        Stage::Smoothing => {
            let k = if g.random::<bool>() {
                cfg.smoothing_kernels[0]
            } else {
                cfg.smoothing_kernels[1]
            };
            box_filter(img, k / 2);
        }
        Stage::Offset => {
            let o = uniform(g, [cfg.offset_frac[0] * max, cfg.offset_frac[1] * max]);
            img.data.iter_mut().for_each(|x| *x += o);
        }
        Stage::LinearScaling => {
            let s = uniform(g, cfg.linear_scale);
            img.data.iter_mut().for_each(|x| *x *= s);
        }
        Stage::Renormalization => {
            let lo = uniform(g, [cfg.renorm_lo_frac[0] * max, cfg.renorm_lo_frac[1] * max]);
            let hi = uniform(g, [cfg.renorm_hi_frac[0] * max, cfg.renorm_hi_frac[1] * max]);
            if hi > lo {
                img.data
                    .iter_mut()
                    .for_each(|x| *x = (*x - lo) / (hi - lo) * max);
            }
        }
        Stage::PixelwiseOffset => {
            let a = uniform(g, cfg.pixel_offset_ab);
            let b = uniform(g, cfg.pixel_offset_ab);
            let c = uniform(g, cfg.pixel_offset_c);
            img.data
                .iter_mut()
                .for_each(|x| *x += a * (b * *x + c).sin());
        }
        Stage::SaltAndPepper => {
            let n_px = img.num_pixels();
            let frac = uniform(g, cfg.salt_pepper_frac);
            let n = (frac * n_px as f64) as usize;
            for _ in 0..n {
                let i = g.random_range(0..n_px);
                img.data[i] = if g.random::<bool>() { max } else { 0.0 };
            }
        }
        Stage::GaussianNoise => {
            let mean = uniform(g, [cfg.gaussian_mean_frac[0] * max, cfg.gaussian_mean_frac[1] * max]);
            let std = cfg.gaussian_std_frac * max.max(0.0);
            if std > 0.0 {
                let n = Normal::new(mean, std).expect("finite std");
                img.data.iter_mut().for_each(|x| *x += n.sample(g));
            } else {
                img.data.iter_mut().for_each(|x| *x += mean);
            }
        }
        Stage::PoissonNoise => {
            let s = cfg.poisson_scale;
            img.data.iter_mut().for_each(|x| {
                let lambda = *x * s;
                *x = if lambda > 0.0 && lambda.is_finite() {
                    Poisson::new(lambda).expect("positive rate").sample(g) / s
                } else {
                    0.0
                };
            });
        }
        Stage::NonlinearScaling => {
            let a = uniform(g, cfg.nonlinear_scale_ab);
            let b = uniform(g, cfg.nonlinear_scale_ab);
            let c = uniform(g, cfg.nonlinear_scale_c);
            img.data
                .iter_mut()
                .for_each(|x| *x *= a * (b * *x + c).sin());
        }
    }
}

/// Separable box filter of radius `r` with edge replication.
fn box_filter(img: &mut Image, r: usize) {
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    let norm = (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * r {
                let xx = (x + d).saturating_sub(r).min(w - 1);
                s += img.data[y * w + xx];
            }
            tmp[y * w + x] = s / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * r {
                let yy = (y + d).saturating_sub(r).min(h - 1);
                s += tmp[yy * w + x];
            }
            img.data[y * w + x] = s / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|i| (i % w) as f64 / w as f64 + 0.1).collect())
    }

    #[test]
    fn gate_off_is_identity() {
        let img = gradient(16, 16);
        let cfg = AugmentConfig {
            outer_gate_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..50 {
            assert_eq!(augment(&img, &cfg, seed), img);
        }
    }

    #[test]
    fn deterministic_and_non_negative() {
        let img = gradient(24, 20);
        let cfg = AugmentConfig {
            outer_gate_prob: 1.0,
            stage_prob: 1.0,
            ..Default::default()
        };
        for seed in 0..40 {
            let a = augment(&img, &cfg, seed);
            let b = augment(&img, &cfg, seed);
            assert_eq!(a, b);
            let (_, trace) = augment_traced(&img, &cfg, seed, |stage, im| {
                assert!(im.data.iter().all(|&x| x >= 0.0), "{stage:?} left negatives");
            });
            assert_eq!(trace.applied.len(), 9);
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let mut img = Image::filled(9, 7, 0.37);
        box_filter(&mut img, 1);
        assert!(img.data.iter().all(|&x| (x - 0.37).abs() < 1e-15));
        box_filter(&mut img, 2);
        assert!(img.data.iter().all(|&x| (x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn single_stage_behaviour() {
        let img = gradient(16, 16);
        let mut g = rng::stream(1, &[]);
        let cfg = AugmentConfig::default();
        let mut lin = img.clone();
        apply_stage(Stage::LinearScaling, &mut lin, &cfg, &mut g);
        let ratio = lin.data[5] / img.data[5];
        assert!((0.8..1.15).contains(&ratio));
        assert!(lin.data.iter().zip(&img.data).all(|(a, b)| (a / b - ratio).abs() < 1e-12));

        let mut renorm = img.clone();
        apply_stage(Stage::Renormalization, &mut renorm, &cfg, &mut g);
        // affine map preserves order
        assert!(renorm.data.windows(2).take(15).all(|w| w[0] < w[1]));

        let mut sp = img.clone();
        let max = sp.max();
        apply_stage(Stage::SaltAndPepper, &mut sp, &cfg, &mut g);
        let changed = sp.data.iter().zip(&img.data).filter(|(a, b)| a != b).count();
        assert!(changed <= (0.04 * 256.0) as usize);
        assert!(sp.data.iter().zip(&img.data).all(|(a, b)| a == b || *a == 0.0 || *a == max));
    }

    #[test]
    fn invalid_config_is_reported() {
        let mut cfg = AugmentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.stage_prob = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            linear_scale: [1.2, 0.8],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
