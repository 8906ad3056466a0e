//! Input corruptions at five severities, for robustness sweeps.
//!
//! Every corruption takes a sample in `[0, 1]` and returns one in `[0, 1]`.
//! Blur and pixelation need the spatial layout of the sample.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GridShape};
use crate::error::{Result, RoddError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::None,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn needs_grid(self) -> bool {
        matches!(self, CorruptionKind::BoxBlur | CorruptionKind::Pixelate)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = RoddError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RoddError::contract(format!("unknown corruption kind `{s}`")))
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const BLUR_KERNEL: [usize; 5] = [3, 3, 5, 7, 9];
const BLUR_PASSES: [usize; 5] = [1, 2, 2, 2, 3];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
const PIXELATE_SCALE: [f64; 5] = [0.9, 0.75, 0.6, 0.45, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(RoddError::contract(format!(
                "severity {severity} outside 1..=5"
            )));
        }
        Ok(CorruptionSpec {
            kind,
            severity,
            seed,
        })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    fn level(&self) -> usize {
        usize::from(self.severity - 1)
    }
}

/// Scalar that grows with corruption strength: noise σ, photon noise
/// variance scale `1/λ`, impulse fraction, blur variance, `1 − contrast`,
/// brightness shift or `1 − pixelation scale`. Zero for `none`.
pub fn strength(kind: CorruptionKind, severity: u8) -> Result<f64> {
    let i = usize::from(CorruptionSpec::new(kind, severity, 0)?.severity - 1);
    Ok(match kind {
        CorruptionKind::None => 0.0,
        CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA[i],
        CorruptionKind::ShotNoise => 1.0 / SHOT_PHOTONS[i],
        CorruptionKind::ImpulseNoise => IMPULSE_FRACTION[i],
        CorruptionKind::BoxBlur => {
            // variance of `passes` stacked uniform windows of width k
            let k = BLUR_KERNEL[i] as f64;
            BLUR_PASSES[i] as f64 * (k * k - 1.0) / 12.0
        }
        CorruptionKind::Contrast => 1.0 - CONTRAST_FACTOR[i],
        CorruptionKind::Brightness => BRIGHTNESS_SHIFT[i],
        CorruptionKind::Pixelate => 1.0 - PIXELATE_SCALE[i],
    })
}

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn grid_for(x: &[f64], grid: Option<GridShape>, kind: CorruptionKind) -> Result<GridShape> {
    let g = grid.ok_or_else(|| {
        RoddError::Shape(format!(
            "{kind} needs a spatial layout; input is a flat vector"
        ))
    })?;
    if g.len() != x.len() {
        return Err(RoddError::Shape(format!(
            "layout {}x{}x{} does not match input length {}",
            g.channels,
            g.height,
            g.width,
            x.len()
        )));
    }
    Ok(g)
}

/// Corrupts one sample; `x` must lie in `[0, 1]`.
pub fn apply_corruption(
    x: &[f64],
    grid: Option<GridShape>,
    spec: &CorruptionSpec,
) -> Result<Vec<f64>> {
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(RoddError::contract(format!(
            "corruption input {v} outside [0, 1]"
        )));
    }
    let i = spec.level();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(match spec.kind {
        CorruptionKind::None => x.to_vec(),
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_SIGMA[i]).expect("positive sigma");
            x.iter()
                .map(|v| clip(v + normal.sample(&mut rng)))
                .collect()
        }
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_PHOTONS[i];
            x.iter()
                .map(|&v| {
                    let rate = v * lambda;
                    if rate <= 0.0 {
                        0.0
                    } else {
                        let counts: f64 =
                            Poisson::new(rate).expect("positive rate").sample(&mut rng);
                        clip(counts / lambda)
                    }
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let mut out = x.to_vec();
            let count = (IMPULSE_FRACTION[i] * x.len() as f64).round() as usize;
            for idx in sample(&mut rng, x.len(), count.min(x.len())) {
                out[idx] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
            out
        }
        CorruptionKind::BoxBlur => {
            let g = grid_for(x, grid, spec.kind)?;
            let mut out = x.to_vec();
            for _ in 0..BLUR_PASSES[i] {
                out = box_blur(&out, g, BLUR_KERNEL[i] / 2);
            }
            out
        }
        CorruptionKind::Contrast => {
            let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
            let c = CONTRAST_FACTOR[i];
            x.iter().map(|v| clip((v - mean) * c + mean)).collect()
        }
        CorruptionKind::Brightness => x.iter().map(|v| clip(v + BRIGHTNESS_SHIFT[i])).collect(),
        CorruptionKind::Pixelate => pixelate(x, grid_for(x, grid, spec.kind)?, PIXELATE_SCALE[i]),
    })
}

/// Mean over a `(2r+1)²` window per channel, shrunk at the borders.
fn box_blur(x: &[f64], g: GridShape, r: usize) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; x.len()];
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
                let mut sum = 0.0;
                for ii in i0..=i1 {
                    sum += plane[ii * w + j0..=ii * w + j1].iter().sum::<f64>();
                }
                out[c * h * w + i * w + j] = sum / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
            }
        }
    }
    out
}

/// Averages over a coarser grid and upsamples by replication.
fn pixelate(x: &[f64], g: GridShape, scale: f64) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let hs = ((h as f64 * scale).round() as usize).max(1);
    let ws = ((w as f64 * scale).round() as usize).max(1);
    let mut out = vec![0.0; x.len()];
    for c in 0..g.channels {
        let base = c * h * w;
        let mut sums = vec![0.0; hs * ws];
        let mut counts = vec![0usize; hs * ws];
        let cell = |i: usize, j: usize| (i * hs / h) * ws + j * ws / w;
        for i in 0..h {
            for j in 0..w {
                sums[cell(i, j)] += x[base + i * w + j];
                counts[cell(i, j)] += 1;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let k = cell(i, j);
                out[base + i * w + j] = sums[k] / counts[k] as f64;
            }
        }
    }
    out
}

/// Corrupts every sample; sample `i` uses seed `spec.seed ^ i`.
pub fn corrupt_dataset(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let n = dataset.len();
    let dim = dataset.input_dim();
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let per_sample = CorruptionSpec {
            seed: spec.seed ^ i as u64,
            ..*spec
        };
        data.extend(apply_corruption(
            dataset.inputs.row(i),
            dataset.grid,
            &per_sample,
        )?);
    }
    let mut out = dataset.clone();
    out.inputs = Matrix::new(n, dim, data)?;
    Ok(out)
}
