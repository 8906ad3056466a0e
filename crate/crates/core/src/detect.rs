//! Post-training OOD scoring: per-class first singular vectors, the
//! minimum-angle uncertainty score, a training-quantile threshold and
//! Monte-Carlo inference over input augmentations.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{augment, AugmentationSpec};
use crate::encoder::{log_softmax_parts, EncoderModel, MIN_FEATURE_NORM};
use crate::error::{Result, RoddError};
use crate::linalg::{dot, norm, svd, Matrix};

pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const DEFAULT_MC_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSubspaceSet {
    /// One unit direction per class.
    pub directions: Vec<Vec<f64>>,
    /// Scores at or below this angle count as in-distribution.
    pub threshold: f64,
    pub quantile_used: f64,
    /// Score against lines (`|cos|`) instead of rays.
    #[serde(default)]
    pub absolute_cosine: bool,
}

impl ClassSubspaceSet {
    pub fn classes(&self) -> usize {
        self.directions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| RoddError::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Smallest `k/n ≥ q` order statistic of `scores` (higher-interpolation quantile).
pub fn empirical_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(RoddError::contract("quantile of an empty set"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(RoddError::contract("quantile must lie in (0, 1)"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let k = (1..=sorted.len())
        .find(|&k| k as f64 / n >= q)
        .unwrap_or(sorted.len());
    Ok(sorted[k - 1])
}

/// Fits one direction per class (the dominant right singular vector of the
/// class feature matrix, oriented so the mean projection is nonnegative) and
/// sets the threshold to the `quantile` of the training scores.
pub fn fit_subspaces(
    features: &Matrix,
    labels: &[usize],
    class_count: usize,
    quantile: f64,
) -> Result<ClassSubspaceSet> {
    fit_subspaces_with(features, labels, class_count, quantile, false)
}

pub fn fit_subspaces_with(
    features: &Matrix,
    labels: &[usize],
    class_count: usize,
    quantile: f64,
    absolute_cosine: bool,
) -> Result<ClassSubspaceSet> {
    if labels.len() != features.rows() {
        return Err(RoddError::contract("one label per feature row required"));
    }
    if !features.is_finite() {
        return Err(RoddError::contract("features must be finite"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
        return Err(RoddError::contract(format!(
            "label {l} outside {class_count} classes"
        )));
    }
    let mut directions = Vec::with_capacity(class_count);
    for class in 0..class_count {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.is_empty() {
            return Err(RoddError::contract(format!("class {class} has no samples")));
        }
        let block = features.select_rows(&rows);
        let mut u = svd(&block)?.v.column(0);
        let mean_projection: f64 =
            rows.iter().map(|&i| dot(features.row(i), &u)).sum::<f64>() / rows.len() as f64;
        if mean_projection < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        directions.push(u);
    }
    let mut set = ClassSubspaceSet {
        directions,
        threshold: 0.0,
        quantile_used: quantile,
        absolute_cosine,
    };
    let mut scores = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        scores.push(uncertainty_score(features.row(i), &set)?.0);
    }
    set.threshold = empirical_quantile(&scores, quantile)?;
    Ok(set)
}

/// Smallest angle between `feature` and any class direction, with the class
/// attaining it (lowest index on ties).
pub fn uncertainty_score(feature: &[f64], subspaces: &ClassSubspaceSet) -> Result<(f64, usize)> {
    let r = norm(feature);
    if !(r >= MIN_FEATURE_NORM) {
        return Err(RoddError::DegenerateFeature { index: 0, norm: r });
    }
    if feature.len() != subspaces.feature_dim() {
        return Err(RoddError::contract(format!(
            "feature has dimension {}, subspaces expect {}",
            feature.len(),
            subspaces.feature_dim()
        )));
    }
    let unit: Vec<f64> = feature.iter().map(|v| v / r).collect();
    let mut best = (f64::INFINITY, 0);
    for (class, u) in subspaces.directions.iter().enumerate() {
        let mut cos = dot(&unit, u);
        // atan2 of the perpendicular and parallel parts equals arccos(cos) but
        // stays accurate near 0 and π.
        let sin = unit
            .iter()
            .zip(u)
            .map(|(x, ui)| (x - cos * ui).powi(2))
            .sum::<f64>()
            .sqrt();
        if subspaces.absolute_cosine {
            cos = cos.abs();
        }
        let angle = sin.atan2(cos.clamp(-1.0, 1.0)).clamp(0.0, PI);
        if angle < best.0 {
            best = (angle, class);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: usize,
    /// Score of the unperturbed sample; π when its feature is degenerate.
    pub delta: f64,
    pub argmin_class: usize,
    pub mc_probability: Option<f64>,
    pub decision: Decision,
    /// Monte-Carlo draws whose feature was degenerate (counted as OOD).
    pub degenerate_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub noise: AugmentationSpec,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: DEFAULT_MC_SAMPLES,
            noise: AugmentationSpec {
                gaussian_sigma: 0.01,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

fn score_or_degenerate(
    feature: &[f64],
    subspaces: &ClassSubspaceSet,
) -> Result<Option<(f64, usize)>> {
    match uncertainty_score(feature, subspaces) {
        Ok(s) => Ok(Some(s)),
        Err(RoddError::DegenerateFeature { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Single deterministic pass: ID iff `δ ≤ δ^Th`.
pub fn detect(
    model: &EncoderModel,
    subspaces: &ClassSubspaceSet,
    inputs: &Matrix,
) -> Result<Vec<ScoreRecord>> {
    score_features(&model.encode(inputs)?, subspaces)
}

/// [`detect`] on precomputed features, one record per row.
pub fn score_features(features: &Matrix, subspaces: &ClassSubspaceSet) -> Result<Vec<ScoreRecord>> {
    (0..features.rows())
        .map(|i| {
            let scored = score_or_degenerate(features.row(i), subspaces)?;
            let (delta, argmin_class) = scored.unwrap_or((PI, 0));
            Ok(ScoreRecord {
                sample_id: i,
                delta,
                argmin_class,
                mc_probability: None,
                decision: if scored.is_some() && delta <= subspaces.threshold {
                    Decision::Id
                } else {
                    Decision::Ood
                },
                degenerate_draws: usize::from(scored.is_none()),
            })
        })
        .collect()
}

/// Estimates `p(δ ≤ δ^Th)` from `config.samples` augmented draws of one sample;
/// the sample is declared ID iff the estimate is at least one half.
pub fn mc_detect(
    model: &EncoderModel,
    subspaces: &ClassSubspaceSet,
    raw_sample: &[f64],
    sample_id: usize,
    config: &McConfig,
) -> Result<ScoreRecord> {
    if config.samples == 0 {
        return Err(RoddError::contract("Monte-Carlo inference needs K ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draws = Vec::with_capacity(config.samples * raw_sample.len());
    for _ in 0..config.samples {
        draws.extend(augment(raw_sample, &config.noise, rng.random())?);
    }
    let draws = Matrix::new(config.samples, raw_sample.len(), draws)?;
    let features = model.encode(&draws)?;
    let mut inside = 0usize;
    let mut degenerate = 0usize;
    for i in 0..features.rows() {
        match score_or_degenerate(features.row(i), subspaces)? {
            Some((delta, _)) if delta <= subspaces.threshold => inside += 1,
            Some(_) => {}
            None => degenerate += 1,
        }
    }
    let clean = model.encode(&Matrix::new(1, raw_sample.len(), raw_sample.to_vec())?)?;
    let (delta, argmin_class) = score_or_degenerate(clean.row(0), subspaces)?.unwrap_or((PI, 0));
    let p = inside as f64 / config.samples as f64;
    Ok(ScoreRecord {
        sample_id,
        delta,
        argmin_class,
        mc_probability: Some(p),
        decision: if p >= 0.5 {
            Decision::Id
        } else {
            Decision::Ood
        },
        degenerate_draws: degenerate,
    })
}

/// Monte-Carlo detection over every row, with per-sample seeds derived from `config.seed`.
pub fn mc_detect_all(
    model: &EncoderModel,
    subspaces: &ClassSubspaceSet,
    inputs: &Matrix,
    config: &McConfig,
) -> Result<Vec<ScoreRecord>> {
    (0..inputs.rows())
        .map(|i| {
            let per_sample = McConfig {
                seed: config.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..config.clone()
            };
            mc_detect(model, subspaces, inputs.row(i), i, &per_sample)
        })
        .collect()
}

/// Max-softmax probability baseline.
pub fn msp_score(logits: &[f64]) -> f64 {
    let (_, probs) = log_softmax_parts(logits);
    probs.into_iter().fold(0.0, f64::max)
}

#[derive(Serialize)]
struct ScoreRow {
    sample_id: usize,
    delta: f64,
    argmin_class: usize,
    mc_probability: Option<f64>,
    decision: Decision,
}

pub fn write_score_table<W: std::io::Write>(out: W, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(ScoreRow {
            sample_id: r.sample_id,
            delta: r.delta,
            argmin_class: r.argmin_class,
            mc_probability: r.mc_probability,
            decision: r.decision,
        })?;
    }
    w.flush().map_err(|e| RoddError::io("score table", e))?;
    Ok(())
}

pub fn save_score_table(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
    write_score_table(file, records)
}
