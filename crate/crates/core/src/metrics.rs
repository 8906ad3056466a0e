//! Detection metrics on oriented scores (higher means more in-distribution).

use serde::{Deserialize, Serialize};

use crate::encoder::argmax;
use crate::error::{Result, RoddError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSplit {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSplit {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        ScoreSplit {
            id_scores,
            ood_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(RoddError::contract(
                "both ID and OOD score lists must be nonempty",
            ));
        }
        if self
            .id_scores
            .iter()
            .chain(&self.ood_scores)
            .any(|s| !s.is_finite())
        {
            return Err(RoddError::contract("scores must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub detection_error: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold_used: f64,
}

fn check_target(tpr_target: f64) -> Result<()> {
    if tpr_target > 0.0 && tpr_target <= 1.0 {
        Ok(())
    } else {
        Err(RoddError::contract("tpr_target must lie in (0, 1]"))
    }
}

/// Largest threshold among the ID scores whose ID acceptance rate reaches the target.
fn operating_threshold(id_desc: &[f64], tpr_target: f64) -> f64 {
    let n = id_desc.len() as f64;
    let k = (1..=id_desc.len())
        .find(|&k| k as f64 / n >= tpr_target)
        .unwrap_or(id_desc.len());
    id_desc[k - 1]
}

fn count_at_least(values: &[f64], threshold: f64) -> usize {
    values.iter().filter(|&&v| v >= threshold).count()
}

/// FPR at the largest threshold τ with `#{id ≥ τ}/n_id ≥ tpr_target`; returns `(fpr, τ)`.
pub fn fpr_at_tpr(split: &ScoreSplit, tpr_target: f64) -> Result<(f64, f64)> {
    split.validate()?;
    check_target(tpr_target)?;
    let mut id = split.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let tau = operating_threshold(&id, tpr_target);
    let fpr = count_at_least(&split.ood_scores, tau) as f64 / split.ood_scores.len() as f64;
    Ok((fpr, tau))
}

/// Probability that a random ID score beats a random OOD score, ties counting half.
pub fn auroc(split: &ScoreSplit) -> Result<f64> {
    split.validate()?;
    let mut id = split.id_scores.clone();
    id.sort_by(f64::total_cmp);
    let (mut wins, mut ties) = (0u64, 0u64);
    for &o in &split.ood_scores {
        let below_or_equal = id.partition_point(|&v| v <= o);
        let below = id.partition_point(|&v| v < o);
        wins += (id.len() - below_or_equal) as u64;
        ties += (below_or_equal - below) as u64;
    }
    let pairs = 2 * split.id_scores.len() as u64 * split.ood_scores.len() as u64;
    Ok((2 * wins + ties) as f64 / pairs as f64)
}

/// Balanced error `½(1 − TPR) + ½·FPR` at the [`fpr_at_tpr`] operating point.
pub fn detection_error(split: &ScoreSplit, tpr_target: f64) -> Result<f64> {
    let (fpr, tau) = fpr_at_tpr(split, tpr_target)?;
    let tpr = count_at_least(&split.id_scores, tau) as f64 / split.id_scores.len() as f64;
    Ok(0.5 * (1.0 - tpr) + 0.5 * fpr)
}

pub fn evaluate(split: &ScoreSplit, tpr_target: f64) -> Result<EvalReport> {
    let (fpr95, threshold_used) = fpr_at_tpr(split, tpr_target)?;
    Ok(EvalReport {
        fpr95,
        auroc: auroc(split)?,
        detection_error: detection_error(split, tpr_target)?,
        n_id: split.id_scores.len(),
        n_ood: split.ood_scores.len(),
        threshold_used,
    })
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(RoddError::contract("one label per logit row required"));
    }
    if labels.is_empty() {
        return Err(RoddError::contract("accuracy of an empty set"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(RoddError::contract(format!(
            "label {l} outside {} classes",
            logits.cols()
        )));
    }
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(id: &[f64], ood: &[f64]) -> ScoreSplit {
        ScoreSplit::new(id.to_vec(), ood.to_vec())
    }

    #[test]
    fn fpr_hand_case() {
        let (fpr, tau) = fpr_at_tpr(&split(&[4.0, 3.0, 2.0, 1.0], &[0.5, 1.5]), 0.95).unwrap();
        assert_eq!(tau, 1.0);
        assert_eq!(fpr, 0.5);
    }

    #[test]
    fn fpr_perfect_separation() {
        let (fpr, _) = fpr_at_tpr(&split(&[5.0, 6.0, 7.0], &[1.0, 2.0]), 0.95).unwrap();
        assert_eq!(fpr, 0.0);
    }

    #[test]
    fn identical_lists_are_near_chance() {
        let s: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let (fpr, _) = fpr_at_tpr(&split(&s, &s), 0.95).unwrap();
        assert!(fpr >= 0.95 - 1.0 / 40.0);
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&split(&[0.9, 0.8], &[0.7, 0.85])).unwrap(), 0.75);
        assert_eq!(auroc(&split(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(auroc(&split(&[1.0], &[1.0])).unwrap(), 0.5);
    }

    #[test]
    fn detection_error_hand_cases() {
        assert_eq!(
            detection_error(&split(&[1.0, 1.0], &[0.0, 0.0]), 0.95).unwrap(),
            0.0
        );
        assert_eq!(
            detection_error(&split(&[2.0, 1.0], &[1.5, 0.5]), 0.95).unwrap(),
            0.25
        );
    }

    #[test]
    fn accuracy_cases() {
        let one_hot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&one_hot, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&Matrix::zeros(2, 3), &[1, 2]).unwrap(), 0.0);
        let three = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        assert!((accuracy(&three, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&three, &[0, 1, 2]).is_err());
    }

    #[test]
    fn empty_or_nan_scores_are_rejected() {
        assert!(auroc(&split(&[], &[1.0])).is_err());
        assert!(fpr_at_tpr(&split(&[1.0], &[]), 0.95).is_err());
        assert!(auroc(&split(&[f64::NAN], &[1.0])).is_err());
        assert!(fpr_at_tpr(&split(&[1.0], &[0.0]), 0.0).is_err());
    }
}
