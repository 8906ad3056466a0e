//! Self-supervised pre-training of the encoder body with the spectral
//! contrastive loss `‖A − FFᵀ‖²_F` over pairs of augmented views, optionally
//! with sign-gradient adversarial views.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::encoder::{cosine_lr, epoch_batches, rng_u64, EncoderModel, Sgd};
use crate::error::{Result, RoddError};
use crate::linalg::{norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentationSpec {
    pub gaussian_sigma: f64,
    /// Fraction of coordinates set to zero.
    pub mask_fraction: f64,
    /// Whole-vector multiplicative jitter, drawn from `[1 − j, 1 + j]`.
    pub scale_jitter: f64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_sigma.is_finite()
            && self.gaussian_sigma >= 0.0
            && (0.0..1.0).contains(&self.mask_fraction)
            && self.scale_jitter.is_finite()
            && self.scale_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RoddError::contract(format!(
                "invalid augmentation spec {self:?}"
            )))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gaussian_sigma == 0.0 && self.mask_fraction == 0.0 && self.scale_jitter == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialSpec {
    /// ∞-norm budget.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        AdversarialSpec {
            epsilon: 0.03,
            steps: 3,
            step_size: 0.01,
        }
    }
}

impl AdversarialSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(RoddError::contract("adversarial epsilon must be ≥ 0"));
        }
        if !(self.step_size > 0.0) {
            return Err(RoddError::contract("adversarial step size must be > 0"));
        }
        Ok(())
    }

    /// Whether the steps can reach the edge of the budget at all.
    pub fn reaches_budget(&self) -> bool {
        self.steps as f64 * self.step_size >= self.epsilon
    }
}

/// One stochastic view of `x`: scale jitter, then additive noise, then masking.
pub fn augment(x: &[f64], spec: &AugmentationSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = x.to_vec();
    if spec.is_identity() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if spec.scale_jitter > 0.0 {
        let factor = 1.0 + rng.random_range(-spec.scale_jitter..=spec.scale_jitter);
        out.iter_mut().for_each(|v| *v *= factor);
    }
    if spec.gaussian_sigma > 0.0 {
        for v in &mut out {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.gaussian_sigma * e;
        }
    }
    if spec.mask_fraction > 0.0 {
        let count = (spec.mask_fraction * out.len() as f64).round() as usize;
        for i in sample(&mut rng, out.len(), count) {
            out[i] = 0.0;
        }
    }
    Ok(out)
}

/// Binary adjacency of a batch: ones on the diagonal and on each positive pair.
pub fn batch_adjacency(pairs: &[(usize, usize)], n: usize) -> Result<Matrix> {
    let mut a = Matrix::identity(n);
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(RoddError::contract(format!(
                "pair ({i}, {j}) outside batch of {n}"
            )));
        }
        if i == j {
            return Err(RoddError::contract(format!(
                "pair ({i}, {j}) pairs a sample with itself"
            )));
        }
        if a[(i, j)] != 0.0 {
            return Err(RoddError::contract(format!("pair ({i}, {j}) listed twice")));
        }
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    Ok(a)
}

/// `‖A − FFᵀ‖²_F` and its gradient `−4(A − FFᵀ)F` with respect to `F`.
pub fn spectral_contrastive_loss(features: &Matrix, adjacency: &Matrix) -> Result<(f64, Matrix)> {
    let n = features.rows();
    if adjacency.rows() != n || adjacency.cols() != n {
        return Err(RoddError::contract(format!(
            "adjacency is {}x{} but there are {n} feature rows",
            adjacency.rows(),
            adjacency.cols()
        )));
    }
    if adjacency.asymmetry() > 1e-12 * adjacency.max_abs().max(1.0) {
        return Err(RoddError::contract("adjacency must be symmetric"));
    }
    let residual = adjacency.sub(&features.matmul_t(features));
    let loss = residual.frobenius_sq();
    let grad = residual.matmul(features).scale(-4.0);
    Ok((loss, grad))
}

/// Stacks two augmented views of every row: rows `i` and `i + n` form a positive pair.
pub fn two_view_batch(
    x: &Matrix,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<(Matrix, Vec<(usize, usize)>)> {
    let n = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..2 * n).map(|_| rng.random()).collect();
    let mut data = Vec::with_capacity(2 * x.data().len());
    for view in 0..2 {
        for i in 0..n {
            data.extend(augment(x.row(i), spec, seeds[view * n + i])?);
        }
    }
    let pairs = (0..n).map(|i| (i, i + n)).collect();
    Ok((Matrix::new(2 * n, x.cols(), data)?, pairs))
}

fn batch_contrastive_loss(model: &EncoderModel, x: &Matrix, a: &Matrix) -> Result<f64> {
    let f = model.encode(x)?;
    Ok(spectral_contrastive_loss(&f, a)?.0)
}

/// Projected sign-gradient ascent on the spectral contrastive loss of the
/// batch features; every coordinate stays within `epsilon` of the input.
pub fn adversarial_perturb(
    model: &EncoderModel,
    batch: &Matrix,
    pairs: &[(usize, usize)],
    spec: &AdversarialSpec,
) -> Result<Matrix> {
    spec.validate()?;
    if spec.epsilon == 0.0 || spec.steps == 0 {
        return Ok(batch.clone());
    }
    let a = batch_adjacency(pairs, batch.rows())?;
    let mut delta = vec![0.0; batch.data().len()];
    let mut x = batch.clone();
    for _ in 0..spec.steps {
        let f = model.encode(&x)?;
        let (_, grad_f) = spectral_contrastive_loss(&f, &a)?;
        let grad_x = model.feature_input_gradient(&x, &grad_f)?;
        for ((d, &g), (xv, &x0)) in delta
            .iter_mut()
            .zip(grad_x.data())
            .zip(x.data_mut().iter_mut().zip(batch.data()))
        {
            let step = if g > 0.0 {
                spec.step_size
            } else if g < 0.0 {
                -spec.step_size
            } else {
                0.0
            };
            *d = (*d + step).clamp(-spec.epsilon, spec.epsilon);
            *xv = x0 + *d;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Source samples per batch; each contributes two views.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augmentation: AugmentationSpec,
    pub adversarial: Option<AdversarialSpec>,
    /// Rescales each step's gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            augmentation: AugmentationSpec {
                gaussian_sigma: 0.05,
                mask_fraction: 0.1,
                scale_jitter: 0.1,
            },
            adversarial: Some(AdversarialSpec::default()),
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean per-batch loss `‖A − FFᵀ‖²/m²` (m = rows in the two-view batch), per epoch.
    pub loss_history: Vec<f64>,
    /// Fraction of batches on which the adversarial views raised the loss.
    pub adversarial_gain_fraction: Option<f64>,
}

/// Pre-trains the encoder body only; the head (`W`, `w_g`, batch norm) is left untouched.
pub fn pretrain(
    model: &mut EncoderModel,
    dataset: &Dataset,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.augmentation.validate()?;
    if config.grad_clip.is_some_and(|c| !(c > 0.0)) {
        return Err(RoddError::contract("grad_clip must be positive"));
    }
    if let Some(adv) = &config.adversarial {
        adv.validate()?;
    }
    if dataset.input_dim() != model.input_dim() {
        return Err(RoddError::contract(
            "dataset dimension does not match the encoder",
        ));
    }
    let mut report = PretrainReport {
        loss_history: Vec::with_capacity(config.epochs),
        adversarial_gain_fraction: None,
    };
    if config.epochs == 0 {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = epoch_batches(dataset.len(), config.batch_size, &mut rng.clone()).len();
    let total_steps = steps_per_epoch * config.epochs;
    let mut params = model.body_params();
    let mut opt = Sgd::new(params.len(), config.momentum);
    let mut step = 0;
    let (mut adv_batches, mut adv_gains) = (0usize, 0usize);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in epoch_batches(dataset.len(), config.batch_size, &mut rng) {
            let x = dataset.inputs.select_rows(&idx);
            let (mut views, pairs) = two_view_batch(&x, &config.augmentation, rng_u64(&mut rng))?;
            let a = batch_adjacency(&pairs, views.rows())?;
            if let Some(adv) = &config.adversarial {
                let clean = batch_contrastive_loss(model, &views, &a)?;
                views = adversarial_perturb(model, &views, &pairs, adv)?;
                let attacked = batch_contrastive_loss(model, &views, &a)?;
                adv_batches += 1;
                if attacked >= clean {
                    adv_gains += 1;
                }
            }
            let m = views.rows() as f64;
            let scale = 1.0 / (m * m);
            let (loss, grads) = model.body_gradients(&views, |f| {
                let (loss, grad) = spectral_contrastive_loss(f, &a)?;
                Ok((loss * scale, grad.scale(scale)))
            })?;
            if !loss.is_finite() {
                return Err(RoddError::Divergence { epoch, loss });
            }
            let mut grads = grads;
            if let Some(clip) = config.grad_clip {
                let g = norm(&grads);
                if g > clip {
                    grads.iter_mut().for_each(|v| *v *= clip / g);
                }
            }
            opt.step(&mut params, &grads, cosine_lr(config.lr, step, total_steps));
            model.set_body_params(&params);
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        report.loss_history.push(loss_sum / batches as f64);
    }
    if adv_batches > 0 {
        report.adversarial_gain_fraction = Some(adv_gains as f64 / adv_batches as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{max_relative_error, Architecture, BatchNormState, DenseLayer};

    #[test]
    fn identity_augmentation_is_exact() {
        let x = vec![0.1, -2.0, 3.5];
        assert_eq!(augment(&x, &AugmentationSpec::default(), 4).unwrap(), x);
    }

    #[test]
    fn augmentation_is_seeded() {
        let spec = AugmentationSpec {
            gaussian_sigma: 0.1,
            ..Default::default()
        };
        let x = vec![0.5; 10];
        assert_eq!(
            augment(&x, &spec, 3).unwrap(),
            augment(&x, &spec, 3).unwrap()
        );
        assert_ne!(
            augment(&x, &spec, 3).unwrap(),
            augment(&x, &spec, 4).unwrap()
        );
    }

    #[test]
    fn mask_zeroes_exact_count() {
        let spec = AugmentationSpec {
            mask_fraction: 0.25,
            ..Default::default()
        };
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        let out = augment(&x, &spec, 12).unwrap();
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), 25);
        assert!(augment(
            &x,
            &AugmentationSpec {
                mask_fraction: 1.0,
                ..spec
            },
            1
        )
        .is_err());
    }

    #[test]
    fn adjacency_construction() {
        let a = batch_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch_adjacency(&[], 3).unwrap(), Matrix::identity(3));
        let a = batch_adjacency(&[(0, 1), (2, 3)], 4).unwrap();
        let expected = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(a, expected);
        assert!(batch_adjacency(&[(0, 1), (1, 0)], 2).is_err());
        assert!(batch_adjacency(&[(0, 2)], 2).is_err());
        assert!(batch_adjacency(&[(1, 1)], 2).is_err());
    }

    #[test]
    fn two_views_of_32_give_32_pairs() {
        let x = Matrix::new(32, 3, vec![0.5; 96]).unwrap();
        let (views, pairs) = two_view_batch(&x, &AugmentationSpec::default(), 0).unwrap();
        assert_eq!(views.rows(), 64);
        let a = batch_adjacency(&pairs, 64).unwrap();
        let off_diag = (0..64)
            .flat_map(|i| (0..64).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && a[(i, j)] != 0.0)
            .count();
        assert_eq!(pairs.len(), 32);
        assert_eq!(off_diag, 64);
    }

    #[test]
    fn loss_special_cases() {
        let a = batch_adjacency(&[(0, 1)], 2).unwrap();
        let (loss, grad) = spectral_contrastive_loss(&Matrix::zeros(2, 3), &a).unwrap();
        assert_eq!(loss, a.frobenius_sq());
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let f = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let (loss, grad) = spectral_contrastive_loss(&f, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        assert!(spectral_contrastive_loss(&Matrix::zeros(3, 1), &a).is_err());
    }

    #[test]
    fn hand_computed_loss_and_gradient() {
        let f = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let a = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let (loss, grad) = spectral_contrastive_loss(&f, &a).unwrap();
        assert_eq!(loss, 3.0);
        assert_eq!(grad.data(), &[0.0, -4.0]);

        // Central differences agree with the hand value.
        let eps = 1e-6;
        let mut numeric = Vec::new();
        for i in 0..2 {
            let mut p = f.clone();
            p.data_mut()[i] += eps;
            let mut m = f.clone();
            m.data_mut()[i] -= eps;
            let lp = spectral_contrastive_loss(&p, &a).unwrap().0;
            let lm = spectral_contrastive_loss(&m, &a).unwrap().0;
            numeric.push((lp - lm) / (2.0 * eps));
        }
        assert!(max_relative_error(grad.data(), &numeric) < 1e-8);
    }

    fn small_model(seed: u64) -> EncoderModel {
        EncoderModel::new(
            &Architecture {
                input_dim: 4,
                hidden: vec![8],
                feature_dim: 3,
                classes: 2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_returns_input() {
        let m = small_model(1);
        let x = Matrix::new(2, 4, vec![0.3; 8]).unwrap();
        let spec = AdversarialSpec {
            epsilon: 0.0,
            steps: 3,
            step_size: 0.01,
        };
        assert_eq!(adversarial_perturb(&m, &x, &[(0, 1)], &spec).unwrap(), x);
        let bad = AdversarialSpec {
            epsilon: -0.1,
            ..spec
        };
        assert!(adversarial_perturb(&m, &x, &[(0, 1)], &bad).is_err());
    }

    #[test]
    fn single_step_moves_by_clipped_step_size() {
        let m = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::new(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for (eps, step) in [(0.05, 0.01), (0.005, 0.01)] {
            let spec = AdversarialSpec {
                epsilon: eps,
                steps: 1,
                step_size: step,
            };
            let out = adversarial_perturb(&m, &x, &[(0, 1), (2, 3)], &spec).unwrap();
            let allowed = step.min(eps);
            for (a, b) in out.data().iter().zip(x.data()) {
                let d = a - b;
                assert!(
                    d.abs() < 1e-15 || (d.abs() - allowed).abs() < 1e-12,
                    "moved by {d}"
                );
            }
        }
    }

    #[test]
    fn linear_encoder_step_follows_analytic_sign() {
        // F = x·M with no bias; ∂‖A − FFᵀ‖²/∂x = (−4(A − FFᵀ)F)·Mᵀ.
        let m_w = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0], vec![0.25, -1.0]]).unwrap();
        let layer = DenseLayer {
            weights: m_w.clone(),
            bias: None,
        };
        let model = EncoderModel::from_parts(
            vec![layer],
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            vec![0.1, 0.2],
            BatchNormState::default(),
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.4, -0.1], vec![0.3, -0.2, 0.5]]).unwrap();
        let a = batch_adjacency(&[(0, 1)], 2).unwrap();
        let f = x.matmul(&m_w);
        let grad_x = a.sub(&f.matmul_t(&f)).matmul(&f).scale(-4.0).matmul_t(&m_w);
        let spec = AdversarialSpec {
            epsilon: 1.0,
            steps: 1,
            step_size: 0.01,
        };
        let out = adversarial_perturb(&model, &x, &[(0, 1)], &spec).unwrap();
        for i in 0..x.data().len() {
            let moved = out.data()[i] - x.data()[i];
            assert_eq!(moved.signum(), grad_x.data()[i].signum());
        }
    }

    #[test]
    fn pretrain_touches_only_the_body() {
        let mut m = small_model(3);
        let data = crate::data::synth_gaussian_mixture(2, 12, 4, 2.0, 0.3, 1).unwrap();
        let before = m.clone();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        pretrain(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);

        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let report = pretrain(&mut m, &data, &cfg).unwrap();
        assert_eq!(report.loss_history.len(), 2);
        assert!(report.adversarial_gain_fraction.is_some());
        assert_eq!(m.projection(), before.projection());
        assert_eq!(m.sharpening_weights(), before.sharpening_weights());
        assert_eq!(m.batch_norm(), before.batch_norm());
        assert_ne!(m.body_params(), before.body_params());

        let mut again = before.clone();
        assert_eq!(pretrain(&mut again, &data, &cfg).unwrap(), report);
        assert_eq!(again, m);
    }
}
