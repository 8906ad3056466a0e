//! Numerical checks of first-singular-value dominance for the joint objective
//! `‖A − FFᵀ‖²_F + μ‖FW − Y‖²_F` on synthetic augmentation graphs.
//!
//! `F` is `N×d` (rows are samples), `W` is the frozen `d×L` projection and `Y`
//! holds one-hot rows.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoddError};
use crate::linalg::{svd, sym_eig, Matrix};

/// Eigenvalues in `[−PSD_SLACK, 0)` are treated as zero.
pub const PSD_SLACK: f64 = 1e-10;
const MAX_BACKTRACKS: usize = 60;
const SINKHORN_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    #[serde(rename = "none")]
    None,
    /// Each class block scaled so its largest eigenvalue is 1.
    #[serde(rename = "unit-spectral-per-block")]
    UnitSpectral,
    /// Each class block symmetrically scaled (`D·B·D`) to unit row sums.
    #[serde(rename = "doubly-stochastic-per-block")]
    DoublyStochastic,
}

impl Normalization {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Normalization::None),
            "unit-spectral-per-block" | "unit-spectral" => Ok(Normalization::UnitSpectral),
            "doubly-stochastic-per-block" | "doubly-stochastic" => {
                Ok(Normalization::DoublyStochastic)
            }
            other => Err(RoddError::contract(format!(
                "unknown normalization {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugGraph {
    pub a: Matrix,
    pub class_partition: Vec<Range<usize>>,
    pub delta: f64,
    pub eta: f64,
    pub normalization: Normalization,
}

impl AugGraph {
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_of(&self, index: usize) -> Option<usize> {
        self.class_partition.iter().position(|r| r.contains(&index))
    }

    /// Checks symmetry, nonnegativity, the within-class spread bound and the
    /// cross-class ceiling. The spread bound is skipped for doubly-stochastic
    /// blocks, whose diagonal scaling does not preserve entry ratios.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.a.asymmetry() > 1e-12 {
            return Err(RoddError::contract("adjacency is not symmetric"));
        }
        if self.a.data().iter().any(|&v| v < 0.0) {
            return Err(RoddError::contract("adjacency has negative entries"));
        }
        let mut within_min = f64::INFINITY;
        for block in &self.class_partition {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in block.clone() {
                for j in block.clone() {
                    lo = lo.min(self.a[(i, j)]);
                    hi = hi.max(self.a[(i, j)]);
                }
            }
            within_min = within_min.min(lo);
            let limit = (1.0 + self.delta).powi(2) * (1.0 + 1e-12);
            if self.normalization != Normalization::DoublyStochastic && hi > lo * limit {
                return Err(RoddError::contract(format!(
                    "block {block:?} spread {} exceeds (1+δ)² = {}",
                    hi / lo,
                    (1.0 + self.delta).powi(2)
                )));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if self.class_of(i) != self.class_of(j)
                    && self.a[(i, j)] > self.eta * within_min * (1.0 + 1e-12)
                {
                    return Err(RoddError::contract(format!(
                        "cross-class entry ({i}, {j}) exceeds η·min within-class"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Block-structured adjacency: within-class entries uniform on
/// `[1/(1+δ), 1+δ]` (then symmetrized and normalized per block) and every
/// cross-class entry equal to `η` times the smallest within-class entry.
pub fn build_adjacency(
    class_sizes: &[usize],
    delta: f64,
    eta: f64,
    seed: u64,
    normalization: Normalization,
) -> Result<AugGraph> {
    if !(delta >= 0.0) || !(eta >= 0.0) || !delta.is_finite() || !eta.is_finite() {
        return Err(RoddError::contract("delta and eta must be finite and ≥ 0"));
    }
    if class_sizes.is_empty() || class_sizes.contains(&0) {
        return Err(RoddError::contract("every class needs at least one sample"));
    }
    let n: usize = class_sizes.iter().sum();
    let mut partition = Vec::with_capacity(class_sizes.len());
    let mut start = 0;
    for &s in class_sizes {
        partition.push(start..start + s);
        start += s;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (1.0 / (1.0 + delta), 1.0 + delta);
    let mut a = Matrix::zeros(n, n);
    for block in &partition {
        let m = block.len();
        let mut raw = Matrix::zeros(m, m);
        for v in raw.data_mut() {
            *v = if delta == 0.0 {
                1.0
            } else {
                rng.random_range(lo..=hi)
            };
        }
        let mut b = raw.add(&raw.transpose()).scale(0.5);
        match normalization {
            Normalization::None => {}
            Normalization::UnitSpectral => {
                let (eig, _) = sym_eig(&b)?;
                b = b.scale(1.0 / eig[0]);
            }
            Normalization::DoublyStochastic => b = sinkhorn_symmetric(&b)?,
        }
        for (bi, i) in block.clone().enumerate() {
            for (bj, j) in block.clone().enumerate() {
                a[(i, j)] = b[(bi, bj)];
            }
        }
    }
    let within_min = partition
        .iter()
        .flat_map(|r| r.clone().flat_map(move |i| r.clone().map(move |j| (i, j))))
        .map(|(i, j)| a[(i, j)])
        .fold(f64::INFINITY, f64::min);
    let cross = eta * within_min;
    for (ci, ri) in partition.iter().enumerate() {
        for (cj, rj) in partition.iter().enumerate() {
            if ci != cj {
                for i in ri.clone() {
                    for j in rj.clone() {
                        a[(i, j)] = cross;
                    }
                }
            }
        }
    }
    let graph = AugGraph {
        a,
        class_partition: partition,
        delta,
        eta,
        normalization,
    };
    graph.validate()?;
    Ok(graph)
}

/// Symmetric Sinkhorn scaling `D·B·D` with unit row sums, for positive `B`.
fn sinkhorn_symmetric(b: &Matrix) -> Result<Matrix> {
    let n = b.rows();
    let mut d = vec![1.0; n];
    let row_sums = |d: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| d[i] * (0..n).map(|j| b[(i, j)] * d[j]).sum::<f64>())
            .collect()
    };
    for _ in 0..100_000 {
        let sums = row_sums(&d);
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        if worst <= SINKHORN_TOL {
            let mut out = b.clone();
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] *= d[i] * d[j];
                }
            }
            // Average away rounding asymmetry.
            return Ok(out.add(&out.transpose()).scale(0.5));
        }
        for (di, s) in d.iter_mut().zip(&sums) {
            *di /= s.sqrt();
        }
    }
    Err(RoddError::NumericFailure {
        what: "symmetric sinkhorn scaling".into(),
        residual: row_sums(&d)
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max),
    })
}

/// Eigendecomposition with tiny negative eigenvalues clipped to zero; errors
/// when the matrix is indefinite beyond [`PSD_SLACK`].
fn psd_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (mut eig, q) = sym_eig(a)?;
    let min = *eig.last().unwrap();
    if min < -PSD_SLACK {
        return Err(RoddError::NotPsd {
            min_eigenvalue: min,
        });
    }
    eig.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((eig, q))
}

/// `Q_d·Λ_d^{1/2}`: a minimizer of `‖A − FFᵀ‖²_F` over `N×d` matrices.
pub fn closed_form_factor(a: &Matrix, d: usize) -> Result<Matrix> {
    if d == 0 || d > a.rows() {
        return Err(RoddError::contract(format!(
            "factor rank {d} must lie in [1, {}]",
            a.rows()
        )));
    }
    let (eig, q) = psd_eig(a)?;
    let mut f = Matrix::zeros(a.rows(), d);
    for k in 0..d {
        let s = eig[k].sqrt();
        for r in 0..a.rows() {
            f[(r, k)] = q[(r, k)] * s;
        }
    }
    Ok(f)
}

pub fn closed_form_contrastive(graph: &AugGraph, d: usize) -> Result<Matrix> {
    closed_form_factor(&graph.a, d)
}

/// `Σ_{i>d} λᵢ²`, the smallest attainable `‖A − FFᵀ‖²_F` for PSD `A`.
pub fn truncation_optimum(a: &Matrix, d: usize) -> Result<f64> {
    let (eig, _) = psd_eig(a)?;
    Ok(eig.iter().skip(d).map(|l| l * l).sum())
}

/// Joint loss and its gradient `−4(A − FFᵀ)F + 2μ(FW − Y)Wᵀ`.
pub fn joint_loss_and_grad(
    a: &Matrix,
    f: &Matrix,
    w: &Matrix,
    y: &Matrix,
    mu: f64,
) -> (f64, Matrix) {
    let residual = a.sub(&f.matmul_t(f));
    let fit = f.matmul(w).sub(y);
    let loss = residual.frobenius_sq() + mu * fit.frobenius_sq();
    let grad = residual
        .matmul(f)
        .scale(-4.0)
        .add(&fit.matmul_t(w).scale(2.0 * mu));
    (loss, grad)
}

fn joint_loss(a: &Matrix, f: &Matrix, w: &Matrix, y: &Matrix, mu: f64) -> f64 {
    a.sub(&f.matmul_t(f)).frobenius_sq() + mu * f.matmul(w).sub(y).frobenius_sq()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Closed-form contrastive factor when `A` is PSD, otherwise random.
    Auto {
        seed: u64,
    },
    Random {
        seed: u64,
    },
    ClosedForm,
    Zeros,
    Given(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOpts {
    pub max_iters: usize,
    /// Initial step; `None` picks `1/(12·‖A‖₂ + 2μ)`.
    pub lr: Option<f64>,
    /// Stop when the relative loss change falls below this.
    pub tol: f64,
    pub init: Init,
}

impl Default for JointOpts {
    fn default() -> Self {
        JointOpts {
            max_iters: 200_000,
            lr: None,
            tol: 1e-15,
            init: Init::Auto { seed: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolveResult {
    pub f_star: Matrix,
    pub loss_trace: Vec<f64>,
    pub per_class_sigma: Vec<Vec<f64>>,
    pub mu: f64,
    pub converged: bool,
}

impl JointSolveResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap()
    }
}

/// One-hot label matrix (`N×L`) for a class partition.
pub fn one_hot_labels(partition: &[Range<usize>]) -> Matrix {
    let n = partition.iter().map(|r| r.end).max().unwrap_or(0);
    let mut y = Matrix::zeros(n, partition.len());
    for (c, r) in partition.iter().enumerate() {
        for i in r.clone() {
            y[(i, c)] = 1.0;
        }
    }
    y
}

pub fn resolve_init(a: &Matrix, d: usize, init: &Init) -> Result<Matrix> {
    let random = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..a.rows() * d)
            .map(|_| 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Matrix::from_vec_unchecked(a.rows(), d, data)
    };
    match init {
        Init::Auto { seed } => match closed_form_factor(a, d) {
            Ok(f) => Ok(f),
            Err(RoddError::NotPsd { .. }) => Ok(random(*seed)),
            Err(e) => Err(e),
        },
        Init::Random { seed } => Ok(random(*seed)),
        Init::ClosedForm => closed_form_factor(a, d),
        Init::Zeros => Ok(Matrix::zeros(a.rows(), d)),
        Init::Given(f) => {
            if f.rows() != a.rows() || f.cols() != d {
                return Err(RoddError::contract("initial F has the wrong shape"));
            }
            Ok(f.clone())
        }
    }
}

fn check_joint_inputs(
    a: &Matrix,
    partition: &[Range<usize>],
    w: &Matrix,
    y: &Matrix,
    mu: f64,
) -> Result<()> {
    if !a.is_square() {
        return Err(RoddError::contract("A must be square"));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(RoddError::contract("mu must be finite and ≥ 0"));
    }
    if w.cols() == 0 || w.rows() > a.rows() {
        return Err(RoddError::contract("W must be d×L with 1 ≤ d ≤ N"));
    }
    if w.orthonormality_error() > 1e-8 {
        return Err(RoddError::contract("W must have orthonormal columns"));
    }
    if y.rows() != a.rows() || y.cols() != w.cols() {
        return Err(RoddError::contract(format!(
            "Y must be {}x{}, got {}x{}",
            a.rows(),
            w.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if partition.len() != w.cols() {
        return Err(RoddError::contract(
            "class count differs from the columns of W",
        ));
    }
    for (c, r) in partition.iter().enumerate() {
        for i in r.clone() {
            let row = y.row(i);
            let ok = row
                .iter()
                .enumerate()
                .all(|(k, &v)| v == if k == c { 1.0 } else { 0.0 });
            if !ok {
                return Err(RoddError::contract(format!(
                    "row {i} of Y is not one-hot for class {c}"
                )));
            }
        }
    }
    Ok(())
}

/// Gradient descent with step halving on any loss increase.
pub fn solve_joint_matrix(
    a: &Matrix,
    partition: &[Range<usize>],
    w: &Matrix,
    y: &Matrix,
    mu: f64,
    opts: &JointOpts,
) -> Result<JointSolveResult> {
    check_joint_inputs(a, partition, w, y, mu)?;
    let d = w.rows();
    let mut f = resolve_init(a, d, &opts.init)?;
    let mut lr = match opts.lr {
        Some(lr) if lr > 0.0 => lr,
        Some(_) => return Err(RoddError::contract("lr must be positive")),
        None => {
            let (eig, _) = sym_eig(a)?;
            let spectral = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            1.0 / (12.0 * spectral + 2.0 * mu).max(1e-12)
        }
    };

    let (mut loss, mut grad) = joint_loss_and_grad(a, &f, w, y, mu);
    let mut trace = vec![loss];
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let gnorm = grad.frobenius_norm();
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial = f.sub(&grad.scale(lr));
            let trial_loss = joint_loss(a, &trial, w, y, mu);
            if trial_loss <= loss {
                accepted = Some((trial, trial_loss));
                break;
            }
            lr *= 0.5;
        }
        let Some((next, next_loss)) = accepted else {
            // No descent left at rounding level: a stationary point.
            if gnorm <= 1e-8 * (1.0 + loss.sqrt()) {
                converged = true;
                break;
            }
            return Err(RoddError::NumericFailure {
                what: "joint solve line search".into(),
                residual: gnorm,
            });
        };
        let change = (loss - next_loss) / loss.max(f64::MIN_POSITIVE);
        f = next;
        loss = next_loss;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(RoddError::NumericFailure {
                what: "joint solve".into(),
                residual: loss,
            });
        }
        if change < opts.tol {
            converged = true;
            break;
        }
        grad = joint_loss_and_grad(a, &f, w, y, mu).1;
    }

    let per_class_sigma = partition
        .iter()
        .map(|r| {
            let rows: Vec<usize> = r.clone().collect();
            svd(&f.select_rows(&rows)).map(|s| s.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JointSolveResult {
        f_star: f,
        loss_trace: trace,
        per_class_sigma,
        mu,
        converged,
    })
}

pub fn solve_joint(
    graph: &AugGraph,
    w: &Matrix,
    y: &Matrix,
    mu: f64,
    opts: &JointOpts,
) -> Result<JointSolveResult> {
    solve_joint_matrix(&graph.a, &graph.class_partition, w, y, mu, opts)
}

/// `2((1+δ)^{3/2} − 1)`: ceiling on the fourth-power singular tail of a class.
pub fn tail4_bound(delta: f64) -> f64 {
    2.0 * (1.5 * delta.ln_1p()).exp_m1()
}

/// `√(6((1+δ)^{3/2} − 1))`: ceiling on the squared singular tail of a class.
pub fn tail2_bound(delta: f64) -> f64 {
    (3.0 * tail4_bound(delta)).sqrt()
}

/// `(Σ_{i≥2} σᵢ², Σ_{i≥2} σᵢ⁴)` for nonincreasing singular values.
pub fn singular_tails(sigma: &[f64]) -> (f64, f64) {
    sigma
        .iter()
        .skip(1)
        .fold((0.0, 0.0), |(t2, t4), s| (t2 + s * s, t4 + s.powi(4)))
}

/// Share of the squared singular mass carried by the first singular value.
pub fn dominance_ratio(sigma: &[f64]) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        0.0
    } else {
        sigma[0] * sigma[0] / total
    }
}

/// Slack allowed on top of the bounds for rounding.
pub const LEMMA_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTail {
    pub sigma: Vec<f64>,
    pub tail2: f64,
    pub tail4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaBounds {
    pub bound2: f64,
    pub bound4: f64,
    /// `√(3·bound4)`, which must coincide with `bound2`.
    pub bound2_from_bound4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub delta: f64,
    pub eta: f64,
    pub normalization: Normalization,
    pub mu: f64,
    pub per_class: Vec<ClassTail>,
    pub bounds: LemmaBounds,
    pub pass: bool,
}

impl LemmaReport {
    pub fn class_passes(&self, class: usize) -> bool {
        let c = &self.per_class[class];
        c.tail2 <= self.bounds.bound2 + LEMMA_SLACK && c.tail4 <= self.bounds.bound4 + LEMMA_SLACK
    }
}

pub fn verify_lemma(graph: &AugGraph, result: &JointSolveResult) -> LemmaReport {
    let bound4 = tail4_bound(graph.delta);
    let bounds = LemmaBounds {
        bound2: tail2_bound(graph.delta),
        bound4,
        bound2_from_bound4: (3.0 * bound4).sqrt(),
    };
    let per_class: Vec<ClassTail> = result
        .per_class_sigma
        .iter()
        .map(|sigma| {
            let (tail2, tail4) = singular_tails(sigma);
            ClassTail {
                sigma: sigma.clone(),
                tail2,
                tail4,
            }
        })
        .collect();
    let mut report = LemmaReport {
        delta: graph.delta,
        eta: graph.eta,
        normalization: graph.normalization,
        mu: result.mu,
        per_class,
        bounds,
        pass: false,
    };
    report.pass = (0..report.per_class.len()).all(|c| report.class_passes(c));
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSweepRow {
    pub mu: f64,
    pub max_tail4: f64,
    pub dominance_ratio: Vec<f64>,
    pub final_loss: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSweepReport {
    pub delta: f64,
    pub eta: f64,
    pub normalization: Normalization,
    pub rows: Vec<MuSweepRow>,
    /// Number of leading μ values that all pass the tail check.
    pub passing_prefix: usize,
    /// Largest μ of that prefix: an empirical lower estimate of μ_min.
    pub mu_min_estimate: Option<f64>,
}

/// Solves the joint problem for each μ from one shared initialization.
pub fn mu_sweep(
    graph: &AugGraph,
    w: &Matrix,
    y: &Matrix,
    mu_values: &[f64],
    opts: &JointOpts,
) -> Result<MuSweepReport> {
    if mu_values.iter().any(|&m| !(m >= 0.0)) {
        return Err(RoddError::contract("mu values must be ≥ 0"));
    }
    if mu_values.windows(2).any(|p| p[0] > p[1]) {
        return Err(RoddError::contract("mu values must be sorted ascending"));
    }
    let shared = JointOpts {
        init: Init::Given(resolve_init(&graph.a, w.rows(), &opts.init)?),
        ..opts.clone()
    };
    let mut rows = Vec::with_capacity(mu_values.len());
    for &mu in mu_values {
        let result = solve_joint(graph, w, y, mu, &shared)?;
        let lemma = verify_lemma(graph, &result);
        rows.push(MuSweepRow {
            mu,
            max_tail4: lemma.per_class.iter().map(|c| c.tail4).fold(0.0, f64::max),
            dominance_ratio: result
                .per_class_sigma
                .iter()
                .map(|s| dominance_ratio(s))
                .collect(),
            final_loss: result.final_loss(),
            pass: lemma.pass,
        });
    }
    let passing_prefix = rows.iter().take_while(|r| r.pass).count();
    Ok(MuSweepReport {
        delta: graph.delta,
        eta: graph.eta,
        normalization: graph.normalization,
        mu_min_estimate: passing_prefix.checked_sub(1).map(|i| rows[i].mu),
        rows,
        passing_prefix,
    })
}
