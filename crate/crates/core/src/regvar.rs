//! Gradient-variability machinery: per-sample gradient matrices, the two
//! explicit variability regularizers, mini-batch and bootstrap gradient
//! covariances, and the weighted covariance accumulators.
//!
//! Conventions: regularizer values are reported unscaled — the strengths
//! λ₁, λ₂ are applied by the optimizer, so one trajectory pass supports a
//! whole λ sweep. Dense p×p covariances are only materialized for p ≤ 512;
//! above that use the trace and matrix-free paths.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_scaled_outer, check_symmetric};
use crate::model::LossModel;
use crate::ParamVector;

/// Largest parameter dimension for which dense covariances are materialized.
pub const DENSE_COV_LIMIT: usize = 512;

/// All N per-sample gradients at a common θ, plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix {
    rows: Array2<f64>,
    batch_grad: Array1<f64>,
}

impl GradMatrix {
    /// Build from per-sample gradient rows; the mean is computed here.
    pub fn from_rows(rows: &[ParamVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = rows[0].len();
        let mut matrix = Array2::zeros((rows.len(), p));
        let mut mean = Array1::zeros(p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "gradient rows",
                    expected: p,
                    got: row.len(),
                });
            }
            matrix.row_mut(i).assign(row);
            mean += row;
        }
        mean /= rows.len() as f64;
        Ok(Self {
            rows: matrix,
            batch_grad: mean,
        })
    }

    /// Number of samples N.
    pub fn num_samples(&self) -> usize {
        self.rows.nrows()
    }

    /// Parameter dimension p.
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// The N×p per-sample gradient matrix.
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// The batch gradient: the row mean.
    pub fn batch_grad(&self) -> &Array1<f64> {
        &self.batch_grad
    }

    /// Deviation of row `i` from the batch gradient.
    pub fn deviation(&self, i: usize) -> Array1<f64> {
        &self.rows.row(i) - &self.batch_grad
    }
}

/// All per-sample gradients of `model` at θ.
///
/// Non-finite gradients are rejected with the offending sample index.
pub fn per_sample_grads<M: LossModel + ?Sized>(model: &M, theta: &ParamVector) -> Result<GradMatrix> {
    let n = model.num_samples();
    let p = model.dim();
    let mut rows = Array2::zeros((n, p));
    let mut mean = Array1::zeros(p);
    for i in 0..n {
        let g = model.sample_grad(i, theta);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "per-sample gradient",
                sample: Some(i),
            });
        }
        rows.row_mut(i).assign(&g);
        mean += &g;
    }
    mean /= n as f64;
    Ok(GradMatrix {
        rows,
        batch_grad: mean,
    })
}

/// Regularizer-1 value: the mean squared deviation of per-sample gradients
/// from the batch gradient, (1/N)Σ‖∇L(zᵢ;θ)−∇L(S;θ)‖².
pub fn reg1_value(gm: &GradMatrix) -> f64 {
    let n = gm.num_samples();
    let mut acc = 0.0;
    for i in 0..n {
        let dev = gm.deviation(i);
        acc += dev.dot(&dev);
    }
    acc / n as f64
}

/// Regularizer-1 value and gradient.
///
/// The gradient is (2/N)Σ(Hᵢ−H_S)(gᵢ−g_S), assembled from exact per-sample
/// HVPs; strengths are not applied here.
pub fn reg1<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    gm: &GradMatrix,
) -> Result<(f64, ParamVector)> {
    let n = gm.num_samples();
    if n != model.num_samples() {
        return Err(Error::DimensionMismatch {
            context: "reg1 gradient matrix",
            expected: model.num_samples(),
            got: n,
        });
    }
    let p = model.dim();
    let value = reg1_value(gm);
    let mut hi_dev_sum = Array1::zeros(p);
    let mut dev_sum = Array1::zeros(p);
    for i in 0..n {
        let dev = gm.deviation(i);
        hi_dev_sum += &model.sample_hvp(i, theta, &dev);
        dev_sum += &dev;
    }
    let hs_dev_sum = full_hvp(model, theta, &dev_sum);
    let grad = (hi_dev_sum - hs_dev_sum) * (2.0 / n as f64);
    Ok((value, grad))
}

fn full_hvp<M: LossModel + ?Sized>(model: &M, theta: &ParamVector, v: &ParamVector) -> ParamVector {
    let all: Vec<usize> = (0..model.num_samples()).collect();
    model.batch_hvp(&all, theta, v)
}

/// Regularizer-2 value and gradient, ‖∇L(S_b;θ)−∇L(S;θ)‖².
///
/// With `omit_batch_grad` the full-set gradient term is dropped: the value
/// becomes ‖∇L(S_b;θ)‖² and the gradient loses its H_S part.
pub fn reg2<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[usize],
    omit_batch_grad: bool,
) -> Result<(f64, ParamVector)> {
    model.check_batch(batch)?;
    let g_batch = model.batch_grad(batch, theta);
    if omit_batch_grad {
        let value = g_batch.dot(&g_batch);
        let grad = model.batch_hvp(batch, theta, &g_batch) * 2.0;
        return Ok((value, grad));
    }
    let g_full = model.full_grad(theta);
    let dev = &g_batch - &g_full;
    let value = dev.dot(&dev);
    let grad = (model.batch_hvp(batch, theta, &dev) - full_hvp(model, theta, &dev)) * 2.0;
    Ok((value, grad))
}

/// Regularizer-2 against a frozen reference gradient (e.g. a trailing average
/// of previous mini-batch gradients standing in for the batch gradient).
///
/// The reference is constant in θ, so the gradient has no H_S term.
pub fn reg2_with_reference<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[usize],
    reference: &ParamVector,
) -> Result<(f64, ParamVector)> {
    model.check_batch(batch)?;
    if reference.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "reg2 reference gradient",
            expected: model.dim(),
            got: reference.len(),
        });
    }
    let g_batch = model.batch_grad(batch, theta);
    let dev = &g_batch - reference;
    let value = dev.dot(&dev);
    let grad = model.batch_hvp(batch, theta, &dev) * 2.0;
    Ok((value, grad))
}

/// Bundled regularizer values and gradients at one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegValue {
    pub reg1: f64,
    pub reg2: f64,
    pub grad_reg1: Vec<f64>,
    pub grad_reg2: Vec<f64>,
}

/// Mini-batch gradient covariance Σ_B^S(θ) = (1/(B·N)) Σᵢ J(gᵢ−g_S).
pub fn minibatch_cov(gm: &GradMatrix, batch_size: usize) -> Array2<f64> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let p = gm.dim();
    assert!(
        p <= DENSE_COV_LIMIT,
        "dense covariance limited to p <= {DENSE_COV_LIMIT}; use minibatch_cov_trace"
    );
    let n = gm.num_samples();
    let mut cov = Array2::zeros((p, p));
    for i in 0..n {
        let dev = gm.deviation(i);
        add_scaled_outer(&mut cov, &dev, 1.0);
    }
    cov / (batch_size * n) as f64
}

/// Trace of Σ_B^S(θ) via the squared-deviation identity, without
/// materializing the matrix.
pub fn minibatch_cov_trace(gm: &GradMatrix, batch_size: usize) -> f64 {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let n = gm.num_samples();
    let mut acc = 0.0;
    for i in 0..n {
        let dev = gm.deviation(i);
        acc += dev.dot(&dev);
    }
    acc / (batch_size * n) as f64
}

/// Bootstrap estimate of Σ_B^S: draw K mini-batches of size B with
/// replacement and take the empirical covariance of their mean gradients
/// around the batch gradient.
pub fn bootstrap_cov(
    gm: &GradMatrix,
    batch_size: usize,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if resamples < 2 {
        return Err(Error::InsufficientReplications {
            needed: 2,
            got: resamples,
        });
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = gm.num_samples();
    let p = gm.dim();
    let mut cov = Array2::zeros((p, p));
    let mut mean = Array1::zeros(p);
    for _ in 0..resamples {
        mean.fill(0.0);
        for _ in 0..batch_size {
            let idx = rng.random_range(0..n);
            mean += &gm.rows.row(idx);
        }
        mean /= batch_size as f64;
        let dev = &mean - &gm.batch_grad;
        add_scaled_outer(&mut cov, &dev, 1.0);
    }
    Ok(cov / resamples as f64)
}

/// Which Lemma-2 / Theorem-1 term an accumulator is tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccumMode {
    /// Population gradient covariance E[J(∇L(z';θ)−∇L(D;θ))].
    PopulationTerm,
    /// B·Σ_B^S(θ), the scaled mini-batch gradient covariance.
    MinibatchTerm,
    /// J(∇L(S_b;θ)−∇L(D;θ)) along the realized SGD path.
    SgdPathTerm,
}

/// Per-term trace log entry: (step, η, trace of the raw term).
pub type PerTerm = (usize, f64, f64);

/// Running Σ_t M·η_t²·C_t with a per-term trace log.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    weighted_sum: Array2<f64>,
    per_term_log: Vec<PerTerm>,
    mode: AccumMode,
    steps: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize, mode: AccumMode) -> Self {
        Self {
            weighted_sum: Array2::zeros((dim, dim)),
            per_term_log: Vec::new(),
            mode,
            steps: 0,
        }
    }

    /// Add M·η²·C. Asymmetric C is rejected.
    pub fn accumulate(&mut self, c: &Array2<f64>, eta: f64, epochs: f64) -> Result<()> {
        if c.dim() != self.weighted_sum.dim() {
            return Err(Error::DimensionMismatch {
                context: "accumulated covariance",
                expected: self.weighted_sum.nrows(),
                got: c.nrows(),
            });
        }
        check_symmetric(c, 1e-9)?;
        let w = epochs * eta * eta;
        self.weighted_sum.scaled_add(w, c);
        self.per_term_log
            .push((self.steps, eta, crate::linalg::trace(c)));
        self.steps += 1;
        Ok(())
    }

    pub fn weighted_sum(&self) -> &Array2<f64> {
        &self.weighted_sum
    }

    pub fn trace(&self) -> f64 {
        crate::linalg::trace(&self.weighted_sum)
    }

    pub fn mode(&self) -> AccumMode {
        self.mode
    }

    pub fn per_term_log(&self) -> &[PerTerm] {
        &self.per_term_log
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// 1-D quadratics Lᵢ(θ) = ½(θ−cᵢ)², the hand-computable test model.
    pub struct ScalarQuadratics {
        pub centers: Vec<f64>,
    }

    impl LossModel for ScalarQuadratics {
        fn dim(&self) -> usize {
            1
        }
        fn num_samples(&self) -> usize {
            self.centers.len()
        }
        fn sample_loss(&self, idx: usize, theta: &ParamVector) -> f64 {
            let d = theta[0] - self.centers[idx];
            0.5 * d * d
        }
        fn sample_grad(&self, idx: usize, theta: &ParamVector) -> ParamVector {
            ndarray::array![theta[0] - self.centers[idx]]
        }
        fn sample_hvp(&self, _idx: usize, _theta: &ParamVector, v: &ParamVector) -> ParamVector {
            v.clone()
        }
    }
}
