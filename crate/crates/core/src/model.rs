//! The loss-model abstraction shared by every optimizer and estimator.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ParamVector;

/// A training set with a differentiable loss: per-sample values, gradients,
/// Hessian-vector products, and (for small parameter counts) full Hessians.
///
/// Samples are addressed by their position in the set, `0..num_samples()`.
/// Mini-batches are slices of positions; repeated positions are allowed.
pub trait LossModel: Sync {
    /// Parameter dimension p.
    fn dim(&self) -> usize;

    /// Number of samples N in the set.
    fn num_samples(&self) -> usize;

    fn sample_loss(&self, idx: usize, theta: &ParamVector) -> f64;

    fn sample_grad(&self, idx: usize, theta: &ParamVector) -> ParamVector;

    /// Exact Hessian-vector product of one sample's loss.
    fn sample_hvp(&self, idx: usize, theta: &ParamVector, v: &ParamVector) -> ParamVector;

    /// Dense per-sample Hessian. Default assembles it column by column from
    /// HVPs against basis vectors; models with a closed form override this.
    fn sample_hessian(&self, idx: usize, theta: &ParamVector) -> Array2<f64> {
        let p = self.dim();
        let mut h = Array2::zeros((p, p));
        let mut e = Array1::zeros(p);
        for j in 0..p {
            e[j] = 1.0;
            let col = self.sample_hvp(idx, theta, &e);
            for i in 0..p {
                h[[i, j]] = col[i];
            }
            e[j] = 0.0;
        }
        h
    }

    /// Validate a mini-batch of sample positions.
    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.num_samples();
        for &i in batch {
            if i >= n {
                return Err(Error::BatchIndexOutOfRange { index: i, len: n });
            }
        }
        Ok(())
    }

    /// Mean loss over a batch of sample positions.
    fn batch_loss(&self, batch: &[usize], theta: &ParamVector) -> f64 {
        let mut acc = 0.0;
        for &i in batch {
            acc += self.sample_loss(i, theta);
        }
        acc / batch.len() as f64
    }

    /// Mean gradient over a batch of sample positions.
    fn batch_grad(&self, batch: &[usize], theta: &ParamVector) -> ParamVector {
        let mut acc = Array1::zeros(self.dim());
        for &i in batch {
            acc += &self.sample_grad(i, theta);
        }
        acc / batch.len() as f64
    }

    /// Mean Hessian-vector product over a batch.
    fn batch_hvp(&self, batch: &[usize], theta: &ParamVector, v: &ParamVector) -> ParamVector {
        let mut acc = Array1::zeros(self.dim());
        for &i in batch {
            acc += &self.sample_hvp(i, theta, v);
        }
        acc / batch.len() as f64
    }

    /// Training loss: mean over the whole set.
    fn full_loss(&self, theta: &ParamVector) -> f64 {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.batch_loss(&all, theta)
    }

    /// Full training-set gradient.
    fn full_grad(&self, theta: &ParamVector) -> ParamVector {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.batch_grad(&all, theta)
    }

    /// Full training-set Hessian.
    fn full_hessian(&self, theta: &ParamVector) -> Array2<f64> {
        let p = self.dim();
        let n = self.num_samples();
        let mut h = Array2::zeros((p, p));
        for i in 0..n {
            h += &self.sample_hessian(i, theta);
        }
        h / n as f64
    }
}

/// The data distribution behind a model family: draws training sets, swaps
/// single samples, and answers population-level queries (exactly for finite
/// populations, by a fixed Monte-Carlo reference otherwise).
pub trait DataDistribution: Sync {
    type Model: LossModel + Clone + Send + Sync;

    /// Parameter dimension of models drawn from this distribution.
    fn dim(&self) -> usize;

    /// Draw an i.i.d. training set of size `n`.
    fn sample_dataset(&self, n: usize, seed: u64) -> Self::Model;

    /// The perturbed set: `model` with sample `i` replaced by a fresh draw.
    fn replace_sample(&self, model: &Self::Model, i: usize, rng: &mut ChaCha8Rng) -> Self::Model;

    /// Population loss L(D;θ).
    fn population_loss(&self, theta: &ParamVector) -> f64;

    /// Population gradient ∇L(D;θ).
    fn population_grad(&self, theta: &ParamVector) -> ParamVector;

    /// Population gradient covariance E[(∇L(z;θ)−∇L(D;θ))(∇L(z;θ)−∇L(D;θ))ᵀ].
    fn population_grad_cov(&self, theta: &ParamVector) -> Array2<f64>;
}
