//! Diagonal linear networks on sparse-regression data.
//!
//! The model predicts ⟨θ_a ⊙ θ_b, x⟩ from parameters θ = (θ_a, θ_b) ∈ ℝ^{2d}
//! and is trained on the ½-scaled squared error. Data is generated as
//! y = ⟨β, x⟩ + ξ with x ~ N(0, I_d), ξ ~ N(0, noise_std²), and a k-sparse β
//! whose nonzero entries are N(0, 2) (std √2).

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataDistribution, LossModel};
use crate::rng::{derive_seed, rng_from_seed};
use crate::ParamVector;

/// Std of the nonzero entries of β.
pub const BETA_STD: f64 = std::f64::consts::SQRT_2;

/// One regression sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Split θ ∈ ℝ^{2d} into its (θ_a, θ_b) halves.
pub fn split_params(theta: &ParamVector) -> Result<(&[f64], &[f64])> {
    let p = theta.len();
    if p % 2 != 0 {
        return Err(Error::DimensionMismatch {
            context: "dln parameters",
            expected: p + 1,
            got: p,
        });
    }
    let flat = theta
        .as_slice()
        .expect("parameter vectors are contiguous");
    Ok(flat.split_at(p / 2))
}

/// Effective linear weight w = θ_a ⊙ θ_b.
pub fn effective_weight(theta: &ParamVector) -> Result<Array1<f64>> {
    let (a, b) = split_params(theta)?;
    Ok(Array1::from_iter(a.iter().zip(b).map(|(ai, bi)| ai * bi)))
}

fn residual(sample: &Sample, a: &[f64], b: &[f64]) -> f64 {
    let mut pred = 0.0;
    for i in 0..a.len() {
        pred += a[i] * b[i] * sample.x[i];
    }
    pred - sample.y
}

/// Per-sample loss ½(⟨θ_a⊙θ_b, x⟩ − y)².
pub fn dln_loss(sample: &Sample, theta: &ParamVector) -> Result<f64> {
    let (a, b) = split_params(theta)?;
    if a.len() != sample.dim() {
        return Err(Error::DimensionMismatch {
            context: "dln sample",
            expected: 2 * sample.dim(),
            got: theta.len(),
        });
    }
    let r = residual(sample, a, b);
    Ok(0.5 * r * r)
}

/// Per-sample gradient: ∂/∂θ_a = r·(θ_b⊙x), ∂/∂θ_b = r·(θ_a⊙x).
pub fn dln_grad(sample: &Sample, theta: &ParamVector) -> Result<ParamVector> {
    let (a, b) = split_params(theta)?;
    if a.len() != sample.dim() {
        return Err(Error::DimensionMismatch {
            context: "dln sample",
            expected: 2 * sample.dim(),
            got: theta.len(),
        });
    }
    let d = a.len();
    let r = residual(sample, a, b);
    let mut g = Array1::zeros(2 * d);
    for i in 0..d {
        g[i] = r * b[i] * sample.x[i];
        g[d + i] = r * a[i] * sample.x[i];
    }
    Ok(g)
}

/// Exact Hessian-vector product of the per-sample loss.
///
/// With u = θ_b⊙x, w = θ_a⊙x and residual r, the Hessian is
/// [[u·uᵀ, u·wᵀ + r·diag(x)], [w·uᵀ + r·diag(x), w·wᵀ]].
pub fn dln_hvp(sample: &Sample, theta: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let (a, b) = split_params(theta)?;
    if a.len() != sample.dim() {
        return Err(Error::DimensionMismatch {
            context: "dln sample",
            expected: 2 * sample.dim(),
            got: theta.len(),
        });
    }
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            context: "dln hvp direction",
            expected: theta.len(),
            got: v.len(),
        });
    }
    let d = a.len();
    let r = residual(sample, a, b);
    let (va, vb) = v
        .as_slice()
        .expect("direction vectors are contiguous")
        .split_at(d);
    // ⟨u, v_a⟩ + ⟨w, v_b⟩ in one pass.
    let mut inner = 0.0;
    for i in 0..d {
        inner += b[i] * sample.x[i] * va[i] + a[i] * sample.x[i] * vb[i];
    }
    let mut out = Array1::zeros(2 * d);
    for i in 0..d {
        out[i] = b[i] * sample.x[i] * inner + r * sample.x[i] * vb[i];
        out[d + i] = a[i] * sample.x[i] * inner + r * sample.x[i] * va[i];
    }
    Ok(out)
}

/// A sparse-regression training set; implements [`LossModel`] over θ ∈ ℝ^{2d}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    samples: Vec<Sample>,
    beta_true: Vec<f64>,
    noise_std: f64,
    sparsity: usize,
    seed: u64,
}

impl RegressionDataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn beta_true(&self) -> &[f64] {
        &self.beta_true
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn input_dim(&self) -> usize {
        self.beta_true.len()
    }

    /// Unscaled mean squared error over the set (2× the training loss).
    pub fn mse(&self, theta: &ParamVector) -> Result<f64> {
        let (a, b) = split_params(theta)?;
        let mut acc = 0.0;
        for s in &self.samples {
            let r = residual(s, a, b);
            acc += r * r;
        }
        Ok(acc / self.samples.len() as f64)
    }

    /// Metadata JSON (β, noise std, seeds); the sample matrix goes to CSV.
    pub fn metadata_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            schema_version: u32,
            input_dim: usize,
            num_samples: usize,
            sparsity: usize,
            noise_std: f64,
            seed: u64,
            beta_true: &'a [f64],
        }
        Ok(serde_json::to_string_pretty(&Meta {
            schema_version: 1,
            input_dim: self.input_dim(),
            num_samples: self.samples.len(),
            sparsity: self.sparsity,
            noise_std: self.noise_std,
            seed: self.seed,
            beta_true: &self.beta_true,
        })?)
    }

    /// Flat CSV of the sample matrix: x_0..x_{d-1}, y per row.
    pub fn samples_csv(&self) -> String {
        let d = self.input_dim();
        let mut out = String::new();
        for j in 0..d {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("y\n");
        for s in &self.samples {
            for v in &s.x {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", s.y));
        }
        out
    }
}

/// The sparse-regression distribution: a fixed β and noise level, plus a
/// seeded Monte-Carlo reference used for population-level queries.
#[derive(Debug, Clone)]
pub struct DlnDistribution {
    beta: Array1<f64>,
    noise_std: f64,
    sparsity: usize,
    seed: u64,
    reference: Vec<Sample>,
}

/// Monte-Carlo reference size for population gradients and covariances.
pub const DEFAULT_REFERENCE_SIZE: usize = 10_000;

impl DlnDistribution {
    /// Draw a k-sparse β (nonzeros N(0,2), positions uniform) and the
    /// Monte-Carlo reference sample.
    pub fn generate(d: usize, k: usize, noise_std: f64, seed: u64) -> Result<Self> {
        Self::generate_with_reference(d, k, noise_std, seed, DEFAULT_REFERENCE_SIZE)
    }

    pub fn generate_with_reference(
        d: usize,
        k: usize,
        noise_std: f64,
        seed: u64,
        reference_size: usize,
    ) -> Result<Self> {
        if k > d || k == 0 {
            return Err(Error::invalid(
                "sparsity",
                format!("need 1 <= k <= d, got k={k}, d={d}"),
            ));
        }
        if noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be >= 0"));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[0x0be7a]));
        let mut positions = rand::seq::index::sample(&mut rng, d, k).into_vec();
        positions.sort_unstable();
        let normal = Normal::new(0.0, BETA_STD).expect("valid std");
        let mut beta = Array1::zeros(d);
        for &pos in &positions {
            beta[pos] = normal.sample(&mut rng);
        }
        let mut dist = Self {
            beta,
            noise_std,
            sparsity: k,
            seed,
            reference: Vec::new(),
        };
        dist.reference = dist.draw_samples(reference_size, derive_seed(seed, &[0x5ef]));
        Ok(dist)
    }

    /// A distribution with an explicit β (tests and degenerate setups).
    pub fn with_beta(beta: Array1<f64>, noise_std: f64, seed: u64, reference_size: usize) -> Self {
        let sparsity = beta.iter().filter(|v| **v != 0.0).count();
        let mut dist = Self {
            beta,
            noise_std,
            sparsity,
            seed,
            reference: Vec::new(),
        };
        dist.reference = dist.draw_samples(reference_size, derive_seed(seed, &[0x5ef]));
        dist
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.beta.len()
    }

    fn draw_samples(&self, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.draw_sample(&mut rng)).collect()
    }

    fn draw_sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let d = self.input_dim();
        let std_normal = Normal::new(0.0, 1.0).expect("valid std");
        let x: Vec<f64> = (0..d).map(|_| std_normal.sample(rng)).collect();
        let mut y: f64 = x.iter().zip(self.beta.iter()).map(|(xi, bi)| xi * bi).sum();
        if self.noise_std > 0.0 {
            y += self.noise_std * std_normal.sample(rng);
        }
        Sample { x, y }
    }
}

/// Generate a sparse-regression dataset with a freshly drawn β.
///
/// The β draw and the sample draws use independent streams derived from
/// `seed`, so the same β can be recovered via [`DlnDistribution::generate`].
pub fn generate_sparse_data(d: usize, n: usize, k: usize, seed: u64) -> Result<RegressionDataset> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let dist = DlnDistribution::generate_with_reference(d, k, 1.0, seed, 0)?;
    Ok(dist.sample_dataset(n, derive_seed(seed, &[0xda7a])))
}

impl LossModel for RegressionDataset {
    fn dim(&self) -> usize {
        2 * self.input_dim()
    }

    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn sample_loss(&self, idx: usize, theta: &ParamVector) -> f64 {
        dln_loss(&self.samples[idx], theta).expect("dataset dimensions are consistent")
    }

    fn sample_grad(&self, idx: usize, theta: &ParamVector) -> ParamVector {
        dln_grad(&self.samples[idx], theta).expect("dataset dimensions are consistent")
    }

    fn sample_hvp(&self, idx: usize, theta: &ParamVector, v: &ParamVector) -> ParamVector {
        dln_hvp(&self.samples[idx], theta, v).expect("dataset dimensions are consistent")
    }

    fn sample_hessian(&self, idx: usize, theta: &ParamVector) -> Array2<f64> {
        let (a, b) = split_params(theta).expect("dataset dimensions are consistent");
        let s = &self.samples[idx];
        let d = a.len();
        let r = residual(s, a, b);
        let mut h = Array2::zeros((2 * d, 2 * d));
        for i in 0..d {
            let ui = b[i] * s.x[i];
            let wi = a[i] * s.x[i];
            for j in 0..d {
                let uj = b[j] * s.x[j];
                let wj = a[j] * s.x[j];
                h[[i, j]] = ui * uj;
                h[[d + i, d + j]] = wi * wj;
                h[[i, d + j]] = ui * wj;
                h[[d + i, j]] = wi * uj;
            }
            h[[i, d + i]] += r * s.x[i];
            h[[d + i, i]] += r * s.x[i];
        }
        h
    }
}

impl DataDistribution for DlnDistribution {
    type Model = RegressionDataset;

    fn dim(&self) -> usize {
        2 * self.input_dim()
    }

    fn sample_dataset(&self, n: usize, seed: u64) -> RegressionDataset {
        RegressionDataset {
            samples: self.draw_samples(n, seed),
            beta_true: self.beta.to_vec(),
            noise_std: self.noise_std,
            sparsity: self.sparsity,
            seed,
        }
    }

    fn replace_sample(
        &self,
        model: &RegressionDataset,
        i: usize,
        rng: &mut ChaCha8Rng,
    ) -> RegressionDataset {
        let mut perturbed = model.clone();
        perturbed.samples[i] = self.draw_sample(rng);
        perturbed
    }

    /// Monte-Carlo over the fixed reference sample.
    fn population_loss(&self, theta: &ParamVector) -> f64 {
        let (a, b) = split_params(theta).expect("parameter dimension matches distribution");
        let mut acc = 0.0;
        for s in &self.reference {
            let r = residual(s, a, b);
            acc += 0.5 * r * r;
        }
        acc / self.reference.len() as f64
    }

    fn population_grad(&self, theta: &ParamVector) -> ParamVector {
        let mut acc = Array1::zeros(theta.len());
        for s in &self.reference {
            acc += &dln_grad(s, theta).expect("parameter dimension matches distribution");
        }
        acc / self.reference.len() as f64
    }

    fn population_grad_cov(&self, theta: &ParamVector) -> Array2<f64> {
        let mean = self.population_grad(theta);
        let p = theta.len();
        let mut cov = Array2::zeros((p, p));
        for s in &self.reference {
            let dev = dln_grad(s, theta).expect("parameter dimension matches distribution") - &mean;
            crate::linalg::add_scaled_outer(&mut cov, &dev, 1.0);
        }
        cov / self.reference.len() as f64
    }
}
