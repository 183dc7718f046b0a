//! The optimizer families: full-batch GD, mini-batch SGD (with or without
//! replacement), GD with isotropic Gaussian noise, and SGD with the explicit
//! variability regularizers. All runs are fully determined by
//! (seed, config, θ₀, training set).

use std::io::{Read, Write};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossModel;
use crate::regvar;
use crate::rng::rng_from;
use crate::ParamVector;

const BATCH_STREAM: u64 = 0xba7c;
const NOISE_STREAM: u64 = 0x01e5;

/// Geometric learning-rate schedule η_t = η₀·decay^t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub decay: f64,
    pub decay_unit: DecayUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    PerIteration,
    PerEpoch,
}

impl LrSchedule {
    pub fn per_iteration(eta0: f64, decay: f64) -> Self {
        Self {
            eta0,
            decay,
            decay_unit: DecayUnit::PerIteration,
        }
    }

    pub fn constant(eta0: f64) -> Self {
        Self::per_iteration(eta0, 1.0)
    }

    /// Learning rate for 0-based step `t`.
    pub fn eta(&self, t: usize, steps_per_epoch: usize) -> f64 {
        let exponent = match self.decay_unit {
            DecayUnit::PerIteration => t,
            DecayUnit::PerEpoch => t / steps_per_epoch.max(1),
        };
        self.eta0 * self.decay.powi(exponent as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) {
            return Err(Error::invalid("eta0", format!("must be > 0, got {}", self.eta0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(
                "decay",
                format!("must be in (0,1], got {}", self.decay),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Sgd,
    NoisyGd,
    SgdWithReg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchReplacement {
    With,
    Without,
}

/// Full specification of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub batch_size: usize,
    pub replacement: BatchReplacement,
    /// NoisyGD only: per-coordinate std of the injected Gaussian noise.
    pub noise_std: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub omit_batch_grad: bool,
    /// Approximate the batch gradient in Reg2 by the trailing average of the
    /// previous k mini-batch gradients.
    pub reg2_trailing: Option<usize>,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    pub iterations: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn gd(schedule: LrSchedule, iterations: usize) -> Self {
        Self {
            kind: OptimizerKind::Gd,
            batch_size: 1,
            replacement: BatchReplacement::With,
            noise_std: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            omit_batch_grad: false,
            reg2_trailing: None,
            clip_norm: None,
            schedule,
            iterations,
            seed: 0,
        }
    }

    pub fn sgd(schedule: LrSchedule, iterations: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            batch_size,
            seed,
            ..Self::gd(schedule, iterations)
        }
    }

    pub fn noisy_gd(schedule: LrSchedule, iterations: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::NoisyGd,
            noise_std,
            seed,
            ..Self::gd(schedule, iterations)
        }
    }

    pub fn sgd_with_reg(
        schedule: LrSchedule,
        iterations: usize,
        batch_size: usize,
        lambda1: f64,
        lambda2: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: OptimizerKind::SgdWithReg,
            batch_size,
            lambda1,
            lambda2,
            seed,
            ..Self::gd(schedule, iterations)
        }
    }

    pub fn with_replacement(mut self, replacement: BatchReplacement) -> Self {
        self.replacement = replacement;
        self
    }

    fn uses_batches(&self) -> bool {
        matches!(self.kind, OptimizerKind::Sgd | OptimizerKind::SgdWithReg)
    }

    pub fn validate(&self, num_samples: usize) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be >= 0"));
        }
        if self.noise_std != 0.0 && self.kind != OptimizerKind::NoisyGd {
            return Err(Error::invalid("noise_std", "only NoisyGD injects noise"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::invalid("lambda", "strengths must be >= 0"));
        }
        if (self.lambda1 != 0.0 || self.lambda2 != 0.0) && self.kind != OptimizerKind::SgdWithReg {
            return Err(Error::invalid(
                "lambda",
                "regularizer strengths require the SGDwReg kind",
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm", "must be > 0"));
            }
        }
        if self.uses_batches() && self.replacement == BatchReplacement::Without {
            if num_samples % self.batch_size != 0 {
                return Err(Error::invalid(
                    "batch_size",
                    format!(
                        "without-replacement epochs need batch size dividing N={num_samples}, got {}",
                        self.batch_size
                    ),
                ));
            }
        }
        if let Some(k) = self.reg2_trailing {
            if k == 0 {
                return Err(Error::invalid("reg2_trailing", "window must be >= 1"));
            }
        }
        Ok(())
    }

    /// Batched steps per epoch (N/B); 1 for full-batch kinds.
    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        if self.uses_batches() {
            (num_samples / self.batch_size).max(1)
        } else {
            1
        }
    }
}

/// Per-iterate scalars logged during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub train_loss: f64,
    pub grad_norm: f64,
    pub reg1: f64,
    pub reg2: f64,
}

/// A recorded run: iterates θ₀..θ_T, the mini-batch index record, and
/// per-iterate diagnostics. `diverged` marks runs cut short by non-finite
/// values; their iterate list is truncated at the last finite point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<ParamVector>,
    pub batch_indices: Vec<Vec<usize>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn final_iterate(&self) -> &ParamVector {
        self.iterates.last().expect("trajectory holds at least θ0")
    }

    pub fn dim(&self) -> usize {
        self.iterates[0].len()
    }

    /// CSV with one row per iterate: iter, θ coordinates, diagnostics.
    pub fn to_csv(&self) -> String {
        let p = self.dim();
        let mut out = String::from("iter");
        for j in 0..p {
            out.push_str(&format!(",theta{j}"));
        }
        out.push_str(",train_loss,grad_norm,reg1,reg2\n");
        for (t, theta) in self.iterates.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in theta.iter() {
                out.push_str(&format!(",{v}"));
            }
            if let Some(d) = self.diagnostics.get(t) {
                out.push_str(&format!(
                    ",{},{},{},{}\n",
                    d.train_loss, d.grad_norm, d.reg1, d.reg2
                ));
            } else {
                out.push_str(",,,,\n");
            }
        }
        out
    }

    /// Compact little-endian binary encoding.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VLT1")?;
        let p = self.dim() as u32;
        w.write_all(&p.to_le_bytes())?;
        w.write_all(&(self.iterates.len() as u32).to_le_bytes())?;
        w.write_all(&(self.batch_indices.len() as u32).to_le_bytes())?;
        w.write_all(&(self.diagnostics.len() as u32).to_le_bytes())?;
        w.write_all(&[self.diverged as u8])?;
        for theta in &self.iterates {
            for v in theta.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for batch in &self.batch_indices {
            w.write_all(&(batch.len() as u32).to_le_bytes())?;
            for &i in batch {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        for d in &self.diagnostics {
            for v in [d.train_loss, d.grad_norm, d.reg1, d.reg2] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        }
        fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VLT1" {
            return Err(Error::MalformedData("bad trajectory magic".into()));
        }
        let p = read_u32(&mut r)? as usize;
        let n_iter = read_u32(&mut r)? as usize;
        let n_steps = read_u32(&mut r)? as usize;
        let n_diag = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if n_iter == 0 {
            return Err(Error::MalformedData("trajectory without iterates".into()));
        }
        let mut iterates = Vec::with_capacity(n_iter);
        for _ in 0..n_iter {
            let mut theta = Array1::zeros(p);
            for j in 0..p {
                theta[j] = read_f64(&mut r)?;
            }
            iterates.push(theta);
        }
        let mut batch_indices = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let len = read_u32(&mut r)? as usize;
            let mut batch = Vec::with_capacity(len);
            for _ in 0..len {
                batch.push(read_u32(&mut r)? as usize);
            }
            batch_indices.push(batch);
        }
        let mut diagnostics = Vec::with_capacity(n_diag);
        for _ in 0..n_diag {
            diagnostics.push(StepDiagnostics {
                train_loss: read_f64(&mut r)?,
                grad_norm: read_f64(&mut r)?,
                reg1: read_f64(&mut r)?,
                reg2: read_f64(&mut r)?,
            });
        }
        Ok(Self {
            iterates,
            batch_indices,
            diagnostics,
            diverged: flag[0] != 0,
        })
    }
}

fn clip(update: ParamVector, clip_norm: Option<f64>) -> ParamVector {
    if let Some(c) = clip_norm {
        let norm = update.dot(&update).sqrt();
        if norm > c {
            return update * (c / norm);
        }
    }
    update
}

fn check_finite(v: &ParamVector, what: &'static str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what, sample: None });
    }
    Ok(())
}

/// One full-batch GD step: θ' = θ − η·∇L(S;θ).
pub fn step_gd<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    eta: f64,
    clip_norm: Option<f64>,
) -> Result<ParamVector> {
    let g = model.full_grad(theta);
    check_finite(&g, "full gradient")?;
    Ok(theta - &(clip(g, clip_norm) * eta))
}

/// One mini-batch SGD step: θ' = θ − η·∇L(S_b;θ).
pub fn step_sgd<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    eta: f64,
    batch: &[usize],
    clip_norm: Option<f64>,
) -> Result<ParamVector> {
    model.check_batch(batch)?;
    let g = model.batch_grad(batch, theta);
    check_finite(&g, "batch gradient")?;
    Ok(theta - &(clip(g, clip_norm) * eta))
}

/// One noisy GD step: θ' = θ − η·(∇L(S;θ) + ξ), ξ ~ N(0, noise_std²·I).
pub fn step_noisygd<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    eta: f64,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
    clip_norm: Option<f64>,
) -> Result<ParamVector> {
    if noise_std < 0.0 {
        return Err(Error::invalid("noise_std", "must be >= 0"));
    }
    let mut g = model.full_grad(theta);
    check_finite(&g, "full gradient")?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        for v in g.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(theta - &(clip(g, clip_norm) * eta))
}

/// One regularized SGD step:
/// θ' = θ − η·(∇L(S_b;θ) + λ₁·∇Reg1(θ) + λ₂·∇Reg2(θ)).
///
/// `reg2_reference` switches Reg2 to a frozen reference gradient (the
/// trailing-average approximation); `omit_batch_grad` drops the batch
/// gradient term entirely.
pub fn step_sgd_reg<M: LossModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    eta: f64,
    batch: &[usize],
    lambda1: f64,
    lambda2: f64,
    omit_batch_grad: bool,
    reg2_reference: Option<&ParamVector>,
    clip_norm: Option<f64>,
) -> Result<ParamVector> {
    model.check_batch(batch)?;
    let mut g = model.batch_grad(batch, theta);
    if lambda1 > 0.0 {
        let gm = regvar::per_sample_grads(model, theta)?;
        let (_, grad1) = regvar::reg1(model, theta, &gm)?;
        g.scaled_add(lambda1, &grad1);
    }
    if lambda2 > 0.0 {
        let (_, grad2) = if omit_batch_grad {
            regvar::reg2(model, theta, batch, true)?
        } else if let Some(reference) = reg2_reference {
            regvar::reg2_with_reference(model, theta, batch, reference)?
        } else {
            regvar::reg2(model, theta, batch, false)?
        };
        g.scaled_add(lambda2, &grad2);
    }
    check_finite(&g, "regularized gradient")?;
    Ok(theta - &(clip(g, clip_norm) * eta))
}

enum BatchSource<'a> {
    Fresh,
    Replay(&'a [Vec<usize>]),
}

/// Run a configured optimizer for `config.iterations` steps.
pub fn run<M: LossModel + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    theta0: &ParamVector,
) -> Result<Trajectory> {
    run_inner(model, config, theta0, BatchSource::Fresh)
}

/// Run with a fixed batch-index sequence instead of drawing fresh batches.
///
/// Perturbed retraining uses this to replay a base run's sample selections so
/// that data replacement is the only difference between runs. The noise
/// stream (NoisyGD) still comes from `config.seed` and therefore matches the
/// base run's draws.
pub fn run_with_batches<M: LossModel + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    theta0: &ParamVector,
    batches: &[Vec<usize>],
) -> Result<Trajectory> {
    if config.uses_batches() && batches.len() < config.iterations {
        return Err(Error::invalid(
            "batches",
            format!(
                "need {} replay batches, got {}",
                config.iterations,
                batches.len()
            ),
        ));
    }
    run_inner(model, config, theta0, BatchSource::Replay(batches))
}

fn run_inner<M: LossModel + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    theta0: &ParamVector,
    source: BatchSource<'_>,
) -> Result<Trajectory> {
    let n = model.num_samples();
    config.validate(n)?;
    if theta0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial point",
            expected: model.dim(),
            got: theta0.len(),
        });
    }
    let steps_per_epoch = config.steps_per_epoch(n);
    let mut batch_rng = rng_from(config.seed, &[BATCH_STREAM]);
    let mut noise_rng = rng_from(config.seed, &[NOISE_STREAM]);
    let mut permutation: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a reshuffle on first use

    let mut trajectory = Trajectory {
        iterates: vec![theta0.clone()],
        batch_indices: Vec::new(),
        diagnostics: Vec::new(),
        diverged: false,
    };
    let mut trailing: std::collections::VecDeque<ParamVector> =
        std::collections::VecDeque::new();

    for t in 0..=config.iterations {
        let theta = trajectory.iterates[t].clone();
        let gm = match regvar::per_sample_grads(model, &theta) {
            Ok(gm) => gm,
            Err(Error::NonFinite { .. }) => {
                trajectory.diverged = true;
                trajectory.iterates.truncate(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let train_loss = model.full_loss(&theta);
        if !train_loss.is_finite() {
            trajectory.diverged = true;
            trajectory.iterates.truncate(t);
            break;
        }
        let g_full = gm.batch_grad().clone();
        let reg1_val = regvar::reg1_value(&gm);

        if t == config.iterations {
            trajectory.diagnostics.push(StepDiagnostics {
                train_loss,
                grad_norm: g_full.dot(&g_full).sqrt(),
                reg1: reg1_val,
                reg2: 0.0,
            });
            break;
        }

        let eta = config.schedule.eta(t, steps_per_epoch);
        let batch: Vec<usize> = if config.uses_batches() {
            match source {
                BatchSource::Fresh => match config.replacement {
                    BatchReplacement::With => {
                        let mut b: Vec<usize> = (0..config.batch_size)
                            .map(|_| batch_rng.random_range(0..n))
                            .collect();
                        b.sort_unstable();
                        b
                    }
                    BatchReplacement::Without => {
                        if cursor + config.batch_size > n {
                            permutation.shuffle(&mut batch_rng);
                            cursor = 0;
                        }
                        let mut b = permutation[cursor..cursor + config.batch_size].to_vec();
                        cursor += config.batch_size;
                        b.sort_unstable();
                        b
                    }
                },
                BatchSource::Replay(batches) => batches[t].clone(),
            }
        } else {
            Vec::new()
        };

        // Mean of the already-computed per-sample rows; identical float path
        // to model.batch_grad for the same index order.
        let g_batch = if config.uses_batches() {
            let mut acc = Array1::zeros(model.dim());
            for &i in &batch {
                acc += &gm.rows().row(i);
            }
            acc / batch.len() as f64
        } else {
            g_full.clone()
        };

        let reg2_val = if config.uses_batches() {
            if config.omit_batch_grad {
                g_batch.dot(&g_batch)
            } else if config.reg2_trailing.is_some() && !trailing.is_empty() {
                let reference = trailing_mean(&trailing, model.dim());
                let dev = &g_batch - &reference;
                dev.dot(&dev)
            } else {
                let dev = &g_batch - &g_full;
                dev.dot(&dev)
            }
        } else {
            0.0
        };

        trajectory.diagnostics.push(StepDiagnostics {
            train_loss,
            grad_norm: g_full.dot(&g_full).sqrt(),
            reg1: reg1_val,
            reg2: reg2_val,
        });

        let stepped = match config.kind {
            OptimizerKind::Gd => {
                let g = g_full.clone();
                check_finite(&g, "full gradient").map(|_| theta.clone() - &(clip(g, config.clip_norm) * eta))
            }
            OptimizerKind::NoisyGd => {
                let mut g = g_full.clone();
                if config.noise_std > 0.0 {
                    let normal = Normal::new(0.0, config.noise_std).expect("validated std");
                    for v in g.iter_mut() {
                        *v += normal.sample(&mut noise_rng);
                    }
                }
                check_finite(&g, "noisy gradient")
                    .map(|_| theta.clone() - &(clip(g, config.clip_norm) * eta))
            }
            OptimizerKind::Sgd => {
                let g = g_batch.clone();
                check_finite(&g, "batch gradient")
                    .map(|_| theta.clone() - &(clip(g, config.clip_norm) * eta))
            }
            OptimizerKind::SgdWithReg => {
                let mut g = g_batch.clone();
                let result = (|| -> Result<()> {
                    if config.lambda1 > 0.0 {
                        let (_, grad1) = regvar::reg1(model, &theta, &gm)?;
                        g.scaled_add(config.lambda1, &grad1);
                    }
                    if config.lambda2 > 0.0 {
                        let (_, grad2) = if config.omit_batch_grad {
                            regvar::reg2(model, &theta, &batch, true)?
                        } else if config.reg2_trailing.is_some() && !trailing.is_empty() {
                            let reference = trailing_mean(&trailing, model.dim());
                            regvar::reg2_with_reference(model, &theta, &batch, &reference)?
                        } else {
                            regvar::reg2(model, &theta, &batch, false)?
                        };
                        g.scaled_add(config.lambda2, &grad2);
                    }
                    check_finite(&g, "regularized gradient")
                })();
                result.map(|_| theta.clone() - &(clip(g, config.clip_norm) * eta))
            }
        };

        let next = match stepped {
            Ok(next) => next,
            Err(Error::NonFinite { .. }) => {
                trajectory.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        if let Some(k) = config.reg2_trailing {
            trailing.push_back(g_batch);
            while trailing.len() > k {
                trailing.pop_front();
            }
        }
        if config.uses_batches() {
            trajectory.batch_indices.push(batch);
        }
        if next.iter().any(|v| !v.is_finite()) {
            trajectory.diverged = true;
            break;
        }
        trajectory.iterates.push(next);
    }

    Ok(trajectory)
}

fn trailing_mean(window: &std::collections::VecDeque<ParamVector>, dim: usize) -> ParamVector {
    let mut acc = Array1::zeros(dim);
    for g in window {
        acc += g;
    }
    acc / window.len() as f64
}

/// Mean gradient-covariance trace over the first `iters` GD iterates,
/// used to calibrate NoisyGD's per-coordinate noise std so the injected
/// noise matches SGD's gradient noise in trace.
pub fn calibrate_noise_std<M: LossModel + ?Sized>(
    model: &M,
    schedule: LrSchedule,
    theta0: &ParamVector,
    iters: usize,
    batch_size: usize,
) -> Result<f64> {
    let config = OptimizerConfig::gd(schedule, iters);
    let warmup = run(model, &config, theta0)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for theta in warmup.iterates.iter().take(iters) {
        let gm = regvar::per_sample_grads(model, theta)?;
        acc += regvar::minibatch_cov_trace(&gm, batch_size);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    let mean_trace = acc / count as f64;
    Ok((mean_trace / model.dim() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regvar::test_support::ScalarQuadratics;
    use ndarray::array;

    fn quad(centers: &[f64]) -> ScalarQuadratics {
        ScalarQuadratics {
            centers: centers.to_vec(),
        }
    }

    #[test]
    fn gd_step_on_quadratic_is_hand_value() {
        // ½θ² at θ=1 with η=0.1 → 0.9.
        let model = quad(&[0.0]);
        let next = step_gd(&model, &array![1.0], 0.1, None).unwrap();
        assert_eq!(next[0], 0.9);
    }

    #[test]
    fn gd_fixed_point_at_zero_gradient() {
        let model = quad(&[2.0]);
        let next = step_gd(&model, &array![2.0], 0.5, None).unwrap();
        assert_eq!(next[0], 2.0);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        // ‖g‖ = 10 clipped to 1: update uses g/10.
        let model = quad(&[0.0]);
        let next = step_gd(&model, &array![10.0], 0.1, Some(1.0)).unwrap();
        assert_eq!(next[0], 10.0 - 0.1);
    }

    #[test]
    fn sgd_step_moves_toward_selected_center() {
        let model = quad(&[0.0, 2.0]);
        let theta = array![1.0];
        let toward_two = step_sgd(&model, &theta, 0.1, &[1], None).unwrap();
        assert!((toward_two[0] - 1.1).abs() < 1e-15);
        let toward_zero = step_sgd(&model, &theta, 0.1, &[0], None).unwrap();
        assert!((toward_zero[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_full_batch_step_equals_gd_step() {
        let model = quad(&[0.0, 1.0, 5.0]);
        let theta = array![2.5];
        let gd = step_gd(&model, &theta, 0.3, None).unwrap();
        let sgd = step_sgd(&model, &theta, 0.3, &[0, 1, 2], None).unwrap();
        assert_eq!(gd, sgd);
    }

    #[test]
    fn zero_noise_noisygd_equals_gd() {
        let model = quad(&[1.0, 3.0]);
        let schedule = LrSchedule::per_iteration(0.2, 0.99);
        let gd = run(&model, &OptimizerConfig::gd(schedule, 50), &array![0.0]).unwrap();
        let noisy = run(
            &model,
            &OptimizerConfig::noisy_gd(schedule, 50, 0.0, 17),
            &array![0.0],
        )
        .unwrap();
        assert_eq!(gd.iterates, noisy.iterates);
        assert_eq!(gd.diagnostics, noisy.diagnostics);
    }

    #[test]
    fn noisygd_noise_has_requested_moments() {
        let model = quad(&[0.0]);
        let theta = array![1.0];
        let eta = 0.5;
        let noise_std = 0.7;
        let gd_next = step_gd(&model, &theta, eta, None).unwrap();
        let mut rng = crate::rng::rng_from_seed(99);
        let k = 4000;
        let mut draws = Vec::with_capacity(k);
        for _ in 0..k {
            let noisy_next = step_noisygd(&model, &theta, eta, noise_std, &mut rng, None).unwrap();
            // θ'_noisy − θ'_gd = −η·ξ
            draws.push((noisy_next[0] - gd_next[0]) / -eta);
        }
        let mean = draws.iter().sum::<f64>() / k as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        let stderr = (var / k as f64).sqrt();
        assert!(mean.abs() < 3.0 * stderr, "noise mean {mean}");
        let std_err_of_std = noise_std / (2.0 * k as f64).sqrt();
        assert!(
            (var.sqrt() - noise_std).abs() < 3.0 * std_err_of_std,
            "noise std {}",
            var.sqrt()
        );
    }

    #[test]
    fn zero_strength_reg_step_equals_sgd_step() {
        let model = quad(&[0.0, 2.0, 4.0]);
        let theta = array![1.7];
        let sgd = step_sgd(&model, &theta, 0.2, &[1], None).unwrap();
        let reg = step_sgd_reg(&model, &theta, 0.2, &[1], 0.0, 0.0, false, None, None).unwrap();
        assert_eq!(sgd, reg);
    }

    #[test]
    fn identical_samples_make_regularizers_inert() {
        let model = quad(&[1.5, 1.5, 1.5]);
        let theta = array![0.3];
        let sgd = step_sgd(&model, &theta, 0.2, &[0], None).unwrap();
        let reg = step_sgd_reg(&model, &theta, 0.2, &[0], 2.0, 3.0, false, None, None).unwrap();
        assert!((sgd[0] - reg[0]).abs() < 1e-15);
    }

    #[test]
    fn empty_run_returns_initial_point() {
        let model = quad(&[0.0]);
        let config = OptimizerConfig::gd(LrSchedule::constant(0.1), 0);
        let traj = run(&model, &config, &array![3.0]).unwrap();
        assert_eq!(traj.iterates.len(), 1);
        assert_eq!(traj.iterates[0], array![3.0]);
        assert_eq!(traj.diagnostics.len(), 1);
        assert!(!traj.diverged);
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let model = quad(&[0.0, 1.0, 2.0, 3.0]);
        let config = OptimizerConfig::sgd(LrSchedule::per_iteration(0.3, 0.98), 64, 2, 5)
            .with_replacement(BatchReplacement::Without);
        let a = run(&model, &config, &array![2.0]).unwrap();
        let b = run(&model, &config, &array![2.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn without_replacement_epochs_cover_every_sample() {
        let model = quad(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let config = OptimizerConfig::sgd(LrSchedule::constant(0.01), 18, 2, 11)
            .with_replacement(BatchReplacement::Without);
        let traj = run(&model, &config, &array![1.0]).unwrap();
        let steps_per_epoch = 3;
        for epoch in 0..6 {
            let mut seen: Vec<usize> = traj.batch_indices
                [epoch * steps_per_epoch..(epoch + 1) * steps_per_epoch]
                .iter()
                .flatten()
                .copied()
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3, 4, 5], "epoch {epoch}");
        }
    }

    #[test]
    fn without_replacement_requires_divisible_batch() {
        let model = quad(&[0.0, 1.0, 2.0]);
        let config = OptimizerConfig::sgd(LrSchedule::constant(0.01), 4, 2, 1)
            .with_replacement(BatchReplacement::Without);
        assert!(run(&model, &config, &array![0.0]).is_err());
    }

    #[test]
    fn descent_is_monotone_on_convex_quadratic_below_critical_rate() {
        // L = 1, so any η < 2 descends; use 1.5.
        let model = quad(&[-1.0, 0.5, 2.5]);
        let config = OptimizerConfig::gd(LrSchedule::constant(1.5), 40);
        let traj = run(&model, &config, &array![7.0]).unwrap();
        for w in traj.diagnostics.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-12);
        }
    }

    #[test]
    fn divergent_run_is_flagged_not_errored() {
        let model = quad(&[0.0]);
        let config = OptimizerConfig::gd(LrSchedule::constant(4.0), 1000);
        let traj = run(&model, &config, &array![1.0]).unwrap();
        assert!(traj.diverged);
        assert!(traj.iterates.len() < 1001);
        assert!(traj
            .iterates
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn replayed_batches_reproduce_the_run() {
        let model = quad(&[0.0, 1.0, 2.0, 5.0]);
        let config = OptimizerConfig::sgd(LrSchedule::per_iteration(0.2, 0.99), 32, 1, 77);
        let base = run(&model, &config, &array![3.0]).unwrap();
        let replay = run_with_batches(&model, &config, &array![3.0], &base.batch_indices).unwrap();
        assert_eq!(base.iterates, replay.iterates);
        assert_eq!(base.batch_indices, replay.batch_indices);
    }

    #[test]
    fn schedule_decays_per_iteration_and_per_epoch() {
        let per_iter = LrSchedule::per_iteration(1.0, 0.5);
        assert_eq!(per_iter.eta(0, 10), 1.0);
        assert_eq!(per_iter.eta(2, 10), 0.25);
        let per_epoch = LrSchedule {
            eta0: 1.0,
            decay: 0.5,
            decay_unit: DecayUnit::PerEpoch,
        };
        assert_eq!(per_epoch.eta(9, 10), 1.0);
        assert_eq!(per_epoch.eta(10, 10), 0.5);
        assert_eq!(per_epoch.eta(25, 10), 0.25);
    }

    #[test]
    fn config_validation_rejects_misused_fields() {
        let schedule = LrSchedule::constant(0.1);
        let mut bad_noise = OptimizerConfig::sgd(schedule, 10, 1, 0);
        bad_noise.noise_std = 0.5;
        assert!(bad_noise.validate(4).is_err());
        let mut bad_lambda = OptimizerConfig::gd(schedule, 10);
        bad_lambda.lambda1 = 0.1;
        assert!(bad_lambda.validate(4).is_err());
        let mut bad_clip = OptimizerConfig::gd(schedule, 10);
        bad_clip.clip_norm = Some(0.0);
        assert!(bad_clip.validate(4).is_err());
    }

    #[test]
    fn trajectory_binary_round_trip() {
        let model = quad(&[0.0, 2.0]);
        let config = OptimizerConfig::sgd(LrSchedule::per_iteration(0.3, 0.95), 12, 1, 3);
        let traj = run(&model, &config, &array![1.0]).unwrap();
        let mut buf = Vec::new();
        traj.write_binary(&mut buf).unwrap();
        let back = Trajectory::read_binary(buf.as_slice()).unwrap();
        assert_eq!(traj, back);
    }

    #[test]
    fn trajectory_csv_has_expected_shape() {
        let model = quad(&[0.0]);
        let config = OptimizerConfig::gd(LrSchedule::constant(0.1), 3);
        let traj = run(&model, &config, &array![1.0]).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,theta0,train_loss,grad_norm,reg1,reg2");
        assert_eq!(lines.len(), 5);
    }
}
