//! Constructed 2-D loss landscapes: a population of candidate functions made
//! of Gaussian wells and peaks, and training sets resampled from it.
//!
//! Every candidate shares a well anchored at (7,7) and carries one extra
//! critical point on a coarse lattice. Training losses are averages of
//! candidates sampled with replacement, so resampling noise can carve
//! spurious minima into the training landscape that the population loss does
//! not have.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataDistribution, LossModel};
use crate::regvar;
use crate::rng::rng_from_seed;
use crate::ParamVector;

/// Center shared by every candidate's anchored well.
pub const ANCHOR_CENTER: [f64; 2] = [7.0, 7.0];

/// Admissible centers for the extra critical point.
pub const EXTRA_LOCATIONS: [[f64; 2]; 8] = [
    [1.0, 1.0],
    [1.0, 4.0],
    [1.0, 7.0],
    [4.0, 1.0],
    [4.0, 4.0],
    [4.0, 7.0],
    [7.0, 1.0],
    [7.0, 4.0],
];

/// Candidates per population.
pub const POPULATION_SIZE: usize = 30;

/// Schema version of the JSON documents written by this module.
pub const SCHEMA_VERSION: u32 = 1;

/// Whether a bump contributes a local minimum (negated Gaussian) or a local
/// maximum (positive Gaussian).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Well,
    Peak,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::Well => -1.0,
            Orientation::Peak => 1.0,
        }
    }
}

/// One isotropic Gaussian contribution: ±height·exp(−‖x−c‖²/(2·width²)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: [f64; 2],
    pub height: f64,
    pub width: f64,
    pub orientation: Orientation,
}

impl GaussianBump {
    pub fn new(center: [f64; 2], height: f64, width: f64, orientation: Orientation) -> Result<Self> {
        if !(height > 0.0) {
            return Err(Error::invalid("height", format!("must be > 0, got {height}")));
        }
        if !(width > 0.0) {
            return Err(Error::invalid("width", format!("must be > 0, got {width}")));
        }
        Ok(Self {
            center,
            height,
            width,
            orientation,
        })
    }

    fn envelope(&self, theta: &ParamVector) -> f64 {
        let dx = theta[0] - self.center[0];
        let dy = theta[1] - self.center[1];
        let r2 = dx * dx + dy * dy;
        (-r2 / (2.0 * self.width * self.width)).exp()
    }

    pub fn value(&self, theta: &ParamVector) -> f64 {
        self.orientation.sign() * self.height * self.envelope(theta)
    }

    pub fn grad(&self, theta: &ParamVector) -> ParamVector {
        let w2 = self.width * self.width;
        let scale = -self.orientation.sign() * self.height * self.envelope(theta) / w2;
        ndarray::array![
            scale * (theta[0] - self.center[0]),
            scale * (theta[1] - self.center[1])
        ]
    }

    pub fn hessian(&self, theta: &ParamVector) -> Array2<f64> {
        let w2 = self.width * self.width;
        let f = self.orientation.sign() * self.height * self.envelope(theta);
        let dx = theta[0] - self.center[0];
        let dy = theta[1] - self.center[1];
        ndarray::array![
            [f * (dx * dx / (w2 * w2) - 1.0 / w2), f * dx * dy / (w2 * w2)],
            [f * dx * dy / (w2 * w2), f * (dy * dy / (w2 * w2) - 1.0 / w2)]
        ]
    }
}

/// One candidate loss: the anchored well plus one extra critical point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFunction {
    bumps: [GaussianBump; 2],
}

impl CandidateFunction {
    /// The first bump must be a well centered at [`ANCHOR_CENTER`]; the second
    /// must sit on one of the [`EXTRA_LOCATIONS`].
    pub fn new(anchor: GaussianBump, extra: GaussianBump) -> Result<Self> {
        if anchor.center != ANCHOR_CENTER {
            return Err(Error::invalid(
                "anchor",
                format!("anchor bump must be centered at {ANCHOR_CENTER:?}"),
            ));
        }
        if anchor.orientation != Orientation::Well {
            return Err(Error::invalid("anchor", "anchor bump must be a well"));
        }
        if !EXTRA_LOCATIONS.contains(&extra.center) {
            return Err(Error::invalid(
                "extra",
                format!("extra bump center {:?} not on the lattice", extra.center),
            ));
        }
        Ok(Self {
            bumps: [anchor, extra],
        })
    }

    pub fn bumps(&self) -> &[GaussianBump; 2] {
        &self.bumps
    }

    pub fn value(&self, theta: &ParamVector) -> f64 {
        self.bumps[0].value(theta) + self.bumps[1].value(theta)
    }

    pub fn grad(&self, theta: &ParamVector) -> ParamVector {
        self.bumps[0].grad(theta) + self.bumps[1].grad(theta)
    }

    pub fn hessian(&self, theta: &ParamVector) -> Array2<f64> {
        self.bumps[0].hessian(theta) + self.bumps[1].hessian(theta)
    }
}

/// Parameters of the truncated Gaussians that heights and widths are drawn
/// from (resampled until positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSizeDist {
    pub mean: f64,
    pub std: f64,
}

impl BumpSizeDist {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}

/// Defaults giving well-separated basins on the [0,8]² domain.
pub const DEFAULT_HEIGHT_DIST: BumpSizeDist = BumpSizeDist { mean: 8.0, std: 2.0 };
pub const DEFAULT_WIDTH_DIST: BumpSizeDist = BumpSizeDist { mean: 1.0, std: 0.2 };

/// The candidate-function population: the exact test distribution of the
/// idealized experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    candidates: Vec<CandidateFunction>,
    rho: f64,
    seed: u64,
    height_dist: BumpSizeDist,
    width_dist: BumpSizeDist,
}

fn draw_positive(rng: &mut ChaCha8Rng, dist: BumpSizeDist, name: &'static str) -> Result<f64> {
    if dist.std == 0.0 {
        if dist.mean > 0.0 {
            return Ok(dist.mean);
        }
        return Err(Error::invalid(
            name,
            "degenerate distribution with non-positive mean cannot yield a positive draw",
        ));
    }
    let normal = Normal::new(dist.mean, dist.std)
        .map_err(|e| Error::invalid(name, format!("bad normal parameters: {e}")))?;
    for _ in 0..10_000 {
        let x = normal.sample(rng);
        if x > 0.0 {
            return Ok(x);
        }
    }
    Err(Error::invalid(
        name,
        "rejection sampling failed to produce a positive draw",
    ))
}

/// Build a population of [`POPULATION_SIZE`] candidates. Each extra critical
/// point is placed uniformly on [`EXTRA_LOCATIONS`] and is a peak with
/// probability `rho`, a well otherwise.
pub fn generate_population(
    seed: u64,
    rho: f64,
    height_dist: BumpSizeDist,
    width_dist: BumpSizeDist,
) -> Result<Population> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("must be in [0,1], got {rho}")));
    }
    if height_dist.std < 0.0 || width_dist.std < 0.0 {
        return Err(Error::invalid("std", "distribution std must be >= 0"));
    }
    let mut rng = rng_from_seed(seed);
    let mut candidates = Vec::with_capacity(POPULATION_SIZE);
    for _ in 0..POPULATION_SIZE {
        let loc = EXTRA_LOCATIONS[rng.random_range(0..EXTRA_LOCATIONS.len())];
        let orientation = if rng.random::<f64>() < rho {
            Orientation::Peak
        } else {
            Orientation::Well
        };
        let anchor = GaussianBump::new(
            ANCHOR_CENTER,
            draw_positive(&mut rng, height_dist, "height")?,
            draw_positive(&mut rng, width_dist, "width")?,
            Orientation::Well,
        )?;
        let extra = GaussianBump::new(
            loc,
            draw_positive(&mut rng, height_dist, "height")?,
            draw_positive(&mut rng, width_dist, "width")?,
            orientation,
        )?;
        candidates.push(CandidateFunction::new(anchor, extra)?);
    }
    Ok(Population {
        candidates,
        rho,
        seed,
        height_dist,
        width_dist,
    })
}

impl Population {
    /// A population built from explicit candidates (used by degenerate test
    /// setups; experiment populations come from [`generate_population`]).
    pub fn from_candidates(candidates: Vec<CandidateFunction>, rho: f64, seed: u64) -> Self {
        Self {
            candidates,
            rho,
            seed,
            height_dist: DEFAULT_HEIGHT_DIST,
            width_dist: DEFAULT_WIDTH_DIST,
        }
    }

    pub fn candidates(&self) -> &[CandidateFunction] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Versioned JSON document for bit-exact replay.
    pub fn to_json(&self) -> Result<String> {
        let doc = VersionedPopulation {
            schema_version: SCHEMA_VERSION,
            population: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VersionedPopulation = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", doc.schema_version),
            ));
        }
        Ok(doc.population)
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedPopulation {
    schema_version: u32,
    #[serde(flatten)]
    population: Population,
}

/// A training set: candidate indices sampled with replacement from a
/// population. Implements [`LossModel`] with the 2-D candidate average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeDataset {
    population: Population,
    indices: Vec<usize>,
    seed: u64,
}

/// Draw a training set of [`POPULATION_SIZE`] indices i.i.d. uniform with
/// replacement.
pub fn sample_training_set(population: &Population, seed: u64) -> LandscapeDataset {
    sample_training_set_of_size(population, POPULATION_SIZE, seed)
}

/// Same as [`sample_training_set`] with an explicit draw count.
pub fn sample_training_set_of_size(
    population: &Population,
    n: usize,
    seed: u64,
) -> LandscapeDataset {
    let mut rng = rng_from_seed(seed);
    let indices = (0..n)
        .map(|_| rng.random_range(0..population.len()))
        .collect();
    LandscapeDataset {
        population: population.clone(),
        indices,
        seed,
    }
}

impl LandscapeDataset {
    /// A dataset with explicit indices (e.g. the whole population, once each).
    pub fn from_indices(population: &Population, indices: Vec<usize>) -> Result<Self> {
        for &i in &indices {
            if i >= population.len() {
                return Err(Error::BatchIndexOutOfRange {
                    index: i,
                    len: population.len(),
                });
            }
        }
        Ok(Self {
            population: population.clone(),
            indices,
            seed: 0,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = VersionedDataset {
            schema_version: SCHEMA_VERSION,
            dataset: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VersionedDataset = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", doc.schema_version),
            ));
        }
        Ok(doc.dataset)
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedDataset {
    schema_version: u32,
    #[serde(flatten)]
    dataset: LandscapeDataset,
}

impl LossModel for LandscapeDataset {
    fn dim(&self) -> usize {
        2
    }

    fn num_samples(&self) -> usize {
        self.indices.len()
    }

    fn sample_loss(&self, idx: usize, theta: &ParamVector) -> f64 {
        self.population.candidates[self.indices[idx]].value(theta)
    }

    fn sample_grad(&self, idx: usize, theta: &ParamVector) -> ParamVector {
        self.population.candidates[self.indices[idx]].grad(theta)
    }

    fn sample_hvp(&self, idx: usize, theta: &ParamVector, v: &ParamVector) -> ParamVector {
        self.sample_hessian(idx, theta).dot(v)
    }

    fn sample_hessian(&self, idx: usize, theta: &ParamVector) -> Array2<f64> {
        self.population.candidates[self.indices[idx]].hessian(theta)
    }
}

impl DataDistribution for Population {
    type Model = LandscapeDataset;

    fn dim(&self) -> usize {
        2
    }

    fn sample_dataset(&self, n: usize, seed: u64) -> LandscapeDataset {
        sample_training_set_of_size(self, n, seed)
    }

    fn replace_sample(
        &self,
        model: &LandscapeDataset,
        i: usize,
        rng: &mut ChaCha8Rng,
    ) -> LandscapeDataset {
        let mut perturbed = model.clone();
        perturbed.indices[i] = rng.random_range(0..self.len());
        perturbed
    }

    /// Exact over the finite candidate population.
    fn population_loss(&self, theta: &ParamVector) -> f64 {
        let mut acc = 0.0;
        for c in &self.candidates {
            acc += c.value(theta);
        }
        acc / self.len() as f64
    }

    fn population_grad(&self, theta: &ParamVector) -> ParamVector {
        let mut acc = Array1::zeros(2);
        for c in &self.candidates {
            acc += &c.grad(theta);
        }
        acc / self.len() as f64
    }

    fn population_grad_cov(&self, theta: &ParamVector) -> Array2<f64> {
        let rows: Vec<ParamVector> = self.candidates.iter().map(|c| c.grad(theta)).collect();
        let gm = regvar::GradMatrix::from_rows(&rows).expect("candidate gradients are 2-D");
        regvar::minibatch_cov(&gm, 1)
    }
}

/// Training loss of a dataset at θ (mean over its indexed candidates).
pub fn training_loss(ds: &LandscapeDataset, theta: &ParamVector) -> f64 {
    ds.full_loss(theta)
}

/// Analytic gradient of the training loss.
pub fn training_loss_grad(ds: &LandscapeDataset, theta: &ParamVector) -> ParamVector {
    ds.full_grad(theta)
}

/// Analytic 2×2 Hessian of the training loss.
pub fn training_loss_hessian(ds: &LandscapeDataset, theta: &ParamVector) -> Array2<f64> {
    ds.full_hessian(theta)
}

/// Population loss at θ: exact mean over the candidate population.
pub fn population_loss(pop: &Population, theta: &ParamVector) -> f64 {
    DataDistribution::population_loss(pop, theta)
}
