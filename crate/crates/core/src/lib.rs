//! Core library of the variability lab: constructed loss landscapes,
//! diagonal linear networks, seeded optimizers, and the gradient-variability
//! estimators (regularizers, mini-batch/bootstrap covariances, perturbed
//! retraining) used to study how gradient noise shapes generalization.
//!
//! The crate is organized around a [`model::LossModel`] trait: a training set
//! with analytic per-sample losses, gradients, and Hessian-vector products.
//! Two concrete model families are provided ([`landscape`] and [`dln`]),
//! optimizers live in [`optim`], variability machinery in [`regvar`], and the
//! numerical theory checks in [`gapcheck`].

pub mod dln;
pub mod error;
pub mod fdiff;
pub mod gapcheck;
pub mod landscape;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod regvar;
pub mod rng;

pub use error::{Error, Result};

/// A point in parameter space. 2-D for landscape models, 2d-D for DLN.
pub type ParamVector = ndarray::Array1<f64>;
