//! Zero-shot recognition through jointly adapted source/target features.
//!
//! Instead of scoring a raw (feature, attribute) pair directly, the
//! similarity here displaces both vectors toward each other under
//! quadratic penalties and reports the best achievable bilinear score.
//! With the penalty weights making the joint block system positive
//! definite, that score has a closed form through one factorization per
//! model, and the weight matrix is trained as a margin classifier over
//! the seen classes. The crate also ships penalty-weight grid search
//! with eigenvalue prefiltering, a synthetic problem generator, and
//! prediction/evaluation utilities.

pub mod adapt;
pub mod data;
pub mod error;
pub mod learn;
pub mod modelselect;
pub mod types;
pub mod zsr;

pub use adapt::JointSystem;
pub use error::{Error, Result};
pub use types::{
    AdaptedPair, ClassEmbedding, ClassId, Dataset, DomainSpec, EmbeddedInstance, InstanceId,
    OmegaParams, PairAssembly, RoundDiagnostics, TrainingState, WeightModel,
};

pub use nalgebra::{DMatrix, DVector};
