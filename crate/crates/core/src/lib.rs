//! Over-parameterized deep ReLU networks trained by gradient descent, with
//! measurement tools for their near-initialization behavior.

pub mod bounds;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod forge;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod probes;
pub mod rng;
pub mod training;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use network::{forward, he_init, network_gradient, ForwardTrace, GradientSet, NetworkConfig, Weights};
pub use bounds::{bartlett_bound, main_bound, neyshabur_bound, rademacher_i2, rademacher_mc_lower, BoundReport};
pub use forge::{GeneratorKind, GeneratorSpec, LabeledSet};
pub use kernel::{conjugate_kernel_gram, kernel_margin, random_feature_margin, KernelGram, MarginCertificate};
pub use probes::{PerturbationSpec, ProbeReport};
pub use training::{evaluate, gd_train, loss_gradient, TrainingConfig, TrajectoryRecord};
