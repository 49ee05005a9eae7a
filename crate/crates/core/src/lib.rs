//! Memory-efficient zeroth-order optimization with layer-wise sparse
//! perturbations.

pub mod alloc;
pub mod engine;
pub mod error;
pub mod models;
pub mod oracle;
pub mod param;
pub mod real;
pub mod rng;

pub use engine::{
    estimate_gradient_dense, estimate_gradient_sparse, perturb_parameters, select_dropped_layers,
    spsa_projected_gradient, OptimizerConfig, PerturbationSpec, SpsaEstimate, StepRecord,
    ZoOptimizer,
};
pub use error::{Error, Result};
pub use models::{Batch, Differentiable, Labels, Objective};
pub use param::{build_partition, LayerPartition, LayerSet, ParameterVector, Segment};
pub use real::Real;
pub use rng::{derive_seed, GaussianStream, NormalSource, SeedPurpose, SeedSchedule};

#[cfg(test)]
#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc;
