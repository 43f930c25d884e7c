//! Safety-alignment preserved low-rank adaptation at desk scale.
//!
//! The crate builds up in layers:
//!
//! - [`matrix`] and [`svd`]: dense `f64` linear algebra and a deterministic
//!   Jacobi SVD, plus the `MTX1` on-disk container.
//! - [`model`]: a small feed-forward model with per-layer feature capture and
//!   hand-derived reverse-mode gradients.
//! - [`adapter`]: LoRA, PiSSA, and SaLoRA adapter slots — safety projectors,
//!   task-specific initialization, residual reparameterization, and the
//!   merge/inference assembly.
//! - [`train`]: losses, AdamW, and the deterministic fine-tuning loop.
//! - [`world`] and [`probe`]: a synthetic planted-subspace workbench, linear
//!   probes, drift reports, and the gradient-overlap bound checker.
//! - [`checkpoint`]: directory layouts for models, worlds, and adapters.
//! - [`oracles`]: independent reference implementations used for
//!   verification.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod matrix;
pub mod model;
pub mod oracles;
pub mod probe;
pub mod rng;
pub mod svd;
pub mod train;
pub mod world;

pub use adapter::{
    assemble_for_inference, assemble_salora, assemble_salora_lora_init, compute_safety_projector,
    init_lora, init_pissa, merge_for_saving, safety_basis, task_specific_init, AdapterKind,
    AdapterRecord, AdapterSlot, SafetyContext, TaskContext,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{Activation, AdapterGrads, FeatureTrace, LinearLayer, ToyModel};
pub use probe::{
    drift_report, layer_features, probe_accuracy, proposition1_check, train_probe, DriftRow,
    LinearProbe, ProbeDataset, Prop1Row, PROBE_ITERS, PROBE_LR,
};
pub use svd::{min_singular_value, svd, top_left_singular_vectors, SvdResult};
pub use train::{
    adamw_step, fine_tune, frozen_digest, loss_and_grad, loss_and_output_grad, AdamWParams,
    AdapterSpec, Dataset, LossKind, LossPoint, Method, MethodContexts, OptimizerState, SafetyCheck,
    TrainConfig, TrainOutcome,
};
pub use world::{build_world, PlantedLayer, SyntheticWorld, WorldConfig};
