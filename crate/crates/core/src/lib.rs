//! Federated and secure distributed training of a small DLRM click model.
//!
//! Nodes talk over mutually attested, encrypted channels ([`channel`]) built
//! on simulated enclave quotes ([`attest`]). A parameter server aggregates
//! worker gradients each round ([`protocol`]); [`orchestration`] wires the
//! roles together for both horizontal federated learning and chief-driven
//! secure distributed training.

pub mod dlrm;
pub mod datagen;
pub mod attest;
pub mod channel;
pub mod protocol;
pub mod orchestration;
pub mod metrics;
pub mod bench;
