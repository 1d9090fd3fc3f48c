//! Power flow estimation toolkit: AC power flow for ground truth, perturbed
//! dataset generation, a heterogeneous graph network with virtual-node
//! attention and slack-gated feed-forward layers, and a self-ensembling
//! iterative training and inference loop.

pub mod acpf;
pub mod case_io;
pub mod datagen;
pub mod evalbench;
pub mod flownet;
pub mod network;
pub mod seiter;
pub mod tensor;

pub use case_io::{Branch, Bus, BusType, GridCase};
pub use network::{AdmittanceMatrix, HeteroGraph};
