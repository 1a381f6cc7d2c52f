//! Federated class-incremental learning with frozen transformer backbones and
//! trainable enhancer adapter groups.
//!
//! Layout:
//! - [`tensor`]: dense tensors with reverse-mode autodiff
//! - [`backbone`]: the frozen tiny transformer encoder
//! - [`enhancer`]: adapters, groups, the pool and the prototype selector
//! - [`memory`]: exemplar memory, distillation sets, auxiliary data, entropy
//! - [`distill`]: temporary-group training and local/global consolidation
//! - [`federation`]: clients, server window, wire format, cost accounting
//! - [`harness`]: synthetic streams, experiment runners, reports

pub mod backbone;
pub mod distill;
pub mod enhancer;
pub mod federation;
pub mod harness;
pub mod memory;
pub mod parallel;
pub mod tensor;

pub use backbone::{build_backbone, BackboneConfig, FrozenBackbone};
pub use enhancer::{ClassId, EnhancerGroup, EnhancerParams, EnhancerPool, GroupId, SelectModule};
pub use tensor::{Activation, Graph, Tensor, Var};
