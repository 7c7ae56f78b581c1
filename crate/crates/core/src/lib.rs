//! Deep forest inference engine plus a cycle-accurate software model of a
//! tree-ensemble FPGA accelerator.
//!
//! The crate is organized around four pipelines that must agree with each
//! other:
//!
//! * [`model`] — the logical, float-domain cascade-forest model and the
//!   reference inference engine. Ground truth for everything else.
//! * [`codec`] — fixed-point quantization and the 32-bit-per-node, pre-order
//!   packed RAM images consumed by the accelerator, plus the `.dfpack`
//!   container format and a quantized (integer-domain) reference engine.
//! * [`sim`] — the accelerator model itself: NCU node state machines with a
//!   4-cycle node operation, PEs of parallel NCUs serially draining 8-tree
//!   groups, per-layer pipelining, and throughput/latency/imbalance reports.
//! * [`train`] — desk-scale training: random forests, completely-random tree
//!   forests, cascade growth with early stopping, and multi-grained scanning.
//!
//! [`synth`] provides deterministic synthetic datasets and model generators
//! used by the CLI, the browser demo, and the test suites.

pub mod codec;
pub mod model;
pub mod sim;
pub mod synth;
pub mod train;

pub use codec::{quantize_model, NodeWord, PackedModel, QuantizationMap, QuantizedModel};
pub use model::{CascadeModel, ClassVector, DecisionTree, Forest, ForestKind, TreeNode};
pub use sim::{pipeline_run, PerfReport, SimConfig};
