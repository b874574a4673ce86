//! Core library of an industrial assembly assistant: knowledge base,
//! perception context, step experts, adaptive step fusion, role-specialised
//! agents, coordination topologies and evaluation metrics.

// `!(x >= y)` is used on purpose where NaN must be rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod asf;
pub mod kb;
pub mod metrics;
pub mod perception;
pub mod step_experts;
pub mod text;
pub mod topologies;

pub use agents::{AgentRole, Backend, TemplateBackend};
pub use asf::{AsfConfig, AsfState};
pub use kb::{load_kb, KnowledgeBase};
pub use topologies::{AnswerTrace, Team, Topology, TopologyConfig};
