//! KV-cache eviction for multi-head attention stacks: synthetic attention
//! models, importance scoring policies, budget allocation and evaluation.

pub mod attention;
pub mod checks;
pub mod error;
pub mod eval;
pub mod kvcache;
pub mod linalg;
pub mod report;
pub mod scoring;
pub mod selection;

pub use attention::{AttentionStack, LayerActivations, StackShape};
pub use error::{Error, Result};
pub use kvcache::{apply_plan, CacheView, KvCache, SelectionPlan};
pub use linalg::{Matrix, SeededRng};
pub use scoring::{Policy, PolicyConfig, ScoreTensor};
pub use selection::{compress, Allocation, BudgetSpec};
