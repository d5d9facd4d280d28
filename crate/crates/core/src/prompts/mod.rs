//! Explicit text prompt and implicit regional-flow prompt.

pub mod explicit;
pub mod flow;

pub use explicit::{build_explicit_prompt, embed_prompt, ExplicitPrompt, PromptEmbedding, PromptTokens, Vocab};
pub use flow::{compute_flow_grid, FlowEncoder, GridMeta, RegionalFlowGrid, RoadConditionField};
