//! The frozen policy network: vocabulary, state encoding, the transformer
//! itself, decoding, and weight snapshots.

mod decode;
mod model;
pub mod snapshot;
mod state;
pub mod vocab;

pub use decode::{argmax, greedy_decode, log_distributions, rescore, sample_thought, PromptCache};
pub use model::{
    log_softmax, BaseWeights, Block, GradSink, KvCache, KvGrad, ModelConfig, SegmentTrace,
};
pub use state::{
    encode_prompt, encode_state, encode_state_within, encode_task, Feedback, HistoryEntry,
    ReasoningState, Thought, DEFAULT_MAX_NEW_TOKENS, MAX_CONTEXT,
};
