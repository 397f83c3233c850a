pub mod error;
pub mod harness;
pub mod kgtog;
pub mod lemma;
pub mod llmclient;
pub mod metrics;
pub mod prompts;
pub mod retrieval;
pub mod textproc;

pub use error::{HarnessError, KgError, LemmaError, LlmError, MetricsError, PromptError, RetrievalError, TextError};
