//! Text generation providers behind one contract, plus an order-preserving
//! batch runner with rate limiting and a resumable completion ledger.

pub mod batch;
pub mod http;
pub mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{generate_batch, parse_ledger, BatchOptions, BatchReport, Clock, FakeClock, Ledger, LedgerEntry, RateLimiter, SystemClock};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{MockBackend, MockScript};

/// Identifies a prompt: document plus chunk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestTag {
    pub doc_id: String,
    pub chunk_index: usize,
}

impl RequestTag {
    pub fn new(doc_id: impl Into<String>, chunk_index: usize) -> Self {
        RequestTag {
            doc_id: doc_id.into(),
            chunk_index,
        }
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.chunk_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub tag: RequestTag,
}

impl GenerationRequest {
    /// Greedy decoding with a generous budget, stopping at a blank line.
    pub fn new(prompt: impl Into<String>, tag: RequestTag) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens: 1024,
            temperature: 0.0,
            stop: vec!["\n\n".to_string()],
            tag,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Contract(format!("{}: max_tokens must be at least 1", self.tag)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Contract(format!("{}: temperature must be non-negative", self.tag)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    /// Output hit the token budget or the context window; the text may be cut.
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl GenerationResult {
    pub fn truncated(&self) -> bool {
        self.finish_reason == FinishReason::Length
    }
}

/// A generation provider. Implementations must tolerate concurrent calls.
/// Errors are reserved for transport and configuration failures; poor
/// model output is still a successful result.
pub trait Backend: Send + Sync {
    fn name(&self) -> String;
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let mut r = GenerationRequest::new("p", RequestTag::new("d", 0));
        assert!(r.validate().is_ok());
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        r.max_tokens = 1;
        r.temperature = f64::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn tag_display() {
        assert_eq!(RequestTag::new("Ulm", 3).to_string(), "Ulm#3");
    }
}
