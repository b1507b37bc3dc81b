//! Echo backend: wraps the prompt's last line as `<marker>[<line>]`.
//!
//! The fixed format makes chain composition exactly checkable: a stack of
//! echo stages whose templates pass only the previous output maps input
//! `x` to `S4[S3[S2[S1[x]]]]`.

use std::time::Instant;

use super::{
    Backend, BackendError, FinishReason, GenerationRequest, GenerationResult,
    LoglikelihoodRequest, LoglikelihoodResult,
};

#[derive(Debug, Clone)]
pub struct EchoBackend {
    id: String,
    marker: String,
}

impl EchoBackend {
    pub fn new(id: impl Into<String>, marker: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            marker: marker.into(),
        }
    }
}

impl Backend for EchoBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn describe(&self) -> String {
        format!("echo:{}", self.marker)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let start = Instant::now();
        let last_line = req.prompt.rsplit('\n').next().unwrap_or("");
        let mut result =
            GenerationResult::text(format!("{}[{}]", self.marker, last_line), FinishReason::Stop);
        result.latency_ms = start.elapsed().as_millis() as u64;
        Ok(result)
    }

    fn loglikelihood(
        &self,
        _req: &LoglikelihoodRequest,
    ) -> Result<LoglikelihoodResult, BackendError> {
        Err(BackendError::Unsupported {
            backend_id: self.id.clone(),
            what: "echo backends do not score continuations".to_string(),
        })
    }
}
