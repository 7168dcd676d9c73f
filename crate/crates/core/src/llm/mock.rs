//! Scriptable provider for deterministic runs.
//!
//! Response lookup order: exact prompt digest, then the `sequence` list in
//! call order, then `hashed` (picked by digest, stable under concurrency),
//! then `fallback`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmError, ModelConfig, Provider, ProviderError};
use crate::prompt::text_digest;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub hashed: Vec<String>,
    #[serde(default)]
    pub fallback: Option<String>,
    /// After this many answered calls every call fails fatally.
    #[serde(default)]
    pub fail_after: Option<usize>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn always(response: &str) -> Self {
        MockScript {
            fallback: Some(response.to_owned()),
            ..Default::default()
        }
    }

    pub fn hashed<I: IntoIterator<Item = S>, S: Into<String>>(choices: I) -> Self {
        MockScript {
            hashed: choices.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    cursor: Mutex<usize>,
    answered: AtomicUsize,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        MockProvider {
            script,
            cursor: Mutex::new(0),
            answered: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn pick(&self, digest: &str) -> Option<String> {
        if let Some(r) = self.script.responses.get(digest) {
            return Some(r.clone());
        }
        {
            let mut cursor = self.cursor.lock().unwrap();
            if let Some(r) = self.script.sequence.get(*cursor) {
                *cursor += 1;
                return Some(r.clone());
            }
        }
        if !self.script.hashed.is_empty() {
            let h = Sha256::digest(digest.as_bytes());
            let n = u64::from_le_bytes(h[..8].try_into().unwrap());
            let idx = (n % self.script.hashed.len() as u64) as usize;
            return Some(self.script.hashed[idx].clone());
        }
        self.script.fallback.clone()
    }
}

impl Provider for MockProvider {
    fn send(&self, _config: &ModelConfig, prompt: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.script.fail_after {
            // reserve a slot first so concurrent callers cannot overshoot
            let slot = self.answered.fetch_add(1, Ordering::SeqCst);
            if slot >= limit {
                return Err(ProviderError::Fatal("scripted failure".into()));
            }
        }
        self.pick(&text_digest(prompt))
            .ok_or_else(|| ProviderError::Fatal("no scripted response for prompt".into()))
    }
}
