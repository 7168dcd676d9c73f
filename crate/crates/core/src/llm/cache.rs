use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model_id: String,
    prompt_digest: String,
    response: String,
}

/// Response cache keyed by [`super::cache_key`], optionally backed by an
/// append-only JSON-lines file.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, String>>,
    log: Option<Mutex<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file. Unreadable lines are skipped.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut skipped = 0usize;
            for line in reader.lines() {
                let line = line?;
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.key, rec.response);
                    }
                    Err(_) if line.trim().is_empty() => {}
                    Err(_) => skipped += 1,
                }
            }
            if skipped > 0 {
                tracing::warn!(path = %path.display(), skipped, "skipped corrupt cache records");
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache {
            entries: Mutex::new(entries),
            log: Some(Mutex::new(file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, model_id: &str, prompt_digest: &str, response: &str) -> std::io::Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if entries.get(key).is_some_and(|v| v == response) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            let rec = CacheRecord {
                key: key.to_owned(),
                model_id: model_id.to_owned(),
                prompt_digest: prompt_digest.to_owned(),
                response: response.to_owned(),
            };
            let mut line = serde_json::to_string(&rec).expect("cache record serializes");
            line.push('\n');
            let mut f = log.lock().unwrap();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        entries.insert(key.to_owned(), response.to_owned());
        Ok(())
    }
}
