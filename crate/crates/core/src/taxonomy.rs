//! Manipulation-technique registry.
//!
//! The registry is loaded from a TOML file holding one `[[technique]]` table
//! per entry. Every other module keys on [`TechniqueId`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The registry shipped with the crate: the 21 definitions used in prompts.
pub const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed taxonomy file: {0}")]
    Parse(String),
    #[error("duplicate technique id `{0}`")]
    DuplicateId(String),
    #[error("duplicate technique name `{0}`")]
    DuplicateName(String),
    #[error("technique `{0}` has an empty definition")]
    EmptyDefinition(String),
    #[error("invalid technique id `{0}` (expected lowercase snake case)")]
    InvalidId(String),
    #[error("unknown technique `{0}`")]
    UnknownTechnique(String),
}

/// Stable lowercase snake-case key of a technique, e.g. `time_pressure`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TechniqueId(String);

impl TechniqueId {
    pub fn new(id: impl Into<String>) -> Self {
        TechniqueId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Derives the id from a display name: "Foot In The Door" -> `foot_in_the_door`.
    pub fn from_name(name: &str) -> Self {
        let id = name
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect::<Vec<_>>()
            .join("_");
        TechniqueId(id)
    }

    fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
            && !self.0.starts_with('_')
            && !self.0.ends_with('_')
            && self
                .0
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    }
}

impl fmt::Display for TechniqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TechniqueId {
    fn from(s: &str) -> Self {
        TechniqueId(s.to_owned())
    }
}

impl AsRef<str> for TechniqueId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Technique {
    pub id: TechniqueId,
    pub name: String,
    /// Used verbatim in prompts.
    pub definition: String,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    #[serde(default)]
    version: String,
    #[serde(default, rename = "technique")]
    techniques: Vec<Technique>,
}

/// Immutable, ordered technique registry. Iteration follows file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TechniqueRegistry {
    version: String,
    techniques: Vec<Technique>,
    by_id: HashMap<TechniqueId, usize>,
    by_name: HashMap<String, usize>,
}

impl TechniqueRegistry {
    pub fn new(version: impl Into<String>, techniques: Vec<Technique>) -> Result<Self, TaxonomyError> {
        let mut by_id = HashMap::with_capacity(techniques.len());
        let mut by_name = HashMap::with_capacity(techniques.len());
        for (idx, t) in techniques.iter().enumerate() {
            if !t.id.is_well_formed() {
                return Err(TaxonomyError::InvalidId(t.id.to_string()));
            }
            if t.definition.trim().is_empty() {
                return Err(TaxonomyError::EmptyDefinition(t.id.to_string()));
            }
            if by_id.insert(t.id.clone(), idx).is_some() {
                return Err(TaxonomyError::DuplicateId(t.id.to_string()));
            }
            if by_name.insert(t.name.to_lowercase(), idx).is_some() {
                return Err(TaxonomyError::DuplicateName(t.name.clone()));
            }
        }
        Ok(TechniqueRegistry {
            version: version.into(),
            techniques,
            by_id,
            by_name,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::new(file.version, file.techniques)
    }

    /// The registry compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn to_toml_string(&self) -> String {
        let file = TaxonomyFile {
            version: self.version.clone(),
            techniques: self.techniques.clone(),
        };
        toml::to_string(&file).expect("taxonomy serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.techniques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.techniques.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Technique> {
        self.techniques.iter()
    }

    pub fn ids(&self) -> Vec<TechniqueId> {
        self.techniques.iter().map(|t| t.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&Technique, TaxonomyError> {
        self.by_id
            .get(&TechniqueId::from(id))
            .map(|&i| &self.techniques[i])
            .ok_or_else(|| TaxonomyError::UnknownTechnique(id.to_owned()))
    }

    /// Case-insensitive lookup by display name.
    pub fn by_name(&self, name: &str) -> Result<&Technique, TaxonomyError> {
        self.by_name
            .get(&name.to_lowercase())
            .map(|&i| &self.techniques[i])
            .ok_or_else(|| TaxonomyError::UnknownTechnique(name.to_owned()))
    }

    pub fn contains(&self, id: &TechniqueId) -> bool {
        self.by_id.contains_key(id)
    }
}

pub fn load_taxonomy(path: &Path) -> Result<TechniqueRegistry, TaxonomyError> {
    let text = std::fs::read_to_string(path)?;
    let registry = TechniqueRegistry::from_toml_str(&text)?;
    if registry.is_empty() {
        tracing::warn!(path = %path.display(), "taxonomy has no techniques");
    } else {
        tracing::info!(count = registry.len(), version = registry.version(), "loaded taxonomy");
    }
    Ok(registry)
}
