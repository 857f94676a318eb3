use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{ActionKind, Outcome, SymptomClass};
use crate::clock::EpochMs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub symptom_class: SymptomClass,
    pub action_kind: String,
    pub attempts: u64,
    pub successes: u64,
    pub last_outcome_at: EpochMs,
}

/// Outcome counts per (symptom class, action), keyed `"Class/Action"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: BTreeMap<String, KnowledgeEntry>,
    path: Option<PathBuf>,
}

pub fn key(class: SymptomClass, action: &ActionKind) -> String {
    format!("{}/{}", class.as_str(), action.key())
}

impl KnowledgeBase {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads from `path` if it exists; later updates are written back.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let entries = match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            entries,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, KnowledgeEntry> {
        &self.entries
    }

    pub fn get(&self, class: SymptomClass, action: &ActionKind) -> Option<&KnowledgeEntry> {
        self.entries.get(&key(class, action))
    }

    /// Laplace-smoothed success rate: (successes + 1) / (attempts + 2).
    pub fn score(&self, class: SymptomClass, action: &ActionKind) -> f64 {
        let (s, a) = self
            .get(class, action)
            .map(|e| (e.successes, e.attempts))
            .unwrap_or((0, 0));
        (s as f64 + 1.0) / (a as f64 + 2.0)
    }

    pub fn set(&mut self, class: SymptomClass, action: &ActionKind, attempts: u64, successes: u64) {
        assert!(successes <= attempts);
        self.entries.insert(
            key(class, action),
            KnowledgeEntry {
                symptom_class: class,
                action_kind: action.key(),
                attempts,
                successes,
                last_outcome_at: 0,
            },
        );
    }

    pub fn learn(&mut self, class: SymptomClass, action: &ActionKind, outcome: Outcome, at: EpochMs) -> std::io::Result<()> {
        let e = self.entries.entry(key(class, action)).or_insert_with(|| KnowledgeEntry {
            symptom_class: class,
            action_kind: action.key(),
            attempts: 0,
            successes: 0,
            last_outcome_at: at,
        });
        e.attempts += 1;
        if outcome == Outcome::Resolved {
            e.successes += 1;
        }
        e.last_outcome_at = at;
        self.persist()
    }

    pub fn persist(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let json = serde_json::to_vec_pretty(&self.entries).map_err(std::io::Error::other)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)
    }
}
