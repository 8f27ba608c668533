//! Idempotent document store: upsert-by-id, filtered queries, per-type
//! stats.
//!
//! Backing is an append-only JSON-lines journal plus an in-memory id
//! index rebuilt on open. Last write wins per id; a version counter
//! increments on each overwrite. Multiple independent store instances can
//! consume duplicated queues from the same fanout and converge to
//! identical content.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use thiserror::Error;

use crate::ingest::EnrichedDocument;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("document id is empty")]
    EmptyId,
    #[error("journal: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt journal line {line}: {err}")]
    Corrupt { line: usize, err: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Created,
    Overwritten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    id: String,
    doc: EnrichedDocument,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDocument {
    pub id: String,
    pub document: EnrichedDocument,
    pub version: u64,
}

#[derive(Debug, Clone, Default)]
pub struct QueryFilter {
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub test_type: Option<String>,
    pub source: Option<String>,
    pub dest: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TypeStats {
    pub documents: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct StoreStats {
    pub per_type: std::collections::BTreeMap<String, TypeStats>,
    pub total_documents: u64,
    pub total_bytes: u64,
}

struct Inner {
    index: HashMap<String, (u64, EnrichedDocument)>,
    journal: File,
    path: PathBuf,
}

/// Handle is cheap to clone; writers serialize on the internal lock.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Mutex<Inner>>,
}

impl Store {
    /// Open (or create) a store at `path`, rebuilding the index from the
    /// journal.
    pub fn open(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry =
                    serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                        line: lineno + 1,
                        err: e.to_string(),
                    })?;
                let version = index
                    .get(&entry.id)
                    .map(|(v, _): &(u64, EnrichedDocument)| v + 1)
                    .unwrap_or(1);
                index.insert(entry.id, (version, entry.doc));
            }
        }
        let journal = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Store {
            inner: Arc::new(Mutex::new(Inner {
                index,
                journal,
                path,
            })),
        })
    }

    pub fn path(&self) -> PathBuf {
        self.inner.lock().unwrap().path.clone()
    }

    /// Last-write-wins upsert. Returns whether the id was new.
    pub fn upsert(&self, doc: &EnrichedDocument) -> Result<UpsertOutcome, StoreError> {
        if doc.id.is_empty() {
            return Err(StoreError::EmptyId);
        }
        let mut inner = self.inner.lock().unwrap();
        let entry = JournalEntry {
            id: doc.id.clone(),
            doc: doc.clone(),
        };
        let line = serde_json::to_string(&entry).expect("document serializes");
        writeln!(inner.journal, "{line}")?;
        inner.journal.flush()?;
        let outcome = match inner.index.get_mut(&doc.id) {
            Some((version, existing)) => {
                *version += 1;
                *existing = doc.clone();
                UpsertOutcome::Overwritten
            }
            None => {
                inner.index.insert(doc.id.clone(), (1, doc.clone()));
                UpsertOutcome::Created
            }
        };
        Ok(outcome)
    }

    pub fn get(&self, id: &str) -> Option<StoredDocument> {
        let inner = self.inner.lock().unwrap();
        inner.index.get(id).map(|(version, doc)| StoredDocument {
            id: id.to_string(),
            document: doc.clone(),
            version: *version,
        })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Documents matching every supplied predicate, ordered by timestamp.
    pub fn query(&self, filter: &QueryFilter) -> Vec<StoredDocument> {
        let inner = self.inner.lock().unwrap();
        let mut out: Vec<StoredDocument> = inner
            .index
            .iter()
            .filter(|(_, (_, doc))| {
                let ts = doc.timestamp().unwrap_or(0.0);
                if let Some(from) = filter.from {
                    if ts < from {
                        return false;
                    }
                }
                if let Some(to) = filter.to {
                    if ts >= to {
                        return false;
                    }
                }
                if let Some(t) = &filter.test_type {
                    if doc.test_type() != Some(t.as_str()) {
                        return false;
                    }
                }
                if let Some(src) = &filter.source {
                    let host = doc.fields.get("source_host").and_then(|v| v.as_str());
                    if host != Some(src.as_str()) {
                        return false;
                    }
                }
                if let Some(dst) = &filter.dest {
                    let host = doc.fields.get("dest_host").and_then(|v| v.as_str());
                    if host != Some(dst.as_str()) {
                        return false;
                    }
                }
                true
            })
            .map(|(id, (version, doc))| StoredDocument {
                id: id.clone(),
                document: doc.clone(),
                version: *version,
            })
            .collect();
        out.sort_by(|a, b| {
            a.document
                .timestamp()
                .unwrap_or(0.0)
                .total_cmp(&b.document.timestamp().unwrap_or(0.0))
                .then_with(|| a.id.cmp(&b.id))
        });
        out
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.inner.lock().unwrap();
        let mut stats = StoreStats::default();
        for (_, (_, doc)) in inner.index.iter() {
            let type_name = doc.test_type().unwrap_or("unknown").to_string();
            let bytes = serde_json::to_vec(doc).map(|v| v.len() as u64).unwrap_or(0);
            let entry = stats.per_type.entry(type_name).or_default();
            entry.documents += 1;
            entry.bytes += bytes;
            stats.total_documents += 1;
            stats.total_bytes += bytes;
        }
        stats
    }

    /// Snapshot of (id -> document) ignoring ingest_time; used by replay
    /// fidelity checks and the dual-instance comparison.
    pub fn content_snapshot(&self) -> std::collections::BTreeMap<String, serde_json::Value> {
        let inner = self.inner.lock().unwrap();
        inner
            .index
            .iter()
            .map(|(id, (_, doc))| {
                (id.clone(), serde_json::to_value(&doc.fields).unwrap())
            })
            .collect()
    }

    /// Drop all documents and truncate the journal.
    pub fn wipe(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().unwrap();
        inner.index.clear();
        inner.journal = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&inner.path)?;
        Ok(())
    }
}
