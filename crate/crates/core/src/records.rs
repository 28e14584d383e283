//! Generation records and their lineage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::conditioning::Provenance;
use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::request::{FeedbackDelta, GenerationRequest};

/// One completed generation: everything needed to replay it, plus its parent link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    /// Normalized request including the seed actually used.
    pub request: GenerationRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackDelta>,
    pub outputs: Vec<ImageRef>,
    pub created_at: DateTime<Utc>,
    pub resolved_conditioning: Provenance,
}

impl GenerationRecord {
    pub fn new_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }
}

/// Records keyed by id, optionally mirrored to `<root>/<id>.json`.
#[derive(Debug, Default)]
pub struct RecordStore {
    root: Option<PathBuf>,
    records: RwLock<BTreeMap<String, GenerationRecord>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every record under `root`, creating the directory if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut records = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let path = entry.map_err(|e| Error::io(&root, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rec: GenerationRecord = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            records.insert(rec.id.clone(), rec);
        }
        let store = Self {
            root: Some(root),
            records: RwLock::new(records),
        };
        store.check_links()?;
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn check_links(&self) -> Result<()> {
        let map = self.records.read().expect("record lock poisoned");
        for rec in map.values() {
            if let Some(p) = &rec.parent_id {
                if !map.contains_key(p) {
                    return Err(Error::Format(format!("record {} points at missing parent {p}", rec.id)));
                }
            }
            // walking up must end within len steps
            let mut cur = rec.parent_id.as_ref();
            let mut hops = 0;
            while let Some(p) = cur {
                hops += 1;
                if hops > map.len() {
                    return Err(Error::Format(format!("lineage of {} is cyclic", rec.id)));
                }
                cur = map.get(p).and_then(|r| r.parent_id.as_ref());
            }
        }
        Ok(())
    }

    /// Stores a new record. The parent must already exist and the id must be
    /// unused, so lineage stays a forest.
    pub fn insert(&self, rec: GenerationRecord) -> Result<()> {
        if !valid_id(&rec.id) {
            return Err(Error::Param(format!("record id `{}` must be [A-Za-z0-9_-]+", rec.id)));
        }
        let mut map = self.records.write().expect("record lock poisoned");
        if map.contains_key(&rec.id) {
            return Err(Error::Param(format!("record {} already exists", rec.id)));
        }
        if let Some(p) = &rec.parent_id {
            if !map.contains_key(p) {
                return Err(Error::Reference(format!("parent record {p} not found")));
            }
        }
        if let Some(root) = &self.root {
            let path = root.join(format!("{}.json", rec.id));
            let tmp = root.join(format!(".{}.tmp", rec.id));
            let bytes = serde_json::to_vec_pretty(&rec)?;
            fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        map.insert(rec.id.clone(), rec);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<GenerationRecord> {
        self.records.read().expect("record lock poisoned").get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.read().expect("record lock poisoned").contains_key(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.read().expect("record lock poisoned").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("record lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes a record that has no children.
    pub fn delete(&self, id: &str) -> Result<GenerationRecord> {
        let mut map = self.records.write().expect("record lock poisoned");
        if !map.contains_key(id) {
            return Err(Error::Reference(format!("record {id} not found")));
        }
        if let Some(child) = map.values().find(|r| r.parent_id.as_deref() == Some(id)) {
            return Err(Error::Param(format!("record {id} still has child {}", child.id)));
        }
        if let Some(root) = &self.root {
            let path = root.join(format!("{id}.json"));
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(map.remove(id).expect("checked above"))
    }

    /// The record and its ancestors, oldest first.
    pub fn lineage(&self, id: &str) -> Result<Vec<GenerationRecord>> {
        let map = self.records.read().expect("record lock poisoned");
        let mut chain = Vec::new();
        let mut cur = Some(id.to_string());
        while let Some(c) = cur {
            let rec = map
                .get(&c)
                .ok_or_else(|| Error::Reference(format!("record {c} not found")))?;
            if chain.len() > map.len() {
                return Err(Error::Format(format!("lineage of {id} is cyclic")));
            }
            cur = rec.parent_id.clone();
            chain.push(rec.clone());
        }
        chain.reverse();
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::{ConceptGroup, SymmetryConfig};

    fn rec(id: &str, parent: Option<&str>) -> GenerationRecord {
        GenerationRecord {
            id: id.into(),
            request: GenerationRequest::new(vec![ConceptGroup::new("bold")], SymmetryConfig::for_canvas(32, 4), "stub-zero"),
            parent_id: parent.map(str::to_string),
            feedback: parent.map(|_| FeedbackDelta {
                note: format!("from {}", parent.unwrap()),
                ..Default::default()
            }),
            outputs: vec![],
            created_at: Utc::now(),
            resolved_conditioning: Provenance::default(),
        }
    }

    #[test]
    fn lineage_is_oldest_first() {
        let s = RecordStore::in_memory();
        s.insert(rec("a", None)).unwrap();
        s.insert(rec("b", Some("a"))).unwrap();
        s.insert(rec("c", Some("b"))).unwrap();
        let ids: Vec<_> = s.lineage("c").unwrap().into_iter().map(|r| r.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(s.lineage("a").unwrap().len(), 1);
        assert!(s.lineage("zz").is_err());
    }

    #[test]
    fn parents_must_exist_and_ids_are_unique() {
        let s = RecordStore::in_memory();
        assert!(matches!(s.insert(rec("b", Some("a"))), Err(Error::Reference(_))));
        s.insert(rec("a", None)).unwrap();
        assert!(s.insert(rec("a", None)).is_err());
        assert!(s.insert(rec("../x", None)).is_err());
    }

    #[test]
    fn only_leaves_can_be_deleted() {
        let s = RecordStore::in_memory();
        s.insert(rec("a", None)).unwrap();
        s.insert(rec("b", Some("a"))).unwrap();
        assert!(s.delete("a").is_err());
        s.delete("b").unwrap();
        s.delete("a").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = RecordStore::open(dir.path()).unwrap();
            s.insert(rec("a", None)).unwrap();
            s.insert(rec("b", Some("a"))).unwrap();
        }
        let s = RecordStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.lineage("b").unwrap()[1].feedback.as_ref().unwrap().note, "from a");
    }

    #[test]
    fn reopen_rejects_dangling_parents() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec("b", Some("ghost"));
        fs::write(dir.path().join("b.json"), serde_json::to_vec(&r).unwrap()).unwrap();
        assert!(RecordStore::open(dir.path()).is_err());
    }
}
