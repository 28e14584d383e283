use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::RwLock;

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::fsutil::{read_all, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub created_at: DateTime<Utc>,
}

pub struct Sessions {
    dir: PathBuf,
    map: RwLock<BTreeMap<String, Session>>,
}

impl Sessions {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        let map = read_all::<Session>(&dir)?.into_iter().map(|s| (s.id.clone(), s)).collect();
        Ok(Self {
            dir,
            map: RwLock::new(map),
        })
    }

    pub fn create(&self, name: Option<String>) -> Result<Session> {
        let s = Session {
            id: uuid::Uuid::new_v4().to_string(),
            name,
            created_at: Utc::now(),
        };
        write_json(&self.dir.join(format!("{}.json", s.id)), &s)?;
        self.map.write().expect("session lock poisoned").insert(s.id.clone(), s.clone());
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        self.map.read().expect("session lock poisoned").get(id).cloned()
    }
}
