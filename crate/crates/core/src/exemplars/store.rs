//! Keyword-labelled image store: a directory of PNGs plus `manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::votes::ExemplarSet;
use super::wheel::{Corpus, WheelParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::request::normalize_keyword;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "wheelgen-exemplars/1";

/// Which of the two image collections an entry belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    #[default]
    Wheel,
    Inspiration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub id: String,
    pub kind: Dataset,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<WheelParams>,
    /// Annotation votes by keyword.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub votes: BTreeMap<String, u32>,
}

impl ExemplarEntry {
    pub fn new(id: &str, kind: Dataset, labels: Vec<String>) -> Self {
        Self {
            id: id.to_string(),
            kind,
            labels: labels.iter().map(|l| normalize_keyword(l)).collect(),
            params: None,
            votes: BTreeMap::new(),
        }
    }

    pub fn has_label(&self, keyword: &str) -> bool {
        self.labels.iter().any(|l| l == keyword)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: Vec<ExemplarEntry>,
    #[serde(default)]
    exemplar_sets: BTreeMap<String, ExemplarSet>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Entries are kept sorted by id. Images are held in memory once loaded.
#[derive(Debug, Default, Clone)]
pub struct ExemplarStore {
    root: Option<PathBuf>,
    entries: BTreeMap<String, ExemplarEntry>,
    sets: BTreeMap<String, ExemplarSet>,
    images: HashMap<String, Arc<ImageTensor>>,
}

impl ExemplarStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `dir`, loading the manifest and every image. A missing
    /// manifest gives an empty store rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let root = dir.into();
        let mut store = Self {
            root: Some(root.clone()),
            ..Self::default()
        };
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Ok(store);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unsupported store format `{}`", manifest.format)));
        }
        for entry in manifest.entries {
            let file = root.join("images").join(format!("{}.png", entry.id));
            let img = ImageTensor::load(&file)?;
            store.images.insert(entry.id.clone(), Arc::new(img));
            store.entries.insert(entry.id.clone(), entry);
        }
        store.sets = manifest.exemplar_sets;
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Writes images that are not yet on disk, then the manifest.
    pub fn save(&self) -> Result<()> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Param("in-memory store has no directory".into()))?;
        self.save_to(root)
    }

    pub fn save_to(&self, root: &Path) -> Result<()> {
        let dir = root.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (id, img) in &self.images {
            let file = dir.join(format!("{id}.png"));
            if !file.exists() {
                img.save_png(&file)?;
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            entries: self.entries.values().cloned().collect(),
            exemplar_sets: self.sets.clone(),
        };
        let path = root.join(MANIFEST);
        let tmp = root.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Adds or replaces an entry. The image is stored 8-bit quantized.
    pub fn insert(&mut self, entry: ExemplarEntry, image: ImageTensor) {
        self.try_insert(entry, image).expect("invalid exemplar id")
    }

    pub fn try_insert(&mut self, entry: ExemplarEntry, image: ImageTensor) -> Result<()> {
        if !valid_id(&entry.id) {
            return Err(Error::Param(format!("exemplar id `{}` must be [A-Za-z0-9._-]", entry.id)));
        }
        if let Some(root) = &self.root {
            // replacing an image must not leave a stale file behind
            let file = root.join("images").join(format!("{}.png", entry.id));
            if file.exists() {
                fs::remove_file(&file).map_err(|e| Error::io(&file, e))?;
            }
        }
        self.images.insert(entry.id.clone(), Arc::new(image.quantized()));
        self.entries.insert(entry.id.clone(), entry);
        Ok(())
    }

    pub fn add_corpus(&mut self, corpus: &Corpus) {
        for item in &corpus.items {
            let mut entry = ExemplarEntry::new(&item.id, Dataset::Wheel, item.labels.clone());
            entry.params = Some(item.params);
            self.insert(entry, item.image.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ExemplarEntry> {
        self.entries.values()
    }

    pub fn entry(&self, id: &str) -> Option<&ExemplarEntry> {
        self.entries.get(id)
    }

    pub fn image(&self, id: &str) -> Result<Arc<ImageTensor>> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Reference(format!("exemplar `{id}` not in store")))
    }

    /// Entry count per label.
    pub fn keywords(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            for l in &e.labels {
                *out.entry(l.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn exemplar_set(&self, keyword: &str) -> Option<&ExemplarSet> {
        self.sets.get(&normalize_keyword(keyword))
    }

    /// Stores an aggregated set and folds its votes into the entries.
    pub fn set_exemplars(&mut self, set: ExemplarSet, votes: &BTreeMap<String, u32>) {
        let kw = normalize_keyword(&set.keyword);
        for (id, &v) in votes {
            if let Some(e) = self.entries.get_mut(id) {
                e.votes.insert(kw.clone(), v);
            }
        }
        self.sets.insert(kw, set);
    }

    /// Ids eligible for dataset sampling under `keyword`, sorted.
    ///
    /// Wheels come from the keyword's aggregated exemplar set when one
    /// exists, else from every wheel carrying the label. Inspirations fall
    /// back to the wheel candidates when no inspiration image has the label.
    pub fn candidates(&self, keyword: &str, dataset: Dataset) -> Vec<String> {
        let kw = normalize_keyword(keyword);
        if dataset == Dataset::Inspiration {
            let own: Vec<String> = self
                .entries
                .values()
                .filter(|e| e.kind == Dataset::Inspiration && e.has_label(&kw))
                .map(|e| e.id.clone())
                .collect();
            if !own.is_empty() {
                return own;
            }
        }
        if let Some(set) = self.sets.get(&kw) {
            let mut ids: Vec<String> =
                set.wheel_ids.iter().filter(|id| self.entries.contains_key(*id)).cloned().collect();
            ids.sort();
            if !ids.is_empty() {
                return ids;
            }
        }
        self.entries
            .values()
            .filter(|e| e.kind == Dataset::Wheel && e.has_label(&kw))
            .map(|e| e.id.clone())
            .collect()
    }

    /// Imports a folder of images labelled by a CSV with columns
    /// `file,labels[,kind]`; labels are `;`-separated and kind defaults to
    /// `inspiration`. Returns the number of images added.
    pub fn import_folder(&mut self, dir: &Path, labels_csv: &Path) -> Result<usize> {
        #[derive(Deserialize)]
        struct Row {
            file: String,
            labels: String,
            #[serde(default)]
            kind: Option<Dataset>,
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(labels_csv)?;
        let mut added = 0;
        for row in reader.deserialize() {
            let row: Row = row?;
            let path = dir.join(&row.file);
            let img = ImageTensor::load(&path)?;
            let id: String = Path::new(&row.file)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let labels = row.labels.split(';').map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            self.try_insert(ExemplarEntry::new(&id, row.kind.unwrap_or(Dataset::Inspiration), labels), img)?;
            added += 1;
        }
        Ok(added)
    }
}
