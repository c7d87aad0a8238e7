use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::filename::{parse_entry, LabelPattern};
use super::image::{load_image, ImageSize, Normalization};
use super::{Domain, PersonImage, Split};
use crate::parallel::{try_map_range, Parallelism};
use crate::{Error, Result};

/// One labelled file, `path` relative to the manifest root with `/` separators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
}

/// Subdirectory names for the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitLayout {
    pub train: String,
    pub query: String,
    pub gallery: String,
}

impl Default for SplitLayout {
    fn default() -> Self {
        Self {
            train: "train".into(),
            query: "query".into(),
            gallery: "gallery".into(),
        }
    }
}

impl SplitLayout {
    /// The directory names used by the public Market1501 release.
    pub fn market1501() -> Self {
        Self {
            train: "bounding_box_train".into(),
            query: "query".into(),
            gallery: "bounding_box_test".into(),
        }
    }

    pub fn dir(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }
}

/// Immutable, validated listing of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    num_cameras: u32,
    id_index: BTreeMap<i64, usize>,
}

impl DatasetManifest {
    /// Validates entries and builds the dense train-identity index.
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::data("manifest has no entries"));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::data(format!("duplicate path `{}`", e.path)));
            }
            if e.camera == 0 {
                return Err(Error::data(format!("`{}` has camera 0; cameras start at 1", e.path)));
            }
        }
        let num_cameras = entries.iter().map(|e| e.camera).max().unwrap_or(0);
        let train_ids: BTreeSet<i64> = entries
            .iter()
            .filter(|e| e.split == Split::Train && e.identity >= 0)
            .map(|e| e.identity)
            .collect();
        let id_index = train_ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        Ok(Self {
            root: root.into(),
            entries,
            num_cameras,
            id_index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_cameras(&self) -> u32 {
        self.num_cameras
    }

    /// Number of dense training classes `K`.
    pub fn num_classes(&self) -> usize {
        self.id_index.len()
    }

    pub fn id_index(&self) -> &BTreeMap<i64, usize> {
        &self.id_index
    }

    pub fn class_of(&self, identity: i64) -> Option<usize> {
        self.id_index.get(&identity).copied()
    }

    /// Indices (into [`Self::entries`]) of the given split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Training entries usable as classes (distractors removed).
    pub fn train_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train && e.identity >= 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Query entries, distractors excluded.
    pub fn query_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Query && e.identity >= 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn full_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Decodes the given entries; decoding runs in parallel when enabled.
    pub fn load_images(
        &self,
        indices: &[usize],
        size: ImageSize,
        norm: &Normalization,
        domain: Domain,
        par: Parallelism,
    ) -> Result<Vec<PersonImage>> {
        try_map_range(indices.len(), par, |k| {
            let e = &self.entries[indices[k]];
            let pixels = load_image(&self.full_path(e), size, norm)?;
            Ok(PersonImage {
                pixels,
                identity: e.identity,
                camera: e.camera,
                domain,
                path: e.path.clone(),
            })
        })
    }

    /// Writes `path,identity,camera,split`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(csv_path: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        let mut r = csv::Reader::from_path(csv_path)?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Self::from_entries(root, entries)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Scans `root/<split dir>` for image files and labels them from their names.
pub fn load_manifest(root: &Path, pattern: &LabelPattern, layout: &SplitLayout) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for split in Split::ALL {
        let dir_name = layout.dir(split);
        let dir = root.join(dir_name);
        let listing = std::fs::read_dir(&dir)
            .map_err(|e| Error::data(format!("cannot read split directory {}: {e}", dir.display())))?;
        let mut files = Vec::new();
        for item in listing {
            let path = item?.path();
            if path.is_file() && is_image_file(&path) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::data(format!("split `{split}` ({}) is empty", dir.display())));
        }
        files.sort();
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
                Error::data(format!("non UTF-8 file name {}", f.display()))
            })?;
            let (identity, camera) = parse_entry(name, pattern)?;
            entries.push(ManifestEntry {
                path: format!("{dir_name}/{name}"),
                identity,
                camera,
                split,
            });
        }
    }
    DatasetManifest::from_entries(root, entries)
}

/// Per-split counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SplitCounts {
    pub images: usize,
    pub identities: usize,
}

/// Table-style characteristics of a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub images: usize,
    /// Distinct non-distractor identities across all splits.
    pub identities: usize,
    pub cameras: usize,
    pub distractors: usize,
    pub train: SplitCounts,
    pub query: SplitCounts,
    pub gallery: SplitCounts,
}

pub fn summarize_dataset(manifest: &DatasetManifest) -> DatasetSummary {
    let count = |split: Option<Split>| {
        let mut ids = BTreeSet::new();
        let mut images = 0;
        for e in manifest.entries.iter().filter(|e| split.map_or(true, |s| e.split == s)) {
            images += 1;
            if e.identity >= 0 {
                ids.insert(e.identity);
            }
        }
        SplitCounts {
            images,
            identities: ids.len(),
        }
    };
    let all = count(None);
    let cameras: BTreeSet<u32> = manifest.entries.iter().map(|e| e.camera).collect();
    DatasetSummary {
        images: all.images,
        identities: all.identities,
        cameras: cameras.len(),
        distractors: manifest.entries.iter().filter(|e| e.identity < 0).count(),
        train: count(Some(Split::Train)),
        query: count(Some(Split::Query)),
        gallery: count(Some(Split::Gallery)),
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images      {}", self.images)?;
        writeln!(f, "cameras     {}", self.cameras)?;
        writeln!(
            f,
            "identities  {} ({}-{}-{})",
            self.identities, self.train.identities, self.query.identities, self.gallery.identities
        )?;
        writeln!(
            f,
            "split sizes train={} query={} gallery={}",
            self.train.images, self.query.images, self.gallery.images
        )?;
        write!(f, "distractors {}", self.distractors)
    }
}
