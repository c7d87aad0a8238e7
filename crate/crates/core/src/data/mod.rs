//! Dataset ingestion, normalization and the synthetic identity×content generator.

mod filename;
mod image;
mod manifest;
mod synthetic;

pub use self::filename::{parse_entry, LabelPattern, DEFAULT_PATTERN};
pub use self::image::{
    check_generator_divisibility, denormalize, load_image, normalize, ImageSize, Normalization,
};
pub use self::manifest::{
    load_manifest, summarize_dataset, DatasetManifest, DatasetSummary, ManifestEntry, SplitLayout,
};
pub use self::synthetic::{
    make_synthetic, make_synthetic_with, ContentFactors, IdentityFactors, IdentityLook, SyntheticDataset,
    SyntheticSpec,
};

use candle::Tensor;
use serde::{Deserialize, Serialize};

/// Which split of a dataset an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(crate::Error::data(format!("unknown split `{other}`"))),
        }
    }
}

/// Labelled (source) or unlabelled (target) domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Source,
    Target,
}

/// One normalized person crop with its labels.
///
/// `identity < 0` marks a distractor: it may sit in a gallery as a negative
/// but is never used as a query or as a training class.
#[derive(Debug, Clone)]
pub struct PersonImage {
    /// `[3, height, width]`, f32, normalized.
    pub pixels: Tensor,
    pub identity: i64,
    pub camera: u32,
    pub domain: Domain,
    pub path: String,
}

impl PersonImage {
    pub fn is_distractor(&self) -> bool {
        self.identity < 0
    }
}
