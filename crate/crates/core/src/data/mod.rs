//! Point clouds, shape files, the synthetic corpus and episode sampling.

mod cloud;
pub mod episode;
pub mod io;
pub mod manifest;
pub mod synthetic;

use std::path::{Path, PathBuf};

pub use cloud::PointCloud;
pub use episode::{build_episode, Episode, EpisodeShape, EpisodeSpec, LabelMap, SetRole};
pub use io::{load_shape, parse_shape, save_shape};
pub use manifest::{Dataset, DatasetManifest, Role, Split};
pub use synthetic::{generate_synthetic, SyntheticKind};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: line {line}: {message}")]
    ParseInFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("point cloud has no points")]
    EmptyCloud,
    #[error("{points} points but {labels} labels")]
    LabelCount { points: usize, labels: usize },
    #[error("line {line}: label {label} is not a part of category {category:?}")]
    LabelOutsideSchema {
        line: usize,
        label: usize,
        category: String,
    },
    #[error("invalid category schema: {0}")]
    Schema(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("episode needs {need} categories, pool has {have}")]
    NotEnoughCategories { need: usize, have: usize },
    #[error("category {category:?} needs {need} shapes, has {have}")]
    InsufficientShapes {
        category: String,
        need: usize,
        have: usize,
    },
    #[error("episode: {0}")]
    Episode(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            Self::Parse { line, message } => Self::ParseInFile {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        }
    }
}

/// Part vocabulary of one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySchema {
    pub name: String,
    pub parts: Vec<usize>,
    pub part_names: Vec<String>,
}

impl CategorySchema {
    /// Between 2 and 5 unique part ids.
    pub fn new(
        name: impl Into<String>,
        parts: Vec<usize>,
        part_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if !(2..=5).contains(&parts.len()) {
            return Err(DataError::Schema(format!(
                "{name:?} has {} parts, expected 2 to 5",
                parts.len()
            )));
        }
        let mut sorted = parts.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != parts.len() {
            return Err(DataError::Schema(format!("{name:?} repeats a part id")));
        }
        if !part_names.is_empty() && part_names.len() != parts.len() {
            return Err(DataError::Schema(format!(
                "{name:?}: part names do not match parts"
            )));
        }
        Ok(Self {
            name,
            parts,
            part_names,
        })
    }
}
