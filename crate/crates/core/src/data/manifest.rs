//! Dataset manifests and in-memory datasets.
//!
//! A manifest is TOML:
//!
//! ```toml
//! [[category]]
//! name = "lamp"
//! role = "novel"          # "base" or "novel"
//! parts = [5, 6, 7]
//! part_names = ["base", "pole", "shade"]
//!
//! [[shape]]
//! split = "train"         # "train" or "test"
//! category = "lamp"
//! path = "lamp/lamp_000.pts"   # relative to the manifest file
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::{generate_synthetic, SyntheticKind};
use super::{io, CategorySchema, DataError, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    pub role: Role,
    pub parts: Vec<usize>,
    #[serde(default)]
    pub part_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub split: Split,
    pub category: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, rename = "category")]
    pub categories: Vec<CategoryEntry>,
    #[serde(default, rename = "shape")]
    pub shapes: Vec<ShapeEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let manifest: Self =
            toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                // one role per category keeps base ∩ novel empty
                return Err(DataError::Manifest(format!(
                    "category {:?} declared more than once",
                    c.name
                )));
            }
            CategorySchema::new(&c.name, c.parts.clone(), c.part_names.clone())?;
        }
        for s in &self.shapes {
            if !seen.contains(s.category.as_str()) {
                return Err(DataError::UnknownCategory(s.category.clone()));
            }
        }
        Ok(())
    }
}

/// A shape loaded into memory together with its manifest metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub split: Split,
    pub cloud: PointCloud,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryInfo {
    pub schema: CategorySchema,
    pub role: Role,
}

/// All shapes of a manifest, grouped by category.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    categories: BTreeMap<String, CategoryInfo>,
    shapes: BTreeMap<String, Vec<ShapeRecord>>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_category(&mut self, schema: CategorySchema, role: Role) {
        self.shapes.entry(schema.name.clone()).or_default();
        self.categories
            .insert(schema.name.clone(), CategoryInfo { schema, role });
    }

    pub fn add_shape(&mut self, split: Split, cloud: PointCloud) -> Result<(), DataError> {
        let info = self
            .categories
            .get(&cloud.category)
            .ok_or_else(|| DataError::UnknownCategory(cloud.category.clone()))?;
        if let Some(&bad) = cloud.labels.iter().find(|l| !info.schema.parts.contains(l)) {
            return Err(DataError::LabelOutsideSchema {
                line: 0,
                label: bad,
                category: cloud.category.clone(),
            });
        }
        self.shapes
            .entry(cloud.category.clone())
            .or_default()
            .push(ShapeRecord {
                split,
                cloud,
                path: None,
            });
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let text =
            fs::read_to_string(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
        let manifest = DatasetManifest::parse(&text)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, root)
    }

    pub fn from_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Self, DataError> {
        manifest.validate()?;
        let mut ds = Self::new();
        for c in &manifest.categories {
            let schema = CategorySchema::new(&c.name, c.parts.clone(), c.part_names.clone())?;
            ds.add_category(schema, c.role);
        }
        for entry in &manifest.shapes {
            let path = root.join(&entry.path);
            let schema = &ds.categories[&entry.category].schema;
            let cloud = io::load_shape(&path, &entry.category, Some(schema))?;
            ds.shapes
                .get_mut(&entry.category)
                .expect("validated")
                .push(ShapeRecord {
                    split: entry.split,
                    cloud,
                    path: Some(entry.path.clone()),
                });
        }
        Ok(ds)
    }

    /// Procedural corpus: `train + test` shapes per kind.
    pub fn synthetic(
        kinds: &[(SyntheticKind, Role)],
        train: usize,
        test: usize,
        points: usize,
        seed: u64,
    ) -> Self {
        let mut ds = Self::new();
        for &(kind, role) in kinds {
            ds.add_category(kind.schema(), role);
            for i in 0..train + test {
                let shape_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((kind as u64) << 32 | i as u64);
                let cloud = generate_synthetic(kind, points, shape_seed);
                let split = if i < train { Split::Train } else { Split::Test };
                ds.add_shape(split, cloud)
                    .expect("schema matches generator");
            }
        }
        ds
    }

    /// Writes every shape under `dir/<category>/` and a `manifest.toml`;
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let mut manifest = DatasetManifest::default();
        for (name, info) in &self.categories {
            manifest.categories.push(CategoryEntry {
                name: name.clone(),
                role: info.role,
                parts: info.schema.parts.clone(),
                part_names: info.schema.part_names.clone(),
            });
            let cat_dir = dir.join(name);
            fs::create_dir_all(&cat_dir).map_err(|e| DataError::io(&cat_dir, e))?;
            for (i, record) in self.shapes[name].iter().enumerate() {
                let rel = PathBuf::from(name).join(format!("{name}_{i:04}.pts"));
                io::save_shape(&dir.join(&rel), &record.cloud)?;
                manifest.shapes.push(ShapeEntry {
                    split: record.split,
                    category: name.clone(),
                    path: rel,
                });
            }
        }
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest.to_toml()).map_err(|e| DataError::io(&path, e))?;
        Ok(path)
    }

    pub fn category(&self, name: &str) -> Option<&CategoryInfo> {
        self.categories.get(name)
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, &CategoryInfo)> {
        self.categories.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Category names with the given role, in sorted order.
    pub fn with_role(&self, role: Role) -> Vec<String> {
        self.categories
            .iter()
            .filter(|(_, info)| info.role == role)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn shapes(&self, category: &str) -> &[ShapeRecord] {
        self.shapes.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn split(&self, category: &str, split: Split) -> Vec<&ShapeRecord> {
        self.shapes(category)
            .iter()
            .filter(|s| s.split == split)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.shapes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest part count over all categories.
    pub fn max_parts(&self) -> usize {
        self.categories
            .values()
            .map(|c| c.schema.parts.len())
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_roles() {
        let ds = Dataset::synthetic(
            &[
                (SyntheticKind::Barbell, Role::Base),
                (SyntheticKind::Mug, Role::Novel),
            ],
            3,
            2,
            64,
            1,
        );
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.with_role(Role::Base), vec!["barbell"]);
        assert_eq!(ds.with_role(Role::Novel), vec!["mug"]);
        assert_eq!(ds.split("mug", Split::Test).len(), 2);
        assert_eq!(ds.max_parts(), 3);
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(&[(SyntheticKind::Table, Role::Base)], 2, 1, 32, 4);
        let path = ds.write(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.len(), 3);
        let (a, b) = (&ds.shapes("table")[2].cloud, &back.shapes("table")[2].cloud);
        assert_eq!(a.labels, b.labels);
        for (p, q) in a.points.iter().flatten().zip(b.points.iter().flatten()) {
            assert!((p - q).abs() <= p.abs() * 1e-11 + 1e-300);
        }
    }

    #[test]
    fn manifest_rejects_duplicate_and_unknown_categories() {
        let dup = r#"
            [[category]]
            name = "a"
            role = "base"
            parts = [0, 1]
            [[category]]
            name = "a"
            role = "novel"
            parts = [0, 1]
        "#;
        assert!(DatasetManifest::parse(dup).is_err());
        let unknown = r#"
            [[category]]
            name = "a"
            role = "base"
            parts = [0, 1]
            [[shape]]
            split = "train"
            category = "b"
            path = "x.pts"
        "#;
        assert!(matches!(
            DatasetManifest::parse(unknown),
            Err(DataError::UnknownCategory(_))
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
            [[category]]
            name = "a"
            role = "base"
            parts = [0, 1]
            [[shape]]
            split = "train"
            category = "a"
            path = "missing.pts"
        "#;
        let path = dir.path().join("manifest.toml");
        fs::write(&path, text).unwrap();
        assert!(matches!(Dataset::load(&path), Err(DataError::Io { .. })));
    }
}
