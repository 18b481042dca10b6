//! Dataset manifest: class schema plus the reference and query image lists.
//!
//! The manifest is a TOML document:
//!
//! ```toml
//! format_version = 1
//!
//! [schema]
//! classes = ["road", "sidewalk", "building", "sky"]
//! road_class = "road"
//! undefined_id = 255          # optional, default 255
//!
//! [[images]]
//! id = "ref-000"
//! split = "reference"         # or "query"
//! condition = "day"
//! logits = "ref/ref-000.logits.npy"
//! descriptor = "ref/ref-000.desc.npy"
//! labels = "ref/ref-000.labels.npy"   # optional
//! geotag = { lat = 47.3769, lon = 8.5417 }  # optional
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::GeoTag;
use crate::tensor::{MAX_CLASSES, UNDEFINED_ID};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub classes: Vec<String>,
    pub road_class: String,
    #[serde(default = "default_undefined_id")]
    pub undefined_id: u8,
}

fn default_undefined_id() -> u8 {
    UNDEFINED_ID
}

impl ClassSchema {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Index of the road class; validated at load.
    pub fn road_index(&self) -> usize {
        self.class_index(&self.road_class)
            .expect("road class validated at manifest load")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub split: Split,
    pub condition: String,
    pub logits: PathBuf,
    pub descriptor: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotag: Option<GeoTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub schema: ClassSchema,
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Parses and validates manifest text. `base_dir` anchors relative paths.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut manifest: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.base_dir = base_dir.into();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let nc = self.schema.num_classes();
        if !(2..=MAX_CLASSES).contains(&nc) {
            return Err(Error::Manifest(format!(
                "class schema must list 2..={MAX_CLASSES} classes, got {nc}"
            )));
        }
        let mut names = HashSet::new();
        if let Some(dup) = self.schema.classes.iter().find(|c| !names.insert(c.as_str())) {
            return Err(Error::Manifest(format!("duplicate class name {dup:?}")));
        }
        if (self.schema.undefined_id as usize) < nc {
            return Err(Error::Manifest(format!(
                "undefined_id {} collides with a schema class",
                self.schema.undefined_id
            )));
        }
        if self.schema.class_index(&self.schema.road_class).is_none() {
            return Err(Error::MissingRoadClass(self.schema.road_class.clone()));
        }
        let mut ids = HashSet::new();
        for image in &self.images {
            if image.id.is_empty() {
                return Err(Error::Manifest("empty image id".into()));
            }
            if !ids.insert(image.id.as_str()) {
                return Err(Error::DuplicateId(image.id.clone()));
            }
            if let Some(geo) = image.geotag {
                geo.validate()
                    .map_err(|msg| Error::Manifest(format!("{}: {msg}", image.id)))?;
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for image in &self.images {
            let paths = [Some(&image.logits), Some(&image.descriptor), image.labels.as_ref()];
            for p in paths.into_iter().flatten() {
                let resolved = self.resolve(p);
                if !resolved.is_file() {
                    return Err(Error::DanglingPath(resolved));
                }
            }
        }
        Ok(())
    }

    /// Every query image must carry labels before evaluation.
    pub fn require_query_labels(&self) -> Result<()> {
        match self.queries().find(|e| e.labels.is_none()) {
            Some(e) => Err(Error::MissingLabels(e.id.clone())),
            None => Ok(()),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn references(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(|e| e.split == Split::Reference)
    }

    pub fn queries(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(|e| e.split == Split::Query)
    }

    pub fn get(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }
}

/// Reads and validates a manifest; `strict` additionally checks that every
/// referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>, strict: bool) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, base)?;
    if strict {
        manifest.check_paths()?;
    }
    Ok(manifest)
}
