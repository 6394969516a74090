//! Dataset manifest: one JSON record per line.
//!
//! ```text
//! {"id":"stage-0003","role":"capture_stage","image":"data/stage-0003/image.png",
//!  "background":"data/stage-0003/background.png","scribbles":"data/stage-0003/scribbles.png","seed":123}
//! ```
//!
//! Paths are relative to the workspace root, which is the directory holding
//! the manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_file_atomic, AlphaMask, Image, ScribbleMap};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    CaptureStage,
    Unlabeled,
    Validation,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Base, Role::CaptureStage, Role::Unlabeled, Role::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::CaptureStage => "capture_stage",
            Role::Unlabeled => "unlabeled",
            Role::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown split `{s}` (expected base, capture_stage, unlabeled or validation)"
                ))
            })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub role: Role,
    pub image: String,
    pub background: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scribbles: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

/// A record with its rasters loaded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub role: Role,
    pub image: Image,
    pub background: Image,
    pub alpha: Option<AlphaMask>,
    pub scribbles: Option<ScribbleMap>,
    pub pseudo_label: Option<AlphaMask>,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

impl Manifest {
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        let m = Manifest { records };
        m.check_unique()?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records always serialize"));
            out.push('\n');
        }
        out
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(())
    }

    /// Reads a manifest and checks that every referenced file exists
    /// relative to `root`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_jsonl(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for r in &m.records {
            for rel in r.paths() {
                if !root.join(rel).is_file() {
                    return Err(Error::Manifest(format!(
                        "record `{}` references missing file {rel}",
                        r.id
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Record> {
        self.records.iter_mut().find(|r| r.id == id)
    }

    pub fn by_role(&self, role: Role) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.role == role)
    }
}

impl Record {
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        [
            Some(self.image.as_str()),
            Some(self.background.as_str()),
            self.alpha_gt.as_deref(),
            self.scribbles.as_deref(),
            self.pseudo_label.as_deref(),
        ]
        .into_iter()
        .flatten()
    }

    pub fn load(&self, root: &Path) -> Result<Sample> {
        let image = Image::load_png(root.join(&self.image))?;
        let background = Image::load_png(root.join(&self.background))?;
        if image.dims() != background.dims() {
            return Err(Error::dims(image.dims(), background.dims()));
        }
        let alpha = self
            .alpha_gt
            .as_ref()
            .map(|p| AlphaMask::load_png(root.join(p)))
            .transpose()?;
        let scribbles = self
            .scribbles
            .as_ref()
            .map(|p| ScribbleMap::load_png(root.join(p)))
            .transpose()?;
        let pseudo_label = self
            .pseudo_label
            .as_ref()
            .map(|p| AlphaMask::load_png(root.join(p)))
            .transpose()?;
        for d in [
            alpha.as_ref().map(AlphaMask::dims),
            scribbles.as_ref().map(ScribbleMap::dims),
            pseudo_label.as_ref().map(AlphaMask::dims),
        ]
        .into_iter()
        .flatten()
        {
            if d != image.dims() {
                return Err(Error::dims(image.dims(), d));
            }
        }
        Ok(Sample {
            id: self.id.clone(),
            role: self.role,
            image,
            background,
            alpha,
            scribbles,
            pseudo_label,
        })
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Manifest::load(root.join(MANIFEST_FILE))?;
        Ok(Workspace { root, manifest })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn load_role(&self, role: Role) -> Result<Vec<Sample>> {
        self.manifest
            .by_role(role)
            .map(|r| r.load(&self.root))
            .collect()
    }

    pub fn load_id(&self, id: &str) -> Result<Sample> {
        self.manifest
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("unknown id `{id}`")))?
            .load(&self.root)
    }
}
