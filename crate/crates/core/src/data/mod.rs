//! Dataset records, manifest I/O and layout adapters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::image::Image;

pub mod augment;
pub mod sampler;
pub mod synth;

pub use augment::{augment, augment_traced, AugmentConfig, AugmentTrace, EraseRect};
pub use sampler::{make_pk_sampler, BatchPlan};
pub use synth::{generate_synthetic_dataset, SynthReport, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PARSING_DIR: &str = "parsing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" | "test" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Where the pixels of a sample live.
#[derive(Debug, Clone)]
pub enum ImageRef {
    /// File at `root/rel`; `rel` uses forward slashes.
    File { root: PathBuf, rel: String },
    Memory(Arc<Image>),
}

impl ImageRef {
    pub fn path(&self) -> Option<PathBuf> {
        match self {
            ImageRef::File { root, rel } => Some(root.join(rel)),
            ImageRef::Memory(_) => None,
        }
    }

    pub fn rel(&self) -> Option<&str> {
        match self {
            ImageRef::File { rel, .. } => Some(rel),
            ImageRef::Memory(_) => None,
        }
    }

    pub fn load(&self, size: Option<(usize, usize)>) -> Result<Image> {
        match self {
            ImageRef::File { root, rel } => Image::load(&root.join(rel), size),
            ImageRef::Memory(img) => {
                if let Some((h, w)) = size {
                    if img.height != h || img.width != w {
                        return Err(Error::Shape(format!(
                            "in-memory image is {}x{}, expected {h}x{w}",
                            img.height, img.width
                        )));
                    }
                }
                Ok(img.as_ref().clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub image_ref: ImageRef,
    pub identity_id: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub split: Split,
}

impl SampleRecord {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            identity_id: self.identity_id,
            clothes_id: self.clothes_id,
            camera_id: self.camera_id,
        }
    }
}

/// The metadata triple used by evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub identity_id: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
}

/// Immutable, validated collection of samples plus label vocabularies.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: Option<PathBuf>,
    pub records: Vec<SampleRecord>,
    pub num_identities: usize,
    pub num_clothes: usize,
    pub clothes_of_identity: BTreeMap<usize, BTreeSet<usize>>,
    identity_labels: BTreeMap<usize, usize>,
    clothes_labels: BTreeMap<usize, usize>,
}

impl DatasetIndex {
    /// Builds the vocabularies and checks that every clothes id belongs to
    /// exactly one identity.
    pub fn from_records(root: Option<PathBuf>, records: Vec<SampleRecord>) -> Result<Self> {
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        let mut clothes_of_identity: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for r in &records {
            match owner.get(&r.clothes_id) {
                Some(&id) if id != r.identity_id => {
                    return Err(Error::Integrity(format!(
                        "clothes_id {} appears under identity {} and identity {}",
                        r.clothes_id,
                        id.min(r.identity_id),
                        id.max(r.identity_id)
                    )));
                }
                Some(_) => {}
                None => {
                    owner.insert(r.clothes_id, r.identity_id);
                }
            }
            clothes_of_identity
                .entry(r.identity_id)
                .or_default()
                .insert(r.clothes_id);
        }
        let identity_labels: BTreeMap<usize, usize> = clothes_of_identity
            .keys()
            .enumerate()
            .map(|(label, &id)| (id, label))
            .collect();
        let clothes_labels: BTreeMap<usize, usize> = owner
            .keys()
            .enumerate()
            .map(|(label, &c)| (c, label))
            .collect();
        Ok(Self {
            root,
            num_identities: identity_labels.len(),
            num_clothes: clothes_labels.len(),
            records,
            clothes_of_identity,
            identity_labels,
            clothes_labels,
        })
    }

    /// Dense classifier label of an identity id.
    pub fn identity_label(&self, identity_id: usize) -> Option<usize> {
        self.identity_labels.get(&identity_id).copied()
    }

    pub fn clothes_label(&self, clothes_id: usize) -> Option<usize> {
        self.clothes_labels.get(&clothes_id).copied()
    }

    /// Dense clothes labels worn by the identity behind `identity_label`.
    pub fn clothes_labels_of_label(&self) -> Vec<Vec<usize>> {
        self.clothes_of_identity
            .values()
            .map(|set| set.iter().map(|c| self.clothes_labels[c]).collect())
            .collect()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Manifest,
    PrccLike,
    LtccLike,
    Synthetic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manifest" => Ok(Layout::Manifest),
            "prcc_like" => Ok(Layout::PrccLike),
            "ltcc_like" => Ok(Layout::LtccLike),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::Config(format!("unknown layout '{other}'"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    identity_id: usize,
    clothes_id: usize,
    camera_id: usize,
    split: Split,
}

/// Reads an index from `root` in the given layout. Records come back sorted
/// by relative path; every image header is probed so unreadable files fail
/// here rather than mid-training.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let mut rows = match layout {
        Layout::Manifest | Layout::Synthetic => read_manifest(&root.join(MANIFEST_FILE))?,
        Layout::PrccLike => scan_prcc(root)?,
        Layout::LtccLike => scan_ltcc(root)?,
    };
    rows.sort_by(|a, b| a.path.cmp(&b.path));

    for row in &rows {
        let path = root.join(&row.path);
        image::image_dimensions(&path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }

    let records = rows
        .into_iter()
        .map(|row| SampleRecord {
            image_ref: ImageRef::File {
                root: root.to_path_buf(),
                rel: row.path,
            },
            identity_id: row.identity_id,
            clothes_id: row.clothes_id,
            camera_id: row.camera_id,
            split: row.split,
        })
        .collect();
    DatasetIndex::from_records(Some(root.to_path_buf()), records)
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        // line 1 is the header
        let row = row.map_err(|e| Error::Parse {
            line: i + 2,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `manifest.csv` for the file-backed records of `index` under `root`.
pub fn write_manifest(root: &Path, records: &[SampleRecord]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    for r in records {
        let rel = r.image_ref.rel().ok_or_else(|| {
            Error::Config("cannot write a manifest row for an in-memory image".into())
        })?;
        writer
            .serialize(ManifestRow {
                path: rel.to_string(),
                identity_id: r.identity_id,
                clothes_id: r.clothes_id,
                camera_id: r.camera_id,
                split: r.split,
            })
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(&path, e))
}

/// Path of the parsing map paired with `rel`: `parsing/<rel with .png>`.
pub fn parsing_path(root: &Path, rel: &str) -> PathBuf {
    root.join(PARSING_DIR).join(Path::new(rel).with_extension("png"))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn rel_string(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .expect("walkdir yields paths under root")
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn image_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// PRCC-style tree: `train/<pid>/<A|B|C>_*.ext` and `test/<A|B|C>/<pid>/*.ext`.
/// Cameras A and B share an outfit, C wears another; A test images are the
/// gallery, B and C test images are queries.
fn scan_prcc(root: &Path) -> Result<Vec<ManifestRow>> {
    let camera = |tag: &str| -> Option<usize> {
        match tag {
            "A" => Some(0),
            "B" => Some(1),
            "C" => Some(2),
            _ => None,
        }
    };
    let parse_pid = |s: &str, path: &Path| -> Result<usize> {
        s.parse().map_err(|_| {
            Error::Integrity(format!("bad identity directory in {}", path.display()))
        })
    };
    let mut rows = Vec::new();
    for path in image_files(&root.join("train")) {
        let rel = rel_string(root, &path);
        let parts: Vec<&str> = rel.split('/').collect();
        if parts.len() != 3 {
            continue;
        }
        let pid = parse_pid(parts[1], &path)?;
        let cam_tag = parts[2].split('_').next().unwrap_or("");
        let cam = camera(cam_tag).ok_or_else(|| {
            Error::Integrity(format!("no camera prefix in {}", path.display()))
        })?;
        rows.push(ManifestRow {
            path: rel,
            identity_id: pid,
            clothes_id: pid * 2 + usize::from(cam == 2),
            camera_id: cam,
            split: Split::Train,
        });
    }
    for path in image_files(&root.join("test")) {
        let rel = rel_string(root, &path);
        let parts: Vec<&str> = rel.split('/').collect();
        if parts.len() != 4 {
            continue;
        }
        let cam = camera(parts[1]).ok_or_else(|| {
            Error::Integrity(format!("unknown camera directory in {}", path.display()))
        })?;
        let pid = parse_pid(parts[2], &path)?;
        rows.push(ManifestRow {
            path: rel,
            identity_id: pid,
            clothes_id: pid * 2 + usize::from(cam == 2),
            camera_id: cam,
            split: if cam == 0 { Split::Gallery } else { Split::Query },
        });
    }
    Ok(rows)
}

/// LTCC-style tree: `train/`, `query/`, `test/` holding
/// `<pid>_<clothes>_c<cam>_<frame>.ext`. Outfit numbers are per identity, so
/// `(pid, clothes)` pairs are renumbered into global clothes ids.
fn scan_ltcc(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut parsed = Vec::new();
    for (dir, split) in [
        ("train", Split::Train),
        ("query", Split::Query),
        ("test", Split::Gallery),
    ] {
        for path in image_files(&root.join(dir)) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let fields: Vec<&str> = stem.split('_').collect();
            let bad = || Error::Integrity(format!("unparseable LTCC file name {}", path.display()));
            if fields.len() < 3 {
                return Err(bad());
            }
            let pid: usize = fields[0].parse().map_err(|_| bad())?;
            let outfit: usize = fields[1].parse().map_err(|_| bad())?;
            let cam: usize = fields[2]
                .strip_prefix('c')
                .and_then(|c| c.parse().ok())
                .ok_or_else(bad)?;
            parsed.push((rel_string(root, &path), pid, outfit, cam, split));
        }
    }
    let outfits: BTreeSet<(usize, usize)> = parsed.iter().map(|p| (p.1, p.2)).collect();
    let outfit_ids: BTreeMap<(usize, usize), usize> =
        outfits.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    Ok(parsed
        .into_iter()
        .map(|(path, pid, outfit, cam, split)| ManifestRow {
            path,
            identity_id: pid,
            clothes_id: outfit_ids[&(pid, outfit)],
            camera_id: cam,
            split,
        })
        .collect())
}
