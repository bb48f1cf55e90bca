//! Occluded-dataset synthesis from clean images and body-part parsing maps.
//!
//! One body component per image is chosen at random, its mask is coarsened by
//! tile averaging and nearest-neighbour upsampling, and the covered pixels are
//! overwritten with a flat fill colour.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{parsing_path, write_manifest, DatasetIndex, ImageRef, SampleRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Head = 1,
    Torso = 2,
    UpperArms = 3,
    LowerArms = 4,
    UpperLegs = 5,
    LowerLegs = 6,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Head,
        Component::Torso,
        Component::UpperArms,
        Component::LowerArms,
        Component::UpperLegs,
        Component::LowerLegs,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Self> {
        Self::ALL.get(usize::from(label).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Head => "head",
            Component::Torso => "torso",
            Component::UpperArms => "upper_arms",
            Component::LowerArms => "lower_arms",
            Component::UpperLegs => "upper_legs",
            Component::LowerLegs => "lower_legs",
        }
    }
}

/// Per-pixel component labels (0 = background, 1..=6 = [`Component`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} parsing map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 6) {
            return Err(Error::Integrity(format!("parsing label {bad} outside 0..=6")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Components with at least one pixel, in label order.
    pub fn present_components(&self) -> Vec<Component> {
        let present: BTreeSet<u8> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        present.into_iter().filter_map(Component::from_label).collect()
    }

    /// Reads a single-channel PNG and maps raw values through `table`.
    pub fn load_with(path: &Path, table: &LabelTable) -> Result<Self> {
        let gray = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let labels = gray.as_raw().iter().map(|&v| table.map(v)).collect();
        Self::new(gray.height() as usize, gray.width() as usize, labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &LabelTable::pascal_person_part())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions")
            .save(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Translation from a parser's raw label vocabulary to component labels.
/// Raw values without an entry map to background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    pub name: String,
    pub entries: BTreeMap<u8, u8>,
}

impl LabelTable {
    /// Pascal-Person-Part vocabulary, which already uses the component order.
    pub fn pascal_person_part() -> Self {
        Self {
            name: "pascal".into(),
            entries: (1..=6).map(|l| (l, l)).collect(),
        }
    }

    /// LIP 20-class vocabulary. LIP has no separate upper/lower limb classes:
    /// bare arms count as lower arms, upper clothes and coats as torso, pants
    /// and skirts as upper legs, bare legs, socks and shoes as lower legs.
    pub fn lip() -> Self {
        let pairs: [(u8, Component); 17] = [
            (1, Component::Head),       // hat
            (2, Component::Head),       // hair
            (4, Component::Head),       // sunglasses
            (13, Component::Head),      // face
            (5, Component::Torso),      // upper clothes
            (6, Component::Torso),      // dress
            (7, Component::Torso),      // coat
            (10, Component::Torso),     // jumpsuit
            (11, Component::Torso),     // scarf
            (3, Component::LowerArms),  // glove
            (14, Component::LowerArms), // left arm
            (15, Component::LowerArms), // right arm
            (9, Component::UpperLegs),  // pants
            (12, Component::UpperLegs), // skirt
            (16, Component::LowerLegs), // left leg
            (17, Component::LowerLegs), // right leg
            (8, Component::LowerLegs),  // socks
        ];
        let mut entries: BTreeMap<u8, u8> = pairs.iter().map(|&(raw, c)| (raw, c.label())).collect();
        entries.insert(18, Component::LowerLegs.label());
        entries.insert(19, Component::LowerLegs.label());
        Self {
            name: "lip".into(),
            entries,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        if let Some((raw, l)) = table.entries.iter().find(|(_, &l)| l > 6) {
            return Err(Error::Config(format!("label table maps {raw} to invalid component {l}")));
        }
        Ok(table)
    }

    /// `pascal`, `lip`, or a path to a JSON table.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "pascal" => Ok(Self::pascal_person_part()),
            "lip" => Ok(Self::lip()),
            path => Self::from_json_file(Path::new(path)),
        }
    }

    #[inline]
    pub fn map(&self, raw: u8) -> u8 {
        self.entries.get(&raw).copied().unwrap_or(0)
    }
}

impl Default for LabelTable {
    fn default() -> Self {
        Self::pascal_person_part()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{} mask bits for {height}x{width}", bits.len())));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMask {
    pub component: Component,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub pool_size: usize,
    pub binarize_threshold: f64,
    pub fill_value: [f32; 3],
    pub seed: u64,
    #[serde(default)]
    pub label_table: LabelTable,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            pool_size: 4,
            binarize_threshold: 0.5,
            fill_value: [0.0; 3],
            seed: 42,
            label_table: LabelTable::default(),
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be at least 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0,1)".into()));
        }
        if self.fill_value.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("fill_value components must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Draws one present component uniformly and returns its exact pixel mask.
pub fn select_component<R: Rng>(pm: &ParsingMap, rng: &mut R) -> Result<ComponentMask> {
    let present = pm.present_components();
    if present.is_empty() {
        return Err(Error::NoComponent);
    }
    let component = present[rng.random_range(0..present.len())];
    let label = component.label();
    let bits = pm.labels.iter().map(|&l| l == label).collect();
    Ok(ComponentMask {
        component,
        mask: Mask::new(pm.height, pm.width, bits)?,
    })
}

/// Average-pools with kernel = stride = `pool_size`, upsamples by nearest
/// neighbour and keeps tiles whose mean is `>= binarize_threshold`.
///
/// Edge tiles that overhang the image are averaged over their in-bounds
/// pixels only, which keeps blockwise-constant masks fixed points.
pub fn soften_mask(mask: &Mask, cfg: &OcclusionConfig) -> Mask {
    let s = cfg.pool_size.max(1);
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::filled(h, w, false);
    for ty in (0..h).step_by(s) {
        for tx in (0..w).step_by(s) {
            let (y1, x1) = ((ty + s).min(h), (tx + s).min(w));
            let mut on = 0usize;
            for y in ty..y1 {
                for x in tx..x1 {
                    on += usize::from(mask.get(y, x));
                }
            }
            let area = (y1 - ty) * (x1 - tx);
            if on as f64 / area as f64 >= cfg.binarize_threshold {
                for y in ty..y1 {
                    out.bits[y * w + tx..y * w + x1].fill(true);
                }
            }
        }
    }
    out
}

/// Overwrites masked pixels with `cfg.fill_value`.
pub fn fuse_occlusion(image: &Image, mask: &Mask, cfg: &OcclusionConfig) -> Result<Image> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let mut out = image.clone();
    for (i, &on) in mask.bits.iter().enumerate() {
        if on {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&cfg.fill_value);
        }
    }
    Ok(out)
}

/// Random stream for one file, so output does not depend on processing order.
pub fn file_rng(seed: u64, rel: &str) -> rng::Rng {
    rng::substream(seed, rel)
}

/// Component choice and softened mask for one parsing map.
pub fn plan_occlusion<R: Rng>(pm: &ParsingMap, cfg: &OcclusionConfig, rng: &mut R) -> Result<ComponentMask> {
    let raw = select_component(pm, rng)?;
    Ok(ComponentMask {
        component: raw.component,
        mask: soften_mask(&raw.mask, cfg),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionStats {
    pub num_processed: usize,
    pub num_skipped: usize,
    pub per_component_counts: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

enum FileOutcome {
    Occluded(Component),
    Skipped(String),
}

fn process_record(
    record: &SampleRecord,
    parse_root: &Path,
    dst_root: &Path,
    cfg: &OcclusionConfig,
) -> Result<FileOutcome> {
    let rel = record
        .image_ref
        .rel()
        .ok_or_else(|| Error::Config("occlusion synthesis needs file-backed records".into()))?;
    let src_path = record.image_ref.path().expect("file-backed");
    let dst_path = dst_root.join(rel);
    let image = Image::load(&src_path, None)?;

    let copy_clean = |reason: String| -> Result<FileOutcome> {
        if let Some(parent) = dst_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&src_path, &dst_path).map_err(|e| Error::io(&dst_path, e))?;
        Ok(FileOutcome::Skipped(reason))
    };

    let map_path = parsing_path(parse_root, rel);
    if !map_path.is_file() {
        return copy_clean(format!("{rel}: missing parsing map {}", map_path.display()));
    }
    let map = ParsingMap::load_with(&map_path, &cfg.label_table)?;
    if map.height != image.height || map.width != image.width {
        return copy_clean(format!(
            "{rel}: parsing map {}x{} does not match image {}x{}",
            map.height, map.width, image.height, image.width
        ));
    }
    let mut rng = file_rng(cfg.seed, rel);
    let plan = match plan_occlusion(&map, cfg, &mut rng) {
        Ok(plan) => plan,
        Err(Error::NoComponent) => {
            log::info!("{rel}: parsing map is all background, copied unchanged");
            return copy_clean(format!("{rel}: no body component in parsing map"));
        }
        Err(e) => return Err(e),
    };
    fuse_occlusion(&image, &plan.mask, cfg)?.save(&dst_path)?;
    Ok(FileOutcome::Occluded(plan.component))
}

/// Writes an occluded copy of every file-backed record under `dst_root`,
/// together with a manifest and `stats.json`.
pub fn build_occluded_dataset(
    src_index: &DatasetIndex,
    parse_root: &Path,
    dst_root: &Path,
    cfg: &OcclusionConfig,
) -> Result<OcclusionStats> {
    cfg.validate()?;
    std::fs::create_dir_all(dst_root).map_err(|e| Error::io(dst_root, e))?;

    let outcomes: Vec<Result<FileOutcome>> = src_index
        .records
        .par_iter()
        .map(|r| process_record(r, parse_root, dst_root, cfg))
        .collect();

    let mut stats = OcclusionStats {
        num_processed: 0,
        num_skipped: 0,
        per_component_counts: Component::ALL.iter().map(|c| (c.name().to_string(), 0)).collect(),
        errors: Vec::new(),
    };
    for outcome in outcomes {
        match outcome? {
            FileOutcome::Occluded(c) => {
                stats.num_processed += 1;
                *stats.per_component_counts.get_mut(c.name()).expect("all names seeded") += 1;
            }
            FileOutcome::Skipped(reason) => {
                log::warn!("{reason}");
                stats.num_skipped += 1;
                stats.errors.push(reason);
            }
        }
    }

    let moved: Vec<SampleRecord> = src_index
        .records
        .iter()
        .map(|r| SampleRecord {
            image_ref: ImageRef::File {
                root: dst_root.to_path_buf(),
                rel: r.image_ref.rel().expect("checked above").to_string(),
            },
            ..r.clone()
        })
        .collect();
    write_manifest(dst_root, &moved)?;
    let stats_path = dst_root.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)
        .map_err(|e| Error::io(&stats_path, e))?;
    Ok(stats)
}
