//! Retrieval evaluation: embeddings, distances, cloth-changing protocol
//! masks and CMC / mAP.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SampleMeta, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{batch_from_chw, ops, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Cross-camera matches only.
    PrccCc,
    /// Drops same-camera matches and same-identity matches in the same
    /// clothes.
    LtccCc,
    Standard,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::PrccCc => "prcc_cc",
            Protocol::LtccCc => "ltcc_cc",
            Protocol::Standard => "standard",
        }
    }

    pub fn is_valid(self, q: &SampleMeta, g: &SampleMeta) -> bool {
        let cross_camera = q.camera_id != g.camera_id;
        match self {
            Protocol::PrccCc | Protocol::Standard => cross_camera,
            Protocol::LtccCc => cross_camera && !(q.identity_id == g.identity_id && q.clothes_id == g.clothes_id),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prcc_cc" => Ok(Protocol::PrccCc),
            "ltcc_cc" => Ok(Protocol::LtccCc),
            "standard" => Ok(Protocol::Standard),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    CosineDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub meta: Vec<SampleMeta>,
    /// Rows that were all zero and so left unnormalised.
    pub zero_rows: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, meta: Vec<SampleMeta>) -> Result<Self> {
        if vectors.nrows() != meta.len() {
            return Err(Error::Shape(format!("{} vectors but {} metadata rows", vectors.nrows(), meta.len())));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        let zero_rows = zero_rows(&vectors);
        Ok(Self { vectors, meta, zero_rows })
    }

    /// Scales every nonzero row to unit L2 norm.
    pub fn normalize(&mut self) {
        for mut row in self.vectors.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

fn zero_rows(v: &Array2<f64>) -> Vec<usize> {
    v.outer_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&x| x == 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedOptions {
    pub normalize: bool,
    pub batch_size: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self { normalize: true, batch_size: 32 }
    }
}

/// One screened embedding per record, in record order.
pub fn compute_embeddings(model: &Model, records: &[&SampleRecord], lambda: f64, opts: EmbedOptions) -> Result<EmbeddingSet> {
    ops::check_lambda(lambda)?;
    let size = model.config.input_size;
    let c = model.channels();
    let chunks: Vec<&[&SampleRecord]> = records.chunks(opts.batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let images = chunk
                .iter()
                .map(|r| r.image_ref.load(Some(size)).map(|im| im.to_chw()))
                .collect::<Result<Vec<_>>>()?;
            model.embed(&batch_from_chw(&images, size)?, lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vectors = Array2::zeros((records.len(), c));
    let mut row = 0;
    for p in parts {
        let n = p.nrows();
        vectors.slice_mut(ndarray::s![row..row + n, ..]).assign(&p);
        row += n;
    }
    let mut set = EmbeddingSet::new(vectors, records.iter().map(|r| r.meta()).collect())?;
    if !set.zero_rows.is_empty() {
        log::warn!("{} of {} embeddings are all zero at lambda {lambda}", set.zero_rows.len(), set.len());
    }
    if opts.normalize {
        set.normalize();
    }
    Ok(set)
}

pub fn distance_matrix(q: &Array2<f64>, g: &Array2<f64>, metric: Metric) -> Result<Array2<f64>> {
    if q.ncols() != g.ncols() {
        return Err(Error::Shape(format!("query width {} vs gallery width {}", q.ncols(), g.ncols())));
    }
    Ok(Array2::from_shape_fn((q.nrows(), g.nrows()), |(i, j)| {
        let (a, b) = (q.row(i), g.row(j));
        match metric {
            Metric::Euclidean => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::CosineDistance => {
                let denom = (a.dot(&a) * b.dot(&b)).sqrt();
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - a.dot(&b) / denom
                }
            }
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMask {
    pub valid: Array2<bool>,
}

pub fn apply_protocol(q_meta: &[SampleMeta], g_meta: &[SampleMeta], protocol: Protocol) -> ProtocolMask {
    ProtocolMask {
        valid: Array2::from_shape_fn((q_meta.len(), g_meta.len()), |(i, j)| protocol.is_valid(&q_meta[i], &g_meta[j])),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub distmat: Array2<f64>,
    /// `cmc[r]` is the match rate within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub map: f64,
    pub num_dropped_queries: usize,
    /// Average precision per query; `None` for dropped queries.
    pub ap: Vec<Option<f64>>,
}

/// Ranks valid gallery entries by distance (stable, lowest index first on
/// ties) and scores each query. Queries without a valid same-identity
/// gallery entry are dropped and counted.
pub fn cmc_map(distmat: &Array2<f64>, mask: &ProtocolMask, q_meta: &[SampleMeta], g_meta: &[SampleMeta], max_rank: usize) -> Result<EvalReport> {
    let (nq, ng) = distmat.dim();
    if mask.valid.dim() != (nq, ng) || q_meta.len() != nq || g_meta.len() != ng {
        return Err(Error::Shape(format!(
            "distmat {:?}, mask {:?}, {} queries, {} gallery",
            distmat.dim(),
            mask.valid.dim(),
            q_meta.len(),
            g_meta.len()
        )));
    }
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }

    // (first match position, AP, valid count) per kept query
    let scored: Vec<Option<(usize, f64, usize)>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let mut order: Vec<usize> = (0..ng).filter(|&j| mask.valid[[i, j]]).collect();
            order.sort_by(|&a, &b| distmat[[i, a]].total_cmp(&distmat[[i, b]]));
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = None;
            for (pos, &j) in order.iter().enumerate() {
                if g_meta[j].identity_id == q_meta[i].identity_id {
                    hits += 1;
                    precision_sum += hits as f64 / (pos + 1) as f64;
                    first.get_or_insert(pos);
                }
            }
            first.map(|f| (f, precision_sum / hits as f64, order.len()))
        })
        .collect();

    let kept: Vec<(usize, f64, usize)> = scored.iter().flatten().copied().collect();
    let dropped = nq - kept.len();
    let widest = kept.iter().map(|k| k.2).max().unwrap_or(max_rank);
    let ranks = if max_rank > widest {
        log::warn!("max_rank {max_rank} exceeds the largest valid gallery ({widest}); clamping");
        widest
    } else {
        max_rank
    };
    let mut cmc = vec![0.0; ranks];
    for &(first, _, _) in &kept {
        for v in cmc.iter_mut().skip(first) {
            *v += 1.0;
        }
    }
    let denom = kept.len().max(1) as f64;
    cmc.iter_mut().for_each(|v| *v /= denom);
    let map = kept.iter().map(|k| k.1).sum::<f64>() / denom;
    Ok(EvalReport {
        distmat: distmat.clone(),
        rank1: cmc.first().copied().unwrap_or(0.0),
        cmc,
        map,
        num_dropped_queries: dropped,
        ap: scored.iter().map(|s| s.map(|k| k.1)).collect(),
    })
}

/// The JSON shape written as `eval_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub protocol: String,
    pub lambda: f64,
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_dropped_queries: usize,
    #[serde(default)]
    pub num_queries: usize,
    #[serde(default)]
    pub num_gallery: usize,
    #[serde(default)]
    pub num_zero_embeddings: usize,
}

impl ReportFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Raw distance matrix: `rows: u32 LE`, `cols: u32 LE`, then `rows * cols`
/// little-endian `f32` values in row-major order.
pub fn write_distmat(path: &Path, distmat: &Array2<f64>) -> Result<()> {
    let (r, c) = distmat.dim();
    let (r32, c32) = (
        u32::try_from(r).map_err(|_| Error::Shape("too many rows".into()))?,
        u32::try_from(c).map_err(|_| Error::Shape("too many columns".into()))?,
    );
    let mut buf = Vec::with_capacity(8 + 4 * r * c);
    buf.extend_from_slice(&r32.to_le_bytes());
    buf.extend_from_slice(&c32.to_le_bytes());
    for v in distmat.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_distmat(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Shape("distance file shorter than its header".into()));
    }
    let r = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 4 * r * c {
        return Err(Error::Shape(format!("distance file holds {} bytes, expected {}", bytes.len(), 8 + 4 * r * c)));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((r, c), values).map_err(|e| Error::Shape(e.to_string()))
}

/// Embeds query and gallery records and scores them under `protocol`.
pub fn evaluate_records(
    model: &Model,
    query: &[&SampleRecord],
    gallery: &[&SampleRecord],
    protocol: Protocol,
    lambda: f64,
    max_rank: usize,
    opts: EmbedOptions,
) -> Result<(EvalReport, ReportFile)> {
    let q = compute_embeddings(model, query, lambda, opts)?;
    let g = compute_embeddings(model, gallery, lambda, opts)?;
    let distmat = distance_matrix(&q.vectors, &g.vectors, Metric::Euclidean)?;
    let mask = apply_protocol(&q.meta, &g.meta, protocol);
    let report = cmc_map(&distmat, &mask, &q.meta, &g.meta, max_rank)?;
    if report.num_dropped_queries > 0 {
        log::warn!("{} of {} queries have no valid match under {}", report.num_dropped_queries, q.len(), protocol.name());
    }
    let file = ReportFile {
        protocol: protocol.name().into(),
        lambda,
        rank1: report.rank1,
        map: report.map,
        cmc: report.cmc.clone(),
        num_dropped_queries: report.num_dropped_queries,
        num_queries: q.len(),
        num_gallery: g.len(),
        num_zero_embeddings: q.zero_rows.len() + g.zero_rows.len(),
    };
    Ok((report, file))
}
