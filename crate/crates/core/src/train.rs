//! Training orchestration: configuration, the optimisation loop, run
//! directories, evaluation of checkpoints, sensitivity sweeps and log
//! summaries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::sampler::make_pk_sampler;
use crate::data::{load_dataset, DatasetIndex, Layout, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EmbedOptions, Protocol, ReportFile};
use crate::image::Image;
use crate::losses::{compute_losses, BatchLabels, LossConfig, LossReport, Reduction, TripletKind};
use crate::model::checkpoint::{self, CheckpointHeader};
use crate::model::{batch_from_chw, BackboneProfile, Model, ModelConfig, ModelGrads};
use crate::rng;

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const REPORT_FILE: &str = "eval_report.json";

fn default_input_size() -> (usize, usize) {
    (384, 192)
}
fn default_p() -> usize {
    16
}
fn default_k() -> usize {
    4
}
fn default_lr() -> f64 {
    3.5e-4
}
fn default_decay_epochs() -> Vec<usize> {
    vec![30, 50]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    120
}
fn default_parts() -> usize {
    6
}
fn default_lambda() -> f64 {
    0.35
}
fn default_margin() -> f64 {
    0.3
}
fn default_reduction_ratio() -> usize {
    4
}
fn default_e_adv() -> usize {
    25
}
fn default_true() -> bool {
    true
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_protocol() -> Protocol {
    Protocol::PrccCc
}
fn default_max_rank() -> usize {
    20
}
fn default_repeats() -> usize {
    1
}

/// Every knob of a training run. JSON config files use these field names;
/// absent fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_root: PathBuf,
    pub layout: Layout,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    #[serde(default)]
    pub backbone: BackboneProfile,
    #[serde(default = "default_p")]
    pub batch_p: usize,
    #[serde(default = "default_k")]
    pub batch_k: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_epochs")]
    pub total_epochs: usize,
    #[serde(default = "default_parts")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_reduction_ratio")]
    pub r: usize,
    #[serde(default = "default_e_adv")]
    pub e_adv: usize,
    #[serde(default = "default_true")]
    pub t2mgs: bool,
    #[serde(default = "default_true")]
    pub prt: bool,
    #[serde(default)]
    pub classic_triplet: bool,
    #[serde(default)]
    pub triplet_reduction: Reduction,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_protocol")]
    pub eval_protocol: Protocol,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    /// PK passes over the train split per epoch.
    #[serde(default = "default_repeats")]
    pub plan_repeats: usize,
    /// Evaluate the final model on the query/gallery splits after training.
    #[serde(default = "default_true")]
    pub eval_after_train: bool,
}

impl TrainConfig {
    /// Toy-scale defaults around a dataset root.
    pub fn toy(dataset_root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            layout: Layout::Manifest,
            input_size: (64, 32),
            backbone: BackboneProfile::Toy,
            batch_p: 4,
            batch_k: 4,
            base_lr: 1e-3,
            lr_decay_epochs: vec![7],
            lr_decay_factor: 0.1,
            total_epochs: 10,
            k: 6,
            lambda: 0.35,
            margin: 0.3,
            r: 4,
            e_adv: 25,
            t2mgs: true,
            prt: true,
            classic_triplet: false,
            triplet_reduction: Reduction::Mean,
            weight_decay: 5e-4,
            augment: None,
            seed: 0,
            output_dir: default_output_dir(),
            eval_protocol: Protocol::LtccCc,
            max_rank: 20,
            plan_repeats: 10,
            eval_after_train: true,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative dataset roots are taken relative to the config file
        if cfg.dataset_root.is_relative() && !cfg.dataset_root.exists() {
            if let Some(parent) = path.parent() {
                let candidate = parent.join(&cfg.dataset_root);
                if candidate.exists() {
                    cfg.dataset_root = candidate;
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("lr_decay_epochs {:?} must be strictly increasing", self.lr_decay_epochs)));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return Err(Error::Config(format!(
                "lr_decay_epochs {:?} must all be below total_epochs {}",
                self.lr_decay_epochs, self.total_epochs
            )));
        }
        if self.prt && self.classic_triplet {
            return Err(Error::Config("prt and classic_triplet are mutually exclusive".into()));
        }
        crate::model::ops::check_lambda(self.lambda)?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config(format!(
                "batch_p and batch_k must be at least 2 for triplet mining (got {}x{})",
                self.batch_p, self.batch_k
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.plan_repeats == 0 {
            return Err(Error::Config("plan_repeats must be positive".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if !(self.margin >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("margin and weight_decay must be non-negative".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn triplet_kind(&self) -> TripletKind {
        if self.prt {
            TripletKind::Prt
        } else if self.classic_triplet {
            TripletKind::Classic
        } else {
            TripletKind::Off
        }
    }

    pub fn model_config(&self, index: &DatasetIndex) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            input_size: self.input_size,
            k: self.k,
            reduction: self.r,
            num_identities: index.num_identities,
            num_clothes: index.num_clothes,
            t2mgs: self.t2mgs,
        }
    }

    /// Learning rate for `epoch`: one decay step per milestone already
    /// reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.lr_decay_factor.powi(steps as i32)
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let flat = grads.flat();
        for (((_, p), g), (m, v)) in model.params_mut().into_iter().zip(flat).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_prt: f64,
    pub l_id_p: f64,
    pub l_id_g: f64,
    pub l_c: f64,
    pub l_ca: f64,
    pub total: f64,
    pub lr: f64,
}

impl LogRow {
    fn new(epoch: usize, step: usize, r: &LossReport, lr: f64) -> Self {
        Self { epoch, step, l_prt: r.l_prt, l_id_p: r.l_id_p, l_id_g: r.l_id_g, l_c: r.l_c, l_ca: r.l_ca, total: r.total, lr }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub rows: Vec<LogRow>,
    pub report: Option<ReportFile>,
    pub seconds: f64,
}

/// `<output_dir>/<timestamp>-seed<seed>`, with a numeric suffix on clashes.
pub fn make_run_dir(output_dir: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = output_dir.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Trains into a fresh run directory under `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = make_run_dir(&cfg.output_dir, cfg.seed)?;
    train_in(cfg, &dir)
}

fn load_images(records: &[&SampleRecord], size: (usize, usize)) -> Result<Vec<Image>> {
    use rayon::prelude::*;
    records.par_iter().map(|r| r.image_ref.load(Some(size))).collect()
}

/// Trains with every artifact written to `run_dir`.
pub fn train_in(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;

    let index = load_dataset(&cfg.dataset_root, cfg.layout)?;
    let mut model = Model::new(cfg.model_config(&index), cfg.seed)?;
    let train_idx = index.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config(format!("{} has no train split", cfg.dataset_root.display())));
    }
    let all: Vec<&SampleRecord> = index.records.iter().collect();
    // only train images are needed; others stay unloaded
    let mut cache: BTreeMap<usize, Image> = BTreeMap::new();
    let train_records: Vec<&SampleRecord> = train_idx.iter().map(|&i| all[i]).collect();
    for (i, im) in train_idx.iter().zip(load_images(&train_records, cfg.input_size)?) {
        cache.insert(*i, im);
    }
    let clothes_of_identity = index.clothes_labels_of_label();

    let mut adam = Adam::new(&model, cfg.weight_decay);
    let log_path = run_dir.join(LOG_FILE);
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?));
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let mut rows = Vec::new();

    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at(epoch);
        let loss_cfg = LossConfig {
            margin: cfg.margin,
            reduction: cfg.triplet_reduction,
            triplet: cfg.triplet_kind(),
            adversarial: epoch >= cfg.e_adv,
        };
        let mut batches = Vec::new();
        for rep in 0..cfg.plan_repeats {
            let pass = (epoch * cfg.plan_repeats + rep) as u64;
            batches.extend(make_pk_sampler(&index, cfg.batch_p, cfg.batch_k, rng::splitmix(cfg.seed ^ pass.wrapping_mul(0x9e37_79b9)))?.batches);
        }
        for (step, batch) in batches.iter().enumerate() {
            let mut aug_rng = rng::substream(cfg.seed, &format!("augment/{epoch}/{step}"));
            let images: Vec<Vec<f64>> = batch
                .iter()
                .map(|i| match &cfg.augment {
                    Some(a) => augment(&cache[i], a, &mut aug_rng).to_chw(),
                    None => cache[i].to_chw(),
                })
                .collect();
            let x = batch_from_chw(&images, cfg.input_size)?;
            let identities: Vec<usize> = batch
                .iter()
                .map(|&i| index.identity_label(index.records[i].identity_id).expect("indexed identity"))
                .collect();
            let clothes: Vec<usize> = batch
                .iter()
                .map(|&i| index.clothes_label(index.records[i].clothes_id).expect("indexed clothes"))
                .collect();

            let (out, fcache) = model.forward(&x, crate::model::Mode::Train)?;
            let (report, grads) = compute_losses(
                &out,
                BatchLabels { identities: &identities, clothes: &clothes, clothes_of_identity: &clothes_of_identity },
                &loss_cfg,
            )?;
            if !report.is_finite() {
                let _ = writer.flush();
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch} step {step}: {report:?}")));
            }
            let model_grads = model.backward(&out, &fcache, &grads)?;
            model.apply_batch_stats(&fcache);
            adam.step(&mut model, &model_grads, lr);

            let row = LogRow::new(epoch, step, &report, lr);
            writer.serialize(row).map_err(|e| Error::Io { path: log_path.clone(), source: e.into() })?;
            rows.push(row);
        }
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        let header = CheckpointHeader::for_model(&model, cfg.lambda, epoch);
        checkpoint::save(&model, &header, &ckpt_path)?;
        let epoch_rows: Vec<&LogRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
        let mean = epoch_rows.iter().map(|r| r.total).sum::<f64>() / epoch_rows.len().max(1) as f64;
        log::info!("epoch {epoch}: {} steps, mean loss {mean:.4}, lr {lr:.2e}", epoch_rows.len());
    }
    drop(writer);

    let final_path = run_dir.join(FINAL_CHECKPOINT_FILE);
    let header = CheckpointHeader::for_model(&model, cfg.lambda, cfg.total_epochs - 1);
    checkpoint::save(&model, &header, &final_path)?;

    let report = if cfg.eval_after_train {
        let file = evaluate_model(&model, &index, None, cfg.eval_protocol, cfg.lambda, cfg.max_rank)?.1;
        file.write(&run_dir.join(REPORT_FILE))?;
        Some(file)
    } else {
        None
    };
    let summary = summarize_rows(&rows)?;
    let summary_path = run_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&summary_path, e))?;

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        checkpoint: final_path,
        log: log_path,
        rows,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Query records from `index` (or from `query_index` when given) against
/// the gallery records of `index`.
pub fn evaluate_model(
    model: &Model,
    index: &DatasetIndex,
    query_index: Option<&DatasetIndex>,
    protocol: Protocol,
    lambda: f64,
    max_rank: usize,
) -> Result<(eval::EvalReport, ReportFile)> {
    let query = query_index.unwrap_or(index).subset(Split::Query);
    let gallery = index.subset(Split::Gallery);
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Config(format!(
            "evaluation needs query and gallery records (found {} and {})",
            query.len(),
            gallery.len()
        )));
    }
    eval::evaluate_records(model, &query, &gallery, protocol, lambda, max_rank, EmbedOptions::default())
}

fn check_vocabulary(header: &CheckpointHeader, index: &DatasetIndex) -> Result<()> {
    if header.num_identities != index.num_identities || header.num_clothes != index.num_clothes {
        return Err(Error::Config(format!(
            "checkpoint was trained with {} identities / {} clothes classes but the dataset has {} / {} ({} records)",
            header.num_identities,
            header.num_clothes,
            index.num_identities,
            index.num_clothes,
            index.records.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub dataset_root: PathBuf,
    pub layout: Layout,
    /// Take queries from a different root, for example clean queries
    /// against an occluded gallery.
    pub query_root: Option<PathBuf>,
    pub protocol: Protocol,
    pub lambda: f64,
    pub max_rank: usize,
}

/// Loads a checkpoint, scores it and writes `eval_report.json` (and the raw
/// distance matrix when `distmat` is given) into `out_dir`.
pub fn evaluate(req: &EvalRequest, out_dir: &Path, distmat: Option<&Path>) -> Result<ReportFile> {
    let (model, header) = checkpoint::load(&req.checkpoint)?;
    let index = load_dataset(&req.dataset_root, req.layout)?;
    check_vocabulary(&header, &index)?;
    let query_index = match &req.query_root {
        Some(root) => {
            let q = load_dataset(root, req.layout)?;
            check_vocabulary(&header, &q)?;
            Some(q)
        }
        None => None,
    };
    let (report, file) = evaluate_model(&model, &index, query_index.as_ref(), req.protocol, req.lambda, req.max_rank)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    file.write(&out_dir.join(REPORT_FILE))?;
    if let Some(path) = distmat {
        eval::write_distmat(path, &report.distmat)?;
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "k" => Ok(SweepParam::K),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::K => "k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub out_dir: PathBuf,
}

/// Inclusive grid `from, from + step, ...` up to `to`, tolerant of
/// floating-point drift at the end point.
pub fn grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || to < from {
        return Err(Error::Config(format!("bad grid {from}..{to} step {step}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_PLOT: &str = "sweep.svg";

/// Runs one evaluation per value and writes `sweep.csv` and `sweep.svg`.
///
/// A lambda sweep trains once (or uses `checkpoint`) and re-screens the same
/// model at every value; a k sweep trains one model per value. A failing
/// value becomes an error row.
pub fn sweep(spec: &SweepSpec, base: &TrainConfig, checkpoint: Option<&Path>) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let name = spec.parameter.name().to_string();
    let row_err = |value: f64, e: Error| {
        log::warn!("sweep {name}={value} failed: {e}");
        SweepRow { param: name.clone(), value, rank1: None, map: None, error: Some(e.to_string()) }
    };
    let mut rows = Vec::new();
    match spec.parameter {
        SweepParam::Lambda => {
            let loaded = match checkpoint {
                Some(p) => checkpoint::load(p).map(|(m, _)| m),
                None => {
                    let mut cfg = base.clone();
                    cfg.eval_after_train = false;
                    train_in(&cfg, &spec.out_dir.join("train")).and_then(|o| checkpoint::load(&o.checkpoint).map(|(m, _)| m))
                }
            };
            let index = load_dataset(&base.dataset_root, base.layout);
            match (loaded, index) {
                (Ok(model), Ok(index)) => {
                    for &v in &spec.values {
                        rows.push(
                            match evaluate_model(&model, &index, None, base.eval_protocol, v, base.max_rank) {
                                Ok((_, f)) => SweepRow { param: name.clone(), value: v, rank1: Some(f.rank1), map: Some(f.map), error: None },
                                Err(e) => row_err(v, e),
                            },
                        );
                    }
                }
                (Err(e), _) | (_, Err(e)) => {
                    let msg = e.to_string();
                    for &v in &spec.values {
                        rows.push(row_err(v, Error::Config(msg.clone())));
                    }
                }
            }
        }
        SweepParam::K => {
            for &v in &spec.values {
                let result = (|| {
                    if v.fract() != 0.0 || v < 1.0 {
                        return Err(Error::Config(format!("k must be a positive integer, got {v}")));
                    }
                    let mut cfg = base.clone();
                    cfg.k = v as usize;
                    cfg.eval_after_train = true;
                    train_in(&cfg, &spec.out_dir.join(format!("k{}", cfg.k)))?
                        .report
                        .ok_or_else(|| Error::Config("training produced no report".into()))
                })();
                rows.push(match result {
                    Ok(f) => SweepRow { param: name.clone(), value: v, rank1: Some(f.rank1), map: Some(f.map), error: None },
                    Err(e) => row_err(v, e),
                });
            }
        }
    }
    write_sweep_csv(&spec.out_dir.join(SWEEP_CSV), &rows)?;
    plot_sweep(&spec.out_dir.join(SWEEP_PLOT), &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Line plot of Rank@1 and mAP against the swept value.
pub fn plot_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    use plotters::prelude::*;

    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.value), b.max(r.value)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let pad = (hi - lo) * 0.05;
    let param = rows.first().map(|r| r.param.as_str()).unwrap_or("value");
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("Rank@1 and mAP vs {param}"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(lo - pad..hi + pad, 0.0..1.0)?;
        chart.configure_mesh().x_desc(param).y_desc("score").draw()?;
        let rank1: Vec<(f64, f64)> = ok.iter().map(|r| (r.value, r.rank1.unwrap_or(0.0))).collect();
        let map: Vec<(f64, f64)> = ok.iter().map(|r| (r.value, r.map.unwrap_or(0.0))).collect();
        chart
            .draw_series(LineSeries::new(rank1.clone(), &BLUE))?
            .label("Rank@1")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
        chart.draw_series(rank1.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))?;
        chart
            .draw_series(LineSeries::new(map.clone(), &RED))?
            .label("mAP")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
        chart.draw_series(map.iter().map(|&p| Circle::new(p, 3, RED.filled())))?;
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) })
}

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentMeans {
    pub l_prt: f64,
    pub l_id_p: f64,
    pub l_id_g: f64,
    pub l_c: f64,
    pub l_ca: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub num_rows: usize,
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub first_epoch_mean_total: f64,
    pub last_epoch_mean_total: f64,
    pub first_epoch_means: ComponentMeans,
    pub last_epoch_means: ComponentMeans,
    /// Mean total loss per epoch, in epoch order.
    pub epoch_mean_total: Vec<f64>,
    pub decreased: bool,
}

fn means(rows: &[&LogRow]) -> ComponentMeans {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&LogRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    ComponentMeans {
        l_prt: sum(|r| r.l_prt),
        l_id_p: sum(|r| r.l_id_p),
        l_id_g: sum(|r| r.l_id_g),
        l_c: sum(|r| r.l_c),
        l_ca: sum(|r| r.l_ca),
        total: sum(|r| r.total),
    }
}

pub fn summarize_rows(rows: &[LogRow]) -> Result<LogSummary> {
    let mut by_epoch: BTreeMap<usize, Vec<&LogRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    let (&first_epoch, first) = by_epoch.first_key_value().ok_or_else(|| Error::Parse { line: 1, reason: "log has no rows".into() })?;
    let (&last_epoch, last) = by_epoch.last_key_value().expect("non-empty");
    let first_means = means(first);
    let last_means = means(last);
    Ok(LogSummary {
        num_rows: rows.len(),
        first_epoch,
        last_epoch,
        first_epoch_mean_total: first_means.total,
        last_epoch_mean_total: last_means.total,
        first_epoch_means: first_means,
        last_epoch_means: last_means,
        epoch_mean_total: by_epoch.values().map(|v| means(v).total).collect(),
        decreased: last_means.total < first_means.total,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<LogRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse { line: i + 2, reason: e.to_string() })?);
    }
    Ok(rows)
}

/// Summarises a `train_log.csv` and writes `summary.json` next to it.
pub fn export_metrics(log_path: &Path) -> Result<LogSummary> {
    let summary = summarize_rows(&read_log(log_path)?)?;
    let out = log_path.with_file_name(SUMMARY_FILE);
    std::fs::write(&out, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&out, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let mut cfg = TrainConfig::toy("x");
        cfg.base_lr = 3.5e-4;
        cfg.lr_decay_epochs = vec![1];
        cfg.total_epochs = 2;
        assert_eq!(cfg.lr_at(0), 3.5e-4);
        assert!((cfg.lr_at(1) - 3.5e-5).abs() < 1e-18);
        cfg.lr_decay_epochs = vec![30, 50];
        cfg.total_epochs = 120;
        assert!((cfg.lr_at(49) - 3.5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(50) - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn validation_rules() {
        let ok = TrainConfig::toy("x");
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.lr_decay_epochs = vec![5, 5];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.lr_decay_epochs = vec![10];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.classic_triplet = true;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.prt = false;
        assert!(c.validate().is_ok());
        assert_eq!(c.triplet_kind(), TripletKind::Off);
    }

    #[test]
    fn json_defaults_follow_field_names() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"dataset_root": "d", "layout": "manifest"}"#).unwrap();
        assert_eq!(cfg.input_size, (384, 192));
        assert_eq!((cfg.batch_p, cfg.batch_k), (16, 4));
        assert_eq!(cfg.lr_decay_epochs, vec![30, 50]);
        assert_eq!((cfg.total_epochs, cfg.k, cfg.e_adv), (120, 6, 25));
        assert_eq!((cfg.lambda, cfg.margin, cfg.base_lr), (0.35, 0.3, 3.5e-4));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"dataset_root": "d", "layout": "manifest", "lamda": 1}"#).is_err());
    }

    #[test]
    fn grids() {
        let g = grid(0.15, 0.55, 0.05).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], 0.15);
        assert_eq!(g[8], 0.55);
        assert_eq!(grid(2.0, 6.0, 2.0).unwrap(), vec![2.0, 4.0, 6.0]);
        assert!(grid(1.0, 0.0, 0.1).is_err());
    }

    fn row(epoch: usize, total: f64) -> LogRow {
        LogRow { epoch, step: 0, l_prt: total, l_id_p: 0.0, l_id_g: 0.0, l_c: 0.0, l_ca: 0.0, total, lr: 1e-3 }
    }

    #[test]
    fn summaries() {
        let s = summarize_rows(&[row(0, 2.0), row(0, 2.0), row(1, 2.0)]).unwrap();
        assert_eq!(s.first_epoch_mean_total, s.last_epoch_mean_total);
        assert!(!s.decreased);
        let s = summarize_rows(&[row(0, 3.0), row(1, 2.0), row(2, 1.0)]).unwrap();
        assert!(s.decreased);
        assert_eq!(s.epoch_mean_total, vec![3.0, 2.0, 1.0]);
        assert!(matches!(summarize_rows(&[]), Err(Error::Parse { .. })));
    }

    #[test]
    fn export_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LOG_FILE);
        std::fs::write(&p, "epoch,step,l_prt,l_id_p,l_id_g,l_c,l_ca,total,lr\n").unwrap();
        assert!(matches!(export_metrics(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "epoch,step,l_prt,l_id_p,l_id_g,l_c,l_ca,total,lr\n0,0,1,1,1,1,0,4,0.1\n0,1,x,1,1,1,0,4,0.1\n").unwrap();
        match export_metrics(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "epoch,step,l_prt,l_id_p,l_id_g,l_c,l_ca,total,lr\n0,0,1,1,1,1,0,4,0.1\n1,0,1,1,1,0,0,3,0.1\n").unwrap();
        let s = export_metrics(&p).unwrap();
        assert!(s.decreased);
        assert!(dir.path().join(SUMMARY_FILE).exists());
    }

    #[test]
    fn sweep_artifacts_with_error_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SweepRow { param: "k".into(), value: 2.0, rank1: Some(0.5), map: Some(0.4), error: None },
            SweepRow { param: "k".into(), value: 5.0, rank1: None, map: None, error: Some("height 12 is not divisible".into()) },
            SweepRow { param: "k".into(), value: 6.0, rank1: Some(0.7), map: Some(0.6), error: None },
        ];
        write_sweep_csv(&dir.path().join(SWEEP_CSV), &rows).unwrap();
        plot_sweep(&dir.path().join(SWEEP_PLOT), &rows).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
        assert!(text.starts_with("param,value,rank1,map,error\n"));
        assert_eq!(text.lines().count(), 4);
        assert!(std::fs::read_to_string(dir.path().join(SWEEP_PLOT)).unwrap().contains("<svg"));
    }
}
