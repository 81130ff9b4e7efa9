//! End-to-end runs: data, patches, fusion training, fusing and evaluation.
//!
//! A [`RunConfig`] fully describes one experiment. [`run`] writes every
//! artifact into one directory, together with the resolved config, so that
//! a directory can be understood (and re-run) on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{self, BankError, BankKind, FeatureBank, ImageEntry};
use crate::cover::{CoverConfig, CoverError, CoverMode};
use crate::fusion::{self, FusionConfig, FusionError, FusionModel, FusionSample, TrainConfig, TrainOutcome};
use crate::resource::{resource_report, ResourceReport};
use crate::retrieval::{
    evaluate, filter_by_rmax, records_from_bank, HistConfig, QuerySet, RetrievalError, RetrievalReport,
    SimilarityHistogram, SourceTag,
};
use crate::synth::{generate_world, Manifest, PatchSource, SceneSpec, Split, SynthError, WorldConfig};
use crate::tensor::{self, TensorError};

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Format,
    Compute,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, class: ErrorClass, message: String },
}

impl ExperimentError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ExperimentError::Config(_) => ErrorClass::Config,
            ExperimentError::Stage { class, .. } => *class,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Errors that know their class.
pub trait Classify: Display {
    fn class(&self) -> ErrorClass;
}

impl Classify for SynthError {
    fn class(&self) -> ErrorClass {
        match self {
            SynthError::Config(_) | SynthError::Coherence { .. } | SynthError::Packing { .. } => ErrorClass::Config,
            SynthError::Io(_) => ErrorClass::Io,
            SynthError::Bank(b) => b.class(),
            _ => ErrorClass::Format,
        }
    }
}

impl Classify for BankError {
    fn class(&self) -> ErrorClass {
        match self {
            BankError::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Format,
        }
    }
}

impl Classify for FusionError {
    fn class(&self) -> ErrorClass {
        match self {
            FusionError::Config(_) => ErrorClass::Config,
            FusionError::Tensor(t) => t.class(),
            _ => ErrorClass::Compute,
        }
    }
}

impl Classify for TensorError {
    fn class(&self) -> ErrorClass {
        match self {
            TensorError::Io(_) => ErrorClass::Io,
            TensorError::Checkpoint(_) => ErrorClass::Format,
            _ => ErrorClass::Compute,
        }
    }
}

impl Classify for RetrievalError {
    fn class(&self) -> ErrorClass {
        match self {
            RetrievalError::NotUnit { .. } | RetrievalError::Dim { .. } | RetrievalError::Duplicate(_) => ErrorClass::Format,
            _ => ErrorClass::Compute,
        }
    }
}

impl Classify for CoverError {
    fn class(&self) -> ErrorClass {
        ErrorClass::Config
    }
}

impl Classify for ExperimentError {
    fn class(&self) -> ErrorClass {
        ExperimentError::class(self)
    }
}

impl Classify for std::io::Error {
    fn class(&self) -> ErrorClass {
        ErrorClass::Io
    }
}

impl Classify for serde_json::Error {
    fn class(&self) -> ErrorClass {
        if self.is_io() {
            ErrorClass::Io
        } else {
            ErrorClass::Format
        }
    }
}

fn at<E: Classify>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, class: e.class(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synth { world: WorldConfig },
    /// Pre-computed banks, e.g. from a real encoder.
    Banks { manifest: PathBuf, texts: PathBuf, full: PathBuf, patches: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Preset {
    /// Full image vs. multi-feature patches vs. fused single feature.
    PaperProtocol,
    /// The protocol repeated for table-mode CC at each `k`.
    KSweep { ks: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub rmax: Option<f64>,
    pub split: Split,
    pub hist: HistConfig,
    /// Queries timed for the resource table; 0 disables timing.
    pub timing_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5], rmax: None, split: Split::Test, hist: HistConfig::default(), timing_queries: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Model initialisation seed.
    pub seed: u64,
    pub data: DataSource,
    pub patches: PatchSource,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub train_split: Split,
    pub eval: EvalConfig,
    pub preset: Preset,
    pub fuse_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            name: "run".into(),
            seed: 0,
            patches: PatchSource::Cc(CoverConfig::table(world.image_side, 5)),
            fusion: FusionConfig::with_dim(world.dim),
            data: DataSource::Synth { world },
            train: TrainConfig::default(),
            train_split: Split::Train,
            eval: EvalConfig::default(),
            preset: Preset::PaperProtocol,
            fuse_chunk: 64,
        }
    }
}

impl RunConfig {
    /// Sets the model, world and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        if let DataSource::Synth { world } = &mut self.data {
            world.seed = seed;
        }
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.fusion.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and >= 1".into());
        }
        if let Some(r) = self.eval.rmax {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("eval.rmax {r} outside (0, 1]"));
            }
        }
        if self.train_split == self.eval.split {
            return bad("train and eval splits must differ".into());
        }
        if self.fuse_chunk == 0 {
            return bad("fuse_chunk must be >= 1".into());
        }
        match &self.data {
            DataSource::Synth { world } => {
                world.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                if world.dim != self.fusion.dim {
                    return bad(format!("world dim {} != fusion dim {}", world.dim, self.fusion.dim));
                }
                if let PatchSource::Cc(c) = &self.patches {
                    c.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                    if c.image_side != world.image_side {
                        return bad(format!("cover side {} != world image side {}", c.image_side, world.image_side));
                    }
                }
            }
            DataSource::Banks { .. } => {
                if matches!(self.preset, Preset::KSweep { .. }) {
                    return bad("k-sweep needs a synthetic world to generate patches".into());
                }
            }
        }
        if let Preset::KSweep { ks } = &self.preset {
            if ks.is_empty() {
                return bad("k-sweep needs at least one k".into());
            }
            for &k in ks {
                CoverConfig::table(224, k).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// The configuration used to check end-to-end detail injection: 500
    /// training and 150 test images of 20 classes with small objects only,
    /// one to three per image, and a one-layer fuser.
    pub fn detail_injection() -> Self {
        let world = WorldConfig {
            name: "synth-small".into(),
            num_images: 650,
            num_classes: 20,
            instances_min: 1,
            instances_max: 3,
            regime: crate::synth::ScaleRegime::SmallOnly,
            split: crate::synth::SplitSpec::Counts { train: 500, val: 0, test: 150 },
            ..WorldConfig::default()
        };
        Self {
            name: "detail-injection".into(),
            fusion: FusionConfig { enc_layers: 1, dec_layers: 1, ..FusionConfig::with_dim(world.dim) },
            data: DataSource::Synth { world },
            ..Self::default()
        }
    }
}

/// Images, texts and both feature banks of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<SceneSpec>,
    pub texts: FeatureBank,
    pub full: FeatureBank,
    pub patches: FeatureBank,
}

impl Dataset {
    pub fn ids(&self, split: Split) -> BTreeSet<u64> {
        self.scenes.iter().filter(|s| s.split == split).map(|s| s.image_id).collect()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let ids: BTreeSet<u64> = self.scenes.iter().map(|s| s.image_id).collect();
        for (what, b) in [("full", &self.full), ("patches", &self.patches)] {
            let got: BTreeSet<u64> = b.images.iter().map(|e| e.image_id).collect();
            if got != ids {
                return Err(format!("{what} bank image ids do not match the manifest"));
            }
            if b.dim != self.texts.dim {
                return Err(format!("{what} bank dim {} != text dim {}", b.dim, self.texts.dim));
            }
        }
        if self.full.kind != BankKind::ImageSingle {
            return Err("full-image bank must be image_single".into());
        }
        if self.texts.kind != BankKind::Text {
            return Err("text bank must be of kind text".into());
        }
        Ok(())
    }
}

pub fn synth_dataset(world_cfg: &WorldConfig, patches: &PatchSource) -> std::result::Result<Dataset, SynthError> {
    let world = generate_world(world_cfg)?;
    let all: Vec<&SceneSpec> = world.scenes.iter().collect();
    Ok(Dataset {
        manifest: world.manifest(),
        texts: world.text_bank()?,
        full: world.image_bank(&all, &PatchSource::FullImage)?,
        patches: world.image_bank(&all, patches)?,
        scenes: world.scenes,
    })
}

pub fn load_dataset(manifest: &Path, texts: &Path, full: &Path, patches: &Path) -> Result<Dataset> {
    let m = Manifest::load(manifest).map_err(at("ingest"))?;
    let ds = Dataset {
        scenes: m.scenes().map_err(at("ingest"))?,
        manifest: m,
        texts: bank::read_bank(texts).map_err(at("ingest"))?,
        full: bank::read_bank(full).map_err(at("ingest"))?,
        patches: bank::read_bank(patches).map_err(at("ingest"))?,
    };
    ds.check().map_err(|m| ExperimentError::Stage { stage: "ingest", class: ErrorClass::Format, message: m })?;
    Ok(ds)
}

fn unit_f64(row: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Fusion inputs for the images in `ids` (all images when `None`), in bank
/// order.
pub fn fusion_samples(full: &FeatureBank, patches: &FeatureBank, ids: Option<&BTreeSet<u64>>) -> std::result::Result<Vec<FusionSample>, String> {
    let d = patches.dim;
    if full.dim != d {
        return Err(format!("full-image bank dim {} != patch bank dim {d}", full.dim));
    }
    let by_id: BTreeMap<u64, &ImageEntry> = full.images.iter().map(|e| (e.image_id, e)).collect();
    patches
        .images
        .iter()
        .filter(|e| ids.is_none_or(|s| s.contains(&e.image_id)))
        .map(|e| {
            let img = by_id.get(&e.image_id).ok_or_else(|| format!("image {} missing from full-image bank", e.image_id))?;
            Ok(FusionSample {
                image_id: e.image_id,
                patches: e.features.chunks(d).flat_map(unit_f64).collect(),
                num_patches: e.num_rows(),
                image: unit_f64(img.row(0, d)),
                boxes: e.boxes.iter().map(|b| b.map(|v| v as f64)).collect(),
            })
        })
        .collect()
}

/// Single-feature bank of fused vectors.
pub fn fused_bank(model: &FusionModel, samples: &[FusionSample], chunk: usize) -> std::result::Result<FeatureBank, FusionError> {
    let fused = model.fuse_all(samples, chunk)?;
    let mut bank = FeatureBank::new_images(model.config.dim, BankKind::ImageSingle);
    for (s, v) in samples.iter().zip(&fused) {
        bank.images.push(ImageEntry::from_f64(s.image_id, vec![[0.0; 4]], std::slice::from_ref(v)));
    }
    Ok(bank)
}

/// Writes the `DFW1` checkpoint and its `.json` config sidecar.
pub fn save_model(model: &FusionModel, path: &Path) -> std::result::Result<(), TensorError> {
    tensor::save_checkpoint(&model.params, path)?;
    let json = serde_json::to_string_pretty(&model.config).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(sidecar(path), json + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> std::result::Result<FusionModel, FusionError> {
    let text = fs::read_to_string(sidecar(path)).map_err(|e| FusionError::Tensor(TensorError::Io(e)))?;
    let config: FusionConfig =
        serde_json::from_str(&text).map_err(|e| FusionError::Tensor(TensorError::Checkpoint(e.to_string())))?;
    let params = tensor::load_checkpoint(path)?;
    FusionModel::from_params(config, params)
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub source: SourceTag,
    pub single_feature: bool,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub patches_per_image: f64,
    pub rows: Vec<ReportRow>,
    pub train: TrainOutcome,
    #[serde(skip)]
    pub histograms: Vec<(String, SimilarityHistogram)>,
}

impl ProtocolResult {
    pub fn macro_at(&self, label: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label)?.report.macro_at(k)
    }
}

pub const LABEL_FULL: &str = "Full Image";
pub const LABEL_FUSED: &str = "DetailCLIP";

pub fn multi_label(source: &PatchSource) -> String {
    match source {
        PatchSource::Cc(_) => "CC multi".into(),
        PatchSource::Grid { .. } => "Grid multi".into(),
        PatchSource::Obj => "Obj multi".into(),
        PatchSource::FullImage => "Full multi".into(),
    }
}

fn source_tag(source: &PatchSource) -> SourceTag {
    match source {
        PatchSource::Cc(_) => SourceTag::Cc,
        PatchSource::Grid { .. } => SourceTag::Grid,
        PatchSource::Obj => SourceTag::Obj,
        PatchSource::FullImage => SourceTag::FullImage,
    }
}

pub type LabelledHistogram = (String, SimilarityHistogram);

/// Evaluates several banks over the images of `scenes`, all against the
/// same queries.
pub fn evaluate_banks(
    dataset: &str,
    texts: &FeatureBank,
    scenes: &[&SceneSpec],
    banks: &[(String, SourceTag, &FeatureBank)],
    eval: &EvalConfig,
) -> std::result::Result<(Vec<ReportRow>, Vec<LabelledHistogram>), RetrievalError> {
    let kept = match eval.rmax {
        Some(r) => filter_by_rmax(scenes.iter().copied(), r)?,
        None => scenes.to_vec(),
    };
    let ids: BTreeSet<u64> = kept.iter().map(|s| s.image_id).collect();
    let queries = QuerySet::from_texts(texts, kept.iter().copied())?;
    let mut rows = Vec::new();
    let mut hists = Vec::new();
    for (label, tag, bank) in banks {
        let records: Vec<_> = records_from_bank(bank, *tag)?.into_iter().filter(|r| ids.contains(&r.image_id)).collect();
        let mut ev = evaluate(dataset, &records, &queries, &eval.ks, eval.hist)?;
        ev.report.settings.rmax = eval.rmax;
        rows.push(ReportRow {
            label: label.clone(),
            source: *tag,
            single_feature: bank.kind == BankKind::ImageSingle,
            report: ev.report,
        });
        hists.push((label.clone(), ev.histogram));
    }
    Ok((rows, hists))
}

/// Trains a fuser on the training split, fuses the evaluation split and
/// scores full-image, multi-feature and fused retrieval.
pub fn run_protocol(cfg: &RunConfig, ds: &Dataset, patch_source: &PatchSource) -> Result<(ProtocolResult, FusionModel, FeatureBank)> {
    let train_ids = ds.ids(cfg.train_split);
    let eval_ids = ds.ids(cfg.eval.split);
    let stage_err = |stage, m: String| ExperimentError::Stage { stage, class: ErrorClass::Format, message: m };
    let train_samples = fusion_samples(&ds.full, &ds.patches, Some(&train_ids)).map_err(|m| stage_err("train", m))?;
    let texts: Vec<Vec<f64>> = ds.texts.texts.iter().map(|t| unit_f64(&t.feature)).collect();
    let mut model = FusionModel::new(cfg.fusion.clone(), cfg.seed).map_err(at("train"))?;
    let outcome = fusion::train(&mut model, &train_samples, &texts, &cfg.train).map_err(at("train"))?;

    let eval_samples = fusion_samples(&ds.full, &ds.patches, Some(&eval_ids)).map_err(|m| stage_err("fuse", m))?;
    let fused = fused_bank(&model, &eval_samples, cfg.fuse_chunk).map_err(at("fuse"))?;

    let scenes: Vec<&SceneSpec> = ds.scenes.iter().filter(|s| s.split == cfg.eval.split).collect();
    let banks = vec![
        (LABEL_FULL.to_string(), SourceTag::FullImage, &ds.full),
        (multi_label(patch_source), source_tag(patch_source), &ds.patches),
        (LABEL_FUSED.to_string(), SourceTag::Fused, &fused),
    ];
    let (rows, histograms) = evaluate_banks(&ds.manifest.name, &ds.texts, &scenes, &banks, &cfg.eval).map_err(at("eval"))?;
    let n = ds.patches.images.len().max(1) as f64;
    let result = ProtocolResult { patches_per_image: ds.patches.total_rows() as f64 / n, rows, train: outcome, histograms };
    Ok((result, model, fused))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub dataset: String,
    pub version: String,
    pub seed: u64,
    /// One entry per evaluated setting (one for `PaperProtocol`, one per
    /// `k` for a sweep).
    pub runs: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub patches: PatchSource,
    pub result: ProtocolResult,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: ExperimentReport,
    pub resources: Option<ResourceReport>,
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(at("write"))
}

fn hist_csv(hists: &[(String, SimilarityHistogram)], prefix: &str) -> String {
    let mut s = String::new();
    for (label, h) in hists {
        for line in h.to_csv().lines().skip(1) {
            if let Some(rest) = line.strip_prefix("# ") {
                s.push_str(&format!("# {prefix}{label}: {rest}\n"));
            } else {
                s.push_str(&format!("{prefix}{label},{line}\n"));
            }
        }
    }
    s
}

/// Executes `cfg`, writing artifacts into `out` (created if missing).
pub fn run(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(at("write"))?;
    write(out.join("config.json"), cfg.to_json() + "\n")?;

    let settings: Vec<PatchSource> = match (&cfg.preset, &cfg.data) {
        (Preset::PaperProtocol, _) => vec![cfg.patches.clone()],
        (Preset::KSweep { ks }, DataSource::Synth { world }) => {
            ks.iter().map(|&k| PatchSource::Cc(CoverConfig { mode: CoverMode::TableCompat, ..CoverConfig::table(world.image_side, k) })).collect()
        }
        (Preset::KSweep { .. }, DataSource::Banks { .. }) => unreachable!("rejected by validate"),
    };

    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        dataset: String::new(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        runs: Vec::new(),
    };
    let mut report_csv = RetrievalReport::csv_header(&cfg.eval.ks);
    report_csv.insert_str(0, if settings.len() > 1 { "setting," } else { "" });
    let mut hist = String::from("series,bin,lo,hi,positive,negative\n");
    let mut resources = None;
    let mut loss_csv = String::new();
    let banks_dir = out.join("banks");
    fs::create_dir_all(&banks_dir).map_err(at("write"))?;

    for (i, source) in settings.iter().enumerate() {
        let tag = source.tag();
        let ds = match &cfg.data {
            DataSource::Synth { world } => {
                progress(&format!("synth: {} images, patches {tag}", world.num_images));
                synth_dataset(world, source).map_err(at("synth"))?
            }
            DataSource::Banks { manifest, texts, full, patches } => {
                progress("ingest: loading banks");
                load_dataset(manifest, texts, full, patches)?
            }
        };
        report.dataset = ds.manifest.name.clone();
        if i == 0 {
            write(out.join("manifest.json"), ds.manifest.to_json().map_err(at("write"))? + "\n")?;
            if matches!(cfg.data, DataSource::Synth { .. }) {
                bank::write_bank(&banks_dir.join("texts.dfb"), &ds.texts).map_err(at("write"))?;
                bank::write_bank(&banks_dir.join("images_full.dfb"), &ds.full).map_err(at("write"))?;
            }
        }
        if matches!(cfg.data, DataSource::Synth { .. }) {
            bank::write_bank(&banks_dir.join(format!("patches_{tag}.dfb")), &ds.patches).map_err(at("write"))?;
        }

        progress(&format!("train: {} ({tag})", cfg.train_split_name()));
        let (result, model, fused) = run_protocol(cfg, &ds, source)?;
        for (e, l) in result.train.epoch_losses.iter().enumerate() {
            progress(&format!("  epoch {:>3}  loss {l:.6e}", e + 1));
        }
        let suffix = if settings.len() > 1 { format!("_{tag}") } else { String::new() };
        save_model(&model, &out.join(format!("model{suffix}.dfw"))).map_err(at("write"))?;
        bank::write_bank(&banks_dir.join(format!("fused{suffix}.dfb")), &fused).map_err(at("write"))?;
        if settings.len() > 1 {
            loss_csv.push_str(&result.train.to_csv().lines().map(|l| format!("{tag},{l}\n")).skip(usize::from(i > 0)).collect::<String>());
        } else {
            loss_csv = result.train.to_csv();
        }
        for row in &result.rows {
            let lead = if settings.len() > 1 { format!("{tag},") } else { String::new() };
            for line in row.report.to_csv_rows(&row.label).lines() {
                report_csv.push_str(&format!("{lead}{line}\n"));
            }
        }
        hist.push_str(&hist_csv(&result.histograms, &if settings.len() > 1 { format!("{tag}/") } else { String::new() }));

        if i == 0 && cfg.eval.timing_queries > 0 {
            progress("resources: timing queries");
            let eval_ids = ds.ids(cfg.eval.split);
            let subset = |b: &FeatureBank| FeatureBank {
                images: b.images.iter().filter(|e| eval_ids.contains(&e.image_id)).cloned().collect(),
                ..b.clone()
            };
            let texts: Vec<Vec<f64>> = ds.texts.texts.iter().map(|t| unit_f64(&t.feature)).collect();
            let queries: Vec<Vec<f64>> = (0..cfg.eval.timing_queries).map(|q| texts[q % texts.len()].clone()).collect();
            let (full, patches) = (subset(&ds.full), subset(&ds.patches));
            let label = multi_label(source);
            resources = Some(resource_report(&[(LABEL_FULL, &full), (&label, &patches), (LABEL_FUSED, &fused)], &queries));
        }
        report.runs.push(SweepEntry { patches: source.clone(), result });
    }

    write(out.join("loss.csv"), loss_csv)?;
    write(out.join("report.json"), serde_json::to_string_pretty(&report).map_err(at("write"))? + "\n")?;
    write(out.join("report.csv"), report_csv)?;
    write(out.join("hist.csv"), hist)?;
    if let Preset::KSweep { .. } = cfg.preset {
        write(out.join("ksweep.csv"), ksweep_csv(&report, &cfg.eval.ks))?;
    }
    if let Some(r) = &resources {
        write(out.join("resources.csv"), r.to_csv())?;
    }
    Ok(RunSummary { dir: out.to_path_buf(), report, resources })
}

impl RunConfig {
    fn train_split_name(&self) -> &'static str {
        match self.train_split {
            Split::Train => "train split",
            Split::Val => "val split",
            Split::Test => "test split",
        }
    }
}

/// One line per `k`: patch count and macro recall of each row.
pub fn ksweep_csv(report: &ExperimentReport, ks: &[usize]) -> String {
    let mut s = String::from("k,patches");
    let Some(first) = report.runs.first() else { return s + "\n" };
    for row in &first.result.rows {
        for k in ks {
            s.push_str(&format!(",{}@{k}", row.label));
        }
    }
    s.push('\n');
    for e in &report.runs {
        let k = match &e.patches {
            PatchSource::Cc(c) => c.sensitivity_k,
            _ => 0,
        };
        s.push_str(&format!("{k},{}", e.result.patches_per_image));
        for row in &e.result.rows {
            for kk in ks {
                s.push_str(&format!(",{:.6}", row.report.macro_at(*kk).unwrap_or(f64::NAN)));
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let world = WorldConfig {
            num_images: 40,
            num_classes: 6,
            instances_max: 3,
            dim: 16,
            regime: crate::synth::ScaleRegime::SmallOnly,
            ..WorldConfig::default()
        };
        RunConfig {
            data: DataSource::Synth { world },
            fusion: FusionConfig { heads: 4, enc_layers: 1, dec_layers: 1, ff_dim: 32, ..FusionConfig::with_dim(16) },
            train: TrainConfig { epochs: 2, batch_size: 10, ..TrainConfig::default() },
            patches: PatchSource::Cc(CoverConfig::table(224, 3)),
            eval: EvalConfig { timing_queries: 5, ..EvalConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = tiny();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.fusion.dim = 32;
        assert!(matches!(bad.validate(), Err(ExperimentError::Config(_))));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut same_split = cfg;
        same_split.eval.split = Split::Train;
        assert!(same_split.validate().is_err());
    }

    #[test]
    fn paper_protocol_writes_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let s = run(&tiny(), dir.path(), |_| {}).unwrap();
        let labels: Vec<&str> = s.report.runs[0].result.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec![LABEL_FULL, "CC multi", LABEL_FUSED]);
        for f in ["config.json", "manifest.json", "report.json", "report.csv", "hist.csv", "loss.csv", "resources.csv", "model.dfw", "model.dfw.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let model = load_model(&dir.path().join("model.dfw")).unwrap();
        assert_eq!(model.config, tiny().fusion);
        let fused = bank::read_bank(&dir.path().join("banks/fused.dfb")).unwrap();
        assert_eq!(fused.kind, BankKind::ImageSingle);
    }

    #[test]
    fn bank_ingest_matches_synth() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        run(&cfg, dir.path(), |_| {}).unwrap();
        let b = dir.path().join("banks");
        let ingest = RunConfig {
            data: DataSource::Banks {
                manifest: dir.path().join("manifest.json"),
                texts: b.join("texts.dfb"),
                full: b.join("images_full.dfb"),
                patches: b.join("patches_cc3.dfb"),
            },
            ..cfg
        };
        let out = tempfile::tempdir().unwrap();
        let s = run(&ingest, out.path(), |_| {}).unwrap();
        let a = fs::read(dir.path().join("report.csv")).unwrap();
        assert_eq!(fs::read(out.path().join("report.csv")).unwrap(), a);
        assert_eq!(s.report.runs.len(), 1);
    }

    #[test]
    fn errors_name_their_stage() {
        let cfg = RunConfig {
            data: DataSource::Banks {
                manifest: "/nonexistent/manifest.json".into(),
                texts: "t".into(),
                full: "f".into(),
                patches: "p".into(),
            },
            ..tiny()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run(&cfg, dir.path(), |_| {}).unwrap_err();
        assert!(err.to_string().contains("`ingest`"), "{err}");
        assert_eq!(err.class(), ErrorClass::Io);
    }
}
