//! Manifest-driven pipeline: feature extraction and per-sentence IVA into a
//! cache directory, mini-batch training, and accuracy evaluation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{self, FrameConfig};
use crate::error::{Error, Result};
use crate::features::{self, FeatureTensor};
use crate::formats;
use crate::iva::{self, DemixingTensor, IvaConfig};
use crate::nn::checkpoint;
use crate::nn::layers::{argmax, Mode};
use crate::nn::{adam_step, AdamConfig, Batch, Network, NetworkSpec, NetworkState, Variant};

pub const THREADS_ENV: &str = "IVAFUSE_THREADS";
/// Largest tolerated share of sentences failing extraction.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Caps the global worker pool from `IVAFUSE_THREADS` when set. Only the
/// first call in a process has an effect.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(None) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub speaker: String,
    pub split: Split,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    speaker_id: String,
    #[serde(default)]
    split: Option<String>,
}

/// Sentences with speaker labels. Relative paths resolve against the
/// manifest's directory; a missing `split` column means train.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut records = Vec::new();
        for row in reader.deserialize() {
            let row: ManifestRow = row?;
            let p = PathBuf::from(&row.path);
            records.push(Record {
                path: if p.is_absolute() { p } else { base.join(p) },
                speaker: row.speaker_id,
                split: row.split.as_deref().unwrap_or("train").parse()?,
            });
        }
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    /// Sorted training speakers; class `i` is `classes()[i]`.
    pub fn classes(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let train: HashSet<&PathBuf> = self.records.iter().filter(|r| r.split == Split::Train).map(|r| &r.path).collect();
        if let Some(r) = self.records.iter().find(|r| r.split == Split::Test && train.contains(&r.path)) {
            return Err(Error::Manifest(format!("{} appears in both train and test", r.path.display())));
        }
        let classes: HashSet<String> = self.classes().into_iter().collect();
        if let Some(r) = self.records.iter().find(|r| r.split == Split::Test && !classes.contains(&r.speaker)) {
            return Err(Error::Manifest(format!("test speaker {:?} has no training sentences", r.speaker)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// `Y^[1]`, `Y^[2]` as parallel branch inputs.
    YPair,
    /// `Y` stacked as one `N x T x 2` tensor.
    YTensor,
    /// `X` stacked as one `N x T x 2` tensor.
    XTensor,
    /// LPC features alone.
    X1,
    /// MFCC features alone.
    X2,
}

impl FeatureMode {
    pub fn datasets(self) -> usize {
        match self {
            FeatureMode::X1 | FeatureMode::X2 => 1,
            _ => 2,
        }
    }

    pub fn check_variant(self, variant: Variant) -> Result<()> {
        let ok = match self {
            FeatureMode::YPair => matches!(variant, Variant::PcnnI | Variant::PcnnC),
            _ => variant == Variant::Ncnn,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("feature mode {self} cannot feed {variant}")))
        }
    }

    /// Network input slabs for one cached sentence.
    fn select(self, x: &[DMatrix<f64>], y: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        match self {
            FeatureMode::YPair | FeatureMode::YTensor => y.to_vec(),
            FeatureMode::XTensor => x.to_vec(),
            FeatureMode::X1 => vec![x[0].clone()],
            FeatureMode::X2 => vec![x[1].clone()],
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::YPair => "y-pair",
            FeatureMode::YTensor => "y-tensor",
            FeatureMode::XTensor => "x-tensor",
            FeatureMode::X1 => "x1",
            FeatureMode::X2 => "x2",
        })
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "y-pair" => Ok(FeatureMode::YPair),
            "y-tensor" => Ok(FeatureMode::YTensor),
            "x-tensor" => Ok(FeatureMode::XTensor),
            "x1" => Ok(FeatureMode::X1),
            "x2" => Ok(FeatureMode::X2),
            other => Err(Error::InvalidConfig(format!(
                "unknown feature mode {other:?}; expected y-pair, y-tensor, x-tensor, x1 or x2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub lpc_order: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { lpc_order: 13, n_mels: 39, n_ceps: 13 }
    }
}

/// Everything that determines a run. `network` supplies the architecture
/// hyperparameters; its `N`, `T`, `K` and class count are filled in from the
/// features and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frame: FrameConfig,
    pub features: FeatureConfig,
    pub iva: IvaConfig,
    pub network: NetworkSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub feature_mode: FeatureMode,
    /// Fit one demixing tensor on all training sentences instead of one per
    /// sentence.
    pub shared_demixing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frame: FrameConfig::default(),
            features: FeatureConfig::default(),
            iva: IvaConfig::default(),
            network: NetworkSpec::pcnn_i(2),
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            seed: 0,
            feature_mode: FeatureMode::YPair,
            shared_demixing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "frame_len",
        "frame_shift",
        "preemphasis",
        "target_frames",
        "vad_energy_ratio",
        "lpc_order",
        "n_mels",
        "n_ceps",
        "iva_eta0",
        "iva_eta_decay",
        "iva_eta_min",
        "iva_max_iters",
        "iva_cost_tol",
        "variant",
        "n1",
        "n2",
        "n3",
        "c1",
        "c2",
        "c3",
        "dilation",
        "f1",
        "f2",
        "batch_size",
        "epochs",
        "lr",
        "seed",
        "feature_mode",
        "shared_demixing",
    ];

    /// Sets one flat `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "frame_len" => self.frame.frame_len = parse(key, v)?,
            "frame_shift" => self.frame.frame_shift = parse(key, v)?,
            "preemphasis" => self.frame.preemphasis = parse(key, v)?,
            "target_frames" => self.frame.target_frames = parse(key, v)?,
            "vad_energy_ratio" => self.frame.vad_energy_ratio = parse(key, v)?,
            "lpc_order" => self.features.lpc_order = parse(key, v)?,
            "n_mels" => self.features.n_mels = parse(key, v)?,
            "n_ceps" => self.features.n_ceps = parse(key, v)?,
            "iva_eta0" => self.iva.eta0 = parse(key, v)?,
            "iva_eta_decay" => self.iva.eta_decay = parse(key, v)?,
            "iva_eta_min" => self.iva.eta_min = parse(key, v)?,
            "iva_max_iters" => self.iva.max_iters = parse(key, v)?,
            "iva_cost_tol" => self.iva.cost_tol = parse(key, v)?,
            "variant" => self.network.variant = v.parse()?,
            "n1" => self.network.n1 = parse(key, v)?,
            "n2" => self.network.n2 = parse(key, v)?,
            "n3" => self.network.n3 = parse(key, v)?,
            "c1" => self.network.c1 = parse(key, v)?,
            "c2" => self.network.c2 = parse(key, v)?,
            "c3" => self.network.c3 = parse(key, v)?,
            "dilation" => self.network.dilation = parse(key, v)?,
            "f1" => self.network.f1 = parse(key, v)?,
            "f2" => self.network.f2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "feature_mode" => self.feature_mode = v.parse()?,
            "shared_demixing" => self.shared_demixing = parse(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let n = &self.network;
        let values = [
            self.frame.frame_len.to_string(),
            self.frame.frame_shift.to_string(),
            self.frame.preemphasis.to_string(),
            self.frame.target_frames.to_string(),
            self.frame.vad_energy_ratio.to_string(),
            self.features.lpc_order.to_string(),
            self.features.n_mels.to_string(),
            self.features.n_ceps.to_string(),
            self.iva.eta0.to_string(),
            self.iva.eta_decay.to_string(),
            self.iva.eta_min.to_string(),
            self.iva.max_iters.to_string(),
            self.iva.cost_tol.to_string(),
            n.variant.to_string(),
            n.n1.to_string(),
            n.n2.to_string(),
            n.n3.to_string(),
            n.c1.to_string(),
            n.c2.to_string(),
            n.c3.to_string(),
            n.dilation.to_string(),
            n.f1.to_string(),
            n.f2.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.seed.to_string(),
            self.feature_mode.to_string(),
            self.shared_demixing.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Feature rows per slab.
    pub fn feature_dim(&self) -> Result<usize> {
        let (l, m) = (3 * self.features.lpc_order, 3 * self.features.n_ceps);
        if l != m {
            return Err(Error::InvalidConfig(format!("LPC and MFCC slabs differ in height: {l} vs {m}")));
        }
        Ok(l)
    }

    /// The network spec with data-dependent sizes filled in.
    pub fn network_spec(&self, n_classes: usize) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            n_features: self.feature_dim()?,
            frames: self.frame.target_frames,
            datasets: self.feature_mode.datasets(),
            n_classes,
            ..self.network.clone()
        };
        self.feature_mode.check_variant(spec.variant)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate_training(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.network_spec(2).map(|_| ())
    }
}

/// Raw feature tensor (`X^[1]` LPC, `X^[2]` MFCC) of one WAV file.
pub fn extract_features(path: &Path, frame: &FrameConfig, feat: &FeatureConfig) -> Result<FeatureTensor> {
    let signal = audio_io::load_wav(path)?;
    let voiced = audio_io::apply_vad(&signal, frame);
    let fixed = audio_io::fix_duration(&voiced, frame)?;
    let frames = audio_io::frame_and_window(&fixed, frame)?;
    let lpc = features::lpc_features(&frames, feat.lpc_order)?;
    let mfcc = features::mfcc_features(&frames, feat.n_mels, feat.n_ceps)?;
    features::build_tensor(vec![lpc, mfcc])
}

fn sentence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub id: String,
    pub speaker: String,
    pub class: usize,
    pub split: Split,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
}

/// Cached per-sentence tensors and the index mapping them to speakers.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub dir: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<StoreEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    speaker_id: String,
    split: Split,
    source: String,
}

struct Prepared {
    x: FeatureTensor,
    w: DemixingTensor,
}

/// Extracts features for every record, runs IVA, and writes
/// `<id>.x.bin`, `<id>.y.bin`, `<id>.w.bin` plus `index.csv` into `out`.
pub fn prepare_dataset(manifest: &Manifest, cfg: &RunConfig, out: &Path) -> Result<FeatureStore> {
    manifest.validate()?;
    cfg.frame.validate()?;
    cfg.iva.validate()?;
    cfg.feature_dim()?;
    fs::create_dir_all(out)?;

    let extracted: Vec<Result<FeatureTensor>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let frame = FrameConfig { crop_seed: sentence_seed(cfg.seed, i), ..cfg.frame.clone() };
            extract_features(&rec.path, &frame, &cfg.features)
        })
        .collect();

    let prepared: Vec<Result<Prepared>> = if cfg.shared_demixing {
        let train: Vec<&FeatureTensor> = extracted
            .iter()
            .zip(&manifest.records)
            .filter(|(_, r)| r.split == Split::Train)
            .filter_map(|(x, _)| x.as_ref().ok())
            .collect();
        if train.is_empty() {
            return Err(Error::Manifest("no training sentence could be extracted".into()));
        }
        let pooled = concat_frames(&train)?;
        let w = iva::separate(&pooled, &IvaConfig { seed: cfg.seed, ..cfg.iva.clone() })?.demixing;
        extracted.into_iter().map(|x| x.map(|x| Prepared { x, w: w.clone() })).collect()
    } else {
        extracted
            .into_par_iter()
            .enumerate()
            .map(|(i, x)| {
                let x = x?;
                let sep = iva::separate(&x, &IvaConfig { seed: sentence_seed(cfg.seed, i), ..cfg.iva.clone() })?;
                Ok(Prepared { x, w: sep.demixing })
            })
            .collect()
    };

    let total = prepared.len();
    let failures: Vec<(usize, &Error)> =
        prepared.iter().enumerate().filter_map(|(i, p)| p.as_ref().err().map(|e| (i, e))).collect();
    if failures.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        let (i, e) = failures[0];
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total,
            first: format!("{}: {e}", manifest.records[i].path.display()),
        });
    }
    for (i, e) in &failures {
        eprintln!("skipping {}: {e}", manifest.records[*i].path.display());
    }

    let classes = manifest.classes();
    let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut index = csv::Writer::from_path(out.join("index.csv"))?;
    let mut entries = Vec::with_capacity(total);
    for (i, (rec, p)) in manifest.records.iter().zip(prepared).enumerate() {
        let Ok(p) = p else { continue };
        let stem = rec.path.file_stem().and_then(|s| s.to_str()).unwrap_or("sentence");
        let id = format!("{i:05}_{stem}");
        let y = iva::demix(&p.w, &p.x)?;
        let x: Vec<DMatrix<f64>> = p.x.matrices().cloned().collect();
        formats::write_tensor(&out.join(format!("{id}.x.bin")), &x)?;
        formats::write_tensor(&out.join(format!("{id}.y.bin")), &y.slabs)?;
        formats::write_demixing(&out.join(format!("{id}.w.bin")), &p.w.matrices)?;
        index.serialize(IndexRow {
            id: id.clone(),
            speaker_id: rec.speaker.clone(),
            split: rec.split,
            source: rec.path.display().to_string(),
        })?;
        entries.push(StoreEntry {
            id,
            speaker: rec.speaker.clone(),
            class: class_of[rec.speaker.as_str()],
            split: rec.split,
            x: x.iter().map(round_f32).collect(),
            y: y.slabs.iter().map(round_f32).collect(),
        });
    }
    index.flush()?;
    Ok(FeatureStore { dir: out.to_path_buf(), classes, entries })
}

/// Values as stored in the cache, so a fresh run and a reopened cache agree.
fn round_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v as f32 as f64)
}

fn concat_frames(parts: &[&FeatureTensor]) -> Result<FeatureTensor> {
    let k = parts[0].datasets();
    let n = parts[0].dim();
    let t: usize = parts.iter().map(|p| p.frames()).sum();
    let mats = (0..k)
        .map(|kk| {
            let mut m = DMatrix::zeros(n, t);
            let mut off = 0;
            for p in parts {
                let s = &p.slabs[kk].values;
                m.columns_mut(off, s.ncols()).copy_from(s);
                off += s.ncols();
            }
            m
        })
        .collect();
    FeatureTensor::from_matrices(mats)
}

impl FeatureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(dir.join("index.csv"))?;
        let rows: Vec<IndexRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let classes: Vec<String> = rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut entries = Vec::with_capacity(rows.len());
        for r in &rows {
            let class = *class_of
                .get(r.speaker_id.as_str())
                .ok_or_else(|| Error::Manifest(format!("cached speaker {:?} has no training sentences", r.speaker_id)))?;
            entries.push(StoreEntry {
                id: r.id.clone(),
                speaker: r.speaker_id.clone(),
                class,
                split: r.split,
                x: formats::read_tensor(&dir.join(format!("{}.x.bin", r.id)))?,
                y: formats::read_tensor(&dir.join(format!("{}.y.bin", r.id)))?,
            });
        }
        Ok(Self { dir: dir.to_path_buf(), classes, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StoreEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Network inputs and labels of the chosen split.
    pub fn samples(&self, split: Split, mode: FeatureMode) -> (Vec<Vec<DMatrix<f64>>>, Vec<usize>) {
        self.split(split).map(|e| (mode.select(&e.x, &e.y), e.class)).unzip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("epoch,step,loss,train_acc,eval_acc\n");
    for r in rows {
        let eval = r.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.8},{:.4},{}\n", r.epoch, r.step, r.loss, r.train_acc, eval));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Parameters of the epoch with the best training accuracy, lower loss
    /// breaking ties.
    pub best: NetworkState,
    pub best_epoch: usize,
    pub last: NetworkState,
    pub metrics: Vec<MetricRow>,
}

/// `correct / total * 100`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Eval-mode argmax predictions, lowest class index winning ties.
pub fn predict(net: &Network, state: &NetworkState, inputs: &[Vec<DMatrix<f64>>], chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let batch = Batch { inputs: part.to_vec(), labels: Vec::new() };
        let fwd = net.forward(state, &batch, Mode::Eval)?;
        out.extend(fwd.probs.iter().map(|p| argmax(p)));
    }
    Ok(out)
}

pub fn evaluate_acc(net: &Network, state: &NetworkState, inputs: &[Vec<DMatrix<f64>>], labels: &[usize]) -> Result<f64> {
    Ok(accuracy(&predict(net, state, inputs, 32)?, labels))
}

/// Per-row mean and standard deviation of each input slab over all training
/// frames, laid out `K x N`.
fn input_statistics(inputs: &[Vec<DMatrix<f64>>]) -> (Vec<f64>, Vec<f64>) {
    let (k, n) = (inputs[0].len(), inputs[0][0].nrows());
    let mut mean = vec![0.0; k * n];
    let mut sq = vec![0.0; k * n];
    let mut count = 0.0;
    for sample in inputs {
        count += sample[0].ncols() as f64;
        for (kk, m) in sample.iter().enumerate() {
            for i in 0..n {
                let row = m.row(i);
                mean[kk * n + i] += row.sum();
                sq[kk * n + i] += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
        })
        .collect();
    (mean, std)
}

/// Mini-batch index lists for one epoch. A trailing batch of one sentence is
/// dropped since train-mode batch norm needs two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sentence_seed(seed, epoch)));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// The network for `cfg` and its seeded initial parameters, input
/// normalization taken from the training split.
pub fn initial_state(store: &FeatureStore, cfg: &RunConfig) -> Result<(Network, NetworkState)> {
    let net = Network::new(cfg.network_spec(store.classes.len())?)?;
    let (inputs, _) = store.samples(Split::Train, cfg.feature_mode);
    if inputs.len() < 2 {
        return Err(Error::InvalidConfig("need at least 2 training sentences".into()));
    }
    let mut state = net.init_state(cfg.seed);
    let (mean, std) = input_statistics(&inputs);
    net.set_input_normalization(&mut state, &mean, &std)?;
    Ok((net, state))
}

/// Trains on the store's train split; evaluates on its test split after
/// every epoch when it has one. Writes `metrics.csv` and `best.ivfn` into
/// `out` when given.
pub fn train(store: &FeatureStore, cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate_training()?;
    if store.classes.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 speakers, got {}", store.classes.len())));
    }
    let (net, mut state) = initial_state(store, cfg)?;
    let spec = net.spec.clone();
    let (inputs, labels) = store.samples(Split::Train, cfg.feature_mode);
    let (test_inputs, test_labels) = store.samples(Split::Test, cfg.feature_mode);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, f64, usize, NetworkState)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let plan = epoch_batches(inputs.len(), cfg.batch_size, cfg.seed, epoch);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Batch>(2);
            let plan_ref = &plan;
            let (inputs, labels) = (&inputs, &labels);
            scope.spawn(move || {
                for idx in plan_ref {
                    let batch = Batch {
                        inputs: idx.iter().map(|&i| inputs[i].clone()).collect(),
                        labels: idx.iter().map(|&i| labels[i]).collect(),
                    };
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                step += 1;
                let b = net.loss_and_backward(&state, &batch)?;
                if !b.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("batch of {} with labels {:?}", batch.len(), batch.labels),
                    });
                }
                state.apply_bn_updates(&b.bn_updates);
                adam_step(&mut state, &b.gradients, &adam);
                loss_sum += b.loss * batch.len() as f64;
                seen += batch.len();
                correct += b.probs.iter().zip(&batch.labels).filter(|(p, &l)| argmax(p) == l).count();
            }
            Ok(())
        })?;
        let loss = loss_sum / seen.max(1) as f64;
        let train_acc = 100.0 * correct as f64 / seen.max(1) as f64;
        let eval_acc =
            if test_inputs.is_empty() { None } else { Some(evaluate_acc(&net, &state, &test_inputs, &test_labels)?) };
        metrics.push(MetricRow { epoch, step, loss, train_acc, eval_acc });
        let better = match &best {
            None => true,
            Some((acc, l, _, _)) => train_acc > *acc || (train_acc == *acc && loss < *l),
        };
        if better {
            best = Some((train_acc, loss, epoch, state.clone()));
        }
    }
    let (_, _, best_epoch, best_state) = best.ok_or_else(|| Error::InvalidConfig("epochs must be at least 1".into()))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        checkpoint::save(&dir.join("best.ivfn"), &spec, &best_state)?;
    }
    Ok(TrainOutcome { network: net, best: best_state, best_epoch, last: state, metrics })
}
