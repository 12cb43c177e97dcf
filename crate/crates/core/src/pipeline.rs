//! Run configuration, checkpointing, the two training stages, and the
//! command layer behind the CLI verbs. Training runs in `f32`; every source
//! of randomness derives from the run seed through documented substreams, so
//! identical (config, seed) pairs give byte-identical logs, reports, and
//! prediction images.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::classifier::{
    extract_stage_features, ClassifierConfig, ClassifierError, ClassifierModel,
    FeatureSource, HeadKind, NoisePolicy,
};
use crate::data::{
    extract_patches, load_cube, load_labels, normalize_cube, save_cube, save_labels, split_samples,
    synth_cube, write_class_map_ppm, DataError, HsiCube, LabelRaster, NormalizeMode,
    SplitStrategy, SynthSpec,
};
use crate::denoiser::{
    ContrastiveEncoder, DenoiserConfig, DenoiserError, DenoiserModel, DenoiserPredictor,
};
use crate::diffusion::{make_schedule, q_sample, DiffusionError, NoiseSchedule};
use crate::elem::{Dtype, Elem};
use crate::evaluation::{
    aggregate_runs, build_confusion, compute_metrics, format_aggregate_report, format_report,
    EvalError, Metrics, MetricsSummary,
};
use crate::nn::{Adam, Binding, ParamStore};
use crate::objectives::{compound_on_tape, info_nce_on_tape, DiffusionLossKind, UncertaintyParams};
use crate::rng::{substream, CLASSIFY_EPOCH, PRETRAIN_BATCH, PROBE_SPLIT};
use crate::timesteps::{
    candidate_grid, rank_timesteps, read_ranking_report, write_ranking_report, TimestepError,
    TimestepRanking,
};

/// Training element type for all pipeline commands.
pub type TrainElem = f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Timestep(#[from] TimestepError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: checkpoint {found} vs current {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("frozen denoiser parameters changed during classifier training")]
    FrozenParamsMutated,
    #[error("training lock already held: {0} (remove the stale file if no trainer is running)")]
    Locked(PathBuf),
    #[error("ranking must select exactly 5 timesteps, found {0}")]
    BadRankingSize(usize),
    #[error("ranking report required for diffusion features")]
    MissingRanking,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth {
        spec: SynthSpec,
    },
    Container {
        cube: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        class_names: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitStrategy,
    pub patch: usize,
    pub normalize: NormalizeMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth {
                spec: SynthSpec {
                    height: 48,
                    width: 48,
                    bands: 16,
                    classes: 4,
                    noise_sigma: 0.02,
                },
            },
            split: SplitStrategy::PerClassCount { count: 20 },
            patch: 7,
            normalize: NormalizeMode::Minmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSchedConfig {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSchedConfig {
    fn default() -> Self {
        DiffusionSchedConfig {
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub layer_scale_init: f64,
    pub d_cls: usize,
    pub reduction: usize,
    pub gn_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            groups: 4,
            time_dim: 64,
            layer_scale_init: 1e-4,
            d_cls: 64,
            reduction: 4,
            gn_groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: DiffusionLossKind,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch: 8,
            steps: 2000,
            lr: 1e-4,
            tau: 0.5,
            loss: DiffusionLossKind::Lae,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub k: usize,
    pub probe_size: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            k: 5,
            probe_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub head: HeadKind,
    pub features: FeatureSource,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            batch: 16,
            epochs: 100,
            lr: 1e-4,
            head: HeadKind::Full,
            features: FeatureSource::Diffusion,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub diffusion: DiffusionSchedConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub select: SelectConfig,
    pub classify: ClassifyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Config(msg));
        if self.data.patch % 2 == 0 || self.data.patch == 0 {
            return fail(format!("data.patch {} must be odd", self.data.patch));
        }
        if self.diffusion.t_total < 1 {
            return fail("diffusion.t_total must be >= 1".into());
        }
        if !(self.diffusion.beta_start > 0.0
            && self.diffusion.beta_start <= self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return fail(format!(
                "diffusion betas ({}, {}) must satisfy 0 < start <= end < 1",
                self.diffusion.beta_start, self.diffusion.beta_end
            ));
        }
        if self.model.width % self.model.groups != 0 {
            return fail(format!(
                "model.width {} not divisible by model.groups {}",
                self.model.width, self.model.groups
            ));
        }
        if self.model.time_dim % 2 != 0 {
            return fail(format!("model.time_dim {} must be even", self.model.time_dim));
        }
        if self.model.d_cls % self.model.reduction != 0 {
            return fail(format!(
                "model.d_cls {} not divisible by model.reduction {}",
                self.model.d_cls, self.model.reduction
            ));
        }
        if self.model.d_cls % self.model.gn_groups != 0 {
            return fail(format!(
                "model.d_cls {} not divisible by model.gn_groups {}",
                self.model.d_cls, self.model.gn_groups
            ));
        }
        if self.pretrain.batch < 1 || self.classify.batch < 1 {
            return fail("batch sizes must be >= 1".into());
        }
        if self.pretrain.tau <= 0.0 {
            return fail(format!("pretrain.tau {} must be positive", self.pretrain.tau));
        }
        if self.select.k < 1 || self.select.k > candidate_grid(self.diffusion.t_total).len() {
            return fail(format!(
                "select.k {} outside the candidate grid of {}",
                self.select.k,
                candidate_grid(self.diffusion.t_total).len()
            ));
        }
        if self.select.probe_size < 1 {
            return fail("select.probe_size must be >= 1".into());
        }
        if let SplitStrategy::Fraction { fraction } = self.data.split {
            if !(fraction > 0.0 && fraction < 1.0) {
                return fail(format!("split fraction {fraction} outside (0, 1)"));
            }
        }
        Ok(())
    }

    /// Canonical serialization of the effective config.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash over the fields that determine the pretraining artifact: seed,
    /// data, diffusion schedule, model shape, and pretraining knobs.
    /// Classifier-stage settings are deliberately excluded so ablation heads
    /// can share one pretrain checkpoint.
    pub fn pretrain_hash(&self) -> String {
        #[derive(Serialize)]
        struct PretrainKey<'a> {
            seed: u64,
            data: &'a DataConfig,
            diffusion: &'a DiffusionSchedConfig,
            model: &'a ModelConfig,
            pretrain: &'a PretrainConfig,
        }
        let key = PretrainKey {
            seed: self.seed,
            data: &self.data,
            diffusion: &self.diffusion,
            model: &self.model,
            pretrain: &self.pretrain,
        };
        let mut hasher = Sha256::new();
        hasher.update(toml::to_string(&key).expect("key serializes").as_bytes());
        hex_string(&hasher.finalize())
    }

    /// SHA-256 hex of the full canonical serialization; embedded in
    /// classifier checkpoints and verified on load.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"HDCP";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Classifier,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Pretrain => 0,
            CheckpointKind::Classifier => 1,
        }
    }
}

fn write_entry<E: Elem>(out: &mut Vec<u8>, name: &str, value: &ndarray::ArrayD<E>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(value.ndim() as u8);
    for d in value.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for &v in value.iter() {
        v.write_le(out);
    }
}

/// Versioned binary checkpoint: parameters, Adam moments, and the config
/// hash, all keyed by canonical names.
pub fn save_checkpoint<E: Elem>(
    path: &Path,
    kind: CheckpointKind,
    config_hash: &str,
    store: &ParamStore<E>,
    adam: &Adam<E>,
) -> Result<(), PipelineError> {
    assert_eq!(config_hash.len(), 64, "hex sha-256 hash");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(kind.tag());
    out.push(E::DTYPE.tag());
    out.extend_from_slice(config_hash.as_bytes());
    out.extend_from_slice(&adam.step_count().to_le_bytes());
    let entries = store.len() * 3;
    out.extend_from_slice(&(entries as u32).to_le_bytes());
    for id in store.ids() {
        write_entry(&mut out, &format!("param.{}", store.name(id)), store.value(id));
        let (m, v) = adam.moments(id);
        write_entry(&mut out, &format!("adam.m.{}", store.name(id)), m);
        write_entry(&mut out, &format!("adam.v.{}", store.name(id)), v);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.at + n > self.bytes.len() {
            return Err(PipelineError::Checkpoint(format!(
                "truncated at offset {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

/// Load a checkpoint into a freshly built store; names and shapes must match
/// exactly, and the stored config hash must equal `config_hash`.
pub fn load_checkpoint<E: Elem>(
    path: &Path,
    kind: CheckpointKind,
    config_hash: &str,
    store: &mut ParamStore<E>,
    adam: &mut Adam<E>,
) -> Result<(), PipelineError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(PipelineError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let tag = r.take(1)?[0];
    if tag != kind.tag() {
        return Err(PipelineError::Checkpoint(format!(
            "wrong checkpoint kind tag {tag}"
        )));
    }
    let dtype = r.take(1)?[0];
    if Dtype::from_tag(dtype) != Some(E::DTYPE) {
        return Err(PipelineError::Checkpoint(format!("dtype tag {dtype}")));
    }
    let found_hash = String::from_utf8(r.take(64)?.to_vec())
        .map_err(|_| PipelineError::Checkpoint("bad hash field".into()))?;
    if found_hash != config_hash {
        return Err(PipelineError::HashMismatch {
            expected: config_hash.to_string(),
            found: found_hash,
        });
    }
    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    if count != store.len() * 3 {
        return Err(PipelineError::Checkpoint(format!(
            "expected {} entries, found {count}",
            store.len() * 3
        )));
    }
    let mut m: Vec<Option<ndarray::ArrayD<E>>> = vec![None; store.len()];
    let mut v: Vec<Option<ndarray::ArrayD<E>>> = vec![None; store.len()];
    let mut params: Vec<Option<ndarray::ArrayD<E>>> = vec![None; store.len()];
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PipelineError::Checkpoint("non-utf8 name".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * E::DTYPE.size())?;
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            values.push(E::read_le(&payload[i * E::DTYPE.size()..]));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values)
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        let (prefix, param_name) = name
            .split_once('.')
            .map(|(p, rest)| match p {
                "param" => ("param", rest.to_string()),
                "adam" => {
                    let (which, rest) = rest.split_once('.').unwrap_or(("?", rest));
                    (if which == "m" { "m" } else { "v" }, rest.to_string())
                }
                _ => ("?", rest.to_string()),
            })
            .unwrap_or(("?", name.clone()));
        let id = store
            .id(&param_name)
            .ok_or_else(|| PipelineError::Checkpoint(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != arr.shape() {
            return Err(PipelineError::Checkpoint(format!(
                "shape mismatch for {name}: stored {:?}, expected {:?}",
                arr.shape(),
                store.value(id).shape()
            )));
        }
        match prefix {
            "param" => params[id.index()] = Some(arr),
            "m" => m[id.index()] = Some(arr),
            "v" => v[id.index()] = Some(arr),
            _ => return Err(PipelineError::Checkpoint(format!("bad entry name {name}"))),
        }
    }
    if params.iter().any(Option::is_none) || m.iter().any(Option::is_none) {
        return Err(PipelineError::Checkpoint("missing parameter entries".into()));
    }
    for (i, arr) in params.into_iter().enumerate() {
        store.set(crate::nn::param_id_for_index(i), arr.unwrap());
    }
    adam.restore_state(
        step,
        m.into_iter().map(Option::unwrap).collect(),
        v.into_iter().map(Option::unwrap).collect(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Normalized cube plus labels, ready for patch extraction.
pub struct Dataset {
    pub cube: HsiCube,
    pub labels: LabelRaster,
    pub patch: usize,
}

impl Dataset {
    pub fn num_pixels(&self) -> usize {
        self.cube.height() * self.cube.width()
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let (cube, labels) = match &cfg.data.source {
        DataSource::Synth { spec } => synth_cube(spec, cfg.seed)?,
        DataSource::Container {
            cube,
            labels,
            class_names,
        } => {
            let c = load_cube(cube)?;
            let l = load_labels(labels, class_names.clone())?;
            (c, l)
        }
    };
    let cube = normalize_cube(&cube, cfg.data.normalize)?;
    Ok(Dataset {
        cube,
        labels,
        patch: cfg.data.patch,
    })
}

/// Stack the patches of the given pixels row-wise: [len(ids)*P*P, C].
pub fn stack_patches<E: Elem>(
    dataset: &Dataset,
    ids: &[usize],
) -> Result<Array2<E>, PipelineError> {
    let p = dataset.patch;
    let s = p * p;
    let c = dataset.cube.bands();
    let instances = extract_patches(&dataset.cube, Some(&dataset.labels), ids, p)?;
    let mut out = Array2::<E>::zeros((ids.len() * s, c));
    for (i, inst) in instances.iter().enumerate() {
        for y in 0..p {
            for x in 0..p {
                for band in 0..c {
                    out[[i * s + y * p + x, band]] =
                        E::from_f64(inst.patch[[y, x, band]]);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model bundles
// ---------------------------------------------------------------------------

/// Everything the pretraining stage owns: denoiser + encoder + uncertainty
/// weights in one parameter store.
pub struct PretrainBundle {
    pub store: ParamStore<TrainElem>,
    pub denoiser: DenoiserModel,
    pub encoder: ContrastiveEncoder,
    pub uncertainty: UncertaintyParams,
    pub geom: ConvGeom,
    pub sched: NoiseSchedule,
}

pub fn build_pretrain_bundle(
    cfg: &RunConfig,
    channels: usize,
) -> Result<PretrainBundle, PipelineError> {
    let den_cfg = DenoiserConfig {
        patch: cfg.data.patch,
        channels,
        width: cfg.model.width,
        groups: cfg.model.groups,
        time_dim: cfg.model.time_dim,
        layer_scale_init: cfg.model.layer_scale_init,
    };
    let mut store = ParamStore::<TrainElem>::new();
    let mut rng = substream(cfg.seed, crate::rng::DENOISER_INIT);
    let denoiser = DenoiserModel::init(den_cfg, &mut store, &mut rng)?;
    let mut rng = substream(cfg.seed, crate::rng::ENCODER_INIT);
    let encoder = ContrastiveEncoder::init(&mut store, &mut rng, channels);
    let uncertainty = UncertaintyParams::init(&mut store);
    let geom = ConvGeom::new(cfg.data.patch, cfg.data.patch, 3);
    let sched = make_schedule(
        cfg.diffusion.t_total,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    Ok(PretrainBundle {
        store,
        denoiser,
        encoder,
        uncertainty,
        geom,
        sched,
    })
}

pub struct ClassifierBundle {
    pub store: ParamStore<TrainElem>,
    pub model: ClassifierModel,
}

pub fn build_classifier_bundle(
    cfg: &RunConfig,
    channels: usize,
    num_classes: usize,
) -> Result<ClassifierBundle, PipelineError> {
    let (stages, times, feature_width) = match cfg.classify.features {
        FeatureSource::Diffusion => (5, cfg.select.k, cfg.model.width),
        FeatureSource::Raw => (1, 1, channels),
    };
    let cls_cfg = ClassifierConfig {
        num_classes,
        d_cls: cfg.model.d_cls,
        reduction: cfg.model.reduction,
        gn_groups: cfg.model.gn_groups,
        patch: cfg.data.patch,
        feature_width,
        times,
        stages,
        head: cfg.classify.head,
    };
    let mut store = ParamStore::<TrainElem>::new();
    let mut rng = substream(cfg.seed, crate::rng::CLASSIFIER_INIT);
    let model = ClassifierModel::init(cls_cfg, &mut store, &mut rng)?;
    Ok(ClassifierBundle { store, model })
}

// ---------------------------------------------------------------------------
// Directory lock
// ---------------------------------------------------------------------------

/// One training process per output directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Pretraining (Step 1)
// ---------------------------------------------------------------------------

/// Per-step loss record as written to the tab-separated log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_rec: f64,
    pub l_con: f64,
    pub w_diff: f64,
    pub w_rec: f64,
    pub total: f64,
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<LossRecord>,
}

pub const LOG_HEADER: &str = "step\tl_diff\tl_rec\tl_con\tw_diff\tw_rec\ttotal";

fn format_record(r: &LossRecord) -> String {
    format!(
        "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
        r.step, r.l_diff, r.l_rec, r.l_con, r.w_diff, r.w_rec, r.total
    )
}

/// Unsupervised pretraining of the denoiser and contrastive encoder under
/// the compound objective. Emits `pretrain.ckpt` and `pretrain_log.tsv`.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out_dir)?;
    let dataset = load_dataset(cfg)?;
    let channels = dataset.cube.bands();
    let mut bundle = build_pretrain_bundle(cfg, channels)?;
    let spatial = cfg.data.patch * cfg.data.patch;
    let t_max = bundle.sched.t_max();
    let mut adam = Adam::new(&bundle.store, cfg.pretrain.lr);
    let mut rng = substream(cfg.seed, PRETRAIN_BATCH);
    let normal = rand_distr::StandardNormal;
    let pool: Vec<usize> = (0..dataset.num_pixels()).collect();
    let b = cfg.pretrain.batch;

    let mut records = Vec::with_capacity(cfg.pretrain.steps);
    for step in 1..=cfg.pretrain.steps {
        // batch assembly: ids, timesteps, then noise, in one stream
        let ids: Vec<usize> = (0..b).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max)).collect();
        let x0 = stack_patches::<TrainElem>(&dataset, &ids)?;
        let eps = Array2::<TrainElem>::from_shape_fn(x0.raw_dim(), |_| {
            TrainElem::from_f64(normal.sample(&mut rng))
        });
        let mut x_t = Array2::<TrainElem>::zeros(x0.raw_dim());
        for (i, &t) in ts.iter().enumerate() {
            let rows = ndarray::s![i * spatial..(i + 1) * spatial, ..];
            let noisy = q_sample(&x0.slice(rows).to_owned(), t, &eps.slice(rows).to_owned(), &bundle.sched)?;
            x_t.slice_mut(rows).assign(&noisy.x_t);
        }

        let mut tape = Tape::<TrainElem>::new();
        let mut bind = Binding::new();
        let x_t_var = tape.constant(x_t.clone().into_dyn());
        let (eps_hat, _) =
            bundle
                .denoiser
                .forward(&mut tape, &bundle.store, &mut bind, x_t_var, &ts, &bundle.geom);
        let eps_const = tape.constant(eps.clone().into_dyn());
        let residual = tape.sub(eps_const, eps_hat);
        let l_diff = match cfg.pretrain.loss {
            DiffusionLossKind::Lae => tape.lae(residual),
            DiffusionLossKind::Mse => {
                let sq = tape.mul(residual, residual);
                tape.mean_all(sq)
            }
        };

        let record;
        let total = match cfg.pretrain.loss {
            DiffusionLossKind::Mse => {
                // ablation case: the plain noise-matching objective only
                record = LossRecord {
                    step,
                    l_diff: tape.scalar(l_diff).as_f64(),
                    l_rec: 0.0,
                    l_con: 0.0,
                    w_diff: 0.0,
                    w_rec: 0.0,
                    total: tape.scalar(l_diff).as_f64(),
                };
                l_diff
            }
            DiffusionLossKind::Lae => {
                // one-shot reconstruction per instance:
                // x0_hat = x_t/sqrt(ab) - sqrt(1-ab)/sqrt(ab) * eps_hat
                let mut coefs = Vec::with_capacity(b);
                let mut base = Array2::<TrainElem>::zeros(x0.raw_dim());
                for (i, &t) in ts.iter().enumerate() {
                    let ab = bundle.sched.alpha_bar(t);
                    let inv = 1.0 / ab.sqrt();
                    coefs.push(TrainElem::from_f64(-(1.0 - ab).sqrt() * inv));
                    let rows = ndarray::s![i * spatial..(i + 1) * spatial, ..];
                    let scaled = x_t.slice(rows).mapv(|v| v * TrainElem::from_f64(inv));
                    base.slice_mut(rows).assign(&scaled);
                }
                let scaled_eps = tape.scale_blocks(eps_hat, &coefs, spatial);
                let x0_hat = tape.add_const(scaled_eps, &base.into_dyn());
                let x0_const = tape.constant(x0.clone().into_dyn());
                let rec_residual = tape.sub(x0_hat, x0_const);
                let l_rec = tape.lae(rec_residual);

                // both views share one encoder pass: raw instances stacked
                // above their reconstructions
                let both = tape.concat_rows(x0_const, x0_hat);
                let z_all = bundle.encoder.forward(
                    &mut tape,
                    &bundle.store,
                    &mut bind,
                    both,
                    &bundle.geom,
                );
                let z_raw = tape.slice_rows(z_all, 0, b);
                let z_fake = tape.slice_rows(z_all, b, b);
                let l_con = info_nce_on_tape(&mut tape, z_raw, z_fake, cfg.pretrain.tau);

                let w_diff = bind.var(&mut tape, &bundle.store, bundle.uncertainty.w_diff);
                let w_rec = bind.var(&mut tape, &bundle.store, bundle.uncertainty.w_rec);
                let total = compound_on_tape(&mut tape, l_diff, l_rec, l_con, w_diff, w_rec);
                record = LossRecord {
                    step,
                    l_diff: tape.scalar(l_diff).as_f64(),
                    l_rec: tape.scalar(l_rec).as_f64(),
                    l_con: tape.scalar(l_con).as_f64(),
                    w_diff: tape.scalar(w_diff).as_f64(),
                    w_rec: tape.scalar(w_rec).as_f64(),
                    total: tape.scalar(total).as_f64(),
                };
                total
            }
        };
        if !record.total.is_finite() {
            return Err(PipelineError::Diverged { step });
        }
        let mut grads = tape.backward(total);
        let mut param_grads = bind.take_grads(&mut grads);
        drop(grads);
        drop(tape);
        clip_grad_norm(&mut param_grads, cfg.pretrain.grad_clip);
        adam.apply(&mut bundle.store, &param_grads);
        records.push(record);
    }

    let log = out_dir.join("pretrain_log.tsv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&log)?);
    writeln!(out, "{LOG_HEADER}")?;
    for r in &records {
        writeln!(out, "{}", format_record(r))?;
    }
    drop(out);

    let checkpoint = out_dir.join("pretrain.ckpt");
    save_checkpoint(
        &checkpoint,
        CheckpointKind::Pretrain,
        &cfg.pretrain_hash(),
        &bundle.store,
        &adam,
    )?;
    Ok(PretrainOutcome {
        checkpoint,
        log,
        records,
    })
}

/// Rebuild the pretrain bundle and load a checkpoint into it.
pub fn load_pretrained(
    cfg: &RunConfig,
    channels: usize,
    ckpt: &Path,
) -> Result<PretrainBundle, PipelineError> {
    let mut bundle = build_pretrain_bundle(cfg, channels)?;
    let mut adam = Adam::new(&bundle.store, cfg.pretrain.lr);
    load_checkpoint(
        ckpt,
        CheckpointKind::Pretrain,
        &cfg.pretrain_hash(),
        &mut bundle.store,
        &mut adam,
    )?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Timestep ranking
// ---------------------------------------------------------------------------

pub struct RankOutcome {
    pub report: PathBuf,
    pub ranking: TimestepRanking,
}

/// Score every candidate timestep on a probe subset of the patch pool and
/// write the ranking report.
pub fn cmd_rank_timesteps(
    cfg: &RunConfig,
    out_dir: &Path,
    pretrain_ckpt: &Path,
) -> Result<RankOutcome, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = load_dataset(cfg)?;
    let bundle = load_pretrained(cfg, dataset.cube.bands(), pretrain_ckpt)?;

    let mut probe_rng = substream(cfg.seed, PROBE_SPLIT);
    let mut ids: Vec<usize> = (0..dataset.num_pixels()).collect();
    ids.shuffle(&mut probe_rng);
    ids.truncate(cfg.select.probe_size.min(ids.len()));
    let probes = stack_patches::<TrainElem>(&dataset, &ids)?;

    let predictor = DenoiserPredictor {
        model: &bundle.denoiser,
        store: &bundle.store,
        geom: &bundle.geom,
    };
    let candidates = candidate_grid(bundle.sched.t_max());
    let spatial = cfg.data.patch * cfg.data.patch;
    let ranking = rank_timesteps(
        &predictor,
        &bundle.sched,
        &probes,
        spatial,
        &candidates,
        cfg.select.k,
        cfg.seed,
    )?;
    let report = out_dir.join("ranking.tsv");
    write_ranking_report(&ranking, &report)?;
    Ok(RankOutcome { report, ranking })
}

// ---------------------------------------------------------------------------
// Classifier training (Step 2)
// ---------------------------------------------------------------------------

pub struct TrainClassifierOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_train_accuracy: f64,
}

fn selected_timesteps(
    cfg: &RunConfig,
    ranking_path: Option<&Path>,
) -> Result<Vec<usize>, PipelineError> {
    match cfg.classify.features {
        FeatureSource::Raw => Ok(Vec::new()),
        FeatureSource::Diffusion => {
            let path = ranking_path.ok_or(PipelineError::MissingRanking)?;
            let ranking = read_ranking_report(path)?;
            if ranking.selected.len() != 5 {
                return Err(PipelineError::BadRankingSize(ranking.selected.len()));
            }
            Ok(ranking.selected)
        }
    }
}

/// Stage-major feature tensors for one instance batch under the configured
/// feature source.
#[allow(clippy::too_many_arguments)]
fn batch_features(
    cfg: &RunConfig,
    bundle: &PretrainBundle,
    x0: &Array2<TrainElem>,
    ids: &[usize],
    ts: &[usize],
    policy: NoisePolicy,
) -> Vec<Array2<TrainElem>> {
    match cfg.classify.features {
        FeatureSource::Raw => vec![x0.clone()],
        FeatureSource::Diffusion => {
            let inst_ids: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
            extract_stage_features(
                &bundle.denoiser,
                &bundle.store,
                &bundle.geom,
                &bundle.sched,
                x0,
                &inst_ids,
                ts,
                policy,
            )
        }
    }
}

/// Train the classification head on frozen features of the labeled training
/// split. The pretrained parameters are checksummed before and after; any
/// mutation is a hard error.
pub fn cmd_train_classifier(
    cfg: &RunConfig,
    out_dir: &Path,
    pretrain_ckpt: &Path,
    ranking_path: Option<&Path>,
) -> Result<TrainClassifierOutcome, PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out_dir)?;
    let dataset = load_dataset(cfg)?;
    let bundle = load_pretrained(cfg, dataset.cube.bands(), pretrain_ckpt)?;
    let frozen_before = bundle.store.checksum();
    let ts = selected_timesteps(cfg, ranking_path)?;
    let split = split_samples(&dataset.labels, cfg.data.split, cfg.seed)?;
    let train_ids = split.train_indices.clone();
    let labels: Vec<usize> = train_ids
        .iter()
        .map(|&i| dataset.labels.label_at(i) as usize)
        .collect();

    let mut cls = build_classifier_bundle(cfg, dataset.cube.bands(), dataset.labels.num_classes())?;
    let mut adam = Adam::new(&cls.store, cfg.classify.lr);
    let geom = ConvGeom::new(cfg.data.patch, cfg.data.patch, 3);
    let spatial = geom.spatial();
    let x0_all = stack_patches::<TrainElem>(&dataset, &train_ids)?;

    let log = out_dir.join("classifier_log.tsv");
    let mut log_out = std::io::BufWriter::new(std::fs::File::create(&log)?);
    writeln!(log_out, "epoch\tce\ttrain_acc")?;

    let n = train_ids.len();
    let mut final_acc = 0.0;
    for epoch in 0..cfg.classify.epochs {
        let feats = batch_features(
            cfg,
            &bundle,
            &x0_all,
            &train_ids,
            &ts,
            NoisePolicy::PerEpoch {
                seed: cfg.seed,
                epoch: epoch as u64,
            },
        );
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = substream(cfg.seed, CLASSIFY_EPOCH.with(1 + 2 * epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_ce = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.classify.batch) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::<TrainElem>::new();
            let mut bind = Binding::new();
            let vars: Vec<Var> = feats
                .iter()
                .map(|f| {
                    let mut rows = Array2::<TrainElem>::zeros((chunk.len() * spatial, f.ncols()));
                    for (row, &i) in chunk.iter().enumerate() {
                        rows.slice_mut(ndarray::s![row * spatial..(row + 1) * spatial, ..])
                            .assign(&f.slice(ndarray::s![i * spatial..(i + 1) * spatial, ..]));
                    }
                    tape.constant(rows.into_dyn())
                })
                .collect();
            let logits = cls.model.classify(&mut tape, &cls.store, &mut bind, &vars, &geom);
            let loss = tape.cross_entropy(logits, &batch_labels);
            epoch_ce += tape.scalar(loss).as_f64() * chunk.len() as f64;
            let l2 = tape
                .value(logits)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for (row, &y) in batch_labels.iter().enumerate() {
                let pred = argmax_row(&l2, row);
                if pred == y {
                    correct += 1;
                }
            }
            if !tape.scalar(loss).as_f64().is_finite() {
                return Err(PipelineError::Diverged { step: epoch });
            }
            let mut grads = tape.backward(loss);
            let mut param_grads = bind.take_grads(&mut grads);
            drop(grads);
            drop(tape);
            clip_grad_norm(&mut param_grads, cfg.classify.grad_clip);
            adam.apply(&mut cls.store, &param_grads);
        }
        final_acc = correct as f64 / n as f64;
        writeln!(
            log_out,
            "{epoch}\t{:.6e}\t{:.6e}",
            epoch_ce / n as f64,
            final_acc
        )?;
    }
    drop(log_out);

    if bundle.store.checksum() != frozen_before {
        return Err(PipelineError::FrozenParamsMutated);
    }

    let checkpoint = out_dir.join("classifier.ckpt");
    save_checkpoint(
        &checkpoint,
        CheckpointKind::Classifier,
        &cfg.hash(),
        &cls.store,
        &adam,
    )?;
    Ok(TrainClassifierOutcome {
        checkpoint,
        log,
        final_train_accuracy: final_acc,
    })
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`
/// (disabled when `max_norm` is 0).
fn clip_grad_norm(grads: &mut [(crate::nn::ParamId, ndarray::ArrayD<TrainElem>)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        sq += g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

fn argmax_row(logits: &Array2<TrainElem>, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = logits[[row, 0]];
    for j in 1..logits.ncols() {
        if logits[[row, j]] > best_v {
            best_v = logits[[row, j]];
            best = j;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Prediction, evaluation, maps
// ---------------------------------------------------------------------------

/// Frozen trained pipeline ready to classify pixels.
pub struct TrainedPipeline {
    pub bundle: PretrainBundle,
    pub cls: ClassifierBundle,
    pub ts: Vec<usize>,
    pub geom: ConvGeom,
}

pub fn load_trained(
    cfg: &RunConfig,
    dataset: &Dataset,
    pretrain_ckpt: &Path,
    classifier_ckpt: &Path,
    ranking_path: Option<&Path>,
) -> Result<TrainedPipeline, PipelineError> {
    let bundle = load_pretrained(cfg, dataset.cube.bands(), pretrain_ckpt)?;
    let mut cls = build_classifier_bundle(cfg, dataset.cube.bands(), dataset.labels.num_classes())?;
    let mut adam = Adam::new(&cls.store, cfg.classify.lr);
    load_checkpoint(
        classifier_ckpt,
        CheckpointKind::Classifier,
        &cfg.hash(),
        &mut cls.store,
        &mut adam,
    )?;
    let ts = selected_timesteps(cfg, ranking_path)?;
    let geom = ConvGeom::new(cfg.data.patch, cfg.data.patch, 3);
    Ok(TrainedPipeline {
        bundle,
        cls,
        ts,
        geom,
    })
}

impl TrainedPipeline {
    /// Classify the given pixels with evaluation-mode (fixed-seed) noise.
    pub fn predict(
        &self,
        cfg: &RunConfig,
        dataset: &Dataset,
        pixel_ids: &[usize],
    ) -> Result<Vec<usize>, PipelineError> {
        let spatial = self.geom.spatial();
        let mut preds = Vec::with_capacity(pixel_ids.len());
        for chunk in pixel_ids.chunks(64) {
            let x0 = stack_patches::<TrainElem>(dataset, chunk)?;
            let feats = batch_features(
                cfg,
                &self.bundle,
                &x0,
                chunk,
                &self.ts,
                NoisePolicy::Eval { seed: cfg.seed },
            );
            let mut tape = Tape::<TrainElem>::new();
            let mut bind = Binding::new();
            let vars: Vec<Var> = feats
                .iter()
                .map(|f| tape.constant(f.clone().into_dyn()))
                .collect();
            let logits =
                self.cls
                    .model
                    .classify(&mut tape, &self.cls.store, &mut bind, &vars, &self.geom);
            let l2 = tape
                .value(logits)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for row in 0..chunk.len() {
                preds.push(argmax_row(&l2, row));
            }
            let _ = spatial;
        }
        Ok(preds)
    }
}

pub struct EvaluateOutcome {
    pub metrics: Metrics,
    pub table: PathBuf,
    pub json: PathBuf,
}

/// Predict every test pixel of the split, compute the metric set, and write
/// the per-class table plus the machine-readable record.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    out_dir: &Path,
    pretrain_ckpt: &Path,
    classifier_ckpt: &Path,
    ranking_path: Option<&Path>,
) -> Result<EvaluateOutcome, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = load_dataset(cfg)?;
    let pipeline = load_trained(cfg, &dataset, pretrain_ckpt, classifier_ckpt, ranking_path)?;
    let split = split_samples(&dataset.labels, cfg.data.split, cfg.seed)?;
    let y_true: Vec<usize> = split
        .test_indices
        .iter()
        .map(|&i| dataset.labels.label_at(i) as usize)
        .collect();
    let y_pred = pipeline.predict(cfg, &dataset, &split.test_indices)?;
    let conf = build_confusion(&y_true, &y_pred, dataset.labels.num_classes())?;
    let metrics = compute_metrics(&conf)?;

    let table = out_dir.join("metrics.txt");
    std::fs::write(&table, format_report(&metrics, &dataset.labels.class_names))?;
    let json = out_dir.join("metrics.json");
    std::fs::write(&json, serde_json::to_string_pretty(&metrics).unwrap())?;
    Ok(EvaluateOutcome {
        metrics,
        table,
        json,
    })
}

/// Aggregate previously written metric records (one JSON per seed).
pub fn aggregate_metric_files(
    paths: &[PathBuf],
    class_names: &[String],
    out_dir: &Path,
) -> Result<MetricsSummary, PipelineError> {
    let mut runs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p)?;
        let m: Metrics = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("bad metrics record {p:?}: {e}")))?;
        runs.push(m);
    }
    let summary = aggregate_runs(&runs)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics_aggregate.txt"),
        format_aggregate_report(&summary, class_names),
    )?;
    std::fs::write(
        out_dir.join("metrics_aggregate.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(summary)
}

pub struct PredictMapOutcome {
    pub raster: PathBuf,
    pub image: PathBuf,
}

/// Classify every pixel of the scene and write the class raster container
/// plus a P6 image under the fixed palette. With `mask_unlabeled`, pixels
/// unlabeled in the reference raster render black.
pub fn cmd_predict_map(
    cfg: &RunConfig,
    out_dir: &Path,
    pretrain_ckpt: &Path,
    classifier_ckpt: &Path,
    ranking_path: Option<&Path>,
    mask_unlabeled: bool,
) -> Result<PredictMapOutcome, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = load_dataset(cfg)?;
    let pipeline = load_trained(cfg, &dataset, pretrain_ckpt, classifier_ckpt, ranking_path)?;
    let all: Vec<usize> = (0..dataset.num_pixels()).collect();
    let preds = pipeline.predict(cfg, &dataset, &all)?;
    let (h, w) = (dataset.cube.height(), dataset.cube.width());
    let mut raster = ndarray::Array2::<i32>::zeros((h, w));
    for (pix, &p) in preds.iter().enumerate() {
        let masked = mask_unlabeled && dataset.labels.labels[[pix / w, pix % w]] < 0;
        raster[[pix / w, pix % w]] = if masked { -1 } else { p as i32 };
    }
    let out_raster = LabelRaster::new(raster, dataset.labels.class_names.clone())?;
    let raster_path = out_dir.join("prediction.hsc");
    save_labels(&out_raster, &raster_path)?;
    let image_path = out_dir.join("prediction.ppm");
    write_class_map_ppm(&out_raster.labels, &image_path)?;
    Ok(PredictMapOutcome {
        raster: raster_path,
        image: image_path,
    })
}

/// Generate the configured synthetic scene and write both containers.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let DataSource::Synth { spec } = &cfg.data.source else {
        return Err(PipelineError::Config(
            "synth command requires a synth data source".into(),
        ));
    };
    let (cube, labels) = synth_cube(spec, cfg.seed)?;
    let cube_path = out_dir.join("cube.hsc");
    let labels_path = out_dir.join("labels.hsc");
    save_cube(&cube, &cube_path)?;
    save_labels(&labels, &labels_path)?;
    Ok((cube_path, labels_path))
}
