//! Stage configuration, checkpointing, and the multi-stage training driver.
//!
//! A training run is a sequence of stages. Each stage attaches a fresh task
//! head to the encoder (taken from a checkpoint or freshly initialized),
//! trains both jointly, and snapshots the encoder from the epoch with the
//! best dev metric. Only the encoder crosses stage boundaries; heads are
//! written to a sibling file for later scoring but never transferred.

use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, scheduled_lr, AdamConfig};
use crate::data::{filter_nli_categories, load_choice_csv, load_pair_tsv, load_sct, NliCategoryPair, PairSchema};
use crate::error::{Error, Result};
use crate::eval::{choice_accuracy, encode_choice_example, encode_pair_example, pair_accuracy};
use crate::model::{
    choice_loss, classification_loss, tensor_spec, EncodedChoice, EncoderParams, ModelConfig,
    ModelWithHead, TaskHead,
};
use crate::params::{ParamSet, ParamSlot, Parameterized};
use crate::pretrain::{
    generate_pretrain_examples, pretrain_loss, Corpus, PretrainExample, PretrainHeads,
    PretrainModel, MASK_RATE,
};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedInput, Vocab};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TBCK";
pub const HEAD_MAGIC: [u8; 4] = *b"TBHD";
pub const FORMAT_VERSION: u32 = 1;

/// Epoch tag for dev-set generation during pretraining, far above any
/// reachable training epoch so the streams never collide.
const PRETRAIN_DEV_EPOCH: usize = 1 << 20;

/// What a stage trains on, which also fixes the head it gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTask {
    Pretrain,
    Nli,
    McNli,
    Sentiment,
    NextAction,
    Sct,
}

impl StageTask {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "pretrain" => StageTask::Pretrain,
            "nli" => StageTask::Nli,
            "mc_nli" => StageTask::McNli,
            "sentiment" => StageTask::Sentiment,
            "next_action" => StageTask::NextAction,
            "sct" => StageTask::Sct,
            other => {
                return Err(Error::Config(format!(
                    "unknown task `{other}` (expected pretrain, nli, mc_nli, sentiment, next_action, or sct)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StageTask::Pretrain => "pretrain",
            StageTask::Nli => "nli",
            StageTask::McNli => "mc_nli",
            StageTask::Sentiment => "sentiment",
            StageTask::NextAction => "next_action",
            StageTask::Sct => "sct",
        }
    }

    /// Supervised middle-stage tasks. A path normally contains at most one.
    pub fn is_transfer(&self) -> bool {
        matches!(
            self,
            StageTask::Nli | StageTask::McNli | StageTask::Sentiment | StageTask::NextAction
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMetric {
    Accuracy,
    Loss,
}

impl SelectionMetric {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "accuracy" => SelectionMetric::Accuracy,
            "loss" => SelectionMetric::Loss,
            other => {
                return Err(Error::Config(format!(
                    "unknown selection_metric `{other}` (expected accuracy or loss)"
                )))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::Loss => "loss",
        }
    }
}

/// Everything one stage needs, parsed from a flat `key = value` file.
///
/// Lines starting with `#` and blank lines are ignored. Unknown and
/// duplicate keys are errors so typos fail loudly instead of training with
/// a silently dropped setting.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub task: StageTask,
    pub train_data: PathBuf,
    pub dev_data: PathBuf,
    pub vocab_path: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_len: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout_keep: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Restrict an NLI stage to two of the three categories.
    pub nli_filter: Option<NliCategoryPair>,
    /// How many masked pair examples each pretraining epoch samples.
    pub examples_per_epoch: usize,
    pub mask_rate: f64,
}

impl StageConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses the file text, then applies `overrides` on top (last write
    /// wins). Command-line flags funnel through here.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!(
                    "config line {}: duplicate key `{key}`",
                    idx + 1
                )));
            }
            pairs.push((key, value));
        }
        for (key, value) in overrides {
            pairs.retain(|(k, _)| k != key);
            pairs.push((key.clone(), value.clone()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(
        path: impl AsRef<Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut task: Option<StageTask> = None;
        let mut train_data: Option<PathBuf> = None;
        let mut dev_data: Option<PathBuf> = None;
        let mut vocab_path: Option<PathBuf> = None;
        let mut epochs = 3usize;
        let mut batch_size = 32usize;
        let mut learning_rate = 3e-5f64;
        let mut max_len = 128usize;
        let mut seed = 0u64;
        let mut selection: Option<SelectionMetric> = None;
        let mut num_layers = 2usize;
        let mut hidden_size = 32usize;
        let mut num_heads = 2usize;
        let mut ffn_size = 128usize;
        let mut max_positions: Option<usize> = None;
        let mut dropout_keep = 0.9f64;
        let mut warmup_frac = 0.1f64;
        let mut weight_decay = 0.0f64;
        let mut nli_filter: Option<NliCategoryPair> = None;
        let mut examples_per_epoch = 128usize;
        let mut mask_rate = MASK_RATE;

        for (key, value) in pairs {
            match key.as_str() {
                "task" => task = Some(StageTask::parse(value)?),
                "train_data" => train_data = Some(PathBuf::from(value)),
                "dev_data" => dev_data = Some(PathBuf::from(value)),
                "vocab_path" => vocab_path = Some(PathBuf::from(value)),
                "epochs" => epochs = parse_count(key, value)?,
                "batch_size" => batch_size = parse_count(key, value)?,
                "learning_rate" => learning_rate = parse_float(key, value)?,
                "max_len" => max_len = parse_count(key, value)?,
                "seed" => {
                    seed = value.parse::<u64>().map_err(|_| {
                        Error::Config(format!("config key `seed`: invalid integer `{value}`"))
                    })?
                }
                "selection_metric" => selection = Some(SelectionMetric::parse(value)?),
                "num_layers" => num_layers = parse_count(key, value)?,
                "hidden_size" => hidden_size = parse_count(key, value)?,
                "num_heads" => num_heads = parse_count(key, value)?,
                "ffn_size" => ffn_size = parse_count(key, value)?,
                "max_positions" => max_positions = Some(parse_count(key, value)?),
                "dropout_keep" => dropout_keep = parse_float(key, value)?,
                "warmup_frac" => warmup_frac = parse_float(key, value)?,
                "weight_decay" => weight_decay = parse_float(key, value)?,
                "nli_filter" => nli_filter = Some(NliCategoryPair::parse(value)?),
                "examples_per_epoch" => examples_per_epoch = parse_count(key, value)?,
                "mask_rate" => mask_rate = parse_float(key, value)?,
                other => {
                    return Err(Error::Config(format!("unknown config key `{other}`")));
                }
            }
        }

        let task = task.ok_or_else(|| Error::Config("config is missing required key `task`".into()))?;
        let train_data = train_data
            .ok_or_else(|| Error::Config("config is missing required key `train_data`".into()))?;
        let dev_data = dev_data
            .ok_or_else(|| Error::Config("config is missing required key `dev_data`".into()))?;
        let vocab_path = vocab_path
            .ok_or_else(|| Error::Config("config is missing required key `vocab_path`".into()))?;
        let selection_metric = selection.unwrap_or(match task {
            StageTask::Pretrain => SelectionMetric::Loss,
            _ => SelectionMetric::Accuracy,
        });

        let config = StageConfig {
            task,
            train_data,
            dev_data,
            vocab_path,
            epochs,
            batch_size,
            learning_rate,
            max_len,
            seed,
            selection_metric,
            num_layers,
            hidden_size,
            num_heads,
            ffn_size,
            max_positions: max_positions.unwrap_or(max_len),
            dropout_keep,
            warmup_frac,
            weight_decay,
            nli_filter,
            examples_per_epoch,
            mask_rate,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for [CLS] and [SEP]",
                self.max_len
            )));
        }
        if self.max_positions < self.max_len {
            return Err(Error::Config(format!(
                "max_positions {} is below max_len {}",
                self.max_positions, self.max_len
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be a positive number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "mask_rate must lie in (0, 1], got {}",
                self.mask_rate
            )));
        }
        if self.examples_per_epoch < 1 {
            return Err(Error::Config("examples_per_epoch must be at least 1".into()));
        }
        if self.nli_filter.is_some() && self.task != StageTask::Nli {
            return Err(Error::Config(format!(
                "nli_filter only applies to the nli task, not `{}`",
                self.task.name()
            )));
        }
        if self.task == StageTask::Pretrain && self.selection_metric == SelectionMetric::Accuracy {
            return Err(Error::Config(
                "pretraining reports no accuracy; use selection_metric = loss".into(),
            ));
        }
        Ok(())
    }

    /// Encoder geometry for this stage, given the loaded vocab size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            vocab_size,
            max_positions: self.max_positions,
            dropout_keep: self.dropout_keep,
        }
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("config key `{key}`: invalid count `{value}`")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("config key `{key}`: invalid number `{value}`")))
}

/// An encoder snapshot with its geometry and training history.
///
/// Holds encoder tensors only, in the canonical layout order. Task heads
/// never enter a checkpoint; they live in a sibling head file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `"scratch"` for fresh initializations, carried forward otherwise.
    pub origin: String,
    /// Task names of the stages that produced this encoder, in order.
    pub provenance: Vec<String>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_encoder(
        encoder: &EncoderParams<f32>,
        origin: impl Into<String>,
        provenance: Vec<String>,
    ) -> Self {
        Checkpoint {
            config: encoder.config().clone(),
            origin: origin.into(),
            provenance,
            tensors: encoder
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn to_encoder(&self) -> Result<EncoderParams<f32>> {
        self.to_encoder_with(self.config.clone())
    }

    /// Rebuilds the encoder under `config`, which must match this
    /// checkpoint's geometry but may carry a different dropout rate.
    pub fn to_encoder_with(&self, config: ModelConfig) -> Result<EncoderParams<f32>> {
        check_geometry(&self.config, &config)?;
        EncoderParams::from_named_tensors(config, self.tensors.clone())
    }
}

fn check_geometry(have: &ModelConfig, want: &ModelConfig) -> Result<()> {
    let fields = [
        ("num_layers", have.num_layers, want.num_layers),
        ("hidden_size", have.hidden_size, want.hidden_size),
        ("num_heads", have.num_heads, want.num_heads),
        ("ffn_size", have.ffn_size, want.ffn_size),
        ("vocab_size", have.vocab_size, want.vocab_size),
        ("max_positions", have.max_positions, want.max_positions),
    ];
    for (name, h, w) in fields {
        if h != w {
            return Err(Error::Config(format!(
                "checkpoint geometry mismatch: {name} is {h} in the checkpoint but {w} in the stage config"
            )));
        }
    }
    Ok(())
}

/// A trained task head, detached from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadSnapshot {
    Classification {
        num_classes: usize,
        tensors: Vec<(String, Tensor<f32>)>,
    },
    MultipleChoice {
        tensors: Vec<(String, Tensor<f32>)>,
    },
    Pretrain {
        vocab_size: usize,
        tensors: Vec<(String, Tensor<f32>)>,
    },
}

impl HeadSnapshot {
    pub fn from_task_head(head: &TaskHead<f32>) -> Self {
        match head {
            TaskHead::Classification {
                params,
                num_classes,
            } => HeadSnapshot::Classification {
                num_classes: *num_classes,
                tensors: clone_named(params, &["head.cls.w", "head.cls.b"]),
            },
            TaskHead::MultipleChoice { params } => HeadSnapshot::MultipleChoice {
                tensors: clone_named(params, &["head.choice.w", "head.choice.b"]),
            },
        }
    }

    pub fn from_pretrain_heads(heads: &PretrainHeads<f32>) -> Self {
        HeadSnapshot::Pretrain {
            vocab_size: heads.vocab_size(),
            tensors: clone_named(heads.params(), &["head.mlm.bias", "head.nsp.w", "head.nsp.b"]),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HeadSnapshot::Classification { .. } => "classification",
            HeadSnapshot::MultipleChoice { .. } => "multiple_choice",
            HeadSnapshot::Pretrain { .. } => "pretrain",
        }
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        match self {
            HeadSnapshot::Classification { tensors, .. } => tensors,
            HeadSnapshot::MultipleChoice { tensors } => tensors,
            HeadSnapshot::Pretrain { tensors, .. } => tensors,
        }
    }

    /// Rebuilds a scoring head. Pretraining heads cannot score task
    /// examples and are refused.
    pub fn to_task_head(&self) -> Result<TaskHead<f32>> {
        match self {
            HeadSnapshot::Classification {
                num_classes,
                tensors,
            } => {
                let w = find_tensor(tensors, "head.cls.w")?;
                let b = find_tensor(tensors, "head.cls.b")?;
                if w.shape().len() != 2
                    || w.shape()[1] != *num_classes
                    || b.shape() != [*num_classes]
                {
                    return Err(Error::Config(format!(
                        "classification head tensors do not describe {num_classes} classes"
                    )));
                }
                let mut params = ParamSet::new();
                params.insert("head.cls.w", w.clone())?;
                params.insert("head.cls.b", b.clone())?;
                Ok(TaskHead::Classification {
                    params,
                    num_classes: *num_classes,
                })
            }
            HeadSnapshot::MultipleChoice { tensors } => {
                let w = find_tensor(tensors, "head.choice.w")?;
                let b = find_tensor(tensors, "head.choice.b")?;
                if w.shape().len() != 2 || w.shape()[1] != 1 || b.shape() != [1] {
                    return Err(Error::Config(
                        "multiple-choice head tensors have the wrong shape".into(),
                    ));
                }
                let mut params = ParamSet::new();
                params.insert("head.choice.w", w.clone())?;
                params.insert("head.choice.b", b.clone())?;
                Ok(TaskHead::MultipleChoice { params })
            }
            HeadSnapshot::Pretrain { .. } => Err(Error::Config(
                "a pretraining head cannot score task examples".into(),
            )),
        }
    }
}

fn clone_named(params: &ParamSet<f32>, names: &[&str]) -> Vec<(String, Tensor<f32>)> {
    names
        .iter()
        .map(|n| (n.to_string(), params.value(n).clone()))
        .collect()
}

fn find_tensor<'a>(tensors: &'a [(String, Tensor<f32>)], name: &str) -> Result<&'a Tensor<f32>> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Config(format!("head snapshot is missing tensor `{name}`")))
}

/// Conventional location of the head file next to a checkpoint.
pub fn head_path(checkpoint_path: impl AsRef<Path>) -> PathBuf {
    let mut os = checkpoint_path.as_ref().as_os_str().to_os_string();
    os.push(".head");
    PathBuf::from(os)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFileHeader {
    config: ModelConfig,
    origin: String,
    provenance: Vec<String>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeadFileHeader {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    manifest: Vec<ManifestEntry>,
}

fn build_manifest(tensors: &[(String, Tensor<f32>)]) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, tensor) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &x in tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    (manifest, payload)
}

/// Writes magic, version, header length, header, and payload through a
/// temporary file in the same directory, so the target path never holds a
/// half-written file.
fn write_sectioned(path: &Path, magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| Error::io(path, e))?;
    {
        let f = tmp.as_file_mut();
        f.write_all(magic).map_err(|e| Error::io(path, e))?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&(header.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(header).map_err(|e| Error::io(path, e))?;
        f.write_all(payload).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_sectioned(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::CheckpointTruncated {
            path: path.into(),
            details: format!("file is {} bytes, shorter than the magic", bytes.len()),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::CheckpointBadMagic { path: path.into() });
    }
    if bytes.len() < 16 {
        return Err(Error::CheckpointTruncated {
            path: path.into(),
            details: "file ends inside the fixed header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CheckpointTruncated {
            path: path.into(),
            details: "header runs past the end of the file".into(),
        })?;
    let header = std::str::from_utf8(&bytes[16..header_end])
        .map_err(|_| Error::CheckpointHeader {
            path: path.into(),
            details: "header is not valid UTF-8".into(),
        })?
        .to_string();
    Ok((header, bytes[header_end..].to_vec()))
}

fn decode_payload(
    path: &Path,
    manifest: &[ManifestEntry],
    payload: &[u8],
) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut expected = 0usize;
    for entry in manifest {
        if entry.offset as usize != expected {
            return Err(Error::CheckpointHeader {
                path: path.into(),
                details: format!(
                    "tensor `{}` listed at offset {}, expected {expected}",
                    entry.name, entry.offset
                ),
            });
        }
        let elems = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointHeader {
                path: path.into(),
                details: format!("tensor `{}` shape overflows", entry.name),
            })?;
        expected += elems;
    }
    if payload.len() < expected {
        return Err(Error::CheckpointTruncated {
            path: path.into(),
            details: format!(
                "payload holds {} bytes, manifest promises {expected}",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::CheckpointHeader {
            path: path.into(),
            details: format!(
                "payload carries {} bytes past the manifest's {expected}",
                payload.len() - expected
            ),
        });
    }
    let mut out = Vec::with_capacity(manifest.len());
    let mut at = 0usize;
    for entry in manifest {
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f32::from_le_bytes([
                payload[at],
                payload[at + 1],
                payload[at + 2],
                payload[at + 3],
            ]));
            at += 4;
        }
        out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let spec = tensor_spec(&checkpoint.config);
    if checkpoint.tensors.len() != spec.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, encoder layout has {}",
            checkpoint.tensors.len(),
            spec.len()
        )));
    }
    for ((name, tensor), (want_name, want_shape)) in checkpoint.tensors.iter().zip(&spec) {
        if name != want_name || tensor.shape() != &want_shape[..] {
            return Err(Error::Config(format!(
                "checkpoint tensor `{name}` does not match the encoder layout entry `{want_name}`"
            )));
        }
    }
    let (manifest, payload) = build_manifest(&checkpoint.tensors);
    let header = serde_json::to_string(&CheckpointFileHeader {
        config: checkpoint.config.clone(),
        origin: checkpoint.origin.clone(),
        provenance: checkpoint.provenance.clone(),
        manifest,
    })
    .map_err(|e| Error::Config(format!("could not serialize checkpoint header: {e}")))?;
    write_sectioned(path, &CHECKPOINT_MAGIC, header.as_bytes(), &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let (header_text, payload) = read_sectioned(path, &CHECKPOINT_MAGIC)?;
    let header: CheckpointFileHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::CheckpointHeader {
            path: path.into(),
            details: format!("malformed header: {e}"),
        })?;
    header.config.validate().map_err(|e| Error::CheckpointHeader {
        path: path.into(),
        details: format!("invalid model config: {e}"),
    })?;
    let spec = tensor_spec(&header.config);
    if header.manifest.len() != spec.len() {
        return Err(Error::CheckpointHeader {
            path: path.into(),
            details: format!(
                "manifest lists {} tensors, encoder layout has {}",
                header.manifest.len(),
                spec.len()
            ),
        });
    }
    for (entry, (want_name, want_shape)) in header.manifest.iter().zip(&spec) {
        if entry.name != *want_name || entry.shape != *want_shape {
            return Err(Error::CheckpointHeader {
                path: path.into(),
                details: format!(
                    "manifest entry `{}` does not match the encoder layout entry `{want_name}`",
                    entry.name
                ),
            });
        }
    }
    let tensors = decode_payload(path, &header.manifest, &payload)?;
    Ok(Checkpoint {
        config: header.config,
        origin: header.origin,
        provenance: header.provenance,
        tensors,
    })
}

pub fn save_head(path: impl AsRef<Path>, head: &HeadSnapshot) -> Result<()> {
    let path = path.as_ref();
    let (manifest, payload) = build_manifest(head.tensors());
    let (num_classes, vocab_size) = match head {
        HeadSnapshot::Classification { num_classes, .. } => (Some(*num_classes), None),
        HeadSnapshot::MultipleChoice { .. } => (None, None),
        HeadSnapshot::Pretrain { vocab_size, .. } => (None, Some(*vocab_size)),
    };
    let header = serde_json::to_string(&HeadFileHeader {
        kind: head.kind().to_string(),
        num_classes,
        vocab_size,
        manifest,
    })
    .map_err(|e| Error::Config(format!("could not serialize head header: {e}")))?;
    write_sectioned(path, &HEAD_MAGIC, header.as_bytes(), &payload)
}

pub fn load_head(path: impl AsRef<Path>) -> Result<HeadSnapshot> {
    let path = path.as_ref();
    let (header_text, payload) = read_sectioned(path, &HEAD_MAGIC)?;
    let header: HeadFileHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::CheckpointHeader {
            path: path.into(),
            details: format!("malformed header: {e}"),
        })?;
    let tensors = decode_payload(path, &header.manifest, &payload)?;
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    match header.kind.as_str() {
        "classification" => {
            let num_classes = header.num_classes.ok_or_else(|| Error::CheckpointHeader {
                path: path.into(),
                details: "classification head without num_classes".into(),
            })?;
            if names != ["head.cls.w", "head.cls.b"] {
                return Err(Error::CheckpointHeader {
                    path: path.into(),
                    details: format!("unexpected classification head tensors {names:?}"),
                });
            }
            Ok(HeadSnapshot::Classification {
                num_classes,
                tensors,
            })
        }
        "multiple_choice" => {
            if names != ["head.choice.w", "head.choice.b"] {
                return Err(Error::CheckpointHeader {
                    path: path.into(),
                    details: format!("unexpected multiple-choice head tensors {names:?}"),
                });
            }
            Ok(HeadSnapshot::MultipleChoice { tensors })
        }
        "pretrain" => {
            let vocab_size = header.vocab_size.ok_or_else(|| Error::CheckpointHeader {
                path: path.into(),
                details: "pretrain head without vocab_size".into(),
            })?;
            if names != ["head.mlm.bias", "head.nsp.w", "head.nsp.b"] {
                return Err(Error::CheckpointHeader {
                    path: path.into(),
                    details: format!("unexpected pretrain head tensors {names:?}"),
                });
            }
            Ok(HeadSnapshot::Pretrain {
                vocab_size,
                tensors,
            })
        }
        other => Err(Error::CheckpointHeader {
            path: path.into(),
            details: format!("unknown head kind `{other}`"),
        }),
    }
}

/// One stage's training history. Wall time is informational and stays out
/// of the serialized form so identical runs produce identical reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: String,
    pub selection_metric: String,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Dev metric per epoch (accuracy or loss, per `selection_metric`).
    pub dev_metric: Vec<f64>,
    /// One-based epoch whose encoder the checkpoint carries.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

/// Index and value of the best epoch: highest accuracy or lowest loss,
/// earliest epoch on ties.
pub fn select_best(metrics: &[f64], metric: SelectionMetric) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        let improved = match best {
            None => true,
            Some((_, b)) => match metric {
                SelectionMetric::Accuracy => m > b,
                SelectionMetric::Loss => m < b,
            },
        };
        if improved {
            best = Some((i, m));
        }
    }
    best
}

#[derive(Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub head: HeadSnapshot,
}

enum StageModel {
    Task(ModelWithHead<f32>),
    Pretrain(PretrainModel<f32>),
}

impl Parameterized<f32> for StageModel {
    fn slots(&self) -> Vec<&ParamSlot<f32>> {
        match self {
            StageModel::Task(m) => m.slots(),
            StageModel::Pretrain(m) => m.slots(),
        }
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<f32>> {
        match self {
            StageModel::Task(m) => m.slots_mut(),
            StageModel::Pretrain(m) => m.slots_mut(),
        }
    }
}

enum StageData {
    Pair {
        train: Vec<(EncodedInput, usize)>,
        dev: Vec<(EncodedInput, usize)>,
    },
    Choice {
        train: Vec<EncodedChoice>,
        dev: Vec<EncodedChoice>,
    },
    Pretrain {
        train: Corpus,
        dev: Vec<PretrainExample>,
    },
}

impl StageData {
    fn train_len(&self, config: &StageConfig) -> usize {
        match self {
            StageData::Pair { train, .. } => train.len(),
            StageData::Choice { train, .. } => train.len(),
            StageData::Pretrain { .. } => config.examples_per_epoch,
        }
    }

    fn dev_len(&self) -> usize {
        match self {
            StageData::Pair { dev, .. } => dev.len(),
            StageData::Choice { dev, .. } => dev.len(),
            StageData::Pretrain { dev, .. } => dev.len(),
        }
    }
}

enum EpochSet {
    Pair(Vec<(EncodedInput, usize)>),
    Choice(Vec<EncodedChoice>),
    Pretrain(Vec<PretrainExample>),
}

impl EpochSet {
    fn len(&self) -> usize {
        match self {
            EpochSet::Pair(v) => v.len(),
            EpochSet::Choice(v) => v.len(),
            EpochSet::Pretrain(v) => v.len(),
        }
    }
}

fn load_stage_data(config: &StageConfig, vocab: &Vocab) -> Result<StageData> {
    let empty = |path: &Path, role: &str| {
        Error::Data(format!(
            "{}: empty {role} dataset for stage `{}`",
            path.display(),
            config.task.name()
        ))
    };
    match config.task {
        StageTask::Pretrain => {
            let train = Corpus::load(&config.train_data)?;
            if train.num_sentences() == 0 {
                return Err(empty(&config.train_data, "training"));
            }
            let dev_corpus = Corpus::load(&config.dev_data)?;
            if dev_corpus.num_sentences() == 0 {
                return Err(empty(&config.dev_data, "dev"));
            }
            let dev = generate_pretrain_examples(
                &dev_corpus,
                vocab,
                config.seed,
                PRETRAIN_DEV_EPOCH,
                config.examples_per_epoch,
                config.max_len,
                config.mask_rate,
            )?;
            Ok(StageData::Pretrain { train, dev })
        }
        StageTask::Nli | StageTask::Sentiment => {
            let schema = if config.task == StageTask::Nli {
                PairSchema::Nli
            } else {
                PairSchema::Sentiment
            };
            let mut train = load_pair_tsv(&config.train_data, schema)?.examples;
            let mut dev = load_pair_tsv(&config.dev_data, schema)?.examples;
            if let Some(pair) = config.nli_filter {
                train = filter_nli_categories(&train, pair)?;
                dev = filter_nli_categories(&dev, pair)?;
            }
            if train.is_empty() {
                return Err(empty(&config.train_data, "training"));
            }
            if dev.is_empty() {
                return Err(empty(&config.dev_data, "dev"));
            }
            Ok(StageData::Pair {
                train: train
                    .iter()
                    .map(|e| encode_pair_example(e, vocab, config.max_len))
                    .collect::<Result<_>>()?,
                dev: dev
                    .iter()
                    .map(|e| encode_pair_example(e, vocab, config.max_len))
                    .collect::<Result<_>>()?,
            })
        }
        StageTask::McNli | StageTask::NextAction | StageTask::Sct => {
            let load = |path: &Path| -> Result<Vec<crate::data::ChoiceExample>> {
                if config.task == StageTask::Sct {
                    load_sct(path)
                } else {
                    load_choice_csv(path)
                }
            };
            let train = load(&config.train_data)?;
            let dev = load(&config.dev_data)?;
            if train.is_empty() {
                return Err(empty(&config.train_data, "training"));
            }
            if dev.is_empty() {
                return Err(empty(&config.dev_data, "dev"));
            }
            Ok(StageData::Choice {
                train: train
                    .iter()
                    .map(|e| encode_choice_example(e, vocab, config.max_len))
                    .collect::<Result<_>>()?,
                dev: dev
                    .iter()
                    .map(|e| encode_choice_example(e, vocab, config.max_len))
                    .collect::<Result<_>>()?,
            })
        }
    }
}

fn attach_head(
    encoder: EncoderParams<f32>,
    config: &StageConfig,
    vocab: &Vocab,
) -> Result<StageModel> {
    let hidden = encoder.config().hidden_size;
    Ok(match config.task {
        StageTask::Pretrain => StageModel::Pretrain(PretrainModel {
            heads: PretrainHeads::init(hidden, vocab.size(), config.seed)?,
            encoder,
        }),
        StageTask::Nli => {
            let classes = if config.nli_filter.is_some() { 2 } else { 3 };
            StageModel::Task(ModelWithHead {
                head: TaskHead::classification(hidden, classes, config.seed)?,
                encoder,
            })
        }
        StageTask::Sentiment => StageModel::Task(ModelWithHead {
            head: TaskHead::classification(hidden, 2, config.seed)?,
            encoder,
        }),
        StageTask::McNli | StageTask::NextAction | StageTask::Sct => {
            StageModel::Task(ModelWithHead {
                head: TaskHead::multiple_choice(hidden, config.seed)?,
                encoder,
            })
        }
    })
}

/// Shuffled (or, for pretraining, freshly sampled) examples for one epoch.
fn materialize_epoch(
    data: &StageData,
    config: &StageConfig,
    vocab: &Vocab,
    epoch: usize,
) -> Result<EpochSet> {
    let mut rng = stream_rng(config.seed, stream::shuffle_epoch(epoch));
    Ok(match data {
        StageData::Pair { train, .. } => {
            let mut v = train.clone();
            v.shuffle(&mut rng);
            EpochSet::Pair(v)
        }
        StageData::Choice { train, .. } => {
            let mut v = train.clone();
            v.shuffle(&mut rng);
            EpochSet::Choice(v)
        }
        // each pretraining example already draws from its own stream, so
        // the sample order is fresh every epoch without an extra shuffle
        StageData::Pretrain { train, .. } => EpochSet::Pretrain(generate_pretrain_examples(
            train,
            vocab,
            config.seed,
            epoch,
            config.examples_per_epoch,
            config.max_len,
            config.mask_rate,
        )?),
    })
}

fn train_batch(
    model: &mut StageModel,
    set: &EpochSet,
    range: Range<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    match (model, set) {
        (StageModel::Task(m), EpochSet::Pair(v)) => classification_loss(m, &v[range], true, rng),
        (StageModel::Task(m), EpochSet::Choice(v)) => choice_loss(m, &v[range], true, rng),
        (StageModel::Pretrain(m), EpochSet::Pretrain(v)) => pretrain_loss(m, &v[range], true, rng),
        _ => Err(Error::Config(
            "task head does not match the dataset kind".into(),
        )),
    }
}

fn eval_dev(model: &mut StageModel, data: &StageData, config: &StageConfig) -> Result<f64> {
    match config.selection_metric {
        SelectionMetric::Accuracy => match (&*model, data) {
            (StageModel::Task(m), StageData::Pair { dev, .. }) => {
                pair_accuracy(&m.encoder, &m.head, dev)
            }
            (StageModel::Task(m), StageData::Choice { dev, .. }) => {
                choice_accuracy(&m.encoder, &m.head, dev)
            }
            _ => Err(Error::Config(
                "accuracy selection needs a labeled dev set".into(),
            )),
        },
        SelectionMetric::Loss => {
            // the loss functions also fill gradient slots; those are
            // cleared below so scoring never leaks into the next step
            let mut rng = stream_rng(config.seed, stream::DROPOUT);
            let n = data.dev_len();
            let mut weighted = 0.0;
            let mut lo = 0usize;
            while lo < n {
                let hi = (lo + config.batch_size).min(n);
                let loss = match (&mut *model, data) {
                    (StageModel::Task(m), StageData::Pair { dev, .. }) => {
                        classification_loss(m, &dev[lo..hi], false, &mut rng)?
                    }
                    (StageModel::Task(m), StageData::Choice { dev, .. }) => {
                        choice_loss(m, &dev[lo..hi], false, &mut rng)?
                    }
                    (StageModel::Pretrain(m), StageData::Pretrain { dev, .. }) => {
                        pretrain_loss(m, &dev[lo..hi], false, &mut rng)?
                    }
                    _ => {
                        return Err(Error::Config(
                            "task head does not match the dataset kind".into(),
                        ))
                    }
                };
                weighted += loss * (hi - lo) as f64;
                lo = hi;
            }
            model.zero_grads();
            Ok(weighted / n as f64)
        }
    }
}

fn stage_encoder(model: &StageModel) -> &EncoderParams<f32> {
    match model {
        StageModel::Task(m) => &m.encoder,
        StageModel::Pretrain(m) => &m.encoder,
    }
}

fn snapshot_head(model: &StageModel) -> HeadSnapshot {
    match model {
        StageModel::Task(m) => HeadSnapshot::from_task_head(&m.head),
        StageModel::Pretrain(m) => HeadSnapshot::from_pretrain_heads(&m.heads),
    }
}

struct BestSnapshot {
    epoch: usize,
    metric: f64,
    tensors: Vec<(String, Tensor<f32>)>,
    head: HeadSnapshot,
}

/// Trains one stage and returns the best-epoch encoder, its report, and
/// the trained head.
///
/// The head is always freshly initialized; `init` contributes encoder
/// weights only and must match the stage's geometry. Dev performance is
/// measured after every epoch and the checkpoint carries the encoder from
/// the best one, with the stage's task name appended to its provenance.
pub fn run_stage(config: &StageConfig, init: Option<&Checkpoint>) -> Result<StageOutcome> {
    let started = Instant::now();
    config.validate()?;
    let vocab = Vocab::load(&config.vocab_path, None)?;
    let model_config = config.model_config(vocab.size());
    model_config.validate()?;
    if let Some(ck) = init {
        check_geometry(&ck.config, &model_config)?;
    }

    let encoder = match init {
        Some(ck) => ck.to_encoder_with(model_config.clone())?,
        None => EncoderParams::<f32>::init(model_config.clone(), config.seed)?,
    };
    let (origin, mut provenance) = match init {
        Some(ck) => (ck.origin.clone(), ck.provenance.clone()),
        None => ("scratch".to_string(), Vec::new()),
    };

    let data = load_stage_data(config, &vocab)?;
    let mut model = attach_head(encoder, config, &vocab)?;

    let steps_per_epoch = data.train_len(config).div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let adam_cfg = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut dropout_rng = stream_rng(config.seed, stream::DROPOUT);

    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut dev_metrics = Vec::with_capacity(config.epochs);
    let mut global_step = 0u64;
    let mut best: Option<BestSnapshot> = None;

    for epoch in 0..config.epochs {
        let epoch_set = materialize_epoch(&data, config, &vocab, epoch)?;
        let n = epoch_set.len();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lo = 0usize;
        while lo < n {
            let hi = (lo + config.batch_size).min(n);
            loss_sum += train_batch(&mut model, &epoch_set, lo..hi, &mut dropout_rng)?;
            batches += 1;
            let lr = scheduled_lr(
                config.learning_rate,
                global_step,
                total_steps,
                config.warmup_frac,
            );
            adam_step(&mut model, &adam_cfg, lr)?;
            global_step += 1;
            lo = hi;
        }
        train_loss.push(loss_sum / batches as f64);

        let metric = eval_dev(&mut model, &data, config)?;
        dev_metrics.push(metric);
        let improved = match &best {
            None => true,
            Some(b) => match config.selection_metric {
                SelectionMetric::Accuracy => metric > b.metric,
                SelectionMetric::Loss => metric < b.metric,
            },
        };
        if improved {
            best = Some(BestSnapshot {
                epoch,
                metric,
                tensors: stage_encoder(&model)
                    .named_tensors()
                    .into_iter()
                    .map(|(name, t)| (name, t.clone()))
                    .collect(),
                head: snapshot_head(&model),
            });
        }
    }

    let best = best.expect("at least one epoch ran");
    debug_assert_eq!(
        select_best(&dev_metrics, config.selection_metric),
        Some((best.epoch, best.metric))
    );
    provenance.push(config.task.name().to_string());
    let checkpoint = Checkpoint {
        config: model_config,
        origin,
        provenance,
        tensors: best.tensors,
    };
    let report = TrainReport {
        task: config.task.name().to_string(),
        selection_metric: config.selection_metric.as_str().to_string(),
        train_loss,
        dev_metric: dev_metrics,
        best_epoch: best.epoch + 1,
        best_dev_metric: best.metric,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(StageOutcome {
        checkpoint,
        report,
        head: best.head,
    })
}

#[derive(Debug)]
pub struct PathOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<TrainReport>,
    pub head: HeadSnapshot,
}

/// Runs stages in order, threading each stage's best encoder into the next.
///
/// A path normally holds at most one supervised transfer stage between
/// pretraining and the target task; `allow_multiple_transfer` lifts that
/// guard for deliberate experiments.
pub fn run_path(
    stages: &[StageConfig],
    start: Option<Checkpoint>,
    allow_multiple_transfer: bool,
) -> Result<PathOutcome> {
    if stages.is_empty() {
        return Err(Error::Config("a training path needs at least one stage".into()));
    }
    let transfers: Vec<&str> = stages
        .iter()
        .filter(|s| s.task.is_transfer())
        .map(|s| s.task.name())
        .collect();
    if transfers.len() > 1 && !allow_multiple_transfer {
        return Err(Error::Config(format!(
            "path contains {} transfer stages ({}); pass the multiple-transfer override to run it anyway",
            transfers.len(),
            transfers.join(", ")
        )));
    }

    let mut current = start;
    let mut reports = Vec::with_capacity(stages.len());
    let mut final_outcome: Option<StageOutcome> = None;
    for config in stages {
        let outcome = run_stage(config, current.as_ref())?;
        reports.push(outcome.report.clone());
        current = Some(outcome.checkpoint.clone());
        final_outcome = Some(outcome);
    }
    let last = final_outcome.expect("at least one stage ran");
    Ok(PathOutcome {
        checkpoint: last.checkpoint,
        reports,
        head: last.head,
    })
}
