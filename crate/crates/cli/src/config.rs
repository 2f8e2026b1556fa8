//! Experiment and schedule documents: TOML on disk, validated into core
//! types. Parsing fills defaults, so serializing a parsed config writes
//! every field and round-trips to an identical value.

use crate::error::{CliError, Result};
use promptlab_core::data::SyntheticSpec;
use promptlab_core::model::ModelConfig;
use promptlab_core::schedule::{LayerOps, PromptSchedule};
use promptlab_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train on sampled shots, evaluate on the same dataset's held-out rest.
    Plain,
    /// Train on the first half of the classes, test on both halves.
    BaseToNew,
    /// Train on one dataset, evaluate on several others.
    CrossDataset,
}

/// Mirrors the core model configuration with flat, TOML-friendly fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub d_joint: usize,
    pub mlp_ratio: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub temperature: f64,
    pub text_prompt_rows: usize,
    pub template_tokens: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            d_t: m.d_t,
            d_v: m.d_v,
            d_joint: m.d_joint,
            mlp_ratio: m.mlp_ratio,
            image_height: m.image_size.0,
            image_width: m.image_size.1,
            patch: m.patch,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            temperature: m.temperature,
            text_prompt_rows: m.text_prompt_rows,
            template_tokens: m.template_tokens,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_t: self.d_t,
            d_v: self.d_v,
            d_joint: self.d_joint,
            mlp_ratio: self.mlp_ratio,
            image_size: (self.image_height, self.image_width),
            patch: self.patch,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            temperature: self.temperature,
            text_prompt_rows: self.text_prompt_rows,
            template_tokens: self.template_tokens.clone(),
        }
    }
}

/// One explicit per-layer entry for `kind = "explicit"` schedules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub add: usize,
    #[serde(default)]
    pub remove: usize,
    #[serde(default)]
    pub carry: bool,
}

/// Schedule document: a named pattern or an explicit per-layer list.
///
/// Standalone schedule files for the profiler use the same shape and may
/// also pin `num_layers` and `d_model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// One of `plain`, `deep_vpt`, `shallow`, `mpl`, `explicit`.
    pub kind: String,
    /// Rows inserted per prompted layer (`mpl`, `deep_vpt`, `shallow`).
    pub add: usize,
    /// Rows removed per prompted layer (`mpl`).
    pub remove: usize,
    /// Number of leading prompted layers (`mpl`).
    pub depth: usize,
    /// Per-layer entries when `kind = "explicit"`.
    pub layers: Vec<LayerEntry>,
    /// Layer count for standalone documents; optional when the model or a
    /// `--layers` flag supplies it.
    pub num_layers: Option<usize>,
    /// Width used for cost estimates in standalone documents.
    pub d_model: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: "mpl".to_string(),
            add: 2,
            remove: 1,
            depth: 2,
            layers: Vec::new(),
            num_layers: None,
            d_model: None,
        }
    }
}

impl ScheduleSection {
    /// Build the schedule for a known layer count, checking that any count
    /// pinned in the document agrees.
    pub fn to_schedule(&self, num_layers: usize) -> Result<PromptSchedule> {
        if let Some(pinned) = self.num_layers {
            if pinned != num_layers {
                return Err(CliError::config(format!(
                    "schedule pins num_layers = {pinned} but the model has {num_layers} layers"
                )));
            }
        }
        let schedule = match self.kind.as_str() {
            "plain" => PromptSchedule::plain(num_layers),
            "deep_vpt" => PromptSchedule::deep_vpt(num_layers, self.add),
            "shallow" => PromptSchedule::shallow(num_layers, self.add),
            "mpl" => PromptSchedule::mpl(num_layers, self.add, self.remove, self.depth),
            "explicit" => {
                if self.layers.len() != num_layers {
                    return Err(CliError::config(format!(
                        "explicit schedule lists {} layers but the model has {num_layers}",
                        self.layers.len()
                    )));
                }
                let ops = self
                    .layers
                    .iter()
                    .map(|l| LayerOps { add: l.add, remove: l.remove, carry: l.carry })
                    .collect();
                PromptSchedule::new(ops)
            }
            other => {
                return Err(CliError::config(format!(
                    "unknown schedule kind {other:?}; expected plain, deep_vpt, shallow, mpl, or explicit"
                )))
            }
        };
        schedule.map_err(CliError::from)
    }

    /// Layer count for standalone use: an explicit list wins, then the
    /// pinned count, then the caller's flag.
    pub fn resolve_num_layers(&self, flag: Option<usize>) -> Result<usize> {
        if self.kind == "explicit" && !self.layers.is_empty() {
            if let Some(n) = flag {
                if n != self.layers.len() {
                    return Err(CliError::config(format!(
                        "--layers {n} conflicts with the {} explicit entries",
                        self.layers.len()
                    )));
                }
            }
            return Ok(self.layers.len());
        }
        match (self.num_layers, flag) {
            (Some(doc), Some(f)) if doc != f => Err(CliError::config(format!(
                "--layers {f} conflicts with num_layers = {doc} in the document"
            ))),
            (Some(doc), _) => Ok(doc),
            (None, Some(f)) => Ok(f),
            (None, None) => Err(CliError::config(
                "layer count missing: set num_layers in the document or pass --layers",
            )),
        }
    }
}

/// Optimizer settings; epochs defaults by protocol, so it stays optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub shots: usize,
    pub lr: f64,
    pub epochs: Option<usize>,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub warmup_steps: Option<usize>,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            shots: t.shots,
            lr: t.lr,
            epochs: None,
            batch_size_train: t.batch_size_train,
            batch_size_eval: t.batch_size_eval,
            warmup_steps: t.warmup_steps,
            min_lr: t.min_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        }
    }
}

impl TrainSection {
    /// Concrete train config for a protocol and seed. Unset epochs default
    /// to 5, except cross-dataset transfer which conventionally trains 2.
    pub fn to_train_config(&self, protocol: Protocol, seed: u64) -> TrainConfig {
        let epochs = self.epochs.unwrap_or(match protocol {
            Protocol::CrossDataset => 2,
            _ => 5,
        });
        TrainConfig {
            shots: self.shots,
            lr: self.lr,
            epochs,
            batch_size_train: self.batch_size_train,
            batch_size_eval: self.batch_size_eval,
            warmup_steps: self.warmup_steps,
            min_lr: self.min_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

/// Where a dataset comes from: generated on the fly or loaded from a
/// directory written by `dataset save` tooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSection {
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_image_dim")]
        height: usize,
        #[serde(default = "default_image_dim")]
        width: usize,
        #[serde(default = "default_cell")]
        cell: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        prototype_seed: u64,
        #[serde(default)]
        prototype_jitter: f64,
        #[serde(default = "default_class_token_base")]
        class_token_base: usize,
    },
    Dir {
        path: String,
    },
}

fn default_classes() -> usize {
    SyntheticSpec::default().classes
}
fn default_per_class() -> usize {
    SyntheticSpec::default().per_class
}
fn default_noise() -> f64 {
    SyntheticSpec::default().noise
}
fn default_image_dim() -> usize {
    SyntheticSpec::default().height
}
fn default_cell() -> usize {
    SyntheticSpec::default().cell
}
fn default_class_token_base() -> usize {
    SyntheticSpec::default().class_token_base
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataSection::Synthetic {
            classes: s.classes,
            per_class: s.per_class,
            noise: s.noise,
            height: s.height,
            width: s.width,
            cell: s.cell,
            seed: s.seed,
            prototype_seed: s.prototype_seed,
            prototype_jitter: s.prototype_jitter,
            class_token_base: s.class_token_base,
        }
    }
}

impl DataSection {
    pub fn to_synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self {
            DataSection::Synthetic {
                classes,
                per_class,
                noise,
                height,
                width,
                cell,
                seed,
                prototype_seed,
                prototype_jitter,
                class_token_base,
            } => Some(SyntheticSpec {
                classes: *classes,
                per_class: *per_class,
                noise: *noise,
                height: *height,
                width: *width,
                cell: *cell,
                seed: *seed,
                prototype_seed: *prototype_seed,
                prototype_jitter: *prototype_jitter,
                class_token_base: *class_token_base,
            }),
            DataSection::Dir { .. } => None,
        }
    }
}

/// A full experiment: model, schedule, optimizer, data, and protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    /// Report destination; `--out` and the default output directory apply
    /// when absent.
    pub out: Option<String>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub data: DataSection,
    /// Extra datasets for cross-dataset transfer, evaluated in order.
    pub eval_data: Vec<DataSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::BaseToNew,
            seeds: vec![0],
            out: None,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval_data: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seed list is empty; nothing to run"));
        }
        self.model.to_model_config().validate().map_err(CliError::from)?;
        self.schedule.to_schedule(self.model.num_layers)?;
        if self.protocol == Protocol::CrossDataset && self.eval_data.is_empty() {
            return Err(CliError::config(
                "cross_dataset needs at least one [[eval_data]] entry",
            ));
        }
        Ok(())
    }
}

pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    parse_experiment(&text)
}

pub fn parse_schedule_doc(text: &str) -> Result<ScheduleSection> {
    toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
}

pub fn load_schedule_doc(path: &Path) -> Result<ScheduleSection> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    parse_schedule_doc(&text)
}
