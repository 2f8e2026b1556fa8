//! Dual-encoder model assembly: two frozen transformer stacks, frozen
//! embeddings and projections, and the trainable prompt and coupling
//! parameters.
//!
//! There is no pretrained checkpoint at this scale; a seeded random frozen
//! backbone stands in for one. Only the text prompt blocks and the coupling
//! maps are grad-enabled.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::clip::ProjectionParams;
use crate::encoder::{EmbeddingParams, EncoderConfig, LayerParams};
use crate::error::Error;
use crate::prompts::{CouplingParams, TextPromptParams};
use crate::rng::stream_rng;
use crate::schedule::PromptSchedule;
use crate::tensor::Tensor;
use crate::Result;

/// Full dual-encoder shape plus classifier settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Text branch width.
    pub d_t: usize,
    /// Vision branch width.
    pub d_v: usize,
    /// Joint embedding width after projection.
    pub d_joint: usize,
    pub mlp_ratio: usize,
    /// Image height and width in pixels.
    pub image_size: (usize, usize),
    pub patch: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Softmax temperature of the classifier, fixed and untrained.
    pub temperature: f64,
    /// Rows per text prompt block.
    pub text_prompt_rows: usize,
    /// Token ids prepended to every class-name token list.
    pub template_tokens: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            num_heads: 4,
            d_t: 32,
            d_v: 48,
            d_joint: 32,
            mlp_ratio: 4,
            image_size: (16, 16),
            patch: 4,
            vocab_size: 64,
            max_seq_len: 16,
            temperature: 0.01,
            text_prompt_rows: 1,
            template_tokens: vec![1, 2, 3, 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text_encoder_config().validate()?;
        self.vision_encoder_config().validate()?;
        if self.d_joint == 0 {
            return Err(Error::Config(String::from("joint width must be at least 1")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config(String::from("vocabulary must be non-empty")));
        }
        for &t in &self.template_tokens {
            if t >= self.vocab_size {
                return Err(Error::Vocab { id: t, vocab_size: self.vocab_size });
            }
        }
        if self.template_tokens.len() >= self.max_seq_len {
            return Err(Error::Config(format!(
                "template of {} tokens leaves no room for class tokens within max_seq_len {}",
                self.template_tokens.len(),
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.image_size;
        (h / self.patch) * (w / self.patch)
    }

    pub fn text_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            width: self.d_t,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn vision_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            width: self.d_v,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// Assembled model: frozen backbone plus trainable prompt parameters.
pub struct PromptModel {
    pub config: ModelConfig,
    pub schedule: PromptSchedule,
    pub text_layers: Vec<LayerParams>,
    pub vision_layers: Vec<LayerParams>,
    pub embed: EmbeddingParams,
    pub proj: ProjectionParams,
    pub text_prompts: TextPromptParams,
    pub coupling: CouplingParams,
}

impl PromptModel {
    /// Build a model with a seeded random frozen backbone and fresh
    /// trainable prompts. The same seed always yields bit-identical
    /// parameters.
    pub fn init(config: ModelConfig, schedule: PromptSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        if schedule.num_layers() != config.num_layers {
            return Err(Error::Schedule(format!(
                "schedule covers {} layers but the model has {}",
                schedule.num_layers(),
                config.num_layers
            )));
        }
        let text_cfg = config.text_encoder_config();
        let vision_cfg = config.vision_encoder_config();

        let mut rng = stream_rng(seed, 0);
        let text_layers = (0..config.num_layers)
            .map(|_| LayerParams::init(&text_cfg, &mut rng, false))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream_rng(seed, 1);
        let vision_layers = (0..config.num_layers)
            .map(|_| LayerParams::init(&vision_cfg, &mut rng, false))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream_rng(seed, 2);
        let embed = EmbeddingParams::init(
            config.vocab_size,
            config.d_t,
            config.d_v,
            config.patch,
            config.n_patches(),
            config.max_seq_len,
            &mut rng,
            false,
        );
        let mut rng = stream_rng(seed, 3);
        let proj = ProjectionParams::init(
            config.d_t,
            config.d_v,
            config.d_joint,
            config.temperature,
            &mut rng,
            false,
        )?;
        let mut rng = stream_rng(seed, 4);
        let text_prompts = TextPromptParams::init(
            schedule.prompt_depth(),
            config.text_prompt_rows,
            config.d_t,
            &mut rng,
        )?;
        let mut rng = stream_rng(seed, 5);
        let coupling = CouplingParams::init(&schedule, config.d_t, config.d_v, &mut rng);

        Ok(PromptModel {
            config,
            schedule,
            text_layers,
            vision_layers,
            embed,
            proj,
            text_prompts,
            coupling,
        })
    }

    /// Trainable tensors in a stable order: text prompt blocks, then
    /// coupling maps.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.text_prompts.named();
        out.extend(self.coupling.named());
        out
    }

    /// Frozen backbone tensors in a stable order.
    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.text_layers.iter().enumerate() {
            out.extend(layer.named(&format!("text.{i}")));
        }
        for (i, layer) in self.vision_layers.iter().enumerate() {
            out.extend(layer.named(&format!("vision.{i}")));
        }
        out.extend(self.embed.named("embed"));
        out.extend(self.proj.named("proj"));
        out
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Drop gradients on all trainable tensors.
    pub fn zero_grads(&self) {
        for (_, t) in self.trainable_params() {
            t.zero_grad();
        }
    }

    /// Order-sensitive digest over the frozen backbone, for checking that
    /// training never touches it.
    pub fn frozen_digest(&self) -> u64 {
        digest_params(&self.frozen_params())
    }

    /// Digest over the trainable parameters, for determinism checks.
    pub fn trainable_digest(&self) -> u64 {
        digest_params(&self.trainable_params())
    }
}

/// FNV-1a over parameter names and exact value bit patterns.
pub fn digest_params(params: &[(String, Tensor)]) -> u64 {
    let mut hash = FNV_OFFSET;
    for (name, tensor) in params {
        for b in name.as_bytes() {
            hash = fnv_step(hash, *b);
        }
        for v in tensor.to_vec() {
            for b in v.to_bits().to_le_bytes() {
                hash = fnv_step(hash, b);
            }
        }
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_step(hash: u64, byte: u8) -> u64 {
    (hash ^ byte as u64).wrapping_mul(FNV_PRIME)
}
