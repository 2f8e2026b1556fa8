//! Transformer building blocks shared by the text and vision branches:
//! multi-head self-attention, pre-norm residual layers, patch and token
//! embedding.
//!
//! Attention is bidirectional on both branches; positional information
//! enters only through the embedding stage, never inside a layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::rng::normal_vec;
use crate::tensor::Tensor;
use crate::Result;

/// Standard deviation for weight initialization; layernorm parameters and
/// biases start at their identity values instead.
pub const INIT_STD: f64 = 0.02;

/// Shape of one encoder stack. `width` is `d_t` or `d_v` depending on the
/// branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!(
                "encoder counts must all be at least 1: layers {}, heads {}, width {}, mlp_ratio {}",
                self.num_layers, self.num_heads, self.width, self.mlp_ratio
            )));
        }
        if self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one pre-norm transformer layer.
pub struct LayerParams {
    pub num_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

fn weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, trainable: bool) -> Tensor {
    let data = normal_vec(rng, rows * cols, INIT_STD);
    if trainable {
        Tensor::param(data, vec![rows, cols]).unwrap()
    } else {
        Tensor::constant(data, vec![rows, cols]).unwrap()
    }
}

fn filled(value: f64, rows: usize, cols: usize, trainable: bool) -> Tensor {
    let data = vec![value; rows * cols];
    if trainable {
        Tensor::param(data, vec![rows, cols]).unwrap()
    } else {
        Tensor::constant(data, vec![rows, cols]).unwrap()
    }
}

impl LayerParams {
    /// Fresh layer weights: projections and MLP weights `normal(0, 0.02)`,
    /// layernorm gain 1 and bias 0, MLP biases 0.
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        Ok(LayerParams {
            num_heads: config.num_heads,
            wq: weight(rng, d, d, trainable),
            wk: weight(rng, d, d, trainable),
            wv: weight(rng, d, d, trainable),
            wo: weight(rng, d, d, trainable),
            w1: weight(rng, d, hidden, trainable),
            b1: filled(0.0, 1, hidden, trainable),
            w2: weight(rng, hidden, d, trainable),
            b2: filled(0.0, 1, d, trainable),
            ln1_gain: filled(1.0, 1, d, trainable),
            ln1_bias: filled(0.0, 1, d, trainable),
            ln2_gain: filled(1.0, 1, d, trainable),
            ln2_bias: filled(0.0, 1, d, trainable),
        })
    }

    /// All tensors with stable names, for digests and parameter sweeps.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
        .collect()
    }
}

/// Layernorm followed by learned gain and bias, broadcast over rows.
fn layernorm_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let rows = x.rows();
    let normed = x.layernorm_rows()?;
    normed
        .mul(&gain.broadcast_rows(rows)?)?
        .add(&bias.broadcast_rows(rows)?)
}

/// Scaled dot-product attention over all rows, one head at a time, heads
/// concatenated and output-projected. No mask.
pub fn multi_head_self_attention(params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let heads = params.num_heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    let v = x.matmul(&params.wv)?;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let attn = scores.softmax_rows()?;
        head_outs.push(attn.matmul(&vh)?);
    }
    Tensor::concat_cols(&head_outs)?.matmul(&params.wo)
}

/// Pre-norm residual block: `x + MSA(LN(x))`, then `+ MLP(LN(.))`.
/// Row count in equals row count out.
pub fn encoder_layer_forward(params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    let normed = layernorm_affine(x, &params.ln1_gain, &params.ln1_bias)?;
    let x = x.add(&multi_head_self_attention(params, &normed)?)?;
    let rows = x.rows();
    let normed = layernorm_affine(&x, &params.ln2_gain, &params.ln2_bias)?;
    let hidden = normed
        .matmul(&params.w1)?
        .add(&params.b1.broadcast_rows(rows)?)?
        .gelu();
    let mlp = hidden.matmul(&params.w2)?.add(&params.b2.broadcast_rows(rows)?)?;
    x.add(&mlp)
}

/// Embedding-stage parameters for both branches.
pub struct EmbeddingParams {
    /// vocab_size x d_t token table.
    pub token_table: Tensor,
    /// max_seq_len x d_t positional rows for the text branch.
    pub pos_text: Tensor,
    /// (patch*patch*3) x d_v projection of flattened patches.
    pub patch_proj: Tensor,
    /// (1 + n_patches) x d_v positional rows for the vision branch;
    /// row 0 belongs to the class token.
    pub pos_vision: Tensor,
    /// 1 x d_v class-token vector, initialized to zeros.
    pub class_token: Tensor,
    pub patch: usize,
    pub max_seq_len: usize,
}

impl EmbeddingParams {
    pub fn init(
        vocab_size: usize,
        d_t: usize,
        d_v: usize,
        patch: usize,
        n_patches: usize,
        max_seq_len: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        EmbeddingParams {
            token_table: weight(rng, vocab_size, d_t, trainable),
            pos_text: weight(rng, max_seq_len, d_t, trainable),
            patch_proj: weight(rng, patch * patch * 3, d_v, trainable),
            pos_vision: weight(rng, 1 + n_patches, d_v, trainable),
            class_token: filled(0.0, 1, d_v, trainable),
            patch,
            max_seq_len,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("token_table", &self.token_table),
            ("pos_text", &self.pos_text),
            ("patch_proj", &self.patch_proj),
            ("pos_vision", &self.pos_vision),
            ("class_token", &self.class_token),
        ]
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
        .collect()
    }

    /// Cut, flatten, and project image patches; prepend the class token;
    /// add positional rows. Output is `(1 + n_patches) x d_v`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let patches = image.extract_patches(self.patch)?;
        let projected = patches.matmul(&self.patch_proj)?;
        let with_class = Tensor::concat_rows(&[self.class_token.clone(), projected])?;
        if with_class.rows() != self.pos_vision.rows() {
            return Err(Error::Data(format!(
                "image yields {} embedding rows but positional table has {}",
                with_class.rows(),
                self.pos_vision.rows()
            )));
        }
        with_class.add(&self.pos_vision)
    }

    /// Token lookup plus positional rows, one position per id.
    pub fn token_embed(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.len() > self.max_seq_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.max_seq_len
            )));
        }
        let tok = Tensor::embed(&self.token_table, ids)?;
        let pos = self.pos_text.slice_rows(0, ids.len())?;
        tok.add(&pos)
    }
}
