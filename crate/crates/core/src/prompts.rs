//! Prompt routing through the two encoder stacks.
//!
//! Vision branch: at each scheduled layer, fresh prompt rows generated by an
//! affine coupling from the text-branch prompts are prepended to the token
//! rows, some are dropped from the layer output, and the survivors ride
//! along into later layers. Row layout entering a layer is always
//!
//! ```text
//! [new prompts | carried prompts | class token | patches]
//! ```
//!
//! Removal drops the first `remove` rows of that layout; because the new
//! block leads, survivors and previously carried rows are left in carry
//! order without any shuffling.
//!
//! Text branch: a learned prompt block is prepended once, and at deeper
//! prompted layers the block's rows are replaced by that layer's own
//! learned block before the layer runs. The sentence embedding is the final
//! row of the last layer's output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::encoder::{encoder_layer_forward, EmbeddingParams, LayerParams, INIT_STD};
use crate::error::Error;
use crate::rng::normal_vec;
use crate::schedule::PromptSchedule;
use crate::tensor::Tensor;
use crate::Result;

/// Carried prompt rows flowing between vision layers.
#[derive(Clone)]
pub struct PromptState {
    pub carried: Tensor,
}

impl PromptState {
    /// No carried rows yet; used at the first layer.
    pub fn empty(d_v: usize) -> Self {
        PromptState { carried: Tensor::zeros(0, d_v) }
    }

    pub fn rows(&self) -> usize {
        self.carried.rows()
    }
}

/// Learned text-branch prompt blocks, one per prompted layer.
pub struct TextPromptParams {
    /// `blocks[i]` is the block for layer `i` (0-based), `rows_per_layer x d_t`.
    pub blocks: Vec<Tensor>,
    pub rows_per_layer: usize,
}

impl TextPromptParams {
    pub fn init(
        depth: usize,
        rows_per_layer: usize,
        d_t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth > 0 && rows_per_layer == 0 {
            return Err(Error::Config(String::from(
                "prompted layers need at least one text prompt row",
            )));
        }
        let blocks = (0..depth)
            .map(|_| {
                Tensor::param(normal_vec(rng, rows_per_layer * d_t, INIT_STD), vec![
                    rows_per_layer,
                    d_t,
                ])
                .unwrap()
            })
            .collect();
        Ok(TextPromptParams { blocks, rows_per_layer })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("text_prompt.{i}"), t.clone()))
            .collect()
    }

    /// The row that seeds the vision coupling for a layer: the first row of
    /// that layer's block.
    fn coupling_row(&self, layer: usize) -> Result<Tensor> {
        let block = self.blocks.get(layer).ok_or_else(|| {
            Error::Schedule(format!(
                "no text prompt block for layer {}; prompt depth is {}",
                layer + 1,
                self.blocks.len()
            ))
        })?;
        block.slice_rows(0, 1)
    }
}

/// Per-layer affine maps from a text prompt row to that layer's vision
/// prompt block: `A_i t + b_i` reshaped to `add_i x d_v`.
pub struct CouplingParams {
    /// `maps[i] = (A_i, b_i)` with `A_i: (add_i * d_v) x d_t`, `b_i: 1 x (add_i * d_v)`.
    pub maps: Vec<(Tensor, Tensor)>,
    pub d_v: usize,
}

impl CouplingParams {
    /// One map per prompted layer; `A` starts `normal(0, 0.02)`, `b` at zero.
    pub fn init(
        schedule: &PromptSchedule,
        d_t: usize,
        d_v: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let maps = (0..schedule.prompt_depth())
            .map(|i| {
                let p = schedule.ops(i).add;
                let a = Tensor::param(normal_vec(rng, p * d_v * d_t, INIT_STD), vec![p * d_v, d_t])
                    .unwrap();
                let b = Tensor::param(vec![0.0; p * d_v], vec![1, p * d_v]).unwrap();
                (a, b)
            })
            .collect();
        CouplingParams { maps, d_v }
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.maps
            .iter()
            .enumerate()
            .flat_map(|(i, (a, b))| {
                [(format!("coupling.{i}.a"), a.clone()), (format!("coupling.{i}.b"), b.clone())]
            })
            .collect()
    }

    /// Map a `1 x d_t` text row to the layer's `add_i x d_v` vision prompts.
    pub fn couple(&self, layer: usize, text_row: &Tensor) -> Result<Tensor> {
        let (a, b) = self.maps.get(layer).ok_or_else(|| {
            Error::Schedule(format!(
                "coupling requested for layer {} but prompt depth is {}",
                layer + 1,
                self.maps.len()
            ))
        })?;
        let (out_flat, d_t) = a.dims2()?;
        let (tr, tc) = text_row.dims2()?;
        if tr != 1 || tc != d_t {
            return Err(Error::Dimension { op: "couple", lhs: vec![tr, tc], rhs: vec![1, d_t] });
        }
        let projected = a.matmul(&text_row.transpose()?)?.transpose()?;
        let flat = projected.add(b)?;
        flat.reshape(vec![out_flat / self.d_v, self.d_v])
    }
}

/// Prepend `[new prompts; carried]` to the body rows.
pub fn apply_add(new_prompts: &Tensor, state: &PromptState, body: &Tensor) -> Result<Tensor> {
    Tensor::concat_rows(&[new_prompts.clone(), state.carried.clone(), body.clone()])
}

/// Drop the first `remove` rows of a layer output (the leading part of the
/// newly inserted block). Those rows never reach any later layer.
pub fn apply_remove(layer_out: &Tensor, remove: usize) -> Result<Tensor> {
    if remove == 0 {
        return Ok(layer_out.clone());
    }
    let (rows, _) = layer_out.dims2()?;
    if remove > rows {
        return Err(Error::Schedule(format!(
            "cannot remove {remove} rows from a {rows}-row layer output"
        )));
    }
    layer_out.slice_rows(remove, rows)
}

/// Split a post-removal output into the prompt rows destined for the next
/// layer and the body. With `carry` false the prompt rows are dropped.
pub fn apply_carry(
    after_remove: &Tensor,
    surviving_prompts: usize,
    carry: bool,
    d_v: usize,
) -> Result<(PromptState, Tensor)> {
    let (rows, _) = after_remove.dims2()?;
    if surviving_prompts > rows {
        return Err(Error::Schedule(format!(
            "carry expects {surviving_prompts} prompt rows but only {rows} are present"
        )));
    }
    let body = after_remove.slice_rows(surviving_prompts, rows)?;
    let state = if carry {
        PromptState { carried: after_remove.slice_rows(0, surviving_prompts)? }
    } else {
        PromptState::empty(d_v)
    };
    Ok((state, body))
}

/// Full vision forward pass: patch embedding, then per layer add, encoder
/// layer, remove, carry. Returns the final class-token row (`1 x d_v`,
/// before any projection).
pub fn run_vision_encoder(
    layers: &[LayerParams],
    embed: &EmbeddingParams,
    schedule: &PromptSchedule,
    coupling: &CouplingParams,
    text_prompts: &TextPromptParams,
    image: &Tensor,
) -> Result<Tensor> {
    run_vision_encoder_with_hook(layers, embed, schedule, coupling, text_prompts, image, |_, out| {
        Ok(out)
    })
}

/// [`run_vision_encoder`] with a test hook applied to each raw layer output
/// before removal. The hook must preserve the output's shape.
pub fn run_vision_encoder_with_hook<H>(
    layers: &[LayerParams],
    embed: &EmbeddingParams,
    schedule: &PromptSchedule,
    coupling: &CouplingParams,
    text_prompts: &TextPromptParams,
    image: &Tensor,
    mut hook: H,
) -> Result<Tensor>
where
    H: FnMut(usize, Tensor) -> Result<Tensor>,
{
    if layers.len() != schedule.num_layers() {
        return Err(Error::Schedule(format!(
            "schedule covers {} layers but the encoder has {}",
            schedule.num_layers(),
            layers.len()
        )));
    }
    let body0 = embed.patch_embed(image)?;
    let d_v = body0.shape()[1];
    let mut state = PromptState::empty(d_v);
    let mut body = body0;
    for (i, layer) in layers.iter().enumerate() {
        let mut step = |state: &mut PromptState, body: &mut Tensor| -> Result<()> {
            let ops = schedule.ops(i);
            debug_assert_eq!(state.rows(), schedule.carried_in(i));
            let new_prompts = if ops.add > 0 {
                coupling.couple(i, &text_prompts.coupling_row(i)?)?
            } else {
                Tensor::zeros(0, d_v)
            };
            let input = apply_add(&new_prompts, state, body)?;
            let out = encoder_layer_forward(layer, &input)?;
            let out = {
                let shape = out.shape();
                let hooked = hook(i, out)?;
                if hooked.shape() != shape {
                    return Err(Error::Contract(format!(
                        "layer hook changed the output shape from {:?} to {:?}",
                        shape,
                        hooked.shape()
                    )));
                }
                hooked
            };
            let retained = apply_remove(&out, ops.remove)?;
            let surviving = ops.add - ops.remove + state.rows();
            let (next_state, next_body) = apply_carry(&retained, surviving, ops.carry, d_v)?;
            *state = next_state;
            *body = next_body;
            Ok(())
        };
        step(&mut state, &mut body).map_err(|e| e.in_layer(i + 1))?;
    }
    body.slice_rows(0, 1)
}

/// Full text forward pass for one class-name token list. The first layer
/// sees `[prompt block; embedded template and class tokens]`; deeper
/// prompted layers have the block's rows replaced by their own learned
/// block before running. Returns the final-position row (`1 x d_t`).
pub fn run_text_encoder(
    layers: &[LayerParams],
    embed: &EmbeddingParams,
    text_prompts: &TextPromptParams,
    template_tokens: &[usize],
    class_tokens: &[usize],
) -> Result<Tensor> {
    let ids: Vec<usize> = template_tokens.iter().chain(class_tokens).copied().collect();
    if ids.is_empty() {
        return Err(Error::Data(String::from("text encoder needs at least one token")));
    }
    let embedded = embed.token_embed(&ids)?;
    let m = if text_prompts.depth() > 0 { text_prompts.rows_per_layer } else { 0 };
    let mut x = if m > 0 {
        Tensor::concat_rows(&[text_prompts.blocks[0].clone(), embedded])?
    } else {
        embedded
    };
    for (i, layer) in layers.iter().enumerate() {
        let step = |x: &mut Tensor| -> Result<()> {
            if i > 0 && i < text_prompts.depth() {
                let rest = x.slice_rows(m, x.rows())?;
                *x = Tensor::concat_rows(&[text_prompts.blocks[i].clone(), rest])?;
            }
            *x = encoder_layer_forward(layer, x)?;
            Ok(())
        };
        step(&mut x).map_err(|e| e.in_layer(i + 1))?;
    }
    let rows = x.rows();
    x.slice_rows(rows - 1, rows)
}
