//! Per-layer prompt scheduling: how many prompt rows each layer inserts,
//! removes, and carries forward.
//!
//! A schedule assigns every encoder layer a triple `(add, remove, carry)`:
//! `add` fresh prompt rows are prepended to the layer input, `remove` of
//! those same rows are dropped from the layer output, and `carry` decides
//! whether the surviving rows (plus anything carried from earlier layers)
//! stay attached for the next layer. The number of carried rows entering
//! layer `i` follows
//!
//! ```text
//! q[0] = 0
//! q[i+1] = if carry[i] { q[i] + add[i] - remove[i] } else { 0 }
//! ```
//!
//! Removal draws only from the block inserted at the same layer, never from
//! carried rows, so `remove <= add` is enforced at construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// One layer's prompt operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOps {
    /// Prompt rows inserted at the layer input.
    pub add: usize,
    /// Rows removed from the layer output, taken from the front of the
    /// newly inserted block.
    pub remove: usize,
    /// Whether surviving and previously carried rows stay attached.
    pub carry: bool,
}

impl LayerOps {
    pub const fn new(add: usize, remove: usize, carry: bool) -> Self {
        LayerOps { add, remove, carry }
    }

    /// No insertions, everything carried through.
    pub const NONE: LayerOps = LayerOps { add: 0, remove: 0, carry: true };
}

/// Validated per-layer schedule with the carried-row counts precomputed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSchedule {
    layers: Vec<LayerOps>,
    /// `carried_in[i]` is the number of carried rows entering layer `i`;
    /// one extra trailing entry holds the count left after the final layer.
    carried_in: Vec<usize>,
}

impl PromptSchedule {
    /// Validate a schedule and precompute the carry counts.
    ///
    /// Rejects empty schedules, `remove > add` at any layer, and insertions
    /// that do not form a contiguous prefix of the stack.
    pub fn new(layers: Vec<LayerOps>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Schedule(format!(
                "a schedule needs at least one layer, got {}",
                layers.len()
            )));
        }
        let mut first_unprompted = None;
        for (i, ops) in layers.iter().enumerate() {
            if ops.remove > ops.add {
                return Err(Error::Schedule(format!(
                    "layer {}: remove {} exceeds the {} newly inserted prompt rows; \
                     removal draws only from the block added at the same layer",
                    i + 1,
                    ops.remove,
                    ops.add
                )));
            }
            match (ops.add > 0, first_unprompted) {
                (false, None) => first_unprompted = Some(i),
                (true, Some(gap)) => {
                    return Err(Error::Schedule(format!(
                        "layer {} inserts prompts but layer {} does not; \
                         prompted layers must form a contiguous prefix",
                        i + 1,
                        gap + 1
                    )))
                }
                _ => {}
            }
        }
        let mut carried_in = Vec::with_capacity(layers.len() + 1);
        let mut q = 0;
        carried_in.push(q);
        for ops in &layers {
            q = if ops.carry { q + ops.add - ops.remove } else { 0 };
            carried_in.push(q);
        }
        Ok(PromptSchedule { layers, carried_in })
    }

    /// All layers `(0, 0, carry)`: a plain encoder without prompts.
    pub fn plain(num_layers: usize) -> Result<Self> {
        PromptSchedule::new(vec![LayerOps::NONE; num_layers])
    }

    /// Fresh prompts at every layer, discarded at the layer output:
    /// each layer is `(p, p, false)`, so nothing accumulates.
    pub fn deep_vpt(num_layers: usize, p: usize) -> Result<Self> {
        PromptSchedule::new(vec![LayerOps::new(p, p, false); num_layers])
    }

    /// Prompts inserted once at the first layer and kept until the end:
    /// layer one is `(p, 0, true)`, the rest `(0, 0, true)`.
    pub fn shallow(num_layers: usize, p: usize) -> Result<Self> {
        let mut layers = vec![LayerOps::NONE; num_layers];
        layers[0] = LayerOps::new(p, 0, true);
        PromptSchedule::new(layers)
    }

    /// The add/remove/carry pattern used throughout this crate: the first
    /// `depth` layers each run `(add, remove, true)`, later layers leave the
    /// accumulated rows attached.
    pub fn mpl(num_layers: usize, add: usize, remove: usize, depth: usize) -> Result<Self> {
        if depth > num_layers {
            return Err(Error::Schedule(format!(
                "prompt depth {depth} exceeds the {num_layers} encoder layers"
            )));
        }
        let mut layers = vec![LayerOps::NONE; num_layers];
        for ops in layers.iter_mut().take(depth) {
            *ops = LayerOps::new(add, remove, true);
        }
        PromptSchedule::new(layers)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Operations of layer `i` (0-based).
    pub fn ops(&self, layer: usize) -> LayerOps {
        self.layers[layer]
    }

    pub fn layers(&self) -> &[LayerOps] {
        &self.layers
    }

    /// Carried rows entering layer `i` (0-based).
    pub fn carried_in(&self, layer: usize) -> usize {
        self.carried_in[layer]
    }

    /// Rows still attached after the final layer.
    pub fn carried_out_final(&self) -> usize {
        *self.carried_in.last().unwrap()
    }

    /// Number of leading layers that insert prompts.
    pub fn prompt_depth(&self) -> usize {
        self.layers.iter().take_while(|ops| ops.add > 0).count()
    }

    /// Largest per-layer insertion, sizing the coupling outputs.
    pub fn max_add(&self) -> usize {
        self.layers.iter().map(|ops| ops.add).max().unwrap_or(0)
    }

    /// Token rows processed by each layer for `n_patches` image patches and
    /// one class row: `add + carried_in + 1 + n_patches`.
    pub fn context_lengths(&self, n_patches: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, ops)| ops.add + self.carried_in[i] + 1 + n_patches)
            .collect()
    }

    /// Matmul FLOP estimate per layer; see [`ContextProfile`].
    pub fn profile(&self, n_patches: usize, d_model: usize) -> ContextProfile {
        let per_layer: Vec<LayerProfile> = self
            .context_lengths(n_patches)
            .into_iter()
            .enumerate()
            .map(|(i, n)| LayerProfile {
                layer: i,
                context_len: n,
                flops: layer_flops(n, d_model),
            })
            .collect();
        let total_flops = per_layer.iter().map(|l| l.flops).sum();
        let peak_context_len = per_layer.iter().map(|l| l.context_len).max().unwrap_or(0);
        ContextProfile { per_layer, total_flops, peak_context_len }
    }
}

/// Per-layer cost entry of a [`ContextProfile`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerProfile {
    /// 0-based layer index.
    pub layer: usize,
    /// Rows entering the layer.
    pub context_len: usize,
    /// Matmul FLOPs for the layer at this context length.
    pub flops: u64,
}

/// Context lengths and matmul FLOPs implied by a schedule.
///
/// Costs count the six large matrix products of a pre-norm block at two
/// FLOPs per multiply-add: the four `d x d` projections and the two MLP
/// products give `24 n d^2`, the two attention products `4 n^2 d`.
/// Normalization, softmax, and bias adds are omitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextProfile {
    pub per_layer: Vec<LayerProfile>,
    pub total_flops: u64,
    pub peak_context_len: usize,
}

/// `4 n^2 d + 24 n d^2` with the counting convention above.
pub fn layer_flops(context_len: usize, d_model: usize) -> u64 {
    let n = context_len as u64;
    let d = d_model as u64;
    4 * n * n * d + 24 * n * d * d
}
