//! Toy decoder-only multimodal transformer.
//!
//! The sequence is a visual-patch prefix followed by question and answer
//! text. The visual prefix attends bidirectionally among itself; text
//! positions are causal and see the whole prefix. Per-layer attention
//! probabilities are exposed post-softmax so they can be traced and patched
//! in place before value aggregation.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VifError};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, TensorId};

const MODULE: &str = "backbone";
pub const LN_EPS: f64 = 1e-5;

// ── Domain types ─────────────────────────────────────────────────────

/// Index spans for visual / question / answer tokens plus the visual grid
/// shape. Spans are contiguous, ordered visual < question < answer, and
/// cover the sequence; the answer span may be empty at inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityLayout {
    pub visual: (usize, usize),
    pub question: (usize, usize),
    pub answer: (usize, usize),
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ModalityLayout {
    pub fn new(
        n_visual: usize,
        n_question: usize,
        n_answer: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let l = ModalityLayout {
            visual: (0, n_visual),
            question: (n_visual, n_visual + n_question),
            answer: (n_visual + n_question, n_visual + n_question + n_answer),
            grid_h,
            grid_w,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual.0 != 0
            || self.visual.1 != self.question.0
            || self.question.1 != self.answer.0
            || self.visual.1 < self.visual.0
            || self.question.1 < self.question.0
            || self.answer.1 < self.answer.0
        {
            return Err(VifError::layout(
                MODULE,
                "spans must be contiguous and ordered visual < question < answer",
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(VifError::layout(MODULE, "grid dims must be positive"));
        }
        if self.grid_h * self.grid_w != self.n_visual() {
            return Err(VifError::layout(
                MODULE,
                format!(
                    "grid {}x{} does not match visual span length {}",
                    self.grid_h,
                    self.grid_w,
                    self.n_visual()
                ),
            ));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.answer.1
    }

    pub fn n_visual(&self) -> usize {
        self.visual.1 - self.visual.0
    }

    pub fn n_question(&self) -> usize {
        self.question.1 - self.question.0
    }

    pub fn n_answer(&self) -> usize {
        self.answer.1 - self.answer.0
    }

    pub fn is_visual(&self, pos: usize) -> bool {
        pos >= self.visual.0 && pos < self.visual.1
    }

    /// (row, col) of a visual position on the grid.
    pub fn grid_coords(&self, pos: usize) -> (usize, usize) {
        let i = pos - self.visual.0;
        (i / self.grid_w, i % self.grid_w)
    }

    /// Same layout with the answer span removed (inference-time view).
    pub fn without_answer(&self) -> ModalityLayout {
        ModalityLayout {
            visual: self.visual,
            question: self.question,
            answer: (self.question.1, self.question.1),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(VifError::config(
                MODULE,
                format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(VifError::config(MODULE, "layers, vocab and max_seq must be positive"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer, per-head post-softmax attention probabilities plus the
/// visibility mask they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub n_heads: usize,
    pub t: usize,
    /// `[n_heads, T, T]`, row-major.
    pub probs: Vec<f64>,
    /// `[T, T]` visibility; `false` positions hold exactly 0 probability.
    pub mask: Vec<bool>,
}

impl AttentionTensor {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.probs[h * self.t * self.t..(h + 1) * self.t * self.t]
    }

    /// Check row-stochasticity over visible positions and exact zeros at
    /// masked ones.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.probs.len() != self.n_heads * self.t * self.t
            || self.mask.len() != self.t * self.t
        {
            return Err(VifError::shape(MODULE, "attention tensor dims inconsistent"));
        }
        for h in 0..self.n_heads {
            let hp = self.head(h);
            for r in 0..self.t {
                let row = &hp[r * self.t..(r + 1) * self.t];
                let mrow = &self.mask[r * self.t..(r + 1) * self.t];
                let mut s = 0.0;
                for (v, m) in row.iter().zip(mrow.iter()) {
                    if *m {
                        if *v < 0.0 {
                            return Err(VifError::contract(
                                MODULE,
                                format!("negative attention probability at head {h} row {r}"),
                            ));
                        }
                        s += v;
                    } else if *v != 0.0 {
                        return Err(VifError::contract(
                            MODULE,
                            format!("nonzero probability at masked position, head {h} row {r}"),
                        ));
                    }
                }
                if (s - 1.0).abs() > tol {
                    return Err(VifError::contract(
                        MODULE,
                        format!("head {h} row {r} sums to {s}, expected 1"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Hidden states and attention recorded for hooked layers of one item.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub entries: std::collections::BTreeMap<usize, LayerEntry>,
}

#[derive(Debug, Clone)]
pub struct LayerEntry {
    /// Block output, `[T, d_model]`.
    pub hidden: Vec<f64>,
    pub attention: AttentionTensor,
}

/// Visibility: everyone sees the visual prefix; text is causal.
pub fn visibility_mask(layout: &ModalityLayout) -> Vec<bool> {
    let t = layout.seq_len();
    let nv = layout.n_visual();
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = j < nv || j <= i;
        }
    }
    m
}

// ── Parameters ───────────────────────────────────────────────────────

/// Register all backbone parameters under the `backbone.` prefix.
pub fn register_params(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let w_std = 1.0 / (d as f64).sqrt();
    store.add_normal("backbone.tok_embed", vec![cfg.vocab_size, d], 0.02, rng)?;
    store.add_normal("backbone.pos_embed", vec![cfg.max_seq, d], 0.02, rng)?;
    store.add_normal("backbone.grid_row", vec![cfg.grid_h, d], 0.02, rng)?;
    store.add_normal("backbone.grid_col", vec![cfg.grid_w, d], 0.02, rng)?;
    for i in 0..cfg.n_layers {
        let p = format!("backbone.layer{i}");
        store.add_full(&format!("{p}.ln1.gamma"), vec![d], 1.0)?;
        store.add_zeros(&format!("{p}.ln1.beta"), vec![d])?;
        store.add_normal(&format!("{p}.attn.wq"), vec![d, d], w_std, rng)?;
        store.add_normal(&format!("{p}.attn.wk"), vec![d, d], w_std, rng)?;
        store.add_normal(&format!("{p}.attn.wv"), vec![d, d], w_std, rng)?;
        store.add_normal(&format!("{p}.attn.wo"), vec![d, d], w_std, rng)?;
        store.add_full(&format!("{p}.ln2.gamma"), vec![d], 1.0)?;
        store.add_zeros(&format!("{p}.ln2.beta"), vec![d])?;
        store.add_normal(&format!("{p}.ffn.w1"), vec![d, 4 * d], w_std, rng)?;
        store.add_zeros(&format!("{p}.ffn.b1"), vec![4 * d])?;
        store.add_normal(&format!("{p}.ffn.w2"), vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt(), rng)?;
        store.add_zeros(&format!("{p}.ffn.b2"), vec![d])?;
    }
    store.add_full("backbone.final_ln.gamma", vec![d], 1.0)?;
    store.add_zeros("backbone.final_ln.beta", vec![d])?;
    // Zero readout: initial logits are uniform over the vocabulary.
    store.add_zeros("backbone.readout", vec![d, cfg.vocab_size])?;
    Ok(())
}

// ── Forward hooks ────────────────────────────────────────────────────

/// Batch geometry handed to hooks.
pub struct BatchCtx<'a> {
    pub n_items: usize,
    pub t: usize,
    pub layout: &'a ModalityLayout,
    pub mask: Arc<Vec<bool>>,
}

/// Graph-level hooks: observe hidden states, rewrite them, or patch
/// per-head attention probabilities before value aggregation. The binder is
/// passed through so hooks can bind their own parameters mid-forward.
pub trait LayerHooks {
    /// Replace the hidden state entering block `layer` (whole batch).
    fn pre_block(
        &mut self,
        _g: &mut Graph,
        _binder: &mut Binder,
        _ctx: &BatchCtx,
        _layer: usize,
        hidden: TensorId,
    ) -> Result<TensorId> {
        Ok(hidden)
    }

    /// Observe the output of block `layer` (whole batch).
    fn post_block(
        &mut self,
        _g: &mut Graph,
        _binder: &mut Binder,
        _ctx: &BatchCtx,
        _layer: usize,
        _hidden: TensorId,
    ) -> Result<()> {
        Ok(())
    }

    fn wants_patch(&self, _layer: usize) -> bool {
        false
    }

    /// Patch one item's `[n_heads, T, T]` probabilities. The output must
    /// satisfy the attention tensor invariants; the backbone re-checks them.
    fn patch(
        &mut self,
        _g: &mut Graph,
        _binder: &mut Binder,
        _ctx: &BatchCtx,
        _layer: usize,
        _item: usize,
        probs: TensorId,
    ) -> Result<TensorId> {
        Ok(probs)
    }
}

/// No-op hooks.
pub struct NoHooks;
impl LayerHooks for NoHooks {}

/// Data-level patch callback: maps a full per-layer attention tensor to a
/// replacement (single-item forward only).
pub type DataPatchFn<'p> = &'p mut dyn FnMut(usize, &AttentionTensor) -> Result<AttentionTensor>;

pub struct BatchForward {
    pub logits: TensorId,
    pub traces: Vec<LayerTrace>,
}

// ── The model ────────────────────────────────────────────────────────

pub struct Backbone<'a> {
    pub cfg: &'a BackboneConfig,
    pub store: &'a ParamStore,
}

impl<'a> Backbone<'a> {
    pub fn new(cfg: &'a BackboneConfig, store: &'a ParamStore) -> Self {
        Backbone { cfg, store }
    }

    fn check_tokens(&self, tokens: &[usize], layout: &ModalityLayout) -> Result<()> {
        layout.validate()?;
        if tokens.len() != layout.seq_len() {
            return Err(VifError::layout(
                MODULE,
                format!("{} tokens vs layout length {}", tokens.len(), layout.seq_len()),
            ));
        }
        if layout.seq_len() > self.cfg.max_seq {
            return Err(VifError::layout(MODULE, "sequence longer than max_seq"));
        }
        if let Some(bad) = tokens.iter().find(|t| **t >= self.cfg.vocab_size) {
            return Err(VifError::vocab(
                MODULE,
                format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            ));
        }
        Ok(())
    }

    /// Token + positional + (for visual positions) grid embeddings,
    /// `[n_items * T, d]`.
    pub fn build_embeddings(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        items: &[&[usize]],
        layout: &ModalityLayout,
    ) -> Result<TensorId> {
        let t = layout.seq_len();
        let d = self.cfg.d_model;
        let tok_tbl = binder.bind(g, "backbone.tok_embed")?;
        let pos_tbl = binder.bind(g, "backbone.pos_embed")?;
        let row_tbl = binder.bind(g, "backbone.grid_row")?;
        let col_tbl = binder.bind(g, "backbone.grid_col")?;

        let all_ids: Vec<usize> = items.iter().flat_map(|it| it.iter().copied()).collect();
        let tok = g.gather_rows(tok_tbl, &all_ids)?;

        let pos_ids: Vec<usize> = (0..items.len()).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(pos_tbl, &pos_ids)?;
        let h = g.add(tok, pos)?;

        let nv = layout.n_visual();
        if nv == 0 {
            return Ok(h);
        }
        let rows: Vec<usize> =
            (layout.visual.0..layout.visual.1).map(|p| layout.grid_coords(p).0).collect();
        let cols: Vec<usize> =
            (layout.visual.0..layout.visual.1).map(|p| layout.grid_coords(p).1).collect();
        let mut parts: Vec<TensorId> = Vec::with_capacity(items.len() * 2);
        let zeros = Tensor::zeros(vec![t - nv, d]);
        for _ in 0..items.len() {
            let r = g.gather_rows(row_tbl, &rows)?;
            let c = g.gather_rows(col_tbl, &cols)?;
            let grid = g.add(r, c)?;
            parts.push(grid);
            if t > nv {
                parts.push(g.leaf(zeros.clone()));
            }
        }
        let grid_full = g.concat0(&parts)?;
        g.add(h, grid_full)
    }

    /// Full batched forward. All items share one layout. Hooks may observe
    /// or patch; trace entries are recorded for `trace_layers`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        items: &[&[usize]],
        layout: &ModalityLayout,
        trace_layers: &BTreeSet<usize>,
        hooks: &mut dyn LayerHooks,
        data_patch_layers: &BTreeSet<usize>,
        mut data_patch: Option<DataPatchFn>,
    ) -> Result<BatchForward> {
        if items.is_empty() {
            return Err(VifError::contract(MODULE, "forward on an empty batch"));
        }
        for it in items {
            self.check_tokens(it, layout)?;
        }
        if let Some(l) = trace_layers.iter().chain(data_patch_layers.iter()).max() {
            if *l >= self.cfg.n_layers {
                return Err(VifError::contract(
                    MODULE,
                    format!("hooked layer {l} outside {} layers", self.cfg.n_layers),
                ));
            }
        }
        if data_patch.is_some() && items.len() != 1 {
            return Err(VifError::contract(MODULE, "data-level patching is single-item only"));
        }

        let t = layout.seq_len();
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = Arc::new(visibility_mask(layout));
        let ctx = BatchCtx { n_items: items.len(), t, layout, mask: mask.clone() };

        let mut traces: Vec<LayerTrace> = items.iter().map(|_| LayerTrace::default()).collect();
        let mut x = self.build_embeddings(g, binder, items, layout)?;

        for layer in 0..self.cfg.n_layers {
            x = hooks.pre_block(g, binder, &ctx, layer, x)?;
            let p = format!("backbone.layer{layer}");
            let ln1_g = binder.bind(g, &format!("{p}.ln1.gamma"))?;
            let ln1_b = binder.bind(g, &format!("{p}.ln1.beta"))?;
            let wq = binder.bind(g, &format!("{p}.attn.wq"))?;
            let wk = binder.bind(g, &format!("{p}.attn.wk"))?;
            let wv = binder.bind(g, &format!("{p}.attn.wv"))?;
            let wo = binder.bind(g, &format!("{p}.attn.wo"))?;

            let x_ln = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = g.matmul(x_ln, wq)?;
            let k = g.matmul(x_ln, wk)?;
            let v = g.matmul(x_ln, wv)?;

            let graph_patch = hooks.wants_patch(layer);
            let want_trace = trace_layers.contains(&layer);
            let want_data_patch = data_patch.is_some() && data_patch_layers.contains(&layer);

            let mut attn_parts: Vec<TensorId> = Vec::with_capacity(items.len());
            for b in 0..items.len() {
                let (r0, r1) = (b * t, (b + 1) * t);
                let qb = g.slice_rows(q, r0, r1)?;
                let kb = g.slice_rows(k, r0, r1)?;
                let vb = g.slice_rows(v, r0, r1)?;

                let scores = g.head_scores(qb, kb, n_heads, scale)?;
                let mut probs = g.masked_softmax_lastdim(scores, mask.clone())?;

                if graph_patch {
                    let patched = hooks.patch(g, binder, &ctx, layer, b, probs)?;
                    if patched != probs {
                        validate_head_rows(g.data(patched), n_heads, t, &mask).map_err(|e| {
                            VifError::contract(
                                MODULE,
                                format!("patch at layer {layer} broke invariants: {e}"),
                            )
                        })?;
                    }
                    probs = patched;
                }
                if want_data_patch {
                    let at = self.collect_attention(g, probs, t, &mask);
                    let cb = data_patch.as_mut().unwrap();
                    let new = cb(layer, &at)?;
                    new.validate(1e-6).map_err(|e| {
                        VifError::contract(
                            MODULE,
                            format!("data patch at layer {layer} broke invariants: {e}"),
                        )
                    })?;
                    if new != at {
                        probs = g.constant(&new.probs, &[n_heads, t, t])?;
                    }
                }
                if want_trace {
                    let at = self.collect_attention(g, probs, t, &mask);
                    traces[b]
                        .entries
                        .insert(layer, LayerEntry { hidden: Vec::new(), attention: at });
                }

                let merged = g.head_context(probs, vb, n_heads)?;
                attn_parts.push(g.matmul(merged, wo)?);
            }
            let attn_out = g.concat0(&attn_parts)?;
            x = g.add(x, attn_out)?;

            let ln2_g = binder.bind(g, &format!("{p}.ln2.gamma"))?;
            let ln2_b = binder.bind(g, &format!("{p}.ln2.beta"))?;
            let w1 = binder.bind(g, &format!("{p}.ffn.w1"))?;
            let b1 = binder.bind(g, &format!("{p}.ffn.b1"))?;
            let w2 = binder.bind(g, &format!("{p}.ffn.w2"))?;
            let b2 = binder.bind(g, &format!("{p}.ffn.b2"))?;
            let x_ln2 = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let h1 = g.matmul(x_ln2, w1)?;
            let h1 = g.add(h1, b1)?;
            let act = g.gelu(h1)?;
            let h2 = g.matmul(act, w2)?;
            let h2 = g.add(h2, b2)?;
            x = g.add(x, h2)?;

            hooks.post_block(g, binder, &ctx, layer, x)?;
            if trace_layers.contains(&layer) {
                let xd = g.data(x);
                for (b, tr) in traces.iter_mut().enumerate() {
                    if let Some(e) = tr.entries.get_mut(&layer) {
                        e.hidden = xd[b * t * d..(b + 1) * t * d].to_vec();
                    }
                }
            }
        }

        let fg = binder.bind(g, "backbone.final_ln.gamma")?;
        let fb = binder.bind(g, "backbone.final_ln.beta")?;
        let ro = binder.bind(g, "backbone.readout")?;
        let x_ln = g.layer_norm(x, fg, fb, LN_EPS)?;
        let logits = g.matmul(x_ln, ro)?;
        Ok(BatchForward { logits, traces })
    }

    fn collect_attention(
        &self,
        g: &Graph,
        probs: TensorId,
        t: usize,
        mask: &Arc<Vec<bool>>,
    ) -> AttentionTensor {
        let data = g.data(probs);
        AttentionTensor {
            n_heads: data.len() / (t * t),
            t,
            probs: data.to_vec(),
            mask: mask.as_ref().clone(),
        }
    }

    /// Single-item forward without gradients. `patch`, when given, rewrites
    /// whole attention tensors at `patch_layers`.
    pub fn forward(
        &self,
        tokens: &[usize],
        layout: &ModalityLayout,
        trace_layers: &BTreeSet<usize>,
        patch_layers: &BTreeSet<usize>,
        patch: Option<DataPatchFn>,
    ) -> Result<(Tensor, LayerTrace)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(self.store, false);
        let out = self.forward_batch(
            &mut g,
            &mut binder,
            &[tokens],
            layout,
            trace_layers,
            &mut NoHooks,
            patch_layers,
            patch,
        )?;
        let logits = g.tensor(out.logits).clone();
        Ok((logits, out.traces.into_iter().next().unwrap()))
    }

    /// Attention probabilities a given layer would produce from `hidden`
    /// (the state entering that layer's block) under `mask`.
    pub fn attention_probs(
        &self,
        hidden: &Tensor,
        layer: usize,
        mask: &[bool],
    ) -> Result<AttentionTensor> {
        if layer >= self.cfg.n_layers {
            return Err(VifError::contract(
                MODULE,
                format!("layer {layer} outside {} layers", self.cfg.n_layers),
            ));
        }
        let (t, d) = match hidden.shape.as_slice() {
            &[t, d] => (t, d),
            _ => return Err(VifError::shape(MODULE, "hidden must be [T, d_model]")),
        };
        if d != self.cfg.d_model {
            return Err(VifError::shape(MODULE, "hidden width differs from d_model"));
        }
        if mask.len() != t * t {
            return Err(VifError::shape(MODULE, "mask must be [T, T]"));
        }
        let mask = Arc::new(mask.to_vec());
        let mut g = Graph::new();
        let mut binder = Binder::new(self.store, false);
        let p = format!("backbone.layer{layer}");
        let ln1_g = binder.bind(&mut g, &format!("{p}.ln1.gamma"))?;
        let ln1_b = binder.bind(&mut g, &format!("{p}.ln1.beta"))?;
        let wq = binder.bind(&mut g, &format!("{p}.attn.wq"))?;
        let wk = binder.bind(&mut g, &format!("{p}.attn.wk"))?;
        let x = g.leaf(hidden.clone());
        let x_ln = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = g.matmul(x_ln, wq)?;
        let k = g.matmul(x_ln, wk)?;
        let scale = 1.0 / (self.cfg.d_head() as f64).sqrt();
        let scores = g.head_scores(q, k, self.cfg.n_heads, scale)?;
        let probs = g.masked_softmax_lastdim(scores, mask.clone())?;
        Ok(self.collect_attention(&g, probs, t, &mask))
    }
}

/// Row-stochasticity check on raw `[H, T, T]` probability data.
fn validate_head_rows(data: &[f64], n_heads: usize, t: usize, mask: &[bool]) -> Result<()> {
    for h in 0..n_heads {
        for r in 0..t {
            let row = &data[h * t * t + r * t..h * t * t + (r + 1) * t];
            let mrow = &mask[r * t..(r + 1) * t];
            let mut s = 0.0;
            for (v, m) in row.iter().zip(mrow.iter()) {
                if *m {
                    if *v < 0.0 {
                        return Err(VifError::contract(
                            MODULE,
                            format!("negative entry in head {h} row {r}"),
                        ));
                    }
                    s += v;
                } else if *v != 0.0 {
                    return Err(VifError::contract(
                        MODULE,
                        format!("nonzero masked entry in head {h} row {r}"),
                    ));
                }
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(VifError::contract(MODULE, format!("head {h} row {r} sums to {s}")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 24,
            max_seq: 16,
            grid_h: 2,
            grid_w: 2,
        }
    }

    fn toy_model(seed: u64) -> (BackboneConfig, ParamStore) {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_params(&mut store, &cfg, &mut rng).unwrap();
        (cfg, store)
    }

    fn toy_layout() -> ModalityLayout {
        ModalityLayout::new(4, 3, 1, 2, 2).unwrap()
    }

    fn toy_tokens() -> Vec<usize> {
        vec![1, 2, 3, 4, 10, 11, 12, 20]
    }

    #[test]
    fn layout_rejects_mismatched_grid() {
        assert!(ModalityLayout::new(5, 2, 1, 2, 2).is_err());
        assert!(ModalityLayout::new(4, 2, 1, 0, 4).is_err());
    }

    #[test]
    fn embeddings_have_expected_shape_and_positional_variation() {
        let (cfg, store) = toy_model(1);
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        // Same token everywhere: embeddings differ only by positional terms.
        let tokens = vec![5usize; 8];
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let e = bb.build_embeddings(&mut g, &mut binder, &[&tokens], &layout).unwrap();
        assert_eq!(g.shape(e), &[8, 16]);
        let d = 16;
        let data = g.data(e);
        let tok_row = &store.values(store.idx("backbone.tok_embed").unwrap())[5 * d..6 * d];
        let pos = store.values(store.idx("backbone.pos_embed").unwrap());
        // Text position 5 (non-visual): exactly token + positional.
        for j in 0..d {
            let expect = tok_row[j] + pos[5 * d + j];
            assert!((data[5 * d + j] - expect).abs() < 1e-15);
        }
        // Two positions with the same token differ (positional terms).
        assert_ne!(&data[0..d], &data[d..2 * d]);
    }

    #[test]
    fn zeroed_positional_tables_reduce_embed_to_lookup() {
        let (cfg, mut store) = toy_model(2);
        for n in ["backbone.pos_embed", "backbone.grid_row", "backbone.grid_col"] {
            let i = store.idx(n).unwrap();
            store.values_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let tokens = toy_tokens();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let e = bb.build_embeddings(&mut g, &mut binder, &[&tokens], &layout).unwrap();
        let d = 16;
        let tok = store.values(store.idx("backbone.tok_embed").unwrap());
        for (p, id) in tokens.iter().enumerate() {
            assert_eq!(&g.data(e)[p * d..(p + 1) * d], &tok[id * d..(id + 1) * d]);
        }
    }

    #[test]
    fn out_of_vocab_token_is_vocab_error() {
        let (cfg, store) = toy_model(3);
        let bb = Backbone::new(&cfg, &store);
        let mut tokens = toy_tokens();
        tokens[6] = 99;
        let r = bb.forward(&tokens, &toy_layout(), &BTreeSet::new(), &BTreeSet::new(), None);
        assert!(matches!(r, Err(VifError::Vocab(_))));
    }

    #[test]
    fn single_token_sequence_attends_to_itself() {
        let cfg = BackboneConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            vocab_size: 8,
            max_seq: 4,
            grid_h: 1,
            grid_w: 1,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        register_params(&mut store, &cfg, &mut rng).unwrap();
        let bb = Backbone::new(&cfg, &store);
        // One-token layout: no visual, single question token.
        let layout = ModalityLayout {
            visual: (0, 0),
            question: (0, 1),
            answer: (1, 1),
            grid_h: 1,
            grid_w: 1,
        };
        // grid 1x1 does not match 0 visual tokens, so build mask directly.
        let mask = vec![true];
        let hidden = Tensor::new(vec![0.3; 16], vec![1, 16]).unwrap();
        let at = bb.attention_probs(&hidden, 0, &mask).unwrap();
        for h in 0..2 {
            assert_eq!(at.head(h), &[1.0]);
        }
        let _ = layout;
    }

    #[test]
    fn zero_qk_weights_give_uniform_attention_over_visible() {
        let (cfg, mut store) = toy_model(5);
        for l in 0..cfg.n_layers {
            for w in ["wq", "wk"] {
                let i = store.idx(&format!("backbone.layer{l}.attn.{w}")).unwrap();
                store.values_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let (_logits, trace) = bb
            .forward(&toy_tokens(), &layout, &BTreeSet::from([0, 1]), &BTreeSet::new(), None)
            .unwrap();
        let t = layout.seq_len();
        for entry in trace.entries.values() {
            let at = &entry.attention;
            for h in 0..at.n_heads {
                let hp = at.head(h);
                for r in 0..t {
                    let vis: Vec<usize> =
                        (0..t).filter(|j| at.mask[r * t + j]).collect();
                    let u = 1.0 / vis.len() as f64;
                    for j in vis {
                        assert!((hp[r * t + j] - u).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (cfg, store) = toy_model(6);
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let (_l, trace) = bb
            .forward(&toy_tokens(), &layout, &BTreeSet::from([0, 1]), &BTreeSet::new(), None)
            .unwrap();
        for e in trace.entries.values() {
            e.attention.validate(1e-9).unwrap();
        }
    }

    #[test]
    fn determinism_same_seed_same_logits() {
        let run = || {
            let (cfg, store) = toy_model(7);
            let bb = Backbone::new(&cfg, &store);
            let (l, _) = bb
                .forward(&toy_tokens(), &toy_layout(), &BTreeSet::new(), &BTreeSet::new(), None)
                .unwrap();
            l.data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identity_patch_is_bit_identical_and_empty_hooks_trace_empty() {
        let (cfg, store) = toy_model(8);
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let (plain, trace) = bb
            .forward(&toy_tokens(), &layout, &BTreeSet::new(), &BTreeSet::new(), None)
            .unwrap();
        assert!(trace.entries.is_empty());
        let mut identity = |_l: usize, at: &AttentionTensor| Ok(at.clone());
        let (patched, _) = bb
            .forward(
                &toy_tokens(),
                &layout,
                &BTreeSet::new(),
                &BTreeSet::from([1]),
                Some(&mut identity),
            )
            .unwrap();
        assert_eq!(plain.data, patched.data);
    }

    #[test]
    fn invalid_patch_output_is_rejected() {
        let (cfg, store) = toy_model(9);
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let mut bad = |_l: usize, at: &AttentionTensor| {
            let mut out = at.clone();
            out.probs[0] += 0.5; // row no longer sums to 1
            Ok(out)
        };
        let r = bb.forward(
            &toy_tokens(),
            &layout,
            &BTreeSet::new(),
            &BTreeSet::from([0]),
            Some(&mut bad),
        );
        assert!(matches!(r, Err(VifError::Contract(_))));
    }

    #[test]
    fn causality_no_gradient_from_future_text_positions() {
        // Distinct tokens everywhere; differentiate the summed logits of a
        // middle text row w.r.t. the token table and check rows of strictly
        // later text tokens got no gradient.
        let (cfg, mut store) = toy_model(10);
        {
            // The readout starts zeroed, which would null every upstream
            // gradient; give it generic values so the probe is meaningful.
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let ri = store.idx("backbone.readout").unwrap();
            store
                .values_mut(ri)
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let bb = Backbone::new(&cfg, &store);
        let layout = toy_layout();
        let tokens = vec![0usize, 1, 2, 3, 8, 9, 10, 11];
        let probe = 5; // text position; positions 6, 7 are later text
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, true);
        let out = bb
            .forward_batch(
                &mut g,
                &mut binder,
                &[&tokens],
                &layout,
                &BTreeSet::new(),
                &mut NoHooks,
                &BTreeSet::new(),
                None,
            )
            .unwrap();
        let row = g.slice_rows(out.logits, probe, probe + 1).unwrap();
        let root = g.sum(row).unwrap();
        g.backward(root).unwrap();
        let tok_id = binder.bind(&mut g, "backbone.tok_embed").unwrap();
        let grad = g.grad(tok_id).unwrap();
        let d = cfg.d_model;
        for later in [6usize, 7] {
            let row = &grad[tokens[later] * d..(tokens[later] + 1) * d];
            assert!(row.iter().all(|v| *v == 0.0), "position {later} leaked into {probe}");
        }
        // Sanity: an earlier visible token does receive gradient.
        let row = &grad[tokens[4] * d..(tokens[4] + 1) * d];
        assert!(row.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn attention_invariants_hold_over_randomized_trials() {
        // 1000 random forwards across seeds and layouts.
        let mut rng = rand::rngs::StdRng::seed_from_u64(42);
        let mut done = 0;
        while done < 1000 {
            let (cfg, store) = toy_model(rng.random_range(0..u64::MAX));
            let bb = Backbone::new(&cfg, &store);
            let n_ans = rng.random_range(0..3usize);
            let layout = ModalityLayout::new(4, rng.random_range(1..4), n_ans, 2, 2).unwrap();
            let tokens: Vec<usize> =
                (0..layout.seq_len()).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let (_l, tr) = bb
                .forward(&tokens, &layout, &BTreeSet::from([0, 1]), &BTreeSet::new(), None)
                .unwrap();
            for e in tr.entries.values() {
                e.attention.validate(1e-9).unwrap();
                done += 1;
            }
        }
    }
}
