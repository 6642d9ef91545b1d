//! Focal-bias injection into deep-layer attention.
//!
//! A decoded importance map over the visual grid becomes a length-T key
//! bias (zero off the visual span), is added to a post-softmax attention
//! matrix scaled by alpha, masked back to the visible region, and
//! row-renormalized so every row remains a distribution:
//!
//!   inj = Norm( (flow + alpha * bias) ⊙ 1_visible )
//!
//! The bias is added identically to every query row and every head.
//! Extraction-to-injection layer pairs follow a selective patching plan;
//! each pair owns its own attender parameters.

use crate::backbone::{AttentionTensor, ModalityLayout};
use crate::error::{Result, VifError};
use crate::tensor::{Graph, TensorId};

const MODULE: &str = "flow-inject";
pub const DEFAULT_ALPHA: f64 = 0.5;

/// The four extraction layers and their injection targets used on 32-layer
/// models; shallower models get a proportional remap.
const DEEP_PLAN_32: [(usize, usize); 4] = [(11, 25), (13, 27), (15, 29), (17, 31)];

// ── Ablation modes ───────────────────────────────────────────────────

/// Training/injection variants. `Full` is the reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    /// No answer-posterior supervision: prior-only sampling, KL term off.
    NoAp,
    /// No sparsity regularization (gamma = 0).
    NoSp,
    /// Bias spread over the whole key axis instead of visual columns only.
    FullSeq,
    /// Extraction at the injection layer itself (deep-only pairs).
    DeepOnly,
    /// Residual-add middle-layer visual hidden states into deep layers
    /// instead of touching attention.
    MidDeepFeature,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::NoAp,
        AblationMode::NoSp,
        AblationMode::FullSeq,
        AblationMode::DeepOnly,
        AblationMode::MidDeepFeature,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no-ap" => Ok(AblationMode::NoAp),
            "no-sp" => Ok(AblationMode::NoSp),
            "full-seq" => Ok(AblationMode::FullSeq),
            "deep-only" => Ok(AblationMode::DeepOnly),
            "mid-deep-feature" => Ok(AblationMode::MidDeepFeature),
            _ => Err(VifError::config(MODULE, format!("unknown ablation mode '{s}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoAp => "no-ap",
            AblationMode::NoSp => "no-sp",
            AblationMode::FullSeq => "full-seq",
            AblationMode::DeepOnly => "deep-only",
            AblationMode::MidDeepFeature => "mid-deep-feature",
        }
    }

    /// Whether the posterior branch (and KL) is trained in this mode.
    pub fn uses_posterior(&self) -> bool {
        !matches!(self, AblationMode::NoAp | AblationMode::MidDeepFeature)
    }

    /// Whether the attender/decoder pipeline runs at all.
    pub fn uses_attender(&self) -> bool {
        !matches!(self, AblationMode::MidDeepFeature)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── Patch plan ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPair {
    pub extract: usize,
    pub inject: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerPatchPlan {
    pub pairs: Vec<PatchPair>,
}

impl LayerPatchPlan {
    pub fn empty() -> Self {
        LayerPatchPlan { pairs: Vec::new() }
    }

    /// Default plan for a model depth: the 32-layer plan verbatim, the
    /// {2,3} -> {6,7} pairing for the 8-layer toy depth, and a proportional
    /// remap elsewhere (middle extraction into deep injection preserved).
    pub fn default_for_depth(n_layers: usize) -> Self {
        let pairs: Vec<PatchPair> = match n_layers {
            32 => DEEP_PLAN_32
                .iter()
                .map(|&(e, i)| PatchPair { extract: e, inject: i, alpha: DEFAULT_ALPHA })
                .collect(),
            8 => vec![
                PatchPair { extract: 2, inject: 6, alpha: DEFAULT_ALPHA },
                PatchPair { extract: 3, inject: 7, alpha: DEFAULT_ALPHA },
            ],
            n => {
                let mut out: Vec<PatchPair> = Vec::new();
                for (e, i) in DEEP_PLAN_32 {
                    let e = e * n / 32;
                    let i = i * n / 32;
                    if e < i && i < n && !out.iter().any(|p| p.inject == i) {
                        out.push(PatchPair { extract: e, inject: i, alpha: DEFAULT_ALPHA });
                    }
                }
                out
            }
        };
        LayerPatchPlan { pairs }
    }

    /// `allow_equal` admits extract == inject (the deep-only ablation).
    pub fn validate(&self, n_layers: usize, allow_equal: bool) -> Result<()> {
        for p in &self.pairs {
            if p.extract >= n_layers || p.inject >= n_layers {
                return Err(VifError::plan(
                    MODULE,
                    format!("pair {}>{} outside {} layers", p.extract, p.inject, n_layers),
                ));
            }
            let ok = if allow_equal { p.extract <= p.inject } else { p.extract < p.inject };
            if !ok {
                return Err(VifError::plan(
                    MODULE,
                    format!("extraction layer {} must precede injection layer {}", p.extract, p.inject),
                ));
            }
            if !p.alpha.is_finite() {
                return Err(VifError::plan(MODULE, "non-finite alpha"));
            }
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if self.pairs[..i].iter().any(|q| q.inject == p.inject) {
                return Err(VifError::plan(
                    MODULE,
                    format!("duplicate injection layer {}", p.inject),
                ));
            }
        }
        Ok(())
    }

    /// "2>6:0.5,3>7" — alpha defaults when omitted; empty string is the
    /// empty plan.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Self::empty());
        }
        let mut pairs = Vec::new();
        for part in s.split(',') {
            let (lhs, alpha) = match part.split_once(':') {
                Some((l, a)) => {
                    let alpha: f64 = a.trim().parse().map_err(|_| {
                        VifError::plan(MODULE, format!("bad alpha in '{part}'"))
                    })?;
                    (l, alpha)
                }
                None => (part, DEFAULT_ALPHA),
            };
            let (e, i) = lhs
                .split_once('>')
                .ok_or_else(|| VifError::plan(MODULE, format!("bad pair '{part}', want l>l'")))?;
            let extract = e.trim().parse().map_err(|_| {
                VifError::plan(MODULE, format!("bad extraction layer in '{part}'"))
            })?;
            let inject = i.trim().parse().map_err(|_| {
                VifError::plan(MODULE, format!("bad injection layer in '{part}'"))
            })?;
            pairs.push(PatchPair { extract, inject, alpha });
        }
        Ok(LayerPatchPlan { pairs })
    }

    pub fn to_plan_string(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("{}>{}:{}", p.extract, p.inject, p.alpha))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn extraction_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.extract).collect()
    }

    pub fn injection_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.inject).collect()
    }
}

// ── Bias construction ────────────────────────────────────────────────

/// Length-T bias equal to the importance map on visual key positions and 0
/// elsewhere.
pub fn build_bias(v_hat: &[f64], layout: &ModalityLayout, t: usize) -> Result<Vec<f64>> {
    if v_hat.len() != layout.n_visual() {
        return Err(VifError::layout(
            MODULE,
            format!("importance map length {} vs visual span {}", v_hat.len(), layout.n_visual()),
        ));
    }
    if layout.seq_len() != t {
        return Err(VifError::layout(MODULE, "layout length differs from T"));
    }
    let mut bias = vec![0.0; t];
    bias[layout.visual.0..layout.visual.1].copy_from_slice(v_hat);
    Ok(bias)
}

/// Taped counterpart of [`build_bias`].
pub fn bias_nodes(
    g: &mut Graph,
    v_hat: TensorId,
    layout: &ModalityLayout,
    t: usize,
) -> Result<TensorId> {
    let nv = layout.n_visual();
    if g.tensor(v_hat).numel() != nv {
        return Err(VifError::layout(MODULE, "importance map length differs from visual span"));
    }
    if layout.seq_len() != t {
        return Err(VifError::layout(MODULE, "layout length differs from T"));
    }
    let mut parts = Vec::with_capacity(3);
    if layout.visual.0 > 0 {
        let z = vec![0.0; layout.visual.0];
        parts.push(g.constant(&z, &[layout.visual.0])?);
    }
    parts.push(v_hat);
    if t > layout.visual.1 {
        let z = vec![0.0; t - layout.visual.1];
        parts.push(g.constant(&z, &[t - layout.visual.1])?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat0(&parts)
}

/// Full-sequence ablation bias: tile the map cyclically over all T key
/// positions, then renormalize to unit mass.
pub fn full_seq_bias_nodes(g: &mut Graph, v_hat: TensorId, t: usize) -> Result<TensorId> {
    let nv = g.tensor(v_hat).numel();
    if nv == 0 {
        return Err(VifError::layout(MODULE, "empty importance map"));
    }
    let reps = t.div_ceil(nv);
    let tiled = if reps == 1 {
        v_hat
    } else {
        let ids = vec![v_hat; reps];
        g.concat0(&ids)?
    };
    let cut = g.slice_rows(tiled, 0, t)?;
    let row = g.reshape(cut, &[1, t])?;
    let norm = g.row_normalize(row)?;
    g.reshape(norm, &[t])
}

/// Alpha as either a fixed hyperparameter or a learnable scalar node.
#[derive(Debug, Clone, Copy)]
pub enum AlphaRef {
    Fixed(f64),
    Node(TensorId),
}

/// Taped injection of one head's probabilities:
/// row_normalize((probs + alpha*bias) ⊙ mask01). With `Fixed(0.0)` the
/// input id is returned untouched, preserving bit-exactness.
pub fn patch_probs(
    g: &mut Graph,
    probs: TensorId,
    bias: TensorId,
    alpha: AlphaRef,
    mask01: TensorId,
) -> Result<TensorId> {
    let scaled = match alpha {
        AlphaRef::Fixed(a) => {
            if a == 0.0 {
                return Ok(probs);
            }
            g.mul_scalar(bias, a)?
        }
        AlphaRef::Node(n) => g.mul(bias, n)?,
    };
    let biased = g.add(probs, scaled)?;
    let masked = g.mul(biased, mask01)?;
    g.row_normalize(masked)
}

/// Data-level injection over all heads (Eq. 6-7 on plain values). alpha = 0
/// returns the input bit-exactly.
pub fn inject(flow: &AttentionTensor, bias: &[f64], alpha: f64) -> Result<AttentionTensor> {
    flow.validate(1e-6)?;
    if bias.len() != flow.t {
        return Err(VifError::layout(
            MODULE,
            format!("bias length {} vs sequence length {}", bias.len(), flow.t),
        ));
    }
    if alpha == 0.0 {
        return Ok(flow.clone());
    }
    let t = flow.t;
    let mut out = flow.clone();
    for h in 0..flow.n_heads {
        for r in 0..t {
            let base = h * t * t + r * t;
            let mut s = 0.0;
            for j in 0..t {
                let v = if flow.mask[r * t + j] {
                    let v = flow.probs[base + j] + alpha * bias[j];
                    if v < 0.0 {
                        return Err(VifError::contract(
                            MODULE,
                            format!("negative biased entry at head {h} row {r} (alpha {alpha})"),
                        ));
                    }
                    v
                } else {
                    0.0
                };
                out.probs[base + j] = v;
                s += v;
            }
            if s <= 0.0 {
                return Err(VifError::contract(
                    MODULE,
                    format!("row {r} has no visible mass after masking"),
                ));
            }
            for j in 0..t {
                out.probs[base + j] /= s;
            }
        }
    }
    Ok(out)
}

// ── Report ───────────────────────────────────────────────────────────

/// Per-pair before/after summary of an injected forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub extract_layer: usize,
    pub inject_layer: usize,
    pub alpha: f64,
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub pre_ratio: f64,
    pub post_ratio: f64,
    pub max_rowsum_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionReport {
    pub pairs: Vec<PairReport>,
}

impl InjectionReport {
    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            if p.max_rowsum_dev >= 1e-6 {
                return Err(VifError::contract(
                    MODULE,
                    format!(
                        "pair {}>{}: row-sum deviation {} exceeds 1e-6",
                        p.extract_layer, p.inject_layer, p.max_rowsum_dev
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("pair,alpha,pre_entropy,post_entropy,pre_ratio,post_ratio,max_rowsum_dev\n");
        for p in &self.pairs {
            s.push_str(&format!(
                "{}>{},{},{},{},{},{},{}\n",
                p.extract_layer,
                p.inject_layer,
                p.alpha,
                p.pre_entropy,
                p.post_entropy,
                p.pre_ratio,
                p.post_ratio,
                p.max_rowsum_dev,
            ));
        }
        s
    }
}
