//! Training objective: answer reconstruction, latent KL, and mixture
//! sparsity, combined as
//!
//!   total = recon + beta * kl + gamma * sparsity
//!
//! recon is the mean next-token negative log-likelihood over answer-span
//! positions only; sparsity is the mixture-weight entropy plus the mean
//! pi-weighted squared spread (natural log throughout). With beta = 1 and
//! gamma = 0 the total is exactly the negative ELBO.

use crate::backbone::ModalityLayout;
use crate::error::{Result, VifError};
use crate::mixture::{MixtureNodes, SpatialMixture};
use crate::tensor::{Graph, TensorId};

const MODULE: &str = "objective";

/// One step's loss components and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("kl", self.kl),
            ("sparsity", self.sparsity),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(VifError::numeric(MODULE, format!("non-finite {name} term: {v}")));
            }
        }
        if self.kl < 0.0 {
            return Err(VifError::contract(MODULE, format!("negative KL {}", self.kl)));
        }
        if self.sparsity < 0.0 {
            return Err(VifError::contract(MODULE, format!("negative sparsity {}", self.sparsity)));
        }
        let expect = self.recon + self.beta * self.kl + self.gamma * self.sparsity;
        if (self.total - expect).abs() > 1e-12 {
            return Err(VifError::contract(
                MODULE,
                format!("total {} != recon + beta*kl + gamma*sparsity = {expect}", self.total),
            ));
        }
        Ok(())
    }

    /// Per-batch ELBO estimate; with beta = 1, gamma = 0 the training total
    /// equals exactly -ELBO.
    pub fn elbo(&self) -> f64 {
        -(self.recon + self.kl)
    }
}

/// Assemble and validate a breakdown from scalar terms.
pub fn total_loss(
    recon: f64,
    kl: f64,
    sparsity: f64,
    beta: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    if beta < 0.0 || gamma < 0.0 {
        return Err(VifError::contract(MODULE, "loss weights must be nonnegative"));
    }
    let b = LossBreakdown {
        recon,
        kl,
        sparsity,
        beta,
        gamma,
        total: recon + beta * kl + gamma * sparsity,
    };
    b.validate()?;
    Ok(b)
}

/// Linear KL warm-up: beta ramps from 0 to `beta_final` over the first
/// `warmup_frac` of training, then stays flat.
pub fn effective_beta(step: usize, total_steps: usize, beta_final: f64, warmup_frac: f64) -> f64 {
    let warm = (total_steps as f64 * warmup_frac).ceil() as usize;
    if warm == 0 || step >= warm {
        beta_final
    } else {
        beta_final * step as f64 / warm as f64
    }
}

/// Mean next-token NLL over answer-span positions of a (possibly batched)
/// logits tensor `[n_items * T, vocab]`. Visual and question positions
/// contribute nothing.
pub fn recon_loss(
    g: &mut Graph,
    logits: TensorId,
    items: &[&[usize]],
    layout: &ModalityLayout,
) -> Result<TensorId> {
    if layout.n_answer() == 0 {
        return Err(VifError::contract(MODULE, "recon loss needs a nonempty answer span"));
    }
    if layout.answer.0 == 0 {
        return Err(VifError::contract(MODULE, "no context position precedes the answer span"));
    }
    let t = layout.seq_len();
    let rows_total = g.shape(logits)[0];
    if rows_total != items.len() * t {
        return Err(VifError::shape(
            MODULE,
            format!("logits rows {rows_total} vs {} items of length {t}", items.len()),
        ));
    }
    let mut rows = Vec::with_capacity(items.len() * layout.n_answer());
    let mut targets = Vec::with_capacity(rows.capacity());
    for (b, toks) in items.iter().enumerate() {
        if toks.len() != t {
            return Err(VifError::layout(MODULE, "item length differs from layout"));
        }
        for p in layout.answer.0..layout.answer.1 {
            rows.push(b * t + p - 1);
            targets.push(toks[p]);
        }
    }
    let picked_rows = g.gather_rows(logits, &rows)?;
    let probs = g.softmax_lastdim(picked_rows)?;
    let chosen = g.pick_per_row(probs, &targets)?;
    let lp = g.log(chosen)?;
    let mean = g.mean(lp)?;
    g.negate(mean)
}

/// Taped sparsity term: H(pi) + mean_k(pi_k * spread_k^2).
pub fn sparsity_node(g: &mut Graph, mix: &MixtureNodes) -> Result<TensorId> {
    let logp = g.log(mix.pi)?;
    let plogp = g.mul(mix.pi, logp)?;
    let s = g.sum(plogp)?;
    let entropy = g.negate(s)?;
    let s2 = g.mul(mix.spreads, mix.spreads)?;
    let vol = g.mul(mix.pi, s2)?;
    let vol = g.mean(vol)?;
    g.add(entropy, vol)
}

/// Data-level sparsity with `0 * log 0 := 0` for constructed mixtures.
pub fn sparsity_loss(mix: &SpatialMixture) -> f64 {
    let entropy: f64 = mix.pi.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    let k = mix.k() as f64;
    let vol: f64 = mix
        .pi
        .iter()
        .zip(mix.spreads.iter())
        .map(|(p, s)| p * s * s)
        .sum::<f64>()
        / k;
    entropy + vol
}
