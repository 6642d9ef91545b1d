//! Probabilistic attender: a prior branch conditioned on (V, Q) and a
//! posterior branch conditioned on (V, Q, A), each mapping token features to
//! the parameters of a diagonal-Gaussian latent.
//!
//! Both branches share one architecture — bidirectional cross-attention
//! between visual and text tokens, a fusion self-attention layer over the
//! joined sequence, mean-pooling, an FFN, and two linear heads — but hold
//! disjoint parameter sets. Latents are sampled with the reparameterization
//! trick so gradients reach the Gaussian parameters, never the noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VifError};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, TensorId};

const MODULE: &str = "attender";
const LN_EPS: f64 = crate::backbone::LN_EPS;

/// Clamp bounds for predicted log-variances.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttenderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Latent width per mixture slice.
    pub d_z: usize,
    /// Number of mixture slices; the heads emit `k * d_z` values.
    pub k: usize,
}

impl AttenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(VifError::config(
                MODULE,
                "d_model must be divisible by n_heads",
            ));
        }
        if self.d_z == 0 || self.k == 0 {
            return Err(VifError::config(MODULE, "d_z and k must be positive"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.d_z * self.k
    }
}

/// Graph handles for a diagonal Gaussian over the flattened latent.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mu: TensorId,
    pub log_var: TensorId,
    pub dim: usize,
}

/// A reparameterized draw; epsilon is retained for reproducibility.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: TensorId,
    pub epsilon: Vec<f64>,
}

/// Which branch to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Prior,
    Posterior,
}

impl Branch {
    fn key(self) -> &'static str {
        match self {
            Branch::Prior => "prior",
            Branch::Posterior => "posterior",
        }
    }
}

/// Register one attender (both branches) under `prefix` ("attender.l2to6."
/// style). Heads are zero-initialized so an untrained attender emits the
/// standard normal.
pub fn register_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttenderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    for branch in ["prior", "posterior"] {
        for unit in ["v_from_t", "t_from_v", "fuse"] {
            let u = format!("{prefix}{branch}.{unit}");
            store.add_full(&format!("{u}.ln_q.gamma"), vec![d], 1.0)?;
            store.add_zeros(&format!("{u}.ln_q.beta"), vec![d])?;
            store.add_full(&format!("{u}.ln_kv.gamma"), vec![d], 1.0)?;
            store.add_zeros(&format!("{u}.ln_kv.beta"), vec![d])?;
            for w in ["wq", "wk", "wv", "wo"] {
                store.add_normal(&format!("{u}.{w}"), vec![d, d], std, rng)?;
            }
        }
        let b = format!("{prefix}{branch}");
        store.add_full(&format!("{b}.ln_ffn.gamma"), vec![d], 1.0)?;
        store.add_zeros(&format!("{b}.ln_ffn.beta"), vec![d])?;
        store.add_normal(&format!("{b}.ffn.w1"), vec![d, 4 * d], std, rng)?;
        store.add_zeros(&format!("{b}.ffn.b1"), vec![4 * d])?;
        store.add_normal(
            &format!("{b}.ffn.w2"),
            vec![4 * d, d],
            1.0 / (4.0 * d as f64).sqrt(),
            rng,
        )?;
        store.add_zeros(&format!("{b}.ffn.b2"), vec![d])?;
        store.add_zeros(&format!("{b}.head_mu.w"), vec![d, cfg.latent_dim()])?;
        store.add_zeros(&format!("{b}.head_mu.b"), vec![cfg.latent_dim()])?;
        store.add_zeros(&format!("{b}.head_lv.w"), vec![d, cfg.latent_dim()])?;
        store.add_zeros(&format!("{b}.head_lv.b"), vec![cfg.latent_dim()])?;
    }
    Ok(())
}

pub struct Attender<'a> {
    pub cfg: &'a AttenderConfig,
    /// Name prefix of this attender's parameters, e.g. `attender.l2to6.`.
    pub prefix: String,
    pub store: &'a ParamStore,
}

impl<'a> Attender<'a> {
    pub fn new(cfg: &'a AttenderConfig, prefix: impl Into<String>, store: &'a ParamStore) -> Self {
        Attender { cfg, prefix: prefix.into(), store }
    }

    /// Prior branch over (V, Q).
    pub fn encode_prior(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        v_tokens: TensorId,
        q_tokens: TensorId,
    ) -> Result<DiagGaussian> {
        if g.shape(q_tokens)[0] == 0 {
            return Err(VifError::contract(MODULE, "encode_prior with an empty question span"));
        }
        self.encode_branch(g, binder, Branch::Prior, v_tokens, q_tokens)
    }

    /// Posterior branch over (V, [Q, A]); training only.
    pub fn encode_posterior(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        v_tokens: TensorId,
        q_tokens: TensorId,
        a_tokens: TensorId,
    ) -> Result<DiagGaussian> {
        if g.shape(q_tokens)[0] == 0 {
            return Err(VifError::contract(MODULE, "encode_posterior with an empty question span"));
        }
        if g.shape(a_tokens)[0] == 0 {
            return Err(VifError::contract(
                MODULE,
                "encode_posterior needs a nonempty answer span (training only)",
            ));
        }
        let text = g.concat0(&[q_tokens, a_tokens])?;
        self.encode_branch(g, binder, Branch::Posterior, v_tokens, text)
    }

    /// Shared branch body: cross-attention both directions, fusion
    /// self-attention, mean-pool, FFN, linear heads.
    pub(crate) fn encode_branch(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        branch: Branch,
        v_tokens: TensorId,
        text_tokens: TensorId,
    ) -> Result<DiagGaussian> {
        if g.shape(v_tokens)[0] == 0 {
            return Err(VifError::contract(MODULE, "empty visual span"));
        }
        let b = format!("{}{}", self.prefix, branch.key());

        let vt = self.mha(g, binder, &format!("{b}.v_from_t"), v_tokens, text_tokens)?;
        let v1 = g.add(v_tokens, vt)?;
        let tv = self.mha(g, binder, &format!("{b}.t_from_v"), text_tokens, v_tokens)?;
        let t1 = g.add(text_tokens, tv)?;

        let joined = g.concat0(&[v1, t1])?;
        let fused = self.mha(g, binder, &format!("{b}.fuse"), joined, joined)?;
        let joined = g.add(joined, fused)?;

        let pooled = g.mean_rows(joined)?; // [d]
        let d = self.cfg.d_model;
        let pooled = g.reshape(pooled, &[1, d])?;

        let lng = binder.bind(g, &format!("{b}.ln_ffn.gamma"))?;
        let lnb = binder.bind(g, &format!("{b}.ln_ffn.beta"))?;
        let w1 = binder.bind(g, &format!("{b}.ffn.w1"))?;
        let b1 = binder.bind(g, &format!("{b}.ffn.b1"))?;
        let w2 = binder.bind(g, &format!("{b}.ffn.w2"))?;
        let b2 = binder.bind(g, &format!("{b}.ffn.b2"))?;
        let x = g.layer_norm(pooled, lng, lnb, LN_EPS)?;
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        let f = g.add(pooled, h)?; // [1, d]

        let wmu = binder.bind(g, &format!("{b}.head_mu.w"))?;
        let bmu = binder.bind(g, &format!("{b}.head_mu.b"))?;
        let wlv = binder.bind(g, &format!("{b}.head_lv.w"))?;
        let blv = binder.bind(g, &format!("{b}.head_lv.b"))?;
        let dim = self.cfg.latent_dim();
        let mu = g.matmul(f, wmu)?;
        let mu = g.add(mu, bmu)?;
        let mu = g.reshape(mu, &[dim])?;
        let lv = g.matmul(f, wlv)?;
        let lv = g.add(lv, blv)?;
        let lv = g.reshape(lv, &[dim])?;
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DiagGaussian { mu, log_var: lv, dim })
    }

    /// Pre-norm residual multi-head attention of `q_in` over `kv_in`
    /// (full visibility), returning the output projection (no residual).
    fn mha(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        unit: &str,
        q_in: TensorId,
        kv_in: TensorId,
    ) -> Result<TensorId> {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        let qg = binder.bind(g, &format!("{unit}.ln_q.gamma"))?;
        let qb = binder.bind(g, &format!("{unit}.ln_q.beta"))?;
        let kg = binder.bind(g, &format!("{unit}.ln_kv.gamma"))?;
        let kb = binder.bind(g, &format!("{unit}.ln_kv.beta"))?;
        let wq = binder.bind(g, &format!("{unit}.wq"))?;
        let wk = binder.bind(g, &format!("{unit}.wk"))?;
        let wv = binder.bind(g, &format!("{unit}.wv"))?;
        let wo = binder.bind(g, &format!("{unit}.wo"))?;

        let qn = g.layer_norm(q_in, qg, qb, LN_EPS)?;
        let kn = if q_in == kv_in {
            qn
        } else {
            g.layer_norm(kv_in, kg, kb, LN_EPS)?
        };
        let q = g.matmul(qn, wq)?;
        let k = g.matmul(kn, wk)?;
        let v = g.matmul(kn, wv)?;

        let scores = g.head_scores(q, k, nh, scale)?;
        let p = g.softmax_lastdim(scores)?;
        let ctx = g.head_context(p, v, nh)?;
        let _ = dh;
        g.matmul(ctx, wo)
    }
}

/// z = mu + exp(log_var / 2) ⊙ eps with eps ~ N(0, I). Gradients flow to mu
/// and log_var; eps enters as a constant leaf.
pub fn reparameterize(
    g: &mut Graph,
    gauss: &DiagGaussian,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSample> {
    let eps: Vec<f64> = (0..gauss.dim).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with(g, gauss, eps)
}

/// Reparameterize with caller-provided noise (deterministic replay).
pub fn reparameterize_with(
    g: &mut Graph,
    gauss: &DiagGaussian,
    eps: Vec<f64>,
) -> Result<LatentSample> {
    if eps.len() != gauss.dim {
        return Err(VifError::shape(MODULE, "epsilon length differs from latent dim"));
    }
    let eps_id = g.constant(&eps, &[gauss.dim])?;
    let half_lv = g.mul_scalar(gauss.log_var, 0.5)?;
    let sigma = g.exp(half_lv)?;
    let noise = g.mul(sigma, eps_id)?;
    let z = g.add(gauss.mu, noise)?;
    Ok(LatentSample { z, epsilon: eps })
}

/// Inference-time latent: the prior mean.
pub fn latent_mean(gauss: &DiagGaussian) -> LatentSample {
    LatentSample { z: gauss.mu, epsilon: vec![0.0; gauss.dim] }
}

/// Closed-form KL( N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2) ), summed over
/// dimensions:
///   1/2 * sum_d ( log sigma_p^2 - log sigma_q^2
///                 + (sigma_q^2 + (mu_q - mu_p)^2) / sigma_p^2 - 1 ).
pub fn kl_divergence(g: &mut Graph, q: &DiagGaussian, p: &DiagGaussian) -> Result<TensorId> {
    if q.dim != p.dim {
        return Err(VifError::shape(MODULE, "KL between different latent dims"));
    }
    for id in [q.mu, q.log_var, p.mu, p.log_var] {
        if !g.tensor(id).is_finite() {
            return Err(VifError::numeric(MODULE, "non-finite Gaussian parameters in KL"));
        }
    }
    let d_lv = g.sub(p.log_var, q.log_var)?;
    let var_q = g.exp(q.log_var)?;
    let var_p = g.exp(p.log_var)?;
    let diff = g.sub(q.mu, p.mu)?;
    let diff2 = g.mul(diff, diff)?;
    let num = g.add(var_q, diff2)?;
    let ratio = g.div(num, var_p)?;
    let inner = g.add(d_lv, ratio)?;
    let inner = g.add_scalar(inner, -1.0)?;
    let s = g.sum(inner)?;
    g.mul_scalar(s, 0.5)
}

/// Data-level KL for tests and diagnostics (same formula as the graph op).
pub fn kl_closed_form(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mu_q.len() {
        let var_q = lv_q[i].exp();
        let var_p = lv_p[i].exp();
        let d = mu_q[i] - mu_p[i];
        acc += lv_p[i] - lv_q[i] + (var_q + d * d) / var_p - 1.0;
    }
    0.5 * acc
}
