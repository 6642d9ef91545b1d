//! Training and evaluation harness.
//!
//! Adam on the joint objective, per-step loss logging, periodic
//! checkpointing with divergence abort, greedy closed-set evaluation, and
//! the Table-style ablation runner. Everything is deterministic under
//! (seed, config, corpus).

use std::collections::{BTreeMap, BTreeSet};

use crate::config::KvMap;
use crate::error::{Result, VifError};
use crate::flowstat::{visual_attention_entropy, vision_attention_ratio, QueryScope};
use crate::inject::{AblationMode, LayerPatchPlan, PatchPair};
use crate::loss::{effective_beta, recon_loss, total_loss, LossBreakdown};
use crate::model::{derive_seed, ForwardSpec, LatentSource, ModelConfig, VifModel};
use crate::params::ParamStore;
use crate::synth::{fnv1a, localization_score, SynthInstance, TaskConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODULE: &str = "harness";

// ── Config ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // model structure
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub attender_heads: usize,
    pub d_z: usize,
    pub k_components: usize,
    /// None uses the depth default.
    pub plan: Option<LayerPatchPlan>,
    pub mode: AblationMode,
    pub learnable_alpha: bool,
    pub map_temp: f64,
    // optimization
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta: f64,
    pub gamma: f64,
    pub warmup_frac: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
    /// 0 means: checkpoint only at the end.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            attender_heads: 4,
            d_z: 32,
            k_components: 16,
            plan: None,
            mode: AblationMode::Full,
            learnable_alpha: false,
            map_temp: crate::mixture::MAP_TEMP,
            steps: 2000,
            batch: 8,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta: 0.1,
            gamma: 0.01,
            warmup_frac: 0.1,
            freeze_backbone: false,
            seed: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(VifError::config(MODULE, "batch size must be positive"));
        }
        if self.lr <= 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.warmup_frac < 0.0 {
            return Err(VifError::config(MODULE, "rates and weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            n_layers: kv.get_usize("n_layers", d.n_layers)?,
            n_heads: kv.get_usize("n_heads", d.n_heads)?,
            d_model: kv.get_usize("d_model", d.d_model)?,
            attender_heads: kv.get_usize("attender_heads", d.attender_heads)?,
            d_z: kv.get_usize("d_z", d.d_z)?,
            k_components: kv.get_usize("k_components", d.k_components)?,
            plan: match kv.get("plan") {
                Some(s) => Some(LayerPatchPlan::parse(s)?),
                None => None,
            },
            mode: AblationMode::parse(kv.get("mode").unwrap_or("full"))?,
            learnable_alpha: kv.get_bool("learnable_alpha", d.learnable_alpha)?,
            map_temp: kv.get_f64("map_temp", d.map_temp)?,
            steps: kv.get_usize("steps", d.steps)?,
            batch: kv.get_usize("batch", d.batch)?,
            lr: kv.get_f64("lr", d.lr)?,
            adam_beta1: kv.get_f64("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.get_f64("adam_beta2", d.adam_beta2)?,
            adam_eps: kv.get_f64("adam_eps", d.adam_eps)?,
            beta: kv.get_f64("beta", d.beta)?,
            gamma: kv.get_f64("gamma", d.gamma)?,
            warmup_frac: kv.get_f64("warmup_frac", d.warmup_frac)?,
            freeze_backbone: kv.get_bool("freeze_backbone", d.freeze_backbone)?,
            seed: kv.get_u64("seed", d.seed)?,
            ckpt_every: kv.get_usize("ckpt_every", d.ckpt_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model structure for a task. Deep-only mode folds the plan onto its
    /// injection layers.
    pub fn model_config(&self, task: &TaskConfig) -> Result<ModelConfig> {
        let layout = task.layout()?;
        let mut plan = self
            .plan
            .clone()
            .unwrap_or_else(|| LayerPatchPlan::default_for_depth(self.n_layers));
        if self.mode == AblationMode::DeepOnly {
            plan = LayerPatchPlan {
                pairs: plan
                    .pairs
                    .iter()
                    .map(|p| PatchPair { extract: p.inject, inject: p.inject, alpha: p.alpha })
                    .collect(),
            };
        }
        let cfg = ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                vocab_size: task.vocab().size(),
                max_seq: layout.seq_len(),
                grid_h: task.grid_h,
                grid_w: task.grid_w,
            },
            attender: crate::attender::AttenderConfig {
                d_model: self.d_model,
                n_heads: self.attender_heads,
                d_z: self.d_z,
                k: self.k_components,
            },
            plan,
            mode: self.mode,
            learnable_alpha: self.learnable_alpha,
            map_temp: self.map_temp,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam with bias correction; moments are kept per parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = (0..store.len()).map(|i| vec![0.0; store.values(i).len()]).collect();
        let v = (0..store.len()).map(|i| vec![0.0; store.values(i).len()]).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m, v }
    }

    /// Apply one update; `grads[i]` is the gradient for parameter `i` when
    /// present. Untouched parameters keep their moments.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !store.is_trainable(i) {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.values_mut(i);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

pub struct TrainResult {
    pub model: VifModel,
    pub log: Vec<LogRow>,
    pub diverged: bool,
}

impl TrainResult {
    /// Per-step CSV: `step,recon,kl,sparsity,total,beta_effective`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,recon,kl,sparsity,total,beta_effective\n");
        for row in &self.log {
            let b = &row.breakdown;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.step, b.recon, b.kl, b.sparsity, b.total, b.beta
            ));
        }
        s
    }
}

/// Content hashes for train/eval split disjointness.
pub fn corpus_hashes(corpus: &[SynthInstance]) -> BTreeSet<u64> {
    corpus.iter().map(|i| fnv1a(i.encode().as_bytes())).collect()
}

pub fn check_disjoint(train: &BTreeSet<u64>, eval_corpus: &[SynthInstance]) -> Result<()> {
    for inst in eval_corpus {
        if train.contains(&fnv1a(inst.encode().as_bytes())) {
            return Err(VifError::contract(
                MODULE,
                "evaluation corpus overlaps the training split (hash match)",
            ));
        }
    }
    Ok(())
}

/// Initialization alignment: copy the row/col token embeddings into the
/// grid positional tables so a question's location tokens and the cells
/// they name start out in the same representation subspace. Both tables
/// remain independently learned afterwards.
pub fn align_grid_init(model: &mut VifModel, task: &TaskConfig) -> Result<()> {
    let vocab = task.vocab();
    let d = model.cfg.backbone.d_model;
    let tok = model.store.idx("backbone.tok_embed")?;
    let tok_data = model.store.values(tok).to_vec();
    let row_idx = model.store.idx("backbone.grid_row")?;
    for r in 0..task.grid_h {
        let src = &tok_data[vocab.row_tok(r) * d..(vocab.row_tok(r) + 1) * d];
        model.store.values_mut(row_idx)[r * d..(r + 1) * d].copy_from_slice(src);
    }
    let col_idx = model.store.idx("backbone.grid_col")?;
    for c in 0..task.grid_w {
        let src = &tok_data[vocab.col_tok(c) * d..(vocab.col_tok(c) + 1) * d];
        model.store.values_mut(col_idx)[c * d..(c + 1) * d].copy_from_slice(src);
    }
    Ok(())
}

/// Optimize the joint objective. `init` continues from an existing model
/// (the two-stage recipe); otherwise a fresh model is initialized from the
/// config seed. `on_checkpoint` is invoked at `ckpt_every` intervals and at
/// the end.
pub fn train(
    tcfg: &TrainConfig,
    task: &TaskConfig,
    corpus: &[SynthInstance],
    init: Option<VifModel>,
    mut on_checkpoint: impl FnMut(usize, &VifModel) -> Result<()>,
) -> Result<TrainResult> {
    tcfg.validate()?;
    if corpus.is_empty() {
        return Err(VifError::contract(MODULE, "training corpus is empty"));
    }
    let layout = task.layout()?;
    let mcfg = tcfg.model_config(task)?;
    let mut model = match init {
        Some(m) => {
            if m.cfg.backbone.vocab_size != mcfg.backbone.vocab_size
                || m.cfg.backbone.grid_h != mcfg.backbone.grid_h
                || m.cfg.backbone.grid_w != mcfg.backbone.grid_w
            {
                return Err(VifError::config(
                    MODULE,
                    "initial checkpoint geometry does not match the task",
                ));
            }
            m
        }
        None => {
            let mut m = VifModel::init(mcfg, derive_seed(tcfg.seed, 1, 0))?;
            align_grid_init(&mut m, task)?;
            m
        }
    };
    if tcfg.freeze_backbone {
        model.store.set_trainable_prefix("backbone.", false);
    }

    let mut adam = Adam::new(
        &model.store,
        tcfg.lr,
        tcfg.adam_beta1,
        tcfg.adam_beta2,
        tcfg.adam_eps,
    );

    let tokenized: Vec<Vec<usize>> = corpus.iter().map(|i| i.tokens()).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = corpus.len(); // forces a shuffle at step 0

    let mut log = Vec::with_capacity(tcfg.steps);
    let mut diverged = false;

    for step in 0..tcfg.steps {
        // Batch assembly from a seeded epoch shuffle.
        let mut batch_idx = Vec::with_capacity(tcfg.batch);
        for _ in 0..tcfg.batch {
            if cursor >= order.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 2, epoch));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let items: Vec<&[usize]> = batch_idx.iter().map(|i| tokenized[*i].as_slice()).collect();

        let z_seed = derive_seed(tcfg.seed, 3, step as u64);
        let z_source = if model.cfg.mode.uses_posterior() {
            LatentSource::PosteriorSample { seed: z_seed }
        } else {
            LatentSource::PriorSample { seed: z_seed }
        };
        let spec = ForwardSpec {
            z_source,
            with_grad: true,
            collect_report: false,
            trace_layers: BTreeSet::new(),
            alpha_override: None,
        };
        // Numeric breakdown inside the forward (overflowed parameters
        // producing domain errors) is divergence, not a caller bug: stop
        // and keep the last-good parameters.
        let diverge = |e: &VifError| matches!(e, VifError::Domain(_) | VifError::Numeric(_));
        let mut art = match model.forward(&items, &layout, &spec) {
            Ok(a) => a,
            Err(e) if diverge(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let g = &mut art.graph;
        let recon = match recon_loss(g, art.logits, &items, &layout) {
            Ok(r) => r,
            Err(e) if diverge(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        let beta_eff = if art.kl.is_some() {
            effective_beta(step, tcfg.steps, tcfg.beta, tcfg.warmup_frac)
        } else {
            0.0
        };
        let gamma_eff = if model.cfg.mode == AblationMode::NoSp || art.sparsity.is_none() {
            0.0
        } else {
            tcfg.gamma
        };

        let mut total = recon;
        if let Some(kl) = art.kl {
            let w = g.mul_scalar(kl, beta_eff)?;
            total = g.add(total, w)?;
        }
        if let Some(sp) = art.sparsity {
            let w = g.mul_scalar(sp, gamma_eff)?;
            total = g.add(total, w)?;
        }

        let recon_v = g.scalar_value(recon)?;
        let kl_v = match art.kl {
            Some(id) => g.scalar_value(id)?,
            None => 0.0,
        };
        let sp_v = match art.sparsity {
            Some(id) => g.scalar_value(id)?,
            None => 0.0,
        };
        let breakdown = match total_loss(recon_v, kl_v, sp_v, beta_eff, gamma_eff) {
            Ok(b) => b,
            Err(e) => {
                // Divergence: abort with the last-good parameters intact
                // (the update below never ran for this step).
                log.push(LogRow {
                    step,
                    breakdown: LossBreakdown {
                        recon: recon_v,
                        kl: kl_v,
                        sparsity: sp_v,
                        beta: beta_eff,
                        gamma: gamma_eff,
                        total: f64::NAN,
                    },
                });
                diverged = true;
                let _ = e;
                break;
            }
        };

        g.backward(total)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
        for (idx, id) in &art.bound_params {
            if let Some(gr) = g.grad(*id) {
                grads[*idx] = Some(gr.to_vec());
            }
        }
        drop(art);
        adam.apply(&mut model.store, &grads);

        log.push(LogRow { step, breakdown });
        if tcfg.ckpt_every > 0 && (step + 1) % tcfg.ckpt_every == 0 {
            on_checkpoint(step + 1, &model)?;
        }
    }

    on_checkpoint(tcfg.steps, &model)?;
    Ok(TrainResult { model, log, diverged })
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub n_ambiguous: usize,
    pub accuracy: f64,
    pub accuracy_ambiguous: f64,
    pub accuracy_unambiguous: f64,
    /// Mean importance mass on target cells; absent when no maps exist
    /// (mid-deep mode or an empty plan).
    pub mean_localization: Option<f64>,
    /// Mean Shannon entropy of the decoded maps.
    pub mean_map_entropy: Option<f64>,
    /// Mean deep-layer visual-attention entropy of the injected forward.
    pub attn_entropy: f64,
    /// Same statistic with alpha forced to 0 on the same checkpoint.
    pub attn_entropy_alpha0: f64,
    pub vision_ratio: f64,
    pub vision_ratio_alpha0: f64,
}

/// Greedy closed-set evaluation plus flow statistics. Deterministic: the
/// latent is the prior mean and no sampling happens anywhere.
pub fn evaluate(
    model: &VifModel,
    task: &TaskConfig,
    corpus: &[SynthInstance],
    train_hashes: Option<&BTreeSet<u64>>,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(VifError::contract(MODULE, "evaluation corpus is empty"));
    }
    if let Some(h) = train_hashes {
        check_disjoint(h, corpus)?;
    }
    let layout = task.layout()?;
    let vocab = task.vocab();
    if model.cfg.backbone.vocab_size != vocab.size()
        || model.cfg.backbone.grid_h != task.grid_h
        || model.cfg.backbone.grid_w != task.grid_w
    {
        return Err(VifError::config(MODULE, "checkpoint geometry does not match the task"));
    }

    let deep_layers: BTreeSet<usize> = if model.cfg.plan.pairs.is_empty() {
        BTreeSet::from([model.cfg.backbone.n_layers - 1])
    } else {
        model.cfg.plan.injection_layers().into_iter().collect()
    };

    let mut correct = 0usize;
    let mut correct_amb = 0usize;
    let mut correct_unamb = 0usize;
    let mut n_amb = 0usize;
    let mut loc_sum = 0.0;
    let mut loc_cnt = 0usize;
    let mut map_ent_sum = 0.0;
    let mut map_ent_cnt = 0usize;
    let mut ent_inj = 0.0;
    let mut ent_base = 0.0;
    let mut ratio_inj = 0.0;
    let mut ratio_base = 0.0;

    for inst in corpus {
        let tokens = inst.tokens();
        let spec = ForwardSpec {
            trace_layers: deep_layers.clone(),
            ..ForwardSpec::inference()
        };
        let art = model.forward(&[&tokens], &layout, &spec)?;

        // Greedy answer restricted to the template's closed answer set.
        let template = inst.template(&vocab)?;
        let options = vocab.answer_options(template);
        let row = layout.answer.0 - 1;
        let logits = art.graph.data(art.logits);
        let v = model.cfg.backbone.vocab_size;
        let mut best = options[0];
        let mut best_v = f64::NEG_INFINITY;
        for &o in &options {
            let val = logits[row * v + o];
            if val > best_v {
                best_v = val;
                best = o;
            }
        }
        let hit = best == inst.answer[0];
        correct += hit as usize;
        if inst.is_ambiguous() {
            n_amb += 1;
            correct_amb += hit as usize;
        } else {
            correct_unamb += hit as usize;
        }

        for map in &art.maps[0] {
            loc_sum += localization_score(&map.v_hat, inst)?;
            loc_cnt += 1;
            map_ent_sum += map.entropy();
            map_ent_cnt += 1;
        }
        for layer in &deep_layers {
            let at = &art.traces[0].entries[layer].attention;
            ent_inj += visual_attention_entropy(at, &layout, QueryScope::GenerationPositions)?.mean;
            ratio_inj += vision_attention_ratio(at, &layout, QueryScope::GenerationPositions)?;
        }

        let spec0 = ForwardSpec {
            trace_layers: deep_layers.clone(),
            alpha_override: Some(0.0),
            ..ForwardSpec::inference()
        };
        let art0 = model.forward(&[&tokens], &layout, &spec0)?;
        for layer in &deep_layers {
            let at = &art0.traces[0].entries[layer].attention;
            ent_base +=
                visual_attention_entropy(at, &layout, QueryScope::GenerationPositions)?.mean;
            ratio_base += vision_attention_ratio(at, &layout, QueryScope::GenerationPositions)?;
        }
    }

    let n = corpus.len();
    let n_unamb = n - n_amb;
    let layer_obs = (n * deep_layers.len()) as f64;
    Ok(EvalReport {
        n,
        n_ambiguous: n_amb,
        accuracy: correct as f64 / n as f64,
        accuracy_ambiguous: if n_amb > 0 { correct_amb as f64 / n_amb as f64 } else { 0.0 },
        accuracy_unambiguous: if n_unamb > 0 {
            correct_unamb as f64 / n_unamb as f64
        } else {
            0.0
        },
        mean_localization: (loc_cnt > 0).then(|| loc_sum / loc_cnt as f64),
        mean_map_entropy: (map_ent_cnt > 0).then(|| map_ent_sum / map_ent_cnt as f64),
        attn_entropy: ent_inj / layer_obs,
        attn_entropy_alpha0: ent_base / layer_obs,
        vision_ratio: ratio_inj / layer_obs,
        vision_ratio_alpha0: ratio_base / layer_obs,
    })
}

// ── Ablation runner ──────────────────────────────────────────────────

pub struct AblateOutcome {
    pub rows: Vec<(AblationMode, EvalReport)>,
    pub csv: String,
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Train and evaluate every ablation mode under one seed and one corpus
/// split, mirroring the ablation-table row structure.
pub fn ablate(
    base: &TrainConfig,
    task: &TaskConfig,
    n_train: usize,
    n_eval: usize,
) -> Result<AblateOutcome> {
    let all = crate::synth::generate(task, n_train + n_eval)?;
    let train_set: Vec<SynthInstance> = all[..n_train].to_vec();
    let eval_set: Vec<SynthInstance> = all[n_train..].to_vec();
    let hashes = corpus_hashes(&train_set);
    check_disjoint(&hashes, &eval_set)?;

    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let tcfg = TrainConfig { mode, ..base.clone() };
        let result = train(&tcfg, task, &train_set, None, |_, _| Ok(()))?;
        let report = evaluate(&result.model, task, &eval_set, Some(&hashes))?;
        rows.push((mode, report));
    }

    let full = rows[0].1.clone();
    let mut csv = String::from(
        "mode,accuracy,accuracy_ambiguous,accuracy_unambiguous,localization,map_entropy,\
         attn_entropy,attn_entropy_alpha0,vision_ratio,vision_ratio_alpha0,\
         d_accuracy,d_localization\n",
    );
    for (mode, r) in &rows {
        let d_acc = r.accuracy - full.accuracy;
        let d_loc = match (r.mean_localization, full.mean_localization) {
            (Some(a), Some(b)) => (a - b).to_string(),
            _ => String::new(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            mode,
            r.accuracy,
            r.accuracy_ambiguous,
            r.accuracy_unambiguous,
            opt_str(r.mean_localization),
            opt_str(r.mean_map_entropy),
            r.attn_entropy,
            r.attn_entropy_alpha0,
            r.vision_ratio,
            r.vision_ratio_alpha0,
            d_acc,
            d_loc,
        ));
    }
    Ok(AblateOutcome { rows, csv })
}

/// Metadata stored in checkpoints for split checking and task rebuild.
pub fn train_meta(task: &TaskConfig, hashes: &BTreeSet<u64>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("task.grid_h".into(), task.grid_h.to_string());
    m.insert("task.grid_w".into(), task.grid_w.to_string());
    m.insert("task.n_colors".into(), task.n_colors.to_string());
    m.insert("task.n_shapes".into(), task.n_shapes.to_string());
    m.insert("task.ambiguity".into(), task.ambiguity.to_string());
    m.insert("task.seed".into(), task.seed.to_string());
    let hex: Vec<String> = hashes.iter().map(|h| format!("{h:016x}")).collect();
    m.insert("train_hashes".into(), hex.join(","));
    m
}

pub fn task_from_meta(meta: &BTreeMap<String, String>) -> Option<TaskConfig> {
    Some(TaskConfig {
        grid_h: meta.get("task.grid_h")?.parse().ok()?,
        grid_w: meta.get("task.grid_w")?.parse().ok()?,
        n_colors: meta.get("task.n_colors")?.parse().ok()?,
        n_shapes: meta.get("task.n_shapes")?.parse().ok()?,
        ambiguity: meta.get("task.ambiguity")?.parse().ok()?,
        seed: meta.get("task.seed")?.parse().ok()?,
    })
}

pub fn hashes_from_meta(meta: &BTreeMap<String, String>) -> Option<BTreeSet<u64>> {
    meta.get("train_hashes").map(|s| {
        s.split(',')
            .filter_map(|h| u64::from_str_radix(h, 16).ok())
            .collect()
    })
}
