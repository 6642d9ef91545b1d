//! Registered gradient checks: each loss term and the full composite,
//! differentiated end-to-end through backbone, attender, renderer, and
//! injector, validated against central finite differences at sampled
//! parameter coordinates.
//!
//! The differencing side only runs no-grad forwards at perturbed parameter
//! values, so it never touches the reverse-mode path it is checking.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Result, VifError};
use crate::loss::recon_loss;
use crate::model::{derive_seed, ForwardSpec, LatentSource, VifModel};
use crate::synth::{generate, TaskConfig};
use crate::training::TrainConfig;

const MODULE: &str = "gradsuite";
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    Recon,
    Kl,
    Sparsity,
    Composite,
}

impl LossTarget {
    fn name(&self) -> &'static str {
        match self {
            LossTarget::Recon => "recon",
            LossTarget::Kl => "kl",
            LossTarget::Sparsity => "sparsity",
            LossTarget::Composite => "composite",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Scalar loss of one forward pass at the current parameters.
fn eval_loss(
    model: &VifModel,
    items: &[&[usize]],
    layout: &crate::backbone::ModalityLayout,
    target: LossTarget,
    z_seed: u64,
    with_grad: bool,
) -> Result<(f64, Option<(crate::tensor::Graph, Vec<(usize, crate::tensor::TensorId)>)>)> {
    let spec = ForwardSpec {
        z_source: LatentSource::PosteriorSample { seed: z_seed },
        with_grad,
        collect_report: false,
        trace_layers: BTreeSet::new(),
        alpha_override: None,
    };
    let mut art = model.forward(items, layout, &spec)?;
    let g = &mut art.graph;
    let root = match target {
        LossTarget::Recon => recon_loss(g, art.logits, items, layout)?,
        LossTarget::Kl => art
            .kl
            .ok_or_else(|| VifError::contract(MODULE, "no KL term in this mode"))?,
        LossTarget::Sparsity => art
            .sparsity
            .ok_or_else(|| VifError::contract(MODULE, "no sparsity term in this mode"))?,
        LossTarget::Composite => {
            let recon = recon_loss(g, art.logits, items, layout)?;
            let kl = art.kl.expect("full mode has KL");
            let sp = art.sparsity.expect("full mode has sparsity");
            let a = g.mul_scalar(kl, 0.1)?;
            let b = g.mul_scalar(sp, 0.01)?;
            let s = g.add(recon, a)?;
            g.add(s, b)?
        }
    };
    let value = g.scalar_value(root)?;
    if !value.is_finite() {
        return Err(VifError::numeric(MODULE, format!("non-finite {} loss", target.name())));
    }
    if with_grad {
        g.backward(root)?;
        let bound = art.bound_params.clone();
        Ok((value, Some((art.graph, bound))))
    } else {
        Ok((value, None))
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// over sampled parameter coordinates.
pub fn model_grad_check(
    model: &mut VifModel,
    items: &[&[usize]],
    layout: &crate::backbone::ModalityLayout,
    target: LossTarget,
    coords_per_param: usize,
    param_stride: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let z_seed = derive_seed(seed, 17, 0);
    let (_, back) = eval_loss(model, items, layout, target, z_seed, true)?;
    let (graph, bound) = back.expect("grad pass");
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for (idx, id) in &bound {
        if let Some(gr) = graph.grad(*id) {
            analytic[*idx] = Some(gr.to_vec());
        }
    }
    drop(graph);

    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 23, 0));
    let mut max_rel = 0.0f64;
    for idx in (0..model.store.len()).step_by(param_stride.max(1)) {
        let Some(ga) = analytic[idx].as_ref() else { continue };
        let n = ga.len();
        for _ in 0..coords_per_param.min(n) {
            let ci = rng.random_range(0..n);
            let orig = model.store.values(idx)[ci];
            model.store.values_mut(idx)[ci] = orig + h;
            let (up, _) = eval_loss(model, items, layout, target, z_seed, false)?;
            model.store.values_mut(idx)[ci] = orig - h;
            let (down, _) = eval_loss(model, items, layout, target, z_seed, false)?;
            model.store.values_mut(idx)[ci] = orig;
            let central = (up - down) / (2.0 * h);
            if !central.is_finite() {
                return Err(VifError::numeric(MODULE, "non-finite central difference"));
            }
            let rel = (ga[ci] - central).abs() / central.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn micro_task(seed: u64) -> TaskConfig {
    TaskConfig { grid_h: 3, grid_w: 3, n_colors: 4, n_shapes: 2, ambiguity: 0.5, seed }
}

fn micro_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 16,
        attender_heads: 2,
        d_z: 3,
        k_components: 4,
        plan: Some(crate::inject::LayerPatchPlan::parse("1>3:0.5").unwrap()),
        seed,
        ..TrainConfig::default()
    }
}

/// Fresh model with generic values in the layers that initialize to zero
/// (zero readout / decoder outputs / heads block every gradient path).
fn generic_model(tcfg: &TrainConfig, task: &TaskConfig, seed: u64) -> Result<VifModel> {
    let mut model = VifModel::init(tcfg.model_config(task)?, seed)?;
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 31, 0));
    let names: Vec<String> = model
        .store
        .iter()
        .map(|(_, n, _, _)| n.to_string())
        .filter(|n| {
            n == "backbone.readout"
                || n.contains(".decoder.w2")
                || n.contains(".decoder.b2")
                || n.contains(".head_mu.")
                || n.contains(".head_lv.")
        })
        .collect();
    for n in names {
        let i = model.store.idx(&n)?;
        model
            .store
            .values_mut(i)
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    Ok(model)
}

/// The registered checks. `micro_seeds` runs per target on a small
/// full-pipeline config; `default_seeds` composite runs on the default
/// (8-layer, 64-wide, 8x8-grid) configuration.
pub fn run_gradient_suite(micro_seeds: usize, default_seeds: usize) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();

    for target in [LossTarget::Recon, LossTarget::Kl, LossTarget::Sparsity, LossTarget::Composite]
    {
        let t0 = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..micro_seeds as u64 {
            let task = micro_task(derive_seed(s, 1, 1));
            let corpus = generate(&task, 2)?;
            let layout = task.layout()?;
            let toks: Vec<Vec<usize>> = corpus.iter().map(|i| i.tokens()).collect();
            let items: Vec<&[usize]> = toks.iter().map(|t| t.as_slice()).collect();
            let tcfg = micro_train_cfg(s);
            let mut model = generic_model(&tcfg, &task, derive_seed(s, 2, 2))?;
            let err =
                model_grad_check(&mut model, &items, &layout, target, 2, 1, GRAD_STEP, s)?;
            worst = worst.max(err);
        }
        outcomes.push(CheckOutcome {
            name: target.name().to_string(),
            seeds: micro_seeds,
            max_rel_err: worst,
            tol: GRAD_TOL,
            passed: worst < GRAD_TOL,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    if default_seeds > 0 {
        let t0 = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..default_seeds as u64 {
            let task = TaskConfig { seed: derive_seed(s, 3, 3), ..TaskConfig::default() };
            let corpus = generate(&task, 1)?;
            let layout = task.layout()?;
            let toks = corpus[0].tokens();
            let items: Vec<&[usize]> = vec![toks.as_slice()];
            let tcfg = TrainConfig { seed: s, ..TrainConfig::default() };
            let mut model = generic_model(&tcfg, &task, derive_seed(s, 4, 4))?;
            let err = model_grad_check(
                &mut model,
                &items,
                &layout,
                LossTarget::Composite,
                1,
                7,
                GRAD_STEP,
                s,
            )?;
            worst = worst.max(err);
        }
        outcomes.push(CheckOutcome {
            name: "composite-default-config".to_string(),
            seeds: default_seeds,
            max_rel_err: worst,
            tol: GRAD_TOL,
            passed: worst < GRAD_TOL,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(outcomes)
}
