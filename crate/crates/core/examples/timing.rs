use std::time::Instant;
use vif_core::inject::LayerPatchPlan;
use vif_core::synth::{generate, TaskConfig};
use vif_core::training::{corpus_hashes, evaluate, train, TrainConfig};

fn probe(label: &str, task: TaskConfig, tcfg: TrainConfig, n_train: usize, n_eval: usize) {
    let all = generate(&task, n_train + n_eval).unwrap();
    let (tr, ev) = all.split_at(n_train);
    let hashes = corpus_hashes(tr);
    let t = Instant::now();
    let out = train(&tcfg, &task, tr, None, |_, _| Ok(())).unwrap();
    let r = evaluate(&out.model, &task, ev, Some(&hashes)).unwrap();
    println!(
        "{label}: {:.1}min recon {:.3} | acc {:.3} amb {:.3} un {:.3}",
        t.elapsed().as_secs_f64() / 60.0,
        out.log.last().unwrap().breakdown.recon,
        r.accuracy, r.accuracy_ambiguous, r.accuracy_unambiguous
    );
}

fn main() {
    let t88 = TaskConfig { seed: 11, ..TaskConfig::default() };
    let t88e = TaskConfig { n_colors: 4, n_shapes: 2, seed: 11, ..TaskConfig::default() };
    let base = TrainConfig {
        d_model: 32, d_z: 16, batch: 16, lr: 1e-3, seed: 3,
        plan: Some(LayerPatchPlan::empty()),
        ..TrainConfig::default()
    };
    probe("P5 8x8 4co2sh d32 L8 b16", t88e, base.clone(), 4096, 512);
    probe("P6 8x8 d64 L4 b16", t88, TrainConfig { d_model: 64, d_z: 32, n_layers: 4, ..base.clone() }, 4096, 512);
    probe("P7 8x8 d32 L4 b16", t88, TrainConfig { n_layers: 4, ..base.clone() }, 4096, 512);
    probe("P8 8x8 d32 L8 b16 s6000", t88, TrainConfig { steps: 6000, ..base.clone() }, 8192, 512);
}
