//! Cross-module format invariants: corpus records, checkpoints, dumps, and
//! the kv config grammar under adversarial inputs.

use proptest::prelude::*;

use vif_core::config::KvMap;
use vif_core::synth::{generate, SynthInstance, TaskConfig};

#[test]
fn corpus_records_roundtrip_across_configs() {
    for (h, w, colors, shapes, amb) in
        [(4usize, 4usize, 4usize, 2usize, 0.5f64), (8, 8, 8, 4, 0.25), (2, 5, 3, 3, 0.0)]
    {
        let cfg = TaskConfig {
            grid_h: h,
            grid_w: w,
            n_colors: colors,
            n_shapes: shapes,
            ambiguity: amb,
            seed: 13,
        };
        for inst in generate(&cfg, 50).unwrap() {
            let line = inst.encode();
            assert_eq!(SynthInstance::decode(&line).unwrap(), inst);
        }
    }
}

proptest! {
    /// The record parser never panics and never fabricates instances from
    /// junk that lacks the section structure.
    #[test]
    fn record_parser_is_total(line in ".{0,200}") {
        let _ = SynthInstance::decode(&line);
    }

    /// kv parsing never panics, and anything it accepts re-renders to an
    /// equivalent map.
    #[test]
    fn kv_parser_is_total_and_idempotent(text in "[ -~\n]{0,300}") {
        if let Ok(kv) = KvMap::parse(&text) {
            let rendered = kv.render();
            let back = KvMap::parse(&rendered).unwrap();
            prop_assert_eq!(kv, back);
        }
    }

    /// Encoded corpus lines survive arbitrary whitespace padding.
    #[test]
    fn records_tolerate_surrounding_whitespace(seed in 0u64..500) {
        let cfg = TaskConfig { grid_h: 3, grid_w: 3, n_colors: 3, n_shapes: 2, ambiguity: 0.0, seed };
        let inst = &generate(&cfg, 1).unwrap()[0];
        let padded = format!("  {}   ", inst.encode());
        prop_assert_eq!(&SynthInstance::decode(padded.trim()).unwrap(), inst);
    }
}
