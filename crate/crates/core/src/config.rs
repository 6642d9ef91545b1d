//! Flat `key=value` configuration text: UTF-8, one pair per line, `#`
//! comments. Used for config files, checkpoint config blocks, and corpus
//! headers. Keys render sorted, so equal maps serialize byte-identically.

use std::collections::BTreeMap;

use crate::attender::AttenderConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Result, VifError};
use crate::inject::{AblationMode, LayerPatchPlan};
use crate::model::ModelConfig;

const MODULE: &str = "config";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap(pub BTreeMap<String, String>);

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(VifError::config(
                    MODULE,
                    format!("line {}: expected key=value, got '{line}'", lineno + 1),
                ));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvMap(map))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn set(&mut self, k: &str, v: impl ToString) {
        self.0.insert(k.to_string(), v.to_string());
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    pub fn require(&self, k: &str) -> Result<&str> {
        self.get(k)
            .ok_or_else(|| VifError::config(MODULE, format!("missing key '{k}'")))
    }

    pub fn get_usize(&self, k: &str, default: usize) -> Result<usize> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| VifError::config(MODULE, format!("bad integer {k}={v}"))),
        }
    }

    pub fn get_u64(&self, k: &str, default: u64) -> Result<u64> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| VifError::config(MODULE, format!("bad integer {k}={v}"))),
        }
    }

    pub fn get_f64(&self, k: &str, default: f64) -> Result<f64> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| VifError::config(MODULE, format!("bad number {k}={v}"))),
        }
    }

    pub fn get_bool(&self, k: &str, default: bool) -> Result<bool> {
        match self.get(k) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(VifError::config(MODULE, format!("bad boolean {k}={v}"))),
        }
    }
}

/// Model-structure keys (the checkpoint config block).
pub fn model_config_to_kv(cfg: &ModelConfig) -> KvMap {
    let mut kv = KvMap::default();
    kv.set("n_layers", cfg.backbone.n_layers);
    kv.set("n_heads", cfg.backbone.n_heads);
    kv.set("d_model", cfg.backbone.d_model);
    kv.set("vocab_size", cfg.backbone.vocab_size);
    kv.set("max_seq", cfg.backbone.max_seq);
    kv.set("grid_h", cfg.backbone.grid_h);
    kv.set("grid_w", cfg.backbone.grid_w);
    kv.set("attender_heads", cfg.attender.n_heads);
    kv.set("d_z", cfg.attender.d_z);
    kv.set("k_components", cfg.attender.k);
    kv.set("plan", cfg.plan.to_plan_string());
    kv.set("mode", cfg.mode.as_str());
    kv.set("learnable_alpha", cfg.learnable_alpha);
    kv.set("map_temp", cfg.map_temp);
    kv
}

pub fn model_config_from_kv(kv: &KvMap) -> Result<ModelConfig> {
    let backbone = BackboneConfig {
        n_layers: kv.get_usize("n_layers", 8)?,
        n_heads: kv.get_usize("n_heads", 4)?,
        d_model: kv.get_usize("d_model", 64)?,
        vocab_size: kv.require("vocab_size")?.parse().map_err(|_| {
            VifError::config(MODULE, "bad vocab_size")
        })?,
        max_seq: kv.require("max_seq")?.parse().map_err(|_| {
            VifError::config(MODULE, "bad max_seq")
        })?,
        grid_h: kv.get_usize("grid_h", 8)?,
        grid_w: kv.get_usize("grid_w", 8)?,
    };
    let attender = AttenderConfig {
        d_model: backbone.d_model,
        n_heads: kv.get_usize("attender_heads", 4)?,
        d_z: kv.get_usize("d_z", 32)?,
        k: kv.get_usize("k_components", 16)?,
    };
    let plan = match kv.get("plan") {
        Some(s) => LayerPatchPlan::parse(s)?,
        None => LayerPatchPlan::default_for_depth(backbone.n_layers),
    };
    let mode = AblationMode::parse(kv.get("mode").unwrap_or("full"))?;
    let cfg = ModelConfig {
        backbone,
        attender,
        plan,
        mode,
        learnable_alpha: kv.get_bool("learnable_alpha", false)?,
        map_temp: kv.get_f64("map_temp", crate::mixture::MAP_TEMP)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
