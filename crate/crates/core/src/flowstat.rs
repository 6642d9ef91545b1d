//! Attention-flow diagnostics: how much attention lands on visual tokens,
//! how it is distributed over them, and how both change across layers.
//!
//! The binary attention-dump format lets a forward pass be analyzed offline:
//!
//! ```text
//! magic   7 bytes  "VIFADP1"
//! version u32 LE   (1)
//! n_layers, n_heads, T               u32 LE each
//! visual/question/answer span bounds 6 x u32 LE
//! grid_h, grid_w                     u32 LE
//! payload: per layer, per head, row-major T*T probabilities, f32 LE
//! ```
//!
//! Probabilities are stored at f32 (space); all statistics run at f64.

use std::io::{Read, Write};

use crate::backbone::{visibility_mask, AttentionTensor, ModalityLayout};
use crate::error::{Result, VifError};

const MODULE: &str = "flowstat";
pub const DUMP_MAGIC: &[u8; 7] = b"VIFADP1";
pub const DUMP_VERSION: u32 = 1;
/// Row-sum tolerance for dump validation (payload is f32-quantized).
const DUMP_ROW_TOL: f64 = 1e-4;

/// Which query rows enter a statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryScope {
    /// Answer-span rows; at inference (empty answer) the final context row,
    /// which is the one generating the first answer token.
    GenerationPositions,
    /// Every text row (question + answer).
    AllTextPositions,
}

impl QueryScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gen" => Ok(QueryScope::GenerationPositions),
            "text" => Ok(QueryScope::AllTextPositions),
            _ => Err(VifError::config(MODULE, format!("unknown scope '{s}' (gen|text)"))),
        }
    }

    /// Query rows selected by this scope under `layout`.
    pub fn rows(&self, layout: &ModalityLayout) -> Vec<usize> {
        match self {
            QueryScope::GenerationPositions => {
                if layout.n_answer() > 0 {
                    (layout.answer.0..layout.answer.1).collect()
                } else {
                    vec![layout.seq_len() - 1]
                }
            }
            QueryScope::AllTextPositions => (layout.question.0..layout.answer.1).collect(),
        }
    }
}

/// Mean over in-scope (head, row) pairs of the attention mass landing on
/// visual key columns.
pub fn vision_attention_ratio(
    attn: &AttentionTensor,
    layout: &ModalityLayout,
    scope: QueryScope,
) -> Result<f64> {
    let rows = scope.rows(layout);
    if rows.is_empty() {
        return Err(VifError::contract(MODULE, "empty query scope"));
    }
    let t = attn.t;
    let nv = layout.n_visual();
    let mut acc = 0.0;
    for h in 0..attn.n_heads {
        let hp = attn.head(h);
        for &r in &rows {
            acc += hp[r * t..r * t + nv].iter().sum::<f64>();
        }
    }
    Ok(acc / (attn.n_heads * rows.len()) as f64)
}

/// Entropy statistic with its exclusion count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyStat {
    /// Mean Shannon entropy (natural log) of the renormalized visual-column
    /// attention, over included (head, row) pairs.
    pub mean: f64,
    pub rows_used: usize,
    /// (head, row) pairs excluded for having zero visual mass.
    pub rows_excluded: usize,
}

/// Per in-scope row: restrict to visual columns, renormalize, Shannon
/// entropy; mean over (head, row) pairs. Zero-visual-mass rows are excluded
/// and counted.
pub fn visual_attention_entropy(
    attn: &AttentionTensor,
    layout: &ModalityLayout,
    scope: QueryScope,
) -> Result<EntropyStat> {
    let rows = scope.rows(layout);
    if rows.is_empty() {
        return Err(VifError::contract(MODULE, "empty query scope"));
    }
    let t = attn.t;
    let nv = layout.n_visual();
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for h in 0..attn.n_heads {
        let hp = attn.head(h);
        for &r in &rows {
            let vis = &hp[r * t..r * t + nv];
            let mass: f64 = vis.iter().sum();
            if mass <= 0.0 {
                excluded += 1;
                continue;
            }
            let mut e = 0.0;
            for p in vis {
                if *p > 0.0 {
                    let q = p / mass;
                    e -= q * q.ln();
                }
            }
            acc += e;
            used += 1;
        }
    }
    if used == 0 {
        return Err(VifError::contract(MODULE, "every in-scope row had zero visual mass"));
    }
    Ok(EntropyStat { mean: acc / used as f64, rows_used: used, rows_excluded: excluded })
}

// ── Attention dumps ──────────────────────────────────────────────────

/// All layers' attention probabilities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub layout: ModalityLayout,
    pub n_heads: usize,
    /// Per layer, `[n_heads * T * T]` probabilities.
    pub layers: Vec<Vec<f64>>,
}

impl AttentionDump {
    pub fn attention(&self, layer: usize) -> AttentionTensor {
        AttentionTensor {
            n_heads: self.n_heads,
            t: self.layout.seq_len(),
            probs: self.layers[layer].clone(),
            mask: visibility_mask(&self.layout),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_dump<W: Write>(w: &mut W, dump: &AttentionDump) -> Result<()> {
    let t = dump.layout.seq_len();
    let mut head = Vec::with_capacity(64);
    head.extend_from_slice(DUMP_MAGIC);
    put_u32(&mut head, DUMP_VERSION);
    put_u32(&mut head, dump.layers.len() as u32);
    put_u32(&mut head, dump.n_heads as u32);
    put_u32(&mut head, t as u32);
    for v in [
        dump.layout.visual.0,
        dump.layout.visual.1,
        dump.layout.question.0,
        dump.layout.question.1,
        dump.layout.answer.0,
        dump.layout.answer.1,
        dump.layout.grid_h,
        dump.layout.grid_w,
    ] {
        put_u32(&mut head, v as u32);
    }
    w.write_all(&head)?;
    let mut buf = Vec::with_capacity(dump.n_heads * t * t * 4);
    for layer in &dump.layers {
        if layer.len() != dump.n_heads * t * t {
            return Err(VifError::shape(MODULE, "layer payload size inconsistent with header"));
        }
        buf.clear();
        for v in layer {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a, R: Read> {
    r: &'a mut R,
    offset: u64,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.r
            .read_exact(buf)
            .map_err(|_| VifError::format(MODULE, format!("truncated while reading {what}"), at))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Parse and validate a dump. Fails closed: any malformed header, truncated
/// payload, or invariant-violating row yields an error and no partial data.
pub fn read_dump<R: Read>(r: &mut R) -> Result<AttentionDump> {
    let mut cur = Cursor { r, offset: 0 };
    let mut magic = [0u8; 7];
    cur.exact(&mut magic, "magic")?;
    if &magic != DUMP_MAGIC {
        return Err(VifError::format(MODULE, "bad magic", 0));
    }
    let version = cur.u32("version")?;
    if version != DUMP_VERSION {
        return Err(VifError::format(MODULE, format!("unsupported version {version}"), 7));
    }
    let n_layers = cur.u32("n_layers")? as usize;
    let n_heads = cur.u32("n_heads")? as usize;
    let t = cur.u32("T")? as usize;
    let mut spans = [0usize; 8];
    for (i, s) in spans.iter_mut().enumerate() {
        *s = cur.u32(&format!("span[{i}]"))? as usize;
    }
    let layout = ModalityLayout {
        visual: (spans[0], spans[1]),
        question: (spans[2], spans[3]),
        answer: (spans[4], spans[5]),
        grid_h: spans[6],
        grid_w: spans[7],
    };
    let hdr_end = cur.offset;
    layout
        .validate()
        .map_err(|e| VifError::format(MODULE, format!("bad layout in header: {e}"), hdr_end))?;
    if layout.seq_len() != t {
        return Err(VifError::format(
            MODULE,
            format!("header T={t} vs layout length {}", layout.seq_len()),
            hdr_end,
        ));
    }
    if n_layers == 0 || n_heads == 0 {
        return Err(VifError::format(MODULE, "zero layers or heads", hdr_end));
    }

    let mask = visibility_mask(&layout);
    let mut layers = Vec::with_capacity(n_layers);
    let mut buf = vec![0u8; n_heads * t * t * 4];
    for l in 0..n_layers {
        cur.exact(&mut buf, &format!("layer {l} payload"))?;
        let probs: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let at = AttentionTensor { n_heads, t, probs, mask: mask.clone() };
        at.validate(DUMP_ROW_TOL).map_err(|e| {
            VifError::format(MODULE, format!("layer {l} violates invariants: {e}"), cur.offset)
        })?;
        layers.push(at.probs);
    }
    // Anything after the payload is unexpected.
    let mut one = [0u8; 1];
    if cur.r.read(&mut one)? != 0 {
        return Err(VifError::format(MODULE, "trailing bytes after payload", cur.offset));
    }
    Ok(AttentionDump { layout, n_heads, layers })
}

// ── Layer profiles ───────────────────────────────────────────────────

/// Per-layer summary of visual attention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub ratio: f64,
    pub entropy: f64,
    /// p5/p25/p50/p75/p95 of per-visual-token attention weights over
    /// in-scope (head, row) pairs.
    pub quantiles: [f64; 5],
}

/// Linear-interpolation quantile of already-sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

pub fn layer_profile(dump: &AttentionDump, scope: QueryScope) -> Result<Vec<LayerStats>> {
    let rows = scope.rows(&dump.layout);
    let nv = dump.layout.n_visual();
    let t = dump.layout.seq_len();
    let mut out = Vec::with_capacity(dump.layers.len());
    for layer in 0..dump.layers.len() {
        let at = dump.attention(layer);
        let ratio = vision_attention_ratio(&at, &dump.layout, scope)?;
        let entropy = visual_attention_entropy(&at, &dump.layout, scope)?.mean;
        let mut weights = Vec::with_capacity(dump.n_heads * rows.len() * nv);
        for h in 0..dump.n_heads {
            let hp = at.head(h);
            for &r in &rows {
                weights.extend_from_slice(&hp[r * t..r * t + nv]);
            }
        }
        weights.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = [0.05, 0.25, 0.5, 0.75, 0.95].map(|p| quantile_sorted(&weights, p));
        out.push(LayerStats { layer, ratio, entropy, quantiles: q });
    }
    Ok(out)
}

/// CSV rendering: `layer,ratio,entropy,p5,p25,p50,p75,p95` with one row per
/// layer. f64 values print in shortest round-trip form, so equal inputs give
/// byte-equal files.
pub fn stats_csv(stats: &[LayerStats]) -> String {
    let mut s = String::from("layer,ratio,entropy,p5,p25,p50,p75,p95\n");
    for st in stats {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            st.layer,
            st.ratio,
            st.entropy,
            st.quantiles[0],
            st.quantiles[1],
            st.quantiles[2],
            st.quantiles[3],
            st.quantiles[4],
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn layout_4v_2q_1a() -> ModalityLayout {
        ModalityLayout::new(4, 2, 1, 2, 2).unwrap()
    }

    /// Uniform-over-visible attention for a layout.
    fn uniform_attention(layout: &ModalityLayout, n_heads: usize) -> AttentionTensor {
        let t = layout.seq_len();
        let mask = visibility_mask(layout);
        let mut probs = vec![0.0; n_heads * t * t];
        for h in 0..n_heads {
            for r in 0..t {
                let vis: Vec<usize> = (0..t).filter(|j| mask[r * t + j]).collect();
                for &j in &vis {
                    probs[h * t * t + r * t + j] = 1.0 / vis.len() as f64;
                }
            }
        }
        AttentionTensor { n_heads, t, probs, mask }
    }

    /// Random row-stochastic attention over the visible positions.
    fn random_attention(layout: &ModalityLayout, n_heads: usize, rng: &mut StdRng) -> AttentionTensor {
        let t = layout.seq_len();
        let mask = visibility_mask(layout);
        let mut probs = vec![0.0; n_heads * t * t];
        for h in 0..n_heads {
            for r in 0..t {
                let vis: Vec<usize> = (0..t).filter(|j| mask[r * t + j]).collect();
                let raw: Vec<f64> = vis.iter().map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (j, w) in vis.iter().zip(raw.iter()) {
                    probs[h * t * t + r * t + j] = w / s;
                }
            }
        }
        AttentionTensor { n_heads, t, probs, mask }
    }

    #[test]
    fn uniform_rows_give_ratio_nv_over_visible() {
        // Last row sees everything, so its share is N_v / T.
        let layout = layout_4v_2q_1a();
        let at = uniform_attention(&layout, 2);
        let r = vision_attention_ratio(&at, &layout, QueryScope::GenerationPositions).unwrap();
        // Generation scope = the single answer row (row 6, sees all 7).
        assert!((r - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn all_visual_mass_gives_ratio_one_and_point_mass_zero_entropy() {
        let layout = layout_4v_2q_1a();
        let t = layout.seq_len();
        let mask = visibility_mask(&layout);
        let mut probs = vec![0.0; t * t];
        for r in 0..t {
            probs[r * t + 2] = 1.0; // all mass on visual column 2
        }
        let at = AttentionTensor { n_heads: 1, t, probs, mask };
        at.validate(1e-9).unwrap();
        let ratio = vision_attention_ratio(&at, &layout, QueryScope::AllTextPositions).unwrap();
        assert_eq!(ratio, 1.0);
        let ent = visual_attention_entropy(&at, &layout, QueryScope::AllTextPositions).unwrap();
        assert_eq!(ent.mean, 0.0);
        assert_eq!(ent.rows_excluded, 0);
    }

    #[test]
    fn uniform_over_64_visual_tokens_has_ln64_entropy() {
        let layout = ModalityLayout::new(64, 2, 1, 8, 8).unwrap();
        let at = uniform_attention(&layout, 3);
        let ent = visual_attention_entropy(&at, &layout, QueryScope::GenerationPositions).unwrap();
        assert!((ent.mean - 64f64.ln()).abs() < 1e-12);
        assert!((ent.mean - 4.158883083359672).abs() < 1e-12);
    }

    #[test]
    fn ratio_matches_double_loop_oracle() {
        let layout = layout_4v_2q_1a();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let at = random_attention(&layout, 3, &mut rng);
            let got = vision_attention_ratio(&at, &layout, QueryScope::AllTextPositions).unwrap();
            // Independent summation.
            let t = at.t;
            let rows = [4usize, 5, 6];
            let mut acc = 0.0;
            let mut cnt = 0;
            for h in 0..3 {
                for &r in &rows {
                    let mut s = 0.0;
                    for c in 0..4 {
                        s += at.probs[h * t * t + r * t + c];
                    }
                    acc += s;
                    cnt += 1;
                }
            }
            assert!((got - acc / cnt as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn statistics_are_invariant_to_head_permutation() {
        let layout = layout_4v_2q_1a();
        let mut rng = StdRng::seed_from_u64(6);
        let at = random_attention(&layout, 4, &mut rng);
        let tt = at.t * at.t;
        let mut permuted = at.clone();
        let order = [2usize, 0, 3, 1];
        for (dst, src) in order.iter().enumerate() {
            permuted.probs[dst * tt..(dst + 1) * tt]
                .copy_from_slice(&at.probs[src * tt..(src + 1) * tt]);
        }
        for scope in [QueryScope::GenerationPositions, QueryScope::AllTextPositions] {
            let r1 = vision_attention_ratio(&at, &layout, scope).unwrap();
            let r2 = vision_attention_ratio(&permuted, &layout, scope).unwrap();
            assert!((r1 - r2).abs() < 1e-15);
            let e1 = visual_attention_entropy(&at, &layout, scope).unwrap();
            let e2 = visual_attention_entropy(&permuted, &layout, scope).unwrap();
            assert!((e1.mean - e2.mean).abs() < 1e-15);
        }
    }

    #[test]
    fn dump_roundtrip_is_lossless_at_f32() {
        let layout = layout_4v_2q_1a();
        let mut rng = StdRng::seed_from_u64(7);
        let layers: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let at = random_attention(&layout, 2, &mut rng);
                // Quantize to f32 up front so the roundtrip is exact.
                at.probs.iter().map(|v| *v as f32 as f64).collect()
            })
            .collect();
        let dump = AttentionDump { layout, n_heads: 2, layers };
        let mut bytes = Vec::new();
        write_dump(&mut bytes, &dump).unwrap();
        let back = read_dump(&mut bytes.as_slice()).unwrap();
        assert_eq!(dump, back);
    }

    #[test]
    fn truncated_dump_fails_with_offset() {
        let layout = layout_4v_2q_1a();
        let mut rng = StdRng::seed_from_u64(8);
        let at = random_attention(&layout, 2, &mut rng);
        let dump = AttentionDump {
            layout,
            n_heads: 2,
            layers: vec![at.probs.iter().map(|v| *v as f32 as f64).collect()],
        };
        let mut bytes = Vec::new();
        write_dump(&mut bytes, &dump).unwrap();
        bytes.truncate(bytes.len() - 3);
        match read_dump(&mut bytes.as_slice()) {
            Err(VifError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let bytes = b"NOTADMP_____________".to_vec();
        match read_dump(&mut bytes.as_slice()) {
            Err(VifError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_dump_has_constant_ratio_across_layers() {
        let layout = layout_4v_2q_1a();
        let at = uniform_attention(&layout, 2);
        let dump = AttentionDump {
            layout,
            n_heads: 2,
            layers: vec![at.probs.clone(), at.probs.clone(), at.probs],
        };
        let stats = layer_profile(&dump, QueryScope::GenerationPositions).unwrap();
        assert_eq!(stats.len(), 3);
        for s in &stats {
            assert!((s.ratio - stats[0].ratio).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_built_two_layer_dump_matches_hand_computation() {
        // One visual token, one question token, one answer token; 1 head.
        let layout = ModalityLayout::new(1, 1, 1, 1, 1).unwrap();
        let t = 3;
        // Row 2 (the answer row, all visible): layer 0 puts 0.5 on the
        // visual column; layer 1 puts 0.25.
        let l0 = vec![
            1.0, 0.0, 0.0, //
            0.7, 0.3, 0.0, //
            0.5, 0.3, 0.2,
        ];
        let l1 = vec![
            1.0, 0.0, 0.0, //
            0.6, 0.4, 0.0, //
            0.25, 0.5, 0.25,
        ];
        let dump = AttentionDump { layout, n_heads: 1, layers: vec![l0, l1] };
        let stats = layer_profile(&dump, QueryScope::GenerationPositions).unwrap();
        assert!((stats[0].ratio - 0.5).abs() < 1e-15);
        assert!((stats[1].ratio - 0.25).abs() < 1e-15);
        // Single visual token: renormalized entropy is 0; quantiles all equal
        // the single weight.
        assert_eq!(stats[0].entropy, 0.0);
        assert_eq!(stats[0].quantiles, [0.5; 5]);
        assert_eq!(stats[1].quantiles, [0.25; 5]);
        let _ = t;
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let stats = vec![LayerStats { layer: 0, ratio: 0.5, entropy: 0.0, quantiles: [0.1; 5] }];
        let csv = stats_csv(&stats);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "layer,ratio,entropy,p5,p25,p50,p75,p95");
        assert_eq!(lines.next().unwrap(), "0,0.5,0,0.1,0.1,0.1,0.1,0.1");
    }
}
