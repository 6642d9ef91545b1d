//! Synthetic grid-world VQA with controlled ambiguity.
//!
//! Each instance is a fully filled color/shape grid plus a templated
//! question and a single-token answer. Three templates cover single-cell
//! lookup, attribute search, and a relational ("left of") hop:
//!
//!   color-at     "color of the cell at (r, c)?"        answer: color
//!   row-of       "row holding the <shape, color> cell?" answer: row
//!   color-left   "color left of the <shape, color>?"    answer: color
//!
//! Ambiguous instances place exactly two cells matching the question
//! predicate whose implied answers differ; the recorded answer designates
//! one of them, so (grid, question) alone admits two answer-consistent
//! hypotheses. The per-corpus ambiguity rate is met exactly by count.

use std::collections::BTreeSet;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::backbone::ModalityLayout;
use crate::error::{Result, VifError};
use crate::model::derive_seed;

const MODULE: &str = "synth-tasks";
/// Question span length shared by all templates.
pub const QUESTION_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    ColorAt,
    RowOf,
    ColorLeftOf,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::ColorAt, Template::RowOf, Template::ColorLeftOf];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// Fraction of instances that are ambiguous, met exactly by count.
    pub ambiguity: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { grid_h: 8, grid_w: 8, n_colors: 8, n_shapes: 4, ambiguity: 0.5, seed: 0 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.n_colors == 0 || self.n_shapes == 0 {
            return Err(VifError::config(MODULE, "grid and patch dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(VifError::config(MODULE, "ambiguity rate must lie in [0, 1]"));
        }
        if self.grid_w < 2 {
            return Err(VifError::config(
                MODULE,
                "relational template needs grid_w >= 2 (a left neighbor must exist)",
            ));
        }
        if self.ambiguity > 0.0 {
            if self.grid_h < 2 {
                return Err(VifError::config(
                    MODULE,
                    "ambiguous row-of instances need grid_h >= 2 (two matches in different rows)",
                ));
            }
            if self.n_colors < 3 {
                return Err(VifError::config(
                    MODULE,
                    "ambiguous relational instances need n_colors >= 3 \
                     (two neighbor colors distinct from the predicate color)",
                ));
            }
            if self.grid_h * (self.grid_w - 1) < 2 {
                return Err(VifError::config(
                    MODULE,
                    "grid too small to hold two relational matches with left neighbors",
                ));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> TaskVocab {
        TaskVocab {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            n_colors: self.n_colors,
            n_shapes: self.n_shapes,
        }
    }

    pub fn layout(&self) -> Result<ModalityLayout> {
        ModalityLayout::new(
            self.grid_h * self.grid_w,
            QUESTION_LEN,
            1,
            self.grid_h,
            self.grid_w,
        )
    }
}

/// Token id assignments: patch ids first, then template/row/col/shape/color
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskVocab {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
}

impl TaskVocab {
    pub fn n_patches(&self) -> usize {
        self.n_colors * self.n_shapes
    }

    pub fn patch(&self, color: usize, shape: usize) -> usize {
        color * self.n_shapes + shape
    }

    pub fn patch_color(&self, patch: usize) -> usize {
        patch / self.n_shapes
    }

    pub fn patch_shape(&self, patch: usize) -> usize {
        patch % self.n_shapes
    }

    pub fn template_tok(&self, t: Template) -> usize {
        self.n_patches()
            + match t {
                Template::ColorAt => 0,
                Template::RowOf => 1,
                Template::ColorLeftOf => 2,
            }
    }

    pub fn template_of(&self, tok: usize) -> Result<Template> {
        let base = self.n_patches();
        match tok.checked_sub(base) {
            Some(0) => Ok(Template::ColorAt),
            Some(1) => Ok(Template::RowOf),
            Some(2) => Ok(Template::ColorLeftOf),
            _ => Err(VifError::vocab(MODULE, format!("token {tok} is not a template id"))),
        }
    }

    pub fn row_tok(&self, r: usize) -> usize {
        self.n_patches() + 3 + r
    }

    pub fn col_tok(&self, c: usize) -> usize {
        self.n_patches() + 3 + self.grid_h + c
    }

    pub fn shape_tok(&self, s: usize) -> usize {
        self.n_patches() + 3 + self.grid_h + self.grid_w + s
    }

    pub fn color_tok(&self, c: usize) -> usize {
        self.n_patches() + 3 + self.grid_h + self.grid_w + self.n_shapes + c
    }

    pub fn size(&self) -> usize {
        self.n_patches() + 3 + self.grid_h + self.grid_w + self.n_shapes + self.n_colors
    }

    /// Closed answer set for a template (restricted greedy decoding).
    pub fn answer_options(&self, t: Template) -> Vec<usize> {
        match t {
            Template::ColorAt | Template::ColorLeftOf => {
                (0..self.n_colors).map(|c| self.color_tok(c)).collect()
            }
            Template::RowOf => (0..self.grid_h).map(|r| self.row_tok(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthInstance {
    /// Cell patch ids, row-major `grid_h * grid_w`.
    pub grid: Vec<usize>,
    /// Template token plus two argument tokens.
    pub question: Vec<usize>,
    /// Single answer token.
    pub answer: Vec<usize>,
    /// Cells that justify the recorded answer.
    pub target_cells: BTreeSet<usize>,
    /// Cells matching the question predicate without justifying the answer.
    pub distractor_cells: BTreeSet<usize>,
}

impl SynthInstance {
    pub fn is_ambiguous(&self) -> bool {
        !self.distractor_cells.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.grid.clone();
        t.extend_from_slice(&self.question);
        t.extend_from_slice(&self.answer);
        t
    }

    /// Tokens without the answer (inference-time view).
    pub fn context_tokens(&self) -> Vec<usize> {
        let mut t = self.grid.clone();
        t.extend_from_slice(&self.question);
        t
    }

    pub fn template(&self, vocab: &TaskVocab) -> Result<Template> {
        self.template_from_question(vocab)
    }

    fn template_from_question(&self, vocab: &TaskVocab) -> Result<Template> {
        vocab.template_of(self.question[0])
    }

    /// Flat text record: `GRID .. | Q .. | A .. | TGT .. | DIS ..`.
    pub fn encode(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        let tgt: Vec<usize> = self.target_cells.iter().copied().collect();
        let dis: Vec<usize> = self.distractor_cells.iter().copied().collect();
        format!(
            "GRID {} | Q {} | A {} | TGT {} | DIS {}",
            join(&self.grid),
            join(&self.question),
            join(&self.answer),
            join(&tgt),
            join(&dis)
        )
    }

    pub fn decode(line: &str) -> Result<SynthInstance> {
        let mut sections = line.split('|').map(str::trim);
        let mut section = |tag: &str| -> Result<Vec<usize>> {
            let s = sections
                .next()
                .ok_or_else(|| VifError::format(MODULE, format!("missing {tag} section"), 0))?;
            let rest = s.strip_prefix(tag).ok_or_else(|| {
                VifError::format(MODULE, format!("expected section tag {tag}"), 0)
            })?;
            rest.split_whitespace()
                .map(|w| {
                    w.parse::<usize>().map_err(|_| {
                        VifError::format(MODULE, format!("bad integer '{w}' in {tag}"), 0)
                    })
                })
                .collect()
        };
        let grid = section("GRID")?;
        let question = section("Q")?;
        let answer = section("A")?;
        let tgt = section("TGT")?;
        let dis = section("DIS")?;
        if grid.is_empty() || question.len() != QUESTION_LEN || answer.len() != 1 {
            return Err(VifError::format(MODULE, "bad section lengths", 0));
        }
        if tgt.is_empty() {
            return Err(VifError::format(MODULE, "empty target set", 0));
        }
        Ok(SynthInstance {
            grid,
            question,
            answer,
            target_cells: tgt.into_iter().collect(),
            distractor_cells: dis.into_iter().collect(),
        })
    }
}

/// Total importance mass on the instance's target cells.
pub fn localization_score(v_hat: &[f64], inst: &SynthInstance) -> Result<f64> {
    if v_hat.len() != inst.grid.len() {
        return Err(VifError::layout(
            MODULE,
            format!("map length {} vs grid size {}", v_hat.len(), inst.grid.len()),
        ));
    }
    Ok(inst.target_cells.iter().map(|&c| v_hat[c]).sum())
}

// ── Generation ───────────────────────────────────────────────────────

struct Gen<'c> {
    cfg: &'c TaskConfig,
    vocab: TaskVocab,
}

impl<'c> Gen<'c> {
    /// All (cell, implied answer token) hypotheses the question admits on
    /// this grid; used both for construction checks and for the invariant
    /// enumeration.
    fn hypotheses(&self, grid: &[usize], question: &[usize]) -> Result<Vec<(usize, usize)>> {
        let v = &self.vocab;
        let t = v.template_of(question[0])?;
        let w = self.cfg.grid_w;
        match t {
            Template::ColorAt => {
                let r = question[1] - v.row_tok(0);
                let c = question[2] - v.col_tok(0);
                let cell = r * w + c;
                Ok(vec![(cell, v.color_tok(v.patch_color(grid[cell])))])
            }
            Template::RowOf => {
                let s = question[1] - v.shape_tok(0);
                let col = question[2] - v.color_tok(0);
                let patch = v.patch(col, s);
                Ok(grid
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p == patch)
                    .map(|(i, _)| (i, v.row_tok(i / w)))
                    .collect())
            }
            Template::ColorLeftOf => {
                let s = question[1] - v.shape_tok(0);
                let col = question[2] - v.color_tok(0);
                let patch = v.patch(col, s);
                Ok(grid
                    .iter()
                    .enumerate()
                    .filter(|(i, p)| **p == patch && i % w > 0)
                    .map(|(i, _)| (i, v.color_tok(v.patch_color(grid[i - 1]))))
                    .collect())
            }
        }
    }

    fn build(&self, rng: &mut ChaCha8Rng, ambiguous: bool) -> Result<SynthInstance> {
        let v = &self.vocab;
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        let n = h * w;
        let n_patches = v.n_patches();

        let mut grid: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_patches)).collect();
        let template = if ambiguous {
            [Template::RowOf, Template::ColorLeftOf][rng.random_range(0..2)]
        } else {
            Template::ALL[rng.random_range(0..3)]
        };

        let inst = match template {
            Template::ColorAt => {
                let cell = rng.random_range(0..n);
                let (r, c) = (cell / w, cell % w);
                let question = vec![v.template_tok(template), v.row_tok(r), v.col_tok(c)];
                let answer = vec![v.color_tok(v.patch_color(grid[cell]))];
                SynthInstance {
                    grid,
                    question,
                    answer,
                    target_cells: BTreeSet::from([cell]),
                    distractor_cells: BTreeSet::new(),
                }
            }
            Template::RowOf => {
                let shape = rng.random_range(0..self.cfg.n_shapes);
                let color = rng.random_range(0..self.cfg.n_colors);
                let patch = v.patch(color, shape);
                scrub(&mut grid, patch, n_patches, rng);
                let question = vec![v.template_tok(template), v.shape_tok(shape), v.color_tok(color)];
                if !ambiguous {
                    let cell = rng.random_range(0..n);
                    grid[cell] = patch;
                    SynthInstance {
                        grid,
                        question,
                        answer: vec![v.row_tok(cell / w)],
                        target_cells: BTreeSet::from([cell]),
                        distractor_cells: BTreeSet::new(),
                    }
                } else {
                    // Two matches in different rows.
                    let a = rng.random_range(0..n);
                    let b = loop {
                        let b = rng.random_range(0..n);
                        if b / w != a / w {
                            break b;
                        }
                    };
                    grid[a] = patch;
                    grid[b] = patch;
                    let (tgt, dis) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                    SynthInstance {
                        grid,
                        question,
                        answer: vec![v.row_tok(tgt / w)],
                        target_cells: BTreeSet::from([tgt]),
                        distractor_cells: BTreeSet::from([dis]),
                    }
                }
            }
            Template::ColorLeftOf => {
                let shape = rng.random_range(0..self.cfg.n_shapes);
                let color = rng.random_range(0..self.cfg.n_colors);
                let patch = v.patch(color, shape);
                scrub(&mut grid, patch, n_patches, rng);
                let question = vec![v.template_tok(template), v.shape_tok(shape), v.color_tok(color)];
                let pick_ref = |rng: &mut ChaCha8Rng| loop {
                    let cell = rng.random_range(0..n);
                    if cell % w > 0 {
                        break cell;
                    }
                };
                if !ambiguous {
                    let cell = pick_ref(rng);
                    grid[cell] = patch;
                    let answer = vec![v.color_tok(v.patch_color(grid[cell - 1]))];
                    SynthInstance {
                        grid,
                        question,
                        answer,
                        target_cells: BTreeSet::from([cell, cell - 1]),
                        distractor_cells: BTreeSet::new(),
                    }
                } else {
                    // Two reference cells whose left neighbors are distinct
                    // cells carrying different colors, both differing from
                    // the predicate color so the neighbors never match.
                    let (a, b) = loop {
                        let a = pick_ref(rng);
                        let b = pick_ref(rng);
                        let (la, lb) = (a - 1, b - 1);
                        if a != b && la != b && lb != a && la != lb {
                            break (a, b);
                        }
                    };
                    grid[a] = patch;
                    grid[b] = patch;
                    let others: Vec<usize> =
                        (0..self.cfg.n_colors).filter(|c| *c != color).collect();
                    let ca = others[rng.random_range(0..others.len())];
                    let cb = loop {
                        let c = others[rng.random_range(0..others.len())];
                        if c != ca {
                            break c;
                        }
                    };
                    grid[a - 1] = v.patch(ca, rng.random_range(0..self.cfg.n_shapes));
                    grid[b - 1] = v.patch(cb, rng.random_range(0..self.cfg.n_shapes));
                    let ((tgt, tcol), dis) =
                        if rng.random_bool(0.5) { ((a, ca), b) } else { ((b, cb), a) };
                    SynthInstance {
                        grid,
                        question,
                        answer: vec![v.color_tok(tcol)],
                        target_cells: BTreeSet::from([tgt, tgt - 1]),
                        distractor_cells: BTreeSet::from([dis]),
                    }
                }
            }
        };

        // Constructed enumeration check: the question must admit exactly the
        // intended hypothesis structure.
        let hyps = self.hypotheses(&inst.grid, &inst.question)?;
        let answers: BTreeSet<usize> = hyps.iter().map(|(_, a)| *a).collect();
        let ok = if ambiguous {
            hyps.len() == 2 && answers.len() == 2 && answers.contains(&inst.answer[0])
        } else {
            answers.len() == 1 && answers.contains(&inst.answer[0])
        };
        if !ok {
            return Err(VifError::contract(MODULE, "hypothesis enumeration failed"));
        }
        Ok(inst)
    }
}

/// Redraw every cell holding `patch` so the predicate has no stray matches.
fn scrub(grid: &mut [usize], patch: usize, n_patches: usize, rng: &mut ChaCha8Rng) {
    for cell in grid.iter_mut() {
        while *cell == patch {
            *cell = rng.random_range(0..n_patches);
        }
        debug_assert!(n_patches > 1 || *cell != patch);
    }
}

/// Deterministic corpus generation. The declared ambiguity rate is met
/// exactly: `round(rate * n)` instances are ambiguous. Duplicate records are
/// regenerated so every line is unique.
pub fn generate(cfg: &TaskConfig, n: usize) -> Result<Vec<SynthInstance>> {
    cfg.validate()?;
    if n == 0 {
        return Err(VifError::contract(MODULE, "need n >= 1"));
    }
    if cfg.n_colors * cfg.n_shapes < 2 {
        return Err(VifError::config(MODULE, "need at least two distinct patches"));
    }
    let gen = Gen { cfg, vocab: cfg.vocab() };
    let n_amb = (cfg.ambiguity * n as f64).round() as usize;
    let mut flags = vec![false; n];
    flags.iter_mut().take(n_amb).for_each(|f| *f = true);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA5, 0));
    flags.shuffle(&mut shuffle_rng);

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for (i, amb) in flags.into_iter().enumerate() {
        let mut nonce = 0u64;
        loop {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64, nonce));
            match gen.build(&mut rng, amb) {
                Ok(inst) => {
                    let h = fnv1a(inst.encode().as_bytes());
                    if seen.insert(h) {
                        out.push(inst);
                        break;
                    }
                }
                Err(_) if nonce < 64 => {}
                Err(e) => {
                    return Err(VifError::config(
                        MODULE,
                        format!("could not satisfy constraints for instance {i}: {e}"),
                    ))
                }
            }
            nonce += 1;
            if nonce > 4096 {
                return Err(VifError::config(
                    MODULE,
                    format!("instance {i}: exhausted retries (config too constrained)"),
                ));
            }
        }
    }
    Ok(out)
}

/// FNV-1a content hash used for corpus dedup and split disjointness.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

// ── Corpus files ─────────────────────────────────────────────────────

/// Write instances with a config header comment.
pub fn write_corpus<W: std::io::Write>(
    w: &mut W,
    cfg: &TaskConfig,
    instances: &[SynthInstance],
) -> Result<()> {
    writeln!(w, "# vif-corpus v1")?;
    writeln!(
        w,
        "# grid_h={} grid_w={} n_colors={} n_shapes={} ambiguity={} seed={}",
        cfg.grid_h, cfg.grid_w, cfg.n_colors, cfg.n_shapes, cfg.ambiguity, cfg.seed
    )?;
    for inst in instances {
        writeln!(w, "{}", inst.encode())?;
    }
    Ok(())
}

/// Read a corpus; the header, when present, restores the generating config.
pub fn read_corpus<R: std::io::BufRead>(r: R) -> Result<(Option<TaskConfig>, Vec<SynthInstance>)> {
    let mut cfg: Option<TaskConfig> = None;
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut c = cfg.unwrap_or_default();
            let mut saw = false;
            for kv in rest.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    saw = true;
                    match k {
                        "grid_h" => c.grid_h = parse_num(k, v)?,
                        "grid_w" => c.grid_w = parse_num(k, v)?,
                        "n_colors" => c.n_colors = parse_num(k, v)?,
                        "n_shapes" => c.n_shapes = parse_num(k, v)?,
                        "seed" => c.seed = parse_num(k, v)?,
                        "ambiguity" => {
                            c.ambiguity = v.parse().map_err(|_| {
                                VifError::config(MODULE, format!("bad header value {k}={v}"))
                            })?
                        }
                        _ => saw = false,
                    }
                }
            }
            if saw {
                cfg = Some(c);
            }
            continue;
        }
        out.push(SynthInstance::decode(line)?);
    }
    Ok((cfg, out))
}

fn parse_num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| VifError::config(MODULE, format!("bad header value {k}={v}")))
}
