//! `vif` — generate data, train, evaluate, run ablations, analyze attention
//! dumps, and render importance maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation/invariant failure,
//! 3 numeric failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vif_core::checkpoint;
use vif_core::config::KvMap;
use vif_core::error::{Result, VifError};
use vif_core::flowstat::{self, AttentionDump, QueryScope};
use vif_core::model::{ForwardSpec, VifModel};
use vif_core::suite;
use vif_core::synth::{self, SynthInstance, TaskConfig};
use vif_core::training::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "vif", version, about = "Variational information-flow toy stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, default_value_t = 8)]
    grid_h: usize,
    #[arg(long, default_value_t = 8)]
    grid_w: usize,
    #[arg(long, default_value_t = 8)]
    colors: usize,
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
}

impl TaskArgs {
    fn to_config(&self, seed: u64) -> TaskConfig {
        TaskConfig {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            n_colors: self.colors,
            n_shapes: self.shapes,
            ambiguity: self.ambiguity,
            seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grid-world VQA corpus.
    Gen {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of training instances written to --out.
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Additional held-out instances written to --holdout-out.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },
    /// Train a model on a corpus (the corpus header supplies the task).
    Train {
        /// Flat key=value config file; flags override file keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Repeated key=value overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV output path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from an existing checkpoint (two-stage recipe).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the train/eval disjointness check.
        #[arg(long, default_value_t = false)]
        allow_overlap: bool,
    },
    /// Train and evaluate every ablation mode under one seed.
    Ablate {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 2048)]
        train_n: usize,
        #[arg(long, default_value_t = 512)]
        eval_n: usize,
        /// Comparison CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-profile statistics from an attention dump.
    Analyze {
        #[arg(long)]
        dump: PathBuf,
        /// gen | text
        #[arg(long, default_value = "gen")]
        scope: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an instance's decoded importance map as PGM + CSV.
    RenderMap {
        /// Checkpoint; omitted means a fresh (zero-headed) initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Plan pair to render (by position in the plan).
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Output base path; writes <out>.pgm and <out>.csv.
        #[arg(long)]
        out: PathBuf,
        /// Init seed when no checkpoint is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a forward pass and write every layer's attention to a dump file.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Force alpha = 0 (uninjected baseline).
        #[arg(long, default_value_t = false)]
        alpha0: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the registered gradient checks; exits 0 iff all pass.
    Gradcheck {
        #[arg(long, default_value_t = 22)]
        micro_seeds: usize,
        #[arg(long, default_value_t = 12)]
        default_seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help/--version print and succeed; anything else is usage.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3u8 } else { 2u8 })
        }
    }
}

fn load_corpus(path: &Path) -> Result<(Option<TaskConfig>, Vec<SynthInstance>)> {
    let f = fs::File::open(path)?;
    synth::read_corpus(BufReader::new(f))
}

fn corpus_task(path: &Path) -> Result<(TaskConfig, Vec<SynthInstance>)> {
    let (task, instances) = load_corpus(path)?;
    let task = task.ok_or_else(|| {
        VifError::config("cli", format!("{} carries no task header", path.display()))
    })?;
    Ok((task, instances))
}

fn train_config(config: &Option<PathBuf>, sets: &[String]) -> Result<TrainConfig> {
    let mut kv = match config {
        Some(p) => KvMap::parse(&fs::read_to_string(p)?)?,
        None => KvMap::default(),
    };
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(VifError::config("cli", format!("--set expects key=value, got '{s}'")));
        };
        kv.set(k.trim(), v.trim());
    }
    TrainConfig::from_kv(&kv)
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen { task, seed, n, out, holdout, holdout_out } => {
            let cfg = task.to_config(seed);
            let all = synth::generate(&cfg, n + holdout)?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            synth::write_corpus(&mut w, &cfg, &all[..n])?;
            w.flush()?;
            if holdout > 0 {
                let p = holdout_out.ok_or_else(|| {
                    VifError::config("cli", "--holdout needs --holdout-out")
                })?;
                let mut w = BufWriter::new(fs::File::create(&p)?);
                synth::write_corpus(&mut w, &cfg, &all[n..])?;
                w.flush()?;
            }
            eprintln!("wrote {n} (+{holdout} held out) instances");
            Ok(ExitCode::SUCCESS)
        }

        Command::Train { config, sets, corpus, out, log, init_from } => {
            let tcfg = train_config(&config, &sets)?;
            let (task, instances) = corpus_task(&corpus)?;
            let init = match &init_from {
                Some(p) => Some(checkpoint::load_from_path(p)?.0),
                None => None,
            };
            let hashes = training::corpus_hashes(&instances);
            let meta = training::train_meta(&task, &hashes);
            let result = training::train(&tcfg, &task, &instances, init, |step, model| {
                if step < tcfg.steps {
                    checkpoint::save_to_path(&out, model, &meta)?;
                    eprintln!("checkpoint at step {step}");
                }
                Ok(())
            })?;
            checkpoint::save_to_path(&out, &result.model, &meta)?;
            if let Some(p) = log {
                fs::write(p, result.log_csv())?;
            }
            if result.diverged {
                eprintln!("training diverged; last-good checkpoint retained");
                return Err(VifError::numeric("harness", "total loss became non-finite"));
            }
            if let Some(last) = result.log.last() {
                eprintln!(
                    "done: {} steps, final total {:.4}",
                    result.log.len(),
                    last.breakdown.total
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval { ckpt, corpus, out, allow_overlap } => {
            let (model, meta) = checkpoint::load_from_path(&ckpt)?;
            let (task, instances) = corpus_task(&corpus)?;
            let hashes = training::hashes_from_meta(&meta);
            let report = training::evaluate(
                &model,
                &task,
                &instances,
                if allow_overlap { None } else { hashes.as_ref() },
            )?;
            let csv = eval_csv(&report);
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Ablate { task, seed, config, sets, train_n, eval_n, out } => {
            let tcfg = TrainConfig { seed, ..train_config(&config, &sets)? };
            let task = task.to_config(seed);
            let outcome = training::ablate(&tcfg, &task, train_n, eval_n)?;
            fs::write(&out, &outcome.csv)?;
            eprintln!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Analyze { dump, scope, out } => {
            let scope = QueryScope::parse(&scope)?;
            let mut f = BufReader::new(fs::File::open(&dump)?);
            let d = flowstat::read_dump(&mut f)?;
            let stats = flowstat::layer_profile(&d, scope)?;
            fs::write(&out, flowstat::stats_csv(&stats))?;
            Ok(ExitCode::SUCCESS)
        }

        Command::RenderMap { ckpt, corpus, index, pair, out, seed } => {
            let (task, instances) = corpus_task(&corpus)?;
            let model = match &ckpt {
                Some(p) => checkpoint::load_from_path(p)?.0,
                None => {
                    let tcfg = TrainConfig { seed, ..TrainConfig::default() };
                    VifModel::init(tcfg.model_config(&task)?, seed)?
                }
            };
            let inst = instances.get(index).ok_or_else(|| {
                VifError::contract("cli", format!("index {index} outside corpus"))
            })?;
            let layout = task.layout()?;
            let tokens = inst.tokens();
            let art = model.forward(&[&tokens], &layout, &ForwardSpec::inference())?;
            let maps = &art.maps[0];
            let map = maps.get(pair).ok_or_else(|| {
                VifError::contract(
                    "cli",
                    format!("pair {pair} outside plan of {} pairs", maps.len()),
                )
            })?;
            write_pgm(&out.with_extension("pgm"), &map.v_hat, task.grid_h, task.grid_w)?;
            write_map_csv(&out.with_extension("csv"), &map.v_hat, task.grid_h, task.grid_w)?;
            Ok(ExitCode::SUCCESS)
        }

        Command::DumpAttn { ckpt, corpus, index, alpha0, out } => {
            let (model, _) = checkpoint::load_from_path(&ckpt)?;
            let (task, instances) = corpus_task(&corpus)?;
            let inst = instances.get(index).ok_or_else(|| {
                VifError::contract("cli", format!("index {index} outside corpus"))
            })?;
            let layout = task.layout()?;
            let tokens = inst.tokens();
            let spec = ForwardSpec {
                trace_layers: (0..model.cfg.backbone.n_layers).collect::<BTreeSet<_>>(),
                alpha_override: alpha0.then_some(0.0),
                ..ForwardSpec::inference()
            };
            let art = model.forward(&[&tokens], &layout, &spec)?;
            let layers: Vec<Vec<f64>> = (0..model.cfg.backbone.n_layers)
                .map(|l| art.traces[0].entries[&l].attention.probs.clone())
                .collect();
            let dump =
                AttentionDump { layout, n_heads: model.cfg.backbone.n_heads, layers };
            let mut w = BufWriter::new(fs::File::create(&out)?);
            flowstat::write_dump(&mut w, &dump)?;
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck { micro_seeds, default_seeds } => {
            let outcomes = suite::run_gradient_suite(micro_seeds, default_seeds)?;
            let mut all_pass = true;
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!(
                    "[{tag}] {}: max rel err {:.3e} (tol {:.0e}, {} seeds, {:.1}s)",
                    o.name, o.max_rel_err, o.tol, o.seeds, o.seconds
                );
                all_pass &= o.passed;
            }
            if all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(VifError::numeric("gradsuite", "a gradient check exceeded tolerance"))
            }
        }
    }
}

fn eval_csv(r: &training::EvalReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "n,n_ambiguous,accuracy,accuracy_ambiguous,accuracy_unambiguous,localization,\
         map_entropy,attn_entropy,attn_entropy_alpha0,vision_ratio,vision_ratio_alpha0\n\
         {},{},{},{},{},{},{},{},{},{},{}\n",
        r.n,
        r.n_ambiguous,
        r.accuracy,
        r.accuracy_ambiguous,
        r.accuracy_unambiguous,
        opt(r.mean_localization),
        opt(r.mean_map_entropy),
        r.attn_entropy,
        r.attn_entropy_alpha0,
        r.vision_ratio,
        r.vision_ratio_alpha0,
    )
}

/// P5 grayscale with the peak mapped to 255.
fn write_pgm(path: &Path, v_hat: &[f64], h: usize, w: usize) -> Result<()> {
    let mx = v_hat.iter().cloned().fold(f64::MIN, f64::max);
    if mx <= 0.0 {
        return Err(VifError::contract("cli", "importance map has no positive mass"));
    }
    let mut bytes = Vec::with_capacity(64 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in v_hat {
        bytes.push((255.0 * v / mx).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_map_csv(path: &Path, v_hat: &[f64], h: usize, w: usize) -> Result<()> {
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| v_hat[r * w + c].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
