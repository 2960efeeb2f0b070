//! Command-line front end: corpus export, stage training with binary
//! checkpoints, PPM sampling, the ablation harness, and a calibration pilot.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use uniflow::checkpoint;
use uniflow::checker::check_image;
use uniflow::compressor::LatentNorm;
use uniflow::config::RunConfig;
use uniflow::decoder::{build_stage1, Stage1Config, Stage1Run};
use uniflow::experiments::{report_for, ExperimentOutcome, Harness, MetricsLog};
use uniflow::metrics::TrainRecord;
use uniflow::params::ParamStore;
use uniflow::ppm;
use uniflow::queries::{
    edit_image_queries, generate_image_queries, train_queries, QueriesConfig, QueryModel,
};
use uniflow::sampling::SamplerConfig;
use uniflow::tensor::Tensor;
use uniflow::toydata::{generate_corpus, vocab, Split};
use uniflow::unified::{
    edit_image, generate_image, train_unified, UnifiedConfig, UnifiedData, UnifiedModel,
};

#[derive(Parser)]
#[command(
    name = "uniflow",
    version,
    about = "Desk-scale unified multimodal pipeline: semantic latent compression, \
             flow-matching decoding, and two conditional-prediction pathways over a toy corpus."
)]
struct Cli {
    /// JSON run configuration (defaults to the committed configuration)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for logs, reports, CSV, checkpoints, metrics
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Export the toy corpus, one JSONL file per split (scene + token ids).
    Corpus {
        #[arg(long, default_value = "corpus")]
        dir: PathBuf,
    },
    /// Train one stage and write a binary checkpoint plus metrics JSONL.
    Train {
        /// stage1 | unified | queries
        #[arg(long)]
        stage: String,
        /// checkpoint path (default: <out-dir>/ckpt/<stage>.bin)
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Sample an image from a text prompt and write it as binary PPM.
    Generate {
        /// comma-separated caption token ids, e.g. 1,5,8,11,15,2
        #[arg(long)]
        prompt_tokens: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// guidance scale (1.0 = pure conditional)
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long, default_value = "img.ppm")]
        out: PathBuf,
        /// stage-1 checkpoint (default: <out-dir>/ckpt/stage1.bin)
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        /// prediction-stage checkpoint (default: <out-dir>/ckpt/unified.bin)
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Apply an instruction to a source image and write the edited PPM.
    Edit {
        /// source image (PPM written by this tool)
        #[arg(long)]
        image: PathBuf,
        /// comma-separated instruction token ids, e.g. 19,11,15,6
        #[arg(long)]
        instruction_tokens: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long, default_value = "edited.ppm")]
        out: PathBuf,
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run one ablation (or `all`) and write logs, report, and CSV.
    Ablate {
        /// shape | convergence | projector | init-pathway | generation | all
        #[arg(long)]
        name: String,
        /// use the first N committed seeds (default: all of them)
        #[arg(long)]
        seeds: Option<usize>,
        /// override the experiment's step budget
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Rebuild a report from a saved metrics log.
    Report {
        #[arg(long)]
        name: String,
    },
    /// Calibration: step timings, and with --full the tau measurement.
    Pilot {
        /// run the full-width baseline to measure tau (slow)
        #[arg(long)]
        full: bool,
    },
    /// Write the committed run configuration as JSON.
    EmitConfig {
        #[arg(long, default_value = "run_config.json")]
        path: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => {
            let cfg = RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?;
            cfg.validate()?;
            cfg
        }
        None => RunConfig::committed(),
    };
    match cli.cmd {
        Cmd::Corpus { dir } => corpus_cmd(&cfg, &dir),
        Cmd::Train { stage, ckpt } => train_cmd(&cfg, &cli.out_dir, &stage, ckpt),
        Cmd::Generate { prompt_tokens, seed, steps, guidance, out, stage1_ckpt, ckpt } => {
            let sampler = SamplerConfig { steps, guidance, seed };
            generate_cmd(&cli.out_dir, &prompt_tokens, &sampler, &out, stage1_ckpt, ckpt)
        }
        Cmd::Edit { image, instruction_tokens, seed, steps, guidance, out, stage1_ckpt, ckpt } => {
            let sampler = SamplerConfig { steps, guidance, seed };
            edit_cmd(&cli.out_dir, &image, &instruction_tokens, &sampler, &out, stage1_ckpt, ckpt)
        }
        Cmd::Ablate { name, seeds, budget } => ablate_cmd(cfg, &cli.out_dir, &name, seeds, budget),
        Cmd::Report { name } => report_cmd(&cli.out_dir, &name),
        Cmd::Pilot { full } => pilot_cmd(cfg, full),
        Cmd::EmitConfig { path } => {
            cfg.save(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CorpusRecord<'a> {
    scene: &'a uniflow::toydata::Scene,
    tokens: &'a [usize],
}

fn corpus_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, split, count) in [
        ("train", Split::Train, cfg.train_size),
        ("val", Split::Val, cfg.val_size),
        ("all", Split::All, cfg.train_size + cfg.val_size),
    ] {
        let corpus = generate_corpus(cfg.corpus_seed, count, split);
        let mut text = String::new();
        for (scene, tokens) in &corpus {
            text.push_str(&serde_json::to_string(&CorpusRecord { scene, tokens })?);
            text.push('\n');
        }
        let path = dir.join(format!("{name}.jsonl"));
        fs::write(&path, text)?;
        println!("wrote {} ({} records)", path.display(), corpus.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Stage1Blob {
    kind: String,
    cfg: Stage1Config,
    norm: LatentNorm,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct UnifiedBlob {
    kind: String,
    d: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct QueriesBlob {
    kind: String,
    d: usize,
    n: usize,
    m: usize,
    seed: u64,
}

fn save_stage1_ckpt(path: &Path, run: &Stage1Run, cfg: &Stage1Config, seed: u64) -> Result<()> {
    let blob = Stage1Blob { kind: "stage1".into(), cfg: cfg.clone(), norm: run.norm.clone(), seed };
    checkpoint::save(path, &serde_json::to_string(&blob)?, &run.store)?;
    Ok(())
}

fn load_stage1_ckpt(path: &Path) -> Result<Stage1Run> {
    let loaded = checkpoint::load(path)?;
    let blob: Stage1Blob = serde_json::from_str(&loaded.config_json)
        .with_context(|| format!("{} is not a stage-1 checkpoint", path.display()))?;
    if blob.kind != "stage1" {
        bail!("{} holds a {} checkpoint, expected stage1", path.display(), blob.kind);
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = build_stage1(&mut store, blob.cfg.comp, blob.seed, blob.cfg.encoder_seed)?;
    checkpoint::apply(&loaded, &mut store)?;
    Ok(Stage1Run {
        store,
        model,
        norm: blob.norm,
        records: Vec::new(),
        final_mse: f64::NAN,
        final_psnr: f64::NAN,
        final_checker: f64::NAN,
        steps_run: 0,
        diverged_at: None,
    })
}

fn load_unified_ckpt(path: &Path) -> Result<(UnifiedModel, ParamStore<f32>)> {
    let loaded = checkpoint::load(path)?;
    let blob: UnifiedBlob = serde_json::from_str(&loaded.config_json)
        .with_context(|| format!("{} is not a unified checkpoint", path.display()))?;
    if blob.kind != "unified" {
        bail!("{} holds a {} checkpoint, expected unified", path.display(), blob.kind);
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(blob.seed);
    let model = UnifiedModel::new(&mut store, blob.d, &mut rng);
    checkpoint::apply(&loaded, &mut store)?;
    Ok((model, store))
}

fn load_queries_ckpt(path: &Path) -> Result<(QueryModel, ParamStore<f32>)> {
    let loaded = checkpoint::load(path)?;
    let blob: QueriesBlob = serde_json::from_str(&loaded.config_json)
        .with_context(|| format!("{} is not a queries checkpoint", path.display()))?;
    if blob.kind != "queries" {
        bail!("{} holds a {} checkpoint, expected queries", path.display(), blob.kind);
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(blob.seed);
    let model = QueryModel::new(&mut store, blob.d, blob.n, blob.m, &mut rng);
    checkpoint::apply(&loaded, &mut store)?;
    Ok((model, store))
}

fn write_metrics(path: &Path, records: &[TrainRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_cmd(cfg: &RunConfig, out_dir: &Path, stage: &str, ckpt: Option<PathBuf>) -> Result<()> {
    let ckpt = ckpt.unwrap_or_else(|| out_dir.join("ckpt").join(format!("{stage}.bin")));
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    let metrics_path = out_dir.join("metrics").join(format!("{stage}.jsonl"));
    let mut harness = Harness::new(cfg.clone());
    match stage {
        "stage1" => {
            let t0 = Instant::now();
            let run = harness.stage1()?;
            println!(
                "stage1: {} steps in {:.1}s — held-out mse {:.5}, psnr {:.2} dB, checker {:.3}",
                run.steps_run,
                t0.elapsed().as_secs_f64(),
                run.final_mse,
                run.final_psnr,
                run.final_checker
            );
            save_stage1_ckpt(&ckpt, run, &cfg.stage1, cfg.seeds[0])?;
            write_metrics(&metrics_path, &run.records)?;
        }
        "unified" => {
            let t0 = Instant::now();
            let run = harness.final_run()?;
            println!(
                "unified: {} steps in {:.1}s — final held-out flow loss {:?}",
                run.steps_run,
                t0.elapsed().as_secs_f64(),
                run.eval_curve.last()
            );
            let blob = UnifiedBlob { kind: "unified".into(), d: run.model.d, seed: cfg.seeds[0] };
            checkpoint::save(&ckpt, &serde_json::to_string(&blob)?, &run.store)?;
            write_metrics(&metrics_path, &run.records)?;
            // the sampling stages need the stage-1 stack too
            let s1 = out_dir.join("ckpt").join("stage1.bin");
            if !s1.exists() {
                save_stage1_ckpt(&s1, harness.stage1()?, &cfg.stage1, cfg.seeds[0])?;
                println!("wrote {}", s1.display());
            }
        }
        "queries" => {
            let t0 = Instant::now();
            let run = harness.queries_run_full()?;
            println!(
                "queries: {} steps in {:.1}s — final held-out flow loss {:?}",
                run.steps_run,
                t0.elapsed().as_secs_f64(),
                run.eval_curve.last()
            );
            let blob = QueriesBlob {
                kind: "queries".into(),
                d: run.model.d,
                n: run.model.n,
                m: run.model.m,
                seed: cfg.seeds[0],
            };
            checkpoint::save(&ckpt, &serde_json::to_string(&blob)?, &run.store)?;
            write_metrics(&metrics_path, &run.records)?;
            let s1 = out_dir.join("ckpt").join("stage1.bin");
            if !s1.exists() {
                save_stage1_ckpt(&s1, harness.stage1()?, &cfg.stage1, cfg.seeds[0])?;
                println!("wrote {}", s1.display());
            }
        }
        other => bail!("unknown stage `{other}`; expected stage1 | unified | queries"),
    }
    println!("wrote {} and {}", ckpt.display(), metrics_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate / edit
// ---------------------------------------------------------------------------

fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    let toks: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad token `{t}`")))
        .collect::<Result<_>>()?;
    if toks.is_empty() {
        bail!("empty token list");
    }
    for &t in &toks {
        if t >= vocab::SIZE {
            bail!("token {t} out of range (vocabulary size {})", vocab::SIZE);
        }
    }
    Ok(toks)
}

fn generate_cmd(
    out_dir: &Path,
    prompt: &str,
    sampler: &SamplerConfig,
    out: &Path,
    stage1_ckpt: Option<PathBuf>,
    ckpt: Option<PathBuf>,
) -> Result<()> {
    let caption = parse_tokens(prompt)?;
    let stage1_path = stage1_ckpt.unwrap_or_else(|| out_dir.join("ckpt").join("stage1.bin"));
    let ckpt_path = ckpt.unwrap_or_else(|| out_dir.join("ckpt").join("unified.bin"));
    let stage1 = load_stage1_ckpt(&stage1_path)?;

    // route on the checkpoint's own kind marker
    let loaded = checkpoint::load(&ckpt_path)?;
    let img = if loaded.config_json.contains("\"kind\":\"queries\"") {
        let (model, store) = load_queries_ckpt(&ckpt_path)?;
        generate_image_queries(&stage1, &model, &store, &caption, sampler)?
    } else {
        let (model, store) = load_unified_ckpt(&ckpt_path)?;
        generate_image(&stage1, &model, &store, &caption, sampler)?
    };
    ppm::save_image(out, &img)?;
    match check_image(&img, &caption) {
        Ok(score) => println!("wrote {} (checker score vs prompt: {score:.2})", out.display()),
        Err(_) => println!("wrote {}", out.display()),
    }
    Ok(())
}

fn edit_cmd(
    out_dir: &Path,
    image: &Path,
    instruction: &str,
    sampler: &SamplerConfig,
    out: &Path,
    stage1_ckpt: Option<PathBuf>,
    ckpt: Option<PathBuf>,
) -> Result<()> {
    let instr = parse_tokens(instruction)?;
    let stage1_path = stage1_ckpt.unwrap_or_else(|| out_dir.join("ckpt").join("stage1.bin"));
    let ckpt_path = ckpt.unwrap_or_else(|| out_dir.join("ckpt").join("unified.bin"));
    let stage1 = load_stage1_ckpt(&stage1_path)?;
    let src: Tensor<f32> = ppm::load_image(image)?;

    let loaded = checkpoint::load(&ckpt_path)?;
    let img = if loaded.config_json.contains("\"kind\":\"queries\"") {
        let (model, store) = load_queries_ckpt(&ckpt_path)?;
        edit_image_queries(&stage1, &model, &store, &src, &instr, sampler)?
    } else {
        let (model, store) = load_unified_ckpt(&ckpt_path)?;
        edit_image(&stage1, &model, &store, &src, &instr, sampler)?
    };
    ppm::save_image(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate / report
// ---------------------------------------------------------------------------

fn print_outcome(outcome: &ExperimentOutcome) {
    for p in &outcome.predicates {
        println!(
            "  {} {} (lhs={:.4}, rhs={:.4})",
            if p.pass { "PASS" } else { "FAIL" },
            p.label,
            p.lhs,
            p.rhs
        );
    }
}

fn ablate_cmd(
    mut cfg: RunConfig,
    out_dir: &Path,
    name: &str,
    seeds: Option<usize>,
    budget: Option<usize>,
) -> Result<()> {
    if let Some(n) = seeds {
        if n == 0 {
            bail!("--seeds must be >= 1");
        }
        while cfg.seeds.len() < n {
            let next = cfg.seeds.last().copied().unwrap_or(0) + 1;
            cfg.seeds.push(next);
        }
        cfg.seeds.truncate(n);
    }
    if let Some(b) = budget {
        match name {
            "shape" | "projector" => cfg.harness.stage1_steps = b,
            "convergence" | "init-pathway" => cfg.harness.stage2_steps = b,
            "generation" => cfg.unified.steps = b,
            _ => {
                cfg.harness.stage1_steps = b;
                cfg.harness.stage2_steps = b;
            }
        }
    }
    let names: Vec<&str> = match name {
        "all" => vec!["shape", "convergence", "projector", "init-pathway", "generation"],
        n => vec![n],
    };
    let mut harness = Harness::new(cfg);
    for n in names {
        let t0 = Instant::now();
        let outcome = match n {
            "shape" => harness.ablate_shape()?,
            "convergence" => harness.ablate_convergence()?,
            "projector" => harness.ablate_projector()?,
            "init-pathway" => harness.ablate_init_and_pathway()?,
            "generation" => harness.generation_eval()?,
            other => bail!("unknown experiment `{other}`"),
        };
        let (log_p, md_p, csv_p) = outcome.save(out_dir)?;
        println!(
            "{n}: {} in {:.1}s — wrote {}, {}, {}",
            if outcome.all_pass() { "all comparisons PASS" } else { "some comparisons FAIL" },
            t0.elapsed().as_secs_f64(),
            log_p.display(),
            md_p.display(),
            csv_p.display()
        );
        print_outcome(&outcome);
    }
    Ok(())
}

fn report_cmd(out_dir: &Path, name: &str) -> Result<()> {
    let log_path = out_dir.join("logs").join(format!("{name}.jsonl"));
    let text = fs::read_to_string(&log_path)
        .with_context(|| format!("no metrics log at {}; run `ablate --name {name}` first", log_path.display()))?;
    let log = MetricsLog::from_jsonl(&text)?;
    let (markdown, predicates) = report_for(name, &log)?;
    let md_path = out_dir.join("reports").join(format!("{name}.md"));
    let csv_path = out_dir.join("csv").join(format!("{name}.csv"));
    if let Some(dir) = md_path.parent() {
        fs::create_dir_all(dir)?;
    }
    if let Some(dir) = csv_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&md_path, &markdown)?;
    fs::write(&csv_path, log.to_csv())?;
    println!("rebuilt {} and {}", md_path.display(), csv_path.display());
    for p in &predicates {
        println!("  {} {}", if p.pass { "PASS" } else { "FAIL" }, p.label);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pilot
// ---------------------------------------------------------------------------

/// Synthetic stage-2 data: real captions, random latents/features. Only used
/// to time steps — never for quality measurements.
fn synth_data(d: usize) -> UnifiedData {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let corpus = generate_corpus(17, 32, Split::Train);
    let captions: Vec<Vec<usize>> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let latents: Vec<Tensor<f32>> =
        (0..32).map(|_| Tensor::randn(&[64, d], 1.0, &mut rng)).collect();
    let feats: Vec<Tensor<f32>> =
        (0..32).map(|_| Tensor::randn(&[64, 144], 1.0, &mut rng)).collect();
    let instr = vec![vocab::RECOLOR, vocab::ROW0, vocab::COL0, vocab::RED];
    let edits = vec![(latents[0].clone(), instr, latents[1].clone())];
    let eval = (0..4)
        .map(|i| {
            (
                captions[i].clone(),
                Tensor::randn(&[64, d], 1.0, &mut rng),
                Tensor::randn(&[64, d], 1.0, &mut rng),
                (i as f64 + 0.5) / 4.0,
            )
        })
        .collect();
    UnifiedData { n: 64, d, captions, latents, feats, edits, eval }
}

fn pilot_cmd(cfg: RunConfig, full: bool) -> Result<()> {
    println!("== step timing ==");
    {
        let bench_steps = 20;
        let s1_cfg = Stage1Config {
            steps: bench_steps,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..cfg.stage1.clone()
        };
        let train = generate_corpus(cfg.corpus_seed, 128, Split::Train);
        let val = generate_corpus(cfg.corpus_seed, 8, Split::Val);
        let t0 = Instant::now();
        uniflow::decoder::train_stage1(&train, &val, &s1_cfg, cfg.seeds[0])?;
        let per = t0.elapsed().as_secs_f64() / bench_steps as f64;
        println!(
            "stage-1: {per:.3} s/step (batch {}) -> {:.1}s per 1000 steps, shape ablation ({} runs x {} steps, batch {}) ~{:.0}s",
            s1_cfg.batch,
            per * 1000.0,
            5 * cfg.seeds.len(),
            cfg.harness.stage1_steps,
            cfg.harness.stage1_batch,
            per * (cfg.harness.stage1_batch as f64 / s1_cfg.batch as f64)
                * (5 * cfg.seeds.len() * cfg.harness.stage1_steps) as f64
        );
    }
    {
        let data = synth_data(8);
        let ucfg = UnifiedConfig {
            steps: 15,
            batch: cfg.harness.stage2_batch,
            warmup: 5,
            eval_every: 1000,
            tau: None,
            ..cfg.unified.clone()
        };
        let t0 = Instant::now();
        train_unified(&data, &ucfg, 1, None)?;
        let per = t0.elapsed().as_secs_f64() / 15.0;
        println!(
            "unified (d=8): {per:.3} s/step (batch {}) -> budget {} steps ~{:.0}s/run",
            ucfg.batch,
            cfg.harness.stage2_steps,
            per * cfg.harness.stage2_steps as f64
        );
    }
    {
        let data = synth_data(144);
        let ucfg = UnifiedConfig {
            steps: 10,
            batch: cfg.harness.stage2_batch,
            warmup: 5,
            eval_every: 1000,
            tau: None,
            ..cfg.unified.clone()
        };
        let t0 = Instant::now();
        train_unified(&data, &ucfg, 1, None)?;
        println!("unified (D=144): {:.3} s/step", t0.elapsed().as_secs_f64() / 10.0);
    }
    {
        let data = synth_data(8);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        UnifiedModel::new(&mut store, 8, &mut rng);
        let qcfg = QueriesConfig {
            steps: 10,
            batch: cfg.harness.stage2_batch,
            warmup: 5,
            eval_every: 1000,
            tau: None,
            ..cfg.queries.clone()
        };
        let t0 = Instant::now();
        train_queries(&data, &qcfg, 1, &store)?;
        println!("queries: {:.3} s/step (batch {})", t0.elapsed().as_secs_f64() / 10.0, qcfg.batch);
    }

    if !full {
        println!("(run with --full to train the full-width baseline and measure tau)");
        return Ok(());
    }

    println!("== full calibration ==");
    let mut harness = Harness::new(cfg.clone());
    let t0 = Instant::now();
    {
        let run = harness.stage1()?;
        println!(
            "stage-1 committed run: {} steps in {:.0}s -> mse {:.5}, psnr {:.2} dB, checker {:.3}",
            run.steps_run,
            t0.elapsed().as_secs_f64(),
            run.final_mse,
            run.final_psnr,
            run.final_checker
        );
    }
    let t0 = Instant::now();
    harness.unified_data()?;
    harness.wide_data()?;
    println!("data prep: {:.0}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    harness.lm_trunk(cfg.seeds[0])?;
    println!("text-only pretrain: {:.0}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let wide = harness.pilot_wide_run()?;
    println!(
        "full-width baseline: {} steps in {:.0}s; eval curve:",
        wide.steps_run,
        t0.elapsed().as_secs_f64()
    );
    for (step, v) in &wide.eval_curve {
        println!("  step {step:>5}: held-out flow loss {v:.4}");
    }
    let target_step = (cfg.harness.stage2_steps as f64 * 0.6) as usize;
    let at_60 = wide
        .eval_curve
        .iter()
        .filter(|(s, _)| *s <= target_step)
        .last()
        .map(|(_, v)| *v);
    match at_60 {
        Some(v) => println!("proposed tau (loss at 60% of budget = step {target_step}): {v:.4}"),
        None => println!("no eval point at or before step {target_step}"),
    }

    let t0 = Instant::now();
    let d8 = harness.pilot_d8_run()?;
    println!(
        "compact-latent arm: {} steps in {:.0}s; eval curve:",
        d8.steps_run,
        t0.elapsed().as_secs_f64()
    );
    for (step, v) in &d8.eval_curve {
        println!("  step {step:>5}: held-out flow loss {v:.4}");
    }

    let t0 = Instant::now();
    let q = harness.pilot_queries_run()?;
    println!(
        "query pathway: {} steps in {:.0}s; eval curve:",
        q.steps_run,
        t0.elapsed().as_secs_f64()
    );
    for (step, v) in &q.eval_curve {
        println!("  step {step:>5}: held-out flow loss {v:.4}");
    }
    Ok(())
}
