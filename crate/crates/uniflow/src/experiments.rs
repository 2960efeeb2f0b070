//! Ablation harness: trains pipeline variants at matched budgets, appends
//! every measurement to a metrics log, and renders directional comparisons
//! as Markdown reports plus plot-ready CSV.
//!
//! Reports are pure functions of the logs: every number they print is read
//! back out of `MetricsLog`, so a report can be re-derived from a saved
//! JSONL file alone. Each comparison is evaluated on medians over the
//! configured seeds and recorded as an explicit pass/fail line — no silent
//! aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::check_image;
use crate::compressor::{Compressor, CompressorConfig, Variant};
use crate::config::RunConfig;
use crate::decoder::{train_stage1, Stage1Config, Stage1Run};
use crate::encoder::{linear_probe, Encoder};
use crate::graph::Graph;
use crate::params::{Binding, ParamStore};
use crate::queries::{edit_image_queries, train_queries, QueriesConfig, QueriesRun};
use crate::silhouette::silhouette_score;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::{
    build_edit, caption_tokens, combo_pools, render, vocab, Color, EditKind, EditPair, Obj, Scene,
    Shape,
};
use crate::unified::{
    edit_image, generate_image, prepare_unified_data, train_unified, TaskMix, UnifiedConfig,
    UnifiedData, UnifiedRun,
};

// ---------------------------------------------------------------------------
// metrics log
// ---------------------------------------------------------------------------

/// One appended measurement. `variant = "_config"` rows carry the run
/// parameters a report needs (budgets, thresholds), keeping reports
/// re-derivable from the log alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog { records: Vec::new() }
    }

    pub fn push(&mut self, experiment: &str, variant: &str, seed: u64, step: u64, metric: &str, value: f64) {
        self.records.push(MetricsRecord {
            experiment: experiment.into(),
            variant: variant.into(),
            seed,
            step,
            metric: metric.into(),
            value,
        });
    }

    /// Last value per seed for (variant, metric), ordered by seed.
    pub fn per_seed(&self, variant: &str, metric: &str) -> Vec<(u64, f64)> {
        let mut by_seed: BTreeMap<u64, (u64, f64)> = BTreeMap::new();
        for r in &self.records {
            if r.variant == variant && r.metric == metric {
                let e = by_seed.entry(r.seed).or_insert((r.step, r.value));
                if r.step >= e.0 {
                    *e = (r.step, r.value);
                }
            }
        }
        by_seed.into_iter().map(|(s, (_, v))| (s, v)).collect()
    }

    /// Median of the per-seed values, skipping seeds listed in `exclude`.
    pub fn median_of(&self, variant: &str, metric: &str, exclude: &[u64]) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_seed(variant, metric)
            .into_iter()
            .filter(|(s, _)| !exclude.contains(s))
            .map(|(_, v)| v)
            .collect();
        median(&vals)
    }

    /// Seeds whose `diverged` marker is set for this variant.
    pub fn diverged_seeds(&self, variant: &str) -> Vec<u64> {
        self.per_seed(variant, "diverged")
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|(s, _)| s)
            .collect()
    }

    /// A `_config` row's value.
    pub fn config_value(&self, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.variant == "_config" && r.metric == metric)
            .map(|r| r.value)
    }

    /// Sorted list of variants present (excluding `_config`).
    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .records
            .iter()
            .map(|r| r.variant.clone())
            .filter(|v| v != "_config")
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn seeds(&self, variant: &str) -> Vec<u64> {
        let mut s: Vec<u64> = self
            .records
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.seed)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metrics record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<MetricsLog> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: MetricsRecord =
                serde_json::from_str(line).map_err(|e| NumericsError::InvalidArgument {
                    context: "MetricsLog::from_jsonl".into(),
                    detail: format!("line {}: {e}", i + 1),
                })?;
            records.push(r);
        }
        Ok(MetricsLog { records })
    }

    /// Plot-ready CSV: header plus one row per record, sorted so that
    /// re-emitting from the same log is byte-identical.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&MetricsRecord> = self.records.iter().collect();
        rows.sort_by(|a, b| {
            (&a.experiment, &a.variant, a.seed, a.step, &a.metric)
                .cmp(&(&b.experiment, &b.variant, b.seed, b.step, &b.metric))
        });
        let mut out = String::from("experiment,variant,seed,step,metric,value\n");
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.experiment, r.variant, r.seed, r.step, r.metric, r.value
            ));
        }
        out
    }

    /// Steps are non-decreasing within each (variant, seed, metric) stream.
    pub fn is_monotone(&self) -> bool {
        let mut last: BTreeMap<(String, u64, String), u64> = BTreeMap::new();
        for r in &self.records {
            let key = (r.variant.clone(), r.seed, r.metric.clone());
            if let Some(prev) = last.get(&key) {
                if r.step < *prev {
                    return false;
                }
            }
            last.insert(key, r.step);
        }
        true
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median inputs are finite"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

// ---------------------------------------------------------------------------
// predicates and outcomes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct Predicate {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

fn compare(label: &str, lhs: Option<f64>, rhs: Option<f64>, ok: impl Fn(f64, f64) -> bool) -> Predicate {
    match (lhs, rhs) {
        (Some(a), Some(b)) => Predicate { label: label.into(), lhs: a, rhs: b, pass: ok(a, b) },
        _ => Predicate {
            label: format!("{label} (missing data)"),
            lhs: lhs.unwrap_or(f64::NAN),
            rhs: rhs.unwrap_or(f64::NAN),
            pass: false,
        },
    }
}

pub struct ExperimentOutcome {
    pub name: String,
    pub log: MetricsLog,
    pub markdown: String,
    pub predicates: Vec<Predicate>,
}

impl ExperimentOutcome {
    pub fn all_pass(&self) -> bool {
        self.predicates.iter().all(|p| p.pass)
    }

    /// Writes logs/<name>.jsonl, reports/<name>.md, csv/<name>.csv under `root`.
    pub fn save(&self, root: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
        let io_err = |what: &str, e: std::io::Error| NumericsError::InvalidArgument {
            context: "ExperimentOutcome::save".into(),
            detail: format!("{what}: {e}"),
        };
        let log_path = root.join("logs").join(format!("{}.jsonl", self.name));
        let md_path = root.join("reports").join(format!("{}.md", self.name));
        let csv_path = root.join("csv").join(format!("{}.csv", self.name));
        for p in [&log_path, &md_path, &csv_path] {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err("create_dir_all", e))?;
            }
        }
        fs::write(&log_path, self.log.to_jsonl()).map_err(|e| io_err("write jsonl", e))?;
        fs::write(&md_path, &self.markdown).map_err(|e| io_err("write report", e))?;
        fs::write(&csv_path, self.log.to_csv()).map_err(|e| io_err("write csv", e))?;
        Ok((log_path, md_path, csv_path))
    }
}

// ---------------------------------------------------------------------------
// report builders (pure functions of the logs)
// ---------------------------------------------------------------------------

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e6) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn runs_table(log: &MetricsLog, metrics: &[&str]) -> String {
    let mut out = String::from("| variant | seed |");
    for m in metrics {
        out.push_str(&format!(" {m} |"));
    }
    out.push('\n');
    out.push_str("|---|---|");
    out.push_str(&"---|".repeat(metrics.len()));
    out.push('\n');
    for variant in log.variants() {
        for seed in log.seeds(&variant) {
            out.push_str(&format!("| {variant} | {seed} |"));
            for m in metrics {
                let v = log
                    .per_seed(&variant, m)
                    .into_iter()
                    .find(|(s, _)| *s == seed)
                    .map(|(_, v)| v)
                    .unwrap_or(f64::NAN);
                out.push_str(&format!(" {} |", fmt(v)));
            }
            out.push('\n');
        }
    }
    out
}

fn medians_table(log: &MetricsLog, metrics: &[&str]) -> String {
    let mut out = String::from("| variant |");
    for m in metrics {
        out.push_str(&format!(" median {m} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---|".repeat(metrics.len()));
    out.push('\n');
    for variant in log.variants() {
        let excl = log.diverged_seeds(&variant);
        out.push_str(&format!("| {variant} |"));
        for m in metrics {
            let v = log.median_of(&variant, m, &excl).unwrap_or(f64::NAN);
            out.push_str(&format!(" {} |", fmt(v)));
        }
        out.push('\n');
    }
    out
}

fn predicate_lines(preds: &[Predicate]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&format!(
            "- **{}** {} — lhs={}, rhs={}\n",
            if p.pass { "PASS" } else { "FAIL" },
            p.label,
            fmt(p.lhs),
            fmt(p.rhs)
        ));
    }
    out
}

fn assemble(title: &str, intro: &str, sections: &[(&str, String)], preds: &[Predicate]) -> String {
    let mut md = format!("# {title}\n\n{intro}\n\n");
    for (head, body) in sections {
        md.push_str(&format!("## {head}\n\n{body}\n"));
    }
    md.push_str(&format!("## Comparisons\n\n{}\n", predicate_lines(preds)));
    md
}

/// Latent-shape sweep: five compressor output shapes at an equal stage-1
/// budget, compared on held-out reconstruction error.
pub fn report_shape(log: &MetricsLog) -> (String, Vec<Predicate>) {
    let excl = |v: &str| log.diverged_seeds(v);
    let m = |v: &str| log.median_of(v, "mse", &excl(v));
    let preds = vec![
        compare(
            "median recon MSE(n=64, d=8, mlp) < median recon MSE(n=16, D=144): channel compression preserves more than sequence compression",
            m("chan_n64_d8_mlp"),
            m("seq_n16_D144"),
            |a, b| a < b,
        ),
        compare(
            "median recon MSE(uncompressed) <= median(n=16, D=144)",
            m("uncompressed_n64_D144"),
            m("seq_n16_D144"),
            |a, b| a <= b,
        ),
        compare(
            "median recon MSE(uncompressed) <= median(n=64, d=32)",
            m("uncompressed_n64_D144"),
            m("chan_n64_d32"),
            |a, b| a <= b,
        ),
        compare(
            "median recon MSE(uncompressed) <= median(n=64, d=8, mlp)",
            m("uncompressed_n64_D144"),
            m("chan_n64_d8_mlp"),
            |a, b| a <= b,
        ),
        compare(
            "median recon MSE(uncompressed) <= median(n=64, d=8, mha)",
            m("uncompressed_n64_D144"),
            m("chan_n64_d8_mha"),
            |a, b| a <= b,
        ),
    ];
    let intro = format!(
        "Five compressed shapes trained for {} stage-1 steps (batch {}) per seed; \
         held-out reconstruction MSE/PSNR measured at the final step. Seeds with \
         `diverged = 1` are marked failed and excluded from medians.",
        fmt(log.config_value("stage1_steps").unwrap_or(f64::NAN)),
        fmt(log.config_value("stage1_batch").unwrap_or(f64::NAN)),
    );
    let sections = [
        ("Runs", runs_table(log, &["mse", "psnr", "checker", "diverged"])),
        ("Medians", medians_table(log, &["mse", "psnr"])),
    ];
    (assemble("Latent shape ablation", &intro, &sections, &preds), preds)
}

/// Stage-2 convergence: steps until the held-out flow loss first reaches the
/// frozen threshold, for compact (d=8) versus full-width (D=144) targets.
pub fn report_convergence(log: &MetricsLog) -> (String, Vec<Predicate>) {
    let m = |v: &str| log.median_of(v, "steps_to_tau", &log.diverged_seeds(v));
    let preds = vec![compare(
        "median steps-to-tau(d=8) < median steps-to-tau(D=144): compact targets converge first",
        m("target_d8"),
        m("target_D144"),
        |a, b| a < b,
    )];
    let ratio = match (m("target_D144"), m("target_d8")) {
        (Some(a), Some(b)) if b > 0.0 => a / b,
        _ => f64::NAN,
    };
    let intro = format!(
        "Identical mixed-sequence training on two flow targets: the compact latent \
         (d=8) and the raw encoder width (D=144). tau = {} (frozen from the committed \
         pilot: the full-width baseline's held-out flow loss at 60% of its budget); \
         budget = {} steps; runs that never reach tau are scored budget+1. \
         Measured speedup (median D144 / median d8): {}.",
        fmt(log.config_value("tau").unwrap_or(f64::NAN)),
        fmt(log.config_value("stage2_steps").unwrap_or(f64::NAN)),
        fmt(ratio),
    );
    let sections = [
        ("Runs", runs_table(log, &["steps_to_tau", "reached_tau", "final_l_fm_eval", "diverged"])),
        ("Medians", medians_table(log, &["steps_to_tau"])),
    ];
    (assemble("Target-width convergence ablation", &intro, &sections, &preds), preds)
}

/// Projector comparison: cluster structure and linear separability of the
/// compressed latents for the per-token MLP versus the attention projector.
pub fn report_projector(log: &MetricsLog) -> (String, Vec<Predicate>) {
    let m = |v: &str, metric: &str| log.median_of(v, metric, &log.diverged_seeds(v));
    let preds = vec![
        compare(
            "median silhouette(mha) >= median silhouette(mlp)",
            m("proj_mha", "silhouette"),
            m("proj_mlp", "silhouette"),
            |a, b| a >= b,
        ),
        compare(
            "median linear-probe(mha) >= median linear-probe(mlp) on compressed latents",
            m("proj_mha", "probe_compressed"),
            m("proj_mlp", "probe_compressed"),
            |a, b| a >= b,
        ),
        compare(
            "median probe(seq_concat fusion) >= median probe(compressed only), mha",
            m("proj_mha", "probe_seq_concat"),
            m("proj_mha", "probe_compressed"),
            |a, b| a >= b,
        ),
    ];
    let intro = format!(
        "Both projectors trained at the same stage-1 budget ({} steps). Silhouette is \
         computed over mean-pooled latents of {} single-object classes x {} samples; \
         probes are 9-class (shape x color) linear classifiers on mean-pooled \
         features. Fusion rows concatenate raw encoder features with the latent \
         (per-token for dim_concat, along the sequence for seq_concat).",
        fmt(log.config_value("stage1_steps").unwrap_or(f64::NAN)),
        fmt(log.config_value("sil_classes").unwrap_or(f64::NAN)),
        fmt(log.config_value("sil_per_class").unwrap_or(f64::NAN)),
    );
    let sections = [
        (
            "Runs",
            runs_table(
                log,
                &["silhouette", "probe_compressed", "probe_raw", "probe_dim_concat", "probe_seq_concat"],
            ),
        ),
        ("Medians", medians_table(log, &["silhouette", "probe_compressed", "probe_seq_concat"])),
    ];
    (assemble("Projector ablation", &intro, &sections, &preds), preds)
}

/// Trunk-init and pathway comparison: warm-start provenance (text-only vs
/// text+captioning pretraining) and mixed-sequence vs learnable-query
/// conditioning, all against the same frozen compressor/decoder.
pub fn report_init_pathway(log: &MetricsLog) -> (String, Vec<Predicate>) {
    let m = |v: &str, metric: &str| log.median_of(v, metric, &log.diverged_seeds(v));
    let preds = vec![
        compare(
            "median steps-to-tau(captioning-pretrained init) <= median steps-to-tau(text-only init)",
            m("init_vlm", "steps_to_tau"),
            m("init_lm", "steps_to_tau"),
            |a, b| a <= b,
        ),
        compare(
            "median steps-to-tau(unified pathway) <= median steps-to-tau(query pathway)",
            m("pathway_unified", "steps_to_tau"),
            m("pathway_queries", "steps_to_tau"),
            |a, b| a <= b,
        ),
        compare(
            "median edit-identity score(unified pathway) >= median(query pathway)",
            m("pathway_unified", "edit_identity"),
            m("pathway_queries", "edit_identity"),
            |a, b| a >= b,
        ),
    ];
    let intro = format!(
        "Four runs per seed against one frozen compressor/decoder stack: the unified \
         pathway warm-started from a text-only trunk (init_lm), the same warm-started \
         from a text+captioning trunk (init_vlm), and the two conditioning pathways \
         (pathway_unified finetunes the text-only trunk; pathway_queries freezes it \
         and trains {} learnable queries plus a connector and latent predictor). \
         init_lm and pathway_unified are the same underlying runs, logged under both \
         names. tau = {}, budget = {} steps, unreached tau scored budget+1. \
         edit_identity is the checker score of an edited output against the UNEDITED \
         source caption when the instruction is a no-op recolor (recolor to the \
         object's current color) — it measures how much untouched content survives \
         a round trip through each pathway's conditioning.",
        fmt(log.config_value("m_queries").unwrap_or(f64::NAN)),
        fmt(log.config_value("tau").unwrap_or(f64::NAN)),
        fmt(log.config_value("stage2_steps").unwrap_or(f64::NAN)),
    );
    let sections = [
        ("Runs", runs_table(log, &["steps_to_tau", "reached_tau", "edit_identity", "final_l_fm_eval", "diverged"])),
        ("Medians", medians_table(log, &["steps_to_tau", "edit_identity"])),
    ];
    (assemble("Init and pathway ablation", &intro, &sections, &preds), preds)
}

/// End-to-end generation quality of the committed full-budget run.
pub fn report_generation(log: &MetricsLog) -> (String, Vec<Predicate>) {
    let m = |metric: &str| log.median_of("final", metric, &[]);
    let preds = vec![
        compare("mean checker score on held-out single-object prompts >= 0.8", m("mean_checker"), Some(0.8), |a, b| a >= b),
        compare("recolor-edit pass rate >= 0.7", m("recolor_pass_rate"), Some(0.7), |a, b| a >= b),
        compare("generation is bit-deterministic given (seed, prompt, steps)", m("deterministic"), Some(1.0), |a, b| a == b),
    ];
    let intro = format!(
        "The full-budget unified run ({} steps), decoded through the frozen stage-1 \
         stack. Prompts are held-out single-object captions (unseen shape/color/cell \
         triples); recolor edits are fresh single-object pairs scored against the \
         target caption, passing only on an exact checker hit.",
        fmt(log.config_value("final_steps").unwrap_or(f64::NAN)),
    );
    let sections = [(
        "Runs",
        runs_table(log, &["mean_checker", "recolor_pass_rate", "deterministic", "prompts", "edit_pairs"]),
    )];
    (assemble("End-to-end generation", &intro, &sections, &preds), preds)
}

/// Rebuild a report from a saved log; `name` is the experiment key.
pub fn report_for(name: &str, log: &MetricsLog) -> Result<(String, Vec<Predicate>)> {
    match name {
        "shape" => Ok(report_shape(log)),
        "convergence" => Ok(report_convergence(log)),
        "projector" => Ok(report_projector(log)),
        "init-pathway" => Ok(report_init_pathway(log)),
        "generation" => Ok(report_generation(log)),
        other => Err(NumericsError::InvalidArgument {
            context: "report_for".into(),
            detail: format!("unknown experiment {other}; expected shape|convergence|projector|init-pathway|generation"),
        }),
    }
}

// ---------------------------------------------------------------------------
// evaluation protocols shared by experiments and the CLI
// ---------------------------------------------------------------------------

/// No-op edit probes: single-object scenes paired with an instruction that
/// recolors the object to its existing color. A pathway that preserves
/// untouched content maps these to the source image.
pub fn identity_edit_set(seed: u64, count: usize) -> Vec<(Scene, Vec<usize>)> {
    let (pool, _) = combo_pools(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6964_656e);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let o: Obj = pool[rng.gen_range(0..pool.len())];
        let scene = Scene::new(vec![o]);
        let instr = vec![vocab::RECOLOR, vocab::ROW0 + o.row, vocab::COL0 + o.col, o.color.token()];
        out.push((scene, instr));
    }
    out
}

/// Fresh single-object recolor pairs (target color differs from source),
/// disjoint from the training pairs by RNG stream.
pub fn recolor_edit_set(seed: u64, count: usize) -> Vec<EditPair> {
    let (pool, _) = combo_pools(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_636f);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let o: Obj = pool[rng.gen_range(0..pool.len())];
        let scene = Scene::new(vec![o]);
        if let Some(pair) = build_edit(&scene, EditKind::Recolor, &mut rng) {
            out.push(pair);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// the harness
// ---------------------------------------------------------------------------

const SIL_CLASSES: [(Shape, Color); 6] = [
    (Shape::Square, Color::Red),
    (Shape::Square, Color::Green),
    (Shape::Circle, Color::Red),
    (Shape::Circle, Color::Blue),
    (Shape::Triangle, Color::Green),
    (Shape::Triangle, Color::Blue),
];
const SIL_PER_CLASS: usize = 150;
const PROBE_PER_CLASS: usize = 80;
const ALL_SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const ALL_COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

/// Encoded evaluation sets shared by every projector run: the encoder is one
/// frozen feature space, so images are encoded once and reused.
struct ClassSets {
    sil_feats: Vec<Tensor<f32>>,
    sil_labels: Vec<usize>,
    probe_feats: Vec<Tensor<f32>>,
    probe_labels: Vec<usize>,
}

/// Shared-artifact experiment driver. Expensive products (the full stage-1
/// stack, pretrained trunks, canonical stage-2 runs) are built once and
/// reused by every experiment that needs them.
pub struct Harness {
    pub cfg: RunConfig,
    pub corpus_train: Vec<(Scene, Vec<usize>)>,
    pub corpus_val: Vec<(Scene, Vec<usize>)>,
    stage1: Option<Stage1Run>,
    data_d8: Option<UnifiedData>,
    stage1_wide: Option<Stage1Run>,
    data_wide: Option<UnifiedData>,
    lm_trunks: BTreeMap<u64, ParamStore<f32>>,
    vlm_trunks: BTreeMap<u64, ParamStore<f32>>,
    transfusion: BTreeMap<u64, UnifiedRun>,
    queries_runs: BTreeMap<u64, QueriesRun>,
    projector_runs: BTreeMap<(String, u64), Stage1Run>,
    class_sets: Option<ClassSets>,
    finalist: Option<UnifiedRun>,
}

impl Harness {
    pub fn new(cfg: RunConfig) -> Harness {
        let corpus_train =
            crate::toydata::generate_corpus(cfg.corpus_seed, cfg.train_size, crate::toydata::Split::Train);
        let corpus_val =
            crate::toydata::generate_corpus(cfg.corpus_seed, cfg.val_size, crate::toydata::Split::Val);
        Harness {
            cfg,
            corpus_train,
            corpus_val,
            stage1: None,
            data_d8: None,
            stage1_wide: None,
            data_wide: None,
            lm_trunks: BTreeMap::new(),
            vlm_trunks: BTreeMap::new(),
            transfusion: BTreeMap::new(),
            queries_runs: BTreeMap::new(),
            projector_runs: BTreeMap::new(),
            class_sets: None,
            finalist: None,
        }
    }

    // ---------------- shared artifacts ----------------

    /// The committed stage-1 stack (default compressor config, full budget
    /// with its early-stop targets). Every stage-2 consumer shares it.
    pub fn stage1(&mut self) -> Result<&Stage1Run> {
        if self.stage1.is_none() {
            let run = train_stage1(&self.corpus_train, &self.corpus_val, &self.cfg.stage1, self.cfg.seeds[0])?;
            self.stage1 = Some(run);
        }
        Ok(self.stage1.as_ref().expect("stage1 cached"))
    }

    fn ensure_data_d8(&mut self) -> Result<()> {
        if self.data_d8.is_some() {
            return Ok(());
        }
        self.stage1()?;
        let stage1 = self.stage1.as_ref().expect("stage1 cached");
        let data = prepare_unified_data(
            stage1,
            &self.corpus_train,
            &self.corpus_val,
            self.cfg.harness.edit_count,
            self.cfg.harness.eval_size,
            self.cfg.corpus_seed,
        )?;
        self.data_d8 = Some(data);
        Ok(())
    }

    /// Full-width latents need no compressor training: the identity
    /// compressor has no parameters, so a zero-step stage-1 run just fits
    /// the standardization stats over raw encoder features.
    fn ensure_data_wide(&mut self) -> Result<()> {
        if self.data_wide.is_some() {
            return Ok(());
        }
        let cfg = Stage1Config {
            comp: CompressorConfig::uncompressed(),
            encoder_seed: self.cfg.stage1.encoder_seed,
            steps: 0,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..self.cfg.stage1.clone()
        };
        let run = train_stage1(&self.corpus_train, &self.corpus_val, &cfg, self.cfg.seeds[0])?;
        let data = prepare_unified_data(
            &run,
            &self.corpus_train,
            &self.corpus_val,
            self.cfg.harness.edit_count,
            self.cfg.harness.eval_size,
            self.cfg.corpus_seed,
        )?;
        self.stage1_wide = Some(run);
        self.data_wide = Some(data);
        Ok(())
    }

    /// Stage-2 training configuration at the harness budget. Shared verbatim
    /// by every compared run so orderings are apples-to-apples.
    pub fn stage2_cfg(&self, tau: Option<f64>) -> UnifiedConfig {
        let steps = self.cfg.harness.stage2_steps;
        UnifiedConfig {
            steps,
            batch: self.cfg.harness.stage2_batch,
            warmup: (steps / 10).max(20).min(self.cfg.unified.warmup),
            tau,
            ..self.cfg.unified.clone()
        }
    }

    fn queries_cfg(&self, tau: Option<f64>) -> QueriesConfig {
        let steps = self.cfg.harness.stage2_steps;
        QueriesConfig {
            steps,
            batch: self.cfg.harness.stage2_batch,
            warmup: (steps / 10).max(20).min(self.cfg.queries.warmup),
            tau,
            ..self.cfg.queries.clone()
        }
    }

    fn pretrain_cfg(&self, mix: TaskMix) -> UnifiedConfig {
        let steps = self.cfg.harness.pretrain_steps;
        UnifiedConfig {
            steps,
            batch: self.cfg.harness.stage2_batch,
            warmup: (steps / 5).max(10),
            mix,
            tau: None,
            eval_every: steps.max(1),
            ..self.cfg.unified.clone()
        }
    }

    /// Text-only pretrained trunk for `seed`: the desk analog of starting
    /// from a language model.
    pub fn lm_trunk(&mut self, seed: u64) -> Result<&ParamStore<f32>> {
        if !self.lm_trunks.contains_key(&seed) {
            self.ensure_data_d8()?;
            let data = self.data_d8.as_ref().expect("data cached");
            let run = train_unified(data, &self.pretrain_cfg(TaskMix::text_only()), seed, None)?;
            self.lm_trunks.insert(seed, run.store);
        }
        Ok(self.lm_trunks.get(&seed).expect("lm trunk cached"))
    }

    /// Trunk additionally pretrained on image-to-text captioning: the desk
    /// analog of starting from a vision-language model.
    fn vlm_trunk(&mut self, seed: u64) -> Result<&ParamStore<f32>> {
        if !self.vlm_trunks.contains_key(&seed) {
            self.ensure_data_d8()?;
            let data = self.data_d8.as_ref().expect("data cached");
            let run = train_unified(data, &self.pretrain_cfg(TaskMix::text_and_i2t()), seed, None)?;
            self.vlm_trunks.insert(seed, run.store);
        }
        Ok(self.vlm_trunks.get(&seed).expect("vlm trunk cached"))
    }

    /// Canonical unified stage-2 run for `seed`: compact latents, trunk
    /// warm-started from the text-only pretrain, early-stopped at tau.
    /// Shared by the convergence and pathway experiments.
    pub fn transfusion_run(&mut self, seed: u64) -> Result<&UnifiedRun> {
        if !self.transfusion.contains_key(&seed) {
            self.lm_trunk(seed)?;
            let cfg = self.stage2_cfg(Some(self.cfg.harness.tau));
            let data = self.data_d8.as_ref().expect("data cached");
            let init = self.lm_trunks.get(&seed).expect("lm trunk cached");
            let run = train_unified(data, &cfg, seed, Some(init))?;
            self.transfusion.insert(seed, run);
        }
        Ok(self.transfusion.get(&seed).expect("run cached"))
    }

    /// Stage-2 training data over the committed compact latents.
    pub fn unified_data(&mut self) -> Result<&UnifiedData> {
        self.ensure_data_d8()?;
        Ok(self.data_d8.as_ref().expect("data cached"))
    }

    /// Stage-2 training data over raw-width (uncompressed) latents.
    pub fn wide_data(&mut self) -> Result<&UnifiedData> {
        self.ensure_data_wide()?;
        Ok(self.data_wide.as_ref().expect("wide data cached"))
    }

    /// Calibration run: the full-width arm trained to the whole stage-2
    /// budget with no early stop. The tau pilot reads this run's held-out
    /// loss at 60% of the budget.
    pub fn pilot_wide_run(&mut self) -> Result<UnifiedRun> {
        let seed = self.cfg.seeds[0];
        self.ensure_data_wide()?;
        self.lm_trunk(seed)?;
        let cfg = self.stage2_cfg(None);
        let data = self.data_wide.as_ref().expect("wide data cached");
        let init = self.lm_trunks.get(&seed).expect("lm trunk cached");
        train_unified(data, &cfg, seed, Some(init))
    }

    /// Calibration run: the compact-latent arm, full budget, no early stop.
    pub fn pilot_d8_run(&mut self) -> Result<UnifiedRun> {
        let seed = self.cfg.seeds[0];
        self.ensure_data_d8()?;
        self.lm_trunk(seed)?;
        let cfg = self.stage2_cfg(None);
        let data = self.data_d8.as_ref().expect("data cached");
        let init = self.lm_trunks.get(&seed).expect("lm trunk cached");
        train_unified(data, &cfg, seed, Some(init))
    }

    /// Calibration run: the query pathway at the harness budget, no early stop.
    pub fn pilot_queries_run(&mut self) -> Result<QueriesRun> {
        let seed = self.cfg.seeds[0];
        self.ensure_data_d8()?;
        self.lm_trunk(seed)?;
        let cfg = self.queries_cfg(None);
        let data = self.data_d8.as_ref().expect("data cached");
        let backbone = self.lm_trunks.get(&seed).expect("lm trunk cached");
        train_queries(data, &cfg, seed, backbone)
    }

    /// Read-only view of artifacts cached by earlier harness calls, for
    /// invariant checks (parameter freezing, determinism) that must inspect
    /// the exact runs the experiments reported on.
    pub fn cached_stage1(&self) -> Option<&Stage1Run> {
        self.stage1.as_ref()
    }

    pub fn cached_transfusion(&self, seed: u64) -> Option<&UnifiedRun> {
        self.transfusion.get(&seed)
    }

    pub fn cached_queries(&self, seed: u64) -> Option<&QueriesRun> {
        self.queries_runs.get(&seed)
    }

    pub fn cached_lm_trunk(&self, seed: u64) -> Option<&ParamStore<f32>> {
        self.lm_trunks.get(&seed)
    }

    /// Full-budget query-pathway run (the committed queries config).
    pub fn queries_run_full(&mut self) -> Result<QueriesRun> {
        let seed = self.cfg.seeds[0];
        self.ensure_data_d8()?;
        self.lm_trunk(seed)?;
        let cfg = QueriesConfig { tau: None, ..self.cfg.queries.clone() };
        let data = self.data_d8.as_ref().expect("data cached");
        let backbone = self.lm_trunks.get(&seed).expect("lm trunk cached");
        train_queries(data, &cfg, seed, backbone)
    }

    // ---------------- experiment 1: latent shape ----------------

    pub fn shape_variants() -> Vec<(String, CompressorConfig)> {
        use crate::encoder::FEAT_DIM;
        vec![
            ("uncompressed_n64_D144".into(), CompressorConfig { variant: Variant::Identity, d: FEAT_DIM, pool: 1 }),
            ("seq_n16_D144".into(), CompressorConfig { variant: Variant::Mlp, d: FEAT_DIM, pool: 4 }),
            ("chan_n64_d32".into(), CompressorConfig { variant: Variant::Mlp, d: 32, pool: 1 }),
            ("chan_n64_d8_mlp".into(), CompressorConfig { variant: Variant::Mlp, d: 8, pool: 1 }),
            ("chan_n64_d8_mha".into(), CompressorConfig { variant: Variant::Mha, d: 8, pool: 1 }),
        ]
    }

    fn ablation_stage1_cfg(&self, comp: CompressorConfig) -> Stage1Config {
        let steps = self.cfg.harness.stage1_steps;
        Stage1Config {
            comp,
            steps,
            batch: self.cfg.harness.stage1_batch,
            warmup: (steps / 5).max(10),
            eval_every: steps.max(1),
            eval_images: 8,
            target_psnr: None,
            target_checker: None,
            ..self.cfg.stage1.clone()
        }
    }

    /// Train one short stage-1 run; the two d=8 projector variants are
    /// cached for reuse by the projector experiment.
    fn projector_grade_run(&mut self, name: &str, comp: CompressorConfig, seed: u64) -> Result<&Stage1Run> {
        let key = (name.to_string(), seed);
        if !self.projector_runs.contains_key(&key) {
            let cfg = self.ablation_stage1_cfg(comp);
            let run = train_stage1(&self.corpus_train, &self.corpus_val, &cfg, seed)?;
            self.projector_runs.insert(key.clone(), run);
        }
        Ok(self.projector_runs.get(&key).expect("run cached"))
    }

    pub fn ablate_shape(&mut self) -> Result<ExperimentOutcome> {
        let name = "shape";
        let mut log = MetricsLog::new();
        log.push(name, "_config", 0, 0, "stage1_steps", self.cfg.harness.stage1_steps as f64);
        log.push(name, "_config", 0, 0, "stage1_batch", self.cfg.harness.stage1_batch as f64);
        let seeds = self.cfg.seeds.clone();
        for (vname, comp) in Self::shape_variants() {
            let cacheable = comp.d == 8;
            for &seed in &seeds {
                let (mse, psnr, checker, steps_run, diverged) = if cacheable {
                    let run = self.projector_grade_run(&vname, comp, seed)?;
                    (run.final_mse, run.final_psnr, run.final_checker, run.steps_run, run.diverged_at.is_some())
                } else {
                    let cfg = self.ablation_stage1_cfg(comp);
                    let run = train_stage1(&self.corpus_train, &self.corpus_val, &cfg, seed)?;
                    (run.final_mse, run.final_psnr, run.final_checker, run.steps_run, run.diverged_at.is_some())
                };
                let step = steps_run as u64;
                log.push(name, &vname, seed, step, "mse", mse);
                log.push(name, &vname, seed, step, "psnr", psnr);
                log.push(name, &vname, seed, step, "checker", checker);
                log.push(name, &vname, seed, step, "diverged", if diverged { 1.0 } else { 0.0 });
            }
        }
        let (markdown, predicates) = report_shape(&log);
        Ok(ExperimentOutcome { name: name.into(), log, markdown, predicates })
    }

    // ---------------- experiment 2: convergence ----------------

    pub fn ablate_convergence(&mut self) -> Result<ExperimentOutcome> {
        let name = "convergence";
        let budget = self.cfg.harness.stage2_steps;
        let tau = self.cfg.harness.tau;
        let mut log = MetricsLog::new();
        log.push(name, "_config", 0, 0, "tau", tau);
        log.push(name, "_config", 0, 0, "stage2_steps", budget as f64);
        let seeds = self.cfg.seeds.clone();

        for &seed in &seeds {
            self.transfusion_run(seed)?;
            let run_metrics = {
                let run = self.transfusion.get(&seed).expect("run cached");
                run_summary(run.steps_to_tau, run.steps_run, run.diverged_at, &run.eval_curve, budget)
            };
            log_run(&mut log, name, "target_d8", seed, &run_metrics);
        }
        self.ensure_data_wide()?;
        for &seed in &seeds {
            self.lm_trunk(seed)?;
            let cfg = self.stage2_cfg(Some(tau));
            let data = self.data_wide.as_ref().expect("wide data cached");
            let init = self.lm_trunks.get(&seed).expect("lm trunk cached");
            let run = train_unified(data, &cfg, seed, Some(init))?;
            let run_metrics = run_summary(run.steps_to_tau, run.steps_run, run.diverged_at, &run.eval_curve, budget);
            log_run(&mut log, name, "target_D144", seed, &run_metrics);
        }
        let (markdown, predicates) = report_convergence(&log);
        Ok(ExperimentOutcome { name: name.into(), log, markdown, predicates })
    }

    // ---------------- experiment 3: projector ----------------

    fn ensure_class_sets(&mut self) -> Result<()> {
        if self.class_sets.is_some() {
            return Ok(());
        }
        // One frozen encoder is shared by every run (same seed stream as
        // stage-1 construction), so each image is encoded exactly once.
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut enc_rng = ChaCha8Rng::seed_from_u64(self.cfg.stage1.encoder_seed ^ 0x656e_6300);
        let enc = Encoder::new(&mut store, &mut enc_rng);

        let mut sil_feats = Vec::new();
        let mut sil_labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.corpus_seed ^ 0x7369_6c68);
        for i in 0..SIL_PER_CLASS {
            let _ = i;
            for (label, &(shape, color)) in SIL_CLASSES.iter().enumerate() {
                let scene = Scene::new(vec![Obj {
                    shape,
                    color,
                    row: rng.gen_range(0..4),
                    col: rng.gen_range(0..4),
                }]);
                sil_feats.push(enc.encode(&store, &render::<f32>(&scene))?);
                sil_labels.push(label);
            }
        }

        let mut probe_feats = Vec::new();
        let mut probe_labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.corpus_seed ^ 0x7072_6f62);
        // classes interleaved so the probe's every-4th test split stays
        // class-balanced
        for _ in 0..PROBE_PER_CLASS {
            for (si, &shape) in ALL_SHAPES.iter().enumerate() {
                for (ci, &color) in ALL_COLORS.iter().enumerate() {
                    let scene = Scene::new(vec![Obj {
                        shape,
                        color,
                        row: rng.gen_range(0..4),
                        col: rng.gen_range(0..4),
                    }]);
                    probe_feats.push(enc.encode(&store, &render::<f32>(&scene))?);
                    probe_labels.push(si * ALL_COLORS.len() + ci);
                }
            }
        }
        self.class_sets = Some(ClassSets { sil_feats, sil_labels, probe_feats, probe_labels });
        Ok(())
    }

    pub fn ablate_projector(&mut self) -> Result<ExperimentOutcome> {
        let name = "projector";
        let mut log = MetricsLog::new();
        log.push(name, "_config", 0, 0, "stage1_steps", self.cfg.harness.stage1_steps as f64);
        log.push(name, "_config", 0, 0, "sil_classes", SIL_CLASSES.len() as f64);
        log.push(name, "_config", 0, 0, "sil_per_class", SIL_PER_CLASS as f64);
        log.push(name, "_config", 0, 0, "probe_per_class", PROBE_PER_CLASS as f64);
        self.ensure_class_sets()?;
        let seeds = self.cfg.seeds.clone();
        let variants: Vec<(String, String, CompressorConfig)> = vec![
            (
                "proj_mlp".into(),
                "chan_n64_d8_mlp".into(),
                CompressorConfig { variant: Variant::Mlp, d: 8, pool: 1 },
            ),
            (
                "proj_mha".into(),
                "chan_n64_d8_mha".into(),
                CompressorConfig { variant: Variant::Mha, d: 8, pool: 1 },
            ),
        ];
        for (vname, cache_name, comp) in &variants {
            for &seed in &seeds {
                self.projector_grade_run(cache_name, *comp, seed)?;
                let run = self.projector_runs.get(&(cache_name.clone(), seed)).expect("cached");
                let sets = self.class_sets.as_ref().expect("class sets cached");
                let metrics = projector_metrics(run, sets)?;
                let step = run.steps_run as u64;
                let diverged = if run.diverged_at.is_some() { 1.0 } else { 0.0 };
                for (m, v) in metrics {
                    log.push(name, vname, seed, step, m, v);
                }
                log.push(name, vname, seed, step, "diverged", diverged);
            }
        }
        let (markdown, predicates) = report_projector(&log);
        Ok(ExperimentOutcome { name: name.into(), log, markdown, predicates })
    }

    // ---------------- experiment 4: init and pathway ----------------

    pub fn ablate_init_and_pathway(&mut self) -> Result<ExperimentOutcome> {
        let name = "init-pathway";
        let budget = self.cfg.harness.stage2_steps;
        let tau = self.cfg.harness.tau;
        let mut log = MetricsLog::new();
        log.push(name, "_config", 0, 0, "tau", tau);
        log.push(name, "_config", 0, 0, "stage2_steps", budget as f64);
        log.push(name, "_config", 0, 0, "pretrain_steps", self.cfg.harness.pretrain_steps as f64);
        log.push(name, "_config", 0, 0, "m_queries", self.cfg.queries.m as f64);
        let seeds = self.cfg.seeds.clone();
        let id_pairs = identity_edit_set(self.cfg.corpus_seed, 12);

        // the canonical runs serve as both the text-only-init arm and the
        // unified-pathway arm
        for &seed in &seeds {
            self.transfusion_run(seed)?;
            let (summary, identity) = {
                let run = self.transfusion.get(&seed).expect("run cached");
                let stage1 = self.stage1.as_ref().expect("stage1 cached");
                let summary =
                    run_summary(run.steps_to_tau, run.steps_run, run.diverged_at, &run.eval_curve, budget);
                let identity =
                    identity_score_unified(stage1, run, &id_pairs, &self.cfg.sampler)?;
                (summary, identity)
            };
            log_run(&mut log, name, "init_lm", seed, &summary);
            log_run(&mut log, name, "pathway_unified", seed, &summary);
            let step = summary.steps_run as u64;
            log.push(name, "pathway_unified", seed, step, "edit_identity", identity);
        }

        for &seed in &seeds {
            self.vlm_trunk(seed)?;
            let cfg = self.stage2_cfg(Some(tau));
            let data = self.data_d8.as_ref().expect("data cached");
            let init = self.vlm_trunks.get(&seed).expect("vlm trunk cached");
            let run = train_unified(data, &cfg, seed, Some(init))?;
            let summary = run_summary(run.steps_to_tau, run.steps_run, run.diverged_at, &run.eval_curve, budget);
            log_run(&mut log, name, "init_vlm", seed, &summary);
        }

        for &seed in &seeds {
            self.lm_trunk(seed)?;
            if !self.queries_runs.contains_key(&seed) {
                let cfg = self.queries_cfg(Some(tau));
                let data = self.data_d8.as_ref().expect("data cached");
                let backbone = self.lm_trunks.get(&seed).expect("lm trunk cached");
                let run = train_queries(data, &cfg, seed, backbone)?;
                self.queries_runs.insert(seed, run);
            }
            let run = self.queries_runs.get(&seed).expect("run cached");
            let summary = run_summary(run.steps_to_tau, run.steps_run, run.diverged_at, &run.eval_curve, budget);
            let stage1 = self.stage1.as_ref().expect("stage1 cached");
            let identity = identity_score_queries(stage1, run, &id_pairs, &self.cfg.sampler)?;
            log_run(&mut log, name, "pathway_queries", seed, &summary);
            log.push(name, "pathway_queries", seed, summary.steps_run as u64, "edit_identity", identity);
        }

        let (markdown, predicates) = report_init_pathway(&log);
        Ok(ExperimentOutcome { name: name.into(), log, markdown, predicates })
    }

    // ---------------- end-to-end generation ----------------

    /// The committed full-budget unified run used for generation quality.
    pub fn final_run(&mut self) -> Result<&UnifiedRun> {
        if self.finalist.is_none() {
            let seed = self.cfg.seeds[0];
            self.lm_trunk(seed)?;
            let cfg = UnifiedConfig { tau: None, ..self.cfg.unified.clone() };
            let data = self.data_d8.as_ref().expect("data cached");
            let init = self.lm_trunks.get(&seed).expect("lm trunk cached");
            let run = train_unified(data, &cfg, seed, Some(init))?;
            self.finalist = Some(run);
        }
        Ok(self.finalist.as_ref().expect("finalist cached"))
    }

    /// Held-out single-object captions from the validation split.
    pub fn heldout_single_prompts(&self, count: usize) -> Vec<Vec<usize>> {
        self.corpus_val
            .iter()
            .filter(|(s, _)| s.objects.len() == 1)
            .take(count)
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn generation_eval(&mut self) -> Result<ExperimentOutcome> {
        let name = "generation";
        let mut log = MetricsLog::new();
        log.push(name, "_config", 0, 0, "final_steps", self.cfg.unified.steps as f64);
        self.final_run()?;
        let seed = self.cfg.seeds[0];
        let run = self.finalist.as_ref().expect("finalist cached");
        let stage1 = self.stage1.as_ref().expect("stage1 cached");
        let sampler = self.cfg.sampler.clone();

        let prompts = self.heldout_single_prompts(15);
        let mut sum = 0.0;
        for caption in &prompts {
            let img = generate_image(stage1, &run.model, &run.store, caption, &sampler)?;
            sum += checker_score(&img, caption)?;
        }
        let mean_checker = sum / prompts.len() as f64;

        let pairs = recolor_edit_set(self.cfg.corpus_seed, 12);
        let mut passes = 0usize;
        for pair in &pairs {
            let src = render::<f32>(&pair.source);
            let out = edit_image(stage1, &run.model, &run.store, &src, &pair.instruction, &sampler)?;
            if checker_score(&out, &caption_tokens(&pair.target))? == 1.0 {
                passes += 1;
            }
        }
        let pass_rate = passes as f64 / pairs.len() as f64;

        let again = generate_image(stage1, &run.model, &run.store, &prompts[0], &sampler)?;
        let first = generate_image(stage1, &run.model, &run.store, &prompts[0], &sampler)?;
        let deterministic = if again.data() == first.data() { 1.0 } else { 0.0 };

        let step = run.steps_run as u64;
        log.push(name, "final", seed, step, "mean_checker", mean_checker);
        log.push(name, "final", seed, step, "recolor_pass_rate", pass_rate);
        log.push(name, "final", seed, step, "deterministic", deterministic);
        log.push(name, "final", seed, step, "prompts", prompts.len() as f64);
        log.push(name, "final", seed, step, "edit_pairs", pairs.len() as f64);

        let (markdown, predicates) = report_generation(&log);
        Ok(ExperimentOutcome { name: name.into(), log, markdown, predicates })
    }
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

struct RunSummary {
    steps_to_tau: f64,
    reached: bool,
    steps_run: usize,
    diverged: bool,
    final_eval: f64,
    curve: Vec<(usize, f64)>,
}

fn run_summary(
    steps_to_tau: Option<usize>,
    steps_run: usize,
    diverged_at: Option<usize>,
    eval_curve: &[(usize, f64)],
    budget: usize,
) -> RunSummary {
    RunSummary {
        steps_to_tau: steps_to_tau.map(|s| s as f64).unwrap_or((budget + 1) as f64),
        reached: steps_to_tau.is_some(),
        steps_run,
        diverged: diverged_at.is_some(),
        final_eval: eval_curve.last().map(|(_, v)| *v).unwrap_or(f64::NAN),
        curve: eval_curve.to_vec(),
    }
}

fn log_run(log: &mut MetricsLog, experiment: &str, variant: &str, seed: u64, s: &RunSummary) {
    for (step, v) in &s.curve {
        log.push(experiment, variant, seed, *step as u64, "l_fm_eval", *v);
    }
    let step = s.steps_run as u64;
    log.push(experiment, variant, seed, step, "steps_to_tau", s.steps_to_tau);
    log.push(experiment, variant, seed, step, "reached_tau", if s.reached { 1.0 } else { 0.0 });
    log.push(experiment, variant, seed, step, "final_l_fm_eval", s.final_eval);
    log.push(experiment, variant, seed, step, "diverged", if s.diverged { 1.0 } else { 0.0 });
}

fn checker_score(img: &Tensor<f32>, caption: &[usize]) -> Result<f64> {
    check_image(img, caption).map_err(|e| NumericsError::InvalidArgument {
        context: "checker".into(),
        detail: e.to_string(),
    })
}

fn identity_score_unified(
    stage1: &Stage1Run,
    run: &UnifiedRun,
    pairs: &[(Scene, Vec<usize>)],
    sampler: &crate::sampling::SamplerConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    for (scene, instr) in pairs {
        let src = render::<f32>(scene);
        let out = edit_image(stage1, &run.model, &run.store, &src, instr, sampler)?;
        sum += checker_score(&out, &caption_tokens(scene))?;
    }
    Ok(sum / pairs.len() as f64)
}

fn identity_score_queries(
    stage1: &Stage1Run,
    run: &QueriesRun,
    pairs: &[(Scene, Vec<usize>)],
    sampler: &crate::sampling::SamplerConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    for (scene, instr) in pairs {
        let src = render::<f32>(scene);
        let out = edit_image_queries(stage1, &run.model, &run.store, &src, instr, sampler)?;
        sum += checker_score(&out, &caption_tokens(scene))?;
    }
    Ok(sum / pairs.len() as f64)
}

fn mean_rows_f64(t: &Tensor<f32>) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += t.data()[r * cols + c] as f64;
        }
    }
    for v in out.iter_mut() {
        *v /= rows as f64;
    }
    out
}

fn fused_means(
    comp: &Compressor,
    store: &ParamStore<f32>,
    feats: &Tensor<f32>,
    latent: &Tensor<f32>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let z = g.constant(feats.clone());
    let l = g.constant(latent.clone());
    let seq = comp.fuse_seq(&mut g, store, &mut bind, z, l)?;
    let dim = comp.fuse_dim(&mut g, z, l)?;
    Ok((mean_rows_f64(g.value(dim)), mean_rows_f64(g.value(seq))))
}

/// Silhouette plus the four probe accuracies for one trained compressor.
fn projector_metrics(run: &Stage1Run, sets: &ClassSets) -> Result<Vec<(&'static str, f64)>> {
    let comp = &run.model.comp;
    let store = &run.store;

    let mut sil_points = Vec::with_capacity(sets.sil_feats.len());
    for f in &sets.sil_feats {
        sil_points.push(mean_rows_f64(&comp.compress_value(store, f)?));
    }
    let silhouette = silhouette_score(&sil_points, &sets.sil_labels)?;

    let n = sets.probe_feats.len();
    let mut raw = Vec::with_capacity(n);
    let mut compressed = Vec::with_capacity(n);
    let mut dim_concat = Vec::with_capacity(n);
    let mut seq_concat = Vec::with_capacity(n);
    for f in &sets.probe_feats {
        let latent = comp.compress_value(store, f)?;
        let (dim_mean, seq_mean) = fused_means(comp, store, f, &latent)?;
        raw.push(mean_rows_f64(f));
        compressed.push(mean_rows_f64(&latent));
        dim_concat.push(dim_mean);
        seq_concat.push(seq_mean);
    }
    let classes = ALL_SHAPES.len() * ALL_COLORS.len();
    Ok(vec![
        ("silhouette", silhouette),
        ("probe_raw", linear_probe(&raw, &sets.probe_labels, classes)?),
        ("probe_compressed", linear_probe(&compressed, &sets.probe_labels, classes)?),
        ("probe_dim_concat", linear_probe(&dim_concat, &sets.probe_labels, classes)?),
        ("probe_seq_concat", linear_probe(&seq_concat, &sets.probe_labels, classes)?),
    ])
}
