//! The staged experiment pipeline behind every CLI command. Each stage reads
//! the previous stage's artifacts from the seed directory, recomputes its own
//! deterministically, and writes them back, so reruns are byte-identical and
//! any missing input names the command that produces it. Wall-clock timings
//! go to a `timing.json` sidecar to keep the metric files reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use leaf_core::corpus::{
    by_split, corpus_stats, generate_corpus, read_corpus, write_corpus, Split, TaskSample,
    VocabLayout,
};
use leaf_core::detect::{
    compute_attribution, counterfactuals_with_strategy, decodes_gold, extract_spans,
    flag_confounders, prune, read_counterfactuals, read_report, write_counterfactuals,
    write_heatmap_csv, write_report, CounterfactualSample, DetectionReport, MaskStrategy,
    SplitMode,
};
use leaf_core::distill::{
    counterfactual_train_sample, original_train_sample, train_distill, train_pure_kd,
};
use leaf_core::model::{
    greedy_decode, Capacity, ModelParams, TokenId, TrainConfig, TrainSample,
};
use serde::Serialize;
use serde_json::Value;

use crate::config::{
    derive_seed, ExperimentConfig, STREAM_BASELINES, STREAM_BATCH_DISTILL, STREAM_BATCH_STUDENT,
    STREAM_BATCH_TEACHER, STREAM_CORPUS, STREAM_INIT_STUDENT, STREAM_INIT_TEACHER,
};
use crate::metrics::{
    aggregate, eval_split, jaccard, mean, sign_test, threshold_table, DetectionMetrics,
    MetricsReport, SeedOutcome, SignTest, VariantMetrics,
};
use crate::schema::{validate_str, AGGREGATE_SCHEMA, METRICS_SCHEMA, PILOT_SCHEMA};

// ─── artifact layout ───

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const TEACHER_FILE: &str = "teacher.json";
pub const TEACHER_HISTORY_FILE: &str = "teacher_history.json";
pub const STUDENT_FILE: &str = "student.json";
pub const STUDENT_HISTORY_FILE: &str = "student_history.json";
pub const DETECTION_FILE: &str = "detection.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const CF_FILE: &str = "counterfactuals.json";
pub const LEAF_MODEL_FILE: &str = "distilled_leaf.json";
pub const LEAF_HISTORY_FILE: &str = "history_leaf.json";
pub const KD_MODEL_FILE: &str = "distilled_kd.json";
pub const KD_HISTORY_FILE: &str = "history_kd.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PILOT_FILE: &str = "pilot.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Errors with both the missing file and the command that writes it.
fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing artifact {}: produce it with `leaf {producer} --config <config>`",
            path.display()
        );
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Merges one command's wall-clock seconds into the sidecar.
fn record_timing(dir: &Path, command: &str, started: Instant) -> Result<()> {
    let path = dir.join(TIMING_FILE);
    let mut map: BTreeMap<String, f64> = if path.exists() {
        serde_json::from_str(&fs::read_to_string(&path)?)?
    } else {
        BTreeMap::new()
    };
    map.insert(command.to_string(), started.elapsed().as_secs_f64());
    write_json(&path, &map)
}

// ─── stage context ───

/// Everything a stage needs for one seed.
pub struct SeedCtx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub vocab: VocabLayout,
}

impl<'a> SeedCtx<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: &Path, seed: u64) -> Result<Self> {
        let vocab = cfg.corpus.to_core(0).vocab()?;
        Ok(SeedCtx { cfg, seed, dir: seed_dir(out, seed), vocab })
    }

    fn corpus(&self) -> Result<Vec<TaskSample>> {
        let path = self.dir.join(CORPUS_FILE);
        require(&path, "generate")?;
        Ok(read_corpus(&path)?)
    }

    fn model(&self, file: &str, producer: &str) -> Result<ModelParams> {
        let path = self.dir.join(file);
        require(&path, producer)?;
        Ok(ModelParams::load(&path)?)
    }

    fn detection(&self) -> Result<DetectionReport> {
        let path = self.dir.join(DETECTION_FILE);
        require(&path, "detect")?;
        Ok(read_report(&path)?)
    }

    fn counterfactuals(&self) -> Result<Vec<CounterfactualSample>> {
        let path = self.dir.join(CF_FILE);
        require(&path, "build-cf")?;
        Ok(read_counterfactuals(&path)?)
    }
}

// ─── stages ───

pub fn cmd_generate(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let corpus_cfg = ctx.cfg.corpus.to_core(derive_seed(ctx.seed, STREAM_CORPUS));
    let corpus = generate_corpus(&corpus_cfg)?;
    fs::create_dir_all(&ctx.dir)?;
    write_corpus(&corpus, &ctx.dir.join(CORPUS_FILE))?;
    write_json(&ctx.dir.join(STATS_FILE), &corpus_stats(&corpus))?;
    record_timing(&ctx.dir, "generate", t)
}

fn train_next_token(
    ctx: &SeedCtx,
    split: Split,
    capacity: Capacity,
) -> Result<(ModelParams, Vec<leaf_core::model::EpochLoss>)> {
    let corpus = ctx.corpus()?;
    let data: Vec<TrainSample> =
        by_split(&corpus, split).iter().map(|s| original_train_sample(s)).collect();
    let (section, init_stream, batch_stream) = match capacity {
        Capacity::Teacher => (&ctx.cfg.teacher, STREAM_INIT_TEACHER, STREAM_BATCH_TEACHER),
        Capacity::Student => (&ctx.cfg.student, STREAM_INIT_STUDENT, STREAM_BATCH_STUDENT),
    };
    let mcfg = section.to_core(ctx.vocab.vocab_size(), ctx.cfg.max_seq_len, capacity);
    let mut params = ModelParams::init(mcfg, derive_seed(ctx.seed, init_stream))?;
    let tcfg = TrainConfig {
        epochs: section.epochs,
        batch_size: section.batch_size,
        lr: section.lr,
        seed: derive_seed(ctx.seed, batch_stream),
    };
    let history = leaf_core::model::train_lm(&mut params, &data, &tcfg)?;
    Ok((params, history))
}

pub fn cmd_train_teacher(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let (params, history) = train_next_token(ctx, Split::TeacherTrain, Capacity::Teacher)?;
    params.save(&ctx.dir.join(TEACHER_FILE))?;
    write_json(&ctx.dir.join(TEACHER_HISTORY_FILE), &history)?;
    record_timing(&ctx.dir, "train-teacher", t)
}

pub fn cmd_train_student(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let (params, history) = train_next_token(ctx, Split::StudentTrain, Capacity::Student)?;
    params.save(&ctx.dir.join(STUDENT_FILE))?;
    write_json(&ctx.dir.join(STUDENT_HISTORY_FILE), &history)?;
    record_timing(&ctx.dir, "train-student", t)
}

/// Shared by detect and build-cf: the full detection pass over student_train.
fn run_detection(
    ctx: &SeedCtx,
    corpus: &[TaskSample],
    teacher: &ModelParams,
    student: &ModelParams,
    strategy: MaskStrategy,
    tau: Option<f64>,
    split: Option<SplitMode>,
) -> Result<(Vec<CounterfactualSample>, DetectionReport)> {
    let mut dcfg = ctx.cfg.detection.clone();
    if let Some(t) = tau {
        dcfg.tau = t;
    }
    let split_mode = split.unwrap_or(ctx.cfg.distill.split);
    let samples = by_split(corpus, Split::StudentTrain);
    let out = counterfactuals_with_strategy(
        teacher,
        student,
        &samples,
        &ctx.vocab,
        &dcfg,
        split_mode,
        derive_seed(ctx.seed, STREAM_BASELINES),
        strategy,
    )?;
    Ok(out)
}

pub fn cmd_detect(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
    let student = ctx.model(STUDENT_FILE, "train-student")?;
    let (_, report) =
        run_detection(ctx, &corpus, &teacher, &student, ctx.cfg.distill.strategy, None, None)?;
    write_report(&report, &ctx.dir.join(DETECTION_FILE))?;
    write_heatmap_csv(&report, &ctx.dir.join(HEATMAP_FILE))?;
    record_timing(&ctx.dir, "detect", t)
}

pub fn cmd_build_cf(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
    let student = ctx.model(STUDENT_FILE, "train-student")?;
    require(&ctx.dir.join(DETECTION_FILE), "detect")?;
    let (cfs, _) =
        run_detection(ctx, &corpus, &teacher, &student, ctx.cfg.distill.strategy, None, None)?;
    write_counterfactuals(&cfs, &ctx.dir.join(CF_FILE))?;
    record_timing(&ctx.dir, "build-cf", t)
}

/// Originals for distillation: all of student_train, or only the samples the
/// frozen pre-distillation student already decodes correctly.
fn assemble_originals(
    ctx: &SeedCtx,
    corpus: &[TaskSample],
    student: &ModelParams,
) -> Result<Vec<TrainSample>> {
    let samples = by_split(corpus, Split::StudentTrain);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if ctx.cfg.detection.include_student_wrong_originals
            || decodes_gold(student, s, &ctx.vocab)?
        {
            out.push(original_train_sample(s));
        }
    }
    Ok(out)
}

pub fn cmd_distill(ctx: &SeedCtx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
    let student = ctx.model(STUDENT_FILE, "train-student")?;
    let cfs = ctx.counterfactuals()?;
    let originals = assemble_originals(ctx, &corpus, &student)?;
    let cf_train: Vec<TrainSample> = cfs.iter().map(counterfactual_train_sample).collect();
    let dcfg = ctx.cfg.distill.to_core(derive_seed(ctx.seed, STREAM_BATCH_DISTILL));

    let mut leaf = student.clone();
    let leaf_history = train_distill(&teacher, &mut leaf, &originals, &cf_train, &dcfg, None)?;
    leaf.save(&ctx.dir.join(LEAF_MODEL_FILE))?;
    write_json(&ctx.dir.join(LEAF_HISTORY_FILE), &leaf_history)?;

    let mut kd = student.clone();
    let kd_history = train_pure_kd(&teacher, &mut kd, &originals, &dcfg, None)?;
    kd.save(&ctx.dir.join(KD_MODEL_FILE))?;
    write_json(&ctx.dir.join(KD_HISTORY_FILE), &kd_history)?;
    record_timing(&ctx.dir, "distill", t)
}

// ─── evaluation ───

fn variant_metrics(
    name: &str,
    params: &ModelParams,
    clean: &[&TaskSample],
    confounded: &[&TaskSample],
    vocab: &VocabLayout,
) -> Result<VariantMetrics> {
    let (clean_acc, clean_jac) = eval_split(params, clean, vocab)?;
    let (conf_acc, conf_jac) = eval_split(params, confounded, vocab)?;
    Ok(VariantMetrics {
        variant: name.to_string(),
        eval_clean_accuracy: clean_acc,
        eval_confounded_accuracy: conf_acc,
        eval_clean_jaccard: clean_jac,
        eval_confounded_jaccard: conf_jac,
    })
}

/// Per-seed evaluation. The student is mandatory; teacher and the distilled
/// pair join the report when their artifacts exist, so a bare student
/// checkpoint can still be scored against chance.
pub fn cmd_evaluate_seed(ctx: &SeedCtx) -> Result<MetricsReport> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let student = ctx.model(STUDENT_FILE, "train-student")?;
    let clean = by_split(&corpus, Split::EvalClean);
    let confounded = by_split(&corpus, Split::EvalConfounded);

    let mut variants = Vec::new();
    if ctx.dir.join(TEACHER_FILE).exists() {
        let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
        variants.push(variant_metrics("teacher", &teacher, &clean, &confounded, &ctx.vocab)?);
    }
    variants.push(variant_metrics("student", &student, &clean, &confounded, &ctx.vocab)?);
    if ctx.dir.join(LEAF_MODEL_FILE).exists() {
        let leaf = ctx.model(LEAF_MODEL_FILE, "distill")?;
        variants.push(variant_metrics("leaf", &leaf, &clean, &confounded, &ctx.vocab)?);
    }
    if ctx.dir.join(KD_MODEL_FILE).exists() {
        let kd = ctx.model(KD_MODEL_FILE, "distill")?;
        variants.push(variant_metrics("kd", &kd, &clean, &confounded, &ctx.vocab)?);
    }

    let (detection, threshold_sweep) = if ctx.dir.join(DETECTION_FILE).exists() {
        let report = ctx.detection()?;
        let det = DetectionMetrics {
            tau: report.config.tau,
            scanned: report.scanned,
            candidates: report.candidates,
            counterfactuals: report.counterfactual_count,
            fallback_splits: report.fallback_splits,
            gradient_precision: report.gradient.precision(),
            gradient_recall: report.gradient.recall(),
            random_precision: report.random_baseline.precision(),
            random_recall: report.random_baseline.recall(),
            ppl_precision: report.ppl_baseline.precision(),
            ppl_recall: report.ppl_baseline.recall(),
        };
        let table = threshold_table(&report, &corpus, &ctx.cfg.sweep.taus);
        (Some(det), table)
    } else {
        (None, Vec::new())
    };

    let report = MetricsReport { seed: ctx.seed, variants, detection, threshold_sweep };
    let as_value: Value = serde_json::to_value(&report)?;
    validate_str(METRICS_SCHEMA, &as_value).context("metrics report failed its own schema")?;
    write_json(&ctx.dir.join(METRICS_FILE), &report)?;
    record_timing(&ctx.dir, "evaluate", t)?;
    Ok(report)
}

/// Cross-seed aggregate over the paired leaf/kd variants.
pub fn write_aggregate(out: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut outcomes = Vec::with_capacity(reports.len());
    for r in reports {
        let find = |name: &str| -> Result<&VariantMetrics> {
            r.variants.iter().find(|v| v.variant == name).with_context(|| {
                format!(
                    "seed {} metrics lack the '{name}' variant; run `leaf distill` first",
                    r.seed
                )
            })
        };
        let leaf = find("leaf")?;
        let kd = find("kd")?;
        outcomes.push(SeedOutcome {
            seed: r.seed,
            leaf_clean: leaf.eval_clean_accuracy,
            leaf_confounded: leaf.eval_confounded_accuracy,
            kd_clean: kd.eval_clean_accuracy,
            kd_confounded: kd.eval_confounded_accuracy,
            confounded_delta: leaf.eval_confounded_accuracy - kd.eval_confounded_accuracy,
            clean_delta: leaf.eval_clean_accuracy - kd.eval_clean_accuracy,
        });
    }
    let agg = aggregate(outcomes);
    let as_value: Value = serde_json::to_value(&agg)?;
    validate_str(AGGREGATE_SCHEMA, &as_value).context("aggregate failed its own schema")?;
    write_json(&out.join(METRICS_FILE), &agg)
}

// ─── pilot: prune detected spans at inference time ───

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PilotReport {
    pub seed: u64,
    pub tau: f64,
    pub n_eval: usize,
    /// Inputs where detection produced at least one span to prune.
    pub pruned_inputs: usize,
    pub before_accuracy: f64,
    pub after_accuracy: f64,
    pub accuracy_delta: f64,
    pub before_jaccard: f64,
    pub after_jaccard: f64,
    pub jaccard_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PilotAggregate {
    pub seeds: Vec<u64>,
    pub outcomes: Vec<PilotReport>,
    pub mean_accuracy_delta: f64,
    pub mean_jaccard_delta: f64,
    pub accuracy_sign_test: SignTest,
}

/// Flags and prunes each confounded eval instruction, then re-decodes the
/// non-distilled student on the pruned input. No parameters change; the
/// delta isolates what span removal alone buys at inference time.
/// `min_span_len` overrides the detection setting when given (a span length
/// floor above any instruction forces the empty-span control case).
pub fn pilot_prune_eval(
    ctx: &SeedCtx,
    teacher: &ModelParams,
    student: &ModelParams,
    corpus: &[TaskSample],
    min_span_len: Option<usize>,
) -> Result<PilotReport> {
    let dcfg = &ctx.cfg.detection;
    let min_len = min_span_len.unwrap_or(dcfg.min_span_len);
    let confounded = by_split(corpus, Split::EvalConfounded);
    let mut hits_before = 0usize;
    let mut hits_after = 0usize;
    let mut jac_before = 0.0;
    let mut jac_after = 0.0;
    let mut pruned_inputs = 0usize;

    for s in &confounded {
        let il = s.instruction.len();
        let seq = s.tokens();
        let mut record = compute_attribution(
            teacher,
            student,
            &seq,
            il,
            il,
            &s.id,
            0,
            dcfg.sensitivity_norm,
        )?;
        record.flags = flag_confounders(&record, dcfg.tau);
        let spans = extract_spans(&record.flags, min_len);
        let full: Vec<(usize, usize)> =
            spans.iter().copied().filter(|&(a, b)| b - a < il).collect();
        let pruned = if full.is_empty() {
            s.instruction.clone()
        } else {
            pruned_inputs += 1;
            prune(&s.instruction, &full)?
        };

        let before = greedy_decode(student, &s.instruction, s.response.len(), ctx.vocab.stop())?
            [il..]
            .to_vec();
        let after =
            greedy_decode(student, &pruned, s.response.len(), ctx.vocab.stop())?[pruned.len()..]
                .to_vec();
        if before == s.response {
            hits_before += 1;
        }
        if after == s.response {
            hits_after += 1;
        }
        jac_before += jaccard(&before, &s.response);
        jac_after += jaccard(&after, &s.response);
    }

    let n = confounded.len().max(1) as f64;
    let before_accuracy = hits_before as f64 / n;
    let after_accuracy = hits_after as f64 / n;
    let before_jaccard = jac_before / n;
    let after_jaccard = jac_after / n;
    Ok(PilotReport {
        seed: ctx.seed,
        tau: dcfg.tau,
        n_eval: confounded.len(),
        pruned_inputs,
        before_accuracy,
        after_accuracy,
        accuracy_delta: after_accuracy - before_accuracy,
        before_jaccard,
        after_jaccard,
        jaccard_delta: after_jaccard - before_jaccard,
    })
}

pub fn cmd_pilot_seed(ctx: &SeedCtx) -> Result<PilotReport> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
    let student = ctx.model(STUDENT_FILE, "train-student")?;
    require(&ctx.dir.join(DETECTION_FILE), "detect")?;
    let report = pilot_prune_eval(ctx, &teacher, &student, &corpus, None)?;
    let as_value: Value = serde_json::to_value(&report)?;
    validate_str(PILOT_SCHEMA, &as_value).context("pilot report failed its own schema")?;
    write_json(&ctx.dir.join(PILOT_FILE), &report)?;
    record_timing(&ctx.dir, "pilot-prune-eval", t)?;
    Ok(report)
}

pub fn write_pilot_aggregate(out: &Path, outcomes: Vec<PilotReport>) -> Result<()> {
    let deltas: Vec<f64> = outcomes.iter().map(|o| o.accuracy_delta).collect();
    let agg = PilotAggregate {
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        mean_accuracy_delta: mean(outcomes.iter().map(|o| o.accuracy_delta)),
        mean_jaccard_delta: mean(outcomes.iter().map(|o| o.jaccard_delta)),
        accuracy_sign_test: sign_test(&deltas),
        outcomes,
    };
    let as_value: Value = serde_json::to_value(&agg)?;
    validate_str(PILOT_SCHEMA, &as_value).context("pilot aggregate failed its own schema")?;
    write_json(&out.join(PILOT_FILE), &agg)
}

// ─── sweeps ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    Lambda,
    Strategy,
    Splitting,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Splitting => "splitting",
        }
    }
}

fn enum_label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::from("?"),
    }
}

struct SweepCell {
    value: String,
    seed: u64,
    eval_clean: f64,
    eval_confounded: f64,
    gradient_precision: f64,
    gradient_recall: f64,
    counterfactuals: usize,
}

/// One sweep cell: rebuild counterfactuals under the overridden setting,
/// distill the blended arm from the frozen student, and score it.
#[allow(clippy::too_many_arguments)]
fn sweep_cell(
    ctx: &SeedCtx,
    corpus: &[TaskSample],
    teacher: &ModelParams,
    student: &ModelParams,
    axis: SweepAxis,
    tau: Option<f64>,
    lambda: Option<f64>,
    strategy: Option<MaskStrategy>,
    split: Option<SplitMode>,
    label: String,
) -> Result<SweepCell> {
    let mut dcfg = ctx.cfg.detection.clone();
    if let Some(t) = tau {
        dcfg.tau = t;
    }
    // The splitting axis widens scope so segment choice can matter.
    if axis == SweepAxis::Splitting {
        dcfg.scope = match split.unwrap_or(ctx.cfg.distill.split) {
            SplitMode::NoSplit => leaf_core::detect::DetectionScope::InstructOnly,
            _ => leaf_core::detect::DetectionScope::InstructAndResponse,
        };
    }
    let split_mode = split.unwrap_or(ctx.cfg.distill.split);
    let strat = strategy.unwrap_or(ctx.cfg.distill.strategy);
    let samples = by_split(corpus, Split::StudentTrain);
    let (cfs, report) = counterfactuals_with_strategy(
        teacher,
        student,
        &samples,
        &ctx.vocab,
        &dcfg,
        split_mode,
        derive_seed(ctx.seed, STREAM_BASELINES),
        strat,
    )?;

    let originals = assemble_originals(ctx, corpus, student)?;
    let cf_train: Vec<TrainSample> = cfs.iter().map(counterfactual_train_sample).collect();
    let mut distill_cfg = ctx.cfg.distill.to_core(derive_seed(ctx.seed, STREAM_BATCH_DISTILL));
    if let Some(l) = lambda {
        distill_cfg.lambda = l;
    }
    distill_cfg.split = split_mode;
    distill_cfg.strategy = strat;
    let mut model = student.clone();
    train_distill(teacher, &mut model, &originals, &cf_train, &distill_cfg, None)?;

    let clean = by_split(corpus, Split::EvalClean);
    let confounded = by_split(corpus, Split::EvalConfounded);
    let (eval_clean, _) = eval_split(&model, &clean, &ctx.vocab)?;
    let (eval_confounded, _) = eval_split(&model, &confounded, &ctx.vocab)?;
    Ok(SweepCell {
        value: label,
        seed: ctx.seed,
        eval_clean,
        eval_confounded,
        gradient_precision: report.gradient.precision(),
        gradient_recall: report.gradient.recall(),
        counterfactuals: cfs.len(),
    })
}

/// Runs one axis over its config grid for the given seeds and writes
/// `sweeps/<axis>.csv`: header, |values|·|seeds| data rows, one mean row.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    seeds: &[u64],
    axis: SweepAxis,
) -> Result<PathBuf> {
    let t = Instant::now();
    let mut cells: Vec<SweepCell> = Vec::new();
    for &seed in seeds {
        let ctx = SeedCtx::new(cfg, out, seed)?;
        let corpus = ctx.corpus()?;
        let teacher = ctx.model(TEACHER_FILE, "train-teacher")?;
        let student = ctx.model(STUDENT_FILE, "train-student")?;
        match axis {
            SweepAxis::Tau => {
                for &tau in &cfg.sweep.taus {
                    cells.push(sweep_cell(
                        &ctx,
                        &corpus,
                        &teacher,
                        &student,
                        axis,
                        Some(tau),
                        None,
                        None,
                        None,
                        format!("{tau}"),
                    )?);
                }
            }
            SweepAxis::Lambda => {
                for &lambda in &cfg.sweep.lambdas {
                    cells.push(sweep_cell(
                        &ctx,
                        &corpus,
                        &teacher,
                        &student,
                        axis,
                        None,
                        Some(lambda),
                        None,
                        None,
                        format!("{lambda}"),
                    )?);
                }
            }
            SweepAxis::Strategy => {
                for &strategy in &cfg.sweep.strategies {
                    cells.push(sweep_cell(
                        &ctx,
                        &corpus,
                        &teacher,
                        &student,
                        axis,
                        None,
                        None,
                        Some(strategy),
                        None,
                        enum_label(&strategy),
                    )?);
                }
            }
            SweepAxis::Splitting => {
                for &split in &cfg.sweep.splits {
                    cells.push(sweep_cell(
                        &ctx,
                        &corpus,
                        &teacher,
                        &student,
                        axis,
                        None,
                        None,
                        None,
                        Some(split),
                        enum_label(&split),
                    )?);
                }
            }
        }
    }

    // Seed-major collection above; the table is value-major for readability.
    cells.sort_by(|a, b| a.value.cmp(&b.value).then(a.seed.cmp(&b.seed)));

    let dir = out.join("sweeps");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "axis",
        "value",
        "seed",
        "eval_clean_accuracy",
        "eval_confounded_accuracy",
        "gradient_precision",
        "gradient_recall",
        "counterfactuals",
    ])?;
    for c in &cells {
        w.write_record([
            axis.name(),
            &c.value,
            &c.seed.to_string(),
            &format!("{}", c.eval_clean),
            &format!("{}", c.eval_confounded),
            &format!("{}", c.gradient_precision),
            &format!("{}", c.gradient_recall),
            &c.counterfactuals.to_string(),
        ])?;
    }
    let n = cells.len().max(1) as f64;
    w.write_record([
        axis.name(),
        "mean",
        "",
        &format!("{}", cells.iter().map(|c| c.eval_clean).sum::<f64>() / n),
        &format!("{}", cells.iter().map(|c| c.eval_confounded).sum::<f64>() / n),
        &format!("{}", cells.iter().map(|c| c.gradient_precision).sum::<f64>() / n),
        &format!("{}", cells.iter().map(|c| c.gradient_recall).sum::<f64>() / n),
        &format!("{}", cells.iter().map(|c| c.counterfactuals as f64).sum::<f64>() / n),
    ])?;
    w.flush()?;
    let _ = t;
    Ok(path)
}

// ─── whole-pipeline driver ───

/// Runs every stage in order for the given seeds, then the aggregate
/// reports when more than one seed is in play.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<()> {
    let mut reports = Vec::new();
    let mut pilots = Vec::new();
    for &seed in seeds {
        let ctx = SeedCtx::new(cfg, out, seed)?;
        cmd_generate(&ctx)?;
        cmd_train_teacher(&ctx)?;
        cmd_train_student(&ctx)?;
        cmd_detect(&ctx)?;
        cmd_build_cf(&ctx)?;
        cmd_distill(&ctx)?;
        pilots.push(cmd_pilot_seed(&ctx)?);
        reports.push(cmd_evaluate_seed(&ctx)?);
    }
    write_aggregate(out, &reports)?;
    write_pilot_aggregate(out, pilots)?;
    Ok(())
}

// ─── misc ───

/// Uniform-guess rate for a single answer token.
pub fn chance_rate(cfg: &ExperimentConfig) -> f64 {
    1.0 / cfg.corpus.base as f64
}

/// True when the decoded responses of `a` and `b` agree everywhere (used by
/// determinism checks in the test suite).
pub fn models_agree(
    a: &ModelParams,
    b: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
) -> Result<bool> {
    for s in samples {
        let da = greedy_decode(a, &s.instruction, s.response.len(), vocab.stop())?;
        let db = greedy_decode(b, &s.instruction, s.response.len(), vocab.stop())?;
        if da != db {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Token-id sets agreeing between prediction and gold for one sample.
pub fn prediction_jaccard(
    params: &ModelParams,
    sample: &TaskSample,
    vocab: &VocabLayout,
) -> Result<f64> {
    let decoded: Vec<TokenId> =
        greedy_decode(params, &sample.instruction, sample.response.len(), vocab.stop())?
            [sample.instruction.len()..]
            .to_vec();
    Ok(jaccard(&decoded, &sample.response))
}
