//! Confounding-token detection and counterfactual sample construction.
//!
//! For a candidate sample (teacher decodes the gold response, student does
//! not) the detector compares per-token input-gradient sensitivities of the
//! two models. Both raw profiles are min-max normalized per sample, their
//! difference is normalized again, and tokens whose normalized difference
//! falls at or below τ — strong student attention, weak teacher attention —
//! are flagged. Maximal flagged runs become candidate spans; a span is kept
//! only if deleting it makes both models decode the target correctly. Each
//! kept span yields one counterfactual sample: the pruned context paired
//! with its target tokens.
//!
//! Random and perplexity-ranked maskers provide budget-matched baselines:
//! on every record they flag exactly as many tokens as the gradient rule
//! did, so recall comparisons are like-for-like.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::corpus::{ConfounderSpan, SpanScope};
use crate::corpus::{TaskSample, VocabLayout};
use crate::error::{LeafError, Result};
use crate::model::{
    forward_logits, greedy_decode, token_grad_norms, ModelParams, SensitivityNorm, TokenId,
};
use crate::rng::substream;

// ─── configuration ───

/// Which positions are eligible for flagging: instruction tokens only, or
/// instruction plus the already-generated response prefix of each segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionScope {
    InstructOnly,
    InstructAndResponse,
}

/// How flags are chosen when building counterfactuals or baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Gradient,
    Random,
    Ppl,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Inclusive upper threshold on the normalized gradient difference.
    pub tau: f64,
    pub min_span_len: usize,
    pub scope: DetectionScope,
    /// When false, distillation later drops originals the student failed.
    pub include_student_wrong_originals: bool,
    pub sensitivity_norm: SensitivityNorm,
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(LeafError::InvalidArgument(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.min_span_len == 0 {
            return Err(LeafError::InvalidArgument("min_span_len must be ≥ 1".into()));
        }
        Ok(())
    }
}

// ─── response segmentation ───

/// Response splitting for segment-level context/target pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    NoSplit,
    TwoSegment,
    ThreeSegment,
}

impl SplitMode {
    pub fn segments(self) -> usize {
        match self {
            SplitMode::NoSplit => 1,
            SplitMode::TwoSegment => 2,
            SplitMode::ThreeSegment => 3,
        }
    }
}

/// One (context, target) pair: the response prefix `[0, prefix_len)` joins
/// the instruction as context; `target` indexes into the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub prefix_len: usize,
    pub target: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub pairs: Vec<SegmentPair>,
    /// True when the response was shorter than the segment count and the
    /// split degraded to no-split.
    pub fell_back: bool,
}

/// Cuts a response into k segments at ⌊len·j/k⌋, snapping each cut forward
/// past the next step delimiter when one exists before the sequence end, so
/// contexts end on completed steps. Responses shorter than k fall back to a
/// single segment. Targets always cover the response exactly once.
pub fn split_response(response: &[TokenId], mode: SplitMode, sep: TokenId) -> SplitOutcome {
    let len = response.len();
    let k = mode.segments();
    if len < k {
        return SplitOutcome {
            pairs: vec![SegmentPair { prefix_len: 0, target: 0..len }],
            fell_back: true,
        };
    }
    let mut cuts: Vec<usize> = (1..k)
        .map(|j| {
            let c0 = len * j / k;
            match response[c0..].iter().position(|&t| t == sep) {
                Some(off) if c0 + off + 1 < len => c0 + off + 1,
                _ => c0,
            }
        })
        .collect();
    // Snapping may collapse neighbouring cuts; the raw floors are always
    // strictly increasing in (0, len), so fall back to them if it did.
    let monotone = cuts.windows(2).all(|w| w[0] < w[1])
        && cuts.first().map_or(true, |&c| c > 0)
        && cuts.last().map_or(true, |&c| c < len);
    if !monotone {
        cuts = (1..k).map(|j| len * j / k).collect();
    }
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(len);
    let pairs: Vec<SegmentPair> = bounds
        .windows(2)
        .map(|w| SegmentPair { prefix_len: w[0], target: w[0]..w[1] })
        .collect();
    debug_assert!(pairs.iter().map(|p| p.target.len()).sum::<usize>() == len);
    SplitOutcome { pairs, fell_back: false }
}

// ─── attribution ───

/// Per-token attribution for one (context, target) pair. All vectors run
/// over the context positions `0..context_len` of the attributed sequence
/// (instruction first, then any response prefix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: String,
    /// Index of the segment pair this record belongs to (0 when unsplit).
    pub segment: usize,
    pub instruction_len: usize,
    pub context_len: usize,
    pub tokens: Vec<TokenId>,
    pub g_teacher: Vec<f64>,
    pub g_student: Vec<f64>,
    pub g_hat_teacher: Vec<f64>,
    pub g_hat_student: Vec<f64>,
    pub delta: Vec<f64>,
    pub norm_delta: Vec<f64>,
    /// True where Δĝ was constant across the context (no signal); the
    /// threshold rule then degenerates to all-or-nothing at τ = 1.
    pub degenerate: bool,
    pub flags: Vec<bool>,
}

/// Min-max rescaling to [0,1]; a constant vector maps to all zeros.
pub fn minmax_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LeafError::InvalidArgument("minmax_normalize: empty vector".into()));
    }
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; v.len()]);
    }
    let range = max - min;
    Ok(v.iter().map(|x| (x - min) / range).collect())
}

/// Teacher/student sensitivities over the context of one pair, both
/// normalizations, and their difference. `tokens` must be the instruction,
/// any response prefix, then the target tokens; positions `0..context_len`
/// are context and the rest are prediction targets. Flags start false.
pub fn compute_attribution(
    teacher: &ModelParams,
    student: &ModelParams,
    tokens: &[TokenId],
    instruction_len: usize,
    context_len: usize,
    sample_id: &str,
    segment: usize,
    norm: SensitivityNorm,
) -> Result<AttributionRecord> {
    if context_len == 0 || context_len >= tokens.len() {
        return Err(LeafError::InvalidArgument(format!(
            "context length {context_len} must split {} tokens into nonempty context and target",
            tokens.len()
        )));
    }
    let context_mask: Vec<bool> = (0..tokens.len()).map(|i| i < context_len).collect();
    let target_mask: Vec<bool> = (0..tokens.len()).map(|i| i >= context_len).collect();
    let g_teacher =
        token_grad_norms(teacher, tokens, &context_mask, &target_mask, norm)?[..context_len].to_vec();
    let g_student =
        token_grad_norms(student, tokens, &context_mask, &target_mask, norm)?[..context_len].to_vec();
    let g_hat_teacher = minmax_normalize(&g_teacher)?;
    let g_hat_student = minmax_normalize(&g_student)?;
    let delta: Vec<f64> =
        g_hat_teacher.iter().zip(&g_hat_student).map(|(t, s)| t - s).collect();
    let dmin = delta.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm_delta = minmax_normalize(&delta)?;
    Ok(AttributionRecord {
        sample_id: sample_id.to_string(),
        segment,
        instruction_len,
        context_len,
        tokens: tokens[..context_len].to_vec(),
        g_teacher,
        g_student,
        g_hat_teacher,
        g_hat_student,
        delta,
        norm_delta,
        degenerate: dmax == dmin,
        flags: vec![false; context_len],
    })
}

/// The threshold rule: a context token is flagged when its normalized
/// gradient difference is ≤ τ (inclusive). When the difference profile was
/// constant there is no ordering to threshold; everything is flagged at
/// τ = 1 and nothing below.
pub fn flag_confounders(record: &AttributionRecord, tau: f64) -> Vec<bool> {
    if record.degenerate {
        return vec![tau >= 1.0; record.norm_delta.len()];
    }
    record.norm_delta.iter().map(|&d| d <= tau).collect()
}

/// Maximal runs of consecutive flags with length ≥ min_len, ascending.
pub fn extract_spans(flags: &[bool], min_len: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    spans.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if flags.len() - s >= min_len {
            spans.push((s, flags.len()));
        }
    }
    spans
}

/// Deletes the spanned tokens, preserving the order of survivors. Spans may
/// arrive in any order but must not overlap. Deleting everything is an error
/// (an empty sequence is not a valid model input).
pub fn prune(tokens: &[TokenId], spans: &[(usize, usize)]) -> Result<Vec<TokenId>> {
    let mut sorted: Vec<(usize, usize)> = spans.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(LeafError::InvalidArgument(format!(
                "prune: overlapping spans {:?} and {:?}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&(s, e)) = sorted.last() {
        if s >= e || e > tokens.len() {
            return Err(LeafError::InvalidArgument(format!(
                "prune: span {s}..{e} out of bounds for length {}",
                tokens.len()
            )));
        }
    }
    if sorted.iter().any(|&(s, e)| s >= e) {
        return Err(LeafError::InvalidArgument("prune: empty span".into()));
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut next = 0;
    for &(s, e) in &sorted {
        out.extend_from_slice(&tokens[next..s]);
        next = e;
    }
    out.extend_from_slice(&tokens[next..]);
    if out.is_empty() {
        return Err(LeafError::InvalidArgument("prune: spans cover the whole sequence".into()));
    }
    Ok(out)
}

// ─── decoding-based checks ───

/// Greedy decode from the instruction and compare with the gold response.
pub fn decodes_gold(params: &ModelParams, sample: &TaskSample, vocab: &VocabLayout) -> Result<bool> {
    let decoded =
        greedy_decode(params, &sample.instruction, sample.response.len(), vocab.stop())?;
    Ok(decoded[sample.instruction.len()..] == sample.response[..])
}

/// Fraction of samples whose gold response the model reproduces exactly.
pub fn exact_match_accuracy(
    params: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(LeafError::InvalidArgument("accuracy over empty sample set".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if decodes_gold(params, s, vocab)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Candidate selection plus per-sample decode outcomes for both models.
#[derive(Debug, Clone)]
pub struct InstanceFilter {
    /// Indices (into the scanned slice) where the teacher is right and the
    /// student wrong.
    pub candidates: Vec<usize>,
    pub teacher_correct: Vec<bool>,
    pub student_correct: Vec<bool>,
}

/// Scans samples with both models; detection only runs on the candidates.
pub fn filter_instances(
    teacher: &ModelParams,
    student: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
) -> Result<InstanceFilter> {
    let mut teacher_correct = Vec::with_capacity(samples.len());
    let mut student_correct = Vec::with_capacity(samples.len());
    let mut candidates = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let t_ok = decodes_gold(teacher, s, vocab)?;
        let s_ok = decodes_gold(student, s, vocab)?;
        if t_ok && !s_ok {
            candidates.push(i);
        }
        teacher_correct.push(t_ok);
        student_correct.push(s_ok);
    }
    Ok(InstanceFilter { candidates, teacher_correct, student_correct })
}

/// True when both models, decoding from the pruned context, reproduce the
/// target tokens exactly.
pub fn verify_removal(
    teacher: &ModelParams,
    student: &ModelParams,
    pruned_context: &[TokenId],
    target: &[TokenId],
    stop: TokenId,
) -> Result<bool> {
    for model in [teacher, student] {
        let decoded = greedy_decode(model, pruned_context, target.len(), stop)?;
        if decoded[pruned_context.len()..] != *target {
            return Ok(false);
        }
    }
    Ok(true)
}

// ─── baselines ───

/// Uniformly random k-subset of the context positions, deterministic in seed.
pub fn baseline_random_mask(context_len: usize, k: usize, seed: u64) -> Result<Vec<bool>> {
    if k > context_len {
        return Err(LeafError::InvalidArgument(format!(
            "random mask budget {k} exceeds context length {context_len}"
        )));
    }
    let mut rng = substream(seed, "baseline-random");
    let mut order: Vec<usize> = (0..context_len).collect();
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for i in 0..k {
        let j = rng.gen_range(i..context_len);
        order.swap(i, j);
    }
    let mut flags = vec![false; context_len];
    for &i in &order[..k] {
        flags[i] = true;
    }
    Ok(flags)
}

/// Flags the k context tokens the student finds most surprising: highest
/// next-token negative log-likelihood under the student, position 0 scored
/// as ln(vocab) (uniform prior), ties broken toward lower indices.
pub fn baseline_ppl_mask(
    student: &ModelParams,
    tokens: &[TokenId],
    context_len: usize,
    k: usize,
) -> Result<Vec<bool>> {
    if k > context_len {
        return Err(LeafError::InvalidArgument(format!(
            "ppl mask budget {k} exceeds context length {context_len}"
        )));
    }
    let v = student.config().vocab_size;
    let logits = forward_logits(student, tokens)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(context_len);
    for i in 0..context_len {
        let nll = if i == 0 {
            (v as f64).ln()
        } else {
            let row = &logits.data()[(i - 1) * v..i * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[tokens[i] as usize]
        };
        scored.push((i, nll));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut flags = vec![false; context_len];
    for &(i, _) in &scored[..k] {
        flags[i] = true;
    }
    Ok(flags)
}

// ─── counterfactual construction ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    TeacherGenerated,
}

/// A pruned context paired with the target tokens it should still produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub source_id: String,
    pub span: ConfounderSpan,
    pub pruned_input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub provenance: Provenance,
}

/// Detection products for one segment pair of one candidate sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDetection {
    pub record: AttributionRecord,
    pub spans: Vec<ConfounderSpan>,
    pub accepted: Vec<bool>,
}

/// Token-level agreement of a flag set with the planted spans, aggregated
/// over all records (micro precision/recall).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlagQuality {
    pub true_positives: usize,
    pub flagged: usize,
    pub planted: usize,
}

impl FlagQuality {
    fn add(&mut self, flags: &[bool], planted: &[bool]) {
        self.true_positives += flags.iter().zip(planted).filter(|(&f, &p)| f && p).count();
        self.flagged += flags.iter().filter(|&&f| f).count();
        self.planted += planted.iter().filter(|&&p| p).count();
    }

    pub fn precision(&self) -> f64 {
        if self.flagged == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.flagged as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.planted == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.planted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: DetectionConfig,
    pub scanned: usize,
    pub candidates: usize,
    pub samples: Vec<SampleDetection>,
    pub gradient: FlagQuality,
    pub random_baseline: FlagQuality,
    pub ppl_baseline: FlagQuality,
    pub counterfactual_count: usize,
    pub fallback_splits: usize,
}

/// The full detection pipeline over one split: filter instances, attribute
/// each (context, target) pair, threshold, extract spans, verify each span
/// by decoding, and emit one counterfactual per accepted span. Budget-matched
/// random and perplexity baselines are scored against the planted spans on
/// the same records. `baseline_seed` feeds only the random masker.
#[allow(clippy::too_many_arguments)]
pub fn build_counterfactual_dataset(
    teacher: &ModelParams,
    student: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
    cfg: &DetectionConfig,
    split_mode: SplitMode,
    baseline_seed: u64,
) -> Result<(Vec<CounterfactualSample>, DetectionReport)> {
    counterfactuals_with_strategy(
        teacher,
        student,
        samples,
        vocab,
        cfg,
        split_mode,
        baseline_seed,
        MaskStrategy::Gradient,
    )
}

/// Same pipeline with the span source swapped: `Random` and `Ppl` take their
/// flags from the budget-matched baseline maskers, `None` flags nothing and
/// so yields no counterfactuals. Verification still gates every span, and the
/// report's precision/recall tallies cover all three flag sources regardless
/// of which one feeds the spans.
#[allow(clippy::too_many_arguments)]
pub fn counterfactuals_with_strategy(
    teacher: &ModelParams,
    student: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
    cfg: &DetectionConfig,
    split_mode: SplitMode,
    baseline_seed: u64,
    strategy: MaskStrategy,
) -> Result<(Vec<CounterfactualSample>, DetectionReport)> {
    cfg.validate()?;
    let filter = filter_instances(teacher, student, samples, vocab)?;
    let mut report = DetectionReport {
        config: cfg.clone(),
        scanned: samples.len(),
        candidates: filter.candidates.len(),
        samples: Vec::new(),
        gradient: FlagQuality::default(),
        random_baseline: FlagQuality::default(),
        ppl_baseline: FlagQuality::default(),
        counterfactual_count: 0,
        fallback_splits: 0,
    };
    let mut counterfactuals = Vec::new();

    for &idx in &filter.candidates {
        let sample = samples[idx];
        let il = sample.instruction.len();
        let pairs = match cfg.scope {
            DetectionScope::InstructOnly => {
                vec![SegmentPair { prefix_len: 0, target: 0..sample.response.len() }]
            }
            DetectionScope::InstructAndResponse => {
                let outcome = split_response(&sample.response, split_mode, vocab.sep());
                if outcome.fell_back {
                    report.fallback_splits += 1;
                }
                outcome.pairs
            }
        };

        for (segment, pair) in pairs.iter().enumerate() {
            let context_len = il + pair.prefix_len;
            let mut seq: Vec<TokenId> = Vec::with_capacity(context_len + pair.target.len());
            seq.extend_from_slice(&sample.instruction);
            seq.extend_from_slice(&sample.response[..pair.target.end]);
            let target: Vec<TokenId> = sample.response[pair.target.clone()].to_vec();

            let mut record = compute_attribution(
                teacher,
                student,
                &seq,
                il,
                context_len,
                &sample.id,
                segment,
                cfg.sensitivity_norm,
            )?;
            record.flags = flag_confounders(&record, cfg.tau);

            // Planted-span truth over this record's context positions.
            let mut planted = vec![false; context_len];
            for sp in &sample.planted_spans {
                let (offset, limit) = match sp.scope {
                    SpanScope::Instruction => (0, il),
                    SpanScope::Response => (il, context_len),
                };
                for p in sp.start..sp.end {
                    let abs = offset + p;
                    if abs < limit.min(context_len) {
                        planted[abs] = true;
                    }
                }
            }
            let budget = record.flags.iter().filter(|&&f| f).count();
            let seed = substream(baseline_seed, &format!("record/{}/{segment}", sample.id))
                .gen::<u64>();
            let random_flags = baseline_random_mask(context_len, budget, seed)?;
            let ppl_flags = baseline_ppl_mask(student, &seq, context_len, budget)?;
            report.gradient.add(&record.flags, &planted);
            report.random_baseline.add(&random_flags, &planted);
            report.ppl_baseline.add(&ppl_flags, &planted);

            // Runs of the active flag source become scoped spans, cut at the
            // instruction boundary.
            let no_flags;
            let active_flags: &[bool] = match strategy {
                MaskStrategy::Gradient => &record.flags,
                MaskStrategy::Random => &random_flags,
                MaskStrategy::Ppl => &ppl_flags,
                MaskStrategy::None => {
                    no_flags = vec![false; context_len];
                    &no_flags
                }
            };
            let mut spans: Vec<ConfounderSpan> = Vec::new();
            for (s, e) in extract_spans(active_flags, cfg.min_span_len) {
                if s < il {
                    spans.push(ConfounderSpan {
                        scope: SpanScope::Instruction,
                        start: s,
                        end: e.min(il),
                    });
                }
                if e > il {
                    spans.push(ConfounderSpan {
                        scope: SpanScope::Response,
                        start: s.max(il) - il,
                        end: e - il,
                    });
                }
            }

            let context = &seq[..context_len];
            let mut accepted = Vec::with_capacity(spans.len());
            for span in &spans {
                let (abs_start, abs_end) = match span.scope {
                    SpanScope::Instruction => (span.start, span.end),
                    SpanScope::Response => (il + span.start, il + span.end),
                };
                if abs_end - abs_start >= context.len() {
                    accepted.push(false);
                    continue;
                }
                let pruned = prune(context, &[(abs_start, abs_end)])?;
                let ok = verify_removal(teacher, student, &pruned, &target, vocab.stop())?;
                accepted.push(ok);
                if ok {
                    // The teacher's decode just matched the target, so the
                    // counterfactual target is teacher-generated; gold is the
                    // fallback if that ever fails to hold.
                    let teacher_decode = greedy_decode(teacher, &pruned, target.len(), vocab.stop())?;
                    let provenance = if teacher_decode[pruned.len()..] == target[..] {
                        Provenance::TeacherGenerated
                    } else {
                        Provenance::Gold
                    };
                    counterfactuals.push(CounterfactualSample {
                        source_id: sample.id.clone(),
                        span: *span,
                        pruned_input: pruned,
                        target: target.clone(),
                        provenance,
                    });
                }
            }
            report.samples.push(SampleDetection { record, spans, accepted });
        }
    }
    report.counterfactual_count = counterfactuals.len();
    Ok((counterfactuals, report))
}

// ─── report I/O ───

pub fn write_report(report: &DetectionReport, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<DetectionReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Per-position gradient heatmap rows for external plotting:
/// sample id, context position, token id, raw sensitivities, normalized Δ.
pub fn write_heatmap_csv(report: &DetectionReport, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,position,token_id,g_teacher,g_student,norm_delta\n");
    for det in &report.samples {
        let r = &det.record;
        for i in 0..r.context_len {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.sample_id, i, r.tokens[i], r.g_teacher[i], r.g_student[i], r.norm_delta[i]
            )
            .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_counterfactuals(cfs: &[CounterfactualSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for cf in cfs {
        out.push_str(&serde_json::to_string(cf)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_counterfactuals(path: &Path) -> Result<Vec<CounterfactualSample>> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cf: CounterfactualSample =
            serde_json::from_str(line).map_err(|e| LeafError::CorpusParse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        out.push(cf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_from_norm_delta(norm_delta: Vec<f64>, degenerate: bool) -> AttributionRecord {
        let n = norm_delta.len();
        AttributionRecord {
            sample_id: "t".into(),
            segment: 0,
            instruction_len: n,
            context_len: n,
            tokens: vec![0; n],
            g_teacher: vec![0.0; n],
            g_student: vec![0.0; n],
            g_hat_teacher: vec![0.0; n],
            g_hat_student: vec![0.0; n],
            delta: vec![0.0; n],
            norm_delta,
            degenerate,
            flags: vec![false; n],
        }
    }

    #[test]
    fn minmax_ramp() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn minmax_constant_is_zero() {
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn minmax_affine_invariance() {
        let v = [0.3, -1.0, 2.0, 0.7];
        let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x + 11.0).collect();
        let a = minmax_normalize(&v).unwrap();
        let b = minmax_normalize(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_rejects_empty() {
        assert!(minmax_normalize(&[]).is_err());
    }

    #[test]
    fn flag_boundaries() {
        let r = record_from_norm_delta(vec![1.0, 0.0, 0.5], false);
        assert_eq!(flag_confounders(&r, 0.1), vec![false, true, false]);
        assert_eq!(flag_confounders(&r, 0.0), vec![false, true, false]);
        assert_eq!(flag_confounders(&r, 1.0), vec![true, true, true]);
        // Inclusive threshold.
        assert_eq!(flag_confounders(&r, 0.5), vec![false, true, true]);
    }

    #[test]
    fn flag_degenerate_all_or_nothing() {
        let r = record_from_norm_delta(vec![0.0, 0.0, 0.0], true);
        assert_eq!(flag_confounders(&r, 0.99), vec![false, false, false]);
        assert_eq!(flag_confounders(&r, 1.0), vec![true, true, true]);
    }

    #[test]
    fn tau_nestedness() {
        let r = record_from_norm_delta(vec![0.9, 0.05, 0.4, 0.0, 0.7], false);
        let taus = [0.0, 0.1, 0.3, 0.5, 0.9, 1.0];
        for w in taus.windows(2) {
            let lo = flag_confounders(&r, w[0]);
            let hi = flag_confounders(&r, w[1]);
            for (a, b) in lo.iter().zip(&hi) {
                assert!(!a || *b, "flags not nested between τ={} and τ={}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn spans_from_flags() {
        let flags = [false, true, true, false, true];
        assert_eq!(extract_spans(&flags, 1), vec![(1, 3), (4, 5)]);
        assert_eq!(extract_spans(&[false; 4], 1), vec![]);
        assert_eq!(extract_spans(&[true; 4], 1), vec![(0, 4)]);
        assert_eq!(extract_spans(&flags, 2), vec![(1, 3)]);
    }

    #[test]
    fn spans_flatten_roundtrip() {
        // Reconstructing flags from spans recovers the input at min_len 1.
        let cases: Vec<Vec<bool>> = vec![
            vec![true, false, true, true, false, true],
            vec![false; 5],
            vec![true; 3],
            vec![true, false, true],
        ];
        for flags in cases {
            let spans = extract_spans(&flags, 1);
            let mut rebuilt = vec![false; flags.len()];
            for (s, e) in spans {
                for f in &mut rebuilt[s..e] {
                    *f = true;
                }
            }
            assert_eq!(rebuilt, flags);
        }
    }

    #[test]
    fn prune_deletes_in_order() {
        let tokens = [10, 11, 12, 13];
        assert_eq!(prune(&tokens, &[(1, 3)]).unwrap(), vec![10, 13]);
        assert_eq!(prune(&tokens, &[]).unwrap(), tokens.to_vec());
    }

    #[test]
    fn prune_rejects_overlap() {
        let tokens = [1, 2, 3, 4, 5];
        assert!(prune(&tokens, &[(0, 2), (1, 3)]).is_err());
    }

    #[test]
    fn collective_equals_iterated_right_to_left() {
        let tokens: Vec<TokenId> = (0..12).collect();
        let spans = [(1, 3), (5, 6), (8, 11)];
        let collective = prune(&tokens, &spans).unwrap();
        let mut iterated = tokens.clone();
        for &(s, e) in spans.iter().rev() {
            iterated = prune(&iterated, &[(s, e)]).unwrap();
        }
        assert_eq!(collective, iterated);
    }

    #[test]
    fn random_mask_budget_and_determinism() {
        assert_eq!(baseline_random_mask(6, 0, 1).unwrap(), vec![false; 6]);
        assert_eq!(baseline_random_mask(4, 4, 1).unwrap(), vec![true; 4]);
        let a = baseline_random_mask(10, 3, 42).unwrap();
        let b = baseline_random_mask(10, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&f| f).count(), 3);
        assert!(baseline_random_mask(3, 4, 1).is_err());
    }

    #[test]
    fn split_no_split_single_pair() {
        let resp: Vec<TokenId> = (0..8).collect();
        let out = split_response(&resp, SplitMode::NoSplit, 99);
        assert_eq!(out.pairs, vec![SegmentPair { prefix_len: 0, target: 0..8 }]);
        assert!(!out.fell_back);
    }

    #[test]
    fn split_without_delimiters_cuts_at_floor() {
        let resp: Vec<TokenId> = (0..10).collect();
        let out = split_response(&resp, SplitMode::TwoSegment, 99);
        assert_eq!(
            out.pairs,
            vec![
                SegmentPair { prefix_len: 0, target: 0..5 },
                SegmentPair { prefix_len: 5, target: 5..10 },
            ]
        );
    }

    #[test]
    fn split_snaps_past_delimiter() {
        // sep at index 5: the cut at 4 advances to just past it.
        let sep = 77;
        let resp: Vec<TokenId> = vec![1, 2, 3, 4, 5, sep, 6, 7];
        let out = split_response(&resp, SplitMode::TwoSegment, sep);
        assert_eq!(
            out.pairs,
            vec![
                SegmentPair { prefix_len: 0, target: 0..6 },
                SegmentPair { prefix_len: 6, target: 6..8 },
            ]
        );
    }

    #[test]
    fn split_coverage_fuzzed() {
        for len in 1..=12usize {
            for mode in [SplitMode::NoSplit, SplitMode::TwoSegment, SplitMode::ThreeSegment] {
                let resp: Vec<TokenId> = (0..len as TokenId).collect();
                let out = split_response(&resp, mode, 3);
                let mut covered = vec![false; len];
                for p in &out.pairs {
                    for i in p.target.clone() {
                        assert!(!covered[i], "len={len} mode={mode:?}: double cover at {i}");
                        covered[i] = true;
                    }
                    assert_eq!(p.prefix_len, p.target.start);
                }
                assert!(covered.iter().all(|&c| c), "len={len} mode={mode:?}: gap");
            }
        }
    }

    #[test]
    fn split_short_response_falls_back() {
        let resp: Vec<TokenId> = vec![1, 2];
        let out = split_response(&resp, SplitMode::ThreeSegment, 9);
        assert!(out.fell_back);
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].target, 0..2);
    }

    #[test]
    fn flag_quality_ratios() {
        let mut q = FlagQuality::default();
        q.add(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!(q.true_positives, 1);
        assert!((q.precision() - 0.5).abs() < 1e-12);
        assert!((q.recall() - 0.5).abs() < 1e-12);
        let empty = FlagQuality::default();
        assert_eq!(empty.precision(), 0.0);
        assert_eq!(empty.recall(), 0.0);
    }

    #[test]
    fn strategy_gradient_delegates_and_none_flags_nothing() {
        use crate::corpus::{by_split, generate_corpus, CorpusConfig, Split};
        use crate::model::{train_lm, Capacity, ModelConfig, TrainConfig, TrainSample};

        let ccfg = CorpusConfig {
            base: 4,
            n_vars: 3,
            n_teacher_train: 0,
            n_student_train: 12,
            n_eval_pairs: 1,
            confounder_rate: 1.0,
            rho: 0.9,
            response_noise_rate: 0.0,
            seed: 7,
        };
        let corpus = generate_corpus(&ccfg).unwrap();
        let vocab = ccfg.vocab().unwrap();
        let train = by_split(&corpus, Split::StudentTrain);
        let data: Vec<TrainSample> = train
            .iter()
            .map(|s| TrainSample { tokens: s.tokens(), target_mask: s.full_masks().1 })
            .collect();
        let mcfg = ModelConfig {
            vocab_size: vocab.vocab_size(),
            d_model: 8,
            n_layers: 1,
            max_seq_len: 24,
            capacity: Capacity::Teacher,
        };
        let mut teacher = ModelParams::init(mcfg.clone(), 3).unwrap();
        train_lm(
            &mut teacher,
            &data,
            &TrainConfig { epochs: 120, batch_size: 4, lr: 3e-3, seed: 11 },
        )
        .unwrap();
        let student =
            ModelParams::init(ModelConfig { capacity: Capacity::Student, ..mcfg }, 4).unwrap();

        let dcfg = DetectionConfig {
            tau: 0.2,
            min_span_len: 1,
            scope: DetectionScope::InstructOnly,
            include_student_wrong_originals: true,
            sensitivity_norm: SensitivityNorm::L2,
        };
        let (cfs, report) = build_counterfactual_dataset(
            &teacher, &student, &train, &vocab, &dcfg, SplitMode::NoSplit, 5,
        )
        .unwrap();
        // Fixture health: the micro teacher memorizes at least one sample the
        // untrained student misses, so the pipeline loop actually runs.
        assert!(report.candidates > 0);

        let (cfs_g, report_g) = counterfactuals_with_strategy(
            &teacher,
            &student,
            &train,
            &vocab,
            &dcfg,
            SplitMode::NoSplit,
            5,
            MaskStrategy::Gradient,
        )
        .unwrap();
        assert_eq!(cfs, cfs_g);
        assert_eq!(report, report_g);

        let (cfs_n, report_n) = counterfactuals_with_strategy(
            &teacher,
            &student,
            &train,
            &vocab,
            &dcfg,
            SplitMode::NoSplit,
            5,
            MaskStrategy::None,
        )
        .unwrap();
        assert!(cfs_n.is_empty());
        assert_eq!(report_n.counterfactual_count, 0);
        assert!(report_n.samples.iter().all(|d| d.spans.is_empty()));
        // Baseline quality tallies are independent of the span source.
        assert_eq!(report_n.gradient, report.gradient);
        assert_eq!(report_n.random_baseline, report.random_baseline);
    }
}
