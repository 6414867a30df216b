//! Synthetic modular-sum variable-binding task with planted confounders.
//!
//! Each instruction lists 2–3 variable bindings in shuffled order — a
//! binding is a single composite token naming one variable and its digit —
//! then queries the modular sum of two bound variables; the gold response
//! restates the two queried bindings step by step, then the answer, then a
//! stop token. A distractor clause — one bare digit token at a random slot
//! among the bindings — may be planted in the instruction. In the student's
//! training split that digit tracks the answer (value = answer+1 mod base)
//! with probability ρ, planting a shortcut; everywhere else it is
//! independent uniform noise. The shuffled binding order forces retrieval
//! to key on token content rather than position, and the distractor is the
//! only bare digit an instruction contains — so the shortcut read and the
//! genuine answer computation compete inside the same content-addressed
//! circuitry, and deleting the single distractor token turns a confounded
//! instruction into its clean twin exactly. Ground-truth clause locations
//! are recorded per sample, so detector precision and recall are
//! measurable exactly.
//!
//! Splits: `teacher_train` (distractors uncorrelated), `student_train`
//! (distractors correlated with strength ρ, optional mid-response noise
//! steps), and a paired `eval_clean` / `eval_confounded` set where the
//! twins differ only by the distractor clause.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeafError, Result};
use crate::model::TokenId;
use crate::rng::substream;

// ─── vocabulary ───

/// Token id layout: `base` digits, `n_vars` variable names, six structural
/// tokens, then `n_vars · base` composite binding tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    base: usize,
    n_vars: usize,
}

impl VocabLayout {
    pub fn new(base: usize, n_vars: usize) -> Result<Self> {
        if base < 2 || n_vars < 3 {
            return Err(LeafError::InvalidArgument(format!(
                "vocab too small for layout: base {base} (≥2) with {n_vars} variables (≥3)"
            )));
        }
        Ok(Self { base, n_vars })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn vocab_size(&self) -> usize {
        self.base + self.n_vars + 6 + self.n_vars * self.base
    }

    /// Bare digit token: distractor clauses and response steps.
    pub fn digit(&self, d: u32) -> TokenId {
        debug_assert!((d as usize) < self.base);
        d as TokenId
    }

    /// Variable-name token: queries and response steps.
    pub fn var(&self, i: usize) -> TokenId {
        debug_assert!(i < self.n_vars);
        (self.base + i) as TokenId
    }

    /// Reserved operator token. Kept in the id layout; bindings are atomic
    /// composite tokens, so generated corpora never emit it.
    pub fn eq(&self) -> TokenId {
        (self.base + self.n_vars) as TokenId
    }

    pub fn query(&self) -> TokenId {
        (self.base + self.n_vars + 1) as TokenId
    }

    /// Step delimiter inside responses.
    pub fn sep(&self) -> TokenId {
        (self.base + self.n_vars + 2) as TokenId
    }

    /// Reserved marker tokens, two variants. Kept in the id layout; the
    /// current grammar plants bare-digit clauses instead of marked ones, so
    /// generated corpora never emit them.
    pub fn distractor(&self, m: usize) -> TokenId {
        debug_assert!(m < 2);
        (self.base + self.n_vars + 3 + m) as TokenId
    }

    pub fn stop(&self) -> TokenId {
        (self.base + self.n_vars + 5) as TokenId
    }

    /// Composite binding token ⟨variable i holds digit d⟩, the atomic unit
    /// of instructions.
    pub fn binding(&self, i: usize, d: u32) -> TokenId {
        debug_assert!(i < self.n_vars && (d as usize) < self.base);
        (self.base + self.n_vars + 6 + i * self.base + d as usize) as TokenId
    }

    /// Inverse of `digit` when `tok` is a digit token.
    pub fn as_digit(&self, tok: TokenId) -> Option<u32> {
        ((tok as usize) < self.base).then_some(tok)
    }

    pub fn as_var(&self, tok: TokenId) -> Option<usize> {
        let t = tok as usize;
        (t >= self.base && t < self.base + self.n_vars).then(|| t - self.base)
    }

    /// Inverse of `binding`.
    pub fn as_binding(&self, tok: TokenId) -> Option<(usize, u32)> {
        let first = self.base + self.n_vars + 6;
        let t = tok as usize;
        (t >= first && t < self.vocab_size())
            .then(|| ((t - first) / self.base, ((t - first) % self.base) as u32))
    }

    pub fn is_distractor(&self, tok: TokenId) -> bool {
        tok == self.distractor(0) || tok == self.distractor(1)
    }
}

// ─── samples ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TeacherTrain,
    StudentTrain,
    EvalClean,
    EvalConfounded,
}

/// Where a span's indices live: within the instruction, or within the
/// response (indices relative to the response start).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanScope {
    Instruction,
    Response,
}

/// Half-open token index interval within its scoped sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfounderSpan {
    pub scope: SpanScope,
    pub start: usize,
    pub end: usize,
}

impl ConfounderSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub split: Split,
    pub instruction: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub answer: u32,
    pub planted_spans: Vec<ConfounderSpan>,
}

impl TaskSample {
    /// Instruction followed by response — the training-time token sequence.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.instruction.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// (context_mask, target_mask) for full-response prediction: instruction
    /// positions are context, response positions are targets.
    pub fn full_masks(&self) -> (Vec<bool>, Vec<bool>) {
        let il = self.instruction.len();
        let n = il + self.response.len();
        let context: Vec<bool> = (0..n).map(|i| i < il).collect();
        let target: Vec<bool> = (0..n).map(|i| i >= il).collect();
        (context, target)
    }

    /// Structural checks: spans in bounds (per scope) and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut by_scope: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for s in &self.planted_spans {
            let limit = match s.scope {
                SpanScope::Instruction => self.instruction.len(),
                SpanScope::Response => self.response.len(),
            };
            if s.start >= s.end || s.end > limit {
                return Err(LeafError::InvalidArgument(format!(
                    "sample {}: span {}..{} out of bounds for {:?} length {limit}",
                    self.id, s.start, s.end, s.scope
                )));
            }
            by_scope[matches!(s.scope, SpanScope::Response) as usize].push((s.start, s.end));
        }
        for spans in &mut by_scope {
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[0].1 > w[1].0) {
                return Err(LeafError::InvalidArgument(format!(
                    "sample {}: overlapping planted spans",
                    self.id
                )));
            }
        }
        if self.instruction.is_empty() || self.response.is_empty() {
            return Err(LeafError::InvalidArgument(format!(
                "sample {}: empty instruction or response",
                self.id
            )));
        }
        Ok(())
    }
}

/// References to the samples of one split, preserving corpus order.
pub fn by_split(corpus: &[TaskSample], split: Split) -> Vec<&TaskSample> {
    corpus.iter().filter(|s| s.split == split).collect()
}

// ─── configuration ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Digits run 0..base; answers are sums mod base.
    pub base: usize,
    /// Variable names available (≥ 3; samples bind the first 2 or 3, listed
    /// in shuffled order).
    pub n_vars: usize,
    pub n_teacher_train: usize,
    pub n_student_train: usize,
    /// Number of eval_clean/eval_confounded twin pairs.
    pub n_eval_pairs: usize,
    /// Probability a training sample carries a distractor clause; (0, 1].
    pub confounder_rate: f64,
    /// Spurious-correlation strength: probability that a student_train
    /// distractor digit equals (answer+1) mod base instead of uniform.
    pub rho: f64,
    /// Probability a student_train response carries an extra noise step.
    pub response_noise_rate: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn vocab(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.base, self.n_vars)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if !(self.confounder_rate > 0.0 && self.confounder_rate <= 1.0) {
            return Err(LeafError::InvalidArgument(format!(
                "confounder_rate {} outside (0, 1]",
                self.confounder_rate
            )));
        }
        for (name, v) in [("rho", self.rho), ("response_noise_rate", self.response_noise_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LeafError::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Longest instruction the generator can emit (3 bindings + clause + query).
    pub fn max_instruction_len(&self) -> usize {
        3 + 1 + 3
    }

    /// Longest response (one noise step over the 8-token base form).
    pub fn max_response_len(&self) -> usize {
        10
    }
}

// ─── generation ───

/// The invariant core of one task instance; twins share it. The number of
/// bound variables is `values.len()`.
struct TaskCore {
    values: Vec<u32>,
    qa: usize,
    qb: usize,
    answer: u32,
    /// Binding presentation order: a permutation of 0..values.len().
    perm: Vec<usize>,
    /// Distractor insertion slot among the binding positions.
    slot: usize,
}

fn draw_core<R: Rng>(rng: &mut R, base: usize) -> TaskCore {
    let nb = if rng.gen_range(0..2) == 0 { 2 } else { 3 };
    let values: Vec<u32> = (0..nb).map(|_| rng.gen_range(0..base) as u32).collect();
    let qa = rng.gen_range(0..nb);
    let qb_raw = rng.gen_range(0..nb - 1);
    let qb = if qb_raw >= qa { qb_raw + 1 } else { qb_raw };
    let mut perm: Vec<usize> = (0..nb).collect();
    perm.shuffle(rng);
    let slot = rng.gen_range(0..=nb);
    let answer = (values[qa] + values[qb]) % base as u32;
    TaskCore { values, qa, qb, answer, perm, slot }
}

/// Shuffled composite bindings, optional bare-digit distractor at the core's
/// slot, then the query triple. Deleting the distractor token recovers the
/// clean twin exactly.
fn build_instruction(
    vocab: &VocabLayout,
    core: &TaskCore,
    clause: Option<u32>,
) -> (Vec<TokenId>, Vec<ConfounderSpan>) {
    let mut toks: Vec<TokenId> =
        core.perm.iter().map(|&i| vocab.binding(i, core.values[i])).collect();
    let mut spans = Vec::new();
    if let Some(value) = clause {
        toks.insert(core.slot, vocab.digit(value));
        spans.push(ConfounderSpan {
            scope: SpanScope::Instruction,
            start: core.slot,
            end: core.slot + 1,
        });
    }
    toks.extend([vocab.query(), vocab.var(core.qa), vocab.var(core.qb)]);
    (toks, spans)
}

/// Step-by-step gold response; an optional noise step goes after the first
/// step, its span recorded relative to the response start.
fn build_response(
    vocab: &VocabLayout,
    core: &TaskCore,
    noise: Option<u32>,
) -> (Vec<TokenId>, Vec<ConfounderSpan>) {
    let mut toks = vec![vocab.var(core.qa), vocab.digit(core.values[core.qa]), vocab.sep()];
    let mut spans = Vec::new();
    if let Some(nz) = noise {
        let start = toks.len();
        toks.extend([vocab.digit(nz), vocab.sep()]);
        spans.push(ConfounderSpan { scope: SpanScope::Response, start, end: start + 2 });
    }
    toks.extend([vocab.var(core.qb), vocab.digit(core.values[core.qb]), vocab.sep()]);
    toks.extend([vocab.digit(core.answer), vocab.stop()]);
    (toks, spans)
}

/// Deterministic corpus in split order: teacher_train, student_train, then
/// the eval twin pairs (clean block first, confounded block second, paired
/// by index and id suffix).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<TaskSample>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let base = cfg.base;
    let mut corpus = Vec::with_capacity(cfg.n_teacher_train + cfg.n_student_train + 2 * cfg.n_eval_pairs);

    // Draw order within a sample is fixed: core (count, values, query pair,
    // order, slot), clause roll, value roll(s), then (student_train) noise
    // roll and value. Changing it would silently reshuffle every downstream
    // experiment.
    let mut rng = substream(cfg.seed, "corpus/teacher-train");
    for i in 0..cfg.n_teacher_train {
        let core = draw_core(&mut rng, base);
        let clause = (rng.gen_range(0.0..1.0) < cfg.confounder_rate)
            .then(|| rng.gen_range(0..base) as u32);
        let (instruction, spans) = build_instruction(&vocab, &core, clause);
        let (response, _) = build_response(&vocab, &core, None);
        corpus.push(TaskSample {
            id: format!("tt-{i:04}"),
            split: Split::TeacherTrain,
            instruction,
            response,
            answer: core.answer,
            planted_spans: spans,
        });
    }

    let mut rng = substream(cfg.seed, "corpus/student-train");
    for i in 0..cfg.n_student_train {
        let core = draw_core(&mut rng, base);
        let clause = (rng.gen_range(0.0..1.0) < cfg.confounder_rate).then(|| {
            if rng.gen_range(0.0..1.0) < cfg.rho {
                (core.answer + 1) % base as u32
            } else {
                rng.gen_range(0..base) as u32
            }
        });
        let noise = (rng.gen_range(0.0..1.0) < cfg.response_noise_rate)
            .then(|| rng.gen_range(0..base) as u32);
        let (instruction, mut spans) = build_instruction(&vocab, &core, clause);
        let (response, noise_spans) = build_response(&vocab, &core, noise);
        spans.extend(noise_spans);
        corpus.push(TaskSample {
            id: format!("st-{i:04}"),
            split: Split::StudentTrain,
            instruction,
            response,
            answer: core.answer,
            planted_spans: spans,
        });
    }

    let mut rng = substream(cfg.seed, "corpus/eval");
    let mut clean = Vec::with_capacity(cfg.n_eval_pairs);
    let mut confounded = Vec::with_capacity(cfg.n_eval_pairs);
    for i in 0..cfg.n_eval_pairs {
        let core = draw_core(&mut rng, base);
        let value = rng.gen_range(0..base) as u32;
        let (response, _) = build_response(&vocab, &core, None);
        let (ci, _) = build_instruction(&vocab, &core, None);
        clean.push(TaskSample {
            id: format!("ec-{i:04}"),
            split: Split::EvalClean,
            instruction: ci,
            response: response.clone(),
            answer: core.answer,
            planted_spans: Vec::new(),
        });
        let (fi, spans) = build_instruction(&vocab, &core, Some(value));
        confounded.push(TaskSample {
            id: format!("ef-{i:04}"),
            split: Split::EvalConfounded,
            instruction: fi,
            response,
            answer: core.answer,
            planted_spans: spans,
        });
    }
    corpus.extend(clean);
    corpus.extend(confounded);
    Ok(corpus)
}

// ─── the task rule, reimplemented from tokens ───

/// Recovers the answer from an instruction alone by parsing bindings and the
/// query. A bare digit binds nothing, so the rule skips it — the independent
/// check that planted spans never carry information the task rule needs.
pub fn expected_answer(vocab: &VocabLayout, instruction: &[TokenId]) -> Option<u32> {
    let mut bindings: Vec<Option<u32>> = vec![None; vocab.n_vars];
    let mut i = 0;
    while i < instruction.len() {
        let tok = instruction[i];
        if let Some((v, d)) = vocab.as_binding(tok) {
            bindings[v] = Some(d);
            i += 1;
        } else if vocab.as_digit(tok).is_some() {
            i += 1;
        } else if tok == vocab.query() {
            let a = vocab.as_var(*instruction.get(i + 1)?)?;
            let b = vocab.as_var(*instruction.get(i + 2)?)?;
            if i + 3 != instruction.len() {
                return None;
            }
            return Some((bindings[a]? + bindings[b]?) % vocab.base() as u32);
        } else {
            return None;
        }
    }
    None
}

// ─── I/O ───

/// JSON Lines, one sample per line, in corpus order.
pub fn write_corpus(corpus: &[TaskSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for sample in corpus {
        out.push_str(&serde_json::to_string(sample)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a JSON Lines corpus; parse failures name the 1-based line.
pub fn read_corpus(path: &Path) -> Result<Vec<TaskSample>> {
    let body = fs::read_to_string(path)?;
    let mut corpus = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: TaskSample = serde_json::from_str(line).map_err(|e| LeafError::CorpusParse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        sample.validate().map_err(|e| LeafError::CorpusParse { line: idx + 1, msg: e.to_string() })?;
        corpus.push(sample);
    }
    Ok(corpus)
}

// ─── statistics ───

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub teacher_train: usize,
    pub student_train: usize,
    pub eval_clean: usize,
    pub eval_confounded: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::TeacherTrain => self.teacher_train += 1,
            Split::StudentTrain => self.student_train += 1,
            Split::EvalClean => self.eval_clean += 1,
            Split::EvalConfounded => self.eval_confounded += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.teacher_train + self.student_train + self.eval_clean + self.eval_confounded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub min_instruction_len: usize,
    pub max_instruction_len: usize,
    pub mean_instruction_len: f64,
    pub counts: SplitCounts,
    /// Samples carrying at least one planted span, per split.
    pub confounded_counts: SplitCounts,
}

pub fn corpus_stats(corpus: &[TaskSample]) -> CorpusStats {
    let mut counts = SplitCounts::default();
    let mut confounded_counts = SplitCounts::default();
    let mut min_len = usize::MAX;
    let mut max_len = 0usize;
    let mut sum_len = 0usize;
    for s in corpus {
        counts.bump(s.split);
        if !s.planted_spans.is_empty() {
            confounded_counts.bump(s.split);
        }
        min_len = min_len.min(s.instruction.len());
        max_len = max_len.max(s.instruction.len());
        sum_len += s.instruction.len();
    }
    CorpusStats {
        total: corpus.len(),
        min_instruction_len: if corpus.is_empty() { 0 } else { min_len },
        max_instruction_len: max_len,
        mean_instruction_len: if corpus.is_empty() {
            0.0
        } else {
            sum_len as f64 / corpus.len() as f64
        },
        counts,
        confounded_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> CorpusConfig {
        CorpusConfig {
            base: 8,
            n_vars: 4,
            n_teacher_train: 40,
            n_student_train: 60,
            n_eval_pairs: 20,
            confounder_rate: 0.5,
            rho: 0.9,
            response_noise_rate: 0.3,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = test_config();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn answers_match_independent_rule() {
        let cfg = test_config();
        let vocab = cfg.vocab().unwrap();
        for s in generate_corpus(&cfg).unwrap() {
            assert_eq!(expected_answer(&vocab, &s.instruction), Some(s.answer), "sample {}", s.id);
        }
    }

    #[test]
    fn planted_spans_are_rule_irrelevant() {
        // Deleting every instruction-scope planted span must leave the
        // parsed answer unchanged.
        let cfg = test_config();
        let vocab = cfg.vocab().unwrap();
        for s in generate_corpus(&cfg).unwrap() {
            let mut pruned = s.instruction.clone();
            let mut spans: Vec<_> = s
                .planted_spans
                .iter()
                .filter(|sp| sp.scope == SpanScope::Instruction)
                .collect();
            spans.sort_by_key(|sp| std::cmp::Reverse(sp.start));
            for sp in spans {
                pruned.drain(sp.start..sp.end);
            }
            assert_eq!(expected_answer(&vocab, &pruned), Some(s.answer), "sample {}", s.id);
        }
    }

    #[test]
    fn rho_one_pins_distractor_to_answer() {
        let cfg = CorpusConfig { rho: 1.0, ..test_config() };
        let vocab = cfg.vocab().unwrap();
        let corpus = generate_corpus(&cfg).unwrap();
        let mut seen = 0;
        for s in by_split(&corpus, Split::StudentTrain) {
            for sp in s.planted_spans.iter().filter(|sp| sp.scope == SpanScope::Instruction) {
                let value = vocab.as_digit(s.instruction[sp.start]).unwrap();
                assert_eq!(value, (s.answer + 1) % cfg.base as u32, "sample {}", s.id);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn rho_zero_distractor_uncorrelated() {
        let cfg = CorpusConfig {
            rho: 0.0,
            n_student_train: 2000,
            confounder_rate: 1.0,
            ..test_config()
        };
        let vocab = cfg.vocab().unwrap();
        let corpus = generate_corpus(&cfg).unwrap();
        let pairs: Vec<(f64, f64)> = by_split(&corpus, Split::StudentTrain)
            .iter()
            .filter_map(|s| {
                let sp = s
                    .planted_spans
                    .iter()
                    .find(|sp| sp.scope == SpanScope::Instruction)?;
                let value = vocab.as_digit(s.instruction[sp.start])? as f64;
                Some((value, s.answer as f64))
            })
            .collect();
        assert!(pairs.len() > 1500);
        let n = pairs.len() as f64;
        let (mx, my) = (
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        );
        let cov = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / n;
        let (sx, sy) = (
            (pairs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n).sqrt(),
            (pairs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n).sqrt(),
        );
        let r = cov / (sx * sy);
        assert!(r.abs() < 0.1, "|r| = {}", r.abs());
    }

    #[test]
    fn eval_twins_differ_only_by_clause() {
        let cfg = test_config();
        let corpus = generate_corpus(&cfg).unwrap();
        let clean = by_split(&corpus, Split::EvalClean);
        let confounded = by_split(&corpus, Split::EvalConfounded);
        assert_eq!(clean.len(), cfg.n_eval_pairs);
        assert_eq!(confounded.len(), cfg.n_eval_pairs);
        for (c, f) in clean.iter().zip(&confounded) {
            assert_eq!(c.response, f.response);
            assert_eq!(c.answer, f.answer);
            assert!(c.planted_spans.is_empty());
            assert_eq!(f.planted_spans.len(), 1);
            let sp = &f.planted_spans[0];
            let mut pruned = f.instruction.clone();
            pruned.drain(sp.start..sp.end);
            assert_eq!(pruned, c.instruction);
        }
    }

    #[test]
    fn responses_end_with_stop() {
        let cfg = test_config();
        let vocab = cfg.vocab().unwrap();
        for s in generate_corpus(&cfg).unwrap() {
            assert_eq!(*s.response.last().unwrap(), vocab.stop());
            assert!(s.instruction.len() <= cfg.max_instruction_len());
            assert!(s.response.len() <= cfg.max_response_len());
            s.validate().unwrap();
        }
    }

    #[test]
    fn roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&test_config()).unwrap();
        write_corpus(&corpus, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn empty_corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_corpus(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let corpus = generate_corpus(&test_config()).unwrap();
        write_corpus(&corpus[..2], &path).unwrap();
        let mut body = std::fs::read_to_string(&path).unwrap();
        body.truncate(body.len() - 10);
        std::fs::write(&path, body).unwrap();
        match read_corpus(&path) {
            Err(LeafError::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stats_are_consistent() {
        let cfg = test_config();
        let corpus = generate_corpus(&cfg).unwrap();
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.total, corpus.len());
        assert_eq!(stats.counts.total(), corpus.len());
        assert_eq!(stats.counts.eval_clean, cfg.n_eval_pairs);
        assert!(stats.min_instruction_len >= 5);
        assert!(stats.max_instruction_len <= cfg.max_instruction_len());
        assert!(
            stats.mean_instruction_len >= stats.min_instruction_len as f64
                && stats.mean_instruction_len <= stats.max_instruction_len as f64
        );
        // Every confounded eval sample carries its clause.
        assert_eq!(stats.confounded_counts.eval_confounded, cfg.n_eval_pairs);
        assert_eq!(stats.confounded_counts.eval_clean, 0);
        // Same seed → same stats.
        assert_eq!(stats, corpus_stats(&generate_corpus(&cfg).unwrap()));
    }

    #[test]
    fn single_sample_stats_degenerate() {
        let corpus = generate_corpus(&test_config()).unwrap();
        let one = vec![corpus[0].clone()];
        let stats = corpus_stats(&one);
        let len = one[0].instruction.len();
        assert_eq!(stats.min_instruction_len, len);
        assert_eq!(stats.max_instruction_len, len);
        assert!((stats.mean_instruction_len - len as f64).abs() < 1e-12);
    }

    #[test]
    fn vocab_too_small_rejected() {
        let cfg = CorpusConfig { base: 1, ..test_config() };
        assert!(generate_corpus(&cfg).is_err());
        let cfg = CorpusConfig { n_vars: 2, ..test_config() };
        assert!(generate_corpus(&cfg).is_err());
        // Three names cover the largest binding count.
        let cfg = CorpusConfig { n_vars: 3, ..test_config() };
        assert!(generate_corpus(&cfg).is_ok());
    }

    #[test]
    fn binding_token_roundtrip() {
        let vocab = VocabLayout::new(8, 4).unwrap();
        assert_eq!(vocab.vocab_size(), 8 + 4 + 6 + 32);
        for i in 0..4 {
            for d in 0..8u32 {
                let tok = vocab.binding(i, d);
                assert_eq!(vocab.as_binding(tok), Some((i, d)));
                assert_eq!(vocab.as_digit(tok), None);
                assert_eq!(vocab.as_var(tok), None);
            }
        }
        assert_eq!(vocab.as_binding(vocab.digit(3)), None);
        assert_eq!(vocab.as_binding(vocab.var(2)), None);
        assert_eq!(vocab.as_binding(vocab.stop()), None);
    }

    #[test]
    fn planted_span_is_the_only_bare_digit() {
        let cfg = test_config();
        let vocab = cfg.vocab().unwrap();
        for s in generate_corpus(&cfg).unwrap() {
            let spans: Vec<_> = s
                .planted_spans
                .iter()
                .filter(|sp| sp.scope == SpanScope::Instruction)
                .collect();
            let digit_positions: Vec<usize> = (0..s.instruction.len())
                .filter(|&i| vocab.as_digit(s.instruction[i]).is_some())
                .collect();
            match spans.as_slice() {
                [] => assert!(digit_positions.is_empty(), "sample {}", s.id),
                [sp] => {
                    assert_eq!(sp.len(), 1);
                    assert_eq!(digit_positions, vec![sp.start], "sample {}", s.id);
                }
                _ => panic!("sample {}: more than one instruction span", s.id),
            }
            // Everything before the query token is a binding or the digit.
            let q = s.instruction.iter().position(|&t| t == vocab.query()).unwrap();
            assert_eq!(q + 3, s.instruction.len());
            for (i, &t) in s.instruction[..q].iter().enumerate() {
                assert!(
                    vocab.as_binding(t).is_some() || digit_positions.contains(&i),
                    "sample {}",
                    s.id
                );
            }
        }
    }
}
