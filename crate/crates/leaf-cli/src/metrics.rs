//! Metric computation and report shapes: exact-match and Jaccard evaluation
//! of decoded responses, detection quality summaries, threshold re-scoring,
//! paired sign tests across seeds, and the JSON report types the schema
//! files describe. Wall-clock numbers stay out of these types so reruns of
//! the same config write byte-identical reports; timings land in a sidecar.

use std::collections::BTreeSet;

use anyhow::Result;
use leaf_core::corpus::{SpanScope, TaskSample, VocabLayout};
use leaf_core::detect::{flag_confounders, DetectionReport};
use leaf_core::model::{greedy_decode, ModelParams, TokenId};
use serde::{Deserialize, Serialize};

// ─── jaccard ───

/// |a ∩ b| / |a ∪ b| over token-id sets; two empty sets count as identical.
pub fn jaccard(a: &[TokenId], b: &[TokenId]) -> f64 {
    let sa: BTreeSet<TokenId> = a.iter().copied().collect();
    let sb: BTreeSet<TokenId> = b.iter().copied().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

// ─── decoding-based evaluation ───

/// Greedy-decodes the response for one sample; returns the generated suffix.
pub fn decode_response(
    params: &ModelParams,
    sample: &TaskSample,
    vocab: &VocabLayout,
) -> Result<Vec<TokenId>> {
    let full = greedy_decode(params, &sample.instruction, sample.response.len(), vocab.stop())?;
    Ok(full[sample.instruction.len()..].to_vec())
}

/// Mean exact-match accuracy and mean Jaccard(prediction, gold) over a split.
pub fn eval_split(
    params: &ModelParams,
    samples: &[&TaskSample],
    vocab: &VocabLayout,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0usize;
    let mut jac = 0.0;
    for s in samples {
        let decoded = decode_response(params, s, vocab)?;
        if decoded == s.response {
            hits += 1;
        }
        jac += jaccard(&decoded, &s.response);
    }
    let n = samples.len() as f64;
    Ok((hits as f64 / n, jac / n))
}

// ─── paired sign test ───

/// One-sided paired sign test: p-value of seeing ≥ `wins` positive pairs out
/// of `wins + losses` fair coin flips. Ties are dropped, as usual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(deltas: &[f64]) -> SignTest {
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    let losses = deltas.iter().filter(|&&d| d < 0.0).count();
    let ties = deltas.len() - wins - losses;
    let n = wins + losses;
    // Exact binomial tail: sum_{k=wins..n} C(n,k) / 2^n.
    let mut tail = 0.0;
    for k in wins..=n {
        tail += binomial(n, k);
    }
    let p_value = if n == 0 { 1.0 } else { tail / 2f64.powi(n as i32) };
    SignTest { wins, losses, ties, p_value }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

// ─── report shapes ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub eval_clean_accuracy: f64,
    pub eval_confounded_accuracy: f64,
    pub eval_clean_jaccard: f64,
    pub eval_confounded_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tau: f64,
    pub scanned: usize,
    pub candidates: usize,
    pub counterfactuals: usize,
    pub fallback_splits: usize,
    pub gradient_precision: f64,
    pub gradient_recall: f64,
    pub random_precision: f64,
    pub random_recall: f64,
    pub ppl_precision: f64,
    pub ppl_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub flagged: usize,
}

/// Per-seed evaluation report; one file per seed directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub variants: Vec<VariantMetrics>,
    pub detection: Option<DetectionMetrics>,
    pub threshold_sweep: Vec<ThresholdRow>,
}

/// Cross-seed aggregate: paired leaf-vs-kd outcomes and their sign test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub leaf_clean: f64,
    pub leaf_confounded: f64,
    pub kd_clean: f64,
    pub kd_confounded: f64,
    pub confounded_delta: f64,
    pub clean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seeds: Vec<u64>,
    pub outcomes: Vec<SeedOutcome>,
    pub mean_leaf_clean: f64,
    pub mean_leaf_confounded: f64,
    pub mean_kd_clean: f64,
    pub mean_kd_confounded: f64,
    pub mean_confounded_delta: f64,
    pub mean_clean_delta: f64,
    pub confounded_sign_test: SignTest,
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn aggregate(outcomes: Vec<SeedOutcome>) -> AggregateReport {
    let deltas: Vec<f64> = outcomes.iter().map(|o| o.confounded_delta).collect();
    AggregateReport {
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        mean_leaf_clean: mean(outcomes.iter().map(|o| o.leaf_clean)),
        mean_leaf_confounded: mean(outcomes.iter().map(|o| o.leaf_confounded)),
        mean_kd_clean: mean(outcomes.iter().map(|o| o.kd_clean)),
        mean_kd_confounded: mean(outcomes.iter().map(|o| o.kd_confounded)),
        mean_confounded_delta: mean(outcomes.iter().map(|o| o.confounded_delta)),
        mean_clean_delta: mean(outcomes.iter().map(|o| o.clean_delta)),
        confounded_sign_test: sign_test(&deltas),
        outcomes,
    }
}

// ─── threshold re-scoring ───

/// Re-thresholds the stored attribution records at each τ and scores the
/// resulting flags against the planted spans, without re-running any model.
pub fn threshold_table(
    report: &DetectionReport,
    corpus: &[TaskSample],
    taus: &[f64],
) -> Vec<ThresholdRow> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut tp = 0usize;
        let mut flagged = 0usize;
        let mut planted_total = 0usize;
        for det in &report.samples {
            let rec = &det.record;
            let flags = flag_confounders(rec, tau);
            let sample = match corpus.iter().find(|s| s.id == rec.sample_id) {
                Some(s) => s,
                None => continue,
            };
            let mut planted = vec![false; rec.context_len];
            for sp in &sample.planted_spans {
                let offset = match sp.scope {
                    SpanScope::Instruction => 0,
                    SpanScope::Response => rec.instruction_len,
                };
                for p in sp.start..sp.end {
                    if offset + p < rec.context_len {
                        planted[offset + p] = true;
                    }
                }
            }
            tp += flags.iter().zip(&planted).filter(|(&f, &p)| f && p).count();
            flagged += flags.iter().filter(|&&f| f).count();
            planted_total += planted.iter().filter(|&&p| p).count();
        }
        let precision = if flagged == 0 { 0.0 } else { tp as f64 / flagged as f64 };
        let recall = if planted_total == 0 { 0.0 } else { tp as f64 / planted_total as f64 };
        rows.push(ThresholdRow { tau, precision, recall, flagged });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_axioms() {
        let a = vec![1u32, 2, 3];
        let b = vec![3u32, 4];
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &[]), 0.0);
        assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
        assert!((jaccard(&a, &b) - 0.25).abs() < 1e-12);
        assert_eq!(jaccard(&[], &[]), 1.0);
        // Duplicates collapse: sets, not multisets.
        assert_eq!(jaccard(&[5, 5, 5], &[5]), 1.0);
    }

    #[test]
    fn sign_test_exact_tails() {
        // 5 wins of 5: p = 1/32.
        let t = sign_test(&[0.1, 0.2, 0.3, 0.1, 0.4]);
        assert_eq!((t.wins, t.losses, t.ties), (5, 0, 0));
        assert!((t.p_value - 1.0 / 32.0).abs() < 1e-12);
        // 7 wins 1 loss: p = (1 + 8) / 256.
        let t = sign_test(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        assert!((t.p_value - 9.0 / 256.0).abs() < 1e-12);
        // Ties drop from n.
        let t = sign_test(&[0.0, 0.0, 1.0]);
        assert_eq!((t.wins, t.losses, t.ties), (1, 0, 2));
        assert!((t.p_value - 0.5).abs() < 1e-12);
        // All ties: vacuous.
        assert_eq!(sign_test(&[0.0, 0.0]).p_value, 1.0);
    }

    #[test]
    fn aggregate_means_and_pairing() {
        let outcomes = vec![
            SeedOutcome {
                seed: 1,
                leaf_clean: 1.0,
                leaf_confounded: 0.8,
                kd_clean: 1.0,
                kd_confounded: 0.6,
                confounded_delta: 0.2,
                clean_delta: 0.0,
            },
            SeedOutcome {
                seed: 2,
                leaf_clean: 0.9,
                leaf_confounded: 0.7,
                kd_clean: 1.0,
                kd_confounded: 0.5,
                confounded_delta: 0.2,
                clean_delta: -0.1,
            },
        ];
        let agg = aggregate(outcomes);
        assert_eq!(agg.seeds, vec![1, 2]);
        assert!((agg.mean_leaf_confounded - 0.75).abs() < 1e-12);
        assert!((agg.mean_confounded_delta - 0.2).abs() < 1e-12);
        assert_eq!(agg.confounded_sign_test.wins, 2);
    }
}
