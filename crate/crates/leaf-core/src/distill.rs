//! Distillation: forward KL matching against a frozen teacher, optionally
//! blended with the same loss on counterfactual (pruned-context) samples.
//!
//! The training objective per step is λ·L_kd + (1−λ)·L_cd where L_kd averages
//! the per-target-token KL(teacher ‖ student) over a mini-batch of original
//! samples and L_cd does the same over a slice of the counterfactual set.
//! KL is taken at temperature 1, per position, and averaged over the target
//! positions of each sample. The teacher's distributions do not depend on the
//! student, so the optimized quantity is the teacher→student cross-entropy;
//! reported losses are the true KL values.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{TaskSample, VocabLayout};
use crate::detect::{exact_match_accuracy, CounterfactualSample, MaskStrategy, SplitMode};
use crate::error::{LeafError, Result};
use crate::model::{build_forward, shuffle, AdamState, ModelParams, TokenId, TrainSample};
use crate::rng::substream;

/// Below this distribution gap the divergence is reported as exactly zero;
/// true divergences above it stay strictly positive in f64 arithmetic.
pub const KL_SNAP_EPS: f64 = 1e-9;

// ─── divergence ───

/// Forward KL divergence Σ p·ln(p/q) between two probability vectors. Both
/// must sum to 1 within 1e-9 and q must be strictly positive. Distributions
/// equal within `KL_SNAP_EPS` per entry report exactly 0; anything else is
/// clamped at 0 from below against rounding.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || p.len() != q.len() {
        return Err(LeafError::InvalidArgument(format!(
            "kl_div: distribution lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LeafError::InvalidArgument(format!(
                "kl_div: {name} sums to {sum}, not 1"
            )));
        }
    }
    if p.iter().any(|&x| x < 0.0) {
        return Err(LeafError::InvalidArgument("kl_div: negative mass in p".into()));
    }
    if q.iter().any(|&x| x <= 0.0) {
        return Err(LeafError::InvalidArgument("kl_div: q must be strictly positive".into()));
    }
    let gap = p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap < KL_SNAP_EPS {
        return Ok(0.0);
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum();
    Ok(sum.max(0.0))
}

/// Numerically stable softmax of one logits row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

// ─── per-sample loss ───

/// Full softmax rows of the teacher for one sample, computed once since the
/// teacher never changes during distillation.
pub fn teacher_prob_rows(teacher: &ModelParams, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let logits = crate::model::forward_logits(teacher, tokens)?;
    let v = teacher.config().vocab_size;
    Ok((0..tokens.len()).map(|i| softmax_row(&logits.data()[i * v..(i + 1) * v])).collect())
}

fn target_rows(sample: &TrainSample) -> Result<Vec<usize>> {
    if sample.target_mask.len() != sample.tokens.len() {
        return Err(LeafError::InvalidArgument(format!(
            "target mask length {} != sequence length {}",
            sample.target_mask.len(),
            sample.tokens.len()
        )));
    }
    if sample.target_mask.first().copied().unwrap_or(false) {
        return Err(LeafError::InvalidArgument(
            "position 0 cannot be a prediction target (no preceding context)".into(),
        ));
    }
    let rows: Vec<usize> = sample
        .target_mask
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(t, _)| t - 1)
        .collect();
    if rows.is_empty() {
        return Err(LeafError::InvalidArgument("empty target mask".into()));
    }
    Ok(rows)
}

/// Mean per-target-token KL(teacher ‖ student) for one sample plus, when
/// `grads` is given, the gradient of the optimized cross-entropy scaled by
/// `coeff` accumulated into it. One student forward serves both.
fn sample_kl(
    student: &ModelParams,
    sample: &TrainSample,
    teacher_rows: &[Vec<f64>],
    coeff: f64,
    grads: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    let rows = target_rows(sample)?;
    if teacher_rows.len() != sample.tokens.len() {
        return Err(LeafError::InvalidArgument(format!(
            "teacher rows {} for sequence length {}",
            teacher_rows.len(),
            sample.tokens.len()
        )));
    }
    let v = student.config().vocab_size;
    let n = sample.tokens.len();
    let k = rows.len();
    let mut fp = build_forward(student, &sample.tokens)?;

    let logits = fp.graph.value(fp.logits).clone();
    let mut kl = 0.0;
    for &r in &rows {
        kl += kl_div(&teacher_rows[r], &softmax_row(&logits.data()[r * v..(r + 1) * v]))?;
    }
    kl /= k as f64;

    if let Some(grads) = grads {
        // Cross-entropy −(1/k)·Σ_rows Σ_v p_T·log p_S via a weighted mean:
        // the weight tensor holds p_T on target rows and 0 elsewhere.
        let mut w = vec![0.0; n * v];
        for &r in &rows {
            w[r * v..(r + 1) * v].copy_from_slice(&teacher_rows[r]);
        }
        let g = &mut fp.graph;
        let w = g.leaf(Tensor::new(vec![n, v], w)?);
        let lsm = g.log_softmax_rows(fp.logits)?;
        let picked = g.mul(lsm, w)?;
        let m = g.mean(picked)?;
        let scale = g.leaf(Tensor::scalar(-((n * v) as f64) / k as f64)?);
        let loss = g.mul(m, scale)?;
        fp.graph.backward(loss)?;
        for (acc, &node) in grads.iter_mut().zip(&fp.param_nodes) {
            for (a, g) in acc.iter_mut().zip(fp.graph.grad(node)) {
                *a += coeff * g;
            }
        }
    }
    Ok(kl)
}

// ─── blended objective ───

/// Loss values over explicit sample sets; an empty set contributes 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kd: f64,
    pub l_cd: f64,
    pub l: f64,
    pub kd_count: usize,
    pub cd_count: usize,
}

fn set_mean_kl(
    student: &ModelParams,
    set: &[TrainSample],
    teacher_rows: &[Vec<Vec<f64>>],
    coeff: f64,
    mut grads: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let inv = coeff / set.len() as f64;
    let mut total = 0.0;
    for (sample, rows) in set.iter().zip(teacher_rows) {
        total += sample_kl(student, sample, rows, inv, grads.as_deref_mut())?;
    }
    Ok(total / set.len() as f64)
}

/// λ-blended loss over whole sample sets: L = λ·L_kd + (1−λ)·L_cd, with the
/// counterfactual term dropped when the set is empty. When `grads` is given
/// the blended gradient is accumulated into it.
pub fn blended_loss(
    teacher: &ModelParams,
    student: &ModelParams,
    originals: &[TrainSample],
    counterfactuals: &[TrainSample],
    lambda: f64,
    mut grads: Option<&mut [Vec<f64>]>,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LeafError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let orig_rows: Vec<Vec<Vec<f64>>> =
        originals.iter().map(|s| teacher_prob_rows(teacher, &s.tokens)).collect::<Result<_>>()?;
    let cf_rows: Vec<Vec<Vec<f64>>> = counterfactuals
        .iter()
        .map(|s| teacher_prob_rows(teacher, &s.tokens))
        .collect::<Result<_>>()?;
    let l_kd = set_mean_kl(student, originals, &orig_rows, lambda, grads.as_deref_mut())?;
    let l_cd = set_mean_kl(student, counterfactuals, &cf_rows, 1.0 - lambda, grads)?;
    Ok(LossBreakdown {
        l_kd,
        l_cd,
        l: lambda * l_kd + (1.0 - lambda) * l_cd,
        kd_count: originals.len(),
        cd_count: counterfactuals.len(),
    })
}

// ─── sample assembly ───

/// A counterfactual as a trainable sequence: pruned context, then target.
pub fn counterfactual_train_sample(cf: &CounterfactualSample) -> TrainSample {
    let mut tokens = cf.pruned_input.clone();
    tokens.extend_from_slice(&cf.target);
    let mut target_mask = vec![false; cf.pruned_input.len()];
    target_mask.extend(std::iter::repeat(true).take(cf.target.len()));
    TrainSample { tokens, target_mask }
}

/// An original sample as a trainable sequence: instruction context, response
/// target.
pub fn original_train_sample(sample: &TaskSample) -> TrainSample {
    let (_, target_mask) = sample.full_masks();
    TrainSample { tokens: sample.tokens(), target_mask }
}

// ─── training ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight on the original-sample term; 1 − λ goes to counterfactuals.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub split: SplitMode,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LeafError::InvalidArgument(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(LeafError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LeafError::InvalidArgument(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch training record; accuracies are filled only when eval sets are
/// supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub l_kd: f64,
    pub l_cd: f64,
    pub l: f64,
    pub eval_clean_acc: Option<f64>,
    pub eval_confounded_acc: Option<f64>,
}

/// Optional per-epoch evaluation hookup.
#[derive(Clone, Copy)]
pub struct EvalSets<'a> {
    pub clean: &'a [&'a TaskSample],
    pub confounded: &'a [&'a TaskSample],
    pub vocab: &'a VocabLayout,
}

/// Blended distillation. Per epoch both sample sets are shuffled on their own
/// named substreams; each original mini-batch is paired with a contiguous
/// slice of the shuffled counterfactuals so every counterfactual is visited
/// once per epoch. Gradients accumulate in a fixed order (originals, then
/// counterfactuals) and the teacher is never mutated. Deterministic in
/// `cfg.seed`.
pub fn train_distill(
    teacher: &ModelParams,
    student: &mut ModelParams,
    originals: &[TrainSample],
    counterfactuals: &[TrainSample],
    cfg: &DistillConfig,
    eval: Option<EvalSets<'_>>,
) -> Result<Vec<DistillEpoch>> {
    cfg.validate()?;
    if originals.is_empty() {
        return Err(LeafError::InvalidArgument("no original samples to distill on".into()));
    }
    let orig_rows: Vec<Vec<Vec<f64>>> =
        originals.iter().map(|s| teacher_prob_rows(teacher, &s.tokens)).collect::<Result<_>>()?;
    let cf_rows: Vec<Vec<Vec<f64>>> = counterfactuals
        .iter()
        .map(|s| teacher_prob_rows(teacher, &s.tokens))
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(student, cfg.lr);
    let mut rng_orig = substream(cfg.seed, "distill-batches");
    let mut rng_cf = substream(cfg.seed, "distill-cf-batches");
    let mut orig_order: Vec<usize> = (0..originals.len()).collect();
    let mut cf_order: Vec<usize> = (0..counterfactuals.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle(&mut orig_order, &mut rng_orig);
        shuffle(&mut cf_order, &mut rng_cf);
        let steps = orig_order.chunks(cfg.batch_size).count();
        let mut sum_kd = 0.0;
        let mut sum_cd = 0.0;
        let mut cd_steps = 0usize;

        for (step, batch) in orig_order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> =
                student.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let kd_coeff = cfg.lambda / batch.len() as f64;
            let mut batch_kd = 0.0;
            for &i in batch {
                batch_kd +=
                    sample_kl(student, &originals[i], &orig_rows[i], kd_coeff, Some(&mut grads))?;
            }
            batch_kd /= batch.len() as f64;
            sum_kd += batch_kd;

            let lo = counterfactuals.len() * step / steps;
            let hi = counterfactuals.len() * (step + 1) / steps;
            if hi > lo {
                let cd_coeff = (1.0 - cfg.lambda) / (hi - lo) as f64;
                let mut batch_cd = 0.0;
                for &j in &cf_order[lo..hi] {
                    batch_cd += sample_kl(
                        student,
                        &counterfactuals[j],
                        &cf_rows[j],
                        cd_coeff,
                        Some(&mut grads),
                    )?;
                }
                batch_cd /= (hi - lo) as f64;
                sum_cd += batch_cd;
                cd_steps += 1;
            }
            adam.step(student, &grads)?;
        }

        let l_kd = sum_kd / steps as f64;
        let l_cd = if cd_steps == 0 { 0.0 } else { sum_cd / cd_steps as f64 };
        let (clean, confounded) = match eval {
            Some(sets) => (
                Some(exact_match_accuracy(student, sets.clean, sets.vocab)?),
                Some(exact_match_accuracy(student, sets.confounded, sets.vocab)?),
            ),
            None => (None, None),
        };
        history.push(DistillEpoch {
            epoch,
            l_kd,
            l_cd,
            l: cfg.lambda * l_kd + (1.0 - cfg.lambda) * l_cd,
            eval_clean_acc: clean,
            eval_confounded_acc: confounded,
        });
    }
    Ok(history)
}

/// Reference distillation without a counterfactual term: same batch stream,
/// plain mean-KL steps. Blended training at λ = 1 with no counterfactuals
/// must reproduce this trajectory bit for bit.
pub fn train_pure_kd(
    teacher: &ModelParams,
    student: &mut ModelParams,
    originals: &[TrainSample],
    cfg: &DistillConfig,
    eval: Option<EvalSets<'_>>,
) -> Result<Vec<DistillEpoch>> {
    cfg.validate()?;
    if originals.is_empty() {
        return Err(LeafError::InvalidArgument("no original samples to distill on".into()));
    }
    let orig_rows: Vec<Vec<Vec<f64>>> =
        originals.iter().map(|s| teacher_prob_rows(teacher, &s.tokens)).collect::<Result<_>>()?;
    let mut adam = AdamState::new(student, cfg.lr);
    let mut rng = substream(cfg.seed, "distill-batches");
    let mut order: Vec<usize> = (0..originals.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sum_kd = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> =
                student.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let coeff = 1.0 / batch.len() as f64;
            let mut batch_kd = 0.0;
            for &i in batch {
                batch_kd +=
                    sample_kl(student, &originals[i], &orig_rows[i], coeff, Some(&mut grads))?;
            }
            sum_kd += batch_kd / batch.len() as f64;
            steps += 1;
            adam.step(student, &grads)?;
        }
        let l_kd = sum_kd / steps as f64;
        let (clean, confounded) = match eval {
            Some(sets) => (
                Some(exact_match_accuracy(student, sets.clean, sets.vocab)?),
                Some(exact_match_accuracy(student, sets.confounded, sets.vocab)?),
            ),
            None => (None, None),
        };
        history.push(DistillEpoch {
            epoch,
            l_kd,
            l_cd: 0.0,
            l: l_kd,
            eval_clean_acc: clean,
            eval_confounded_acc: confounded,
        });
    }
    Ok(history)
}
