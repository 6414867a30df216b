//! Self-check suites used by the test harness and the acceptance gate:
//! finite-difference audits of every differentiable op and of the per-token
//! sensitivities, plus algebraic identities of detection and distillation.
//!
//! Each audit is deterministic: inputs come from named substreams, so a
//! passing audit stays green under re-runs and across machines.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Graph, NodeId, Tensor};
use crate::detect::{
    extract_spans, flag_confounders, minmax_normalize, prune, AttributionRecord,
};
use crate::detect::{MaskStrategy, SplitMode};
use crate::distill::{blended_loss, kl_div, train_distill, train_pure_kd, DistillConfig};
use crate::error::{LeafError, Result};
use crate::model::{
    nll_loss, token_grad_norms, Capacity, ModelConfig, ModelParams, SensitivityNorm, TokenId,
    TrainSample,
};
use crate::rng::substream;

const FD_H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("audit tensor")
}

/// Entries with magnitude in [0.25, 1.25]: far enough from the relu kink
/// that central differences at h = 1e-5 never straddle it.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.25..1.25);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("audit tensor")
}

// ─── gradient audits ───

#[derive(Debug, Clone)]
pub struct OpGradCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

/// Checks every differentiable op (and a small composite net) against central
/// finite differences on `seeds_per_op` random inputs each. The scalar head
/// is a weighted mean so no op's gradient collapses to a constant.
pub fn op_gradient_audit(seeds_per_op: usize) -> Result<Vec<OpGradCheck>> {
    let mut out = Vec::new();
    let mut run = |op: &'static str,
                   check: &dyn Fn(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for seed in 0..seeds_per_op {
            let mut rng = substream(seed as u64, &format!("gradient-audit/{op}"));
            worst = worst.max(check(&mut rng)?);
        }
        out.push(OpGradCheck { op, max_rel_err: worst });
        Ok(())
    };

    run("add", &|rng| {
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let b = g.leaf(b.clone());
                let y = g.add(xid, b)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("add_bias_rows", &|rng| {
        let a = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![1, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let a = g.leaf(a.clone());
                let y = g.add(a, xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("mul", &|rng| {
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let b = g.leaf(b.clone());
                let y = g.mul(xid, b)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("matmul_left", &|rng| {
        let b = rand_tensor(rng, vec![4, 2], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let b = g.leaf(b.clone());
                let y = g.matmul(xid, b)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("matmul_right", &|rng| {
        let a = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
        let x = rand_tensor(rng, vec![4, 2], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let a = g.leaf(a.clone());
                let y = g.matmul(a, xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("gather_rows", &|rng| {
        let w = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        let x = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        // Duplicate indices exercise scatter-add in the backward pass.
        let idx = [0usize, 2, 2, 4, 1];
        finite_diff_check(
            |g, xid| {
                let y = g.gather_rows(xid, &idx)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("relu", &|rng| {
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor_off_kink(rng, vec![3, 4]);
        finite_diff_check(
            |g, xid| {
                let y = g.relu(xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("layer_norm", &|rng| {
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let y = g.layer_norm(xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("softmax_rows", &|rng| {
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        finite_diff_check(
            |g, xid| {
                let y = g.softmax_rows(xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("log_softmax_rows", &|rng| {
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        finite_diff_check(
            |g, xid| {
                let y = g.log_softmax_rows(xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("mean", &|rng| {
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(|g, xid| g.mean(xid), &x, FD_H)
    })?;

    run("concat_rows", &|rng| {
        let b = rand_tensor(rng, vec![3, 3], -1.0, 1.0);
        let w = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        let x = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let b = g.leaf(b.clone());
                let y = g.concat_rows(xid, b)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("slice_rows", &|rng| {
        let w = rand_tensor(rng, vec![3, 3], -1.0, 1.0);
        let x = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let y = g.slice_rows(xid, 1, 4)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("transpose", &|rng| {
        let w = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_diff_check(
            |g, xid| {
                let y = g.transpose(xid)?;
                weighted_mean(g, y, &w)
            },
            &x,
            FD_H,
        )
    })?;

    run("two_layer_net", &|rng| {
        // Rejection-sample until the relu input stays clear of the kink.
        loop {
            let w1 = rand_tensor(rng, vec![3, 5], -0.8, 0.8);
            let b1 = rand_tensor(rng, vec![1, 5], -0.8, 0.8);
            let w2 = rand_tensor(rng, vec![5, 2], -0.8, 0.8);
            let w3 = rand_tensor(rng, vec![4, 2], -1.0, 1.0);
            let x = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
            let build = |g: &mut Graph, xid: NodeId| -> Result<NodeId> {
                let w1 = g.leaf(w1.clone());
                let b1 = g.leaf(b1.clone());
                let w2 = g.leaf(w2.clone());
                let h = g.layer_norm(xid)?;
                let a = g.matmul(h, w1)?;
                let a = g.add(a, b1)?;
                let r = g.relu(a)?;
                let o = g.matmul(r, w2)?;
                let s = g.softmax_rows(o)?;
                weighted_mean(g, s, &w3)
            };
            // Probe the pre-activation values on this input.
            let mut g = Graph::new();
            let xid = g.leaf(x.clone());
            let h = g.layer_norm(xid)?;
            let w1n = g.leaf(w1.clone());
            let b1n = g.leaf(b1.clone());
            let a = g.matmul(h, w1n)?;
            let a = g.add(a, b1n)?;
            if g.value(a).data().iter().any(|v| v.abs() < 5e-2) {
                continue;
            }
            return finite_diff_check(build, &x, FD_H);
        }
    })?;

    Ok(out)
}

fn weighted_mean(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.leaf(w.clone());
    let p = g.mul(y, w)?;
    g.mean(p)
}

/// Checks per-token sensitivities against finite differences of the loss
/// under token-embedding perturbations. Tokens in each probe sequence are
/// distinct, so an embedding row is owned by exactly one position. Returns
/// the worst relative error across both reduction norms.
pub fn token_sensitivity_audit(seeds: usize) -> Result<f64> {
    // d_model 8: narrower rows risk near-constant layer-norm inputs whose
    // curvature degrades the finite-difference reference itself.
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        max_seq_len: 8,
        capacity: Capacity::Student,
    };
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = substream(seed as u64, "sensitivity-audit");
        let mut params = ModelParams::init(cfg.clone(), rng.gen())?;
        let mut tokens: Vec<TokenId> = (0..8).collect();
        crate::model::shuffle(&mut tokens, &mut rng);
        tokens.truncate(6);
        let context_len = 3;
        let context: Vec<bool> = (0..6).map(|i| i < context_len).collect();
        let target: Vec<bool> = (0..6).map(|i| i >= context_len).collect();

        let g_l2 = token_grad_norms(&params, &tokens, &context, &target, SensitivityNorm::L2)?;
        let g_abs =
            token_grad_norms(&params, &tokens, &context, &target, SensitivityNorm::AbsSum)?;

        for (i, &tok) in tokens.iter().enumerate().take(context_len) {
            let mut row_grad = vec![0.0; cfg.d_model];
            for (j, slot) in row_grad.iter_mut().enumerate() {
                let c = tok as usize * cfg.d_model + j;
                let orig = params.tensors()[0].data()[c];
                params.tensors_mut()[0].data_mut()[c] = orig + FD_H;
                let up = nll_loss(&params, &tokens, &target)?;
                params.tensors_mut()[0].data_mut()[c] = orig - FD_H;
                let down = nll_loss(&params, &tokens, &target)?;
                params.tensors_mut()[0].data_mut()[c] = orig;
                *slot = (up - down) / (2.0 * FD_H);
            }
            let fd_l2 = row_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fd_abs = row_grad.iter().map(|v| v.abs()).sum::<f64>();
            let rel_l2 = (g_l2[i] - fd_l2).abs() / f64::max(1.0, g_l2[i].abs());
            let rel_abs = (g_abs[i] - fd_abs).abs() / f64::max(1.0, g_abs[i].abs());
            worst = worst.max(rel_l2).max(rel_abs);
        }
    }
    Ok(worst)
}

// ─── detection algebra audits ───

/// Production flag path from raw sensitivity vectors, bypassing the models.
fn pipeline_flags(g_t: &[f64], g_s: &[f64], tau: f64) -> Result<Vec<bool>> {
    let g_hat_teacher = minmax_normalize(g_t)?;
    let g_hat_student = minmax_normalize(g_s)?;
    let delta: Vec<f64> =
        g_hat_teacher.iter().zip(&g_hat_student).map(|(a, b)| a - b).collect();
    let dmin = delta.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm_delta = minmax_normalize(&delta)?;
    let n = g_t.len();
    let record = AttributionRecord {
        sample_id: "audit".into(),
        segment: 0,
        instruction_len: n,
        context_len: n,
        tokens: vec![0; n],
        g_teacher: g_t.to_vec(),
        g_student: g_s.to_vec(),
        g_hat_teacher,
        g_hat_student,
        delta,
        norm_delta,
        degenerate: dmax == dmin,
        flags: vec![false; n],
    };
    Ok(flag_confounders(&record, tau))
}

/// Independent straight-line re-derivation of the flags, plain loops only.
fn oracle_flags(g_t: &[f64], g_s: &[f64], tau: f64) -> Vec<bool> {
    let n = g_t.len();
    let mut ht = vec![0.0; n];
    let mut hs = vec![0.0; n];
    for (h, raw) in [(&mut ht, g_t), (&mut hs, g_s)] {
        let mut lo = raw[0];
        let mut hi = raw[0];
        for i in 1..n {
            if raw[i] < lo {
                lo = raw[i];
            }
            if raw[i] > hi {
                hi = raw[i];
            }
        }
        if hi > lo {
            for i in 0..n {
                h[i] = (raw[i] - lo) / (hi - lo);
            }
        }
    }
    let mut d = vec![0.0; n];
    for i in 0..n {
        d[i] = ht[i] - hs[i];
    }
    let mut dlo = d[0];
    let mut dhi = d[0];
    for i in 1..n {
        if d[i] < dlo {
            dlo = d[i];
        }
        if d[i] > dhi {
            dhi = d[i];
        }
    }
    let mut flags = vec![false; n];
    if dhi == dlo {
        for f in &mut flags {
            *f = tau >= 1.0;
        }
    } else {
        for i in 0..n {
            flags[i] = (d[i] - dlo) / (dhi - dlo) <= tau;
        }
    }
    flags
}

const ORACLE_TAUS: [f64; 4] = [0.0, 0.1, 0.5, 1.0];

/// Exhaustive oracle comparison over every binary sensitivity pattern up to
/// length 8 (several real-valued pairings per pattern) plus random
/// real-valued profiles. Returns the number of compared cases.
pub fn oracle_audit() -> Result<usize> {
    let mut cases = 0usize;
    let mut check = |g_t: &[f64], g_s: &[f64]| -> Result<()> {
        for tau in ORACLE_TAUS {
            let lib = pipeline_flags(g_t, g_s, tau)?;
            let ora = oracle_flags(g_t, g_s, tau);
            if lib != ora {
                return Err(LeafError::InvalidArgument(format!(
                    "oracle mismatch at τ={tau}: g_t={g_t:?} g_s={g_s:?} lib={lib:?} oracle={ora:?}"
                )));
            }
            cases += 1;
        }
        Ok(())
    };

    for n in 1..=8usize {
        for bits in 0u32..(1 << n) {
            let b: Vec<f64> = (0..n).map(|i| ((bits >> i) & 1) as f64).collect();
            let complement: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
            let reversed: Vec<f64> = b.iter().rev().cloned().collect();
            let affine: Vec<f64> = b.iter().map(|v| 3.0 * v + 1.0).collect();
            let ramp: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            check(&b, &complement)?;
            check(&b, &reversed)?;
            check(&affine, &b)?;
            check(&ramp, &b)?;
        }
    }
    let mut rng = substream(0, "oracle-audit-fuzz");
    for _ in 0..500 {
        let n = rng.gen_range(1..=12);
        let g_t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g_s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        check(&g_t, &g_s)?;
    }
    Ok(cases)
}

/// Positive-affine rescaling of either raw sensitivity profile must leave
/// the flags unchanged; normalized differences agree to 1e-9.
pub fn affine_invariance_audit() -> Result<usize> {
    let mut rng = substream(0, "affine-audit");
    let transforms = [(3.0, 0.0), (0.5, 2.0), (1e6, -5.0), (1e-6, 0.0)];
    let mut cases = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(2..=12);
        let g_t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g_s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for tau in [0.0, 0.1, 0.5, 1.0] {
            let base = pipeline_flags(&g_t, &g_s, tau)?;
            for (a, b) in transforms {
                let t2: Vec<f64> = g_t.iter().map(|v| a * v + b).collect();
                let s2: Vec<f64> = g_s.iter().map(|v| a * v + b).collect();
                if pipeline_flags(&t2, &g_s, tau)? != base
                    || pipeline_flags(&g_t, &s2, tau)? != base
                {
                    return Err(LeafError::InvalidArgument(format!(
                        "affine transform ({a}, {b}) changed flags at τ={tau}"
                    )));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Flag sets must grow monotonically with τ; τ=0 keeps exactly the arg-min
/// positions of the difference profile and τ=1 keeps everything.
pub fn nestedness_audit() -> Result<usize> {
    let mut rng = substream(0, "nestedness-audit");
    let mut cases = 0usize;
    for _ in 0..300 {
        let n = rng.gen_range(2..=12);
        let g_t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g_s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let mut prev: Option<Vec<bool>> = None;
        for &tau in &taus {
            let flags = pipeline_flags(&g_t, &g_s, tau)?;
            if let Some(p) = &prev {
                if p.iter().zip(&flags).any(|(&a, &b)| a && !b) {
                    return Err(LeafError::InvalidArgument(format!(
                        "flags not nested at τ={tau}"
                    )));
                }
            }
            prev = Some(flags);
            cases += 1;
        }
        if !pipeline_flags(&g_t, &g_s, 1.0)?.iter().all(|&f| f) {
            return Err(LeafError::InvalidArgument("τ=1 must flag everything".into()));
        }
    }
    Ok(cases)
}

/// extract_spans at min_len 1 must flatten back to the exact flag vector,
/// and every extracted span must be a maximal run at least min_len long.
pub fn span_roundtrip_audit() -> Result<usize> {
    let mut rng = substream(0, "span-audit");
    let mut cases = 0usize;
    for _ in 0..500 {
        let n = rng.gen_range(0..=16);
        let density = rng.gen_range(0.1..0.9);
        let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let spans = extract_spans(&flags, 1);
        let mut rebuilt = vec![false; n];
        for (s, e) in &spans {
            for f in &mut rebuilt[*s..*e] {
                *f = true;
            }
        }
        if rebuilt != flags {
            return Err(LeafError::InvalidArgument(format!(
                "span flatten mismatch for {flags:?}"
            )));
        }
        for min_len in 1..=3usize {
            for (s, e) in extract_spans(&flags, min_len) {
                let maximal = flags[s..e].iter().all(|&f| f)
                    && (s == 0 || !flags[s - 1])
                    && (e == n || !flags[e]);
                if e - s < min_len || !maximal {
                    return Err(LeafError::InvalidArgument(format!(
                        "non-maximal span ({s}, {e}) at min_len {min_len} for {flags:?}"
                    )));
                }
            }
        }
        cases += 1;
    }
    Ok(cases)
}

/// Pruning all spans at once must equal pruning them one at a time from the
/// right, and the surviving length must be exact.
pub fn prune_equivalence_audit() -> Result<usize> {
    let mut rng = substream(0, "prune-audit");
    let mut cases = 0usize;
    for _ in 0..300 {
        let n = rng.gen_range(4..=20);
        let tokens: Vec<TokenId> = (0..n as TokenId).collect();
        // Random disjoint spans from sorted cut points, keeping a survivor.
        let mut cuts: Vec<usize> = (0..rng.gen_range(1..=3))
            .flat_map(|_| {
                let s = rng.gen_range(0..n);
                let e = rng.gen_range(s + 1..=n);
                [s, e]
            })
            .collect();
        cuts.sort_unstable();
        let mut spans: Vec<(usize, usize)> = cuts.chunks(2).map(|c| (c[0], c[1])).collect();
        spans.retain(|&(s, e)| s < e);
        let removed: usize = spans.iter().map(|(s, e)| e - s).sum();
        if removed == 0 || removed >= n {
            continue;
        }
        let collective = prune(&tokens, &spans)?;
        let mut iterated = tokens.clone();
        for &(s, e) in spans.iter().rev() {
            iterated = prune(&iterated, &[(s, e)])?;
        }
        if collective != iterated || collective.len() != n - removed {
            return Err(LeafError::InvalidArgument(format!(
                "prune mismatch for spans {spans:?} over {n} tokens"
            )));
        }
        cases += 1;
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionAudit {
    pub oracle_cases: usize,
    pub invariance_cases: usize,
    pub nestedness_cases: usize,
    pub span_cases: usize,
    pub prune_cases: usize,
}

pub fn detection_algebra_audit() -> Result<DetectionAudit> {
    Ok(DetectionAudit {
        oracle_cases: oracle_audit()?,
        invariance_cases: affine_invariance_audit()?,
        nestedness_cases: nestedness_audit()?,
        span_cases: span_roundtrip_audit()?,
        prune_cases: prune_equivalence_audit()?,
    })
}

// ─── loss identity audits ───

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    crate::distill::softmax_row(&logits)
}

/// Gibbs inequality plus the Pinsker lower bound on random pairs, exact zero
/// on identical inputs, strict positivity once distributions differ.
pub fn kl_audit(pairs: usize) -> Result<usize> {
    let mut rng = substream(0, "kl-audit");
    for _ in 0..pairs {
        let n = rng.gen_range(2..=10);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let kl = kl_div(&p, &q)?;
        if kl < 0.0 {
            return Err(LeafError::InvalidArgument(format!("negative divergence {kl}")));
        }
        let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        if kl + 1e-9 < 2.0 * tv * tv {
            return Err(LeafError::InvalidArgument(format!(
                "divergence {kl} below Pinsker bound for tv {tv}"
            )));
        }
        if kl_div(&p, &p)? != 0.0 {
            return Err(LeafError::InvalidArgument("self-divergence not exactly zero".into()));
        }
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap >= 1e-6 && kl <= 0.0 {
            return Err(LeafError::InvalidArgument(
                "distinct distributions reported zero divergence".into(),
            ));
        }
    }
    Ok(pairs)
}

fn micro_params(seed: u64) -> Result<ModelParams> {
    ModelParams::init(
        ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_layers: 1,
            max_seq_len: 8,
            capacity: Capacity::Student,
        },
        seed,
    )
}

fn micro_batch() -> (Vec<TrainSample>, Vec<TrainSample>) {
    let originals = vec![
        TrainSample { tokens: vec![1, 2, 3, 4], target_mask: vec![false, false, true, true] },
        TrainSample { tokens: vec![5, 0, 2], target_mask: vec![false, true, true] },
    ];
    let cfs = vec![
        TrainSample { tokens: vec![2, 3, 4], target_mask: vec![false, true, true] },
        TrainSample { tokens: vec![0, 1, 5, 3], target_mask: vec![false, false, true, true] },
    ];
    (originals, cfs)
}

/// The blended objective evaluated on a 5-point λ grid: the two component
/// losses must not move with λ and the blend must be exactly affine.
pub fn blended_affinity_audit() -> Result<usize> {
    let teacher = micro_params(41)?;
    let student = micro_params(42)?;
    let (originals, cfs) = micro_batch();
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let head = blended_loss(&teacher, &student, &originals, &cfs, grid[0], None)?;
    for &lam in &grid {
        let lb = blended_loss(&teacher, &student, &originals, &cfs, lam, None)?;
        if (lb.l_kd - head.l_kd).abs() > 1e-12 || (lb.l_cd - head.l_cd).abs() > 1e-12 {
            return Err(LeafError::InvalidArgument(format!(
                "component losses moved with λ={lam}"
            )));
        }
        let expect = lam * lb.l_kd + (1.0 - lam) * lb.l_cd;
        if (lb.l - expect).abs() > 1e-12 {
            return Err(LeafError::InvalidArgument(format!(
                "blend not affine at λ={lam}: {} vs {expect}",
                lb.l
            )));
        }
    }
    Ok(grid.len())
}

/// λ = 1 with no counterfactuals must reproduce the pure teacher-matching
/// trajectory bit for bit: parameters and loss history.
pub fn kd_equivalence_audit() -> Result<()> {
    let teacher = micro_params(51)?;
    let (originals, _) = micro_batch();
    let cfg = DistillConfig {
        lambda: 1.0,
        epochs: 3,
        batch_size: 2,
        lr: 1e-3,
        split: SplitMode::NoSplit,
        strategy: MaskStrategy::Gradient,
        seed: 7,
    };
    let mut blended = micro_params(52)?;
    let mut pure = micro_params(52)?;
    let hb = train_distill(&teacher, &mut blended, &originals, &[], &cfg, None)?;
    let hp = train_pure_kd(&teacher, &mut pure, &originals, &cfg, None)?;
    for (a, b) in blended.tensors().iter().zip(pure.tensors()) {
        if a.data() != b.data() {
            return Err(LeafError::InvalidArgument(
                "λ=1 trajectory diverged from pure teacher matching".into(),
            ));
        }
    }
    for (ea, eb) in hb.iter().zip(&hp) {
        if ea.l.to_bits() != eb.l.to_bits() || ea.l_kd.to_bits() != eb.l_kd.to_bits() {
            return Err(LeafError::InvalidArgument("loss histories diverged".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LossAudit {
    pub kl_pairs: usize,
    pub grid_points: usize,
}

pub fn loss_identity_audit() -> Result<LossAudit> {
    let kl_pairs = kl_audit(1000)?;
    let grid_points = blended_affinity_audit()?;
    kd_equivalence_audit()?;
    Ok(LossAudit { kl_pairs, grid_points })
}
