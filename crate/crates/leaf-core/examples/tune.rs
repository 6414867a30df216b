//! Scratch experiment driver for sizing the default configuration.

use std::time::Instant;

use rand::Rng;

use leaf_core::corpus::{by_split, generate_corpus, CorpusConfig, Split};
use leaf_core::detect::{
    build_counterfactual_dataset, compute_attribution, decodes_gold, exact_match_accuracy,
    extract_spans, flag_confounders, prune, DetectionConfig, DetectionScope, MaskStrategy,
    SplitMode,
};
use leaf_core::distill::{
    counterfactual_train_sample, original_train_sample, train_distill, train_pure_kd,
    DistillConfig, EvalSets,
};
use leaf_core::model::{
    greedy_decode, train_lm, Capacity, ModelConfig, ModelParams, SensitivityNorm, TrainConfig,
};
use leaf_core::rng::substream;

fn derive(root: u64, name: &str) -> u64 {
    substream(root, name).gen()
}

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let root: u64 = arg(1, 1);
    let t_epochs: usize = arg(2, 30);
    let t_lr: f64 = arg(3, 1e-3);
    let s_epochs: usize = arg(4, 100);
    let s_d: usize = arg(5, 16);
    let d_epochs: usize = arg(6, 60);
    let t0 = Instant::now();
    let ccfg = CorpusConfig {
        base: 8,
        n_vars: 4,
        n_teacher_train: 640,
        n_student_train: arg(12, 640),
        n_eval_pairs: 160,
        confounder_rate: arg(8, 0.5),
        rho: 0.9,
        response_noise_rate: arg(9, 0.25),
        seed: derive(root, "corpus"),
    };
    let vocab = ccfg.vocab().unwrap();
    let corpus = generate_corpus(&ccfg).unwrap();
    let teacher_train: Vec<_> =
        by_split(&corpus, Split::TeacherTrain).iter().map(|s| original_train_sample(s)).collect();
    let student_train_samples = by_split(&corpus, Split::StudentTrain);
    let student_train: Vec<_> =
        student_train_samples.iter().map(|s| original_train_sample(s)).collect();
    let eval_clean = by_split(&corpus, Split::EvalClean);
    let eval_conf = by_split(&corpus, Split::EvalConfounded);
    println!("[{:6.1?}] corpus: {} samples", t0.elapsed(), corpus.len());

    let tcfg = ModelConfig {
        vocab_size: vocab.vocab_size(),
        d_model: 64,
        n_layers: 2,
        max_seq_len: 24,
        capacity: Capacity::Teacher,
    };
    let mut teacher = ModelParams::init(tcfg, derive(root, "init-teacher")).unwrap();
    train_lm(
        &mut teacher,
        &teacher_train,
        &TrainConfig { epochs: t_epochs, batch_size: 32, lr: t_lr, seed: derive(root, "train-teacher") },
    )
    .unwrap();
    let t_clean = exact_match_accuracy(&teacher, &eval_clean, &vocab).unwrap();
    let t_conf = exact_match_accuracy(&teacher, &eval_conf, &vocab).unwrap();
    println!("[{:6.1?}] teacher acc clean {t_clean:.3} confounded {t_conf:.3}", t0.elapsed());

    // CE phase, chunked so the acquisition trajectory is visible.
    let scfg = ModelConfig {
        vocab_size: vocab.vocab_size(),
        d_model: s_d,
        n_layers: arg(7, 1),
        max_seq_len: 24,
        capacity: Capacity::Student,
    };
    let mut student = ModelParams::init(scfg.clone(), derive(root, "init-student")).unwrap();
    let chunk = 25usize;
    let mut done = 0usize;
    while done < s_epochs {
        let n = chunk.min(s_epochs - done);
        train_lm(
            &mut student,
            &student_train,
            &TrainConfig {
                epochs: n,
                batch_size: 32,
                lr: t_lr,
                seed: derive(root, "train-student") ^ done as u64,
            },
        )
        .unwrap();
        done += n;
        let c = exact_match_accuracy(&student, &eval_clean, &vocab).unwrap();
        let f = exact_match_accuracy(&student, &eval_conf, &vocab).unwrap();
        println!("  ce epoch {done:3}: clean {c:.3} confounded {f:.3}");
    }
    println!("[{:6.1?}] student ce phase done", t0.elapsed());

    // Detection + counterfactuals on student_train at this checkpoint.
    let dcfg = DetectionConfig {
        tau: 0.10,
        min_span_len: arg(11, 2),
        scope: DetectionScope::InstructOnly,
        include_student_wrong_originals: true,
        sensitivity_norm: SensitivityNorm::L2,
    };
    let (cfs, report) = build_counterfactual_dataset(
        &teacher,
        &student,
        &student_train_samples,
        &vocab,
        &dcfg,
        SplitMode::NoSplit,
        derive(root, "baselines"),
    )
    .unwrap();
    println!(
        "[{:6.1?}] detection: {} candidates, {} cfs, P {:.3} R {:.3} | random R {:.3} ppl R {:.3}",
        t0.elapsed(),
        report.candidates,
        cfs.len(),
        report.gradient.precision(),
        report.gradient.recall(),
        report.random_baseline.recall(),
        report.ppl_baseline.recall(),
    );
    // CF funnel: why candidates fail to become counterfactuals.
    {
        let name = |t: leaf_core::model::TokenId| -> String {
            if let Some((i, d)) = vocab.as_binding(t) {
                format!("{i}={d}")
            } else if let Some(i) = vocab.as_var(t) {
                format!("v{i}")
            } else if let Some(d) = vocab.as_digit(t) {
                format!("d{d}")
            } else if t == vocab.query() {
                "q".into()
            } else if t == vocab.sep() {
                ";".into()
            } else if t == vocab.stop() {
                ".".into()
            } else {
                "?".into()
            }
        };
        let (mut no_span, mut with_span, mut exact_pair, mut t_pass, mut s_pass) =
            (0usize, 0usize, 0usize, 0usize, 0usize);
        let (mut orc_t, mut orc_both, mut orc_n) = (0usize, 0usize, 0usize);
        let mut span_len_hist = [0usize; 4];
        let mut shown = 0usize;
        for det in &report.samples {
            let sample =
                student_train_samples.iter().find(|s| s.id == det.record.sample_id).unwrap();
            let planted: Vec<(usize, usize)> = sample
                .planted_spans
                .iter()
                .filter(|sp| matches!(sp.scope, leaf_core::corpus::SpanScope::Instruction))
                .map(|sp| (sp.start, sp.end))
                .collect();
            // Oracle: would the exact planted pair verify if extraction found it?
            if let Some(&(ps, pe)) = planted.first() {
                orc_n += 1;
                let pruned = prune(&sample.instruction, &[(ps, pe)]).unwrap();
                let td = greedy_decode(&teacher, &pruned, sample.response.len(), vocab.stop()).unwrap();
                if td[pruned.len()..] == sample.response[..] {
                    orc_t += 1;
                    let sd =
                        greedy_decode(&student, &pruned, sample.response.len(), vocab.stop()).unwrap();
                    orc_both += (sd[pruned.len()..] == sample.response[..]) as usize;
                }
            }
            if shown < 8 {
                shown += 1;
                let r = &det.record;
                let toks: Vec<String> =
                    sample.instruction.iter().map(|&t| format!("{:>5}", name(t))).collect();
                let row = |v: &[f64]| -> String {
                    v.iter().map(|x| format!("{x:>5.2}")).collect::<Vec<_>>().join("")
                };
                let flags: String = r
                    .flags
                    .iter()
                    .map(|&f| if f { "    X".to_string() } else { "    .".to_string() })
                    .collect();
                println!("  cand {} planted={:?} spans={:?}", sample.id, planted,
                    det.spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>());
                println!("    tok {}", toks.join(""));
                println!("    gT  {}", row(&r.g_hat_teacher[..sample.instruction.len()]));
                println!("    gS  {}", row(&r.g_hat_student[..sample.instruction.len()]));
                println!("    nD  {}", row(&r.norm_delta[..sample.instruction.len()]));
                println!("    flg {flags}");
            }
            if det.spans.is_empty() {
                no_span += 1;
                continue;
            }
            with_span += 1;
            exact_pair +=
                det.spans.iter().any(|sp| planted.contains(&(sp.start, sp.end))) as usize;
            for span in &det.spans {
                if span.end - span.start >= sample.instruction.len() {
                    continue;
                }
                span_len_hist[(span.end - span.start).min(3)] += 1;
                let pruned = prune(&sample.instruction, &[(span.start, span.end)]).unwrap();
                let td = greedy_decode(&teacher, &pruned, sample.response.len(), vocab.stop()).unwrap();
                let t_ok = td[pruned.len()..] == sample.response[..];
                t_pass += t_ok as usize;
                if t_ok {
                    let sd =
                        greedy_decode(&student, &pruned, sample.response.len(), vocab.stop()).unwrap();
                    s_pass += (sd[pruned.len()..] == sample.response[..]) as usize;
                }
            }
        }
        println!(
            "  funnel: no_span {no_span} with_span {with_span} exact_pair {exact_pair} teacher_pass {t_pass} student_pass {s_pass}"
        );
        println!(
            "  oracle pair-prune: n {orc_n} teacher_pass {orc_t} both_pass {orc_both} | span_len_hist(1,2,3+) {:?}",
            &span_len_hist[1..]
        );
    }

    // Pilot: prune detected spans on eval_confounded, re-evaluate student.
    let records: Vec<_> = eval_conf
        .iter()
        .map(|s| {
            compute_attribution(
                &teacher,
                &student,
                &s.tokens(),
                s.instruction.len(),
                s.instruction.len(),
                &s.id,
                0,
                SensitivityNorm::L2,
            )
            .unwrap()
        })
        .collect();
    let base_acc = {
        let mut hits = 0usize;
        for s in &eval_conf {
            let dec = greedy_decode(&student, &s.instruction, s.response.len(), vocab.stop()).unwrap();
            hits += (dec[s.instruction.len()..] == s.response[..]) as usize;
        }
        hits as f64 / eval_conf.len() as f64
    };
    let min_len: usize = arg(11, 2);
    for tau in [0.05, 0.10, 0.15] {
        let mut after = 0usize;
        let (mut tp, mut fl, mut pl) = (0usize, 0usize, 0usize);
        for (s, rec) in eval_conf.iter().zip(&records) {
            let flags = flag_confounders(rec, tau);
            let spans = extract_spans(&flags, min_len);
            let mut truth = vec![false; s.instruction.len()];
            for sp in &s.planted_spans {
                truth[sp.start..sp.end].iter_mut().for_each(|t| *t = true);
            }
            for (i, f) in flags.iter().enumerate() {
                if *f {
                    fl += 1;
                    tp += truth[i] as usize;
                }
            }
            pl += truth.iter().filter(|t| **t).count();
            let cut: usize = spans.iter().map(|(a, b)| b - a).sum();
            let pruned_instr = if spans.is_empty() || cut >= s.instruction.len() {
                s.instruction.clone()
            } else {
                prune(&s.instruction, &spans).unwrap()
            };
            let dec = greedy_decode(&student, &pruned_instr, s.response.len(), vocab.stop()).unwrap();
            after += (dec[pruned_instr.len()..] == s.response[..]) as usize;
        }
        println!(
            "  pilot tau {tau:.2}: before {base_acc:.3} after {:.3} | flag P {:.3} R {:.3}",
            after as f64 / eval_conf.len() as f64,
            tp as f64 / fl.max(1) as f64,
            tp as f64 / pl.max(1) as f64,
        );
    }
    println!("[{:6.1?}] pilot done", t0.elapsed());

    // Distillation race from the CE checkpoint: leaf (lambda 0.5 + cfs) vs
    // pure kd, fixed budget, per-epoch eval tracks.
    let include_wrong = arg(13, 1.0) != 0.0;
    let originals: Vec<_> = if include_wrong {
        student_train.clone()
    } else {
        student_train_samples
            .iter()
            .filter(|s| decodes_gold(&student, s, &vocab).unwrap())
            .map(|s| original_train_sample(s))
            .collect()
    };
    println!("  originals: {} of {}", originals.len(), student_train.len());
    let cf_train: Vec<_> = cfs.iter().map(counterfactual_train_sample).collect();
    let eval_sets = EvalSets { clean: &eval_clean, confounded: &eval_conf, vocab: &vocab };
    let dist_cfg = DistillConfig {
        lambda: 0.5,
        epochs: d_epochs,
        batch_size: 32,
        lr: arg(10, 1e-3),
        split: SplitMode::NoSplit,
        strategy: MaskStrategy::Gradient,
        seed: derive(root, "distill"),
    };
    let mut leaf_student = student.clone();
    let lh = train_distill(&teacher, &mut leaf_student, &originals, &cf_train, &dist_cfg, Some(eval_sets))
        .unwrap();
    println!("[{:6.1?}] leaf distilled", t0.elapsed());
    let mut kd_student = student.clone();
    let kh = train_pure_kd(&teacher, &mut kd_student, &originals, &dist_cfg, Some(eval_sets)).unwrap();
    println!("[{:6.1?}] kd distilled", t0.elapsed());
    for (tag, h) in [("leaf", &lh), ("kd", &kh)] {
        let track: Vec<String> = h
            .iter()
            .map(|e| format!("{:.3}/{:.3}", e.eval_clean_acc.unwrap(), e.eval_confounded_acc.unwrap()))
            .collect();
        println!("  {tag}: L {:.4} [{}]", h.last().unwrap().l, track.join(" "));
    }
    let lc = lh.last().unwrap();
    let kc = kh.last().unwrap();
    println!(
        "  final: leaf clean {:.3} conf {:.3} | kd clean {:.3} conf {:.3} | conf delta {:+.3} clean delta {:+.3}",
        lc.eval_clean_acc.unwrap(),
        lc.eval_confounded_acc.unwrap(),
        kc.eval_clean_acc.unwrap(),
        kc.eval_confounded_acc.unwrap(),
        lc.eval_confounded_acc.unwrap() - kc.eval_confounded_acc.unwrap(),
        lc.eval_clean_acc.unwrap() - kc.eval_clean_acc.unwrap(),
    );
    println!("[{:6.1?}] done (root seed {root})", t0.elapsed());
}
