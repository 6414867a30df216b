//! Whole-corpus properties: determinism, structural bounds, answer
//! recoverability, planted-span shape, and eval twin construction.

use std::collections::HashSet;

use leaf_core::corpus::{
    by_split, corpus_stats, expected_answer, generate_corpus, read_corpus, write_corpus,
    CorpusConfig, SpanScope, Split,
};

fn config() -> CorpusConfig {
    CorpusConfig {
        base: 8,
        n_vars: 4,
        n_teacher_train: 60,
        n_student_train: 60,
        n_eval_pairs: 30,
        confounder_rate: 0.5,
        rho: 0.9,
        response_noise_rate: 0.25,
        seed: 1234,
    }
}

#[test]
fn serialized_corpus_is_byte_identical_across_regenerations() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_corpus(&generate_corpus(&config()).unwrap(), &a).unwrap();
    write_corpus(&generate_corpus(&config()).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let reread = read_corpus(&a).unwrap();
    assert_eq!(reread, generate_corpus(&config()).unwrap());
}

#[test]
fn ids_unique_and_tokens_in_vocabulary() {
    let cfg = config();
    let vocab = cfg.vocab().unwrap();
    let corpus = generate_corpus(&cfg).unwrap();
    let ids: HashSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids.len(), corpus.len(), "duplicate sample ids");
    for s in &corpus {
        for &t in s.instruction.iter().chain(&s.response) {
            assert!((t as usize) < vocab.vocab_size(), "token {t} out of vocabulary");
        }
        assert!(
            matches!(s.instruction.len(), 5 | 6 | 7),
            "unexpected instruction length {}",
            s.instruction.len()
        );
        assert!(
            matches!(s.response.len(), 8 | 10),
            "unexpected response length {}",
            s.response.len()
        );
        assert_eq!(*s.response.last().unwrap(), vocab.stop());
    }
}

#[test]
fn answers_recoverable_from_instructions_alone() {
    let cfg = config();
    let vocab = cfg.vocab().unwrap();
    for s in &generate_corpus(&cfg).unwrap() {
        let derived = expected_answer(&vocab, &s.instruction)
            .expect("instruction must determine the answer");
        assert_eq!(derived, s.answer, "sample {}", s.id);
        // The answer digit sits right before the stop token.
        let n = s.response.len();
        assert_eq!(s.response[n - 2], vocab.digit(s.answer), "sample {}", s.id);
    }
}

#[test]
fn planted_spans_cover_exactly_the_irrelevant_tokens() {
    let cfg = config();
    let vocab = cfg.vocab().unwrap();
    for s in &generate_corpus(&cfg).unwrap() {
        for span in &s.planted_spans {
            match span.scope {
                SpanScope::Instruction => {
                    let toks = &s.instruction[span.start..span.end];
                    assert_eq!(toks.len(), 1, "clause span is one bare digit");
                    assert!(vocab.as_digit(toks[0]).is_some(), "sample {}", s.id);
                    // The span sits among the bindings, before the query.
                    let n = s.instruction.len();
                    assert_eq!(s.instruction[n - 3], vocab.query(), "sample {}", s.id);
                    assert!(span.end <= n - 3, "sample {}", s.id);
                }
                SpanScope::Response => {
                    let toks = &s.response[span.start..span.end];
                    assert_eq!(toks.len(), 2, "noise span is digit + separator");
                    assert!(vocab.as_digit(toks[0]).is_some(), "sample {}", s.id);
                    assert_eq!(toks[1], vocab.sep(), "sample {}", s.id);
                }
            }
        }
    }
}

#[test]
fn eval_twins_share_core_and_differ_only_by_clause() {
    let cfg = config();
    let corpus = generate_corpus(&cfg).unwrap();
    let clean = by_split(&corpus, Split::EvalClean);
    let confounded = by_split(&corpus, Split::EvalConfounded);
    assert_eq!(clean.len(), cfg.n_eval_pairs);
    assert_eq!(confounded.len(), cfg.n_eval_pairs);
    for (c, f) in clean.iter().zip(&confounded) {
        assert_eq!(c.id.replace("ec-", ""), f.id.replace("ef-", ""), "twin pairing by index");
        assert_eq!(c.answer, f.answer);
        assert_eq!(c.response, f.response);
        assert!(c.planted_spans.is_empty(), "clean twin carries no clause");
        let span = f.planted_spans.iter().find(|sp| sp.scope == SpanScope::Instruction).unwrap();
        let mut stripped = f.instruction.clone();
        stripped.drain(span.start..span.end);
        assert_eq!(stripped, c.instruction, "twins differ beyond the clause");
    }
}

#[test]
fn stats_match_a_direct_recount() {
    let corpus = generate_corpus(&config()).unwrap();
    let stats = corpus_stats(&corpus);
    assert_eq!(stats.total, corpus.len());
    let confounded_teacher = by_split(&corpus, Split::TeacherTrain)
        .iter()
        .filter(|s| !s.planted_spans.is_empty())
        .count();
    assert_eq!(stats.confounded_counts.teacher_train, confounded_teacher);
    let min = corpus.iter().map(|s| s.instruction.len()).min().unwrap();
    let max = corpus.iter().map(|s| s.instruction.len()).max().unwrap();
    assert_eq!(stats.min_instruction_len, min);
    assert_eq!(stats.max_instruction_len, max);
}
