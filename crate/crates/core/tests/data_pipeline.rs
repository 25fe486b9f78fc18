use std::collections::BTreeMap;

use hrm_core::data::synthetic::{CopyReverseTask, COPY, EOT, FIRST_SYMBOL, REV, TAG};
use hrm_core::data::{
    pack_example, prepend_condition, pretokenize, read_documents, strip_think, stratified_sample, write_documents,
    DataError, DatasetRule, Document, MixtureSpec, Tokenizer, FIRST_MERGE_ID,
};
use hrm_core::objective::Condition;
use proptest::prelude::*;

fn doc(dataset: &str, task: &str, i: usize) -> Document {
    Document {
        instruction: format!("q{i}"),
        response: format!("a{i}"),
        dataset: dataset.into(),
        task: task.into(),
        condition: Condition::Direct,
    }
}

fn small_tokenizer() -> Tokenizer {
    let corpus = ["the cat sat on the mat", "the dog sat on the log", "Q: what? A: that."];
    Tokenizer::train(&corpus, FIRST_MERGE_ID as usize + 20).unwrap()
}

#[test]
fn strip_think_examples() {
    assert_eq!(strip_think("a<think>x</think>b"), ("ab".to_string(), false));
    assert_eq!(strip_think("plain text"), ("plain text".to_string(), false));
    assert_eq!(strip_think("a<think>x</think>b<think>y</think>c").0, "abc");
    assert_eq!(strip_think("keep<think>never closed"), ("keep".to_string(), true));
    assert_eq!(strip_think("</think>stray").0, "</think>stray");
}

proptest! {
    #[test]
    fn strip_think_idempotent(parts in prop::collection::vec(
        prop_oneof![Just("<think>"), Just("</think>"), Just("ab"), Just("<thi"), Just("nk>"), Just(" ")], 0..12)
    ) {
        let text: String = parts.concat();
        let once = strip_think(&text).0;
        prop_assert_eq!(strip_think(&once).0, once);
    }

    #[test]
    fn tokenizer_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let tok = small_tokenizer();
        let ids = tok.encode_bytes(&bytes);
        prop_assert_eq!(tok.decode_bytes(&ids).unwrap(), bytes);
        prop_assert_eq!(tok.encode_bytes(&tok.decode_bytes(&ids).unwrap()), ids);
    }

    #[test]
    fn caps_hold_and_upsampling_is_exact(n in 1usize..300, cap in 1usize..200, mult in 1usize..4, seed: u64) {
        let docs: Vec<Document> = (0..n).map(|i| doc("ds", "t", i)).collect();
        let mut spec = MixtureSpec { seed, ..Default::default() };
        spec.datasets.insert("ds".into(), DatasetRule { cap: Some(cap), task_cap: None, multiplier: Some(mult) });
        let (out, stats) = stratified_sample(&docs, &spec).unwrap();
        let kept = n.min(cap);
        prop_assert_eq!(stats.strata[0].kept, kept);
        prop_assert_eq!(out.len(), kept * mult);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in &out {
            *counts.entry(d.instruction.clone()).or_default() += 1;
        }
        prop_assert_eq!(counts.len(), kept);
        prop_assert!(counts.values().all(|&c| c == mult));
    }
}

#[test]
fn prepend_condition_examples() {
    let mut d = doc("ds", "t", 0);
    d.instruction = "Q".into();
    assert_eq!(prepend_condition(&d), "<|direct|>Q");
    d.condition = Condition::Noisy;
    assert_eq!(prepend_condition(&d), "<|noisy|>Q");

    let tok = small_tokenizer();
    for c in Condition::ALL {
        d.condition = c;
        let ids = tok.encode(&prepend_condition(&d));
        assert_eq!(ids.len(), 1 + tok.encode("Q").len());
        assert_eq!(ids[0], tok.condition_id(c));
    }
}

#[test]
fn unknown_condition_is_rejected() {
    let line = r#"{"instruction":"q","response":"a","dataset":"d","task":"t","condition":"sarcastic"}"#;
    assert!(matches!(read_documents(line.as_bytes()), Err(DataError::Parse { line: 1, .. })));
    let empty = r#"{"instruction":"q","response":"","dataset":"d","task":"t","condition":"cot"}"#;
    assert!(matches!(read_documents(empty.as_bytes()), Err(DataError::Validation(_))));
}

#[test]
fn corpus_jsonl_round_trip() {
    let docs: Vec<Document> = (0..5).map(|i| doc("ds", "t", i)).collect();
    let mut buf = Vec::new();
    write_documents(&mut buf, &docs).unwrap();
    assert_eq!(read_documents(buf.as_slice()).unwrap(), docs);
}

#[test]
fn bpe_single_candidate_pair() {
    let tok = Tokenizer::train(&["aaaa"], FIRST_MERGE_ID as usize + 1).unwrap();
    assert_eq!(tok.merges(), &[(b'a' as u32, b'a' as u32)]);
    assert_eq!(tok.vocab_size(), FIRST_MERGE_ID as usize + 1);
}

#[test]
fn bpe_matches_hand_trace() {
    // chunks "abab" and " abab"
    // round 1: ab=4, ba=2, " a"=1 -> merge (a,b)
    // round 2: (ab,ab)=2, (" ",ab)=1 -> merge (ab,ab)
    // round 3: (" ",abab)=1 -> merge
    let (a, b, sp) = (b'a' as u32, b'b' as u32, b' ' as u32);
    let m = FIRST_MERGE_ID;
    let tok = Tokenizer::train(&["abab abab"], m as usize + 3).unwrap();
    assert_eq!(tok.merges(), &[(a, b), (m, m), (sp, m + 1)]);
    assert_eq!(tok.encode("abab abab"), vec![m + 1, m + 2]);
    assert!(matches!(
        Tokenizer::train(&["abab abab"], m as usize + 4),
        Err(DataError::Config(_))
    ));
}

#[test]
fn bpe_tie_breaks_lexicographically() {
    // "ab" and "cd" each occur once; (a,b) sorts first
    let tok = Tokenizer::train(&["cd", "ab"], FIRST_MERGE_ID as usize + 1).unwrap();
    assert_eq!(tok.merges()[0], (b'a' as u32, b'b' as u32));
}

#[test]
fn bpe_rejects_small_target() {
    assert!(matches!(Tokenizer::train(&["abc"], 300 - 40), Err(DataError::Config(_))));
    assert!(matches!(Tokenizer::train(&[""], 300), Err(DataError::Config(_))));
}

#[test]
fn bpe_special_ids_and_file_round_trip() {
    let tok = small_tokenizer();
    assert_eq!(tok.special_id("<|pad|>"), Some(256));
    assert_eq!(tok.special_id("<|endoftext|>"), Some(257));
    assert_eq!(tok.condition_id(Condition::Direct), 258);
    assert_eq!(tok.condition_id(Condition::Noisy), 261);
    assert_eq!(tok.encode("x<|endoftext|>")[1..], [257]);
    let text = tok.to_text();
    assert!(text.starts_with("hrm-bpe 1\n"));
    assert_eq!(Tokenizer::from_text(&text).unwrap(), tok);
    assert!(Tokenizer::from_text("hrm-bpe 2\n").is_err());
    let bad = text.replace("vocab_size", "vocab_size 1\nvocab_size");
    assert!(Tokenizer::from_text(&bad).is_err());
}

#[test]
fn pretokenize_splits_before_whitespace_runs() {
    let chunks: Vec<&[u8]> = pretokenize(b"ab  cd\ne");
    assert_eq!(chunks, vec![&b"ab"[..], b"  cd", b"\ne"]);
}

#[test]
fn sampler_cap_and_small_dataset_examples() {
    let mut docs: Vec<Document> = (0..10_000).map(|i| doc("flan", &format!("task{}", i % 2), i)).collect();
    docs.extend((0..100).map(|i| doc("tiny", "only", i)));
    let mut spec = MixtureSpec::default();
    spec.datasets.insert(
        "flan".into(),
        DatasetRule { cap: Some(5_000), ..Default::default() },
    );
    let (out, stats) = stratified_sample(&docs, &spec).unwrap();
    let flan = stats.strata.iter().find(|s| s.key == "flan").unwrap();
    assert_eq!((flan.kept, flan.multiplier, flan.emitted), (5_000, 1, 5_000));
    let tiny = stats.strata.iter().find(|s| s.key == "tiny").unwrap();
    assert_eq!((tiny.kept, tiny.multiplier, tiny.emitted), (100, 10, 1_000));
    assert_eq!(out.iter().filter(|d| d.dataset == "tiny").count(), 1_000);
    assert_eq!(stats.unique_documents, 5_100);
    assert_eq!(stats.emitted_documents, 6_000);
}

#[test]
fn sampler_task_caps_form_strata() {
    let docs: Vec<Document> = (0..300).map(|i| doc("flan", &format!("task{}", i % 3), i)).collect();
    let mut spec = MixtureSpec { small_threshold: 0, ..Default::default() };
    spec.datasets.insert("flan".into(), DatasetRule { task_cap: Some(40), ..Default::default() });
    let (out, stats) = stratified_sample(&docs, &spec).unwrap();
    assert_eq!(stats.strata.len(), 3);
    assert!(stats.strata.iter().all(|s| s.kept == 40 && s.key.starts_with("flan/")));
    assert_eq!(out.len(), 120);
}

#[test]
fn sampler_keeps_everything_without_caps_or_upsampling() {
    let docs: Vec<Document> = (0..50).map(|i| doc("ds", "t", i)).collect();
    let spec = MixtureSpec { small_threshold: 0, ..Default::default() };
    let (out, _) = stratified_sample(&docs, &spec).unwrap();
    let mut names: Vec<_> = out.iter().map(|d| d.instruction.clone()).collect();
    names.sort();
    let mut expected: Vec<_> = docs.iter().map(|d| d.instruction.clone()).collect();
    expected.sort();
    assert_eq!(names, expected);
}

#[test]
fn sampler_is_deterministic_and_seed_sensitive() {
    let docs: Vec<Document> = (0..2_000).map(|i| doc(["a", "b"][i % 2], "t", i)).collect();
    let mut spec = MixtureSpec { seed: 11, ..Default::default() };
    spec.datasets.insert("a".into(), DatasetRule { cap: Some(300), ..Default::default() });
    let bytes = |spec: &MixtureSpec| {
        let mut buf = Vec::new();
        write_documents(&mut buf, &stratified_sample(&docs, spec).unwrap().0).unwrap();
        buf
    };
    assert_eq!(bytes(&spec), bytes(&spec));
    let other = MixtureSpec { seed: 12, ..spec.clone() };
    assert_ne!(bytes(&spec), bytes(&other));
}

#[test]
fn sampler_rejects_missing_labels_and_bad_specs() {
    let mut docs = vec![doc("ds", "t", 0)];
    docs[0].task.clear();
    assert!(matches!(
        stratified_sample(&docs, &MixtureSpec::default()),
        Err(DataError::Validation(_))
    ));
    let mut spec = MixtureSpec::default();
    spec.datasets.insert("ds".into(), DatasetRule { multiplier: Some(0), ..Default::default() });
    assert!(matches!(spec.validate(), Err(DataError::Config(_))));
}

#[test]
fn pack_example_rules() {
    let tok = small_tokenizer();
    let mut d = doc("ds", "t", 0);
    d.instruction.clear();
    d.response = "the cat".into();
    let resp = tok.encode("the cat");
    let full = 1 + resp.len() + 1;

    let p = pack_example(&d, &tok, 64).unwrap();
    assert_eq!(p.example.prefix_len, 1);
    assert_eq!(p.example.response_tokens(), resp.len() + 1);
    assert_eq!(*p.example.token_ids.last().unwrap(), tok.eot_id());
    assert!(!p.truncated);

    let exact = pack_example(&d, &tok, full).unwrap();
    assert!(!exact.truncated);
    assert_eq!(exact.example.len(), full);

    d.instruction = "what?".into();
    let prefix = tok.encode(&prepend_condition(&d)).len();
    let cut = pack_example(&d, &tok, prefix + 1).unwrap();
    assert!(cut.truncated);
    assert_eq!(cut.example.prefix_len, prefix);
    assert_eq!(cut.example.len(), prefix + 1);
    assert!(matches!(
        pack_example(&d, &tok, prefix),
        Err(DataError::InstructionTooLong { .. })
    ));
}

#[test]
fn copy_reverse_layout() {
    let task = CopyReverseTask::default();
    let s = [FIRST_SYMBOL, FIRST_SYMBOL + 2, FIRST_SYMBOL + 1];
    let ex = task.build(&s, true);
    assert_eq!(ex.token_ids, vec![TAG, s[0], s[1], s[2], REV, s[2], s[1], s[0], EOT]);
    assert_eq!(ex.prefix_len, 5);
    let ex = task.build(&s, false);
    assert_eq!(ex.token_ids[4], COPY);
    assert_eq!(&ex.token_ids[5..8], &s);
    assert_eq!(task.dataset(3, 20), task.dataset(3, 20));
    assert!(task.dataset(3, 50).iter().all(|e| e.len() <= task.max_seq_len()));
}
