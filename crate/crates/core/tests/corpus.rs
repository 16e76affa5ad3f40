use std::collections::BTreeMap;

use maskfocus::corpus::{
    build_vocab, extract_all_pairs, load_jsonl, save_jsonl, split_pairs, synth_generate, tokenize, Conversation,
    SynthSpec, Turn, AGENT, EOS, UNK,
};
use maskfocus::Error;
use proptest::prelude::*;

/// Dialogues mentioning each planted concept, counted straight from the text.
fn concept_counts(convs: &[Conversation], k: usize) -> Vec<usize> {
    (1..=k)
        .map(|i| {
            let w = format!("c{i}");
            convs
                .iter()
                .filter(|c| c.turns.iter().any(|t| tokenize(&t.text).contains(&w)))
                .count()
        })
        .collect()
}

#[test]
fn synthetic_concept_counts() {
    let (convs, truth) = synth_generate(&SynthSpec {
        concepts: 4,
        dialogues: 100,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let counts = concept_counts(&convs, 4);
    assert!(counts.iter().all(|&n| n >= 10), "{counts:?}");
    assert_eq!(counts, SYNTH_COUNTS.to_vec());
    let expected: BTreeMap<String, String> = (1..=4).map(|i| (format!("c{i}"), format!("r{i}"))).collect();
    assert_eq!(truth.concepts, expected);
    assert_eq!(truth.seed, 1);
}

#[test]
fn responses_are_determined_by_planted_concepts() {
    let (convs, truth) = synth_generate(&SynthSpec {
        concepts: 10,
        noise: 20,
        dialogues: 200,
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut seen: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
    for c in &convs {
        let (resp, ctx) = c.turns.split_last().unwrap();
        let planted: Vec<String> = ctx
            .iter()
            .flat_map(|t| tokenize(&t.text))
            .filter(|w| truth.concepts.contains_key(w))
            .collect();
        let words = tokenize(&resp.text);
        let prev = seen.insert(planted.clone(), words.clone());
        if let Some(prev) = prev {
            assert_eq!(prev, words);
        }
        for w in &planted {
            assert!(words.contains(&truth.concepts[w]));
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SynthSpec {
            concepts: 0,
            ..SynthSpec::default()
        },
        SynthSpec {
            concepts: 40,
            noise: 10,
            ..SynthSpec::default()
        },
    ] {
        assert!(matches!(synth_generate(&spec), Err(Error::Data(_))));
    }
}

#[test]
fn jsonl_round_trip_and_errors() {
    let (convs, _) = synth_generate(&SynthSpec {
        dialogues: 25,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_jsonl(&path, &convs).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), convs);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\": \"a\", \"turns\": [{\"speaker\": \"u\", \"text\": \"hi\"}]}\n{\"id\": \"b\"}\n",
    )
    .unwrap();
    match load_jsonl(&bad) {
        Err(Error::MissingField { line, field, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(field, "turns");
        }
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&bad, "not json\n").unwrap();
    assert!(matches!(load_jsonl(&bad), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn splits_are_seeded_and_disjoint() {
    let (convs, _) = synth_generate(&SynthSpec {
        dialogues: 60,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = build_vocab(&convs, 1000);
    let pairs = extract_all_pairs(&convs, &vocab, Some(AGENT));
    assert_eq!(pairs.len(), 60);
    assert!(pairs.iter().all(|p| p.response.last() == Some(&EOS)));
    let a = split_pairs(pairs.clone(), 10, 5, 3).unwrap();
    assert_eq!(a, split_pairs(pairs.clone(), 10, 5, 3).unwrap());
    assert_ne!(a.train, split_pairs(pairs.clone(), 10, 5, 4).unwrap().train);
    assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (45, 10, 5));
    let mut ids: Vec<&str> = a
        .train
        .iter()
        .chain(&a.valid)
        .chain(&a.test)
        .map(|p| p.conversation_id.as_str())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 60);
    assert!(matches!(split_pairs(pairs, 30, 30, 1), Err(Error::EmptyDataset(_))));
}

#[test]
fn vocabulary_cap_maps_rare_words_to_unk() {
    let conv = Conversation {
        id: "x".into(),
        turns: vec![
            Turn {
                speaker: "user".into(),
                text: "a a a b b c".into(),
            },
            Turn {
                speaker: "agent".into(),
                text: "a c".into(),
            },
        ],
    };
    let vocab = build_vocab(std::slice::from_ref(&conv), 6);
    assert_eq!(vocab.len(), 6);
    assert_eq!(vocab.encode(&["a", "c", "zzz"]), vec![vocab.id("a"), UNK, UNK]);
}

proptest! {
    #[test]
    fn tokenize_is_idempotent_on_its_output(text in "[a-zA-Z0-9 .,!?'()-]{0,40}") {
        let once = tokenize(&text);
        let again = tokenize(&once.join(" "));
        prop_assert_eq!(&again, &once);
        prop_assert!(once.iter().all(|t| !t.is_empty() && !t.contains(' ')));
        prop_assert!(once.iter().all(|t| *t == t.to_lowercase()));
    }
}

const SYNTH_COUNTS: [usize; 4] = [63, 46, 49, 54];
