use std::collections::BTreeMap;

use maskfocus::eval::{bleu, lexicon_prf, probe_recall, Averaging, Lexicon};
use maskfocus::probe::ConceptBank;
use maskfocus::Error;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Straight-line corpus BLEU used as the reference implementation.
fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let count = |t: &[String], n: usize| {
        let mut m: BTreeMap<String, i64> = BTreeMap::new();
        for i in 0..(t.len() + 1).saturating_sub(n) {
            *m.entry(t[i..i + n].join("\u{1}")).or_default() += 1;
        }
        m
    };
    let mut p = [(0i64, 0i64); 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = count(h, n);
            let rc = count(rf, n);
            p[n - 1].0 += hc.iter().map(|(g, k)| (*k).min(*rc.get(g).unwrap_or(&0))).sum::<i64>();
            p[n - 1].1 += hc.values().sum::<i64>();
        }
    }
    if c == 0 || p[0].0 == 0 {
        return 0.0;
    }
    let logs: f64 = p
        .iter()
        .map(|&(m, t)| {
            if m == 0 {
                1.0 / (t + 1) as f64
            } else {
                m as f64 / t as f64
            }
        })
        .map(f64::ln)
        .sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (logs / 4.0).exp()
}

#[test]
fn bleu_of_identical_corpus_is_one() {
    let x = vec![toks("how do i install gparted"), toks("reboot now please")];
    assert_eq!(bleu(&x, &x, 4).unwrap(), 1.0);
}

#[test]
fn bleu_without_overlap_is_zero() {
    assert_eq!(bleu(&[toks("a b c d")], &[toks("w x y z")], 4).unwrap(), 0.0);
}

#[test]
fn bleu_hand_golden() {
    // p = 2/4, 1/3, (0+1)/(2+1), (0+1)/(1+1); equal lengths so no brevity penalty
    let got = bleu(&[toks("a b x y")], &[toks("a b c d")], 4).unwrap();
    let want = (0.5f64 * (1.0 / 3.0) * (1.0 / 3.0) * 0.5).powf(0.25);
    assert!((got - want).abs() <= 1e-9);
    assert!((got - 0.408_248_290_463_863).abs() <= 1e-9);
}

#[test]
fn bleu_brevity_golden() {
    // hypothesis half the reference length: BP = e^{1 - 2}
    let got = bleu(&[toks("a b c d")], &[toks("a b c d e f g h")], 4).unwrap();
    assert!((got - (-1.0f64).exp()).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn bleu_matches_the_oracle(
        pairs in prop::collection::vec(
            (prop::collection::vec("[a-e]", 0..9), prop::collection::vec("[a-e]", 1..9)),
            1..5,
        )
    ) {
        let (hyps, refs): (Vec<Vec<String>>, Vec<Vec<String>>) = pairs.into_iter().unzip();
        let got = bleu(&hyps, &refs, 4).unwrap();
        let want = oracle_bleu(&hyps, &refs);
        prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn lexicon_prf_golden() {
    let lex = Lexicon::new("entity", ["a", "b", "c"]).unwrap();
    for avg in [Averaging::Macro, Averaging::Micro] {
        let s = lexicon_prf(&[toks("a b")], &[toks("b c")], &lex, avg).unwrap();
        assert_eq!(
            (s.aggregate.precision, s.aggregate.recall, s.aggregate.f1),
            (0.5, 0.5, 0.5)
        );
    }
}

#[test]
fn lexicon_prf_skips_pairs_without_gold_words() {
    let lex = Lexicon::new("activity", ["install", "reboot"]).unwrap();
    let hyps = vec![toks("install it"), toks("reboot")];
    let refs = vec![toks("install now"), toks("nothing here")];
    let s = lexicon_prf(&hyps, &refs, &lex, Averaging::Macro).unwrap();
    assert!(s.per_pair[1].is_none());
    assert_eq!(s.aggregate.f1, 1.0);
    let none = lexicon_prf(&[toks("install")], &[toks("nothing")], &lex, Averaging::Macro);
    assert!(matches!(none, Err(Error::NoScorablePairs(_))));
}

#[test]
fn probe_recall_counts_planted_words_in_the_top_k() {
    let mut bank = ConceptBank::new();
    for (w, d) in [("c1", 3.0), ("w7", 2.5), ("c2", 2.0), ("c3", 0.2), ("w1", 0.1)] {
        bank.add(w, d);
    }
    assert_eq!(probe_recall(&bank, &["c1", "c2", "c3"], 3).unwrap(), 2.0 / 3.0);
    assert_eq!(probe_recall(&bank, &["c1", "c2", "c3"], 4).unwrap(), 1.0);
    assert!(probe_recall(&bank, &["c1"], 0).is_err());
}
