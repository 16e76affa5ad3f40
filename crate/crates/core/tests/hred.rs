use maskfocus::corpus::{build_vocab, extract_all_pairs, synth_generate, SynthSpec, TokenId, AGENT, EOS};
use maskfocus::hred::{train_hred, Hred, HredConfig};
use maskfocus::numerics::gradcheck::{grad_check, GradCheckConfig};
use maskfocus::numerics::AdamConfig;
use maskfocus::train::TrainConfig;
use proptest::prelude::*;

fn tiny(v: usize) -> HredConfig {
    HredConfig {
        embed_dim: 3,
        utt_hidden: 3,
        ctx_hidden: 4,
        dec_hidden: 4,
        max_response_len: 4,
        vocab_size: v,
    }
}

fn all_sequences(v: usize, len: usize) -> Vec<Vec<TokenId>> {
    (0..len).fold(vec![Vec::new()], |acc, _| {
        acc.into_iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect()
    })
}

#[test]
fn fixed_length_responses_are_normalised() {
    for v in 6..=8 {
        let m = Hred::new(tiny(v), v as u64).unwrap();
        let ctx = vec![vec![4, 5], vec![v - 1]];
        for len in 1..=2 {
            let total: f64 = all_sequences(v, len)
                .iter()
                .map(|r| m.log_prob_response(&ctx, r).unwrap().0.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "V={v} len={len}: {total}");
        }
    }
}

#[test]
fn eos_terminated_tree_is_normalised() {
    // responses ending at EOS within two steps plus every unfinished prefix of length two
    let v = 7;
    let m = Hred::new(tiny(v), 1).unwrap();
    let ctx = vec![vec![4, 6, 5]];
    let mut total = m.log_prob_response(&ctx, &[EOS]).unwrap().0.exp();
    for a in (0..v).filter(|&t| t != EOS) {
        for b in 0..v {
            total += m.log_prob_response(&ctx, &[a, b]).unwrap().0.exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn next_token_distribution_matches_scoring(
        seed in 0u64..500,
        ctx in prop::collection::vec(prop::collection::vec(4usize..8, 1..4), 1..3),
        prefix in prop::collection::vec(3usize..8, 0..3),
    ) {
        let m = Hred::new(tiny(8), seed).unwrap();
        let p = m.next_token_probs(&ctx, &prefix).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (y, &py) in p.iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(y);
            let (_, per) = m.log_prob_response(&ctx, &seq).unwrap();
            prop_assert!((per[prefix.len()].exp() - py).abs() < 1e-12);
        }
    }
}

#[test]
fn hred_gradients_match_finite_differences() {
    let m = Hred::new(tiny(9), 2).unwrap();
    let ctx = vec![vec![4, 5, 6], vec![8], vec![7, 4]];
    let resp = vec![5, 8, EOS];
    let report = grad_check(
        m.params(),
        |tape| m.nll(tape, &ctx, &resp),
        &GradCheckConfig {
            samples_per_tensor: 40,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn training_lowers_loss_on_fifty_pairs() {
    let (convs, _) = synth_generate(&SynthSpec {
        dialogues: 60,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = build_vocab(&convs, 1000);
    let pairs = extract_all_pairs(&convs, &vocab, Some(AGENT));
    let cfg = TrainConfig {
        adam: AdamConfig::with_lr(1e-2),
        max_epochs: 5,
        patience: 5,
        ..TrainConfig::default()
    };
    let dims = HredConfig {
        embed_dim: 8,
        utt_hidden: 8,
        ctx_hidden: 8,
        dec_hidden: 8,
        max_response_len: 8,
        vocab_size: vocab.len(),
    };
    let (m, log) = train_hred(&pairs[..50], &pairs[50..], &dims, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 5);
    assert!(log.final_train_loss().unwrap() < log.initial_train_loss);
    assert!(m.mean_nll(&pairs[..50]).unwrap() < log.initial_train_loss);

    let (again, _) = train_hred(&pairs[..50], &pairs[50..], &dims, &cfg).unwrap();
    assert_eq!(m.params(), again.params());
}

#[test]
fn overfits_a_handful_of_pairs() {
    let (convs, _) = synth_generate(&SynthSpec {
        dialogues: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = build_vocab(&convs, 1000);
    let pairs = extract_all_pairs(&convs, &vocab, Some(AGENT));
    let dims = HredConfig {
        embed_dim: 16,
        utt_hidden: 16,
        ctx_hidden: 16,
        dec_hidden: 24,
        max_response_len: 8,
        vocab_size: vocab.len(),
    };
    let cfg = TrainConfig {
        adam: AdamConfig::with_lr(1e-2),
        batch_size: 2,
        max_epochs: 300,
        patience: 300,
        seed: 4,
    };
    let (m, _) = train_hred(&pairs, &pairs, &dims, &cfg).unwrap();
    for p in &pairs {
        let g = m.generate_response(&p.context, 8).unwrap();
        assert_eq!(g, p.response[..p.response.len() - 1], "{}", p.conversation_id);
    }
}
