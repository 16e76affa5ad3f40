//! One pass/fail line per primary acceptance criterion.
//!
//! The criteria run sequentially inside a single test so that the timed ones
//! get the whole core. Every tolerance is a named constant below.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use maskfocus::checkpoint::Checkpoint;
use maskfocus::config::RunConfig;
use maskfocus::corpus::{GroundTruth, TokenId};
use maskfocus::eval::{bleu, lexicon_prf, probe_recall, Averaging, Lexicon};
use maskfocus::focus::{FocusConfig, FocusModel, QWeights};
use maskfocus::hred::{Hred, HredConfig};
use maskfocus::numerics::gradcheck::{grad_check, GradCheckConfig};
use maskfocus::pipeline::{
    evaluate_models, experiment, prepare_data, probe_step, synth_data, train_focus_step, train_hred_step, Dataset,
    BANK_FILE, CORPUS_FILE, DATASET_FILE, FOCUS_FILE, HRED_FILE, TRUTH_FILE,
};
use maskfocus::probe::{pmi_word, ConceptBank, ResponseScorer};
use maskfocus::rng::{stream, Component};
use maskfocus::Result;
use rand::RngExt;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const NORM_TOLERANCE: f64 = 1e-9;
const ELBO_INSTANCES: u64 = 24;
const ELBO_SLACK: f64 = 1e-6;
const PMI_TOLERANCE: f64 = 1e-9;
const RECALL_FLOOR: f64 = 0.75;
const RECOVERY_BUDGET: Duration = Duration::from_secs(15 * 60);
const LOW_RESOURCE_BUDGET: Duration = Duration::from_secs(30 * 60);
const Q_CASES: u64 = 1000;
const BLEU_TOLERANCE: f64 = 1e-9;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ln_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let dims = HredConfig::preset("small", 40).unwrap();
    let ctx = vec![vec![4, 5, 6, 7], vec![8, 4, 30]];
    let z_c = vec![vec![5, 7], vec![8]];
    let resp = vec![6, 8, 5, 20, 3];
    let q = QWeights::new(vec![0.3, 0.0, 0.8, 0.1, 0.0]).unwrap();
    let z_r = vec![6, 5];
    let cfg = GradCheckConfig {
        step: GRAD_STEP,
        tolerance: GRAD_TOLERANCE,
        ..GradCheckConfig::default()
    };
    let hred = Hred::new(dims.clone(), 1).unwrap();
    let h = grad_check(hred.params(), |tape| hred.nll(tape, &ctx, &resp), &cfg).unwrap();
    let focus = FocusModel::new(FocusConfig::new(dims), 1).unwrap();
    let f = grad_check(
        focus.params(),
        |tape| {
            let (c, r) = focus.loss_vars(tape, &ctx, &z_c, &resp, &q, &z_r)?;
            tape.add(c, r)
        },
        &cfg,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = h.failures().chain(f.failures()).map(|p| p.name.clone()).collect();
    let all_tensors = h.params.len() == hred.params().len() && f.params.len() == focus.params().len();
    outcome(
        failed.is_empty() && all_tensors && elapsed < GRAD_BUDGET,
        format!(
            "hred max rel {:.2e} over {} tensors, focus max rel {:.2e} over {} tensors, failed {:?}, {:.1}s",
            h.max_rel_error(),
            h.params.len(),
            f.max_rel_error(),
            f.params.len(),
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for v in 6..=8usize {
        let m = Hred::new(
            HredConfig {
                embed_dim: 4,
                utt_hidden: 4,
                ctx_hidden: 5,
                dec_hidden: 5,
                max_response_len: 4,
                vocab_size: v,
            },
            v as u64,
        )
        .unwrap();
        let ctx = vec![vec![4, 5], vec![v - 1, 4]];
        for len in 1..=2u32 {
            let total: f64 = (0..v.pow(len))
                .map(|code| {
                    let r: Vec<TokenId> = (0..len).map(|i| code / v.pow(i) % v).collect();
                    m.log_prob_response(&ctx, &r).unwrap().0.exp()
                })
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    outcome(worst <= NORM_TOLERANCE, format!("max |Σp − 1| = {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = stream(3, Component::Validation);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for inst in 0..ELBO_INSTANCES {
        let m = FocusModel::new(
            FocusConfig::new(HredConfig {
                embed_dim: 3,
                utt_hidden: 3,
                ctx_hidden: 4,
                dec_hidden: 4,
                max_response_len: 6,
                vocab_size: 8,
            }),
            500 + inst,
        )
        .unwrap();
        let ctx: Vec<Vec<TokenId>> = (0..rng.random_range(1..3usize))
            .map(|_| {
                (0..rng.random_range(2..5usize))
                    .map(|_| rng.random_range(4..8))
                    .collect()
            })
            .collect();
        let z_c: Vec<Vec<TokenId>> = ctx
            .iter()
            .map(|u| u.iter().copied().filter(|&t| t % 2 == 0).collect())
            .collect();
        let r: Vec<TokenId> = (0..4).map(|_| rng.random_range(3..8)).collect();
        let q: Vec<f64> = (0..4)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    rng.random_range(0.01..0.99)
                }
            })
            .collect();
        let elbo = m.elbo(&ctx, &z_c, &r, &QWeights::new(q).unwrap()).unwrap();
        let log_pi = m.concept_log_probs(&ctx, &z_c, &r).unwrap();
        let joint: Vec<f64> = (0u32..16)
            .map(|bits| {
                let z: Vec<TokenId> = (0..4).filter(|i| bits >> i & 1 == 1).map(|i| r[i]).collect();
                let lz: f64 = (0..4).filter(|i| bits >> i & 1 == 1).map(|i| log_pi[i]).sum();
                lz + m.response_log_probs(&ctx, &z_c, &z, &r).unwrap().iter().sum::<f64>()
            })
            .collect();
        let marginal = ln_sum_exp(&joint);
        if elbo > marginal + ELBO_SLACK * marginal.abs() {
            violations += 1;
        }
        tightest = tightest.min(marginal - elbo);
    }
    outcome(
        violations == 0,
        format!("{ELBO_INSTANCES} instances, {violations} violations, smallest gap {tightest:.3e}"),
    )
}

struct Table;

impl ResponseScorer for Table {
    fn score(&self, context: &[Vec<TokenId>], _: &[TokenId]) -> Result<f64> {
        Ok(if context.iter().flatten().any(|&t| t == 4) {
            0.9f64
        } else {
            0.1
        }
        .ln())
    }
}

fn criterion_4() -> Outcome {
    let ctx = vec![vec![4, 5], vec![6, 4]];
    let r = [7, 3];
    let hit = pmi_word(&Table, &ctx, &r, 4).unwrap();
    let absent = [
        pmi_word(&Table, &ctx, &r, 5).unwrap(),
        pmi_word(&Table, &ctx, &r, 9).unwrap(),
    ];
    let err = (hit - 9f64.ln()).abs();
    outcome(
        err <= PMI_TOLERANCE && absent == [0.0, 0.0],
        format!("pmi {hit:.12} (err {err:.1e}), non-predictive/absent {absent:?}"),
    )
}

fn base_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::preset("small").unwrap();
    cfg.seed = 1;
    cfg.out = Some(out.to_path_buf());
    cfg
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(dir.path());
    cfg.synth_concepts = 4;
    cfg.synth_dialogues = 2000;
    cfg.max_epochs = 15;
    cfg.probe_mode = "single".into();
    synth_data(&cfg).unwrap();
    cfg.data = Some(dir.path().join(CORPUS_FILE));
    prepare_data(&cfg).unwrap();
    let ds = Dataset::load(&dir.path().join(DATASET_FILE)).unwrap();
    let truth = GroundTruth::load(&dir.path().join(TRUTH_FILE)).unwrap();
    let (hred, _) = train_hred_step(&cfg, &ds).unwrap();
    let (bank, _) = probe_step(&cfg, &ds, &hred).unwrap();
    let recall = probe_recall(&bank, &truth.context_concepts(), 4).unwrap();
    let elapsed = start.elapsed();
    outcome(
        recall >= RECALL_FLOOR && elapsed < RECOVERY_BUDGET,
        format!(
            "recall@4 = {recall} (top {:?}), {:.0}s",
            bank.top_k(4),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(dir.path());
    cfg.synth_concepts = 24;
    cfg.synth_noise = 64;
    cfg.synth_dialogues = 2400;
    cfg.max_epochs = 15;
    synth_data(&cfg).unwrap();
    cfg.data = Some(dir.path().join(CORPUS_FILE));
    prepare_data(&cfg).unwrap();
    let ds = Dataset::load(&dir.path().join(DATASET_FILE)).unwrap();
    let mut rows = BTreeMap::new();
    for n in [500usize, 2000] {
        let mut run = cfg.clone();
        run.train_size = Some(n);
        run.out = Some(dir.path().join(format!("n{n}")));
        let (hred, _) = train_hred_step(&run, &ds).unwrap();
        let (bank, _) = probe_step(&run, &ds, &hred).unwrap();
        let (focus, _) = train_focus_step(&run, &ds, &bank, None).unwrap();
        let eval = evaluate_models(&run, &ds, Some(&hred), Some((&focus, &bank)), None).unwrap();
        let (h, f) = (
            eval.aggregate("hred.bleu").unwrap(),
            eval.aggregate("focus.bleu").unwrap(),
        );
        report(&format!("    {n} pairs: hred {h:.4}, focus {f:.4}, gap {:+.4}", f - h));
        rows.insert(n, (h, f));
    }
    let elapsed = start.elapsed();
    let gap = |n: usize| rows[&n].1 - rows[&n].0;
    outcome(
        rows[&500].1 > rows[&500].0 && gap(500) >= gap(2000) && elapsed < LOW_RESOURCE_BUDGET,
        format!(
            "gap(500) {:+.4}, gap(2000) {:+.4}, {:.0}s",
            gap(500),
            gap(2000),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = stream(7, Component::Validation);
    let mut failures = 0;
    let unit = QWeights::from_pmi(&[1.0]).as_slice()[0] == 0.5;
    for case in 0..Q_CASES {
        let m = FocusModel::new(
            FocusConfig::new(HredConfig {
                embed_dim: 3,
                utt_hidden: 3,
                ctx_hidden: 3,
                dec_hidden: 3,
                max_response_len: 6,
                vocab_size: 9,
            }),
            case,
        )
        .unwrap();
        let ctx: Vec<Vec<TokenId>> = (0..rng.random_range(1..4usize))
            .map(|_| {
                (0..rng.random_range(1..5usize))
                    .map(|_| rng.random_range(4..9))
                    .collect()
            })
            .collect();
        let r: Vec<TokenId> = (0..rng.random_range(1..5usize))
            .map(|_| rng.random_range(3..9))
            .collect();
        let z_c: Vec<Vec<TokenId>> = ctx
            .iter()
            .map(|u| u.iter().copied().filter(|&t| t < 7).collect())
            .collect();
        let empty = vec![Vec::new(); ctx.len()];
        let q = m.compute_q(&ctx, &z_c, &r).unwrap();
        let q0 = m.compute_q(&ctx, &empty, &r).unwrap();
        let pmi: Vec<f64> = (0..r.len()).map(|_| rng.random_range(-5.0..50.0)).collect();
        let stub = QWeights::from_pmi(&pmi);
        let in_range = q
            .as_slice()
            .iter()
            .chain(stub.as_slice())
            .all(|x| (0.0..1.0).contains(x));
        let vanishes = q0.as_slice().iter().all(|&x| x == 0.0);
        if !(in_range && vanishes) {
            failures += 1;
        }
    }
    outcome(
        unit && failures == 0,
        format!("{Q_CASES} cases, {failures} failures, q(PMI=1) = 0.5: {unit}"),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&path).unwrap(),
        );
    }
    files
}

fn criterion_8() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &runs {
        let mut cfg = base_config(d.path());
        cfg.seed = 5;
        (cfg.embed_dim, cfg.utt_hidden, cfg.ctx_hidden, cfg.dec_hidden) = (6, 6, 6, 6);
        cfg.max_epochs = 2;
        cfg.synth_dialogues = 150;
        cfg.valid_size = 20;
        cfg.test_size = 20;
        cfg.probe_min_count = 1;
        experiment(&cfg).unwrap();
    }
    let (a, b) = (tree(runs[0].path()), tree(runs[1].path()));
    let same_artifacts = a.len() > 5 && a == b;

    let mut checkpoints_stable = true;
    for name in [HRED_FILE, FOCUS_FILE] {
        let bytes = &a[name];
        let resaved = Checkpoint::from_bytes(bytes, Path::new(name))
            .unwrap()
            .to_bytes()
            .unwrap();
        checkpoints_stable &= &resaved == bytes;
    }
    let text = String::from_utf8(a[BANK_FILE].clone()).unwrap();
    let tsv_exact = ConceptBank::parse_tsv(&text, Path::new(BANK_FILE)).unwrap().to_tsv() == text;
    outcome(
        same_artifacts && checkpoints_stable && tsv_exact,
        format!(
            "{} artifacts identical across runs: {same_artifacts}; checkpoint resave identical: {checkpoints_stable}; TSV exact: {tsv_exact}",
            a.len()
        ),
    )
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn criterion_9() -> Outcome {
    let x = vec![
        words("my wifi drops after suspend"),
        words("try reinstalling the driver"),
    ];
    let identity = bleu(&x, &x, 4).unwrap();
    let zero = bleu(&[words("a b c d")], &[words("e f g h")], 4).unwrap();
    let golden = bleu(&[words("a b x y")], &[words("a b c d")], 4).unwrap();
    let want = (1.0f64 / 36.0).powf(0.25);
    let lex = Lexicon::new("lex", ["a", "b", "c"]).unwrap();
    let prf = lexicon_prf(&[words("a b")], &[words("b c")], &lex, Averaging::Macro)
        .unwrap()
        .aggregate;
    let prf = (prf.precision, prf.recall, prf.f1);
    outcome(
        identity == 1.0 && zero == 0.0 && (golden - want).abs() <= BLEU_TOLERANCE && prf == (0.5, 0.5, 0.5),
        format!("BLEU(x,x) {identity}, disjoint {zero}, golden {golden:.12} vs {want:.12}, prf {prf:?}"),
    )
}

/// Writes straight to stderr so the lines survive libtest's output capture.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "{line}").expect("stderr");
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", criterion_1),
        ("normalisation oracle", criterion_2),
        ("ELBO bound oracle", criterion_3),
        ("probe exactness", criterion_4),
        ("synthetic concept recovery", criterion_5),
        ("low-resource direction", criterion_6),
        ("q properties", criterion_7),
        ("determinism and persistence", criterion_8),
        ("metric correctness", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        report(&format!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
