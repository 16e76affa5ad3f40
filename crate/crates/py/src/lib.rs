//! Python bindings: metrics, the synthetic corpus, concept banks and the
//! pipeline steps behind the command-line tool.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use maskfocus::config::RunConfig;
use maskfocus::corpus::{synth_generate, SynthSpec};
use maskfocus::eval::{self, Averaging, Lexicon};
use maskfocus::pipeline;
use maskfocus::probe::ConceptBank;
use maskfocus::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Corpus BLEU over tokenized hypotheses and references.
#[pyfunction]
#[pyo3(signature = (hyps, refs, max_n = 4))]
fn bleu(hyps: Vec<Vec<String>>, refs: Vec<Vec<String>>, max_n: usize) -> PyResult<f64> {
    eval::bleu(&hyps, &refs, max_n).map_err(py_err)
}

/// Lexicon precision, recall and F1 as a tuple.
#[pyfunction]
#[pyo3(signature = (hyps, refs, lexicon, averaging = "macro"))]
fn lexicon_prf(
    hyps: Vec<Vec<String>>,
    refs: Vec<Vec<String>>,
    lexicon: Vec<String>,
    averaging: &str,
) -> PyResult<(f64, f64, f64)> {
    let averaging: Averaging = averaging.parse().map_err(py_err)?;
    let lex = Lexicon::new("lexicon", lexicon).map_err(py_err)?;
    let s = eval::lexicon_prf(&hyps, &refs, &lex, averaging).map_err(py_err)?;
    Ok((s.aggregate.precision, s.aggregate.recall, s.aggregate.f1))
}

type SynthOutput = (Vec<String>, Vec<(String, String)>);

/// Synthetic dialogues as JSON lines, plus the concept → response-word map.
#[pyfunction]
#[pyo3(signature = (concepts = 4, noise = 32, dialogues = 2000, seed = 1))]
fn synth_corpus(concepts: usize, noise: usize, dialogues: usize, seed: u64) -> PyResult<SynthOutput> {
    let spec = SynthSpec {
        concepts,
        noise,
        dialogues,
        seed,
        ..SynthSpec::default()
    };
    let (convs, truth) = synth_generate(&spec).map_err(py_err)?;
    let lines = convs
        .iter()
        .map(|c| serde_json::to_string(c).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((lines, truth.concepts.into_iter().collect()))
}

/// Ranked `(word, mean, n)` rows of a concept-bank TSV.
#[pyfunction]
fn load_concept_bank(path: PathBuf) -> PyResult<Vec<(String, f64, u64)>> {
    let bank = ConceptBank::load_tsv(&path).map_err(py_err)?;
    Ok(bank
        .ranked()
        .into_iter()
        .map(|(w, s)| (w.to_string(), s.mean(), s.n))
        .collect())
}

/// Runs one pipeline step (`synth-data`, `prepare-data`, `train-hred`,
/// `probe`, `train-maskfocus`, `evaluate`, `export-concepts`, `experiment`)
/// with the given config keys and returns its JSON summary.
#[pyfunction]
#[pyo3(signature = (command, settings = Vec::new()))]
fn run(py: Python<'_>, command: &str, settings: Vec<(String, String)>) -> PyResult<String> {
    let cfg = RunConfig::resolve(None, &settings).map_err(py_err)?;
    let step: fn(&RunConfig) -> maskfocus::Result<serde_json::Value> = match command {
        "synth-data" => pipeline::synth_data,
        "prepare-data" => pipeline::prepare_data,
        "train-hred" => pipeline::train_hred_cmd,
        "probe" => pipeline::probe_cmd,
        "train-maskfocus" => pipeline::train_focus_cmd,
        "evaluate" => pipeline::evaluate_cmd,
        "export-concepts" => pipeline::export_concepts,
        "experiment" => pipeline::experiment,
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    let summary = py.detach(|| step(&cfg)).map_err(py_err)?;
    Ok(summary.to_string())
}

#[pymodule]
fn maskfocus_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(lexicon_prf, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_concept_bank, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
