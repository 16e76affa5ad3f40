use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use maskfocus::chat::{ChatEvent, ChatSession};
use maskfocus::checkpoint::Checkpoint;
use maskfocus::config::RunConfig;
use maskfocus::pipeline;
use maskfocus::probe::ConceptBank;
use maskfocus::Error;

#[derive(Parser, Debug)]
#[command(name = "maskfocus", version, about = "Concept-aware conversation modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["small", "techsupport", "ubuntu"])]
    preset: Option<String>,
    /// Input corpus (JSONL) or prepared dataset, depending on the command.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use only the first N training pairs.
    #[arg(long, global = true)]
    train_size: Option<usize>,
    /// Baseline checkpoint.
    #[arg(long, global = true)]
    hred: Option<PathBuf>,
    /// Concept-model checkpoint.
    #[arg(long, global = true)]
    focus: Option<PathBuf>,
    /// Concept bank TSV.
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
    /// Ground-truth sidecar of a synthetic corpus.
    #[arg(long, global = true)]
    truth: Option<PathBuf>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic planted-concept corpus and its truth file.
    SynthData,
    /// Tokenize a corpus, build the vocabulary and split the pairs.
    PrepareData,
    /// Train the hierarchical baseline.
    TrainHred,
    /// Build the concept bank by masking context words.
    Probe,
    /// Train the concept-aware model.
    TrainMaskfocus,
    /// Score test-set generations.
    Evaluate,
    /// Talk to a trained concept-aware model.
    Chat,
    /// Re-threshold a bank and list per-pair context concepts.
    ExportConcepts,
    /// Run the whole pipeline.
    Experiment,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const CONTRACT: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::NonDeterministic(_) => CONTRACT,
        Error::UnknownKey(_) | Error::InvalidValue { .. } | Error::MissingPath(_) => USAGE,
        _ => DATA,
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (k, v) in [
        ("preset", cli.preset.clone()),
        ("seed", cli.seed.map(|s| s.to_string())),
        ("data", path(&cli.data)),
        ("out", path(&cli.out)),
        ("train_size", cli.train_size.map(|n| n.to_string())),
        ("hred_checkpoint", path(&cli.hred)),
        ("focus_checkpoint", path(&cli.focus)),
        ("bank", path(&cli.bank)),
        ("truth", path(&cli.truth)),
    ] {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    Ok(out)
}

fn chat(cfg: &RunConfig) -> maskfocus::Result<()> {
    let (model, vocab) = match &cfg.focus_checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (Some(ck.to_focus()?), ck.header.vocab)
        }
        None => return Err(Error::MissingPath("focus_checkpoint".into())),
    };
    let bank = match &cfg.bank {
        Some(p) => ConceptBank::load_tsv(p)?.token_set(&vocab),
        None => Default::default(),
    };
    let mut session = ChatSession::new(model, vocab, bank, cfg.context_turns);
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    write!(stdout, "> ")?;
    stdout.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            write!(stdout, "> ")?;
            stdout.flush()?;
            continue;
        }
        match session.step(&line)? {
            ChatEvent::Reset => writeln!(stdout, "(history cleared)")?,
            ChatEvent::Reply(turn) => writeln!(stdout, "{}", turn.display)?,
        }
        write!(stdout, "> ")?;
        stdout.flush()?;
    }
    writeln!(stdout)?;
    Ok(())
}

fn run(command: Command, cfg: &RunConfig) -> maskfocus::Result<Option<serde_json::Value>> {
    let summary = match command {
        Command::SynthData => pipeline::synth_data(cfg)?,
        Command::PrepareData => pipeline::prepare_data(cfg)?,
        Command::TrainHred => pipeline::train_hred_cmd(cfg)?,
        Command::Probe => pipeline::probe_cmd(cfg)?,
        Command::TrainMaskfocus => pipeline::train_focus_cmd(cfg)?,
        Command::Evaluate => pipeline::evaluate_cmd(cfg)?,
        Command::ExportConcepts => pipeline::export_concepts(cfg)?,
        Command::Experiment => pipeline::experiment(cfg)?,
        Command::Chat => {
            chat(cfg)?;
            return Ok(None);
        }
    };
    Ok(Some(summary))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let overrides = match overrides(&cli) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(USAGE);
        }
    };
    let cfg = match RunConfig::resolve(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    info!("resolved configuration:\n{}", cfg.render());

    match run(cli.command, &cfg) {
        Ok(Some(summary)) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
