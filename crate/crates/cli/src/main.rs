//! Command-line front end.
//!
//! Subcommands: `gen-data` (synthetic corpus), `train` (sentence
//! reconstruction), `infer` (caption concept files), `eval` (CIDEr-D/BLEU),
//! and `grad-check` (finite-difference verification of the autodiff engine).

mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use semrel_core::concepts::{load_image_concepts, ImageConceptRecord};
use semrel_core::config::{Mode, TrainConfig};
use semrel_core::gradcheck;
use semrel_core::metrics::{build_idf, cider_d, corpus_bleu, DEFAULT_SIGMA};
use semrel_core::synth::{gen_synthetic_corpus, CorpusSplit, SentenceRecord};
use semrel_core::text::normalize;
use semrel_core::trainer::{generate_caption, tokens_to_words, train, CorpusExample, TrainInput};

#[derive(Parser)]
#[command(name = "semrel", version, about = "Caption generation from semantic concept sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Coarse,
    Fine,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Coarse => Mode::Coarse,
            ModeArg::Fine => Mode::Fine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Dimensions from the reference configuration (e = 512, d = 512, ...).
    Paper,
    /// Small dimensions for fast single-core runs (e = 64, d = 64, ...).
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus with concept annotations.
    GenData(GenDataArgs),
    /// Train a captioner by reconstructing sentences from their concepts.
    Train(TrainArgs),
    /// Caption precomputed image-concept records with a trained checkpoint.
    Infer(InferArgs),
    /// Score candidate captions against references (CIDEr-D, BLEU-1..4).
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generation seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of sentences (>= 2; split 80/20).
    #[arg(long, default_value_t = 50)]
    size: usize,
    /// Output directory for corpus.jsonl, concepts.jsonl, lexicon.tsv, split.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file: one {"id", "sentence"} JSON object per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Category lexicon: "word<TAB>category" per line.
    #[arg(long, default_value = "data/category_lexicon.tsv")]
    lexicon: PathBuf,
    /// Optional split file; held-out examples are evaluated each epoch.
    #[arg(long)]
    split: Option<PathBuf>,
    /// JSON config file overriding preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base dimension preset.
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Relationship explorer variant.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_xe: Option<usize>,
    #[arg(long)]
    epochs_rl: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Checkpoint output path.
    #[arg(long, default_value = "checkpoint.bin")]
    out: PathBuf,
    /// Training log path (line-delimited JSON); defaults to <out>.log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Image-concept file: {"id", "concepts": [{word, category, score}]} per line.
    #[arg(long)]
    concepts: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Maximum caption length; defaults to the checkpoint's setting.
    #[arg(long)]
    max_len: Option<usize>,
    /// Must match the checkpoint's explorer mode when given.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output captions file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Candidate captions: {"id", "caption"} per line.
    #[arg(long)]
    candidates: PathBuf,
    /// References: {"id", "sentence"} per line, multiple lines per id allowed.
    #[arg(long)]
    references: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Number of random seeds per operation.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    caption: String,
}

#[derive(Serialize)]
struct EvalReport {
    bleu1: f64,
    bleu2: f64,
    bleu3: f64,
    bleu4: f64,
    cider: f64,
    n: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::GradCheck(args) => return run_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let corpus = gen_synthetic_corpus(args.seed, args.size)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    io::write_jsonl(&args.out.join("corpus.jsonl"), &corpus.sentences)?;
    io::write_jsonl(&args.out.join("concepts.jsonl"), &corpus.concepts)?;
    io::write_lexicon(&args.out.join("lexicon.tsv"), &corpus.lexicon)?;
    let split_json = serde_json::to_string_pretty(&corpus.split)?;
    std::fs::write(args.out.join("split.json"), split_json + "\n")?;
    eprintln!(
        "wrote {} sentences ({} train / {} held-out) to {}",
        corpus.sentences.len(),
        corpus.split.train.len(),
        corpus.split.heldout.len(),
        args.out.display()
    );
    Ok(())
}

/// Group per-sentence records into per-id examples, preserving first-seen
/// order.
fn group_examples(records: &[SentenceRecord]) -> Vec<CorpusExample> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut examples: Vec<CorpusExample> = Vec::new();
    for rec in records {
        let tokens = normalize(&rec.sentence);
        match index.get(rec.id.as_str()) {
            Some(&i) => examples[i].sentences.push(tokens),
            None => {
                index.insert(&rec.id, examples.len());
                examples.push(CorpusExample { id: rec.id.clone(), sentences: vec![tokens] });
            }
        }
    }
    examples
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match args.preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    if let Some(path) = &args.config {
        io::read_config_overlay(path)?.apply(&mut cfg);
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    macro_rules! flag {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    flag!(seed, epochs_xe, epochs_rl, batch_size, learning_rate, max_len);
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let records: Vec<SentenceRecord> = io::read_jsonl(&args.corpus)?;
    let lexicon = io::read_lexicon(&args.lexicon)?;
    let examples = group_examples(&records);

    let (train_set, heldout_set) = match &args.split {
        Some(path) => {
            let data = std::fs::read_to_string(path)
                .with_context(|| format!("reading split {}", path.display()))?;
            let split: CorpusSplit = serde_json::from_str(&data)
                .with_context(|| format!("parsing split {}", path.display()))?;
            partition_examples(examples, &split)?
        }
        None => (examples, Vec::new()),
    };

    let input = TrainInput { train: &train_set, heldout: &heldout_set, lexicon: &lexicon };
    let output = train(&input, &cfg).map_err(|e| anyhow::anyhow!("{e}"))?;

    for entry in &output.log {
        match entry.cider {
            Some(c) => eprintln!(
                "epoch {:>3} [{:?}] loss {:.6} heldout-cider {:.4}",
                entry.epoch, entry.phase, entry.loss, c
            ),
            None => eprintln!("epoch {:>3} [{:?}] loss {:.6}", entry.epoch, entry.phase, entry.loss),
        }
    }

    io::save_checkpoint(&output.checkpoint, &args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    io::write_jsonl(&log_path, &output.log)?;
    eprintln!("checkpoint: {}", args.out.display());
    eprintln!("log: {}", log_path.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn partition_examples(
    examples: Vec<CorpusExample>,
    split: &CorpusSplit,
) -> Result<(Vec<CorpusExample>, Vec<CorpusExample>)> {
    let train_ids: BTreeMap<&str, ()> = split.train.iter().map(|s| (s.as_str(), ())).collect();
    let heldout_ids: BTreeMap<&str, ()> = split.heldout.iter().map(|s| (s.as_str(), ())).collect();
    let mut train_set = Vec::new();
    let mut heldout_set = Vec::new();
    for ex in examples {
        if train_ids.contains_key(ex.id.as_str()) {
            train_set.push(ex);
        } else if heldout_ids.contains_key(ex.id.as_str()) {
            heldout_set.push(ex);
        } else {
            bail!("corpus id '{}' is not listed in the split file", ex.id);
        }
    }
    Ok((train_set, heldout_set))
}

fn run_infer(args: InferArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&args.checkpoint)?;
    if let Some(mode) = args.mode {
        let mode: Mode = mode.into();
        if mode != ckpt.config.mode {
            bail!(
                "requested mode {mode} but the checkpoint was trained in {} mode",
                ckpt.config.mode
            );
        }
    }
    let max_len = args.max_len.unwrap_or(ckpt.config.max_len);
    let records: Vec<ImageConceptRecord> = io::read_jsonl(&args.concepts)?;
    let mut captions = Vec::with_capacity(records.len());
    for record in &records {
        let set = load_image_concepts(record, &ckpt.vocab, ckpt.config.n_gmax)
            .map_err(|e| anyhow::anyhow!("record '{}': {e}", record.id))?;
        let tokens = generate_caption(&ckpt.params, &ckpt.config, &set, args.beam, max_len)
            .map_err(|e| anyhow::anyhow!("record '{}': {e}", record.id))?;
        let caption = tokens_to_words(&tokens, &ckpt.vocab).join(" ");
        captions.push(CaptionRecord { id: record.id.clone(), caption });
    }
    match &args.out {
        Some(path) => io::write_jsonl(path, &captions)?,
        None => {
            let mut stdout = String::new();
            for c in &captions {
                stdout.push_str(&serde_json::to_string(c)?);
                stdout.push('\n');
            }
            print!("{stdout}");
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let candidates: Vec<CaptionRecord> = io::read_jsonl(&args.candidates)?;
    let references: Vec<SentenceRecord> = io::read_jsonl(&args.references)?;
    let mut grouped: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for rec in &references {
        grouped
            .entry(rec.id.as_str())
            .or_default()
            .push(normalize(&rec.sentence));
    }
    let idf = build_idf(&grouped.values().cloned().collect::<Vec<_>>())
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut cand_tokens = Vec::with_capacity(candidates.len());
    let mut ref_groups = Vec::with_capacity(candidates.len());
    let mut cider_sum = 0.0;
    for cand in &candidates {
        let refs = grouped
            .get(cand.id.as_str())
            .with_context(|| format!("candidate id '{}' has no references", cand.id))?;
        let tokens = normalize(&cand.caption);
        cider_sum += cider_d(&tokens, refs, &idf, DEFAULT_SIGMA);
        cand_tokens.push(tokens);
        ref_groups.push(refs.clone());
    }
    let n = candidates.len();
    let bleu = corpus_bleu(&cand_tokens, &ref_groups);
    let report = EvalReport {
        bleu1: bleu[0],
        bleu2: bleu[1],
        bleu3: bleu[2],
        bleu4: bleu[3],
        cider: if n > 0 { cider_sum / n as f64 } else { 0.0 },
        n,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_grad_check(args: GradCheckArgs) -> ExitCode {
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut ok = true;
    for report in gradcheck::run_suite(&seeds) {
        let status = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {:<24} max_rel_err {:.3e} (tol {:.0e}, {} seeds)",
            report.name,
            report.max_rel_err,
            gradcheck::GRAD_REL_TOL,
            seeds.len()
        );
        ok &= report.passed();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
