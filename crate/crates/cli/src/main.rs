//! Pipeline driver: prepare a corpus from templates and a knowledge base,
//! train the copy-augmented (or baseline) translator, generate the
//! out-of-vocabulary test set, and evaluate checkpoints into reports.
//!
//! Every subcommand is deterministic given its inputs and `--seed`: rerunning
//! one produces byte-identical files. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numeric failure during training.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use sparql_nmt::autodiff::AutodiffError;
use sparql_nmt::dataset::{
    self, collect_kb_elements, entries_to_text, intersection_rate, parse_entries,
    parse_templates, split, DatasetEntry, DatasetError, SplitSpec, Template,
};
use sparql_nmt::eval::{self, EvalError, EvalOptions, EvalReport};
use sparql_nmt::kb::{KbError, KnowledgeBase};
use sparql_nmt::model::{ModelConfig, ModelError, TransformerModel};
use sparql_nmt::vocab::{VocabError, VocabPair};

#[derive(Parser)]
#[command(
    name = "sparql-nmt",
    version,
    about = "Translate tagged natural-language questions into SPARQL with a copy-augmented transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a corpus from templates and a knowledge base, split it
    /// 80-10-10, and write train/valid/test files.
    Prepare {
        /// Template file: `id TAB question_pattern TAB query_pattern`.
        #[arg(long)]
        templates: PathBuf,
        /// Knowledge base triple file.
        #[arg(long)]
        kb: PathBuf,
        /// Output directory for train.tsv, valid.tsv, test.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Seed for sampling and splitting.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Number of entries to sample.
        #[arg(long, default_value_t = 2000)]
        entries: usize,
        /// Optional file of URIs (one per line) excluded from sampling,
        /// reserving them for the out-of-vocabulary set.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Fraction of entries assigned to the training split.
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        /// Fraction assigned to the validation split.
        #[arg(long, default_value_t = 0.1)]
        valid_frac: f64,
        /// Fraction assigned to the test split.
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
    },
    /// Build the out-of-vocabulary test set: entries whose bound URIs never
    /// occur in the prepared dataset files.
    OovGen {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Directory holding train/valid/test.tsv; oov.tsv is written here.
        #[arg(long)]
        out: PathBuf,
        /// Number of entries to generate.
        #[arg(long, default_value_t = 250)]
        oov: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model on a prepared dataset directory and write a checkpoint
    /// (plus its vocabulary, next to it with extension `.vocab`).
    Train {
        /// Directory holding train.tsv and valid.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint path; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue training from an existing checkpoint (with its stored
        /// hyperparameters and vocabulary) instead of initializing fresh.
        #[arg(long, conflicts_with_all = ["config", "paper_profile", "baseline"])]
        resume: Option<PathBuf>,
        /// Flat `key = value` file overriding model hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Use the published full-scale hyperparameters (slow on CPU).
        #[arg(long)]
        paper_profile: bool,
        /// Disable the copy layer and put KB elements in the base
        /// vocabulary — the tagged-baseline setting.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on the test (or OOV) split and write a report.
    Evaluate {
        /// Checkpoint path; with --seeds it must contain `{seed}`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding test.tsv / oov.tsv; reports are written here.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Evaluate oov.tsv and suppress answer accuracy (false positives
        /// dominate on sets built around empty-prone unseen elements).
        #[arg(long)]
        oov: bool,
        /// Suppress answer accuracy on the standard split too.
        #[arg(long)]
        no_accuracy: bool,
        /// Evaluate checkpoints for seeds 0..k and report their mean.
        #[arg(long)]
        seeds: Option<usize>,
    },
}

// ---- error-to-exit-code mapping ----------------------------------------------

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::BadFractions(..) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => CliError::Usage(e.to_string()),
            ModelError::Autodiff(AutodiffError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            ModelError::Autodiff(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, content)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

// ---- config file ---------------------------------------------------------------

fn apply_config_file(path: &Path, config: &mut ModelConfig) -> Result<(), CliError> {
    let text = read_file(path)?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected `key = value`, got `{line}`",
                path.display(),
                i + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            CliError::Usage(format!(
                "{}:{}: `{key}` expects {what}, got `{value}`",
                path.display(),
                i + 1
            ))
        };
        match key {
            "layers" => config.layers = value.parse().map_err(|_| bad("an integer"))?,
            "model_dim" => config.model_dim = value.parse().map_err(|_| bad("an integer"))?,
            "heads" => config.heads = value.parse().map_err(|_| bad("an integer"))?,
            "ffn_dim" => config.ffn_dim = value.parse().map_err(|_| bad("an integer"))?,
            "dropout" => config.dropout = value.parse().map_err(|_| bad("a number"))?,
            "learning_rate" => {
                config.learning_rate = value.parse().map_err(|_| bad("a number"))?
            }
            "batch_size" => config.batch_size = value.parse().map_err(|_| bad("an integer"))?,
            "max_len" => config.max_len = value.parse().map_err(|_| bad("an integer"))?,
            _ => {
                return Err(CliError::Usage(format!(
                    "{}:{}: unknown config key `{key}`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(())
}

// ---- subcommands ----------------------------------------------------------------

fn cmd_prepare(
    templates: &Path,
    kb_path: &Path,
    out: &Path,
    seed: u64,
    entries: usize,
    holdout: Option<&Path>,
    fractions: (f64, f64, f64),
) -> Result<(), CliError> {
    let templates = parse_templates(&read_file(templates)?)?;
    let kb = KnowledgeBase::load_triples(&read_file(kb_path)?)?;
    let held: BTreeSet<String> = match holdout {
        Some(path) => read_file(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect(),
        None => BTreeSet::new(),
    };
    let allowed = |uri: &str| !held.contains(uri);
    let corpus = dataset::sample_corpus(&templates, &kb, &allowed, entries, entries * 50, seed)?;
    if corpus.shortfall > 0 {
        println!("warning: sampled {} of {entries} requested entries", corpus.entries.len());
    }
    let spec =
        SplitSpec { train: fractions.0, valid: fractions.1, test: fractions.2, seed };
    let (train, valid, test) = split(&corpus.entries, &spec)?;
    write_file(&out.join("train.tsv"), &entries_to_text(&train))?;
    write_file(&out.join("valid.tsv"), &entries_to_text(&valid))?;
    write_file(&out.join("test.tsv"), &entries_to_text(&test))?;
    let empty = corpus.entries.iter().filter(|e| e.empty_answer).count();
    println!("train {}  valid {}  test {}", train.len(), valid.len(), test.len());
    println!("kb_elements {}", collect_kb_elements(&corpus.entries).len());
    println!("empty_answer_entries {empty}");
    println!("int_rate_valid {:.4}", intersection_rate(&train, &valid));
    println!("int_rate_test {:.4}", intersection_rate(&train, &test));
    Ok(())
}

fn load_split(out: &Path, name: &str) -> Result<Vec<DatasetEntry>, CliError> {
    let path = out.join(name);
    Ok(parse_entries(&read_file(&path)?)?)
}

fn cmd_oov_gen(
    templates: &Path,
    kb_path: &Path,
    out: &Path,
    n: usize,
    seed: u64,
) -> Result<(), CliError> {
    let templates: Vec<Template> = parse_templates(&read_file(templates)?)?;
    let kb = KnowledgeBase::load_triples(&read_file(kb_path)?)?;
    let mut corpus = load_split(out, "train.tsv")?;
    corpus.extend(load_split(out, "valid.tsv")?);
    corpus.extend(load_split(out, "test.tsv")?);
    let seen = collect_kb_elements(&corpus);
    let oov = dataset::generate_oov_set(&templates, &seen, &kb, n, n * 200, seed)?;
    if oov.shortfall > 0 {
        println!("warning: generated {} of {n} requested entries", oov.entries.len());
    }
    write_file(&out.join("oov.tsv"), &entries_to_text(&oov.entries))?;
    let empty = oov.entries.iter().filter(|e| e.empty_answer).count();
    println!("oov_entries {}", oov.entries.len());
    println!("empty_answer_entries {empty}");
    println!("int_rate_oov {:.4}", intersection_rate(&corpus, &oov.entries));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    out: &Path,
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
    config_path: Option<&Path>,
    seed: u64,
    epochs: usize,
    paper_profile: bool,
    baseline: bool,
) -> Result<(), CliError> {
    let train_entries = load_split(out, "train.tsv")?;
    let valid_entries = load_split(out, "valid.tsv")?;

    let (mut model, pair) = match resume {
        Some(path) => {
            let bytes = fs::read(path)
                .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
            let model = TransformerModel::from_checkpoint_bytes(&bytes)?;
            let pair = VocabPair::from_file_string(&read_file(&path.with_extension("vocab"))?)?;
            if pair.cutoff() != model.cutoff {
                return Err(CliError::Data(format!(
                    "vocabulary cutoff {} does not match checkpoint cutoff {}",
                    pair.cutoff(),
                    model.cutoff
                )));
            }
            (model, pair)
        }
        None => {
            let mut config =
                if paper_profile { ModelConfig::paper_profile() } else { ModelConfig::default() };
            if let Some(path) = config_path {
                apply_config_file(path, &mut config)?;
            }
            config.validate()?;
            let pair_iter = || {
                train_entries
                    .iter()
                    .map(|e| (e.tagged_question.as_slice(), e.intermediary_query.as_slice()))
            };
            let pair = if baseline {
                VocabPair::build_baseline(pair_iter())
            } else {
                VocabPair::build(pair_iter())
            };
            let model = TransformerModel::new(config, pair.cutoff(), !baseline, seed)?;
            (model, pair)
        }
    };
    let encoded_train: Vec<(Vec<usize>, Vec<usize>)> =
        train_entries.iter().map(|e| eval::encode_entry(&pair, e)).collect();
    let encoded_valid: Vec<(Vec<usize>, Vec<usize>)> =
        valid_entries.iter().map(|e| eval::encode_entry(&pair, e)).collect();

    println!(
        "model {}  parameters {}  cutoff {}  train {}  valid {}",
        if model.use_copy { "copy" } else { "baseline" },
        model.param_count(),
        pair.cutoff(),
        encoded_train.len(),
        encoded_valid.len()
    );
    model.train(&encoded_train, epochs, seed, |epoch, loss| {
        println!("epoch {epoch}  train_loss {loss:.4}");
    })?;
    if !encoded_valid.is_empty() {
        let valid_loss = model.forward_train(&encoded_valid, None)?;
        println!("valid_loss {valid_loss:.4}");
    }

    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("model.ckpt"));
    if let Some(dir) = ckpt_path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(&ckpt_path, model.to_checkpoint_bytes())
        .map_err(|e| CliError::Data(format!("writing {}: {e}", ckpt_path.display())))?;
    write_file(&ckpt_path.with_extension("vocab"), &pair.to_file_string())?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn evaluate_one(
    checkpoint: &Path,
    entries: &[DatasetEntry],
    kb: &KnowledgeBase,
    options: &EvalOptions,
) -> Result<EvalReport, CliError> {
    let bytes = fs::read(checkpoint)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", checkpoint.display())))?;
    let model = TransformerModel::from_checkpoint_bytes(&bytes)?;
    let vocab_path = checkpoint.with_extension("vocab");
    let mut pair = VocabPair::from_file_string(&read_file(&vocab_path)?)?;
    if pair.cutoff() != model.cutoff {
        return Err(CliError::Data(format!(
            "vocabulary cutoff {} does not match checkpoint cutoff {}",
            pair.cutoff(),
            model.cutoff
        )));
    }
    Ok(eval::evaluate_run(&model, entries, &mut pair, kb, options)?)
}

fn cmd_evaluate(
    checkpoint: &Path,
    out: &Path,
    kb_path: &Path,
    oov: bool,
    no_accuracy: bool,
    seeds: Option<usize>,
) -> Result<(), CliError> {
    let kb = KnowledgeBase::load_triples(&read_file(kb_path)?)?;
    let entries = load_split(out, if oov { "oov.tsv" } else { "test.tsv" })?;
    let options = EvalOptions { compute_accuracy: !(oov || no_accuracy), ..EvalOptions::default() };
    let suffix = if oov { "_oov" } else { "" };

    match seeds {
        None => {
            let report = evaluate_one(checkpoint, &entries, &kb, &options)?;
            let text = format!("{}\n{}", eval::render_summary(&report), eval::render_records(&report));
            let path = out.join(format!("report{suffix}.txt"));
            write_file(&path, &text)?;
            print!("{}", eval::render_summary(&report));
            println!("report {}", path.display());
        }
        Some(k) => {
            let pattern = checkpoint.to_string_lossy();
            if !pattern.contains("{seed}") {
                return Err(CliError::Usage(
                    "--seeds needs a checkpoint path containing `{seed}`".to_string(),
                ));
            }
            let mut reports = Vec::with_capacity(k);
            for s in 0..k {
                let path = PathBuf::from(pattern.replace("{seed}", &s.to_string()));
                let report = evaluate_one(&path, &entries, &kb, &options)?;
                let text =
                    format!("{}\n{}", eval::render_summary(&report), eval::render_records(&report));
                write_file(&out.join(format!("report_seed{s}{suffix}.txt")), &text)?;
                println!("seed {s}  bleu {:.4}  exact_match {:.4}", report.bleu, report.exact_match_rate());
                reports.push(report);
            }
            let agg = eval::aggregate(&reports)?;
            let mut text = String::new();
            text.push_str(&format!("runs                 {}\n", agg.runs));
            text.push_str(&format!("mean_bleu            {:.4}\n", agg.mean_bleu));
            text.push_str(&format!("mean_exact_match     {:.4}\n", agg.mean_exact_match));
            match agg.mean_answer_accuracy {
                Some(a) => text.push_str(&format!("mean_answer_accuracy {a:.4}\n")),
                None => text.push_str("mean_answer_accuracy suppressed\n"),
            }
            write_file(&out.join(format!("report_mean{suffix}.txt")), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare {
            templates,
            kb,
            out,
            seed,
            entries,
            holdout,
            train_frac,
            valid_frac,
            test_frac,
        } => cmd_prepare(
            &templates,
            &kb,
            &out,
            seed,
            entries,
            holdout.as_deref(),
            (train_frac, valid_frac, test_frac),
        ),
        Command::OovGen { templates, kb, out, oov, seed } => {
            cmd_oov_gen(&templates, &kb, &out, oov, seed)
        }
        Command::Train { out, checkpoint, resume, config, seed, epochs, paper_profile, baseline } => {
            cmd_train(
                &out,
                checkpoint.as_deref(),
                resume.as_deref(),
                config.as_deref(),
                seed,
                epochs,
                paper_profile,
                baseline,
            )
        }
        Command::Evaluate { checkpoint, out, kb, oov, no_accuracy, seeds } => {
            cmd_evaluate(&checkpoint, &out, &kb, oov, no_accuracy, seeds)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
