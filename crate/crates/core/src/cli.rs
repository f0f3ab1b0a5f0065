//! Command-line front end.
//!
//! Every subcommand flag can also come from a flat `key = value` config
//! file (`--config FILE`, or the path in `CONDAUG_CONFIG`). Keys are long
//! flag names without dashes, optionally qualified by subcommand
//! (`train.k = 2000`). Unqualified keys apply to every subcommand that has
//! that flag. Flags given on the command line win over the file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::augmenter::{
    augment_corpus_with, AugmentationConfig, GeneratedCorpora, Seq2SeqAugmenter, StartPolicy,
};
use crate::baselines::{
    train_infill, train_prefix_lm, IndepMaskAugmenter, InfillModel, PrefixAugmenter,
    SynonymAugmenter, Thesaurus, PREFIX_KIND,
};
use crate::corpus::{serialize_conll, Corpus, Grammar};
use crate::error::{Error, Result};
use crate::eval::{
    corpus_bleu, fluency_ppl, mean_std, run_experiment, train_fluency_lm, train_tagger,
    ExperimentConfig, StrategyData, TaggerConfig, FLUENCY_KIND,
};
use crate::lm::TokenLm;
use crate::nn::{content_hash, Checkpoint};
use crate::seq2seq::{ModelConfig, Seq2SeqModel};
use crate::trainer::{continue_training, train, TrainConfig, TrainState};

pub const CONFIG_ENV: &str = "CONDAUG_CONFIG";

const BUILTIN_GRAMMAR: &str = include_str!("../../../data/templates/reviews.tpl");

#[derive(Debug, Parser)]
#[command(
    name = "condaug",
    version,
    about = "Label-preserving data augmentation for BIO-tagged corpora"
)]
pub struct Cli {
    /// Flat `key = value` config file; defaults to $CONDAUG_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for data-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic review corpus and write train/dev/test splits.
    GenCorpus(GenCorpusArgs),
    /// Train an augmentation, baseline or fluency model.
    Train(TrainArgs),
    /// Augment a corpus with one strategy.
    Augment(AugmentArgs),
    /// Sweep the mask proportion: tagger F1 and BLEU of doubled data per r.
    Evaluate(EvaluateArgs),
    /// Tagger span scores for augmentation strategies and multipliers.
    Compare(CompareArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenCorpusArgs {
    /// Grammar file; the bundled laptop-review grammar when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total number of sentences.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// train,dev,test proportions.
    #[arg(long, default_value = "70,15,15")]
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Seq2seq,
    IndepMask,
    PrefixLm,
    FluencyLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Training corpus (CoNLL TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Seq2seq)]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Hold out the last N corpus sentences for validation.
    #[arg(long, default_value_t = 150)]
    pub holdout: usize,
    /// Separate validation corpus; replaces --holdout.
    #[arg(long)]
    pub holdout_file: Option<PathBuf>,
    /// Training iterations.
    #[arg(long, default_value_t = 2000)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Mask proportion.
    #[arg(long, default_value_t = 0.5)]
    pub r: f64,
    #[arg(long, default_value_t = 100)]
    pub validation_interval: usize,
    /// Linear learning-rate warmup iterations.
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero and freeze the label embeddings (seq2seq only).
    #[arg(long)]
    pub no_label_embeddings: bool,
    /// Continue from <out>/state.ckpt when present (seq2seq only).
    #[arg(long)]
    pub resume: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Seq2seq,
    Synonym,
    IndepMask,
    PrefixLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StartKind {
    Even,
    Random,
    List,
}

#[derive(Debug, clap::Args)]
pub struct AugmentArgs {
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Corpus to augment.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model checkpoint (seq2seq, indep-mask, prefix-lm).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Synonym file, one `word<TAB>syn1,syn2` per line (synonym).
    #[arg(long)]
    pub thesaurus: Option<PathBuf>,
    /// Mask proportion (seq2seq) or replaced/masked fraction (synonym, indep-mask).
    #[arg(long, default_value_t = 0.5)]
    pub r: f64,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Generated corpora; defaults to 4 for seq2seq and 1 otherwise.
    #[arg(long)]
    pub variants: Option<usize>,
    #[arg(long, value_enum, default_value_t = StartKind::Even)]
    pub start_policy: StartKind,
    /// Comma-separated 1-based starts for --start-policy list.
    #[arg(long)]
    pub starts: Option<String>,
    /// Keep duplicate variants of a sentence.
    #[arg(long)]
    pub no_dedup: bool,
    /// Drop variants identical to their source.
    #[arg(long)]
    pub forbid_identical: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Source training corpus.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Seq2seq checkpoint used to augment.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mask proportions as start:end:step.
    #[arg(long, default_value = "0.5:0.5:0.1")]
    pub sweep_r: String,
    /// Number of tagger seeds (0..N).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Tagger training epochs.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Fluency model checkpoint.
    #[arg(long)]
    pub fluency: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// `name=file1,file2,...` generated corpora of one strategy; comma-separated
    /// entries separated by `;` or repeated flags.
    #[arg(long = "generated", value_delimiter = ';')]
    pub generated: Vec<String>,
    #[arg(long, default_value = "1,2")]
    pub multipliers: String,
    /// Number of tagger seeds (0..N).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Fluency model checkpoint.
    #[arg(long)]
    pub fluency: Option<PathBuf>,
    /// Output CSV; a summary table is printed.
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Reads a flat config file into `(section, key, value)` triples.
pub fn parse_config(text: &str) -> Result<Vec<(Option<String>, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"').to_string();
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (Some(s.to_string()), k.to_string()),
            None => (None, key),
        };
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((section, key, value));
    }
    Ok(out)
}

fn cli_command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Inserts config-file arguments right after the subcommand name so that
/// command-line flags, which come later, take precedence.
fn merge_config(args: Vec<OsString>, config_path: &Path) -> CliResult<Vec<OsString>> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        usage(format!(
            "cannot read config `{}`: {e}",
            config_path.display()
        ))
    })?;
    let entries =
        parse_config(&text).map_err(|e| usage(format!("{}: {e}", config_path.display())))?;
    let cmd = cli_command();
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    let Some(pos) = args
        .iter()
        .skip(1)
        .position(|a| names.iter().any(|n| a.to_str() == Some(n)))
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let name = args[pos].to_str().expect("matched a name").to_string();
    let sub = cmd.find_subcommand(&name).expect("known subcommand");
    let mut extra: Vec<OsString> = Vec::new();
    for (section, key, value) in entries {
        if let Some(s) = &section {
            if !names.contains(s) {
                return Err(usage(format!("config: unknown subcommand `{s}`")));
            }
            if *s != name {
                continue;
            }
        }
        if key == "config" || key == "jobs" {
            continue;
        }
        let Some(arg) = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
        else {
            if section.is_some()
                || !cmd.get_subcommands().any(|s| {
                    s.get_arguments()
                        .any(|a| a.get_long() == Some(key.as_str()))
                })
            {
                return Err(usage(format!("config: unknown key `{key}`")));
            }
            continue;
        };
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => extra.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                _ => return Err(usage(format!("config: `{key}` expects true or false"))),
            }
        } else {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        }
    }
    let mut merged = args[..=pos].to_vec();
    merged.extend(extra);
    merged.extend(args[pos + 1..].iter().cloned());
    Ok(merged)
}

fn parse_args(args: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let matches = cli_command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_args(args.clone()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cli = match config_path {
        Some(path) => {
            let merged = match merge_config(args, &path) {
                Ok(m) => m,
                Err(e) => return report(e),
            };
            match parse_args(merged) {
                Ok(cli) => cli,
                Err(e) => {
                    let _ = e.print();
                    return ExitCode::from(2);
                }
            }
        }
        None => cli,
    };
    if cli.jobs == 0 {
        return report(usage("--jobs must be at least 1"));
    }
    // A second initialization (e.g. several runs in one process) keeps the
    // existing pool, which only affects speed.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        CliError::Runtime(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Augment(a) => cmd_augment(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("invalid {what} `{p}`")))
        })
        .collect()
}

/// Splits `n` by integer proportions; the last part takes the remainder.
pub fn split_counts(n: usize, parts: &[usize]) -> Vec<usize> {
    let total: usize = parts.iter().sum();
    let mut counts: Vec<usize> = parts.iter().map(|p| n * p / total).collect();
    let assigned: usize = counts[..counts.len() - 1].iter().sum();
    *counts.last_mut().expect("non-empty") = n - assigned;
    counts
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> CliResult<()> {
    let (grammar, template) = match &a.template {
        Some(path) => {
            require(path, "template")?;
            (Grammar::from_file(path)?, path.display().to_string())
        }
        None => (
            Grammar::parse(BUILTIN_GRAMMAR)?,
            "builtin:reviews".to_string(),
        ),
    };
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let parts: Vec<usize> = parse_list(&a.split, "split")?;
    if parts.len() != 3 || parts.iter().sum::<usize>() == 0 {
        return Err(usage(
            "--split needs three non-negative integers, e.g. 70,15,15",
        ));
    }
    let corpus = grammar.generate(a.seed, a.n);
    let counts = split_counts(a.n, &parts);
    create_dir(&a.out)?;
    let mut files = Vec::new();
    let mut start = 0;
    for (name, count) in ["train", "dev", "test"].iter().zip(&counts) {
        let part = Corpus::new(*name, corpus.sentences[start..start + count].to_vec());
        start += count;
        let text = serialize_conll(&part);
        let file = format!("{name}.tsv");
        write_file(&a.out.join(&file), &text)?;
        files.push(json!({"split": name, "file": file, "sentences": count, "hash": content_hash(text.as_bytes())}));
    }
    let manifest = json!({
        "template": template,
        "seed": a.seed,
        "n": a.n,
        "split": parts,
        "files": files,
    });
    write_file(
        &a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n",
    )?;
    println!("wrote {} sentences to {}", a.n, a.out.display());
    Ok(())
}

fn model_config(preset: Preset, corpus: &Corpus, holdout: &Corpus) -> ModelConfig {
    let max_positions = 64.max(corpus.max_len()).max(holdout.max_len());
    match preset {
        Preset::Desk => ModelConfig::desk(0, max_positions),
        Preset::Paper => ModelConfig::paper(0, max_positions),
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    require(&a.corpus, "corpus")?;
    if let Some(h) = &a.holdout_file {
        require(h, "holdout file")?;
    }
    let full = Corpus::read(&a.corpus)?;
    let (corpus, holdout) = match &a.holdout_file {
        Some(h) => (full, Corpus::read(h)?),
        None => {
            if a.holdout >= full.len() {
                return Err(usage(format!(
                    "--holdout {} leaves no training sentences out of {}",
                    a.holdout,
                    full.len()
                )));
            }
            let cut = full.len() - a.holdout;
            (
                Corpus::new(full.name.clone(), full.sentences[..cut].to_vec()),
                Corpus::new(
                    format!("{}-holdout", full.name),
                    full.sentences[cut..].to_vec(),
                ),
            )
        }
    };
    let config = TrainConfig {
        iterations: a.k,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        warmup_iterations: a.warmup,
        validation_interval: a.validation_interval,
        mask_proportion: a.r,
        rng_seed: a.seed,
        checkpoint_dir: Some(a.out.clone()),
        ..Default::default()
    };
    config.validate()?;
    let model_config = ModelConfig {
        label_embeddings: !a.no_label_embeddings,
        param_seed: a.seed,
        ..model_config(a.preset, &corpus, &holdout)
    };
    create_dir(&a.out)?;
    match a.model {
        ModelKind::Seq2seq => {
            let state_path = a.out.join("state.ckpt");
            let outcome = if a.resume && state_path.exists() {
                let state = TrainState::from_checkpoint(&Checkpoint::load(&state_path)?)?;
                continue_training(state, &corpus, &config, &holdout)?
            } else {
                train(&corpus, model_config, &config, &holdout)?
            };
            if let Some(last) = outcome.log.records.last() {
                println!(
                    "iteration {}: loss {:.4}, validation perplexity {:.3}",
                    last.iteration, last.loss, last.val_ppl
                );
            }
            println!("checkpoint {}", a.out.join("final.ckpt").display());
        }
        other => {
            let ck = match other {
                ModelKind::IndepMask => {
                    train_infill(&corpus, model_config, &config)?.to_checkpoint()
                }
                ModelKind::PrefixLm => {
                    train_prefix_lm(&corpus, model_config, &config)?.to_checkpoint()
                }
                ModelKind::FluencyLm => {
                    train_fluency_lm(&corpus, model_config, &config)?.to_checkpoint()
                }
                ModelKind::Seq2seq => unreachable!("handled above"),
            };
            let path = a.out.join("final.ckpt");
            let hash = ck.save(&path)?;
            println!("checkpoint {} ({hash})", path.display());
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Option<PathBuf>, strategy: &str) -> CliResult<Checkpoint> {
    let path = path.as_ref().ok_or_else(|| {
        usage(format!(
            "--checkpoint is required for --strategy {strategy}"
        ))
    })?;
    require(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

pub fn cmd_augment(a: &AugmentArgs) -> CliResult<()> {
    require(&a.corpus, "corpus")?;
    let corpus = Corpus::read(&a.corpus)?;
    let variants = a.variants.unwrap_or(if a.strategy == Strategy::Seq2seq {
        4
    } else {
        1
    });
    if variants == 0 {
        return Err(usage("--variants must be at least 1"));
    }
    let generated: GeneratedCorpora = match a.strategy {
        Strategy::Seq2seq => {
            let ck = load_checkpoint(&a.checkpoint, "seq2seq")?;
            let model = Seq2SeqModel::from_checkpoint(&ck)?;
            let start_policy = match a.start_policy {
                StartKind::Even => StartPolicy::EvenlySpaced,
                StartKind::Random => StartPolicy::SeededRandom,
                StartKind::List => StartPolicy::Explicit(parse_list(
                    a.starts
                        .as_deref()
                        .ok_or_else(|| usage("--start-policy list needs --starts"))?,
                    "start",
                )?),
            };
            let config = AugmentationConfig {
                r: a.r,
                beam_size: a.beam,
                variants,
                start_policy,
                dedup: !a.no_dedup,
                forbid_identical: a.forbid_identical,
                seed: a.seed,
            };
            let augmenter = Seq2SeqAugmenter::new(&model, config)?;
            augment_corpus_with(&augmenter, &corpus, variants)?
        }
        Strategy::Synonym => {
            let path = a
                .thesaurus
                .as_ref()
                .ok_or_else(|| usage("--thesaurus is required for --strategy synonym"))?;
            require(path, "thesaurus")?;
            let thesaurus = Thesaurus::from_file(path)?;
            if !(0.0..=1.0).contains(&a.r) {
                return Err(usage("--r must lie in [0, 1]"));
            }
            let augmenter = SynonymAugmenter {
                thesaurus: &thesaurus,
                replace_fraction: a.r,
                variants,
                seed: a.seed,
            };
            augment_corpus_with(&augmenter, &corpus, variants)?
        }
        Strategy::IndepMask => {
            let model =
                InfillModel::from_checkpoint(&load_checkpoint(&a.checkpoint, "indep-mask")?)?;
            let augmenter = IndepMaskAugmenter::new(&model, a.r, variants, a.seed)?;
            augment_corpus_with(&augmenter, &corpus, variants)?
        }
        Strategy::PrefixLm => {
            let model = TokenLm::from_checkpoint(
                PREFIX_KIND,
                &load_checkpoint(&a.checkpoint, "prefix-lm")?,
            )?;
            if a.beam == 0 {
                return Err(usage("--beam must be at least 1"));
            }
            let augmenter = PrefixAugmenter::new(&model, a.beam);
            augment_corpus_with(&augmenter, &corpus, variants)?
        }
    };
    let stem = a
        .corpus
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    let paths = generated.write(&a.out, &stem)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Parses `start:end:step` into the inclusive list of values.
pub fn parse_sweep(sweep: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<f64> = sweep
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("invalid sweep `{sweep}`")))
        })
        .collect::<CliResult<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(usage(format!("sweep `{sweep}` must be start:end:step")));
    };
    if step.is_nan() || step <= 0.0 || end < start {
        return Err(usage(format!(
            "sweep `{sweep}` needs step > 0 and end >= start"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn tagger_config(epochs: usize) -> TaggerConfig {
    TaggerConfig {
        epochs,
        ..TaggerConfig::desk(0)
    }
}

fn read_splits(train: &Path, dev: &Path, test: &Path) -> CliResult<(Corpus, Corpus, Corpus)> {
    require(train, "training corpus")?;
    require(dev, "dev corpus")?;
    require(test, "test corpus")?;
    Ok((
        Corpus::read(train)?,
        Corpus::read(dev)?,
        Corpus::read(test)?,
    ))
}

fn load_fluency(path: &Option<PathBuf>) -> CliResult<Option<TokenLm>> {
    match path {
        Some(p) => {
            require(p, "fluency checkpoint")?;
            Ok(Some(TokenLm::from_checkpoint(
                FLUENCY_KIND,
                &Checkpoint::load(p)?,
            )?))
        }
        None => Ok(None),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let (source, dev, test) = read_splits(&a.train, &a.dev, &a.test)?;
    require(&a.checkpoint, "checkpoint")?;
    let rs = parse_sweep(&a.sweep_r)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let model = Seq2SeqModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let fluency = load_fluency(&a.fluency)?;
    let mut csv = String::from("r,precision,recall,f1,bleu,fluency\n");
    for r in rs {
        let config = AugmentationConfig {
            r,
            beam_size: a.beam,
            variants: 1,
            ..Default::default()
        };
        let augmenter = Seq2SeqAugmenter::new(&model, config)?;
        let generated = augment_corpus_with(&augmenter, &source, 1)?
            .corpora
            .remove(0);
        let bleu = corpus_bleu(&generated, &source, 4)?;
        let flu = match &fluency {
            Some(lm) => fluency_ppl(lm, &generated)?,
            None => f64::NAN,
        };
        let mut doubled = source.clone();
        doubled
            .sentences
            .extend(generated.sentences.iter().cloned());
        let mut scores = Vec::new();
        for seed in 0..a.seeds {
            let tc = TaggerConfig {
                seed,
                model: ModelConfig {
                    param_seed: seed,
                    ..tagger_config(a.epochs).model
                },
                ..tagger_config(a.epochs)
            };
            scores.push(train_tagger(&doubled, &dev, &tc)?.evaluate(&test)?);
        }
        let avg =
            |f: fn(&crate::eval::Prf) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>()).0;
        let line = format!(
            "{r},{:.6},{:.6},{:.6},{:.4},{:.4}\n",
            avg(|p| p.precision),
            avg(|p| p.recall),
            avg(|p| p.f1),
            bleu,
            flu
        );
        print!("{line}");
        csv.push_str(&line);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, csv)
}

fn parse_generated(entry: &str) -> CliResult<(String, Vec<PathBuf>)> {
    let (name, files) = entry.split_once('=').ok_or_else(|| {
        usage(format!(
            "--generated `{entry}` must be name=file1,file2,..."
        ))
    })?;
    let files: Vec<PathBuf> = files
        .split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(PathBuf::from)
        .collect();
    if name.trim().is_empty() || files.is_empty() {
        return Err(usage(format!(
            "--generated `{entry}` needs a name and files"
        )));
    }
    Ok((name.trim().to_string(), files))
}

pub fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    if a.generated.is_empty() {
        return Err(usage("at least one --generated strategy is required"));
    }
    let (source, dev, test) = read_splits(&a.train, &a.dev, &a.test)?;
    let multipliers: Vec<usize> = parse_list(&a.multipliers, "multiplier")?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut strategies = Vec::new();
    for entry in &a.generated {
        let (name, files) = parse_generated(entry)?;
        let mut generated = Vec::new();
        for f in files {
            require(&f, "generated corpus")?;
            let c = Corpus::read(&f)?;
            if c.len() != source.len() {
                return Err(usage(format!(
                    "`{}` has {} sentences, the source has {}",
                    f.display(),
                    c.len(),
                    source.len()
                )));
            }
            generated.push(c);
        }
        if let Some(&m) = multipliers
            .iter()
            .find(|&&m| m == 0 || m - 1 > generated.len())
        {
            return Err(usage(format!(
                "multiplier {m} needs {} generated corpora for `{name}`",
                m.saturating_sub(1)
            )));
        }
        strategies.push(StrategyData { name, generated });
    }
    let fluency = load_fluency(&a.fluency)?;
    let config = ExperimentConfig {
        multipliers,
        seeds: (0..a.seeds).collect(),
        tagger: tagger_config(a.epochs),
    };
    let report = run_experiment(&source, &dev, &test, &strategies, &config, fluency.as_ref())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, report.to_csv())?;
    print!("{}", report.summary());
    Ok(())
}
