//! Command-line entry points.
//!
//! Failures print a single `error: <kind>: <message>` line on stderr and
//! exit with status 1; usage errors exit with status 2.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{detokenize, load_dataset, split_pairs, EncodedPair, Format, ParaphrasePair, Tokenizer, Vocabulary};
use crate::decode::{beam_search, DecodeConfig};
use crate::error::{Error, Result};
use crate::inspect::inspect;
use crate::metrics::{evaluate, score_record, EvalRecord, DEFAULT_IBLEU_ALPHA};
use crate::model::Model;
use crate::train::{train_loop, Control, TrainOutput};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Parser)]
#[command(
    name = "gaformer",
    version,
    about = "Granularity-aware transformer for paraphrase generation"
)]
pub struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, vocabulary and a metrics log.
    Train(TrainArgs),
    /// Paraphrase input lines with beam search.
    Generate(GenerateArgs),
    /// Score candidates against references and sources.
    Eval(EvalArgs),
    /// Show per-layer granularity scores for one sentence.
    Inspect(InspectArgs),
    /// Time granularity-aware against plain attention.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// One sentence per line; stdin when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = crate::decode::DEFAULT_BEAM_SIZE)]
    pub beam: usize,
    /// Candidates per input to print.
    #[arg(long, default_value_t = 1)]
    pub top: usize,
    /// Defaults to the model's `max_len`.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub length_alpha: f64,
    #[arg(long)]
    pub wordpiece: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// One line per candidate; several references may be TAB-separated.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub sources: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IBLEU_ALPHA)]
    pub alpha: f64,
    /// Also write sentence-level scores as JSON lines.
    #[arg(long)]
    pub per_record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    pub sentence: String,
    /// Where to write the JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Print scores instead of colors.
    #[arg(long, conflicts_with = "color")]
    pub plain: bool,
    /// Force colors even when stdout is not a terminal.
    #[arg(long)]
    pub color: bool,
    #[arg(long)]
    pub wordpiece: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model keys of a flat config file; defaults to the full-size model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 8000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command, &mut io::stdout().lock()) {
        Ok(()) => 0,
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let msg = msg.trim_start_matches(&format!("{}: ", prefix_of(&e))).to_string();
            eprintln!("error: {}: {msg}", e.kind());
            1
        }
    }
}

/// The leading words `Display` puts before the message proper.
fn prefix_of(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "invalid config",
        Error::Input(_) => "invalid input",
        Error::Data(_) => "data error",
        Error::Checkpoint(_) => "checkpoint error",
        Error::Json(_) => "json error",
        _ => "",
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
    }
}

fn stdout_error(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out).map_err(stdout_error)
}

fn tokenizer_for(wordpiece: Option<&Path>) -> Result<Tokenizer> {
    match wordpiece {
        Some(p) => Tokenizer::wordpiece_from_file(p),
        None => Ok(Tokenizer::Basic),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    output_dir: PathBuf,
    steps: u64,
    final_train_loss: f64,
    best_val_loss: Option<f64>,
    stopped_early: bool,
    vocab_size: usize,
    train_pairs: usize,
    valid_pairs: usize,
}

fn load_pairs(path: &Path, format: Option<Format>) -> Result<Vec<ParaphrasePair>> {
    let report = load_dataset(path, format.unwrap_or_else(|| Format::from_path(path)))?;
    if !report.malformed.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.malformed.len());
    }
    Ok(report.pairs)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(p) = &args.train {
        cfg.data.train_path = Some(p.clone());
    }
    if let Some(p) = &args.valid {
        cfg.data.valid_path = Some(p.clone());
    }
    let dir = cfg.resolve_output_dir(args.output_dir.as_deref());
    cfg.output_dir = Some(dir.clone());
    cfg.train.validate()?;
    let train_path = cfg
        .data
        .train_path
        .clone()
        .ok_or_else(|| Error::Config("no training data: set train_path or pass --train".into()))?;
    let mut train_pairs = load_pairs(&train_path, cfg.data.format)?;
    let mut valid_pairs = match &cfg.data.valid_path {
        Some(p) => load_pairs(p, cfg.data.format)?,
        None => Vec::new(),
    };
    if valid_pairs.is_empty() && cfg.data.valid_fraction > 0.0 {
        let (t, v, _) = split_pairs(&train_pairs, cfg.data.valid_fraction, 0.0, cfg.train.seed);
        train_pairs = t;
        valid_pairs = v;
    }
    if train_pairs.is_empty() {
        return Err(Error::Data(format!("{} holds no usable pairs", train_path.display())));
    }
    let tokenizer = tokenizer_for(cfg.data.wordpiece_vocab.as_deref())?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let (mut model, vocab, resume) = if args.resume {
        let ck = checkpoint::load(&dir.join(crate::train::LAST_CHECKPOINT))?;
        let vocab = Vocabulary::load(&vocab_path)?;
        if vocab.len() != ck.model.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the checkpoint expects {}",
                vocab.len(),
                ck.model.config.vocab_size
            )));
        }
        (ck.model, vocab, ck.trainer)
    } else {
        let tokens: Vec<Vec<String>> = train_pairs
            .iter()
            .flat_map(|p| [tokenizer.tokenize(&p.source), tokenizer.tokenize(&p.target)])
            .collect();
        let vocab = Vocabulary::build(
            tokens.iter().map(Vec::as_slice),
            cfg.data.vocab_max_size,
            cfg.data.min_freq,
        )?;
        vocab.save(&vocab_path)?;
        cfg.model.vocab_size = vocab.len();
        (Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?, vocab, None)
    };
    cfg.model = model.config.clone();
    let run_cfg = dir.join(RUN_CONFIG_FILE);
    fs::write(&run_cfg, cfg.to_text()).map_err(|e| Error::io(&run_cfg, e))?;
    let encode = |pairs: &[ParaphrasePair]| -> Vec<EncodedPair> {
        pairs
            .iter()
            .map(|p| EncodedPair::encode(p, &tokenizer, &vocab))
            .filter(|p| !p.source.is_empty())
            .collect()
    };
    let (train, valid) = (encode(&train_pairs), encode(&valid_pairs));
    log::info!("training on {} pairs, validating on {}", train.len(), valid.len());
    let output = TrainOutput { dir: dir.clone() };
    let outcome = train_loop(
        &mut model,
        &train,
        &valid,
        &cfg.train,
        resume,
        Some(&output),
        &mut |r, _| {
            if r.step % 100 == 0 {
                log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.train_loss, r.lr);
            }
            Control::Continue
        },
    )?;
    emit_json(
        out,
        &TrainSummary {
            output_dir: dir,
            steps: outcome.steps,
            final_train_loss: outcome.final_train_loss,
            best_val_loss: outcome.best_val_loss,
            stopped_early: outcome.stopped_early,
            vocab_size: vocab.len(),
            train_pairs: train.len(),
            valid_pairs: valid.len(),
        },
    )
}

/// A trained model with the vocabulary and tokenizer it was trained with.
pub struct LoadedModel {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub tokenizer: Tokenizer,
    pub checkpoint_id: String,
}

/// Loads a checkpoint plus its vocabulary (by default the sibling
/// `vocab.txt`) and, when a sibling `run.cfg` names one, the subword
/// vocabulary.
pub fn load_model(checkpoint_path: &Path, vocab: Option<&Path>, wordpiece: Option<&Path>) -> Result<LoadedModel> {
    let ck = checkpoint::load(checkpoint_path)?;
    let dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    let vocab_path = vocab.map_or_else(|| dir.join(VOCAB_FILE), Path::to_path_buf);
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != ck.model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            ck.model.config.vocab_size
        )));
    }
    let wordpiece = match wordpiece {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let run_cfg = dir.join(RUN_CONFIG_FILE);
            if run_cfg.exists() {
                RunConfig::from_file(&run_cfg)?.data.wordpiece_vocab
            } else {
                None
            }
        }
    };
    Ok(LoadedModel {
        model: ck.model,
        vocab,
        tokenizer: tokenizer_for(wordpiece.as_deref())?,
        checkpoint_id: checkpoint::checkpoint_id(checkpoint_path)?,
    })
}

#[derive(Serialize)]
struct Candidate {
    text: String,
    score: f64,
}

#[derive(Serialize)]
struct Generation {
    source: String,
    candidates: Vec<Candidate>,
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_model(&args.checkpoint, args.vocab.as_deref(), args.wordpiece.as_deref())?;
    let cfg = DecodeConfig {
        beam_size: args.beam,
        max_len: args.max_len.unwrap_or(loaded.model.config.max_len),
        length_alpha: args.length_alpha,
    };
    if cfg.beam_size == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let lines: Vec<String> = match &args.input {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(String::from)
            .collect(),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e))?,
    };
    for (i, line) in lines.iter().enumerate() {
        let tokens = loaded.tokenizer.tokenize(line);
        if tokens.is_empty() {
            log::warn!("skipping empty input line {}", i + 1);
            continue;
        }
        let src = loaded.vocab.encode(&tokens);
        let hyps = beam_search(&loaded.model, &src, &cfg)?;
        let candidates = hyps
            .iter()
            .take(args.top.max(1))
            .map(|h| Candidate {
                text: detokenize(&loaded.vocab.decode(&h.token_ids)),
                score: h.score(cfg.length_alpha),
            })
            .collect();
        emit_json(
            out,
            &Generation {
                source: line.clone(),
                candidates,
            },
        )?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cands = read_lines(&args.candidates)?;
    let refs = read_lines(&args.references)?;
    let srcs = read_lines(&args.sources)?;
    if cands.is_empty() {
        return Err(Error::Input(format!("{} is empty", args.candidates.display())));
    }
    if cands.len() != refs.len() || cands.len() != srcs.len() {
        return Err(Error::Input(format!(
            "line counts differ: {} candidates, {} references, {} sources",
            cands.len(),
            refs.len(),
            srcs.len()
        )));
    }
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Error::Config(format!("alpha {} is outside [0, 1]", args.alpha)));
    }
    let tok = Tokenizer::Basic;
    let records: Vec<EvalRecord> = cands
        .iter()
        .zip(&refs)
        .zip(&srcs)
        .map(|((c, r), s)| EvalRecord {
            source: tok.tokenize(s),
            references: r.split('\t').map(|x| tok.tokenize(x)).collect(),
            candidate: tok.tokenize(c),
        })
        .collect();
    if let Some(path) = &args.per_record {
        let mut text = String::new();
        for (i, r) in records.iter().enumerate() {
            text += &serde_json::to_string(&score_record(i, r, args.alpha))?;
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    emit_json(out, &evaluate(&records, args.alpha))
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_model(&args.checkpoint, args.vocab.as_deref(), args.wordpiece.as_deref())?;
    let report = inspect(
        &loaded.model,
        &loaded.tokenizer,
        &loaded.vocab,
        &args.sentence,
        &loaded.checkpoint_id,
    )?;
    if report.truncated > 0 {
        eprintln!(
            "note: sentence truncated to {} tokens ({} dropped)",
            report.tokens.len(),
            report.truncated
        );
    }
    let color = args.color || (!args.plain && io::stdout().is_terminal() && std::env::var_os("NO_COLOR").is_none());
    out.write_all(report.render(color).as_bytes()).map_err(stdout_error)?;
    let json_path = match &args.json {
        Some(p) => p.clone(),
        None => RunConfig::default().resolve_output_dir(None).join("inspect.json"),
    };
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    writeln!(out, "report: {}", json_path.display()).map_err(stdout_error)
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.model.vocab_size = args.vocab_size;
    cfg.apply_overrides(&args.set)?;
    cfg.model.dropout = 0.0;
    cfg.model.validate()?;
    let bench = BenchConfig {
        model: cfg.model,
        batch_size: args.batch_size,
        seq_len: args.seq_len,
        repeats: args.repeats.max(1),
        warmup: 1,
        seed: cfg.train.seed,
    };
    if bench.batch_size == 0 || bench.seq_len == 0 {
        return Err(Error::Config("batch size and sequence length must be positive".into()));
    }
    let report = run_bench(&bench)?;
    out.write_all(report.render().as_bytes()).map_err(stdout_error)?;
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
