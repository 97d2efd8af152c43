//! The `pushdown` command line: data generation, training, evaluation,
//! parsing, scoring and attention analysis.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{ConfigError, DataFormat, RunConfig};
use crate::decode::{
    best_parse, marginal_logprob, score_joint, surprisal, BeamConfig, BeamMode, ScoreRecord,
};
use crate::dyck::{
    dyck_vocab, parse_tokens, to_bracketed, DyckError, DyckSpec, DyckString, ManifestEntry,
};
use crate::eval::{
    attention_analysis, attention_csv, attention_svg, closing_accuracy, depth_items, dyck_probe,
    perplexity_csv, perplexity_report, records_csv, report_csv, unlabeled_f1, ClosingItem,
    F1Result, Probe, TapeMode,
};
use crate::experiment::{DyckExperiment, ExperimentError};
use crate::model::{load_checkpoint, CheckpointError};
use crate::model::{ModelError, PushdownModel};
use crate::train::{train, TrainError, TrainOutputs};
use crate::treebank::{parse_sexpr, Corpus, TreebankError, Vocab, VocabPolicy};
use crate::util::atomic_write;

/// Environment variable naming the default directory for training runs.
pub const RUN_ROOT_ENV: &str = "PUSHDOWN_RUN_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("bad input: {0}")]
    Data(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Config(_) => 4,
            CliError::Checkpoint { .. } => 5,
            CliError::Vocab(_) => 6,
            CliError::Locked(_) => 7,
            CliError::Data(_) => 8,
            CliError::Train(_) => 9,
            CliError::Model(_) => 10,
        }
    }
}

impl From<DyckError> for CliError {
    fn from(e: DyckError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Dyck(e) => e.into(),
            ExperimentError::Model(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
        }
    }
}

fn treebank_err(path: &Path, e: TreebankError) -> CliError {
    match e {
        TreebankError::Io(source) => CliError::Io {
            path: path.into(),
            source,
        },
        TreebankError::UnknownToken { line, token } => CliError::Vocab(format!(
            "{}:{line}: token {token:?} not in the checkpoint vocabulary",
            path.display()
        )),
        e => CliError::Data(format!("{}: {e}", path.display())),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

/// Writes to `path` atomically, or to stdout without one.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<(PushdownModel, Vocab), CliError> {
    load_checkpoint(path).map_err(|source| match source {
        CheckpointError::Io(source) => CliError::Io {
            path: path.into(),
            source,
        },
        source => CliError::Checkpoint {
            path: path.into(),
            source,
        },
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "pushdown",
    version,
    about = "Pushdown language models: train, evaluate, parse and score"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample Dyck splits as bracketed trees plus a manifest.
    GenData(GenDataArgs),
    /// Train a model; every config key is also accepted as `--key value`.
    Train(TrainArgs),
    /// Closing accuracy, bracketing F1 or perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Best beam parse of each input line.
    Parse(ParseArgs),
    /// Joint, marginal or per-token surprisal scores as JSON lines.
    Score(ScoreArgs),
    /// Attention of a query position on Dyck probes, as CSV and SVG.
    AnalyzeAttention(AttentionArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub num_types: usize,
    #[arg(long, default_value_t = 6)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.49)]
    pub open_prob: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 500)]
    pub val_count: usize,
    #[arg(long, default_value_t = 200)]
    pub test_count: usize,
    #[arg(long, default_value_t = 8)]
    pub depth_min: usize,
    #[arg(long, default_value_t = 12)]
    pub depth_max: usize,
    #[arg(long, default_value_t = 200)]
    pub depth_count: usize,
    /// Comma separated open-to-close distances.
    #[arg(long, value_delimiter = ',', default_value = "40,44,48")]
    pub longrange_targets: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub longrange_count: usize,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config overrides such as `--steps 500 --lr 1e-3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalTask {
    Closing,
    F1,
    Ppl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TapeArg {
    ModelGreedy,
    GoldOracle,
}

impl From<TapeArg> for TapeMode {
    fn from(t: TapeArg) -> Self {
        match t {
            TapeArg::ModelGreedy => TapeMode::ModelGreedy,
            TapeArg::GoldOracle => TapeMode::GoldOracle,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bracketed trees, or a long-range file (`target<TAB>close_pos<TAB>tokens`).
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum)]
    pub task: EvalTask,
    #[arg(long, value_enum, default_value = "model-greedy")]
    pub tape_mode: TapeArg,
    #[arg(long, default_value_t = 32)]
    pub beam: usize,
    /// Report CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-prefix records CSV (closing task).
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct ParseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One sentence of space separated tokens per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub beam: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoreMode {
    /// `log p(x, y)`; input lines are bracketed trees.
    Joint,
    Marginal,
    Surprisal,
}

#[derive(clap::Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub beam: usize,
    #[arg(long, value_enum, default_value = "marginal")]
    pub mode: ScoreMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lines of `close_pos<TAB>tokens` (a leading target column is allowed).
    #[arg(long)]
    pub probes: PathBuf,
    /// Directory for `attention.csv`, `summary.csv` and one SVG per probe.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => cmd_eval(&a),
        Command::Parse(a) => cmd_parse(&a),
        Command::Score(a) => cmd_score(&a),
        Command::AnalyzeAttention(a) => cmd_attention(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let exp = DyckExperiment {
        spec: DyckSpec {
            num_types: a.num_types,
            max_depth: a.max_depth,
            open_prob: a.open_prob,
            min_len: a.min_len,
            max_len: a.max_len,
            seed: a.seed,
        },
        train_count: a.train_count,
        val_count: a.val_count,
        test_count: a.test_count,
        depth_range: (a.depth_min, a.depth_max),
        depth_count: a.depth_count,
        longrange_targets: a.longrange_targets.clone(),
        longrange_count: a.longrange_count,
        ..DyckExperiment::default()
    };
    exp.spec.validate()?;
    let data = exp.build_data()?;
    fs::create_dir_all(&a.out).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    let trees = |v: &[DyckString]| v.iter().map(|s| to_bracketed(s) + "\n").collect::<String>();
    let mut manifest = String::new();
    let mut entry = |split: &str, file: &str, count: usize, seed: u64, depths, targets| {
        let e = ManifestEntry {
            split: split.into(),
            file: file.into(),
            count,
            seed,
            spec: exp.spec.clone(),
            depths,
            targets,
        };
        manifest.push_str(&serde_json::to_string(&e).expect("manifest entries serialize"));
        manifest.push('\n');
    };
    let s = a.seed;
    let files = [
        ("train", "train.trees", &data.train, s),
        ("val", "val.trees", &data.val, s.wrapping_add(1)),
        ("test", "test.trees", &data.test, s.wrapping_add(2)),
        (
            "depth_gen",
            "depth_gen.trees",
            &data.depth_gen,
            s.wrapping_add(3),
        ),
    ];
    for (split, file, strings, seed) in files {
        write(&a.out.join(file), trees(strings).as_bytes())?;
        let depths = (split == "depth_gen").then_some(exp.depth_range);
        entry(split, file, strings.len(), seed, depths, None);
    }
    let lr: String = data
        .longrange
        .iter()
        .map(|it| format!("{}\t{}\t{}\n", it.target, it.close_pos, it.string.text()))
        .collect();
    write(&a.out.join("longrange.tsv"), lr.as_bytes())?;
    entry(
        "longrange",
        "longrange.tsv",
        data.longrange.len(),
        s.wrapping_add(4),
        None,
        Some(exp.longrange_targets.clone()),
    );
    write(&a.out.join("manifest.jsonl"), manifest.as_bytes())?;
    Ok(())
}

/// Removes the lock file when the run ends, successfully or not.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("run.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => {
                let _ = fs::write(&path, std::process::id().to_string());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.into())),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_trees(path: &Path, policy: VocabPolicy) -> Result<Corpus, CliError> {
    Corpus::from_text(&read(path)?, policy).map_err(|e| treebank_err(path, e))
}

/// Loads the config file and overrides, trains, and returns the run
/// directory `<run_root>/<unix seconds>-<config hash>`.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::default();
    if let Ok(root) = std::env::var(RUN_ROOT_ENV) {
        cfg.run_root = Some(root.into());
    }
    if let Some(p) = &a.config {
        cfg.apply_text(&read(p)?)?;
    }
    cfg.apply_flags(&a.overrides)?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or(ConfigError::Missing("train_data"))?;
    let policy = match cfg.data_format {
        DataFormat::Dyck => VocabPolicy::Frozen(dyck_vocab(cfg.num_types)),
        DataFormat::Trees => VocabPolicy::Build(None),
    };
    let train_set = load_trees(&train_path, policy)?;
    let val_set = match &cfg.val_data {
        Some(p) => load_trees(p, VocabPolicy::Frozen(train_set.vocab.clone()))?,
        None => Corpus::new(train_set.vocab.clone()),
    };
    if cfg.max_len == 0 {
        cfg.max_len = train_set
            .sequences
            .iter()
            .chain(&val_set.sequences)
            .map(|s| s.len())
            .max()
            .unwrap_or(2);
    }
    let model_cfg = cfg.model_config(train_set.vocab.len(), cfg.max_len);
    let mut model = PushdownModel::new(model_cfg, cfg.train.seed)?;

    let root = cfg
        .run_root
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs"));
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = root.join(format!("{secs}-{:016x}", cfg.hash()));
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    let _lock = RunLock::acquire(&dir)?;
    write(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let out = TrainOutputs {
        metrics_csv: Some(dir.join("metrics.csv")),
        best_checkpoint: Some(dir.join("best.ckpt")),
        last_checkpoint: Some(dir.join("last.ckpt")),
        diagnostic: Some(dir.join("diagnostic.txt")),
        vocab: Some(train_set.vocab.clone()),
        verbose: true,
    };
    let report = train(
        &mut model,
        &train_set.sequences,
        &val_set.sequences,
        &cfg.train,
        &out,
    )?;
    let mut summary = format!(
        "steps_run = {}\nbest_step = {}\nstopped_early = {}\n",
        report.steps_run, report.best_step, report.stopped_early
    );
    if let Some(v) = report.best_val {
        let _ = writeln!(summary, "best_val_ppl = {}", v.perplexity);
    }
    if let Some(v) = report.last_val {
        let _ = writeln!(summary, "last_val_ppl = {}", v.perplexity);
    }
    write(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(dir)
}

/// Number of bracket types if `vocab` is exactly a Dyck vocabulary.
fn dyck_types(vocab: &Vocab) -> Result<usize, CliError> {
    let k = vocab.len().saturating_sub(2) / 2;
    if k == 0 || dyck_vocab(k).tokens() != vocab.tokens() {
        return Err(CliError::Vocab(
            "the checkpoint was not trained on Dyck data".into(),
        ));
    }
    Ok(k)
}

/// Long-range lines `target<TAB>close_pos<TAB>tokens`, or two columns
/// without the target (bucketed by distance then).
fn parse_tsv_line(line: &str, n: usize) -> Result<(usize, usize, DyckString), CliError> {
    let cols: Vec<&str> = line.split('\t').collect();
    let bad = || {
        CliError::Data(format!(
            "line {n}: expected `[target<TAB>]close_pos<TAB>tokens`"
        ))
    };
    let (target, pos, text) = match cols.as_slice() {
        [t, p, s] => (Some(t.trim().parse().map_err(|_| bad())?), p, s),
        [p, s] => (None, p, s),
        _ => return Err(bad()),
    };
    let pos: usize = pos.trim().parse().map_err(|_| bad())?;
    let s = parse_tokens(text)?;
    if pos >= s.len() || s.tokens[pos].is_open() {
        return Err(CliError::Data(format!(
            "line {n}: position {pos} is not a closing bracket"
        )));
    }
    Ok((target.unwrap_or(pos - s.matching[pos]), pos, s))
}

fn is_tsv(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.contains('\t'))
}

fn dyck_from_tree_line(line: &str, n: usize) -> Result<DyckString, CliError> {
    let t = parse_sexpr(line).map_err(|e| CliError::Data(format!("line {n}: {e}")))?;
    Ok(parse_tokens(&t.leaves().join(" "))?)
}

fn closing_split(text: &str) -> Result<Vec<ClosingItem>, CliError> {
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    if is_tsv(text) {
        lines
            .map(|(i, l)| {
                let (target, pos, string) = parse_tsv_line(l, i + 1)?;
                Ok(ClosingItem {
                    string,
                    positions: vec![pos],
                    buckets: vec![target],
                })
            })
            .collect()
    } else {
        let strings = lines
            .map(|(i, l)| dyck_from_tree_line(l, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(depth_items(&strings))
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let text = read(&a.split)?;
    match a.task {
        EvalTask::Closing => {
            let k = dyck_types(&vocab)?;
            let items = closing_split(&text)?;
            let (report, records) =
                closing_accuracy(&model, "closing", &items, k, a.tape_mode.into())?;
            if let Some(p) = &a.records {
                write(p, records_csv(&records).as_bytes())?;
            }
            emit(a.out.as_deref(), &report_csv(&report))
        }
        EvalTask::F1 => {
            let corpus = load_trees(&a.split, VocabPolicy::Frozen(vocab))?;
            let cfg = BeamConfig {
                mode: BeamMode::Parse,
                ..BeamConfig::width(a.beam)
            };
            let mut csv = String::from("sentence,matched,gold,predicted,precision,recall,f1\n");
            let mut total = F1Result::default();
            for (i, seq) in corpus.sequences.iter().enumerate() {
                let gold = seq.gold_tree().map_err(|e| CliError::Data(e.to_string()))?;
                let pred = best_parse(&model, seq.words(), &cfg)?;
                let r = unlabeled_f1(&pred, &gold);
                total.add(r);
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},{},{},{}",
                    r.matched,
                    r.gold,
                    r.predicted,
                    r.precision(),
                    r.recall(),
                    r.f1()
                );
            }
            let t = total;
            let _ = writeln!(
                csv,
                "all,{},{},{},{},{},{}",
                t.matched,
                t.gold,
                t.predicted,
                t.precision(),
                t.recall(),
                t.f1()
            );
            emit(a.out.as_deref(), &csv)
        }
        EvalTask::Ppl => {
            let corpus = load_trees(&a.split, VocabPolicy::Frozen(vocab))?;
            let name = a
                .checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let rows = perplexity_report(&[(&name, &model)], &corpus.sequences, 32)?;
            emit(a.out.as_deref(), &perplexity_csv(&rows))
        }
    }
}

fn encode_line(vocab: &Vocab, line: &str, n: usize) -> Result<Vec<usize>, CliError> {
    line.split_whitespace()
        .map(|t| {
            vocab.id(t).filter(|&i| i > 1).ok_or_else(|| {
                CliError::Vocab(format!(
                    "line {n}: token {t:?} not in the checkpoint vocabulary"
                ))
            })
        })
        .collect()
}

fn sentences(text: &str, vocab: &Vocab) -> Result<Vec<Vec<usize>>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| encode_line(vocab, l, i + 1))
        .collect()
}

pub fn cmd_parse(a: &ParseArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let cfg = BeamConfig {
        mode: BeamMode::Parse,
        ..BeamConfig::width(a.beam)
    };
    let mut out = String::new();
    for words in sentences(&read(&a.input)?, &vocab)? {
        let tree = best_parse(&model, &words, &cfg)?;
        out.push_str(&tree.render_labeled("X", &|i| vocab.token(words[i]).to_string()));
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)
}

pub fn cmd_score(a: &ScoreArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let text = read(&a.input)?;
    let mut out = String::new();
    let mut push = |rec: ScoreRecord| {
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    };
    let tokens = |w: &[usize]| {
        w.iter()
            .map(|&i| vocab.token(i).to_string())
            .collect::<Vec<_>>()
    };
    match a.mode {
        ScoreMode::Joint => {
            let corpus = load_trees(&a.input, VocabPolicy::Frozen(vocab.clone()))?;
            for seq in &corpus.sequences {
                let tree = seq.gold_tree().map_err(|e| CliError::Data(e.to_string()))?;
                let lp = score_joint(&model, seq.words(), &tree)?;
                push(ScoreRecord {
                    tokens: tokens(seq.words()),
                    logprob: Some(lp),
                    surprisals: None,
                    beam_width: 0,
                });
            }
        }
        ScoreMode::Marginal | ScoreMode::Surprisal => {
            let mode = if matches!(a.mode, ScoreMode::Marginal) {
                BeamMode::Score
            } else {
                BeamMode::Surprisal
            };
            let cfg = BeamConfig {
                mode,
                ..BeamConfig::width(a.beam)
            };
            for words in sentences(&text, &vocab)? {
                let rec = if mode == BeamMode::Score {
                    let lp = marginal_logprob(&model, &words, &cfg)?;
                    ScoreRecord {
                        tokens: tokens(&words),
                        logprob: Some(lp),
                        surprisals: None,
                        beam_width: a.beam,
                    }
                } else {
                    let s = surprisal(&model, &words, &cfg)?;
                    ScoreRecord {
                        tokens: tokens(&words),
                        logprob: None,
                        surprisals: Some(s),
                        beam_width: a.beam,
                    }
                };
                push(rec);
            }
        }
    }
    emit(a.out.as_deref(), &out)
}

pub fn cmd_attention(a: &AttentionArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    dyck_types(&vocab)?;
    let text = read(&a.probes)?;
    let probes: Vec<Probe> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_tsv_line(l, i + 1).map(|(_, pos, s)| dyck_probe(&s, pos)))
        .collect::<Result<_, _>>()?;
    let report = attention_analysis(&model, &probes)?;
    fs::create_dir_all(&a.out).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    let name = |i: usize| vocab.token(i).to_string();
    write(
        &a.out.join("attention.csv"),
        attention_csv(&report, &probes, &name).as_bytes(),
    )?;
    let mut summary = String::from("probe,layer,target_mass\n");
    for (i, (p, probe)) in report.probes.iter().zip(&probes).enumerate() {
        for (l, m) in p.target_mass.iter().enumerate() {
            let _ = writeln!(summary, "{i},{l},{m}");
        }
        let labels: Vec<String> = probe.ids.iter().map(|&t| name(t)).collect();
        write(
            &a.out.join(format!("probe_{i}.svg")),
            attention_svg(&p.matrix, &labels).as_bytes(),
        )?;
    }
    let _ = writeln!(summary, "all,mean,{}", report.mean_target_mass);
    write(&a.out.join("summary.csv"), summary.as_bytes())?;
    Ok(())
}
