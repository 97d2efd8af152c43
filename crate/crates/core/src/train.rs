//! Teacher-forced training: length-bucketed batches, Adam, warmup plus
//! cosine decay, gradient clipping, validation and checkpoint retention.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Graph, ParamStore, Tensor};
use crate::model::{save_checkpoint, Batch, ModelError, PushdownModel};
use crate::stack::AttachmentError;
use crate::treebank::{Sequence, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attachment(#[from] AttachmentError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("non-finite loss at step {step} (batch {batch}); gradient norms: {report}")]
    NonFinite {
        step: usize,
        batch: usize,
        report: String,
    },
    #[error("empty training set")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            _ => Err(format!("unknown schedule {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub lr: f64,
    pub schedule: Schedule,
    /// Weight of the attachment loss.
    pub lambda: f64,
    /// Overrides the model's residual and attention dropout while training.
    pub dropout: f64,
    /// Validate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Stop after this many evaluations without a better validation
    /// perplexity (0 disables early stopping).
    pub patience: usize,
    pub clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            warmup: 100,
            lr: 1e-3,
            schedule: Schedule::Cosine,
            lambda: 1.0,
            dropout: 0.0,
            eval_every: 200,
            patience: 0,
            clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup > self.steps {
            return bad("warmup must not exceed steps");
        }
        if !(self.lr >= 0.0 && self.lambda >= 0.0 && self.eps >= 0.0) {
            return bad("rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip must be positive");
        }
        Ok(())
    }

    /// Learning rate for the update made at `step` (0-based): linear from 0
    /// to the peak over `warmup` steps, then constant or cosine to 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (self.steps - self.warmup).max(1) as f64;
                let t = ((step - self.warmup) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let z: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update using the gradients in `params` scaled by `scale`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Groups sequence indices into length-bucketed batches for one epoch.
/// Sequences are shuffled, stably sorted by length, chunked, and the
/// chunks shuffled again, all from `(seed, epoch)`.
pub fn make_batches(
    lengths: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    batches.shuffle(&mut rng);
    batches
}

/// Endless stream of padded batches, cycling epochs.
pub struct BatchStream<'a> {
    seqs: &'a [Sequence],
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<Vec<usize>>,
    next: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(seqs: &'a [Sequence], batch_size: usize, seed: u64) -> Self {
        let lengths = seqs.iter().map(Sequence::len).collect();
        Self {
            seqs,
            lengths,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            next: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch, AttachmentError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.seqs.is_empty() {
            return None;
        }
        if self.next == self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = make_batches(&self.lengths, self.batch_size, self.seed, self.epoch);
            self.next = 0;
        }
        let chunk = &self.order[self.next];
        self.next += 1;
        let refs: Vec<&Sequence> = chunk.iter().map(|&i| &self.seqs[i]).collect();
        Some(Batch::from_sequences(&refs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub perplexity: f64,
    /// Mean token NLL in nats.
    pub nll: f64,
    pub tokens: usize,
    /// Attachment accuracy under gold tapes; `None` without a head.
    pub attach_acc: Option<f64>,
}

/// Teacher-forced validation with gold tapes and no dropout. Perplexity is
/// over every predicted token (words and EOS); ROOT is never a target.
pub fn validate(
    model: &PushdownModel,
    seqs: &[Sequence],
    batch_size: usize,
) -> Result<ValMetrics, TrainError> {
    let v = model.config.vocab_size;
    let (mut nll, mut tokens, mut hits, mut total) = (0.0, 0usize, 0usize, 0usize);
    let mut scratch = vec![0.0; v];
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let batch = Batch::from_sequences(&refs)?;
        let out = model.forward_values(&batch)?;
        let t = batch.len;
        let lm = out.lm_logits.data();
        for (row, target) in batch.lm_targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            kernels::log_softmax_masked_row(&lm[row * v..(row + 1) * v], |_| true, &mut scratch);
            nll -= scratch[y];
            tokens += 1;
        }
        if let Some(att) = &out.attach_logits {
            let a = att.data();
            for (row, target) in batch.attach_targets.iter().enumerate() {
                let Some(y) = *target else { continue };
                let i = row % t;
                let scores = &a[row * (t + 1)..row * (t + 1) + i + 2];
                let best = argmax(scores);
                hits += usize::from(best == y);
                total += 1;
            }
        }
    }
    if tokens == 0 {
        return Err(TrainError::Empty);
    }
    let mean = nll / tokens as f64;
    Ok(ValMetrics {
        perplexity: mean.exp(),
        nll: mean,
        tokens,
        attach_acc: (total > 0).then(|| hits as f64 / total as f64),
    })
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lm_loss: f64,
    pub attach_loss: Option<f64>,
    pub val: Option<ValMetrics>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,lm_loss,attach_loss,val_ppl,val_attach_acc,lr";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lm_loss,
            opt(self.attach_loss),
            opt(self.val.map(|v| v.perplexity)),
            opt(self.val.and_then(|v| v.attach_acc)),
            self.lr
        )
    }
}

/// Where training writes its artifacts. All are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    /// Written when training aborts on a non-finite loss.
    pub diagnostic: Option<PathBuf>,
    pub vocab: Option<Vocab>,
    /// Print a progress line per evaluation.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<MetricsRow>,
    pub best_step: usize,
    pub best_val: Option<ValMetrics>,
    pub last_val: Option<ValMetrics>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

struct CsvLog {
    file: Option<fs::File>,
}

impl CsvLog {
    fn open(path: Option<&Path>) -> io::Result<Self> {
        let file = match path {
            Some(p) => {
                let mut f = fs::File::create(p)?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn row(&mut self, row: &MetricsRow) -> io::Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv())?;
            f.flush()?;
        }
        Ok(())
    }
}

fn grad_report(params: &ParamStore) -> String {
    let mut s = String::new();
    for id in params.ids() {
        let n = params
            .get(id)
            .grad()
            .map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
        let _ = write!(s, "{}={n:.3e} ", params.name(id));
    }
    s.trim_end().to_string()
}

/// Trains `model` in place. On return the model holds the parameters with
/// the best validation perplexity (or the last ones without a validation
/// set).
pub fn train(
    model: &mut PushdownModel,
    train_set: &[Sequence],
    val_set: &[Sequence],
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let saved_dropout = (model.config.dropout, model.config.attn_dropout);
    model.config.dropout = cfg.dropout;
    model.config.attn_dropout = cfg.dropout;
    let mut log = CsvLog::open(out.metrics_csv.as_deref())?;
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut stream = BatchStream::new(train_set, cfg.batch_size, cfg.seed);
    let mut report = TrainReport {
        history: Vec::new(),
        best_step: 0,
        best_val: None,
        last_val: None,
        steps_run: 0,
        stopped_early: false,
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut stale = 0;
    let vocab = out.vocab.clone().unwrap_or_default();

    let result = (|| -> Result<(), TrainError> {
        for step in 0..cfg.steps {
            let batch = stream.next().ok_or(TrainError::Empty)??;
            model.params.zero_grad();
            let mut g = Graph::with_mode(
                cfg.dropout > 0.0,
                cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let fwd = model.forward(&mut g, &batch)?;
            let loss = model.loss(&mut g, &fwd, &batch, cfg.lambda)?;
            let lm = g.value(loss.lm).item();
            let attach = loss.attach.map(|a| g.value(a).item());
            let total = g.value(loss.total).item();
            g.backward(loss.total, &mut model.params)
                .map_err(ModelError::from)?;
            let norm = model.params.grad_norm();
            if !total.is_finite() || !norm.is_finite() {
                let report = grad_report(&model.params);
                if let Some(p) = &out.diagnostic {
                    let dump = format!(
                        "step {step}\nbatch {}\nloss {total}\ngrad_norm {norm}\n{}\n",
                        stream.next,
                        report.replace(' ', "\n")
                    );
                    crate::util::atomic_write(p, dump.as_bytes())?;
                }
                return Err(TrainError::NonFinite {
                    step,
                    batch: stream.next - 1,
                    report,
                });
            }
            let scale = match cfg.clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let lr = cfg.lr_at(step);
            adam.step(&mut model.params, lr, scale);
            report.steps_run = step + 1;

            let last = step + 1 == cfg.steps;
            let eval_now = !val_set.is_empty()
                && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0));
            let mut row = MetricsRow {
                step: step + 1,
                lm_loss: lm,
                attach_loss: attach,
                val: None,
                lr,
            };
            if eval_now {
                let train_mode = (model.config.dropout, model.config.attn_dropout);
                let val = validate(model, val_set, cfg.batch_size)?;
                debug_assert_eq!(
                    train_mode,
                    (model.config.dropout, model.config.attn_dropout)
                );
                row.val = Some(val);
                report.last_val = Some(val);
                if out.verbose {
                    eprintln!(
                        "step {:>6}  lm {:.4}  attach {}  val_ppl {:.4}  val_attach {}",
                        step + 1,
                        lm,
                        attach.map_or("-".into(), |a| format!("{a:.4}")),
                        val.perplexity,
                        val.attach_acc.map_or("-".into(), |a| format!("{a:.4}"))
                    );
                }
                if report
                    .best_val
                    .is_none_or(|b| val.perplexity < b.perplexity)
                {
                    report.best_val = Some(val);
                    report.best_step = step + 1;
                    best_params = Some(model.params.iter().map(|(_, t)| t.clone()).collect());
                    stale = 0;
                    if let Some(p) = &out.best_checkpoint {
                        save_checkpoint(p, model, &vocab)?;
                    }
                } else {
                    stale += 1;
                }
            }
            log.row(&row)?;
            report.history.push(row);
            if eval_now && cfg.patience > 0 && stale >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
        if let Some(p) = &out.last_checkpoint {
            save_checkpoint(p, model, &vocab)?;
        }
        Ok(())
    })();

    model.config.dropout = saved_dropout.0;
    model.config.attn_dropout = saved_dropout.1;
    result?;
    if let Some(best) = best_params {
        for (id, t) in model.params.ids().collect::<Vec<_>>().into_iter().zip(best) {
            model
                .params
                .get_mut(id)
                .data_mut()
                .copy_from_slice(t.data());
        }
    } else {
        report.best_step = report.steps_run;
    }
    if out.best_checkpoint.is_some() && report.best_val.is_none() {
        save_checkpoint(out.best_checkpoint.as_ref().unwrap(), model, &vocab)?;
    }
    Ok(report)
}
