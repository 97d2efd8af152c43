//! Transformer LM with pushdown (stack-tape) attention and an attachment head.
//!
//! Blocks are pre-layer-norm with learned absolute positions. In a pushdown
//! layer the key of token `j` seen from query `i` is
//! `W_key(LN(h_j) + E[S[i][j]])`, where `S` holds the stack tape of every
//! prefix and `E` is that layer's depth embedding table. The attachment head
//! scores which constituent the next token reduces with; position `i` of the
//! batch predicts token `i + 1` and its attachment.

mod checkpoint;
mod infer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
};
pub use infer::{masked_log_probs, AttachScores, Inference, PositionCache};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::stack::{self, AttachmentError};
use crate::treebank::Sequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("tape depth {depth} exceeds the depth table (max {max}) and clamping is off")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("model has no attachment head")]
    NoAttachHead,
    #[error(transparent)]
    Attachment(#[from] AttachmentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Tape-conditioned attention in `pushdown_layers`, plus the attachment head.
    Pushdown,
    /// Plain attention, trained with the attachment loss as a second task.
    BaseMultitask,
    /// Plain attention, LM head only.
    BasePlain,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pushdown" => Ok(Mode::Pushdown),
            "base-multitask" => Ok(Mode::BaseMultitask),
            "base-plain" => Ok(Mode::BasePlain),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachHeadKind {
    /// Depth-aware key MLP and next-word fusion MLPs.
    Mlp,
    /// `h_j · W · h̃` with no depth input and no scaling.
    Bilinear,
}

impl std::str::FromStr for AttachHeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(AttachHeadKind::Mlp),
            "bilinear" => Ok(AttachHeadKind::Bilinear),
            _ => Err(format!("unknown attachment head {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Largest depth with its own embedding row.
    pub max_depth: usize,
    /// Clamp deeper tape values to `max_depth` instead of failing.
    pub clamp_depth: bool,
    pub pushdown_layers: Vec<usize>,
    pub mode: Mode,
    pub attach_head: AttachHeadKind,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub ff_mult: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// Pushdown model with every layer tape-conditioned.
    pub fn pushdown(
        layers: usize,
        heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_len: usize,
        max_depth: usize,
    ) -> Self {
        Self {
            layers,
            heads,
            d_model,
            vocab_size,
            max_len,
            max_depth,
            clamp_depth: true,
            pushdown_layers: (0..layers).collect(),
            mode: Mode::Pushdown,
            attach_head: AttachHeadKind::Mlp,
            dropout: 0.0,
            attn_dropout: 0.0,
            ff_mult: 4,
            init_std: 0.02,
        }
    }

    /// Same shape in a base mode (no tape in attention).
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        if mode != Mode::Pushdown {
            self.pushdown_layers.clear();
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.vocab_size < 2
            || self.max_len == 0
        {
            return bad(
                "layers, heads, d_model, max_len must be positive and vocab_size at least 2".into(),
            );
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.mode != Mode::Pushdown && !self.pushdown_layers.is_empty() {
            return bad("pushdown_layers must be empty in base modes".into());
        }
        if let Some(&l) = self.pushdown_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("pushdown layer {l} out of range"));
        }
        let mut sorted = self.pushdown_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.pushdown_layers.len() {
            return bad("duplicate pushdown layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if self.ff_mult == 0 || !(self.init_std >= 0.0) {
            return bad("ff_mult must be positive and init_std non-negative".into());
        }
        Ok(())
    }

    pub fn has_attach_head(&self) -> bool {
        self.mode != Mode::BasePlain
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1: (ParamId, ParamId),
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
    pub depth: Option<ParamId>,
}

/// `W2 · gelu(A·x + B·e + b1) + b2`, the two-input fusion MLP.
#[derive(Clone, Debug)]
pub(crate) struct FuseIds {
    pub a: ParamId,
    pub b: ParamId,
    pub b1: ParamId,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) enum AttachKeyIds {
    Mlp {
        ka: Linear,
        c: ParamId,
        beta: ParamId,
        dm: ParamId,
        b1: ParamId,
        w2: ParamId,
        /// Stored as a `[d, 1]` column.
        b2: ParamId,
    },
    Bilinear {
        w: ParamId,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct AttachIds {
    pub qa: Linear,
    pub nwq: FuseIds,
    pub nwk: FuseIds,
    pub key: AttachKeyIds,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub wte: ParamId,
    pub wpe: ParamId,
    pub layers: Vec<LayerIds>,
    pub ln_f: (ParamId, ParamId),
    pub lm_head: Linear,
    pub attach: Option<AttachIds>,
}

/// Parameters plus the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct PushdownModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: ModelIds,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal.sample(&mut self.rng))
    }
}

fn build_ids(config: &ModelConfig, store: &mut ParamStore, init: &mut Init) -> ModelIds {
    let d = config.d_model;
    let ff = config.ff_mult * d;
    let rows = config.max_depth + 1;
    let mut w =
        |store: &mut ParamStore, name: String, shape: &[usize]| store.add(name, init.normal(shape));
    let z = |store: &mut ParamStore, name: String, shape: &[usize]| {
        store.add(name, Tensor::zeros(shape))
    };
    let one = |store: &mut ParamStore, name: String, n: usize| {
        store.add(name, Tensor::from_fn(&[n], |_| 1.0))
    };

    let wte = w(store, "wte".into(), &[config.vocab_size, d]);
    let wpe = w(store, "wpe".into(), &[config.max_len, d]);
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = format!("h{l}.");
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| Linear {
            w: w(store, format!("{p}{name}.w"), &[i, o]),
            b: z(store, format!("{p}{name}.b"), &[o]),
        };
        let ln1 = (
            one(store, format!("{p}ln1.g"), d),
            z(store, format!("{p}ln1.b"), &[d]),
        );
        let q = lin(store, "attn.q", d, d);
        let k = lin(store, "attn.k", d, d);
        let v = lin(store, "attn.v", d, d);
        let o = lin(store, "attn.o", d, d);
        let ln2 = (
            one(store, format!("{p}ln2.g"), d),
            z(store, format!("{p}ln2.b"), &[d]),
        );
        let ff1 = lin(store, "mlp.fc", d, ff);
        let ff2 = lin(store, "mlp.proj", ff, d);
        let depth = config
            .pushdown_layers
            .contains(&l)
            .then(|| w(store, format!("{p}attn.depth"), &[rows, d]));
        layers.push(LayerIds {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            ff1,
            ff2,
            depth,
        });
    }
    let ln_f = (
        one(store, "ln_f.g".into(), d),
        z(store, "ln_f.b".into(), &[d]),
    );
    let lm_head = Linear {
        w: w(store, "lm_head.w".into(), &[d, config.vocab_size]),
        b: z(store, "lm_head.b".into(), &[config.vocab_size]),
    };
    let attach = config.has_attach_head().then(|| {
        let mut lin = |store: &mut ParamStore, name: &str| Linear {
            w: w(store, format!("attach.{name}.w"), &[d, d]),
            b: z(store, format!("attach.{name}.b"), &[d]),
        };
        let qa = lin(store, "qa");
        let mut fuse = |store: &mut ParamStore, name: &str| FuseIds {
            a: w(store, format!("attach.{name}.a"), &[d, d]),
            b: w(store, format!("attach.{name}.e"), &[d, d]),
            b1: z(store, format!("attach.{name}.b1"), &[d]),
            out: Linear {
                w: w(store, format!("attach.{name}.w2"), &[d, d]),
                b: z(store, format!("attach.{name}.b2"), &[d]),
            },
        };
        let nwq = fuse(store, "nwq");
        let nwk = fuse(store, "nwk");
        let key = match config.attach_head {
            AttachHeadKind::Mlp => AttachKeyIds::Mlp {
                ka: Linear {
                    w: w(store, "attach.ka.w".into(), &[d, d]),
                    b: z(store, "attach.ka.b".into(), &[d]),
                },
                c: w(store, "attach.key.c".into(), &[d, d]),
                beta: w(store, "attach.key.depth".into(), &[rows, d]),
                dm: w(store, "attach.key.dm".into(), &[d, d]),
                b1: z(store, "attach.key.b1".into(), &[d]),
                w2: w(store, "attach.key.w2".into(), &[d, d]),
                b2: z(store, "attach.key.b2".into(), &[d, 1]),
            },
            AttachHeadKind::Bilinear => AttachKeyIds::Bilinear {
                w: w(store, "attach.bilinear.w".into(), &[d, d]),
            },
        };
        AttachIds { qa, nwq, nwk, key }
    });
    ModelIds {
        wte,
        wpe,
        layers,
        ln_f,
        lm_head,
        attach,
    }
}

/// Teacher-forced batch: `B` right-padded sequences of length `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    /// Token `i + 1` of each row (0 past the end); feeds the attachment head.
    pub next_tokens: Vec<usize>,
    /// `[B, T, T]`; row `i` is the stack tape after token `i`.
    pub tape: Vec<usize>,
    pub lm_targets: Vec<Option<usize>>,
    /// Slot of the gold attachment of token `i + 1`: `j ≤ i`, or `i + 1` for shift.
    pub attach_targets: Vec<Option<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Builds a batch from `(ids, r)` pairs. `r` may describe any valid
    /// prefix, not only a complete tree.
    pub fn from_pairs(items: &[(&[usize], &[usize])]) -> Result<Self, AttachmentError> {
        let b = items.len();
        let t = items.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let mut batch = Batch {
            batch: b,
            len: t,
            tokens: vec![0; b * t],
            next_tokens: vec![0; b * t],
            tape: vec![0; b * t * t],
            lm_targets: vec![None; b * t],
            attach_targets: vec![None; b * t],
            lengths: Vec::with_capacity(b),
        };
        for (bi, (ids, r)) in items.iter().enumerate() {
            let n = ids.len();
            if r.len() != n {
                return Err(AttachmentError::OutOfOrder {
                    step: r.len().min(n),
                    expected: n,
                });
            }
            let m = stack::tape_matrix(r)?;
            for i in 0..n {
                batch.tokens[bi * t + i] = ids[i];
                batch.tape[(bi * t + i) * t..(bi * t + i) * t + n].copy_from_slice(m.row(i));
                if i + 1 < n {
                    batch.next_tokens[bi * t + i] = ids[i + 1];
                    batch.lm_targets[bi * t + i] = Some(ids[i + 1]);
                    batch.attach_targets[bi * t + i] = Some(r[i + 1]);
                }
            }
            batch.lengths.push(n);
        }
        Ok(batch)
    }

    pub fn from_sequences(seqs: &[&Sequence]) -> Result<Self, AttachmentError> {
        let items: Vec<(&[usize], &[usize])> = seqs
            .iter()
            .map(|s| (s.ids.as_slice(), s.r.as_slice()))
            .collect();
        Self::from_pairs(&items)
    }

    pub fn num_lm_targets(&self) -> usize {
        self.lm_targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Graph handles produced by [`PushdownModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, T, V]`.
    pub lm_logits: Var,
    /// `[B, T, T + 1]`; `None` in base-plain mode.
    pub attach_logits: Option<Var>,
    /// Per layer `[B, H, T, T]` attention probabilities.
    pub attention: Vec<Var>,
    /// Final hidden states after the last layer norm, `[B, T, d]`.
    pub hidden: Var,
}

/// Plain-tensor view of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub lm_logits: Tensor,
    pub attach_logits: Option<Tensor>,
    pub attention: Vec<Tensor>,
    pub hidden: Tensor,
}

/// Scalar loss handles.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub lm: Var,
    pub attach: Option<Var>,
}

impl PushdownModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let normal =
            Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let mut params = ParamStore::new();
        let ids = build_ids(&config, &mut params, &mut init);
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Rebuilds the model around an existing parameter store, checking
    /// that names and shapes line up with `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for id in fresh.params.ids() {
            let (want, got) = (fresh.params.get(id), params.get(id));
            if fresh.params.name(id) != params.name(id) || want.shape() != got.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    params.name(id),
                    got.shape(),
                    fresh.params.name(id),
                    want.shape()
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Depth-table parameters used by attention (one per pushdown layer).
    pub fn depth_tables(&self) -> Vec<ParamId> {
        self.ids.layers.iter().filter_map(|l| l.depth).collect()
    }

    /// Table row used for a tape depth.
    pub fn depth_index(&self, depth: usize) -> Result<usize, ModelError> {
        if depth <= self.config.max_depth {
            Ok(depth)
        } else if self.config.clamp_depth {
            Ok(self.config.max_depth)
        } else {
            Err(ModelError::DepthOutOfRange {
                depth,
                max: self.config.max_depth,
            })
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.len > self.config.max_len {
            return Err(ModelError::TooLong {
                len: batch.len,
                max: self.config.max_len,
            });
        }
        let v = self.config.vocab_size;
        if let Some(&id) = batch
            .tokens
            .iter()
            .chain(&batch.next_tokens)
            .find(|&&i| i >= v)
        {
            return Err(ModelError::TokenOutOfRange { id, vocab: v });
        }
        Ok(())
    }

    fn tape_indices(&self, batch: &Batch) -> Result<Rc<[usize]>, ModelError> {
        let t = batch.len;
        let mut idx = Vec::with_capacity(batch.tape.len());
        for (n, &s) in batch.tape.iter().enumerate() {
            let (i, j) = ((n / t) % t, n % t);
            idx.push(if j <= i { self.depth_index(s)? } else { 0 });
        }
        Ok(idx.into())
    }

    fn linear(&self, g: &mut Graph, x: Var, p: &Linear) -> Result<Var, ModelError> {
        let w = g.param(&self.params, p.w);
        let b = g.param(&self.params, p.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, p: (ParamId, ParamId)) -> Result<Var, ModelError> {
        let gamma = g.param(&self.params, p.0);
        let beta = g.param(&self.params, p.1);
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    fn fuse(&self, g: &mut Graph, x: Var, e: Var, p: &FuseIds) -> Result<Var, ModelError> {
        let a = g.param(&self.params, p.a);
        let b = g.param(&self.params, p.b);
        let b1 = g.param(&self.params, p.b1);
        let xa = g.matmul(x, a)?;
        let eb = g.matmul(e, b)?;
        let s = g.add(xa, eb)?;
        let s = g.add_row(s, b1)?;
        let h = g.gelu(s);
        self.linear(g, h, &p.out)
    }

    fn block(
        &self,
        g: &mut Graph,
        l: usize,
        x: Var,
        idx: &Rc<[usize]>,
        causal: &[bool],
        b: usize,
        t: usize,
    ) -> Result<(Var, Var), ModelError> {
        let p = &self.ids.layers[l];
        let (d, h) = (self.config.d_model, self.config.heads);
        let dh = d / h;
        let ln = self.layer_norm(g, x, p.ln1)?;
        let q = self.linear(g, ln, &p.q)?;
        let k = self.linear(g, ln, &p.k)?;
        let v = self.linear(g, ln, &p.v)?;
        let split = |g: &mut Graph, z: Var| -> Result<Var, TensorError> {
            let z = g.reshape(z, &[b, t, h, dh])?;
            g.permute(z, &[0, 2, 1, 3])
        };
        let qh = split(g, q)?;
        let vh = split(g, v)?;
        let vh = g.reshape(vh, &[b * h, t, dh])?;
        let scores = match p.depth {
            Some(depth) => {
                let e = g.param(&self.params, depth);
                let wk = g.param(&self.params, p.k.w);
                let table = g.matmul(e, wk)?;
                let s = g.pushdown_scores(qh, k, table, idx.clone(), h)?;
                g.reshape(s, &[b * h * t, 1, t])?
            }
            None => {
                let kh = split(g, k)?;
                let kh = g.reshape(kh, &[b * h, t, dh])?;
                let q2 = g.reshape(qh, &[b * h, t, dh])?;
                g.bmm(q2, kh, true)?
            }
        };
        let scores = g.reshape(scores, &[b, h, t, t])?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_rows(scores, Some(causal))?;
        let att_d = g.dropout(att, self.config.attn_dropout);
        let att3 = g.reshape(att_d, &[b * h, t, t])?;
        let y = g.bmm(att3, vh, false)?;
        let y = g.reshape(y, &[b, h, t, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, t, d])?;
        let y = self.linear(g, y, &p.o)?;
        let y = g.dropout(y, self.config.dropout);
        let x = g.add(x, y)?;
        let ln = self.layer_norm(g, x, p.ln2)?;
        let f = self.linear(g, ln, &p.ff1)?;
        let f = g.gelu(f);
        let f = self.linear(g, f, &p.ff2)?;
        let f = g.dropout(f, self.config.dropout);
        Ok((g.add(x, f)?, att))
    }

    fn attach_head(
        &self,
        g: &mut Graph,
        hl: Var,
        batch: &Batch,
        idx: &Rc<[usize]>,
        a: &AttachIds,
    ) -> Result<Var, ModelError> {
        let (b, t, d) = (batch.batch, batch.len, self.config.d_model);
        let wte = g.param(&self.params, self.ids.wte);
        let e = g.gather(wte, &batch.next_tokens)?;
        let e = g.reshape(e, &[b, t, d])?;
        let qa = self.linear(g, hl, &a.qa)?;
        let nwq = self.fuse(g, qa, e, &a.nwq)?;
        let nwq3 = g.reshape(nwq, &[b * t, 1, d])?;
        match &a.key {
            AttachKeyIds::Mlp {
                ka,
                c,
                beta,
                dm,
                b1,
                w2,
                b2,
            } => {
                let inv = 1.0 / (d as f64).sqrt();
                let nwk = self.fuse(g, qa, e, &a.nwk)?;
                let ka = self.linear(g, hl, ka)?;
                let cw = g.param(&self.params, *c);
                let b1 = g.param(&self.params, *b1);
                let kac = g.matmul(ka, cw)?;
                let kac = g.add_row(kac, b1)?;
                let beta = g.param(&self.params, *beta);
                let dm = g.param(&self.params, *dm);
                let table = g.matmul(beta, dm)?;
                let pre = g.augment_keys(kac, table, idx.clone(), 1)?;
                let hidden = g.gelu(pre);
                let hidden = g.reshape(hidden, &[b * t, t, d])?;
                let w2 = g.param(&self.params, *w2);
                let u = g.matmul_t(nwq, w2)?;
                let u = g.reshape(u, &[b * t, 1, d])?;
                let s = g.bmm(u, hidden, true)?;
                let s = g.reshape(s, &[b, t, t])?;
                let b2 = g.param(&self.params, *b2);
                let off = g.matmul(nwq, b2)?;
                let s = g.add_col(s, off)?;
                let s = g.scale(s, inv);
                let nwk3 = g.reshape(nwk, &[b * t, 1, d])?;
                let sv = g.bmm(nwq3, nwk3, true)?;
                let sv = g.reshape(sv, &[b, t])?;
                let sv = g.scale(sv, inv);
                Ok(g.insert_self_slot(s, sv)?)
            }
            AttachKeyIds::Bilinear { w } => {
                let w = g.param(&self.params, *w);
                let u = g.matmul_t(nwq, w)?;
                let s = g.bmm(u, hl, true)?;
                let u3 = g.reshape(u, &[b * t, 1, d])?;
                let sv = g.bmm(nwq3, u3, true)?;
                let sv = g.reshape(sv, &[b, t])?;
                Ok(g.insert_self_slot(s, sv)?)
            }
        }
    }

    /// Records the full forward pass for a batch on `g`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<ForwardVars, ModelError> {
        self.check_batch(batch)?;
        let (b, t, d) = (batch.batch, batch.len, self.config.d_model);
        let needs_tape = self.ids.layers.iter().any(|l| l.depth.is_some())
            || matches!(
                self.ids.attach.as_ref().map(|a| &a.key),
                Some(AttachKeyIds::Mlp { .. })
            );
        let idx: Rc<[usize]> = if needs_tape {
            self.tape_indices(batch)?
        } else {
            Rc::from(Vec::new())
        };
        let causal: Vec<bool> = (0..t * t).map(|n| n % t <= n / t).collect();

        let wte = g.param(&self.params, self.ids.wte);
        let wpe = g.param(&self.params, self.ids.wpe);
        let tok = g.gather(wte, &batch.tokens)?;
        let positions: Vec<usize> = (0..b * t).map(|n| n % t).collect();
        let pos = g.gather(wpe, &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.reshape(x, &[b, t, d])?;
        let mut x = g.dropout(x, self.config.dropout);
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (y, att) = self.block(g, l, x, &idx, &causal, b, t)?;
            x = y;
            attention.push(att);
        }
        let hidden = self.layer_norm(g, x, self.ids.ln_f)?;
        let lm_logits = self.linear(g, hidden, &self.ids.lm_head)?;
        let attach_logits = match &self.ids.attach {
            Some(a) => Some(self.attach_head(g, hidden, batch, &idx, a)?),
            None => None,
        };
        Ok(ForwardVars {
            lm_logits,
            attach_logits,
            attention,
            hidden,
        })
    }

    /// LM cross entropy plus `lambda` times attachment cross entropy.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardVars,
        batch: &Batch,
        lambda: f64,
    ) -> Result<LossVars, ModelError> {
        let lm = g.cross_entropy(out.lm_logits, &batch.lm_targets)?;
        let attach = match out.attach_logits {
            Some(a) if self.config.mode != Mode::BasePlain => {
                Some(g.cross_entropy(a, &batch.attach_targets)?)
            }
            _ => None,
        };
        let total = match attach {
            Some(a) if lambda != 0.0 => {
                let weighted = g.scale(a, lambda);
                g.add(lm, weighted)?
            }
            _ => lm,
        };
        Ok(LossVars { total, lm, attach })
    }

    /// Eval-mode forward returning plain tensors.
    pub fn forward_values(&self, batch: &Batch) -> Result<ForwardOutputs, ModelError> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, batch)?;
        Ok(ForwardOutputs {
            lm_logits: g.value(v.lm_logits).clone(),
            attach_logits: v.attach_logits.map(|a| g.value(a).clone()),
            attention: v.attention.iter().map(|&a| g.value(a).clone()).collect(),
            hidden: g.value(v.hidden).clone(),
        })
    }

    /// Builds the incremental inference view (precomputes depth-key tables).
    pub fn inference(&self) -> Inference<'_> {
        Inference::new(self)
    }
}

#[cfg(test)]
mod tests;
