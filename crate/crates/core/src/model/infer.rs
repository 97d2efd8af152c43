//! One-position-at-a-time forward pass for decoding.
//!
//! Every arithmetic step mirrors the graph forward using the same kernels in
//! the same order, so cached decoding reproduces teacher-forced logits bit for
//! bit. A position's activations are computed with the tape as it stood when
//! that position was added and are never revised afterwards.

use std::sync::Arc;

use super::{AttachKeyIds, FuseIds, Linear, ModelError, PushdownModel};
use crate::autodiff::kernels;
use crate::autodiff::ParamId;
use crate::stack::StackState;

/// Cached per-position activations: per-layer keys and values, the final
/// hidden state, and the position's attachment-key pre-activation.
#[derive(Clone, Debug)]
pub struct PositionCache {
    pub token: usize,
    pub pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pub hidden: Vec<f64>,
    attach_key: Vec<f64>,
}

/// Read-only decoding view of a model.
pub struct Inference<'a> {
    model: &'a PushdownModel,
    /// Per layer, `E · W_key` for pushdown layers.
    depth_keys: Vec<Option<Vec<f64>>>,
    /// `β · D` of the attachment key MLP.
    attach_depth: Option<Vec<f64>>,
}

/// Unnormalized attachment logits: slots `0..=k` are tokens, slot `k + 1`
/// is the shift.
pub type AttachScores = Vec<f64>;

fn affine(x: &[f64], w: &[f64], b: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut y = kernels::matmul(x, w, 1, k, n);
    kernels::add_in_place(&mut y, b);
    y
}

impl<'a> Inference<'a> {
    pub(crate) fn new(model: &'a PushdownModel) -> Self {
        let d = model.config.d_model;
        let rows = model.config.max_depth + 1;
        let p = &model.params;
        let depth_keys = model
            .ids
            .layers
            .iter()
            .map(|l| {
                l.depth
                    .map(|e| kernels::matmul(p.get(e).data(), p.get(l.k.w).data(), rows, d, d))
            })
            .collect();
        let attach_depth = model.ids.attach.as_ref().and_then(|a| match &a.key {
            AttachKeyIds::Mlp { beta, dm, .. } => Some(kernels::matmul(
                p.get(*beta).data(),
                p.get(*dm).data(),
                rows,
                d,
                d,
            )),
            AttachKeyIds::Bilinear { .. } => None,
        });
        Self {
            model,
            depth_keys,
            attach_depth,
        }
    }

    pub fn model(&self) -> &PushdownModel {
        self.model
    }

    fn data(&self, id: ParamId) -> &[f64] {
        self.model.params.get(id).data()
    }

    fn linear(&self, x: &[f64], p: &Linear) -> Vec<f64> {
        let shape = self.model.params.get(p.w).shape();
        affine(x, self.data(p.w), self.data(p.b), shape[0], shape[1])
    }

    fn layer_norm(&self, x: &[f64], p: (ParamId, ParamId)) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, self.data(p.0), self.data(p.1), &mut out);
        out
    }

    fn fuse(&self, x: &[f64], e: &[f64], p: &FuseIds) -> Vec<f64> {
        let d = x.len();
        let xa = kernels::matmul(x, self.data(p.a), 1, d, d);
        let eb = kernels::matmul(e, self.data(p.b), 1, d, d);
        let mut s: Vec<f64> = xa.iter().zip(&eb).map(|(a, b)| a + b).collect();
        kernels::add_in_place(&mut s, self.data(p.b1));
        let h: Vec<f64> = s.iter().map(|&v| kernels::gelu(v)).collect();
        self.linear(&h, &p.out)
    }

    /// Adds token `token` at position `prefix.len()`. `tape` is the stack
    /// tape after this token's attachment (length `prefix.len() + 1`).
    pub fn step(
        &self,
        prefix: &[Arc<PositionCache>],
        token: usize,
        tape: &[usize],
    ) -> Result<PositionCache, ModelError> {
        let cfg = &self.model.config;
        let pos = prefix.len();
        if pos >= cfg.max_len {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max: cfg.max_len,
            });
        }
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        assert_eq!(tape.len(), pos + 1, "tape must cover the new position");
        let (d, h) = (cfg.d_model, cfg.heads);
        let dh = d / h;
        let idx: Vec<usize> = tape
            .iter()
            .map(|&s| self.model.depth_index(s))
            .collect::<Result<_, _>>()?;
        let ids = &self.model.ids;
        let wte = self.data(ids.wte);
        let wpe = self.data(ids.wpe);
        let mut x: Vec<f64> = wte[token * d..(token + 1) * d]
            .iter()
            .zip(&wpe[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        let inv_dh = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; pos + 1];
        let mut probs = vec![0.0; pos + 1];
        let mut kd = vec![0.0; dh];
        for (l, p) in ids.layers.iter().enumerate() {
            let ln = self.layer_norm(&x, p.ln1);
            let q = self.linear(&ln, &p.q);
            let k = self.linear(&ln, &p.k);
            let v = self.linear(&ln, &p.v);
            let key_of = |j: usize| -> &[f64] {
                if j == pos {
                    &k
                } else {
                    &prefix[j].keys[l]
                }
            };
            let val_of = |j: usize| -> &[f64] {
                if j == pos {
                    &v
                } else {
                    &prefix[j].values[l]
                }
            };
            let mut y = vec![0.0; d];
            for hh in 0..h {
                let hs = hh * dh..(hh + 1) * dh;
                let qh = &q[hs.clone()];
                for j in 0..=pos {
                    let kj = &key_of(j)[hs.clone()];
                    let s = match &self.depth_keys[l] {
                        Some(table) => {
                            let row = &table[idx[j] * d..(idx[j] + 1) * d][hs.clone()];
                            for c in 0..dh {
                                kd[c] = kj[c] + row[c];
                            }
                            0.0 + kernels::dot(qh, &kd)
                        }
                        None => 0.0 + kernels::dot(qh, kj),
                    };
                    scores[j] = s * inv_dh;
                }
                kernels::softmax_masked_row(&scores, |_| true, &mut probs);
                let yh = &mut y[hs.clone()];
                for (j, &pj) in probs.iter().enumerate() {
                    let vj = &val_of(j)[hs.clone()];
                    for (o, &vv) in yh.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
            let o = self.linear(&y, &p.o);
            x = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let ln2 = self.layer_norm(&x, p.ln2);
            let f = self.linear(&ln2, &p.ff1);
            let f: Vec<f64> = f.iter().map(|&z| kernels::gelu(z)).collect();
            let f = self.linear(&f, &p.ff2);
            x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
            keys.push(k);
            values.push(v);
        }
        let hidden = self.layer_norm(&x, ids.ln_f);
        let attach_key = match ids.attach.as_ref().map(|a| &a.key) {
            Some(AttachKeyIds::Mlp { ka, c, b1, .. }) => {
                let ka = self.linear(&hidden, ka);
                let mut kac = kernels::matmul(&ka, self.data(*c), 1, d, d);
                kernels::add_in_place(&mut kac, self.data(*b1));
                kac
            }
            _ => Vec::new(),
        };
        Ok(PositionCache {
            token,
            pos,
            keys,
            values,
            hidden,
            attach_key,
        })
    }

    /// Next-token logits from a position's hidden state.
    pub fn lm_logits(&self, cache: &PositionCache) -> Vec<f64> {
        self.linear(&cache.hidden, &self.model.ids.lm_head)
    }

    /// Next-token log-probabilities.
    pub fn lm_log_probs(&self, cache: &PositionCache) -> Vec<f64> {
        let logits = self.lm_logits(cache);
        let mut out = vec![0.0; logits.len()];
        kernels::log_softmax_masked_row(&logits, |_| true, &mut out);
        out
    }

    /// Attachment logits for `next_token` arriving after `prefix` (positions
    /// `0..=k`), given the current tape `𝒲_k`.
    pub fn attach_logits(
        &self,
        prefix: &[Arc<PositionCache>],
        tape: &[usize],
        next_token: usize,
    ) -> Result<AttachScores, ModelError> {
        let a = self
            .model
            .ids
            .attach
            .as_ref()
            .ok_or(ModelError::NoAttachHead)?;
        let cfg = &self.model.config;
        if next_token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: next_token,
                vocab: cfg.vocab_size,
            });
        }
        let k = prefix.len() - 1;
        assert_eq!(tape.len(), k + 1);
        let d = cfg.d_model;
        let wte = self.data(self.model.ids.wte);
        let e = &wte[next_token * d..(next_token + 1) * d];
        let cur = &prefix[k];
        let qa = self.linear(&cur.hidden, &a.qa);
        let nwq = self.fuse(&qa, e, &a.nwq);
        let mut out = Vec::with_capacity(k + 2);
        match &a.key {
            AttachKeyIds::Mlp { w2, b2, .. } => {
                let inv = 1.0 / (d as f64).sqrt();
                let nwk = self.fuse(&qa, e, &a.nwk);
                let table = self
                    .attach_depth
                    .as_ref()
                    .expect("mlp head has a depth table");
                let u = kernels::matmul_nt(&nwq, self.data(*w2), 1, d, d);
                let off = kernels::matmul(&nwq, self.data(*b2), 1, d, 1)[0];
                let mut hid = vec![0.0; d];
                for (j, pc) in prefix.iter().enumerate() {
                    let s = self.model.depth_index(tape[j])?;
                    let row = &table[s * d..(s + 1) * d];
                    for c in 0..d {
                        hid[c] = kernels::gelu(pc.attach_key[c] + row[c]);
                    }
                    out.push(((0.0 + kernels::dot(&u, &hid)) + off) * inv);
                }
                out.push((0.0 + kernels::dot(&nwq, &nwk)) * inv);
            }
            AttachKeyIds::Bilinear { w } => {
                let u = kernels::matmul_nt(&nwq, self.data(*w), 1, d, d);
                for pc in prefix {
                    out.push(0.0 + kernels::dot(&u, &pc.hidden));
                }
                out.push(0.0 + kernels::dot(&nwq, &u));
            }
        }
        Ok(out)
    }

    /// Teacher-forced pass over `(ids, r)`, one cache entry per position.
    pub fn run(&self, ids: &[usize], r: &[usize]) -> Result<Vec<Arc<PositionCache>>, ModelError> {
        let mut state = StackState::new();
        let mut caches: Vec<Arc<PositionCache>> = Vec::with_capacity(ids.len());
        for (k, (&tok, &rk)) in ids.iter().zip(r).enumerate() {
            state.apply(k, rk)?;
            let c = self.step(&caches, tok, state.tape())?;
            caches.push(Arc::new(c));
        }
        Ok(caches)
    }
}

/// Log-softmax of `logits` restricted to `mask` (renormalized over the
/// allowed slots; the rest are −∞).
pub fn masked_log_probs(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    kernels::log_softmax_masked_row(logits, |j| mask[j], &mut out);
    out
}
