use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Gelu(usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    AugmentKeys {
        keys: usize,
        table: usize,
        idx: Rc<[usize]>,
        batch: usize,
        len: usize,
        heads: usize,
    },
    PushdownScores {
        q: usize,
        keys: usize,
        table: usize,
        idx: Rc<[usize]>,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    MaskFill {
        x: usize,
        mask: Rc<[bool]>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    InsertSelfSlot {
        attach: usize,
        selfv: usize,
        batch: usize,
        len: usize,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`] for the non-parameter leaves
/// created with [`Graph::variable`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }
}

/// A tape of recorded tensor operations supporting one reverse sweep per
/// call to [`Graph::backward`]. Parameter gradients accumulate into the
/// [`ParamStore`] across calls; zero them with [`ParamStore::zero_grad`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    mul_count: u64,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn zeros_like(len: usize) -> Vec<f64> {
    vec![0.0; len]
}

impl Graph {
    /// New graph in eval mode (dropout disabled).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// New graph; `training` enables dropout, seeded by `seed`.
    pub fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mul_count: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplications performed by matrix products so far.
    pub fn mul_count(&self) -> u64 {
        self.mul_count
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: usize) -> &[f64] {
        self.nodes[v].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported in [`Gradients`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec());
        self.push(value, Op::Param(id), &[])
    }

    // ------------------------------------------------------------------
    // products
    // ------------------------------------------------------------------

    /// `a[.., k] · b[k, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != bk {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let m = sa[..sa.len() - 1].iter().product();
        let out = if trans_b {
            kernels::matmul_nt(self.data(a.0), self.data(b.0), m, k, n)
        } else {
            kernels::matmul(self.data(a.0), self.data(b.0), m, k, n)
        };
        self.mul_count += (m * k * n) as u64;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// Batched product `a[g, m, k] · b[g, k, n]` (or `b[g, n, k]ᵀ` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if sb[0] != g {
            return Err(TensorError::BatchMismatch { lhs: sa, rhs: sb });
        }
        if bk != k {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let ad = self.data(a.0);
            let bd = self.data(b.0);
            for gi in 0..g {
                let ab = &ad[gi * m * k..(gi + 1) * m * k];
                let bb = &bd[gi * k * n..(gi + 1) * k * n];
                let ob = &mut out[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    kernels::matmul_nt_acc(ab, bb, m, k, n, ob);
                } else {
                    kernels::matmul_acc(ab, bb, m, k, n, ob);
                }
            }
        }
        self.mul_count += (g * m * k * n) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
                g,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// Queries cast to 3D `[n_d, 1, d]` against per-query keys
    /// `[n_d, n_s, d]`, giving `[n_d, 1, n_s]` scores. Performs
    /// `n_d · n_s · d` multiplications, the same as a plain `Q·Kᵀ`.
    pub fn batched_matmul_3d(&mut self, q: Var, k: Var) -> Result<Var, TensorError> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || sq[1] != 1 {
            return Err(shape_err("batched_matmul_3d", &sq, self.shape(k)));
        }
        self.bmm(q, k, true)
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Add(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Sub(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mul(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a.0, c), &[a.0])
    }

    /// `x[.., n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[sx.len() - 1] {
            return Err(shape_err("add_row", &sx, &sb));
        }
        let n = sb[0];
        let mut out = self.data(x.0).to_vec();
        let b = self.data(bias.0);
        for row in out.chunks_mut(n) {
            kernels::add_in_place(row, b);
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::AddRow(x.0, bias.0),
            &[x.0, bias.0],
        ))
    }

    /// `x[.., n] + col[..]`, each row shifted by its own scalar.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sc = self.shape(col).to_vec();
        if sx.is_empty() || sc.iter().product::<usize>() * sx[sx.len() - 1] != self.value(x).numel()
        {
            return Err(shape_err("add_col", &sx, &sc));
        }
        let n = sx[sx.len() - 1];
        let mut out = self.data(x.0).to_vec();
        let c = self.data(col.0);
        for (row, &cv) in out.chunks_mut(n).zip(c) {
            row.iter_mut().for_each(|v| *v += cv);
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::AddCol(x.0, col.0),
            &[x.0, col.0],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x.0).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x.0).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x.0), &[x.0])
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| shape_err("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let xd = self.data(x.0);
        let g = self.data(gamma.0);
        let b = self.data(beta.0);
        let mut out = vec![0.0; xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / n.max(1));
        for (xr, or) in xd.chunks(n).zip(out.chunks_mut(n)) {
            stats.push(kernels::layer_norm_row(xr, g, b, or));
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                stats,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row lookup `table[ids[i], :]` with scatter-add backward.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("gather", &st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        let td = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Depth-augmented 3D keys: for keys `[B, T, d]`, a depth table `[R, d]`
    /// and per-(query, key) row indices `idx[B·T·T]`, produces
    /// `out[b, h, i, j, :] = keys[b, j, h-slice] + table[idx[b, i, j], h-slice]`
    /// with shape `[B, heads, T, T, d/heads]`.
    pub fn augment_keys(
        &mut self,
        keys: Var,
        table: Var,
        idx: Rc<[usize]>,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let sk = self.shape(keys).to_vec();
        let st = self.shape(table).to_vec();
        if sk.len() != 3 || st.len() != 2 || st[1] != sk[2] || heads == 0 || !sk[2].is_multiple_of(heads) {
            return Err(shape_err("augment_keys", &sk, &st));
        }
        let (b, t, d) = (sk[0], sk[1], sk[2]);
        if idx.len() != b * t * t {
            return Err(shape_err("augment_keys", &sk, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&s| s >= st[0]) {
            return Err(TensorError::Index {
                op: "augment_keys",
                index: bad,
                bound: st[0],
            });
        }
        let dh = d / heads;
        let kd = self.data(keys.0);
        let td = self.data(table.0);
        let mut out = vec![0.0; b * heads * t * t * dh];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        let s = idx[(bi * t + i) * t + j];
                        let krow = &kd[(bi * t + j) * d + h * dh..(bi * t + j) * d + (h + 1) * dh];
                        let trow = &td[s * d + h * dh..s * d + (h + 1) * dh];
                        let o = (((bi * heads + h) * t + i) * t + j) * dh;
                        for c in 0..dh {
                            out[o + c] = krow[c] + trow[c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, heads, t, t, dh], out),
            Op::AugmentKeys {
                keys: keys.0,
                table: table.0,
                idx,
                batch: b,
                len: t,
                heads,
            },
            &[keys.0, table.0],
        ))
    }

    /// Fused `augment_keys` plus `batched_matmul_3d` restricted to the causal
    /// triangle: for split queries `q[B, H, T, dh]`, keys `[B, T, d]`, a depth
    /// table `[R, d]` and indices `idx[B·T·T]`, gives `[B, H, T, T]` scores
    /// `q[b,h,i] · (keys[b,j,h] + table[idx[b,i,j],h])` for `j ≤ i` and 0
    /// above the diagonal. Each score is summed in the same order as the
    /// unfused route, without materializing the per-query keys.
    pub fn pushdown_scores(
        &mut self,
        q: Var,
        keys: Var,
        table: Var,
        idx: Rc<[usize]>,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(keys).to_vec();
        let st = self.shape(table).to_vec();
        if sk.len() != 3 || st.len() != 2 || st[1] != sk[2] || heads == 0 || !sk[2].is_multiple_of(heads) {
            return Err(shape_err("pushdown_scores", &sk, &st));
        }
        let (b, t, d) = (sk[0], sk[1], sk[2]);
        let dh = d / heads;
        if sq != [b, heads, t, dh] {
            return Err(shape_err("pushdown_scores", &sq, &sk));
        }
        if idx.len() != b * t * t {
            return Err(shape_err("pushdown_scores", &sk, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&s| s >= st[0]) {
            return Err(TensorError::Index {
                op: "pushdown_scores",
                index: bad,
                bound: st[0],
            });
        }
        let (qd, kd, td) = (self.data(q.0), self.data(keys.0), self.data(table.0));
        let mut out = vec![0.0; b * heads * t * t];
        let mut kk = vec![0.0; dh];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let qrow = &qd[((bi * heads + h) * t + i) * dh..][..dh];
                    for j in 0..=i {
                        let s = idx[(bi * t + i) * t + j];
                        let krow = &kd[(bi * t + j) * d + h * dh..][..dh];
                        let trow = &td[s * d + h * dh..][..dh];
                        for c in 0..dh {
                            kk[c] = krow[c] + trow[c];
                        }
                        out[((bi * heads + h) * t + i) * t + j] = 0.0 + kernels::dot(qrow, &kk);
                    }
                }
            }
        }
        self.mul_count += (b * heads * t * (t + 1) / 2 * dh) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![b, heads, t, t], out),
            Op::PushdownScores {
                q: q.0,
                keys: keys.0,
                table: table.0,
                idx,
                batch: b,
                len: t,
                heads,
            },
            &[q.0, keys.0, table.0],
        ))
    }

    /// Inverted dropout in training mode; the identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .data(x.0)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Dropout { x: x.0, mask },
            &[x.0],
        )
    }

    /// Softmax over the last dimension. `mask` (true = keep) either matches
    /// `x` element for element or tiles it over leading dimensions. Masked
    /// entries come out as exact zeros; a fully masked row is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let n = *sx
            .last()
            .ok_or_else(|| shape_err("softmax_rows", &sx, &[]))?;
        let numel = self.value(x).numel();
        if let Some(m) = mask {
            if m.is_empty() || !numel.is_multiple_of(m.len()) || m.len() % n != 0 {
                return Err(shape_err("softmax_rows", &sx, &[m.len()]));
            }
        }
        let xd = self.data(x.0);
        let mut out = vec![0.0; numel];
        for (r, (xr, or)) in xd.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let ok = match mask {
                Some(m) => {
                    let off = (r * n) % m.len();
                    kernels::softmax_masked_row(xr, |j| m[off + j], or)
                }
                None => kernels::softmax_masked_row(xr, |_| true, or),
            };
            if !ok {
                return Err(TensorError::FullyMasked { row: r });
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::Softmax { x: x.0 }, &[x.0]))
    }

    /// Replaces entries where `mask` is false with −∞ (mask tiles like in
    /// [`Graph::softmax_rows`]).
    pub fn mask_fill_neg_inf(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var, TensorError> {
        let numel = self.value(x).numel();
        if mask.is_empty() || !numel.is_multiple_of(mask.len()) {
            return Err(shape_err("mask_fill", self.shape(x), &[mask.len()]));
        }
        let out: Vec<f64> = self
            .data(x.0)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if mask[i % mask.len()] {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskFill { x: x.0, mask },
            &[x.0],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits[n, V]`; `None` targets are ignored. −∞ logits are allowed.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() < 2 {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let v = sl[sl.len() - 1];
        let rows = self.value(logits).numel() / v;
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let ld = self.data(logits.0);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            let pr = &mut probs[r * v..(r + 1) * v];
            if !kernels::softmax_masked_row(row, |_| true, pr) {
                return Err(TensorError::FullyMasked { row: r });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::EmptyTargets);
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", &sx, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_data(self.data(x.0), &sx, perm);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.data(x.0).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Reshape(x.0),
            &[x.0],
        ))
    }

    /// Builds `[B, T, T+1]` attachment logits from candidate scores
    /// `[B, T, T]` and self scores `[B, T]`: row `i` keeps candidates
    /// `j ≤ i`, places the self score at slot `i + 1`, and is −∞ beyond.
    pub fn insert_self_slot(&mut self, attach: Var, selfv: Var) -> Result<Var, TensorError> {
        let sa = self.shape(attach).to_vec();
        let ss = self.shape(selfv).to_vec();
        if sa.len() != 3 || sa[1] != sa[2] || ss != sa[..2] {
            return Err(shape_err("insert_self_slot", &sa, &ss));
        }
        let (b, t) = (sa[0], sa[1]);
        let ad = self.data(attach.0);
        let sd = self.data(selfv.0);
        let mut out = vec![f64::NEG_INFINITY; b * t * (t + 1)];
        for bi in 0..b {
            for i in 0..t {
                let o = (bi * t + i) * (t + 1);
                let a = (bi * t + i) * t;
                out[o..o + i + 1].copy_from_slice(&ad[a..a + i + 1]);
                out[o + i + 1] = sd[bi * t + i];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, t, t + 1], out),
            Op::InsertSelfSlot {
                attach: attach.0,
                selfv: selfv.0,
                batch: b,
                len: t,
            },
            &[attach.0, selfv.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x.0).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Parameter gradients are added
    /// to the store (accumulating across calls); gradients of
    /// [`Graph::variable`] leaves are returned.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Param(pid) => params.get_mut(*pid).accumulate_grad(&g),
                op => self.propagate(id, op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($id:expr) => {{
                let id = $id;
                let len = self.nodes[id].value.numel();
                grads[id].get_or_insert_with(|| zeros_like(len))
            }};
        }
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let ga = acc!(a);
                    if trans_b {
                        kernels::matmul_acc(g, bd, m, n, k, ga);
                    } else {
                        kernels::matmul_nt_acc(g, bd, m, n, k, ga);
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let gb = acc!(b);
                    if trans_b {
                        kernels::matmul_tn_acc(g, ad, m, n, k, gb);
                    } else {
                        kernels::matmul_tn_acc(ad, g, m, k, n, gb);
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                g: groups,
                m,
                k,
                n,
            } => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let ga = acc!(a);
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let gab = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            kernels::matmul_acc(gg, bb, m, n, k, gab);
                        } else {
                            kernels::matmul_nt_acc(gg, bb, m, n, k, gab);
                        }
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let gb = acc!(b);
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let gbb = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            kernels::matmul_tn_acc(gg, ab, m, n, k, gbb);
                        } else {
                            kernels::matmul_tn_acc(ab, gg, m, k, n, gbb);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    kernels::add_in_place(acc!(a), g);
                }
                if self.needs(b) {
                    kernels::add_in_place(acc!(b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    kernels::add_in_place(acc!(a), g);
                }
                if self.needs(b) {
                    acc!(b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let ga = acc!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let gb = acc!(b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                acc!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
            }
            Op::AddRow(x, bias) => {
                if self.needs(x) {
                    kernels::add_in_place(acc!(x), g);
                }
                if self.needs(bias) {
                    let gb = acc!(bias);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        kernels::add_in_place(gb, row);
                    }
                }
            }
            Op::AddCol(x, col) => {
                if self.needs(x) {
                    kernels::add_in_place(acc!(x), g);
                }
                if self.needs(col) {
                    let gc = acc!(col);
                    let n = g.len() / gc.len();
                    for (c, row) in gc.iter_mut().zip(g.chunks(n)) {
                        *c += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(x);
                let gx = acc!(x);
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(x);
                let gx = acc!(x);
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref stats,
            } => {
                let n = self.value_of(gamma).numel();
                let xd = self.data(x);
                let gam = self.data(gamma);
                if self.needs(gamma) || self.needs(beta) {
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for (r, (xr, gr)) in xd.chunks(n).zip(g.chunks(n)).enumerate() {
                        let (mean, inv) = stats[r];
                        for c in 0..n {
                            gg[c] += gr[c] * (xr[c] - mean) * inv;
                            gbeta[c] += gr[c];
                        }
                    }
                    if self.needs(gamma) {
                        kernels::add_in_place(acc!(gamma), &gg);
                    }
                    if self.needs(beta) {
                        kernels::add_in_place(acc!(beta), &gbeta);
                    }
                }
                if self.needs(x) {
                    let gx = acc!(x);
                    let nf = n as f64;
                    let mut dy = vec![0.0; n];
                    for (r, ((xr, gr), gxr)) in xd
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let (mean, inv) = stats[r];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..n {
                            dy[c] = gr[c] * gam[c];
                            sum_dy += dy[c];
                            sum_dy_xhat += dy[c] * (xr[c] - mean) * inv;
                        }
                        for c in 0..n {
                            let xhat = (xr[c] - mean) * inv;
                            gxr[c] += inv / nf * (nf * dy[c] - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
            }
            Op::Gather { table, ref ids } => {
                let d = self.shape_of(table)[1];
                let gt = acc!(table);
                for (r, &i) in ids.iter().enumerate() {
                    kernels::add_in_place(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::AugmentKeys {
                keys,
                table,
                ref idx,
                batch,
                len,
                heads,
            } => {
                let d = self.shape_of(keys)[2];
                let dh = d / heads;
                let t = len;
                if self.needs(keys) {
                    let gk = acc!(keys);
                    for bi in 0..batch {
                        for h in 0..heads {
                            for i in 0..t {
                                for j in 0..t {
                                    let o = (((bi * heads + h) * t + i) * t + j) * dh;
                                    let k0 = (bi * t + j) * d + h * dh;
                                    kernels::add_in_place(&mut gk[k0..k0 + dh], &g[o..o + dh]);
                                }
                            }
                        }
                    }
                }
                if self.needs(table) {
                    let gt = acc!(table);
                    for bi in 0..batch {
                        for h in 0..heads {
                            for i in 0..t {
                                for j in 0..t {
                                    let s = idx[(bi * t + i) * t + j];
                                    let o = (((bi * heads + h) * t + i) * t + j) * dh;
                                    let t0 = s * d + h * dh;
                                    kernels::add_in_place(&mut gt[t0..t0 + dh], &g[o..o + dh]);
                                }
                            }
                        }
                    }
                }
            }
            Op::PushdownScores {
                q,
                keys,
                table,
                ref idx,
                batch,
                len: t,
                heads,
            } => {
                let d = self.shape_of(keys)[2];
                let dh = d / heads;
                let (qd, kd, td) = (self.data(q), self.data(keys), self.data(table));
                let mut gq = self.needs(q).then(|| vec![0.0; qd.len()]);
                let mut gk = self.needs(keys).then(|| vec![0.0; kd.len()]);
                let mut gt = self.needs(table).then(|| vec![0.0; td.len()]);
                for bi in 0..batch {
                    for h in 0..heads {
                        for i in 0..t {
                            let qo = ((bi * heads + h) * t + i) * dh;
                            for j in 0..=i {
                                let gs = g[((bi * heads + h) * t + i) * t + j];
                                if gs == 0.0 {
                                    continue;
                                }
                                let s = idx[(bi * t + i) * t + j];
                                let ko = (bi * t + j) * d + h * dh;
                                let to = s * d + h * dh;
                                if let Some(gq) = gq.as_mut() {
                                    for c in 0..dh {
                                        gq[qo + c] += gs * (kd[ko + c] + td[to + c]);
                                    }
                                }
                                if let Some(gk) = gk.as_mut() {
                                    for c in 0..dh {
                                        gk[ko + c] += gs * qd[qo + c];
                                    }
                                }
                                if let Some(gt) = gt.as_mut() {
                                    for c in 0..dh {
                                        gt[to + c] += gs * qd[qo + c];
                                    }
                                }
                            }
                        }
                    }
                }
                for (node, grad) in [(q, gq), (keys, gk), (table, gt)] {
                    if let Some(gr) = grad {
                        kernels::add_in_place(acc!(node), &gr);
                    }
                }
            }
            Op::Dropout { x, ref mask } => {
                let gx = acc!(x);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::Softmax { x } => {
                let y = self.data(id);
                let n = *self.shape_of(x).last().unwrap();
                let gx = acc!(x);
                for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dotp = kernels::dot(yr, gr);
                    for c in 0..n {
                        gxr[c] += yr[c] * (gr[c] - dotp);
                    }
                }
            }
            Op::MaskFill { x, ref mask } => {
                let gx = acc!(x);
                for i in 0..g.len() {
                    if mask[i % mask.len()] {
                        gx[i] += g[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref probs,
                count,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / count as f64;
                let gl = acc!(logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..v {
                        gl[r * v + c] += scale * probs[r * v + c];
                    }
                    gl[r * v + t] -= scale;
                }
            }
            Op::Permute { x, ref perm } => {
                let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape_of(x)[p]).collect();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                kernels::add_in_place(acc!(x), &back);
            }
            Op::Reshape(x) => {
                kernels::add_in_place(acc!(x), g);
            }
            Op::InsertSelfSlot {
                attach,
                selfv,
                batch,
                len,
            } => {
                let t = len;
                if self.needs(attach) {
                    let ga = acc!(attach);
                    for bi in 0..batch {
                        for i in 0..t {
                            let o = (bi * t + i) * (t + 1);
                            let a = (bi * t + i) * t;
                            kernels::add_in_place(&mut ga[a..a + i + 1], &g[o..o + i + 1]);
                        }
                    }
                }
                if self.needs(selfv) {
                    let gs = acc!(selfv);
                    for bi in 0..batch {
                        for i in 0..t {
                            gs[bi * t + i] += g[(bi * t + i) * (t + 1) + i + 1];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = acc!(x);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }

    fn value_of(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn shape_of(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut index = vec![0; rank];
    let mut offset = 0;
    loop {
        out.push(data[offset]);
        let mut ax = rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
}
