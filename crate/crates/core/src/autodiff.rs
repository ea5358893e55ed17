//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates one vector-Jacobian product per recorded use of an input.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{self, HeadCache};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryConfig};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        caches: Vec<HeadCache>,
    },
    Fir {
        p: Var,
        a: Var,
        c: Option<Var>,
        cfg: MemoryConfig,
        identity: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder. Single-threaded; one tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` when `v` does
    /// not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks_exact(d) {
            let (mean, r) = tensor::row_stats(row);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product core: `q` is `[Tq × h·d_k]`, `k` is
    /// `[Tk × h·d_k]`, `v` is `[Tk × h·d_v]`; heads occupy consecutive column
    /// blocks. Returns the concatenated per-head contexts `[Tq × h·d_v]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Rc<[bool]>>,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let (ctx, caches) = attention::heads_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            mask,
            dropout,
        )?;
        Ok(self.push(
            ctx,
            Op::Attention {
                q,
                k,
                v,
                heads,
                caches,
            },
        ))
    }

    /// Per-head attention probabilities recorded by an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[node.0].op {
            Op::Attention { caches, .. } => Some(caches.iter().map(HeadCache::weights).collect()),
            _ => None,
        }
    }

    /// FIR memory taps over the rows of `p` (time axis). When `identity` is
    /// set the unweighted `p_t` term is included.
    pub fn fir(
        &mut self,
        p: Var,
        a: Var,
        c: Option<Var>,
        cfg: MemoryConfig,
        identity: bool,
    ) -> Result<Var> {
        let out = memory::fir_forward(
            self.value(p),
            self.value(a),
            c.map(|c| self.value(c)),
            &cfg,
            identity,
        )?;
        Ok(self.push(
            out,
            Op::Fir {
                p,
                a,
                c,
                cfg,
                identity,
            },
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding of empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut dyn rand::RngCore) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, keep })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Summed label-smoothed cross-entropy of `logits` rows against
    /// `targets` (one id per row). See [`crate::trainer::label_smoothed_ce`].
    pub fn smoothed_ce_sum(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2("smoothed_ce")?;
        if rows != targets.len() {
            return Err(Error::shape("smoothed_ce", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (row, &gold) in probs.chunks_exact_mut(vocab).zip(targets) {
            if gold >= vocab {
                return Err(Error::OutOfRange { index: gold, len: vocab });
            }
            let (loss, _) = crate::trainer::smoothed_row_loss(row, gold, smoothing);
            total += loss;
            tensor::softmax_row_in_place(row, None);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(out)
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Returns the accumulator for `v`, allocating zeros on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let nn = val(*b).shape()[1];
                let ga = slot(grads, *a, m * k);
                tensor::gemm_nt_acc(g, val(*b).data(), ga, m, nn, k);
                let gb = slot(grads, *b, k * nn);
                tensor::gemm_tn_acc(val(*a).data(), g, gb, m, k, nn);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let s = slot(grads, v, g.len());
                    tensor::axpy(1.0, g, s);
                }
            }
            Op::AddRow(x, bias) => {
                let s = slot(grads, *x, g.len());
                tensor::axpy(1.0, g, s);
                let d = numel(*bias);
                let sb = slot(grads, *bias, d);
                for row in g.chunks_exact(d) {
                    tensor::axpy(1.0, row, sb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let sa = slot(grads, *a, g.len());
                for ((s, gi), y) in sa.iter_mut().zip(g).zip(vb) {
                    *s += gi * y;
                }
                let sb = slot(grads, *b, g.len());
                for ((s, gi), x) in sb.iter_mut().zip(g).zip(va) {
                    *s += gi * x;
                }
            }
            Op::Scale(x, f) => {
                let s = slot(grads, *x, g.len());
                tensor::axpy(*f, g, s);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let s = slot(grads, *x, g.len());
                for ((s, gi), xi) in s.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let s = slot(grads, *x, g.len());
                for ((yr, gr), sr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(s.chunks_exact_mut(cols))
                {
                    let inner = tensor::dot(yr, gr);
                    for ((si, yi), gi) in sr.iter_mut().zip(yr).zip(gr) {
                        *si += yi * (gi - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = numel(*gain);
                let gv = val(*gain).data().to_vec();
                {
                    let sg = slot(grads, *gain, d);
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((s, gi), xi) in sg.iter_mut().zip(gr).zip(xr) {
                            *s += gi * xi;
                        }
                    }
                }
                {
                    let sb = slot(grads, *bias, d);
                    for gr in g.chunks_exact(d) {
                        tensor::axpy(1.0, gr, sb);
                    }
                }
                let sx = slot(grads, *x, g.len());
                let inv_d = 1.0 / d as f64;
                for (((gr, xr), sr), r) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(sx.chunks_exact_mut(d))
                    .zip(rstd)
                {
                    // dxhat = g * gain
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let dxh = gr[i] * gv[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[i];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for i in 0..d {
                        let dxh = gr[i] * gv[i];
                        sr[i] += r * (dxh - mean_dxhat - xr[i] * mean_dxhat_xhat);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                caches,
            } => {
                let (dq, dk, dv) =
                    attention::heads_backward(g, val(*q), val(*k), val(*v), *heads, caches);
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    let s = slot(grads, var, d.len());
                    tensor::axpy(1.0, &d, s);
                }
            }
            Op::Fir {
                p,
                a,
                c,
                cfg,
                identity,
            } => {
                let (dp, da, dc) = memory::fir_backward(
                    g,
                    val(*p),
                    val(*a),
                    c.map(|c| val(c)),
                    cfg,
                    *identity,
                );
                let s = slot(grads, *p, dp.len());
                tensor::axpy(1.0, &dp, s);
                let s = slot(grads, *a, da.len());
                tensor::axpy(1.0, &da, s);
                if let Some(c) = c {
                    let s = slot(grads, *c, dc.len());
                    tensor::axpy(1.0, &dc, s);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                let s = slot(grads, *table, numel(*table));
                for (gr, &id) in g.chunks_exact(d).zip(ids) {
                    tensor::axpy(1.0, gr, &mut s[id * d..(id + 1) * d]);
                }
            }
            Op::Dropout { x, keep } => {
                let s = slot(grads, *x, g.len());
                for ((s, gi), k) in s.iter_mut().zip(g).zip(keep) {
                    *s += gi * k;
                }
            }
            Op::Sum(x) => {
                let n = numel(*x);
                let s = slot(grads, *x, n);
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let vocab = val(*logits).last_dim();
                let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
                let s = slot(grads, *logits, probs.len());
                for ((sr, pr), &gold) in s
                    .chunks_exact_mut(vocab)
                    .zip(probs.chunks_exact(vocab))
                    .zip(targets)
                {
                    for (j, (si, pj)) in sr.iter_mut().zip(pr).enumerate() {
                        let q = if j == gold { 1.0 - smoothing } else { off };
                        *si += g[0] * (pj - q);
                    }
                }
            }
        }
    }
}

/// Central finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences with step [`FD_STEP`] and returns the worst relative
/// error `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`
/// over every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::InvalidTensor("grad_check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check probe value".into()));
    }
    let grads = tape.backward(out)?;

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var);
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("parameter {pi} coordinate {i}")));
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
