//! Multi-head scaled dot-product attention for self-, causal self- and
//! cross-attention.
//!
//! Per-head projections are stored stacked: head `i` owns columns
//! `i·d_k .. (i+1)·d_k` of `w_q`/`w_k` and `i·d_v .. (i+1)·d_v` of `w_v`.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionConfig {
    /// `d_k = d_v = d_model / heads`.
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let cfg = AttentionConfig {
            d_model,
            heads,
            d_k: d_model / heads,
            d_v: d_model / heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        if self.heads * self.d_v != self.d_model {
            return Err(Error::Config(format!(
                "heads·d_v = {} must equal d_model = {}",
                self.heads * self.d_v,
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let hk = self.heads * self.d_k;
        let hv = self.heads * self.d_v;
        self.d_model * hk * 2 + self.d_model * hv + hv * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub cfg: AttentionConfig,
    /// `[d_model × h·d_k]`
    pub w_q: Tensor,
    /// `[d_model × h·d_k]`
    pub w_k: Tensor,
    /// `[d_model × h·d_v]`
    pub w_v: Tensor,
    /// `[h·d_v × d_model]`
    pub w_o: Tensor,
}

impl AttentionParams {
    pub fn new(cfg: AttentionConfig, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        cfg.validate()?;
        let hk = cfg.heads * cfg.d_k;
        let hv = cfg.heads * cfg.d_v;
        for (t, want) in [
            (&w_q, [cfg.d_model, hk]),
            (&w_k, [cfg.d_model, hk]),
            (&w_v, [cfg.d_model, hv]),
            (&w_o, [hv, cfg.d_model]),
        ] {
            if t.shape() != want {
                return Err(Error::shape("attention params", t.shape(), &want));
            }
        }
        Ok(AttentionParams { cfg, w_q, w_k, w_v, w_o })
    }

    pub fn random(cfg: AttentionConfig, rng: &mut impl Rng, scale: f64) -> Self {
        let hk = cfg.heads * cfg.d_k;
        let hv = cfg.heads * cfg.d_v;
        let mut m = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::from_parts(vec![r, c], data)
        };
        AttentionParams {
            cfg,
            w_q: m(cfg.d_model, hk),
            w_k: m(cfg.d_model, hk),
            w_v: m(cfg.d_model, hv),
            w_o: m(hv, cfg.d_model),
        }
    }

    /// `W_i^Q`, `W_i^K`, `W_i^V` of head `i`.
    pub fn head(&self, i: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let (dk, dv) = (self.cfg.d_k, self.cfg.d_v);
        Ok((
            self.w_q.slice_cols(i * dk, dk)?,
            self.w_k.slice_cols(i * dk, dk)?,
            self.w_v.slice_cols(i * dv, dv)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    Padding,
    Causal,
    Combined,
}

/// Boolean `[T_query × T_key]` pattern; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Rc<[bool]>,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols].into(),
            kind: MaskKind::Full,
        }
    }

    /// Keys at positions `>= key_len` are hidden from every query.
    pub fn padding(rows: usize, cols: usize, key_len: usize) -> Result<Self> {
        if key_len == 0 || key_len > cols {
            return Err(Error::OutOfRange { index: key_len, len: cols });
        }
        let allowed = (0..rows * cols).map(|i| i % cols < key_len).collect::<Vec<_>>();
        Ok(AttentionMask {
            rows,
            cols,
            allowed: allowed.into(),
            kind: MaskKind::Padding,
        })
    }

    pub fn intersect(&self, other: &AttentionMask) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "mask intersect",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let allowed = self
            .allowed
            .iter()
            .zip(other.allowed.iter())
            .map(|(a, b)| *a && *b)
            .collect::<Vec<_>>();
        let kind = match (self.kind, other.kind) {
            (MaskKind::Full, k) | (k, MaskKind::Full) => k,
            (a, b) if a == b => a,
            _ => MaskKind::Combined,
        };
        Ok(AttentionMask {
            rows: self.rows,
            cols: self.cols,
            allowed: allowed.into(),
            kind,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub(crate) fn shared(&self) -> Rc<[bool]> {
        Rc::clone(&self.allowed)
    }

    /// `true` when no query can see a later key.
    pub fn is_causal(&self) -> bool {
        (0..self.rows).all(|q| ((q + 1)..self.cols).all(|k| !self.is_allowed(q, k)))
    }
}

/// Lower-triangular mask: query `t` sees keys `0..=t`.
pub fn make_causal_mask(t: usize) -> Result<AttentionMask> {
    if t == 0 {
        return Err(Error::Config("causal mask of length 0".into()));
    }
    let allowed = (0..t * t).map(|i| i % t <= i / t).collect::<Vec<_>>();
    Ok(AttentionMask {
        rows: t,
        cols: t,
        allowed: allowed.into(),
        kind: MaskKind::Causal,
    })
}

/// Per-head forward state kept for the backward pass and analysis export.
pub(crate) struct HeadCache {
    probs: Vec<f64>,
    keep: Option<Vec<f64>>,
    tq: usize,
    tk: usize,
}

impl HeadCache {
    pub(crate) fn weights(&self) -> Tensor {
        Tensor::from_parts(vec![self.tq, self.tk], self.probs.clone())
    }
}

fn head_block(x: &Tensor, head: usize, width: usize) -> Vec<f64> {
    let cols = x.last_dim();
    let mut out = Vec::with_capacity(x.rows() * width);
    for row in x.data().chunks_exact(cols) {
        out.extend_from_slice(&row[head * width..(head + 1) * width]);
    }
    out
}

fn add_head_block(dst: &mut [f64], cols: usize, src: &[f64], head: usize, width: usize) {
    for (drow, srow) in dst.chunks_exact_mut(cols).zip(src.chunks_exact(width)) {
        tensor::axpy(1.0, srow, &mut drow[head * width..(head + 1) * width]);
    }
}

pub(crate) fn heads_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<Rc<[bool]>>,
    mut dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<(Tensor, Vec<HeadCache>)> {
    let (tq, qc) = q.dims2("attention")?;
    let (tk, kc) = k.dims2("attention")?;
    let (tv, vc) = v.dims2("attention")?;
    if qc != kc || tk != tv || heads == 0 || qc % heads != 0 || vc % heads != 0 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if let Some(m) = &mask {
        if m.len() != tq * tk {
            return Err(Error::shape("attention mask", &[tq, tk], &[m.len()]));
        }
    }
    let (dk, dv) = (qc / heads, vc / heads);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = vec![0.0; tq * vc];
    let mut caches = Vec::with_capacity(heads);

    for h in 0..heads {
        let qh = head_block(q, h, dk);
        let kh = head_block(k, h, dk);
        let vh = head_block(v, h, dv);
        let mut probs = vec![0.0; tq * tk];
        tensor::gemm_nt_acc(&qh, &kh, &mut probs, tq, dk, tk);
        for (r, row) in probs.chunks_exact_mut(tk).enumerate() {
            for s in row.iter_mut() {
                *s *= scale;
            }
            let allowed = mask.as_deref().map(|m| &m[r * tk..(r + 1) * tk]);
            if !tensor::softmax_row_in_place(row, allowed) {
                return Err(Error::DegenerateMask { row: r });
            }
        }
        let keep = match dropout.as_mut() {
            Some((rate, rng)) if *rate > 0.0 => {
                let s = 1.0 / (1.0 - *rate);
                Some(
                    (0..tq * tk)
                        .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { s })
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };
        let mut ctx_h = vec![0.0; tq * dv];
        match &keep {
            Some(kp) => {
                let dropped: Vec<f64> = probs.iter().zip(kp).map(|(p, k)| p * k).collect();
                tensor::gemm_acc(&dropped, &vh, &mut ctx_h, tq, tk, dv);
            }
            None => tensor::gemm_acc(&probs, &vh, &mut ctx_h, tq, tk, dv),
        }
        add_head_block(&mut ctx, vc, &ctx_h, h, dv);
        caches.push(HeadCache { probs, keep, tq, tk });
    }
    Ok((Tensor::from_parts(vec![tq, vc], ctx), caches))
}

pub(crate) fn heads_backward(
    g: &[f64],
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    caches: &[HeadCache],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (qc, vc) = (q.last_dim(), v.last_dim());
    let (tq, tk) = (q.rows(), k.rows());
    let (dk, dv) = (qc / heads, vc / heads);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; q.numel()];
    let mut dkk = vec![0.0; k.numel()];
    let mut dvv = vec![0.0; v.numel()];
    let gt = Tensor::from_parts(vec![tq, vc], g.to_vec());

    for (h, cache) in caches.iter().enumerate() {
        let qh = head_block(q, h, dk);
        let kh = head_block(k, h, dk);
        let vh = head_block(v, h, dv);
        let gh = head_block(&gt, h, dv);
        let effective: Vec<f64> = match &cache.keep {
            Some(kp) => cache.probs.iter().zip(kp).map(|(p, k)| p * k).collect(),
            None => cache.probs.clone(),
        };
        // dV = P̃ᵀ · dctx
        let mut dvh = vec![0.0; tk * dv];
        tensor::gemm_tn_acc(&effective, &gh, &mut dvh, tq, tk, dv);
        // dP̃ = dctx · Vᵀ
        let mut dp = vec![0.0; tq * tk];
        tensor::gemm_nt_acc(&gh, &vh, &mut dp, tq, dv, tk);
        if let Some(kp) = &cache.keep {
            for (d, k) in dp.iter_mut().zip(kp) {
                *d *= k;
            }
        }
        // softmax backward, then the 1/sqrt(d_k) scale
        for (dr, pr) in dp.chunks_exact_mut(tk).zip(cache.probs.chunks_exact(tk)) {
            let inner = tensor::dot(dr, pr);
            for (d, p) in dr.iter_mut().zip(pr) {
                *d = p * (*d - inner) * scale;
            }
        }
        let mut dqh = vec![0.0; tq * dk];
        tensor::gemm_acc(&dp, &kh, &mut dqh, tq, tk, dk);
        let mut dkh = vec![0.0; tk * dk];
        tensor::gemm_tn_acc(&dp, &qh, &mut dkh, tq, tk, dk);

        add_head_block(&mut dq, qc, &dqh, h, dk);
        add_head_block(&mut dkk, qc, &dkh, h, dk);
        add_head_block(&mut dvv, vc, &dvh, h, dv);
    }
    (dq, dkk, dvv)
}

/// `softmax(Q·Kᵀ/√d_k)·V` with masking. Returns the context and the
/// attention weights.
pub fn scaled_dot_product(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    check_mask(mask, q.rows(), k.rows())?;
    let (ctx, caches) = heads_forward(q, k, v, 1, mask.map(AttentionMask::shared), None)?;
    Ok((ctx, caches[0].weights()))
}

fn check_mask(mask: Option<&AttentionMask>, tq: usize, tk: usize) -> Result<()> {
    match mask {
        Some(m) if m.dims() != (tq, tk) => {
            Err(Error::shape("attention mask", &[m.rows, m.cols], &[tq, tk]))
        }
        _ => Ok(()),
    }
}

/// Output of [`multi_head_with_weights`].
pub struct MultiHeadOutput {
    pub output: Tensor,
    /// Concatenated per-head value projections `[T_k × h·d_v]`.
    pub values: Tensor,
    /// One `[T_q × T_k]` weight matrix per head.
    pub weights: Vec<Tensor>,
}

/// `[head_1, …, head_h]·W^O` with queries from `xq` and keys/values from `xkv`.
pub fn multi_head(
    xq: &Tensor,
    xkv: &Tensor,
    params: &AttentionParams,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    Ok(multi_head_with_weights(xq, xkv, params, mask)?.output)
}

pub fn multi_head_with_weights(
    xq: &Tensor,
    xkv: &Tensor,
    params: &AttentionParams,
    mask: Option<&AttentionMask>,
) -> Result<MultiHeadOutput> {
    check_mask(mask, xq.rows(), xkv.rows())?;
    let q = tensor::matmul(xq, &params.w_q)?;
    let k = tensor::matmul(xkv, &params.w_k)?;
    let values = tensor::matmul(xkv, &params.w_v)?;
    let (ctx, caches) = heads_forward(
        &q,
        &k,
        &values,
        params.cfg.heads,
        mask.map(AttentionMask::shared),
        None,
    )?;
    let output = tensor::matmul(&ctx, &params.w_o)?;
    Ok(MultiHeadOutput {
        output,
        values,
        weights: caches.iter().map(HeadCache::weights).collect(),
    })
}

/// Attention parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl AttentionVars {
    pub fn on_tape(tape: &mut Tape, params: &AttentionParams) -> Self {
        AttentionVars {
            w_q: tape.leaf(params.w_q.clone()),
            w_k: tape.leaf(params.w_k.clone()),
            w_v: tape.leaf(params.w_v.clone()),
            w_o: tape.leaf(params.w_o.clone()),
            heads: params.cfg.heads,
        }
    }
}

/// Tape nodes produced by [`multi_head_tape`].
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadNodes {
    pub output: Var,
    /// `X·W^V` for all heads.
    pub values: Var,
    /// The attention node; holds the per-head weights.
    pub attention: Var,
}

pub fn multi_head_tape(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    vars: &AttentionVars,
    mask: Option<&AttentionMask>,
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<MultiHeadNodes> {
    check_mask(mask, tape.value(xq).rows(), tape.value(xkv).rows())?;
    let q = tape.matmul(xq, vars.w_q)?;
    let k = tape.matmul(xkv, vars.w_k)?;
    let values = tape.matmul(xkv, vars.w_v)?;
    let attention = tape.attention(q, k, values, vars.heads, mask.map(AttentionMask::shared), dropout)?;
    let output = tape.matmul(attention, vars.w_o)?;
    Ok(MultiHeadNodes {
        output,
        values,
        attention,
    })
}

/// Splits row `t` of an attention matrix into the mass on keys `0..=t`
/// (past and present) and on keys after `t`.
pub fn attention_split(weights: &Tensor, t: usize) -> Result<(f64, f64)> {
    let (rows, cols) = weights.dims2("attention_split")?;
    if t >= rows {
        return Err(Error::OutOfRange { index: t, len: rows });
    }
    let row = weights.row(t);
    let cut = (t + 1).min(cols);
    let past = row[..cut].iter().sum();
    let future = row[cut..].iter().sum();
    Ok((past, future))
}
