//! DFSMN memory block: ReLU hidden layer, linear projection, and a learnable
//! FIR filter over time with look-back/lookahead orders and strides.
//!
//! Row `t` of the memory output is
//!
//! ```text
//! m_t = m_prev_t + p_t + Σ_{i=0..N1} a_i ⊙ p_{t−s1·i} + Σ_{j=1..N2} c_j ⊙ p_{t+s2·j}
//! ```
//!
//! Taps that fall outside `0..T` read zeros.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryConfig {
    /// Channel width.
    pub d: usize,
    /// Look-back order.
    pub n1: usize,
    /// Lookahead order; zero makes the block unidirectional.
    pub n2: usize,
    /// Look-back stride.
    pub s1: usize,
    /// Lookahead stride.
    pub s2: usize,
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.s1 == 0 || self.s2 == 0 {
            return Err(Error::Config(format!(
                "memory width and strides must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_unidirectional(&self) -> bool {
        self.n2 == 0
    }

    /// Same orders and strides with the lookahead removed.
    pub fn unidirectional(self) -> Self {
        MemoryConfig { n2: 0, ..self }
    }

    pub fn with_width(self, d: usize) -> Self {
        MemoryConfig { d, ..self }
    }

    pub fn tap_count(&self) -> usize {
        self.n1 + 1 + self.n2
    }
}

/// Look-back coefficients `a_0..a_N1` and lookahead coefficients `c_1..c_N2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FirCoefficients {
    /// `[N1+1 × d]`, row `i` is `a_i`.
    pub a: Tensor,
    /// `[N2 × d]`, row `j-1` is `c_j`; `None` when `N2 = 0`.
    pub c: Option<Tensor>,
}

impl FirCoefficients {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        FirCoefficients {
            a: Tensor::zeros(&[cfg.n1 + 1, cfg.d]),
            c: (cfg.n2 > 0).then(|| Tensor::zeros(&[cfg.n2, cfg.d])),
        }
    }

    pub fn random(cfg: &MemoryConfig, rng: &mut impl Rng, scale: f64) -> Self {
        let mut m = |r: usize| {
            let data = (0..r * cfg.d).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::from_parts(vec![r, cfg.d], data)
        };
        FirCoefficients {
            a: m(cfg.n1 + 1),
            c: (cfg.n2 > 0).then(|| m(cfg.n2)),
        }
    }

    pub fn check(&self, cfg: &MemoryConfig) -> Result<()> {
        if self.a.shape() != [cfg.n1 + 1, cfg.d] {
            return Err(Error::shape("fir coefficients a", self.a.shape(), &[cfg.n1 + 1, cfg.d]));
        }
        match (&self.c, cfg.n2) {
            (None, 0) => Ok(()),
            (Some(c), n2) if c.shape() == [n2, cfg.d] => Ok(()),
            (Some(c), n2) => Err(Error::shape("fir coefficients c", c.shape(), &[n2, cfg.d])),
            (None, n2) => Err(Error::shape("fir coefficients c", &[0, cfg.d], &[n2, cfg.d])),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.data().iter().all(|&v| v == 0.0)
            && self.c.as_ref().is_none_or(|c| c.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfsmnLayerParams {
    /// `[d × hidden]`
    pub w: Tensor,
    /// `[hidden]`
    pub b: Tensor,
    /// `[hidden × d]`
    pub v: Tensor,
    /// `[d]`
    pub v_bias: Tensor,
    pub fir: FirCoefficients,
}

impl DfsmnLayerParams {
    pub fn zeros(cfg: &MemoryConfig, hidden: usize) -> Self {
        DfsmnLayerParams {
            w: Tensor::zeros(&[cfg.d, hidden]),
            b: Tensor::zeros(&[hidden]),
            v: Tensor::zeros(&[hidden, cfg.d]),
            v_bias: Tensor::zeros(&[cfg.d]),
            fir: FirCoefficients::zeros(cfg),
        }
    }

    pub fn random(cfg: &MemoryConfig, hidden: usize, rng: &mut impl Rng, scale: f64) -> Self {
        let mut m = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        };
        let (w, b, v, v_bias) = (m(&[cfg.d, hidden]), m(&[hidden]), m(&[hidden, cfg.d]), m(&[cfg.d]));
        DfsmnLayerParams {
            w,
            b,
            v,
            v_bias,
            fir: FirCoefficients::random(cfg, rng, scale),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b.numel()
    }
}

pub(crate) fn fir_forward(
    p: &Tensor,
    a: &Tensor,
    c: Option<&Tensor>,
    cfg: &MemoryConfig,
    identity: bool,
) -> Result<Tensor> {
    let (t_len, d) = p.dims2("fir_memory")?;
    if d != cfg.d || a.shape() != [cfg.n1 + 1, d] {
        return Err(Error::shape("fir_memory", p.shape(), a.shape()));
    }
    match c {
        Some(c) if c.shape() != [cfg.n2, d] => {
            return Err(Error::shape("fir_memory", p.shape(), c.shape()))
        }
        None if cfg.n2 > 0 => return Err(Error::shape("fir_memory", p.shape(), &[cfg.n2, d])),
        _ => {}
    }
    let pd = p.data();
    let mut out = if identity { pd.to_vec() } else { vec![0.0; pd.len()] };
    for t in 0..t_len {
        let orow = &mut out[t * d..(t + 1) * d];
        for i in 0..=cfg.n1 {
            let Some(src) = t.checked_sub(cfg.s1 * i) else { break };
            mul_acc(&a.data()[i * d..(i + 1) * d], &pd[src * d..(src + 1) * d], orow);
        }
        if let Some(c) = c {
            for j in 1..=cfg.n2 {
                let src = t + cfg.s2 * j;
                if src >= t_len {
                    break;
                }
                mul_acc(&c.data()[(j - 1) * d..j * d], &pd[src * d..(src + 1) * d], orow);
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_len, d], out))
}

#[inline]
fn mul_acc(coef: &[f64], x: &[f64], out: &mut [f64]) {
    for ((o, c), v) in out.iter_mut().zip(coef).zip(x) {
        *o += c * v;
    }
}

pub(crate) fn fir_backward(
    g: &[f64],
    p: &Tensor,
    a: &Tensor,
    c: Option<&Tensor>,
    cfg: &MemoryConfig,
    identity: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t_len, d) = (p.rows(), p.last_dim());
    let pd = p.data();
    let mut dp = if identity { g.to_vec() } else { vec![0.0; g.len()] };
    let mut da = vec![0.0; a.numel()];
    let mut dc = vec![0.0; c.map_or(0, Tensor::numel)];
    for t in 0..t_len {
        let gr = &g[t * d..(t + 1) * d];
        for i in 0..=cfg.n1 {
            let Some(src) = t.checked_sub(cfg.s1 * i) else { break };
            mul_acc(gr, &pd[src * d..(src + 1) * d], &mut da[i * d..(i + 1) * d]);
            mul_acc(gr, &a.data()[i * d..(i + 1) * d], &mut dp[src * d..(src + 1) * d]);
        }
        if let Some(c) = c {
            for j in 1..=cfg.n2 {
                let src = t + cfg.s2 * j;
                if src >= t_len {
                    break;
                }
                mul_acc(gr, &pd[src * d..(src + 1) * d], &mut dc[(j - 1) * d..j * d]);
                mul_acc(gr, &c.data()[(j - 1) * d..j * d], &mut dp[src * d..(src + 1) * d]);
            }
        }
    }
    (dp, da, dc)
}

/// `prev_m + p + Σ a_i ⊙ p_{t−s1·i} + Σ c_j ⊙ p_{t+s2·j}` for every row `t`.
pub fn fir_memory(
    p: &Tensor,
    prev_m: &Tensor,
    fir: &FirCoefficients,
    cfg: &MemoryConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if p.shape() != prev_m.shape() {
        return Err(Error::shape("fir_memory", p.shape(), prev_m.shape()));
    }
    fir_forward(p, &fir.a, fir.c.as_ref(), cfg, true)?.add(prev_m)
}

/// Only the weighted taps, without the unweighted `p_t` term or a previous
/// memory. This is the filter applied to attention values in SAN-M.
pub fn fir_taps(p: &Tensor, fir: &FirCoefficients, cfg: &MemoryConfig) -> Result<Tensor> {
    cfg.validate()?;
    fir_forward(p, &fir.a, fir.c.as_ref(), cfg, false)
}

/// One DFSMN layer: `h = relu(m·W + b)`, `p = h·V + v`, then
/// [`fir_memory`] with `m` as the skip input.
pub fn dfsmn_layer(m_prev: &Tensor, params: &DfsmnLayerParams, cfg: &MemoryConfig) -> Result<Tensor> {
    let p = dfsmn_projection(m_prev, params)?;
    fir_memory(&p, m_prev, &params.fir, cfg)
}

/// The ReLU layer and linear projection feeding the FIR filter.
pub fn dfsmn_projection(m_prev: &Tensor, params: &DfsmnLayerParams) -> Result<Tensor> {
    let h = tensor::relu(&tensor::matmul(m_prev, &params.w)?.add_row_vector(&params.b)?);
    tensor::matmul(&h, &params.v)?.add_row_vector(&params.v_bias)
}

/// Channel-averaged filter, ordered from the farthest look-back tap through
/// the center to the farthest lookahead tap. The center includes the
/// implicit unit weight of `p_t`.
pub fn average_filter(fir: &FirCoefficients) -> Tensor {
    average_taps(fir, true)
}

/// Like [`average_filter`]; `identity` selects whether the center carries
/// the implicit unit weight.
pub fn average_taps(fir: &FirCoefficients, identity: bool) -> Tensor {
    let mean = |row: &[f64]| row.iter().sum::<f64>() / row.len() as f64;
    let n1 = fir.a.rows() - 1;
    let mut taps = Vec::with_capacity(n1 + 1 + fir.c.as_ref().map_or(0, Tensor::rows));
    for i in (1..=n1).rev() {
        taps.push(mean(fir.a.row(i)));
    }
    taps.push(mean(fir.a.row(0)) + if identity { 1.0 } else { 0.0 });
    if let Some(c) = &fir.c {
        for j in 0..c.rows() {
            taps.push(mean(c.row(j)));
        }
    }
    let n = taps.len();
    Tensor::from_parts(vec![n], taps)
}

/// FIR coefficients placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FirVars {
    pub a: Var,
    pub c: Option<Var>,
}

impl FirVars {
    pub fn on_tape(tape: &mut Tape, fir: &FirCoefficients) -> Self {
        FirVars {
            a: tape.leaf(fir.a.clone()),
            c: fir.c.as_ref().map(|c| tape.leaf(c.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DfsmnVars {
    pub w: Var,
    pub b: Var,
    pub v: Var,
    pub v_bias: Var,
    pub fir: FirVars,
}

impl DfsmnVars {
    pub fn on_tape(tape: &mut Tape, params: &DfsmnLayerParams) -> Self {
        DfsmnVars {
            w: tape.leaf(params.w.clone()),
            b: tape.leaf(params.b.clone()),
            v: tape.leaf(params.v.clone()),
            v_bias: tape.leaf(params.v_bias.clone()),
            fir: FirVars::on_tape(tape, &params.fir),
        }
    }
}

/// `p + Σ taps` for the projected input, i.e. the DFSMN layer output minus
/// its skip input.
pub fn dfsmn_branch_tape(tape: &mut Tape, x: Var, vars: &DfsmnVars, cfg: &MemoryConfig) -> Result<Var> {
    let h = tape.matmul(x, vars.w)?;
    let h = tape.add_row(h, vars.b)?;
    let h = tape.relu(h);
    let p = tape.matmul(h, vars.v)?;
    let p = tape.add_row(p, vars.v_bias)?;
    tape.fir(p, vars.fir.a, vars.fir.c, *cfg, true)
}

/// Full DFSMN layer on a tape.
pub fn dfsmn_layer_tape(tape: &mut Tape, m_prev: Var, vars: &DfsmnVars, cfg: &MemoryConfig) -> Result<Var> {
    let branch = dfsmn_branch_tape(tape, m_prev, vars, cfg)?;
    tape.add(branch, m_prev)
}
