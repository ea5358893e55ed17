//! Memory-equipped self-attention: multi-head self-attention plus a FIR
//! memory over the attention values, `Y = MultiHead(Q, K, V) + M(V)`.
//!
//! `M` is the weighted-tap part of the FIR memory applied to the
//! concatenated per-head values `V = X·W^V` (width `h·d_v = d_model`), with
//! no ReLU/projection stage and no previous-memory input. With all
//! coefficients at zero the layer is exactly plain self-attention.

use crate::attention::{self, AttentionMask, AttentionParams, AttentionVars, MaskKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::memory::{self, FirCoefficients, FirVars, MemoryConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SanmParams {
    pub attn: AttentionParams,
    pub fir: FirCoefficients,
    pub mem_cfg: MemoryConfig,
}

impl SanmParams {
    pub fn new(attn: AttentionParams, fir: FirCoefficients, mem_cfg: MemoryConfig) -> Result<Self> {
        let width = attn.cfg.heads * attn.cfg.d_v;
        if mem_cfg.d != width {
            return Err(Error::Config(format!(
                "SAN-M memory width {} must equal h·d_v = {width}",
                mem_cfg.d
            )));
        }
        mem_cfg.validate()?;
        fir.check(&mem_cfg)?;
        Ok(SanmParams { attn, fir, mem_cfg })
    }
}

/// A causal mask paired with a memory that looks ahead would leak the future.
pub fn check_directionality(mask: Option<&AttentionMask>, mem_cfg: &MemoryConfig) -> Result<()> {
    let causal = mask.is_some_and(|m| matches!(m.kind(), MaskKind::Causal | MaskKind::Combined) && m.is_causal());
    if causal && !mem_cfg.is_unidirectional() {
        return Err(Error::Config(format!(
            "causal attention with a lookahead memory (N2 = {})",
            mem_cfg.n2
        )));
    }
    Ok(())
}

pub fn sanm_layer(x: &Tensor, params: &SanmParams, mask: Option<&AttentionMask>) -> Result<Tensor> {
    check_directionality(mask, &params.mem_cfg)?;
    let mha = attention::multi_head_with_weights(x, x, &params.attn, mask)?;
    let mem = memory::fir_taps(&mha.values, &params.fir, &params.mem_cfg)?;
    mha.output.add(&mem)
}

#[derive(Clone, Copy, Debug)]
pub struct SanmVars {
    pub attn: AttentionVars,
    pub fir: FirVars,
}

impl SanmVars {
    pub fn on_tape(tape: &mut Tape, params: &SanmParams) -> Self {
        SanmVars {
            attn: AttentionVars::on_tape(tape, &params.attn),
            fir: FirVars::on_tape(tape, &params.fir),
        }
    }
}

/// Tape version of [`sanm_layer`]. Returns the layer output and the
/// attention node (for weight export).
pub fn sanm_tape(
    tape: &mut Tape,
    x: Var,
    vars: &SanmVars,
    mem_cfg: &MemoryConfig,
    mask: Option<&AttentionMask>,
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<(Var, Var)> {
    check_directionality(mask, mem_cfg)?;
    let mha = attention::multi_head_tape(tape, x, x, &vars.attn, mask, dropout)?;
    let mem = tape.fir(mha.values, vars.fir.a, vars.fir.c, *mem_cfg, false)?;
    Ok((tape.add(mha.output, mem)?, mha.attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{make_causal_mask, AttentionConfig};
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(d: usize, h: usize, n1: usize, n2: usize, rng: &mut ChaCha8Rng) -> SanmParams {
        let cfg = AttentionConfig::new(d, h).unwrap();
        let mem = MemoryConfig { d, n1, n2, s1: 1, s2: 1 };
        SanmParams::new(
            AttentionParams::random(cfg, rng, 0.8),
            FirCoefficients::random(&mem, rng, 0.8),
            mem,
        )
        .unwrap()
    }

    #[test]
    fn zero_fir_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = params(4, 2, 2, 1, &mut rng);
        p.fir = FirCoefficients::zeros(&p.mem_cfg);
        let x = random(&[5, 4], &mut rng);
        let y = sanm_layer(&x, &p, None).unwrap();
        assert_eq!(y, attention::multi_head(&x, &x, &p.attn, None).unwrap());

        p.attn.w_v = Tensor::zeros(&[4, 4]);
        assert!(sanm_layer(&x, &p, None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memory_branch_in_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = params(4, 2, 1, 1, &mut rng);
        p.attn.w_o = Tensor::zeros(&[4, 4]);
        p.attn.w_v = Tensor::identity(4);
        let x = random(&[4, 4], &mut rng);
        let y = sanm_layer(&x, &p, None).unwrap();
        let want = memory::fir_taps(&x, &p.fir, &p.mem_cfg).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn matches_two_branch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = params(4, 2, 1, 0, &mut rng);
        let x = random(&[3, 4], &mut rng);
        let y = sanm_layer(&x, &p, None).unwrap();

        let mut heads = Vec::new();
        let mut values = Vec::new();
        for h in 0..2 {
            let (wq, wk, wv) = p.attn.head(h).unwrap();
            let q = crate::tensor::matmul(&x, &wq).unwrap();
            let k = crate::tensor::matmul(&x, &wk).unwrap();
            let v = crate::tensor::matmul(&x, &wv).unwrap();
            let mut ctx = Tensor::zeros(&[3, 2]);
            for i in 0..3 {
                let e: Vec<f64> = (0..3)
                    .map(|j| ((q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / 2f64.sqrt()).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                for c in 0..2 {
                    ctx.set(i, c, (0..3).map(|j| e[j] / z * v.at(j, c)).sum());
                }
            }
            heads.push(ctx);
            values.push(v);
        }
        let attn = crate::tensor::matmul(&Tensor::concat_cols(&heads).unwrap(), &p.attn.w_o).unwrap();
        let v = Tensor::concat_cols(&values).unwrap();
        let mut mem = Tensor::zeros(&[3, 4]);
        for t in 0..3 {
            for c in 0..4 {
                let mut s = p.fir.a.at(0, c) * v.at(t, c);
                if t >= 1 {
                    s += p.fir.a.at(1, c) * v.at(t - 1, c);
                }
                mem.set(t, c, s);
            }
        }
        assert!(y.max_abs_diff(&attn.add(&mem).unwrap()) < 1e-10);
    }

    #[test]
    fn causal_mask_with_lookahead_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(4, 2, 1, 2, &mut rng);
        let x = random(&[3, 4], &mut rng);
        let mask = make_causal_mask(3).unwrap();
        assert!(matches!(sanm_layer(&x, &p, Some(&mask)), Err(Error::Config(_))));
    }

    #[test]
    fn unidirectional_sanm_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(4, 2, 2, 0, &mut rng);
        let mask = make_causal_mask(5).unwrap();
        let x = random(&[5, 4], &mut rng);
        let y = sanm_layer(&x, &p, Some(&mask)).unwrap();
        for t_pert in 1..5 {
            let mut x2 = x.clone();
            for c in 0..4 {
                x2.set(t_pert, c, x2.at(t_pert, c) + rng.random_range(-2.0..2.0));
            }
            let y2 = sanm_layer(&x2, &p, Some(&mask)).unwrap();
            for t in 0..t_pert {
                for c in 0..4 {
                    assert!((y.at(t, c) - y2.at(t, c)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(4, 2, 2, 1, &mut rng);
        let x = random(&[4, 4], &mut rng);
        let mem_cfg = p.mem_cfg;
        let inputs = vec![
            x,
            p.attn.w_q.clone(),
            p.attn.w_k.clone(),
            p.attn.w_v.clone(),
            p.attn.w_o.clone(),
            p.fir.a.clone(),
            p.fir.c.clone().unwrap(),
        ];
        let err = grad_check(
            |t, v| {
                let vars = SanmVars {
                    attn: AttentionVars { w_q: v[1], w_k: v[2], w_v: v[3], w_o: v[4], heads: 2 },
                    fir: FirVars { a: v[5], c: Some(v[6]) },
                };
                let (y, _) = sanm_tape(t, v[0], &vars, &mem_cfg, None, None)?;
                Ok(t.sum(y))
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
