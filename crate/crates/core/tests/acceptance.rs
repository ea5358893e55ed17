//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test`. Pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 8`.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sanm_core::analysis::{analyze, band_mass, bench_scaling, evaluate, greedy_decode, BenchKind};
use sanm_core::attention::{
    make_causal_mask, multi_head, multi_head_tape, scaled_dot_product, AttentionConfig, AttentionMask,
    AttentionParams, AttentionVars,
};
use sanm_core::autodiff::{grad_check, Tape, Var};
use sanm_core::frontend::{lfr_stack, prepare_features, FeatureSpec, Split, SyntheticTask};
use sanm_core::memory::{
    dfsmn_layer, dfsmn_layer_tape, fir_memory, DfsmnLayerParams, DfsmnVars, FirCoefficients, FirVars, MemoryConfig,
};
use sanm_core::model::{
    count_parameters, teacher_forcing, Dropout, Model, ModelConfig, Net, Site, SublayerKind, BOS, EOS, FIRST_TOKEN,
};
use sanm_core::sanm::{sanm_layer, sanm_tape, SanmParams, SanmVars};
use sanm_core::trainer::{prepare_examples, train, Example, ScheduleConfig, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use sanm_core::Tensor;

// Tolerances and budgets, fixed here rather than tuned per run.
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 120;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const OP_GRAD_TOL: f64 = 1e-4;
const MODEL_GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CAUSAL_TOL: f64 = 1e-12;
const CAUSAL_TRIALS: usize = 50;
const REDUCTION_CONFIGS: usize = 20;
const PARAM_REL_TOL: f64 = 0.20;
const SAN_SLOPE: (f64, f64) = (1.7, 2.3);
const FIR_SLOPE: (f64, f64) = (0.8, 1.3);
const BENCH_BUDGET: Duration = Duration::from_secs(300);
const SANM_CER: f64 = 0.05;
const ANY_CER: f64 = 0.15;
const TRAIN_BUDGET: Duration = Duration::from_secs(900);
const LFR_TRIALS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// brute-force oracles, written directly from the defining sums

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.last_dim());
    let n = b.last_dim();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r)[start..start + width].to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn oracle_sdp(q: &Tensor, k: &Tensor, v: &Tensor, allowed: &dyn Fn(usize, usize) -> bool) -> (Tensor, Tensor) {
    let (tq, dk) = (q.rows(), q.last_dim());
    let (tk, dv) = (k.rows(), v.last_dim());
    let mut ctx = Tensor::zeros(&[tq, dv]);
    let mut w = Tensor::zeros(&[tq, tk]);
    for i in 0..tq {
        let mut scores = vec![f64::NEG_INFINITY; tk];
        for (j, s) in scores.iter_mut().enumerate() {
            if allowed(i, j) {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += q.at(i, c) * k.at(j, c);
                }
                *s = dot / (dk as f64).sqrt();
            }
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - m).exp() }).collect();
        let z: f64 = e.iter().sum();
        for j in 0..tk {
            w.set(i, j, e[j] / z);
            for c in 0..dv {
                ctx.set(i, c, ctx.at(i, c) + e[j] / z * v.at(j, c));
            }
        }
    }
    (ctx, w)
}

/// Returns (output, values).
fn oracle_mha(xq: &Tensor, xkv: &Tensor, p: &AttentionParams, allowed: &dyn Fn(usize, usize) -> bool) -> (Tensor, Tensor) {
    let q = naive_matmul(xq, &p.w_q);
    let k = naive_matmul(xkv, &p.w_k);
    let v = naive_matmul(xkv, &p.w_v);
    let (dk, dv) = (p.cfg.d_k, p.cfg.d_v);
    let mut concat = Tensor::zeros(&[xq.rows(), p.cfg.heads * dv]);
    for h in 0..p.cfg.heads {
        let (ctx, _) = oracle_sdp(&cols(&q, h * dk, dk), &cols(&k, h * dk, dk), &cols(&v, h * dv, dv), allowed);
        for r in 0..ctx.rows() {
            for c in 0..dv {
                concat.set(r, h * dv + c, ctx.at(r, c));
            }
        }
    }
    (naive_matmul(&concat, &p.w_o), v)
}

fn oracle_fir(p: &Tensor, prev: Option<&Tensor>, fir: &FirCoefficients, cfg: &MemoryConfig, identity: bool) -> Tensor {
    let (t_len, d) = (p.rows(), p.last_dim());
    let mut out = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        for ch in 0..d {
            let mut s = prev.map_or(0.0, |m| m.at(t, ch));
            if identity {
                s += p.at(t, ch);
            }
            for i in 0..=cfg.n1 {
                if t >= cfg.s1 * i {
                    s += fir.a.at(i, ch) * p.at(t - cfg.s1 * i, ch);
                }
            }
            for j in 1..=cfg.n2 {
                if t + cfg.s2 * j < t_len {
                    s += fir.c.as_ref().unwrap().at(j - 1, ch) * p.at(t + cfg.s2 * j, ch);
                }
            }
            out.set(t, ch, s);
        }
    }
    out
}

fn oracle_dfsmn(x: &Tensor, p: &DfsmnLayerParams, cfg: &MemoryConfig) -> Tensor {
    let mut h = naive_matmul(x, &p.w);
    for r in 0..h.rows() {
        for c in 0..h.last_dim() {
            h.set(r, c, (h.at(r, c) + p.b.data()[c]).max(0.0));
        }
    }
    let mut proj = naive_matmul(&h, &p.v);
    for r in 0..proj.rows() {
        for c in 0..proj.last_dim() {
            proj.set(r, c, proj.at(r, c) + p.v_bias.data()[c]);
        }
    }
    oracle_fir(&proj, Some(x), &p.fir, cfg, true)
}

fn random_mem(rng: &mut ChaCha8Rng, d: usize, unidirectional: bool) -> MemoryConfig {
    MemoryConfig {
        d,
        n1: rng.random_range(0..=3),
        n2: if unidirectional { 0 } else { rng.random_range(0..=3) },
        s1: rng.random_range(1..=2),
        s2: rng.random_range(1..=2),
    }
}

fn random_heads(rng: &mut ChaCha8Rng, d: usize) -> usize {
    let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
    divisors[rng.random_range(0..divisors.len())]
}

/// Random mask choice over a `tq × tk` grid; causal only when square.
fn random_mask(rng: &mut ChaCha8Rng, tq: usize, tk: usize) -> Option<AttentionMask> {
    match rng.random_range(0..3) {
        0 => None,
        1 if tq == tk => Some(make_causal_mask(tq).unwrap()),
        _ => Some(AttentionMask::padding(tq, tk, rng.random_range(1..=tk)).unwrap()),
    }
}

fn allowed_fn(mask: &Option<AttentionMask>) -> impl Fn(usize, usize) -> bool + '_ {
    move |i, j| mask.as_ref().is_none_or(|m| m.is_allowed(i, j))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];
    for _ in 0..ORACLE_INSTANCES {
        // scaled dot product
        let (tq, tk) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (dk, dv) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let q = rand_tensor(&mut rng, &[tq, dk], 1.5);
        let k = rand_tensor(&mut rng, &[tk, dk], 1.5);
        let v = rand_tensor(&mut rng, &[tk, dv], 1.5);
        let mask = random_mask(&mut rng, tq, tk);
        let (ctx, w) = scaled_dot_product(&q, &k, &v, mask.as_ref()).unwrap();
        let (octx, ow) = oracle_sdp(&q, &k, &v, &allowed_fn(&mask));
        worst[0] = worst[0].max(max_diff(&ctx, &octx)).max(max_diff(&w, &ow));

        // multi-head attention, self or cross
        let d = rng.random_range(1..=8);
        let acfg = AttentionConfig::new(d, random_heads(&mut rng, d)).unwrap();
        let params = AttentionParams::random(acfg, &mut rng, 0.8);
        let xq = rand_tensor(&mut rng, &[tq, d], 1.0);
        let xkv = if rng.random_bool(0.5) { xq.clone() } else { rand_tensor(&mut rng, &[tk, d], 1.0) };
        let mask = random_mask(&mut rng, tq, xkv.rows());
        let out = multi_head(&xq, &xkv, &params, mask.as_ref()).unwrap();
        worst[1] = worst[1].max(max_diff(&out, &oracle_mha(&xq, &xkv, &params, &allowed_fn(&mask)).0));

        // FIR memory
        let t = rng.random_range(1..=6);
        let width = rng.random_range(1..=8);
        let mem = random_mem(&mut rng, width, false);
        let fir = FirCoefficients::random(&mem, &mut rng, 0.8);
        let p = rand_tensor(&mut rng, &[t, mem.d], 1.0);
        let prev = rand_tensor(&mut rng, &[t, mem.d], 1.0);
        let out = fir_memory(&p, &prev, &fir, &mem).unwrap();
        worst[2] = worst[2].max(max_diff(&out, &oracle_fir(&p, Some(&prev), &fir, &mem, true)));

        // DFSMN layer
        let hidden = rng.random_range(1..=8);
        let dp = DfsmnLayerParams::random(&mem, hidden, &mut rng, 0.8);
        let x = rand_tensor(&mut rng, &[t, mem.d], 1.0);
        let out = dfsmn_layer(&x, &dp, &mem).unwrap();
        worst[3] = worst[3].max(max_diff(&out, &oracle_dfsmn(&x, &dp, &mem)));

        // SAN-M layer, bidirectional or causal with a look-back-only memory
        let d = rng.random_range(1..=8);
        let acfg = AttentionConfig::new(d, random_heads(&mut rng, d)).unwrap();
        let causal = rng.random_bool(0.5);
        let mem = random_mem(&mut rng, d, causal);
        let sp = SanmParams::new(
            AttentionParams::random(acfg, &mut rng, 0.8),
            FirCoefficients::random(&mem, &mut rng, 0.8),
            mem,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, &[t, d], 1.0);
        let mask = causal.then(|| make_causal_mask(t).unwrap());
        let out = sanm_layer(&x, &sp, mask.as_ref()).unwrap();
        let (mha, values) = oracle_mha(&x, &x, &sp.attn, &allowed_fn(&mask));
        let expected = mha.add(&oracle_fir(&values, None, &sp.fir, &mem, false)).unwrap();
        worst[4] = worst[4].max(max_diff(&out, &expected));
    }
    let secs = start.elapsed();
    let names = ["sdp", "multi_head", "fir_memory", "dfsmn_layer", "sanm_layer"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = worst.iter().all(|&w| w <= ORACLE_TOL) && secs < ORACLE_BUDGET;
    outcome(
        pass,
        format!("{ORACLE_INSTANCES} instances each, max abs err {detail} (tol {ORACLE_TOL:e}), {:.2}s", secs.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------

/// Sum of `out ⊙ r` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let r = tape.leaf(rand_tensor(&mut rng, &shape, 1.0));
    let m = tape.mul(out, r).unwrap();
    tape.sum(m)
}

type OpCheck = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> sanm_core::Result<Var>>, Vec<Tensor>);

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<OpCheck> {
    let mut r = |shape: &[usize]| rand_tensor(rng, shape, 1.0);
    let causal = make_causal_mask(4).unwrap();
    let mem = MemoryConfig {
        d: 4,
        n1: 2,
        n2: 2,
        s1: 2,
        s2: 1,
    };
    let back_only = MemoryConfig { n2: 0, ..mem };
    let mut checks: Vec<OpCheck> = vec![
        (
            "matmul",
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                Ok(project(t, o, 1))
            }),
            vec![r(&[3, 4]), r(&[4, 5])],
        ),
        (
            "add",
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                Ok(project(t, o, 2))
            }),
            vec![r(&[3, 4]), r(&[3, 4])],
        ),
        (
            "add_row",
            Box::new(|t, v| {
                let o = t.add_row(v[0], v[1])?;
                Ok(project(t, o, 3))
            }),
            vec![r(&[3, 4]), r(&[4])],
        ),
        (
            "mul",
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1])?;
                Ok(project(t, o, 4))
            }),
            vec![r(&[3, 4]), r(&[3, 4])],
        ),
        (
            "scale",
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                Ok(project(t, o, 5))
            }),
            vec![r(&[3, 4])],
        ),
        (
            "relu",
            Box::new(|t, v| {
                let o = t.relu(v[0]);
                Ok(project(t, o, 6))
            }),
            vec![r(&[3, 4])],
        ),
        (
            "softmax_rows",
            Box::new(move |t, v| {
                let mask = [true, false, true, true, true, true, false, true, false, false, true, true];
                let o = t.softmax_rows(v[0], Some(&mask))?;
                Ok(project(t, o, 7))
            }),
            vec![r(&[3, 4])],
        ),
        (
            "layer_norm",
            Box::new(|t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                Ok(project(t, o, 8))
            }),
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
        ),
        (
            "embedding",
            Box::new(|t, v| {
                let o = t.embedding(v[0], &[2, 0, 2, 4])?;
                Ok(project(t, o, 9))
            }),
            vec![r(&[5, 3])],
        ),
        (
            "smoothed_ce_sum",
            Box::new(|t, v| t.smoothed_ce_sum(v[0], &[1, 4, 0], 0.1)),
            vec![r(&[3, 6])],
        ),
        (
            "dropout",
            Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(10);
                let o = t.dropout(v[0], 0.3, &mut rng);
                Ok(project(t, o, 10))
            }),
            vec![r(&[3, 4])],
        ),
        (
            "fir (bidirectional, strided)",
            Box::new(move |t, v| {
                let o = t.fir(v[0], v[1], Some(v[2]), mem, true)?;
                Ok(project(t, o, 11))
            }),
            vec![r(&[6, 4]), r(&[3, 4]), r(&[2, 4])],
        ),
        (
            "fir (look-back taps only)",
            Box::new(move |t, v| {
                let o = t.fir(v[0], v[1], None, back_only, false)?;
                Ok(project(t, o, 12))
            }),
            vec![r(&[6, 4]), r(&[3, 4])],
        ),
    ];
    let attn = vec![r(&[4, 4]), r(&[4, 4]), r(&[4, 4]), r(&[4, 4]), r(&[4, 4]), r(&[4, 4])];
    checks.push((
        "multi_head attention (causal)",
        Box::new(move |t, v| {
            let vars = AttentionVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_o: v[4],
                heads: 2,
            };
            let o = multi_head_tape(t, v[0], v[0], &vars, Some(&causal), None)?;
            Ok(project(t, o.output, 13))
        }),
        attn[..5].to_vec(),
    ));
    checks.push((
        "cross attention",
        Box::new(move |t, v| {
            let vars = AttentionVars {
                w_q: v[2],
                w_k: v[3],
                w_v: v[4],
                w_o: v[5],
                heads: 2,
            };
            let o = multi_head_tape(t, v[0], v[1], &vars, None, None)?;
            Ok(project(t, o.output, 14))
        }),
        vec![attn[0].clone(), r(&[6, 4]), attn[1].clone(), attn[2].clone(), attn[3].clone(), attn[4].clone()],
    ));
    checks.push((
        "sanm layer",
        Box::new(move |t, v| {
            let vars = SanmVars {
                attn: AttentionVars {
                    w_q: v[1],
                    w_k: v[2],
                    w_v: v[3],
                    w_o: v[4],
                    heads: 2,
                },
                fir: FirVars { a: v[5], c: Some(v[6]) },
            };
            let (o, _) = sanm_tape(t, v[0], &vars, &mem, None, None)?;
            Ok(project(t, o, 15))
        }),
        vec![r(&[6, 4]), r(&[4, 4]), r(&[4, 4]), r(&[4, 4]), r(&[4, 4]), r(&[3, 4]), r(&[2, 4])],
    ));
    checks.push((
        "dfsmn layer",
        Box::new(move |t, v| {
            let vars = DfsmnVars {
                w: v[1],
                b: v[2],
                v: v[3],
                v_bias: v[4],
                fir: FirVars { a: v[5], c: Some(v[6]) },
            };
            let o = dfsmn_layer_tape(t, v[0], &vars, &mem)?;
            Ok(project(t, o, 16))
        }),
        vec![r(&[6, 4]), r(&[4, 5]), r(&[5]), r(&[5, 4]), r(&[4]), r(&[3, 4]), r(&[2, 4])],
    ));
    checks
}

/// d = 8, one encoder and one decoder block, four stacked input frames.
fn tiny_model(enc: SublayerKind, dec: SublayerKind, pre_norm: bool, seed: u64) -> Model {
    let mut cfg = ModelConfig::tiny(enc, dec);
    cfg.d_basic = 8;
    cfg.mem_cfg.d = 8;
    cfg.mem_cfg.n1 = 2;
    cfg.mem_cfg.n2 = 1;
    cfg.d_ffn = 16;
    cfg.dfsmn_hidden = 8;
    cfg.n = 1;
    cfg.m = 1;
    cfg.vocab_size = 9;
    cfg.dropout = 0.0;
    cfg.pre_norm = pre_norm;
    let mut model = Model::init(cfg, seed).unwrap();
    // zero-initialized taps and biases get random values so every path is live
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    for t in model.params.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    model
}

fn model_grad_error(model: &Model, feats: &Tensor, tokens: &[usize]) -> f64 {
    let (input, target) = teacher_forcing(tokens, BOS, EOS);
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut net = Net::from_leaves(&model.cfg, &model.params, vars.to_vec())?;
        let mut drop = Dropout::off();
        let z = net.encode(tape, feats, &mut drop)?;
        let logits = net.decode(tape, z, &input, &mut drop)?;
        tape.smoothed_ce_sum(logits, &target, 0.1)
    };
    grad_check(f, model.params.tensors()).unwrap()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut op_worst = (0.0f64, "");
    for (name, f, params) in op_checks(&mut rng) {
        let err = grad_check(|t, v| f(t, v), &params).unwrap();
        if err >= op_worst.0 {
            op_worst = (err, name);
        }
    }
    let feats = rand_tensor(&mut rng, &[4, 560], 1.0);
    let tokens = [4, 7, 5];
    let mut model_worst = (0.0f64, String::new());
    let configs = [
        (SublayerKind::San, SublayerKind::San, false),
        (SublayerKind::Dfsmn, SublayerKind::Dfsmn, false),
        (SublayerKind::Sanm, SublayerKind::Sanm, false),
        (SublayerKind::Sanm, SublayerKind::Dfsmn, false),
        (SublayerKind::Sanm, SublayerKind::Sanm, true),
    ];
    for (i, (enc, dec, pre)) in configs.into_iter().enumerate() {
        let model = tiny_model(enc, dec, pre, 20 + i as u64);
        let err = model_grad_error(&model, &feats, &tokens);
        if err >= model_worst.0 {
            model_worst = (err, format!("{enc}/{dec}{}", if pre { " pre-norm" } else { "" }));
        }
    }
    let secs = start.elapsed();
    let pass = op_worst.0 < OP_GRAD_TOL && model_worst.0 < MODEL_GRAD_TOL && secs < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "op-level worst rel err {:.1e} ({}; tol {OP_GRAD_TOL:e}), model-level worst {:.1e} ({}; tol {MODEL_GRAD_TOL:e}), {:.1}s",
            op_worst.0,
            op_worst.1,
            model_worst.0,
            model_worst.1,
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

/// Largest change in rows `0..=t` of `a` vs `b`.
fn prefix_change(a: &Tensor, b: &Tensor, t: usize) -> f64 {
    (0..=t)
        .flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Overwrites rows after `t` with fresh random values.
fn perturb_after(x: &Tensor, t: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = x.clone();
    for r in t + 1..y.rows() {
        for v in y.row_mut(r) {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    y
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 4];
    let mut future_moved = [0usize; 4];
    for trial in 0..CAUSAL_TRIALS {
        let t_len = rng.random_range(2..=8);
        let cut = rng.random_range(0..t_len - 1);
        let d = [4, 6, 8][trial % 3];

        let acfg = AttentionConfig::new(d, random_heads(&mut rng, d)).unwrap();
        let params = AttentionParams::random(acfg, &mut rng, 0.8);
        let mask = make_causal_mask(t_len).unwrap();
        let x = rand_tensor(&mut rng, &[t_len, d], 1.0);
        let x2 = perturb_after(&x, cut, &mut rng);
        let a = multi_head(&x, &x, &params, Some(&mask)).unwrap();
        let b = multi_head(&x2, &x2, &params, Some(&mask)).unwrap();
        worst[0] = worst[0].max(prefix_change(&a, &b, cut));
        future_moved[0] += usize::from(max_diff(&a, &b) > 0.0);

        let mem = random_mem(&mut rng, d, true);
        let fir = FirCoefficients::random(&mem, &mut rng, 0.8);
        let prev = rand_tensor(&mut rng, &[t_len, d], 1.0);
        let prev2 = perturb_after(&prev, cut, &mut rng);
        let a = fir_memory(&x, &prev, &fir, &mem).unwrap();
        let b = fir_memory(&x2, &prev2, &fir, &mem).unwrap();
        worst[1] = worst[1].max(prefix_change(&a, &b, cut));
        future_moved[1] += usize::from(max_diff(&a, &b) > 0.0);

        let sp = SanmParams::new(params.clone(), fir, mem).unwrap();
        let a = sanm_layer(&x, &sp, Some(&mask)).unwrap();
        let b = sanm_layer(&x2, &sp, Some(&mask)).unwrap();
        worst[2] = worst[2].max(prefix_change(&a, &b, cut));
        future_moved[2] += usize::from(max_diff(&a, &b) > 0.0);

        let kind = SublayerKind::ALL[trial % 3];
        let model = tiny_model(SublayerKind::Sanm, kind, trial % 2 == 1, 300 + trial as u64);
        let tz = rng.random_range(1..=6);
        let z = rand_tensor(&mut rng, &[tz, 8], 1.0);
        let mut tokens: Vec<usize> = vec![BOS];
        tokens.extend((1..t_len).map(|_| rng.random_range(FIRST_TOKEN..9)));
        let mut tokens2 = tokens.clone();
        for tok in &mut tokens2[cut + 1..] {
            *tok = FIRST_TOKEN + (*tok - FIRST_TOKEN + 1) % (9 - FIRST_TOKEN);
        }
        let a = model.decode_logits(&z, &tokens).unwrap();
        let b = model.decode_logits(&z, &tokens2).unwrap();
        worst[3] = worst[3].max(prefix_change(&a, &b, cut));
        future_moved[3] += usize::from(max_diff(&a, &b) > 0.0);
    }
    let names = ["attention", "fir (N2=0)", "sanm", "decoder logits"];
    let detail = names
        .iter()
        .zip(worst)
        .zip(future_moved)
        .map(|((n, w), m)| format!("{n} {w:.1e} ({m}/{CAUSAL_TRIALS} moved after the cut)"))
        .collect::<Vec<_>>()
        .join(", ");
    // the perturbation must actually reach later rows, or the check is vacuous
    let pass = worst.iter().all(|&w| w <= CAUSAL_TOL) && future_moved.iter().all(|&m| m == CAUSAL_TRIALS);
    outcome(pass, format!("{CAUSAL_TRIALS} trials, max prefix change {detail} (tol {CAUSAL_TOL:e})"))
}

// ---------------------------------------------------------------------------

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut layer_ok = 0;
    let mut model_ok = 0;
    for i in 0..REDUCTION_CONFIGS {
        let d = [2, 4, 6, 8][i % 4];
        let t = rng.random_range(1..=8);
        let acfg = AttentionConfig::new(d, random_heads(&mut rng, d)).unwrap();
        let causal = rng.random_bool(0.5);
        let mem = random_mem(&mut rng, d, causal);
        let attn = AttentionParams::random(acfg, &mut rng, 1.0);
        let sp = SanmParams::new(attn.clone(), FirCoefficients::zeros(&mem), mem).unwrap();
        let x = rand_tensor(&mut rng, &[t, d], 1.0);
        let mask = causal.then(|| make_causal_mask(t).unwrap());
        let a = sanm_layer(&x, &sp, mask.as_ref()).unwrap();
        let b = multi_head(&x, &x, &attn, mask.as_ref()).unwrap();
        layer_ok += usize::from(bits_equal(&a, &b));

        // whole model: SAN weights copied into a SAN-M model whose taps stay zero
        let mut cfg = ModelConfig::tiny(SublayerKind::San, SublayerKind::San);
        cfg.d_basic = d;
        cfg.mem_cfg = MemoryConfig { d, ..mem };
        cfg.h = acfg.heads;
        cfg.d_ffn = 2 * d;
        cfg.input_dim = 12;
        cfg.vocab_size = 8;
        cfg.n = 1 + i % 2;
        cfg.m = 1;
        cfg.k = i % 3 / 2;
        cfg.use_positional_encoding = Some(rng.random_bool(0.5));
        cfg.pre_norm = rng.random_bool(0.5);
        let san = Model::init(cfg.clone(), 400 + i as u64).unwrap();
        let mut sanm_cfg = cfg;
        sanm_cfg.sublayer_kind_encoder = SublayerKind::Sanm;
        sanm_cfg.sublayer_kind_decoder = SublayerKind::Sanm;
        let mut sanm = Model::init(sanm_cfg, 999).unwrap();
        for name in san.params.names() {
            *sanm.params.get_mut(name).unwrap() = san.params.get(name).unwrap().clone();
        }
        let feats = rand_tensor(&mut rng, &[t, 12], 1.0);
        let tokens = [BOS, 4, 6, 5];
        let (za, zb) = (san.encode(&feats).unwrap(), sanm.encode(&feats).unwrap());
        let (la, lb) = (san.decode_logits(&za, &tokens).unwrap(), sanm.decode_logits(&zb, &tokens).unwrap());
        model_ok += usize::from(bits_equal(&za, &zb) && bits_equal(&la, &lb));
    }
    let pass = layer_ok == REDUCTION_CONFIGS && model_ok == REDUCTION_CONFIGS;
    outcome(
        pass,
        format!(
            "bit-identical outputs: layer {layer_ok}/{REDUCTION_CONFIGS}, full model (encoder output and logits) {model_ok}/{REDUCTION_CONFIGS}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let full_size = |enc: SublayerKind, dec: SublayerKind| ModelConfig {
        sublayer_kind_encoder: enc,
        sublayer_kind_decoder: dec,
        ..ModelConfig::default()
    };
    let rows = [
        ("SAN/SAN", full_size(SublayerKind::San, SublayerKind::San), 46.0),
        ("DFSMN/DFSMN", full_size(SublayerKind::Dfsmn, SublayerKind::Dfsmn), 37.0),
        ("SAN-M/DFSMN", full_size(SublayerKind::Sanm, SublayerKind::Dfsmn), 43.0),
    ];
    let mut counts = Vec::new();
    let mut within = true;
    let mut detail = Vec::new();
    for (name, cfg, reference) in &rows {
        let n = count_parameters(cfg).unwrap() as f64 / 1e6;
        let rel = (n - reference) / reference;
        within &= rel.abs() <= PARAM_REL_TOL;
        detail.push(format!("{name} {n:.2}M vs {reference}M ({:+.1}%)", 100.0 * rel));
        counts.push(n);
    }
    let ordered = counts[1] < counts[2] && counts[2] < counts[0];
    outcome(
        within && ordered,
        format!(
            "{}; tolerance ±{:.0}%; ordering DFSMN < SAN-M < SAN {}",
            detail.join(", "),
            100.0 * PARAM_REL_TOL,
            if ordered { "holds" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let lengths = [256, 512, 1024, 2048, 4096];
    let kinds = [BenchKind::San, BenchKind::Fir, BenchKind::Sanm, BenchKind::Dfsmn];
    let report = bench_scaling(&kinds, &lengths, 64, 2, 5).unwrap();
    let secs = start.elapsed();
    let san = report.slope(BenchKind::San).unwrap();
    let fir = report.slope(BenchKind::Fir).unwrap();
    let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    let pass = inside(san, SAN_SLOPE) && inside(fir, FIR_SLOPE) && secs < BENCH_BUDGET;
    outcome(
        pass,
        format!(
            "log-log slopes over n=256..4096, d=64: self-attention {san:.3} (want {:?}), fir {fir:.3} (want {:?}); also sanm {:.3}, dfsmn {:.3}; {:.1}s",
            SAN_SLOPE,
            FIR_SLOPE,
            report.slope(BenchKind::Sanm).unwrap(),
            report.slope(BenchKind::Dfsmn).unwrap(),
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn desk_model(kind: SublayerKind, task: &SyntheticTask) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(kind, kind);
    cfg.vocab_size = task.vocab_size();
    cfg.use_positional_encoding = Some(true);
    cfg.dropout = 0.1;
    cfg
}

fn desk_training() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_steps: 5000,
        seed: 1,
        schedule: ScheduleConfig {
            d_model: 64,
            warmup_n: 400,
            k: 0.25,
        },
        ..TrainConfig::default()
    }
}

fn criterion_7() -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let task = SyntheticTask::default();
    let spec = FeatureSpec::default();
    let train_utts = task.generate_split(Split::Train, task.train_size).unwrap();
    let test_utts = task.generate_split(Split::Test, task.test_size).unwrap();
    let train_set = prepare_examples(&train_utts, &spec).unwrap();
    let test_set = prepare_examples(&test_utts, &spec).unwrap();
    let max_len = 2 * task.max_tokens + 2;

    let mut results = Vec::new();
    let mut sanm_model = None;
    for kind in [SublayerKind::Sanm, SublayerKind::Dfsmn, SublayerKind::San] {
        let t0 = Instant::now();
        let out = train(&desk_model(kind, &task), &train_set, &desk_training(), None).unwrap();
        let report = evaluate(&out.model, &test_set, max_len, 1).unwrap();
        let last = out.metrics.last().unwrap().loss;
        eprintln!(
            "  {kind}/{kind}: final loss {last:.3}, held-out CER {:.4}, {:.0}s",
            report.cer,
            t0.elapsed().as_secs_f64()
        );
        results.push((kind, report.cer));
        if kind == SublayerKind::Sanm {
            sanm_model = Some(out.model);
        }
    }
    let secs = start.elapsed();
    let cer_of = |k: SublayerKind| results.iter().find(|(kk, _)| *kk == k).unwrap().1;
    let sanm_cer = cer_of(SublayerKind::Sanm);
    let all_under = results.iter().all(|&(_, c)| c < ANY_CER);
    let detail = results
        .iter()
        .map(|(k, c)| format!("{k} {:.2}%", 100.0 * c))
        .collect::<Vec<_>>()
        .join(", ");
    let main = outcome(
        sanm_cer < SANM_CER && all_under && secs < TRAIN_BUDGET,
        format!(
            "held-out greedy CER {detail} (SAN-M must be < {:.0}%, all < {:.0}%), 3 × 5000 steps in {:.0}s",
            100.0 * SANM_CER,
            100.0 * ANY_CER,
            secs.as_secs_f64()
        ),
    );

    // properties of the trained SAN-M model
    let model = sanm_model.unwrap();
    let exact = exact_decode(&model, &train_set[0], max_len);
    let decode = outcome(exact, format!("train-00000 greedy decode equals its reference: {exact}"));
    let (mass, layers) = diagonal_mass(&model, &test_utts[..20], &spec);
    let band = outcome(
        mass > 0.5,
        format!("trained encoder self-attention mass within |t-t'| <= 2: mean {mass:.3} over {layers} layers x 20 utterances (want > 0.5)"),
    );
    vec![
        ("7".to_string(), main),
        ("7a".to_string(), decode),
        ("7b".to_string(), band),
    ]
}

fn exact_decode(model: &Model, ex: &Example, max_len: usize) -> bool {
    let z = model.encode(&ex.feats).unwrap();
    greedy_decode(model, &z, max_len).unwrap() == ex.tokens
}

fn diagonal_mass(model: &Model, utts: &[sanm_core::frontend::Utterance], spec: &FeatureSpec) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    let mut layers = 0;
    for u in utts {
        let feats = prepare_features(&u.feats, spec).unwrap();
        let mut input = vec![BOS];
        input.extend(&u.tokens);
        let dump = analyze(model, &feats, &input, &u.id).unwrap();
        let enc: Vec<_> = dump.attention.iter().filter(|a| a.site == Site::EncoderSelf).collect();
        layers = enc.len();
        for a in enc {
            total += band_mass(&a.weights, 2).unwrap();
            count += 1;
        }
    }
    (total / count as f64, layers)
}

// ---------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let spec = FeatureSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut shape_ok = 0;
    let mut content_ok = 0;
    for _ in 0..LFR_TRIALS {
        let t = rng.random_range(1..=400);
        let frames = rand_tensor(&mut rng, &[t, 80], 1.0);
        let out = lfr_stack(&frames, &spec).unwrap();
        let expected_rows = t.div_ceil(6);
        shape_ok += usize::from(out.shape() == [expected_rows, 560]);
        // row k stacks frames 6k-3 ..= 6k+3, clamped to the utterance
        let mut same = out.rows() == expected_rows;
        for k in 0..expected_rows.min(out.rows()) {
            for w in 0..7 {
                let src = (6 * k + w).saturating_sub(3).min(t - 1);
                same &= out.row(k)[w * 80..(w + 1) * 80] == *frames.row(src);
            }
        }
        content_ok += usize::from(same);
    }
    outcome(
        shape_ok == LFR_TRIALS && content_ok == LFR_TRIALS,
        format!("{LFR_TRIALS} random T in 1..=400: shape [ceil(T/6) × 560] {shape_ok}/{LFR_TRIALS}, stacked content {content_ok}/{LFR_TRIALS}"),
    )
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let task = SyntheticTask {
        alphabet: 6,
        max_tokens: 5,
        ..SyntheticTask::default()
    };
    let utts = task.generate_split(Split::Train, 24).unwrap();
    let data = prepare_examples(&utts, &FeatureSpec::default()).unwrap();
    let mut mcfg = ModelConfig::tiny(SublayerKind::Sanm, SublayerKind::Dfsmn);
    mcfg.d_basic = 16;
    mcfg.mem_cfg.d = 16;
    mcfg.d_ffn = 32;
    mcfg.dfsmn_hidden = 16;
    mcfg.vocab_size = task.vocab_size();
    let run = |seed: u64| {
        let cfg = TrainConfig {
            max_steps: 40,
            batch_size: 4,
            seed,
            checkpoint_every: 10,
            schedule: ScheduleConfig {
                d_model: 16,
                warmup_n: 10,
                k: 0.5,
            },
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        train(&mcfg, &data, &cfg, Some((dir.path(), &task.to_kv().with_prefix("task")))).unwrap();
        (
            fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
            fs::read(dir.path().join(METRICS_FILE)).unwrap(),
        )
    };
    let (a, b, other) = (run(7), run(7), run(8));
    let same_ckpt = a.0 == b.0;
    let same_log = a.1 == b.1;
    let seed_matters = a.0 != other.0 && a.1 != other.1;
    outcome(
        same_ckpt && same_log && seed_matters,
        format!(
            "seed 7 twice: checkpoint ({} bytes) identical {same_ckpt}, metrics log identical {same_log}; seed 8 differs {seed_matters}",
            a.0.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let titles = [
        ("1", "oracle equivalence"),
        ("2", "gradient checks"),
        ("3", "causality"),
        ("4", "SAN-M with zero taps equals SAN"),
        ("5", "parameter counts"),
        ("6", "complexity slopes"),
        ("7", "desk-scale learning"),
        ("8", "low-frame-rate stacking"),
        ("9", "reproducibility"),
    ];
    // Lettered ids are supplementary observations on a trained model. They
    // are reported but do not decide the exit status; a miss prints MISS.
    let mut failures = 0;
    let mut misses = Vec::new();
    let mut report = |id: &str, title: &str, o: Outcome| {
        let supplementary = id.ends_with(|c: char| c.is_ascii_alphabetic());
        let tag = match (o.pass, supplementary) {
            (true, _) => "PASS",
            (false, false) => {
                failures += 1;
                "FAIL"
            }
            (false, true) => {
                misses.push(id.to_string());
                "MISS"
            }
        };
        println!("[{tag}] {id} {title}: {}", o.detail);
    };
    for (id, title) in titles {
        if !run(id) {
            continue;
        }
        match id {
            "1" => report(id, title, criterion_1()),
            "2" => report(id, title, criterion_2()),
            "3" => report(id, title, criterion_3()),
            "4" => report(id, title, criterion_4()),
            "5" => report(id, title, criterion_5()),
            "6" => report(id, title, criterion_6()),
            "7" => {
                for (sub, o) in criterion_7() {
                    report(&sub, title, o);
                }
            }
            "8" => report(id, title, criterion_8()),
            "9" => report(id, title, criterion_9()),
            _ => unreachable!(),
        }
    }
    if !misses.is_empty() {
        println!("acceptance: supplementary check(s) not reproduced: {}", misses.join(", "));
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion check(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criterion checks passed");
}
