use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionConfig, AttentionParams};
use crate::error::{Error, Result};
use crate::memory::{dfsmn_layer, fir_memory, DfsmnLayerParams, FirCoefficients, MemoryConfig};
use crate::sanm::{sanm_layer, SanmParams};
use crate::tensor::Tensor;

/// Samples shorter than this are repeated inside one timing.
pub const MIN_SAMPLE_SECS: f64 = 0.01;

/// Forward-only mechanisms that can be timed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchKind {
    /// Multi-head self-attention.
    San,
    /// Full DFSMN layer (projection plus FIR memory).
    Dfsmn,
    /// Self-attention plus FIR memory over its values.
    Sanm,
    /// The FIR memory alone.
    Fir,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::San => "san",
            BenchKind::Dfsmn => "dfsmn",
            BenchKind::Sanm => "sanm",
            BenchKind::Fir => "fir",
        }
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "san" => Ok(BenchKind::San),
            "dfsmn" => Ok(BenchKind::Dfsmn),
            "sanm" => Ok(BenchKind::Sanm),
            "fir" => Ok(BenchKind::Fir),
            other => Err(Error::Config(format!("unknown bench kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub n: usize,
    /// Median seconds per forward call.
    pub median_secs: f64,
    /// Calls per timed sample.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub d: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln t` against `ln n` per kind.
    pub slopes: Vec<(BenchKind, f64)>,
}

impl BenchReport {
    pub fn slope(&self, kind: BenchKind) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kind).map(|&(_, s)| s)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# d={} reps={}\nkind\tn\tmedian_s\tinner\n", self.d, self.reps);
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.6e}\t{}\n", r.kind, r.n, r.median_secs, r.inner));
        }
        for (k, v) in &self.slopes {
            s.push_str(&format!("slope\t{k}\t{v:.3}\n"));
        }
        s
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("slope fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit over a single x value".into()));
    }
    Ok(sxy / sxx)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("non-empty shape")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times `f`, repeating it inside each sample until a sample lasts at
/// least [`MIN_SAMPLE_SECS`]. Returns (median seconds per call, calls per sample).
fn time_it(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    let t0 = Instant::now();
    f()?;
    let once = t0.elapsed().as_secs_f64();
    let inner = if once >= MIN_SAMPLE_SECS {
        1
    } else {
        ((MIN_SAMPLE_SECS / once.max(1e-9)).ceil() as usize).min(1 << 20)
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    Ok((median(samples), inner))
}

/// Forward-only timing of each mechanism at each length, with `heads`
/// attention heads and FIR orders `n1 = n2 = 10`, strides 1.
pub fn bench_scaling(kinds: &[BenchKind], lengths: &[usize], d: usize, heads: usize, reps: usize) -> Result<BenchReport> {
    if reps < 5 {
        return Err(Error::Config(format!("bench needs at least 5 repetitions, got {reps}")));
    }
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config("bench lengths must be positive and strictly increasing".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no bench kinds given".into()));
    }
    let acfg = AttentionConfig::new(d, heads)?;
    let mem = MemoryConfig {
        d,
        n1: 10,
        n2: 10,
        s1: 1,
        s2: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe4c);
    let attn = AttentionParams::random(acfg, &mut rng, 0.3);
    let fir = FirCoefficients::random(&mem, &mut rng, 0.3);
    let dfsmn = DfsmnLayerParams::random(&mem, d, &mut rng, 0.3);
    let sanm = SanmParams::new(attn.clone(), fir.clone(), mem)?;

    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &kind in kinds {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in lengths {
            let x = random(&[n, d], &mut rng);
            let zeros = Tensor::zeros(&[n, d]);
            let (secs, inner) = match kind {
                BenchKind::San => time_it(reps, || multi_head(&x, &x, &attn, None).map(drop))?,
                BenchKind::Sanm => time_it(reps, || sanm_layer(&x, &sanm, None).map(drop))?,
                BenchKind::Dfsmn => time_it(reps, || dfsmn_layer(&x, &dfsmn, &mem).map(drop))?,
                BenchKind::Fir => time_it(reps, || fir_memory(&x, &zeros, &fir, &mem).map(drop))?,
            };
            rows.push(BenchRow {
                kind,
                n,
                median_secs: secs,
                inner,
            });
            xs.push((n as f64).ln());
            ys.push(secs.ln());
        }
        if lengths.len() >= 2 {
            slopes.push((kind, fit_slope(&xs, &ys)?));
        }
    }
    Ok(BenchReport { d, reps, rows, slopes })
}
