//! Low-frame-rate features and a synthetic pseudo-speech corpus.
//!
//! Base frames are 80-wide filter-bank vectors at a 10 ms hop. The front
//! end normalizes each utterance per dimension, then stacks a 3+1+3 frame
//! window every 6 base frames: output frame `k` is centred on base frame
//! `6k`, and frames outside the utterance repeat the nearest edge frame.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, Reader};
use crate::error::{Error, ParseErrorKind, Result};
use crate::kv::KeyValues;
use crate::model::FIRST_TOKEN;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSpec {
    pub base_dim: usize,
    pub left: usize,
    pub right: usize,
    pub hop: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            base_dim: 80,
            left: 3,
            right: 3,
            hop: 6,
        }
    }
}

impl FeatureSpec {
    pub fn window(&self) -> usize {
        self.left + 1 + self.right
    }

    pub fn stacked_dim(&self) -> usize {
        self.window() * self.base_dim
    }

    /// `ceil(t / hop)`.
    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.hop)
    }
}

/// Stacks context windows at the reduced frame rate. Every output scalar is
/// a copy of an input scalar.
pub fn lfr_stack(frames: &Tensor, spec: &FeatureSpec) -> Result<Tensor> {
    let (t, d) = frames.dims2("lfr_stack")?;
    if d != spec.base_dim {
        return Err(Error::shape("lfr_stack", frames.shape(), &[t, spec.base_dim]));
    }
    if spec.hop == 0 {
        return Err(Error::Config("LFR hop must be positive".into()));
    }
    let rows = spec.output_len(t);
    let mut out = Vec::with_capacity(rows * spec.stacked_dim());
    for k in 0..rows {
        let center = (k * spec.hop) as isize;
        for off in -(spec.left as isize)..=(spec.right as isize) {
            let src = (center + off).clamp(0, t as isize - 1) as usize;
            out.extend_from_slice(frames.row(src));
        }
    }
    Tensor::new(vec![rows, spec.stacked_dim()], out)
}

/// Per-dimension zero mean, unit variance over the utterance. Constant
/// dimensions become zero.
pub fn normalize_utterance(frames: &Tensor) -> Result<Tensor> {
    let (t, d) = frames.dims2("normalize_utterance")?;
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(frames.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for r in 0..t {
        for ((s, v), m) in var.iter_mut().zip(frames.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let s = s / t as f64;
            if s > 1e-12 {
                1.0 / s.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = frames.clone();
    for r in 0..t {
        for ((v, m), k) in out.row_mut(r).iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) * k;
        }
    }
    Ok(out)
}

/// Normalization followed by LFR stacking.
pub fn prepare_features(frames: &Tensor, spec: &FeatureSpec) -> Result<Tensor> {
    lfr_stack(&normalize_utterance(frames)?, spec)
}

/// Synthetic recognition task: every token emits a fixed random template
/// for a random number of frames, between stretches of a silence template.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub alphabet: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// A repeated token is one template run of twice the duration, so a
    /// range with `max_frames < 2 * min_frames` keeps repeats countable.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Silence frames before the first and after the last token.
    pub silence_frames: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub base_dim: usize,
    /// Seeds the templates and the corpus splits.
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            alphabet: 20,
            min_tokens: 1,
            max_tokens: 12,
            min_frames: 10,
            max_frames: 14,
            silence_frames: 6,
            noise: 0.0,
            base_dim: 80,
            seed: 1,
            train_size: 500,
            test_size: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Base frames `[T × base_dim]`.
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic task: {m}")));
        if self.alphabet == 0 || self.base_dim == 0 {
            return bad("alphabet and base_dim must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need 1 ≤ min_tokens ≤ max_tokens");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 ≤ min_frames ≤ max_frames");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative level");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_TOKEN + self.alphabet
    }

    /// One template row per token plus a final silence row, rounded to f32
    /// so corpora round-trip exactly.
    pub fn templates(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ 0x7465_6d70));
        let n = (self.alphabet + 1) * self.base_dim;
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 as f64)
            .collect();
        Tensor::from_parts(vec![self.alphabet + 1, self.base_dim], data)
    }

    /// Seed of utterance `index` of `split`.
    pub fn utterance_seed(&self, split: Split, index: usize) -> u64 {
        let tag = match split {
            Split::Train => 0u64,
            Split::Test => 1u64,
        };
        mix(mix(self.seed) ^ (tag << 48) ^ index as u64)
    }

    pub fn utterance_id(split: Split, index: usize) -> String {
        format!("{}-{index:05}", split.name())
    }

    /// Regenerates an utterance from an id made by [`Self::utterance_id`].
    pub fn utterance_by_id(&self, id: &str) -> Result<Utterance> {
        let (split, index) = id
            .split_once('-')
            .and_then(|(s, i)| {
                let split = match s {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return None,
                };
                i.parse::<usize>().ok().map(|i| (split, i))
            })
            .ok_or_else(|| Error::Config(format!("not a synthetic utterance id: {id:?}")))?;
        let templates = self.templates();
        let (feats, tokens) = generate_with(self, &templates, self.utterance_seed(split, index));
        Ok(Utterance {
            id: id.to_string(),
            feats,
            tokens,
        })
    }

    pub fn generate_split(&self, split: Split, count: usize) -> Result<Vec<Utterance>> {
        self.validate()?;
        let templates = self.templates();
        Ok((0..count)
            .map(|i| {
                let (feats, tokens) = generate_with(self, &templates, self.utterance_seed(split, i));
                Utterance {
                    id: Self::utterance_id(split, i),
                    feats,
                    tokens,
                }
            })
            .collect())
    }

    pub const KEYS: &'static [&'static str] = &[
        "alphabet",
        "min_tokens",
        "max_tokens",
        "min_frames",
        "max_frames",
        "silence_frames",
        "noise",
        "base_dim",
        "seed",
        "train_size",
        "test_size",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("alphabet", self.alphabet);
        kv.set("min_tokens", self.min_tokens);
        kv.set("max_tokens", self.max_tokens);
        kv.set("min_frames", self.min_frames);
        kv.set("max_frames", self.max_frames);
        kv.set("silence_frames", self.silence_frames);
        kv.set("noise", format!("{:?}", self.noise));
        kv.set("base_dim", self.base_dim);
        kv.set("seed", self.seed);
        kv.set("train_size", self.train_size);
        kv.set("test_size", self.test_size);
        kv
    }

    pub fn update_from_kv(mut self, kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS, "task")?;
        kv.read_into("alphabet", &mut self.alphabet)?;
        kv.read_into("min_tokens", &mut self.min_tokens)?;
        kv.read_into("max_tokens", &mut self.max_tokens)?;
        kv.read_into("min_frames", &mut self.min_frames)?;
        kv.read_into("max_frames", &mut self.max_frames)?;
        kv.read_into("silence_frames", &mut self.silence_frames)?;
        kv.read_into("noise", &mut self.noise)?;
        kv.read_into("base_dim", &mut self.base_dim)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("train_size", &mut self.train_size)?;
        kv.read_into("test_size", &mut self.test_size)?;
        self.validate()?;
        Ok(self)
    }
}

fn generate_with(task: &SyntheticTask, templates: &Tensor, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(task.min_tokens..=task.max_tokens);
    let mut tokens = Vec::with_capacity(n);
    let mut rows: Vec<usize> = Vec::new();
    let silence = task.alphabet;
    rows.extend(std::iter::repeat_n(silence, task.silence_frames));
    for _ in 0..n {
        let tok = rng.random_range(0..task.alphabet);
        let dur = rng.random_range(task.min_frames..=task.max_frames);
        tokens.push(FIRST_TOKEN + tok);
        rows.extend(std::iter::repeat_n(tok, dur));
    }
    rows.extend(std::iter::repeat_n(silence, task.silence_frames));
    let d = task.base_dim;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        for &v in templates.row(r) {
            let noisy = if task.noise > 0.0 {
                v + task.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                v
            };
            data.push(noisy as f32 as f64);
        }
    }
    (Tensor::from_parts(vec![rows.len(), d], data), tokens)
}

/// Features and token ids of one utterance, deterministic in `seed`.
pub fn generate_utterance(task: &SyntheticTask, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    task.validate()?;
    Ok(generate_with(task, &task.templates(), seed))
}

pub const CORPUS_MAGIC: &[u8; 8] = b"SANMFEAT";
pub const CORPUS_VERSION: u32 = 1;

/// Corpus container (little-endian):
///
/// ```text
/// magic "SANMFEAT", u32 version, u32 feature width, u32 utterance count
/// per utterance: u32 id length, id bytes, u32 T, u32 width, u32 token count,
///                T × width f32 features (row-major), token count × u32 ids
/// ```
pub fn write_corpus(path: &Path, utts: &[Utterance], base_dim: usize) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    binio::put_u32(&mut out, CORPUS_VERSION);
    binio::put_u32(&mut out, binio::len_u32(base_dim, "feature width")?);
    binio::put_u32(&mut out, binio::len_u32(utts.len(), "utterance count")?);
    for u in utts {
        let (t, d) = u.feats.dims2("write_corpus")?;
        if d != base_dim {
            return Err(Error::shape("write_corpus", u.feats.shape(), &[t, base_dim]));
        }
        binio::put_str(&mut out, &u.id);
        binio::put_u32(&mut out, binio::len_u32(t, "frame count")?);
        binio::put_u32(&mut out, binio::len_u32(d, "feature width")?);
        binio::put_u32(&mut out, binio::len_u32(u.tokens.len(), "token count")?);
        for &v in u.feats.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &tok in &u.tokens {
            binio::put_u32(&mut out, binio::len_u32(tok, "token id")?);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a corpus whose utterances must all be `base_dim` wide.
pub fn read_corpus_from(r: impl std::io::Read, base_dim: usize) -> Result<Vec<Utterance>> {
    let mut r = Reader::new(r);
    let magic = r.exact(8, "magic")?;
    if magic != CORPUS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            kind: ParseErrorKind::MalformedHeader("bad magic".into()),
        });
    }
    let version = r.u32("version")?;
    if version != CORPUS_VERSION {
        return Err(r.error(ParseErrorKind::MalformedHeader(format!("unsupported version {version}"))));
    }
    let width = r.u32("feature width")? as usize;
    if width != base_dim {
        return Err(r.error(ParseErrorKind::MalformedHeader(format!(
            "feature width {width}, expected {base_dim}"
        ))));
    }
    let count = r.u32("utterance count")? as usize;
    let mut utts = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let id = r.string(&format!("utterance {i} id"))?;
        let t = r.u32(&format!("utterance {i} frame count"))? as usize;
        let at = r.offset();
        let d = r.u32(&format!("utterance {i} width"))? as usize;
        if d != base_dim {
            return Err(Error::Parse {
                offset: at,
                kind: ParseErrorKind::DimensionMismatch {
                    utterance: i,
                    expected: base_dim,
                    found: d,
                },
            });
        }
        let n = r.u32(&format!("utterance {i} token count"))? as usize;
        if t == 0 {
            return Err(r.error(ParseErrorKind::Invalid(format!("utterance {i} has no frames"))));
        }
        let truncated = |r: &Reader<_>, (needed, available)| {
            r.error(ParseErrorKind::TruncatedPayload {
                utterance: i,
                needed,
                available,
            })
        };
        let feats = match r.payload(t * d * 4)? {
            Ok(b) => binio::f32s(&b),
            Err(short) => return Err(truncated(&r, short)),
        };
        let tokens = match r.payload(n * 4)? {
            Ok(b) => binio::u32s(&b).into_iter().map(|v| v as usize).collect(),
            Err(short) => return Err(truncated(&r, short)),
        };
        utts.push(Utterance {
            id,
            feats: Tensor::new(vec![t, d], feats)?,
            tokens,
        });
    }
    if !r.at_end()? {
        return Err(r.error(ParseErrorKind::Invalid("trailing bytes after last utterance".into())));
    }
    Ok(utts)
}

pub fn read_corpus(path: &Path, base_dim: usize) -> Result<Vec<Utterance>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus_from(BufReader::new(f), base_dim)
}

/// Reads an 80-wide feature corpus.
pub fn read_feature_file(path: &Path) -> Result<Vec<Utterance>> {
    read_corpus(path, FeatureSpec::default().base_dim)
}
