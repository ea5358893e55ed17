use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SublayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Layout<'a> {
    cfg: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Layout<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) {
        self.push(name, vec![rows, cols], Init::FanIn(rows));
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, out: usize) {
        self.matrix(format!("{prefix}.{w}"), fan_in, out);
        self.push(format!("{prefix}.{b}"), vec![out], Init::Zeros);
    }

    fn layer_norm(&mut self, prefix: &str) {
        let d = self.cfg.d_basic;
        self.push(format!("{prefix}.g"), vec![d], Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str) {
        let a = self.cfg.attention();
        let (d, hk, hv) = (a.d_model, a.heads * a.d_k, a.heads * a.d_v);
        self.matrix(format!("{prefix}.w_q"), d, hk);
        self.matrix(format!("{prefix}.w_k"), d, hk);
        self.matrix(format!("{prefix}.w_v"), d, hv);
        self.matrix(format!("{prefix}.w_o"), hv, d);
    }

    fn fir(&mut self, prefix: &str, unidirectional: bool) {
        let m = self.cfg.mem_cfg;
        let d = self.cfg.d_basic;
        self.push(format!("{prefix}.fir_a"), vec![m.n1 + 1, d], Init::Zeros);
        if !unidirectional && m.n2 > 0 {
            self.push(format!("{prefix}.fir_c"), vec![m.n2, d], Init::Zeros);
        }
    }

    fn basic(&mut self, prefix: &str, kind: SublayerKind, unidirectional: bool) {
        match kind {
            SublayerKind::San => self.attention(prefix),
            SublayerKind::Sanm => {
                self.attention(prefix);
                self.fir(prefix, unidirectional);
            }
            SublayerKind::Dfsmn => {
                let (d, hid) = (self.cfg.d_basic, self.cfg.dfsmn_hidden);
                self.linear(prefix, "w", "b", d, hid);
                self.linear(prefix, "v", "v_bias", hid, d);
                self.fir(prefix, unidirectional);
            }
        }
    }

    fn ffn(&mut self, prefix: &str) {
        let (d, f) = (self.cfg.d_basic, self.cfg.d_ffn);
        self.linear(prefix, "w1", "b1", d, f);
        self.linear(prefix, "w2", "b2", f, d);
    }
}

/// Every learnable tensor of the model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut l = Layout { cfg, specs: Vec::new() };
    let d = cfg.d_basic;

    l.linear("enc.in", "w", "b", cfg.input_dim, d);
    for i in 0..cfg.n {
        let p = format!("enc.{i}");
        l.basic(&format!("{p}.basic"), cfg.sublayer_kind_encoder, false);
        l.layer_norm(&format!("{p}.ln_basic"));
        l.ffn(&format!("{p}.ffn"));
        l.layer_norm(&format!("{p}.ln_ffn"));
    }
    if cfg.pre_norm {
        l.layer_norm("enc.ln_final");
    }

    l.push("dec.embed".into(), vec![cfg.vocab_size, d], Init::FanIn(1));
    for j in 0..cfg.m + cfg.k {
        let p = format!("dec.{j}");
        l.ffn(&format!("{p}.ffn"));
        l.layer_norm(&format!("{p}.ln_ffn"));
        l.basic(&format!("{p}.basic"), cfg.sublayer_kind_decoder, true);
        l.layer_norm(&format!("{p}.ln_basic"));
        if j < cfg.m {
            l.attention(&format!("{p}.cross"));
            l.layer_norm(&format!("{p}.ln_cross"));
        }
    }
    if cfg.pre_norm {
        l.layer_norm("dec.ln_final");
    }
    l.linear("dec.out", "w1", "b1", d, cfg.d_ffn);
    l.linear("dec.out", "w2", "b2", cfg.d_ffn, cfg.vocab_size);
    Ok(l.specs)
}

/// Exact number of learnable scalars, computed without allocating the model.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::with_capacity(named.len());
        for (i, (n, t)) in named.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(ParamStore { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("missing parameter {name}"))),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg)?;
        if specs.len() != self.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(self.iter()) {
            if s.name != n || s.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {n} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: FIR taps and biases start at zero, layer
/// norm gains at one, matrices fan-in-scaled uniform.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = param_specs(cfg)?
        .into_iter()
        .map(|s| {
            let n = s.numel();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let lim = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-lim..lim)).collect()
                }
            };
            (s.name, Tensor::from_parts(s.shape, data))
        })
        .collect();
    ParamStore::from_named(named)
}
