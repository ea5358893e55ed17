use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SublayerKind};
use super::params::ParamStore;
use crate::attention::{make_causal_mask, multi_head_tape, AttentionMask, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::memory::{dfsmn_branch_tape, DfsmnVars, FirVars, MemoryConfig};
use crate::sanm::{sanm_tape, SanmVars};
use crate::tensor::Tensor;

/// Sinusoidal position table `[t × d]`: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![t, d], data)
}

/// Which attention a recorded weight matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "enc",
            Site::DecoderSelf => "dec",
            Site::DecoderCross => "cross",
        }
    }
}

/// Per-head attention weights of one layer, captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub site: Site,
    pub layer: usize,
    pub weights: Vec<Tensor>,
}

/// Dropout source for a forward pass; `off()` gives inference behaviour.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn on(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => x,
        }
    }

    fn attention(&mut self) -> Option<(f64, &mut dyn RngCore)> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => Some((rate, rng as &mut dyn RngCore)),
            _ => None,
        }
    }
}

/// Model parameters bound to one tape.
pub struct Net<'a> {
    cfg: &'a ModelConfig,
    store: &'a ParamStore,
    vars: Vec<Var>,
    record: Option<Vec<(Site, usize, Var)>>,
}

impl<'a> Net<'a> {
    pub fn bind(tape: &mut Tape, cfg: &'a ModelConfig, store: &'a ParamStore) -> Self {
        let vars = store.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        Net {
            cfg,
            store,
            vars,
            record: None,
        }
    }

    /// Uses existing leaves, one per parameter in [`ParamStore`] order.
    pub fn from_leaves(cfg: &'a ModelConfig, store: &'a ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Config(format!(
                "{} leaves for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Net {
            cfg,
            store,
            vars,
            record: None,
        })
    }

    /// Keep attention nodes so their weights can be read back.
    pub fn recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    /// Parameter leaves, in [`ParamStore`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn records(&self, tape: &Tape) -> Vec<AttentionRecord> {
        self.record
            .iter()
            .flatten()
            .map(|&(site, layer, node)| AttentionRecord {
                site,
                layer,
                weights: tape.attention_weights(node).unwrap_or_default(),
            })
            .collect()
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn maybe(&self, name: &str) -> Option<Var> {
        self.store.position(name).map(|i| self.vars[i])
    }

    fn attn_vars(&self, prefix: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_q: self.p(&format!("{prefix}.w_q"))?,
            w_k: self.p(&format!("{prefix}.w_k"))?,
            w_v: self.p(&format!("{prefix}.w_v"))?,
            w_o: self.p(&format!("{prefix}.w_o"))?,
            heads: self.cfg.h,
        })
    }

    fn fir_vars(&self, prefix: &str) -> Result<FirVars> {
        Ok(FirVars {
            a: self.p(&format!("{prefix}.fir_a"))?,
            c: self.maybe(&format!("{prefix}.fir_c")),
        })
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b)
    }

    fn affine(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(w)?)?;
        tape.add_row(y, self.p(b)?)
    }

    /// Sub-layer input: normalized first under pre-norm.
    fn enter(&self, tape: &mut Tape, x: Var, ln: &str) -> Result<Var> {
        if self.cfg.pre_norm {
            self.layer_norm(tape, x, ln)
        } else {
            Ok(x)
        }
    }

    /// Residual add after dropout; normalized afterwards under post-norm.
    fn leave(&self, tape: &mut Tape, x: Var, y: Var, ln: &str, drop: &mut Dropout) -> Result<Var> {
        let y = drop.apply(tape, y);
        let s = tape.add(x, y)?;
        if self.cfg.pre_norm {
            Ok(s)
        } else {
            self.layer_norm(tape, s, ln)
        }
    }

    fn ffn(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.affine(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.relu(h);
        self.affine(tape, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    #[allow(clippy::too_many_arguments)]
    fn basic(
        &mut self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        kind: SublayerKind,
        mem: MemoryConfig,
        mask: Option<&AttentionMask>,
        drop: &mut Dropout,
        site: (Site, usize),
    ) -> Result<Var> {
        let (out, node) = match kind {
            SublayerKind::San => {
                let v = self.attn_vars(prefix)?;
                let r = multi_head_tape(tape, x, x, &v, mask, drop.attention())?;
                (r.output, Some(r.attention))
            }
            SublayerKind::Sanm => {
                let v = SanmVars {
                    attn: self.attn_vars(prefix)?,
                    fir: self.fir_vars(prefix)?,
                };
                let (out, node) = sanm_tape(tape, x, &v, &mem, mask, drop.attention())?;
                (out, Some(node))
            }
            SublayerKind::Dfsmn => {
                let v = DfsmnVars {
                    w: self.p(&format!("{prefix}.w"))?,
                    b: self.p(&format!("{prefix}.b"))?,
                    v: self.p(&format!("{prefix}.v"))?,
                    v_bias: self.p(&format!("{prefix}.v_bias"))?,
                    fir: self.fir_vars(prefix)?,
                };
                (dfsmn_branch_tape(tape, x, &v, &mem)?, None)
            }
        };
        if let (Some(rec), Some(node)) = (self.record.as_mut(), node) {
            rec.push((site.0, site.1, node));
        }
        Ok(out)
    }

    /// Encoder over one unpadded feature sequence `[T × input_dim]`; returns
    /// `Z` as `[T × d_model]`.
    pub fn encode(&mut self, tape: &mut Tape, feats: &Tensor, drop: &mut Dropout) -> Result<Var> {
        let cfg = self.cfg;
        let (t, width) = feats.dims2("encoder_forward")?;
        if width != cfg.input_dim {
            return Err(Error::shape("encoder_forward", feats.shape(), &[t, cfg.input_dim]));
        }
        let input = tape.leaf(feats.clone());
        let mut x = self.affine(tape, input, "enc.in.w", "enc.in.b")?;
        if cfg.encoder_positional() {
            let pe = tape.leaf(positional_encoding(t, cfg.d_basic));
            x = tape.add(x, pe)?;
        }
        x = drop.apply(tape, x);
        let mem = cfg.encoder_memory();
        for i in 0..cfg.n {
            let ln = format!("enc.{i}.ln_basic");
            let h = self.enter(tape, x, &ln)?;
            let y = self.basic(
                tape,
                h,
                &format!("enc.{i}.basic"),
                cfg.sublayer_kind_encoder,
                mem,
                None,
                drop,
                (Site::EncoderSelf, i),
            )?;
            x = self.leave(tape, x, y, &ln, drop)?;

            let ln = format!("enc.{i}.ln_ffn");
            let h = self.enter(tape, x, &ln)?;
            let y = self.ffn(tape, h, &format!("enc.{i}.ffn"))?;
            x = self.leave(tape, x, y, &ln, drop)?;
        }
        if cfg.pre_norm {
            x = self.layer_norm(tape, x, "enc.ln_final")?;
        }
        Ok(x)
    }

    /// Decoder over the shifted target ids (starting with BOS); returns
    /// logits `[T' × vocab]`.
    pub fn decode(&mut self, tape: &mut Tape, z: Var, inputs: &[usize], drop: &mut Dropout) -> Result<Var> {
        let cfg = self.cfg;
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != cfg.d_basic {
            let zs = tape.shape(z).to_vec();
            return Err(Error::shape("decoder_forward", &zs, &[zs[0], cfg.d_basic]));
        }
        let t = inputs.len();
        let embed = self.p("dec.embed")?;
        let mut x = tape.embedding(embed, inputs)?;
        if cfg.decoder_positional() {
            let pe = tape.leaf(positional_encoding(t, cfg.d_basic));
            x = tape.add(x, pe)?;
        }
        x = drop.apply(tape, x);
        let mask = make_causal_mask(t)?;
        let mem = cfg.decoder_memory();
        for j in 0..cfg.m + cfg.k {
            let ln = format!("dec.{j}.ln_ffn");
            let h = self.enter(tape, x, &ln)?;
            let y = self.ffn(tape, h, &format!("dec.{j}.ffn"))?;
            x = self.leave(tape, x, y, &ln, drop)?;

            let ln = format!("dec.{j}.ln_basic");
            let h = self.enter(tape, x, &ln)?;
            let y = self.basic(
                tape,
                h,
                &format!("dec.{j}.basic"),
                cfg.sublayer_kind_decoder,
                mem,
                Some(&mask),
                drop,
                (Site::DecoderSelf, j),
            )?;
            x = self.leave(tape, x, y, &ln, drop)?;

            if j < cfg.m {
                let ln = format!("dec.{j}.ln_cross");
                let h = self.enter(tape, x, &ln)?;
                let v = self.attn_vars(&format!("dec.{j}.cross"))?;
                let r = multi_head_tape(tape, h, z, &v, None, drop.attention())?;
                if let Some(rec) = self.record.as_mut() {
                    rec.push((Site::DecoderCross, j, r.attention));
                }
                x = self.leave(tape, x, r.output, &ln, drop)?;
            }
        }
        if cfg.pre_norm {
            x = self.layer_norm(tape, x, "dec.ln_final")?;
        }
        let h = self.affine(tape, x, "dec.out.w1", "dec.out.b1")?;
        let h = tape.relu(h);
        self.affine(tape, h, "dec.out.w2", "dec.out.b2")
    }
}
