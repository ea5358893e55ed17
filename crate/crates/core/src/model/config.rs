use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::memory::MemoryConfig;

/// The interchangeable sequence-mixing sub-layer of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SublayerKind {
    San,
    Dfsmn,
    Sanm,
}

impl SublayerKind {
    pub const ALL: [SublayerKind; 3] = [SublayerKind::San, SublayerKind::Dfsmn, SublayerKind::Sanm];

    pub fn name(self) -> &'static str {
        match self {
            SublayerKind::San => "san",
            SublayerKind::Dfsmn => "dfsmn",
            SublayerKind::Sanm => "sanm",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, SublayerKind::San | SublayerKind::Sanm)
    }

    pub fn has_memory(self) -> bool {
        matches!(self, SublayerKind::Dfsmn | SublayerKind::Sanm)
    }
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SublayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "san" => Ok(SublayerKind::San),
            "dfsmn" => Ok(SublayerKind::Dfsmn),
            "sanm" => Ok(SublayerKind::Sanm),
            other => Err(Error::Config(format!("unknown sub-layer kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters of the encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sublayer_kind_encoder: SublayerKind,
    pub sublayer_kind_decoder: SublayerKind,
    /// Encoder blocks.
    pub n: usize,
    /// Decoder blocks with cross-attention.
    pub m: usize,
    /// Decoder blocks without cross-attention.
    pub k: usize,
    /// Width of every basic sub-layer output (the model width).
    pub d_basic: usize,
    pub d_ffn: usize,
    /// Attention heads.
    pub h: usize,
    /// FIR orders/strides; `mem_cfg.d` is kept equal to `d_basic`. The
    /// decoder always uses the look-back half only.
    pub mem_cfg: MemoryConfig,
    /// Width of the ReLU layer inside a DFSMN sub-layer.
    pub dfsmn_hidden: usize,
    pub vocab_size: usize,
    /// Encoder input feature width (stacked LFR frames).
    pub input_dim: usize,
    /// `None` turns sinusoidal encodings on for SAN stacks only.
    pub use_positional_encoding: Option<bool>,
    pub dropout: f64,
    /// Pre-norm residual blocks (post-norm when false).
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sublayer_kind_encoder: SublayerKind::Sanm,
            sublayer_kind_decoder: SublayerKind::Dfsmn,
            n: 6,
            m: 3,
            k: 0,
            d_basic: 512,
            d_ffn: 2048,
            h: 4,
            mem_cfg: MemoryConfig {
                d: 512,
                n1: 10,
                n2: 10,
                s1: 1,
                s2: 1,
            },
            dfsmn_hidden: 512,
            vocab_size: 4233,
            input_dim: 560,
            use_positional_encoding: None,
            dropout: 0.1,
            pre_norm: false,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale runs.
    pub fn tiny(encoder: SublayerKind, decoder: SublayerKind) -> Self {
        ModelConfig {
            sublayer_kind_encoder: encoder,
            sublayer_kind_decoder: decoder,
            n: 2,
            m: 1,
            k: 0,
            d_basic: 64,
            d_ffn: 256,
            h: 2,
            mem_cfg: MemoryConfig {
                d: 64,
                n1: 4,
                n2: 4,
                s1: 1,
                s2: 1,
            },
            dfsmn_hidden: 64,
            vocab_size: 24,
            input_dim: 560,
            use_positional_encoding: None,
            dropout: 0.1,
            pre_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("the encoder needs at least one block (N ≥ 1)".into()));
        }
        if self.d_basic == 0 || self.d_ffn == 0 || self.vocab_size == 0 || self.input_dim == 0 {
            return Err(Error::Config("widths and vocabulary size must be positive".into()));
        }
        if self.d_basic < 2 {
            return Err(Error::Config("d_basic must be at least 2 for layer norm".into()));
        }
        AttentionConfig::new(self.d_basic, self.h)?;
        if self.mem_cfg.d != self.d_basic {
            return Err(Error::Config(format!(
                "memory width {} differs from d_basic {}",
                self.mem_cfg.d, self.d_basic
            )));
        }
        self.mem_cfg.validate()?;
        if self.dfsmn_hidden == 0 {
            return Err(Error::Config("dfsmn_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_basic, self.h).expect("validated config")
    }

    pub fn encoder_memory(&self) -> MemoryConfig {
        self.mem_cfg.with_width(self.d_basic)
    }

    pub fn decoder_memory(&self) -> MemoryConfig {
        self.mem_cfg.with_width(self.d_basic).unidirectional()
    }

    pub fn encoder_positional(&self) -> bool {
        self.use_positional_encoding
            .unwrap_or(self.sublayer_kind_encoder == SublayerKind::San)
    }

    pub fn decoder_positional(&self) -> bool {
        self.use_positional_encoding
            .unwrap_or(self.sublayer_kind_decoder == SublayerKind::San)
    }

    pub const KEYS: &'static [&'static str] = &[
        "sublayer_kind_encoder",
        "sublayer_kind_decoder",
        "n",
        "m",
        "k",
        "d_basic",
        "d_ffn",
        "h",
        "n1",
        "n2",
        "s1",
        "s2",
        "dfsmn_hidden",
        "vocab_size",
        "input_dim",
        "use_positional_encoding",
        "dropout",
        "pre_norm",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("sublayer_kind_encoder", self.sublayer_kind_encoder);
        kv.set("sublayer_kind_decoder", self.sublayer_kind_decoder);
        kv.set("n", self.n);
        kv.set("m", self.m);
        kv.set("k", self.k);
        kv.set("d_basic", self.d_basic);
        kv.set("d_ffn", self.d_ffn);
        kv.set("h", self.h);
        kv.set("n1", self.mem_cfg.n1);
        kv.set("n2", self.mem_cfg.n2);
        kv.set("s1", self.mem_cfg.s1);
        kv.set("s2", self.mem_cfg.s2);
        kv.set("dfsmn_hidden", self.dfsmn_hidden);
        kv.set("vocab_size", self.vocab_size);
        kv.set("input_dim", self.input_dim);
        kv.set(
            "use_positional_encoding",
            match self.use_positional_encoding {
                None => "auto".to_string(),
                Some(b) => b.to_string(),
            },
        );
        // `{:?}` keeps the shortest round-tripping representation.
        kv.set("dropout", format!("{:?}", self.dropout));
        kv.set("pre_norm", self.pre_norm);
        kv
    }

    /// Reads the keys present in `kv` on top of `self`.
    pub fn update_from_kv(mut self, kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS, "model")?;
        kv.read_into("sublayer_kind_encoder", &mut self.sublayer_kind_encoder)?;
        kv.read_into("sublayer_kind_decoder", &mut self.sublayer_kind_decoder)?;
        kv.read_into("n", &mut self.n)?;
        kv.read_into("m", &mut self.m)?;
        kv.read_into("k", &mut self.k)?;
        kv.read_into("d_basic", &mut self.d_basic)?;
        kv.read_into("d_ffn", &mut self.d_ffn)?;
        kv.read_into("h", &mut self.h)?;
        kv.read_into("n1", &mut self.mem_cfg.n1)?;
        kv.read_into("n2", &mut self.mem_cfg.n2)?;
        kv.read_into("s1", &mut self.mem_cfg.s1)?;
        kv.read_into("s2", &mut self.mem_cfg.s2)?;
        kv.read_into("dfsmn_hidden", &mut self.dfsmn_hidden)?;
        kv.read_into("vocab_size", &mut self.vocab_size)?;
        kv.read_into("input_dim", &mut self.input_dim)?;
        if let Some(v) = kv.get_str("use_positional_encoding") {
            self.use_positional_encoding = match v {
                "auto" => None,
                other => Some(other.parse().map_err(|_| {
                    Error::Config(format!("use_positional_encoding: cannot parse {other:?}"))
                })?),
            };
        }
        kv.read_into("dropout", &mut self.dropout)?;
        kv.read_into("pre_norm", &mut self.pre_norm)?;
        self.mem_cfg.d = self.d_basic;
        self.validate()?;
        Ok(self)
    }
}
