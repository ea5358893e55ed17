//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "SANMCKPT"
//! version  u32      1
//! header   u32 length + UTF-8 `key = value` lines
//! count    u32      number of tensors
//! tensor   u32 name length, name, u32 ndim, ndim × u64 dims, f64 data
//! ```
//!
//! The header holds every model field as `model.<name>`, `optimizer.step`
//! when optimizer moments are present, and free-form keys such as `task.*`.
//! Parameters come first in layout order, then `adam.m/<name>` and
//! `adam.v/<name>` for each parameter.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::binio::{self, Reader};
use crate::error::{Error, ParseErrorKind, Result};
use crate::kv::KeyValues;
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SANMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    /// Header entries outside `model.*` and `optimizer.*`.
    pub meta: KeyValues,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.cfg.to_kv().with_prefix("model");
        header.merge(&self.meta);
        if let Some(opt) = &self.optimizer {
            header.set("optimizer.step", opt.step);
        }
        let mut named: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::Config("optimizer state does not match parameters".into()));
            }
            for (n, m) in self.params.names().iter().zip(&opt.m) {
                named.push((format!("adam.m/{n}"), m));
            }
            for (n, v) in self.params.names().iter().zip(&opt.v) {
                named.push((format!("adam.v/{n}"), v));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, CHECKPOINT_VERSION);
        binio::put_str(&mut out, &header.render());
        binio::put_u32(&mut out, binio::len_u32(named.len(), "tensor count")?);
        for (name, t) in named {
            binio::put_str(&mut out, &name);
            binio::put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                binio::put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let mut r = Reader::new(r);
        let magic = r.exact(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                kind: ParseErrorKind::MalformedHeader("not a checkpoint (bad magic)".into()),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(ParseErrorKind::MalformedHeader(format!(
                "unsupported checkpoint version {version}"
            ))));
        }
        let text = r.string("header")?;
        let header = KeyValues::parse(&text)
            .map_err(|e| r.error(ParseErrorKind::MalformedHeader(e.to_string())))?;
        let cfg = ModelConfig::default()
            .update_from_kv(&header.section("model"))
            .map_err(|e| r.error(ParseErrorKind::MalformedHeader(e.to_string())))?;
        let opt_step: Option<usize> = header
            .get("optimizer.step")
            .map_err(|e| r.error(ParseErrorKind::MalformedHeader(e.to_string())))?;
        let mut meta = KeyValues::new();
        for k in header.keys() {
            if !k.starts_with("model.") && !k.starts_with("optimizer.") {
                meta.set(k, header.get_str(k).unwrap_or_default());
            }
        }

        let count = r.u32("tensor count")? as usize;
        let mut named = Vec::with_capacity(count);
        for i in 0..count {
            let name = r.string("tensor name")?;
            let ndim = r.u32("tensor rank")? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(r.error(ParseErrorKind::Invalid(format!("tensor {name}: rank {ndim}"))));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.offset();
            let bytes = r.exact(n * 8, &format!("tensor {i} ({name})"))?;
            let t = Tensor::new(shape, binio::f64s(&bytes)).map_err(|e| Error::Parse {
                offset: at,
                kind: ParseErrorKind::Invalid(format!("tensor {name}: {e}")),
            })?;
            named.push((name, t));
        }
        if !r.at_end()? {
            return Err(r.error(ParseErrorKind::Invalid("trailing bytes after last tensor".into())));
        }

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in named {
            if let Some(rest) = name.strip_prefix("adam.m/") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let params = ParamStore::from_named(params)?;
        params.check_layout(&cfg)?;
        let optimizer = match opt_step {
            None => None,
            Some(step) => {
                let order_ok = |xs: &[(String, Tensor)]| {
                    xs.len() == params.len()
                        && xs
                            .iter()
                            .zip(params.iter())
                            .all(|((n, t), (pn, pt))| n == pn && t.shape() == pt.shape())
                };
                if !order_ok(&m) || !order_ok(&v) {
                    return Err(Error::Config("optimizer moments do not match parameters".into()));
                }
                Some(OptimizerState {
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                    step,
                })
            }
        };
        Ok(Checkpoint {
            cfg,
            params,
            optimizer,
            meta,
        })
    }

    /// Writes through a temporary file and renames it into place, so an
    /// existing checkpoint survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_reader(BufReader::new(f))
    }
}
