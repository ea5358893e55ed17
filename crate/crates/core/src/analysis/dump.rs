use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::memory::{average_taps, FirCoefficients};
use crate::model::{Model, Site, SublayerKind};
use crate::tensor::Tensor;

/// Head-averaged attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub site: Site,
    pub layer: usize,
    /// `[T_q × T_k]`, mean over heads.
    pub weights: Tensor,
    pub heads: Vec<Tensor>,
}

/// Channel-averaged FIR filter of one memory layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterTaps {
    pub site: Site,
    pub layer: usize,
    /// Frame offset of each tap, farthest look-back first.
    pub offsets: Vec<isize>,
    pub taps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisDump {
    pub utterance: String,
    pub attention: Vec<AttentionMap>,
    pub filters: Vec<FilterTaps>,
}

fn mean_of(ts: &[Tensor]) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| Error::InvalidTensor("no attention heads recorded".into()))?;
    let mut acc = first.clone();
    for t in &ts[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / ts.len() as f64))
}

fn filters_of(model: &Model) -> Result<Vec<FilterTaps>> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    let mut collect = |site: Site, kind: SublayerKind, layers: usize, stack: &str| -> Result<()> {
        if !kind.has_memory() {
            return Ok(());
        }
        for l in 0..layers {
            let prefix = format!("{stack}.{l}.basic");
            let a = model.params.get(&format!("{prefix}.fir_a"))?.clone();
            let c = model.params.get(&format!("{prefix}.fir_c")).ok().cloned();
            let (s1, s2) = (cfg.mem_cfg.s1 as isize, cfg.mem_cfg.s2 as isize);
            let n1 = a.rows() as isize - 1;
            let n2 = c.as_ref().map_or(0, |c| c.rows() as isize);
            let fir = FirCoefficients { a, c };
            // the DFSMN center carries the unweighted input term; SAN-M taps do not
            let taps = average_taps(&fir, kind == SublayerKind::Dfsmn);
            let offsets = (-n1..=n2).map(|i| if i < 0 { i * s1 } else { i * s2 }).collect();
            out.push(FilterTaps {
                site,
                layer: l,
                offsets,
                taps: taps.into_data(),
            });
        }
        Ok(())
    };
    collect(Site::EncoderSelf, cfg.sublayer_kind_encoder, cfg.n, "enc")?;
    collect(Site::DecoderSelf, cfg.sublayer_kind_decoder, cfg.m + cfg.k, "dec")?;
    Ok(out)
}

/// Runs one teacher-forced forward pass (`decoder_input` starts with BOS)
/// and collects every attention map and memory filter.
pub fn analyze(model: &Model, feats: &Tensor, decoder_input: &[usize], utterance: &str) -> Result<AnalysisDump> {
    let (_, records) = model.forward_recorded(feats, decoder_input)?;
    let attention = records
        .into_iter()
        .map(|r| {
            Ok(AttentionMap {
                site: r.site,
                layer: r.layer,
                weights: mean_of(&r.weights)?,
                heads: r.weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisDump {
        utterance: utterance.to_string(),
        attention,
        filters: filters_of(model)?,
    })
}

/// Mean over rows of the attention mass within `band` positions of the
/// diagonal.
pub fn band_mass(weights: &Tensor, band: usize) -> Result<f64> {
    let (rows, cols) = weights.dims2("band_mass")?;
    let mut total = 0.0;
    for r in 0..rows {
        let lo = r.saturating_sub(band);
        let hi = (r + band + 1).min(cols);
        if lo < hi {
            total += weights.row(r)[lo..hi].iter().sum::<f64>();
        }
    }
    Ok(total / rows as f64)
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let line: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("{}: bad number {v:?}", path.display())))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Plain (ASCII) 8-bit PGM, scaled so the largest entry is white.
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2("write_pgm")?;
    let max = t.data().iter().copied().fold(0.0f64, f64::max);
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = t
            .row(r)
            .iter()
            .map(|&v| {
                let g = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `<site>_<layer>_attention.csv/.pgm` per attention layer (plus
/// `_head<i>.csv` files when `per_head`), `<site>_<layer>_filter.csv` per
/// memory layer and a `meta.txt` summary. Returns the files written.
pub fn write_dump(dump: &AnalysisDump, dir: &Path, per_head: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let mut meta = format!("utterance = {}\n", dump.utterance);
    for m in &dump.attention {
        let stem = format!("{}_{}", m.site.name(), m.layer);
        put(format!("{stem}_attention.csv"), matrix_csv(&m.weights))?;
        if per_head {
            for (h, w) in m.heads.iter().enumerate() {
                put(format!("{stem}_head{h}.csv"), matrix_csv(w))?;
            }
        }
        let (r, c) = m.weights.dims2("write_dump")?;
        let _ = writeln!(meta, "{stem}_attention = {r}x{c}, {} heads", m.heads.len());
    }
    for f in &dump.filters {
        let stem = format!("{}_{}", f.site.name(), f.layer);
        let mut body = String::from("offset,coefficient\n");
        for (o, v) in f.offsets.iter().zip(&f.taps) {
            let _ = writeln!(body, "{o},{v:?}");
        }
        put(format!("{stem}_filter.csv"), body)?;
        let _ = writeln!(meta, "{stem}_filter = {} taps", f.taps.len());
    }
    put("meta.txt".into(), meta)?;
    for m in &dump.attention {
        let p = dir.join(format!("{}_{}_attention.pgm", m.site.name(), m.layer));
        write_pgm(&p, &m.weights)?;
        written.push(p);
    }
    Ok(written)
}
