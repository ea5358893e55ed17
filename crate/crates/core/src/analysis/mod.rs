//! Greedy decoding and character error rate, attention/filter export, and
//! the sequence-length scaling benchmark.

mod bench;
mod dump;

pub use bench::{bench_scaling, fit_slope, BenchKind, BenchReport, BenchRow, MIN_SAMPLE_SECS};
pub use dump::{
    analyze, band_mass, read_matrix_csv, write_dump, write_pgm, AnalysisDump, AttentionMap, FilterTaps,
};

use crate::error::{Error, Result};
use crate::model::{Model, BOS, EOS};
use crate::tensor::Tensor;
use crate::trainer::Example;

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from BOS until EOS or `max_len` tokens. The returned
/// hypothesis excludes BOS and EOS.
pub fn greedy_decode(model: &Model, z: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("greedy_decode: max_len must be positive".into()));
    }
    let mut prefix = vec![BOS];
    while prefix.len() <= max_len {
        let logits = model.decode_logits(z, &prefix)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Levenshtein distance with unit substitution, insertion and deletion cost.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hyp, reference) / len(reference)`.
pub fn cer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Total edits over total reference tokens.
    pub cer: f64,
    pub edits: usize,
    pub ref_tokens: usize,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Greedy-decodes every example and pools the error counts. Utterances
/// are spread over `threads` workers; results do not depend on the count.
pub fn evaluate(model: &Model, data: &[Example], max_len: usize, threads: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::DegenerateBatch("nothing to evaluate".into()));
    }
    let threads = threads.clamp(1, data.len());
    let chunk = data.len().div_ceil(threads);
    let decode_all = |part: &[Example]| -> Result<Vec<Vec<usize>>> {
        part.iter()
            .map(|ex| greedy_decode(model, &model.encode(&ex.feats)?, max_len))
            .collect()
    };
    let hypotheses: Vec<Vec<usize>> = if threads == 1 {
        decode_all(data)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = data.chunks(chunk).map(|part| s.spawn(move || decode_all(part))).collect();
            let mut all = Vec::with_capacity(data.len());
            for h in handles {
                all.extend(h.join().expect("decode worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut edits = 0;
    let mut ref_tokens = 0;
    for (hyp, ex) in hypotheses.iter().zip(data) {
        if ex.tokens.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += edit_distance(hyp, &ex.tokens);
        ref_tokens += ex.tokens.len();
    }
    Ok(EvalReport {
        cer: edits as f64 / ref_tokens as f64,
        edits,
        ref_tokens,
        hypotheses,
    })
}
