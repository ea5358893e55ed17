use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::vocab::PAD;

/// Zero-padded `[B × T × d]` sequences with their valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    data: Tensor,
    lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(data: Tensor, lengths: Vec<usize>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 {
            return Err(Error::InvalidTensor(format!("sequence batch needs [B×T×d], got {s:?}")));
        }
        if lengths.len() != s[0] {
            return Err(Error::shape("SequenceBatch", s, &[lengths.len()]));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > s[1]) {
            return Err(Error::OutOfRange { index: bad, len: s[1] });
        }
        Ok(SequenceBatch { data, lengths })
    }

    /// Stacks `[T_b × d]` matrices, padding with zeros to the longest.
    pub fn from_sequences(seqs: &[Tensor]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::DegenerateBatch("empty sequence batch".into()))?;
        let d = first.dims2("SequenceBatch")?.1;
        let t = seqs.iter().map(Tensor::rows).max().unwrap_or(1);
        let mut data = vec![0.0; seqs.len() * t * d];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let (rows, cols) = s.dims2("SequenceBatch")?;
            if cols != d {
                return Err(Error::shape("SequenceBatch", first.shape(), s.shape()));
            }
            data[b * t * d..b * t * d + rows * d].copy_from_slice(s.data());
            lengths.push(rows);
        }
        SequenceBatch::new(Tensor::from_parts(vec![seqs.len(), t, d], data), lengths)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Valid rows of sequence `b`.
    pub fn sequence(&self, b: usize) -> Result<Tensor> {
        if b >= self.batch_size() {
            return Err(Error::OutOfRange { index: b, len: self.batch_size() });
        }
        let (t, d) = (self.max_len(), self.width());
        let start = b * t * d;
        Tensor::new(
            vec![self.lengths[b], d],
            self.data.data()[start..start + self.lengths[b] * d].to_vec(),
        )
    }
}

/// `[B × T]` token ids padded with `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::DegenerateBatch("empty token batch".into()));
        }
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::DegenerateBatch("empty token sequence".into()));
        }
        let mut ids = vec![PAD; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        Ok(TokenBatch {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Valid ids of sequence `b`.
    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    /// All ids, padded, row-major.
    pub fn padded(&self) -> &[usize] {
        &self.ids
    }
}

/// Teacher-forcing pair for one utterance: decoder input `[BOS, y…]` and
/// target `[y…, EOS]`.
pub fn teacher_forcing(tokens: &[usize], bos: usize, eos: usize) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(bos);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(eos);
    (input, target)
}
