//! Word error rate and perplexity.

use crate::error::{Result, SanError};

/// Unit-cost Levenshtein distance.
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

/// Edit operations over reference length. Can exceed 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(SanError::Contract("WER of an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Micro-averaged WER: summed edits over summed reference lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusWer {
    pub edits: usize,
    pub reference_len: usize,
}

impl CorpusWer {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) -> usize {
        let d = edit_distance(reference, hypothesis);
        self.edits += d;
        self.reference_len += reference.len();
        d
    }

    pub fn merge(mut self, other: CorpusWer) -> Self {
        self.edits += other.edits;
        self.reference_len += other.reference_len;
        self
    }

    pub fn value(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(SanError::Contract("corpus WER over empty references".into()));
        }
        Ok(self.edits as f64 / self.reference_len as f64)
    }
}

/// `exp(total_loss / glosses)`.
pub fn perplexity(total_loss: f64, glosses: usize) -> Result<f64> {
    if glosses == 0 {
        return Err(SanError::Contract("perplexity over zero glosses".into()));
    }
    Ok((total_loss / glosses as f64).exp())
}
