//! Length-T sequences of d-dimensional embeddings with a validity mask.
//! Masked positions are padding: attention never reads them and losses
//! never count them.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Embedding width shared by the gaze-aligned space and the grounding
/// model.
pub const D_MODEL: usize = 384;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub data: Array2<f64>,
    pub mask: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn new(data: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != data.nrows() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} rows",
                mask.len(),
                data.nrows()
            )));
        }
        Ok(EmbeddingSequence { data, mask })
    }

    /// All positions valid.
    pub fn dense(data: Array2<f64>) -> Self {
        let mask = vec![true; data.nrows()];
        EmbeddingSequence { data, mask }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.data.ncols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_length_is_enforced() {
        let data = Array2::zeros((3, 4));
        assert!(EmbeddingSequence::new(data.clone(), vec![true; 2]).is_err());
        let seq = EmbeddingSequence::new(data, vec![true, false, true]).unwrap();
        assert_eq!(seq.valid_len(), 2);
        assert_eq!(seq.valid_indices(), vec![0, 2]);
        assert_eq!(seq.d_model(), 4);
    }
}
