use crate::model::pma::{HeadNorm, HeadVars};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One head's attention over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAttention {
    pub norm: HeadNorm,
    /// Rows are slots, columns patches; each row sums to 1.
    pub weights: Tensor<f64>,
    /// Softmax output before renormalization. For query heads each column
    /// sums to 1; for key heads this equals `weights`.
    pub raw: Tensor<f64>,
}

/// Per-head attention from the slot-producing PMA (or ABMIL's gate).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionMap {
    pub heads: Vec<HeadAttention>,
}

impl AttentionMap {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, heads: &[HeadVars]) -> Self {
        AttentionMap {
            heads: heads
                .iter()
                .map(|h| HeadAttention {
                    norm: h.norm,
                    weights: tape.value(h.weights).cast(),
                    raw: tape.value(h.raw).cast(),
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.heads.first().map_or(0, |h| h.weights.cols())
    }

    /// Number of attention-score entries across heads.
    pub fn num_scores(&self) -> usize {
        self.heads.iter().map(|h| h.weights.len()).sum()
    }

    /// Per-patch scores; see [`patch_attention`].
    pub fn patch_scores(&self) -> Vec<f64> {
        patch_attention(self)
    }
}

/// Attention mass each patch receives, summed over all slots of every
/// key-normalized head and renormalized to sum to 1.
pub fn patch_attention(attn: &AttentionMap) -> Vec<f64> {
    let m = attn.num_patches();
    let mut scores = vec![0.0; m];
    for head in attn.heads.iter().filter(|h| h.norm == HeadNorm::Key) {
        for row in head.weights.data().chunks(m) {
            for (s, &w) in scores.iter_mut().zip(row) {
                *s += w;
            }
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(norm: HeadNorm, rows: &[Vec<f64>]) -> HeadAttention {
        let t = Tensor::from_rows(rows).unwrap();
        HeadAttention {
            norm,
            weights: t.clone(),
            raw: t,
        }
    }

    #[test]
    fn single_patch() {
        let a = AttentionMap {
            heads: vec![head(HeadNorm::Key, &[vec![1.0], vec![1.0]])],
        };
        assert_eq!(patch_attention(&a), vec![1.0]);
    }

    #[test]
    fn uniform_gives_uniform() {
        let a = AttentionMap {
            heads: vec![
                head(HeadNorm::Key, &[vec![0.25; 4], vec![0.25; 4]]),
                head(HeadNorm::Query, &[vec![0.9, 0.1, 0.0, 0.0], vec![0.1; 4]]),
            ],
        };
        assert_eq!(patch_attention(&a), vec![0.25; 4]);
    }

    #[test]
    fn direct_summation() {
        let a = AttentionMap {
            heads: vec![
                head(HeadNorm::Key, &[vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]]),
                head(HeadNorm::Key, &[vec![0.2, 0.2, 0.6], vec![1.0, 0.0, 0.0]]),
            ],
        };
        let s = patch_attention(&a);
        let expect = [1.8 / 4.0, 0.6 / 4.0, 1.6 / 4.0];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
