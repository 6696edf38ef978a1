//! The regression head: concatenated encoder states through one hidden
//! ReLU layer with inverted dropout, then a scalar output.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub dropout: f64,
}

impl FusionHead {
    pub fn zeros(input: usize, hidden: usize, dropout: f64) -> Self {
        FusionHead {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: 0.0,
            dropout,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.nrows()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], usize)> {
        let input = self.input_size();
        let hidden = self.hidden_size();
        vec![
            (self.w1.as_slice_mut().unwrap(), input),
            (self.b1.as_slice_mut().unwrap(), input),
            (self.w2.as_slice_mut().unwrap(), hidden),
            (std::slice::from_mut(&mut self.b2), hidden),
        ]
    }
}

/// Inference-mode head on a single concatenated state vector. Dropout is
/// inverted, so at inference it is the identity.
pub fn fusion_forward(state: ArrayView1<f64>, head: &FusionHead) -> Result<f64> {
    if state.len() != head.input_size() {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, got {}",
            head.input_size(),
            state.len()
        )));
    }
    let mut y = head.b2;
    for j in 0..head.hidden_size() {
        let mut a = head.b1[j];
        for (k, v) in state.iter().enumerate() {
            a += head.w1[(j, k)] * v;
        }
        y += head.w2[j] * a.max(0.0);
    }
    Ok(y)
}

/// Batched head activations kept for backprop.
pub(crate) struct HeadCache {
    /// concatenated encoder states (B x input)
    pub state: Array2<f64>,
    /// pre-activation of the hidden layer (B x hidden)
    pub a1: Array2<f64>,
    /// after ReLU and dropout, what the output layer saw (B x hidden)
    pub kept: Array2<f64>,
    /// dropout mask including the 1/(1-p) keep scale; None at inference
    pub mask: Option<Array2<f64>>,
    /// predictions (B)
    pub y: Array1<f64>,
}

/// Batched head forward. In training mode each hidden unit is dropped
/// with probability `head.dropout` and survivors are scaled by
/// 1/(1-p), so inference needs no rescaling.
pub(crate) fn head_forward_batch(
    state: Array2<f64>,
    head: &FusionHead,
    training: bool,
    rng: &mut ChaCha20Rng,
) -> Result<HeadCache> {
    if state.ncols() != head.input_size() {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, got {}",
            head.input_size(),
            state.ncols()
        )));
    }
    let mut a1 = state.dot(&head.w1.t());
    a1 += &head.b1;
    let relu = a1.mapv(|v| v.max(0.0));
    let (kept, mask) = if training && head.dropout > 0.0 {
        let keep = 1.0 - head.dropout;
        let mask = Array2::from_shape_fn(relu.raw_dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        (&relu * &mask, Some(mask))
    } else {
        (relu, None)
    };
    let y = kept.dot(&head.w2) + head.b2;
    Ok(HeadCache {
        state,
        a1,
        kept,
        mask,
        y,
    })
}

/// Backpropagates `d_y` (gradient per prediction, length B) through the
/// cached head pass. Returns the gradient at the concatenated state and
/// accumulates parameter gradients into `grads`.
pub(crate) fn head_backward_batch(
    head: &FusionHead,
    cache: &HeadCache,
    d_y: &Array1<f64>,
    grads: &mut FusionHead,
) -> Array2<f64> {
    let d_y_col = d_y.view().insert_axis(Axis(1));
    grads.w2 += &cache.kept.t().dot(d_y);
    grads.b2 += d_y.sum();
    let mut d_kept = d_y_col.dot(&head.w2.view().insert_axis(Axis(0)));
    if let Some(mask) = &cache.mask {
        d_kept *= mask;
    }
    let d_a1 = &d_kept * &cache.a1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grads.w1 += &d_a1.t().dot(&cache.state);
    grads.b1 += &d_a1.sum_axis(Axis(0));
    d_a1.dot(&head.w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn small_head() -> FusionHead {
        FusionHead {
            w1: array![[1.0, -1.0], [0.5, 0.5]],
            b1: array![0.0, -0.2],
            w2: array![2.0, -3.0],
            b2: 0.25,
            dropout: 0.0,
        }
    }

    #[test]
    fn hand_forward_with_relu_cutoff() {
        let head = small_head();
        // unit 0: 0.3 - 0.1 = 0.2; unit 1: 0.15 + 0.05 - 0.2 = 0.0 (cut)
        let y = fusion_forward(array![0.3, 0.1].view(), &head).unwrap();
        assert!((y - (0.25 + 2.0 * 0.2)).abs() < 1e-15);
        // negative pre-activation on unit 0
        let y = fusion_forward(array![-0.3, 0.1].view(), &head).unwrap();
        // unit 1: -0.15 + 0.05 - 0.2 = -0.3 (cut); only bias remains
        assert!((y - 0.25).abs() < 1e-15);
    }

    #[test]
    fn batch_matches_single_at_inference() {
        let head = small_head();
        let state = array![[0.3, 0.1], [-0.3, 0.1], [1.0, 2.0]];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let cache = head_forward_batch(state.clone(), &head, false, &mut rng).unwrap();
        for b in 0..3 {
            let want = fusion_forward(state.row(b), &head).unwrap();
            assert!((cache.y[b] - want).abs() < 1e-14);
        }
        assert!(cache.mask.is_none());
    }

    #[test]
    fn dropout_scales_survivors_and_is_deterministic() {
        let mut head = small_head();
        head.dropout = 0.5;
        let state = Array2::from_elem((64, 2), 1.0);
        let mut rng1 = ChaCha20Rng::seed_from_u64(99);
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        let c1 = head_forward_batch(state.clone(), &head, true, &mut rng1).unwrap();
        let c2 = head_forward_batch(state.clone(), &head, true, &mut rng2).unwrap();
        assert_eq!(c1.y, c2.y);
        let mask = c1.mask.unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for v in mask.iter() {
            assert!(*v == 0.0 || *v == 2.0, "mask value {v}");
            seen.insert(v.to_bits());
        }
        assert_eq!(seen.len(), 2, "expected both dropped and kept units");
    }

    #[test]
    fn wrong_width_is_rejected() {
        let head = small_head();
        assert!(matches!(
            fusion_forward(array![1.0].view(), &head),
            Err(Error::Dimension(_))
        ));
    }
}
