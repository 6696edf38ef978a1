//! Gated recurrent layers: a plain per-vector reference implementation
//! and the batched path used for training and batch inference.
//!
//! One cell update, for input x and previous hidden state h:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)        update gate
//! r  = sigmoid(W_r x + U_r h + b_r)        reset gate
//! c  = tanh(W_h x + U_h (r * h) + b_h)     candidate state
//! h' = (1 - z) * h + z * c
//! ```
//!
//! With all parameters zero the gates sit at 0.5 and the candidate at 0,
//! so each step exactly halves the hidden state. That closed form pins
//! the gate orientation and is asserted bit-for-bit in the tests.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of one recurrent layer. Weight matrices are stored as
/// (hidden x fan_in) so a batched step is `X . W^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_h: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_h: Array1<f64>,
}

impl GruLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruLayer {
            w_z: Array2::zeros((hidden, input)),
            w_r: Array2::zeros((hidden, input)),
            w_h: Array2::zeros((hidden, input)),
            u_z: Array2::zeros((hidden, hidden)),
            u_r: Array2::zeros((hidden, hidden)),
            u_h: Array2::zeros((hidden, hidden)),
            b_z: Array1::zeros(hidden),
            b_r: Array1::zeros(hidden),
            b_h: Array1::zeros(hidden),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.nrows()
    }

    /// Every tensor with the fan-in that sizes its init bound, in a fixed
    /// order shared by initialization and the optimizer state.
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], usize)> {
        let input = self.input_size();
        let hidden = self.hidden_size();
        vec![
            (self.w_z.as_slice_mut().unwrap(), input),
            (self.w_r.as_slice_mut().unwrap(), input),
            (self.w_h.as_slice_mut().unwrap(), input),
            (self.u_z.as_slice_mut().unwrap(), hidden),
            (self.u_r.as_slice_mut().unwrap(), hidden),
            (self.u_h.as_slice_mut().unwrap(), hidden),
            (self.b_z.as_slice_mut().unwrap(), hidden),
            (self.b_r.as_slice_mut().unwrap(), hidden),
            (self.b_h.as_slice_mut().unwrap(), hidden),
        ]
    }
}

/// A stack of recurrent layers; layer l consumes layer l-1's per-step
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruEncoder {
    pub layers: Vec<GruLayer>,
}

impl GruEncoder {
    pub fn zeros(input: usize, hidden: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| GruLayer::zeros(if l == 0 { input } else { hidden }, hidden))
            .collect();
        GruEncoder { layers }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], usize)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

/// One cell update on a single vector. Reference implementation: plain
/// loops, no batching.
pub fn gru_cell_forward(x: ArrayView1<f64>, h: ArrayView1<f64>, layer: &GruLayer) -> Result<Array1<f64>> {
    if x.len() != layer.input_size() || h.len() != layer.hidden_size() {
        return Err(Error::Dimension(format!(
            "cell expects input {} and hidden {}, got {} and {}",
            layer.input_size(),
            layer.hidden_size(),
            x.len(),
            h.len()
        )));
    }
    let hidden = layer.hidden_size();
    let gate = |w: &Array2<f64>, u: &Array2<f64>, b: &Array1<f64>| -> Array1<f64> {
        let mut pre = b.clone();
        for j in 0..hidden {
            for (k, xv) in x.iter().enumerate() {
                pre[j] += w[(j, k)] * xv;
            }
            for (k, hv) in h.iter().enumerate() {
                pre[j] += u[(j, k)] * hv;
            }
        }
        pre
    };
    let z = gate(&layer.w_z, &layer.u_z, &layer.b_z).mapv(sigmoid);
    let r = gate(&layer.w_r, &layer.u_r, &layer.b_r).mapv(sigmoid);
    // r gates the previous state inside the candidate
    let mut pre_c = layer.b_h.clone();
    for j in 0..hidden {
        for (k, xv) in x.iter().enumerate() {
            pre_c[j] += layer.w_h[(j, k)] * xv;
        }
        for k in 0..hidden {
            pre_c[j] += layer.u_h[(j, k)] * (r[k] * h[k]);
        }
    }
    let mut out = Array1::zeros(hidden);
    for j in 0..hidden {
        out[j] = (1.0 - z[j]) * h[j] + z[j] * pre_c[j].tanh();
    }
    Ok(out)
}

/// Runs a stacked encoder over a (steps x input) sequence from zero
/// initial state and returns the top layer's final hidden state.
pub fn encode_sequence(seq: ArrayView2<f64>, encoder: &GruEncoder) -> Result<Array1<f64>> {
    if seq.ncols() != encoder.input_size() {
        return Err(Error::Dimension(format!(
            "encoder expects {} input columns, got {}",
            encoder.input_size(),
            seq.ncols()
        )));
    }
    let hidden = encoder.hidden_size();
    let mut states: Vec<Array1<f64>> = vec![Array1::zeros(hidden); encoder.layers.len()];
    for t in 0..seq.nrows() {
        let mut x = seq.row(t).to_owned();
        for (l, layer) in encoder.layers.iter().enumerate() {
            let h = gru_cell_forward(x.view(), states[l].view(), layer)?;
            states[l] = h;
            x = states[l].clone();
        }
    }
    Ok(states.pop().unwrap())
}

/// Per-step activations cached by the batched forward pass for backprop.
pub(crate) struct LayerStepCache {
    /// input to this layer at this step (B x fan_in)
    pub x: Array2<f64>,
    /// hidden state entering the step (B x h)
    pub h_prev: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub c: Array2<f64>,
    /// r * h_prev, the gated state the candidate saw
    pub rh: Array2<f64>,
}

pub(crate) struct EncoderCache {
    /// caches\[step\]\[layer\]
    pub steps: Vec<Vec<LayerStepCache>>,
    /// top layer's hidden state after the last step (B x h)
    pub final_h: Array2<f64>,
}

fn batched_linear(x: &Array2<f64>, w: &Array2<f64>, u: &Array2<f64>, h: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut pre = x.dot(&w.t()) + h.dot(&u.t());
    pre += b;
    pre
}

/// Batched forward over per-step input matrices (each B x input), from
/// zero initial state. Caches activations when `keep` is set.
pub(crate) fn encoder_forward_batch(
    steps: &[Array2<f64>],
    encoder: &GruEncoder,
    keep: bool,
) -> Result<EncoderCache> {
    let batch = steps.first().map(|m| m.nrows()).unwrap_or(0);
    if batch == 0 || steps.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if steps[0].ncols() != encoder.input_size() {
        return Err(Error::Dimension(format!(
            "encoder expects {} input columns, got {}",
            encoder.input_size(),
            steps[0].ncols()
        )));
    }
    let hidden = encoder.hidden_size();
    let mut states: Vec<Array2<f64>> = vec![Array2::zeros((batch, hidden)); encoder.layers.len()];
    let mut caches: Vec<Vec<LayerStepCache>> = Vec::with_capacity(if keep { steps.len() } else { 0 });
    for x_in in steps {
        let mut x = x_in.clone();
        let mut step_caches = Vec::with_capacity(if keep { encoder.layers.len() } else { 0 });
        for (l, layer) in encoder.layers.iter().enumerate() {
            let h_prev = states[l].clone();
            let z = batched_linear(&x, &layer.w_z, &layer.u_z, &h_prev, &layer.b_z).mapv(sigmoid);
            let r = batched_linear(&x, &layer.w_r, &layer.u_r, &h_prev, &layer.b_r).mapv(sigmoid);
            let rh = &r * &h_prev;
            let mut pre_c = x.dot(&layer.w_h.t()) + rh.dot(&layer.u_h.t());
            pre_c += &layer.b_h;
            let c = pre_c.mapv(f64::tanh);
            let h_new = (1.0 - &z) * &h_prev + &z * &c;
            if keep {
                step_caches.push(LayerStepCache {
                    x: x.clone(),
                    h_prev,
                    z,
                    r,
                    c,
                    rh,
                });
            }
            states[l] = h_new;
            x = states[l].clone();
        }
        if keep {
            caches.push(step_caches);
        }
    }
    Ok(EncoderCache {
        steps: caches,
        final_h: states.pop().unwrap(),
    })
}

/// Backpropagates `d_final` (gradient at the top layer's last hidden
/// state, B x h) through the cached forward pass, accumulating parameter
/// gradients into `grads` (same shapes as the encoder).
pub(crate) fn encoder_backward_batch(
    encoder: &GruEncoder,
    cache: &EncoderCache,
    d_final: Array2<f64>,
    grads: &mut GruEncoder,
) {
    let num_layers = encoder.layers.len();
    let batch = d_final.nrows();
    let hidden = encoder.hidden_size();
    // gradient flowing into each layer's hidden state from later steps
    let mut d_h: Vec<Array2<f64>> = vec![Array2::zeros((batch, hidden)); num_layers];
    d_h[num_layers - 1] = d_final;
    for step in cache.steps.iter().rev() {
        for l in (0..num_layers).rev() {
            let sc = &step[l];
            let layer = &encoder.layers[l];
            let g = &mut grads.layers[l];
            let d_out = &d_h[l];

            let d_z = d_out * &(&sc.c - &sc.h_prev);
            let d_c = d_out * &sc.z;
            let d_h_direct = d_out * &(1.0 - &sc.z);

            let d_c_pre = &d_c * &(1.0 - &sc.c * &sc.c);
            g.w_h += &d_c_pre.t().dot(&sc.x);
            g.u_h += &d_c_pre.t().dot(&sc.rh);
            g.b_h += &d_c_pre.sum_axis(Axis(0));

            let d_rh = d_c_pre.dot(&layer.u_h);
            let d_r = &d_rh * &sc.h_prev;
            let d_h_gated = &d_rh * &sc.r;

            let d_r_pre = &d_r * &(&sc.r * &(1.0 - &sc.r));
            let d_z_pre = &d_z * &(&sc.z * &(1.0 - &sc.z));

            g.w_z += &d_z_pre.t().dot(&sc.x);
            g.w_r += &d_r_pre.t().dot(&sc.x);
            g.u_z += &d_z_pre.t().dot(&sc.h_prev);
            g.u_r += &d_r_pre.t().dot(&sc.h_prev);
            g.b_z += &d_z_pre.sum_axis(Axis(0));
            g.b_r += &d_r_pre.sum_axis(Axis(0));

            let d_h_prev =
                d_h_direct + d_h_gated + d_r_pre.dot(&layer.u_r) + d_z_pre.dot(&layer.u_z);
            let d_x = d_c_pre.dot(&layer.w_h) + d_r_pre.dot(&layer.w_r) + d_z_pre.dot(&layer.w_z);

            d_h[l] = d_h_prev;
            if l > 0 {
                // this layer's input is the layer below's output at the
                // same step
                d_h[l - 1] += &d_x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_layer(input: usize, hidden: usize, rng: &mut ChaCha20Rng) -> GruLayer {
        let mut layer = GruLayer::zeros(input, hidden);
        for (slice, _) in layer.tensors_mut() {
            for v in slice {
                *v = rng.gen::<f64>() - 0.5;
            }
        }
        layer
    }

    fn random_encoder(input: usize, hidden: usize, layers: usize, rng: &mut ChaCha20Rng) -> GruEncoder {
        GruEncoder {
            layers: (0..layers)
                .map(|l| random_layer(if l == 0 { input } else { hidden }, hidden, rng))
                .collect(),
        }
    }

    /// Zero parameters put every gate at 0.5 and the candidate at 0, so
    /// each step exactly halves the state. Halving is a pure exponent
    /// decrement in binary floating point, hence the bitwise asserts.
    #[test]
    fn zero_params_halve_the_state_each_step() {
        let layer = GruLayer::zeros(4, 3);
        let x = array![1.0, -2.0, 3.0, 0.5];
        let mut h = array![1.0, -3.5, 0.25];
        for t in 1..=7 {
            h = gru_cell_forward(x.view(), h.view(), &layer).unwrap();
            let scale = 0.5f64.powi(t);
            assert_eq!(h[0], scale);
            assert_eq!(h[1], -3.5 * scale);
            assert_eq!(h[2], 0.25 * scale);
        }
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let enc = GruEncoder::zeros(4, 3, 2);
        let seq = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64);
        let h = encode_sequence(seq.view(), &enc).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    /// One hand-sized cell, checked against a scalar recomputation that
    /// shares nothing with the implementation but the arithmetic.
    #[test]
    fn cell_matches_scalar_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let layer = random_layer(2, 2, &mut rng);
        let x = array![0.3, -0.7];
        let h = array![0.1, 0.4];
        let got = gru_cell_forward(x.view(), h.view(), &layer).unwrap();

        let lin = |w: &Array2<f64>, u: &Array2<f64>, b: &Array1<f64>, j: usize| {
            w[(j, 0)] * x[0] + w[(j, 1)] * x[1] + u[(j, 0)] * h[0] + u[(j, 1)] * h[1] + b[j]
        };
        let r0 = sigmoid(lin(&layer.w_r, &layer.u_r, &layer.b_r, 0));
        let r1 = sigmoid(lin(&layer.w_r, &layer.u_r, &layer.b_r, 1));
        for j in 0..2 {
            let z = sigmoid(lin(&layer.w_z, &layer.u_z, &layer.b_z, j));
            let pre_c = layer.w_h[(j, 0)] * x[0]
                + layer.w_h[(j, 1)] * x[1]
                + layer.u_h[(j, 0)] * (r0 * h[0])
                + layer.u_h[(j, 1)] * (r1 * h[1])
                + layer.b_h[j];
            let want = (1.0 - z) * h[j] + z * pre_c.tanh();
            assert!((got[j] - want).abs() < 1e-14, "unit {j}: {} vs {want}", got[j]);
        }
    }

    #[test]
    fn batched_forward_agrees_with_vector_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let enc = random_encoder(5, 4, 2, &mut rng);
        let seqs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((6, 5), |_| rng.gen::<f64>() - 0.5))
            .collect();
        let steps: Vec<Array2<f64>> = (0..6)
            .map(|t| {
                let mut m = Array2::zeros((3, 5));
                for (b, s) in seqs.iter().enumerate() {
                    m.row_mut(b).assign(&s.row(t));
                }
                m
            })
            .collect();
        let out = encoder_forward_batch(&steps, &enc, false).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let want = encode_sequence(s.view(), &enc).unwrap();
            for j in 0..4 {
                assert!(
                    (out.final_h[(b, j)] - want[j]).abs() < 1e-12,
                    "batch row {b} unit {j}"
                );
            }
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let layer = GruLayer::zeros(3, 2);
        let bad = gru_cell_forward(array![1.0].view(), array![0.0, 0.0].view(), &layer);
        assert!(matches!(bad, Err(Error::Dimension(_))));
        let enc = GruEncoder::zeros(3, 2, 1);
        let seq = Array2::<f64>::zeros((4, 2));
        assert!(matches!(
            encode_sequence(seq.view(), &enc),
            Err(Error::Dimension(_))
        ));
    }
}
