//! Training: MSE loss, backprop through both encoders and the head, and
//! a decoupled-weight-decay Adam loop.
//!
//! Every random choice (parameter init, epoch shuffles, dropout masks)
//! comes from its own stream derived from the training seed, so a rerun
//! with the same data, config and seed is bit-identical.

use super::gru::{encoder_backward_batch, encoder_forward_batch};
use super::head::{head_backward_batch, head_forward_batch};
use super::{stack_stream_pairs, FeatureManifest, ForecastModel, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::market_data::{ScalerParams, SupervisedPair};
use crate::util::stage_seed;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// lookback length of each input sequence, in trading days
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_size: 256,
            num_layers: 2,
            head_hidden: 128,
            dropout: 0.1,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 50,
            steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0
            || self.num_layers == 0
            || self.head_hidden == 0
            || self.batch_size == 0
            || self.epochs == 0
            || self.steps == 0
        {
            return Err(Error::Config(
                "hidden_size, num_layers, head_hidden, batch_size, epochs and steps must all be >= 1"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moment buffers, one pair per tensor in visitor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &mut ModelParams) -> Self {
        let sizes: Vec<usize> = params.tensors_mut().iter().map(|(s, _)| s.len()).collect();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One decoupled-decay Adam update on a flat tensor:
///
/// ```text
/// m = b1 m + (1-b1) g        v = b2 v + (1-b2) g^2
/// p -= lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
/// ```
///
/// with the usual 1/(1-b^t) bias corrections. The decay term multiplies
/// the raw parameter, not the gradient.
pub(crate) fn adamw_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// Applies one optimizer step over every tensor.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &mut ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t;
    for (i, ((p, _), (g, _))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors_mut())
        .enumerate()
    {
        debug_assert_eq!(p.len(), g.len());
        adamw_slice(p, g, &mut state.m[i], &mut state.v[i], t, cfg);
    }
}

/// Mean squared error and parameter gradients over one batch of pairs.
///
/// In training mode dropout draws from `rng`; at inference (`training =
/// false`) the rng is never consulted. Non-finite predictions are
/// reported with the offending batch index.
pub fn loss_and_gradients(
    params: &ModelParams,
    manifest: &FeatureManifest,
    variant: Variant,
    pairs: &[&SupervisedPair],
    training: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, ModelParams)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("empty training batch".into()));
    }
    for (b, pair) in pairs.iter().enumerate() {
        // NaN would otherwise vanish inside ReLU's max and silently
        // corrupt the fit, so inputs are screened here with their index
        if pair.input.iter().any(|v| !v.is_finite()) || !pair.target.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite input for batch item {b} (input ending {})",
                pair.input_end
            )));
        }
    }
    let steps = pairs[0].input.nrows();
    let tech_idx = manifest.tech_indices()?;
    let text_idx = match variant {
        Variant::Full => Some(manifest.text_indices()?),
        Variant::TechOnly => None,
    };
    let batch = pairs.len() as f64;

    let tech_steps = stack_stream_pairs(pairs, steps, &tech_idx);
    let tech_cache = encoder_forward_batch(&tech_steps, &params.tech, true)?;
    let (state, text_cache) = match (&params.text, &text_idx) {
        (Some(enc), Some(idx)) => {
            let text_steps = stack_stream_pairs(pairs, steps, idx);
            let cache = encoder_forward_batch(&text_steps, enc, true)?;
            let state = ndarray::concatenate(
                ndarray::Axis(1),
                &[tech_cache.final_h.view(), cache.final_h.view()],
            )
            .expect("stream widths agree");
            (state, Some(cache))
        }
        _ => (tech_cache.final_h.clone(), None),
    };
    let head_cache = head_forward_batch(state, &params.head, training, rng)?;

    let mut loss = 0.0;
    let mut d_y = Array1::zeros(pairs.len());
    for (b, pair) in pairs.iter().enumerate() {
        let y = head_cache.y[b];
        if !y.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite prediction for batch item {b} (input ending {})",
                pair.input_end
            )));
        }
        let e = y - pair.target;
        loss += e * e / batch;
        d_y[b] = 2.0 * e / batch;
    }

    let mut grads = params.zeros_like();
    let d_state = head_backward_batch(&params.head, &head_cache, &d_y, &mut grads.head);
    let h = params.tech.hidden_size();
    let d_tech = d_state.slice(ndarray::s![.., ..h]).to_owned();
    encoder_backward_batch(&params.tech, &tech_cache, d_tech, &mut grads.tech);
    if let (Some(enc), Some(cache)) = (&params.text, &text_cache) {
        let d_text = d_state.slice(ndarray::s![.., h..]).to_owned();
        encoder_backward_batch(enc, cache, d_text, grads.text.as_mut().unwrap());
    }
    Ok((loss, grads))
}

/// One epoch's summary line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

/// Trains a forecaster on supervised pairs.
///
/// Three independent random streams derive from `seed`: "init" for
/// parameters, "shuffle" for epoch orderings, "dropout" for masks. The
/// returned model carries the scaler so its predictions invert to price
/// units.
pub fn train(
    pairs: &[SupervisedPair],
    manifest: &FeatureManifest,
    variant: Variant,
    cfg: &TrainConfig,
    scaler: ScalerParams,
    seed: u64,
) -> Result<(ForecastModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no training pairs".into()));
    }
    for p in pairs {
        if p.input.nrows() != cfg.steps || p.input.ncols() != manifest.columns.len() {
            return Err(Error::Dimension(format!(
                "pair ending {} is {} x {}, expected {} x {}",
                p.input_end,
                p.input.nrows(),
                p.input.ncols(),
                cfg.steps,
                manifest.columns.len()
            )));
        }
    }

    let mut init_rng = ChaCha20Rng::seed_from_u64(stage_seed(seed, "init"));
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(stage_seed(seed, "shuffle"));
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(stage_seed(seed, "dropout"));

    let mut params = ModelParams::zeros(manifest, variant, cfg)?;
    params.init(&mut init_rng);
    let mut state = AdamState::new(&mut params);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SupervisedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, mut grads) =
                loss_and_gradients(&params, manifest, variant, &batch, true, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            adamw_step(&mut params, &mut grads, &mut state, cfg);
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        });
    }

    Ok((
        ForecastModel {
            manifest: manifest.clone(),
            variant,
            steps: cfg.steps,
            params,
            scaler,
            config: cfg.clone(),
            seed,
        },
        logs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::date;
    use ndarray::Array2;
    use rand::Rng;

    fn pair(input: Array2<f64>, target: f64) -> SupervisedPair {
        SupervisedPair {
            input,
            target,
            input_end: date(2020, 6, 1),
            target_date: date(2020, 6, 2),
            crosses_boundary: false,
        }
    }

    fn manifest4() -> FeatureManifest {
        FeatureManifest::new(
            vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()],
            vec!["c2".into(), "c3".into()],
            "c0".into(),
        )
        .unwrap()
    }

    fn identity_scaler() -> ScalerParams {
        ScalerParams {
            fitted_on: "test".into(),
            columns: vec![crate::market_data::ColumnScale {
                name: "c0".into(),
                min: 0.0,
                max: 1.0,
                constant: false,
            }],
        }
    }

    fn random_pairs(n: usize, steps: usize, cols: usize, seed: u64) -> Vec<SupervisedPair> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let input = Array2::from_shape_fn((steps, cols), |_| rng.gen::<f64>() - 0.5);
                pair(input, rng.gen::<f64>() - 0.5)
            })
            .collect()
    }

    /// The optimizer against a bare-arithmetic rerun of its recurrence.
    #[test]
    fn adamw_matches_hand_recurrence() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut p = [1.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        let g = [0.3f64];
        let mut p_hand = 1.0f64;
        let mut m_hand = 0.0f64;
        let mut v_hand = 0.0f64;
        for t in 1..=5u64 {
            adamw_slice(&mut p, &g, &mut m, &mut v, t, &cfg);
            m_hand = 0.9 * m_hand + 0.1 * 0.3;
            v_hand = 0.999 * v_hand + 0.001 * 0.09;
            let m_hat = m_hand / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v_hand / (1.0 - 0.999f64.powi(t as i32));
            p_hand -= 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * p_hand);
            assert!(
                (p[0] - p_hand).abs() < 1e-15,
                "step {t}: {} vs {p_hand}",
                p[0]
            );
        }
    }

    /// With zero gradient the update reduces to pure decoupled decay.
    #[test]
    fn zero_gradient_applies_pure_decay() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut p = [2.0f64, -0.5];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let g = [0.0f64; 2];
        adamw_slice(&mut p, &g, &mut m, &mut v, 1, &cfg);
        // p -= lr * wd * p, written exactly as the implementation does
        assert_eq!(p[0], 2.0 - 1e-3 * (0.01 * 2.0));
        assert_eq!(p[1], -0.5 - 1e-3 * (0.01 * -0.5));
        assert_eq!(m, [0.0; 2]);
        assert_eq!(v, [0.0; 2]);
    }

    fn check_gradients(variant: Variant, dropout: f64, seed: u64) {
        let cfg = TrainConfig {
            hidden_size: 3,
            num_layers: 2,
            head_hidden: 4,
            dropout,
            steps: 3,
            ..TrainConfig::default()
        };
        let manifest = manifest4();
        let mut params = ModelParams::zeros(&manifest, variant, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        params.init(&mut rng);
        let pairs = random_pairs(3, 3, 4, seed + 100);
        let refs: Vec<&SupervisedPair> = pairs.iter().collect();
        let training = dropout > 0.0;
        // one fixed rng clone per evaluation keeps any dropout mask
        // identical across the analytic and both numeric passes
        let base_rng = ChaCha20Rng::seed_from_u64(555);

        let (_, mut grads) = loss_and_gradients(
            &params,
            &manifest,
            variant,
            &refs,
            training,
            &mut base_rng.clone(),
        )
        .unwrap();
        let analytic: Vec<Vec<f64>> = grads
            .tensors_mut()
            .into_iter()
            .map(|(s, _)| s.to_vec())
            .collect();

        let eps = 1e-5;
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            for i in 0..analytic[ti].len() {
                let probe = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].0[i] += delta;
                    loss_and_gradients(&p, &manifest, variant, &refs, training, &mut base_rng.clone())
                        .unwrap()
                        .0
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let a = analytic[ti][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "tensor {ti} element {i}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn gradients_match_central_differences_full() {
        check_gradients(Variant::Full, 0.0, 31);
    }

    #[test]
    fn gradients_match_central_differences_tech_only() {
        check_gradients(Variant::TechOnly, 0.0, 32);
    }

    /// Same check with an active dropout mask held fixed by the rng seed.
    #[test]
    fn gradients_match_central_differences_through_dropout() {
        check_gradients(Variant::Full, 0.4, 33);
    }

    #[test]
    fn non_finite_inputs_name_the_batch_item() {
        let cfg = TrainConfig {
            hidden_size: 2,
            num_layers: 1,
            head_hidden: 2,
            steps: 2,
            ..TrainConfig::default()
        };
        let manifest = manifest4();
        let mut params = ModelParams::zeros(&manifest, Variant::Full, &cfg).unwrap();
        params.init(&mut ChaCha20Rng::seed_from_u64(1));
        let mut pairs = random_pairs(2, 2, 4, 9);
        pairs[1].input[(0, 0)] = f64::NAN;
        let refs: Vec<&SupervisedPair> = pairs.iter().collect();
        let err = loss_and_gradients(
            &params,
            &manifest,
            Variant::Full,
            &refs,
            false,
            &mut ChaCha20Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("batch item 1"), "{err}");
    }

    /// A clean linear relationship should be fit well inside the loss
    /// budget: final epoch loss under a tenth of the target variance.
    #[test]
    fn training_fits_a_linear_trend() {
        let steps = 4;
        let mut pairs = Vec::new();
        for i in 0..48 {
            let x = i as f64 / 48.0;
            let input = Array2::from_shape_fn((steps, 4), |(t, j)| {
                if j == 0 {
                    x + t as f64 * 0.001
                } else {
                    0.3
                }
            });
            pairs.push(pair(input, 0.8 * x + 0.1));
        }
        let cfg = TrainConfig {
            hidden_size: 8,
            num_layers: 1,
            head_hidden: 8,
            dropout: 0.0,
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 8,
            steps,
            ..TrainConfig::default()
        };
        let (model, logs) = train(
            &pairs,
            &manifest4(),
            Variant::TechOnly,
            &cfg,
            identity_scaler(),
            42,
        )
        .unwrap();
        let mean = pairs.iter().map(|p| p.target).sum::<f64>() / pairs.len() as f64;
        let var =
            pairs.iter().map(|p| (p.target - mean).powi(2)).sum::<f64>() / pairs.len() as f64;
        let last = logs.last().unwrap();
        assert_eq!(logs.len(), 60);
        assert!(
            last.mean_loss < 0.1 * var,
            "final loss {} vs variance {var}",
            last.mean_loss
        );
        // and the fit generalizes along the line
        let probe = Array2::from_shape_fn((steps, 4), |(t, j)| {
            if j == 0 {
                0.5 + t as f64 * 0.001
            } else {
                0.3
            }
        });
        let y = model.predict(probe.view()).unwrap();
        assert!((y - 0.5f64.mul_add(0.8, 0.1)).abs() < 0.1, "probe predicted {y}");
    }

    #[test]
    fn constant_targets_are_learned() {
        let pairs: Vec<SupervisedPair> = random_pairs(24, 3, 4, 7)
            .into_iter()
            .map(|mut p| {
                p.target = 0.4;
                p
            })
            .collect();
        let cfg = TrainConfig {
            hidden_size: 4,
            num_layers: 1,
            head_hidden: 4,
            dropout: 0.0,
            learning_rate: 5e-3,
            epochs: 50,
            batch_size: 8,
            steps: 3,
            ..TrainConfig::default()
        };
        let (model, _) = train(
            &pairs,
            &manifest4(),
            Variant::Full,
            &cfg,
            identity_scaler(),
            3,
        )
        .unwrap();
        let y = model.predict(pairs[0].input.view()).unwrap();
        assert!((y - 0.4).abs() < 0.05, "predicted {y}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let pairs = random_pairs(12, 2, 4, 15);
        let cfg = TrainConfig {
            hidden_size: 3,
            num_layers: 2,
            head_hidden: 4,
            dropout: 0.1,
            epochs: 3,
            batch_size: 4,
            steps: 2,
            ..TrainConfig::default()
        };
        let run = |seed| {
            train(
                &pairs,
                &manifest4(),
                Variant::Full,
                &cfg,
                identity_scaler(),
                seed,
            )
            .unwrap()
            .0
        };
        let a = run(99);
        let b = run(99);
        assert_eq!(a, b);
        let c = run(100);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 1e-4;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_config_and_partial_json_overrides() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.hidden_size, 256);
        assert_eq!(cfg.num_layers, 2);
        assert_eq!(cfg.head_hidden, 128);
        assert_eq!(cfg.dropout, 0.1);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.steps, 10);
        let parsed: TrainConfig = serde_json::from_str("{\"hidden_size\": 16}").unwrap();
        assert_eq!(parsed.hidden_size, 16);
        assert_eq!(parsed.epochs, 50);
        assert!(serde_json::from_str::<TrainConfig>("{\"nope\": 1}").is_err());
    }
}
