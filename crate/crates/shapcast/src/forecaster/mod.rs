//! The two-stream sequence forecaster.
//!
//! Scaled feature sequences are split into a quantitative stream (price,
//! indicators, exogenous series) and a text stream (group weights and
//! sentiment means). Each stream runs through its own stacked GRU
//! encoder; the final hidden states are concatenated and a small ReLU
//! head regresses the next day's scaled close. The TECH_ONLY variant
//! drops the text encoder entirely, which is the ablation the
//! attribution work compares against.
//!
//! Predictions are returned in price units: the model carries the min-max
//! parameters it was trained under and inverts the close scaling on the
//! way out.

pub mod gru;
pub mod head;
pub mod train;

pub use gru::{encode_sequence, gru_cell_forward, GruEncoder, GruLayer};
pub use head::{fusion_forward, FusionHead};
pub use train::{train, AdamState, EpochLog, TrainConfig};

use crate::error::{Error, Result};
use crate::market_data::{invert_minmax, ScalerParams};
use gru::encoder_forward_batch;
use head::head_forward_batch;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Which feature streams the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Quantitative and text streams fused.
    Full,
    /// Quantitative stream only; text columns are never read.
    TechOnly,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "FULL",
            Variant::TechOnly => "TECH_ONLY",
        })
    }
}

/// Names the model's input columns, in dataset order, and assigns each
/// to a stream. `text` columns are the group weights and sentiment
/// means; everything else is quantitative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub columns: Vec<String>,
    pub tech: Vec<String>,
    pub text: Vec<String>,
    pub target_column: String,
}

impl FeatureManifest {
    /// Splits `columns` into streams: names listed in `text` form the
    /// text stream, the rest stay quantitative.
    pub fn new(columns: Vec<String>, text: Vec<String>, target_column: String) -> Result<Self> {
        for t in &text {
            if !columns.contains(t) {
                return Err(Error::Schema(format!(
                    "text column {t} is not an input column"
                )));
            }
        }
        let tech: Vec<String> = columns
            .iter()
            .filter(|c| !text.contains(c))
            .cloned()
            .collect();
        if tech.is_empty() {
            return Err(Error::Schema(
                "no quantitative columns left after the text split".into(),
            ));
        }
        if !columns.contains(&target_column) {
            return Err(Error::Schema(format!(
                "target column {target_column} is not an input column"
            )));
        }
        Ok(FeatureManifest {
            columns,
            tech,
            text,
            target_column,
        })
    }

    fn indices_of(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.columns
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Schema(format!("column {n} missing from manifest")))
            })
            .collect()
    }

    pub fn tech_indices(&self) -> Result<Vec<usize>> {
        self.indices_of(&self.tech)
    }

    pub fn text_indices(&self) -> Result<Vec<usize>> {
        self.indices_of(&self.text)
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tech: GruEncoder,
    pub text: Option<GruEncoder>,
    pub head: FusionHead,
}

impl ModelParams {
    /// Zero-valued parameters shaped for `variant` over the manifest's
    /// streams.
    pub fn zeros(manifest: &FeatureManifest, variant: Variant, cfg: &TrainConfig) -> Result<Self> {
        let tech = GruEncoder::zeros(manifest.tech.len(), cfg.hidden_size, cfg.num_layers);
        let text = match variant {
            Variant::Full => {
                if manifest.text.is_empty() {
                    return Err(Error::Schema(
                        "the fused variant needs at least one text column".into(),
                    ));
                }
                Some(GruEncoder::zeros(
                    manifest.text.len(),
                    cfg.hidden_size,
                    cfg.num_layers,
                ))
            }
            Variant::TechOnly => None,
        };
        let head_input = cfg.hidden_size * if text.is_some() { 2 } else { 1 };
        let head = FusionHead::zeros(head_input, cfg.head_hidden, cfg.dropout);
        Ok(ModelParams { tech, text, head })
    }

    /// Same shapes, all values zero; the gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (slice, _) in g.tensors_mut() {
            slice.fill(0.0);
        }
        g
    }

    /// Every tensor in a fixed order (tech encoder, text encoder, head),
    /// with fan-in. Initialization, the optimizer and its state all walk
    /// this order, so it must stay stable.
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], usize)> {
        let mut out = self.tech.tensors_mut();
        if let Some(text) = &mut self.text {
            out.extend(text.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    /// Uniform init in +-1/sqrt(fan_in) per tensor, drawn in visitor
    /// order from one stream.
    pub fn init(&mut self, rng: &mut ChaCha20Rng) {
        use rand::Rng;
        for (slice, fan_in) in self.tensors_mut() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in slice {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
}

/// A trained forecaster: parameters, stream manifest, and the scaling it
/// expects its inputs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub manifest: FeatureManifest,
    pub variant: Variant,
    pub steps: usize,
    pub params: ModelParams,
    pub scaler: ScalerParams,
    pub config: TrainConfig,
    pub seed: u64,
}

/// Gathers column subset `idx` of row `t` across the batch.
fn stack_stream(seqs: &[ArrayView2<f64>], t: usize, idx: &[usize]) -> Array2<f64> {
    let mut m = Array2::zeros((seqs.len(), idx.len()));
    for (b, seq) in seqs.iter().enumerate() {
        for (j, &col) in idx.iter().enumerate() {
            m[(b, j)] = seq[(t, col)];
        }
    }
    m
}

/// Per-step stacked stream matrices for a batch of supervised pairs.
pub(crate) fn stack_stream_pairs(
    pairs: &[&crate::market_data::SupervisedPair],
    steps: usize,
    idx: &[usize],
) -> Vec<Array2<f64>> {
    (0..steps)
        .map(|t| {
            let mut m = Array2::zeros((pairs.len(), idx.len()));
            for (b, pair) in pairs.iter().enumerate() {
                for (j, &col) in idx.iter().enumerate() {
                    m[(b, j)] = pair.input[(t, col)];
                }
            }
            m
        })
        .collect()
}

/// Memory cap for one internal inference batch.
const PREDICT_CHUNK: usize = 256;

impl ForecastModel {
    fn check_input(&self, seq: &ArrayView2<f64>) -> Result<()> {
        if seq.nrows() != self.steps || seq.ncols() != self.manifest.columns.len() {
            return Err(Error::Dimension(format!(
                "expected a {} x {} sequence, got {} x {}",
                self.steps,
                self.manifest.columns.len(),
                seq.nrows(),
                seq.ncols()
            )));
        }
        Ok(())
    }

    /// Scaled-space predictions for a batch of scaled sequences.
    pub fn predict_scaled(&self, seqs: &[ArrayView2<f64>]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        for (b, s) in seqs.iter().enumerate() {
            self.check_input(s)?;
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite input for batch item {b}"
                )));
            }
        }
        let tech_idx = self.manifest.tech_indices()?;
        let text_idx = match self.variant {
            Variant::Full => Some(self.manifest.text_indices()?),
            Variant::TechOnly => None,
        };
        let mut out = Vec::with_capacity(seqs.len());
        let mut rng = ChaCha20Rng::seed_from_u64(0); // inference: never consulted
        for chunk in seqs.chunks(PREDICT_CHUNK) {
            let tech_steps: Vec<Array2<f64>> = (0..self.steps)
                .map(|t| stack_stream(chunk, t, &tech_idx))
                .collect();
            let tech_h = encoder_forward_batch(&tech_steps, &self.params.tech, false)?.final_h;
            let state = match (&self.params.text, &text_idx) {
                (Some(enc), Some(idx)) => {
                    let text_steps: Vec<Array2<f64>> = (0..self.steps)
                        .map(|t| stack_stream(chunk, t, idx))
                        .collect();
                    let text_h = encoder_forward_batch(&text_steps, enc, false)?.final_h;
                    ndarray::concatenate(ndarray::Axis(1), &[tech_h.view(), text_h.view()])
                        .expect("stream widths agree")
                }
                _ => tech_h,
            };
            let cache = head_forward_batch(state, &self.params.head, false, &mut rng)?;
            for (b, y) in cache.y.iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite prediction for batch item {b}"
                    )));
                }
                out.push(*y);
            }
        }
        Ok(out)
    }

    /// Price-unit predictions: scaled-space outputs inverted through the
    /// close column's min-max parameters.
    pub fn predict_batch(&self, seqs: &[ArrayView2<f64>]) -> Result<Vec<f64>> {
        let scaled = self.predict_scaled(seqs)?;
        invert_minmax(&scaled, &self.scaler, &self.manifest.target_column)
    }

    /// Price-unit prediction for one scaled sequence.
    pub fn predict(&self, seq: ArrayView2<f64>) -> Result<f64> {
        Ok(self.predict_batch(&[seq])?[0])
    }
}
