//! Semantic grouping of text embeddings and the daily features derived
//! from them.
//!
//! Documents arrive as embedding vectors with sentiment probabilities.
//! Cosine k-means (on unit-normalized vectors) partitions them into k
//! semantic groups; each group then contributes one daily feature, the
//! mean sentiment polarity of the documents assigned to it that day.

use crate::error::{Error, Result};
use crate::market_data::FeatureMatrix;
use chrono::NaiveDate;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;

/// One embedded document with sentiment probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentEmbedding {
    pub doc_id: String,
    pub date: NaiveDate,
    pub vector: Vec<f64>,
    pub p_pos: f64,
    pub p_neg: f64,
    pub p_neu: f64,
}

impl DocumentEmbedding {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_pos", self.p_pos),
            ("p_neg", self.p_neg),
            ("p_neu", self.p_neu),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Schema(format!(
                    "document {}: {name} = {p} outside [0, 1]",
                    self.doc_id
                )));
            }
        }
        let sum = self.p_pos + self.p_neg + self.p_neu;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Schema(format!(
                "document {}: sentiment probabilities sum to {sum}, not 1",
                self.doc_id
            )));
        }
        if self.vector.is_empty() || self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "document {}: embedding vector empty or non-finite",
                self.doc_id
            )));
        }
        Ok(())
    }
}

/// Sentiment polarity of one document: p_pos - p_neg, in [-1, 1].
pub fn sentiment_polarity(doc: &DocumentEmbedding) -> f64 {
    doc.p_pos - doc.p_neg
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rescales every document vector to unit norm. A zero vector cannot be
/// normalized and is rejected by doc_id.
pub fn normalize_embeddings(docs: &mut [DocumentEmbedding]) -> Result<()> {
    for d in docs.iter_mut() {
        let n = norm(&d.vector);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numerical(format!(
                "document {}: zero or non-finite embedding norm",
                d.doc_id
            )));
        }
        for v in &mut d.vector {
            *v /= n;
        }
    }
    Ok(())
}

/// Loads a JSONL embeddings file: one document object per line. All
/// vectors must share one dimension.
pub fn load_embeddings_jsonl(path: &std::path::Path) -> Result<Vec<DocumentEmbedding>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentEmbedding = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        doc.validate()?;
        match dim {
            None => dim = Some(doc.vector.len()),
            Some(d) if d != doc.vector.len() => {
                return Err(Error::Dimension(format!(
                    "document {}: embedding dimension {} differs from {}",
                    doc.doc_id,
                    doc.vector.len(),
                    d
                )))
            }
            _ => {}
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} contains no documents",
            path.display()
        )));
    }
    Ok(docs)
}

/// Serializes documents back to JSONL (one compact object per line).
pub fn embeddings_to_jsonl(docs: &[DocumentEmbedding]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut out, d).map_err(|e| Error::Schema(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// A fitted cosine k-means model: k unit-norm centroids over dimension
/// `dim`, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingModel {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

impl GroupingModel {
    pub fn group_names(&self) -> Vec<String> {
        (0..self.k).map(|g| format!("group_{g}_weight")).collect()
    }
}

/// Iteration diagnostics from a k-means fit. The objective is the total
/// cosine distance (sum of 1 - cos) after each assignment pass; Lloyd
/// iterations never increase it.
#[derive(Debug, Clone)]
pub struct FitStats {
    pub iterations: usize,
    pub converged: bool,
    pub objective: Vec<f64>,
    pub assignments: Vec<usize>,
}

/// Assigns a vector to the centroid with the highest cosine similarity;
/// ties break toward the lowest group index.
pub fn assign_group(vector: &[f64], model: &GroupingModel) -> Result<usize> {
    if vector.len() != model.dim {
        return Err(Error::Dimension(format!(
            "vector dimension {} does not match model dimension {}",
            vector.len(),
            model.dim
        )));
    }
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (g, c) in model.centroids.iter().enumerate() {
        let sim = dot(vector, c);
        if sim > best_sim {
            best_sim = sim;
            best = g;
        }
    }
    Ok(best)
}

/// Cosine k-means over unit-normalized document vectors.
///
/// Seeding follows k-means++: the first centroid is a uniformly chosen
/// document, later ones are drawn with probability proportional to the
/// squared cosine distance to the nearest chosen centroid. Lloyd passes
/// then alternate argmax-cosine assignment and renormalized-mean updates
/// until assignments stop changing or 100 iterations elapse. Everything
/// is driven by `seed`, so refits are bit-identical.
pub fn cluster_cosine_kmeans(
    docs: &[DocumentEmbedding],
    k: usize,
    seed: u64,
) -> Result<(GroupingModel, FitStats)> {
    if k == 0 {
        return Err(Error::Usage("cannot cluster into zero groups".into()));
    }
    if docs.is_empty() {
        return Err(Error::InsufficientData("no documents to cluster".into()));
    }
    let dim = docs[0].vector.len();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(docs.len());
    for d in docs {
        if d.vector.len() != dim {
            return Err(Error::Dimension(format!(
                "document {}: dimension {} differs from {}",
                d.doc_id,
                d.vector.len(),
                dim
            )));
        }
        let n = norm(&d.vector);
        if n == 0.0 {
            return Err(Error::Numerical(format!(
                "document {}: zero embedding norm",
                d.doc_id
            )));
        }
        vectors.push(d.vector.iter().map(|v| v / n).collect());
    }
    let distinct: std::collections::BTreeSet<Vec<u64>> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct vectors cannot support {k} groups",
            distinct.len()
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(vectors[rng.gen_range(0..vectors.len())].clone());
    let mut nearest: Vec<f64> = vectors
        .iter()
        .map(|v| 1.0 - dot(v, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut roll = rng.gen::<f64>() * total;
            let mut chosen = vectors.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                roll -= w;
                if roll <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..vectors.len())
        };
        let c = vectors[pick].clone();
        for (i, v) in vectors.iter().enumerate() {
            nearest[i] = nearest[i].min(1.0 - dot(v, &c));
        }
        centroids.push(c);
    }

    let model_stub = |centroids: Vec<Vec<f64>>| GroupingModel {
        k,
        dim,
        seed,
        centroids,
    };
    let assign_all = |centroids: &[Vec<f64>]| -> Vec<usize> {
        vectors
            .iter()
            .map(|v| {
                let mut best = 0usize;
                let mut best_sim = f64::NEG_INFINITY;
                for (g, c) in centroids.iter().enumerate() {
                    let sim = dot(v, c);
                    if sim > best_sim {
                        best_sim = sim;
                        best = g;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign_all(&centroids);
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    for _ in 0..100 {
        iterations += 1;
        objective.push(
            vectors
                .iter()
                .zip(&assignments)
                .map(|(v, &g)| 1.0 - dot(v, &centroids[g]))
                .sum(),
        );
        // renormalized mean per group; empty groups keep their centroid
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &g) in vectors.iter().zip(&assignments) {
            counts[g] += 1;
            for (s, x) in sums[g].iter_mut().zip(v) {
                *s += x;
            }
        }
        for g in 0..k {
            if counts[g] == 0 {
                continue;
            }
            let n = norm(&sums[g]);
            if n > 0.0 {
                centroids[g] = sums[g].iter().map(|s| s / n).collect();
            }
        }
        let next = assign_all(&centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }

    Ok((
        model_stub(centroids),
        FitStats {
            iterations,
            converged,
            objective,
            assignments,
        },
    ))
}

/// Daily group-level features: one mean-polarity weight per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyGroupFeatures {
    pub date: NaiveDate,
    pub weights: Vec<f64>,
}

/// Mean sentiment polarity per group over one day's documents. Groups
/// with no documents that day read 0.
pub fn daily_group_weights(
    date: NaiveDate,
    docs: &[&DocumentEmbedding],
    model: &GroupingModel,
) -> Result<DailyGroupFeatures> {
    let mut sums = vec![0.0; model.k];
    let mut counts = vec![0usize; model.k];
    for d in docs {
        let g = assign_group(&d.vector, model)?;
        sums[g] += sentiment_polarity(d);
        counts[g] += 1;
    }
    let weights = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(DailyGroupFeatures { date, weights })
}

/// Builds the text-derived feature block over `calendar`: one
/// `group_g_weight` column per group plus the daily mean sentiment
/// probabilities (`sent_pos`, `sent_neg`, `sent_neu`). Documents dated
/// outside the calendar are dropped; the count of dropped documents is
/// returned alongside.
pub fn build_group_feature_series(
    docs: &[DocumentEmbedding],
    model: &GroupingModel,
    calendar: &[NaiveDate],
) -> Result<(FeatureMatrix, usize)> {
    let days: std::collections::BTreeSet<NaiveDate> = calendar.iter().copied().collect();
    let mut by_day: BTreeMap<NaiveDate, Vec<&DocumentEmbedding>> = BTreeMap::new();
    let mut dropped = 0usize;
    for d in docs {
        if days.contains(&d.date) {
            by_day.entry(d.date).or_default().push(d);
        } else {
            dropped += 1;
        }
    }
    let mut columns: Vec<String> = model.group_names();
    columns.extend(["sent_pos".into(), "sent_neg".into(), "sent_neu".into()]);
    let empty: Vec<&DocumentEmbedding> = Vec::new();
    let mut values = Array2::zeros((calendar.len(), columns.len()));
    for (i, day) in calendar.iter().enumerate() {
        let day_docs = by_day.get(day).unwrap_or(&empty);
        let daily = daily_group_weights(*day, day_docs, model)?;
        for (g, w) in daily.weights.iter().enumerate() {
            values[(i, g)] = *w;
        }
        if !day_docs.is_empty() {
            let n = day_docs.len() as f64;
            values[(i, model.k)] = day_docs.iter().map(|d| d.p_pos).sum::<f64>() / n;
            values[(i, model.k + 1)] = day_docs.iter().map(|d| d.p_neg).sum::<f64>() / n;
            values[(i, model.k + 2)] = day_docs.iter().map(|d| d.p_neu).sum::<f64>() / n;
        }
    }
    Ok((
        FeatureMatrix::new(calendar.to_vec(), columns, values)?,
        dropped,
    ))
}
