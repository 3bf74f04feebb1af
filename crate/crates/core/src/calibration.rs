//! Temperature-scaled probabilities and the per-sample scalars derived from
//! them: maximum probability, entropy and the entropy-normalized weight.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Probabilities are clamped to this floor before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-wise `softmax(logits / t)` with max subtraction.
pub fn temperature_softmax(logits: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {t}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("logits".into()));
    }
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| ((v - max) / t).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn max_prob(probs: ArrayView2<'_, f64>) -> Array1<f64> {
    probs.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn row_entropy(probs: ArrayView2<'_, f64>) -> Array1<f64> {
    probs.map_axis(Axis(1), |row| {
        -row.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>()
    })
}

/// `W_i = B (1 + e^{-H_i}) / sum_k (1 + e^{-H_k}) * P_i^max`.
pub fn batch_weights(probs: ArrayView2<'_, f64>) -> Array1<f64> {
    weights_from(&max_prob(probs), &row_entropy(probs))
}

fn weights_from(pmax: &Array1<f64>, entropy: &Array1<f64>) -> Array1<f64> {
    let b = pmax.len() as f64;
    let conf = entropy.mapv(|h| 1.0 + (-h).exp());
    let total = conf.sum();
    &conf * pmax * (b / total)
}

/// Calibrated probabilities of one batch with their derived scalars.
#[derive(Debug, Clone)]
pub struct ProbBatch {
    pub probs: Array2<f64>,
    pub max_prob: Array1<f64>,
    pub entropy: Array1<f64>,
    pub weight: Array1<f64>,
    pub temperature: f64,
}

impl ProbBatch {
    pub fn from_logits(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<Self> {
        let probs = temperature_softmax(logits, temperature)?;
        let max_prob = max_prob(probs.view());
        let entropy = row_entropy(probs.view());
        let weight = weights_from(&max_prob, &entropy);
        Ok(Self {
            probs,
            max_prob,
            entropy,
            weight,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.max_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.max_prob.is_empty()
    }

    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(self.probs.view())
    }

    /// Gradient with respect to the logits, given upstream gradients on
    /// `max_prob` and `weight`. Argmax positions are held fixed.
    pub fn backward(&self, g_max_prob: &Array1<f64>, g_weight: &Array1<f64>) -> Array2<f64> {
        let b = self.len() as f64;
        let conf = self.entropy.mapv(|h| 1.0 + (-h).exp());
        let total = conf.sum();

        // W_i = b * conf_i * pmax_i / total
        let g_pmax = g_max_prob + &(g_weight * &conf * (b / total));
        let cross: f64 = (g_weight * &self.max_prob * &conf).sum() / total;
        let g_conf = (g_weight * &self.max_prob - cross) * (b / total);
        let g_entropy = -(&g_conf * &(&conf - 1.0));

        let argmax = self.argmax();
        let mut g_logits = Array2::zeros(self.probs.raw_dim());
        for (i, (row, mut out)) in self.probs.rows().into_iter().zip(g_logits.rows_mut()).enumerate() {
            let g_probs: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let dh = if p >= LOG_FLOOR { -(p.ln() + 1.0) } else { -LOG_FLOOR.ln() };
                    let dm = if j == argmax[i] { g_pmax[i] } else { 0.0 };
                    dm + g_entropy[i] * dh
                })
                .collect();
            let dot: f64 = row.iter().zip(&g_probs).map(|(p, g)| p * g).sum();
            for (j, &p) in row.iter().enumerate() {
                out[j] = p * (g_probs[j] - dot) / self.temperature;
            }
        }
        g_logits
    }
}
