//! Attention interpretability metrics: per-layer entropy, self-attention
//! focus, and cross-layer distribution similarity, computed from captured
//! attention weights.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    BadShape {
        expected: usize,
        got: usize,
    },
    ZeroRow {
        layer: usize,
        head: usize,
        row: usize,
    },
    ZeroNorm {
        layer: usize,
        head: usize,
    },
    TooFewLayers {
        layers: usize,
    },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::BadShape { expected, got } => {
                write!(f, "attention buffer holds {got} values, expected {expected}")
            }
            MetricError::ZeroRow { layer, head, row } => {
                write!(f, "all-zero attention row at layer {layer}, head {head}, token {row}")
            }
            MetricError::ZeroNorm { layer, head } => {
                write!(f, "zero-norm attention matrix at layer {layer}, head {head}")
            }
            MetricError::TooFewLayers { layers } => {
                write!(f, "similarity needs at least 2 layers, got {layers}")
            }
        }
    }
}

/// Post-softmax attention weights indexed `[layer][head][query][key]`.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        weights: Vec<f64>,
    ) -> Result<Self, MetricError> {
        let expected = layers * heads * tokens * tokens;
        if weights.len() != expected {
            return Err(MetricError::BadShape {
                expected,
                got: weights.len(),
            });
        }
        Ok(AttentionTensor {
            layers,
            heads,
            tokens,
            weights,
        })
    }

    #[inline]
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let n = self.tokens;
        let base = ((layer * self.heads + head) * n + query) * n;
        &self.weights[base..base + n]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.row(layer, head, query)[key]
    }

    pub fn raw(&self) -> &[f64] {
        &self.weights
    }

    /// Row-stochastic and causal-zero checks for captured forward passes.
    pub fn check_invariants(&self, tol: f64) -> bool {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..self.tokens {
                    let row = self.row(l, h, i);
                    let sum: f64 = row.iter().sum();
                    if libm::fabs(sum - 1.0) > tol || row.iter().any(|&v| v < 0.0) {
                        return false;
                    }
                    if row[i + 1..].iter().any(|&v| v != 0.0) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Entropy,
    Focus,
    Similarity,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Entropy => "entropy",
            MetricKind::Focus => "focus",
            MetricKind::Similarity => "similarity",
        }
    }
}

/// One scalar per layer (or per consecutive layer pair for similarity).
#[derive(Debug, Clone)]
pub struct LayerSeries {
    pub metric: MetricKind,
    pub label: String,
    pub values: Vec<f64>,
}

fn renormalized_row(row: &[f64]) -> Option<Vec<f64>> {
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    Some(row.iter().map(|&v| v / sum).collect())
}

/// Shannon entropy of each re-normalized attention row, averaged over
/// tokens and then over heads, one value per layer. Natural log,
/// 0·log 0 := 0.
pub fn attention_entropy(attn: &AttentionTensor, label: &str) -> Result<LayerSeries, MetricError> {
    let n = attn.tokens as f64;
    let mut values = Vec::with_capacity(attn.layers);
    for l in 0..attn.layers {
        let mut layer_sum = 0.0;
        for h in 0..attn.heads {
            let mut head_sum = 0.0;
            for i in 0..attn.tokens {
                let p = renormalized_row(attn.row(l, h, i)).ok_or(MetricError::ZeroRow {
                    layer: l,
                    head: h,
                    row: i,
                })?;
                let mut hi = 0.0;
                for &pij in &p {
                    if pij > 0.0 {
                        hi -= pij * libm::log(pij);
                    }
                }
                head_sum += hi;
            }
            layer_sum += head_sum / n;
        }
        values.push(layer_sum / attn.heads as f64);
    }
    Ok(LayerSeries {
        metric: MetricKind::Entropy,
        label: String::from(label),
        values,
    })
}

/// Normalized diagonal mass averaged over tokens and heads, per layer.
pub fn self_attention_focus(
    attn: &AttentionTensor,
    label: &str,
) -> Result<LayerSeries, MetricError> {
    let n = attn.tokens as f64;
    let mut values = Vec::with_capacity(attn.layers);
    for l in 0..attn.layers {
        let mut layer_sum = 0.0;
        for h in 0..attn.heads {
            let mut head_sum = 0.0;
            for i in 0..attn.tokens {
                let row = attn.row(l, h, i);
                let sum: f64 = row.iter().sum();
                if sum <= 0.0 {
                    return Err(MetricError::ZeroRow {
                        layer: l,
                        head: h,
                        row: i,
                    });
                }
                head_sum += row[i] / sum;
            }
            layer_sum += head_sum / n;
        }
        values.push(layer_sum / attn.heads as f64);
    }
    Ok(LayerSeries {
        metric: MetricKind::Focus,
        label: String::from(label),
        values,
    })
}

/// Cosine similarity of flattened attention matrices in consecutive
/// layers, averaged over heads: one value per layer pair (length L−1).
pub fn attention_similarity(
    attn: &AttentionTensor,
    label: &str,
) -> Result<LayerSeries, MetricError> {
    if attn.layers < 2 {
        return Err(MetricError::TooFewLayers {
            layers: attn.layers,
        });
    }
    let n2 = attn.tokens * attn.tokens;
    let mut values = Vec::with_capacity(attn.layers - 1);
    for l in 0..attn.layers - 1 {
        let mut pair_sum = 0.0;
        for h in 0..attn.heads {
            let base_a = (l * attn.heads + h) * n2;
            let base_b = ((l + 1) * attn.heads + h) * n2;
            let a = &attn.weights[base_a..base_a + n2];
            let b = &attn.weights[base_b..base_b + n2];
            let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>());
            let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
            if na == 0.0 || nb == 0.0 {
                return Err(MetricError::ZeroNorm { layer: l, head: h });
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            pair_sum += dot / (na * nb);
        }
        values.push(pair_sum / attn.heads as f64);
    }
    Ok(LayerSeries {
        metric: MetricKind::Similarity,
        label: String::from(label),
        values,
    })
}
