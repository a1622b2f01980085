//! Distillation objective: temperature-scaled teacher log-probabilities,
//! student probabilities, reverse-KL soft loss, cross-entropy hard loss,
//! and their weighted combination.

use alloc::vec::Vec;
use core::fmt;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    ShapeMismatch {
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    NonFiniteLogits {
        which: &'static str,
    },
    TargetOutOfVocab {
        position: usize,
        target: usize,
        vocab_size: usize,
    },
    InvalidConfig {
        what: &'static str,
        value: f64,
    },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::ShapeMismatch { teacher, student } => write!(
                f,
                "logit shape mismatch: teacher {teacher:?} vs student {student:?}"
            ),
            LossError::NonFiniteLogits { which } => write!(f, "non-finite {which} logits"),
            LossError::TargetOutOfVocab {
                position,
                target,
                vocab_size,
            } => write!(
                f,
                "target {target} at position {position} exceeds vocab size {vocab_size}"
            ),
            LossError::InvalidConfig { what, value } => {
                write!(f, "invalid loss config {what}: {value}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    MeanOverPositions,
    Sum,
}

/// Weighting and temperature for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub reduction: Reduction,
}

impl LossConfig {
    pub fn new(alpha: f64, temperature: f64, reduction: Reduction) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(LossError::InvalidConfig {
                what: "alpha",
                value: alpha,
            });
        }
        if temperature < 1.0 || !temperature.is_finite() {
            return Err(LossError::InvalidConfig {
                what: "temperature",
                value: temperature,
            });
        }
        Ok(LossConfig {
            alpha,
            temperature,
            reduction,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        // Reference values reported for the full-scale search.
        LossConfig {
            alpha: 0.61,
            temperature: 5.9,
            reduction: Reduction::MeanOverPositions,
        }
    }
}

/// Per-token logits over a vocabulary.
#[derive(Clone)]
pub struct LogitSequence {
    pub tokens: Vec<u32>,
    pub vocab_size: usize,
    pub logits: Tensor,
}

impl LogitSequence {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, logits: Tensor) -> Result<Self, LossError> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != tokens.len() || shape[1] != vocab_size {
            return Err(LossError::ShapeMismatch {
                teacher: shape,
                student: alloc::vec![tokens.len(), vocab_size],
            });
        }
        Ok(LogitSequence {
            tokens,
            vocab_size,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn reduce(total: Tensor, positions: usize, reduction: Reduction) -> Tensor {
    match reduction {
        Reduction::MeanOverPositions => total.scale(1.0 / positions as f64),
        Reduction::Sum => total,
    }
}

/// Reverse KL divergence KL(q ‖ p) between the student's and teacher's
/// temperature-T distributions, summed over the vocabulary and reduced
/// over positions. Teacher log-probabilities are used in log space
/// directly; the result is differentiable w.r.t. the student logits only.
pub fn soft_loss(
    teacher: &LogitSequence,
    student: &LogitSequence,
    temperature: f64,
    reduction: Reduction,
) -> Result<Tensor, LossError> {
    let ts = teacher.logits.shape();
    let ss = student.logits.shape();
    if ts != ss {
        return Err(LossError::ShapeMismatch {
            teacher: ts,
            student: ss,
        });
    }
    if !teacher.logits.is_finite() {
        return Err(LossError::NonFiniteLogits { which: "teacher" });
    }
    if !student.logits.is_finite() {
        return Err(LossError::NonFiniteLogits { which: "student" });
    }
    // KL(q‖p) = Σ q (log q − log p); teacher term detached from the graph.
    let log_p = teacher
        .logits
        .detach()
        .log_softmax(1, temperature)
        .map_err(|_| LossError::InvalidConfig {
            what: "temperature",
            value: temperature,
        })?;
    let log_q = student
        .logits
        .log_softmax(1, temperature)
        .map_err(|_| LossError::InvalidConfig {
            what: "temperature",
            value: temperature,
        })?;
    let q = student.logits.softmax(1, temperature).expect("temperature validated");
    let total = q.mul(&log_q.sub(&log_p)).sum_all();
    Ok(reduce(total, student.len(), reduction))
}

/// Cross-entropy of the student's temperature-1 distribution against
/// discrete target tokens.
pub fn hard_loss(
    student: &LogitSequence,
    targets: &[u32],
    reduction: Reduction,
) -> Result<Tensor, LossError> {
    if targets.len() != student.len() {
        return Err(LossError::ShapeMismatch {
            teacher: alloc::vec![targets.len()],
            student: student.logits.shape(),
        });
    }
    if !student.logits.is_finite() {
        return Err(LossError::NonFiniteLogits { which: "student" });
    }
    let mut idx = Vec::with_capacity(targets.len());
    for (position, &t) in targets.iter().enumerate() {
        if t as usize >= student.vocab_size {
            return Err(LossError::TargetOutOfVocab {
                position,
                target: t as usize,
                vocab_size: student.vocab_size,
            });
        }
        idx.push(t as usize);
    }
    let nll = student
        .logits
        .log_softmax(1, 1.0)
        .expect("unit temperature")
        .take_per_row(&idx)
        .scale(-1.0)
        .sum_all();
    Ok(reduce(nll, student.len(), reduction))
}

/// `α · hard + (1 − α) · soft · T²`. The α = 0 and α = 1 ends reproduce
/// the individual terms exactly.
pub fn combined_loss(
    teacher: &LogitSequence,
    student: &LogitSequence,
    targets: &[u32],
    config: &LossConfig,
) -> Result<Tensor, LossError> {
    if config.alpha == 1.0 {
        return hard_loss(student, targets, config.reduction);
    }
    let soft = soft_loss(teacher, student, config.temperature, config.reduction)?;
    let t2 = config.temperature * config.temperature;
    if config.alpha == 0.0 {
        return Ok(soft.scale(t2));
    }
    let hard = hard_loss(student, targets, config.reduction)?;
    Ok(hard
        .scale(config.alpha)
        .add(&soft.scale((1.0 - config.alpha) * t2)))
}
