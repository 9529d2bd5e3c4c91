//! Layer-wise L1 feature distillation with a stop-gradient teacher.

use crate::error::{Error, Result};
use crate::sequence::TokenSequence;

pub const DEFAULT_LAMBDA_DISTILL: f64 = 6e-2;

/// Sum with a fixed pairwise reduction tree, so the result does not depend on threading.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn check_layers(student: &[TokenSequence], teacher: &[TokenSequence]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Err(Error::ShapeMismatch("no layers to distill".into()));
    }
    for (l, (s, t)) in student.iter().zip(teacher).enumerate() {
        if (s.batch, s.len, s.channels) != (t.batch, t.len, t.channels) {
            return Err(Error::ShapeMismatch(format!(
                "layer {l}: student [{}, {}, {}] vs teacher [{}, {}, {}]",
                s.batch, s.len, s.channels, t.batch, t.len, t.channels
            )));
        }
    }
    Ok(())
}

/// Mean absolute error per layer, averaged over layers.
pub fn distill_loss(student: &[TokenSequence], teacher: &[TokenSequence]) -> Result<f64> {
    check_layers(student, teacher)?;
    let per_layer: Vec<f64> = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let diffs: Vec<f64> = s.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).collect();
            if diffs.is_empty() {
                0.0
            } else {
                pairwise_sum(&diffs) / diffs.len() as f64
            }
        })
        .collect();
    Ok(pairwise_sum(&per_layer) / per_layer.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillGrads {
    pub student: Vec<Vec<f64>>,
    /// Always zero: the teacher sits behind a stop-gradient.
    pub teacher: Vec<Vec<f64>>,
}

/// Gradient of [`distill_loss`]. Uses `sign(0) = 0` at ties.
pub fn distill_grads(student: &[TokenSequence], teacher: &[TokenSequence]) -> Result<DistillGrads> {
    check_layers(student, teacher)?;
    let layers = student.len() as f64;
    let student_grads = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let w = 1.0 / (layers * s.data.len().max(1) as f64);
            s.data
                .iter()
                .zip(&t.data)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        w
                    } else if d < 0.0 {
                        -w
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let teacher_grads = teacher.iter().map(|t| vec![0.0; t.data.len()]).collect();
    Ok(DistillGrads {
        student: student_grads,
        teacher: teacher_grads,
    })
}

pub fn combined_objective(task_loss: f64, distill: f64, lambda_distill: f64) -> f64 {
    task_loss + lambda_distill * distill
}
