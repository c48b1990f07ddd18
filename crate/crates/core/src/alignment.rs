//! Cosine alignment between trainable point embeddings and frozen
//! camera-guided embeddings, with its analytic gradient.

use thiserror::Error;

use crate::model::EmbeddingMatrix;

/// Minimum row norm accepted on covered rows.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("DegenerateNorm: covered row {0} has (near-)zero norm")]
    DegenerateNorm(usize),
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
}

/// `f_point` is the trainable side, `f_guided` the frozen side. Rows with
/// `covered[i] == false` are ignored entirely.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentBatch<'a> {
    pub f_point: &'a EmbeddingMatrix,
    pub f_guided: &'a EmbeddingMatrix,
    pub covered: &'a [bool],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOutput {
    /// Mean of `1 - cos` over covered rows; 0 if none are covered.
    pub loss: f64,
    /// Gradient with respect to `f_point`; zero rows where uncovered.
    pub grad: EmbeddingMatrix,
    pub covered: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two rows; `None` if either norm is below [`EPS_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    (na > EPS_NORM && nb > EPS_NORM).then(|| dot(a, b) / (na * nb))
}

pub fn align_loss(batch: AlignmentBatch<'_>) -> Result<AlignOutput, AlignError> {
    let AlignmentBatch {
        f_point,
        f_guided,
        covered,
    } = batch;
    if f_point.rows != f_guided.rows
        || f_point.cols != f_guided.cols
        || covered.len() != f_point.rows
    {
        return Err(AlignError::ShapeMismatch(format!(
            "f_point {}x{}, f_guided {}x{}, covered {}",
            f_point.rows,
            f_point.cols,
            f_guided.rows,
            f_guided.cols,
            covered.len()
        )));
    }
    let n_covered = covered.iter().filter(|&&c| c).count();
    let mut grad = EmbeddingMatrix::zeros(f_point.rows, f_point.cols);
    if n_covered == 0 {
        return Ok(AlignOutput {
            loss: 0.0,
            grad,
            covered: 0,
        });
    }
    let scale = 1.0 / n_covered as f64;
    let mut total = 0.0;
    for i in (0..f_point.rows).filter(|&i| covered[i]) {
        let f = f_point.row(i);
        let g = f_guided.row(i);
        let nf = dot(f, f).sqrt();
        let ng = dot(g, g).sqrt();
        if !(nf > EPS_NORM && ng > EPS_NORM) {
            return Err(AlignError::DegenerateNorm(i));
        }
        let cos = dot(f, g) / (nf * ng);
        total += 1.0 - cos;
        // d(1 - cos)/df = -(g / (|g||f|) - cos * f / |f|^2)
        let a = 1.0 / (ng * nf);
        let b = cos / (nf * nf);
        for ((o, &fv), &gv) in grad.row_mut(i).iter_mut().zip(f).zip(g) {
            *o = -(gv * a - fv * b) * scale;
        }
    }
    Ok(AlignOutput {
        loss: total * scale,
        grad,
        covered: n_covered,
    })
}

/// Mean cosine similarity over covered rows with usable norms.
pub fn mean_cosine(
    f_point: &EmbeddingMatrix,
    f_guided: &EmbeddingMatrix,
    covered: &[bool],
) -> Option<f64> {
    let sims: Vec<f64> = (0..f_point.rows)
        .filter(|&i| covered[i])
        .filter_map(|i| cosine(f_point.row(i), f_guided.row(i)))
        .collect();
    (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn identical_rows_are_stationary() {
        let f = m(&[&[1.0, 2.0, -3.0]]);
        let out = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &f,
            covered: &[true],
        })
        .unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert!(out.grad.data.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn orthogonal_and_antiparallel() {
        let f = m(&[&[1.0, 0.0], &[2.0, -1.0]]);
        let g = m(&[&[0.0, 3.0], &[-4.0, 2.0]]);
        let ortho = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &g,
            covered: &[true, false],
        })
        .unwrap();
        assert_eq!(ortho.loss, 1.0);
        assert_eq!(ortho.grad.row(1), &[0.0, 0.0]);
        let anti = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &g,
            covered: &[false, true],
        })
        .unwrap();
        assert!((anti.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nothing_covered_is_zero() {
        let f = m(&[&[0.0, 0.0]]);
        let out = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &f,
            covered: &[false],
        })
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.covered, 0);
    }

    #[test]
    fn degenerate_norm_is_an_error() {
        let f = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let g = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let err = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &g,
            covered: &[true, true],
        })
        .unwrap_err();
        assert_eq!(err, AlignError::DegenerateNorm(1));
    }

    #[test]
    fn shape_mismatch() {
        let f = m(&[&[1.0, 0.0]]);
        let g = m(&[&[1.0, 0.0, 0.0]]);
        assert!(align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &g,
            covered: &[true],
        })
        .is_err());
    }
}
