//! Row-major `N x C` score matrices exchanged between model, calibration and
//! metrics.

use medconv_tensor::{log_softmax_row, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Raw model outputs.
pub type LogitsMatrix = ScoreMatrix;
/// Rows are distributions over classes.
pub type ProbabilityMatrix = ScoreMatrix;

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidArgument("score matrix needs at least one column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch(format!(
                "{rows} x {cols} score matrix given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::LengthMismatch("ragged score rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Converts an `N x C` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[n, c] => Self::new(n, c, t.data().iter().map(|v| v.as_f64()).collect()),
            s => Err(Error::InvalidArgument(format!("expected N x C scores, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &ScoreMatrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::LengthMismatch(format!("{} vs {} columns", self.cols, other.cols)));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Index of the largest entry per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }

    /// Row-wise softmax computed through a stable log-softmax.
    pub fn softmax(&self) -> ProbabilityMatrix {
        let mut data = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(self.cols).zip(data.chunks_exact_mut(self.cols)) {
            log_softmax_row(src, dst);
            dst.iter_mut().for_each(|v| *v = v.exp());
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn map_columns(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % self.cols, v))
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        let m = ScoreMatrix::from_rows(&[vec![1.0, 3.0, 3.0], vec![2.0, 2.0, 2.0], vec![0.0, -1.0, 5.0]]).unwrap();
        assert_eq!(m.argmax(), vec![1, 0, 2]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = ScoreMatrix::from_rows(&[vec![1000.0, 0.0], vec![-3.0, 2.5]]).unwrap();
        for r in m.softmax().iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ScoreMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ScoreMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(ScoreMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
