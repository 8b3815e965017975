use crate::error::{Result, TensorError};

/// Compressed sparse row matrix, used as a constant operand on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(TensorError::Invalid(format!(
                    "entry ({r},{c}) outside {rows}x{cols}"
                )));
            }
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `r` as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }

    /// `out[rows, d] += self · dense[cols, d]`
    pub(crate) fn matmul_into(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let orow = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                for (o, x) in orow.iter_mut().zip(&dense[c * d..(c + 1) * d]) {
                    *o += v * x;
                }
            }
        }
    }

    /// `out[cols, d] += selfᵀ · dense[rows, d]`
    pub(crate) fn transpose_matmul_into(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let drow = &dense[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                for (o, x) in out[c * d..(c + 1) * d].iter_mut().zip(drow) {
                    *o += v * x;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), vec![0.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn transpose_product_matches_dense() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]).unwrap();
        let x = [1.0, 2.0];
        let mut out = [0.0; 3];
        m.transpose_matmul_into(&x, 1, &mut out);
        assert_eq!(out, [1.0, -2.0, 2.0]);
    }
}
