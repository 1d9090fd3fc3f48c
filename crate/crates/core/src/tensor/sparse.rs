use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Constant sparse matrix in compressed-row form, stored together with its
/// transpose for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_cols: Vec<usize>,
    t_vals: Vec<f64>,
}

fn compress(n_rows: usize, mut triplets: Vec<(usize, usize, f64)>) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut row_ptr = vec![0usize; n_rows + 1];
    let mut cols = Vec::with_capacity(triplets.len());
    let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triplets {
        if last == Some((r, c)) {
            *vals.last_mut().expect("previous entry") += v;
            continue;
        }
        last = Some((r, c));
        row_ptr[r + 1] += 1;
        cols.push(c);
        vals.push(v);
    }
    for r in 0..n_rows {
        row_ptr[r + 1] += row_ptr[r];
    }
    (row_ptr, cols, vals)
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|t| t.0 >= n_rows || t.1 >= n_cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "sparse",
                index: if r >= n_rows { r } else { c },
                len: if r >= n_rows { n_rows } else { n_cols },
            });
        }
        let transposed = triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        let (row_ptr, cols, vals) = compress(n_rows, triplets);
        let (t_row_ptr, t_cols, t_vals) = compress(n_cols, transposed);
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            cols,
            vals,
            t_row_ptr,
            t_cols,
            t_vals,
        })
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

fn csr_mul(row_ptr: &[usize], cols: &[usize], vals: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for r in 0..row_ptr.len() - 1 {
        let dst = &mut out[r * n..(r + 1) * n];
        for k in row_ptr[r]..row_ptr[r + 1] {
            let (c, v) = (cols[k], vals[k]);
            dst.iter_mut().zip(&x[c * n..(c + 1) * n]).for_each(|(o, x)| *o += v * x);
        }
    }
}

impl Tensor {
    /// `a · self` for a constant sparse `a`.
    pub fn spmm(&self, a: &Rc<SparseMatrix>) -> Result<Tensor> {
        let (m, n) = self.require_2d("spmm")?;
        if m != a.n_cols {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                detail: format!("{}x{} · {m}x{n}", a.n_rows, a.n_cols),
            });
        }
        let mut out = vec![0.0; a.n_rows * n];
        csr_mul(&a.row_ptr, &a.cols, &a.vals, self.data(), n, &mut out);
        let a = Rc::clone(a);
        Ok(Tensor::from_op(
            vec![a.n_rows, n],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; m * n];
                csr_mul(&a.t_row_ptr, &a.t_cols, &a.t_vals, g, n, &mut d);
                vec![Some(d)]
            }),
        ))
    }
}
