use super::{Result, Tensor, TensorError};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// `c = a(m×k) · b(k×n) + beta·c` where each operand is described by a pointer and
/// its row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the caller passes slices of at least m*k, k*n and m*n values
    // laid out according to the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let xin = parents[0].data();
            vec![Some(
                g.iter()
                    .zip(xin)
                    .zip(out)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        }),
    )
}

impl Tensor {
    pub(crate) fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(mismatch(op, format!("expected a 2-D tensor, got {other:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = rhs.require_2d("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), k as isize, 1, rhs.data(), n as isize, 1, 0.0, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (&p[0], &p[1]);
                let ga = a.requires_grad().then(|| {
                    // dA = G · Bᵀ
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, n as isize, 1, b.data(), 1, n as isize, 0.0, &mut d);
                    d
                });
                let gb = b.requires_grad().then(|| {
                    // dB = Aᵀ · G
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), 1, k as isize, g, n as isize, 1, 0.0, &mut d);
                    d
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self · w + b`, with `b` added to every row.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("affine")?;
        let (k2, n) = w.require_2d("affine")?;
        if k != k2 || b.len() != n {
            return Err(mismatch(
                "affine",
                format!("{m}x{k} · {k2}x{n} + bias {:?}", b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b.data());
        }
        gemm(m, k, n, self.data(), k as isize, 1, w.data(), n as isize, 1, 1.0, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |g, _, p| {
                let (x, w) = (&p[0], &p[1]);
                let gx = x.requires_grad().then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, n as isize, 1, w.data(), 1, n as isize, 0.0, &mut d);
                    d
                });
                let gw = w.requires_grad().then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), 1, k as isize, g, n as isize, 1, 0.0, &mut d);
                    d
                });
                let gb = p[2].requires_grad().then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    d
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_2d("transpose")?;
        let flip = |x: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, m],
            flip(self.data(), m, n),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(flip(g, n, m))]),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, p| {
                vec![
                    p[0].requires_grad().then(|| g.to_vec()),
                    p[1].requires_grad().then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, p| {
                vec![
                    p[0].requires_grad().then(|| g.to_vec()),
                    p[1].requires_grad().then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (&p[0], &p[1]);
                vec![
                    a.requires_grad()
                        .then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
                    b.requires_grad()
                        .then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    /// Adds a bias vector of length `n` to every row of an `m×n` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("add_row")?;
        if bias.len() != n {
            return Err(mismatch("add_row", format!("{m}x{n} + bias {:?}", bias.shape())));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gb = p[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![p[0].requires_grad().then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Scales row `i` of an `m×n` tensor by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("mul_col")?;
        if col.shape() != [m, 1] {
            return Err(mismatch("mul_col", format!("{m}x{n} * {:?}", col.shape())));
        }
        let c = col.data();
        let mut data = self.data().to_vec();
        for (row, s) in data.chunks_exact_mut(n.max(1)).zip(c) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), col.clone()],
            Box::new(move |g, _, p| {
                let (x, c) = (&p[0], &p[1]);
                let gx = x.requires_grad().then(|| {
                    let mut d = g.to_vec();
                    for (row, s) in d.chunks_exact_mut(n.max(1)).zip(c.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    d
                });
                let gc = c.requires_grad().then(|| {
                    g.chunks_exact(n.max(1))
                        .zip(x.data().chunks_exact(n.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![gx, gc]
            }),
        ))
    }

    /// Concatenates 2-D tensors along `axis` (0: rows, 1: columns).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|t| t.require_2d("concat"))
            .collect::<Result<_>>()?;
        match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(mismatch("concat", format!("column counts differ: {dims:?}")));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(m * n);
                for t in parts {
                    data.extend_from_slice(t.data());
                }
                let sizes: Vec<usize> = dims.iter().map(|d| d.0 * n).collect();
                Ok(Tensor::from_op(
                    vec![m, n],
                    data,
                    parts.to_vec(),
                    Box::new(move |g, _, p| {
                        let mut offset = 0;
                        sizes
                            .iter()
                            .zip(p)
                            .map(|(&len, t)| {
                                let piece = t.requires_grad().then(|| g[offset..offset + len].to_vec());
                                offset += len;
                                piece
                            })
                            .collect()
                    }),
                ))
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(mismatch("concat", format!("row counts differ: {dims:?}")));
                }
                let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
                let n: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    for (t, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                Ok(Tensor::from_op(
                    vec![m, n],
                    data,
                    parts.to_vec(),
                    Box::new(move |g, _, p| {
                        let mut offset = 0;
                        widths
                            .iter()
                            .zip(p)
                            .map(|(&w, t)| {
                                let piece = t.requires_grad().then(|| {
                                    let mut d = Vec::with_capacity(m * w);
                                    for r in 0..m {
                                        d.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                                    }
                                    d
                                });
                                offset += w;
                                piece
                            })
                            .collect()
                    }),
                ))
            }
            _ => Err(mismatch("concat", format!("axis {axis} on 2-D tensors"))),
        }
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("slice")?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || start + len > extent {
            return Err(mismatch(
                "slice",
                format!("axis {axis} range {start}..{} of {m}x{n}", start + len),
            ));
        }
        if axis == 0 {
            let data = self.data()[start * n..(start + len) * n].to_vec();
            return Ok(Tensor::from_op(
                vec![len, n],
                data,
                vec![self.clone()],
                Box::new(move |g, _, _| {
                    let mut d = vec![0.0; m * n];
                    d[start * n..(start + len) * n].copy_from_slice(g);
                    vec![Some(d)]
                }),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.data()[r * n + start..r * n + start + len]);
        }
        Ok(Tensor::from_op(
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.data().iter().sum();
        let len = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; len])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let len = self.len().max(1);
        self.sum_all().scale(1.0 / len as f64)
    }

    /// Sum over `axis` of a 2-D tensor, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("sum_axis")?;
        let x = self.data();
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in x.chunks_exact(n.max(1)) {
                    out.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                Ok(Tensor::from_op(
                    vec![1, n],
                    out,
                    vec![self.clone()],
                    Box::new(move |g, _, _| {
                        let mut d = Vec::with_capacity(m * n);
                        for _ in 0..m {
                            d.extend_from_slice(g);
                        }
                        vec![Some(d)]
                    }),
                ))
            }
            1 => {
                let out = x.chunks_exact(n.max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>();
                let out = if n == 0 { vec![0.0; m] } else { out };
                Ok(Tensor::from_op(
                    vec![m, 1],
                    out,
                    vec![self.clone()],
                    Box::new(move |g, _, _| {
                        let mut d = Vec::with_capacity(m * n);
                        for gv in g {
                            d.extend(std::iter::repeat(*gv).take(n));
                        }
                        vec![Some(d)]
                    }),
                ))
            }
            _ => Err(mismatch("sum_axis", format!("axis {axis}"))),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("mean_axis")?;
        let count = if axis == 0 { m } else { n };
        Ok(self.sum_axis(axis)?.scale(1.0 / count.max(1) as f64))
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("max_axis")?;
        if axis > 1 || (axis == 0 && m == 0) || (axis == 1 && n == 0) {
            return Err(mismatch("max_axis", format!("axis {axis} of {m}x{n}")));
        }
        let x = self.data();
        let (outer, inner) = if axis == 0 { (n, m) } else { (m, n) };
        let at = move |o: usize, i: usize| if axis == 0 { i * n + o } else { o * n + i };
        let mut arg = Vec::with_capacity(outer);
        let mut out = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = at(o, 0);
            for i in 1..inner {
                if x[at(o, i)] > x[best] {
                    best = at(o, i);
                }
            }
            arg.push(best);
            out.push(x[best]);
        }
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; m * n];
                for (gv, &idx) in g.iter().zip(&arg) {
                    d[idx] += gv;
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Softmax along `axis` of a 2-D tensor.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("softmax")?;
        if axis > 1 {
            return Err(mismatch("softmax", format!("axis {axis}")));
        }
        let (outer, inner) = if axis == 0 { (n, m) } else { (m, n) };
        let at = move |o: usize, i: usize| if axis == 0 { i * n + o } else { o * n + i };
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for o in 0..outer {
            let mx = (0..inner).map(|i| x[at(o, i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..inner {
                let e = (x[at(o, i)] - mx).exp();
                out[at(o, i)] = e;
                z += e;
            }
            for i in 0..inner {
                out[at(o, i)] /= z;
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut d = vec![0.0; m * n];
                for o in 0..outer {
                    let dot: f64 = (0..inner).map(|i| g[at(o, i)] * y[at(o, i)]).sum();
                    for i in 0..inner {
                        let k = at(o, i);
                        d[k] = y[k] * (g[k] - dot);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sin(&self) -> Tensor {
        unary(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-feature `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.require_2d("layer_norm")?;
        if gain.len() != n || bias.len() != n {
            return Err(mismatch(
                "layer_norm",
                format!("{m}x{n} with gain {:?} bias {:?}", gain.shape(), bias.shape()),
            ));
        }
        let x = self.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let (gw, bw) = (gain.data(), bias.data());
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gw[c] + bw[c];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gw = p[1].data();
                let gx = p[0].requires_grad().then(|| {
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gw[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            let dh = gr[c] * gw[c];
                            d[r * n + c] = inv_std[r] * (dh - s1 / nf - hr[c] * s2 / nf);
                        }
                    }
                    d
                });
                let ggain = p[1].requires_grad().then(|| {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    d
                });
                let gbias = p[2].requires_grad().then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    d
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, target: &Tensor) -> Result<Tensor> {
        Ok(self.sub(target)?.abs().mean_all())
    }

    /// Rows `idx[k]` of a 2-D tensor, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.require_2d("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: m,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), n],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(a, v)| *a += v);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Adds row `k` into row `idx[k]` of an `rows×n` zero tensor.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("scatter_add_rows")?;
        if idx.len() != m {
            return Err(mismatch(
                "scatter_add_rows",
                format!("{m} rows but {} indices", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                len: rows,
            });
        }
        let x = self.data();
        let mut data = vec![0.0; rows * n];
        for (k, &i) in idx.iter().enumerate() {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&x[k * n..(k + 1) * n])
                .for_each(|(a, v)| *a += v);
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![rows, n],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = Vec::with_capacity(m * n);
                for &i in &idx {
                    d.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Row-wise mean within each segment: `segments[r]` names the output row
    /// of input row `r`. Empty segments yield zero rows.
    pub fn segment_mean(&self, segments: &[usize], n_segments: usize) -> Result<Tensor> {
        let (m, _) = self.require_2d("segment_mean")?;
        if segments.len() != m {
            return Err(mismatch("segment_mean", format!("{m} rows, {} segment ids", segments.len())));
        }
        let mut counts = vec![0usize; n_segments];
        for &s in segments {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_mean",
                    index: s,
                    len: n_segments,
                });
            }
            counts[s] += 1;
        }
        let scale: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let summed = self.scatter_add_rows(segments, n_segments)?;
        summed.mul_col(&Tensor::column(scale))
    }

    /// Column-wise maximum within each segment. Every segment must be
    /// non-empty; the gradient flows to the first maximal row.
    pub fn segment_max(&self, segments: &[usize], n_segments: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("segment_max")?;
        if segments.len() != m {
            return Err(mismatch("segment_max", format!("{m} rows, {} segment ids", segments.len())));
        }
        let x = self.data();
        let mut arg: Vec<Option<usize>> = vec![None; n_segments * n];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_max",
                    index: s,
                    len: n_segments,
                });
            }
            for c in 0..n {
                let slot = &mut arg[s * n + c];
                match *slot {
                    Some(best) if x[best] >= x[r * n + c] => {}
                    _ => *slot = Some(r * n + c),
                }
            }
        }
        if arg.iter().any(Option::is_none) && n > 0 {
            return Err(mismatch("segment_max", "empty segment".into()));
        }
        let arg: Vec<usize> = arg.into_iter().map(|a| a.unwrap_or(0)).collect();
        let out = arg.iter().map(|&k| x[k]).collect();
        Ok(Tensor::from_op(
            vec![n_segments, n],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; m * n];
                for (gv, &k) in g.iter().zip(&arg) {
                    d[k] += gv;
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Softmax of an `m×1` column taken separately within each segment.
    pub fn segment_softmax(&self, segments: &[usize], n_segments: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("segment_softmax")?;
        if n != 1 || segments.len() != m {
            return Err(mismatch(
                "segment_softmax",
                format!("{m}x{n} with {} segment ids", segments.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_softmax",
                index: bad,
                len: n_segments,
            });
        }
        let x = self.data();
        let mut mx = vec![f64::NEG_INFINITY; n_segments];
        for (r, &s) in segments.iter().enumerate() {
            mx[s] = mx[s].max(x[r]);
        }
        let mut z = vec![0.0; n_segments];
        let mut out: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(r, &s)| {
                let e = (x[r] - mx[s]).exp();
                z[s] += e;
                e
            })
            .collect();
        for (r, &s) in segments.iter().enumerate() {
            out[r] /= z[s];
        }
        let segments = segments.to_vec();
        Ok(Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut dot = vec![0.0; n_segments];
                for (r, &s) in segments.iter().enumerate() {
                    dot[s] += g[r] * y[r];
                }
                let d = segments
                    .iter()
                    .enumerate()
                    .map(|(r, &s)| y[r] * (g[r] - dot[s]))
                    .collect();
                vec![Some(d)]
            }),
        ))
    }
}
