use rand::Rng;
use rayon::prelude::*;

use super::{BackwardArgs, Tensor, Var};
use crate::error::TensorError;
use crate::seed::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output keeps the input length.
    Same,
    /// No padding; output length `L - k + 1`.
    Valid,
}

/// Batch normalization statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training batch (variance is unbiased, for
/// running-average updates).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// `out[m×n] (+)= a[m×k] · b[k×n]`
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] (+)= g[m×n] · b[k×n]ᵀ`
fn gemm_nt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] (+)= a[m×k]ᵀ · g[m×n]`
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
}

impl<'g> Var<'g> {
    fn unary(
        &self,
        value: Tensor,
        backward: impl Fn(&BackwardArgs<'_>) -> Tensor + 'static,
    ) -> Var<'g> {
        self.graph
            .push_op(value, &[*self], Box::new(move |a| vec![Some(backward(a))]))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("add", &a, &b)?;
            with_data(&a.shape, zip_map(&a.data, &b.data, |x, y| x + y))
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *other],
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("sub", &a, &b)?;
            with_data(&a.shape, zip_map(&a.data, &b.data, |x, y| x - y))
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *other],
            Box::new(|a| {
                let neg = a.grad.data.iter().map(|g| -g).collect();
                vec![Some(a.grad.clone()), Some(with_data(&a.grad.shape, neg))]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("mul", &a, &b)?;
            with_data(&a.shape, zip_map(&a.data, &b.data, |x, y| x * y))
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *other],
            Box::new(|a| {
                let (x, y, g) = (a.inputs[0], a.inputs[1], a.grad);
                vec![
                    a.needs[0]
                        .then(|| with_data(&g.shape, zip_map(&g.data, &y.data, |g, y| g * y))),
                    a.needs[1]
                        .then(|| with_data(&g.shape, zip_map(&g.data, &x.data, |g, x| g * x))),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let value = {
            let a = self.value();
            with_data(&a.shape, a.data.iter().map(|x| x * s).collect())
        };
        self.unary(value, move |a| {
            with_data(&a.grad.shape, a.grad.data.iter().map(|g| g * s).collect())
        })
    }

    /// Multiplies by a fixed mask; the gradient is masked the same way.
    pub fn mul_const(&self, mask: Tensor) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.value();
            same_shape("mul_const", &a, &mask)?;
            with_data(&a.shape, zip_map(&a.data, &mask.data, |x, m| x * m))
        };
        Ok(self.unary(value, move |a| {
            with_data(
                &a.grad.shape,
                zip_map(&a.grad.data, &mask.data, |g, m| g * m),
            )
        }))
    }

    /// Adds a `[c]` bias to every row of a `[.., c]` tensor.
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let value = {
            let (a, b) = (self.value(), bias.value());
            if b.rank() != 1 || a.last_dim() != b.numel() {
                return Err(TensorError::shape("add_bias", &a.shape, &b.shape));
            }
            let c = b.numel();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data[i % c])
                .collect();
            with_data(&a.shape, data)
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *bias],
            Box::new(|a| {
                let c = a.inputs[1].numel();
                let mut db = vec![0.0; c];
                if a.needs[1] {
                    for row in a.grad.data.chunks_exact(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                vec![
                    Some(a.grad.clone()),
                    a.needs[1].then(|| with_data(&[c], db)),
                ]
            }),
        ))
    }

    /// `[.., k] · [k, n] → [.., n]`; all leading dimensions are rows.
    pub fn matmul(&self, w: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let (value, rows, k, n) = {
            let (a, b) = (self.value(), w.value());
            if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape[0] {
                return Err(TensorError::shape("matmul", &a.shape, &b.shape));
            }
            let (k, n) = (b.shape[0], b.shape[1]);
            let rows = a.numel() / k.max(1);
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, &a.data, &b.data, &mut out);
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = n;
            (with_data(&shape, out), rows, k, n)
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *w],
            Box::new(move |a| {
                let (x, wt, g) = (a.inputs[0], a.inputs[1], a.grad);
                let dx = a.needs[0].then(|| {
                    let mut d = vec![0.0; rows * k];
                    gemm_nt(rows, k, n, &g.data, &wt.data, &mut d);
                    with_data(&x.shape, d)
                });
                let dw = a.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(rows, k, n, &x.data, &g.data, &mut d);
                    with_data(&wt.shape, d)
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, other: &Var<'g>) -> Result<Var<'g>, TensorError> {
        let (value, bsz, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 3
                || b.rank() != 3
                || a.shape[0] != b.shape[0]
                || a.shape[2] != b.shape[1]
            {
                return Err(TensorError::shape("bmm", &a.shape, &b.shape));
            }
            let (bsz, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut out = vec![0.0; bsz * m * n];
            for i in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &a.data[i * m * k..],
                    &b.data[i * k * n..],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            (with_data(&[bsz, m, n], out), bsz, m, k, n)
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *other],
            Box::new(move |a| {
                let (x, y, g) = (a.inputs[0], a.inputs[1], a.grad);
                let dx = a.needs[0].then(|| {
                    let mut d = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        gemm_nt(
                            m,
                            k,
                            n,
                            &g.data[i * m * n..],
                            &y.data[i * k * n..],
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    with_data(&x.shape, d)
                });
                let dy = a.needs[1].then(|| {
                    let mut d = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &x.data[i * m * k..],
                            &g.data[i * m * n..],
                            &mut d[i * k * n..(i + 1) * k * n],
                        );
                    }
                    with_data(&y.shape, d)
                });
                vec![dx, dy]
            }),
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'g>, TensorError> {
        fn swap(shape: &[usize], data: &[f64]) -> Tensor {
            let rank = shape.len();
            let (r, c) = (shape[rank - 2], shape[rank - 1]);
            let mut out = vec![0.0; data.len()];
            for (blk_in, blk_out) in data.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
                for i in 0..r {
                    for j in 0..c {
                        blk_out[j * r + i] = blk_in[i * c + j];
                    }
                }
            }
            let mut s = shape.to_vec();
            s.swap(rank - 2, rank - 1);
            with_data(&s, out)
        }
        let value = {
            let a = self.value();
            if a.rank() < 2 {
                return Err(TensorError::shape("transpose", &a.shape, &[]));
            }
            swap(&a.shape, &a.data)
        };
        Ok(self.unary(value, |a| swap(&a.grad.shape, &a.grad.data)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let value = self.value().clone().reshaped(shape)?;
        Ok(self.unary(value, |a| {
            with_data(&a.inputs[0].shape, a.grad.data.clone())
        }))
    }

    pub fn relu(&self) -> Var<'g> {
        let value = {
            let a = self.value();
            with_data(&a.shape, a.data.iter().map(|&x| x.max(0.0)).collect())
        };
        self.unary(value, |a| {
            with_data(
                &a.grad.shape,
                zip_map(&a.grad.data, &a.inputs[0].data, |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }),
            )
        })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let value = {
            let a = self.value();
            with_data(&a.shape, a.data.iter().map(|&x| sigmoid(x)).collect())
        };
        self.unary(value, |a| {
            with_data(
                &a.grad.shape,
                zip_map(&a.grad.data, &a.output.data, |g, s| g * s * (1.0 - s)),
            )
        })
    }

    /// Softmax along the last dimension, max-subtracted.
    pub fn softmax(&self) -> Var<'g> {
        let value = {
            let a = self.value();
            let c = a.last_dim();
            let mut out = a.data.clone();
            for row in out.chunks_exact_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            with_data(&a.shape, out)
        };
        self.unary(value, |a| {
            let c = a.output.last_dim();
            let mut d = vec![0.0; a.grad.numel()];
            for ((dr, gr), yr) in d
                .chunks_exact_mut(c)
                .zip(a.grad.data.chunks_exact(c))
                .zip(a.output.data.chunks_exact(c))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((dv, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = y * (g - dot);
                }
            }
            with_data(&a.grad.shape, d)
        })
    }

    /// Keeps the `m` largest entries of every row (last dimension) and
    /// replaces the rest with `mask_value`. Ties at the cut keep the lower
    /// column index. Gradient flows only into kept entries.
    pub fn top_m_mask(&self, m: usize, mask_value: f64) -> Result<Var<'g>, TensorError> {
        if m == 0 {
            return Err(TensorError::Invalid("top-m needs m >= 1".into()));
        }
        let (value, keep) = {
            let a = self.value();
            let c = a.last_dim();
            let mut keep = vec![m >= c; a.numel()];
            let mut out = a.data.clone();
            if m < c {
                let mut order: Vec<usize> = Vec::with_capacity(c);
                for (r, row) in a.data.chunks_exact(c).enumerate() {
                    order.clear();
                    order.extend(0..c);
                    order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
                    for &j in &order[..m] {
                        keep[r * c + j] = true;
                    }
                }
                for (v, &k) in out.iter_mut().zip(&keep) {
                    if !k {
                        *v = mask_value;
                    }
                }
            }
            (with_data(&a.shape, out), keep)
        };
        Ok(self.unary(value, move |a| {
            with_data(
                &a.grad.shape,
                a.grad
                    .data
                    .iter()
                    .zip(&keep)
                    .map(|(&g, &k)| if k { g } else { 0.0 })
                    .collect(),
            )
        }))
    }

    /// Normalizes each row (last dimension) to zero mean and unit population
    /// variance, then applies the `[c]` gain and bias.
    pub fn layer_norm(
        &self,
        gain: &Var<'g>,
        bias: &Var<'g>,
        eps: f64,
    ) -> Result<Var<'g>, TensorError> {
        let (value, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let c = x.last_dim();
            if gv.shape != [c] || bv.shape != [c] {
                return Err(TensorError::shape("layer_norm", &x.shape, &gv.shape));
            }
            let rows = x.numel() / c;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gv.data[j] + bv.data[j];
                }
            }
            (with_data(&x.shape, out), xhat, inv_std)
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *gain, *bias],
            Box::new(move |a| {
                let c = a.inputs[1].numel();
                let gain = &a.inputs[1].data;
                let g = &a.grad.data;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gain[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = is * (gr[j] * gain[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    a.needs[0].then(|| with_data(&a.grad.shape, dx)),
                    a.needs[1].then(|| with_data(&[c], dgain)),
                    a.needs[2].then(|| with_data(&[c], dbias)),
                ]
            }),
        ))
    }

    /// Batch normalization of a `[B, C, L]` tensor over the `B·L` positions
    /// of each channel. In training mode the batch statistics are also
    /// returned so the caller can update its running averages.
    pub fn batch_norm(
        &self,
        gamma: &Var<'g>,
        beta: &Var<'g>,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var<'g>, Option<BatchStats>), TensorError> {
        let (value, xhat, inv_std, stats) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            if x.rank() != 3 || gv.shape != [x.shape[1]] || bv.shape != [x.shape[1]] {
                return Err(TensorError::shape("batch_norm", &x.shape, &gv.shape));
            }
            let (b, c, l) = (x.shape[0], x.shape[1], x.shape[2]);
            let n = (b * l) as f64;
            let (mean, var, stats) = match mode {
                BatchNormMode::Train => {
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let mut s = 0.0;
                        for bi in 0..b {
                            s += x.data[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                                .iter()
                                .sum::<f64>();
                        }
                        let mu = s / n;
                        let mut v = 0.0;
                        for bi in 0..b {
                            v += x.data[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                                .iter()
                                .map(|x| (x - mu) * (x - mu))
                                .sum::<f64>();
                        }
                        mean[ch] = mu;
                        var[ch] = v / n;
                    }
                    let unbiased = if n > 1.0 {
                        var.iter().map(|v| v * n / (n - 1.0)).collect()
                    } else {
                        var.clone()
                    };
                    let stats = BatchStats {
                        mean: mean.clone(),
                        var: unbiased,
                    };
                    (mean, var, Some(stats))
                }
                BatchNormMode::Eval { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(TensorError::shape("batch_norm", &x.shape, &[mean.len()]));
                    }
                    (mean.to_vec(), var.to_vec(), None)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * l;
                    for p in off..off + l {
                        let h = (x.data[p] - mean[ch]) * inv_std[ch];
                        xhat[p] = h;
                        out[p] = h * gv.data[ch] + bv.data[ch];
                    }
                }
            }
            (with_data(&x.shape, out), xhat, inv_std, stats)
        };
        let batch_stats = matches!(mode, BatchNormMode::Train);
        let var = self.graph.push_op(
            value,
            &[*self, *gamma, *beta],
            Box::new(move |a| {
                let (b, c, l) = (a.grad.shape[0], a.grad.shape[1], a.grad.shape[2]);
                let gamma = &a.inputs[1].data;
                let g = &a.grad.data;
                let n = (b * l) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * l;
                        for p in off..off + l {
                            dgamma[ch] += g[p] * xhat[p];
                            dbeta[ch] += g[p];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                if a.needs[0] {
                    for ch in 0..c {
                        let scale = gamma[ch] * inv_std[ch];
                        let (mean_g, mean_gh) = if batch_stats {
                            (dbeta[ch] / n, dgamma[ch] / n)
                        } else {
                            (0.0, 0.0)
                        };
                        for bi in 0..b {
                            let off = (bi * c + ch) * l;
                            for p in off..off + l {
                                dx[p] = scale * (g[p] - mean_g - xhat[p] * mean_gh);
                            }
                        }
                    }
                }
                vec![
                    a.needs[0].then(|| with_data(&a.grad.shape, dx)),
                    a.needs[1].then(|| with_data(&[c], dgamma)),
                    a.needs[2].then(|| with_data(&[c], dbeta)),
                ]
            }),
        );
        Ok((var, stats))
    }

    /// 1-D cross-correlation of `[B, C_in, L]` (or `[C_in, L]`) with
    /// `[C_out, C_in, k]` weights. Parallel over the batch.
    pub fn conv1d(&self, weight: &Var<'g>, padding: Padding) -> Result<Var<'g>, TensorError> {
        let (value, geom) = {
            let (x, w) = (self.value(), weight.value());
            let (batched, b, cin, l) = match *x.shape.as_slice() {
                [b, c, l] => (true, b, c, l),
                [c, l] => (false, 1, c, l),
                _ => return Err(TensorError::shape("conv1d", &x.shape, &w.shape)),
            };
            if w.rank() != 3 || w.shape[1] != cin || w.shape[2] == 0 {
                return Err(TensorError::shape("conv1d", &x.shape, &w.shape));
            }
            let (cout, k) = (w.shape[0], w.shape[2]);
            let (pad, lout) = match padding {
                Padding::Same => ((k - 1) / 2, l),
                Padding::Valid => {
                    if k > l {
                        return Err(TensorError::shape("conv1d", &x.shape, &w.shape));
                    }
                    (0, l - k + 1)
                }
            };
            let geom = ConvGeom {
                cin,
                cout,
                l,
                lout,
                k,
                pad,
            };
            let mut out = vec![0.0; b * cout * lout];
            let (xd, wd): (&[f64], &[f64]) = (&x.data, &w.data);
            out.par_chunks_mut(cout * lout)
                .zip(xd.par_chunks(cin * l))
                .for_each(|(o, xs)| geom.forward_one(xs, wd, o));
            let shape = if batched {
                vec![b, cout, lout]
            } else {
                vec![cout, lout]
            };
            (with_data(&shape, out), geom)
        };
        Ok(self.graph.push_op(
            value,
            &[*self, *weight],
            Box::new(move |a| {
                let (x, w, g) = (a.inputs[0], a.inputs[1], a.grad);
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = x
                    .data
                    .par_chunks(geom.cin * geom.l)
                    .zip(g.data.par_chunks(geom.cout * geom.lout))
                    .map(|(xs, gs)| geom.backward_one(xs, &w.data, gs, a.needs[0], a.needs[1]))
                    .collect();
                let mut dw = vec![0.0; w.numel()];
                let mut dx = Vec::with_capacity(x.numel());
                for (dxs, dws) in per_sample {
                    dx.extend(dxs);
                    for (d, v) in dw.iter_mut().zip(&dws) {
                        *d += v;
                    }
                }
                vec![
                    a.needs[0].then(|| with_data(&x.shape, dx)),
                    a.needs[1].then(|| with_data(&w.shape, dw)),
                ]
            }),
        ))
    }

    /// Max pooling along the last dimension. The gradient goes to the first
    /// maximal element of each window.
    pub fn maxpool1d(&self, window: usize, stride: usize) -> Result<Var<'g>, TensorError> {
        let (value, argmax) = {
            let x = self.value();
            let l = x.last_dim();
            if x.rank() < 1 || window == 0 || stride == 0 || l < window {
                return Err(TensorError::shape("maxpool1d", &x.shape, &[window, stride]));
            }
            let lout = (l - window) / stride + 1;
            let rows = x.numel() / l;
            let mut out = Vec::with_capacity(rows * lout);
            let mut argmax = Vec::with_capacity(rows * lout);
            for (r, row) in x.data.chunks_exact(l).enumerate() {
                for p in 0..lout {
                    let start = p * stride;
                    let mut best = start;
                    for i in start + 1..start + window {
                        if row[i] > row[best] {
                            best = i;
                        }
                    }
                    out.push(row[best]);
                    argmax.push(r * l + best);
                }
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = lout;
            (with_data(&shape, out), argmax)
        };
        Ok(self.unary(value, move |a| {
            let mut d = vec![0.0; a.inputs[0].numel()];
            for (&src, &g) in argmax.iter().zip(&a.grad.data) {
                d[src] += g;
            }
            with_data(&a.inputs[0].shape, d)
        }))
    }

    /// Mean over dimension `axis`, which is removed from the shape.
    pub fn mean_dim(&self, axis: usize) -> Result<Var<'g>, TensorError> {
        let (value, outer, len, inner) = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(TensorError::shape("mean_dim", &x.shape, &[axis]));
            }
            let outer: usize = x.shape[..axis].iter().product();
            let len = x.shape[axis];
            let inner: usize = x.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for s in 0..len {
                    let src = &x.data[(o * len + s) * inner..(o * len + s + 1) * inner];
                    for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            for v in &mut out {
                *v /= len as f64;
            }
            let mut shape = x.shape.clone();
            shape.remove(axis);
            (with_data(&shape, out), outer, len, inner)
        };
        Ok(self.unary(value, move |a| {
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let g = &a.grad.data[o * inner..(o + 1) * inner];
                for s in 0..len {
                    for (dv, gv) in d[(o * len + s) * inner..(o * len + s + 1) * inner]
                        .iter_mut()
                        .zip(g)
                    {
                        *dv = gv / len as f64;
                    }
                }
            }
            with_data(&a.inputs[0].shape, d)
        }))
    }

    pub fn sum(&self) -> Var<'g> {
        let value = Tensor::scalar(self.value().data.iter().sum());
        self.unary(value, |a| Tensor::full(&a.inputs[0].shape, a.grad.item()))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean binary cross-entropy between probabilities and 0/1 targets.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&self, targets: &Tensor) -> Result<Var<'g>, TensorError> {
        const CLAMP: f64 = 1e-12;
        let value = {
            let p = self.value();
            same_shape("bce", &p, targets)?;
            let n = p.numel() as f64;
            let total: f64 = p
                .data
                .iter()
                .zip(&targets.data)
                .map(|(&p, &y)| {
                    let p = p.clamp(CLAMP, 1.0 - CLAMP);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            Tensor::scalar(total / n)
        };
        let targets = targets.clone();
        Ok(self.unary(value, move |a| {
            let p = a.inputs[0];
            let n = p.numel() as f64;
            let g = a.grad.item();
            let d = zip_map(&p.data, &targets.data, |p, y| {
                if p <= CLAMP || p >= 1.0 - CLAMP {
                    0.0
                } else {
                    g * (p - y) / (p * (1.0 - p)) / n
                }
            });
            with_data(&p.shape, d)
        }))
    }

    /// Mean binary cross-entropy on logits, computed stably.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'g>, TensorError> {
        let value = {
            let z = self.value();
            same_shape("bce_with_logits", &z, targets)?;
            let total: f64 = z
                .data
                .iter()
                .zip(&targets.data)
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / z.numel() as f64)
        };
        let targets = targets.clone();
        Ok(self.unary(value, move |a| {
            let z = a.inputs[0];
            let scale = a.grad.item() / z.numel() as f64;
            with_data(
                &z.shape,
                zip_map(&z.data, &targets.data, |z, y| scale * (sigmoid(z) - y)),
            )
        }))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout(
        &self,
        rate: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<Var<'g>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.mul_const(mask)
    }

    /// Drops the whole per-sample slice `x[i, ..]` with probability `rate`,
    /// scaling kept samples by `1 / (1 - rate)`. `rate = 1` drops everything.
    pub fn drop_path(
        &self,
        rate: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<Var<'g>, TensorError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(TensorError::BadRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let shape = self.shape();
        let b = shape.first().copied().unwrap_or(1);
        let per = shape.iter().product::<usize>() / b.max(1);
        let keep = if rate < 1.0 { 1.0 / (1.0 - rate) } else { 0.0 };
        let sample_mask: Vec<f64> = (0..b)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::from_fn(&shape, |i| sample_mask[i / per]);
        self.mul_const(mask)
    }

    /// Columns `[start, start + len)` of the last dimension.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Var<'g>, TensorError> {
        let value = {
            let x = self.value();
            let c = x.last_dim();
            if start + len > c {
                return Err(TensorError::shape("narrow_last", &x.shape, &[start, len]));
            }
            let data = x
                .data
                .chunks_exact(c)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = len;
            with_data(&shape, data)
        };
        Ok(self.unary(value, move |a| {
            let c = a.inputs[0].last_dim();
            let mut d = vec![0.0; a.inputs[0].numel()];
            for (dr, gr) in d.chunks_exact_mut(c).zip(a.grad.data.chunks_exact(len)) {
                dr[start..start + len].copy_from_slice(gr);
            }
            with_data(&a.inputs[0].shape, d)
        }))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let graph = first.graph;
        let (value, widths) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let lead = &vals[0].shape[..vals[0].rank() - 1];
            let rows: usize = lead.iter().product();
            for v in &vals {
                if &v.shape[..v.rank() - 1] != lead {
                    return Err(TensorError::shape("concat_last", &vals[0].shape, &v.shape));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (with_data(&shape, data), widths)
        };
        Ok(graph.push_op(
            value,
            parts,
            Box::new(move |a| {
                let total: usize = widths.iter().sum();
                let rows = a.grad.numel() / total;
                let mut outs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(rows * w))
                    .collect();
                for gr in a.grad.data.chunks_exact(total) {
                    let mut off = 0;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&gr[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter()
                    .zip(a.inputs)
                    .zip(a.needs)
                    .map(|((d, x), &need)| need.then(|| with_data(&x.shape, d)))
                    .collect()
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    l: usize,
    lout: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output positions `o` for which input index `o + j - pad` is in range.
    fn valid(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j);
        let hi = (self.l + self.pad).saturating_sub(j).min(self.lout);
        (lo, hi.max(lo))
    }

    fn forward_one(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        for o in 0..self.cout {
            let orow = &mut out[o * self.lout..(o + 1) * self.lout];
            for i in 0..self.cin {
                let xrow = &x[i * self.l..(i + 1) * self.l];
                for j in 0..self.k {
                    let wv = w[(o * self.cin + i) * self.k + j];
                    let (lo, hi) = self.valid(j);
                    let shift = j as isize - self.pad as isize;
                    let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (ov, xv) in orow[lo..hi].iter_mut().zip(xs) {
                        *ov += wv * xv;
                    }
                }
            }
        }
    }

    fn backward_one(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        need_x: bool,
        need_w: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; if need_x { self.cin * self.l } else { 0 }];
        let mut dw = vec![0.0; if need_w { w.len() } else { 0 }];
        for o in 0..self.cout {
            let grow = &g[o * self.lout..(o + 1) * self.lout];
            for i in 0..self.cin {
                let xrow = &x[i * self.l..(i + 1) * self.l];
                for j in 0..self.k {
                    let widx = (o * self.cin + i) * self.k + j;
                    let (lo, hi) = self.valid(j);
                    let shift = j as isize - self.pad as isize;
                    let (xlo, xhi) = (
                        (lo as isize + shift) as usize,
                        (hi as isize + shift) as usize,
                    );
                    if need_w {
                        dw[widx] += grow[lo..hi]
                            .iter()
                            .zip(&xrow[xlo..xhi])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    if need_x {
                        let wv = w[widx];
                        for (d, gv) in dx[i * self.l + xlo..i * self.l + xhi]
                            .iter_mut()
                            .zip(&grow[lo..hi])
                        {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}
