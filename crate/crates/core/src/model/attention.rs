//! Top-m self-attention on autodiff vars.

use crate::error::TensorError;
use crate::tensor::{Tensor, Var};

/// Scaled dot-product attention where each query row keeps only its `m`
/// highest scores; the others are set to `mask_value` before the softmax.
///
/// Accepts `[b, d]` or batched `[B, b, d]` inputs. Scores are divided by
/// `sqrt(d)`.
pub fn topm_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    m: usize,
    mask_value: f64,
) -> Result<Var<'g>, TensorError> {
    let qs = q.shape();
    let (ks, vs) = (k.shape(), v.shape());
    if qs != ks || ks[..ks.len() - 1] != vs[..vs.len() - 1] || !(2..=3).contains(&qs.len()) {
        return Err(TensorError::shape("topm_attention", &qs, &ks));
    }
    let unbatched = qs.len() == 2;
    let lift = |x: &Var<'g>| -> Result<Var<'g>, TensorError> {
        if unbatched {
            let s = x.shape();
            x.reshape(&[1, s[0], s[1]])
        } else {
            Ok(*x)
        }
    };
    let (q3, k3, v3) = (lift(q)?, lift(k)?, lift(v)?);
    let d = *qs.last().unwrap() as f64;
    let scores = q3.bmm(&k3.transpose()?)?.scale(1.0 / d.sqrt());
    let weights = scores.top_m_mask(m, mask_value)?.softmax();
    let out = weights.bmm(&v3)?;
    if unbatched {
        let s = out.shape();
        out.reshape(&[s[1], s[2]])
    } else {
        Ok(out)
    }
}

/// Projection weights of one multi-head layer. All are `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadWeights<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
}

/// Projects `x` to queries, keys and values, runs top-m attention per head
/// on `d / heads` wide slices, concatenates and applies the output
/// projection.
pub fn multihead_topm<'g>(
    x: &Var<'g>,
    w: &MultiHeadWeights<'g>,
    heads: usize,
    m: usize,
    mask_value: f64,
) -> Result<Var<'g>, TensorError> {
    let d = w.wq.shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let (q, k, v) = (x.matmul(&w.wq)?, x.matmul(&w.wk)?, x.matmul(&w.wv)?);
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let slice = |t: &Var<'g>| t.narrow_last(h * dh, dh);
        outs.push(topm_attention(
            &slice(&q)?,
            &slice(&k)?,
            &slice(&v)?,
            m,
            mask_value,
        )?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        Var::concat_last(&outs)?
    };
    cat.matmul(&w.wo)
}

/// Standard sinusoidal position table, `[len, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hand_scores_rows() {
        // QKᵀ / sqrt(2) = [[5, 1], [1, 5]]
        let g = Graph::new();
        let s = 2f64.sqrt();
        let q = g.constant(t(&[2, 2], &[5.0 * s, s, s, 5.0 * s]));
        let k = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[2, 2], &[10.0, 0.0, 0.0, 10.0]));
        let out = topm_attention(&q, &k, &v, 1, -1e9).unwrap().to_tensor();
        assert!(out.max_abs_diff(&v.to_tensor()) < 1e-3);
    }

    #[test]
    fn single_head_is_attention_then_output_projection() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| {
            ((i * 5 % 7) as f64 - 3.0) / 3.0
        }));
        let w = |seed: usize| {
            g.constant(Tensor::from_fn(&[4, 4], |i| {
                (((i + seed) * 11 % 13) as f64 - 6.0) / 6.0
            }))
        };
        let weights = MultiHeadWeights {
            wq: w(1),
            wk: w(2),
            wv: w(3),
            wo: w(4),
        };
        let got = multihead_topm(&x, &weights, 1, 2, -1e9)
            .unwrap()
            .to_tensor();
        let q = x.matmul(&weights.wq).unwrap();
        let k = x.matmul(&weights.wk).unwrap();
        let v = x.matmul(&weights.wv).unwrap();
        let want = topm_attention(&q, &k, &v, 2, -1e9)
            .unwrap()
            .matmul(&weights.wo)
            .unwrap()
            .to_tensor();
        assert_eq!(got, want);
        let two = multihead_topm(&x, &weights, 2, 2, -1e9).unwrap();
        assert_eq!(two.shape(), vec![3, 4]);
        assert!(multihead_topm(&x, &weights, 3, 2, -1e9).is_err());
    }

    #[test]
    fn encoding_first_row() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
