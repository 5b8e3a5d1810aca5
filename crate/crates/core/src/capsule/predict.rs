//! Prediction vectors `u_hat[n, i, j] = W[i, j] * u[n, i]`.
//!
//! `W` is laid out `[P, J, D, d_p]`: one `D x d_p` matrix per (primary capsule,
//! class capsule) pair, so `u_hat` is an ordinary matrix-vector product.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(u: &Tensor, weights: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    u.expect_rank(op, 3)?;
    weights.expect_rank(op, 4)?;
    let (n, p, dp) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let w = weights.shape();
    if w[0] != p || w[3] != dp {
        return Err(Error::shape(
            op,
            format!("weights {w:?} do not fit primary capsules {:?}", u.shape()),
        ));
    }
    Ok((n, p, w[1], w[2], dp))
}

pub fn predict_vectors(u: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, p, j, d, dp) = dims(u, weights, "predict_vectors")?;
    let per_sample = p * j * d;
    let mut out = vec![0.0; n * per_sample];
    out.par_chunks_mut(per_sample)
        .zip(u.data().par_chunks(p * dp))
        .for_each(|(dst, us)| {
            for i in 0..p {
                let ui = &us[i * dp..(i + 1) * dp];
                let wi = &weights.data()[i * j * d * dp..(i + 1) * j * d * dp];
                let oi = &mut dst[i * j * d..(i + 1) * j * d];
                for (o, row) in oi.iter_mut().zip(wi.chunks_exact(dp)) {
                    *o = row.iter().zip(ui).map(|(a, b)| a * b).sum();
                }
            }
        });
    Tensor::new(&[n, p, j, d], out)
}

/// Returns `(grad_u, grad_weights)`.
pub fn predict_vectors_backward(
    grad_out: &Tensor,
    u: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, p, j, d, dp) = dims(u, weights, "predict_vectors_backward")?;
    grad_out.expect_shape("predict_vectors_backward", &[n, p, j, d])?;
    let jd = j * d;

    let mut grad_u = vec![0.0; u.len()];
    grad_u
        .par_chunks_mut(p * dp)
        .enumerate()
        .for_each(|(s, gu)| {
            for i in 0..p {
                let g = &grad_out.data()[(s * p + i) * jd..(s * p + i + 1) * jd];
                let wi = &weights.data()[i * jd * dp..(i + 1) * jd * dp];
                let gui = &mut gu[i * dp..(i + 1) * dp];
                for (gv, row) in g.iter().zip(wi.chunks_exact(dp)) {
                    for (acc, w) in gui.iter_mut().zip(row) {
                        *acc += gv * w;
                    }
                }
            }
        });

    // Each primary capsule owns a disjoint block of W; samples are summed in order.
    let mut grad_w = vec![0.0; weights.len()];
    grad_w
        .par_chunks_mut(jd * dp)
        .enumerate()
        .for_each(|(i, gw)| {
            for s in 0..n {
                let g = &grad_out.data()[(s * p + i) * jd..(s * p + i + 1) * jd];
                let ui = &u.data()[(s * p + i) * dp..(s * p + i + 1) * dp];
                for (gv, row) in g.iter().zip(gw.chunks_exact_mut(dp)) {
                    for (acc, x) in row.iter_mut().zip(ui) {
                        *acc += gv * x;
                    }
                }
            }
        });

    Ok((
        Tensor::new(u.shape(), grad_u)?,
        Tensor::new(weights.shape(), grad_w)?,
    ))
}
