//! Dynamic routing-by-agreement between primary and class capsules.
//!
//! Per iteration `t`: `c = softmax_j(b)`, `s_j = sum_i c_ij u_hat_j|i`,
//! `v_j = squash(s_j)`, and on every iteration but the last
//! `b_ij += <u_hat_j|i, v_j>`. Logits start at zero on every call. The backward
//! pass differentiates through all iterations, including the logit updates.

use rayon::prelude::*;

use super::squash::{squash_slice, squash_slice_backward};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values of one routing iteration for a whole batch.
#[derive(Debug, Clone)]
pub struct RoutingIteration {
    /// Logits `[N, P, J]` at the start of the iteration.
    pub logits: Tensor,
    /// Coupling coefficients `[N, P, J]`.
    pub coupling: Tensor,
    /// Weighted sums `[N, J, D]`.
    pub total_input: Tensor,
    /// Squashed outputs `[N, J, D]`.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct RoutingState {
    pub iterations: Vec<RoutingIteration>,
}

impl RoutingState {
    pub fn final_output(&self) -> &Tensor {
        &self.iterations.last().expect("at least one iteration").output
    }
}

struct SampleTrace {
    logits: Vec<Vec<f64>>,
    coupling: Vec<Vec<f64>>,
    total_input: Vec<Vec<f64>>,
    output: Vec<Vec<f64>>,
}

fn softmax_rows(logits: &[f64], j: usize, out: &mut [f64]) {
    for (row, dst) in logits.chunks_exact(j).zip(out.chunks_exact_mut(j)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &b) in dst.iter_mut().zip(row) {
            *o = (b - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
}

fn route_sample(uhat: &[f64], p: usize, j: usize, d: usize, iters: usize) -> SampleTrace {
    let mut trace = SampleTrace {
        logits: Vec::with_capacity(iters),
        coupling: Vec::with_capacity(iters),
        total_input: Vec::with_capacity(iters),
        output: Vec::with_capacity(iters),
    };
    let mut b = vec![0.0; p * j];
    for t in 0..iters {
        let mut c = vec![0.0; p * j];
        softmax_rows(&b, j, &mut c);
        let mut s = vec![0.0; j * d];
        for i in 0..p {
            for k in 0..j {
                let cik = c[i * j + k];
                let u = &uhat[(i * j + k) * d..(i * j + k + 1) * d];
                for (acc, x) in s[k * d..(k + 1) * d].iter_mut().zip(u) {
                    *acc += cik * x;
                }
            }
        }
        let mut v = vec![0.0; j * d];
        for (src, dst) in s.chunks_exact(d).zip(v.chunks_exact_mut(d)) {
            squash_slice(src, dst);
        }
        let next = if t + 1 < iters {
            let mut nb = b.clone();
            for i in 0..p {
                for k in 0..j {
                    let u = &uhat[(i * j + k) * d..(i * j + k + 1) * d];
                    let agreement: f64 = u.iter().zip(&v[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum();
                    nb[i * j + k] += agreement;
                }
            }
            Some(nb)
        } else {
            None
        };
        trace.logits.push(std::mem::take(&mut b));
        trace.coupling.push(c);
        trace.total_input.push(s);
        trace.output.push(v);
        if let Some(nb) = next {
            b = nb;
        }
    }
    trace
}

/// Routes prediction vectors `[N, P, J, D]` to class capsules `[N, J, D]`.
pub fn route(uhat: &Tensor, iterations: usize) -> Result<(Tensor, RoutingState)> {
    if iterations < 1 {
        return Err(Error::InvalidArgument(
            "routing needs at least one iteration".into(),
        ));
    }
    uhat.expect_rank("route", 4)?;
    let [n, p, j, d] = [uhat.shape()[0], uhat.shape()[1], uhat.shape()[2], uhat.shape()[3]];
    let traces: Vec<SampleTrace> = uhat
        .data()
        .par_chunks(p * j * d)
        .map(|u| route_sample(u, p, j, d, iterations))
        .collect();

    let gather = |pick: &dyn Fn(&SampleTrace) -> &Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for tr in &traces {
            data.extend_from_slice(pick(tr));
        }
        Tensor::new(shape, data)
    };
    let mut iters = Vec::with_capacity(iterations);
    for t in 0..iterations {
        iters.push(RoutingIteration {
            logits: gather(&|tr| &tr.logits[t], &[n, p, j])?,
            coupling: gather(&|tr| &tr.coupling[t], &[n, p, j])?,
            total_input: gather(&|tr| &tr.total_input[t], &[n, j, d])?,
            output: gather(&|tr| &tr.output[t], &[n, j, d])?,
        });
    }
    let state = RoutingState { iterations: iters };
    Ok((state.final_output().clone(), state))
}

/// Gradient of the final routed output w.r.t. the prediction vectors.
pub fn route_backward(grad_v: &Tensor, uhat: &Tensor, state: &RoutingState) -> Result<Tensor> {
    uhat.expect_rank("route_backward", 4)?;
    let [n, p, j, d] = [uhat.shape()[0], uhat.shape()[1], uhat.shape()[2], uhat.shape()[3]];
    grad_v.expect_shape("route_backward", &[n, j, d])?;
    if state.iterations.is_empty() {
        return Err(Error::InvalidArgument("routing state has no iterations".into()));
    }
    for it in &state.iterations {
        it.coupling.expect_shape("route_backward", &[n, p, j])?;
        it.total_input.expect_shape("route_backward", &[n, j, d])?;
    }
    let iters = state.iterations.len();
    let per = p * j * d;
    let mut grad_uhat = vec![0.0; uhat.len()];
    grad_uhat
        .par_chunks_mut(per)
        .enumerate()
        .for_each(|(s, gu)| {
            let u = &uhat.data()[s * per..(s + 1) * per];
            // Gradient w.r.t. the logits entering iteration t + 1.
            let mut grad_b_next = vec![0.0; p * j];
            for t in (0..iters).rev() {
                let it = &state.iterations[t];
                let c = it.coupling.outer(s);
                let s_t = it.total_input.outer(s);
                let v_t = it.output.outer(s);
                let mut gv = if t + 1 == iters {
                    grad_v.outer(s).to_vec()
                } else {
                    let mut gv = vec![0.0; j * d];
                    for i in 0..p {
                        for k in 0..j {
                            let gb = grad_b_next[i * j + k];
                            let off = (i * j + k) * d;
                            for x in 0..d {
                                gv[k * d + x] += gb * u[off + x];
                                gu[off + x] += gb * v_t[k * d + x];
                            }
                        }
                    }
                    gv
                };
                let mut gs = vec![0.0; j * d];
                for k in 0..j {
                    squash_slice_backward(
                        &s_t[k * d..(k + 1) * d],
                        &gv[k * d..(k + 1) * d],
                        &mut gs[k * d..(k + 1) * d],
                    );
                }
                gv.clear();
                let mut grad_b = if t + 1 == iters { vec![0.0; p * j] } else { grad_b_next.clone() };
                for i in 0..p {
                    let mut gc = vec![0.0; j];
                    for k in 0..j {
                        let off = (i * j + k) * d;
                        let cik = c[i * j + k];
                        let gsk = &gs[k * d..(k + 1) * d];
                        let mut dot = 0.0;
                        for x in 0..d {
                            gu[off + x] += cik * gsk[x];
                            dot += u[off + x] * gsk[x];
                        }
                        gc[k] = dot;
                    }
                    let weighted: f64 = (0..j).map(|k| c[i * j + k] * gc[k]).sum();
                    for k in 0..j {
                        grad_b[i * j + k] += c[i * j + k] * (gc[k] - weighted);
                    }
                }
                grad_b_next = grad_b;
            }
        });
    Tensor::new(uhat.shape(), grad_uhat)
}
