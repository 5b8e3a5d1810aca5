use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Added under the square root of every vector norm so the zero vector has a
/// finite derivative.
pub const L2_NORM_EPS: f64 = 1e-7;

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    b.expect_shape(op, a.shape())?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

/// Adds `bias` along the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let last = *x.shape.last().expect("rank >= 1");
    if bias.len() != last {
        return Err(Error::shape(
            "add_bias",
            format!("bias of {} for last axis of {:?}", bias.len(), x.shape),
        ));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(last) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradient of [`add_bias`] w.r.t. the bias: sum over every axis but the last.
pub fn add_bias_backward(grad_out: &Tensor) -> Tensor {
    let last = *grad_out.shape.last().expect("rank >= 1");
    let mut g = vec![0.0; last];
    for row in grad_out.data.chunks_exact(last) {
        for (acc, v) in g.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor {
        shape: vec![last],
        data: g,
    }
}

/// NaN inputs propagate rather than being clamped to zero.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v <= 0.0 { 0.0 } else { v })
}

/// Gradient of ReLU; the derivative at exactly zero is taken as 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    zip_same("relu_backward", grad_out, input, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient of the sigmoid given its forward *output*.
pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor> {
    zip_same("sigmoid_backward", grad_out, output, |g, y| g * y * (1.0 - y))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(&x.shape, axis)?;
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..n)
                .map(|j| x.data[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out.data[idx(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// Gradient of softmax given its forward *output*: `y * (g - <g, y>)`.
pub fn softmax_backward(grad_out: &Tensor, output: &Tensor, axis: usize) -> Result<Tensor> {
    grad_out.expect_shape("softmax_backward", output.shape())?;
    let (outer, n, inner) = split_axis(&output.shape, axis)?;
    let mut out = grad_out.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|j| grad_out.data[base + j * inner] * output.data[base + j * inner])
                .sum();
            for j in 0..n {
                let k = base + j * inner;
                out.data[k] = output.data[k] * (grad_out.data[k] - dot);
            }
        }
    }
    Ok(out)
}

pub fn reduce_sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(&x.shape, axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    Tensor::new(&drop_axis(&x.shape, axis), out)
}

/// `sqrt(sum(x^2) + L2_NORM_EPS)` along `axis`.
pub fn l2_norm(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(&x.shape, axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let sq: f64 = (0..n)
                .map(|j| x.data[(o * n + j) * inner + i].powi(2))
                .sum();
            out[o * inner + i] = (sq + L2_NORM_EPS).sqrt();
        }
    }
    Tensor::new(&drop_axis(&x.shape, axis), out)
}

pub fn l2_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    norm: &Tensor,
    axis: usize,
) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(&input.shape, axis)?;
    grad_out.expect_shape("l2_norm_backward", norm.shape())?;
    if norm.len() != outer * inner {
        return Err(Error::shape(
            "l2_norm_backward",
            format!("norm {:?} does not match input {:?}", norm.shape, input.shape),
        ));
    }
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let r = o * inner + i;
            let factor = grad_out.data[r] / norm.data[r];
            for j in 0..n {
                let k = (o * n + j) * inner + i;
                out[k] = factor * input.data[k];
            }
        }
    }
    Tensor::new(&input.shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu_forward(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid_forward(&t(&[1], &[0.0])).data(), &[0.5]);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn softmax_single_element_is_one() {
        assert_eq!(softmax(&t(&[1], &[3.7]), 0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_along_inner_axis() {
        let x = t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., -1., 0., 2., 9., 0.5, 0.25]);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| y.data()[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        assert!(y.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn axis_out_of_range_rejected() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        assert!(matches!(softmax(&x, 2), Err(Error::Axis { .. })));
        assert!(reduce_sum(&x, 5).is_err());
        assert!(l2_norm(&x, 2).is_err());
    }

    #[test]
    fn reduce_sum_drops_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(reduce_sum(&x, 0).unwrap().data(), &[5., 7., 9.]);
        let r = reduce_sum(&x, 1).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[6., 15.]);
    }

    #[test]
    fn l2_norm_includes_epsilon() {
        let n = l2_norm(&t(&[1, 2], &[3.0, 4.0]), 1).unwrap();
        assert!((n.data()[0] - (25.0f64 + L2_NORM_EPS).sqrt()).abs() < 1e-15);
        let z = l2_norm(&t(&[1, 2], &[0.0, 0.0]), 1).unwrap();
        assert!(z.data()[0] > 0.0);
    }

    #[test]
    fn matmul_checks_inner_dims() {
        let a = t(&[2, 3], &[1.0; 6]);
        assert!(matmul(&a, &a).is_err());
        let b = t(&[3, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn bias_add_and_backward() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2], &[10., 20.]);
        assert_eq!(add_bias(&x, &b).unwrap().data(), &[11., 22., 13., 24.]);
        assert_eq!(add_bias_backward(&x).data(), &[4., 6.]);
        assert!(add_bias(&x, &t(&[3], &[0.; 3])).is_err());
    }
}
