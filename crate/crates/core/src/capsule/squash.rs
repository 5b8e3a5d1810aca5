//! The squashing nonlinearity `v = |s|^2 / (1 + |s|^2) * s / |s|`.
//!
//! The trailing `|s|` is evaluated as `sqrt(|s|^2 + L2_NORM_EPS)`, so the zero
//! vector maps to zero with a finite derivative.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, L2_NORM_EPS};

/// Scale factor `g(n2)` with `v = g(n2) * s`, plus its derivative `g'(n2)`.
#[inline]
fn gain(n2: f64) -> (f64, f64) {
    let h = 1.0 / ((1.0 + n2) * (n2 + L2_NORM_EPS).sqrt());
    let g = n2 * h;
    let dg = h * (1.0 - n2 / (1.0 + n2) - n2 / (2.0 * (n2 + L2_NORM_EPS)));
    (g, dg)
}

pub(crate) fn squash_slice(s: &[f64], out: &mut [f64]) {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let (g, _) = gain(n2);
    for (o, x) in out.iter_mut().zip(s) {
        *o = g * x;
    }
}

/// Accumulates `d v / d s` applied to `grad` into `out`.
pub(crate) fn squash_slice_backward(s: &[f64], grad: &[f64], out: &mut [f64]) {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let (g, dg) = gain(n2);
    let dot: f64 = s.iter().zip(grad).map(|(a, b)| a * b).sum();
    let k = 2.0 * dg * dot;
    for ((o, x), gv) in out.iter_mut().zip(s).zip(grad) {
        *o += g * gv + k * x;
    }
}

/// Squashes every vector along the last axis.
pub fn squash(s: &Tensor) -> Tensor {
    let d = *s.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros(s.shape());
    for (src, dst) in s.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
        squash_slice(src, dst);
    }
    out
}

pub fn squash_backward(grad_out: &Tensor, s: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != s.shape() {
        return Err(Error::shape(
            "squash_backward",
            format!("gradient {:?} vs input {:?}", grad_out.shape(), s.shape()),
        ));
    }
    let d = *s.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros(s.shape());
    for ((src, g), dst) in s
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        squash_slice_backward(src, g, dst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_maps_to_zero() {
        let v = squash(&Tensor::zeros(&[4]));
        assert!(v.data().iter().all(|&x| x == 0.0));
        let g = squash_backward(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn unit_vector_halves() {
        let mut s = vec![0.0; 8];
        s[0] = 1.0;
        let v = squash(&Tensor::new(&[8], s).unwrap());
        assert!((v.data()[0] - 0.5).abs() < 1e-7);
        assert!(v.data()[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_four_five() {
        // |s|^2 = 25: factor 25/26 on the unit direction (0.6, 0.8).
        let v = squash(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let expected = [0.6 * 25.0 / 26.0, 0.8 * 25.0 / 26.0];
        assert!((v.data()[0] - 0.576_923_076_9).abs() < 1e-8);
        assert!((v.data()[1] - 0.769_230_769_2).abs() < 1e-8);
        for (a, e) in v.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-8);
        }
        assert!((norm(v.data()) - 25.0 / 26.0).abs() < 1e-8);
    }

    #[test]
    fn backward_matches_central_difference() {
        let s = vec![0.3, -1.2, 0.05, 2.0];
        let g = vec![0.7, 0.1, -0.4, 0.25];
        let mut analytic = vec![0.0; 4];
        squash_slice_backward(&s, &g, &mut analytic);
        let h = 1e-6;
        for i in 0..4 {
            let f = |delta: f64| {
                let mut x = s.clone();
                x[i] += delta;
                let mut v = vec![0.0; 4];
                squash_slice(&x, &mut v);
                v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8, "coord {i}");
        }
    }
}
