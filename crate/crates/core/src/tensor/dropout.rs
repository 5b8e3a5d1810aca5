use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Keep-mask produced by an inverted-dropout forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum DropoutMask {
    /// Inference mode or rate 0: every element passes through unscaled.
    Identity,
    Sampled { keep: Vec<bool>, scale: f64 },
}

impl DropoutMask {
    pub fn kept_fraction(&self) -> f64 {
        match self {
            DropoutMask::Identity => 1.0,
            DropoutMask::Sampled { keep, .. } => {
                keep.iter().filter(|&&k| k).count() as f64 / keep.len() as f64
            }
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            DropoutMask::Identity => Ok(x.clone()),
            DropoutMask::Sampled { keep, scale } => {
                if keep.len() != x.len() {
                    return Err(Error::shape(
                        "dropout",
                        format!("mask of {} for tensor {:?}", keep.len(), x.shape()),
                    ));
                }
                let data = x
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&v, &k)| if k { v * scale } else { 0.0 })
                    .collect();
                Tensor::new(x.shape(), data)
            }
        }
    }
}

/// Inverted dropout: each element is zeroed with probability `rate` and the
/// survivors are scaled by `1 / (1 - rate)`. Outside training it is the identity.
pub fn dropout_forward(
    input: &Tensor,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::Identity));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (0..input.len()).map(|_| rng.random::<f64>() >= rate).collect();
    let mask = DropoutMask::Sampled {
        keep,
        scale: 1.0 / (1.0 - rate),
    };
    Ok((mask.apply(input)?, mask))
}

pub fn dropout_backward(grad_out: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    mask.apply(grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_and_inference_are_identity() {
        let x = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let (y, m) = dropout_forward(&x, 0.0, 1, true).unwrap();
        assert_eq!(y, x);
        assert_eq!(m, DropoutMask::Identity);
        let (y, _) = dropout_forward(&x, 0.7, 1, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_rate_of_one() {
        let x = Tensor::zeros(&[2]);
        assert!(dropout_forward(&x, 1.0, 0, true).is_err());
        assert!(dropout_forward(&x, -0.1, 0, true).is_err());
    }

    #[test]
    fn kept_fraction_concentrates() {
        let x = Tensor::full(&[100_000], 1.0);
        let (y, mask) = dropout_forward(&x, 0.7, 42, true).unwrap();
        let kept = mask.kept_fraction();
        assert!((kept - 0.3).abs() < 0.01, "kept {kept}");
        // Inverted scaling keeps the expectation.
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn backward_uses_same_mask() {
        let x = Tensor::full(&[64], 2.0);
        let (y, mask) = dropout_forward(&x, 0.5, 9, true).unwrap();
        let g = dropout_backward(&Tensor::full(&[64], 1.0), &mask).unwrap();
        for (yv, gv) in y.data().iter().zip(g.data()) {
            assert_eq!(*yv == 0.0, *gv == 0.0);
        }
        let (again, _) = dropout_forward(&x, 0.5, 9, true).unwrap();
        assert_eq!(again, y);
    }
}
