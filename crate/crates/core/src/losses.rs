//! Margin loss on class-capsule lengths, squared-error reconstruction loss,
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the reconstruction term enters the final loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReconSign {
    /// `margin + lambda * recon`.
    #[default]
    Add,
    /// `margin - lambda * recon`.
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    /// Down-weighting of absent-class terms in the margin loss.
    pub lambda_margin: f64,
    /// Weight of the reconstruction loss in the final loss.
    pub lambda_recon: f64,
    pub recon_sign: ReconSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_margin: 0.5,
            lambda_recon: 0.0005,
            recon_sign: ReconSign::Add,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda_margin >= 0.0 && self.lambda_margin.is_finite()) {
            return Err(Error::Config(format!("lambda_margin must be >= 0, got {}", self.lambda_margin)));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon < 1.0) {
            return Err(Error::Config(format!(
                "lambda_recon must lie in [0, 1), got {}",
                self.lambda_recon
            )));
        }
        Ok(())
    }

    /// Signed weight applied to the reconstruction loss.
    pub fn recon_weight(&self) -> f64 {
        match self.recon_sign {
            ReconSign::Add => self.lambda_recon,
            ReconSign::Subtract => -self.lambda_recon,
        }
    }
}

/// Per-class term `L_k` for one capsule length.
pub fn margin_term(length: f64, present: bool, cfg: &LossConfig) -> f64 {
    if present {
        (cfg.m_plus - length).max(0.0).powi(2)
    } else {
        cfg.lambda_margin * (length - cfg.m_minus).max(0.0).powi(2)
    }
}

fn margin_term_grad(length: f64, present: bool, cfg: &LossConfig) -> f64 {
    if present {
        -2.0 * (cfg.m_plus - length).max(0.0)
    } else {
        2.0 * cfg.lambda_margin * (length - cfg.m_minus).max(0.0)
    }
}

/// Batch mean of `sum_k L_k`, with its gradient w.r.t. `lengths [N, J]`.
pub fn margin_loss(lengths: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(f64, Tensor)> {
    lengths.expect_rank("margin_loss", 2)?;
    let (n, j) = (lengths.shape()[0], lengths.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape("margin_loss", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&k| k >= j) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {j} classes")));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(lengths.shape());
    for (s, &label) in labels.iter().enumerate() {
        for k in 0..j {
            let idx = s * j + k;
            let len = lengths.data()[idx];
            loss += margin_term(len, k == label, cfg);
            grad.data_mut()[idx] = scale * margin_term_grad(len, k == label, cfg);
        }
    }
    Ok((loss * scale, grad))
}

/// Batch mean of the summed squared pixel error, with its gradient w.r.t. `recon`.
pub fn reconstruction_loss(input: &Tensor, recon: &Tensor) -> Result<(f64, Tensor)> {
    recon.expect_shape("reconstruction_loss", input.shape())?;
    let scale = 1.0 / input.dim0() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(input.shape());
    for ((g, &x), &r) in grad.data_mut().iter_mut().zip(input.data()).zip(recon.data()) {
        let diff = x - r;
        loss += diff * diff;
        *g = -2.0 * diff * scale;
    }
    Ok((loss * scale, grad))
}

pub fn final_loss(margin: f64, recon: f64, cfg: &LossConfig) -> f64 {
    margin + cfg.recon_weight() * recon
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn golden_margin_terms() {
        assert_eq!(margin_term(0.95, true, &cfg()), 0.0);
        assert!((margin_term(0.0, true, &cfg()) - 0.81).abs() < 1e-12);
        assert!((margin_term(0.5, false, &cfg()) - 0.08).abs() < 1e-12);
    }

    #[test]
    fn zero_iff_margins_met() {
        let lengths = Tensor::new(&[1, 3], vec![0.05, 0.92, 0.1]).unwrap();
        assert_eq!(margin_loss(&lengths, &[1], &cfg()).unwrap().0, 0.0);
        let lengths = Tensor::new(&[1, 3], vec![0.11, 0.92, 0.1]).unwrap();
        assert!(margin_loss(&lengths, &[1], &cfg()).unwrap().0 > 0.0);
    }

    #[test]
    fn margin_rejects_bad_labels() {
        let lengths = Tensor::zeros(&[2, 3]);
        assert!(margin_loss(&lengths, &[0, 3], &cfg()).is_err());
        assert!(margin_loss(&lengths, &[0], &cfg()).is_err());
    }

    #[test]
    fn margin_gradient_matches_central_difference() {
        let lengths = Tensor::new(&[2, 4], vec![0.3, 0.05, 0.6, 0.95, 0.2, 0.7, 0.15, 0.4]).unwrap();
        let labels = [2, 1];
        let (_, grad) = margin_loss(&lengths, &labels, &cfg()).unwrap();
        let h = 1e-6;
        for i in 0..lengths.len() {
            let mut p = lengths.clone();
            p.data_mut()[i] += h;
            let mut m = lengths.clone();
            m.data_mut()[i] -= h;
            let numeric = (margin_loss(&p, &labels, &cfg()).unwrap().0
                - margin_loss(&m, &labels, &cfg()).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn reconstruction_golden_values() {
        let x = Tensor::full(&[1, 32, 32, 3], 1.0);
        let r = Tensor::zeros(&[1, 32, 32, 3]);
        let (loss, grad) = reconstruction_loss(&x, &r).unwrap();
        assert_eq!(loss, 3072.0);
        assert!(grad.data().iter().all(|&g| g == -2.0));
        assert_eq!(reconstruction_loss(&x, &x).unwrap().0, 0.0);
        assert!(reconstruction_loss(&x, &Tensor::zeros(&[1, 32, 32, 1])).is_err());
    }

    #[test]
    fn final_loss_combinations() {
        assert!((final_loss(0.5, 100.0, &cfg()) - 0.55).abs() < 1e-12);
        assert_eq!(final_loss(0.5, 0.0, &cfg()), 0.5);
        let no_recon = LossConfig { lambda_recon: 0.0, ..cfg() };
        assert_eq!(final_loss(0.5, 42.0, &no_recon), 0.5);
        let literal = LossConfig { recon_sign: ReconSign::Subtract, ..cfg() };
        assert!((final_loss(0.5, 100.0, &literal) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LossConfig { m_minus: 0.95, ..cfg() }.validate().is_err());
        assert!(LossConfig { lambda_recon: -1.0, ..cfg() }.validate().is_err());
    }
}
