//! SGD and Adam over ordered lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

fn check_pairs(params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("block {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// `p -= lr * g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        check_pairs(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("state has {} blocks, got {}", self.m.len(), params.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("state {:?} vs parameter {:?}", m.shape(), p.shape()),
                ));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[Vec<usize>]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(shapes)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(adam) => adam.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut p = Tensor::scalar(1.0);
        sgd_step(&mut [&mut p], &[&Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut [&mut p], &[&Tensor::scalar(0.0)], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut adam = Adam::new(&[vec![1]]);
        let mut p = Tensor::scalar(0.0);
        adam.step(&mut [&mut p], &[&Tensor::scalar(1.0)], 1e-3).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut adam = Adam::new(&[vec![3]]);
        let mut p = Tensor::new(&[3], vec![0.1, -2.5, 3.3]).unwrap();
        let before = p.clone();
        let g = Tensor::new(&[3], vec![1.0, -4.0, 0.5]).unwrap();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g], 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut [&mut p], &[&Tensor::zeros(&[3])], 0.1).is_err());
        let mut adam = Adam::new(&[vec![3]]);
        assert!(adam.step(&mut [&mut p], &[&Tensor::zeros(&[2])], 0.1).is_err());
    }
}
