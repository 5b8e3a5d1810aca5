//! Capsule network plus reconstruction decoder, trained jointly on the final loss.

use crate::capsule::{CapsForward, CapsNet, CapsNetConfig, InitScheme, CAPSNET_PARAMS};
use crate::decoder::{mask, mask_backward, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::losses::{final_loss, margin_loss, reconstruction_loss, LossConfig};
use crate::tensor::{scale, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub margin: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.margin.is_finite() && self.recon.is_finite() && self.total.is_finite()
    }
}

/// Output of a combined forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossBreakdown,
    /// Gradients in [`Network::param_names`] order.
    pub grads: Vec<Tensor>,
    /// Argmax class per sample from the same forward pass.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub capsnet: CapsNet,
    pub decoder: Decoder,
    pub init: InitScheme,
    pub init_seed: u64,
}

impl Network {
    pub fn new(config: CapsNetConfig, decoder_hidden: Vec<usize>, init: InitScheme, seed: u64) -> Result<Self> {
        let decoder_config = decoder_config_for(&config, decoder_hidden);
        Ok(Network {
            capsnet: CapsNet::new(config, init, seed)?,
            decoder: Decoder::new(decoder_config, init, seed)?,
            init,
            init_seed: seed,
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        self.capsnet.config()
    }

    pub fn param_names(&self) -> Vec<String> {
        CAPSNET_PARAMS
            .iter()
            .map(|s| s.to_string())
            .chain(self.decoder.param_names())
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.capsnet.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.capsnet.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Replaces every parameter, in [`Network::param_names`] order.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        let split = CAPSNET_PARAMS.len();
        if params.len() != split + self.decoder.params().len() {
            return Err(Error::Config(format!("wrong number of parameter blocks: {}", params.len())));
        }
        let mut capsnet_params = params;
        let decoder_params = capsnet_params.split_off(split);
        Ok(Network {
            capsnet: CapsNet::from_params(self.config().clone(), capsnet_params)?,
            decoder: Decoder::from_params(self.decoder.config().clone(), decoder_params)?,
            init: self.init,
            init_seed: self.init_seed,
        })
    }

    /// Forward-only loss, used by the gradient oracle and for reporting.
    pub fn loss(&self, x: &Tensor, labels: &[usize], cfg: &LossConfig, training: bool, seed: u64) -> Result<LossBreakdown> {
        let fwd = self.capsnet.forward(x, training, seed)?;
        let (margin, _) = margin_loss(&fwd.lengths, labels, cfg)?;
        let (masked, _) = mask(&fwd.v, Some(labels))?;
        let recon_img = self.decoder.decode(&masked)?.image;
        let (recon, _) = reconstruction_loss(x, &recon_img)?;
        Ok(LossBreakdown {
            margin,
            recon,
            total: final_loss(margin, recon, cfg),
        })
    }

    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        labels: &[usize],
        cfg: &LossConfig,
        training: bool,
        seed: u64,
    ) -> Result<StepResult> {
        let c = self.config();
        let fwd = self.capsnet.forward(x, training, seed)?;
        let (margin, grad_lengths) = margin_loss(&fwd.lengths, labels, cfg)?;
        let (masked, keep) = mask(&fwd.v, Some(labels))?;
        let dec = self.decoder.decode(&masked)?;
        let (recon, grad_recon) = reconstruction_loss(x, &dec.image)?;
        let dec_grads = self.decoder.backward(&dec, &scale(&grad_recon, cfg.recon_weight()))?;
        let grad_v = mask_backward(&dec_grads.input, &keep, c.num_classes, c.class_dim)?;
        let caps_grads = self.capsnet.backward(&fwd, &grad_v, &grad_lengths)?;

        let mut grads = caps_grads.into_params();
        grads.extend(dec_grads.params);
        Ok(StepResult {
            loss: LossBreakdown {
                margin,
                recon,
                total: final_loss(margin, recon, cfg),
            },
            grads,
            predictions: fwd.predictions_argmax(),
        })
    }

    pub fn infer(&self, x: &Tensor) -> Result<CapsForward> {
        self.capsnet.infer(x)
    }

    /// Reconstructions from the longest class capsule of each sample.
    pub fn reconstruct(&self, fwd: &CapsForward) -> Result<Tensor> {
        let (masked, _) = mask(&fwd.v, None)?;
        Ok(self.decoder.decode(&masked)?.image)
    }
}

pub fn decoder_config_for(config: &CapsNetConfig, hidden: Vec<usize>) -> DecoderConfig {
    DecoderConfig {
        num_classes: config.num_classes,
        class_dim: config.class_dim,
        hidden,
        image_height: config.input_height,
        image_width: config.input_width,
        channels: config.channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_matches_step_loss() {
        let net = Network::new(CapsNetConfig::desk(), vec![6, 8], InitScheme::Gaussian { std: 0.2 }, 4).unwrap();
        let x = Tensor::full(&[2, 8, 8, 3], 0.4);
        let cfg = LossConfig::default();
        let a = net.loss(&x, &[0, 2], &cfg, false, 0).unwrap();
        let b = net.loss_and_grad(&x, &[0, 2], &cfg, false, 0).unwrap();
        assert_eq!(a, b.loss);
        assert_eq!(b.grads.len(), net.params().len());
        for (g, p) in b.grads.iter().zip(net.params()) {
            assert_eq!(g.shape(), p.shape());
        }
        assert_eq!(net.param_names().len(), net.params().len());
    }

    #[test]
    fn with_params_round_trip() {
        let net = Network::new(CapsNetConfig::desk(), vec![4], InitScheme::default(), 1).unwrap();
        let copy = net.with_params(net.params().into_iter().cloned().collect()).unwrap();
        assert_eq!(copy, net);
    }
}
