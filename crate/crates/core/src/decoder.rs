//! Class-capsule masking and the fully connected reconstruction decoder.

use serde::{Deserialize, Serialize};

use crate::capsule::{argmax, normal_tensor, InitScheme};
use crate::error::{Error, Result};
use crate::tensor::{
    add_bias, add_bias_backward, gemm, matmul, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub class_dim: usize,
    /// Widths of the ReLU hidden layers.
    pub hidden: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
}

impl DecoderConfig {
    /// Two hidden layers of 512 and 1024 units.
    pub fn standard(num_classes: usize, class_dim: usize, h: usize, w: usize, c: usize) -> Self {
        DecoderConfig {
            num_classes,
            class_dim,
            hidden: vec![512, 1024],
            image_height: h,
            image_width: w,
            channels: c,
        }
    }

    /// Single ReLU layer followed by the sigmoid output layer.
    pub fn shallow(num_classes: usize, class_dim: usize, h: usize, w: usize, c: usize) -> Self {
        DecoderConfig {
            hidden: vec![512],
            ..Self::standard(num_classes, class_dim, h, w, c)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.num_classes * self.class_dim
    }

    pub fn output_dim(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.output_dim());
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.output_dim() == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("decoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    /// `(weight [in, out], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, init: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let wname = format!("decoder/fc{}/weight", l + 1);
                let bname = format!("decoder/fc{}/bias", l + 1);
                match init {
                    InitScheme::Gaussian { std } => (
                        normal_tensor(&[fan_in, fan_out], std, seed, &wname),
                        normal_tensor(&[fan_out], std, seed, &bname),
                    ),
                    InitScheme::Default { .. } => {
                        let gain = if l == last { 1.0 } else { 2.0 };
                        (
                            normal_tensor(&[fan_in, fan_out], (gain / fan_in as f64).sqrt(), seed, &wname),
                            Tensor::zeros(&[fan_out]),
                        )
                    }
                }
            })
            .collect();
        Ok(Decoder { config, layers })
    }

    pub fn from_params(config: DecoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::Config(format!(
                "decoder expects {} parameter blocks, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut it = params.into_iter();
        for (l, &(i, o)) in dims.iter().enumerate() {
            let w = it.next().expect("counted");
            let b = it.next().expect("counted");
            if w.shape() != [i, o] || b.shape() != [o] {
                return Err(Error::shape(
                    "Decoder::from_params",
                    format!("layer {}: got {:?} and {:?}, expected [{i}, {o}] and [{o}]", l + 1, w.shape(), b.shape()),
                ));
            }
            layers.push((w, b));
        }
        Ok(Decoder { config, layers })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<String> {
        (1..=self.layers.len())
            .flat_map(|l| [format!("decoder/fc{l}/weight"), format!("decoder/fc{l}/bias")])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// `fc -> ReLU` for each hidden layer, then `fc -> sigmoid`, reshaped to images.
    pub fn decode(&self, masked: &Tensor) -> Result<DecoderForward> {
        masked.expect_rank("decode", 2)?;
        if masked.shape()[1] != self.config.input_dim() {
            return Err(Error::shape(
                "decode",
                format!("expected [N, {}], got {:?}", self.config.input_dim(), masked.shape()),
            ));
        }
        let n = masked.dim0();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = masked.clone();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let z = add_bias(&matmul(&x, w)?, b)?;
            let next = if l + 1 == self.layers.len() {
                sigmoid_forward(&z)
            } else {
                relu_forward(&z)
            };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        let c = &self.config;
        let image = x.into_reshaped(&[n, c.image_height, c.image_width, c.channels])?;
        Ok(DecoderForward { image, inputs, pre })
    }

    pub fn backward(&self, fwd: &DecoderForward, grad_image: &Tensor) -> Result<DecoderGrads> {
        grad_image.expect_shape("Decoder::backward", fwd.image.shape())?;
        let n = fwd.image.dim0();
        let flat = fwd.image.reshape(&[n, self.config.output_dim()])?;
        let mut g = sigmoid_backward(&grad_image.reshape(&[n, self.config.output_dim()])?, &flat)?;
        let mut params = vec![None; 2 * self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            if l + 1 != self.layers.len() {
                g = relu_backward(&g, &fwd.pre[l])?;
            }
            let (w, _) = &self.layers[l];
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let x = &fwd.inputs[l];
            let mut gw = vec![0.0; fan_in * fan_out];
            gemm(fan_in, n, fan_out, x.data(), true, g.data(), false, 0.0, &mut gw);
            let mut gx = vec![0.0; n * fan_in];
            gemm(n, fan_out, fan_in, g.data(), false, w.data(), true, 0.0, &mut gx);
            params[2 * l] = Some(Tensor::new(&[fan_in, fan_out], gw)?);
            params[2 * l + 1] = Some(add_bias_backward(&g));
            g = Tensor::new(&[n, fan_in], gx)?;
        }
        Ok(DecoderGrads {
            params: params.into_iter().map(|p| p.expect("filled")).collect(),
            input: g,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderForward {
    /// Reconstructions `[N, H, W, C]` in (0, 1).
    pub image: Tensor,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) pre: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    /// Gradients in [`Decoder::params`] order.
    pub params: Vec<Tensor>,
    /// Gradient w.r.t. the masked input `[N, J*D]`.
    pub input: Tensor,
}

/// Keeps one class capsule per sample and flattens to `[N, J*D]`.
///
/// With `targets` the labelled class survives; without, the longest capsule
/// does (lowest index on ties). Returns the masked tensor and the kept classes.
pub fn mask(v: &Tensor, targets: Option<&[usize]>) -> Result<(Tensor, Vec<usize>)> {
    v.expect_rank("mask", 3)?;
    let (n, j, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let keep: Vec<usize> = match targets {
        Some(t) => {
            if t.len() != n {
                return Err(Error::shape("mask", format!("{} targets for batch of {n}", t.len())));
            }
            if let Some(&bad) = t.iter().find(|&&k| k >= j) {
                return Err(Error::InvalidArgument(format!(
                    "target class {bad} out of range for {j} classes"
                )));
            }
            t.to_vec()
        }
        None => v
            .data()
            .chunks_exact(j * d)
            .map(|caps| {
                let lengths: Vec<f64> = caps
                    .chunks_exact(d)
                    .map(|c| c.iter().map(|x| x * x).sum())
                    .collect();
                argmax(&lengths)
            })
            .collect(),
    };
    let mut out = Tensor::zeros(&[n, j * d]);
    for (s, &k) in keep.iter().enumerate() {
        let src = &v.data()[(s * j + k) * d..(s * j + k + 1) * d];
        out.outer_mut(s)[k * d..(k + 1) * d].copy_from_slice(src);
    }
    Ok((out, keep))
}

/// Routes the masked-input gradient back to `[N, J, D]`; masked positions get zero.
pub fn mask_backward(grad: &Tensor, keep: &[usize], num_classes: usize, class_dim: usize) -> Result<Tensor> {
    let n = keep.len();
    grad.expect_shape("mask_backward", &[n, num_classes * class_dim])?;
    let mut out = Tensor::zeros(&[n, num_classes, class_dim]);
    let d = class_dim;
    for (s, &k) in keep.iter().enumerate() {
        let src = &grad.outer(s)[k * d..(k + 1) * d];
        out.outer_mut(s)[k * d..(k + 1) * d].copy_from_slice(src);
    }
    Ok(out)
}
