//! Capsule network: two convolutions, primary capsules, prediction vectors and
//! dynamic routing into class capsules, with a full backward pass.

mod predict;
mod routing;
mod squash;

pub use predict::{predict_vectors, predict_vectors_backward};
pub use routing::{route, route_backward, RoutingIteration, RoutingState};
pub use squash::{squash, squash_backward};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_dim, dropout_backward, dropout_forward, l2_norm,
    l2_norm_backward, relu_backward, relu_forward, DropoutMask, Padding, Tensor,
};

/// Number of traffic-sign classes in the benchmark label space.
pub const NUM_SIGN_CLASSES: usize = 43;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub conv1_kernel: usize,
    pub conv1_filters: usize,
    pub conv2_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_stride: usize,
    /// Dimension of each primary capsule.
    pub primary_dim: usize,
    pub num_classes: usize,
    /// Dimension of each class capsule.
    pub class_dim: usize,
    pub routing_iters: usize,
    /// Drop probability applied after the first convolution while training.
    pub dropout_rate: f64,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        CapsNetConfig {
            input_height: 32,
            input_width: 32,
            channels: 3,
            conv1_kernel: 9,
            conv1_filters: 256,
            conv2_kernel: 9,
            conv2_filters: 256,
            conv2_stride: 2,
            primary_dim: 8,
            num_classes: NUM_SIGN_CLASSES,
            class_dim: 32,
            routing_iters: 3,
            dropout_rate: 0.7,
        }
    }
}

impl CapsNetConfig {
    /// Tiny configuration used for gradient checking: 8x8 inputs, 3x3 kernels,
    /// four primary capsules of dimension 2, three classes, two routing passes.
    pub fn desk() -> Self {
        CapsNetConfig {
            input_height: 8,
            input_width: 8,
            channels: 3,
            conv1_kernel: 3,
            conv1_filters: 4,
            conv2_kernel: 3,
            conv2_filters: 2,
            conv2_stride: 2,
            primary_dim: 2,
            num_classes: 3,
            class_dim: 4,
            routing_iters: 2,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [
            self.input_height,
            self.input_width,
            self.channels,
            self.conv1_kernel,
            self.conv1_filters,
            self.conv2_kernel,
            self.conv2_filters,
            self.conv2_stride,
            self.primary_dim,
            self.num_classes,
            self.class_dim,
        ]
        .contains(&0)
        {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !(1..=10).contains(&self.routing_iters) {
            return bad(format!("routing_iters must be in 1..=10, got {}", self.routing_iters));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.conv2_filters % self.primary_dim != 0 {
            return bad(format!(
                "conv2_filters ({}) must be a multiple of primary_dim ({})",
                self.conv2_filters, self.primary_dim
            ));
        }
        self.conv2_output()
            .map(|_| ())
            .ok_or_else(|| Error::Config(format!("kernels do not fit the input: {self:?}")))
    }

    pub fn conv1_output(&self) -> Option<(usize, usize)> {
        Some((
            conv_output_dim(self.input_height, self.conv1_kernel, 1, Padding::None)?,
            conv_output_dim(self.input_width, self.conv1_kernel, 1, Padding::None)?,
        ))
    }

    pub fn conv2_output(&self) -> Option<(usize, usize)> {
        let (h, w) = self.conv1_output()?;
        Some((
            conv_output_dim(h, self.conv2_kernel, self.conv2_stride, Padding::None)?,
            conv_output_dim(w, self.conv2_kernel, self.conv2_stride, Padding::None)?,
        ))
    }

    /// Number of primary capsules `P`.
    pub fn num_primary(&self) -> usize {
        let (h, w) = self.conv2_output().expect("validated config");
        h * w * self.conv2_filters / self.primary_dim
    }

    pub fn image_len(&self) -> usize {
        self.input_height * self.input_width * self.channels
    }
}

/// How parameters are drawn at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Conv filters ~ N(0, 2/fan_in), biases zero, capsule transforms ~ N(0, std).
    Default { transform_std: f64 },
    /// Every parameter, biases included, ~ N(0, std).
    Gaussian { std: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Default { transform_std: 0.05 }
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, seed: u64, tag: &str) -> Tensor {
    let mut rng = rng::stream(seed, tag, 0);
    let dist = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsNet {
    config: CapsNetConfig,
    pub conv1_filters: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_filters: Tensor,
    pub conv2_bias: Tensor,
    /// Transform matrices `[P, J, D, d_p]`.
    pub transforms: Tensor,
}

/// Parameter names, in the canonical order used by optimizers and checkpoints.
pub const CAPSNET_PARAMS: [&str; 5] = [
    "conv1/filters",
    "conv1/bias",
    "conv2/filters",
    "conv2/bias",
    "caps/transforms",
];

impl CapsNet {
    pub fn new(config: CapsNetConfig, init: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in CAPSNET_PARAMS.iter().zip(&shapes) {
            let std = match init {
                InitScheme::Gaussian { std } => std,
                InitScheme::Default { transform_std } => match *name {
                    "conv1/filters" | "conv2/filters" => {
                        let fan_in = shape[0] * shape[1] * shape[2];
                        (2.0 / fan_in as f64).sqrt()
                    }
                    "caps/transforms" => transform_std,
                    _ => 0.0,
                },
            };
            params.push(if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                normal_tensor(shape, std, seed, name)
            });
        }
        Self::from_params(config, params)
    }

    pub fn param_shapes(config: &CapsNetConfig) -> Vec<Vec<usize>> {
        let c = config;
        vec![
            vec![c.conv1_kernel, c.conv1_kernel, c.channels, c.conv1_filters],
            vec![c.conv1_filters],
            vec![c.conv2_kernel, c.conv2_kernel, c.conv1_filters, c.conv2_filters],
            vec![c.conv2_filters],
            vec![c.num_primary(), c.num_classes, c.class_dim, c.primary_dim],
        ]
    }

    /// Builds a model from parameters in [`CAPSNET_PARAMS`] order.
    pub fn from_params(config: CapsNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in CAPSNET_PARAMS.iter().zip(&shapes).zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "CapsNet::from_params",
                    format!("{name}: expected {shape:?}, got {:?}", p.shape()),
                ));
            }
            if !p.is_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(CapsNet {
            config,
            conv1_filters: next(),
            conv1_bias: next(),
            conv2_filters: next(),
            conv2_bias: next(),
            transforms: next(),
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    /// Routing depth does not change any parameter shape, so it can be
    /// overridden on a constructed or loaded model.
    pub fn set_routing_iters(&mut self, iters: usize) -> Result<()> {
        let mut c = self.config.clone();
        c.routing_iters = iters;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_filters,
            &self.conv1_bias,
            &self.conv2_filters,
            &self.conv2_bias,
            &self.transforms,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_filters,
            &mut self.conv1_bias,
            &mut self.conv2_filters,
            &mut self.conv2_bias,
            &mut self.transforms,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_height, c.input_width, c.channels];
        if batch.rank() != 4 || batch.shape()[1..] != expected {
            return Err(Error::shape(
                "CapsNet::forward",
                format!(
                    "expected [N, {}, {}, {}], got {:?}",
                    c.input_height,
                    c.input_width,
                    c.channels,
                    batch.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network on `[N, H, W, C]` images. Dropout is active only when
    /// `training` is set, with its mask drawn from `seed`.
    pub fn forward(&self, batch: &Tensor, training: bool, seed: u64) -> Result<CapsForward> {
        self.check_input(batch)?;
        let c = &self.config;
        let n = batch.dim0();

        let conv1_pre = conv2d_forward(batch, &self.conv1_filters, &self.conv1_bias, 1, Padding::None)?;
        let conv1_act = relu_forward(&conv1_pre);
        let (conv1_out, dropout) =
            dropout_forward(&conv1_act, c.dropout_rate, rng::derive_seed(seed, "dropout", 0), training)?;
        let conv2_out = conv2d_forward(
            &conv1_out,
            &self.conv2_filters,
            &self.conv2_bias,
            c.conv2_stride,
            Padding::None,
        )?;
        let conv2_shape = conv2_out.shape().to_vec();
        let primary_pre = conv2_out.into_reshaped(&[n, c.num_primary(), c.primary_dim])?;
        let primary = squash(&primary_pre);
        let predictions = predict_vectors(&primary, &self.transforms)?;
        let (v, routing) = route(&predictions, c.routing_iters)?;
        let lengths = l2_norm(&v, 2)?;

        Ok(CapsForward {
            v,
            lengths,
            cache: Some(ForwardCache {
                input: batch.clone(),
                conv1_pre,
                dropout,
                conv1_out,
                conv2_shape,
                primary_pre,
                primary,
                predictions,
                routing,
            }),
        })
    }

    /// Class-capsule outputs and lengths only; no caches retained.
    pub fn infer(&self, batch: &Tensor) -> Result<CapsForward> {
        let mut out = self.forward(batch, false, 0)?;
        out.cache = None;
        Ok(out)
    }

    /// Backpropagates upstream gradients on the class capsules and their
    /// lengths through routing, the prediction transforms and both convolutions.
    pub fn backward(
        &self,
        fwd: &CapsForward,
        grad_v: &Tensor,
        grad_lengths: &Tensor,
    ) -> Result<ParameterGradients> {
        let cache = fwd.cache.as_ref().ok_or_else(|| {
            Error::InvalidArgument("backward needs a forward pass with caches".into())
        })?;
        let c = &self.config;
        grad_v.expect_shape("CapsNet::backward", fwd.v.shape())?;
        grad_lengths.expect_shape("CapsNet::backward", fwd.lengths.shape())?;

        let mut gv = l2_norm_backward(grad_lengths, &fwd.v, &fwd.lengths, 2)?;
        for (a, b) in gv.data_mut().iter_mut().zip(grad_v.data()) {
            *a += b;
        }
        let g_pred = route_backward(&gv, &cache.predictions, &cache.routing)?;
        let (g_primary, transforms) = predict_vectors_backward(&g_pred, &cache.primary, &self.transforms)?;
        let g_primary_pre = squash_backward(&g_primary, &cache.primary_pre)?;
        let g_conv2 = g_primary_pre.into_reshaped(&cache.conv2_shape)?;
        let conv2 = conv2d_backward(
            &g_conv2,
            &cache.conv1_out,
            &self.conv2_filters,
            c.conv2_stride,
            Padding::None,
        )?;
        let g_act = dropout_backward(&conv2.input, &cache.dropout)?;
        let g_pre = relu_backward(&g_act, &cache.conv1_pre)?;
        let conv1 = conv2d_backward(&g_pre, &cache.input, &self.conv1_filters, 1, Padding::None)?;

        Ok(ParameterGradients {
            conv1_filters: conv1.filters,
            conv1_bias: conv1.bias,
            conv2_filters: conv2.filters,
            conv2_bias: conv2.bias,
            transforms,
            input: conv1.input,
        })
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    conv1_pre: Tensor,
    dropout: DropoutMask,
    conv1_out: Tensor,
    conv2_shape: Vec<usize>,
    primary_pre: Tensor,
    primary: Tensor,
    predictions: Tensor,
    routing: RoutingState,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct CapsForward {
    /// Class capsule outputs `[N, J, D]`.
    pub v: Tensor,
    /// Class capsule lengths `[N, J]`.
    pub lengths: Tensor,
    cache: Option<ForwardCache>,
}

impl CapsForward {
    pub fn routing(&self) -> Option<&RoutingState> {
        self.cache.as_ref().map(|c| &c.routing)
    }

    /// Primary capsule outputs `[N, P, d_p]` after squashing.
    pub fn primary(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.primary)
    }

    pub fn predictions(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.predictions)
    }

    /// Fraction of first-layer ReLU units that are inactive.
    pub fn inactive_relu_fraction(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| {
            let dead = c.conv1_pre.data().iter().filter(|&&x| x <= 0.0).count();
            dead as f64 / c.conv1_pre.len() as f64
        })
    }

    /// Fraction of first-layer channels that are inactive at every position of every sample.
    pub fn dead_relu_channel_fraction(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| {
            let ch = *c.conv1_pre.shape().last().expect("rank-4 activations");
            let mut alive = vec![false; ch];
            for (i, &x) in c.conv1_pre.data().iter().enumerate() {
                if x > 0.0 {
                    alive[i % ch] = true;
                }
            }
            alive.iter().filter(|a| !**a).count() as f64 / ch as f64
        })
    }

    /// Smallest `|pre-activation|` feeding the first ReLU.
    pub(crate) fn min_abs_relu_input(&self) -> Option<f64> {
        self.cache
            .as_ref()
            .map(|c| c.conv1_pre.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs())))
    }

    /// Predicted class per sample: the longest capsule, lowest index on ties.
    pub fn predictions_argmax(&self) -> Vec<usize> {
        let j = self.lengths.shape()[1];
        self.lengths.data().chunks_exact(j).map(argmax).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradients for every [`CapsNet`] parameter plus the input batch.
#[derive(Debug, Clone)]
pub struct ParameterGradients {
    pub conv1_filters: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_filters: Tensor,
    pub conv2_bias: Tensor,
    pub transforms: Tensor,
    pub input: Tensor,
}

impl ParameterGradients {
    /// Parameter gradients in [`CAPSNET_PARAMS`] order (input excluded).
    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_filters,
            &self.conv1_bias,
            &self.conv2_filters,
            &self.conv2_bias,
            &self.transforms,
        ]
    }

    pub fn into_params(self) -> Vec<Tensor> {
        vec![
            self.conv1_filters,
            self.conv1_bias,
            self.conv2_filters,
            self.conv2_bias,
            self.transforms,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CapsNetConfig {
        CapsNetConfig {
            dropout_rate: 0.5,
            ..CapsNetConfig::desk()
        }
    }

    #[test]
    fn full_model_shapes() {
        let c = CapsNetConfig::default();
        c.validate().unwrap();
        assert_eq!(c.conv1_output(), Some((24, 24)));
        assert_eq!(c.conv2_output(), Some((8, 8)));
        assert_eq!(c.num_primary(), 2048);
        let shapes = CapsNet::param_shapes(&c);
        assert_eq!(shapes[4], vec![2048, 43, 32, 8]);
    }

    #[test]
    fn desk_shapes() {
        let c = CapsNetConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.num_primary(), 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = CapsNetConfig::desk();
        c.routing_iters = 0;
        assert!(c.validate().is_err());
        let mut c = CapsNetConfig::desk();
        c.primary_dim = 3;
        assert!(c.validate().is_err());
        let mut c = CapsNetConfig::desk();
        c.conv1_kernel = 9;
        assert!(c.validate().is_err());
        let mut c = CapsNetConfig::desk();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let model = CapsNet::new(small(), InitScheme::Gaussian { std: 0.3 }, 3).unwrap();
        let x = normal_tensor(&[2, 8, 8, 3], 0.5, 1, "x").map(|v| v.abs().min(1.0));
        let out = model.forward(&x, false, 0).unwrap();
        assert_eq!(out.v.shape(), &[2, 3, 4]);
        assert_eq!(out.lengths.shape(), &[2, 3]);
        assert!(out.lengths.data().iter().all(|&l| (0.0..1.0).contains(&l)));
        let again = model.forward(&x, false, 99).unwrap();
        assert_eq!(out.v, again.v);
        let t1 = model.forward(&x, true, 5).unwrap();
        let t2 = model.forward(&x, true, 5).unwrap();
        assert_eq!(t1.v, t2.v);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let model = CapsNet::new(small(), InitScheme::default(), 0).unwrap();
        let err = model.forward(&Tensor::zeros(&[1, 9, 8, 3]), false, 0).unwrap_err();
        assert!(err.to_string().contains("[N, 8, 8, 3]"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = CapsNet::new(small(), InitScheme::Gaussian { std: 0.3 }, 3).unwrap();
        let x = Tensor::full(&[1, 8, 8, 3], 0.5);
        let fwd = model.forward(&x, true, 1).unwrap();
        let g = model
            .backward(&fwd, &Tensor::zeros(fwd.v.shape()), &Tensor::zeros(fwd.lengths.shape()))
            .unwrap();
        for t in g.params() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_needs_cache() {
        let model = CapsNet::new(small(), InitScheme::default(), 0).unwrap();
        let x = Tensor::full(&[1, 8, 8, 3], 0.5);
        let fwd = model.infer(&x).unwrap();
        assert!(model
            .backward(&fwd, &Tensor::zeros(fwd.v.shape()), &Tensor::zeros(fwd.lengths.shape()))
            .is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
    }
}
