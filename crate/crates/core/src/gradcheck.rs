//! Central-difference gradient oracle.
//!
//! The oracle only ever evaluates forward computations; analytic gradients
//! are supplied by the caller and compared coordinate by coordinate.

use rand::seq::index::sample;

use crate::capsule::{
    predict_vectors, predict_vectors_backward, route, route_backward, squash, squash_backward, CapsNetConfig,
    InitScheme,
};
use crate::error::{Error, Result};
use crate::losses::{margin_loss, reconstruction_loss, LossConfig};
use crate::network::Network;
use crate::rng;
use crate::tensor::{
    conv2d_backward, conv2d_forward, dropout_backward, dropout_forward, l2_norm, l2_norm_backward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, softmax, softmax_backward, Padding, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum relative error for a block to pass.
    pub tolerance: f64,
    /// Blocks with at least this many elements are sub-sampled.
    pub full_block_limit: usize,
    /// Coordinates sampled from blocks above the limit.
    pub samples_per_block: usize,
    /// Skip coordinates where the function is not smooth inside the stencil,
    /// detected by disagreement between the `h` and `h/2` estimates.
    pub kink_guard: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            full_block_limit: 10_000,
            samples_per_block: 500,
            kink_guard: true,
            seed: 0,
        }
    }
}

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub name: String,
    pub checked: usize,
    /// Coordinates excluded by the kink guard.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub blocks: Vec<BlockResult>,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// around `params`.
pub fn check<F>(
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckResult>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if names.len() != params.len() || analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} names, {} parameter blocks and {} gradient blocks",
            names.len(),
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "gradcheck",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for (b, name) in names.iter().enumerate() {
        let len = params[b].len();
        let coords: Vec<usize> = if len < cfg.full_block_limit {
            (0..len).collect()
        } else {
            let mut r = rng::stream(cfg.seed, "gradcheck", b as u64);
            let mut idx = sample(&mut r, len, cfg.samples_per_block.min(len)).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut result = BlockResult {
            name: name.clone(),
            checked: coords.len(),
            skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
            passed: true,
        };
        for &i in &coords {
            let original = work[b].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work[b].data_mut()[i] = original + h;
                let plus = loss_fn(&work)?;
                work[b].data_mut()[i] = original - h;
                let minus = loss_fn(&work)?;
                work[b].data_mut()[i] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = central(cfg.step)?;
            if cfg.kink_guard {
                let half = central(cfg.step / 2.0)?;
                if relative_error(numeric, half) > cfg.tolerance {
                    result.skipped += 1;
                    continue;
                }
            }
            let a = analytic[b].data()[i];
            let rel = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            result.max_abs_error = result.max_abs_error.max(abs);
            if rel > result.max_rel_error || !rel.is_finite() {
                result.max_rel_error = rel;
                result.worst_index = i;
            }
        }
        result.passed = result.max_rel_error <= cfg.tolerance && result.skipped * 10 <= result.checked;
        blocks.push(result);
    }
    Ok(GradCheckResult {
        blocks,
        tolerance: cfg.tolerance,
    })
}

fn gaussian(shape: &[usize], std: f64, seed: u64, tag: &str) -> Tensor {
    crate::capsule::normal_tensor(shape, std, seed, tag)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// One named entry of the standard suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub result: GradCheckResult,
}

// At 0.1 the class capsules come out ~3e-4 long, inside the squash epsilon,
// and the whole graph's gradients shrink to round-off level.
const DESK_CAPSNET_INIT: InitScheme = InitScheme::Gaussian { std: 0.7 };

/// Desk-scale network used by the full-graph check.
///
/// The capsule weights are drawn wide enough that the class capsules have
/// non-trivial lengths; the decoder gets non-zero biases so its hidden units
/// sit away from the ReLU kink.
pub fn desk_network(seed: u64) -> Result<Network> {
    let config = CapsNetConfig::desk();
    let hidden = vec![16, 24];
    Ok(Network {
        capsnet: crate::capsule::CapsNet::new(config.clone(), DESK_CAPSNET_INIT, seed)?,
        decoder: crate::decoder::Decoder::new(
            crate::network::decoder_config_for(&config, hidden),
            InitScheme::Gaussian { std: 0.2 },
            seed,
        )?,
        init: DESK_CAPSNET_INIT,
        init_seed: seed,
    })
}

const FULL_GRAPH_ATTEMPTS: u64 = 32;

/// Checks the complete capsule + decoder + final-loss graph at desk scale.
///
/// Parameters and inputs are re-drawn while any length is within 0.02 of a
/// margin, more than 20% of first-layer ReLU channels are dead (inactive
/// everywhere), or a first-layer stencil would cross the ReLU kink. Decoder-side
/// kinks are left to the kink guard.
pub fn check_full_graph(cfg: &GradCheckConfig) -> Result<GradCheckResult> {
    let loss_cfg = LossConfig::default();
    let labels = vec![0, 2];
    let mut attempt = 0u64;
    let (net, x) = loop {
        let seed = rng::derive_seed(cfg.seed, "full-graph", attempt);
        let net = desk_network(seed)?;
        let x = gaussian(&[2, 8, 8, 3], 1.0, seed, "input").map(|v| 0.5 + 0.5 * v.tanh());
        let fwd = net.capsnet.forward(&x, false, 0)?;
        let near_hinge = fwd
            .lengths
            .data()
            .iter()
            .any(|&l| (l - loss_cfg.m_plus).abs() < 0.02 || (l - loss_cfg.m_minus).abs() < 0.02);
        let dead = fwd.dead_relu_channel_fraction().unwrap_or(0.0) > 0.2;
        // A step of h on a conv1 weight or bias moves its pre-activations by at
        // most h * max(1, |x|) <= h, so this margin keeps every conv1 stencil off the kink.
        let near_kink = fwd.min_abs_relu_input().unwrap_or(f64::INFINITY) < 2.0 * cfg.step;
        if !(near_hinge || dead || near_kink) || attempt + 1 >= FULL_GRAPH_ATTEMPTS {
            break (net, x);
        }
        attempt += 1;
    };
    let step = net.loss_and_grad(&x, &labels, &loss_cfg, false, 0)?;
    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    check(
        &net.param_names(),
        &params,
        &step.grads,
        |p| Ok(net.with_params(p.to_vec())?.loss(&x, &labels, &loss_cfg, false, 0)?.total),
        cfg,
    )
}

/// Runs the per-kernel checks, plus the full desk-scale graph when `full` is set.
pub fn run_suite(full: bool, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let s = cfg.seed;
    let mut out = Vec::new();
    let mut push = |name: &str, result: GradCheckResult| {
        out.push(SuiteEntry {
            name: name.to_string(),
            result,
        })
    };

    // conv2d: input, filters and bias.
    {
        let x = gaussian(&[1, 6, 6, 2], 1.0, s, "conv-x");
        let f = gaussian(&[3, 3, 2, 4], 1.0, s, "conv-f");
        let b = gaussian(&[4], 1.0, s, "conv-b");
        let probe = gaussian(&[1, 4, 4, 4], 1.0, s, "conv-probe");
        let g = conv2d_backward(&probe, &x, &f, 1, Padding::None)?;
        push(
            "conv2d",
            check(
                &names(&["input", "filters", "bias"]),
                &[x, f, b],
                &[g.input, g.filters, g.bias],
                |p| Ok(dot(&conv2d_forward(&p[0], &p[1], &p[2], 1, Padding::None)?, &probe)),
                cfg,
            )?,
        );
        let x = gaussian(&[2, 7, 7, 2], 1.0, s, "conv2-x");
        let f = gaussian(&[3, 3, 2, 3], 1.0, s, "conv2-f");
        let b = gaussian(&[3], 1.0, s, "conv2-b");
        let probe = gaussian(&[2, 4, 4, 3], 1.0, s, "conv2-probe");
        let g = conv2d_backward(&probe, &x, &f, 2, Padding::Zero(1))?;
        push(
            "conv2d/stride2-pad1",
            check(
                &names(&["input", "filters", "bias"]),
                &[x, f, b],
                &[g.input, g.filters, g.bias],
                |p| Ok(dot(&conv2d_forward(&p[0], &p[1], &p[2], 2, Padding::Zero(1))?, &probe)),
                cfg,
            )?,
        );
    }

    // Elementwise activations, away from the ReLU kink.
    {
        let x = gaussian(&[4, 5], 1.0, s, "act-x").map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let probe = gaussian(&[4, 5], 1.0, s, "act-probe");
        let g = relu_backward(&probe, &x)?;
        push("relu", check(&names(&["x"]), std::slice::from_ref(&x), &[g], |p| Ok(dot(&relu_forward(&p[0]), &probe)), cfg)?);
        let g = sigmoid_backward(&probe, &sigmoid_forward(&x))?;
        push(
            "sigmoid",
            check(&names(&["x"]), std::slice::from_ref(&x), &[g], |p| Ok(dot(&sigmoid_forward(&p[0]), &probe)), cfg)?,
        );
        let y = softmax(&x, 1)?;
        let g = softmax_backward(&probe, &y, 1)?;
        push(
            "softmax",
            check(&names(&["x"]), std::slice::from_ref(&x), &[g], |p| Ok(dot(&softmax(&p[0], 1)?, &probe)), cfg)?,
        );
        let norm = l2_norm(&x, 1)?;
        let probe_n = gaussian(&[4], 1.0, s, "norm-probe");
        let g = l2_norm_backward(&probe_n, &x, &norm, 1)?;
        push(
            "l2_norm",
            check(&names(&["x"]), std::slice::from_ref(&x), &[g], |p| Ok(dot(&l2_norm(&p[0], 1)?, &probe_n)), cfg)?,
        );
        let (_, mask) = dropout_forward(&x, 0.5, s, true)?;
        let g = dropout_backward(&probe, &mask)?;
        push(
            "dropout",
            check(
                &names(&["x"]),
                &[x],
                &[g],
                |p| Ok(dot(&dropout_forward(&p[0], 0.5, s, true)?.0, &probe)),
                cfg,
            )?,
        );
    }

    // Capsule kernels.
    {
        let sv = gaussian(&[3, 4, 8], 0.7, s, "squash-s");
        let probe = gaussian(&[3, 4, 8], 1.0, s, "squash-probe");
        let g = squash_backward(&probe, &sv)?;
        push("squash", check(&names(&["s"]), &[sv], &[g], |p| Ok(dot(&squash(&p[0]), &probe)), cfg)?);

        let u = gaussian(&[2, 3, 2], 1.0, s, "pred-u");
        let w = gaussian(&[3, 4, 5, 2], 1.0, s, "pred-w");
        let probe = gaussian(&[2, 3, 4, 5], 1.0, s, "pred-probe");
        let (gu, gw) = predict_vectors_backward(&probe, &u, &w)?;
        push(
            "predict_vectors",
            check(
                &names(&["u", "weights"]),
                &[u, w],
                &[gu, gw],
                |p| Ok(dot(&predict_vectors(&p[0], &p[1])?, &probe)),
                cfg,
            )?,
        );

        let uhat = gaussian(&[2, 5, 3, 4], 0.5, s, "route-uhat");
        let probe = gaussian(&[2, 3, 4], 1.0, s, "route-probe");
        let (_, state) = route(&uhat, 3)?;
        let g = route_backward(&probe, &uhat, &state)?;
        push(
            "routing",
            check(&names(&["uhat"]), &[uhat], &[g], |p| Ok(dot(&route(&p[0], 3)?.0, &probe)), cfg)?,
        );
    }

    // Losses, away from the margin hinges.
    {
        let lengths = Tensor::new(&[2, 4], vec![0.3, 0.05, 0.6, 0.95, 0.2, 0.7, 0.15, 0.4])?;
        let labels = [2usize, 1];
        let loss_cfg = LossConfig::default();
        let (_, g) = margin_loss(&lengths, &labels, &loss_cfg)?;
        push(
            "margin_loss",
            check(&names(&["lengths"]), &[lengths], &[g], |p| Ok(margin_loss(&p[0], &labels, &loss_cfg)?.0), cfg)?,
        );
        let input = gaussian(&[2, 4, 4, 3], 1.0, s, "recon-x");
        let recon = gaussian(&[2, 4, 4, 3], 1.0, s, "recon-r");
        let (_, g) = reconstruction_loss(&input, &recon)?;
        push(
            "reconstruction_loss",
            check(&names(&["recon"]), &[recon], &[g], |p| Ok(reconstruction_loss(&input, &p[0])?.0), cfg)?,
        );
    }

    // Decoder alone: 3 classes, 8x8 images.
    {
        let dc = crate::decoder::DecoderConfig {
            num_classes: 3,
            class_dim: 4,
            hidden: vec![10, 12],
            image_height: 8,
            image_width: 8,
            channels: 1,
        };
        // Re-draw until no hidden pre-activation sits near the ReLU kink.
        let mut attempt = 0u64;
        let (dec, x, fwd) = loop {
            let seed = rng::derive_seed(s, "decoder", attempt);
            let dec = crate::decoder::Decoder::new(dc.clone(), InitScheme::Gaussian { std: 0.3 }, seed)?;
            let x = gaussian(&[2, 12], 1.0, seed, "dec-x");
            let fwd = dec.decode(&x)?;
            let clear = fwd.pre.iter().all(|t| t.data().iter().all(|v| v.abs() > 0.02));
            if clear || attempt >= 64 {
                break (dec, x, fwd);
            }
            attempt += 1;
        };
        let probe = gaussian(&[2, 8, 8, 1], 1.0, s, "dec-probe");
        let g = dec.backward(&fwd, &probe)?;
        let mut params: Vec<Tensor> = dec.params().into_iter().cloned().collect();
        params.push(x);
        let mut grads = g.params;
        grads.push(g.input);
        let mut block_names = dec.param_names();
        block_names.push("input".into());
        push(
            "decoder",
            check(
                &block_names,
                &params,
                &grads,
                |p| {
                    let (x, rest) = p.split_last().expect("input block");
                    let d = crate::decoder::Decoder::from_params(dc.clone(), rest.to_vec())?;
                    Ok(dot(&d.decode(x)?.image, &probe))
                },
                cfg,
            )?,
        );
    }

    if full {
        push("capsnet+decoder+final_loss", check_full_graph(cfg)?);
    }
    Ok(out)
}
