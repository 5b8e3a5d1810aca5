//! 2-D convolution over NHWC tensors via im2col + GEMM.

use rayon::prelude::*;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Valid convolution.
    #[default]
    None,
    /// Symmetric zero padding of the given width on every spatial edge.
    Zero(usize),
}

impl Padding {
    fn width(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::Zero(p) => p,
        }
    }
}

/// Output length of one spatial axis, or `None` if the kernel does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    let padded = input + 2 * padding.width();
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(
    op: &'static str,
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Geometry> {
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be positive")));
    }
    input.expect_rank(op, 4)?;
    filters.expect_rank(op, 4)?;
    let s = input.shape();
    let f = filters.shape();
    if f[2] != s[3] {
        return Err(Error::shape(
            op,
            format!("filters {f:?} expect {} input channels, input is {s:?}", f[2]),
        ));
    }
    if let Some(b) = bias {
        b.expect_shape(op, &[f[3]])?;
    }
    let dims = (
        conv_output_dim(s[1], f[0], stride, padding),
        conv_output_dim(s[2], f[1], stride, padding),
    );
    let (Some(oh), Some(ow)) = dims else {
        return Err(Error::shape(
            op,
            format!("kernel {}x{} does not fit input {s:?} with {padding:?}", f[0], f[1]),
        ));
    };
    Ok(Geometry {
        n: s[0],
        h: s[1],
        w: s[2],
        cin: s[3],
        kh: f[0],
        kw: f[1],
        cout: f[3],
        oh,
        ow,
        stride,
        pad: padding.width(),
    })
}

/// Visits every (output position, patch column, input offset) triple that
/// lands inside the unpadded image.
#[inline]
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * patch;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let col = row + (ky * g.kw + kx) * g.cin;
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    f(col, src, g.cin);
                }
            }
        }
    }
}

fn im2col(g: &Geometry, image: &[f64], col: &mut [f64]) {
    col.fill(0.0);
    for_each_tap(g, |dst, src, len| {
        col[dst..dst + len].copy_from_slice(&image[src..src + len]);
    });
}

fn col2im(g: &Geometry, col: &[f64], image: &mut [f64]) {
    for_each_tap(g, |dst, src, len| {
        for (acc, v) in image[src..src + len].iter_mut().zip(&col[dst..dst + len]) {
            *acc += v;
        }
    });
}

/// `input [N,H,W,Cin] * filters [K,K,Cin,Cout] + bias [Cout] -> [N,H',W',Cout]`.
pub fn conv2d_forward(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = geometry("conv2d_forward", input, filters, Some(bias), stride, padding)?;
    let in_stride = g.h * g.w * g.cin;
    let out_stride = g.positions() * g.cout;
    let mut out = vec![0.0; g.n * out_stride];
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(n, dst)| {
            let mut col = vec![0.0; g.positions() * g.patch()];
            im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut col);
            for row in dst.chunks_exact_mut(g.cout) {
                row.copy_from_slice(bias.data());
            }
            gemm(
                g.positions(),
                g.patch(),
                g.cout,
                &col,
                false,
                filters.data(),
                false,
                1.0,
                dst,
            );
        });
    Tensor::new(&[g.n, g.oh, g.ow, g.cout], out)
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads> {
    let g = geometry("conv2d_backward", input, filters, None, stride, padding)?;
    grad_out.expect_shape("conv2d_backward", &[g.n, g.oh, g.ow, g.cout])?;
    let in_stride = g.h * g.w * g.cin;
    let out_stride = g.positions() * g.cout;
    let col_len = g.positions() * g.patch();

    let mut grad_input = vec![0.0; input.len()];
    grad_input
        .par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(n, dst)| {
            let mut col = vec![0.0; col_len];
            gemm(
                g.positions(),
                g.cout,
                g.patch(),
                &grad_out.data()[n * out_stride..(n + 1) * out_stride],
                false,
                filters.data(),
                true,
                0.0,
                &mut col,
            );
            col2im(&g, &col, dst);
        });

    // Filter gradients accumulate sample by sample so the summation order is
    // independent of the thread pool.
    let mut grad_filters = vec![0.0; filters.len()];
    let mut col = vec![0.0; col_len];
    for n in 0..g.n {
        im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut col);
        gemm(
            g.patch(),
            g.positions(),
            g.cout,
            &col,
            true,
            &grad_out.data()[n * out_stride..(n + 1) * out_stride],
            false,
            1.0,
            &mut grad_filters,
        );
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        filters: Tensor::new(filters.shape(), grad_filters)?,
        bias: super::add_bias_backward(grad_out),
    })
}
