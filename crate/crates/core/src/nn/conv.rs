use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// 2-D cross-correlation layer with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[out_ch, in_ch, k, k]`
    pub weights: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out_ch, _, k, k2] = weights.shape()[..] else {
            return Err(Error::shape("ConvLayer weights", &[0, 0, 0, 0], weights.shape()));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::Config(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::shape("ConvLayer bias", &[out_ch], bias.shape()));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let fan_out = (out_ch * kernel * kernel) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let weights = Tensor::from_fn(vec![out_ch, in_ch, kernel, kernel], |_| {
            rng.random_range(-limit..limit)
        });
        ConvLayer::new(weights, Tensor::zeros(vec![out_ch]), stride, padding)
    }

    /// All-zero weights and bias.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        ConvLayer::new(
            Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
            Tensor::zeros(vec![out_ch]),
            stride,
            padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        Some((
            conv_output_size(height, k, self.stride, self.padding)?,
            conv_output_size(width, k, self.stride, self.padding)?,
        ))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv2d input channels",
                &[self.in_channels(), h, w],
                input.shape(),
            ));
        }
        let (ho, wo) = self.output_dims(h, w).ok_or_else(|| {
            Error::shape("conv2d input too small for kernel", &[c, self.kernel(), self.kernel()], input.shape())
        })?;
        Ok((c, h, w, ho, wo))
    }
}

/// Unrolls receptive fields into `[C*k*k, Ho*Wo]`.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters `[C*k*k, Ho*Wo]` column gradients back onto the input grid.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                let src = &cols[row..row + n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view dimensions match buffer")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view dimensions match buffer")
}

/// Cross-correlation of a `[C, H, W]` input with `layer`.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (c, h, w, ho, wo) = layer.check_input(input)?;
    let k = layer.kernel();
    let o = layer.out_channels();
    let n = ho * wo;
    let cols = im2col(input.data(), c, h, w, k, layer.stride, layer.padding, ho, wo);
    let mut out = Vec::with_capacity(o * n);
    for &b in layer.bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    general_mat_mul(
        1.0,
        &view(layer.weights.data(), o, c * k * k),
        &view(&cols, c * k * k, n),
        1.0,
        &mut view_mut(&mut out, o, n),
    );
    Tensor::from_vec(vec![o, ho, wo], out)
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward(input: &Tensor, layer: &ConvLayer, upstream: &Tensor) -> Result<ConvGrads> {
    let (weights, bias, grad_input) = backward_impl(input, layer, upstream, true)?;
    Ok(ConvGrads {
        input: grad_input.expect("requested input gradient"),
        weights,
        bias,
    })
}

/// Parameter gradients only; skips the input gradient.
pub(crate) fn conv2d_backward_params(input: &Tensor, layer: &ConvLayer, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (weights, bias, _) = backward_impl(input, layer, upstream, false)?;
    Ok((weights, bias))
}

fn backward_impl(
    input: &Tensor,
    layer: &ConvLayer,
    upstream: &Tensor,
    want_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (c, h, w, ho, wo) = layer.check_input(input)?;
    let k = layer.kernel();
    let o = layer.out_channels();
    let n = ho * wo;
    if upstream.shape() != [o, ho, wo] {
        return Err(Error::shape("conv2d_backward upstream", &[o, ho, wo], upstream.shape()));
    }
    let g = view(upstream.data(), o, n);
    let ckk = c * k * k;

    let grad_bias: Vec<f64> = (0..o).map(|oc| upstream.data()[oc * n..(oc + 1) * n].iter().sum()).collect();

    let cols = im2col(input.data(), c, h, w, k, layer.stride, layer.padding, ho, wo);
    let mut grad_w = vec![0.0; o * ckk];
    general_mat_mul(1.0, &g, &view(&cols, ckk, n).t(), 0.0, &mut view_mut(&mut grad_w, o, ckk));

    let grad_input = if want_input {
        let mut grad_cols = vec![0.0; ckk * n];
        general_mat_mul(
            1.0,
            &view(layer.weights.data(), o, ckk).t(),
            &g,
            0.0,
            &mut view_mut(&mut grad_cols, ckk, n),
        );
        let gi = col2im(&grad_cols, c, h, w, k, layer.stride, layer.padding, ho, wo);
        Some(Tensor::from_vec(vec![c, h, w], gi)?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(layer.weights.shape().to_vec(), grad_w)?,
        Tensor::from_vec(vec![o], grad_bias)?,
        grad_input,
    ))
}
