//! Valid-padding 2D convolution and ReLU, with exact reverse-mode
//! gradients, plus the small feature-generation net (FGN) built from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// One conv layer: `weight` is `[c_out, c_in, k, k]`, `bias` `[c_out]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Output spatial size for valid padding, or an error naming the dims when
/// the input is smaller than the kernel.
fn valid_out(h: usize, w: usize, k: usize, stride: usize) -> Result<(usize, usize)> {
    if h < k || w < k {
        return Err(Error::shape(format!(
            "conv input {h}x{w} smaller than {k}x{k} kernel"
        )));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

/// `input` is `[c_in, h, w]`; returns `[c_out, ho, wo]` (valid padding).
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "conv input must be 3D, got {:?}",
            input.shape()
        )));
    };
    if c_in != layer.c_in() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c_in}",
            layer.c_in()
        )));
    }
    let k = layer.kernel();
    let s = layer.stride;
    let (ho, wo) = valid_out(h, w, k, s)?;
    let c_out = layer.c_out();
    let mut out = Tensor::zeros(&[c_out, ho, wo]);

    let wdat = layer.weight.data();
    let idat = input.data();
    let odat = out.data_mut();
    for co in 0..c_out {
        let obase = co * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = layer.bias[co];
                for ci in 0..c_in {
                    let wbase = ((co * c_in) + ci) * k * k;
                    let ibase = ci * h * w;
                    for ky in 0..k {
                        let irow = ibase + (oy * s + ky) * w + ox * s;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            acc += idat[irow + kx] * wdat[wrow + kx];
                        }
                    }
                }
                odat[obase + oy * wo + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of a valid-padding conv; `grad_out` is `[c_out, ho, wo]`.
/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::shape("conv input must be 3D"));
    };
    let k = layer.kernel();
    let s = layer.stride;
    let (ho, wo) = valid_out(h, w, k, s)?;
    let c_out = layer.c_out();
    if grad_out.shape() != [c_out, ho, wo] {
        return Err(Error::shape(format!(
            "conv grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, ho, wo]
        )));
    }

    let mut grad_in = Tensor::zeros(&[c_in, h, w]);
    let mut grad_w = Tensor::zeros(layer.weight.shape());
    let mut grad_b = vec![0.0; c_out];

    let idat = input.data();
    let wdat = layer.weight.data();
    let gdat = grad_out.data();
    let gi = grad_in.data_mut();
    let gw = grad_w.data_mut();
    for co in 0..c_out {
        let obase = co * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gdat[obase + oy * wo + ox];
                if g == 0.0 {
                    continue;
                }
                grad_b[co] += g;
                for ci in 0..c_in {
                    let wbase = ((co * c_in) + ci) * k * k;
                    let ibase = ci * h * w;
                    for ky in 0..k {
                        let irow = ibase + (oy * s + ky) * w + ox * s;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            gw[wrow + kx] += g * idat[irow + kx];
                            gi[irow + kx] += g * wdat[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// `pre` is the pre-activation input to the ReLU.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data().iter()) {
        if p <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Shape + depth of the feature-generation net: `blocks` stacks of
/// `layers_per_block` 3x3 conv+ReLU layers. The first layer of the first
/// block uses `first_stride`; the first layer of every later block uses
/// stride 2; all other strides are 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgnConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub channels: usize,
    pub first_stride: usize,
}

impl Default for FgnConfig {
    fn default() -> Self {
        FgnConfig {
            blocks: 1,
            layers_per_block: 4,
            channels: 64,
            first_stride: 1,
        }
    }
}

impl FgnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 || self.channels == 0 {
            return Err(Error::config("fgn blocks/layers/channels must be >= 1"));
        }
        if self.first_stride == 0 {
            return Err(Error::config("fgn first_stride must be >= 1"));
        }
        Ok(())
    }

    /// Product of all strides (input pixels per feature pixel).
    pub fn total_stride(&self) -> usize {
        let later = if self.blocks > 1 {
            2usize.pow(self.blocks as u32 - 1)
        } else {
            1
        };
        self.first_stride * later
    }
}

/// The feature-generation net: a plain stack of conv+ReLU layers.
#[derive(Debug, Clone)]
pub struct Fgn {
    pub layers: Vec<ConvLayer>,
}

pub const FGN_KERNEL: usize = 3;

/// Damping applied to every He-initialized weight (feature net and pillar
/// encoder alike). Score logits are correlation sums of products of two
/// branch activations, so undamped He init puts them near +-30 and training
/// spends its opening phase shrinking feature scale wholesale -- which
/// overshoots into all-dead ReLUs. Each branch passes four weight layers,
/// so the damping compounds to roughly gain^8 on the logits; 0.6 lands
/// them at O(1) from the first step.
pub const INIT_GAIN: f64 = 0.6;

impl Fgn {
    /// He-style init damped by [`INIT_GAIN`]: weights
    /// ~ N(0, gain^2 * 2 / fan_in), biases zero.
    pub fn init(in_channels: usize, cfg: &FgnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for b in 0..cfg.blocks {
            for l in 0..cfg.layers_per_block {
                let stride = match (b, l) {
                    (0, 0) => cfg.first_stride,
                    (_, 0) => 2,
                    _ => 1,
                };
                let c_out = cfg.channels;
                let fan_in = (c_in * FGN_KERNEL * FGN_KERNEL) as f64;
                let std = INIT_GAIN * (2.0 / fan_in).sqrt();
                let n = c_out * c_in * FGN_KERNEL * FGN_KERNEL;
                let data: Vec<f64> = (0..n).map(|_| gauss(rng) * std).collect();
                layers.push(ConvLayer {
                    weight: Tensor::from_shape_vec(&[c_out, c_in, FGN_KERNEL, FGN_KERNEL], data)?,
                    bias: vec![0.0; c_out],
                    stride,
                });
                c_in = c_out;
            }
        }
        Ok(Fgn { layers })
    }

    /// Smallest square input that still yields a 1x1 output.
    pub fn receptive_field(&self) -> usize {
        // Valid 3x3 layers each shave (k-1)*stride_so_far pixels.
        let mut field = 1usize;
        for layer in self.layers.iter().rev() {
            field = (field - 1) * layer.stride + FGN_KERNEL;
        }
        field
    }

    /// Spatial output dims for an input of the given dims, or an error if
    /// any layer would run out of pixels.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for (i, layer) in self.layers.iter().enumerate() {
            if h < FGN_KERNEL || w < FGN_KERNEL {
                return Err(Error::shape(format!(
                    "fgn layer {i}: input {h}x{w} smaller than {FGN_KERNEL}x{FGN_KERNEL} \
                     (receptive field {})",
                    self.receptive_field()
                )));
            }
            h = (h - FGN_KERNEL) / layer.stride + 1;
            w = (w - FGN_KERNEL) / layer.stride + 1;
        }
        Ok((h, w))
    }

    /// Product of the layer strides: score-map pixel spacing measured in
    /// input pixels.
    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }
}

/// Box–Muller standard normal.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>();
        if u > 1e-12 {
            let v: f64 = rng.gen::<f64>();
            return (-2.0 * u.ln()).sqrt() * (crate::geom::TAU * v).cos();
        }
    }
}

/// Per-layer state kept by the FGN forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct FgnCache {
    /// Input to each conv layer (index 0 = net input).
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each conv layer.
    pub pres: Vec<Tensor>,
}

/// Runs the FGN; returns the final features and the cache needed by
/// [`fgn_backward`]. Fails with the offending dims when the input is too
/// small for the receptive field.
pub fn fgn_forward(input: &Tensor, fgn: &Fgn) -> Result<(Tensor, FgnCache)> {
    let mut cache = FgnCache {
        inputs: Vec::with_capacity(fgn.layers.len()),
        pres: Vec::with_capacity(fgn.layers.len()),
    };
    let mut x = input.clone();
    for (i, layer) in fgn.layers.iter().enumerate() {
        let pre = conv2d_forward(&x, layer).map_err(|e| {
            Error::shape(format!(
                "fgn layer {i}: {e} (input {:?}, receptive field {})",
                input.shape(),
                fgn.receptive_field()
            ))
        })?;
        let act = relu_forward(&pre);
        cache.inputs.push(x);
        cache.pres.push(pre);
        x = act;
    }
    Ok((x, cache))
}

/// Reverse pass through the FGN. Returns the gradient w.r.t. the net input
/// and per-layer `(grad_weight, grad_bias)` in layer order.
pub fn fgn_backward(
    fgn: &Fgn,
    cache: &FgnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<(Tensor, Vec<f64>)>)> {
    let mut grads = vec![None; fgn.layers.len()];
    let mut g = grad_out.clone();
    for i in (0..fgn.layers.len()).rev() {
        let g_pre = relu_backward(&cache.pres[i], &g);
        let (g_in, g_w, g_b) = conv2d_backward(&cache.inputs[i], &fgn.layers[i], &g_pre)?;
        grads[i] = Some((g_w, g_b));
        g = g_in;
    }
    Ok((g, grads.into_iter().map(|g| g.unwrap()).collect()))
}
