use candle_core::{Tensor, Var, D};

use super::params::ParamBuilder;
use crate::Result;

pub(crate) fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// Concatenates a per-sample conditioning vector `(B, n)` as constant
/// feature planes onto `x` `(B, C, H, W)`.
pub(crate) fn concat_planes(x: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let n = cond.dim(1)?;
    let planes = cond
        .reshape((b, n, 1, 1))?
        .broadcast_as((b, n, h, w))?
        .contiguous()?;
    Ok(Tensor::cat(&[x, &planes], 1)?)
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        pb.sub(name, |pb| {
            Ok(Self {
                weight: pb.normal("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?,
                bias: pb.constant("bias", &[c_out], 0.0)?,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = unfold_conv(x, self.weight.as_tensor(), self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Convolution as patch extraction plus one matmul. On CPU its backward pass
/// is several times cheaper than the direct kernel.
fn unfold_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, _, k, _) = w.dims4()?;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    // Extra trailing padding lets every tap take a window of ho * stride rows.
    let extra = stride - 1;
    let xp = x
        .pad_with_zeros(2, pad, pad + extra)?
        .pad_with_zeros(3, pad, pad + extra)?;
    let mut taps = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let t = xp.narrow(2, i, ho * stride)?.narrow(3, j, wo * stride)?;
            let t = if stride > 1 {
                t.reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?
            } else {
                t
            };
            taps.push(t);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k * k, ho * wo))?;
    let wm = w.reshape((co, c * k * k))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, co, ho, wo))?)
}

/// Fractionally strided convolution. With kernel 4, stride 2, padding 1 the
/// spatial size doubles exactly.
#[derive(Clone, Debug)]
pub(crate) struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        pb.sub(name, |pb| {
            // Each output pixel sees roughly c_in * (k / stride)^2 inputs.
            let fan_in = c_in * (kernel / stride).max(1).pow(2);
            Ok(Self {
                weight: pb.normal("weight", &[c_in, c_out, kernel, kernel], fan_in)?,
                bias: pb.constant("bias", &[c_out], 0.0)?,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalisation with a learned affine.
#[derive(Clone, Debug)]
pub(crate) struct InstanceNorm {
    gamma: Var,
    beta: Var,
}

impl InstanceNorm {
    const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.sub(name, |pb| {
            Ok(Self {
                gamma: pb.constant("gamma", &[channels], 1.0)?,
                beta: pb.constant("beta", &[channels], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1))?;
        let bta = self.beta.as_tensor().reshape((1, c, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&bta)?.reshape((b, c, h, w))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        pb.sub(name, |pb| {
            Ok(Self {
                weight: pb.normal("weight", &[d_out, d_in], d_in)?,
                bias: pb.constant("bias", &[d_out], 0.0)?,
            })
        })
    }

    /// Same as [`Linear::new`] with the weights scaled down and a constant
    /// bias, for heads whose outputs should start near a fixed value.
    pub fn new_small(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        bias: f64,
    ) -> Result<Self> {
        let l = Self::new(pb, name, d_in, d_out)?;
        l.weight.set(&(l.weight.as_tensor() * scale)?)?;
        l.bias.set(&(l.bias.as_tensor().ones_like()? * bias)?)?;
        Ok(l)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// conv-norm-relu-conv-norm with an identity skip.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.sub(name, |pb| {
            Ok(Self {
                conv1: Conv2d::new(pb, "conv1", channels, channels, 3, 1, 1)?,
                norm1: InstanceNorm::new(pb, "norm1", channels)?,
                conv2: Conv2d::new(pb, "conv2", channels, channels, 3, 1, 1)?,
                norm2: InstanceNorm::new(pb, "norm2", channels)?,
            })
        })
    }

    #[cfg(test)]
    pub fn vars(&self) -> Vec<&Var> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.norm1.gamma,
            &self.norm1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.norm2.gamma,
            &self.norm2.beta,
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}
