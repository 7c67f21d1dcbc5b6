//! Equalized-learning-rate building blocks. Weights are stored at unit
//! variance and scaled at runtime by `1/sqrt(fan_in)`.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Leaky ReLU (slope 0.2) with gain `sqrt(2)`.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    let leak = (x * 0.2)?;
    Ok((x.maximum(&leak)? * SQRT_2)?)
}

/// Pixel normalization over the last dimension.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + 1e-8)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct EqualLinear {
    name: String,
    in_dim: usize,
    out_dim: usize,
    lr_mul: f64,
    activate: bool,
}

impl EqualLinear {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: f32,
        lr_mul: f64,
        activate: bool,
    ) -> Result<Self> {
        store.add_param(
            format!("{name}.weight"),
            init.normal((out_dim, in_dim), (1.0 / lr_mul) as f32)?,
        )?;
        store.add_param(
            format!("{name}.bias"),
            init.constant(out_dim, bias_init / lr_mul as f32)?,
        )?;
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            lr_mul,
            activate,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    /// Weight as used in the forward pass (`out×in`, scale applied).
    pub fn effective_weight(&self, store: &ParamStore, track: bool) -> Result<Tensor> {
        let scale = self.lr_mul / (self.in_dim as f64).sqrt();
        Ok((store.get(&self.weight_name(), track)? * scale)?)
    }

    pub fn forward(&self, store: &ParamStore, track: bool, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight(store, track)?;
        let b = (store.get(&format!("{}.bias", self.name), track)? * self.lr_mul)?;
        let y = x.matmul(&w.t()?)?.broadcast_add(&b)?;
        if self.activate {
            lrelu(&y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EqualConv {
    name: String,
    in_ch: usize,
    kernel: usize,
    stride: usize,
    bias: bool,
    activate: bool,
}

impl EqualConv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        activate: bool,
    ) -> Result<Self> {
        store.add_param(
            format!("{name}.weight"),
            init.normal((out_ch, in_ch, kernel, kernel), 1.0)?,
        )?;
        if bias {
            store.add_param(format!("{name}.bias"), init.constant(out_ch, 0.0)?)?;
        }
        Ok(Self {
            name: name.to_string(),
            in_ch,
            kernel,
            stride,
            bias,
            activate,
        })
    }

    pub fn forward(&self, store: &ParamStore, track: bool, x: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let w = (store.get(&format!("{}.weight", self.name), track)? * scale)?;
        let mut y = if self.kernel > 1 && self.kernel == self.stride {
            patch_conv(x, &w)?
        } else if self.stride == 1 && self.kernel % 2 == 1 {
            unfold_conv(x, &w)?
        } else {
            x.conv2d(&w, (self.kernel - 1) / 2, self.stride, 1, 1)?
        };
        if self.bias {
            let b = store.get(&format!("{}.bias", self.name), track)?;
            y = y.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
        }
        if self.activate {
            lrelu(&y)
        } else {
            Ok(y)
        }
    }
}

/// Convolution whose kernel tiles the input without overlap, as a matmul over
/// extracted patches. Same result as `conv2d` with stride = kernel and no
/// padding, but its backward pass avoids transposed convolutions.
pub fn patch_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let (ho, wo) = (h / k, wd / k);
    let x = if h % k != 0 || wd % k != 0 {
        x.narrow(2, 0, ho * k)?.narrow(3, 0, wo * k)?
    } else {
        x.clone()
    };
    let patches = x
        .reshape((b, c, ho, k, wo, k))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b * ho * wo, c * k * k))?;
    let y = patches.matmul(&w.reshape((o, c * k * k))?.t()?)?;
    Ok(y.reshape((b, ho, wo, o))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Stride-1 "same" convolution as a matmul over the `k²` shifted copies of
/// the zero-padded input; faster to differentiate than `conv2d` on CPU.
pub fn unfold_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    if k == 1 {
        let y = w.reshape((o, c))?.broadcast_matmul(&x.reshape((b, c, h * wd))?)?;
        return Ok(y.reshape((b, o, h, wd))?);
    }
    let p = k / 2;
    let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut shifts = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            shifts.push(padded.narrow(2, i, h)?.narrow(3, j, wd)?);
        }
    }
    let cols = Tensor::stack(&shifts, 2)?.reshape((b, c * k * k, h * wd))?;
    let y = w.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, o, h, wd))?)
}

/// Style-modulated convolution. Modulation and demodulation are applied to
/// activations rather than weights, which is equivalent for a linear
/// convolution and lets a whole batch share one kernel.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    name: String,
    in_ch: usize,
    kernel: usize,
    demodulate: bool,
    upsample: bool,
    pub affine: EqualLinear,
}

impl ModulatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        style_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        upsample: bool,
    ) -> Result<Self> {
        let affine = EqualLinear::init(
            store,
            init,
            &format!("{name}.affine"),
            style_dim,
            in_ch,
            1.0,
            1.0,
            false,
        )?;
        store.add_param(
            format!("{name}.weight"),
            init.normal((out_ch, in_ch, kernel, kernel), 1.0)?,
        )?;
        Ok(Self {
            name: name.to_string(),
            in_ch,
            kernel,
            demodulate,
            upsample,
            affine,
        })
    }

    /// `x`: `B×C×H×W`, `w`: `B×d`.
    pub fn forward(&self, store: &ParamStore, track: bool, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let style = self.affine.forward(store, track, w)?;
        let scale = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let weight = (store.get(&format!("{}.weight", self.name), track)? * scale)?;
        let x = if self.upsample {
            let (_, _, h, wd) = x.dims4()?;
            x.upsample_nearest2d(h * 2, wd * 2)?
        } else {
            x.clone()
        };
        let x = x.broadcast_mul(&style.unsqueeze(2)?.unsqueeze(3)?)?;
        let y = unfold_conv(&x, &weight)?;
        if !self.demodulate {
            return Ok(y);
        }
        // sum_{i,k} (W_oik s_i)^2 = (s^2) · (sum_k W_oik^2)^T
        let wsq = weight.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
        let denom = style.sqr()?.matmul(&wsq.t()?)?;
        let demod = (denom + 1e-8)?.sqrt()?.recip()?;
        Ok(y.broadcast_mul(&demod.unsqueeze(2)?.unsqueeze(3)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn demodulated_output_has_unit_scale_per_channel() {
        // With a 1x1 kernel and unit-variance i.i.d. input, demodulation
        // makes each output channel unit variance in expectation.
        let mut init = Init::new(1);
        let mut store = ParamStore::new();
        let conv = ModulatedConv::init(&mut store, &mut init, "c", 8, 16, 4, 1, true, false).unwrap();
        let x = init.normal((4, 16, 32, 32), 1.0).unwrap();
        let w = init.normal((4, 8), 1.0).unwrap();
        let y = conv.forward(&store, false, &x, &w).unwrap();
        let var = y.sqr().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn lrelu_matches_definition() {
        let x = Tensor::new(&[-2f32, -0.5, 0.0, 1.5], &Device::Cpu).unwrap();
        let y = lrelu(&x).unwrap().to_vec1::<f32>().unwrap();
        let s = SQRT_2 as f32;
        let want = [-0.4 * s, -0.1 * s, 0.0, 1.5 * s];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_conv_matches_strided_conv2d() {
        let mut init = Init::new(4);
        for (k, h) in [(2, 8), (4, 16), (2, 9)] {
            let x = init.normal((2, 3, h, h), 1.0).unwrap();
            let w = init.normal((5, 3, k, k), 1.0).unwrap();
            let want = x.conv2d(&w, 0, k, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let got = patch_conv(&x, &w).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(want.len(), got.len());
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
