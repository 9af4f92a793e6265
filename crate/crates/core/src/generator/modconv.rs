//! Modulated convolution over a per-sample blend of a kernel bank.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, Init, Linear, LinearInit};

pub const DEMOD_EPS: f64 = 1e-8;

/// `K` kernels of shape `(Cout, Cin, k, k)` plus the style-driven selector.
#[derive(Clone, Debug)]
pub struct KernelBank {
    /// `(K, Cout, Cin, k, k)`, unit variance; scaled by `gain` at use.
    kernels: Tensor,
    selector: Option<Linear>,
    gain: f64,
}

impl KernelBank {
    pub fn new(b: &mut Builder, bank: usize, cin: usize, cout: usize, kernel: usize, w_dim: usize) -> Result<Self> {
        let kernels = b.param("kernels", &[bank, cout, cin, kernel, kernel], Init::Normal(1.0))?;
        let selector = if bank > 1 {
            Some(Linear::new(&mut b.pp("selector"), w_dim, bank, LinearInit::DEFAULT)?)
        } else {
            None
        };
        Ok(Self {
            kernels,
            selector,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
        })
    }

    /// Bank with explicit effective kernels `(K, Cout, Cin, k, k)`.
    pub fn from_parts(kernels: Tensor, selector: Option<Linear>) -> Self {
        Self {
            kernels,
            selector,
            gain: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dims()[3]
    }

    /// Softmax selection weights `(B, K)`.
    pub fn selection(&self, w: &Tensor) -> Result<Tensor> {
        let b = w.dim(0)?;
        match &self.selector {
            Some(sel) => nn::softmax_last(&sel.forward(w)?),
            None => Ok(Tensor::ones((b, 1), w.dtype(), w.device())?),
        }
    }

    /// Blended kernel per sample, `(B, Cout, Cin, k*k)`.
    pub fn blend(&self, w: &Tensor) -> Result<Tensor> {
        let dims = self.kernels.dims().to_vec();
        let (k_n, cout, cin, k) = (dims[0], dims[1], dims[2], dims[3]);
        let flat = (self.kernels.reshape((k_n, cout * cin * k * k))? * self.gain)?;
        let sel = self.selection(w)?;
        let b = sel.dim(0)?;
        Ok(sel.matmul(&flat)?.reshape((b, cout, cin, k * k))?)
    }
}

/// Style-modulated (and optionally demodulated) convolution.
#[derive(Clone, Debug)]
pub struct ModConv {
    bank: KernelBank,
    affine: Linear,
    bias: Option<Tensor>,
    demodulate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        bank: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        w_dim: usize,
        demodulate: bool,
        zero_init: bool,
    ) -> Result<Self> {
        let kb = if zero_init {
            let kernels = b.param("bank.kernels", &[bank, cout, cin, kernel, kernel], Init::Zeros)?;
            let selector = if bank > 1 {
                Some(Linear::new(&mut b.pp("bank.selector"), w_dim, bank, LinearInit::DEFAULT)?)
            } else {
                None
            };
            KernelBank {
                kernels,
                selector,
                gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            }
        } else {
            KernelBank::new(&mut b.pp("bank"), bank, cin, cout, kernel, w_dim)?
        };
        let affine = Linear::new(&mut b.pp("affine"), w_dim, cin, LinearInit::DEFAULT.bias(1.0))?;
        let bias = Some(b.param("bias", &[cout], Init::Zeros)?);
        Ok(Self {
            bank: kb,
            affine,
            bias,
            demodulate,
        })
    }

    pub fn from_parts(bank: KernelBank, affine: Linear, bias: Option<Tensor>, demodulate: bool) -> Self {
        Self {
            bank,
            affine,
            bias,
            demodulate,
        }
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn in_channels(&self) -> usize {
        self.bank.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.bank.out_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.bank.kernel_size()
    }

    /// Per-sample effective kernel `(B, Cout, Cin * k * k)` after modulation and
    /// demodulation.
    pub fn weights(&self, w: &Tensor) -> Result<Tensor> {
        let kernel = self.bank.blend(w)?;
        let (b, cout, cin, kk) = kernel.dims4()?;
        let style = self.affine.forward(w)?.reshape((b, 1, cin, 1))?;
        let mut kernel = kernel.broadcast_mul(&style)?;
        if self.demodulate {
            let norm = (kernel.sqr()?.sum_keepdim(3)?.sum_keepdim(2)? + DEMOD_EPS)?.sqrt()?;
            kernel = kernel.broadcast_div(&norm)?;
        }
        Ok(kernel.reshape((b, cout, cin * kk))?)
    }

    /// Applies per-sample weights to im2col columns `(B, Cin * k * k, H * W)`.
    pub fn apply_columns(&self, cols: &Tensor, w: &Tensor, hw: (usize, usize)) -> Result<Tensor> {
        let weights = self.weights(w)?;
        let (b, cout, _) = weights.dims3()?;
        let mut out = weights.matmul(cols)?.reshape((b, cout, hw.0, hw.1))?;
        if let Some(bias) = &self.bias {
            out = out.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?;
        }
        Ok(out)
    }

    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (_, c, h, wd) = f.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Config(format!(
                "modulated conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let cols = shift_columns(f, self.kernel_size())?;
        self.apply_columns(&cols, w, (h, wd))
    }
}

/// im2col for a stride-1, zero-padded `k×k` convolution: `(B, C * k * k, H * W)`
/// ordered as (channel, tap).
pub fn shift_columns(f: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    if k == 1 {
        return Ok(f.reshape((b, c, h * w))?);
    }
    let p = k / 2;
    let padded = f.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut taps = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))?)
}

/// Sum of squares over every axis but the last, used by statistics checks.
pub fn channel_std(x: &Tensor) -> Result<Vec<f32>> {
    let (b, c, h, w) = x.dims4()?;
    let per = x.transpose(0, 1)?.reshape((c, b * h * w))?;
    let mean = per.mean_keepdim(D::Minus1)?;
    let var = per.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
    Ok(var.sqrt()?.to_vec1::<f32>()?)
}
