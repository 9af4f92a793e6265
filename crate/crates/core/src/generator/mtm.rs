//! Modulated transformation module: a modulated 3×3 convolution whose
//! sampling grid is displaced by per-position offsets predicted from the
//! features and the style vector.

use candle_core::{DType, Tensor};

use super::modconv::{shift_columns, ModConv};
use crate::error::Result;
use crate::nn::{Builder, Init};

const KERNEL: usize = 3;

/// 1×1 convolution over `concat(f, broadcast w)` producing `(dx, dy)` per tap.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    /// `(2 * k * k, C + w_dim)`
    weight: Tensor,
    /// `(2 * k * k)`
    bias: Tensor,
    gain: f64,
}

impl OffsetPredictor {
    pub fn new(b: &mut Builder, channels: usize, w_dim: usize) -> Result<Self> {
        let taps = KERNEL * KERNEL;
        Ok(Self {
            weight: b.param("weight", &[2 * taps, channels + w_dim], Init::Zeros)?,
            bias: b.param("bias", &[2 * taps], Init::Zeros)?,
            gain: 1.0 / ((channels + w_dim) as f64).sqrt(),
        })
    }

    /// Predictor with explicit effective weight and bias.
    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight,
            bias,
            gain: 1.0,
        }
    }

    /// Offsets `(B, 2 * k * k, H * W)`; channel `2t` is dx and `2t + 1` is dy for tap `t`.
    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, c, h, wd) = f.dims4()?;
        let wb = w
            .reshape((b, w.dim(1)?, 1))?
            .broadcast_as((b, w.dim(1)?, h * wd))?;
        let x = Tensor::cat(&[&f.reshape((b, c, h * wd))?, &wb.contiguous()?], 1)?;
        let weight = (&self.weight * self.gain)?;
        Ok(weight
            .broadcast_matmul(&x)?
            .broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1))?)?)
    }
}

/// Bilinear sampling matrices `(B, k*k, HW, HW)` for the displaced 3×3 grid:
/// entry `[p, q]` is the weight of source pixel `q` for output position `p`.
pub fn sampling_matrices(offsets: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let b = offsets.dim(0)?;
    let taps = KERNEL * KERNEL;
    let hw = h * w;
    let dev = offsets.device();
    let off = offsets.reshape((b, taps, 2, hw))?;
    let dx = off.narrow(2, 0, 1)?.squeeze(2)?;
    let dy = off.narrow(2, 1, 1)?.squeeze(2)?;

    let mut base_x = Vec::with_capacity(taps * hw);
    let mut base_y = Vec::with_capacity(taps * hw);
    for t in 0..taps {
        let (ty, tx) = ((t / KERNEL) as f32 - 1.0, (t % KERNEL) as f32 - 1.0);
        for p in 0..hw {
            base_y.push((p / w) as f32 + ty);
            base_x.push((p % w) as f32 + tx);
        }
    }
    let base_x = Tensor::from_vec(base_x, (1, taps, hw), dev)?;
    let base_y = Tensor::from_vec(base_y, (1, taps, hw), dev)?;
    let sx = dx.broadcast_add(&base_x)?.unsqueeze(3)?;
    let sy = dy.broadcast_add(&base_y)?.unsqueeze(3)?;

    let qx = Tensor::arange(0u32, w as u32, dev)?.to_dtype(DType::F32)?.reshape((1, 1, 1, w))?;
    let qy = Tensor::arange(0u32, h as u32, dev)?.to_dtype(DType::F32)?.reshape((1, 1, 1, h))?;
    // tent kernel max(0, 1 - |s - q|) per axis
    let wx = (sx.broadcast_sub(&qx)?.abs()?.neg()? + 1.0)?.relu()?;
    let wy = (sy.broadcast_sub(&qy)?.abs()?.neg()? + 1.0)?.relu()?;
    let full = wy
        .unsqueeze(4)?
        .broadcast_mul(&wx.unsqueeze(3)?)?
        .reshape((b, taps, hw, hw))?;
    Ok(full)
}

/// im2col with displaced sampling: `(B, C * k * k, H * W)` ordered as (channel, tap).
pub fn deformed_columns(f: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let taps = KERNEL * KERNEL;
    let s = sampling_matrices(offsets, h, w)?;
    let src = f.reshape((b, 1, c, h * w))?;
    let cols = src.broadcast_matmul(&s.transpose(2, 3)?)?; // (B, taps, C, HW)
    Ok(cols.transpose(1, 2)?.reshape((b, c * taps, h * w))?)
}

#[derive(Clone, Debug)]
pub struct Mtm {
    conv: ModConv,
    offsets: OffsetPredictor,
    max_offset_res: usize,
}

impl Mtm {
    pub fn new(
        b: &mut Builder,
        bank: usize,
        cin: usize,
        cout: usize,
        w_dim: usize,
        max_offset_res: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: ModConv::new(&mut b.pp("conv"), bank, cin, cout, KERNEL, w_dim, true, false)?,
            offsets: OffsetPredictor::new(&mut b.pp("offsets"), cin, w_dim)?,
            max_offset_res,
        })
    }

    pub fn from_parts(conv: ModConv, offsets: OffsetPredictor, max_offset_res: usize) -> Self {
        Self {
            conv,
            offsets,
            max_offset_res,
        }
    }

    pub fn conv(&self) -> &ModConv {
        &self.conv
    }

    pub fn offsets_active(&self, resolution: usize) -> bool {
        resolution <= self.max_offset_res
    }

    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (_, c, h, wd) = f.dims4()?;
        if c != self.conv.in_channels() || !self.offsets_active(h) {
            return self.conv.forward(f, w);
        }
        let off = self.offsets.forward(f, w)?;
        let cols = deformed_columns(f, &off)?;
        self.conv.apply_columns(&cols, w, (h, wd))
    }
}

/// Plain (undisplaced) columns; exposed for equivalence checks.
pub fn plain_columns(f: &Tensor) -> Result<Tensor> {
    shift_columns(f, KERNEL)
}
