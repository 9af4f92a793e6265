//! Parameter storage and the small set of layers shared by every network.
//!
//! Parameters are stored unscaled (unit-variance at init) and multiplied by a
//! runtime gain of `lr_mul / sqrt(fan_in)`, so one learning rate suits every
//! layer regardless of width.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f32),
    Normal(f32),
}

/// Seeded RNG derived from a base seed and a label.
pub fn labeled_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let x: f32 = StandardNormal.sample(rng);
            x * std
        })
        .collect()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n, std), shape, &device())?)
}

fn init_values(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => normal_vec(rng, n, std),
    }
}

/// Named parameter store. Initial values depend only on the store seed and the
/// parameter name, so a network grown stage by stage is initialized exactly
/// like one built at the final stage directly.
#[derive(Clone)]
pub struct ParamStore {
    seed: u64,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("params", &self.vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter().filter(|(n, _)| !self.frozen.contains(*n))
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter().filter(|(n, _)| self.frozen.contains(*n))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = labeled_rng(self.seed, name);
        let data = init_values(init, n, &mut rng);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    /// Inserts or overwrites a parameter with the given value.
    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        match self.vars.get(name) {
            Some(v) if v.dims() == value.dims() => v.set(value)?,
            _ => {
                self.vars
                    .insert(name.to_string(), Var::from_tensor(&value.copy()?)?);
            }
        }
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (n, v) in &self.vars {
            vars.insert(n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            seed: self.seed,
            vars,
            frozen: self.frozen.clone(),
        })
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (n, t) in snapshot {
            if let Some(v) = self.vars.get(n) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    pub fn builder(&mut self) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
            detach: false,
        }
    }

    /// Builder whose tensors are cut from the autograd graph.
    pub fn detached_builder(&mut self) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
            detach: true,
        }
    }
}

/// Hierarchical view into a [`ParamStore`] used while constructing modules.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    detach: bool,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            detach: self.detach,
        }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let var = self.store.get_or_init(&full, shape, init)?;
        if self.detach {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    /// Like [`Builder::param`] but marks the parameter frozen and always detaches.
    pub fn frozen_param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let var = self.store.get_or_init(&full, shape, init)?;
        self.store.freeze(&full);
        Ok(var.as_tensor().detach())
    }
}

/// Fully connected layer with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    weight_gain: f64,
    bias_gain: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearInit {
    pub weight: Init,
    pub bias: Option<f32>,
    pub lr_mul: f64,
}

impl LinearInit {
    pub const DEFAULT: LinearInit = LinearInit {
        weight: Init::Normal(1.0),
        bias: Some(0.0),
        lr_mul: 1.0,
    };
    pub const ZERO: LinearInit = LinearInit {
        weight: Init::Zeros,
        bias: Some(0.0),
        lr_mul: 1.0,
    };
    pub fn bias(mut self, b: f32) -> Self {
        self.bias = Some(b);
        self
    }
    pub fn no_bias(mut self) -> Self {
        self.bias = None;
        self
    }
    pub fn lr_mul(mut self, m: f64) -> Self {
        self.lr_mul = m;
        self
    }
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, init: LinearInit) -> Result<Self> {
        let winit = match init.weight {
            Init::Normal(s) => Init::Normal(s / init.lr_mul as f32),
            other => other,
        };
        let weight = b.param("weight", &[out_dim, in_dim], winit)?;
        let bias = match init.bias {
            Some(v) => Some(b.param("bias", &[out_dim], Init::Const(v / init.lr_mul as f32))?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            weight_gain: init.lr_mul / (in_dim as f64).sqrt(),
            bias_gain: init.lr_mul,
        })
    }

    /// Layer with the given effective weight `(out, in)` and bias, unit gains.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight,
            bias,
            weight_gain: 1.0,
            bias_gain: 1.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok((&self.weight * self.weight_gain)?)
    }

    pub fn effective_bias(&self) -> Result<Option<Tensor>> {
        Ok(match &self.bias {
            Some(b) => Some((b * self.bias_gain)?),
            None => None,
        })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight()?.t()?;
        let y = x.broadcast_matmul(&w)?;
        Ok(match self.effective_bias()? {
            Some(b) => y.broadcast_add(&b)?,
            None => y,
        })
    }

    /// Vector-Jacobian product with respect to the input: `g · W`.
    pub fn input_vjp(&self, g: &Tensor) -> Result<Tensor> {
        Ok(g.broadcast_matmul(&self.effective_weight()?)?)
    }
}

/// Plain 2-D convolution with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    gain: f64,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Init,
        bias: bool,
    ) -> Result<Self> {
        let w = b.param("weight", &[cout, cin, kernel, kernel], weight)?;
        let bias = if bias {
            Some(b.param("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight: w,
            bias,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            stride,
            padding,
        })
    }

    /// Frozen, seeded convolution without bias (feature extractors).
    pub fn frozen(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: randn(rng, &[cout, cin, kernel, kernel], 1.0)?,
            bias: None,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            stride,
            padding,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            gain: 1.0,
            stride,
            padding,
        }
    }

    fn kernel(&self) -> Result<Tensor> {
        Ok((&self.weight * self.gain)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.kernel()?, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    /// Vector-Jacobian product with respect to the input of [`Conv2d::forward`],
    /// built from differentiable ops so it can itself be differentiated.
    pub fn input_vjp(&self, g: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let (gh, _) = (g.dim(2)?, g.dim(3)?);
        let out = (gh - 1) * self.stride + k - 2 * self.padding;
        let out_padding = input_hw.0 - out;
        Ok(g.conv_transpose2d(&self.kernel()?, self.padding, out_padding, self.stride, 1)?)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Leaky ReLU scaled to preserve second moments.
pub fn lrelu_gain(x: &Tensor) -> Result<Tensor> {
    Ok((lrelu(x)? * LRELU_GAIN)?)
}

/// Derivative mask of [`lrelu`] evaluated at `pre`; a constant for autograd.
/// At exactly zero both branches of the underlying `maximum` tie and autograd
/// splits the gradient evenly, giving slope `(1 + 0.2) / 2`; the mask matches.
pub fn lrelu_mask(pre: &Tensor) -> Result<Tensor> {
    let pos = pre.gt(0.0)?.to_dtype(pre.dtype())?;
    let tie = (pre.eq(0.0)?.to_dtype(pre.dtype())? * 0.5)?;
    Ok((((pos + tie)? * (1.0 - LRELU_SLOPE))? + LRELU_SLOPE)?.detach())
}

/// `x / sqrt(mean(x², last) + eps)`: unit root-mean-square over the last dimension.
pub fn rms_norm_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Numerically stable softmax over the last dimension; `-inf` entries get zero mass.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// 1-D interpolation matrix `(2n, n)` for 2x bilinear upsampling with
/// half-pixel centers and edge clamping.
pub fn bilinear_matrix(n: usize) -> Vec<f32> {
    let m = 2 * n;
    let mut u = vec![0f32; m * n];
    for i in 0..m {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let l = (src - i0 as f64) as f32;
        u[i * n + i0] += 1.0 - l;
        u[i * n + i1] += l;
    }
    u
}

/// 2x bilinear upsampling of a `(B, C, H, W)` tensor via two matrix products.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let uh = Tensor::from_vec(bilinear_matrix(h), (2 * h, h), x.device())?;
    let uw = Tensor::from_vec(bilinear_matrix(w), (2 * w, w), x.device())?;
    let y = x.broadcast_matmul(&uw.t()?)?;
    Ok(uh.broadcast_matmul(&y)?)
}

pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Adjoint of [`avg_pool2x`], built from broadcasting so that its own
/// gradient accumulates correctly when the input has several consumers.
pub fn avg_pool2x_vjp(g: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = g.dims4()?;
    let spread = g
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?;
    Ok((spread * 0.25)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for n in [1, 2, 4, 8] {
            let u = bilinear_matrix(n);
            for row in u.chunks(n) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_constant_is_constant() {
        let x = Tensor::full(3.5f32, (1, 2, 4, 4), &device()).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 8, 8]);
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 3.5).abs() < 1e-6);
        }
    }

    #[test]
    fn softplus_matches_closed_form() {
        let x = Tensor::new(&[-30f32, -1.0, 0.0, 1.0, 30.0], &device()).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        for (xi, yi) in [-30f64, -1.0, 0.0, 1.0, 30.0].iter().zip(y) {
            let expect = (1.0 + xi.exp()).ln();
            assert!((yi as f64 - expect).abs() < 1e-6, "{xi}: {yi} vs {expect}");
        }
    }

    #[test]
    fn store_init_depends_only_on_name() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        a.get_or_init("x", &[4], Init::Normal(1.0)).unwrap();
        let ya = a.get_or_init("y", &[4], Init::Normal(1.0)).unwrap();
        let yb = b.get_or_init("y", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(
            ya.as_tensor().to_vec1::<f32>().unwrap(),
            yb.as_tensor().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn conv_vjp_matches_autograd() {
        let mut rng = labeled_rng(1, "conv");
        for (k, s, p, hw) in [(3, 1, 1, 6), (4, 2, 1, 8), (1, 1, 0, 4)] {
            let conv = Conv2d::frozen(&mut rng, 3, 5, k, s, p).unwrap();
            let x = Var::from_tensor(&randn(&mut rng, &[2, 3, hw, hw], 1.0).unwrap()).unwrap();
            let y = conv.forward(x.as_tensor()).unwrap();
            let g = randn(&mut rng, y.dims(), 1.0).unwrap();
            let grads = (&y * &g).unwrap().sum_all().unwrap().backward().unwrap();
            let auto = grads.get(x.as_tensor()).unwrap();
            let manual = conv.input_vjp(&g, (hw, hw)).unwrap();
            let diff = (auto - manual)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-4, "k={k} s={s}: {diff}");
        }
    }
}
