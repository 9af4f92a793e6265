//! Projection-conditioned discriminator.
//!
//! The trunk maps an image to a fixed-width feature vector φ through strided
//! convolutions down to 4×4, with an RGB input head at every resolution whose
//! output is added to the trunk (input skips). The conditional logit is
//! `uncond(φ) + ⟨P φ, ψ(t_g)⟩`.
//!
//! Besides the forward pass, the discriminator exposes the gradient of its
//! score with respect to the input image as an explicit expression built from
//! differentiable ops. The gradient penalty is a function of that expression,
//! so its parameter gradients follow from ordinary first-order autograd.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Builder, Conv2d, Init, Linear, LinearInit, ParamStore};
use crate::text::TextTokens;

/// Forward intermediates needed to evaluate the input gradient.
#[derive(Clone, Debug)]
pub struct DiscTrace {
    /// `(B,)` realness logits.
    pub scores: Tensor,
    /// `(B, feature_dim)`.
    pub features: Tensor,
    resolution: usize,
    /// Pre-activation of each RGB input head, keyed by resolution.
    head_pre: BTreeMap<usize, Tensor>,
    /// Pre-activation of each strided block, keyed by its input resolution.
    block_pre: BTreeMap<usize, Tensor>,
    final_pre: Tensor,
    fc_pre: Tensor,
    text_proj: Tensor,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: ModelConfig,
    resolution: usize,
    from_rgb: BTreeMap<usize, Conv2d>,
    blocks: BTreeMap<usize, Conv2d>,
    final_conv: Conv2d,
    fc: Linear,
    uncond: Linear,
    proj: Linear,
    psi: Linear,
}

impl Discriminator {
    /// Discriminator accepting images up to the resolution of stage `active - 1`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, active: usize) -> Result<Self> {
        Self::build(&mut store.builder(), cfg, active)
    }

    pub fn new_detached(store: &mut ParamStore, cfg: &ModelConfig, active: usize) -> Result<Self> {
        Self::build(&mut store.detached_builder(), cfg, active)
    }

    fn build(b: &mut Builder, cfg: &ModelConfig, active: usize) -> Result<Self> {
        cfg.validate()?;
        if active == 0 || active > cfg.resolutions.len() {
            return Err(Error::Stage(format!(
                "{active} active stages requested, schedule has {}",
                cfg.resolutions.len()
            )));
        }
        let mut from_rgb = BTreeMap::new();
        let mut blocks = BTreeMap::new();
        for &res in &cfg.resolutions[..active] {
            let c = cfg.disc_channels_at(res)?;
            from_rgb.insert(
                res,
                Conv2d::new(&mut b.pp(format!("from_rgb.{res}")), 3, c, 1, 1, 0, Init::Normal(1.0), true)?,
            );
            if res > cfg.resolutions[0] {
                let below = cfg.disc_channels_at(res / 2)?;
                // Zero-initialized so a freshly grown block leaves the scores of
                // the previous stage untouched.
                blocks.insert(
                    res,
                    Conv2d::new(&mut b.pp(format!("blocks.{res}")), c, below, 4, 2, 1, Init::Zeros, true)?,
                );
            }
        }
        let c4 = cfg.disc_channels[0];
        let base = cfg.resolutions[0];
        let final_conv = Conv2d::new(&mut b.pp("final_conv"), c4, c4, 3, 1, 1, Init::Normal(1.0), true)?;
        let fc = Linear::new(&mut b.pp("fc"), c4 * base * base, cfg.disc_feature_dim, LinearInit::DEFAULT)?;
        let uncond = Linear::new(&mut b.pp("uncond"), cfg.disc_feature_dim, 1, LinearInit::DEFAULT)?;
        let proj = Linear::new(
            &mut b.pp("proj"),
            cfg.disc_feature_dim,
            cfg.disc_proj_dim,
            LinearInit::ZERO.no_bias(),
        )?;
        let psi = Linear::new(&mut b.pp("psi"), cfg.text_dim, cfg.disc_proj_dim, LinearInit::DEFAULT)?;
        Ok(Self {
            cfg: cfg.clone(),
            resolution: cfg.resolutions[active - 1],
            from_rgb,
            blocks,
            final_conv,
            fc,
            uncond,
            proj,
            psi,
        })
    }

    /// Assembles a single-resolution discriminator from explicit layers.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: &ModelConfig,
        from_rgb: Conv2d,
        final_conv: Conv2d,
        fc: Linear,
        uncond: Linear,
        proj: Linear,
        psi: Linear,
    ) -> Self {
        let res = cfg.resolutions[0];
        Self {
            cfg: cfg.clone(),
            resolution: res,
            from_rgb: BTreeMap::from([(res, from_rgb)]),
            blocks: BTreeMap::new(),
            final_conv,
            fc,
            uncond,
            proj,
            psi,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.out_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != w || !self.from_rgb.contains_key(&h) {
            return Err(Error::Shape(format!(
                "discriminator accepts 3×r×r images with r in {:?}, got {c}×{h}×{w}",
                self.from_rgb.keys().collect::<Vec<_>>()
            )));
        }
        Ok(h)
    }

    /// Runs the trunk and both heads, keeping what the input gradient needs.
    pub fn trace(&self, x: &Tensor, tokens: &TextTokens) -> Result<DiscTrace> {
        let res = self.check_input(x)?;
        let base = self.cfg.resolutions[0];
        let mut head_pre = BTreeMap::new();
        let mut block_pre = BTreeMap::new();
        let pre = self.from_rgb[&res].forward(x)?;
        let mut h = nn::lrelu(&pre)?;
        head_pre.insert(res, pre);
        let mut xr = x.clone();
        let mut r = res;
        while r > base {
            let p = self.blocks[&r].forward(&h)?;
            xr = nn::avg_pool2x(&xr)?;
            let skip_pre = self.from_rgb[&(r / 2)].forward(&xr)?;
            h = (nn::lrelu(&p)? + nn::lrelu(&skip_pre)?)?;
            block_pre.insert(r, p);
            head_pre.insert(r / 2, skip_pre);
            r /= 2;
        }
        let final_pre = self.final_conv.forward(&h)?;
        let flat = nn::lrelu(&final_pre)?.flatten_from(1)?;
        let fc_pre = self.fc.forward(&flat)?;
        let features = nn::lrelu(&fc_pre)?;
        let text_proj = self.psi.forward(&tokens.global)?;
        let scores = self.score_from_features(&features, &text_proj)?;
        Ok(DiscTrace {
            scores,
            features,
            resolution: res,
            head_pre,
            block_pre,
            final_pre,
            fc_pre,
            text_proj,
        })
    }

    fn score_from_features(&self, features: &Tensor, text_proj: &Tensor) -> Result<Tensor> {
        let uncond = self.uncond.forward(features)?.squeeze(1)?;
        let cond = (self.proj.forward(features)? * text_proj)?.sum(1)?;
        Ok((uncond + cond)?)
    }

    /// Fixed-width feature vector φ for each image.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let res = self.check_input(x)?;
        let base = self.cfg.resolutions[0];
        let mut h = nn::lrelu(&self.from_rgb[&res].forward(x)?)?;
        let mut xr = x.clone();
        let mut r = res;
        while r > base {
            let p = self.blocks[&r].forward(&h)?;
            xr = nn::avg_pool2x(&xr)?;
            h = (nn::lrelu(&p)? + nn::lrelu(&self.from_rgb[&(r / 2)].forward(&xr)?)?)?;
            r /= 2;
        }
        let flat = nn::lrelu(&self.final_conv.forward(&h)?)?.flatten_from(1)?;
        nn::lrelu(&self.fc.forward(&flat)?)
    }

    /// `(B,)` realness logits for image/caption pairs.
    pub fn score(&self, x: &Tensor, tokens: &TextTokens) -> Result<Tensor> {
        Ok(self.trace(x, tokens)?.scores)
    }

    /// Gradient of each sample's score with respect to its own input image,
    /// as a differentiable expression of the parameters.
    pub fn input_gradient(&self, t: &DiscTrace) -> Result<Tensor> {
        let b = t.features.dim(0)?;
        let base = self.cfg.resolutions[0];
        let uncond_row = self.uncond.effective_weight()?; // (1, F)
        let g_phi = self
            .proj
            .input_vjp(&t.text_proj)?
            .broadcast_add(&uncond_row)?;
        let g_fc = (g_phi * nn::lrelu_mask(&t.fc_pre)?)?;
        let c4 = self.cfg.disc_channels[0];
        let g_flat = self.fc.input_vjp(&g_fc)?.reshape((b, c4, base, base))?;
        let g_final = (g_flat * nn::lrelu_mask(&t.final_pre)?)?;
        let mut g_h = self.final_conv.input_vjp(&g_final, (base, base))?;

        // Walk back up the pyramid, collecting the image gradient per level.
        let mut r = base;
        let mut g_x: Option<Tensor> = None;
        loop {
            let head_in = (&g_h * nn::lrelu_mask(&t.head_pre[&r])?)?;
            let mut g_level = self.from_rgb[&r].input_vjp(&head_in, (r, r))?;
            if let Some(lower) = g_x.take() {
                g_level = (g_level + nn::avg_pool2x_vjp(&lower)?)?;
            }
            g_x = Some(g_level);
            if r == t.resolution {
                break;
            }
            let up = r * 2;
            let block_in = (&g_h * nn::lrelu_mask(&t.block_pre[&up])?)?;
            g_h = self.blocks[&up].input_vjp(&block_in, (up, up))?;
            r = up;
        }
        Ok(g_x.expect("at least one level"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::nn::{device, labeled_rng, randn};
    use candle_core::{DType, Var};

    fn tokens(b: usize, d: usize, seed: u64) -> TextTokens {
        let mut rng = labeled_rng(seed, "tok");
        TextTokens {
            seq: randn(&mut rng, &[b, 3, d], 1.0).unwrap(),
            global: randn(&mut rng, &[b, d], 1.0).unwrap(),
            mask: Tensor::ones((b, 3), DType::F32, &device()).unwrap(),
        }
    }

    fn randomize(store: &ParamStore, seed: u64) {
        for (name, var) in store.iter() {
            let mut rng = labeled_rng(seed, name);
            var.set(&randn(&mut rng, var.dims(), 0.5).unwrap()).unwrap();
        }
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn zero_image_zero_weights_gives_zero_features() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(0);
        let d = Discriminator::new(&mut store, &cfg, 2).unwrap();
        for (_, v) in store.iter() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::zeros((2, 3, 8, 8), DType::F32, &device()).unwrap();
        assert_eq!(max_abs(&d.features(&x).unwrap()), 0.0);
    }

    #[test]
    fn feature_width_is_resolution_independent() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(1);
        let d = Discriminator::new(&mut store, &cfg, 3).unwrap();
        let mut rng = labeled_rng(0, "x");
        for r in [4, 8, 16] {
            let x = randn(&mut rng, &[2, 3, r, r], 1.0).unwrap();
            let f = d.features(&x).unwrap();
            assert_eq!(f.dims(), &[2, cfg.disc_feature_dim]);
            assert!(nn::all_finite(&f).unwrap());
        }
        let bad = Tensor::zeros((1, 3, 32, 32), DType::F32, &device()).unwrap();
        assert!(d.features(&bad).is_err());
    }

    #[test]
    fn caption_independent_at_init() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(2);
        let d = Discriminator::new(&mut store, &cfg, 2).unwrap();
        let mut rng = labeled_rng(1, "x");
        let x = randn(&mut rng, &[3, 3, 8, 8], 1.0).unwrap();
        let a = d.score(&x, &tokens(3, cfg.text_dim, 1)).unwrap();
        let b = d.score(&x, &tokens(3, cfg.text_dim, 2)).unwrap();
        assert_eq!(max_abs(&(a - b).unwrap()), 0.0);
    }

    #[test]
    fn hand_set_projection_score() {
        // φ is 1-d; P φ = 2, ψ(t_g) = 3, unconditional head = 0.5 → 6.5.
        let mut cfg = Config::tiny().model;
        cfg.disc_channels = vec![1, 1, 1];
        cfg.disc_feature_dim = 1;
        cfg.disc_proj_dim = 1;
        cfg.text_dim = 1;
        let dev = device();
        let t = |v: &[f32], s: &[usize]| Tensor::from_vec(v.to_vec(), s, &dev).unwrap();
        // Constant image 1 passes through identity-like layers to φ = 1.
        let from_rgb = Conv2d::from_parts(t(&[1.0, 0.0, 0.0], &[1, 3, 1, 1]), None, 1, 0);
        let mut k = vec![0f32; 9];
        k[4] = 1.0;
        let final_conv = Conv2d::from_parts(t(&k, &[1, 1, 3, 3]), None, 1, 1);
        let fc = Linear::from_parts(t(&[1.0 / 16.0; 16], &[1, 16]), None);
        let uncond = Linear::from_parts(t(&[0.0], &[1, 1]), Some(t(&[0.5], &[1])));
        let proj = Linear::from_parts(t(&[2.0], &[1, 1]), None);
        let psi = Linear::from_parts(t(&[1.0], &[1, 1]), None);
        let d = Discriminator::from_parts(&cfg, from_rgb, final_conv, fc, uncond, proj, psi);
        let x = Tensor::ones((1, 3, 4, 4), DType::F32, &dev).unwrap();
        let tok = TextTokens {
            seq: Tensor::zeros((1, 1, 1), DType::F32, &dev).unwrap(),
            global: t(&[3.0], &[1, 1]),
            mask: Tensor::ones((1, 1), DType::F32, &dev).unwrap(),
        };
        let s = d.score(&x, &tok).unwrap().to_vec1::<f32>().unwrap();
        assert!((s[0] - 6.5).abs() < 1e-6, "{s:?}");
    }

    #[test]
    fn input_gradient_matches_autograd() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(3);
        Discriminator::new(&mut store, &cfg, 3).unwrap();
        randomize(&store, 7);
        let d = Discriminator::new(&mut store, &cfg, 3).unwrap();
        let mut rng = labeled_rng(2, "x");
        for r in [4, 8, 16] {
            let x = Var::from_tensor(&randn(&mut rng, &[2, 3, r, r], 1.0).unwrap()).unwrap();
            let tok = tokens(2, cfg.text_dim, 3);
            let trace = d.trace(x.as_tensor(), &tok).unwrap();
            let explicit = d.input_gradient(&trace).unwrap();
            let grads = trace.scores.sum_all().unwrap().backward().unwrap();
            let auto = grads.get(x.as_tensor()).unwrap();
            let scale = max_abs(auto).max(1e-6);
            assert!(
                max_abs(&(&explicit - auto).unwrap()) / scale < 1e-5,
                "resolution {r}"
            );
        }
    }

    #[test]
    fn growth_keeps_scores_of_downsampled_images() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(4);
        Discriminator::new(&mut store, &cfg, 2).unwrap();
        // Train-like perturbation of the existing parameters before growing.
        randomize(&store, 9);
        let small = Discriminator::new(&mut store, &cfg, 2).unwrap();
        let grown = Discriminator::new(&mut store, &cfg, 3).unwrap();
        let mut rng = labeled_rng(5, "x");
        let x16 = randn(&mut rng, &[2, 3, 16, 16], 1.0).unwrap();
        let tok = tokens(2, cfg.text_dim, 4);
        let before = small.score(&nn::avg_pool2x(&x16).unwrap(), &tok).unwrap();
        let after = grown.score(&x16, &tok).unwrap();
        assert_eq!(max_abs(&(before - after).unwrap()), 0.0);
        // Images at the old size are scored identically too.
        let x8 = randn(&mut rng, &[2, 3, 8, 8], 1.0).unwrap();
        let a = small.score(&x8, &tok).unwrap();
        let b = grown.score(&x8, &tok).unwrap();
        assert_eq!(max_abs(&(a - b).unwrap()), 0.0);
    }
}
