//! Generator: convolution block, attention block with routed experts,
//! progressive RGB accumulation and the full synthesis pass.

pub mod attention;
pub mod modconv;
pub mod mtm;

use std::sync::Arc;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::moe::{MoeLayer, RoutingDecision};
use crate::nn::{self, Builder, Init, ParamStore};
use crate::text::{MappingNetwork, TextEncoder, TextTokens, TokenAdapter, ToyTextEncoder};

pub use attention::{l2_attention, l2_attention_weights, MultiHeadAttention};
pub use modconv::{KernelBank, ModConv};
pub use mtm::Mtm;

/// `f + g ⊙ act(MTM(act(MTM(f, w)), w))` with the per-channel gain `g`
/// starting at zero, so the block is the identity at init.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    mtm1: Mtm,
    mtm2: Mtm,
    gain: Tensor,
}

impl ConvBlock {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, channels: usize) -> Result<Self> {
        Ok(Self {
            mtm1: Mtm::new(&mut b.pp("mtm1"), cfg.kernel_bank, channels, channels, cfg.w_dim, cfg.mtm_max_res)?,
            mtm2: Mtm::new(&mut b.pp("mtm2"), cfg.kernel_bank, channels, channels, cfg.w_dim, cfg.mtm_max_res)?,
            gain: b.param("residual_gain", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let h = nn::lrelu_gain(&self.mtm1.forward(f, w)?)?;
        let h = nn::lrelu_gain(&self.mtm2.forward(&h, w)?)?;
        let c = self.gain.dim(0)?;
        Ok((f + h.broadcast_mul(&self.gain.reshape((1, c, 1, 1))?)?)?)
    }
}

/// In-projection, self-attention, cross-attention over text tokens, routed
/// expert FFN and out-projection. The out-projection maps to the width of the
/// next stage.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    proj_in: ModConv,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    moe: MoeLayer,
    proj_out: ModConv,
    enabled: bool,
}

impl AttentionBlock {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, channels: usize, out_channels: usize, enabled: bool) -> Result<Self> {
        Ok(Self {
            proj_in: ModConv::new(&mut b.pp("proj_in"), 1, channels, channels, 1, cfg.w_dim, true, false)?,
            self_attn: MultiHeadAttention::new(&mut b.pp("self_attn"), channels, channels, cfg.attention_heads)?,
            cross_attn: MultiHeadAttention::new(&mut b.pp("cross_attn"), channels, cfg.text_dim, cfg.attention_heads)?,
            moe: MoeLayer::new(&mut b.pp("moe"), channels, cfg.w_dim, cfg.experts, cfg.expert_mult)?,
            proj_out: ModConv::new(&mut b.pp("proj_out"), 1, channels, out_channels, 1, cfg.w_dim, true, false)?,
            enabled,
        })
    }

    pub fn moe(&self) -> &MoeLayer {
        &self.moe
    }

    pub fn proj_in(&self) -> &ModConv {
        &self.proj_in
    }

    pub fn proj_out(&self) -> &ModConv {
        &self.proj_out
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn forward(&self, f: &Tensor, w: &Tensor, tokens: &TextTokens) -> Result<(Tensor, Option<RoutingDecision>)> {
        let f_proj = self.proj_in.forward(f, w)?;
        if !self.enabled {
            return Ok((self.proj_out.forward(&f_proj, w)?, None));
        }
        let (b, c, h, wd) = f_proj.dims4()?;
        let pts = f_proj.reshape((b, c, h * wd))?.transpose(1, 2)?.contiguous()?;
        let sa = (&pts + self.self_attn.forward(&pts, &pts, None)?)?;
        let ca = (&sa + self.cross_attn.forward(&sa, &tokens.seq, Some(&tokens.mask))?)?;
        let (ffn, decision) = self.moe.forward(&ca, w)?;
        let f_ffn = ffn.transpose(1, 2)?.reshape((b, c, h, wd))?;
        Ok((self.proj_out.forward(&f_ffn, w)?, Some(decision)))
    }
}

/// 1×1 modulated projection to RGB without demodulation.
#[derive(Clone, Debug)]
pub struct ToRgb {
    conv: ModConv,
}

impl ToRgb {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, channels: usize, zero_init: bool) -> Result<Self> {
        Ok(Self {
            conv: ModConv::new(b, 1, channels, 3, 1, cfg.w_dim, false, zero_init)?,
        })
    }

    pub fn from_conv(conv: ModConv) -> Self {
        Self { conv }
    }

    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.conv.forward(f, w)
    }

    /// `upsample2x(prev) + toRGB(f, w)`, or just `toRGB(f, w)` at the root.
    pub fn accumulate(&self, prev: Option<&Tensor>, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let rgb = self.forward(f, w)?;
        match prev {
            None => Ok(rgb),
            Some(p) => {
                let (ph, fh) = (p.dim(2)?, f.dim(2)?);
                if 2 * ph != fh || 2 * p.dim(3)? != f.dim(3)? {
                    return Err(Error::Shape(format!(
                        "previous RGB is {ph}x{ph}, features are {fh}x{fh}; expected half resolution"
                    )));
                }
                Ok((nn::upsample2x(p)? + rgb)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub resolution: usize,
    pub conv: ConvBlock,
    pub attention: AttentionBlock,
    pub to_rgb: ToRgb,
}

/// Routing decisions of one MoE layer for a whole batch.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub resolution: usize,
    pub batch: usize,
    pub decision: RoutingDecision,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    /// One `(B, 3, r, r)` image per active stage, lowest resolution first.
    pub pyramid: Vec<Tensor>,
    pub routing: Vec<LayerRouting>,
    pub w: Tensor,
}

impl SynthesisOutput {
    pub fn image(&self) -> &Tensor {
        self.pyramid.last().expect("non-empty pyramid")
    }
}

#[derive(Clone)]
pub struct Generator {
    cfg: ModelConfig,
    encoder: Arc<dyn TextEncoder>,
    adapter: TokenAdapter,
    mapping: MappingNetwork,
    constant: Tensor,
    stages: Vec<Stage>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("resolution", &self.resolution())
            .field("stages", &self.stages.len())
            .finish()
    }
}

fn stage_out_channels(cfg: &ModelConfig, idx: usize) -> usize {
    cfg.channels.get(idx + 1).copied().unwrap_or(cfg.channels[idx])
}

impl Generator {
    /// Builds the generator with `active` stages, creating any missing
    /// parameters in `store`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, active: usize) -> Result<Self> {
        Self::build(&mut store.builder(), cfg, active)
    }

    /// Same as [`Generator::new`] with every parameter cut from autograd.
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
        let encoder = ToyTextEncoder::new(&mut b.pp("text_encoder"), cfg)?;
        let adapter = TokenAdapter::new(&mut b.pp("adapter"), cfg.text_dim, cfg.adapter_layers)?;
        let mapping = MappingNetwork::new(&mut b.pp("mapping"), cfg)?;
        let constant = b.param("const", &[1, cfg.channels[0], 4, 4], Init::Normal(1.0))?;
        let mut stages = Vec::with_capacity(active);
        for idx in 0..active {
            let res = cfg.resolutions[idx];
            let c = cfg.channels[idx];
            let mut sb = b.pp(format!("stages.{res}"));
            stages.push(Stage {
                resolution: res,
                conv: ConvBlock::new(&mut sb.pp("conv"), cfg, c)?,
                attention: AttentionBlock::new(
                    &mut sb.pp("attention"),
                    cfg,
                    c,
                    stage_out_channels(cfg, idx),
                    res >= cfg.attention_min_res,
                )?,
                to_rgb: ToRgb::new(&mut sb.pp("to_rgb"), cfg, stage_out_channels(cfg, idx), idx > 0)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Arc::new(encoder),
            adapter,
            mapping,
            constant,
            stages,
        })
    }

    /// Swaps in another text encoder with the same width.
    pub fn with_encoder(mut self, encoder: Arc<dyn TextEncoder>) -> Result<Self> {
        if encoder.dim() != self.cfg.text_dim {
            return Err(Error::Config(format!(
                "encoder width {} does not match text_dim {}",
                encoder.dim(),
                self.cfg.text_dim
            )));
        }
        self.encoder = encoder;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn resolution(&self) -> usize {
        self.stages.last().map(|s| s.resolution).unwrap_or(4)
    }

    pub fn encoder(&self) -> &Arc<dyn TextEncoder> {
        &self.encoder
    }

    pub fn adapter(&self) -> &TokenAdapter {
        &self.adapter
    }

    pub fn mapping(&self) -> &MappingNetwork {
        &self.mapping
    }

    /// Frozen-encoder tokens passed through the learnable adapter.
    pub fn text_tokens(&self, captions: &[String]) -> Result<TextTokens> {
        let raw = self.encoder.encode(captions)?;
        self.adapter.forward(&raw)
    }

    pub fn style(&self, z: &Tensor, tokens: &TextTokens) -> Result<Tensor> {
        self.mapping.forward(z, &tokens.global)
    }

    pub fn synthesize(&self, z: &Tensor, captions: &[String]) -> Result<SynthesisOutput> {
        let tokens = self.text_tokens(captions)?;
        let w = self.style(z, &tokens)?;
        self.synthesize_from(&w, &tokens, self.resolution())
    }

    /// Runs the stages up to `resolution` from a given style and (adapted) tokens.
    pub fn synthesize_from(&self, w: &Tensor, tokens: &TextTokens, resolution: usize) -> Result<SynthesisOutput> {
        let upto = self
            .stages
            .iter()
            .position(|s| s.resolution == resolution)
            .ok_or_else(|| Error::Stage(format!("resolution {resolution} is not an active stage")))?;
        let b = w.dim(0)?;
        let mut x = self.constant.repeat((b, 1, 1, 1))?;
        let mut rgb: Option<Tensor> = None;
        let mut pyramid = Vec::with_capacity(upto + 1);
        let mut routing = Vec::new();
        for (i, stage) in self.stages[..=upto].iter().enumerate() {
            if i > 0 {
                x = nn::upsample2x(&x)?;
            }
            x = stage.conv.forward(&x, w)?;
            let (y, decision) = stage.attention.forward(&x, w, tokens)?;
            x = y;
            if let Some(decision) = decision {
                routing.push(LayerRouting {
                    resolution: stage.resolution,
                    batch: b,
                    decision,
                });
            }
            let out = stage.to_rgb.accumulate(rgb.as_ref(), &x, w)?;
            pyramid.push(out.clone());
            rgb = Some(out);
        }
        Ok(SynthesisOutput {
            pyramid,
            routing,
            w: w.clone(),
        })
    }

    /// Total point evaluations per expert for every MoE layer.
    pub fn expert_point_evaluations(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|s| s.attention.moe().pool.point_evaluations())
            .collect()
    }

    pub fn reset_expert_counters(&self) {
        for s in &self.stages {
            s.attention.moe().pool.reset_counters();
        }
    }
}
