//! Training objectives: logistic adversarial losses, the R1 gradient penalty,
//! the matching-aware term, the multi-level contrastive text-image loss and
//! their weighted aggregation.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::features::RandomConvExtractor;
use crate::nn::{self, Linear};
use crate::text::TextTokens;

/// `mean(softplus(−real)) + mean(softplus(fake))`.
pub fn d_adversarial(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = nn::softplus(&real.neg()?)?.mean_all()?;
    let f = nn::softplus(fake)?.mean_all()?;
    Ok((r + f)?)
}

/// `mean(softplus(−fake))`.
pub fn g_adversarial(fake: &Tensor) -> Result<Tensor> {
    Ok(nn::softplus(&fake.neg()?)?.mean_all()?)
}

/// `(γ/2) · mean_b ‖grad_b‖²` for a `(B, …)` gradient.
pub fn r1_from_gradient(grad: &Tensor, gamma: f64) -> Result<Tensor> {
    let sq = grad.sqr()?.flatten_from(1)?.sum(1)?;
    Ok((sq.mean_all()? * (gamma / 2.0))?)
}

/// R1 penalty on real images. Differentiable with respect to the
/// discriminator's parameters.
pub fn r1_penalty(d: &Discriminator, real: &Tensor, tokens: &TextTokens, gamma: f64) -> Result<Tensor> {
    let trace = d.trace(real, tokens)?;
    r1_from_gradient(&d.input_gradient(&trace)?, gamma)
}

/// Outcome of the matching-aware term.
#[derive(Clone, Debug)]
pub struct MatchTerm {
    pub loss: Tensor,
    /// Set when the batch could not be deranged and the term was skipped.
    pub skipped: bool,
}

/// `mean(softplus(score(real, wrong caption)))`; a batch without mismatched
/// pairs contributes zero and raises the `skipped` flag.
pub fn matching_aware(mismatched_scores: Option<&Tensor>) -> Result<MatchTerm> {
    match mismatched_scores {
        Some(s) => Ok(MatchTerm {
            loss: nn::softplus(s)?.mean_all()?,
            skipped: false,
        }),
        None => {
            log::warn!("batch too small to build mismatched pairs; matching term skipped");
            Ok(MatchTerm {
                loss: Tensor::new(0f32, &nn::device())?,
                skipped: true,
            })
        }
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Symmetric InfoNCE between row-aligned `(B, d)` embeddings. Inputs are
/// L2-normalized internally; a batch of one yields exactly zero.
pub fn info_nce(image: &Tensor, text: &Tensor, temperature: f64) -> Result<Tensor> {
    let b = image.dim(0)?;
    let logits = (l2_normalize(image)?.matmul(&l2_normalize(text)?.t()?)? / temperature)?;
    let eye = Tensor::eye(b, DType::F32, image.device())?;
    let rows = (nn::log_softmax_last(&logits)? * &eye)?.sum_all()?;
    let cols = (nn::log_softmax_last(&logits.t()?)? * &eye)?.sum_all()?;
    Ok(((rows + cols)? * (-0.5 / b as f64))?)
}

/// Desk-scale stand-in for a pretrained image tower: a frozen random-conv
/// embedder per resolution followed by a linear head into text space.
#[derive(Clone, Debug)]
pub struct ClipProxy {
    temperature: f64,
    levels: BTreeMap<usize, ClipLevel>,
}

#[derive(Clone, Debug)]
struct ClipLevel {
    extractor: RandomConvExtractor,
    head: Linear,
    fitted: bool,
}

impl ClipProxy {
    /// Proxy with a random linear head at every resolution.
    pub fn new(seed: u64, resolutions: &[usize], width: usize, text_dim: usize, temperature: f64) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for &r in resolutions {
            let extractor = RandomConvExtractor::new(seed, &format!("clip.{r}"), width, Some(r))?;
            let mut rng = nn::labeled_rng(seed, &format!("clip.{r}.head"));
            let weight = nn::randn(&mut rng, &[text_dim, extractor.dim()], 1.0 / (extractor.dim() as f32).sqrt())?;
            levels.insert(
                r,
                ClipLevel {
                    extractor,
                    head: Linear::from_parts(weight, None),
                    fitted: false,
                },
            );
        }
        Ok(Self { temperature, levels })
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    pub fn is_fitted(&self, resolution: usize) -> bool {
        self.levels.get(&resolution).map(|l| l.fitted).unwrap_or(false)
    }

    fn level(&self, r: usize) -> Result<&ClipLevel> {
        self.levels
            .get(&r)
            .ok_or_else(|| Error::Stage(format!("no contrastive embedder for resolution {r}")))
    }

    /// `(B, 3, r, r)` → `(B, text_dim)` embedding (not normalized).
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let level = self.level(images.dim(2)?)?;
        level.head.forward(&level.extractor.forward(images)?)
    }

    /// Fits the head at `resolution` by ridge regression from embedder
    /// features of real images onto their normalized caption embeddings.
    pub fn fit(&mut self, resolution: usize, images: &Tensor, text_global: &Tensor, ridge: f64) -> Result<()> {
        let feats = self.level(resolution)?.extractor.forward(images)?;
        let x = to_matrix(&feats)?;
        let y = to_matrix(&l2_normalize(text_global)?)?;
        let (n, f) = (x.nrows(), x.ncols());
        let mut xa = DMatrix::<f64>::from_element(n, f + 1, 1.0);
        xa.view_mut((0, 0), (n, f)).copy_from(&x);
        let gram = xa.transpose() * &xa;
        let scale = (gram.trace() / (f + 1) as f64).max(1e-12);
        let reg = gram + DMatrix::<f64>::identity(f + 1, f + 1) * (ridge * scale);
        let rhs = xa.transpose() * y;
        let sol = reg
            .cholesky()
            .ok_or_else(|| Error::Internal("ridge system not positive definite".into()))?
            .solve(&rhs);
        let d = sol.ncols();
        let weight: Vec<f32> = (0..d).flat_map(|j| (0..f).map(move |i| (j, i))).map(|(j, i)| sol[(i, j)] as f32).collect();
        let bias: Vec<f32> = (0..d).map(|j| sol[(f, j)] as f32).collect();
        let dev = images.device();
        let level = self.levels.get_mut(&resolution).expect("checked above");
        level.head = Linear::from_parts(
            Tensor::from_vec(weight, (d, f), dev)?,
            Some(Tensor::from_vec(bias, d, dev)?),
        );
        level.fitted = true;
        Ok(())
    }

    /// Head parameters for checkpointing, keyed `clip.{r}.weight` / `.bias`.
    pub fn head_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (r, level) in &self.levels {
            if level.fitted {
                out.insert(format!("clip.{r}.weight"), level.head.effective_weight()?);
                if let Some(b) = level.head.effective_bias()? {
                    out.insert(format!("clip.{r}.bias"), b);
                }
            }
        }
        Ok(out)
    }

    pub fn load_heads(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (r, level) in self.levels.iter_mut() {
            if let Some(w) = tensors.get(&format!("clip.{r}.weight")) {
                level.head = Linear::from_parts(w.clone(), tensors.get(&format!("clip.{r}.bias")).cloned());
                level.fitted = true;
            }
        }
        Ok(())
    }

    /// Mean over pyramid levels of the symmetric InfoNCE between each level's
    /// image embeddings and the caption embeddings.
    pub fn multi_level_loss(&self, pyramid: &[Tensor], text_global: &Tensor) -> Result<Tensor> {
        if pyramid.is_empty() {
            return Err(Error::Shape("empty pyramid".into()));
        }
        let mut total: Option<Tensor> = None;
        for level in pyramid {
            let l = info_nce(&self.embed(level)?, text_global, self.temperature)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        Ok((total.expect("non-empty") / pyramid.len() as f64)?)
    }
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, f) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_slice(n, f, &v))
}

/// Per-step scalar losses and the weights that combined them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub g_adv: f64,
    pub d_adv: f64,
    /// Penalty added this step, including the lazy-schedule compensation.
    pub r1: f64,
    #[serde(rename = "match")]
    pub match_loss: f64,
    pub clip_multi: f64,
    /// Load-balance loss summed over MoE layers (already scaled by α).
    pub moe: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub weights: LossWeights,
    pub r1_applied: bool,
    pub match_skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_match: f64,
    pub lambda_clip: f64,
    pub moe_alpha: f64,
    pub r1_gamma: f64,
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            lambda_match: c.lambda_match,
            lambda_clip: c.lambda_clip,
            moe_alpha: c.moe_alpha,
            r1_gamma: c.r1_gamma,
        }
    }
}

impl LossReport {
    pub fn scalars(&self) -> [(&'static str, f64); 8] {
        [
            ("g_adv", self.g_adv),
            ("d_adv", self.d_adv),
            ("r1", self.r1),
            ("match", self.match_loss),
            ("clip_multi", self.clip_multi),
            ("moe", self.moe),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.scalars().iter().all(|(_, v)| v.is_finite())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Recomputes both totals from the parts:
/// `total_g = g_adv + λ_clip·clip_multi + moe`,
/// `total_d = d_adv + λ_match·match + r1`.
pub fn total_losses(parts: &LossReport, weights: &LossConfig) -> LossReport {
    let mut out = parts.clone();
    out.weights = LossWeights::from(weights);
    out.total_g = parts.g_adv + weights.lambda_clip * parts.clip_multi + parts.moe;
    out.total_d = parts.d_adv + weights.lambda_match * parts.match_loss + parts.r1;
    out
}

/// Applies `key=value` overrides to a copy of the loss weights.
pub fn weights_with(base: &LossConfig, overrides: &[(&str, f64)]) -> Result<LossConfig> {
    let mut w = base.clone();
    for (k, v) in overrides {
        w.set(k, *v)?;
    }
    Ok(w)
}
