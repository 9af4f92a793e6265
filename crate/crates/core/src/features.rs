//! Frozen, seeded random-convolution image embedder.
//!
//! Three 3×3 convolutions with leaky ReLU, 2× average pooling between them
//! while the map is at least 8×8; the embedding concatenates the global mean
//! of every layer's activations. Differentiable with respect to the input.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};

pub const EXTRACTOR_LAYERS: usize = 3;

#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    convs: Vec<Conv2d>,
    width: usize,
    resolution: Option<usize>,
}

impl RandomConvExtractor {
    /// Extractor determined by `(seed, label)`. When `resolution` is given,
    /// inputs of any other size are rejected.
    pub fn new(seed: u64, label: &str, width: usize, resolution: Option<usize>) -> Result<Self> {
        let mut rng = nn::labeled_rng(seed, &format!("extractor.{label}"));
        let mut convs = Vec::with_capacity(EXTRACTOR_LAYERS);
        let mut cin = 3;
        for _ in 0..EXTRACTOR_LAYERS {
            convs.push(Conv2d::frozen(&mut rng, cin, width, 3, 1, 1)?);
            cin = width;
        }
        Ok(Self {
            convs,
            width,
            resolution,
        })
    }

    pub fn from_convs(convs: Vec<Conv2d>, width: usize) -> Self {
        Self {
            convs,
            width,
            resolution: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.width * self.convs.len()
    }

    /// `(B, 3, r, r)` → `(B, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != w {
            return Err(Error::Shape(format!("extractor expects 3×r×r images, got {c}×{h}×{w}")));
        }
        if let Some(r) = self.resolution {
            if h != r {
                return Err(Error::Shape(format!("extractor built for {r}×{r}, got {h}×{w}")));
            }
        }
        let mut h_map = x.clone();
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && h_map.dim(2)? >= 8 {
                h_map = nn::avg_pool2x(&h_map)?;
            }
            h_map = nn::lrelu(&conv.forward(&h_map)?)?;
            pooled.push(h_map.mean((2, 3))?);
        }
        Ok(Tensor::cat(&pooled, 1)?)
    }
}
