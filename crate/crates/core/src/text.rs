//! Caption tokenization, the frozen text encoder, the learnable token adapter
//! and the latent mapping network that fuses `z` with the global text token.

use candle_core::{DType, Tensor, D};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Builder, Init, Linear, LinearInit};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const NUM_SPECIALS: u32 = 3;

/// Token ids for one caption, padded to the context length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenIds {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Whitespace tokenizer with hashed word ids.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    context_len: usize,
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(context_len: usize, vocab_size: usize) -> Self {
        assert!(context_len >= 2 && vocab_size > NUM_SPECIALS as usize);
        Self {
            context_len,
            vocab_size,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let digest = Sha256::digest(word.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
        NUM_SPECIALS + (h % (self.vocab_size as u64 - NUM_SPECIALS as u64)) as u32
    }

    /// Lowercases, splits on whitespace, wraps in BOS/EOS and pads. Words that
    /// do not fit are dropped; EOS always terminates the valid span.
    pub fn tokenize(&self, caption: &str) -> TokenIds {
        let words: Vec<String> = caption
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        let room = self.context_len - 2;
        let mut ids = Vec::with_capacity(self.context_len);
        ids.push(BOS);
        ids.extend(words.iter().take(room).map(|w| self.word_id(w)));
        ids.push(EOS);
        let valid = ids.len();
        ids.resize(self.context_len, PAD);
        let mask = (0..self.context_len).map(|i| i < valid).collect();
        TokenIds { ids, mask }
    }
}

/// Per-token features, the pooled global token and the validity mask for a batch.
#[derive(Clone, Debug)]
pub struct TextTokens {
    /// `(B, L, d)`
    pub seq: Tensor,
    /// `(B, d)`
    pub global: Tensor,
    /// `(B, L)`, 1.0 for valid positions.
    pub mask: Tensor,
}

impl TextTokens {
    pub fn batch(&self) -> usize {
        self.global.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.global.dims()[1]
    }

    pub fn len(&self) -> usize {
        self.seq.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows in the given order.
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(
            order.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            order.len(),
            self.seq.device(),
        )?;
        Ok(Self {
            seq: self.seq.index_select(&idx, 0)?,
            global: self.global.index_select(&idx, 0)?,
            mask: self.mask.index_select(&idx, 0)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            seq: self.seq.detach(),
            global: self.global.detach(),
            mask: self.mask.detach(),
        }
    }

    pub fn mask_rows(&self) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .mask
            .to_vec2::<f32>()?
            .into_iter()
            .map(|r| r.into_iter().map(|m| m > 0.5).collect())
            .collect())
    }
}

/// Any caption encoder producing `(t_seq, t_g, mask)`.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, captions: &[String]) -> Result<TextTokens>;
    fn dim(&self) -> usize;
    fn context_len(&self) -> usize;
}

fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f32> {
    let mut pe = vec![0f32; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let a = pos as f64 * freq;
            pe[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() } as f32;
        }
    }
    pe
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

/// Deterministic stand-in for a pretrained text tower: hashed token
/// embeddings, sinusoidal positions, a few fixed self-attention layers and
/// masked mean pooling. All weights are frozen.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    tokenizer: Tokenizer,
    embedding: Tensor,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    heads: usize,
    dim: usize,
}

impl ToyTextEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.text_dim;
        let std = 1.0 / (d as f32).sqrt();
        let embedding = b.frozen_param("embedding", &[cfg.vocab_size, d], Init::Normal(1.0))?;
        let positions = Tensor::from_vec(
            sinusoidal_positions(cfg.context_len, d),
            (cfg.context_len, d),
            &nn::device(),
        )?;
        let mut layers = Vec::new();
        for i in 0..cfg.encoder_layers {
            let mut lb = b.pp(format!("layers.{i}"));
            layers.push(EncoderLayer {
                wq: lb.frozen_param("wq", &[d, d], Init::Normal(std))?,
                wk: lb.frozen_param("wk", &[d, d], Init::Normal(std))?,
                wv: lb.frozen_param("wv", &[d, d], Init::Normal(std))?,
                wo: lb.frozen_param("wo", &[d, d], Init::Normal(std))?,
                w1: lb.frozen_param("w1", &[d, 2 * d], Init::Normal(std))?,
                w2: lb.frozen_param("w2", &[2 * d, d], Init::Normal(std / 2f32.sqrt()))?,
            });
        }
        Ok(Self {
            tokenizer: Tokenizer::new(cfg.context_len, cfg.vocab_size),
            embedding,
            positions,
            layers,
            heads: cfg.encoder_heads,
            dim: d,
        })
    }

    /// Replaces the token embedding table.
    pub fn with_embedding(mut self, table: Tensor) -> Self {
        self.embedding = table.detach();
        self
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn attend(&self, layer: &EncoderLayer, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let h = layer_norm(x)?;
        let q = split(h.broadcast_matmul(&layer.wq)?)?;
        let k = split(h.broadcast_matmul(&layer.wk)?)?;
        let v = split(h.broadcast_matmul(&layer.wv)?)?;
        let logits = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?.broadcast_add(key_bias)?;
        let att = nn::softmax_last(&logits)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        let x = (x + o.broadcast_matmul(&layer.wo)?)?;
        let h = layer_norm(&x)?;
        let f = h.broadcast_matmul(&layer.w1)?.gelu()?.broadcast_matmul(&layer.w2)?;
        Ok((x + f)?)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn encode(&self, captions: &[String]) -> Result<TextTokens> {
        let dev = nn::device();
        let l = self.tokenizer.context_len();
        let toks: Vec<TokenIds> = captions.iter().map(|c| self.tokenizer.tokenize(c)).collect();
        let b = toks.len();
        let ids: Vec<u32> = toks.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let mask: Vec<f32> = toks
            .iter()
            .flat_map(|t| t.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect();
        let ids = Tensor::from_vec(ids, b * l, &dev)?;
        let mask = Tensor::from_vec(mask, (b, l), &dev)?;
        let mut x = self
            .embedding
            .index_select(&ids, 0)?
            .reshape((b, l, self.dim))?
            .broadcast_add(&self.positions.unsqueeze(0)?)?;
        // Keys outside the valid span get a large negative bias.
        let key_bias = ((mask.ones_like()? - &mask)? * -1e9)?.reshape((b, 1, 1, l))?;
        for layer in &self.layers {
            x = self.attend(layer, &x, &key_bias)?;
        }
        let m = mask.unsqueeze(2)?;
        let pooled = x.broadcast_mul(&m)?.sum(1)?;
        let count = m.sum(1)?;
        let global = pooled.broadcast_div(&count)?;
        Ok(TextTokens {
            seq: x.detach(),
            global: global.detach(),
            mask,
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn context_len(&self) -> usize {
        self.tokenizer.context_len()
    }
}

/// Token-wise residual MLP stack on top of the frozen encoder. Output
/// projections start at zero, so the adapter is the identity at init.
#[derive(Clone, Debug)]
pub struct TokenAdapter {
    layers: Vec<(Linear, Linear)>,
    dim: usize,
}

impl TokenAdapter {
    pub fn new(b: &mut Builder, dim: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let mut lb = b.pp(format!("layers.{i}"));
                let fc1 = Linear::new(&mut lb.pp("fc1"), dim, dim, LinearInit::DEFAULT)?;
                let fc2 = Linear::new(&mut lb.pp("fc2"), dim, dim, LinearInit::ZERO)?;
                Ok((fc1, fc2))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, dim })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (fc1, fc2) in &self.layers {
            let h = nn::lrelu_gain(&fc1.forward(&x)?)?;
            x = (&x + fc2.forward(&h)?)?;
        }
        Ok(x)
    }

    pub fn forward(&self, tokens: &TextTokens) -> Result<TextTokens> {
        if tokens.dim() != self.dim {
            return Err(Error::Config(format!(
                "adapter width {} does not match token width {}",
                self.dim,
                tokens.dim()
            )));
        }
        Ok(TextTokens {
            seq: self.apply(&tokens.seq)?,
            global: self.apply(&tokens.global)?,
            mask: tokens.mask.clone(),
        })
    }
}

/// MLP mapping `[z ‖ t_g]` (normalized to unit RMS) to the style vector `w`.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    layers: Vec<Linear>,
    z_dim: usize,
    t_dim: usize,
}

impl MappingNetwork {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let in_dim = cfg.z_dim + cfg.text_dim;
        let layers = (0..cfg.mapping_layers)
            .map(|i| {
                let d_in = if i == 0 { in_dim } else { cfg.w_dim };
                Linear::new(
                    &mut b.pp(format!("fc{i}")),
                    d_in,
                    cfg.w_dim,
                    LinearInit::DEFAULT.lr_mul(cfg.mapping_lr_mul),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            z_dim: cfg.z_dim,
            t_dim: cfg.text_dim,
        })
    }

    pub fn from_layers(layers: Vec<Linear>, z_dim: usize, t_dim: usize) -> Self {
        Self {
            layers,
            z_dim,
            t_dim,
        }
    }

    pub fn forward(&self, z: &Tensor, t_global: &Tensor) -> Result<Tensor> {
        if z.dim(D::Minus1)? != self.z_dim || t_global.dim(D::Minus1)? != self.t_dim {
            return Err(Error::Shape(format!(
                "mapping expects z width {} and t_g width {}, got {:?} and {:?}",
                self.z_dim,
                self.t_dim,
                z.dims(),
                t_global.dims()
            )));
        }
        for (name, t) in [("z", z), ("t_g", t_global)] {
            if !nn::all_finite(&t.to_dtype(DType::F32)?)? {
                return Err(Error::Validation(format!("{name} contains non-finite values")));
            }
        }
        let x = Tensor::cat(&[z, t_global], D::Minus1)?;
        let rms = (x.sqr()?.mean_keepdim(D::Minus1)? + 1e-8)?.sqrt()?;
        let mut x = x.broadcast_div(&rms)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = nn::lrelu_gain(&x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::nn::ParamStore;

    fn encoder(cfg: &ModelConfig) -> ToyTextEncoder {
        let mut store = ParamStore::new(7);
        ToyTextEncoder::new(&mut store.builder().pp("text_encoder"), cfg).unwrap()
    }

    fn vec2(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn empty_caption_is_specials_only() {
        let tok = Tokenizer::new(77, 1000);
        let t = tok.tokenize("");
        assert_eq!(&t.ids[..3], &[BOS, EOS, PAD]);
        assert_eq!(t.valid_len(), 2);
        assert_eq!(t.ids.len(), 77);
    }

    #[test]
    fn two_word_caption_has_four_valid_positions() {
        let tok = Tokenizer::new(77, 1000);
        let t = tok.tokenize("red circle");
        assert_eq!(t.valid_len(), 4);
        assert_eq!(t.ids[0], BOS);
        assert_eq!(t.ids[3], EOS);
        assert_eq!(tok.tokenize("red circle"), t);
    }

    #[test]
    fn truncation_keeps_eos() {
        let tok = Tokenizer::new(4, 1000);
        let t = tok.tokenize("a b c d e f");
        assert_eq!(t.valid_len(), 4);
        assert_eq!(t.ids[3], EOS);
    }

    #[test]
    fn encoder_is_deterministic_and_caption_sensitive() {
        let cfg = Config::tiny().model;
        let enc = encoder(&cfg);
        let caps = vec!["a red circle".to_string(), "a blue circle".to_string()];
        let a = enc.encode(&caps).unwrap();
        let b = enc.encode(&caps).unwrap();
        assert_eq!(vec2(&a.global), vec2(&b.global));
        assert_eq!(
            a.seq.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.seq.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let g = vec2(&a.global);
        assert_ne!(g[0], g[1]);
    }

    #[test]
    fn zero_embedding_gives_positional_only_global_token() {
        let cfg = Config::tiny().model;
        let zero = Tensor::zeros((cfg.vocab_size, cfg.text_dim), DType::F32, &nn::device()).unwrap();
        let enc = encoder(&cfg).with_embedding(zero);
        let t = enc
            .encode(&["circle".to_string(), "square".to_string()])
            .unwrap();
        let g = vec2(&t.global);
        assert_eq!(g[0], g[1]);
    }

    #[test]
    fn global_token_ignores_padding_length() {
        let mut cfg = Config::tiny().model;
        let short = encoder(&cfg).encode(&["a red circle".to_string()]).unwrap();
        cfg.context_len = 30;
        let long = encoder(&cfg).encode(&["a red circle".to_string()]).unwrap();
        for (a, b) in vec2(&short.global)[0].iter().zip(&vec2(&long.global)[0]) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn adapter_is_identity_at_init_and_keeps_mask() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(1);
        let enc = ToyTextEncoder::new(&mut store.builder().pp("text_encoder"), &cfg).unwrap();
        let adapter = TokenAdapter::new(&mut store.builder().pp("adapter"), cfg.text_dim, 2).unwrap();
        let t = enc.encode(&["a green square".to_string()]).unwrap();
        let a = adapter.forward(&t).unwrap();
        assert_eq!(vec2(&a.global), vec2(&t.global));
        assert_eq!(vec2(&a.mask), vec2(&t.mask));
    }

    #[test]
    fn adapter_width_mismatch_is_config_error() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(1);
        let enc = ToyTextEncoder::new(&mut store.builder().pp("text_encoder"), &cfg).unwrap();
        let adapter = TokenAdapter::new(&mut store.builder().pp("adapter"), cfg.text_dim + 1, 2).unwrap();
        let t = enc.encode(&["x".to_string()]).unwrap();
        assert!(matches!(adapter.forward(&t), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_mapping_returns_bias() {
        let dev = nn::device();
        let bias = Tensor::new(&[0.5f32, -1.0, 2.0], &dev).unwrap();
        let l0 = Linear::from_parts(Tensor::zeros((3, 5), DType::F32, &dev).unwrap(), Some(Tensor::zeros(3, DType::F32, &dev).unwrap()));
        let l1 = Linear::from_parts(Tensor::zeros((3, 3), DType::F32, &dev).unwrap(), Some(bias));
        let map = MappingNetwork::from_layers(vec![l0, l1], 3, 2);
        let z = Tensor::new(&[[1f32, 2.0, 3.0]], &dev).unwrap();
        let t = Tensor::new(&[[-4f32, 0.25]], &dev).unwrap();
        let w = map.forward(&z, &t).unwrap();
        assert_eq!(vec2(&w), vec![vec![0.5, -1.0, 2.0]]);
    }

    #[test]
    fn mapping_rejects_non_finite() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(1);
        let map = MappingNetwork::new(&mut store.builder().pp("mapping"), &cfg).unwrap();
        let dev = nn::device();
        let mut zv = vec![0f32; cfg.z_dim];
        zv[0] = f32::NAN;
        let z = Tensor::from_vec(zv, (1, cfg.z_dim), &dev).unwrap();
        let t = Tensor::zeros((1, cfg.text_dim), DType::F32, &dev).unwrap();
        assert!(matches!(map.forward(&z, &t), Err(Error::Validation(_))));
    }

    #[test]
    fn mapping_is_deterministic_and_latent_sensitive() {
        let cfg = Config::tiny().model;
        let mut store = ParamStore::new(1);
        let map = MappingNetwork::new(&mut store.builder().pp("mapping"), &cfg).unwrap();
        let mut rng = nn::labeled_rng(0, "z");
        let z = nn::randn(&mut rng, &[2, cfg.z_dim], 1.0).unwrap();
        let t = nn::randn(&mut rng, &[1, cfg.text_dim], 1.0).unwrap().repeat((2, 1)).unwrap();
        let w1 = vec2(&map.forward(&z, &t).unwrap());
        let w2 = vec2(&map.forward(&z, &t).unwrap());
        assert_eq!(w1, w2);
        assert_ne!(w1[0], w1[1]);
    }
}
