//! Captioned image datasets: the synthetic shapes generator, folder
//! ingestion with sidecar captions, batching and mismatch shuffling.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;

/// Named colors available to the synthetic generator, RGB in `[0, 1]`.
pub const NAMED_COLORS: [(&str, [f32; 3]); 11] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.5, 0.15, 0.7]),
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("gray", [0.5, 0.5, 0.5]),
];

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    NAMED_COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(Shape::Circle),
            "square" => Some(Shape::Square),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    /// Whether `(u, v)` lies inside the shape centered at `(cx, cy)` with extent `size`.
    fn contains(self, u: f64, v: f64, cx: f64, cy: f64, size: f64) -> bool {
        let half = size / 2.0;
        match self {
            Shape::Circle => (u - cx).powi(2) + (v - cy).powi(2) <= half * half,
            Shape::Square => (u - cx).abs() <= half && (v - cy).abs() <= half,
            Shape::Triangle => {
                let top = cy - half;
                let bottom = cy + half;
                if v < top || v > bottom {
                    return false;
                }
                (u - cx).abs() <= (v - top) / size * half
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    pub backgrounds: Vec<String>,
    /// Shape extent as a fraction of the image side.
    pub size_range: [f64; 2],
    pub resolution: usize,
    /// Supersampling factor per axis for antialiasing.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            backgrounds: ["black", "white", "gray"].iter().map(|s| s.to_string()).collect(),
            size_range: [0.35, 0.65],
            resolution: 64,
            supersample: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Two colors, two shapes, one background.
    pub fn two_by_two(seed: u64) -> Self {
        Self {
            shapes: vec![Shape::Circle, Shape::Square],
            colors: vec!["red".into(), "blue".into()],
            backgrounds: vec!["black".into()],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config(
                "synthetic spec needs at least one shape, color and background".into(),
            ));
        }
        for c in self.colors.iter().chain(&self.backgrounds) {
            if color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown color `{c}`")));
            }
        }
        let [lo, hi] = self.size_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad size range {:?}", self.size_range)));
        }
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config("synthetic resolution must be a power of two >= 4".into()));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attributes {
    pub shape: Shape,
    pub color: String,
    pub background: String,
}

impl Attributes {
    pub fn caption(&self) -> String {
        format!("a {} {} on a {} background", self.color, self.shape, self.background)
    }
}

/// Inverse of [`Attributes::caption`].
pub fn parse_caption(caption: &str) -> Option<Attributes> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    match words.as_slice() {
        ["a", color, shape, "on", "a", bg, "background"] => Some(Attributes {
            shape: Shape::parse(shape)?,
            color: color.to_string(),
            background: bg.to_string(),
        }),
        _ => None,
    }
}

/// Renders one image `3 × res × res` in `[-1, 1]`, channel-major.
pub fn render(attrs: &Attributes, size: f64, cx: f64, cy: f64, res: usize, supersample: usize) -> Vec<f32> {
    let fg = color_rgb(&attrs.color).unwrap_or([1.0; 3]);
    let bg = color_rgb(&attrs.background).unwrap_or([0.0; 3]);
    let mut out = vec![0f32; 3 * res * res];
    let ss = supersample as f64;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0usize;
            for sy in 0..supersample {
                for sx in 0..supersample {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss) / res as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss) / res as f64;
                    if attrs.shape.contains(u, v, cx, cy, size) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (supersample * supersample) as f32;
            for ch in 0..3 {
                let val = bg[ch] * (1.0 - cov) + fg[ch] * cov;
                out[ch * res * res + y * res + x] = (val * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

/// 2×2 box-filter downsampling of a `3 × res × res` image.
pub fn downsample2x(img: &[f32], res: usize) -> Vec<f32> {
    let half = res / 2;
    let mut out = vec![0f32; 3 * half * half];
    for ch in 0..3 {
        let src = &img[ch * res * res..(ch + 1) * res * res];
        for y in 0..half {
            for x in 0..half {
                let s = src[2 * y * res + 2 * x]
                    + src[2 * y * res + 2 * x + 1]
                    + src[(2 * y + 1) * res + 2 * x]
                    + src[(2 * y + 1) * res + 2 * x + 1];
                out[ch * half * half + y * half + x] = s / 4.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
enum Source {
    Memory(Arc<Vec<f32>>),
    File(PathBuf),
}

#[derive(Clone, Debug)]
struct Entry {
    caption: String,
    source: Source,
}

/// Captioned images. Synthetic data lives in memory at the base resolution;
/// folder data is decoded on first access. Both are resized on demand.
#[derive(Debug)]
pub struct Dataset {
    entries: Vec<Entry>,
    base_resolution: usize,
    cache: Mutex<HashMap<(usize, usize), Arc<Vec<f32>>>>,
    warnings: Vec<String>,
    spec: Option<SyntheticSpec>,
    hash: OnceLock<String>,
}

/// A batch ready for the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 3, r, r)` in `[-1, 1]`.
    pub images: Tensor,
    pub captions: Vec<String>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.dims()[2]
    }
}

/// Draws `n` captioned images deterministically from the spec seed.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic dataset size must be >= 1".into()));
    }
    let mut rng = nn::labeled_rng(spec.seed, "synthetic");
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let color = spec.colors[rng.random_range(0..spec.colors.len())].clone();
        let background = spec.backgrounds[rng.random_range(0..spec.backgrounds.len())].clone();
        let [lo, hi] = spec.size_range;
        let size = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let half = size / 2.0;
        let cx = if half < 0.5 { rng.random_range(half..1.0 - half) } else { 0.5 };
        let cy = if half < 0.5 { rng.random_range(half..1.0 - half) } else { 0.5 };
        let attrs = Attributes {
            shape,
            color,
            background,
        };
        let img = render(&attrs, size, cx, cy, spec.resolution, spec.supersample);
        entries.push(Entry {
            caption: attrs.caption(),
            source: Source::Memory(Arc::new(img)),
        });
    }
    Ok(Dataset {
        entries,
        base_resolution: spec.resolution,
        cache: Mutex::new(HashMap::new()),
        warnings: Vec::new(),
        spec: Some(spec.clone()),
        hash: OnceLock::new(),
    })
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Reads `stem.{png,jpg}` images paired with `stem.txt` captions. Pairs with
/// a missing caption or an unreadable image are skipped with a warning.
pub fn load_folder(path: &Path, base_resolution: usize) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for file in files {
        let caption_path = file.with_extension("txt");
        let caption = match std::fs::read_to_string(&caption_path) {
            Ok(c) => c.trim().to_string(),
            Err(_) => {
                let msg = format!("{}: missing caption file, skipped", file.display());
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        if let Err(e) = image::image_dimensions(&file) {
            let msg = format!("{}: unreadable image ({e}), skipped", file.display());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        entries.push(Entry {
            caption,
            source: Source::File(file),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset {
        entries,
        base_resolution,
        cache: Mutex::new(HashMap::new()),
        warnings,
        spec: None,
        hash: OnceLock::new(),
    })
}

fn decode_file(path: &Path, res: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == res {
        cropped
    } else {
        image::imageops::resize(&cropped, res as u32, res as u32, image::imageops::FilterType::Triangle)
    };
    let mut out = vec![0f32; 3 * res * res];
    for (x, y, px) in resized.enumerate_pixels() {
        for ch in 0..3 {
            out[ch * res * res + y as usize * res + x as usize] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_resolution(&self) -> usize {
        self.base_resolution
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn synthetic_spec(&self) -> Option<&SyntheticSpec> {
        self.spec.as_ref()
    }

    pub fn caption(&self, i: usize) -> &str {
        &self.entries[i].caption
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.caption.as_str())
    }

    /// Image `i` at resolution `res`, channel-major in `[-1, 1]`.
    pub fn image(&self, i: usize, res: usize) -> Result<Arc<Vec<f32>>> {
        if res > self.base_resolution || !res.is_power_of_two() {
            return Err(Error::Data(format!(
                "cannot serve resolution {res} from base resolution {}",
                self.base_resolution
            )));
        }
        if let Some(hit) = self.cache.lock().unwrap().get(&(i, res)) {
            return Ok(hit.clone());
        }
        let img = match &self.entries[i].source {
            Source::Memory(base) => {
                let mut cur = base.as_ref().clone();
                let mut r = self.base_resolution;
                while r > res {
                    cur = downsample2x(&cur, r);
                    r /= 2;
                }
                cur
            }
            Source::File(path) => decode_file(path, res)?,
        };
        let img = Arc::new(img);
        self.cache.lock().unwrap().insert((i, res), img.clone());
        Ok(img)
    }

    pub fn images(&self, indices: &[usize], res: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * 3 * res * res);
        for &i in indices {
            data.extend_from_slice(&self.image(i, res)?);
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, res, res), &nn::device())?)
    }

    pub fn batch(&self, indices: &[usize], res: usize) -> Result<Batch> {
        Ok(Batch {
            images: self.images(indices, res)?,
            captions: indices.iter().map(|&i| self.entries[i].caption.clone()).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Uniformly sampled batch without replacement.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, size: usize, res: usize) -> Result<Batch> {
        let size = size.min(self.len());
        let idx = rand::seq::index::sample(rng, self.len(), size).into_vec();
        self.batch(&idx, res)
    }

    /// Content hash over captions and pixels (or file paths for folders).
    pub fn hash(&self) -> String {
        self.hash.get_or_init(|| self.compute_hash()).clone()
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.base_resolution as u64).to_le_bytes());
        for e in &self.entries {
            h.update(e.caption.as_bytes());
            h.update([0u8]);
            match &e.source {
                Source::Memory(img) => {
                    for v in img.iter() {
                        h.update(v.to_le_bytes());
                    }
                }
                Source::File(p) => h.update(p.to_string_lossy().as_bytes()),
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes every pair as `NNNNNN.png` + `NNNNNN.txt`.
    pub fn export_folder(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let res = self.base_resolution;
        for i in 0..self.len() {
            let img = self.image(i, res)?;
            crate::export::write_rgb_png(&dir.join(format!("{i:06}.png")), &img, res, res)?;
            std::fs::write(dir.join(format!("{i:06}.txt")), self.caption(i))?;
        }
        Ok(())
    }
}

/// Dataset described by a data configuration. Folder images are served up
/// to `base_resolution`.
pub fn from_config(cfg: &crate::config::DataConfig, base_resolution: usize) -> Result<Dataset> {
    match cfg.kind {
        crate::config::DataKind::Synthetic => generate_synthetic(&cfg.synthetic, cfg.n),
        crate::config::DataKind::Folder => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("folder data needs `data.path`".into()))?;
            load_folder(path, base_resolution)
        }
    }
}

/// A uniformly random permutation of `0..n` without fixed points.
pub fn mismatch_shuffle(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("batch of {n} has no derangement")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Color of the dominant non-background region, matched against the spec's
/// palette. `None` when the image shows no foreground.
pub fn classify_color(image: &[f32], res: usize, spec: &SyntheticSpec) -> Option<String> {
    let px = |i: usize| -> [f32; 3] {
        [
            (image[i] + 1.0) / 2.0,
            (image[res * res + i] + 1.0) / 2.0,
            (image[2 * res * res + i] + 1.0) / 2.0,
        ]
    };
    let dist = |a: [f32; 3], b: [f32; 3]| -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
    };
    let nearest = |c: [f32; 3], names: &[String]| -> Option<(String, [f32; 3])> {
        names
            .iter()
            .filter_map(|n| color_rgb(n).map(|rgb| (n.clone(), rgb)))
            .min_by(|a, b| dist(c, a.1).total_cmp(&dist(c, b.1)))
    };
    let mut border = [0f32; 3];
    let mut nb = 0.0;
    for y in 0..res {
        for x in 0..res {
            if x == 0 || y == 0 || x == res - 1 || y == res - 1 {
                let p = px(y * res + x);
                for ch in 0..3 {
                    border[ch] += p[ch];
                }
                nb += 1.0;
            }
        }
    }
    let border = border.map(|v| v / nb);
    let (_, bg) = nearest(border, &spec.backgrounds)?;
    let mut sum = [0f32; 3];
    let mut count = 0usize;
    for i in 0..res * res {
        let p = px(i);
        if dist(p, bg) > 0.3 {
            for ch in 0..3 {
                sum[ch] += p[ch];
            }
            count += 1;
        }
    }
    if count * 50 < res * res {
        return None;
    }
    let mean = sum.map(|v| v / count as f32);
    nearest(mean, &spec.colors).map(|(n, _)| n)
}
