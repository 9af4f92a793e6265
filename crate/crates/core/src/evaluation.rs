//! Fréchet distance on embedder features, FID scoring of a generator, and
//! interpolation in caption and latent space.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{classify_color, Attributes, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::features::RandomConvExtractor;
use crate::generator::Generator;
use crate::moe::{routing_map, RoutingMap};
use crate::nn;
use crate::text::TextTokens;

/// Running mean and scatter matrix of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    mean: DVector<f64>,
    /// Sum of outer products of deviations from the mean.
    scatter: DMatrix<f64>,
    count: usize,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
            count: 0,
        }
    }

    /// Statistics with the given mean and (unbiased) covariance.
    pub fn from_moments(mean: &[f64], cov: &[f64], count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d || count < 2 {
            return Err(Error::Shape(format!(
                "moments need a {d}×{d} covariance and count >= 2"
            )));
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            scatter: DMatrix::from_row_slice(d, d, cov) * (count - 1) as f64,
            count,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut s = Self::new(d);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    /// Welford update with one sample.
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("feature width {} != {}", x.len(), self.dim())));
        }
        let x = DVector::from_column_slice(x);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
        Ok(())
    }

    pub fn push_tensor(&mut self, feats: &Tensor) -> Result<()> {
        for row in feats.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            self.push(&row)?;
        }
        Ok(())
    }

    /// Order-independent combination of two partial statistics.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("merging statistics of different widths".into()));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let n = (self.count + other.count) as f64;
        let delta = &other.mean - &self.mean;
        let w = self.count as f64 * other.count as f64 / n;
        Ok(Self {
            mean: &self.mean + &delta * (other.count as f64 / n),
            scatter: &self.scatter + &other.scatter + &delta * delta.transpose() * w,
            count: self.count + other.count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        &self.scatter / (self.count - 1) as f64
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Validation(format!("{what} covariance is not symmetric")));
    }
    Ok(())
}

fn clipped_eigenvalues(values: &DVector<f64>) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            if v < -1e-6 {
                log::warn!("covariance eigenvalue {v:.3e} below tolerance; clipped to zero");
            }
            v.max(0.0)
        })
        .collect()
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots: Vec<f64> = clipped_eigenvalues(&eig.eigenvalues).into_iter().map(f64::sqrt).collect();
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&DVector::from_vec(roots)) * v.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the cross term evaluated
/// as `Tr((√Σa Σb √Σa)^{1/2})` on a symmetric matrix.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.dim(), b.dim())));
    }
    for s in [a, b] {
        if s.count <= s.dim() {
            log::warn!(
                "only {} samples for {}-dimensional features; covariance is rank deficient",
                s.count,
                s.dim()
            );
        }
    }
    let ca = a.covariance();
    let cb = b.covariance();
    check_symmetric(&ca, "first")?;
    check_symmetric(&cb, "second")?;
    // Remove rounding asymmetry left by the rank-one updates.
    let ca = (&ca + ca.transpose()) * 0.5;
    let cb = (&cb + cb.transpose()) * 0.5;
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clipped_eigenvalues(&SymmetricEigen::new(inner).eigenvalues)
        .into_iter()
        .map(f64::sqrt)
        .sum();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Frozen embedders per resolution plus a cache of real-data statistics.
#[derive(Debug)]
pub struct FidEvaluator {
    seed: u64,
    width: usize,
    extractors: Mutex<BTreeMap<usize, RandomConvExtractor>>,
    real_cache: Mutex<HashMap<(String, usize, usize, u64), FeatureStats>>,
}

pub const FID_CHUNK: usize = 64;

impl FidEvaluator {
    pub fn new(seed: u64, width: usize) -> Self {
        Self {
            seed,
            width,
            extractors: Mutex::new(BTreeMap::new()),
            real_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.width * crate::features::EXTRACTOR_LAYERS
    }

    fn extractor(&self, resolution: usize) -> Result<RandomConvExtractor> {
        let mut map = self.extractors.lock().unwrap();
        if let Some(e) = map.get(&resolution) {
            return Ok(e.clone());
        }
        let e = RandomConvExtractor::new(self.seed, &format!("fid.{resolution}"), self.width, Some(resolution))?;
        map.insert(resolution, e.clone());
        Ok(e)
    }

    /// `(B, 3, r, r)` images → `(B, d_f)` features; `r` must equal `resolution`.
    pub fn extract_features(&self, images: &Tensor, resolution: usize) -> Result<Tensor> {
        Ok(self.extractor(resolution)?.forward(&images.detach())?.detach())
    }

    pub fn stats_of(&self, images: &Tensor, resolution: usize) -> Result<FeatureStats> {
        let mut stats = FeatureStats::new(self.feature_dim());
        let n = images.dim(0)?;
        let mut start = 0;
        while start < n {
            let len = FID_CHUNK.min(n - start);
            stats.push_tensor(&self.extract_features(&images.narrow(0, start, len)?, resolution)?)?;
            start += len;
        }
        Ok(stats)
    }

    /// Statistics of the given dataset rows.
    pub fn dataset_stats(&self, dataset: &Dataset, indices: &[usize], resolution: usize) -> Result<FeatureStats> {
        let mut stats = FeatureStats::new(self.feature_dim());
        for chunk in indices.chunks(FID_CHUNK) {
            let imgs = dataset.images(chunk, resolution)?;
            stats.push_tensor(&self.extract_features(&imgs, resolution)?)?;
        }
        Ok(stats)
    }

    /// Statistics of `n` real images drawn with `seed`, cached per
    /// `(dataset, resolution, n, seed)`.
    pub fn real_stats(&self, dataset: &Dataset, resolution: usize, n: usize, seed: u64) -> Result<FeatureStats> {
        let key = (dataset.hash(), resolution, n, seed);
        if let Some(s) = self.real_cache.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let mut rng = nn::labeled_rng(seed, "fid.real");
        let idx = draw_indices(&mut rng, dataset.len(), n);
        let stats = self.dataset_stats(dataset, &idx, resolution)?;
        self.real_cache.lock().unwrap().insert(key, stats.clone());
        Ok(stats)
    }

    /// Statistics of `n` generated images at the generator's current
    /// resolution, with captions drawn from `dataset` and latents from `seed`.
    pub fn generator_stats(&self, generator: &Generator, dataset: &Dataset, n: usize, seed: u64) -> Result<FeatureStats> {
        let res = generator.resolution();
        let z_dim = generator.config().z_dim;
        let mut rng = nn::labeled_rng(seed, "fid.fake");
        let idx = draw_indices(&mut rng, dataset.len(), n);
        let mut stats = FeatureStats::new(self.feature_dim());
        for chunk in idx.chunks(FID_CHUNK) {
            let captions: Vec<String> = chunk.iter().map(|&i| dataset.caption(i).to_string()).collect();
            let z = nn::randn(&mut rng, &[chunk.len(), z_dim], 1.0)?;
            let out = generator.synthesize(&z, &captions)?;
            let img = out.image().detach().clamp(-1f32, 1f32)?;
            stats.push_tensor(&self.extract_features(&img, res)?)?;
        }
        Ok(stats)
    }

    /// FID between `n` generated and `n` real images.
    pub fn fid_score(&self, generator: &Generator, dataset: &Dataset, n: usize, seed: u64) -> Result<f64> {
        let real = self.real_stats(dataset, generator.resolution(), n, seed)?;
        let fake = self.generator_stats(generator, dataset, n, seed)?;
        frechet_distance(&fake, &real)
    }
}

/// `n` indices: without replacement when the dataset is large enough.
pub fn draw_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    if n <= len {
        rand::seq::index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Appends one `(step, resolution, n, seed, value)` row, writing a header
/// first when the file is new.
pub fn append_fid_csv(path: &Path, step: u64, resolution: usize, n: usize, seed: u64, value: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,resolution,n,seed,fid")?;
    }
    writeln!(f, "{step},{resolution},{n},{seed},{value}")?;
    Ok(())
}

fn blend(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(((a * (1.0 - alpha))? + (b * alpha)?)?)
}

/// Element-wise interpolation of two captions' tokens. Endpoints return the
/// inputs unchanged; interior points use the union of the validity masks.
pub fn interpolate_tokens(a: &TextTokens, b: &TextTokens, alphas: &[f64]) -> Result<Vec<TextTokens>> {
    if a.seq.dims() != b.seq.dims() {
        return Err(Error::Shape("token tensors of different shapes".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            if alpha == 0.0 {
                return Ok(a.clone());
            }
            if alpha == 1.0 {
                return Ok(b.clone());
            }
            Ok(TextTokens {
                seq: blend(&a.seq, &b.seq, alpha)?,
                global: blend(&a.global, &b.global, alpha)?,
                mask: a.mask.maximum(&b.mask)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSpace {
    Z,
    W,
}

/// Spherical interpolation of one pair of vectors (norms interpolated
/// linearly). Antipodal pairs travel through a deterministic orthogonal
/// direction; a zero-norm endpoint falls back to linear interpolation.
pub fn slerp(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return a.to_vec();
    }
    if alpha == 1.0 {
        return b.to_vec();
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm latent endpoint; using linear interpolation");
        return a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
    }
    let ua: Vec<f64> = a.iter().map(|v| v / na).collect();
    let ub: Vec<f64> = b.iter().map(|v| v / nb).collect();
    let cos = ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    let norm = (1.0 - alpha) * na + alpha * nb;
    let omega = cos.acos();
    if omega.sin().abs() < 1e-12 {
        if cos > 0.0 {
            return ua.iter().map(|v| v * norm).collect();
        }
        // Antipodal: rotate within the plane of `ua` and a fixed orthogonal axis.
        let k = (0..ua.len())
            .min_by(|&i, &j| ua[i].abs().total_cmp(&ua[j].abs()))
            .unwrap_or(0);
        let mut u: Vec<f64> = ua.iter().map(|v| -v * ua[k]).collect();
        u[k] += 1.0;
        let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let theta = std::f64::consts::PI * alpha;
        return ua
            .iter()
            .zip(&u)
            .map(|(x, y)| norm * (theta.cos() * x + theta.sin() * y / nu))
            .collect();
    }
    let s = omega.sin();
    let wa = ((1.0 - alpha) * omega).sin() / s;
    let wb = (alpha * omega).sin() / s;
    ua.iter().zip(&ub).map(|(x, y)| norm * (wa * x + wb * y)).collect()
}

/// Interpolates `(B, d)` latent codes row by row: spherical in Z, linear in W.
pub fn interpolate_latents(a: &Tensor, b: &Tensor, space: LatentSpace, alphas: &[f64]) -> Result<Vec<Tensor>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape("latent endpoints of different shapes".into()));
    }
    let (rows, d) = a.dims2()?;
    let va = a.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let vb = b.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    alphas
        .iter()
        .map(|&alpha| {
            if alpha == 0.0 {
                return Ok(a.clone());
            }
            if alpha == 1.0 {
                return Ok(b.clone());
            }
            match space {
                LatentSpace::W => blend(a, b, alpha),
                LatentSpace::Z => {
                    let data: Vec<f32> = va
                        .iter()
                        .zip(&vb)
                        .flat_map(|(x, y)| slerp(x, y, alpha))
                        .map(|v| v as f32)
                        .collect();
                    Ok(Tensor::from_vec(data, (rows, d), a.device())?)
                }
            }
        })
        .collect()
}

/// `count` standard-normal latents derived only from `seed`.
pub fn sample_latents(seed: u64, count: usize, z_dim: usize) -> Result<Tensor> {
    let mut rng = nn::labeled_rng(seed, "sample.z");
    nn::randn(&mut rng, &[count, z_dim], 1.0)
}

/// Fraction of `n` generated samples whose dominant foreground color matches
/// the color named in their caption. Captions cycle through every
/// attribute combination of `spec`; an image without a foreground counts as
/// a miss.
pub fn caption_color_accuracy(generator: &Generator, spec: &SyntheticSpec, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InsufficientData { required: 1, available: 0 });
    }
    let mut combos = Vec::new();
    for color in &spec.colors {
        for shape in &spec.shapes {
            for background in &spec.backgrounds {
                combos.push(Attributes {
                    shape: *shape,
                    color: color.clone(),
                    background: background.clone(),
                });
            }
        }
    }
    let res = generator.resolution();
    let z = sample_latents(seed, n, generator.config().z_dim)?;
    let mut hits = 0usize;
    for start in (0..n).step_by(FID_CHUNK) {
        let end = (start + FID_CHUNK).min(n);
        let attrs: Vec<&Attributes> = (start..end).map(|i| &combos[i % combos.len()]).collect();
        let captions: Vec<String> = attrs.iter().map(|a| a.caption()).collect();
        let img = generator
            .synthesize(&z.narrow(0, start, end - start)?, &captions)?
            .image()
            .detach()
            .clamp(-1f32, 1f32)?;
        for (k, a) in attrs.iter().enumerate() {
            let pixels = img.get(k)?.flatten_all()?.to_vec1::<f32>()?;
            if classify_color(&pixels, res, spec).as_deref() == Some(a.color.as_str()) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Expert assignment maps of one generated image, one per MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteViz {
    pub layers: Vec<(usize, RoutingMap)>,
}

/// Routes a single `(prompt, seed)` sample through `generator` and lays out
/// the expert index of every feature point per layer.
pub fn route_viz(generator: &Generator, prompt: &str, seed: u64) -> Result<RouteViz> {
    let z = sample_latents(seed, 1, generator.config().z_dim)?;
    let out = generator.synthesize(&z, &[prompt.to_string()])?;
    let layers = out
        .routing
        .iter()
        .map(|l| {
            routing_map(&l.decision.indices, l.decision.experts, l.resolution, l.resolution)
                .map(|m| (l.resolution, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RouteViz { layers })
}

impl RouteViz {
    /// Sidecar text: one line per layer, `resolution: f_0 f_1 …`.
    pub fn utilization_text(&self) -> String {
        let mut s = String::new();
        for (res, map) in &self.layers {
            let fr: Vec<String> = map.utilization().iter().map(|f| format!("{f:.6}")).collect();
            s.push_str(&format!("{res}x{res}: {}\n", fr.join(" ")));
        }
        s
    }

    /// Writes `layer_{r}x{r}.png` per layer plus `utilization.txt`; returns
    /// the written paths.
    pub fn write(&self, dir: &Path, scale: usize) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (res, map) in &self.layers {
            let p = dir.join(format!("layer_{res}x{res}.png"));
            map.write_png(&p, scale)?;
            paths.push(p);
        }
        let p = dir.join("utilization.txt");
        std::fs::write(&p, self.utilization_text())?;
        paths.push(p);
        Ok(paths)
    }
}

/// Evenly spaced `steps` values from 0 to 1 inclusive.
pub fn alpha_steps(steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    #[test]
    fn frechet_one_dimensional_closed_forms() {
        let a = FeatureStats::from_moments(&[0.0], &[1.0], 10).unwrap();
        let b = FeatureStats::from_moments(&[1.0], &[1.0], 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = FeatureStats::from_moments(&[0.0], &[4.0], 10).unwrap();
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn non_symmetric_covariance_is_rejected() {
        let a = FeatureStats::from_moments(&[0.0, 0.0], &[1.0, 0.5, 0.0, 1.0], 10).unwrap();
        let b = FeatureStats::from_moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 10).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn welford_matches_two_pass_and_merge_is_order_free() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos() * 2.0, i as f64 / 7.0])
            .collect();
        let all = FeatureStats::from_rows(&rows).unwrap();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov = all.covariance();
        for i in 0..3 {
            assert!((all.mean()[i] - mean[i]).abs() < 1e-12);
            for j in 0..3 {
                let c: f64 = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0);
                assert!((cov[(i, j)] - c).abs() < 1e-12);
            }
        }
        let left = FeatureStats::from_rows(&rows[..7]).unwrap();
        let right = FeatureStats::from_rows(&rows[7..]).unwrap();
        let m1 = left.merge(&right).unwrap();
        let m2 = right.merge(&left).unwrap();
        assert!((m1.covariance() - cov.clone()).amax() < 1e-12);
        assert!((m2.covariance() - cov).amax() < 1e-12);
    }

    #[test]
    fn slerp_antipodal_midpoint_is_orthogonal_unit() {
        let a = [1.0, 0.0, 0.0];
        let b = [-1.0, 0.0, 0.0];
        let m = slerp(&a, &b, 0.5);
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = m.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(dot.abs() < 1e-12);
        let q = slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[0] - h).abs() < 1e-12 && (q[1] - h).abs() < 1e-12);
        let z = slerp(&[0.0, 0.0], &[2.0, 4.0], 0.25);
        assert_eq!(z, vec![0.5, 1.0]);
    }

    #[test]
    fn latent_endpoints_and_w_midpoint() {
        let dev = device();
        let a = Tensor::new(&[[0.3f32, -1.2, 2.0]], &dev).unwrap();
        let b = Tensor::new(&[[1.1f32, 0.4, -0.5]], &dev).unwrap();
        for space in [LatentSpace::Z, LatentSpace::W] {
            let out = interpolate_latents(&a, &b, space, &[0.0, 0.5, 1.0]).unwrap();
            assert_eq!(out[0].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
            assert_eq!(out[2].to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
            if space == LatentSpace::W {
                let mid = out[1].to_vec2::<f32>().unwrap();
                for (m, e) in mid[0].iter().zip([0.7f32, -0.4, 0.75]) {
                    assert!((m - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn alpha_steps_cover_unit_interval() {
        assert_eq!(alpha_steps(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(alpha_steps(1), vec![0.0]);
    }
}
