//! Sparse mixture of experts: a top-1 router conditioned on the feature point
//! and the style vector, per-point expert dispatch with gate scaling, the
//! load-balance loss and routing-map export.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, Linear, LinearInit};

/// Two-layer per-point MLP `C → hidden → C`.
#[derive(Clone, Debug)]
pub struct Expert {
    fc1: Linear,
    fc2: Linear,
}

impl Expert {
    pub fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.pp("fc1"), dim, hidden, LinearInit::DEFAULT)?,
            fc2: Linear::new(&mut b.pp("fc2"), hidden, dim, LinearInit::ZERO)?,
        })
    }

    pub fn from_parts(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }

    /// `x` is `(M, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&nn::lrelu(&self.fc1.forward(x)?)?)
    }
}

/// `N` experts with identical shapes, plus a per-expert invocation counter.
#[derive(Clone, Debug)]
pub struct ExpertPool {
    experts: Vec<Expert>,
    calls: Arc<Vec<AtomicUsize>>,
}

impl ExpertPool {
    pub fn new(b: &mut Builder, n: usize, dim: usize, hidden: usize) -> Result<Self> {
        let experts = (0..n)
            .map(|j| Expert::new(&mut b.pp(j), dim, hidden))
            .collect::<Result<Vec<_>>>()?;
        Self::from_experts(experts)
    }

    pub fn from_experts(experts: Vec<Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("expert pool needs at least one expert".into()));
        }
        let calls = Arc::new((0..experts.len()).map(|_| AtomicUsize::new(0)).collect());
        Ok(Self { experts, calls })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn expert(&self, j: usize) -> &Expert {
        &self.experts[j]
    }

    /// Number of feature points each expert has processed since the last reset.
    pub fn point_evaluations(&self) -> Vec<usize> {
        self.calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_counters(&self) {
        for c in self.calls.iter() {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Top-1 routing result for `M` flattened points.
#[derive(Clone, Debug)]
pub struct RoutingDecision {
    /// Expert index per point.
    pub indices: Vec<usize>,
    /// Router probability of the chosen expert, `(M,)`; differentiable.
    pub gates: Tensor,
    /// Full router probabilities `(M, N)`; differentiable.
    pub probs: Tensor,
    pub experts: usize,
}

impl RoutingDecision {
    pub fn points(&self) -> usize {
        self.indices.len()
    }

    pub fn gate_values(&self) -> Result<Vec<f32>> {
        Ok(self.gates.to_vec1::<f32>()?)
    }

    pub fn stats(&self) -> Result<RoutingStats> {
        let m = self.indices.len() as f64;
        let mut counts = vec![0usize; self.experts];
        for &j in &self.indices {
            counts[j] += 1;
        }
        Ok(RoutingStats {
            fractions: counts.iter().map(|&c| c as f64 / m).collect(),
            mean_probs: self.probs.mean(0)?,
        })
    }
}

/// Dispatch fractions `f_j` and mean router probabilities `P̄_j` for one layer.
#[derive(Clone, Debug)]
pub struct RoutingStats {
    pub fractions: Vec<f64>,
    /// `(N,)`, differentiable.
    pub mean_probs: Tensor,
}

impl RoutingStats {
    pub fn mean_prob_values(&self) -> Result<Vec<f64>> {
        Ok(self
            .mean_probs
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}

/// `alpha · N · Σ_j f_j · P̄_j`; the fractions are constants, so gradients
/// reach the router only through `P̄`.
pub fn load_balance_loss(stats: &RoutingStats, alpha: f64) -> Result<Tensor> {
    let n = stats.fractions.len();
    let f = Tensor::from_vec(
        stats.fractions.iter().map(|&x| x as f32).collect::<Vec<_>>(),
        n,
        stats.mean_probs.device(),
    )?;
    let dot = (f * &stats.mean_probs)?.sum_all()?;
    Ok((dot * (alpha * n as f64))?)
}

/// Lowest index among maximal entries.
pub fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub const ROUTER_EPS: f64 = 1e-8;
/// Energy of the style part of the router input relative to the point part.
pub const ROUTER_STYLE_SHARE: f64 = 0.25;

/// Linear router over `concat(point, w)` with both parts normalized.
#[derive(Clone, Debug)]
pub struct Router {
    linear: Linear,
}

impl Router {
    pub fn new(b: &mut Builder, dim: usize, w_dim: usize, experts: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(&mut b.pp("linear"), dim + w_dim, experts, LinearInit::DEFAULT)?,
        })
    }

    pub fn from_linear(linear: Linear) -> Self {
        Self { linear }
    }

    pub fn experts(&self) -> usize {
        self.linear.out_dim()
    }

    /// `points` is `(B, P, C)` and `w` is `(B, d_w)`; points are flattened
    /// sample-major.
    pub fn route(&self, points: &Tensor, w: &Tensor) -> Result<RoutingDecision> {
        let (b, p, c) = points.dims3()?;
        let wd = w.dim(1)?;
        // Points are centered over the sample's positions and brought to unit
        // RMS; the style is normalized and carries a quarter of a point's
        // energy. At init styles are nearly equal across a batch, so a strong
        // style term acts as a shared bias that can starve an expert.
        let wn = (nn::rms_norm_last(w, ROUTER_EPS)? * (ROUTER_STYLE_SHARE * c as f64 / wd as f64).sqrt())?;
        let wb = wn.reshape((b, 1, wd))?.broadcast_as((b, p, wd))?.contiguous()?;
        let centered = points.broadcast_sub(&points.mean_keepdim(1)?)?;
        let pn = nn::rms_norm_last(&centered, ROUTER_EPS)?;
        let x = Tensor::cat(&[&pn, &wb], 2)?.reshape((b * p, c + wd))?;
        let logits = self.linear.forward(&x)?;
        self.decide(&logits)
    }

    /// Top-1 decision from router logits `(M, N)`.
    pub fn decide(&self, logits: &Tensor) -> Result<RoutingDecision> {
        let probs = nn::softmax_last(logits)?;
        let host = logits.to_vec2::<f32>()?;
        let indices: Vec<usize> = host.iter().map(|r| argmax_lowest(r)).collect();
        let idx = Tensor::from_vec(
            indices.iter().map(|&j| j as u32).collect::<Vec<_>>(),
            (indices.len(), 1),
            logits.device(),
        )?;
        let gates = probs.gather(&idx, 1)?.squeeze(1)?;
        Ok(RoutingDecision {
            indices,
            gates,
            probs,
            experts: logits.dim(D::Minus1)?,
        })
    }
}

/// `out_k = p_k · FFN_{j_k}(x_k) + x_k` for `x` of shape `(M, C)`. Exactly one
/// expert runs per point; results are written back in point order.
pub fn dispatch_experts(x: &Tensor, decision: &RoutingDecision, pool: &ExpertPool) -> Result<Tensor> {
    let (m, _c) = x.dims2()?;
    if decision.points() != m {
        return Err(Error::Internal(format!(
            "routing covers {} points, features have {m}",
            decision.points()
        )));
    }
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); pool.len()];
    for (k, &j) in decision.indices.iter().enumerate() {
        let g = groups
            .get_mut(j)
            .ok_or_else(|| Error::Internal(format!("expert index {j} out of range")))?;
        g.push(k as u32);
    }
    let mut update = x.zeros_like()?;
    for (j, rows) in groups.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        pool.calls[j].fetch_add(n, Ordering::Relaxed);
        let idx = Tensor::from_vec(rows, n, x.device())?;
        let xs = x.index_select(&idx, 0)?;
        let gate = decision.gates.index_select(&idx, 0)?.unsqueeze(1)?;
        let y = pool.experts[j].forward(&xs)?.broadcast_mul(&gate)?;
        update = update.index_add(&idx, &y, 0)?;
    }
    Ok((x + update)?)
}

/// One routed FFN layer: router plus pool.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Router,
    pub pool: ExpertPool,
}

impl MoeLayer {
    pub fn new(b: &mut Builder, dim: usize, w_dim: usize, experts: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            router: Router::new(&mut b.pp("router"), dim, w_dim, experts)?,
            pool: ExpertPool::new(&mut b.pp("experts"), experts, dim, mult * dim)?,
        })
    }

    /// `f` is `(B, P, C)`; returns the updated points and the routing decision.
    pub fn forward(&self, f: &Tensor, w: &Tensor) -> Result<(Tensor, RoutingDecision)> {
        let (b, p, c) = f.dims3()?;
        let decision = self.router.route(f, w)?;
        let out = dispatch_experts(&f.reshape((b * p, c))?, &decision, &self.pool)?;
        Ok((out.reshape((b, p, c))?, decision))
    }
}

/// Expert indices laid out on the feature grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingMap {
    pub height: usize,
    pub width: usize,
    pub experts: usize,
    pub indices: Vec<u8>,
}

/// Fixed palette; expert `j` uses entry `j % len`.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [0, 0, 128],
];

pub fn routing_map(indices: &[usize], experts: usize, height: usize, width: usize) -> Result<RoutingMap> {
    if indices.len() != height * width {
        return Err(Error::Shape(format!(
            "{} routing indices cannot fill a {height}x{width} map",
            indices.len()
        )));
    }
    if experts > 256 {
        return Err(Error::Config("routing maps support at most 256 experts".into()));
    }
    Ok(RoutingMap {
        height,
        width,
        experts,
        indices: indices.iter().map(|&j| j as u8).collect(),
    })
}

impl RoutingMap {
    pub fn flatten(&self) -> Vec<usize> {
        self.indices.iter().map(|&j| j as usize).collect()
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x] as usize
    }

    /// Fraction of points per expert.
    pub fn utilization(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.experts];
        for &j in &self.indices {
            counts[j as usize] += 1;
        }
        let n = self.indices.len() as f64;
        counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Lossless 8-bit indexed PNG, each map pixel scaled to `scale×scale`.
    pub fn to_png_bytes(&self, scale: usize) -> Result<Vec<u8>> {
        let scale = scale.max(1);
        let (w, h) = (self.width * scale, self.height * scale);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.indices[(y / scale) * self.width + x / scale]);
            }
        }
        let n = self.experts.clamp(1, 256);
        let palette: Vec<u8> = (0..n).flat_map(|j| PALETTE[j % PALETTE.len()]).collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&data)?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path, scale: usize) -> Result<()> {
        std::fs::write(path, self.to_png_bytes(scale)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, labeled_rng, randn, ParamStore};

    fn vecf(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn single_expert_routes_everything_with_unit_gate() {
        let mut store = ParamStore::new(0);
        let router = Router::new(&mut store.builder(), 4, 3, 1).unwrap();
        let mut rng = labeled_rng(0, "r");
        let pts = randn(&mut rng, &[2, 5, 4], 1.0).unwrap();
        let w = randn(&mut rng, &[2, 3], 1.0).unwrap();
        let d = router.route(&pts, &w).unwrap();
        assert!(d.indices.iter().all(|&j| j == 0));
        assert!(vecf(&d.gates).iter().all(|&p| p == 1.0));
    }

    #[test]
    fn hand_logits_pick_first_expert() {
        let dev = device();
        let router = Router::from_linear(Linear::from_parts(
            Tensor::zeros((2, 1), DType::F32, &dev).unwrap(),
            None,
        ));
        let logits = Tensor::new(&[[0.9f32, 0.3]], &dev).unwrap();
        let d = router.decide(&logits).unwrap();
        assert_eq!(d.indices, vec![0]);
        let expect = 1.0 / (1.0 + (-0.6f64).exp());
        assert!((vecf(&d.gates)[0] as f64 - expect).abs() < 1e-6);
        assert!((expect - 0.6457).abs() < 1e-4);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn router_depends_on_style() {
        let mut store = ParamStore::new(5);
        let router = Router::new(&mut store.builder(), 4, 8, 4).unwrap();
        let mut rng = labeled_rng(1, "r");
        let pts = randn(&mut rng, &[1, 64, 4], 1.0).unwrap();
        let w1 = randn(&mut rng, &[1, 8], 1.0).unwrap();
        let w2 = randn(&mut rng, &[1, 8], 1.0).unwrap();
        let a = router.route(&pts, &w1).unwrap();
        let b = router.route(&pts, &w2).unwrap();
        assert_ne!(a.indices, b.indices);
        assert_eq!(a.indices, router.route(&pts, &w1).unwrap().indices);
    }

    #[test]
    fn zero_output_experts_are_identity() {
        let mut store = ParamStore::new(1);
        let layer = MoeLayer::new(&mut store.builder(), 6, 3, 4, 4).unwrap();
        let mut rng = labeled_rng(2, "m");
        let f = randn(&mut rng, &[2, 9, 6], 1.0).unwrap();
        let w = randn(&mut rng, &[2, 3], 1.0).unwrap();
        let (out, _) = layer.forward(&f, &w).unwrap();
        assert_eq!(vecf(&out), vecf(&f));
    }

    #[test]
    fn identity_expert_doubles_input() {
        let dev = device();
        let fc1 = Linear::from_parts(
            Tensor::new(&[[1f32], [0.0], [0.0], [0.0]], &dev).unwrap(),
            Some(Tensor::zeros(4, DType::F32, &dev).unwrap()),
        );
        let fc2 = Linear::from_parts(
            Tensor::new(&[[1f32, 0.0, 0.0, 0.0]], &dev).unwrap(),
            Some(Tensor::zeros(1, DType::F32, &dev).unwrap()),
        );
        let pool = ExpertPool::from_experts(vec![Expert::from_parts(fc1, fc2)]).unwrap();
        let router = Router::from_linear(Linear::from_parts(
            Tensor::zeros((1, 2), DType::F32, &dev).unwrap(),
            None,
        ));
        let x = Tensor::new(&[[[1.5f32]]], &dev).unwrap();
        let w = Tensor::new(&[[0.0f32]], &dev).unwrap();
        let d = router.route(&x, &w).unwrap();
        let out = dispatch_experts(&x.reshape((1, 1)).unwrap(), &d, &pool).unwrap();
        assert_eq!(vecf(&out), vec![3.0]);
    }

    #[test]
    fn balance_loss_closed_forms() {
        let dev = device();
        let alpha = 0.01;
        for n in [1usize, 2, 4, 8] {
            let uniform = RoutingStats {
                fractions: vec![1.0 / n as f64; n],
                mean_probs: Tensor::full(1.0 / n as f32, n, &dev).unwrap(),
            };
            let l = nn::scalar(&load_balance_loss(&uniform, alpha).unwrap()).unwrap();
            assert!((l - alpha).abs() < 1e-7, "uniform n={n}: {l}");
            let mut f = vec![0.0; n];
            f[0] = 1.0;
            let mut p = vec![0f32; n];
            p[0] = 1.0;
            let collapsed = RoutingStats {
                fractions: f,
                mean_probs: Tensor::from_vec(p, n, &dev).unwrap(),
            };
            let l = nn::scalar(&load_balance_loss(&collapsed, alpha).unwrap()).unwrap();
            assert!((l - alpha * n as f64).abs() < 1e-6, "collapse n={n}: {l}");
        }
    }

    #[test]
    fn routing_map_reshapes_and_round_trips() {
        let idx: Vec<usize> = (0..16).map(|k| (k / 4 + k % 4) % 2).collect();
        let map = routing_map(&idx, 2, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(map.get(y, x), (x + y) % 2);
            }
        }
        assert_eq!(map.flatten(), idx);
        let constant = routing_map(&[2; 9], 4, 3, 3).unwrap();
        assert!(constant.flatten().iter().all(|&j| j == 2));
        assert!(routing_map(&idx, 2, 3, 5).is_err());
        let u = map.utilization();
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn png_export_is_indexed_and_decodes() {
        let idx: Vec<usize> = (0..12).map(|k| k % 3).collect();
        let map = routing_map(&idx, 3, 3, 4).unwrap();
        let bytes = map.to_png_bytes(2).unwrap();
        assert_eq!(bytes, map.to_png_bytes(2).unwrap());
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        assert_eq!(info.color_type, png::ColorType::Indexed);
        assert_eq!((info.width, info.height), (8, 6));
    }
}
