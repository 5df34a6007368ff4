//! The point-flow module: sparse point-wise affinity propagation from a
//! coarse pyramid level `F_l` into the next finer level `F_{l-1}`.
//!
//! A saliency map picks salient points (max pooling) and a subtraction
//! based edge map picks boundary points (top-K). Each point set runs its
//! own softmax affinity propagation, and the refined rows are scattered
//! back into the finer map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{adaptive_range, bilinear_point_sample, topk_select, ConvGeometry, NormalizedPoint};
use crate::tensor::{Real, Tensor};

/// Kernel of the box filter smoothing the saliency map in the edge branch.
pub const EDGE_BOX_KERNEL: usize = 3;

/// Largest point count the dense reference accepts.
pub const DENSE_MAX_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Coarse-level semantics flow into the finer level.
    TopDown,
    /// Finer-level points flow into the coarse level.
    BottomUp,
    TdThenBu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    Subtraction,
    Direct,
    Addition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalientSampling {
    MaxPool,
    /// One seeded uniform pick inside each cell of the pooling partition.
    UniformRandom,
    /// The highest saliency scores, as many as the pooling grid has cells.
    AttentionTopk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfmConfig {
    pub salient_kernel: (usize, usize),
    /// Number of boundary points; 0 disables the boundary branch and flow.
    pub boundary_k: usize,
    pub direction: Direction,
    pub edge_mode: EdgeMode,
    pub salient_sampling: SalientSampling,
    /// Multiplier on the raw dot-product affinities before the softmax.
    pub affinity_scale: f64,
    pub sampling_seed: u64,
}

impl Default for PfmConfig {
    fn default() -> Self {
        Self {
            salient_kernel: (14, 14),
            boundary_k: 128,
            direction: Direction::TopDown,
            edge_mode: EdgeMode::Subtraction,
            salient_sampling: SalientSampling::MaxPool,
            affinity_scale: 1.0,
            sampling_seed: 0,
        }
    }
}

impl PfmConfig {
    /// Shrinks the point budget to a level of `h×w` cells: the salient
    /// kernel to at most half of each side and `boundary_k` to a quarter of
    /// the cells. Budgets that already fit are returned unchanged.
    pub fn fitted(&self, h: usize, w: usize) -> Self {
        let (kh, kw) = self.salient_kernel;
        let mut out = self.clone();
        out.salient_kernel = (kh.min((h / 2).max(1)), kw.min((w / 2).max(1)));
        if self.boundary_k > 0 {
            out.boundary_k = self.boundary_k.min((h * w / 4).max(1));
        }
        out
    }
}

/// Learnable weights of one module.
#[derive(Debug, Clone, Copy)]
pub struct PfmParams {
    /// 3×3 conv from the concatenated levels to one saliency channel.
    pub saliency_weight: Var,
    pub saliency_bias: Var,
    /// 1×1 conv predicting the boundary map, weight and bias; required
    /// when `boundary_k > 0`.
    pub boundary: Option<(Var, Var)>,
}

/// Points chosen for one batch item, with the score that selected each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<NormalizedPoint>,
    pub scores: Vec<f64>,
}

impl PointSet {
    fn from_flat<T: Real>(idx: &[usize], plane: &[T], h: usize, w: usize) -> Self {
        Self {
            points: idx.iter().map(|&i| NormalizedPoint::from_flat(i, h, w)).collect(),
            scores: idx.iter().map(|&i| plane[i].as_f64()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub struct PfmOutput {
    /// Refined finer level, shaped like `F_{l-1}`.
    pub refined: Var,
    /// Coarse level after bottom-up flow; `F_l` itself for top-down.
    pub refined_upper: Var,
    /// Boundary probability on the coarse grid, absent when disabled.
    pub boundary_map: Option<Var>,
    pub saliency: Var,
    pub salient_points: Vec<PointSet>,
    pub boundary_points: Vec<PointSet>,
}

fn level_dims<T: Real>(tape: &Tape<T>, f_l: Var, f_lm1: Var) -> Result<((usize, usize, usize, usize), (usize, usize))> {
    let (n, c, h, w) = tape.value(f_l).dims4("pfm")?;
    let (n2, c2, h2, w2) = tape.value(f_lm1).dims4("pfm")?;
    if n != n2 || c != c2 {
        return Err(Error::shape("pfm", format!("levels [{n},{c},..] and [{n2},{c2},..] disagree")));
    }
    Ok(((n, c, h, w), (h2, w2)))
}

/// `M_l = sigmoid(conv3×3([F_l, resize(F_{l-1})]))`.
pub fn compute_saliency<T: Real>(tape: &mut Tape<T>, f_l: Var, f_lm1: Var, weight: Var, bias: Var) -> Result<Var> {
    let ((_, _, h, w), (h2, w2)) = level_dims(tape, f_l, f_lm1)?;
    if h2 != 2 * h || w2 != 2 * w {
        return Err(Error::shape("compute_saliency", format!("finer level {h2}x{w2} is not twice {h}x{w}")));
    }
    let down = tape.bilinear_resize(f_lm1, h, w)?;
    let cat = tape.concat_channels(&[f_l, down])?;
    let logits = tape.conv2d(cat, weight, bias, ConvGeometry::SAME3)?;
    tape.sigmoid(logits)
}

/// Residual salient attention and the salient point sets. `nonce` varies
/// the picks of the random sampling variant between calls.
pub fn salient_match<T: Real>(
    tape: &mut Tape<T>,
    f_l: Var,
    m_l: Var,
    cfg: &PfmConfig,
    nonce: u64,
) -> Result<(Var, Vec<PointSet>)> {
    let (n, _, h, w) = tape.value(m_l).dims4("salient_match")?;
    let (kh, kw) = cfg.salient_kernel;
    let (pooled, argmax) = tape.adaptive_max_pool(m_l, kh, kw)?;
    let up = tape.bilinear_resize(pooled, h, w)?;
    let scaled = tape.mul(f_l, up)?;
    let attended = tape.add(scaled, f_l)?;

    let m = tape.value(m_l);
    let planes: Vec<&[T]> = m.data().chunks(h * w).collect();
    let sets = match cfg.salient_sampling {
        SalientSampling::MaxPool => argmax
            .chunks(kh * kw)
            .zip(&planes)
            .map(|(idx, plane)| PointSet::from_flat(idx, plane, h, w))
            .collect(),
        SalientSampling::AttentionTopk => topk_select(m, kh * kw)?
            .iter()
            .zip(&planes)
            .map(|(idx, plane)| PointSet::from_flat(idx, plane, h, w))
            .collect(),
        SalientSampling::UniformRandom => (0..n)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling_seed ^ nonce.rotate_left(17) ^ (b as u64) << 48);
                let mut idx = Vec::with_capacity(kh * kw);
                for oi in 0..kh {
                    let rows = adaptive_range(oi, kh, h);
                    for oj in 0..kw {
                        let cols = adaptive_range(oj, kw, w);
                        idx.push(rng.gen_range(rows.clone()) * w + rng.gen_range(cols));
                    }
                }
                PointSet::from_flat(&idx, planes[b], h, w)
            })
            .collect(),
    };
    Ok((attended, sets))
}

/// Edge feature per `edge_mode`, the boundary map `B_l` and its top-K
/// points.
pub fn boundary_branch<T: Real>(
    tape: &mut Tape<T>,
    f_l: Var,
    m_l: Var,
    weight: Var,
    bias: Var,
    cfg: &PfmConfig,
) -> Result<(Var, Vec<PointSet>)> {
    let (_, _, h, w) = tape.value(m_l).dims4("boundary_branch")?;
    if cfg.boundary_k > h * w {
        return Err(Error::arg("boundary_branch", format!("boundary_k {} exceeds {} cells", cfg.boundary_k, h * w)));
    }
    let edge = match cfg.edge_mode {
        EdgeMode::Direct => f_l,
        mode => {
            let smooth = tape.box_avg_pool(m_l, EDGE_BOX_KERNEL)?;
            let masked = tape.mul(f_l, smooth)?;
            if mode == EdgeMode::Subtraction {
                tape.sub(f_l, masked)?
            } else {
                tape.add(f_l, masked)?
            }
        }
    };
    let logits = tape.conv2d(edge, weight, bias, ConvGeometry::POINT)?;
    let b_l = tape.sigmoid(logits)?;
    let score = tape.value(b_l);
    let sets = topk_select(score, cfg.boundary_k)?
        .iter()
        .zip(score.data().chunks(h * w))
        .map(|(idx, plane)| PointSet::from_flat(idx, plane, h, w))
        .collect();
    Ok((b_l, sets))
}

/// Refined point rows `softmax(s·Q·Kᵀ)·K + Q` for batch item `item`, where
/// `Q` samples `f_dst` and `K` samples `f_src` at the same points. Returns
/// `[K, C]`.
pub fn point_propagate<T: Real>(
    tape: &mut Tape<T>,
    f_src: Var,
    f_dst: Var,
    item: usize,
    pts: &[NormalizedPoint],
    affinity_scale: f64,
) -> Result<Var> {
    if pts.is_empty() {
        return Err(Error::arg("point_propagate", "empty point list"));
    }
    let q = tape.bilinear_point_sample(f_dst, item, pts)?;
    let kv = tape.bilinear_point_sample(f_src, item, pts)?;
    let kt = tape.transpose(kv)?;
    let mut logits = tape.matmul(q, kt)?;
    if affinity_scale != 1.0 {
        logits = tape.scale(logits, affinity_scale)?;
    }
    let affinity = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(affinity, kv)?;
    tape.add(mixed, q)
}

/// Propagates both flows from `src` into `dst` and scatters the rows,
/// salient first so boundary rows win collisions.
fn flow_into<T: Real>(
    tape: &mut Tape<T>,
    salient_src: Var,
    boundary_src: Var,
    dst: Var,
    salient: &[PointSet],
    boundary: &[PointSet],
    scale: f64,
) -> Result<Var> {
    let mut out = dst;
    for (item, set) in salient.iter().enumerate() {
        if !set.is_empty() {
            let rows = point_propagate(tape, salient_src, dst, item, &set.points, scale)?;
            out = tape.scatter_points(out, item, &set.points, rows)?;
        }
    }
    for (item, set) in boundary.iter().enumerate() {
        if !set.is_empty() {
            let rows = point_propagate(tape, boundary_src, dst, item, &set.points, scale)?;
            out = tape.scatter_points(out, item, &set.points, rows)?;
        }
    }
    Ok(out)
}

/// Full module between coarse level `f_l` and finer level `f_lm1`.
pub fn pfm_forward<T: Real>(
    tape: &mut Tape<T>,
    f_l: Var,
    f_lm1: Var,
    cfg: &PfmConfig,
    params: &PfmParams,
    nonce: u64,
) -> Result<PfmOutput> {
    let m_l = compute_saliency(tape, f_l, f_lm1, params.saliency_weight, params.saliency_bias)?;
    let (f_s, salient_points) = salient_match(tape, f_l, m_l, cfg, nonce)?;
    let (boundary_map, boundary_points) = match (cfg.boundary_k, params.boundary) {
        (0, _) => (None, Vec::new()),
        (_, Some((w, b))) => {
            let (map, pts) = boundary_branch(tape, f_l, m_l, w, b, cfg)?;
            (Some(map), pts)
        }
        (_, None) => return Err(Error::arg("pfm", "boundary branch enabled without its parameters")),
    };
    let scale = cfg.affinity_scale;
    let (refined, refined_upper) = match cfg.direction {
        Direction::TopDown => {
            (flow_into(tape, f_s, f_l, f_lm1, &salient_points, &boundary_points, scale)?, f_l)
        }
        Direction::BottomUp => {
            (f_lm1, flow_into(tape, f_lm1, f_lm1, f_l, &salient_points, &boundary_points, scale)?)
        }
        Direction::TdThenBu => {
            let down = flow_into(tape, f_s, f_l, f_lm1, &salient_points, &boundary_points, scale)?;
            (down, flow_into(tape, down, down, f_l, &salient_points, &boundary_points, scale)?)
        }
    };
    Ok(PfmOutput { refined, refined_upper, boundary_map, saliency: m_l, salient_points, boundary_points })
}

/// Brute-force cross-level affinity over every cell center of `f_src`:
/// each such point is refined from all others and written into `f_dst`.
pub fn dense_affinity_reference<T: Real>(f_src: &Tensor<T>, f_dst: &Tensor<T>, affinity_scale: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = f_src.dims4("dense_affinity_reference")?;
    let (n2, c2, hd, wd) = f_dst.dims4("dense_affinity_reference")?;
    if n != n2 || c != c2 {
        return Err(Error::shape("dense_affinity_reference", "batch or channel counts differ"));
    }
    let k = h * w;
    if k > DENSE_MAX_POINTS {
        return Err(Error::arg("dense_affinity_reference", format!("{k} points exceed {DENSE_MAX_POINTS}")));
    }
    let pts: Vec<_> = (0..k).map(|i| NormalizedPoint::from_flat(i, h, w)).collect();
    let mut out = f_dst.data().to_vec();
    for b in 0..n {
        let q = bilinear_point_sample(f_dst, b, &pts)?;
        let (q, kv) = (q.data(), &f_src.data()[b * c * k..(b + 1) * c * k]);
        let key = |j: usize, ch: usize| kv[ch * k + j].as_f64();
        for i in 0..k {
            let logits: Vec<f64> = (0..k)
                .map(|j| affinity_scale * (0..c).map(|ch| q[i * c + ch].as_f64() * key(j, ch)).sum::<f64>())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            let (ci, cj) = pts[i].cell(hd, wd);
            for ch in 0..c {
                let mix: f64 = (0..k).map(|j| weights[j] * key(j, ch)).sum::<f64>() / total;
                out[((b * c + ch) * hd + ci) * wd + cj] = T::of(mix + q[i * c + ch].as_f64());
            }
        }
    }
    Tensor::from_vec(f_dst.shape(), out)
}
