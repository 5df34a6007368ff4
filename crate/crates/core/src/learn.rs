//! Losses, boundary targets, the optimizer and its schedule.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{pfnet_forward, ForwardOutput, NetworkConfig, ParameterSet};
use crate::tensor::{Real, Tensor};

pub const IGNORE_LABEL: u8 = 255;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub edge_radius: usize,
    pub seg_loss_weight: f64,
    pub edge_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            batch_size: 8,
            seed: 0,
            edge_radius: 1,
            seg_loss_weight: 1.0,
            edge_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::arg("train", "base_lr and poly_power must be positive"));
        }
        if self.batch_size == 0 || self.edge_radius == 0 {
            return Err(Error::arg("train", "batch_size and edge_radius must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::arg("train", "momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        Ok(())
    }

    /// Poly schedule `base_lr · (1 − iter/total)^power`.
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let frac = 1.0 - (iter.min(total) as f64) / (total.max(1) as f64);
        self.base_lr * frac.powf(self.poly_power)
    }
}

/// Boundary pixels of a label grid: a pixel is boundary when a 4-neighbor
/// carries a different label. The band is then widened by `radius − 1` in
/// Chebyshev distance, so a straight label edge yields a band `2·radius`
/// pixels wide.
pub fn boundary_pixels(mask: &[u8], h: usize, w: usize, radius: usize) -> Result<Vec<bool>> {
    if mask.is_empty() || mask.len() != h * w {
        return Err(Error::arg("edge_targets", format!("mask of {} values for {h}x{w}", mask.len())));
    }
    let mut edge = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = mask[i * w + j];
            edge[i * w + j] = (i > 0 && mask[(i - 1) * w + j] != v)
                || (i + 1 < h && mask[(i + 1) * w + j] != v)
                || (j > 0 && mask[i * w + j - 1] != v)
                || (j + 1 < w && mask[i * w + j + 1] != v);
        }
    }
    let r = radius.saturating_sub(1);
    if r == 0 {
        return Ok(edge);
    }
    let mut grown = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if edge[i * w + j] {
                for p in i.saturating_sub(r)..(i + r + 1).min(h) {
                    for q in j.saturating_sub(r)..(j + r + 1).min(w) {
                        grown[p * w + q] = true;
                    }
                }
            }
        }
    }
    Ok(grown)
}

/// OR-pools a boolean grid by `stride` into `{0, 1}` values.
pub fn or_pool(grid: &[bool], h: usize, w: usize, stride: usize) -> Vec<u8> {
    let (ho, wo) = (h / stride, w / stride);
    let mut out = vec![0u8; ho * wo];
    for i in 0..ho * stride {
        for j in 0..wo * stride {
            if grid[i * w + j] {
                out[(i / stride) * wo + j / stride] = 1;
            }
        }
    }
    out
}

/// Boundary targets at each of `strides`.
pub fn edge_targets_from_mask(mask: &[u8], h: usize, w: usize, radius: usize, strides: &[usize]) -> Result<Vec<Vec<u8>>> {
    let edge = boundary_pixels(mask, h, w, radius)?;
    Ok(strides.iter().map(|&s| or_pool(&edge, h, w, s)).collect())
}

/// Eager binary cross-entropy, mean over elements.
pub fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len() as f64
}

impl<T: Real> Tape<T> {
    /// Mean binary cross-entropy of probabilities `pred` against `{0,1}`
    /// targets. Predictions are clamped to `[1e-7, 1 − 1e-7]`; the clamp
    /// passes no gradient.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("bce_loss", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let (lo, hi) = (T::of(BCE_CLAMP), T::of(1.0 - BCE_CLAMP));
        let n = T::of(target.len() as f64);
        let mut total = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let p = p.max(lo).min(hi);
            total -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let target = target.clone();
        self.record(
            "bce_loss",
            Tensor::scalar(total / n),
            &[pred],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                let d = ctx.inputs[0].data().iter().zip(target.data()).map(|(&p, &t)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        g * (p - t) / (p * (T::one() - p))
                    }
                });
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d.collect()))]
            }),
        )
    }

    /// Mean cross-entropy of `[N, K, H, W]` logits against labels laid out
    /// `[N, H, W]`; pixels labelled [`IGNORE_LABEL`] are skipped.
    pub fn ce_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4("ce_loss")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape("ce_loss", format!("{} labels for {n}x{h}x{w} pixels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(Error::arg("ce_loss", format!("label {bad} with {k} classes")));
        }
        let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        if valid == 0 {
            return Err(Error::arg("ce_loss", "every pixel is ignored"));
        }
        let x = self.value(logits).data();
        // softmax per pixel, kept for the adjoint
        let mut prob = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for b in 0..n {
            for px in 0..hw {
                let label = labels[b * hw + px];
                if label == IGNORE_LABEL {
                    continue;
                }
                let at = |c: usize| (b * k + c) * hw + px;
                let top = (0..k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (x[at(c)] - top).exp();
                    prob[at(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    prob[at(c)] = prob[at(c)] / z;
                }
                total += z.ln() + top - x[at(label as usize)];
            }
        }
        let count = T::of(valid as f64);
        let labels = labels.to_vec();
        self.record(
            "ce_loss",
            Tensor::scalar(total / count),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / count;
                let mut d = vec![T::zero(); prob.len()];
                for b in 0..n {
                    for px in 0..hw {
                        let label = labels[b * hw + px];
                        if label == IGNORE_LABEL {
                            continue;
                        }
                        for c in 0..k {
                            let at = (b * k + c) * hw + px;
                            let onehot = if c == label as usize { T::one() } else { T::zero() };
                            d[at] = g * (prob[at] - onehot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )
    }
}

/// One training batch: images, labels and boundary targets per gap.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    /// `[N, H, W]` labels.
    pub labels: Vec<u8>,
    /// `(gap, [N, 1, H/2^gap, W/2^gap])` boundary targets.
    pub edges: Vec<(usize, Tensor<f32>)>,
}

impl Batch {
    /// Assembles a batch from `(image [3,H,W], labels [H,W])` samples.
    pub fn from_samples(samples: &[(&Tensor<f32>, &[u8])], radius: usize) -> Result<Self> {
        let Some(&(first, _)) = samples.first() else {
            return Err(Error::arg("batch", "no samples"));
        };
        let [c, h, w] = first.shape()[..] else {
            return Err(Error::shape("batch", format!("image shape {:?}", first.shape())));
        };
        let n = samples.len();
        let mut images = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n * h * w);
        let gaps = crate::network::GAPS;
        let mut edges: Vec<Vec<f32>> = vec![Vec::new(); gaps.len()];
        for &(img, mask) in samples {
            if img.shape() != first.shape() || mask.len() != h * w {
                return Err(Error::shape("batch", "samples differ in size"));
            }
            images.extend_from_slice(img.data());
            labels.extend_from_slice(mask);
            let strides: Vec<usize> = gaps.iter().map(|&g| 1 << g).collect();
            for (acc, grid) in edges.iter_mut().zip(edge_targets_from_mask(mask, h, w, radius, &strides)?) {
                acc.extend(grid.into_iter().map(|v| v as f32));
            }
        }
        let edges = gaps
            .iter()
            .zip(edges)
            .map(|(&g, v)| Ok((g, Tensor::from_vec(&[n, 1, h >> g, w >> g], v)?)))
            .collect::<Result<_>>()?;
        Ok(Self { images: Tensor::from_vec(&[n, c, h, w], images)?, labels, edges })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub bce_total: f64,
    pub total: f64,
}

/// Weighted segmentation + boundary loss. Logits are upsampled to label
/// resolution before the cross-entropy.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    labels: &[u8],
    edges: &[(usize, Tensor<T>)],
    seg_weight: f64,
    edge_weight: f64,
    label_hw: (usize, usize),
) -> Result<(Var, LossParts)> {
    let up = tape.bilinear_resize(out.logits, label_hw.0, label_hw.1)?;
    let ce = tape.ce_loss(up, labels)?;
    let ce_value = tape.value(ce).item().as_f64();
    let mut total = tape.scale(ce, seg_weight)?;
    let mut bce_total = 0.0;
    for &(gap, map) in &out.boundary_maps {
        let target = edges
            .iter()
            .find(|(g, _)| *g == gap)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::arg("loss", format!("no boundary target for gap {gap}")))?;
        let bce = tape.bce_loss(map, target)?;
        bce_total += tape.value(bce).item().as_f64();
        let weighted = tape.scale(bce, edge_weight)?;
        total = tape.add(total, weighted)?;
    }
    let value = tape.value(total).item().as_f64();
    Ok((total, LossParts { ce: ce_value, bce_total, total: value }))
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        for (name, w) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| w.zeros_like());
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *wv;
                *wv -= lr * *vv;
            }
        }
    }
}

/// Forward, backward and one optimizer update. Returns the loss parts
/// measured before the update.
pub fn train_step(
    params: &mut ParameterSet<f32>,
    opt: &mut Sgd,
    batch: &Batch,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    iter: usize,
    total_iters: usize,
) -> Result<LossParts> {
    let non_finite = |path: String| Error::NonFiniteTraining { iter, path };
    let mut tape = Tape::<f32>::new();
    let vars = params.attach(&mut tape, true);
    let image = tape.constant(batch.images.clone());
    let (_, _, h, w) = batch.images.dims4("train_step")?;
    let graph = pfnet_forward(&mut tape, &vars, image, net, (cfg.seed << 32) ^ iter as u64).and_then(|out| {
        total_loss(&mut tape, &out, &batch.labels, &batch.edges, cfg.seg_loss_weight, cfg.edge_loss_weight, (h, w))
    });
    let (loss, parts) = match graph {
        Ok(v) => v,
        Err(Error::NonFinite { op }) => return Err(non_finite(format!("forward {op}"))),
        Err(e) => return Err(e),
    };
    let mut g = tape.backward(loss)?;
    let grads = vars.gradients(&mut g);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(non_finite(format!("gradient of {name}")));
    }
    opt.step(params, &grads, cfg.lr_at(iter, total_iters), cfg.momentum, cfg.weight_decay);
    if let Some((name, _)) = params.tensors.iter().find(|(_, t)| !t.is_finite()) {
        return Err(non_finite(format!("parameter {name}")));
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 100), 0.01);
        assert_eq!(cfg.lr_at(100, 100), 0.0);
        assert!((cfg.lr_at(50, 100) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn constant_mask_has_no_edges() {
        let t = edge_targets_from_mask(&[3; 64], 8, 8, 1, &[1, 2, 4]).unwrap();
        assert!(t.iter().all(|g| g.iter().all(|&v| v == 0)));
        assert!(edge_targets_from_mask(&[], 0, 0, 1, &[1]).is_err());
    }

    #[test]
    fn halves_give_band_of_twice_radius() {
        let (h, w) = (6, 12);
        let mask: Vec<u8> = (0..h * w).map(|i| u8::from(i % w >= w / 2)).collect();
        for radius in 1..4 {
            let e = boundary_pixels(&mask, h, w, radius).unwrap();
            for i in 0..h {
                let cols: Vec<usize> = (0..w).filter(|&j| e[i * w + j]).collect();
                assert_eq!(cols, (w / 2 - radius..w / 2 + radius).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn or_pool_marks_blocks_with_any_edge() {
        let mut g = vec![false; 16];
        g[5] = true;
        assert_eq!(or_pool(&g, 4, 4, 2), vec![1, 0, 0, 0]);
        assert_eq!(or_pool(&g, 4, 4, 4), vec![1]);
    }

    fn bce_of(pred: &[f64], target: &[f64]) -> f64 {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::from_vec(&[pred.len()], pred.to_vec()).unwrap());
        let l = t.bce_loss(p, &Tensor::from_vec(&[target.len()], target.to_vec()).unwrap()).unwrap();
        t.value(l).item()
    }

    #[test]
    fn bce_cases() {
        assert!(bce_of(&[0.0, 1.0], &[0.0, 1.0]) < 1e-6);
        assert!((bce_of(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln 0.8
        assert!((bce_of(&[0.8], &[1.0]) - 0.223_143_551_314_209_76).abs() < 1e-15);
        assert_eq!(bce_of(&[0.3, 0.9], &[1.0, 0.0]), bce_value(&[0.3, 0.9], &[1.0, 0.0]));
    }

    fn ce_of(logits: &[f64], k: usize, labels: &[u8]) -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let n = labels.len();
        let l = t.constant(Tensor::from_vec(&[1, k, 1, n], logits.to_vec()).unwrap());
        let loss = t.ce_loss(l, labels)?;
        Ok(t.value(loss).item())
    }

    #[test]
    fn ce_cases() {
        assert!((ce_of(&[0.3, 0.3], 2, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(ce_of(&[100.0, 0.0], 2, &[0]).unwrap() < 1e-6);
        // -ln softmax([1,2,3])[2]
        assert!((ce_of(&[1.0, 2.0, 3.0], 3, &[2]).unwrap() - 0.407_605_964_444_380_1).abs() < 1e-15);
        // ignored pixels do not count
        let a = ce_of(&[1.0, 5.0, 2.0, -1.0], 2, &[0, IGNORE_LABEL]).unwrap();
        assert!((a - ce_of(&[1.0, 2.0], 2, &[0]).unwrap()).abs() < 1e-15);
        assert!(ce_of(&[1.0, 2.0], 2, &[IGNORE_LABEL]).is_err());
        assert!(ce_of(&[1.0, 2.0], 2, &[2]).is_err());
    }

    #[test]
    fn momentum_update_on_quadratic() {
        // loss = (w - 3)^2, w0 = 0, lr 0.1, mu 0.9, no decay
        let mut params = ParameterSet { tensors: BTreeMap::from([("w".to_string(), Tensor::scalar(0.0f32))]) };
        let mut opt = Sgd::new();
        let (mut w, mut v) = (0.0f64, 0.0f64);
        for _ in 0..3 {
            let g = 2.0 * (params.tensors["w"].item() as f64 - 3.0);
            let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(g as f32))]);
            opt.step(&mut params, &grads, 0.1, 0.9, 0.0);
            v = 0.9 * v + 2.0 * (w - 3.0);
            w -= 0.1 * v;
            assert!((params.tensors["w"].item() as f64 - w).abs() < 1e-5);
        }
        // w1 = 0.6, v1 = -6; v2 = -5.4 - 4.8 = -10.2, w2 = 1.62
        assert!((w - (1.62 + 0.1 * (0.9 * 10.2 + 2.0 * (3.0 - 1.62)))).abs() < 1e-12);
    }
}
