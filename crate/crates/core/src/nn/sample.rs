//! Grid-center bilinear resampling, point sampling and point scatter.
//!
//! Pixel `(i, j)` of an `H×W` map sits at normalized coordinates
//! `((i + 0.5) / H, (j + 0.5) / W)`. Sampling positions are clamped to the
//! map, so border pixels extend outward.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Resolution-independent point; `u` is vertical, `v` horizontal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub u: f64,
    pub v: f64,
}

impl NormalizedPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn cell_center(i: usize, j: usize, h: usize, w: usize) -> Self {
        Self { u: (i as f64 + 0.5) / h as f64, v: (j as f64 + 0.5) / w as f64 }
    }

    /// Center of flat cell `idx` on an `h×w` grid.
    pub fn from_flat(idx: usize, h: usize, w: usize) -> Self {
        Self::cell_center(idx / w, idx % w, h, w)
    }

    /// The cell of an `h×w` grid containing this point.
    pub fn cell(&self, h: usize, w: usize) -> (usize, usize) {
        let i = ((self.u * h as f64).floor().max(0.0) as usize).min(h - 1);
        let j = ((self.v * w as f64).floor().max(0.0) as usize).min(w - 1);
        (i, j)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if (0.0..=1.0).contains(&self.u) && (0.0..=1.0).contains(&self.v) {
            Ok(())
        } else {
            Err(Error::arg(op, format!("point ({}, {}) outside [0,1]", self.u, self.v)))
        }
    }
}

/// Interpolation taps along one axis: lower index, upper index, weight of
/// the upper index.
#[derive(Debug, Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

impl Taps {
    /// `pos` is in pixel units, where pixel `i` sits at `i`.
    fn at(pos: f64, len: usize) -> Self {
        let mut p = pos.clamp(0.0, (len - 1) as f64);
        // grid-center positions reconstructed through u·H − 0.5 can miss an
        // integer by an ulp
        let r = p.round();
        if (p - r).abs() <= 1e-9 * r.abs().max(1.0) {
            p = r;
        }
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        Taps { lo, hi, frac: p - lo as f64 }
    }
}

fn resize_taps(out: usize, len: usize) -> Vec<Taps> {
    (0..out).map(|i| Taps::at((i as f64 + 0.5) * len as f64 / out as f64 - 0.5, len)).collect()
}

#[inline]
fn lerp2<T: Real>(plane: &[T], w: usize, ty: Taps, tx: Taps) -> T {
    let (fy, fx) = (T::of(ty.frac), T::of(tx.frac));
    let top = (T::one() - fx) * plane[ty.lo * w + tx.lo] + fx * plane[ty.lo * w + tx.hi];
    let bottom = (T::one() - fx) * plane[ty.hi * w + tx.lo] + fx * plane[ty.hi * w + tx.hi];
    (T::one() - fy) * top + fy * bottom
}

#[inline]
fn spread<T: Real>(plane: &mut [T], w: usize, ty: Taps, tx: Taps, g: T) {
    let (fy, fx) = (T::of(ty.frac), T::of(tx.frac));
    let (gy0, gy1) = ((T::one() - fy) * g, fy * g);
    plane[ty.lo * w + tx.lo] += gy0 * (T::one() - fx);
    plane[ty.lo * w + tx.hi] += gy0 * fx;
    plane[ty.hi * w + tx.lo] += gy1 * (T::one() - fx);
    plane[ty.hi * w + tx.hi] += gy1 * fx;
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidShape(vec![n, c, oh, ow]));
    }
    let (ty, tx) = (resize_taps(oh, h), resize_taps(ow, w));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &a in &ty {
            for &b in &tx {
                out.push(lerp2(plane, w, a, b));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

fn point_taps(pts: &[NormalizedPoint], h: usize, w: usize) -> Vec<(Taps, Taps)> {
    pts.iter()
        .map(|p| (Taps::at(p.u * h as f64 - 0.5, h), Taps::at(p.v * w as f64 - 0.5, w)))
        .collect()
}

fn check_points(op: &'static str, pts: &[NormalizedPoint]) -> Result<()> {
    pts.iter().try_for_each(|p| p.validate(op))
}

/// Samples batch item `item` at each point; returns `[K, C]`.
pub fn bilinear_point_sample<T: Real>(x: &Tensor<T>, item: usize, pts: &[NormalizedPoint]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_point_sample")?;
    if pts.is_empty() {
        return Err(Error::arg("bilinear_point_sample", "no points"));
    }
    if item >= n {
        return Err(Error::arg("bilinear_point_sample", format!("batch item {item} of {n}")));
    }
    check_points("bilinear_point_sample", pts)?;
    let taps = point_taps(pts, h, w);
    let hw = h * w;
    let base = &x.data()[item * c * hw..(item + 1) * c * hw];
    let mut out = Vec::with_capacity(pts.len() * c);
    for &(ty, tx) in &taps {
        for ch in 0..c {
            out.push(lerp2(&base[ch * hw..(ch + 1) * hw], w, ty, tx));
        }
    }
    Ok(Tensor::from_parts(vec![pts.len(), c], out))
}

/// For each point, the flat cell it writes and whether it is the last
/// writer of that cell.
fn scatter_plan(pts: &[NormalizedPoint], h: usize, w: usize) -> Vec<(usize, bool)> {
    let cells: Vec<usize> = pts
        .iter()
        .map(|p| {
            let (i, j) = p.cell(h, w);
            i * w + j
        })
        .collect();
    let mut last = std::collections::HashMap::new();
    for (k, &cell) in cells.iter().enumerate() {
        last.insert(cell, k);
    }
    cells.iter().enumerate().map(|(k, &cell)| (cell, last[&cell] == k)).collect()
}

/// Writes row `k` of `values` into the cell containing point `k` of batch
/// item `item`; later rows win on collisions.
pub fn scatter_points<T: Real>(
    base: &Tensor<T>,
    item: usize,
    pts: &[NormalizedPoint],
    values: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = base.dims4("scatter_points")?;
    if item >= n {
        return Err(Error::arg("scatter_points", format!("batch item {item} of {n}")));
    }
    if pts.is_empty() {
        return Ok(base.clone());
    }
    if values.shape() != [pts.len(), c] {
        return Err(Error::shape(
            "scatter_points",
            format!("{} points need values [{}, {c}], got {:?}", pts.len(), pts.len(), values.shape()),
        ));
    }
    check_points("scatter_points", pts)?;
    let hw = h * w;
    let mut out = base.clone();
    let dst = &mut out.data_mut()[item * c * hw..(item + 1) * c * hw];
    for (k, (cell, _)) in scatter_plan(pts, h, w).into_iter().enumerate() {
        for ch in 0..c {
            dst[ch * hw + cell] = values.data()[k * c + ch];
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), oh, ow)?;
        self.record(
            "bilinear_resize",
            out,
            &[x],
            Box::new(move |ctx| {
                let [_, _, h, w] = ctx.inputs[0].shape()[..] else { unreachable!() };
                let (ty, tx) = (resize_taps(oh, h), resize_taps(ow, w));
                let mut d = vec![T::zero(); ctx.inputs[0].len()];
                for (dplane, gplane) in d.chunks_mut(h * w).zip(ctx.grad.data().chunks(oh * ow)) {
                    for (i, &a) in ty.iter().enumerate() {
                        for (j, &b) in tx.iter().enumerate() {
                            spread(dplane, w, a, b, gplane[i * ow + j]);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )
    }

    pub fn bilinear_point_sample(&mut self, x: Var, item: usize, pts: &[NormalizedPoint]) -> Result<Var> {
        let out = bilinear_point_sample(self.value(x), item, pts)?;
        let pts = pts.to_vec();
        self.record(
            "bilinear_point_sample",
            out,
            &[x],
            Box::new(move |ctx| {
                let [_, c, h, w] = ctx.inputs[0].shape()[..] else { unreachable!() };
                let hw = h * w;
                let mut d = vec![T::zero(); ctx.inputs[0].len()];
                let base = &mut d[item * c * hw..(item + 1) * c * hw];
                for (k, &(ty, tx)) in point_taps(&pts, h, w).iter().enumerate() {
                    for ch in 0..c {
                        spread(&mut base[ch * hw..(ch + 1) * hw], w, ty, tx, ctx.grad.data()[k * c + ch]);
                    }
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )
    }

    /// Differentiable scatter: winning writes pass their gradient to
    /// `values`, every other cell passes it to `base`.
    pub fn scatter_points(&mut self, base: Var, item: usize, pts: &[NormalizedPoint], values: Var) -> Result<Var> {
        let out = scatter_points(self.value(base), item, pts, self.value(values))?;
        let pts = pts.to_vec();
        self.record(
            "scatter_points",
            out,
            &[base, values],
            Box::new(move |ctx| {
                let [_, c, h, w] = ctx.inputs[0].shape()[..] else { unreachable!() };
                let hw = h * w;
                let g = ctx.grad.data();
                let plan = scatter_plan(&pts, h, w);
                let gbase = ctx.needs(0).then(|| {
                    let mut d = g.to_vec();
                    let item_grad = &mut d[item * c * hw..(item + 1) * c * hw];
                    for &(cell, _) in &plan {
                        for ch in 0..c {
                            item_grad[ch * hw + cell] = T::zero();
                        }
                    }
                    Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)
                });
                let gvalues = ctx.needs(1).then(|| {
                    let mut d = vec![T::zero(); pts.len() * c];
                    let item_grad = &g[item * c * hw..(item + 1) * c * hw];
                    for (k, &(cell, wins)) in plan.iter().enumerate() {
                        if wins {
                            for ch in 0..c {
                                d[k * c + ch] = item_grad[ch * hw + cell];
                            }
                        }
                    }
                    Tensor::from_parts(vec![pts.len(), c], d)
                });
                vec![gbase, gvalues]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_same_size_is_identity() {
        let x = Tensor::<f64>::uniform(&[1, 2, 5, 3], 4, -1.0, 1.0).unwrap();
        assert_eq!(bilinear_resize(&x, 5, 3).unwrap(), x);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 0.25).unwrap();
        let y = bilinear_resize(&x, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_two_to_four() {
        let x = Tensor::from_vec(&[1, 1, 2, 1], vec![0.0f64, 2.0]).unwrap();
        let y = bilinear_resize(&x, 4, 1).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn resize_halving_averages_pairs() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 1, 1).unwrap().data(), &[1.5]);
    }

    #[test]
    fn point_sample_cases() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_point_sample(&x, 0, &[NormalizedPoint::new(0.5, 0.5)]).unwrap();
        assert_eq!(s.data(), &[1.5]);
        let s = bilinear_point_sample(&x, 0, &[NormalizedPoint::cell_center(1, 0, 2, 2)]).unwrap();
        assert_eq!(s.data(), &[2.0]);
        let c = Tensor::<f64>::full(&[1, 2, 3, 3], 0.7).unwrap();
        let s = bilinear_point_sample(&c, 0, &[NormalizedPoint::new(0.0, 1.0), NormalizedPoint::new(0.31, 0.77)]).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(bilinear_point_sample(&x, 0, &[NormalizedPoint::new(1.2, 0.5)]).is_err());
    }

    #[test]
    fn grid_centers_reproduce_values_bitwise() {
        for (h, w) in [(3, 7), (5, 5), (6, 11), (13, 1)] {
            let x = Tensor::<f64>::uniform(&[2, 3, h, w], 11, -5.0, 5.0).unwrap();
            let pts: Vec<_> = (0..h * w).map(|i| NormalizedPoint::from_flat(i, h, w)).collect();
            for item in 0..2 {
                let s = bilinear_point_sample(&x, item, &pts).unwrap();
                for (k, _) in pts.iter().enumerate() {
                    for ch in 0..3 {
                        assert_eq!(s.data()[k * 3 + ch], x.data()[(item * 3 + ch) * h * w + k]);
                    }
                }
            }
        }
    }

    #[test]
    fn scatter_cases() {
        let base = Tensor::<f64>::uniform(&[1, 2, 3, 3], 2, -1.0, 1.0).unwrap();
        assert_eq!(scatter_points(&base, 0, &[], &Tensor::zeros(&[1, 2]).unwrap()).unwrap(), base);

        let p = NormalizedPoint::cell_center(1, 2, 3, 3);
        let vals = Tensor::from_vec(&[1, 2], vec![9.0, 8.0]).unwrap();
        let out = scatter_points(&base, 0, &[p], &vals).unwrap();
        for (i, (&a, &b)) in out.data().iter().zip(base.data()).enumerate() {
            match i {
                5 => assert_eq!(a, 9.0),
                14 => assert_eq!(a, 8.0),
                _ => assert_eq!(a, b),
            }
        }

        let q = NormalizedPoint::new(0.4, 0.9); // same cell (1, 2)
        let vals = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = scatter_points(&base, 0, &[p, q], &vals).unwrap();
        assert_eq!(out.data()[5], 3.0);
        assert_eq!(out.data()[14], 4.0);

        assert!(scatter_points(&base, 0, &[p, q], &Tensor::zeros(&[1, 2]).unwrap()).is_err());
    }

    #[test]
    fn scatter_then_sample_returns_written_rows() {
        let base = Tensor::<f64>::uniform(&[1, 3, 4, 5], 3, -1.0, 1.0).unwrap();
        let pts: Vec<_> = [0, 7, 13, 19].iter().map(|&i| NormalizedPoint::from_flat(i, 4, 5)).collect();
        let vals = Tensor::<f64>::uniform(&[4, 3], 4, -1.0, 1.0).unwrap();
        let out = scatter_points(&base, 0, &pts, &vals).unwrap();
        assert_eq!(bilinear_point_sample(&out, 0, &pts).unwrap(), vals);
    }
}
