//! Adaptive max/average pooling and the stride-1 box filter.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Half-open input range covered by output cell `i` of `out` along an axis
/// of length `len`: `[floor(i·len/out), ceil((i+1)·len/out))`.
pub fn adaptive_range(i: usize, out: usize, len: usize) -> std::ops::Range<usize> {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    start..end
}

fn check_out<T: Real>(op: &'static str, x: &Tensor<T>, kh: usize, kw: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::arg(op, format!("output {kh}x{kw} invalid for input {h}x{w}")));
    }
    Ok((n, c, h, w))
}

/// Max over each adaptive region. Returns the pooled map and, per output
/// cell, the flat `H×W` position of its maximum; ties go to the smallest
/// flat index.
pub fn adaptive_max_pool<T: Real>(x: &Tensor<T>, kh: usize, kw: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = check_out("adaptive_max_pool", x, kh, kw)?;
    let mut out = Vec::with_capacity(n * c * kh * kw);
    let mut idx = Vec::with_capacity(n * c * kh * kw);
    for plane in x.data().chunks(h * w) {
        for oi in 0..kh {
            let rows = adaptive_range(oi, kh, h);
            for oj in 0..kw {
                let cols = adaptive_range(oj, kw, w);
                let mut best = rows.start * w + cols.start;
                for r in rows.clone() {
                    for q in cols.clone() {
                        if plane[r * w + q] > plane[best] {
                            best = r * w + q;
                        }
                    }
                }
                out.push(plane[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, kh, kw], out), idx))
}

pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_out("adaptive_avg_pool", x, kh, kw)?;
    let mut out = Vec::with_capacity(n * c * kh * kw);
    for plane in x.data().chunks(h * w) {
        for oi in 0..kh {
            let rows = adaptive_range(oi, kh, h);
            for oj in 0..kw {
                let cols = adaptive_range(oj, kw, w);
                let mut s = T::zero();
                for r in rows.clone() {
                    for q in cols.clone() {
                        s += plane[r * w + q];
                    }
                }
                out.push(s / T::of((rows.len() * cols.len()) as f64));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, kh, kw], out))
}

/// Stride-1, zero-padded `k×k` mean with divisor `k²` everywhere.
pub fn box_avg_pool<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("box_avg_pool")?;
    if k % 2 == 0 {
        return Err(Error::arg("box_avg_pool", format!("kernel {k} must be odd")));
    }
    let r = k / 2;
    let inv = T::of(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut horiz = vec![T::zero(); h * w];
    for plane in x.data().chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let mut s = T::zero();
                for q in j.saturating_sub(r)..(j + r + 1).min(w) {
                    s += plane[i * w + q];
                }
                horiz[i * w + j] = s;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut s = T::zero();
                for p in i.saturating_sub(r)..(i + r + 1).min(h) {
                    s += horiz[p * w + j];
                }
                out.push(s * inv);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl<T: Real> Tape<T> {
    /// Adaptive max pooling; the gradient of each output cell is routed to
    /// its argmax element.
    pub fn adaptive_max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<(Var, Vec<usize>)> {
        let (out, idx) = adaptive_max_pool(self.value(x), kh, kw)?;
        let route = idx.clone();
        let v = self.record(
            "adaptive_max_pool",
            out,
            &[x],
            Box::new(move |ctx| {
                let [_, _, h, w] = ctx.inputs[0].shape()[..] else { unreachable!() };
                let cells = kh * kw;
                let mut d = vec![T::zero(); ctx.inputs[0].len()];
                for (o, (&g, &i)) in ctx.grad.data().iter().zip(&route).enumerate() {
                    d[(o / cells) * h * w + i] += g;
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )?;
        Ok((v, idx))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let out = adaptive_avg_pool(self.value(x), kh, kw)?;
        self.record(
            "adaptive_avg_pool",
            out,
            &[x],
            Box::new(move |ctx| {
                let [_, _, h, w] = ctx.inputs[0].shape()[..] else { unreachable!() };
                let mut d = vec![T::zero(); ctx.inputs[0].len()];
                for (dplane, gplane) in d.chunks_mut(h * w).zip(ctx.grad.data().chunks(kh * kw)) {
                    for oi in 0..kh {
                        let rows = adaptive_range(oi, kh, h);
                        for oj in 0..kw {
                            let cols = adaptive_range(oj, kw, w);
                            let share = gplane[oi * kw + oj] / T::of((rows.len() * cols.len()) as f64);
                            for r in rows.clone() {
                                for q in cols.clone() {
                                    dplane[r * w + q] += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )
    }

    pub fn box_avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = box_avg_pool(self.value(x), k)?;
        // the zero-padded box filter is self-adjoint
        self.record(
            "box_avg_pool",
            out,
            &[x],
            Box::new(move |ctx| vec![Some(box_avg_pool(ctx.grad, k).expect("validated in forward"))]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn full_size_is_identity() {
        let x = Tensor::<f64>::uniform(&[1, 2, 3, 4], 1, -1.0, 1.0).unwrap();
        let (p, idx) = adaptive_max_pool(&x, 3, 4).unwrap();
        assert_eq!(p, x);
        assert_eq!(idx, [(0..12).collect::<Vec<_>>(), (0..12).collect()].concat());
    }

    #[test]
    fn quadrant_maxima() {
        let (p, idx) = adaptive_max_pool(&ramp(4, 4), 2, 2).unwrap();
        assert_eq!(p.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(idx, vec![5, 7, 13, 15]);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 2.0).unwrap();
        let (p, idx) = adaptive_max_pool(&x, 2, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 2.0));
        // regions start at rows/cols {0, 2}
        assert_eq!(idx, vec![0, 2, 10, 12]);
    }

    #[test]
    fn regions_partition_the_input() {
        for len in 1..20 {
            for out in 1..=len {
                let mut hit = vec![0; len];
                for i in 0..out {
                    let r = adaptive_range(i, out, len);
                    assert!(!r.is_empty());
                    for j in r {
                        hit[j] += 1;
                    }
                }
                assert!(hit.iter().all(|&c| c >= 1), "len {len} out {out}");
            }
        }
    }

    #[test]
    fn oversized_output_rejected() {
        assert!(adaptive_max_pool(&ramp(2, 2), 3, 1).is_err());
    }

    #[test]
    fn avg_pool_quadrant_means() {
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                v[i * 4 + j] = [1.0, 2.0, 3.0, 4.0][(i / 2) * 2 + j / 2];
            }
        }
        let x = Tensor::from_vec(&[1, 1, 4, 4], v).unwrap();
        assert_eq!(adaptive_avg_pool(&x, 2, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn box_filter_cases() {
        let c = Tensor::<f64>::full(&[1, 1, 5, 5], 3.0).unwrap();
        let y = box_avg_pool(&c, 3).unwrap();
        assert!((y.data()[12] - 3.0).abs() < 1e-15);
        // corners see 4 of 9 taps
        assert!((y.data()[0] - 3.0 * 4.0 / 9.0).abs() < 1e-15);

        let mut one = vec![0.0f64; 9];
        one[4] = 1.0;
        let y = box_avg_pool(&Tensor::from_vec(&[1, 1, 3, 3], one).unwrap(), 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

        let z = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(box_avg_pool(&z, 5).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(box_avg_pool(&z, 4).is_err());
    }
}
