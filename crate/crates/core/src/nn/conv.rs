//! 2-d cross-correlation with zero padding, via im2col.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, transpose_raw, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// 3×3, stride 1, padding 1.
    pub const SAME3: Self = Self::new(1, 1);
    /// 3×3, stride 2, padding 1.
    pub const DOWN3: Self = Self::new(2, 1);
    /// 1×1, stride 1.
    pub const POINT: Self = Self::new(1, 0);
}

/// Weights and bias of one convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: ConvGeometry) -> Result<Dims> {
    let (n, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
    }
    if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
        return Err(Error::arg("conv2d", format!("kernel {kh}x{kw} not supported")));
    }
    if g.stride == 0 {
        return Err(Error::arg("conv2d", "stride must be positive"));
    }
    if h + 2 * g.padding < kh || wd + 2 * g.padding < kw {
        return Err(Error::arg("conv2d", "degenerate output size"));
    }
    let ho = (h + 2 * g.padding - kh) / g.stride + 1;
    let wo = (wd + 2 * g.padding - kw) / g.stride + 1;
    Ok(Dims { n, cin, h, w: wd, cout, kh, kw, ho, wo, stride: g.stride, pad: g.padding })
}

/// Unfolds one image `[Cin, H, W]` into `[Cin·kh·kw, Ho·Wo]`.
fn im2col<T: Real>(d: &Dims, x: &[T], cols: &mut [T]) {
    let p = d.p();
    let mut row = 0;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *o = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds `[Cin·kh·kw, Ho·Wo]` back onto an image, accumulating overlaps.
fn col2im<T: Real>(d: &Dims, cols: &[T], x: &mut [T]) {
    let p = d.p();
    let mut row = 0;
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Real>(d: &Dims, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let mut out = vec![T::zero(); d.n * out_len];
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..d.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        for (co, row) in on.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
        let cols_ref: &[T] = if d.is_pointwise() {
            xn
        } else {
            im2col(d, xn, &mut cols);
            &cols
        };
        gemm_acc(d.cout, k, p, w, cols_ref, on);
    }
    out
}

struct Grads<T> {
    dx: Option<Vec<T>>,
    dw: Option<Vec<T>>,
    db: Option<Vec<T>>,
}

fn backward<T: Real>(d: &Dims, x: &[T], w: &[T], g: &[T], need: [bool; 3]) -> Grads<T> {
    let (k, p) = (d.k(), d.p());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let mut dx = need[0].then(|| vec![T::zero(); d.n * in_len]);
    let mut dw = need[1].then(|| vec![T::zero(); d.cout * k]);
    let mut db = need[2].then(|| vec![T::zero(); d.cout]);
    let wt = need[0].then(|| transpose_raw(d.cout, k, w));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];

    for n in 0..d.n {
        let gn = &g[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &gn[co * p..(co + 1) * p] {
                    *acc += v;
                }
            }
        }
        let xn = &x[n * in_len..(n + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            // dW[co, :] += Σ_p g[co, p] · colsᵀ[p, :], ascending p
            if d.is_pointwise() {
                cols.copy_from_slice(xn);
            } else {
                im2col(d, xn, &mut cols);
            }
            let cols_t = transpose_raw(k, p, &cols);
            gemm_acc(d.cout, p, k, gn, &cols_t, dw);
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if d.is_pointwise() {
                gemm_acc(k, d.cout, p, wt, gn, dxn);
            } else {
                dcols.fill(T::zero());
                gemm_acc(k, d.cout, p, wt, gn, &mut dcols);
                col2im(d, &dcols, dxn);
            }
        }
    }
    Grads { dx, dw, db }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let d = dims(x, &p.weight, &p.bias, p.geometry)?;
    let out = forward(&d, x.data(), p.weight.data(), p.bias.data());
    Ok(Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out))
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let d = dims(self.value(x), self.value(weight), self.value(bias), geometry)?;
        let out = forward(&d, self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let out = Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out);
        self.record(
            "conv2d",
            out,
            &[x, weight, bias],
            Box::new(move |ctx| {
                let need = [ctx.needs(0), ctx.needs(1), ctx.needs(2)];
                let g = backward(&d, ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data(), need);
                vec![
                    g.dx.map(|v| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), v)),
                    g.dw.map(|v| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), v)),
                    g.db.map(|v| Tensor::from_parts(ctx.inputs[2].shape().to_vec(), v)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop cross-correlation, independent of im2col.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("t").unwrap();
        let (cout, _, kh, kw) = w.dims4("t").unwrap();
        let ho = (h + 2 * g.padding - kh) / g.stride + 1;
        let wo = (wd + 2 * g.padding - kw) / g.stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b_ in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * kh + ki) * kw + kj]
                                        * x.data()[((b_ * cin + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((b_ * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, ho, wo], out).unwrap()
    }

    fn params(w: Tensor<f64>, b: Tensor<f64>, g: ConvGeometry) -> ConvParams<f64> {
        ConvParams { weight: w, bias: b, geometry: g }
    }

    #[test]
    fn identity_pointwise() {
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 5], 1, -1.0, 1.0).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let p = params(
            Tensor::from_vec(&[3, 3, 1, 1], w).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
            ConvGeometry::POINT,
        );
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn box_sum_of_one_hot() {
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 3, 3], x).unwrap();
        let p = params(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), ConvGeometry::SAME3);
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[1.0; 9]);
    }

    #[test]
    fn stride_two_subsamples() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = params(Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), ConvGeometry::new(2, 0));
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn matches_naive_loops() {
        for (seed, g, k) in [(1, ConvGeometry::SAME3, 3), (2, ConvGeometry::DOWN3, 3), (3, ConvGeometry::POINT, 1), (4, ConvGeometry::new(2, 0), 1)] {
            let x = Tensor::<f64>::uniform(&[2, 3, 7, 6], seed, -1.0, 1.0).unwrap();
            let w = Tensor::<f64>::uniform(&[4, 3, k, k], seed + 10, -1.0, 1.0).unwrap();
            let b = Tensor::<f64>::uniform(&[4], seed + 20, -1.0, 1.0).unwrap();
            let fast = conv2d(&x, &params(w.clone(), b.clone(), g)).unwrap();
            let slow = naive(&x, &w, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        let p = params(Tensor::zeros(&[1, 3, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), ConvGeometry::SAME3);
        assert!(conv2d(&x, &p).is_err());
        let tiny = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        let p0 = params(Tensor::zeros(&[1, 3, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), ConvGeometry::new(1, 0));
        assert!(conv2d(&tiny, &p0).is_err());
    }
}
