//! Per-channel standardization over `(N, H, W)` followed by an affine map.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

struct Stats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

fn stats<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Stats<T>> {
    let (n, c, h, w) = x.dims4("channel_norm")?;
    let hw = h * w;
    let count = n * hw;
    if count < 2 {
        return Err(Error::arg("channel_norm", "each channel needs at least two elements"));
    }
    let inv_count = T::of(1.0 / count as f64);
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                s += v;
            }
        }
        let m = s * inv_count;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        inv_std[ch] = T::one() / (ss * inv_count + T::of(eps)).sqrt();
    }
    Ok(Stats { mean, inv_std })
}

pub fn channel_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("channel_norm", format!("affine terms must be [{c}]")));
    }
    let st = stats(x, eps)?;
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, bt) = (st.mean[ch], st.inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for v in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = (*v - m) * s * g + bt;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl<T: Real> Tape<T> {
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = channel_norm(self.value(x), self.value(gamma), self.value(beta), NORM_EPS)?;
        self.record(
            "channel_norm",
            out,
            &[x, gamma, beta],
            Box::new(|ctx| {
                let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
                let [n, c, h, w] = x.shape()[..] else { unreachable!() };
                let hw = h * w;
                let count = T::of((n * hw) as f64);
                let st = stats(x, NORM_EPS).expect("validated in forward");
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (m, s) = (st.mean[ch], st.inv_std[ch]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&gv, &xv) in g[r.clone()].iter().zip(&x.data()[r]) {
                            sum_g += gv;
                            sum_gx += gv * (xv - m) * s;
                        }
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gamma.data()[ch] * s;
                    let mg = sum_g / count;
                    let mgx = sum_gx / count;
                    for b in 0..n {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for i in r {
                            let xh = (x.data()[i] - m) * s;
                            dx[i] = k * (g[i] - mg - xh * mgx);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let [n, c, h, w] = t.shape()[..] else { panic!() };
        let mut vals = Vec::new();
        for b in 0..n {
            vals.extend_from_slice(&t.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w]);
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn standardizes() {
        // variance large enough that eps/var stays below 1e-6
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 4], 5, -100.0, 100.0).unwrap();
        let y = channel_norm(&x, &Tensor::full(&[3], 1.0).unwrap(), &Tensor::zeros(&[3]).unwrap(), NORM_EPS).unwrap();
        for ch in 0..3 {
            let (m, v) = moments(&y, ch);
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_terms() {
        let x = Tensor::<f64>::uniform(&[1, 2, 8, 8], 9, -100.0, 100.0).unwrap();
        let y = channel_norm(&x, &Tensor::full(&[2], 2.0).unwrap(), &Tensor::full(&[2], 1.0).unwrap(), NORM_EPS).unwrap();
        for ch in 0..2 {
            let (m, v) = moments(&y, ch);
            assert!((m - 1.0).abs() < 1e-6);
            assert!((v.sqrt() - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 4.2).unwrap();
        let y = channel_norm(&x, &Tensor::full(&[1], 1.0).unwrap(), &Tensor::zeros(&[1]).unwrap(), NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_channel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(channel_norm(&x, &Tensor::full(&[2], 1.0).unwrap(), &Tensor::zeros(&[2]).unwrap(), NORM_EPS).is_err());
    }
}
