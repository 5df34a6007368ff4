//! Hard top-K selection. Carries no gradient.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Flat indices of the `k` largest scores of each batch item of a
/// `[N, 1, H, W]` map, ordered by descending score then ascending index.
pub fn topk_select<T: Real>(score: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, c, h, w) = score.dims4("topk_select")?;
    if c != 1 {
        return Err(Error::shape("topk_select", format!("expected one channel, got {c}")));
    }
    let hw = h * w;
    if k > hw {
        return Err(Error::arg("topk_select", format!("k = {k} exceeds {hw} cells")));
    }
    Ok(score
        .data()
        .chunks(hw)
        .take(n)
        .map(|plane| {
            let mut order: Vec<usize> = (0..hw).collect();
            order.sort_by(|&a, &b| plane[b].partial_cmp(&plane[a]).expect("finite scores").then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_cells() {
        let s = Tensor::<f64>::uniform(&[1, 1, 2, 3], 1, 0.0, 1.0).unwrap();
        let mut idx = topk_select(&s, 6).unwrap().remove(0);
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let s = Tensor::from_vec(&[1, 1, 1, 4], vec![0.9f64, 0.1, 0.9, 0.5]).unwrap();
        assert_eq!(topk_select(&s, 2).unwrap(), vec![vec![0, 2]]);
    }

    #[test]
    fn too_many_rejected() {
        let s = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(topk_select(&s, 5).is_err());
    }

    /// Exhaustive oracle: rank of each cell = number of cells that beat it.
    fn oracle(plane: &[f64], k: usize) -> Vec<usize> {
        let beats = |a: usize, b: usize| plane[a] > plane[b] || (plane[a] == plane[b] && a < b);
        let mut ranked: Vec<(usize, usize)> = (0..plane.len())
            .map(|i| ((0..plane.len()).filter(|&j| beats(j, i)).count(), i))
            .collect();
        ranked.sort();
        ranked.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn random_map_matches_exhaustive_oracle() {
        let s = Tensor::<f64>::uniform(&[2, 1, 8, 8], 17, 0.0, 1.0).unwrap();
        let got = topk_select(&s, 5).unwrap();
        for (b, idx) in got.iter().enumerate() {
            assert_eq!(idx, &oracle(&s.data()[b * 64..(b + 1) * 64], 5));
        }
    }

    proptest! {
        #[test]
        fn independent_of_traversal_order(vals in prop::collection::vec(0u8..6, 16), k in 1usize..16) {
            let plane: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let s = Tensor::from_vec(&[1, 1, 4, 4], plane.clone()).unwrap();
            prop_assert_eq!(topk_select(&s, k).unwrap().remove(0), oracle(&plane, k));
        }
    }
}
