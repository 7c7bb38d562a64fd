//! Negative-sample generation: a near and a far corruption of each ground
//! truth, ordered by squared L2 distance.

use diffsearch_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NegativeKind {
    /// Per grid cell, cyclically shift the channel vector with probability
    /// p1 (near) / p2 (far), p1 < p2 drawn uniformly.
    ChannelPermutation,
    /// Additive noise normalized to fixed L2 radii r1 < r2.
    Gaussian { r1: f64, r2: f64 },
}

#[derive(Debug, Clone)]
pub struct NegativePair {
    pub x_minus: Tensor,
    pub x_minus2: Tensor,
    /// Squared L2 distance of the near negative to the positive.
    pub d_minus: f64,
    /// Squared L2 distance of the far negative; `d_minus <= d_minus2`.
    pub d_minus2: f64,
}

/// Corrupts `x0` (layout `[C, ...]`, channels first) into an ordered
/// negative pair.
pub fn gen_negatives(
    x0: &Tensor,
    kind: &NegativeKind,
    rng: &mut ChaCha8Rng,
) -> Result<NegativePair, CoreError> {
    match kind {
        NegativeKind::ChannelPermutation => {
            let channels = *x0
                .shape()
                .first()
                .ok_or_else(|| CoreError::invalid("negatives need a channel axis"))?;
            if channels < 2 {
                return Err(CoreError::invalid(
                    "channel permutation needs at least 2 channels",
                ));
            }
            let mut p1: f64 = rng.random_range(0.0..1.0);
            let mut p2: f64 = rng.random_range(0.0..1.0);
            if p1 > p2 {
                std::mem::swap(&mut p1, &mut p2);
            }
            let a = permute_cells(x0, channels, p1, rng);
            let b = permute_cells(x0, channels, p2, rng);
            let (da, db) = (a.sq_dist(x0), b.sq_dist(x0));
            // independent draws can come out inverted; relabel
            let (x_minus, x_minus2, d_minus, d_minus2) = if da <= db {
                (a, b, da, db)
            } else {
                (b, a, db, da)
            };
            Ok(NegativePair {
                x_minus,
                x_minus2,
                d_minus,
                d_minus2,
            })
        }
        NegativeKind::Gaussian { r1, r2 } => {
            if !(0.0 < *r1 && r1 < r2) {
                return Err(CoreError::invalid(format!(
                    "gaussian radii need 0 < r1 < r2, got {r1}, {r2}"
                )));
            }
            let x_minus = add_normalized_noise(x0, *r1, rng);
            let x_minus2 = add_normalized_noise(x0, *r2, rng);
            Ok(NegativePair {
                d_minus: x_minus.sq_dist(x0),
                d_minus2: x_minus2.sq_dist(x0),
                x_minus,
                x_minus2,
            })
        }
    }
}

/// Seeded convenience wrapper.
pub fn gen_negatives_seeded(
    x0: &Tensor,
    kind: &NegativeKind,
    seed: u64,
) -> Result<NegativePair, CoreError> {
    gen_negatives(x0, kind, &mut rng_from(seed))
}

fn permute_cells(x0: &Tensor, channels: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let cells = x0.len() / channels;
    let mut out = x0.clone();
    for cell in 0..cells {
        if rng.random_range(0.0..1.0) < p {
            let shift = rng.random_range(1..channels);
            for ch in 0..channels {
                let src = (ch + shift) % channels;
                out.data_mut()[ch * cells + cell] = x0.data()[src * cells + cell];
            }
        }
    }
    out
}

fn add_normalized_noise(x0: &Tensor, radius: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut noise: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for v in &mut noise {
        *v *= radius / norm;
    }
    let data = x0.data().iter().zip(&noise).map(|(a, n)| a + n).collect();
    Tensor::new(x0.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot_cells() -> Tensor {
        // four 3-channel cells, 0/1 one-hot
        Tensor::new(
            vec![3, 2, 2],
            vec![
                1.0, 0.0, 0.0, 1.0, // ch0
                0.0, 1.0, 0.0, 0.0, // ch1
                0.0, 0.0, 1.0, 0.0, // ch2
            ],
        )
        .unwrap()
    }

    #[test]
    fn shifted_onehot_cell_distance_is_two() {
        // any nonzero cyclic shift of a 0/1 one-hot vector moves the single
        // one, so the squared distance per changed cell is exactly 2
        let x0 = onehot_cells();
        let mut rng = rng_from(1);
        for _ in 0..200 {
            let pair = gen_negatives(&x0, &NegativeKind::ChannelPermutation, &mut rng).unwrap();
            for d in [pair.d_minus, pair.d_minus2] {
                let cells_changed = d / 2.0;
                assert!(
                    (cells_changed - cells_changed.round()).abs() < 1e-12,
                    "distance {d} is not a multiple of 2"
                );
            }
        }
    }

    #[test]
    fn ordering_holds_across_seeds() {
        let x0 = onehot_cells();
        for seed in 0..1000 {
            let pair = gen_negatives_seeded(&x0, &NegativeKind::ChannelPermutation, seed).unwrap();
            assert!(pair.d_minus <= pair.d_minus2, "seed {seed}");
            let g = NegativeKind::Gaussian { r1: 0.5, r2: 1.5 };
            let pair = gen_negatives_seeded(&x0, &g, seed).unwrap();
            assert!(pair.d_minus <= pair.d_minus2, "seed {seed}");
        }
    }

    #[test]
    fn gaussian_radii_are_exact() {
        let x0 = onehot_cells();
        let kind = NegativeKind::Gaussian { r1: 0.7, r2: 2.0 };
        let pair = gen_negatives_seeded(&x0, &kind, 3).unwrap();
        assert!((pair.d_minus - 0.49).abs() < 1e-10);
        assert!((pair.d_minus2 - 4.0).abs() < 1e-10);
    }

    #[test]
    fn single_channel_permutation_rejected() {
        let x0 = Tensor::ones(&[1, 2, 2]);
        assert!(gen_negatives_seeded(&x0, &NegativeKind::ChannelPermutation, 0).is_err());
    }

    #[test]
    fn near_zero_probabilities_give_noop() {
        // force p1 = p2 = 0 by construction: a seed where both draws are
        // tiny still permutes nothing only if no cell fires; emulate the
        // no-op case directly instead
        let x0 = onehot_cells();
        let mut rng = rng_from(0);
        let same = permute_cells(&x0, 3, 0.0, &mut rng);
        assert_eq!(same.data(), x0.data());
        assert_eq!(same.sq_dist(&x0), 0.0);
    }
}
