//! High-pass projection for the first conv layer of the constrained net:
//! every 5x5 filter gets a fixed -1 center tap and off-center taps rescaled
//! to sum to 1, so the layer can only express prediction-residual filters.

use super::ParamTensor;

const CENTER: usize = 12; // row-major center of a 5x5 window
const TAPS: usize = 25;

/// Projects every filter onto the constraint set. Applied after each
/// optimizer step during training.
///
/// A filter whose off-center taps already sum to 1 (within an accumulation
/// tolerance scaled by the taps' magnitude) is left untouched, which makes
/// the projection bitwise idempotent. An off-center sum with magnitude below
/// 1e-8 is degenerate; such filters reset to the uniform 1/24 pattern.
pub fn apply_highpass_constraint(kernels: &mut ParamTensor) {
    debug_assert_eq!(kernels.shape[2] * kernels.shape[3], TAPS, "constraint expects 5x5 kernels");
    debug_assert_eq!(kernels.shape[1], 1, "constraint expects single-channel kernels");
    for filter in kernels.data.chunks_exact_mut(TAPS) {
        let mut sum = 0.0f64;
        let mut l1 = 0.0f64;
        for (i, &v) in filter.iter().enumerate() {
            if i != CENTER {
                sum += v as f64;
                l1 += (v as f64).abs();
            }
        }
        filter[CENTER] = -1.0;
        if (sum - 1.0).abs() <= 1e-5 * l1.max(1.0) {
            continue; // already satisfied; skip so reprojection is a no-op
        }
        if sum.abs() < 1e-8 {
            for (i, v) in filter.iter_mut().enumerate() {
                if i != CENTER {
                    *v = 1.0 / 24.0;
                }
            }
            continue;
        }
        let scale = 1.0 / sum;
        for (i, v) in filter.iter_mut().enumerate() {
            if i != CENTER {
                *v = (*v as f64 * scale) as f32;
            }
        }
    }
}

/// Largest deviation from the constraint over all filters: max of
/// `|center + 1|` and `|off-center sum - 1|`.
pub fn constraint_residual(kernels: &ParamTensor) -> f64 {
    let mut worst = 0.0f64;
    for filter in kernels.data.chunks_exact(TAPS) {
        let mut sum = 0.0f64;
        for (i, &v) in filter.iter().enumerate() {
            if i != CENTER {
                sum += v as f64;
            }
        }
        worst = worst.max((filter[CENTER] as f64 + 1.0).abs()).max((sum - 1.0).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn kernels(data: Vec<f32>) -> ParamTensor {
        let filters = data.len() / TAPS;
        ParamTensor { name: "conv0.kernels".into(), shape: vec![filters, 1, 5, 5], data }
    }

    #[test]
    fn zero_filter_gets_uniform_taps() {
        let mut k = kernels(vec![0.0; TAPS]);
        apply_highpass_constraint(&mut k);
        assert_eq!(k.data[CENTER], -1.0);
        for (i, &v) in k.data.iter().enumerate() {
            if i != CENTER {
                assert_eq!(v, 1.0 / 24.0);
            }
        }
    }

    #[test]
    fn projection_is_bitwise_idempotent() {
        let mut rng = SplitMix64::new(5);
        let data: Vec<f32> = (0..4 * TAPS).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
        let mut k = kernels(data);
        apply_highpass_constraint(&mut k);
        let once: Vec<u32> = k.data.iter().map(|v| v.to_bits()).collect();
        apply_highpass_constraint(&mut k);
        let twice: Vec<u32> = k.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(once, twice);
    }

    #[test]
    fn already_satisfying_filter_is_untouched() {
        let mut data = vec![1.0f32 / 24.0; TAPS];
        data[CENTER] = -1.0;
        let before = data.clone();
        let mut k = kernels(data);
        apply_highpass_constraint(&mut k);
        for (a, b) in k.data.iter().zip(before.iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn random_filter_satisfies_constraint_after_projection() {
        let mut rng = SplitMix64::new(17);
        let data: Vec<f32> = (0..8 * TAPS).map(|_| rng.next_f64() as f32).collect();
        let mut k = kernels(data);
        apply_highpass_constraint(&mut k);
        for filter in k.data.chunks_exact(TAPS) {
            assert_eq!(filter[CENTER], -1.0);
            let sum: f64 = filter
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != CENTER)
                .map(|(_, &v)| v as f64)
                .sum();
            assert!((sum - 1.0).abs() <= 1e-6, "off-center sum {sum}");
        }
        assert!(constraint_residual(&k) <= 1e-6);
    }
}
