//! Risk head and the composite objective.
//!
//! Class index 0 is the positive class throughout the crate.

use rand::Rng;

use crate::linalg::{softmax, Matrix};
use crate::params::param_group;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `2 x d_h`
    pub weight: Matrix,
    pub bias: Matrix,
}

param_group!(HeadParams, "head", [weight, bias]);

impl HeadParams {
    pub fn zeros(d_h: usize) -> Self {
        HeadParams {
            weight: Matrix::zeros(2, d_h),
            bias: Matrix::zeros(2, 1),
        }
    }

    pub fn init<R: Rng>(d_h: usize, rng: &mut R) -> Self {
        HeadParams {
            weight: Matrix::uniform_init(2, d_h, d_h, rng),
            bias: Matrix::uniform_init(2, 1, d_h, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub synthetic: f64,
    pub diffusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            synthetic: 0.5,
            diffusion: 0.1,
        }
    }
}

/// Class index of a `{0,1}` label: positive (1) maps to index 0.
pub fn class_index(label: u8) -> usize {
    if label == 1 {
        0
    } else {
        1
    }
}

/// `softmax(W_y h + b_y)`
pub fn predict_risk(h_last: &[f64], params: &HeadParams) -> [f64; 2] {
    let mut logits = params.weight.mul_vec(h_last);
    crate::linalg::add_assign(&mut logits, &params.bias.data);
    let p = softmax(&logits);
    [p[0], p[1]]
}

/// `-ln p[class_index(label)]` with the probability clamped to `[1e-12, 1]`.
pub fn cross_entropy(probs: &[f64; 2], label: u8) -> f64 {
    -probs[class_index(label)].clamp(PROB_FLOOR, 1.0).ln()
}

/// `ce_orig + λ_S ce_synth + λ_D l_diff`
pub fn total_loss(ce_orig: f64, ce_synth: f64, l_diff: f64, weights: LossWeights) -> f64 {
    ce_orig + weights.synthetic * ce_synth + weights.diffusion * l_diff
}

/// Forward plus backward of `cross_entropy(predict_risk(h))`, scaled by
/// `weight`. Accumulates head gradients; returns `(loss, dL/dh)`.
pub fn head_loss_backward(
    h_last: &[f64],
    label: u8,
    weight: f64,
    params: &HeadParams,
    grads: &mut HeadParams,
) -> (f64, [f64; 2], Vec<f64>) {
    let probs = predict_risk(h_last, params);
    let target = class_index(label);
    let loss = cross_entropy(&probs, label);
    // The clamp has zero slope when it is active.
    let clamped = probs[target] < PROB_FLOOR;
    let d_logits: Vec<f64> = (0..2)
        .map(|i| {
            if clamped {
                0.0
            } else {
                weight * (probs[i] - if i == target { 1.0 } else { 0.0 })
            }
        })
        .collect();
    grads.weight.outer_acc(&d_logits, h_last);
    crate::linalg::add_assign(&mut grads.bias.data, &d_logits);
    let mut d_h = vec![0.0; h_last.len()];
    params.weight.t_matvec_acc(&d_logits, &mut d_h);
    (loss, probs, d_h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_is_uninformative() {
        assert_eq!(predict_risk(&[0.3, -0.2], &HeadParams::zeros(2)), [0.5, 0.5]);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let mut p = HeadParams::zeros(1);
        for z in [-700.0, -3.0, 0.0, 12.5, 900.0] {
            p.bias.data = vec![z, z];
            assert_eq!(predict_risk(&[0.0], &p), [0.5, 0.5]);
        }
    }

    #[test]
    fn analytic_softmax() {
        let mut p = HeadParams::zeros(1);
        p.bias.data = vec![3f64.ln(), 0.0];
        let probs = predict_risk(&[0.0], &p);
        assert!((probs[0] - 0.75).abs() < 1e-15 && (probs[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 1), 0.0);
        for label in [0, 1] {
            assert!((cross_entropy(&[0.5, 0.5], label) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((cross_entropy(&[1e-20, 1.0], 1) - (-(1e-12f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, w) - 2.3).abs() < 1e-15);
        let none = LossWeights {
            synthetic: 0.0,
            diffusion: 0.0,
        };
        assert_eq!(total_loss(0.7, 5.0, 9.0, none), 0.7);
        let doubled = LossWeights {
            synthetic: 1.0,
            diffusion: 0.2,
        };
        let extra = |w| total_loss(1.0, 2.0, 3.0, w) - 1.0;
        assert!((extra(doubled) - 2.0 * extra(w)).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use crate::rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn head_output_is_a_distribution(seed in 0u64..1000, scale in 0.0f64..100.0) {
                let mut r = rng::stream(seed, &[]);
                let p = HeadParams::init(4, &mut r);
                let h: Vec<f64> = (0..4).map(|i| (i as f64 - 1.5) * scale).collect();
                let probs = predict_risk(&h, &p);
                prop_assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((probs[0] + probs[1] - 1.0).abs() < 1e-9);
                prop_assert!(cross_entropy(&probs, 0) >= 0.0 && cross_entropy(&probs, 1) >= 0.0);
            }
        }
    }
}
