//! Composite layers: MFM activation, residual blocks, efficient channel
//! attention, and the per-patch classification heads.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tape::{ShapeError, Variable};

/// Max-feature-map activation: splits the channel axis in half and takes the
/// elementwise maximum, halving the channel count. Accepts `[N,C,H,W]` or
/// `[N,C]`; ties go to the first half.
pub fn mfm<T: Scalar>(x: &Variable<T>) -> Result<Variable<T>, ShapeError> {
    x.max_channel_halves()
}

/// Shape-preserving residual block: two 3x3 convolutions that double the
/// channel count, each followed by MFM back down, plus an identity shortcut.
pub struct ResidualBlock<T: Scalar = f32> {
    pub conv1_kernel: Variable<T>,
    pub conv1_bias: Variable<T>,
    pub conv2_kernel: Variable<T>,
    pub conv2_bias: Variable<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    /// `x + MFM(conv(MFM(conv(x))))`; input channels must match the block.
    pub fn forward(&self, x: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "residual_block";
        let c = self.conv1_kernel.shape()[1];
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != c {
            return Err(ShapeError::new(
                OP,
                format!("expected [N,{c},H,W] input, got {xs:?}"),
            ));
        }
        let h = mfm(&x.conv2d(&self.conv1_kernel, &self.conv1_bias, 1, 1)?)?;
        let h = mfm(&h.conv2d(&self.conv2_kernel, &self.conv2_bias, 1, 1)?)?;
        x.add(&h)
    }
}

/// Adaptive kernel size for channel attention: the nearest odd integer at or
/// above `log2(C)/2 + 1/2`.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).floor().max(0.0) as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: per-channel gates from a 1-d convolution over
/// the channel-mean vector, applied multiplicatively. No dimensionality
/// reduction; the only parameters are the `k` kernel weights.
pub struct Eca<T: Scalar = f32> {
    pub channels: usize,
    pub kernel: Variable<T>,
}

impl<T: Scalar> Eca<T> {
    /// The attention vector `sigmoid(conv1d(GAP(x)))`, each entry in (0,1).
    pub fn attention(&self, x: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        self.check(x)?;
        Ok(x.global_avg_pool()?.conv1d_channels(&self.kernel)?.sigmoid())
    }

    /// Rescales every channel of `x` by its attention weight; shape
    /// preserved.
    pub fn forward(&self, x: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        let s = self.attention(x)?;
        x.scale_channels(&s)
    }

    fn check(&self, x: &Variable<T>) -> Result<(), ShapeError> {
        const OP: &str = "eca";
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(ShapeError::new(
                OP,
                format!("expected [N,{},H,W] input, got {xs:?}", self.channels),
            ));
        }
        Ok(())
    }
}

/// Nonlinearity between a head's dense layer and its classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    /// Dense output used directly as the feature vector.
    Identity,
    /// Dense emits twice the feature width; pairwise max halves it, matching
    /// the MFM style of the base network.
    Mfm,
}

/// Classification head: GAP over a patch, a dense feature layer, and a linear
/// classifier. The same head works on any spatial size since GAP removes it.
pub struct Head<T: Scalar = f32> {
    pub dense_weight: Variable<T>,
    pub dense_bias: Variable<T>,
    pub classifier_weight: Variable<T>,
    pub classifier_bias: Variable<T>,
    pub activation: HeadActivation,
}

impl<T: Scalar> Head<T> {
    /// Returns `(features, logits)`; logits carry no nonlinearity.
    pub fn forward(&self, x: &Variable<T>) -> Result<(Variable<T>, Variable<T>), ShapeError> {
        const OP: &str = "head";
        let in_dim = self.dense_weight.shape()[0];
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != in_dim {
            return Err(ShapeError::new(
                OP,
                format!("expected [N,{in_dim},H,W] input, got {xs:?}"),
            ));
        }
        let pooled = x.global_avg_pool()?;
        let pre = pooled.dense(&self.dense_weight, &self.dense_bias)?;
        let features = match self.activation {
            HeadActivation::Identity => pre,
            HeadActivation::Mfm => mfm(&pre)?,
        };
        let logits = features.dense(&self.classifier_weight, &self.classifier_bias)?;
        Ok((features, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn fill32(n: usize, seed: &mut u64) -> Vec<f32> {
        (0..n)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect()
    }

    fn fill64(n: usize, seed: &mut u64) -> Vec<f64> {
        fill32(n, seed).into_iter().map(|v| v as f64).collect()
    }

    #[test]
    fn mfm_halves_channels_and_ties_resolve_to_first_half() {
        let t: Tape = Tape::new();
        let mut seed = 5u64;
        let half = fill32(2 * 3 * 3, &mut seed);
        let mut data = half.clone();
        data.extend_from_slice(&half); // second half equals first half
        let x = t.leaf(Tensor::from_vec(vec![1, 4, 3, 3], data), true);
        let y = mfm(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 3, 3]);
        assert_eq!(y.value().data(), &half[..]);
        y.sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert!(g.data()[..18].iter().all(|&v| v == 1.0), "ties go to the first half");
        assert!(g.data()[18..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mfm_rejects_odd_channel_count() {
        let t: Tape = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![1, 3, 2, 2]), false);
        assert!(mfm(&x).is_err());
    }

    #[test]
    fn mfm_picks_larger_half() {
        let t: Tape = Tape::new();
        let mut data = vec![1.0f32; 4];
        data.extend(vec![-1.0f32; 4]);
        let x = t.leaf(Tensor::from_vec(vec![1, 2, 2, 2], data), false);
        let y = mfm(&x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let t: Tape = Tape::new();
        let mut seed = 9u64;
        let x = t.leaf(Tensor::from_vec(vec![1, 2, 4, 4], fill32(32, &mut seed)), false);
        let block = ResidualBlock {
            conv1_kernel: t.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false),
            conv1_bias: t.leaf(Tensor::zeros(vec![4]), false),
            conv2_kernel: t.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false),
            conv2_bias: t.leaf(Tensor::zeros(vec![4]), false),
        };
        let y = block.forward(&x).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn residual_block_rejects_channel_mismatch() {
        let t: Tape = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
        let block = ResidualBlock {
            conv1_kernel: t.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false),
            conv1_bias: t.leaf(Tensor::zeros(vec![4]), false),
            conv2_kernel: t.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false),
            conv2_bias: t.leaf(Tensor::zeros(vec![4]), false),
        };
        assert!(block.forward(&x).is_err());
    }

    #[test]
    fn residual_block_gradient_matches_finite_differences() {
        let mut seed = 21u64;
        let x0 = Tensor::from_vec(vec![1, 2, 4, 4], fill64(32, &mut seed));
        let k1 = Tensor::from_vec(vec![4, 2, 3, 3], fill64(72, &mut seed));
        let b1 = Tensor::from_vec(vec![4], fill64(4, &mut seed));
        let k2 = Tensor::from_vec(vec![4, 2, 3, 3], fill64(72, &mut seed));
        let b2 = Tensor::from_vec(vec![4], fill64(4, &mut seed));
        let err = grad_check(
            move |tape, x| {
                let block = ResidualBlock {
                    conv1_kernel: tape.leaf(k1.clone(), false),
                    conv1_bias: tape.leaf(b1.clone(), false),
                    conv2_kernel: tape.leaf(k2.clone(), false),
                    conv2_bias: tape.leaf(b2.clone(), false),
                };
                Ok(block.forward(x)?.sum())
            },
            &x0,
            1e-3,
        );
        assert!(err < 1e-3, "residual block fd error {err}");
    }

    #[test]
    fn eca_kernel_size_follows_the_adaptive_rule() {
        assert_eq!(eca_kernel_size(192), 5);
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(2), 1);
        assert_eq!(eca_kernel_size(1), 1);
        assert!(eca_kernel_size(192) % 2 == 1);
    }

    #[test]
    fn eca_with_zero_kernel_halves_the_input() {
        let t: Tape = Tape::new();
        let mut seed = 13u64;
        let x = t.leaf(Tensor::from_vec(vec![1, 4, 2, 2], fill32(16, &mut seed)), false);
        let eca = Eca {
            channels: 4,
            kernel: t.leaf(Tensor::zeros(vec![3]), false),
        };
        let y = eca.forward(&x).unwrap();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - 0.5 * b).abs() < 1e-7);
        }
    }

    #[test]
    fn eca_attention_lies_in_unit_interval_and_tracks_channel_means() {
        let t: Tape = Tape::new();
        let mut seed = 17u64;
        let x1 = t.leaf(Tensor::from_vec(vec![2, 4, 3, 3], fill32(72, &mut seed)), false);
        // Same values with one channel's mean shifted.
        let mut shifted = x1.value().data().to_vec();
        for v in &mut shifted[..9] {
            *v += 1.0;
        }
        let x2 = t.leaf(Tensor::from_vec(vec![2, 4, 3, 3], shifted), false);
        let eca = Eca {
            channels: 4,
            kernel: t.leaf(Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.5]), false),
        };
        let s1 = eca.attention(&x1).unwrap().value();
        let s2 = eca.attention(&x2).unwrap().value();
        assert!(s1.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(s1.data().iter().zip(s2.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn eca_attention_is_not_scale_invariant() {
        // Doubling the input must change the attention vector: the gate
        // depends nonlinearly on the channel means.
        let t: Tape = Tape::new();
        let mut seed = 19u64;
        let data = fill32(36, &mut seed);
        let x = t.leaf(Tensor::from_vec(vec![1, 4, 3, 3], data.clone()), false);
        let x2 = t.leaf(
            Tensor::from_vec(vec![1, 4, 3, 3], data.iter().map(|v| 2.0 * v).collect()),
            false,
        );
        let eca = Eca {
            channels: 4,
            kernel: t.leaf(Tensor::from_vec(vec![3], vec![0.4, 0.1, -0.3]), false),
        };
        let s1 = eca.attention(&x).unwrap().value();
        let s2 = eca.attention(&x2).unwrap().value();
        assert!(s1.data().iter().zip(s2.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn eca_gradient_matches_finite_differences() {
        let mut seed = 23u64;
        let x0 = Tensor::from_vec(vec![1, 4, 3, 3], fill64(36, &mut seed));
        let kv = Tensor::from_vec(vec![3], fill64(3, &mut seed));
        let err = grad_check(
            move |tape, x| {
                let eca = Eca {
                    channels: 4,
                    kernel: tape.leaf(kv.clone(), false),
                };
                Ok(eca.forward(x)?.sum())
            },
            &x0,
            1e-3,
        );
        assert!(err < 1e-3, "eca fd error {err}");
    }

    fn test_head(t: &Tape<f32>, in_dim: usize, feat: usize, k: usize, activation: HeadActivation, seed: &mut u64) -> Head<f32> {
        let pre = match activation {
            HeadActivation::Identity => feat,
            HeadActivation::Mfm => 2 * feat,
        };
        Head {
            dense_weight: t.leaf(Tensor::from_vec(vec![in_dim, pre], fill32(in_dim * pre, seed)), false),
            dense_bias: t.leaf(Tensor::zeros(vec![pre]), false),
            classifier_weight: t.leaf(Tensor::from_vec(vec![feat, k], fill32(feat * k, seed)), false),
            classifier_bias: t.leaf(Tensor::zeros(vec![k]), false),
            activation,
        }
    }

    #[test]
    fn head_output_shapes_do_not_depend_on_spatial_size() {
        let t: Tape = Tape::new();
        let mut seed = 29u64;
        let head = test_head(&t, 6, 8, 7, HeadActivation::Identity, &mut seed);
        for spatial in [4usize, 8] {
            let x = t.leaf(
                Tensor::from_vec(vec![1, 6, spatial, spatial], fill32(6 * spatial * spatial, &mut seed)),
                false,
            );
            let (features, logits) = head.forward(&x).unwrap();
            assert_eq!(features.shape(), vec![1, 8]);
            assert_eq!(logits.shape(), vec![1, 7]);
        }
    }

    #[test]
    fn head_mfm_activation_halves_the_dense_output() {
        let t: Tape = Tape::new();
        let mut seed = 31u64;
        let head = test_head(&t, 6, 8, 5, HeadActivation::Mfm, &mut seed);
        let x = t.leaf(Tensor::from_vec(vec![2, 6, 4, 4], fill32(192, &mut seed)), false);
        let (features, logits) = head.forward(&x).unwrap();
        assert_eq!(head.dense_weight.shape(), vec![6, 16]);
        assert_eq!(features.shape(), vec![2, 8]);
        assert_eq!(logits.shape(), vec![2, 5]);
    }

    #[test]
    fn head_zero_input_and_biases_give_zero_outputs() {
        let t: Tape = Tape::new();
        let mut seed = 37u64;
        let head = test_head(&t, 6, 8, 7, HeadActivation::Identity, &mut seed);
        let x = t.leaf(Tensor::zeros(vec![1, 6, 4, 4]), false);
        let (features, logits) = head.forward(&x).unwrap();
        assert!(features.value().data().iter().all(|&v| v == 0.0));
        assert!(logits.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_rejects_channel_mismatch() {
        let t: Tape = Tape::new();
        let mut seed = 41u64;
        let head = test_head(&t, 6, 8, 7, HeadActivation::Identity, &mut seed);
        let x = t.leaf(Tensor::zeros(vec![1, 5, 4, 4]), false);
        assert!(head.forward(&x).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut seed = 43u64;
        let x0 = Tensor::from_vec(vec![1, 4, 3, 3], fill64(36, &mut seed));
        let dw = Tensor::from_vec(vec![4, 12], fill64(48, &mut seed));
        let db = Tensor::from_vec(vec![12], fill64(12, &mut seed));
        let cw = Tensor::from_vec(vec![6, 3], fill64(18, &mut seed));
        let cb = Tensor::from_vec(vec![3], fill64(3, &mut seed));
        let err = grad_check(
            move |tape, x| {
                let head = Head {
                    dense_weight: tape.leaf(dw.clone(), false),
                    dense_bias: tape.leaf(db.clone(), false),
                    classifier_weight: tape.leaf(cw.clone(), false),
                    classifier_bias: tape.leaf(cb.clone(), false),
                    activation: HeadActivation::Mfm,
                };
                let (_, logits) = head.forward(x)?;
                logits.softmax_cross_entropy(&[1])
            },
            &x0,
            1e-3,
        );
        assert!(err < 1e-3, "head fd error {err}");
    }
}
