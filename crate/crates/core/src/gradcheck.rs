//! Central finite-difference gradient checking on the 64-bit reference path.

use crate::tape::{ShapeError, Tape, Variable};
use crate::tensor::Tensor;

/// Compares the analytic gradient of the scalar function `f` at `x0` against
/// central finite differences with step `h`, returning the max over
/// coordinates of `|analytic - fd| / max(1, |analytic|)`.
///
/// `f` receives a fresh tape and the variable being checked; any constants it
/// needs must be captured and replayed identically on every call. Non-finite
/// comparisons return `f64::INFINITY` as the failure value.
pub fn grad_check<F>(f: F, x0: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&Tape<f64>, &Variable<f64>) -> Result<Variable<f64>, ShapeError>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = f(&tape, &x).expect("grad_check: function failed to evaluate");
    y.backward().expect("grad_check: backward failed");
    let analytic = x.grad().expect("grad_check: no gradient on the input leaf");

    let eval = |data: Vec<f64>| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(x0.shape().to_vec(), data), false);
        let y = f(&tape, &x).expect("grad_check: function failed to evaluate");
        y.value().item()
    };

    let base = x0.data();
    let mut worst = 0.0f64;
    for i in 0..x0.numel() {
        let mut plus = base.to_vec();
        plus[i] += h;
        let mut minus = base.to_vec();
        minus[i] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        if !rel.is_finite() {
            return f64::INFINITY;
        }
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect()
    }

    #[test]
    fn quadratic_is_exact() {
        // sum of squares via scale_channels(x, gap(x)) on a [1,D,1,1] tensor;
        // both routes go through x, so grad = 2x and the fd error is pure
        // rounding.
        let x0 = Tensor::from_vec(vec![1, 4, 1, 1], vec![0.5, -1.0, 2.0, 0.3]);
        let err = grad_check(
            |_, x| {
                let s = x.global_avg_pool()?;
                Ok(x.scale_channels(&s)?.sum())
            },
            &x0,
            1e-3,
        );
        assert!(err < 1e-6, "quadratic fd error {err}");
    }

    #[test]
    fn linear_sum_is_exact() {
        let x0 = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.25]);
        let err = grad_check(|_, x| Ok(x.sum()), &x0, 1e-3);
        assert!(err < 1e-12, "linear fd error {err}");
    }

    #[test]
    fn conv_and_pairwise_max_chain() {
        let mut seed = 11u64;
        let x0 = Tensor::from_vec(vec![1, 2, 5, 5], fill(50, &mut seed));
        let kv = Tensor::from_vec(vec![4, 2, 3, 3], fill(72, &mut seed));
        let bv = Tensor::from_vec(vec![4], fill(4, &mut seed));
        let err = grad_check(
            move |tape, x| {
                let k = tape.leaf(kv.clone(), false);
                let b = tape.leaf(bv.clone(), false);
                let y = x.conv2d(&k, &b, 1, 1)?;
                let lo = y.slice_channels(0, 2)?;
                let hi = y.slice_channels(2, 4)?;
                Ok(lo.elemwise_max(&hi)?.sum())
            },
            &x0,
            1e-3,
        );
        assert!(err < 1e-3, "conv chain fd error {err}");
    }

    #[test]
    fn nan_reports_failure_value() {
        let x0 = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let err = grad_check(|_, x| Ok(x.sum().scale_const(f64::NAN)), &x0, 1e-3);
        assert!(err.is_infinite());
    }
}
