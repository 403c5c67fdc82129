/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Mean binary cross-entropy over the bits, probabilities clamped to `[eps, 1 - eps]`.
pub fn loss_bce(probs: &[f64], targets: &[f64]) -> f64 {
    bce_with_grad(probs, targets).0
}

/// Mean absolute error over the coordinates.
pub fn loss_l1(pred: &[f64], target: &[f64]) -> f64 {
    l1_with_grad(pred, target).0
}

pub(crate) fn bce_with_grad(probs: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let q = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            // The clamp is flat outside its range.
            if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
                0.0
            } else {
                (-t / q + (1.0 - t) / (1.0 - q)) / n
            }
        })
        .collect();
    (loss / n, grad)
}

pub(crate) fn l1_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let t = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((loss_bce(&[0.5; 8], &t) - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(loss_bce(&t, &t) <= 1e-6);
        assert!(loss_bce(&t, &t) >= 0.0);
    }

    #[test]
    fn l1_closed_forms() {
        assert_eq!(loss_l1(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(loss_l1(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        assert_eq!(loss_l1(&[0.5, 0.0], &[0.0, 0.0]), 0.25);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-6;
        let p = [0.2, 0.7, 0.55];
        let t = [1.0, 0.0, 1.0];
        let (_, g) = bce_with_grad(&p, &t);
        for k in 0..3 {
            let (mut hi, mut lo) = (p, p);
            hi[k] += h;
            lo[k] -= h;
            let fd = (loss_bce(&hi, &t) - loss_bce(&lo, &t)) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        let (_, g) = l1_with_grad(&[0.4, -0.2], &[0.1, 0.3]);
        assert_eq!(g, vec![0.5, -0.5]);
    }
}
