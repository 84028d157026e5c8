//! Small numerical helpers shared across modules.

/// Neumaier-compensated accumulator. Summation order is the insertion order,
/// so results are reproducible bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.carry += (self.sum - t) + value;
        } else {
            self.carry += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// `log(sum_k w_k exp(l_k))` with a max shift. Weights may be negative
/// (sparse-grid rules); `None` when the weighted mass is not positive or every
/// term is `-inf`.
pub fn weighted_log_sum_exp(weights: &[f64], logs: &[f64]) -> Option<f64> {
    debug_assert_eq!(weights.len(), logs.len());
    let max = logs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut acc = CompensatedSum::new();
    for (w, l) in weights.iter().zip(logs) {
        acc.add(w * (l - max).exp());
    }
    let s = acc.value();
    if s > 0.0 {
        Some(max + s.ln())
    } else {
        None
    }
}

/// Ordinary least squares fit of `y = intercept + slope * x`.
/// Returns `(slope, intercept, rms_residual)`.
pub fn affine_least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    (slope, intercept, (rss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let s = compensated_sum([1e16, 1.0, -1e16, 1.0]);
        assert_eq!(s, 2.0);
    }

    #[test]
    fn log_sum_exp_handles_large_magnitudes() {
        let v = weighted_log_sum_exp(&[0.5, 0.5], &[-1000.0, -1000.0]).unwrap();
        assert!((v + 1000.0).abs() < 1e-12);
        let v = weighted_log_sum_exp(&[1.0, 1.0], &[800.0, 0.0]).unwrap();
        assert!((v - 800.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_rejects_empty_mass() {
        assert!(weighted_log_sum_exp(&[1.0], &[f64::NEG_INFINITY]).is_none());
        assert!(weighted_log_sum_exp(&[1.0, -2.0], &[0.0, 0.0]).is_none());
    }

    #[test]
    fn affine_fit_is_exact_on_lines() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let (s, i, r) = affine_least_squares(&x, &y);
        assert!((s + 2.0).abs() < 1e-14 && (i - 3.0).abs() < 1e-14 && r < 1e-14);
    }
}
