use serde::Serialize;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn deterministic(value: f64) -> Self {
        Estimate {
            value,
            std_error: 0.0,
        }
    }

    /// Whether `target` lies within `k` standard errors of the estimate.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Sample mean and standard error of the mean, summed in a fixed order.
pub fn mean_and_error(samples: &[f64]) -> Estimate {
    let n = samples.len();
    if n == 0 {
        return Estimate::deterministic(0.0);
    }
    let mean = crate::par::sum(n, |i| samples[i]) / n as f64;
    if n == 1 {
        return Estimate::deterministic(mean);
    }
    let var = crate::par::sum(n, |i| (samples[i] - mean).powi(2)) / (n - 1) as f64;
    Estimate {
        value: mean,
        std_error: (var / n as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_error_of_small_sample() {
        let e = mean_and_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        // sample variance 5/3
        assert!((e.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(e.covers(2.6, 1.0));
    }

    #[test]
    fn constant_sample_has_zero_error() {
        let e = mean_and_error(&[0.5; 10]);
        assert_eq!(e, Estimate::deterministic(0.5));
    }
}
