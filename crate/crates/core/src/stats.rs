//! Batch-means confidence intervals and small summary helpers.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Streaming batch means over a fixed batch size.
#[derive(Clone, Debug)]
pub struct BatchMeans {
    batch_size: u64,
    sum: f64,
    filled: u64,
    means: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, value: f64) -> bool {
        (self.lower()..=self.upper()).contains(&value)
    }
}

impl BatchMeans {
    pub fn new(batch_size: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self {
            batch_size,
            sum: 0.0,
            filled: 0,
            means: Vec::new(),
        }
    }

    pub fn push(&mut self, value: f64) {
        self.sum += value;
        self.filled += 1;
        if self.filled == self.batch_size {
            self.means.push(self.sum / self.batch_size as f64);
            self.sum = 0.0;
            self.filled = 0;
        }
    }

    /// Completed batch means; a trailing partial batch is dropped.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Mean of the batch means and its standard error, `None` with fewer
    /// than two batches.
    pub fn standard_error(&self) -> Option<(f64, f64)> {
        if self.means.len() < 2 {
            return None;
        }
        let (mean, var) = mean_variance(&self.means);
        Some((mean, (var / self.means.len() as f64).sqrt()))
    }

    /// Student-t interval over the completed batches, `None` with fewer
    /// than two of them.
    pub fn interval(&self, confidence: f64) -> Option<ConfidenceInterval> {
        let (mean, se) = self.standard_error()?;
        let b = self.means.len();
        let t = StudentsT::new(0.0, 1.0, (b - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.5 + confidence / 2.0);
        Some(ConfidenceInterval {
            mean,
            half_width: t * se,
        })
    }
}

/// Mean and unbiased sample variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty sample");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `½ Σ |p - q|` over aligned probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
