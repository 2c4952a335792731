use serde::{Deserialize, Serialize};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    pub fn scaled(self, c: f64) -> Self {
        Self { value: self.value * c, se: self.se * c.abs() }
    }

    /// `g(value)` with the delta-method standard error `|g'(value)| se`.
    pub fn map(self, g: impl Fn(f64) -> f64, dg: impl Fn(f64) -> f64) -> Self {
        Self { value: g(self.value), se: dg(self.value).abs() * self.se }
    }
}

/// Running sample statistics, accumulated in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    count: u64,
    mean: f64,
    m2: f64,
    max_abs: f64,
    sum_abs: f64,
    nonfinite: u64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, v: f64) {
        if !v.is_finite() {
            self.nonfinite += 1;
            return;
        }
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
        self.max_abs = self.max_abs.max(v.abs());
        self.sum_abs += v.abs();
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn nonfinite(&self) -> u64 {
        self.nonfinite
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Mean with the standard error of the mean.
    pub fn estimate(&self) -> Estimate {
        let se = if self.count < 2 { 0.0 } else { (self.variance() / self.count as f64).sqrt() };
        Estimate { value: self.mean, se }
    }

    /// Share of the total absolute sum contributed by the largest sample.
    pub fn max_share(&self) -> f64 {
        if self.sum_abs > 0.0 {
            self.max_abs / self.sum_abs
        } else {
            0.0
        }
    }
}

impl Extend<f64> for Accumulator {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.push(v);
        }
    }
}
