//! Small numerical helpers shared by the estimators: stable log-sums,
//! fixed-order reductions, standard errors and quadrature nodes.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// A Monte Carlo value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_error: 0.0,
            n: 1,
        }
    }

    /// Mean and standard error of independent per-sample values.
    pub fn from_samples(samples: &[f64]) -> Self {
        let (value, std_error) = mean_se(samples);
        Estimate {
            value,
            std_error,
            n: samples.len(),
        }
    }

    /// `|self - other| / sqrt(se1^2 + se2^2)`; infinite when the values
    /// differ and both errors vanish, zero when they agree exactly.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        z_score(self.value - other.value, self.std_error.hypot(other.std_error))
    }
}

pub fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}

/// Pairwise summation in index order. The result depends only on the
/// slice contents, never on how they were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and the standard error of the mean (unbiased variance).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n > 0 && xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Sample covariance of paired values (unbiased).
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let (mx, my) = (mean(xs), mean(ys));
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    pairwise_sum(&prods) / (n - 1) as f64
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let c = covariance(xs, ys);
    let vx = covariance(xs, xs);
    let vy = covariance(ys, ys);
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        c / (vx * vy).sqrt()
    }
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Max-shifted `log Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Streaming log-sum-exp accumulator with a running max shift.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LogSumExp {
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Poisson draw that accepts a zero mean.
pub fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("finite positive Poisson mean");
    dist.sample(rng) as usize
}

/// Gauss-Legendre nodes and weights on `[lo, hi]`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let half = (hi - lo) / 2.0;
    let mid = (hi + lo) / 2.0;
    if n == 1 {
        return (vec![mid], vec![hi - lo]);
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_{n-1}(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = mid - half * x;
        nodes[n - 1 - i] = mid + half * x;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

/// Leave-one-out jackknife of a statistic over `n` units. `stat(None)` is the
/// full-sample value and `stat(Some(i))` the value without unit `i`.
pub fn jackknife<F: Fn(Option<usize>) -> f64>(n: usize, stat: F) -> Estimate {
    let full = stat(None);
    if n < 2 {
        return Estimate {
            value: full,
            std_error: 0.0,
            n,
        };
    }
    let loo: Vec<f64> = (0..n).map(|i| stat(Some(i))).collect();
    let m = mean(&loo);
    let dev: Vec<f64> = loo.iter().map(|x| (x - m) * (x - m)).collect();
    let var = (n - 1) as f64 / n as f64 * pairwise_sum(&dev);
    Estimate {
        value: full,
        std_error: var.sqrt(),
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n, 0.0, 2.0);
            // Exact for degree 2n-1.
            let deg = 2 * n - 1;
            let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            let exact = 2f64.powi(deg as i32 + 1) / (deg as f64 + 1.0);
            assert!((approx - exact).abs() < 1e-10 * exact.max(1.0), "n={n}");
        }
    }

    #[test]
    fn streaming_lse_matches_batch() {
        let xs = [-3.0, 700.0, 701.5, -1e3, 2.0];
        let mut acc = LogSumExp::default();
        xs.iter().for_each(|&x| acc.push(x));
        assert!((acc.value() - log_sum_exp(&xs)).abs() < 1e-12);
    }

    #[test]
    fn se_of_constant_is_zero() {
        let (m, se) = mean_se(&[2.5; 10]);
        assert_eq!(m, 2.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn poisson_zero_mean() {
        let mut rng = crate::rng::stream(1, 0, 0);
        assert_eq!(poisson(0.0, &mut rng), 0);
    }
}
