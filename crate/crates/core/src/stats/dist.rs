//! Distribution distances and binomial intervals.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::{Domain, Stream};

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// KS distance to `N(0, sigma²)`; a degenerate `sigma` compares with a point
/// mass at 0.
pub fn ks_normal(sample: &[f64], sigma: f64) -> f64 {
    if !(sigma > 0.0) {
        return ks_distance(sample, |x| if x >= 0.0 { 1.0 } else { 0.0 });
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    ks_distance(sample, |x| n.cdf(x))
}

pub fn ks_uniform(sample: &[f64], lo: f64, hi: f64) -> f64 {
    ks_distance(sample, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Two-sample KS distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Wilson score interval for `k` successes in `n` trials at normal quantile `z`.
pub fn wilson(k: f64, n: f64, z: f64) -> [f64; 2] {
    if !(n > 0.0) {
        return [0.0, 1.0];
    }
    let p = (k / n).clamp(0.0, 1.0);
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / den;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / den;
    let lo = if p == 0.0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (centre + half).min(1.0) };
    [lo, hi]
}

pub const Z95: f64 = 1.959_963_984_540_054;

/// Quantile `q` of the KS distance between `samples` i.i.d. standard normal
/// draws and their law, over `runs` control runs.
pub fn ks_null_quantile(samples: usize, runs: usize, q: f64, seed: u64) -> f64 {
    let mut ds: Vec<f64> = (0..runs)
        .map(|r| {
            let mut st = Stream::new(seed, Domain::Control, r as u64);
            let xs: Vec<f64> = (0..samples).map(|_| st.normal()).collect();
            ks_normal(&xs, 1.0)
        })
        .collect();
    ds.sort_by(f64::total_cmp);
    let idx = ((q * runs as f64).ceil() as usize).clamp(1, runs) - 1;
    ds[idx]
}

/// Mean and the half-width of a 95% interval from batch values.
pub fn batch_interval(values: &[f64]) -> (f64, f64) {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, b - 1.0).map(|d| d.inverse_cdf(0.975)).unwrap_or(Z95);
    (mean, t * (var / b).sqrt())
}
