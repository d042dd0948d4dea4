//! Distribution helpers: normal and χ² tail functions, the noncentral χ²
//! law used for stagewise power, and Kolmogorov–Smirnov tests used by the
//! calibration checks.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn norm_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 1.0;
    }
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    std_normal().cdf(z)
}

pub fn norm_sf(z: f64) -> f64 {
    norm_cdf(-z)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile; returns ±∞ at 0 and 1.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    std_normal().inverse_cdf(p)
}

/// Upper tail `P(χ²_d > x)`.
pub fn chi2_sf(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if d == 2 {
        return (-0.5 * x).exp();
    }
    gamma_ur(d as f64 / 2.0, x / 2.0)
}

pub fn chi2_cdf(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if d == 2 {
        return -(-0.5 * x).exp_m1();
    }
    gamma_lr(d as f64 / 2.0, x / 2.0)
}

/// Inverse survival function: the `x` with `P(χ²_d > x) = p`.
pub fn chi2_isf(d: usize, p: f64) -> f64 {
    chi2_isf_tails(d, p, 1.0 - p)
}

/// Like [`chi2_isf`], given both tails `upper = P(χ²_d > x)` and
/// `lower = P(χ²_d ≤ x)` so that either can be tiny without cancellation.
pub fn chi2_isf_tails(d: usize, upper: f64, lower: f64) -> f64 {
    if lower <= 0.0 {
        return 0.0;
    }
    if upper <= 0.0 {
        return f64::INFINITY;
    }
    if d == 2 {
        return if upper < 0.5 {
            -2.0 * upper.ln()
        } else {
            -2.0 * (-lower).ln_1p()
        };
    }
    // bisection on the log of whichever tail is smaller
    let use_upper = upper < 0.5;
    let target = if use_upper { upper.ln() } else { lower.ln() };
    let below = |x: f64| {
        if use_upper {
            chi2_sf(d, x).ln() > target
        } else {
            chi2_cdf(d, x).ln() < target
        }
    };
    let mut lo = 0.0;
    let mut hi = (d as f64).max(1.0);
    while below(hi) {
        lo = hi;
        hi *= 2.0;
    }
    if !use_upper {
        while hi > 1e-300 && !below(0.5 * hi) {
            hi *= 0.5;
        }
        lo = 0.5 * hi;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn poisson_log_weight(k: usize, mean: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -mean + k as f64 * mean.ln() - ln_gamma(k as f64 + 1.0)
}

/// Sums `Σ_k Pois(k; mean) · term(k)` outward from the Poisson mode.
fn poisson_mixture(mean: f64, term: impl Fn(usize) -> f64) -> f64 {
    if mean == 0.0 {
        return term(0);
    }
    let mode = mean.floor() as usize;
    let mut total = 0.0;
    let mut k = mode;
    loop {
        let w = poisson_log_weight(k, mean).exp();
        total += w * term(k);
        if w < 1e-18 && k > mode {
            break;
        }
        k += 1;
    }
    let mut k = mode;
    while k > 0 {
        k -= 1;
        let w = poisson_log_weight(k, mean).exp();
        total += w * term(k);
        if w < 1e-18 {
            break;
        }
    }
    total
}

/// Noncentral χ² with `d` degrees of freedom and noncentrality `ncp`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoncentralChiSquared {
    pub d: usize,
    pub ncp: f64,
}

impl NoncentralChiSquared {
    pub fn new(d: usize, ncp: f64) -> Self {
        assert!(d >= 1, "degrees of freedom must be positive");
        assert!(ncp >= 0.0 && ncp.is_finite(), "noncentrality must be finite and >= 0");
        Self { d, ncp }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let half = self.d as f64 / 2.0;
        poisson_mixture(self.ncp / 2.0, |k| gamma_lr(half + k as f64, x / 2.0)).clamp(0.0, 1.0)
    }

    pub fn sf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        let half = self.d as f64 / 2.0;
        poisson_mixture(self.ncp / 2.0, |k| gamma_ur(half + k as f64, x / 2.0)).clamp(0.0, 1.0)
    }

    /// Ratio of this density to the central χ²_d density at `x`.
    pub fn density_ratio(&self, x: f64) -> f64 {
        if self.ncp == 0.0 {
            return 1.0;
        }
        if x <= 0.0 {
            return (-self.ncp / 2.0).exp();
        }
        let half = self.d as f64 / 2.0;
        let z = self.ncp * x / 4.0;
        let log_term = |k: usize| {
            k as f64 * z.ln() - ln_gamma(k as f64 + 1.0) + ln_gamma(half) - ln_gamma(half + k as f64)
        };
        // terms increase while z / ((k+1)(half+k)) >= 1
        let mut peak = 0usize;
        while z / ((peak as f64 + 1.0) * (half + peak as f64)) >= 1.0 {
            peak += 1;
        }
        let top = log_term(peak);
        let mut sum = 0.0;
        let mut k = peak;
        loop {
            let t = (log_term(k) - top).exp();
            sum += t;
            if t < 1e-18 {
                break;
            }
            k += 1;
        }
        let mut k = peak;
        while k > 0 {
            k -= 1;
            let t = (log_term(k) - top).exp();
            sum += t;
            if t < 1e-18 {
                break;
            }
        }
        (top + sum.ln() - self.ncp / 2.0).exp()
    }
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{k-1} exp(-2k²λ²)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test of `sample` against `cdf`.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let en = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    }
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.total_cmp(q));
    xb.sort_by(|p, q| p.total_cmp(q));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    }
}
