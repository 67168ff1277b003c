//! Shared statistical fitting and testing utilities: stretched-exponential
//! tail fits, a one-sample Kolmogorov-Smirnov test and an iterated-logarithm
//! ratio diagnostic.

use serde::Serialize;
use std::io::Write;
use thiserror::Error;

use crate::numeric::norm_cdf;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {need} usable points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("c2 must be positive, got {0}")]
    BadC2(f64),
    #[error("{0}")]
    Domain(String),
}

/// A `(n, p_n)` tail curve with per-point standard errors.
/// `stderr` entries are zero for deterministic curves.
#[derive(Debug, Clone, Serialize)]
pub struct TailCurve {
    pub n: Vec<u64>,
    pub p: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl TailCurve {
    pub fn new(n: Vec<u64>, p: Vec<f64>, stderr: Vec<f64>) -> Self {
        assert_eq!(n.len(), p.len());
        assert_eq!(n.len(), stderr.len());
        TailCurve { n, p, stderr }
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    /// CSV with the fixed header `n,p,stderr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,p,stderr")?;
        for i in 0..self.n.len() {
            writeln!(w, "{},{},{}", self.n[i], self.p[i], self.stderr[i])?;
        }
        Ok(())
    }
}

/// Least-squares fit summary on transformed coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub stderr_slope: f64,
    pub n_points: usize,
    pub transform: String,
}

/// Plain (unweighted) ordinary least squares of y on x.
pub fn ols(x: &[f64], y: &[f64], transform: &str) -> Result<FitResult, FitError> {
    let n = x.len();
    if n < 3 {
        return Err(FitError::TooFewPoints { need: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    if sxx == 0.0 {
        return Err(FitError::Domain("degenerate x values in regression".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|yi| (yi - my) * (yi - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let e = yi - (intercept + slope * xi);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    let stderr_slope = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(FitResult {
        slope,
        intercept,
        r2,
        stderr_slope,
        n_points: n,
        transform: transform.to_string(),
    })
}

/// Fit `p_n ~ exp(-kappa * n^gamma)` by least squares of `log(-log p)` on
/// `log n` over the index window `n_range = (n_lo, n_hi)` inclusive.
///
/// Points with `p <= 0` or `p >= 1` carry no information under the double
/// logarithm and are filtered out (the count removed is reported through the
/// returned point count). Returns `(gamma_hat, kappa_hat, fit)`.
pub fn stretched_exp_fit(
    curve: &TailCurve,
    n_range: (u64, u64),
) -> Result<(f64, f64, FitResult), FitError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..curve.len() {
        let n = curve.n[i];
        let p = curve.p[i];
        if n < n_range.0 || n > n_range.1 || n == 0 {
            continue;
        }
        if p <= 0.0 || p >= 1.0 {
            continue; // filtered: no information in log(-log p)
        }
        xs.push((n as f64).ln());
        ys.push((-p.ln()).ln());
    }
    if xs.len() < 3 {
        return Err(FitError::TooFewPoints {
            need: 3,
            got: xs.len(),
        });
    }
    let fit = ols(&xs, &ys, "loglog_vs_logn")?;
    Ok((fit.slope, fit.intercept.exp(), fit))
}

/// One-sample Kolmogorov-Smirnov test of `samples` against N(mu, sigma^2).
/// Returns `(statistic, p_value)` with the asymptotic Kolmogorov p-value.
pub fn ks_normal_test(samples: &[f64], mu: f64, sigma: f64) -> Result<(f64, f64), FitError> {
    if sigma <= 0.0 {
        return Err(FitError::BadSigma(sigma));
    }
    let n = samples.len();
    if n < 50 {
        return Err(FitError::TooFewPoints { need: 50, got: n });
    }
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = norm_cdf((x - mu) / sigma);
        let hi = (i as f64 + 1.0) / nf - cdf;
        let lo = cdf - i as f64 / nf;
        d = d.max(hi).max(lo);
    }
    Ok((d, kolmogorov_sf(nf.sqrt() * d)))
}

/// Kolmogorov distribution survival function
/// `Q(t) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 t^2)`,
/// truncated at 100 terms or absolute tolerance 1e-10.
fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100u32 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        sum += sign * term;
        if term < 1e-10 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Iterated-logarithm ratio `max_{16 <= k <= n} |S_k| / sqrt(2 c^2 k lnln k)`
/// where `s[k]` is the partial sum at index `k` (`s[0] = 0`).
pub fn lil_ratio(s: &[f64], c2: f64, n: usize) -> Result<f64, FitError> {
    if c2 <= 0.0 {
        return Err(FitError::BadC2(c2));
    }
    if n < 16 || s.len() <= n {
        return Err(FitError::Domain(format!(
            "need partial sums up to n >= 16, got n={n} with {} entries",
            s.len()
        )));
    }
    let mut best: f64 = 0.0;
    for k in 16..=n {
        let kf = k as f64;
        let denom = (2.0 * c2 * kf * kf.ln().ln()).sqrt();
        best = best.max(s[k].abs() / denom);
    }
    Ok(best)
}
