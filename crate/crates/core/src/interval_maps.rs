//! The interval-map family with stretched-exponential return-time tails.
//!
//! The map on `[0,1]` is
//!
//! ```text
//! f(x) = x (1 + c / |log x|^beta)   for x <= 1/2,
//! f(x) = 2x - 1                     for x >  1/2,
//! ```
//!
//! with `beta = 1/gamma - 1` and `c = (log 2)^beta`, so that `f(1/2) = 1`.
//! The base is `Y = (1/2, 1]`, the return time is the first-return time and
//! the induced map is `F(x) = f^tau(x)`.
//!
//! All inverse-branch iteration works in `u = -log x` coordinates: writing
//! `g` for the inverse left branch, `z_n = g^n` and `u_n = -log z_n`, one
//! step of `g` is the unique root `u' > u` of
//!
//! ```text
//! u' - log(1 + c u'^(-beta)) = u,
//! ```
//!
//! which stays well-conditioned long after `z_n` itself would underflow
//! (for gamma = 1, `z_n(1) = 2^-n` dies near n = 700 in double precision).
//! The forward left-branch step is explicit in u: `u -> u - log(1 + c u^-beta)`.

use rand::Rng;
use serde::Serialize;
use std::io::Write;
use thiserror::Error;

use crate::seeds::SeedSpec;

/// Iteration cap for first-return searches; tails are stretched exponential,
/// so hitting this means something is numerically wrong upstream.
pub const DEFAULT_RETURN_CAP: u64 = 10_000_000;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("u_step root solve failed after {iterations} iterations (u={u}, bracket [{lo}, {hi}])")]
    RootSolve {
        u: f64,
        lo: f64,
        hi: f64,
        iterations: u32,
    },
    #[error("return time exceeded cap {cap}")]
    CapExceeded { cap: u64 },
}

/// Parameters of one member of the family.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MapParams {
    /// Tail exponent, in (0, 1].
    pub gamma: f64,
    /// Derived exponent `1/gamma - 1`.
    pub beta: f64,
    /// Left-branch constant `(log 2)^beta`.
    pub c: f64,
}

/// Construct the map with tail exponent `gamma`.
pub fn make_map(gamma: f64) -> Result<MapParams, MapError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(MapError::Domain(format!(
            "gamma must lie in the interval (0, 1], got {gamma}"
        )));
    }
    let beta = 1.0 / gamma - 1.0;
    Ok(MapParams {
        gamma,
        beta,
        c: LN2.powf(beta),
    })
}

/// One application of `f`.
pub fn apply_map(p: &MapParams, x: f64) -> Result<f64, MapError> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(MapError::Domain(format!(
            "apply_map requires x in (0, 1], got {x} (x = 0 is a fixed point with singular formula)"
        )));
    }
    if x > 0.5 {
        Ok(2.0 * x - 1.0)
    } else {
        let u = -x.ln();
        Ok(x * (1.0 + p.c * u.powf(-p.beta)))
    }
}

/// Derivative of the left branch of `f` at `x = e^-u`, evaluated in u.
#[inline]
fn left_branch_fprime_in_u(p: &MapParams, u: f64) -> f64 {
    1.0 + p.c * u.powf(-p.beta) + p.c * p.beta * u.powf(-p.beta - 1.0)
}

/// Forward left-branch step in u-coordinates: `-log f(e^-u)`.
/// Clamped at zero since `f` maps `(0, 1/2]` into `(0, 1]`.
#[inline]
pub fn forward_left_u(p: &MapParams, u: f64) -> f64 {
    (u - (p.c * u.powf(-p.beta)).ln_1p()).max(0.0)
}

/// One inverse-branch step in u-coordinates: the unique `u' > u` with
/// `u' - log(1 + c u'^(-beta)) = u`.
///
/// Bracketed Newton with bisection fallback; the initial bracket
/// `[u, u + log(1 + c u^-beta)]` is exact for `u > 0` and widened
/// geometrically otherwise. Converges at relative tolerance 1e-12 or
/// errors out after 200 iterations.
pub fn u_step(p: &MapParams, u: f64) -> Result<f64, MapError> {
    if !(u >= 0.0) {
        return Err(MapError::Domain(format!("u_step requires u >= 0, got {u}")));
    }
    if p.beta == 0.0 {
        // c = 1 and the recurrence is explicit: u' = u + log 2.
        return Ok(u + LN2);
    }
    let residual = |v: f64| v - (p.c * v.powf(-p.beta)).ln_1p() - u;
    let dresidual = |v: f64| {
        let a = p.c * v.powf(-p.beta);
        1.0 + p.c * p.beta * v.powf(-p.beta - 1.0) / (1.0 + a)
    };

    let (mut lo, mut hi);
    if u > 0.0 {
        lo = u;
        hi = u + (p.c * u.powf(-p.beta)).ln_1p();
    } else {
        lo = 1e-12;
        hi = 1.0;
    }
    let mut widen = 0;
    while residual(hi) < 0.0 {
        hi = u + 2.0 * (hi - u).max(0.5);
        widen += 1;
        if widen > 200 {
            return Err(MapError::RootSolve {
                u,
                lo,
                hi,
                iterations: widen,
            });
        }
    }

    let mut v = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = residual(v);
        if r > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let step = r / dresidual(v);
        let mut next = v - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - v).abs() <= 1e-12 * next.abs().max(1.0) {
            if next <= u {
                // The increment log(1 + c u^-beta) fell below the floating
                // point resolution of u itself (enormous beta, large u).
                return Err(MapError::Domain(format!(
                    "inverse-branch increment underflows at u={u} (beta={})",
                    p.beta
                )));
            }
            return Ok(next);
        }
        v = next;
    }
    Err(MapError::RootSolve {
        u,
        lo,
        hi,
        iterations: 200,
    })
}

/// An inverse-branch orbit in u-coordinates: `u_n = -log z_n(x0)`.
#[derive(Debug, Clone, Serialize)]
pub struct UOrbit {
    /// Starting point in (1/2, 1].
    pub x0: f64,
    /// `u_0 .. u_N`, strictly increasing.
    pub u: Vec<f64>,
}

impl UOrbit {
    /// Tail masses `e^{-u_n}` along the orbit.
    pub fn masses(&self) -> Vec<f64> {
        self.u.iter().map(|&u| (-u).exp()).collect()
    }

    /// Empirical bracket constants: `(delta2, delta1) = (min, max)` of
    /// `u_n / n^gamma` over `1 <= n <= N`.
    pub fn delta_bracket(&self, gamma: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for (n, &u) in self.u.iter().enumerate().skip(1) {
            let r = u / (n as f64).powf(gamma);
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    /// CSV with the fixed header `n,u_n,mass`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,u_n,mass")?;
        for (n, &u) in self.u.iter().enumerate() {
            writeln!(w, "{},{},{}", n, u, (-u).exp())?;
        }
        Ok(())
    }
}

/// Iterate `u_step` from `u_0 = -log x0`, `x0` in (1/2, 1].
pub fn u_orbit(p: &MapParams, x0: f64, n: u64) -> Result<UOrbit, MapError> {
    if !(x0 > 0.5 && x0 <= 1.0) {
        return Err(MapError::Domain(format!(
            "orbit start must lie in (1/2, 1], got {x0}"
        )));
    }
    let mut u = Vec::with_capacity(n as usize + 1);
    u.push(-x0.ln());
    for _ in 0..n {
        let next = u_step(p, *u.last().unwrap())?;
        u.push(next);
    }
    Ok(UOrbit { x0, u })
}

/// `u_n(x0)` and the normalized tail mass `e^{-u_n(x0)}`.
///
/// Here `m` is the probability measure Lebesgue/|Y| on Y; with that
/// normalization `e^{-u_n(1)}` is exactly the mass of the branches with
/// return time strictly greater than `n`.
pub fn tail_mass(p: &MapParams, x0: f64, n: u64) -> Result<(f64, f64), MapError> {
    let orbit = u_orbit(p, x0, n)?;
    let u = *orbit.u.last().unwrap();
    Ok((u, (-u).exp()))
}

/// First-return time to `Y = (1/2, 1]` and the landing point `F(x)`.
///
/// The first application is the right branch; once the orbit is in
/// `(0, 1/2]` the iteration runs in u-coordinates, which keeps precision
/// for large return times.
pub fn return_time_and_f(p: &MapParams, x: f64) -> Result<(u64, f64), MapError> {
    return_time_and_f_capped(p, x, DEFAULT_RETURN_CAP)
}

pub fn return_time_and_f_capped(p: &MapParams, x: f64, cap: u64) -> Result<(u64, f64), MapError> {
    if !(x > 0.5 && x <= 1.0) {
        return Err(MapError::Domain(format!(
            "return_time_and_f requires x in (1/2, 1], got {x}"
        )));
    }
    let y = 2.0 * x - 1.0;
    if y > 0.5 {
        return Ok((1, y));
    }
    if y <= 0.0 {
        // x was exactly representable as 1/2 + 0; cannot happen for x > 1/2.
        return Err(MapError::Domain(format!("orbit left the domain at {y}")));
    }
    let mut u = -y.ln();
    let mut tau = 1u64;
    loop {
        if tau >= cap {
            return Err(MapError::CapExceeded { cap });
        }
        u = forward_left_u(p, u);
        tau += 1;
        if u < LN2 {
            return Ok((tau, (-u).exp()));
        }
    }
}

/// One branch of the inducing scheme: the maximal interval in Y with
/// constant return time `n`, stored half-open `(x_lo, x_hi]`, together
/// with its preimage endpoints in u-coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    pub n: u64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl Branch {
    pub fn len(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    /// Length normalized so that m(Y) = 1; computed from the u endpoints,
    /// which is exact even when the branch is far below double-precision
    /// resolution around x.
    pub fn normalized_len(&self) -> f64 {
        (-self.u_lo).exp() - (-self.u_hi).exp()
    }
}

/// The branch partition of Y up to return time `n_max`.
#[derive(Debug, Clone, Serialize)]
pub struct InducingScheme {
    pub params: MapParams,
    pub branches: Vec<Branch>,
    /// Normalized mass of Y not covered by branches with label <= n_max.
    pub residual_mass: f64,
}

impl InducingScheme {
    pub fn n_max(&self) -> u64 {
        self.branches.last().map(|b| b.n).unwrap_or(0)
    }

    /// Branch containing `x`, if any (branches are ordered by decreasing
    /// left endpoint as the label grows).
    pub fn find_branch(&self, x: f64) -> Option<&Branch> {
        self.branches
            .iter()
            .find(|b| x > b.x_lo && x <= b.x_hi)
    }

    /// CSV with the fixed header `n,x_lo,x_hi,length`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,x_lo,x_hi,length")?;
        for b in &self.branches {
            writeln!(w, "{},{},{},{}", b.n, b.x_lo, b.x_hi, b.len())?;
        }
        Ok(())
    }
}

/// Compute the branch partition up to label `n_max`.
///
/// Branch 1 is `(3/4, 1]`; for `n >= 2`, branch n is the set of x in Y with
/// `2x - 1` in `(z_n(1), z_{n-1}(1)]`, where the z-endpoints come from the
/// u-orbit of 1 (f(1/2) = 1 makes `z_{n-1}(1/2) = z_n(1)`, so consecutive
/// branches share endpoints and the normalized lengths telescope).
pub fn branch_partition(p: &MapParams, n_max: u64) -> Result<InducingScheme, MapError> {
    if n_max < 1 {
        return Err(MapError::Domain("n_max must be at least 1".into()));
    }
    let orbit = u_orbit(p, 1.0, n_max)?;
    let mut branches = Vec::with_capacity(n_max as usize);
    for n in 1..=n_max {
        let u_lo = orbit.u[(n - 1) as usize];
        let u_hi = orbit.u[n as usize];
        let z_hi = (-u_lo).exp(); // z_{n-1}(1)
        let z_lo = (-u_hi).exp(); // z_n(1)
        branches.push(Branch {
            n,
            x_lo: 0.5 * (1.0 + z_lo),
            x_hi: 0.5 * (1.0 + z_hi),
            u_lo,
            u_hi,
        });
    }
    Ok(InducingScheme {
        params: *p,
        branches,
        residual_mass: (-orbit.u[n_max as usize]).exp(),
    })
}

/// Numerical certification report for the induced-map conditions:
/// uniform expansion and bounded distortion, sampled.
#[derive(Debug, Clone, Serialize)]
pub struct GMReport {
    /// Minimum sampled expansion ratio |F(y) - F(x)| / |y - x| over all
    /// branches and pairs.
    pub min_expansion: f64,
    /// Maximum sampled |log z_n'(x) - log z_n'(y)| / |x - y| over all n.
    pub distortion_c: f64,
    /// The distortion maximum per n.
    pub per_n_distortion: Vec<(u64, f64)>,
    pub samples_used: usize,
}

/// Sample expansion ratios within each branch and distortion constants of
/// `log z_n'` over Y, for `n` up to the scheme's largest label.
///
/// `log z_n'(x)` is evaluated analytically by the chain rule
/// `log z_n' = -sum_{k=1..n} log f'(z_k(x))` with
/// `f'(x) = 1 + c |log x|^-beta + c beta |log x|^(-beta-1)` on the left
/// branch; finite differences appear only in tests as an independent oracle.
pub fn verify_gm(
    p: &MapParams,
    scheme: &InducingScheme,
    pairs_per_branch: usize,
    seed: SeedSpec,
) -> Result<GMReport, MapError> {
    if scheme.branches.is_empty() {
        return Err(MapError::Domain("empty inducing scheme".into()));
    }
    if pairs_per_branch < 2 {
        return Err(MapError::Domain("pairs_per_branch must be >= 2".into()));
    }
    let mut rng = seed.rng();
    let mut samples_used = 0usize;

    // Expansion: pairs inside each branch, pushed forward through f^n.
    // The pair separation is kept above 1/50 of the branch width so the
    // difference quotient stays well-conditioned.
    let mut min_expansion = f64::INFINITY;
    for b in &scheme.branches {
        let w = b.len();
        if w <= 0.0 {
            continue;
        }
        for _ in 0..pairs_per_branch {
            let t: f64 = rng.random::<f64>() * 0.96 + 0.02;
            let mut s: f64 = rng.random::<f64>() * 0.96 + 0.02;
            if (t - s).abs() < 0.02 {
                s = if t < 0.5 { t + 0.02 } else { t - 0.02 };
            }
            let x = b.x_lo + t * w;
            let y = b.x_lo + s * w;
            let fx = induced_image(p, b.n, x)?;
            let fy = induced_image(p, b.n, y)?;
            let ratio = (fx - fy).abs() / (x - y).abs();
            min_expansion = min_expansion.min(ratio);
            samples_used += 1;
        }
    }

    // Distortion of log z_n' over pairs in the full base Y.
    let n_max = scheme.n_max();
    let mut per_n = vec![0.0f64; n_max as usize + 1];
    let distortion_pairs = pairs_per_branch.min(2_000).max(64);
    for _ in 0..distortion_pairs {
        let x = 0.5 + 0.5 * (rng.random::<f64>() * 0.98 + 0.01);
        let mut y = 0.5 + 0.5 * (rng.random::<f64>() * 0.98 + 0.01);
        if (x - y).abs() < 5e-3 {
            y = if x < 0.75 { x + 0.1 } else { x - 0.1 };
        }
        let inv = 1.0 / (x - y).abs();
        let mut ux = -x.ln();
        let mut uy = -y.ln();
        let mut lx = 0.0f64;
        let mut ly = 0.0f64;
        for n in 1..=n_max {
            ux = u_step(p, ux)?;
            uy = u_step(p, uy)?;
            lx -= left_branch_fprime_in_u(p, ux).ln();
            ly -= left_branch_fprime_in_u(p, uy).ln();
            let d = (lx - ly).abs() * inv;
            if d > per_n[n as usize] {
                per_n[n as usize] = d;
            }
        }
        samples_used += 1;
    }

    let per_n_distortion: Vec<(u64, f64)> =
        (1..=n_max).map(|n| (n, per_n[n as usize])).collect();
    let distortion_c = per_n_distortion
        .iter()
        .map(|&(_, d)| d)
        .fold(0.0f64, f64::max);

    Ok(GMReport {
        min_expansion,
        distortion_c,
        per_n_distortion,
        samples_used,
    })
}

/// `F(x) = f^n(x)` for x in the branch with return time n, evaluated with
/// the forward u-space iteration.
fn induced_image(p: &MapParams, n: u64, x: f64) -> Result<f64, MapError> {
    let y = 2.0 * x - 1.0;
    if n == 1 {
        return Ok(y);
    }
    if p.beta == 0.0 {
        // Doubling map: n-1 exact doublings.
        let mut v = y;
        for _ in 0..n - 1 {
            v *= 2.0;
        }
        return Ok(v);
    }
    let mut u = -y.ln();
    for _ in 0..n - 1 {
        u = forward_left_u(p, u);
    }
    Ok((-u).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::seed_stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn make_map_examples() {
        let m = make_map(1.0).unwrap();
        assert_eq!(m.beta, 0.0);
        assert_eq!(m.c, 1.0);
        let m = make_map(0.5).unwrap();
        assert_eq!(m.beta, 1.0);
        assert_relative_eq!(m.c, LN2, epsilon = 1e-15);
        let m = make_map(1.0 / 3.0).unwrap();
        assert_relative_eq!(m.beta, 2.0, epsilon = 1e-12);
        assert_relative_eq!(m.c, LN2 * LN2, epsilon = 1e-12);
        assert!(make_map(0.0).is_err());
        assert!(make_map(1.5).is_err());
        assert!(make_map(-0.3).is_err());
    }

    #[test]
    fn map_fixed_point_normalization() {
        // f(1/2) = 1 within a few units of rounding, for every gamma.
        for gamma in [1.0, 0.75, 0.5, 1.0 / 3.0, 0.2] {
            let p = make_map(gamma).unwrap();
            let f_half = apply_map(&p, 0.5).unwrap();
            assert!((f_half - 1.0).abs() <= 4.0 * f64::EPSILON, "gamma={gamma}");
        }
    }

    #[test]
    fn apply_map_examples() {
        let doubling = make_map(1.0).unwrap();
        assert_relative_eq!(apply_map(&doubling, 0.3).unwrap(), 0.6, epsilon = 1e-15);
        assert_relative_eq!(apply_map(&doubling, 0.75).unwrap(), 0.5, epsilon = 1e-15);
        let half = make_map(0.5).unwrap();
        assert_relative_eq!(apply_map(&half, 0.5).unwrap(), 1.0, epsilon = 1e-14);
        assert!(apply_map(&doubling, 0.0).is_err());
        assert!(apply_map(&doubling, 1.0001).is_err());
        assert!(apply_map(&doubling, -0.1).is_err());
    }

    #[test]
    fn u_step_doubling_is_shift_by_ln2() {
        let p = make_map(1.0).unwrap();
        for u in [0.0, 0.3, 5.0, 300.0] {
            assert_relative_eq!(u_step(&p, u).unwrap(), u + LN2, epsilon = 1e-15);
        }
    }

    /// Independent oracle: bisection on the monotone residual.
    fn u_step_bisection_oracle(p: &MapParams, u: f64) -> f64 {
        let residual = |v: f64| v - (p.c * v.powf(-p.beta)).ln_1p() - u;
        let mut lo = if u > 0.0 { u } else { 1e-14 };
        let mut hi = u + 1.0;
        while residual(hi) < 0.0 {
            hi = u + 2.0 * (hi - u);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn u_step_matches_bisection_oracle() {
        let p = make_map(0.5).unwrap();
        let expected = u_step_bisection_oracle(&p, LN2);
        let got = u_step(&p, LN2).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        // sanity: the oracle root satisfies the displayed equation
        assert!((expected - (1.0 + LN2 / expected).ln() - LN2).abs() < 1e-11);

        for gamma in [0.9, 0.5, 1.0 / 3.0, 0.25] {
            let p = make_map(gamma).unwrap();
            for u in [0.0, 0.01, LN2, 2.0, 17.5] {
                let got = u_step(&p, u).unwrap();
                let want = u_step_bisection_oracle(&p, u);
                assert_relative_eq!(got, want, epsilon = 1e-11, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn u_step_of_zero_is_ln2_for_every_gamma() {
        // z_1(1) = 1/2 because f(1/2) = 1, hence u_1(1) = log 2 exactly.
        for gamma in [1.0, 0.8, 0.5, 1.0 / 3.0, 0.2] {
            let p = make_map(gamma).unwrap();
            assert_relative_eq!(u_step(&p, 0.0).unwrap(), LN2, epsilon = 1e-12);
        }
    }

    #[test]
    fn tail_mass_doubling() {
        let p = make_map(1.0).unwrap();
        let (u, mass) = tail_mass(&p, 1.0, 10).unwrap();
        assert_relative_eq!(u, 10.0 * LN2, epsilon = 1e-13);
        assert_relative_eq!(mass, 2f64.powi(-10), epsilon = 1e-12);
        let (u0, m0) = tail_mass(&p, 1.0, 0).unwrap();
        assert_eq!(u0, 0.0);
        assert_eq!(m0, 1.0);
    }

    #[test]
    fn tail_rate_recovers_gamma_half() {
        // Deterministic recurrence + least-squares oracle on
        // log(-log mass) vs log n, over n in [20, 500].
        let p = make_map(0.5).unwrap();
        let orbit = u_orbit(&p, 1.0, 500).unwrap();
        let n: Vec<u64> = (0..=500).collect();
        let curve = crate::stat_fit::TailCurve::new(
            n,
            orbit.masses(),
            vec![0.0; orbit.u.len()],
        );
        let (gamma_hat, _, fit) = crate::stat_fit::stretched_exp_fit(&curve, (20, 500)).unwrap();
        assert!((gamma_hat - 0.5).abs() < 0.05, "gamma_hat = {gamma_hat}");
        assert!(fit.r2 > 0.999);
    }

    #[test]
    fn return_time_examples() {
        let p = make_map(1.0).unwrap();
        let (tau, fx) = return_time_and_f(&p, 0.6).unwrap();
        assert_eq!(tau, 3);
        assert_relative_eq!(fx, 0.8, epsilon = 1e-12);
        let (tau, fx) = return_time_and_f(&p, 0.8).unwrap();
        assert_eq!(tau, 1);
        assert_relative_eq!(fx, 0.6, epsilon = 1e-15);
        assert!(return_time_and_f(&p, 0.5).is_err());
        assert!(return_time_and_f_capped(&make_map(0.5).unwrap(), 0.5 + 1e-15, 10).is_err());
    }

    #[test]
    fn branch_partition_doubling_closed_form() {
        let p = make_map(1.0).unwrap();
        let scheme = branch_partition(&p, 40).unwrap();
        let mut total = 0.0;
        for b in &scheme.branches {
            let lo = 0.5 + 2f64.powi(-(b.n as i32) - 1);
            let hi = 0.5 + 2f64.powi(-(b.n as i32));
            assert_relative_eq!(b.x_lo, lo, epsilon = 1e-12);
            assert_relative_eq!(b.x_hi, hi, epsilon = 1e-12);
            assert_relative_eq!(b.normalized_len(), 2f64.powi(-(b.n as i32)), epsilon = 1e-12);
            total += b.len();
        }
        // lengths sum to |Y| (1/2 in x units) up to the residual
        assert_relative_eq!(total, 0.5 * (1.0 - scheme.residual_mass), epsilon = 1e-12);
    }

    #[test]
    fn branch_labels_match_return_times() {
        for gamma in [1.0, 0.5, 1.0 / 3.0] {
            let p = make_map(gamma).unwrap();
            let scheme = branch_partition(&p, 400).unwrap();
            let mut rng = seed_stream(31337, 0).rng();
            for _ in 0..10_000 {
                let x = 0.5 + 0.5 * rng.random::<f64>();
                let Some(branch) = scheme.find_branch(x) else {
                    continue; // residual sliver near 1/2
                };
                let (tau, _) = return_time_and_f(&p, x).unwrap();
                assert_eq!(tau, branch.n, "gamma={gamma} x={x}");
            }
        }
    }

    #[test]
    fn partition_tail_consistency() {
        // tail_mass(n) = sum of normalized branch lengths of labels > n
        // plus residual. (The labels >= n+1 reading; the gamma = 1 closed
        // form 2^-n pins the convention.)
        for gamma in [1.0, 0.5] {
            let p = make_map(gamma).unwrap();
            let n_max = 120;
            let scheme = branch_partition(&p, n_max).unwrap();
            for n in [0u64, 1, 2, 7, 50, 119, 120] {
                let (_, mass) = tail_mass(&p, 1.0, n).unwrap();
                let sum: f64 = scheme
                    .branches
                    .iter()
                    .filter(|b| b.n > n)
                    .map(|b| b.normalized_len())
                    .sum::<f64>()
                    + scheme.residual_mass;
                assert!((mass - sum).abs() < 1e-9, "gamma={gamma} n={n}: {mass} vs {sum}");
            }
        }
    }

    #[test]
    fn branches_disjoint_ordered_exhaustive() {
        let p = make_map(0.5).unwrap();
        let scheme = branch_partition(&p, 200).unwrap();
        for w in scheme.branches.windows(2) {
            // ordered by decreasing left endpoint as n grows, adjacent
            // branches share an endpoint (half-open intervals, disjoint)
            assert!(w[1].x_hi <= w[0].x_lo + 1e-15);
            assert_relative_eq!(w[1].x_hi, w[0].x_lo, epsilon = 1e-12);
        }
        assert_relative_eq!(scheme.branches[0].x_hi, 1.0, epsilon = 1e-15);
        let covered: f64 = scheme.branches.iter().map(|b| b.normalized_len()).sum();
        assert_relative_eq!(covered, 1.0 - scheme.residual_mass, epsilon = 1e-9);
    }

    #[test]
    fn verify_gm_doubling_exact() {
        let p = make_map(1.0).unwrap();
        let scheme = branch_partition(&p, 12).unwrap();
        let report = verify_gm(&p, &scheme, 200, seed_stream(5, 0)).unwrap();
        // F is affine with slope 2^n on branch n; the global minimum is 2.
        assert!((report.min_expansion - 2.0).abs() < 1e-9);
        assert!(report.distortion_c < 1e-9);
    }

    #[test]
    fn verify_gm_gamma_half_expansion_and_distortion_stability() {
        let p = make_map(0.5).unwrap();
        let scheme = branch_partition(&p, 200).unwrap();
        let report = verify_gm(&p, &scheme, 400, seed_stream(6, 0)).unwrap();
        assert!(report.min_expansion >= 2.0 - 1e-9, "{}", report.min_expansion);
        let max50 = report
            .per_n_distortion
            .iter()
            .filter(|&&(n, _)| n <= 50)
            .map(|&(_, d)| d)
            .fold(0.0f64, f64::max);
        let max200 = report.distortion_c;
        assert!(max200 <= 1.1 * max50, "max200={max200} max50={max50}");
    }

    /// Finite-difference oracle for the analytic log-derivative chain rule.
    #[test]
    fn log_derivative_matches_finite_differences() {
        let p = make_map(0.5).unwrap();
        let x = 0.8f64;
        let h = 1e-6;
        for n in [1u64, 3, 10] {
            // analytic: -sum log f'(z_k(x))
            let mut u = -x.ln();
            let mut analytic = 0.0;
            for _ in 0..n {
                u = u_step(&p, u).unwrap();
                analytic -= left_branch_fprime_in_u(&p, u).ln();
            }
            // finite differences on z_n itself
            let zn = |x: f64| -> f64 {
                let mut u = -x.ln();
                for _ in 0..n {
                    u = u_step(&p, u).unwrap();
                }
                (-u).exp()
            };
            let fd = ((zn(x + h) - zn(x - h)) / (2.0 * h)).ln();
            assert!((analytic - fd).abs() < 1e-5, "n={n}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn control_un_bracket_holds() {
        for gamma in [1.0, 0.5, 1.0 / 3.0] {
            let p = make_map(gamma).unwrap();
            let orbit = u_orbit(&p, 1.0, 500).unwrap();
            let (d2, d1) = orbit.delta_bracket(gamma);
            assert!(d2 > 0.0 && d2 <= d1 && d1.is_finite(), "gamma={gamma}: [{d2}, {d1}]");
            for (n, &u) in orbit.u.iter().enumerate().skip(1) {
                let nf = n as f64;
                assert!(u >= d2 * nf.powf(gamma) - 1e-12);
                assert!(u <= d1 * nf.powf(gamma) + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn u_step_strictly_increases(gamma in 0.15f64..=1.0, u in 0.0f64..40.0) {
            let p = make_map(gamma).unwrap();
            let next = u_step(&p, u).unwrap();
            prop_assert!(next > u);
        }

        #[test]
        fn inverse_branch_consistency(gamma in 0.1f64..=1.0, x in 1e-6f64..=0.5) {
            // apply_map(e^{-u_step(-log x)}) = x to 1e-10 relative error.
            let p = make_map(gamma).unwrap();
            let u_next = u_step(&p, -x.ln()).unwrap();
            let z = (-u_next).exp();
            prop_assert!(z <= 0.5 + 1e-12);
            let roundtrip = apply_map(&p, z).unwrap();
            prop_assert!((roundtrip - x).abs() <= 1e-10 * x.abs().max(1e-12));
        }

        #[test]
        fn orbits_strictly_increasing(gamma in 0.1f64..=1.0, x0 in 0.5001f64..=1.0) {
            let p = make_map(gamma).unwrap();
            let orbit = u_orbit(&p, x0, 64).unwrap();
            for w in orbit.u.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}
