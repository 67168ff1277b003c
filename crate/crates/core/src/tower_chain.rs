//! The tower Markov chain.
//!
//! A tower is a countable (here truncated) probability space of letters
//! `w` with heights `h(w) >= 1`. The chain lives on
//! `S = {(w, l) : 0 <= l < h(w)}`, climbs deterministically below the top
//! level and regenerates at the top:
//!
//! ```text
//! U((w, l), e) = (w, l+1)  if l < h(w) - 1,
//! U((w, l), e) = (e, 0)    if l = h(w) - 1,
//! ```
//!
//! driven by iid innovations `e_k ~ P_A`, one per step. The stationary
//! measure is `nu(w, l) = P_A(w) / E(h)`. Two chains with independent
//! initial states but shared innovations meet exactly one step after the
//! first time both sit on top levels simultaneously, which is what the
//! meeting-time machinery below exploits.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::interval_maps::InducingScheme;
use crate::seeds::SeedSpec;
use crate::stat_fit::TailCurve;

/// Hard cap for dense pair-chain computations (|S|^2 doubles).
pub const EXACT_PAIR_STATE_CAP: usize = 2000;

#[derive(Debug, Error)]
pub enum TowerError {
    #[error("construction error: {0}")]
    Construction(String),
    #[error("state space too large for dense pair-chain computation ({states} > {cap} states); use simulate_meeting")]
    Capacity { states: usize, cap: usize },
    #[error("{0}")]
    Domain(String),
}

/// A finite tower: letters, heights, letter law, and the flattened state
/// enumeration. Immutable after construction and freely shareable.
#[derive(Debug, Clone, Serialize)]
pub struct TowerSpec {
    /// Height per letter (>= 1).
    pub heights: Vec<u32>,
    /// Letter probabilities, summing to 1.
    pub pa: Vec<f64>,
    /// Expected height `E(h)`.
    pub expected_height: f64,
    /// Probability mass of the removed countable tail, folded into the last
    /// letter during truncation. Reported as a modelling bias, zero for
    /// custom towers.
    pub truncated_mass: f64,
    /// Flat state index of `(w, 0)` per letter; states of a letter are
    /// contiguous, so `(w, l)` has index `state_base[w] + l`.
    #[serde(skip)]
    pub state_base: Vec<u32>,
    /// Letter of each flat state.
    #[serde(skip)]
    pub state_letter: Vec<u32>,
    /// Level of each flat state.
    #[serde(skip)]
    pub state_level: Vec<u32>,
    /// CDF of `pa` for innovation sampling.
    #[serde(skip)]
    pub pa_cdf: Vec<f64>,
    /// CDF over letters weighted by `pa * h` for stationary sampling.
    #[serde(skip)]
    pub nu_letter_cdf: Vec<f64>,
}

/// A tower state `(letter, level)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TowerState {
    pub letter: u32,
    pub level: u32,
}

/// Source description for [`make_tower`].
pub enum TowerSource<'a> {
    /// Letters are the branches of an inducing scheme, `h = tau`,
    /// `pa` proportional to normalized branch length.
    MapScheme(&'a InducingScheme),
    /// `h(w) = w` on `{1..n_max}` with
    /// `pa(w) ~ exp(-kappa w^gamma) - exp(-kappa (w+1)^gamma)`.
    Synthetic {
        gamma: f64,
        kappa_tail: f64,
        n_max: u32,
    },
    /// Explicit heights and letter law (must sum to 1).
    Custom { heights: Vec<u32>, pa: Vec<f64> },
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Build a tower from one of the three sources. Fails on periodic support
/// (gcd of heights with positive mass > 1) or vanishing total mass.
pub fn make_tower(source: TowerSource<'_>) -> Result<TowerSpec, TowerError> {
    let (heights, pa, truncated_mass) = match source {
        TowerSource::MapScheme(scheme) => {
            if scheme.branches.is_empty() {
                return Err(TowerError::Construction("empty inducing scheme".into()));
            }
            let heights: Vec<u32> = scheme.branches.iter().map(|b| b.n as u32).collect();
            let mut pa: Vec<f64> = scheme.branches.iter().map(|b| b.normalized_len()).collect();
            // Fold the uncovered tail into the last letter so pa stays a
            // probability; the bias is reported as truncated_mass.
            let resid = scheme.residual_mass;
            if let Some(last) = pa.last_mut() {
                *last += resid;
            }
            (heights, pa, resid)
        }
        TowerSource::Synthetic {
            gamma,
            kappa_tail,
            n_max,
        } => {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(TowerError::Construction(format!(
                    "gamma must lie in (0, 1], got {gamma}"
                )));
            }
            if !(kappa_tail > 0.0) {
                return Err(TowerError::Construction(format!(
                    "kappa_tail must be positive, got {kappa_tail}"
                )));
            }
            if n_max < 2 {
                return Err(TowerError::Construction("n_max must be >= 2".into()));
            }
            let tail = |w: f64| (-kappa_tail * w.powf(gamma)).exp();
            let norm = tail(1.0);
            let mut heights = Vec::with_capacity(n_max as usize);
            let mut pa = Vec::with_capacity(n_max as usize);
            for w in 1..=n_max {
                heights.push(w);
                let mass = if w < n_max {
                    tail(w as f64) - tail(w as f64 + 1.0)
                } else {
                    tail(w as f64) // truncation folds the tail into the last letter
                };
                pa.push(mass / norm);
            }
            (heights, pa, tail(n_max as f64 + 1.0) / norm)
        }
        TowerSource::Custom { heights, pa } => (heights, pa, 0.0),
    };

    if heights.len() != pa.len() || heights.is_empty() {
        return Err(TowerError::Construction(
            "heights and pa must be nonempty and of equal length".into(),
        ));
    }
    if heights.iter().any(|&h| h < 1) {
        return Err(TowerError::Construction("all heights must be >= 1".into()));
    }
    if pa.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(TowerError::Construction(
            "pa entries must be finite and >= 0".into(),
        ));
    }
    let total: f64 = pa.iter().sum();
    if total <= 0.0 {
        return Err(TowerError::Construction("zero total letter mass".into()));
    }
    if (total - 1.0).abs() > 1e-12 {
        return Err(TowerError::Construction(format!(
            "pa must sum to 1 within 1e-12, got {total}"
        )));
    }
    let g = heights
        .iter()
        .zip(&pa)
        .filter(|&(_, &p)| p > 0.0)
        .fold(0u64, |acc, (&h, _)| gcd(acc, h as u64));
    if g != 1 {
        return Err(TowerError::Construction(format!(
            "periodic support: gcd of heights with positive mass is {g}"
        )));
    }

    let expected_height: f64 = heights.iter().zip(&pa).map(|(&h, &p)| h as f64 * p).sum();

    let mut state_base = Vec::with_capacity(heights.len());
    let mut state_letter = Vec::new();
    let mut state_level = Vec::new();
    for (w, &h) in heights.iter().enumerate() {
        state_base.push(state_letter.len() as u32);
        for l in 0..h {
            state_letter.push(w as u32);
            state_level.push(l);
        }
    }

    let mut pa_cdf = Vec::with_capacity(pa.len());
    let mut acc = 0.0;
    for &p in &pa {
        acc += p;
        pa_cdf.push(acc);
    }
    let mut nu_letter_cdf = Vec::with_capacity(pa.len());
    let mut acc = 0.0;
    for (w, &p) in pa.iter().enumerate() {
        acc += p * heights[w] as f64 / expected_height;
        nu_letter_cdf.push(acc);
    }

    Ok(TowerSpec {
        heights,
        pa,
        expected_height,
        truncated_mass,
        state_base,
        state_letter,
        state_level,
        pa_cdf,
        nu_letter_cdf,
    })
}

impl TowerSpec {
    pub fn n_letters(&self) -> usize {
        self.heights.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_letter.len()
    }

    pub fn max_height(&self) -> u32 {
        *self.heights.iter().max().unwrap()
    }

    #[inline]
    pub fn state_index(&self, letter: u32, level: u32) -> u32 {
        debug_assert!(level < self.heights[letter as usize]);
        self.state_base[letter as usize] + level
    }

    #[inline]
    pub fn state(&self, idx: u32) -> TowerState {
        TowerState {
            letter: self.state_letter[idx as usize],
            level: self.state_level[idx as usize],
        }
    }

    /// Is the state on the ground floor `S_0`?
    #[inline]
    pub fn is_s0(&self, idx: u32) -> bool {
        self.state_level[idx as usize] == 0
    }

    /// Is the state a top level (the regeneration atom `S_c`)?
    #[inline]
    pub fn is_sc(&self, idx: u32) -> bool {
        let w = self.state_letter[idx as usize] as usize;
        self.state_level[idx as usize] == self.heights[w] - 1
    }

    /// One transition `U(state, innovation)`.
    #[inline]
    pub fn step(&self, idx: u32, innovation: u32) -> u32 {
        if self.is_sc(idx) {
            self.state_base[innovation as usize]
        } else {
            idx + 1
        }
    }

    #[inline]
    pub fn sample_letter(&self, u: f64) -> u32 {
        (self.pa_cdf.partition_point(|&c| c < u)).min(self.n_letters() - 1) as u32
    }

    /// Sample a state from the stationary measure.
    pub fn sample_nu<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let w = self
            .nu_letter_cdf
            .partition_point(|&c| c < u)
            .min(self.n_letters() - 1);
        let level = (rng.random::<f64>() * self.heights[w] as f64) as u32;
        self.state_base[w] + level.min(self.heights[w] - 1)
    }

    /// The stationary measure `nu(w, l) = pa(w) / E(h)` over flat states.
    pub fn stationary(&self) -> Vec<f64> {
        let mut nu = Vec::with_capacity(self.n_states());
        for s in 0..self.n_states() {
            let w = self.state_letter[s] as usize;
            nu.push(self.pa[w] / self.expected_height);
        }
        nu
    }

    /// Dense transition kernel, row-stochastic, for small towers.
    pub fn transition_matrix(&self) -> Result<Vec<f64>, TowerError> {
        let s = self.n_states();
        if s > EXACT_PAIR_STATE_CAP {
            return Err(TowerError::Capacity {
                states: s,
                cap: EXACT_PAIR_STATE_CAP,
            });
        }
        let mut p = vec![0.0f64; s * s];
        for i in 0..s {
            if self.is_sc(i as u32) {
                for (w, &mass) in self.pa.iter().enumerate() {
                    p[i * s + self.state_base[w] as usize] += mass;
                }
            } else {
                p[i * s + i + 1] = 1.0;
            }
        }
        Ok(p)
    }
}

/// A realized chain trajectory together with the innovations that drove it.
/// `states.len() == innovations.len() + 1`.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    pub spec: &'a TowerSpec,
    pub states: Vec<u32>,
    pub innovations: Vec<u32>,
}

impl<'a> Trajectory<'a> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Simulate `n` steps from a stationary start: `g_0 ~ nu`, innovations iid
/// `pa`, with one innovation consumed per step.
pub fn simulate<'a>(spec: &'a TowerSpec, n: usize, seed: SeedSpec) -> Trajectory<'a> {
    let mut rng = seed.rng();
    let mut states = Vec::with_capacity(n + 1);
    let mut innovations = Vec::with_capacity(n);
    let mut g = spec.sample_nu(&mut rng);
    states.push(g);
    for _ in 0..n {
        let e = spec.sample_letter(rng.random());
        innovations.push(e);
        g = spec.step(g, e);
        states.push(g);
    }
    Trajectory {
        spec,
        states,
        innovations,
    }
}

/// Exact tail `P(T >= n)` of the meeting time of two stationary chains with
/// independent initial states and shared innovations, by evolving the joint
/// law of the off-diagonal pair chain with the diagonal absorbing.
pub fn exact_meeting_tail(spec: &TowerSpec, n_max: usize) -> Result<TailCurve, TowerError> {
    let s = spec.n_states();
    if s > EXACT_PAIR_STATE_CAP {
        return Err(TowerError::Capacity {
            states: s,
            cap: EXACT_PAIR_STATE_CAP,
        });
    }
    let nu = spec.stationary();
    let mut dist = vec![0.0f64; s * s];
    for a in 0..s {
        for b in 0..s {
            if a != b {
                dist[a * s + b] = nu[a] * nu[b];
            }
        }
    }

    let mut n_axis = vec![0u64];
    let mut p_axis = vec![1.0f64]; // P(T >= 0) = 1
    let mut next = vec![0.0f64; s * s];
    let mut regen_a = vec![0.0f64; s]; // left chain at top, indexed by climbed right state
    let mut regen_b = vec![0.0f64; s];

    for n in 1..=n_max {
        // survival after n-1 transitions equals P(T >= n)
        let survival: f64 = dist.iter().sum();
        n_axis.push(n as u64);
        p_axis.push(survival);
        if survival <= 0.0 {
            for m in n + 1..=n_max {
                n_axis.push(m as u64);
                p_axis.push(0.0);
            }
            break;
        }

        next.iter_mut().for_each(|v| *v = 0.0);
        regen_a.iter_mut().for_each(|v| *v = 0.0);
        regen_b.iter_mut().for_each(|v| *v = 0.0);

        for a in 0..s {
            let top_a = spec.is_sc(a as u32);
            let row = a * s;
            for b in 0..s {
                let m = dist[row + b];
                if m == 0.0 {
                    continue;
                }
                let top_b = spec.is_sc(b as u32);
                match (top_a, top_b) {
                    (false, false) => next[(a + 1) * s + (b + 1)] += m,
                    (true, false) => regen_a[b + 1] += m,
                    (false, true) => regen_b[a + 1] += m,
                    // both at top: they regenerate to the same (e, 0)
                    // and meet at step n; mass leaves the off-diagonal.
                    (true, true) => {}
                }
            }
        }
        for b in 0..s {
            let m = regen_a[b];
            if m > 0.0 {
                // the climbed state has level >= 1, never diagonal
                for (w, &mass) in spec.pa.iter().enumerate() {
                    next[(spec.state_base[w] as usize) * s + b] += mass * m;
                }
            }
            let m = regen_b[b];
            if m > 0.0 {
                for (w, &mass) in spec.pa.iter().enumerate() {
                    next[b * s + spec.state_base[w] as usize] += mass * m;
                }
            }
        }
        std::mem::swap(&mut dist, &mut next);
    }

    let stderr = vec![0.0; p_axis.len()];
    Ok(TailCurve::new(n_axis, p_axis, stderr))
}

/// Monte Carlo estimate of the meeting-time tail over independent coupled
/// pairs. Verifies on every replica that once met, the coupled trajectories
/// stay identical for the remainder of the horizon.
pub fn simulate_meeting(
    spec: &TowerSpec,
    replicas: usize,
    n_max: usize,
    seed: SeedSpec,
) -> Result<TailCurve, TowerError> {
    if replicas < 1 {
        return Err(TowerError::Domain("replicas must be >= 1".into()));
    }
    // histogram of min(T, n_max + 1)
    let counts: Vec<AtomicU64> = (0..n_max + 2).map(|_| AtomicU64::new(0)).collect();
    (0..replicas as u64).into_par_iter().for_each(|r| {
        let mut rng = seed.substream(r).rng();
        let mut g = spec.sample_nu(&mut rng);
        let mut g_star = spec.sample_nu(&mut rng);
        let mut met_at: Option<usize> = None;
        if g == g_star {
            met_at = Some(0);
        }
        for n in 1..=n_max {
            let e = spec.sample_letter(rng.random());
            g = spec.step(g, e);
            g_star = spec.step(g_star, e);
            match met_at {
                None => {
                    if g == g_star {
                        met_at = Some(n);
                    }
                }
                Some(_) => {
                    // shared innovations: agreement must persist
                    assert_eq!(g, g_star, "coupled chains diverged after meeting");
                }
            }
        }
        let t = met_at.unwrap_or(n_max + 1);
        counts[t].fetch_add(1, Ordering::Relaxed);
    });

    let rf = replicas as f64;
    let mut n_axis = Vec::with_capacity(n_max + 1);
    let mut p_axis = Vec::with_capacity(n_max + 1);
    let mut se_axis = Vec::with_capacity(n_max + 1);
    let mut at_least = replicas as u64;
    for n in 0..=n_max {
        let p = at_least as f64 / rf;
        n_axis.push(n as u64);
        p_axis.push(p);
        se_axis.push((p * (1.0 - p) / rf).sqrt());
        at_least -= counts[n].load(Ordering::Relaxed);
    }
    Ok(TailCurve::new(n_axis, p_axis, se_axis))
}

/// Renewal bookkeeping along one trajectory: visits to the regeneration
/// atom `S_c`, gaps between them, and the ground-floor visit counts `s_l`.
#[derive(Debug, Clone, Serialize)]
pub struct RenewalStats {
    /// Times `n > 0` with `g_n` in `S_c`.
    pub r: Vec<u64>,
    /// Gaps `tau_i = R_i - R_{i-1}`.
    pub tau_renewal: Vec<u64>,
    /// `s_l = #{0 <= k <= l : g_k in S_0}` for every l in the trajectory.
    pub s: Vec<u64>,
    /// `1 / (4 mean(tau))`, NaN when no gaps were observed.
    pub kappa_renewal: f64,
    /// Which branch of the `s_l` case split applied (`g_0` on the ground
    /// floor or not).
    pub started_in_s0: bool,
}

impl RenewalStats {
    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn mean_tau(&self) -> f64 {
        if self.tau_renewal.is_empty() {
            f64::NAN
        } else {
            self.tau_renewal.iter().sum::<u64>() as f64 / self.tau_renewal.len() as f64
        }
    }

    /// CSV with the fixed header `i,R_i,tau_i` (`tau_0` is empty).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,R_i,tau_i")?;
        for (i, &r) in self.r.iter().enumerate() {
            if i == 0 {
                writeln!(w, "{},{},", i, r)?;
            } else {
                writeln!(w, "{},{},{}", i, r, self.tau_renewal[i - 1])?;
            }
        }
        Ok(())
    }

    /// Summary record for JSON reports.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kappa_renewal": self.kappa_renewal,
            "mean_tau": self.mean_tau(),
            "count": self.r.len(),
            "started_in_s0": self.started_in_s0,
        })
    }
}

/// Extract renewal statistics from a trajectory. The `s_l` identity with
/// the `S_c` prefix count (offset by whether `g_0` started on the ground
/// floor) is asserted along the way in debug builds.
pub fn renewal_stats(traj: &Trajectory<'_>) -> Result<RenewalStats, TowerError> {
    if traj.is_empty() {
        return Err(TowerError::Domain("empty trajectory".into()));
    }
    let spec = traj.spec;
    let mut r = Vec::new();
    let mut s = Vec::with_capacity(traj.states.len());
    let mut s0_count = 0u64;
    let mut sc_prefix = 0u64; // sum over 0..l-1 of 1{g_i in S_c}
    let started_in_s0 = spec.is_s0(traj.states[0]);
    for (n, &g) in traj.states.iter().enumerate() {
        if spec.is_s0(g) {
            s0_count += 1;
        }
        s.push(s0_count);
        if n > 0 && spec.is_sc(g) {
            r.push(n as u64);
        }
        debug_assert_eq!(s0_count, sc_prefix + u64::from(started_in_s0));
        if spec.is_sc(g) {
            sc_prefix += 1;
        }
    }
    let tau_renewal: Vec<u64> = r.windows(2).map(|w| w[1] - w[0]).collect();
    let kappa_renewal = if tau_renewal.is_empty() {
        f64::NAN
    } else {
        let mean = tau_renewal.iter().sum::<u64>() as f64 / tau_renewal.len() as f64;
        1.0 / (4.0 * mean)
    };
    Ok(RenewalStats {
        r,
        tau_renewal,
        s,
        kappa_renewal,
        started_in_s0,
    })
}

/// Monte Carlo curve of `E[theta^{s_l}]` for `l = 0..=ell_max`.
pub fn delta_decay(
    spec: &TowerSpec,
    theta: f64,
    ell_max: usize,
    replicas: usize,
    seed: SeedSpec,
) -> Result<TailCurve, TowerError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(TowerError::Domain(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    if replicas < 1 {
        return Err(TowerError::Domain("replicas must be >= 1".into()));
    }
    let (sum, sumsq) = (0..replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seed.substream(rep).rng();
            let mut sum = vec![0.0f64; ell_max + 1];
            let mut sumsq = vec![0.0f64; ell_max + 1];
            let mut g = spec.sample_nu(&mut rng);
            let mut weight = if spec.is_s0(g) { theta } else { 1.0 };
            sum[0] += weight;
            sumsq[0] += weight * weight;
            for l in 1..=ell_max {
                let e = spec.sample_letter(rng.random());
                g = spec.step(g, e);
                if spec.is_s0(g) {
                    weight *= theta;
                }
                sum[l] += weight;
                sumsq[l] += weight * weight;
            }
            (sum, sumsq)
        })
        .reduce(
            || (vec![0.0f64; ell_max + 1], vec![0.0f64; ell_max + 1]),
            |(mut a, mut b), (x, y)| {
                for i in 0..=ell_max {
                    a[i] += x[i];
                    b[i] += y[i];
                }
                (a, b)
            },
        );

    let rf = replicas as f64;
    let mut n_axis = Vec::with_capacity(ell_max + 1);
    let mut p_axis = Vec::with_capacity(ell_max + 1);
    let mut se_axis = Vec::with_capacity(ell_max + 1);
    for l in 0..=ell_max {
        let mean = sum[l] / rf;
        let var = (sumsq[l] / rf - mean * mean).max(0.0);
        n_axis.push(l as u64);
        p_axis.push(mean);
        se_axis.push((var / rf).sqrt());
    }
    Ok(TailCurve::new(n_axis, p_axis, se_axis))
}

/// Separation distance `lambda^{-#{1 <= k <= n : g_k in S_0}}`, where `n`
/// is the last index before the trajectories differ. Returns 0 when the
/// trajectories agree over the whole provided window (the documented
/// infinite-agreement convention); differing initial states give distance 1.
pub fn separation_distance(
    a: &Trajectory<'_>,
    b: &Trajectory<'_>,
    lambda: f64,
) -> Result<f64, TowerError> {
    if a.is_empty() || b.is_empty() {
        return Err(TowerError::Domain("empty trajectory".into()));
    }
    if !(lambda > 1.0) {
        return Err(TowerError::Domain(format!(
            "lambda must exceed 1, got {lambda}"
        )));
    }
    let len = a.states.len().min(b.states.len());
    let mut diverge = None;
    for k in 0..len {
        if a.states[k] != b.states[k] {
            diverge = Some(k);
            break;
        }
    }
    let Some(j) = diverge else {
        return Ok(0.0);
    };
    if j == 0 {
        return Ok(1.0);
    }
    let spec = a.spec;
    let count = a.states[1..j].iter().filter(|&&g| spec.is_s0(g)).count();
    Ok(lambda.powi(-(count as i32)))
}

#[cfg(test)]
pub(crate) fn toy_tower() -> TowerSpec {
    make_tower(TowerSource::Custom {
        heights: vec![1, 2],
        pa: vec![0.5, 0.5],
    })
    .unwrap()
}
