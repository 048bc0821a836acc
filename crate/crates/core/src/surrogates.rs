//! Data-driven input-to-output maps estimated from forward simulations.
//!
//! The peak-hospitalization map of region `i` is approximated by a convex
//! quadratic in `u_i` with the other coordinates frozen at their current
//! values. Sublevel sets of such a quadratic are intervals, which makes the
//! feasible set a box and its Euclidean projection a clamp.

use std::io::Write;

use rayon::prelude::*;

use crate::epimodel::{flatten, per100k_to_fraction, NetworkModel, Simulator};
use crate::error::{Error, Result};
use crate::params::{EpiState, H, I, STATE_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    PeakHospitalization,
    EndemicInfection,
}

/// Tuning of the map estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    /// Half-width of the sampling neighborhood around the current control.
    pub radius: f64,
    pub n_samples: usize,
    /// Prediction horizon for the hospitalization peak, days.
    pub horizon: f64,
    /// Integrator step of the prediction runs, days.
    pub dt: f64,
    /// Longest endemic run, days.
    pub t_end: f64,
    /// An endemic run has settled once no compartment moves faster than this per day.
    pub settle_tol: f64,
    /// Integrator step of the endemic runs, days.
    pub endemic_dt: f64,
    /// Finite-difference step of the endemic Jacobian.
    pub fd_step: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            radius: 0.2,
            n_samples: 9,
            horizon: 180.0,
            dt: 0.25,
            t_end: 3000.0,
            settle_tol: 1e-9,
            endemic_dt: 1.0,
            fd_step: 0.05,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 3 {
            return Err(Error::domain(format!("need at least 3 samples, got {}", self.n_samples)));
        }
        let positive = [
            ("radius", self.radius),
            ("horizon", self.horizon),
            ("dt", self.dt),
            ("t_end", self.t_end),
            ("settle_tol", self.settle_tol),
            ("endemic_dt", self.endemic_dt),
            ("fd_step", self.fd_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Convex quadratic `q(t) = c0 + c1 t + c2 t^2` fitted along one control coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub coeffs: [f64; 3],
    pub center: Vec<f64>,
    pub coord: usize,
    pub kind: SurrogateKind,
    /// `(u_i, simulated value)` pairs the fit was built from.
    pub samples: Vec<(f64, f64)>,
}

impl Surrogate {
    pub fn eval(&self, t: f64) -> f64 {
        let [c0, c1, c2] = self.coeffs;
        c0 + t * (c1 + t * c2)
    }

    pub fn slope(&self, t: f64) -> f64 {
        self.coeffs[1] + 2.0 * self.coeffs[2] * t
    }

    /// Minimizer of `q` over `[0, 1]`; the lower end when `q` is flat.
    pub fn argmin_unit(&self) -> f64 {
        let [_, c1, c2] = self.coeffs;
        if c2 > 0.0 {
            (-c1 / (2.0 * c2)).clamp(0.0, 1.0)
        } else if c1 < 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Largest residual relative to the simulated value over the samples.
    pub fn max_rel_residual(&self) -> f64 {
        self.samples
            .iter()
            .map(|&(t, y)| {
                let scale = y.abs().max(f64::MIN_POSITIVE);
                (self.eval(t) - y).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Least-squares quadratic through `samples`, with the curvature clipped to
/// zero (and the line refitted) when the unconstrained fit is concave.
pub fn fit_convex_quadratic(samples: &[(f64, f64)]) -> Result<[f64; 3]> {
    if samples.len() < 3 {
        return Err(Error::Estimation(format!("need at least 3 samples, got {}", samples.len())));
    }
    let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let half = 0.5 * (hi - lo);
    if !(half > 0.0) {
        return Err(Error::Estimation("sample grid has zero width".into()));
    }
    let mid = 0.5 * (hi + lo);
    // Fit in z = (t - mid) / half for conditioning, then map back.
    let zs: Vec<(f64, f64, f64)> = samples.iter().map(|&(t, y)| ((t - mid) / half, y, 1.0)).collect();
    let [a0, a1, a2] = match lstsq_poly::<3>(&zs) {
        Some(a) if a[2] >= 0.0 => a,
        _ => {
            let [b0, b1] = lstsq_poly::<2>(&zs).ok_or_else(|| Error::Estimation("singular linear fit".into()))?;
            [b0, b1, 0.0]
        }
    };
    // q(t) = a0 + a1 z + a2 z^2 with z = (t - mid) / half.
    let c2 = a2 / (half * half);
    let c1 = a1 / half - 2.0 * a2 * mid / (half * half);
    let c0 = a0 - a1 * mid / half + a2 * mid * mid / (half * half);
    Ok([c0, c1, c2])
}

/// Polynomial least squares of degree `K - 1` via the normal equations.
fn lstsq_poly<const K: usize>(pts: &[(f64, f64, f64)]) -> Option<[f64; K]> {
    let mut a = [[0.0; K]; K];
    let mut b = [0.0; K];
    for &(z, y, wt) in pts {
        let mut pows = [1.0; K];
        for k in 1..K {
            pows[k] = pows[k - 1] * z;
        }
        for r in 0..K {
            b[r] += wt * pows[r] * y;
            for c in 0..K {
                a[r][c] += wt * pows[r] * pows[c];
            }
        }
    }
    solve_dense(a, b)
}

/// Gaussian elimination with partial pivoting.
pub(crate) fn solve_dense<const K: usize>(mut a: [[f64; K]; K], mut b: [f64; K]) -> Option<[f64; K]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..K {
        let piv = (col..K).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..K {
            let f = a[row][col] / a[col][col];
            for c in col..K {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; K];
    for row in (0..K).rev() {
        let mut acc = b[row];
        for c in row + 1..K {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Equally spaced values of coordinate `i` within `radius` of the center,
/// intersected with `[0, 1]`.
pub fn sample_grid(center: f64, radius: f64, n: usize) -> Result<Vec<f64>> {
    let lo = (center - radius).max(0.0);
    let hi = (center + radius).min(1.0);
    if !(hi > lo) || n < 2 {
        return Err(Error::Estimation(format!("degenerate sample grid [{lo}, {hi}] with {n} points")));
    }
    Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
}

/// Highest hospitalized fraction of region `i` over `[0, horizon]` starting
/// from `x` under constant control `u`.
pub fn simulate_peak(net: &NetworkModel, x: &[f64], u: &[f64], i: usize, horizon: f64, dt: f64) -> Result<f64> {
    let mut sim = Simulator::new(net, dt)?;
    let mut state = x.to_vec();
    let mut peak = state[i * STATE_LEN + H];
    sim.advance(&mut state, u, 0.0, horizon, |_, xs| {
        peak = peak.max(xs[i * STATE_LEN + H]);
    })?;
    Ok(peak)
}

fn check_controls(net: &NetworkModel, u: &[f64]) -> Result<()> {
    if u.len() != net.n() {
        return Err(Error::dim(format!("{} controls for {} regions", u.len(), net.n())));
    }
    if let Some(v) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("control {v} outside [0,1]")));
    }
    Ok(())
}

/// Fits the peak-hospitalization map of region `i` around `u_center`,
/// varying only `u_i`.
pub fn estimate_peak_hosp(
    net: &NetworkModel,
    x: &[EpiState],
    u_center: &[f64],
    i: usize,
    cfg: &SurrogateConfig,
) -> Result<Surrogate> {
    cfg.validate()?;
    check_controls(net, u_center)?;
    if x.len() != net.n() || i >= net.n() {
        return Err(Error::dim(format!("{} states, region {i}, {} regions", x.len(), net.n())));
    }
    for xi in x {
        xi.validate()?;
    }
    let flat = flatten(x);
    estimate_peak_hosp_flat(net, &flat, u_center, i, cfg)
}

pub(crate) fn estimate_peak_hosp_flat(
    net: &NetworkModel,
    x: &[f64],
    u_center: &[f64],
    i: usize,
    cfg: &SurrogateConfig,
) -> Result<Surrogate> {
    let grid = sample_grid(u_center[i], cfg.radius, cfg.n_samples)?;
    let peaks: Vec<f64> = grid
        .par_iter()
        .map(|&t| {
            let mut u = u_center.to_vec();
            u[i] = t;
            simulate_peak(net, x, &u, i, cfg.horizon, cfg.dt)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<(f64, f64)> = grid.into_iter().zip(peaks).collect();
    let coeffs = fit_convex_quadratic(&samples)?;
    Ok(Surrogate {
        coeffs,
        center: u_center.to_vec(),
        coord: i,
        kind: SurrogateKind::PeakHospitalization,
        samples,
    })
}

/// Long-run infectious fractions under constant control.
#[derive(Debug, Clone, PartialEq)]
pub struct EndemicEstimate {
    pub iota: Vec<f64>,
    /// Whether every compartment's rate of change fell below the tolerance.
    pub settled: bool,
    /// Day the run stopped.
    pub t: f64,
}

/// Integrates from `x0` under constant `u` until the compartments (all but
/// the cumulative deaths and dose counters) stop moving, or `t_end`.
pub fn estimate_endemic_infections(
    net: &NetworkModel,
    x0: &[EpiState],
    u: &[f64],
    cfg: &SurrogateConfig,
) -> Result<EndemicEstimate> {
    cfg.validate()?;
    check_controls(net, u)?;
    if x0.len() != net.n() {
        return Err(Error::dim(format!("{} states for {} regions", x0.len(), net.n())));
    }
    endemic_flat(net, &flatten(x0), u, cfg)
}

pub(crate) fn endemic_flat(net: &NetworkModel, x0: &[f64], u: &[f64], cfg: &SurrogateConfig) -> Result<EndemicEstimate> {
    let mut sim = Simulator::new(net, cfg.endemic_dt)?;
    let mut x = x0.to_vec();
    let mut prev = x.clone();
    let mut t = 0.0;
    let mut settled = false;
    while t < cfg.t_end {
        let span = 1.0f64.min(cfg.t_end - t);
        t = sim.advance(&mut x, u, t, span, |_, _| {})?;
        let moving = x
            .chunks_exact(STATE_LEN)
            .zip(prev.chunks_exact(STATE_LEN))
            .flat_map(|(a, b)| (0..6).map(move |k| (a[k] - b[k]).abs() / span))
            .fold(0.0, f64::max);
        prev.copy_from_slice(&x);
        if moving < cfg.settle_tol {
            settled = true;
            break;
        }
    }
    let iota = x.chunks_exact(STATE_LEN).map(|r| r[I]).collect();
    Ok(EndemicEstimate { iota, settled, t })
}

/// Finite-difference sensitivities of the endemic map.
#[derive(Debug, Clone, PartialEq)]
pub struct EndemicJacobian {
    /// `j[i][k] = dF_i / du_k`.
    pub j: Vec<Vec<f64>>,
    pub settled: bool,
}

impl EndemicJacobian {
    pub fn n(&self) -> usize {
        self.j.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.j[i][i]).collect()
    }
}

/// Perturbed pair `(lo, hi)` for coordinate value `v`: central where room
/// allows, one-sided at the boundary of `[0, 1]`.
fn fd_pair(v: f64, step: f64) -> (f64, f64) {
    let mut lo = v - step;
    let mut hi = v + step;
    if lo < 0.0 {
        lo = 0.0;
        hi = (v + step).min(1.0).max(step.min(1.0));
    }
    if hi > 1.0 {
        hi = 1.0;
        lo = (v - step).max(0.0).min(1.0 - step.min(1.0));
    }
    (lo, hi)
}

/// Column `k` of the endemic Jacobian.
pub(crate) fn endemic_column(
    net: &NetworkModel,
    x0: &[f64],
    u: &[f64],
    k: usize,
    cfg: &SurrogateConfig,
) -> Result<(Vec<f64>, bool)> {
    let (lo, hi) = fd_pair(u[k], cfg.fd_step);
    let runs: Vec<EndemicEstimate> = [lo, hi]
        .par_iter()
        .map(|&v| {
            let mut up = u.to_vec();
            up[k] = v;
            endemic_flat(net, x0, &up, cfg)
        })
        .collect::<Result<_>>()?;
    let col = runs[1].iota.iter().zip(&runs[0].iota).map(|(a, b)| (a - b) / (hi - lo)).collect();
    Ok((col, runs[0].settled && runs[1].settled))
}

/// Full `N x N` Jacobian of the endemic map at `u`.
pub fn endemic_jacobian(net: &NetworkModel, x0: &[EpiState], u: &[f64], cfg: &SurrogateConfig) -> Result<EndemicJacobian> {
    cfg.validate()?;
    check_controls(net, u)?;
    let flat = flatten(x0);
    let n = net.n();
    let mut j = vec![vec![0.0; n]; n];
    let mut settled = true;
    for k in 0..n {
        let (col, ok) = endemic_column(net, &flat, u, k, cfg)?;
        settled &= ok;
        for i in 0..n {
            j[i][k] = col[i];
        }
    }
    Ok(EndemicJacobian { j, settled })
}

/// `{t in [0,1] : q(t) <= limit}` or, when empty, the minimizer of `q`
/// flagged infeasible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub feasible: bool,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0, feasible: true };

    pub fn point(t: f64) -> Self {
        Interval { lo: t, hi: t, feasible: false }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Box product of per-coordinate intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet {
    pub intervals: Vec<Interval>,
}

impl FeasibleSet {
    pub fn unit(n: usize) -> Self {
        FeasibleSet { intervals: vec![Interval::UNIT; n] }
    }

    pub fn n(&self) -> usize {
        self.intervals.len()
    }

    pub fn all_feasible(&self) -> bool {
        self.intervals.iter().all(|iv| iv.feasible)
    }
}

/// Solves `q(t) <= limit` over `[0, 1]` in closed form.
pub fn feasible_interval(coeffs: [f64; 3], limit: f64) -> Option<(f64, f64)> {
    if limit == f64::INFINITY {
        return Some((0.0, 1.0));
    }
    let [c0, c1, c2] = coeffs;
    let k = c0 - limit;
    let (lo, hi) = if c2 > 0.0 {
        let disc = c1 * c1 - 4.0 * c2 * k;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Stable roots of c2 t^2 + c1 t + k.
        let q = -0.5 * (c1 + c1.signum() * sq);
        let (r1, r2) = if q == 0.0 {
            (0.0, 0.0)
        } else {
            let a = q / c2;
            let b = k / q;
            (a.min(b), a.max(b))
        };
        (r1, r2)
    } else if c1 > 0.0 {
        (f64::NEG_INFINITY, -k / c1)
    } else if c1 < 0.0 {
        (-k / c1, f64::INFINITY)
    } else if k <= 0.0 {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        return None;
    };
    let lo = lo.max(0.0);
    let hi = hi.min(1.0);
    (lo <= hi).then_some((lo, hi))
}

/// Feasible box for per-region peak surrogates and limits (fractions).
pub fn feasible_set(surrogates: &[Surrogate], h_lims: &[f64]) -> Result<FeasibleSet> {
    if surrogates.len() != h_lims.len() {
        return Err(Error::dim(format!("{} surrogates, {} limits", surrogates.len(), h_lims.len())));
    }
    let intervals = surrogates
        .iter()
        .zip(h_lims)
        .map(|(s, &lim)| match feasible_interval(s.coeffs, lim) {
            Some((lo, hi)) => Interval { lo, hi, feasible: true },
            None => Interval::point(s.argmin_unit()),
        })
        .collect();
    Ok(FeasibleSet { intervals })
}

/// Writes `region,u_sample,peak_h,fitted_q` rows for the given surrogates.
pub fn write_diagnostics<W: Write>(w: W, net: &NetworkModel, surrogates: &[Surrogate]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["region", "u_sample", "peak_h", "fitted_q"])?;
    for s in surrogates {
        let name = &net.regions[s.coord].name;
        for &(t, y) in &s.samples {
            out.write_record([name.clone(), t.to_string(), y.to_string(), s.eval(t).to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Hospitalization limit in persons per 100,000 as a fraction.
pub fn limit_fraction(per100k: f64) -> f64 {
    per100k_to_fraction(per100k)
}
