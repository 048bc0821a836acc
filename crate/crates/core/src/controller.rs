//! Projected gradient-flow controller for the intervention levels.
//!
//! The flow `u' = P(u - eta (grad phi(u) + J^T grad psi(iota))) - u` is
//! integrated with explicit Euler. The feasible set is a box, so `P` is a
//! per-coordinate clamp.

use std::io::Write;

use crate::epimodel::{flatten, fraction_to_per100k, unflatten, NetworkModel, Simulator, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::params::{EpiState, H, STATE_LEN};
use crate::surrogates::{
    endemic_column, endemic_flat, estimate_peak_hosp_flat, feasible_set, EndemicJacobian, FeasibleSet, Interval,
    Surrogate, SurrogateConfig,
};

/// Weights of the intervention cost `w_i (1 - u_i)^2` and infection cost `q_i iota_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub w: Vec<f64>,
    pub q: Vec<f64>,
}

impl CostConfig {
    pub fn uniform(n: usize, w: f64, q: f64) -> Self {
        CostConfig { w: vec![w; n], q: vec![q; n] }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.q.len() {
            return Err(Error::dim(format!("{} NPI weights, {} infection weights", self.w.len(), self.q.len())));
        }
        if let Some(v) = self.w.iter().chain(&self.q).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(format!("cost weight {v} must be finite and nonnegative")));
        }
        Ok(())
    }

    pub fn phi(&self, i: usize, u: f64) -> f64 {
        self.w[i] * (1.0 - u).powi(2)
    }

    pub fn dphi(&self, i: usize, u: f64) -> f64 {
        -2.0 * self.w[i] * (1.0 - u)
    }

    pub fn psi(&self, i: usize, iota: f64) -> f64 {
        self.q[i] * iota
    }

    pub fn dpsi(&self, i: usize, _iota: f64) -> f64 {
        self.q[i]
    }
}

/// Current controls plus the controller's tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub u: Vec<f64>,
    /// Step parameter of the gradient flow.
    pub gain: f64,
    /// Days between controller updates.
    pub cadence: f64,
    /// Days between surrogate refits.
    pub refresh: f64,
}

impl ControlState {
    pub fn new(u: Vec<f64>) -> Self {
        ControlState { u, gain: 0.5, cadence: 1.0, refresh: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("control {v} outside [0,1]")));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::domain(format!("gain must be positive, got {}", self.gain)));
        }
        for (name, v) in [("cadence", self.cadence), ("refresh", self.refresh)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::domain(format!("{name} must be at least one day, got {v}")));
            }
        }
        Ok(())
    }
}

/// Euclidean projection onto a box: per-coordinate clamp.
pub fn project(z: &[f64], set: &FeasibleSet) -> Result<Vec<f64>> {
    if z.len() != set.n() {
        return Err(Error::dim(format!("point of dimension {}, set of dimension {}", z.len(), set.n())));
    }
    Ok(z.iter().zip(&set.intervals).map(|(&v, iv)| iv.clamp(v)).collect())
}

fn euler(u: f64, target: f64, dt_c: f64) -> f64 {
    (u + dt_c * (target - u)).clamp(0.0, 1.0)
}

/// One explicit Euler step of the centralized flow.
pub fn centralized_step(
    cs: &ControlState,
    jac: &[Vec<f64>],
    iota: &[f64],
    set: &FeasibleSet,
    costs: &CostConfig,
    dt_c: f64,
) -> Result<ControlState> {
    let n = cs.u.len();
    if jac.len() != n || jac.iter().any(|r| r.len() != n) || iota.len() != n || set.n() != n || costs.n() != n {
        return Err(Error::dim(format!("controller inputs disagree with {n} controls")));
    }
    if !(dt_c > 0.0) {
        return Err(Error::domain(format!("controller step must be positive, got {dt_c}")));
    }
    let dpsi: Vec<f64> = (0..n).map(|i| costs.dpsi(i, iota[i])).collect();
    let z: Vec<f64> = (0..n)
        .map(|k| {
            let jt_dpsi: f64 = (0..n).map(|i| jac[i][k] * dpsi[i]).sum();
            cs.u[k] - cs.gain * (costs.dphi(k, cs.u[k]) + jt_dpsi)
        })
        .collect();
    let target = project(&z, set)?;
    let u = cs.u.iter().zip(&target).map(|(&u, &p)| euler(u, p, dt_c)).collect();
    Ok(ControlState { u, ..cs.clone() })
}

/// One explicit Euler step of region `i`'s distributed flow, using only its
/// own sensitivity `dF_i/du_i`.
pub fn local_step(
    i: usize,
    cs: &ControlState,
    dfi_dui: f64,
    iota_i: f64,
    set_i: Interval,
    costs: &CostConfig,
    dt_c: f64,
) -> Result<f64> {
    if i >= cs.u.len() || i >= costs.n() {
        return Err(Error::dim(format!("region {i} out of range")));
    }
    if !dfi_dui.is_finite() || !iota_i.is_finite() {
        return Err(Error::domain("non-finite sensitivity or infection level"));
    }
    if !(dt_c > 0.0) {
        return Err(Error::domain(format!("controller step must be positive, got {dt_c}")));
    }
    let u = cs.u[i];
    let z = u - cs.gain * (costs.dphi(i, u) + dfi_dui * costs.dpsi(i, iota_i));
    Ok(euler(u, set_i.clamp(z), dt_c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    Centralized,
    Local,
}

/// Override applied to a subset of regions from a given day onward.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedControl {
    pub regions: Vec<usize>,
    pub from_day: f64,
    pub u: f64,
}

/// Everything a closed-loop run needs besides the network and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub mode: ControllerMode,
    pub horizon: f64,
    pub u0: Vec<f64>,
    pub gain: f64,
    pub cadence: f64,
    pub refresh: f64,
    /// Days between Jacobian re-estimates.
    pub jacobian_refresh: f64,
    pub costs: CostConfig,
    pub surrogate: SurrogateConfig,
    /// Plant integrator step.
    pub dt: f64,
    pub fixed: Option<FixedControl>,
    pub keep_surrogates: bool,
}

impl ClosedLoopConfig {
    pub fn new(n: usize, u0: f64, horizon: f64) -> Self {
        ClosedLoopConfig {
            mode: ControllerMode::Centralized,
            horizon,
            u0: vec![u0; n],
            gain: 0.5,
            cadence: 1.0,
            refresh: 1.0,
            jacobian_refresh: 1.0,
            costs: CostConfig::uniform(n, 1.0, 1.0),
            surrogate: SurrogateConfig::default(),
            dt: DEFAULT_DT,
            fixed: None,
            keep_surrogates: false,
        }
    }

    fn validate(&self, net: &NetworkModel) -> Result<()> {
        let n = net.n();
        if self.u0.len() != n || self.costs.n() != n {
            return Err(Error::dim(format!("controller configured for {} regions, network has {n}", self.u0.len())));
        }
        self.costs.validate()?;
        self.surrogate.validate()?;
        ControlState { u: self.u0.clone(), gain: self.gain, cadence: self.cadence, refresh: self.refresh }.validate()?;
        if !(self.horizon.is_finite() && self.horizon >= 1.0) {
            return Err(Error::domain(format!("horizon must be at least one day, got {}", self.horizon)));
        }
        if !(self.jacobian_refresh.is_finite() && self.jacobian_refresh >= 1.0) {
            return Err(Error::domain("jacobian refresh must be at least one day"));
        }
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::domain(format!("dt must be in (0, 1], got {}", self.dt)));
        }
        if let Some(f) = &self.fixed {
            if f.regions.iter().any(|&r| r >= n) {
                return Err(Error::dim("fixed-control region out of range"));
            }
            if !(0.0..=1.0).contains(&f.u) {
                return Err(Error::domain(format!("fixed control {} outside [0,1]", f.u)));
            }
        }
        Ok(())
    }
}

/// Per-day record of a closed-loop run. Row `k` holds the state at day `k`
/// and the controls applied during `[k, k+1)`; the last row has no controls
/// of its own and repeats the previous ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub n_regions: usize,
    pub days: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
    feasible: Vec<bool>,
    /// Largest relative fit residual of each region's peak surrogate, per day.
    pub fit_residual: Vec<f64>,
    /// Whether every endemic run behind each Jacobian settled, per day.
    pub endemic_settled: Vec<bool>,
    pub h_lim: Vec<f64>,
    pub surrogates: Vec<(f64, Vec<Surrogate>)>,
    /// Controller state at the end of the run, for continuation.
    pub final_u: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn state(&self, k: usize, region: usize) -> EpiState {
        let off = (k * self.n_regions + region) * STATE_LEN;
        EpiState::from_slice(&self.states[off..off + STATE_LEN])
    }

    pub fn states_at(&self, k: usize) -> Vec<EpiState> {
        let off = k * self.n_regions * STATE_LEN;
        unflatten(&self.states[off..off + self.n_regions * STATE_LEN])
    }

    pub fn u(&self, k: usize, region: usize) -> f64 {
        self.controls[k * self.n_regions + region]
    }

    pub fn feasible(&self, k: usize, region: usize) -> bool {
        self.feasible[k * self.n_regions + region]
    }

    pub fn h(&self, k: usize, region: usize) -> f64 {
        self.states[(k * self.n_regions + region) * STATE_LEN + H]
    }

    /// Series of `u` for one region.
    pub fn u_series(&self, region: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.u(k, region)).collect()
    }

    /// Largest hospitalized fraction of one region over the run.
    pub fn peak_h(&self, region: usize) -> f64 {
        (0..self.len()).map(|k| self.h(k, region)).fold(0.0, f64::max)
    }

    /// Writes `day,region,s,e,i,h,r,v,d,u,h_lim,feasible`; `h_lim` in persons per 100K.
    pub fn write_csv<W: Write>(&self, w: W, names: &[String]) -> Result<()> {
        if names.len() != self.n_regions {
            return Err(Error::dim("one name per region required"));
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["day", "region", "s", "e", "i", "h", "r", "v", "d", "u", "h_lim", "feasible"])?;
        for k in 0..self.len() {
            for (j, name) in names.iter().enumerate() {
                let x = self.state(k, j);
                let mut rec = vec![format!("{}", self.days[k]), name.clone()];
                rec.extend([x.s, x.e, x.i, x.h, x.r, x.v, x.d, self.u(k, j), self.h_lim[j]].map(|v| v.to_string()));
                rec.push(self.feasible(k, j).to_string());
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs plant and controller together for `cfg.horizon` days from `x0`.
///
/// Each cadence tick refits the peak surrogates of every controlled region
/// at the current state and controls, refreshes the endemic sensitivities
/// when due, and applies one Euler step of the flow. The endemic map is
/// always evaluated from `endemic_x0`, the configured initial state.
pub fn closed_loop(
    net: &NetworkModel,
    x0: &[EpiState],
    endemic_x0: &[EpiState],
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopTrace> {
    cfg.validate(net)?;
    let n = net.n();
    if x0.len() != n || endemic_x0.len() != n {
        return Err(Error::dim(format!("{} initial states for {n} regions", x0.len())));
    }
    for x in x0.iter().chain(endemic_x0) {
        x.validate()?;
    }
    let lims = net.h_lim_fractions();
    let endemic_start = flatten(endemic_x0);
    let mut x = flatten(x0);
    let mut sim = Simulator::new(net, cfg.dt)?;
    let mut cs = ControlState { u: cfg.u0.clone(), gain: cfg.gain, cadence: cfg.cadence, refresh: cfg.refresh };

    let days = cfg.horizon.floor() as usize;
    let mut trace = ClosedLoopTrace {
        n_regions: n,
        days: Vec::with_capacity(days + 1),
        states: Vec::with_capacity((days + 1) * n * STATE_LEN),
        controls: Vec::with_capacity((days + 1) * n),
        feasible: Vec::with_capacity((days + 1) * n),
        fit_residual: Vec::with_capacity((days + 1) * n),
        endemic_settled: Vec::with_capacity(days + 1),
        h_lim: net.h_lim.clone(),
        surrogates: Vec::new(),
        final_u: Vec::new(),
    };

    let mut set = FeasibleSet::unit(n);
    let mut residual = vec![0.0; n];
    let mut jac: Option<EndemicJacobian> = None;
    let mut jac_u: Vec<f64> = Vec::new();
    let mut jac_pinned: Vec<bool> = Vec::new();
    let mut next_refit = 0.0;
    let mut next_jac = 0.0;
    let mut next_update = 0.0;

    for day in 0..=days {
        let t = day as f64;
        let pinned: Vec<bool> = (0..n)
            .map(|i| cfg.fixed.as_ref().is_some_and(|f| t >= f.from_day && f.regions.contains(&i)))
            .collect();
        if day < days && t >= next_update {
            if t >= next_refit {
                let mut sur = Vec::with_capacity(n);
                for i in 0..n {
                    if pinned[i] {
                        continue;
                    }
                    let s = estimate_peak_hosp_flat(net, &x, &cs.u, i, &cfg.surrogate)?;
                    residual[i] = s.max_rel_residual();
                    sur.push(s);
                }
                let controlled: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
                let partial = feasible_set(&sur, &controlled.iter().map(|&i| lims[i]).collect::<Vec<_>>())?;
                set = FeasibleSet::unit(n);
                for (iv, &i) in partial.intervals.into_iter().zip(&controlled) {
                    set.intervals[i] = iv;
                }
                if cfg.keep_surrogates {
                    trace.surrogates.push((t, sur));
                }
                next_refit = t + cfg.refresh;
            }
            if t >= next_jac || jac.is_none() {
                // The endemic map depends on u alone, so an unchanged u reuses it.
                if jac.is_none() || jac_u != cs.u || jac_pinned != pinned {
                    jac = Some(jacobian_for(net, &endemic_start, &cs.u, &pinned, cfg)?);
                    jac_u.clone_from(&cs.u);
                    jac_pinned.clone_from(&pinned);
                }
                next_jac = t + cfg.jacobian_refresh;
            }
            let j = jac.as_ref().expect("jacobian computed above");
            let iota: Vec<f64> = x.chunks_exact(STATE_LEN).map(|r| r[crate::params::I]).collect();
            let dt_c = cfg.cadence;
            let mut next = match cfg.mode {
                ControllerMode::Centralized => centralized_step(&cs, &j.j, &iota, &set, &cfg.costs, dt_c)?.u,
                ControllerMode::Local => (0..n)
                    .map(|i| local_step(i, &cs, j.j[i][i], iota[i], set.intervals[i], &cfg.costs, dt_c))
                    .collect::<Result<_>>()?,
            };
            for i in 0..n {
                if pinned[i] {
                    next[i] = cfg.fixed.as_ref().map_or(next[i], |f| f.u);
                }
            }
            cs.u = next;
            next_update = t + cfg.cadence;
        } else if day < days {
            for i in 0..n {
                if pinned[i] {
                    cs.u[i] = cfg.fixed.as_ref().map_or(cs.u[i], |f| f.u);
                }
            }
        }

        trace.days.push(t);
        trace.states.extend_from_slice(&x);
        trace.controls.extend_from_slice(&cs.u);
        trace.feasible.extend(set.intervals.iter().map(|iv| iv.feasible));
        trace.fit_residual.extend_from_slice(&residual);
        trace.endemic_settled.push(jac.as_ref().is_none_or(|j| j.settled));

        if day < days {
            sim.advance(&mut x, &cs.u, t, 1.0, |_, _| {})?;
        }
    }
    trace.final_u = cs.u;
    Ok(trace)
}

/// Endemic sensitivities needed by the controller: the full Jacobian for
/// the centralized flow, only the diagonal for the local one. Pinned
/// regions contribute no columns.
fn jacobian_for(
    net: &NetworkModel,
    endemic_start: &[f64],
    u: &[f64],
    pinned: &[bool],
    cfg: &ClosedLoopConfig,
) -> Result<EndemicJacobian> {
    let n = net.n();
    let mut j = vec![vec![0.0; n]; n];
    let mut settled = true;
    if cfg.costs.q.iter().all(|&q| q == 0.0) {
        return Ok(EndemicJacobian { j, settled });
    }
    for k in 0..n {
        if pinned[k] {
            continue;
        }
        let (col, ok) = endemic_column(net, endemic_start, u, k, &cfg.surrogate)?;
        settled &= ok;
        match cfg.mode {
            ControllerMode::Centralized => {
                for i in 0..n {
                    j[i][k] = col[i];
                }
            }
            ControllerMode::Local => j[k][k] = col[k],
        }
    }
    Ok(EndemicJacobian { j, settled })
}

/// Endemic infection fractions under constant `u`, from `x0`.
pub fn endemic_levels(net: &NetworkModel, x0: &[EpiState], u: &[f64], cfg: &SurrogateConfig) -> Result<Vec<f64>> {
    Ok(endemic_flat(net, &flatten(x0), u, cfg)?.iota)
}

/// Peak hospitalizations per 100K of each region in a trace.
pub fn peak_per100k(trace: &ClosedLoopTrace) -> Vec<f64> {
    (0..trace.n_regions).map(|r| fraction_to_per100k(trace.peak_h(r))).collect()
}
