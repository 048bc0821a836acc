//! SEIHRVS dynamics for one region and for a mobility-coupled network of
//! regions, plus the fixed-step integrator that drives them.
//!
//! A single region is the network with one node and mobility `[1]`; both
//! paths share the same right-hand side so they agree bit for bit.

use crate::error::{Error, Result};
use crate::ode::{step_count, Rk4};
use crate::params::{EpiState, ModelParams, UptakeMode, C, D, E, H, I, R, S, STATE_LEN, V};

/// Default integrator step, days.
pub const DEFAULT_DT: f64 = 0.1;

/// Vaccination stops once the counter is within this distance of the ceiling.
const GATE_EPS: f64 = 1e-12;

/// Row-stochastic contact-intensity matrix: `a[i][j]` is the share of
/// contact-relevant activity in region `i` attributable to residents of `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityMatrix {
    n: usize,
    a: Vec<f64>,
}

impl MobilityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::dim("mobility matrix is empty"));
        }
        let mut a = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim(format!("mobility row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain(format!("mobility row {i} has an entry outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("mobility row {i} sums to {sum}")));
            }
            a.extend_from_slice(row);
        }
        Ok(MobilityMatrix { n, a })
    }

    pub fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        MobilityMatrix { n, a }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub params: ModelParams,
}

impl Region {
    pub fn population(&self) -> f64 {
        self.params.n_pop
    }
}

/// Regions coupled through a mobility matrix.
///
/// Vaccines are delivered at the statewide `vax_rate` (persons/day) and split
/// across regions in proportion to population, so every region receives the
/// same per-capita rate. Hospitalization limits are per 100,000 inhabitants.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub regions: Vec<Region>,
    pub mobility: MobilityMatrix,
    pub h_lim: Vec<f64>,
    pub vax_rate: f64,
}

impl NetworkModel {
    pub fn new(regions: Vec<Region>, mobility: MobilityMatrix, h_lim: Vec<f64>, vax_rate: f64) -> Result<Self> {
        if regions.len() != mobility.n() {
            return Err(Error::dim(format!(
                "{} regions but mobility matrix is {}x{}",
                regions.len(),
                mobility.n(),
                mobility.n()
            )));
        }
        if h_lim.len() != regions.len() {
            return Err(Error::dim(format!("{} regions but {} limits", regions.len(), h_lim.len())));
        }
        for r in &regions {
            r.params.validate()?;
        }
        if h_lim.iter().any(|&l| l.is_nan() || l <= 0.0) {
            return Err(Error::domain("hospitalization limits must be positive"));
        }
        if !(vax_rate.is_finite() && vax_rate >= 0.0) {
            return Err(Error::domain(format!("vaccination rate must be >= 0, got {vax_rate}")));
        }
        Ok(NetworkModel { regions, mobility, h_lim, vax_rate })
    }

    /// One region with mobility `[1]`, vaccinating at `params.y_rate`.
    pub fn single(params: ModelParams, h_lim: f64) -> Result<Self> {
        let region = Region { name: "state".into(), params };
        NetworkModel::new(vec![region], MobilityMatrix::identity(1), vec![h_lim], params.y_rate)
    }

    pub fn n(&self) -> usize {
        self.regions.len()
    }

    pub fn total_population(&self) -> f64 {
        self.regions.iter().map(Region::population).sum()
    }

    /// Per-capita daily vaccinations, identical for every region.
    pub fn vax_fraction(&self) -> f64 {
        self.vax_rate / self.total_population()
    }

    /// Limits converted to population fractions.
    pub fn h_lim_fractions(&self) -> Vec<f64> {
        self.h_lim.iter().map(|l| per100k_to_fraction(*l)).collect()
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    /// Evaluates the network right-hand side on a flat state.
    ///
    /// `gates[i]` says whether region `i` is still vaccinating.
    pub(crate) fn rhs_flat(&self, x: &[f64], u: &[f64], gates: &[bool], out: &mut [f64]) {
        let n = self.n();
        let yf = self.vax_fraction();
        for i in 0..n {
            let xi = &x[i * STATE_LEN..(i + 1) * STATE_LEN];
            let pressure = if n == 1 {
                self.mobility.a[0] * x[I]
            } else {
                let row = self.mobility.row(i);
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * x[j * STATE_LEN + I];
                }
                acc
            };
            let y = vaccination_rate(xi, &self.regions[i].params, gates[i], yf);
            region_rhs(xi, &self.regions[i].params, pressure, u[i], y, &mut out[i * STATE_LEN..(i + 1) * STATE_LEN]);
        }
    }

    fn check_dims(&self, xs: &[EpiState], u: &[f64]) -> Result<()> {
        if xs.len() != self.n() || u.len() != self.n() {
            return Err(Error::dim(format!(
                "network has {} regions, got {} states and {} controls",
                self.n(),
                xs.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

pub fn per100k_to_fraction(v: f64) -> f64 {
    v / 100_000.0
}

pub fn fraction_to_per100k(v: f64) -> f64 {
    v * 100_000.0
}

/// Index of the state entry the uptake ceiling applies to.
#[inline]
fn ceiling_index(p: &ModelParams) -> usize {
    match p.uptake_mode {
        UptakeMode::Cumulative => C,
        UptakeMode::Maintained => V,
    }
}

/// Whether a region is below its uptake ceiling and vaccinates at full rate.
#[inline]
pub(crate) fn vaccinating(x: &[f64], p: &ModelParams) -> bool {
    x[ceiling_index(p)] < p.uptake_max - GATE_EPS
}

/// Doses per day (before availability caps) that, after those caps,
/// replace exactly what wanes and dies out of `v`, at most `yf`.
fn maintenance_rate(x: &[f64], p: &ModelParams, yf: f64) -> f64 {
    let need = (p.eta_v + p.delta) * x[V].max(0.0) / p.nu;
    let cap_s = x[S].max(0.0) / (VAX_AVAILABILITY_DAYS * p.nu);
    let cap_r = x[R].max(0.0) / (VAX_AVAILABILITY_DAYS * p.nu);
    let given = |y: f64| (p.theta * y).min(cap_s) + ((1.0 - p.theta) * y).min(cap_r);
    if given(yf) <= need {
        return yf;
    }
    // `given` is concave piecewise linear; walk its breakpoints.
    let mut knots = vec![0.0, yf];
    if p.theta > 0.0 {
        knots.push(cap_s / p.theta);
    }
    if p.theta < 1.0 {
        knots.push(cap_r / (1.0 - p.theta));
    }
    knots.retain(|k| (0.0..=yf).contains(k));
    knots.sort_by(f64::total_cmp);
    for w in knots.windows(2) {
        let (g0, g1) = (given(w[0]), given(w[1]));
        if g1 >= need {
            return if g1 > g0 { w[0] + (w[1] - w[0]) * (need - g0) / (g1 - g0) } else { w[0] };
        }
    }
    yf
}

/// Per-capita vaccination rate of a region given its gate.
#[inline]
fn vaccination_rate(x: &[f64], p: &ModelParams, gate: bool, yf: f64) -> f64 {
    if gate {
        yf
    } else if p.uptake_mode == UptakeMode::Maintained && p.nu > 0.0 {
        maintenance_rate(x, p, yf)
    } else {
        0.0
    }
}

/// Vaccine doses aimed at a compartment drain it at most at this
/// characteristic rate (1/day times its content), so an emptying `s` or `r`
/// is never driven negative and doses meant for it are simply not given.
pub const VAX_AVAILABILITY_DAYS: f64 = 1.0;

/// Right-hand side of one region. `pressure` is the mobility-weighted
/// infectious fraction seen by its susceptibles; `y` the per-capita
/// vaccination rate before the availability cap.
#[inline]
fn region_rhs(x: &[f64], p: &ModelParams, pressure: f64, u: f64, y: f64, out: &mut [f64]) {
    let (s, e, i, h, r, v) = (x[S], x[E], x[I], x[H], x[R], x[V]);
    let (mut vax_s, mut vax_r, mut doses) = (0.0, 0.0, 0.0);
    if y > 0.0 {
        let want_s = p.theta * y;
        let want_r = (1.0 - p.theta) * y;
        let given_s = want_s.min(s.max(0.0) / (VAX_AVAILABILITY_DAYS * p.nu.max(f64::MIN_POSITIVE)));
        let given_r = want_r.min(r.max(0.0) / (VAX_AVAILABILITY_DAYS * p.nu.max(f64::MIN_POSITIVE)));
        vax_s = p.nu * given_s;
        vax_r = p.nu * given_r;
        doses = given_s + given_r;
    }
    let infection = p.beta * u * s * pressure;
    let recoveries = p.gamma * i;
    let discharges = p.rho * h;
    out[S] = -infection - vax_s - p.delta * s + p.delta + p.sigma * r + p.eta_v * v;
    out[E] = -p.epsilon * e - p.delta * e + infection;
    out[I] = -recoveries - p.delta * i + p.epsilon * e;
    out[H] = -discharges + p.kappa_ih * recoveries;
    out[R] = -p.sigma * r - p.delta * r - vax_r
        + (1.0 - p.kappa_ih - p.kappa_id) * recoveries
        + (1.0 - p.kappa_hd) * discharges;
    out[V] = -p.eta_v * v - p.delta * v + vax_s + vax_r;
    out[D] = p.kappa_id * recoveries + p.kappa_hd * discharges;
    out[C] = doses;
}

fn check_control(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::domain(format!("control level must lie in [0,1], got {u}")));
    }
    Ok(())
}

/// Time derivative of a single region at control level `u`.
///
/// Vaccination runs at `y_rate / n_pop` while below the uptake ceiling
/// (see [`UptakeMode`] for what it limits); doses destined for an exhausted `s` or `r` are withheld (see
/// [`VAX_AVAILABILITY_DAYS`]).
pub fn derivative_single(x: &EpiState, p: &ModelParams, u: f64) -> Result<EpiState> {
    check_control(u)?;
    if !x.is_finite() {
        return Err(Error::domain(format!("non-finite state {x:?}")));
    }
    let xa = x.to_array();
    let y = vaccination_rate(&xa, p, vaccinating(&xa, p), p.vax_fraction());
    let mut out = [0.0; STATE_LEN];
    region_rhs(&xa, p, x.i, u, y, &mut out);
    Ok(EpiState::from_slice(&out))
}

/// Per-region time derivatives of the network.
pub fn derivative_network(xs: &[EpiState], net: &NetworkModel, u: &[f64]) -> Result<Vec<EpiState>> {
    net.check_dims(xs, u)?;
    for &ui in u {
        check_control(ui)?;
    }
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::domain(format!("non-finite state {x:?}")));
    }
    let flat = flatten(xs);
    let gates: Vec<bool> = xs
        .iter()
        .zip(&net.regions)
        .map(|(x, r)| vaccinating(&x.to_array(), &r.params))
        .collect();
    let mut out = vec![0.0; flat.len()];
    net.rhs_flat(&flat, u, &gates, &mut out);
    Ok(unflatten(&out))
}

pub fn flatten(xs: &[EpiState]) -> Vec<f64> {
    xs.iter().flat_map(|x| x.to_array()).collect()
}

pub fn unflatten(flat: &[f64]) -> Vec<EpiState> {
    flat.chunks_exact(STATE_LEN).map(EpiState::from_slice).collect()
}

/// Negative-compartment clamping tally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampStats {
    pub events: usize,
    /// Most negative value seen before clamping (0 when none).
    pub most_negative: f64,
}

impl Default for ClampStats {
    fn default() -> Self {
        ClampStats { events: 0, most_negative: 0.0 }
    }
}

/// Steps the network forward under a control held constant over each step.
///
/// When a region's vaccination counter reaches its ceiling inside a step,
/// the step is split at the crossing so the switch-off is resolved exactly
/// rather than smeared over the step.
#[derive(Debug)]
pub struct Simulator<'a> {
    net: &'a NetworkModel,
    dt: f64,
    rk: Rk4,
    gates: Vec<bool>,
    scratch: Vec<f64>,
    pub clamp: ClampStats,
}

impl<'a> Simulator<'a> {
    pub fn new(net: &'a NetworkModel, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::domain(format!("step must be positive, got {dt}")));
        }
        Ok(Simulator {
            net,
            dt,
            rk: Rk4::new(net.n() * STATE_LEN),
            gates: vec![false; net.n()],
            scratch: vec![0.0; net.n() * STATE_LEN],
            clamp: ClampStats::default(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn network(&self) -> &NetworkModel {
        self.net
    }

    fn update_gates(&mut self, x: &[f64]) {
        for (i, g) in self.gates.iter_mut().enumerate() {
            *g = vaccinating(&x[i * STATE_LEN..(i + 1) * STATE_LEN], &self.net.regions[i].params);
        }
    }

    /// One step of length `h <= dt` starting at day `t`.
    pub fn step(&mut self, x: &mut [f64], u: &[f64], t: f64, h: f64) -> Result<()> {
        let net = self.net;
        let yf = net.vax_fraction();
        let mut remaining = h;
        let mut tt = t;
        for _ in 0..16 {
            self.update_gates(x);
            // Dose rates never exceed `yf`, so only regions this close can cross.
            let near = yf > 0.0
                && self.gates.iter().enumerate().any(|(i, &g)| {
                    let p = &net.regions[i].params;
                    g && p.uptake_max - x[i * STATE_LEN + ceiling_index(p)] < yf * remaining
                });
            if !near {
                break;
            }
            net.rhs_flat(x, u, &self.gates, &mut self.scratch);
            let mut split = remaining;
            for (i, &g) in self.gates.iter().enumerate() {
                let p = &net.regions[i].params;
                let k = i * STATE_LEN + ceiling_index(p);
                let rate = self.scratch[k];
                if g && rate > 0.0 {
                    let gap = p.uptake_max - x[k];
                    split = split.min(gap / rate);
                }
            }
            if split >= remaining - 1e-12 {
                break;
            }
            let gates = &self.gates;
            self.rk.step(|_, xs, dx| net.rhs_flat(xs, u, gates, dx), tt, x, split);
            tt += split;
            remaining -= split;
        }
        if remaining > 0.0 {
            self.update_gates(x);
            let gates = &self.gates;
            self.rk.step(|_, xs, dx| net.rhs_flat(xs, u, gates, dx), tt, x, remaining);
        }

        for (k, v) in x.iter_mut().enumerate() {
            if !v.is_finite() {
                let region = &net.regions[k / STATE_LEN].name;
                return Err(Error::Divergence {
                    day: t + h,
                    what: format!("region `{region}` component {} is {v}", k % STATE_LEN),
                });
            }
            if *v < 0.0 {
                self.clamp.events += 1;
                self.clamp.most_negative = self.clamp.most_negative.min(*v);
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// Advances `days` under constant `u`, calling `observe(t, x)` after
    /// every step. Returns the end time.
    pub fn advance<F>(&mut self, x: &mut [f64], u: &[f64], t0: f64, days: f64, mut observe: F) -> Result<f64>
    where
        F: FnMut(f64, &[f64]),
    {
        let n = step_count(days, self.dt);
        let mut t = t0;
        for k in 0..n {
            let h = (days - k as f64 * self.dt).min(self.dt);
            self.step(x, u, t, h)?;
            t = t0 + ((k + 1) as f64 * self.dt).min(days);
            observe(t, x);
        }
        Ok(t)
    }
}

/// States sampled at every integrator step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_regions: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
    pub clamp: ClampStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn state(&self, k: usize, region: usize) -> EpiState {
        let off = (k * self.n_regions + region) * STATE_LEN;
        EpiState::from_slice(&self.states[off..off + STATE_LEN])
    }

    pub fn states_at(&self, k: usize) -> Vec<EpiState> {
        (0..self.n_regions).map(|r| self.state(k, r)).collect()
    }

    /// Control applied over the step that starts at sample `k` (the last
    /// sample repeats the final control).
    pub fn control(&self, k: usize, region: usize) -> f64 {
        self.controls[k * self.n_regions + region]
    }

    pub fn last(&self) -> Vec<EpiState> {
        self.states_at(self.len() - 1)
    }

    /// One row per sample: `day,s,e,i,h,r,v,d,c_vax,u`, with a `region`
    /// column after `day` when the network has several regions.
    pub fn write_csv<W: std::io::Write>(&self, w: W, names: &[String]) -> Result<()> {
        if names.len() != self.n_regions {
            return Err(Error::dim(format!("{} names for {} regions", names.len(), self.n_regions)));
        }
        let multi = self.n_regions > 1;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["day"];
        if multi {
            header.push("region");
        }
        header.extend(["s", "e", "i", "h", "r", "v", "d", "c_vax", "u"]);
        out.write_record(&header)?;
        for k in 0..self.len() {
            for (r, name) in names.iter().enumerate() {
                let mut row = vec![format!("{}", (self.times[k] * 1e9).round() / 1e9)];
                if multi {
                    row.push(name.clone());
                }
                row.extend(self.state(k, r).to_array().iter().map(|v| v.to_string()));
                row.push(self.control(k, r).to_string());
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Integrates the network from `x0` for `horizon` days with step `dt`.
///
/// `u_signal(t)` is sampled at the start of every step and held over it.
pub fn integrate<U>(x0: &[EpiState], net: &NetworkModel, mut u_signal: U, horizon: f64, dt: f64) -> Result<Trajectory>
where
    U: FnMut(f64) -> Vec<f64>,
{
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::domain(format!("horizon must be >= 0, got {horizon}")));
    }
    if x0.len() != net.n() {
        return Err(Error::dim(format!("network has {} regions, got {} states", net.n(), x0.len())));
    }
    for x in x0 {
        x.validate()?;
    }
    let mut sim = Simulator::new(net, dt)?;
    let n = step_count(horizon, dt);
    let mut x = flatten(x0);
    let mut traj = Trajectory {
        n_regions: net.n(),
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity((n + 1) * x.len()),
        controls: Vec::with_capacity((n + 1) * net.n()),
        clamp: ClampStats::default(),
    };
    traj.times.push(0.0);
    traj.states.extend_from_slice(&x);
    let mut t = 0.0;
    for k in 0..n {
        let u = u_signal(t);
        if u.len() != net.n() {
            return Err(Error::dim(format!("control signal has {} entries, expected {}", u.len(), net.n())));
        }
        for &ui in &u {
            check_control(ui)?;
        }
        traj.controls.extend_from_slice(&u);
        let h = (horizon - k as f64 * dt).min(dt);
        sim.step(&mut x, &u, t, h)?;
        t = ((k + 1) as f64 * dt).min(horizon);
        traj.times.push(t);
        traj.states.extend_from_slice(&x);
    }
    let last_u = if n == 0 { u_signal(0.0) } else { traj.controls[(n - 1) * net.n()..].to_vec() };
    if last_u.len() != net.n() {
        return Err(Error::dim("control signal has the wrong length"));
    }
    traj.controls.extend_from_slice(&last_u);
    traj.clamp = sim.clamp;
    Ok(traj)
}

/// Single-region convenience wrapper around [`integrate`].
pub fn integrate_single<U>(x0: &EpiState, p: &ModelParams, mut u_signal: U, horizon: f64, dt: f64) -> Result<Trajectory>
where
    U: FnMut(f64) -> f64,
{
    let net = NetworkModel::single(*p, f64::INFINITY)?;
    integrate(std::slice::from_ref(x0), &net, |t| vec![u_signal(t)], horizon, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> (EpiState, ModelParams) {
        (EpiState::colorado_march_2021(), ModelParams::colorado())
    }

    #[test]
    fn disease_free_equilibrium_is_stationary() {
        let p = ModelParams { y_rate: 0.0, ..ModelParams::colorado() };
        for u in [0.0, 0.3, 1.0] {
            let dx = derivative_single(&EpiState::susceptible(), &p, u).unwrap();
            assert_eq!(dx.to_array(), [0.0; STATE_LEN]);
        }
    }

    #[test]
    fn full_lockdown_removes_transmission() {
        let (x, p) = nominal();
        let dx = derivative_single(&x, &p, 0.0).unwrap();
        assert_eq!(dx.e, -(p.epsilon + p.delta) * x.e);
    }

    #[test]
    fn rejects_out_of_range_control_and_nan_state() {
        let (x, p) = nominal();
        assert!(matches!(derivative_single(&x, &p, 1.1), Err(Error::Domain(_))));
        let bad = EpiState { s: f64::NAN, ..x };
        assert!(matches!(derivative_single(&bad, &p, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn vaccination_stops_at_uptake_ceiling() {
        let (mut x, p) = nominal();
        x.c_vax = p.uptake_max;
        let dx = derivative_single(&x, &p, 0.5).unwrap();
        assert_eq!(dx.c_vax, 0.0);
        x.c_vax = 0.5;
        let dx = derivative_single(&x, &p, 0.5).unwrap();
        assert_eq!(dx.c_vax, p.vax_fraction());
    }

    #[test]
    fn vaccination_capped_by_available_susceptibles() {
        let p = ModelParams::colorado();
        let x = EpiState { s: 1e-6, r: 0.5, v: 0.5 - 1e-6, c_vax: 0.0, ..Default::default() };
        let dx = derivative_single(&x, &p, 0.5).unwrap();
        assert!(-dx.s <= x.s / VAX_AVAILABILITY_DAYS + p.delta + 1e-15);
        assert!(dx.c_vax < p.vax_fraction());
        // Doses meant for the recovered pool are still given.
        assert!(dx.c_vax >= (1.0 - p.theta) * p.vax_fraction() * (1.0 - 1e-12));
    }

    #[test]
    fn single_region_network_is_identical() {
        let (x, p) = nominal();
        let net = NetworkModel::single(p, 8.0).unwrap();
        for u in [0.0, 0.21, 0.77, 1.0] {
            let a = derivative_single(&x, &p, u).unwrap();
            let b = derivative_network(&[x], &net, &[u]).unwrap();
            assert_eq!(a, b[0]);
        }
    }

    #[test]
    fn network_dimension_mismatch() {
        let (x, p) = nominal();
        let net = NetworkModel::single(p, 8.0).unwrap();
        assert!(matches!(derivative_network(&[x, x], &net, &[0.5]), Err(Error::Dimension(_))));
        assert!(matches!(derivative_network(&[x], &net, &[0.5, 0.5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mobility_validation() {
        assert!(MobilityMatrix::new(vec![vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(MobilityMatrix::new(vec![vec![1.0, 0.0]]).is_err());
        assert!(MobilityMatrix::new(vec![vec![1.2, -0.2], vec![0.0, 1.0]]).is_err());
        let m = MobilityMatrix::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(m.get(1, 0), 0.2);
        assert!(!m.is_identity());
        assert!(MobilityMatrix::identity(3).is_identity());
    }

    #[test]
    fn zero_horizon_trajectory() {
        let (x, p) = nominal();
        let traj = integrate_single(&x, &p, |_| 0.21, 0.0, 0.1).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.state(0, 0), x);
    }

    #[test]
    fn uptake_crossing_is_resolved_inside_a_step() {
        // The counter must land on the ceiling, not overshoot by up to y*dt.
        let (mut x, mut p) = nominal();
        p.uptake_max = 0.2;
        p.y_rate = 50_000.0;
        x.c_vax = 0.2 - 0.37 * p.vax_fraction();
        let traj = integrate_single(&x, &p, |_| 0.21, 3.0, 0.1).unwrap();
        let c = traj.last()[0].c_vax;
        assert!((c - 0.2).abs() < 1e-12, "c_vax = {c}");
    }

    #[test]
    fn divergence_reports_day() {
        let (x, mut p) = nominal();
        p.beta = 1e200;
        let err = integrate_single(&x, &p, |_| 1.0, 50.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
