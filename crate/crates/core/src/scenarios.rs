//! Experiments built on closed-loop runs: days-to-normal sweeps, Monte Carlo
//! envelopes and the uncoordinated region-drop test.

use std::io::Write;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{closed_loop, ClosedLoopConfig, ClosedLoopTrace, ControllerMode, FixedControl};
use crate::epimodel::{flatten, MobilityMatrix, Region, fraction_to_per100k, NetworkModel, Simulator, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::params::{EpiState, ModelParams, UptakeMode};

/// Day 0 of all scenario calendars.
pub fn day_zero() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date")
}

/// Days from day 0 to `date` (negative before it).
pub fn day_of(date: NaiveDate) -> i64 {
    (date - day_zero()).num_days()
}

/// Controls within this distance of the target count as attaining it.
pub const ATTAINMENT_TOL: f64 = 0.01;

/// First day from which `u[k] >= target - tol` holds for the rest of the
/// series, or `None` when the last value misses the target.
pub fn days_to_target(u: &[f64], target: f64, tol: f64) -> Option<usize> {
    let thr = target - tol;
    let mut first = None;
    for (k, &v) in u.iter().enumerate().rev() {
        if v >= thr {
            first = Some(k);
        } else {
            break;
        }
    }
    first
}

/// A single-region closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleRegion {
    pub params: ModelParams,
    pub x0: EpiState,
    pub u0: f64,
    pub h_lim: f64,
    pub cfg: ClosedLoopConfig,
}

impl SingleRegion {
    pub fn new(params: ModelParams, x0: EpiState, u0: f64, h_lim: f64, horizon: f64) -> Self {
        SingleRegion { params, x0, u0, h_lim, cfg: ClosedLoopConfig::new(1, u0, horizon) }
    }

    pub fn run(&self) -> Result<ClosedLoopTrace> {
        let net = NetworkModel::single(self.params, self.h_lim)?;
        let mut cfg = self.cfg.clone();
        cfg.u0 = vec![self.u0];
        closed_loop(&net, &[self.x0], &[self.x0], &cfg)
    }
}

/// Grid of single-region runs over limits, vaccination rates and uptakes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: SingleRegion,
    /// Persons per 100K.
    pub h_lims: Vec<f64>,
    /// Persons per day.
    pub y_rates: Vec<f64>,
    pub uptakes: Vec<f64>,
    pub uptake_mode: UptakeMode,
    pub u_target: f64,
    pub u_target_alt: f64,
    pub tol: f64,
    pub horizon: f64,
    pub deaths_cutoff_day: usize,
}

impl SweepSpec {
    pub fn new(base: SingleRegion, h_lims: Vec<f64>, y_rates: Vec<f64>, uptakes: Vec<f64>) -> Self {
        SweepSpec {
            base,
            h_lims,
            y_rates,
            uptakes,
            uptake_mode: UptakeMode::Maintained,
            u_target: 1.0,
            u_target_alt: 0.8,
            tol: ATTAINMENT_TOL,
            horizon: 1100.0,
            deaths_cutoff_day: 153,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_lims.is_empty() || self.y_rates.is_empty() || self.uptakes.is_empty() {
            return Err(Error::domain("sweep grids must be non-empty"));
        }
        for t in [self.u_target, self.u_target_alt] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::domain(format!("target control {t} outside (0,1]")));
            }
        }
        if !(self.horizon >= 1.0) {
            return Err(Error::domain(format!("horizon must be at least one day, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Cells in output order: limit outermost, uptake innermost.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &h in &self.h_lims {
            for &y in &self.y_rates {
                for &up in &self.uptakes {
                    out.push((h, y, up));
                }
            }
        }
        out
    }

    pub fn scenario(&self, h_lim: f64, y_rate: f64, uptake: f64) -> SingleRegion {
        let mut s = self.base.clone();
        s.params.y_rate = y_rate;
        s.params.uptake_max = uptake;
        s.params.uptake_mode = self.uptake_mode;
        s.h_lim = h_lim;
        s.cfg.horizon = self.horizon;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub h_lim: f64,
    pub y_rate: f64,
    pub uptake: f64,
    pub days_u1: Option<usize>,
    pub days_u08: Option<usize>,
    pub deaths_cutoff: f64,
    pub status: String,
}

/// Summarizes one finished run into a sweep row.
pub fn sweep_row(spec: &SweepSpec, cell: (f64, f64, f64), trace: &ClosedLoopTrace) -> SweepRow {
    let u = trace.u_series(0);
    let days_u1 = days_to_target(&u, spec.u_target, spec.tol);
    let days_u08 = days_to_target(&u, spec.u_target_alt, spec.tol);
    // Runs shorter than the cutoff report no death count.
    let deaths = if spec.deaths_cutoff_day < trace.len() {
        trace.state(spec.deaths_cutoff_day, 0).d * spec.base.params.n_pop
    } else {
        f64::NAN
    };
    let status = match (days_u1, days_u08) {
        (Some(_), Some(_)) => "ok".to_string(),
        (None, Some(_)) => "u1_not_reached".to_string(),
        (_, None) => "not_reached".to_string(),
    };
    SweepRow { h_lim: cell.0, y_rate: cell.1, uptake: cell.2, days_u1, days_u08, deaths_cutoff: deaths, status }
}

/// One closed-loop run per grid cell; failures are recorded in the row.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let rows = spec
        .cells()
        .into_par_iter()
        .map(|cell| match spec.scenario(cell.0, cell.1, cell.2).run() {
            Ok(trace) => sweep_row(spec, cell, &trace),
            Err(e) => SweepRow {
                h_lim: cell.0,
                y_rate: cell.1,
                uptake: cell.2,
                days_u1: None,
                days_u08: None,
                deaths_cutoff: f64::NAN,
                status: format!("failed: {e}"),
            },
        })
        .collect();
    Ok(rows)
}

fn opt_days(d: Option<usize>) -> String {
    d.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["h_lim", "y_rate", "uptake", "days_u1", "days_u08", "deaths_cutoff", "status"])?;
    for r in rows {
        out.write_record([
            r.h_lim.to_string(),
            r.y_rate.to_string(),
            r.uptake.to_string(),
            opt_days(r.days_u1),
            opt_days(r.days_u08),
            if r.deaths_cutoff.is_nan() { "NA".to_string() } else { format!("{:.3}", r.deaths_cutoff) },
            r.status.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Parameters the Monte Carlo study may perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McParam {
    Beta,
    Gamma,
    Epsilon,
    Rho,
    KappaIh,
    Sigma,
}

impl McParam {
    pub const DEFAULT_SET: [McParam; 6] =
        [McParam::Beta, McParam::Gamma, McParam::Epsilon, McParam::Rho, McParam::KappaIh, McParam::Sigma];

    fn get_mut(self, p: &mut ModelParams) -> &mut f64 {
        match self {
            McParam::Beta => &mut p.beta,
            McParam::Gamma => &mut p.gamma,
            McParam::Epsilon => &mut p.epsilon,
            McParam::Rho => &mut p.rho,
            McParam::KappaIh => &mut p.kappa_ih,
            McParam::Sigma => &mut p.sigma,
        }
    }
}

/// Latin hypercube on `[0,1)^dims`: each of the `n` equal bins of every
/// dimension holds exactly one point.
pub fn latin_hypercube(n: usize, dims: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    for d in 0..dims {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(rng);
        for (k, b) in bins.into_iter().enumerate() {
            pts[k][d] = (b as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// How each Monte Carlo sample is driven.
#[derive(Debug, Clone, PartialEq)]
pub enum McRun {
    /// Constant control.
    OpenLoop { u: f64, horizon: f64 },
    ClosedLoop(SingleRegion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSpec {
    pub base: ModelParams,
    pub x0: EpiState,
    pub run: McRun,
    pub varied: Vec<McParam>,
    /// Relative half-width of the sampling range.
    pub pct: f64,
    pub n: usize,
    pub seed: u64,
    /// Use stratified (Latin hypercube) rather than plain uniform sampling.
    pub stratified: bool,
}

/// Per-day mean and standard deviation of one tracked quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub quantity: &'static str,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Envelope {
    /// The symmetric three-sigma band at day `k`.
    pub fn band(&self, k: usize) -> (f64, f64) {
        (self.mean[k] - 3.0 * self.sd[k], self.mean[k] + 3.0 * self.sd[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub days: Vec<f64>,
    pub envelopes: Vec<Envelope>,
    /// Unit-cube sample coordinates, one row per run.
    pub samples: Vec<Vec<f64>>,
    pub n_ok: usize,
    pub n_failed: usize,
}

pub const MC_QUANTITIES: [&str; 4] = ["u", "h", "i", "v"];

/// Daily `(u, h, i, v)` of one sampled run.
fn mc_series(spec: &MonteCarloSpec, p: ModelParams) -> Result<Vec<[f64; 4]>> {
    match &spec.run {
        McRun::OpenLoop { u, horizon } => {
            let net = NetworkModel::single(p, f64::INFINITY)?;
            let mut sim = Simulator::new(&net, DEFAULT_DT)?;
            let mut x = flatten(&[spec.x0]);
            let days = horizon.floor() as usize;
            let mut out = Vec::with_capacity(days + 1);
            out.push([*u, spec.x0.h, spec.x0.i, spec.x0.v]);
            for k in 0..days {
                sim.advance(&mut x, &[*u], k as f64, 1.0, |_, _| {})?;
                let s = EpiState::from_slice(&x);
                out.push([*u, s.h, s.i, s.v]);
            }
            Ok(out)
        }
        McRun::ClosedLoop(sc) => {
            let mut sc = sc.clone();
            sc.params = p;
            sc.x0 = spec.x0;
            let tr = sc.run()?;
            Ok((0..tr.len()).map(|k| {
                let x = tr.state(k, 0);
                [tr.u(k, 0), x.h, x.i, x.v]
            })
            .collect())
        }
    }
}

/// Runs `n` perturbed copies of the base scenario and summarizes them per day.
pub fn monte_carlo(spec: &MonteCarloSpec) -> Result<MonteCarloResult> {
    if spec.n == 0 {
        return Err(Error::domain("need at least one Monte Carlo sample"));
    }
    if !(spec.pct > 0.0 && spec.pct < 1.0) {
        return Err(Error::domain(format!("relative range must lie in (0,1), got {}", spec.pct)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.varied.len();
    let samples = if spec.stratified {
        latin_hypercube(spec.n, dims, &mut rng)
    } else {
        (0..spec.n).map(|_| (0..dims).map(|_| rng.random::<f64>()).collect()).collect()
    };
    let runs: Vec<Result<Vec<[f64; 4]>>> = samples
        .par_iter()
        .map(|q| {
            let mut p = spec.base;
            for (par, &qk) in spec.varied.iter().zip(q) {
                let v = par.get_mut(&mut p);
                *v *= 1.0 + spec.pct * (2.0 * qk - 1.0);
            }
            p.validate()?;
            mc_series(spec, p)
        })
        .collect();
    let mut ok = Vec::new();
    let mut n_failed = 0;
    for r in runs {
        match r {
            Ok(series) => ok.push(series),
            Err(e) => {
                log::warn!("Monte Carlo run excluded: {e}");
                n_failed += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::Estimation("every Monte Carlo run failed".into()));
    }
    let len = ok.iter().map(|s| s.len()).min().unwrap_or(0);
    let m = ok.len() as f64;
    let envelopes = MC_QUANTITIES
        .iter()
        .enumerate()
        .map(|(q, &name)| {
            let mut mean = vec![0.0; len];
            let mut sd = vec![0.0; len];
            for k in 0..len {
                let mu = ok.iter().map(|s| s[k][q]).sum::<f64>() / m;
                let var = if ok.len() > 1 { ok.iter().map(|s| (s[k][q] - mu).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
                mean[k] = mu;
                sd[k] = var.sqrt();
            }
            Envelope { quantity: name, mean, sd }
        })
        .collect();
    Ok(MonteCarloResult { days: (0..len).map(|k| k as f64).collect(), envelopes, samples, n_ok: ok.len(), n_failed })
}

pub fn write_monte_carlo<W: Write>(w: W, res: &MonteCarloResult) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["day", "quantity", "mean", "sd"])?;
    for (k, day) in res.days.iter().enumerate() {
        for env in &res.envelopes {
            out.write_record([day.to_string(), env.quantity.to_string(), env.mean[k].to_string(), env.sd[k].to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row of a regions file.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub name: String,
    pub population: f64,
    /// Persons per 100K.
    pub h_lim: f64,
}

/// Reads `region,population,h_lim`; the limit column is optional and
/// defaults to `default_h_lim`.
pub fn read_regions<R: std::io::Read>(r: R, default_h_lim: f64) -> Result<Vec<RegionSpec>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(cp)) = (col("region"), col("population")) else {
        return Err(Error::Parse { source_name: "regions".into(), line: 1, msg: "regions file needs `region` and `population` columns".into() });
    };
    let cl = col("h_lim");
    let mut out: Vec<RegionSpec> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let num = |c: usize| -> Result<f64> {
            let v = rec.get(c).unwrap_or("");
            v.parse().map_err(|_| Error::Parse { source_name: "regions".into(), line, msg: format!("bad number `{v}`") })
        };
        let name = rec.get(ci).unwrap_or("").to_string();
        if name.is_empty() || out.iter().any(|r| r.name == name) {
            return Err(Error::Parse { source_name: "regions".into(), line, msg: format!("missing or duplicate region `{name}`") });
        }
        let population = num(cp)?;
        let h_lim = match cl {
            Some(c) if !rec.get(c).unwrap_or("").is_empty() => num(c)?,
            _ => default_h_lim,
        };
        out.push(RegionSpec { name, population, h_lim });
    }
    if out.is_empty() {
        return Err(Error::domain("regions file lists no regions"));
    }
    Ok(out)
}

/// Builds a network whose regions share `base` except for their population.
/// Regions are reordered to match `mobility_names`.
pub fn build_network(
    base: &ModelParams,
    regions: &[RegionSpec],
    mobility_names: &[String],
    mobility: MobilityMatrix,
    vax_rate: f64,
) -> Result<NetworkModel> {
    if mobility_names.len() != regions.len() {
        return Err(Error::dim(format!("{} regions but mobility lists {}", regions.len(), mobility_names.len())));
    }
    let mut regs = Vec::with_capacity(regions.len());
    let mut lims = Vec::with_capacity(regions.len());
    for name in mobility_names {
        let r = regions
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| Error::domain(format!("region `{name}` missing from regions file")))?;
        regs.push(Region { name: r.name.clone(), params: ModelParams { n_pop: r.population, ..*base } });
        lims.push(r.h_lim);
    }
    NetworkModel::new(regs, mobility, lims, vax_rate)
}

/// Resolves a drop-set argument: `smallN` names the N least populous
/// regions, anything else is a comma-separated list of names.
pub fn resolve_regions(net: &NetworkModel, arg: &str) -> Result<Vec<String>> {
    if let Some(k) = arg.strip_prefix("small").and_then(|s| s.parse::<usize>().ok()) {
        if k > net.n() {
            return Err(Error::domain(format!("network has only {} regions", net.n())));
        }
        let mut idx: Vec<usize> = (0..net.n()).collect();
        idx.sort_by(|&a, &b| net.regions[a].population().total_cmp(&net.regions[b].population()));
        let mut pick: Vec<usize> = idx[..k].to_vec();
        pick.sort_unstable();
        return Ok(pick.into_iter().map(|j| net.regions[j].name.clone()).collect());
    }
    let names: Vec<String> = arg.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    for n in &names {
        if net.region_index(n).is_none() {
            return Err(Error::domain(format!("unknown region `{n}`")));
        }
    }
    Ok(names)
}

/// Regions that abandon control on `day`, holding `u_drop` afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct DropSpec {
    pub regions: Vec<String>,
    pub day: f64,
    pub u_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropRow {
    pub region: String,
    pub dropped: bool,
    pub peak_h_per100k: f64,
    pub days_above_limit: usize,
    pub mean_u_post_drop: f64,
    pub baseline_peak_h_per100k: f64,
    pub baseline_mean_u_post_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropResult {
    pub baseline: ClosedLoopTrace,
    pub dropped: ClosedLoopTrace,
    pub summary: Vec<DropRow>,
}

/// Names of regions with at most `max_pop` residents, in network order.
pub fn small_regions(net: &NetworkModel, max_pop: f64) -> Vec<String> {
    net.regions.iter().filter(|r| r.population() <= max_pop).map(|r| r.name.clone()).collect()
}

fn mean_from(u: &[f64], from: usize) -> f64 {
    let tail = &u[from.min(u.len())..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Runs every region under its local controller (the baseline) and again
/// with the listed regions pinned to `u_drop` from the drop day on.
pub fn region_drop(net: &NetworkModel, x0: &[EpiState], spec: &DropSpec, cfg: &ClosedLoopConfig) -> Result<DropResult> {
    if !(0.0..=1.0).contains(&spec.u_drop) {
        return Err(Error::domain(format!("drop level {} outside [0,1]", spec.u_drop)));
    }
    if !(spec.day >= 0.0 && spec.day <= cfg.horizon) {
        return Err(Error::domain(format!("drop day {} outside the horizon", spec.day)));
    }
    let idx: Vec<usize> = spec
        .regions
        .iter()
        .map(|r| net.region_index(r).ok_or_else(|| Error::domain(format!("unknown region `{r}`"))))
        .collect::<Result<_>>()?;
    let mut base_cfg = cfg.clone();
    base_cfg.mode = ControllerMode::Local;
    base_cfg.fixed = None;
    let mut drop_cfg = base_cfg.clone();
    if !idx.is_empty() {
        drop_cfg.fixed = Some(FixedControl { regions: idx.clone(), from_day: spec.day, u: spec.u_drop });
    }
    let (baseline, dropped) = rayon::join(|| closed_loop(net, x0, x0, &base_cfg), || closed_loop(net, x0, x0, &drop_cfg));
    let (baseline, dropped) = (baseline?, dropped?);

    let from = spec.day.ceil() as usize;
    let lims = net.h_lim_fractions();
    let summary = (0..net.n())
        .map(|j| {
            let above = (from..dropped.len()).filter(|&k| dropped.h(k, j) > lims[j]).count();
            DropRow {
                region: net.regions[j].name.clone(),
                dropped: idx.contains(&j),
                peak_h_per100k: fraction_to_per100k(dropped.peak_h(j)),
                days_above_limit: above,
                mean_u_post_drop: mean_from(&dropped.u_series(j), from),
                baseline_peak_h_per100k: fraction_to_per100k(baseline.peak_h(j)),
                baseline_mean_u_post_drop: mean_from(&baseline.u_series(j), from),
            }
        })
        .collect();
    Ok(DropResult { baseline, dropped, summary })
}

pub fn write_drop_summary<W: Write>(w: W, rows: &[DropRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["region", "peak_h_per100k", "days_above_limit", "mean_u_post_drop"])?;
    for r in rows {
        out.write_record([
            r.region.clone(),
            r.peak_h_per100k.to_string(),
            r.days_above_limit.to_string(),
            r.mean_u_post_drop.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
