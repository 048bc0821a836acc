//! Model parameters, compartment state and the key-value parameter file.
//!
//! Compartments are population fractions. Rates are per day. The parameter
//! file is a flat list of `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// What the uptake ceiling limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UptakeMode {
    /// The cumulative administered fraction `c_vax`; once reached, no more
    /// doses are given and vaccine immunity wanes freely.
    #[default]
    Cumulative,
    /// The vaccinated compartment `v`; once reached, doses continue only at
    /// the rate that replaces waned vaccine immunity.
    Maintained,
}

impl UptakeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UptakeMode::Cumulative => "cumulative",
            UptakeMode::Maintained => "maintained",
        }
    }
}

impl std::str::FromStr for UptakeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cumulative" => Ok(UptakeMode::Cumulative),
            "maintained" => Ok(UptakeMode::Maintained),
            other => Err(Error::domain(format!("unknown uptake mode `{other}`"))),
        }
    }
}

/// Rate constants and vaccination policy of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Transmission rate.
    pub beta: f64,
    /// Share of vaccine doses given to susceptibles (the rest go to recovered).
    pub theta: f64,
    /// Birth/death rate.
    pub delta: f64,
    /// Natural-immunity waning rate.
    pub sigma: f64,
    /// Vaccine-immunity waning rate.
    pub eta_v: f64,
    /// Inverse latency period.
    pub epsilon: f64,
    /// Recovery rate.
    pub gamma: f64,
    /// Probability of hospitalization after infection.
    pub kappa_ih: f64,
    /// Probability of death after infection.
    pub kappa_id: f64,
    /// Probability of death after hospitalization.
    pub kappa_hd: f64,
    /// Hospital discharge rate.
    pub rho: f64,
    /// Vaccine efficacy.
    pub nu: f64,
    /// Vaccinations administered, persons/day.
    pub y_rate: f64,
    /// Ceiling on the vaccinated population fraction; see [`UptakeMode`].
    pub uptake_max: f64,
    pub uptake_mode: UptakeMode,
    /// Population size, persons.
    pub n_pop: f64,
}

impl ModelParams {
    /// Statewide Colorado values fitted to hospitalization census data,
    /// with 15,000 vaccinations per day and no uptake ceiling.
    pub fn colorado() -> Self {
        ModelParams {
            beta: 0.58,
            theta: 0.77,
            delta: 0.02965 / 365.0,
            sigma: 1.0 / 365.0,
            eta_v: 1.0 / 730.0,
            epsilon: 1.0 / 4.2,
            gamma: 1.0 / 9.0,
            kappa_ih: 0.0143762,
            kappa_id: 0.00262289,
            kappa_hd: 0.099204,
            rho: 1.0 / 7.489,
            nu: 0.81,
            y_rate: 15_000.0,
            uptake_max: 1.0,
            uptake_mode: UptakeMode::Cumulative,
            n_pop: 5_840_795.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("beta", self.beta),
            ("delta", self.delta),
            ("sigma", self.sigma),
            ("eta_v", self.eta_v),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("y_rate", self.y_rate),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("{name} must be a finite rate >= 0, got {v}")));
            }
        }
        let probs = [
            ("theta", self.theta),
            ("kappa_ih", self.kappa_ih),
            ("kappa_id", self.kappa_id),
            ("kappa_hd", self.kappa_hd),
            ("nu", self.nu),
            ("uptake_max", self.uptake_max),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.kappa_ih + self.kappa_id > 1.0 {
            return Err(Error::domain("kappa_ih + kappa_id must not exceed 1"));
        }
        if !(self.n_pop.is_finite() && self.n_pop > 0.0) {
            return Err(Error::domain(format!("n_pop must be positive, got {}", self.n_pop)));
        }
        Ok(())
    }

    /// Daily vaccinations as a fraction of the population.
    pub fn vax_fraction(&self) -> f64 {
        self.y_rate / self.n_pop
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::colorado()
    }
}

/// Compartment fractions of one region plus the cumulative vaccination counter.
///
/// The same layout is used for time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpiState {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub h: f64,
    pub r: f64,
    pub v: f64,
    pub d: f64,
    pub c_vax: f64,
}

/// Number of scalar entries of an [`EpiState`].
pub const STATE_LEN: usize = 8;

pub(crate) const S: usize = 0;
pub(crate) const E: usize = 1;
pub(crate) const I: usize = 2;
pub(crate) const H: usize = 3;
pub(crate) const R: usize = 4;
pub(crate) const V: usize = 5;
pub(crate) const D: usize = 6;
pub(crate) const C: usize = 7;

impl EpiState {
    /// Disease-free population with no immunity.
    pub fn susceptible() -> Self {
        EpiState { s: 1.0, ..Default::default() }
    }

    /// Colorado on 2021-03-01, rescaled so the compartments sum to one.
    /// The vaccination counter starts at the vaccinated fraction.
    pub fn colorado_march_2021() -> Self {
        let raw = EpiState {
            s: 1.0 / 1.47,
            e: 1.0 / 546.0,
            i: 1.0 / 216.0,
            h: 1.0 / 15936.0,
            r: 1.0 / 4.2136,
            v: 1.0 / 13.1,
            d: 0.0,
            c_vax: 0.0,
        };
        let mut x = raw.normalized();
        x.c_vax = x.v;
        x
    }

    pub fn to_array(&self) -> [f64; STATE_LEN] {
        [self.s, self.e, self.i, self.h, self.r, self.v, self.d, self.c_vax]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        EpiState {
            s: a[S],
            e: a[E],
            i: a[I],
            h: a[H],
            r: a[R],
            v: a[V],
            d: a[D],
            c_vax: a[C],
        }
    }

    /// Sum of the seven population compartments (excludes the counter).
    pub fn total(&self) -> f64 {
        self.s + self.e + self.i + self.h + self.r + self.v + self.d
    }

    /// Rescales the seven compartments to sum to one. The counter is kept.
    pub fn normalized(&self) -> Self {
        let t = self.total();
        EpiState {
            s: self.s / t,
            e: self.e / t,
            i: self.i / t,
            h: self.h / t,
            r: self.r / t,
            v: self.v / t,
            d: self.d / t,
            c_vax: self.c_vax,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::domain(format!("non-finite state {self:?}")));
        }
        let a = self.to_array();
        if a.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::domain(format!("compartment outside [0,1]: {self:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for EpiState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s={:.6} e={:.6} i={:.6} h={:.3e} r={:.6} v={:.6} d={:.3e} c_vax={:.6}",
            self.s, self.e, self.i, self.h, self.r, self.v, self.d, self.c_vax
        )
    }
}

/// Contents of a parameter file: rate constants, initial state and the
/// initial control level.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub params: ModelParams,
    pub x0: EpiState,
    pub u0: f64,
}

impl Default for ParamFile {
    fn default() -> Self {
        ParamFile {
            params: ModelParams::colorado(),
            x0: EpiState::colorado_march_2021(),
            u0: 0.21,
        }
    }
}

const PARAM_KEYS: &[&str] = &[
    "beta", "theta", "delta", "sigma", "eta_v", "epsilon", "gamma", "kappa_ih", "kappa_id",
    "kappa_hd", "rho", "y_rate", "uptake_max", "nu", "n_pop",
];
const STATE_KEYS: &[&str] = &["s0", "e0", "i0", "h0", "r0", "v0", "d0"];

impl ParamFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `key = value` lines on top of the Colorado defaults.
    ///
    /// Values may be written as plain numbers or as a ratio such as `1/365`.
    /// When any of `s0..d0` is given, all seven must be given; they are
    /// rescaled to sum to one. `c_vax0` defaults to the vaccinated fraction.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut mode_kv = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim().to_string();
            if key == "uptake_mode" {
                let mode = v.trim().parse::<UptakeMode>().map_err(|e| err(e.to_string()))?;
                if mode_kv.replace(mode).is_some() {
                    return Err(err("duplicate key `uptake_mode`".into()));
                }
                continue;
            }
            let value = parse_number(v.trim()).ok_or_else(|| err(format!("bad number `{}`", v.trim())))?;
            if !PARAM_KEYS.contains(&key.as_str())
                && !STATE_KEYS.contains(&key.as_str())
                && key != "u0"
                && key != "c_vax0"
            {
                return Err(err(format!("unknown key `{key}`")));
            }
            if kv.insert(key.clone(), value).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }

        let mut out = ParamFile::default();
        let p = &mut out.params;
        if let Some(mode) = mode_kv {
            p.uptake_mode = mode;
        }
        for (key, &v) in &kv {
            match key.as_str() {
                "beta" => p.beta = v,
                "theta" => p.theta = v,
                "delta" => p.delta = v,
                "sigma" => p.sigma = v,
                "eta_v" => p.eta_v = v,
                "epsilon" => p.epsilon = v,
                "gamma" => p.gamma = v,
                "kappa_ih" => p.kappa_ih = v,
                "kappa_id" => p.kappa_id = v,
                "kappa_hd" => p.kappa_hd = v,
                "rho" => p.rho = v,
                "y_rate" => p.y_rate = v,
                "uptake_max" => p.uptake_max = v,
                "nu" => p.nu = v,
                "n_pop" => p.n_pop = v,
                "u0" => out.u0 = v,
                _ => {}
            }
        }
        p.validate()?;

        let given: Vec<_> = STATE_KEYS.iter().filter(|k| kv.contains_key(**k)).collect();
        if !given.is_empty() {
            if given.len() != STATE_KEYS.len() {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: 0,
                    msg: "initial conditions need all of s0,e0,i0,h0,r0,v0,d0".into(),
                });
            }
            let raw = EpiState {
                s: kv["s0"],
                e: kv["e0"],
                i: kv["i0"],
                h: kv["h0"],
                r: kv["r0"],
                v: kv["v0"],
                d: kv["d0"],
                c_vax: 0.0,
            };
            if raw.total() <= 0.0 {
                return Err(Error::domain("initial compartments sum to zero"));
            }
            if (raw.total() - 1.0).abs() > 1e-2 {
                log::warn!("{source_name}: initial compartments sum to {:.6}; rescaling", raw.total());
            }
            out.x0 = raw.normalized();
            out.x0.c_vax = out.x0.v;
        }
        if let Some(&c) = kv.get("c_vax0") {
            out.x0.c_vax = c;
        }
        out.x0.validate()?;
        if !(0.0..=1.0).contains(&out.u0) {
            return Err(Error::domain(format!("u0 must lie in [0,1], got {}", out.u0)));
        }
        Ok(out)
    }

    /// Renders the file in the same format [`ParamFile::parse`] reads.
    pub fn render(&self) -> String {
        let p = &self.params;
        let x = &self.x0;
        let rows: [(&str, f64); 25] = [
            ("beta", p.beta),
            ("theta", p.theta),
            ("delta", p.delta),
            ("sigma", p.sigma),
            ("eta_v", p.eta_v),
            ("epsilon", p.epsilon),
            ("gamma", p.gamma),
            ("kappa_ih", p.kappa_ih),
            ("kappa_id", p.kappa_id),
            ("kappa_hd", p.kappa_hd),
            ("rho", p.rho),
            ("y_rate", p.y_rate),
            ("uptake_max", p.uptake_max),
            ("nu", p.nu),
            ("n_pop", p.n_pop),
            ("s0", x.s),
            ("e0", x.e),
            ("i0", x.i),
            ("h0", x.h),
            ("r0", x.r),
            ("v0", x.v),
            ("d0", x.d),
            ("c_vax0", x.c_vax),
            ("u0", self.u0),
            ("", 0.0),
        ];
        let mut out: String = rows
            .iter()
            .filter(|(k, _)| !k.is_empty())
            .map(|(k, v)| format!("{k} = {v:?}\n"))
            .collect();
        out.push_str(&format!("uptake_mode = {}\n", p.uptake_mode.as_str()));
        out
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.replace('_', "");
    if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num.trim().parse().ok()?;
        let den: f64 = den.trim().parse().ok()?;
        return (den != 0.0).then(|| num / den);
    }
    s.trim().parse().ok()
}
