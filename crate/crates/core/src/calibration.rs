//! Fitting transmission parameters to hospital census data and building
//! the mobility matrix from travel records.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::epimodel::{MobilityMatrix, Simulator};
use crate::epimodel::{NetworkModel, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::params::{EpiState, ModelParams, H};

/// Daily hospitalized counts of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct HospCensusSeries {
    pub region: String,
    pub points: Vec<(NaiveDate, f64)>,
}

impl HospCensusSeries {
    pub fn new(region: impl Into<String>, points: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let region = region.into();
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::domain(format!("{region}: dates not strictly increasing at {}", w[1].0)));
            }
        }
        if let Some((d, c)) = points.iter().find(|(_, c)| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::domain(format!("{region}: bad count {c} on {d}")));
        }
        Ok(HospCensusSeries { region, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rows with `start <= date <= end`.
    pub fn window(&self, start: NaiveDate, end: NaiveDate) -> Self {
        HospCensusSeries {
            region: self.region.clone(),
            points: self.points.iter().copied().filter(|(d, _)| *d >= start && *d <= end).collect(),
        }
    }

    /// Day offsets from the first date.
    pub fn offsets(&self) -> Vec<usize> {
        match self.points.first() {
            Some(&(d0, _)) => self.points.iter().map(|(d, _)| (*d - d0).num_days() as usize).collect(),
            None => Vec::new(),
        }
    }
}

/// Parses `date,region,hospitalized`, grouping rows by region in order of
/// first appearance.
pub fn read_census<R: Read>(r: R) -> Result<Vec<HospCensusSeries>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse { source_name: "census".into(), line: 1, msg: format!("missing column `{name}`") })
    };
    let (cd, cr, ch) = (col("date")?, col("region")?, col("hospitalized")?);
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let bad = |msg: String| Error::Parse { source_name: "census".into(), line, msg };
        let date = parse_date(rec.get(cd).unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        let region = rec.get(cr).unwrap_or("").trim().to_string();
        let count: f64 = rec
            .get(ch)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad count `{}`", rec.get(ch).unwrap_or(""))))?;
        if !rows.contains_key(&region) {
            order.push(region.clone());
        }
        rows.entry(region).or_default().push((date, count));
    }
    order
        .into_iter()
        .map(|name| {
            let pts = rows.remove(&name).unwrap_or_default();
            HospCensusSeries::new(name, pts)
        })
        .collect()
}

pub fn write_census<W: Write>(w: W, series: &[HospCensusSeries]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "region", "hospitalized"])?;
    for s in series {
        for (d, c) in &s.points {
            out.write_record([d.to_string(), s.region.clone(), c.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::domain(format!("bad date `{}`: {e}", s.trim())))
}

/// Parses an inclusive `start:end` ISO-8601 range.
pub fn parse_date_range(s: &str) -> Result<(NaiveDate, NaiveDate)> {
    let (a, b) = s.split_once(':').ok_or_else(|| Error::domain(format!("expected `start:end`, got `{s}`")))?;
    let (a, b) = (parse_date(a)?, parse_date(b)?);
    if b < a {
        return Err(Error::domain(format!("empty date range {a}:{b}")));
    }
    Ok((a, b))
}

/// Starting point and stopping rules of the fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub beta0: f64,
    pub kappa_ih0: f64,
    pub max_iter: usize,
    /// Stop once an accepted step improves the SSE by less than this fraction.
    pub rel_tol: f64,
    pub dt: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { beta0: 0.4, kappa_ih0: 0.01, max_iter: 200, rel_tol: 1e-6, dt: DEFAULT_DT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub beta: f64,
    pub kappa_ih: f64,
    pub beta0: f64,
    pub kappa_ih0: f64,
    pub rmse: f64,
    pub iterations: usize,
    /// SSE after each accepted iteration, starting with the initial guess.
    pub sse_history: Vec<f64>,
}

/// Simulated hospitalized persons on the given day offsets.
pub fn simulate_census(p: &ModelParams, x0: &EpiState, u: f64, offsets: &[usize], dt: f64) -> Result<Vec<f64>> {
    let net = NetworkModel::single(*p, f64::INFINITY)?;
    let mut sim = Simulator::new(&net, dt)?;
    let mut x = x0.to_array().to_vec();
    let mut out = Vec::with_capacity(offsets.len());
    let mut day = 0usize;
    for &k in offsets {
        if k > day {
            sim.advance(&mut x, &[u], day as f64, (k - day) as f64, |_, _| {})?;
            day = k;
        }
        out.push(x[H] * p.n_pop);
    }
    Ok(out)
}

/// Prediction-correction least squares for `(beta, kappa_ih)`.
///
/// Each iteration simulates the census with the current parameters,
/// differentiates the residuals by central finite differences in
/// log-parameter space, and takes a damped Gauss-Newton step, halving it
/// until the SSE drops.
pub fn fit_parameters(
    series: &HospCensusSeries,
    fixed: &ModelParams,
    x0: &EpiState,
    u_known: f64,
    opts: &FitOptions,
) -> Result<FitReport> {
    if series.len() < 14 {
        return Err(Error::domain(format!("{}: need at least 14 days of census, got {}", series.region, series.len())));
    }
    if !(u_known > 0.0 && u_known <= 1.0) {
        return Err(Error::domain(format!("known control must lie in (0,1], got {u_known}")));
    }
    if !(opts.beta0 > 0.0 && opts.kappa_ih0 > 0.0) {
        return Err(Error::domain("initial guesses must be positive"));
    }
    fixed.validate()?;
    x0.validate()?;
    let offsets = series.offsets();
    let data: Vec<f64> = series.points.iter().map(|p| p.1).collect();

    let residuals = |theta: [f64; 2]| -> Result<Vec<f64>> {
        let p = ModelParams { beta: theta[0].exp(), kappa_ih: theta[1].exp(), ..*fixed };
        p.validate()?;
        let sim = simulate_census(&p, x0, u_known, &offsets, opts.dt)?;
        Ok(sim.iter().zip(&data).map(|(s, d)| s - d).collect())
    };
    let sse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut theta = [opts.beta0.ln(), opts.kappa_ih0.ln()];
    let mut res = residuals(theta)?;
    let mut cur = sse(&res);
    let mut history = vec![cur];
    let mut iterations = 0;
    let fd = 1e-5;

    // Residuals at round-off level of the data count as an exact fit.
    let floor = 1e-20 * data.iter().map(|v| v * v).sum::<f64>();
    while iterations < opts.max_iter && cur > floor {
        // Jacobian of the residuals, two columns.
        let mut jac = [vec![0.0; res.len()], vec![0.0; res.len()]];
        for (k, col) in jac.iter_mut().enumerate() {
            let mut up = theta;
            let mut dn = theta;
            up[k] += fd;
            dn[k] -= fd;
            let (ru, rd) = (residuals(up)?, residuals(dn)?);
            for (c, (a, b)) in col.iter_mut().zip(ru.iter().zip(&rd)) {
                *c = (a - b) / (2.0 * fd);
            }
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g = [dot(&jac[0], &res), dot(&jac[1], &res)];
        let a = [[dot(&jac[0], &jac[0]), dot(&jac[0], &jac[1])], [dot(&jac[1], &jac[0]), dot(&jac[1], &jac[1])]];
        if g.iter().all(|v| *v == 0.0) || !(a[0][0] + a[1][1] > 0.0) {
            break;
        }
        // Gauss-Newton direction with a little Levenberg damping; fall back to
        // the plain gradient when the normal matrix is singular.
        let lambda = 1e-9 * (a[0][0] + a[1][1]);
        let det = (a[0][0] + lambda) * (a[1][1] + lambda) - a[0][1] * a[1][0];
        let mut dir = if det > 0.0 {
            [
                -((a[1][1] + lambda) * g[0] - a[0][1] * g[1]) / det,
                -((a[0][0] + lambda) * g[1] - a[1][0] * g[0]) / det,
            ]
        } else {
            let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
            [-g[0] / n, -g[1] / n]
        };
        // Keep a single step within a factor e of the current values.
        let len = dir[0].abs().max(dir[1].abs());
        if len > 1.0 {
            dir = [dir[0] / len, dir[1] / len];
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = [theta[0] + step * dir[0], theta[1] + step * dir[1]];
            if let Ok(r) = residuals(trial) {
                let s = sse(&r);
                if s < cur {
                    accepted = Some((trial, r, s));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, r, s)) = accepted else {
            if iterations == 0 {
                return Err(Error::FitFailure {
                    iterations,
                    sse: cur,
                    reason: "no tested step reduced the squared error".into(),
                });
            }
            break;
        };
        let improvement = (cur - s) / cur;
        theta = trial;
        res = r;
        cur = s;
        history.push(cur);
        iterations += 1;
        log::debug!("fit iteration {iterations}: sse {cur:.6e}, beta {:.6}, kappa_ih {:.6}", theta[0].exp(), theta[1].exp());
        if improvement < opts.rel_tol {
            break;
        }
    }

    if iterations == 0 && cur > floor {
        return Err(Error::FitFailure {
            iterations,
            sse: cur,
            reason: "census is insensitive to beta and kappa_ih (no gradient)".into(),
        });
    }
    Ok(FitReport {
        beta: theta[0].exp(),
        kappa_ih: theta[1].exp(),
        beta0: opts.beta0,
        kappa_ih0: opts.kappa_ih0,
        rmse: (cur / data.len() as f64).sqrt(),
        iterations,
        sse_history: history,
    })
}

/// Visits recorded on one day from one region into another.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelRecord {
    pub date: NaiveDate,
    pub origin: String,
    pub destination: String,
    pub visits: f64,
}

pub fn read_travel<R: Read>(r: R) -> Result<Vec<TravelRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse { source_name: "travel".into(), line: 1, msg: format!("missing column `{name}`") })
    };
    let (cd, co, cdst, cv) = (col("date")?, col("origin")?, col("destination")?, col("visits")?);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::Parse { source_name: "travel".into(), line: k + 2, msg };
        let date = parse_date(rec.get(cd).unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        let visits: f64 = rec
            .get(cv)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad visits `{}`", rec.get(cv).unwrap_or(""))))?;
        if !(visits.is_finite() && visits >= 0.0) {
            return Err(bad(format!("visits must be nonnegative, got {visits}")));
        }
        out.push(TravelRecord {
            date,
            origin: rec.get(co).unwrap_or("").trim().to_string(),
            destination: rec.get(cdst).unwrap_or("").trim().to_string(),
            visits,
        });
    }
    Ok(out)
}

/// Row `i` holds the share of visits into region `i` coming from each origin,
/// summed over the inclusive date range.
pub fn build_mobility_matrix(records: &[TravelRecord], regions: &[String], range: (NaiveDate, NaiveDate)) -> Result<MobilityMatrix> {
    let n = regions.len();
    if n == 0 {
        return Err(Error::dim("no regions"));
    }
    let index: BTreeMap<&str, usize> = regions.iter().enumerate().map(|(k, r)| (r.as_str(), k)).collect();
    if index.len() != n {
        return Err(Error::domain("duplicate region names"));
    }
    let mut visits = vec![vec![0.0; n]; n];
    for rec in records.iter().filter(|r| r.date >= range.0 && r.date <= range.1) {
        let lookup = |name: &str| index.get(name).copied().ok_or_else(|| Error::domain(format!("unknown region `{name}` in travel records")));
        let (i, j) = (lookup(&rec.destination)?, lookup(&rec.origin)?);
        if !(rec.visits.is_finite() && rec.visits >= 0.0) {
            return Err(Error::domain(format!("visits must be nonnegative, got {}", rec.visits)));
        }
        visits[i][j] += rec.visits;
    }
    let mut rows = Vec::with_capacity(n);
    for (i, row) in visits.into_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateRow(regions[i].clone()));
        }
        rows.push(row.into_iter().map(|v| v / total).collect());
    }
    MobilityMatrix::new(rows)
}

/// Square matrix with a region-name header row and first column.
pub fn write_mobility<W: Write>(w: W, regions: &[String], m: &MobilityMatrix) -> Result<()> {
    if regions.len() != m.n() {
        return Err(Error::dim("one name per matrix row required"));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::from("region")];
    header.extend(regions.iter().cloned());
    out.write_record(&header)?;
    for (i, name) in regions.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_mobility`].
pub fn read_mobility<R: Read>(r: R) -> Result<(Vec<String>, MobilityMatrix)> {
    let mut rdr = csv::Reader::from_reader(r);
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Parse { source_name: "mobility".into(), line: k + 2, msg: e.to_string() })?);
    }
    Ok((names, MobilityMatrix::new(rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn rec(o: &str, dst: &str, v: f64) -> TravelRecord {
        TravelRecord { date: d("2020-06-01"), origin: o.into(), destination: dst.into(), visits: v }
    }

    #[test]
    fn hand_computed_shares() {
        let recs = vec![rec("1", "1", 90.0), rec("2", "1", 10.0), rec("1", "2", 40.0), rec("2", "2", 160.0)];
        let names = vec!["1".to_string(), "2".to_string()];
        let m = build_mobility_matrix(&recs, &names, (d("2020-01-01"), d("2020-12-31"))).unwrap();
        assert_eq!(m.rows(), vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
    }

    #[test]
    fn single_region_and_no_cross_travel() {
        let names = vec!["a".to_string()];
        let m = build_mobility_matrix(&[rec("a", "a", 7.0)], &names, (d("2020-01-01"), d("2020-12-31"))).unwrap();
        assert!(m.is_identity());
        let names = vec!["a".to_string(), "b".to_string()];
        let m = build_mobility_matrix(&[rec("a", "a", 7.0), rec("b", "b", 3.0)], &names, (d("2020-01-01"), d("2020-12-31")))
            .unwrap();
        assert!(m.is_identity());
    }

    #[test]
    fn zero_activity_row_names_region() {
        let names = vec!["a".to_string(), "b".to_string()];
        let err = build_mobility_matrix(&[rec("b", "a", 7.0)], &names, (d("2020-01-01"), d("2020-12-31"))).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow(ref r) if r == "b"), "{err}");
    }

    #[test]
    fn records_outside_range_are_ignored() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut late = rec("a", "b", 1e6);
        late.date = d("2021-01-01");
        let recs = vec![rec("a", "a", 1.0), rec("b", "b", 1.0), late];
        let m = build_mobility_matrix(&recs, &names, (d("2020-01-01"), d("2020-12-31"))).unwrap();
        assert!(m.is_identity());
        assert!(build_mobility_matrix(&[rec("x", "a", 1.0)], &names, (d("2020-01-01"), d("2020-12-31"))).is_err());
    }

    #[test]
    fn census_csv_round_trip() {
        let s = HospCensusSeries::new("co", vec![(d("2021-01-01"), 12.0), (d("2021-01-02"), 13.5)]).unwrap();
        let mut buf = Vec::new();
        write_census(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = read_census(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s]);
        assert!(HospCensusSeries::new("co", vec![(d("2021-01-02"), 1.0), (d("2021-01-01"), 1.0)]).is_err());
        assert!(read_census("date,region,hospitalized\n2021-13-01,co,1\n".as_bytes()).is_err());
    }

    #[test]
    fn date_ranges() {
        assert_eq!(parse_date_range("2021-01-01:2021-02-28").unwrap(), (d("2021-01-01"), d("2021-02-28")));
        assert!(parse_date_range("2021-03-01:2021-02-28").is_err());
        assert!(parse_date_range("2021-03-01").is_err());
    }

    #[test]
    fn short_series_rejected() {
        let pts = (0..13).map(|k| (d("2021-01-01") + chrono::Days::new(k), 10.0)).collect();
        let s = HospCensusSeries::new("co", pts).unwrap();
        let err = fit_parameters(&s, &ModelParams::colorado(), &EpiState::colorado_march_2021(), 0.21, &FitOptions::default());
        assert!(matches!(err, Err(Error::Domain(_))));
    }
}
