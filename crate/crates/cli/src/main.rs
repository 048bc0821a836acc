mod plot;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use npi_core::calibration::{
    build_mobility_matrix, fit_parameters, parse_date, parse_date_range, read_census, read_mobility, read_travel,
    write_mobility, FitOptions,
};
use npi_core::controller::{closed_loop, ClosedLoopConfig, ControllerMode};
use npi_core::epimodel::{fraction_to_per100k, integrate, MobilityMatrix, NetworkModel};
use npi_core::scenarios::{
    build_network, day_of, monte_carlo, read_regions, region_drop, resolve_regions, write_drop_summary,
    write_monte_carlo, write_sweep, DropSpec, McParam, McRun, MonteCarloSpec, SingleRegion, SweepSpec,
};
use npi_core::{ParamFile, UptakeMode};

#[derive(Parser, Debug)]
#[command(name = "npi", version, about = "Feedback control of contact-reducing interventions in an SEIHRVS model")]
struct Cli {
    /// Parameter file (`key = value` lines); Colorado defaults when omitted.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Integrator step, days.
    #[arg(long, global = true, default_value_t = npi_core::epimodel::DEFAULT_DT)]
    dt: f64,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Open- or closed-loop trajectory.
    Simulate(SimulateArgs),
    /// Fit beta and kappa_ih to a hospital census.
    Fit(FitArgs),
    /// Mobility matrix from a travel table.
    Mobility(MobilityArgs),
    /// Days-to-normal and deaths over a grid of limits, rates and uptakes.
    Sweep(SweepArgs),
    /// Parameter-uncertainty envelopes.
    Montecarlo(McArgs),
    /// Some regions abandon control on a given date.
    Drop(DropArgs),
}

#[derive(Args, Debug)]
struct NetworkArgs {
    /// Regions file (`region,population[,h_lim]`).
    #[arg(long)]
    region_file: Option<PathBuf>,
    /// Mobility matrix CSV as written by `mobility`.
    #[arg(long, requires = "region_file")]
    mobility: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Constant control; defaults to `u0` from the parameter file.
    #[arg(long)]
    u: Option<f64>,
    #[arg(long, default_value_t = 365.0)]
    days: f64,
    #[arg(long)]
    closed_loop: bool,
    /// Hospitalization limit, persons per 100K.
    #[arg(long, default_value_t = 8.0)]
    h_lim: f64,
    #[arg(long)]
    uptake_mode: Option<UptakeMode>,
    /// Per-region gradient controllers instead of the centralized one.
    #[arg(long)]
    local: bool,
    #[arg(long, default_value_t = 0.5)]
    gain: f64,
    #[command(flatten)]
    network: NetworkArgs,
    /// Also write an SVG plot next to the CSV.
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    census: PathBuf,
    /// Region to fit when the census lists several.
    #[arg(long)]
    region: Option<String>,
    /// Inclusive `start:end` date range.
    #[arg(long)]
    window: Option<String>,
    #[arg(long, default_value_t = 0.4)]
    beta0: f64,
    #[arg(long, default_value_t = 0.01)]
    kappa_ih0: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct MobilityArgs {
    #[arg(long)]
    travel: PathBuf,
    /// Inclusive `start:end` date range.
    #[arg(long)]
    range: String,
    /// Fixes region order; otherwise regions appear in order of first mention.
    #[arg(long)]
    region_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// `start:end:step` or a comma list, persons per 100K.
    #[arg(long, default_value = "6:20:2")]
    h_lim: String,
    #[arg(long, default_value = "0.4:1.0:0.1")]
    uptake: String,
    /// Persons per day.
    #[arg(long, default_value = "15000,20000,25000")]
    y: String,
    #[arg(long, default_value_t = 1100.0)]
    horizon: f64,
    #[arg(long, default_value = "maintained")]
    uptake_mode: UptakeMode,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Relative half-width of the sampling range.
    #[arg(long, default_value_t = 0.15)]
    pct: f64,
    #[arg(long, default_value_t = 365.0)]
    days: f64,
    /// Constant control for open-loop samples.
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    closed_loop: bool,
    #[arg(long, default_value_t = 8.0)]
    h_lim: f64,
    /// Plain uniform sampling instead of Latin hypercube.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct DropArgs {
    /// `smallN` or a comma list of region names.
    #[arg(long, default_value = "small5")]
    regions: String,
    #[arg(long, default_value = "2021-05-01")]
    date: String,
    #[arg(long, default_value_t = 0.8)]
    u_drop: f64,
    /// Limit for regions without one in the regions file, persons per 100K.
    #[arg(long, default_value_t = 8.0)]
    h_lim: f64,
    /// Statewide vaccinations per day.
    #[arg(long, default_value_t = 20000.0)]
    y: f64,
    #[arg(long, default_value_t = 240.0)]
    horizon: f64,
    #[arg(long)]
    region_file: PathBuf,
    #[arg(long, conflicts_with = "travel")]
    mobility: Option<PathBuf>,
    #[arg(long)]
    travel: Option<PathBuf>,
    /// Date range for `--travel`.
    #[arg(long, default_value = "2020-01-01:2020-12-31")]
    range: String,
    #[arg(long, default_value = "maintained")]
    uptake_mode: UptakeMode,
}

fn open(path: &Path, what: &str) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {what} `{}`", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot create `{}`", p.display()))?))
}

fn load_params(path: &Option<PathBuf>) -> Result<ParamFile> {
    match path {
        Some(p) => ParamFile::load(p).with_context(|| format!("cannot load parameter file `{}`", p.display())),
        None => Ok(ParamFile::default()),
    }
}

/// `a:b:step` (inclusive) or `v1,v2,...`.
fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| anyhow!("bad number `{t}` in grid `{s}`"));
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                bail!("grid `{s}` needs start <= end and a positive step");
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|k| ((a + k as f64 * step) * 1e9).round() / 1e9).collect())
        }
        [single] => single.split(',').map(num).collect(),
        _ => bail!("grid `{s}` must be start:end:step or a comma list"),
    }
}

fn load_network(pf: &ParamFile, net: &NetworkArgs, h_lim: f64) -> Result<Option<NetworkModel>> {
    let Some(rf) = &net.region_file else { return Ok(None) };
    let regions = read_regions(open(rf, "regions file")?, h_lim)?;
    let (names, a) = match &net.mobility {
        Some(m) => read_mobility(open(m, "mobility file")?)?,
        None => (regions.iter().map(|r| r.name.clone()).collect(), MobilityMatrix::identity(regions.len())),
    };
    Ok(Some(build_network(&pf.params, &regions, &names, a, pf.params.y_rate)?))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut pf = load_params(&cli.params)?;
    if let Some(m) = a.uptake_mode {
        pf.params.uptake_mode = m;
    }
    let net = match load_network(&pf, &a.network, a.h_lim)? {
        Some(n) => n,
        None => NetworkModel::single(pf.params, a.h_lim)?,
    };
    let names: Vec<String> = net.regions.iter().map(|r| r.name.clone()).collect();
    let x0 = vec![pf.x0; net.n()];
    let u = a.u.unwrap_or(pf.u0);
    if a.closed_loop {
        let mut cfg = ClosedLoopConfig::new(net.n(), u, a.days);
        cfg.dt = cli.dt;
        cfg.gain = a.gain;
        if a.local {
            cfg.mode = ControllerMode::Local;
        }
        let trace = closed_loop(&net, &x0, &x0, &cfg)?;
        trace.write_csv(create(&cli.out, "closed_loop.csv")?, &names)?;
        if a.plot {
            let days: Vec<f64> = (0..trace.len()).map(|k| k as f64).collect();
            let series: Vec<(String, Vec<f64>, Vec<f64>)> = (0..net.n())
                .map(|r| {
                    let h = (0..trace.len()).map(|k| fraction_to_per100k(trace.h(k, r))).collect();
                    (names[r].clone(), h, trace.u_series(r))
                })
                .collect();
            plot::write_svg(&cli.out.join("closed_loop.svg"), &days, &series, &net.h_lim)?;
        }
        if !cli.quiet {
            for (r, name) in names.iter().enumerate() {
                println!(
                    "{name}: peak h {:.3}/100K, final u {:.4}",
                    fraction_to_per100k(trace.peak_h(r)),
                    trace.final_u[r]
                );
            }
        }
    } else {
        let n = net.n();
        let traj = integrate(&x0, &net, |_| vec![u; n], a.days, cli.dt)?;
        traj.write_csv(create(&cli.out, "trajectory.csv")?, &names)?;
        if a.plot {
            let days = traj.times().to_vec();
            let series = (0..n)
                .map(|r| {
                    let h = (0..traj.len()).map(|k| fraction_to_per100k(traj.state(k, r).h)).collect();
                    (names[r].clone(), h, vec![u; traj.len()])
                })
                .collect::<Vec<_>>();
            plot::write_svg(&cli.out.join("trajectory.svg"), &days, &series, &net.h_lim)?;
        }
        if !cli.quiet {
            println!("wrote {} samples", traj.len());
        }
    }
    Ok(())
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let pf = load_params(&cli.params)?;
    let all = read_census(open(&a.census, "census file")?)?;
    let mut series = match &a.region {
        Some(r) => all.into_iter().find(|s| &s.region == r).ok_or_else(|| anyhow!("census has no region `{r}`"))?,
        None => {
            if all.len() != 1 {
                bail!("census lists {} regions; choose one with --region", all.len());
            }
            all.into_iter().next().expect("one series")
        }
    };
    if let Some(w) = &a.window {
        let (lo, hi) = parse_date_range(w)?;
        series = series.window(lo, hi);
    }
    let opts = FitOptions { beta0: a.beta0, kappa_ih0: a.kappa_ih0, max_iter: a.max_iter, dt: cli.dt, ..FitOptions::default() };
    let rep = fit_parameters(&series, &pf.params, &pf.x0, pf.u0, &opts)?;
    let text = format!(
        "region = {}\nrows = {}\nbeta0 = {}\nkappa_ih0 = {}\nbeta = {}\nkappa_ih = {}\nrmse = {}\niterations = {}\n",
        series.region,
        series.len(),
        rep.beta0,
        rep.kappa_ih0,
        rep.beta,
        rep.kappa_ih,
        rep.rmse,
        rep.iterations
    );
    std::fs::write(cli.out.join("fit_report.txt"), &text).context("cannot write fit report")?;
    let mut fitted = pf;
    fitted.params.beta = rep.beta;
    fitted.params.kappa_ih = rep.kappa_ih;
    std::fs::write(cli.out.join("fitted.params"), fitted.render()).context("cannot write fitted parameters")?;
    if !cli.quiet {
        print!("{text}");
    }
    Ok(())
}

fn mobility(cli: &Cli, a: &MobilityArgs) -> Result<()> {
    let recs = read_travel(open(&a.travel, "travel file")?)?;
    let names: Vec<String> = match &a.region_file {
        Some(rf) => read_regions(open(rf, "regions file")?, 8.0)?.into_iter().map(|r| r.name).collect(),
        None => {
            let mut v: Vec<String> = Vec::new();
            for r in &recs {
                for n in [&r.destination, &r.origin] {
                    if !v.contains(n) {
                        v.push(n.clone());
                    }
                }
            }
            v
        }
    };
    let m = build_mobility_matrix(&recs, &names, parse_date_range(&a.range)?)?;
    write_mobility(create(&cli.out, "mobility.csv")?, &names, &m)?;
    if !cli.quiet {
        println!("{} regions", names.len());
    }
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let pf = load_params(&cli.params)?;
    let mut base = SingleRegion::new(pf.params, pf.x0, pf.u0, 8.0, a.horizon);
    base.cfg.dt = cli.dt;
    let mut spec = SweepSpec::new(base, parse_grid(&a.h_lim)?, parse_grid(&a.y)?, parse_grid(&a.uptake)?);
    spec.horizon = a.horizon;
    spec.uptake_mode = a.uptake_mode;
    let rows = npi_core::scenarios::sweep(&spec)?;
    write_sweep(create(&cli.out, "sweep.csv")?, &rows)?;
    if !cli.quiet {
        println!("{} cells", rows.len());
    }
    Ok(())
}

fn montecarlo(cli: &Cli, a: &McArgs) -> Result<()> {
    let pf = load_params(&cli.params)?;
    let u = a.u.unwrap_or(pf.u0);
    let run = if a.closed_loop {
        let mut sc = SingleRegion::new(pf.params, pf.x0, u, a.h_lim, a.days);
        sc.cfg.dt = cli.dt;
        McRun::ClosedLoop(sc)
    } else {
        McRun::OpenLoop { u, horizon: a.days }
    };
    let spec = MonteCarloSpec {
        base: pf.params,
        x0: pf.x0,
        run,
        varied: McParam::DEFAULT_SET.to_vec(),
        pct: a.pct,
        n: a.n,
        seed: cli.seed,
        stratified: !a.plain,
    };
    let res = monte_carlo(&spec)?;
    write_monte_carlo(create(&cli.out, "montecarlo.csv")?, &res)?;
    if a.plot {
        let env = |q: &str| res.envelopes.iter().find(|e| e.quantity == q).expect("tracked quantity");
        let (h, uu) = (env("h"), env("u"));
        let band = |k: usize, f: fn((f64, f64)) -> f64| fraction_to_per100k(f(h.band(k)));
        let n = res.days.len();
        let series = vec![
            ("mean".to_string(), h.mean.iter().map(|v| fraction_to_per100k(*v)).collect(), uu.mean.clone()),
            ("lower".to_string(), (0..n).map(|k| band(k, |b| b.0)).collect(), (0..n).map(|k| uu.band(k).0).collect()),
            ("upper".to_string(), (0..n).map(|k| band(k, |b| b.1)).collect(), (0..n).map(|k| uu.band(k).1).collect()),
        ];
        plot::write_svg(&cli.out.join("montecarlo.svg"), &res.days, &series, &[a.h_lim])?;
    }
    if !cli.quiet {
        println!("{} runs, {} excluded", res.n_ok, res.n_failed);
    }
    Ok(())
}

fn drop_cmd(cli: &Cli, a: &DropArgs) -> Result<()> {
    let mut pf = load_params(&cli.params)?;
    pf.params.uptake_mode = a.uptake_mode;
    let regions = read_regions(open(&a.region_file, "regions file")?, a.h_lim)?;
    let (names, m) = match (&a.mobility, &a.travel) {
        (Some(p), _) => read_mobility(open(p, "mobility file")?)?,
        (None, Some(t)) => {
            let recs = read_travel(open(t, "travel file")?)?;
            let names: Vec<String> = regions.iter().map(|r| r.name.clone()).collect();
            let m = build_mobility_matrix(&recs, &names, parse_date_range(&a.range)?)?;
            (names, m)
        }
        (None, None) => bail!("drop needs --mobility or --travel"),
    };
    let net = build_network(&pf.params, &regions, &names, m, a.y)?;
    let day = day_of(parse_date(&a.date)?);
    if day < 0 {
        bail!("drop date {} precedes day 0", a.date);
    }
    let spec = DropSpec { regions: resolve_regions(&net, &a.regions)?, day: day as f64, u_drop: a.u_drop };
    let mut cfg = ClosedLoopConfig::new(net.n(), pf.u0, a.horizon);
    cfg.dt = cli.dt;
    let x0 = vec![pf.x0; net.n()];
    let res = region_drop(&net, &x0, &spec, &cfg)?;
    write_drop_summary(create(&cli.out, "drop_summary.csv")?, &res.summary)?;
    res.dropped.write_csv(create(&cli.out, "drop_trace.csv")?, &names)?;
    res.baseline.write_csv(create(&cli.out, "baseline_trace.csv")?, &names)?;
    if !cli.quiet {
        for r in &res.summary {
            let tag = if r.dropped { "dropped" } else { "retained" };
            println!(
                "{}: {tag}, peak h {:.2}/100K, {} days above limit, mean u after drop {:.3} (baseline {:.3})",
                r.region, r.peak_h_per100k, r.days_above_limit, r.mean_u_post_drop, r.baseline_mean_u_post_drop
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create output directory `{}`", cli.out.display()))?;
    match &cli.cmd {
        Cmd::Simulate(a) => simulate(cli, a),
        Cmd::Fit(a) => fit(cli, a),
        Cmd::Mobility(a) => mobility(cli, a),
        Cmd::Sweep(a) => sweep(cli, a),
        Cmd::Montecarlo(a) => montecarlo(cli, a),
        Cmd::Drop(a) => drop_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
