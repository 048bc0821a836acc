use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn npi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npi"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

fn col(h: &[String], name: &str) -> usize {
    h.iter().position(|c| c == name).unwrap()
}

#[test]
fn simulate_thirty_days_has_301_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("colorado.params");
    ok(&npi(dir.path(), &["simulate", "--params", p.to_str().unwrap(), "--u", "0.21", "--days", "30"]));
    let (h, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(h, ["day", "s", "e", "i", "h", "r", "v", "d", "c_vax", "u"]);
    assert_eq!(rows.len(), 301);
    assert_eq!(rows.last().unwrap()[0], "30");
}

#[test]
fn missing_params_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = npi(dir.path(), &["simulate", "--params", "/no/such/file.params", "--days", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("/no/such/file.params"), "{err}");
}

#[test]
fn closed_loop_respects_limit() {
    let dir = tempfile::tempdir().unwrap();
    ok(&npi(dir.path(), &["simulate", "--closed-loop", "--h-lim", "8", "--days", "200", "--plot"]));
    let (h, rows) = read_csv(&dir.path().join("closed_loop.csv"));
    let ch = col(&h, "h");
    let peak = rows.iter().map(|r| r[ch].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(peak * 1e5 <= 8.0 * 1.05, "peak {}", peak * 1e5);
    assert!(dir.path().join("closed_loop.svg").exists());
}

#[test]
fn mobility_fixture_is_row_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let t = data("travel_2020.csv");
    let rf = data("regions.csv");
    ok(&npi(
        dir.path(),
        &["mobility", "--travel", t.to_str().unwrap(), "--range", "2020-01-01:2020-12-31", "--region-file", rf.to_str().unwrap()],
    ));
    let (h, rows) = read_csv(&dir.path().join("mobility.csv"));
    assert_eq!(h.len(), 12);
    assert_eq!(rows.len(), 11);
    for r in &rows {
        let s: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn mobility_two_region_example() {
    let dir = tempfile::tempdir().unwrap();
    let t = data("travel_2x2.csv");
    ok(&npi(dir.path(), &["mobility", "--travel", t.to_str().unwrap(), "--range", "2020-01-01:2020-12-31"]));
    let text = std::fs::read_to_string(dir.path().join("mobility.csv")).unwrap();
    assert_eq!(text, "region,A,B\nA,0.75,0.25\nB,0.25,0.75\n");
}

#[test]
fn fit_recovers_fixture_beta() {
    let dir = tempfile::tempdir().unwrap();
    let c = data("census_synthetic.csv");
    ok(&npi(dir.path(), &["fit", "--census", c.to_str().unwrap()]));
    let rep = std::fs::read_to_string(dir.path().join("fit_report.txt")).unwrap();
    let get = |k: &str| -> f64 {
        rep.lines().find_map(|l| l.strip_prefix(&format!("{k} = "))).unwrap().parse().unwrap()
    };
    assert!((get("beta") - 0.58).abs() / 0.58 < 0.01, "{rep}");
    assert_eq!(get("beta0"), 0.4);
    assert!(get("iterations") >= 1.0);
    assert!(dir.path().join("fitted.params").exists());
}

#[test]
fn fit_window_restricts_rows_and_short_series_fails() {
    let dir = tempfile::tempdir().unwrap();
    let c = data("census_synthetic.csv");
    ok(&npi(dir.path(), &["fit", "--census", c.to_str().unwrap(), "--window", "2021-01-01:2021-02-14"]));
    let rep = std::fs::read_to_string(dir.path().join("fit_report.txt")).unwrap();
    assert!(rep.contains("rows = 45"), "{rep}");
    let o = npi(dir.path(), &["fit", "--census", c.to_str().unwrap(), "--window", "2021-01-01:2021-01-13"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sweep", "--h-lim", "6:20:2", "--uptake", "0.4:1.0:0.1", "--y", "15000,20000,25000", "--horizon", "2"];
    ok(&npi(dir.path(), &args));
    let (h, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(h, ["h_lim", "y_rate", "uptake", "days_u1", "days_u08", "deaths_cutoff", "status"]);
    assert_eq!(rows.len(), 8 * 7 * 3);
    assert_eq!(rows[0][..3], ["6", "15000", "0.4"]);
}

#[test]
fn montecarlo_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["montecarlo", "--n", "20", "--days", "60", "--seed", "11"];
    ok(&npi(a.path(), &args));
    ok(&npi(b.path(), &args));
    let x = std::fs::read(a.path().join("montecarlo.csv")).unwrap();
    let y = std::fs::read(b.path().join("montecarlo.csv")).unwrap();
    assert_eq!(x, y);
    let (h, rows) = read_csv(&a.path().join("montecarlo.csv"));
    assert_eq!(h, ["day", "quantity", "mean", "sd"]);
    assert_eq!(rows.len(), 61 * 4);
}

#[test]
fn drop_small_regions_exceed_limit() {
    let dir = tempfile::tempdir().unwrap();
    let rf = data("regions.csv");
    let t = data("travel_2020.csv");
    let args = [
        "drop",
        "--regions",
        "small5",
        "--date",
        "2021-05-01",
        "--region-file",
        rf.to_str().unwrap(),
        "--travel",
        t.to_str().unwrap(),
        "--horizon",
        "120",
    ];
    ok(&npi(dir.path(), &args));
    let (h, rows) = read_csv(&dir.path().join("drop_summary.csv"));
    assert_eq!(h, ["region", "peak_h_per100k", "days_above_limit", "mean_u_post_drop"]);
    let small = ["East Central", "San Luis Valley", "Southeast", "Southwest", "West Central Partnership"];
    for r in &rows {
        let over: usize = r[2].parse().unwrap();
        if small.contains(&r[0].as_str()) {
            assert!(over > 0, "{r:?}");
            assert!(r[1].parse::<f64>().unwrap() > 8.0);
        }
    }
}
