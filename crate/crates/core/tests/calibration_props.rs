use chrono::{Days, NaiveDate};
use npi_core::calibration::*;
use npi_core::{EpiState, Error, ModelParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BETA: f64 = 0.58;
const KAPPA_IH: f64 = 0.0143762;

fn synthetic(noise: f64, seed: u64) -> HospCensusSeries {
    let p = ModelParams::colorado();
    let x0 = EpiState::colorado_march_2021();
    let offsets: Vec<usize> = (0..59).collect();
    let clean = simulate_census(&p, &x0, 0.21, &offsets, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise).unwrap();
    let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let pts = clean
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let f = if noise > 0.0 { 1.0 + eps.sample(&mut rng) } else { 1.0 };
            (start + Days::new(k as u64), c * f)
        })
        .collect();
    HospCensusSeries::new("co", pts).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noiseless_recovery_within_one_percent() {
    let s = synthetic(0.0, 0);
    let fixed = ModelParams { beta: 0.3, kappa_ih: 0.02, ..ModelParams::colorado() };
    let fit = fit_parameters(&s, &fixed, &EpiState::colorado_march_2021(), 0.21, &FitOptions::default()).unwrap();
    assert!(rel(fit.beta, BETA) < 0.01, "{fit:?}");
    assert!(rel(fit.kappa_ih, KAPPA_IH) < 0.01, "{fit:?}");
    for w in fit.sse_history.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn noisy_recovery_within_ten_percent() {
    for seed in [1, 2, 3] {
        let s = synthetic(0.05, seed);
        let fit =
            fit_parameters(&s, &ModelParams::colorado(), &EpiState::colorado_march_2021(), 0.21, &FitOptions::default())
                .unwrap();
        assert!(rel(fit.beta, BETA) < 0.10, "seed {seed}: {fit:?}");
        assert!(rel(fit.kappa_ih, KAPPA_IH) < 0.10, "seed {seed}: {fit:?}");
    }
}

#[test]
fn exact_series_needs_no_iterations() {
    let s = synthetic(0.0, 0);
    let opts = FitOptions { beta0: BETA, kappa_ih0: KAPPA_IH, ..FitOptions::default() };
    let fit = fit_parameters(&s, &ModelParams::colorado(), &EpiState::colorado_march_2021(), 0.21, &opts).unwrap();
    assert!(fit.iterations <= 1, "{fit:?}");
    assert!(fit.rmse < 1e-6, "{fit:?}");
}

#[test]
fn flat_series_without_infections_fails() {
    let x0 = EpiState { s: 0.9, h: 1e-4, r: 0.1 - 1e-4, ..Default::default() };
    let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let pts = (0..30).map(|k| (start + Days::new(k), 500.0)).collect();
    let s = HospCensusSeries::new("flat", pts).unwrap();
    let err = fit_parameters(&s, &ModelParams::colorado(), &x0, 0.21, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::FitFailure { iterations: 0, .. }), "{err}");
}

#[test]
fn window_restricts_rows() {
    let s = synthetic(0.0, 0);
    let w = s.window(NaiveDate::from_ymd_opt(2021, 1, 10).unwrap(), NaiveDate::from_ymd_opt(2021, 1, 19).unwrap());
    assert_eq!(w.len(), 10);
    assert_eq!(w.offsets(), (0..10).collect::<Vec<_>>());
}

fn travel(visits: Vec<Vec<f64>>) -> (Vec<TravelRecord>, Vec<String>) {
    let n = visits.len();
    let names: Vec<String> = (0..n).map(|k| format!("r{k}")).collect();
    let date = NaiveDate::from_ymd_opt(2020, 5, 1).unwrap();
    let mut recs = Vec::new();
    for (i, row) in visits.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            recs.push(TravelRecord { date, origin: names[j].clone(), destination: names[i].clone(), visits: v });
        }
    }
    (recs, names)
}

fn visit_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(0.0f64..1e6, n), n)
            .prop_filter("positive rows", |m| m.iter().all(|r| r.iter().sum::<f64>() > 1.0))
    })
}

fn full_year() -> (NaiveDate, NaiveDate) {
    (NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), NaiveDate::from_ymd_opt(2020, 12, 31).unwrap())
}

proptest! {
    #[test]
    fn mobility_rows_are_stochastic(m in visit_matrix()) {
        let (recs, names) = travel(m);
        let a = build_mobility_matrix(&recs, &names, full_year()).unwrap();
        for i in 0..a.n() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn mobility_is_scale_invariant(m in visit_matrix(), c in 1e-3f64..1e3) {
        let (recs, names) = travel(m.clone());
        let scaled: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let (recs2, _) = travel(scaled);
        let a = build_mobility_matrix(&recs, &names, full_year()).unwrap();
        let b = build_mobility_matrix(&recs2, &names, full_year()).unwrap();
        for i in 0..a.n() {
            for j in 0..a.n() {
                prop_assert!((a.get(i, j) - b.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mobility_csv_round_trips(m in visit_matrix()) {
        let (recs, names) = travel(m);
        let a = build_mobility_matrix(&recs, &names, full_year()).unwrap();
        let mut buf = Vec::new();
        write_mobility(&mut buf, &names, &a).unwrap();
        let (back_names, b) = read_mobility(buf.as_slice()).unwrap();
        prop_assert_eq!(back_names, names);
        prop_assert_eq!(a, b);
    }
}
