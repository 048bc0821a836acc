use npi_core::controller::*;
use npi_core::epimodel::{MobilityMatrix, NetworkModel, Region};
use npi_core::surrogates::{feasible_interval, FeasibleSet, Interval};
use npi_core::{EpiState, ModelParams, UptakeMode};
use proptest::prelude::*;

/// Nearest point of a sorted grid of admissible values.
fn nearest_on_grid(z: f64, keep: impl Fn(f64) -> bool) -> f64 {
    (0..=10_000)
        .map(|k| k as f64 / 10_000.0)
        .filter(|&t| keep(t))
        .min_by(|a, b| (a - z).abs().total_cmp(&(b - z).abs()))
        .unwrap()
}

fn interval() -> impl Strategy<Value = Interval> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| Interval { lo: a.min(b), hi: a.max(b), feasible: true })
}

#[test]
fn projection_examples() {
    let set = FeasibleSet::unit(2);
    assert_eq!(project(&[1.5, -0.2], &set).unwrap(), vec![1.0, 0.0]);
    let (lo, hi) = feasible_interval([2.0, 0.0, 1.0], 2.25).unwrap();
    let set = FeasibleSet { intervals: vec![Interval { lo, hi, feasible: true }] };
    let p = project(&[0.9], &set).unwrap()[0];
    let brute = nearest_on_grid(0.9, |t| 2.0 + t * t <= 2.25);
    assert_eq!(p, 0.5);
    assert!((p - brute).abs() <= 1e-4);
}

#[test]
fn stationary_points_are_exactly_the_projected_fixed_points() {
    let costs = CostConfig::uniform(2, 1.0, 1.0);
    let jac = vec![vec![0.4, 0.1], vec![0.2, 0.6]];
    let iota = [0.01, 0.02];
    let set = FeasibleSet::unit(2);
    // With phi' = -2(1-u) and psi' = 1, u* solves 2(1-u_k) = (J^T 1)_k.
    let u_star = vec![1.0 - 0.3, 1.0 - 0.35];
    for gain in [0.1, 0.5, 1.0] {
        let cs = ControlState { gain, ..ControlState::new(u_star.clone()) };
        let next = centralized_step(&cs, &jac, &iota, &set, &costs, 1.0).unwrap();
        for k in 0..2 {
            assert!((next.u[k] - u_star[k]).abs() < 1e-12);
        }
        let moved = ControlState { gain, ..ControlState::new(vec![0.5, 0.5]) };
        let next = centralized_step(&moved, &jac, &iota, &set, &costs, 1.0).unwrap();
        assert!(next.u.iter().zip(&moved.u).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}

#[test]
fn zero_gain_keeps_feasible_control() {
    let costs = CostConfig::uniform(1, 1.0, 1.0);
    let set = FeasibleSet { intervals: vec![Interval { lo: 0.2, hi: 0.7, feasible: true }] };
    let cs = ControlState { gain: f64::MIN_POSITIVE, ..ControlState::new(vec![0.4]) };
    let next = centralized_step(&cs, &[vec![0.3]], &[0.01], &set, &costs, 1.0).unwrap();
    assert!((next.u[0] - 0.4).abs() < 1e-300_f64.max(1e-15));
}

#[test]
fn local_matches_centralized_for_diagonal_jacobian() {
    let costs = CostConfig { w: vec![1.0, 0.5, 2.0], q: vec![1.0, 3.0, 0.2] };
    let diag = [0.02, 0.5, 1.3];
    let jac: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect();
    let iota = [0.001, 0.01, 0.1];
    let set = FeasibleSet {
        intervals: vec![
            Interval { lo: 0.0, hi: 0.4, feasible: true },
            Interval::UNIT,
            Interval::point(0.3),
        ],
    };
    let cs = ControlState::new(vec![0.35, 0.9, 0.6]);
    for dt_c in [0.25, 1.0] {
        let c = centralized_step(&cs, &jac, &iota, &set, &costs, dt_c).unwrap();
        for i in 0..3 {
            let l = local_step(i, &cs, diag[i], iota[i], set.intervals[i], &costs, dt_c).unwrap();
            assert!((l - c.u[i]).abs() <= 1e-12);
        }
    }
}

fn twin_network(mobility: MobilityMatrix) -> NetworkModel {
    let p = ModelParams { uptake_mode: UptakeMode::Maintained, ..ModelParams::colorado() };
    let regions = vec![Region { name: "a".into(), params: p }, Region { name: "b".into(), params: p }];
    NetworkModel::new(regions, mobility, vec![8.0; 2], 2.0 * p.y_rate).unwrap()
}

#[test]
fn symmetric_twins_get_identical_controls() {
    let net = twin_network(MobilityMatrix::new(vec![vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap());
    let x0 = vec![EpiState::colorado_march_2021(); 2];
    for mode in [ControllerMode::Centralized, ControllerMode::Local] {
        let mut cfg = ClosedLoopConfig::new(2, 0.21, 40.0);
        cfg.mode = mode;
        let tr = closed_loop(&net, &x0, &x0, &cfg).unwrap();
        for k in 0..tr.len() {
            assert_eq!(tr.u(k, 0), tr.u(k, 1), "day {k}");
        }
    }
}

#[test]
fn decoupled_regions_run_the_same_under_either_mode() {
    let net = twin_network(MobilityMatrix::identity(2));
    let mut x0 = vec![EpiState::colorado_march_2021(); 2];
    x0[1].i *= 0.5;
    x0[1].s += x0[1].i;
    let central = ClosedLoopConfig::new(2, 0.21, 40.0);
    let local = ClosedLoopConfig { mode: ControllerMode::Local, ..central.clone() };
    let a = closed_loop(&net, &x0, &x0, &central).unwrap();
    let b = closed_loop(&net, &x0, &x0, &local).unwrap();
    for k in 0..a.len() {
        for r in 0..2 {
            assert!((a.u(k, r) - b.u(k, r)).abs() <= 1e-6, "day {k} region {r}");
        }
    }
    assert!((a.u(40, 0) - a.u(40, 1)).abs() > 1e-4);
}

#[test]
fn unlimited_hospitals_without_infection_cost_open_fully() {
    let p = ModelParams::colorado();
    let net = NetworkModel::single(p, f64::INFINITY).unwrap();
    let x0 = [EpiState::colorado_march_2021()];
    let mut cfg = ClosedLoopConfig::new(1, 0.21, 30.0);
    cfg.costs = CostConfig::uniform(1, 1.0, 0.0);
    let tr = closed_loop(&net, &x0, &x0, &cfg).unwrap();
    let u = tr.u_series(0);
    assert!(u.windows(2).all(|w| w[1] >= w[0]));
    assert!(u[5..].iter().all(|&v| (v - 1.0).abs() < 1e-12), "{u:?}");
}

#[test]
fn iterates_stay_in_the_unit_box_and_track_the_limit() {
    let p = ModelParams { y_rate: 15000.0, ..ModelParams::colorado() };
    let net = NetworkModel::single(p, 8.0).unwrap();
    let x0 = [EpiState::colorado_march_2021()];
    let tr = closed_loop(&net, &x0, &x0, &ClosedLoopConfig::new(1, 0.21, 120.0)).unwrap();
    let lim = net.h_lim_fractions()[0];
    for k in 0..tr.len() {
        assert!((0.0..=1.0).contains(&tr.u(k, 0)));
        assert!(tr.h(k, 0) <= 1.05 * lim, "day {k}: {}", tr.h(k, 0) / lim);
    }
}

#[test]
fn trace_csv_has_one_row_per_region_day() {
    let net = twin_network(MobilityMatrix::identity(2));
    let x0 = vec![EpiState::colorado_march_2021(); 2];
    let tr = closed_loop(&net, &x0, &x0, &ClosedLoopConfig::new(2, 0.21, 3.0)).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf, &["a".into(), "b".into()]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "day,region,s,e,i,h,r,v,d,u,h_lim,feasible");
    assert_eq!(lines.count(), 4 * 2);
}

proptest! {
    #[test]
    fn projection_matches_grid_search(z in -0.5f64..1.5, iv in interval()) {
        let set = FeasibleSet { intervals: vec![iv] };
        let p = project(&[z], &set).unwrap()[0];
        let brute = nearest_on_grid(z, |t| iv.lo <= t && t <= iv.hi);
        prop_assert!((p - brute).abs() <= 1e-4, "{p} vs {brute}");
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        a in prop::collection::vec(-1.0f64..2.0, 3),
        b in prop::collection::vec(-1.0f64..2.0, 3),
        ivs in prop::collection::vec(interval(), 3),
    ) {
        let set = FeasibleSet { intervals: ivs };
        let (pa, pb) = (project(&a, &set).unwrap(), project(&b, &set).unwrap());
        prop_assert_eq!(project(&pa, &set).unwrap(), pa.clone());
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&pa, &pb) <= d(&a, &b) + 1e-15);
    }

    #[test]
    fn centralized_step_stays_in_the_unit_box(
        u in prop::collection::vec(0.0f64..=1.0, 2),
        j in prop::collection::vec(-5.0f64..5.0, 4),
        gain in 0.01f64..5.0,
        dt_c in 0.1f64..=1.0,
    ) {
        let jac = vec![j[..2].to_vec(), j[2..].to_vec()];
        let cs = ControlState { gain, ..ControlState::new(u) };
        let next = centralized_step(&cs, &jac, &[0.01, 0.05], &FeasibleSet::unit(2), &CostConfig::uniform(2, 1.0, 1.0), dt_c).unwrap();
        prop_assert!(next.u.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
