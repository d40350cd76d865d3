use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use seqoed::assessment::{lin_prediction_sigma, sample_estimates, InfoNormalization, SamplingConfig};
use seqoed::campaign::CampaignConfig;
use seqoed::criteria::Criterion;
use seqoed::estimation::{gauss_newton_step, linear_lse, weighted_sse, wls_estimate, Dataset, EstimationConfig};
use seqoed::io;
use seqoed::linalg::is_psd;
use seqoed::model::{design_info, weighted_design_info, InputPoint, Linear, NoiseModel, Polynomial, UnweightedDesign};
use seqoed::vle::{antoine_pressure, bubble_point, nrtl_gamma, AntoineParams, ParamVector, VleModel, T_WINDOW};

fn theta_near_tot() -> impl Strategy<Value = ParamVector> {
    let t = io::theta_tot_fixture();
    (-1.0f64..1.0, -1.0f64..1.0, -100.0f64..100.0, -100.0f64..100.0, 0.005f64..0.3)
        .prop_map(move |(a, b, c, d, e)| ParamVector::new(t.a12 + a, t.a21 + b, t.b12 + c, t.b21 + d, e))
}

fn vle_point() -> impl Strategy<Value = InputPoint> {
    (0.0f64..=1.0, 1e5f64..3e5).prop_map(|(l, p)| InputPoint::new(vec![l, p]))
}

fn vle_design(n: std::ops::Range<usize>) -> impl Strategy<Value = UnweightedDesign> {
    proptest::collection::vec(vle_point(), n).prop_map(UnweightedDesign::new)
}

fn noise() -> NoiseModel {
    CampaignConfig::case_study().noise
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / a.abs().max().max(b.abs().max()).max(f64::MIN_POSITIVE)
}

/// Symmetric positive definite matrix `L Lᵀ + δ I` from raw entries.
fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| {
        let l = DMatrix::from_vec(d, d, v);
        &l * l.transpose() + DMatrix::identity(d, d) * 0.1
    })
}

/// `ln γ` from the NRTL equations, written out independently.
fn nrtl_reference(l: f64, t: f64, th: &ParamVector) -> (f64, f64) {
    let (x1, x2) = (l, 1.0 - l);
    let tau12 = th.a12 + th.b12 / t;
    let tau21 = th.a21 + th.b21 / t;
    let g12 = (-th.c12 * tau12).exp();
    let g21 = (-th.c12 * tau21).exp();
    let ln1 = x2 * x2 * (tau21 * (g21 / (x1 + x2 * g21)).powi(2) + tau12 * g12 / (x2 + x1 * g12).powi(2));
    let ln2 = x1 * x1 * (tau12 * (g12 / (x2 + x1 * g12)).powi(2) + tau21 * g21 / (x1 + x2 * g21).powi(2));
    (ln1, ln2)
}

fn antoine_reference(t: f64, p: &AntoineParams) -> f64 {
    1e5 * 10f64.powf(p.a - p.b / (t + p.c))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn information_is_additive_and_scales_with_the_design_size(
        a in vle_design(1..8),
        b in vle_design(1..8),
        th in theta_near_tot(),
    ) {
        let model = VleModel::default();
        let theta = th.to_dvector();
        let (Ok(ma), Ok(mb), Ok(mab)) = (
            design_info(&model, &a, &theta, &noise()),
            design_info(&model, &b, &theta, &noise()),
            design_info(&model, &a.concat(&b), &theta, &noise()),
        ) else {
            return Ok(());
        };
        prop_assert!(rel_diff(&(&ma.matrix + &mb.matrix), &mab.matrix) < 1e-12);
        prop_assert!(is_psd(&mab.matrix));
        let w = weighted_design_info(&model, &a.to_weighted().unwrap(), &theta, &noise()).unwrap();
        prop_assert!(rel_diff(&(ma.matrix / a.len() as f64), &w.matrix) < 1e-12);
    }

    #[test]
    fn criteria_are_convex_and_antitone(a in spd(4), b in spd(4), extra in spd(4), lambda in 0.0f64..1.0) {
        for c in [Criterion::D, Criterion::A] {
            let mix = &a * lambda + &b * (1.0 - lambda);
            let (va, vb) = (c.value(&a), c.value(&b));
            let bound = lambda * va + (1.0 - lambda) * vb;
            prop_assert!(c.value(&mix) <= bound + 1e-9 * bound.abs().max(1.0));
            prop_assert!(c.value(&(&a + &extra)) <= va + 1e-12 * va.abs().max(1.0));
        }
    }

    #[test]
    fn bubble_point_solves_the_equilibrium_condition(
        l in 0.0f64..=1.0,
        p in 1e5f64..3e5,
        th in theta_near_tot(),
    ) {
        let Ok(o) = bubble_point(l, p, &th) else { return Ok(()) };
        let sys = VleModel::default().system;
        let (g1, g2) = nrtl_reference(l, o.t, &th);
        let p1 = antoine_reference(o.t, &sys.components[0]) * g1.exp() * l;
        let p2 = antoine_reference(o.t, &sys.components[1]) * g2.exp() * (1.0 - l);
        prop_assert!(((p1 + p2) - p).abs() <= 1e-9 * p, "residual {}", (p1 + p2 - p) / p);
        prop_assert!((o.v - p1 / p).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&o.v));
    }

    #[test]
    fn activity_coefficients_are_consistent(
        l in 0.01f64..0.99,
        t in 320.0f64..420.0,
        th in theta_near_tot(),
    ) {
        let (g1, g2) = nrtl_gamma(l, t, &th).unwrap();
        let (r1, r2) = nrtl_reference(l, t, &th);
        prop_assert!((g1.ln() - r1).abs() < 1e-12 && (g2.ln() - r2).abs() < 1e-12);
        // pure components are ideal
        prop_assert_eq!(nrtl_gamma(1.0, t, &th).unwrap().0, 1.0);
        prop_assert_eq!(nrtl_gamma(0.0, t, &th).unwrap().1, 1.0);
        // Gibbs-Duhem at constant temperature
        let h = 1e-5;
        let d = |f: fn((f64, f64)) -> f64| {
            (f(nrtl_gamma(l + h, t, &th).unwrap()).ln() - f(nrtl_gamma(l - h, t, &th).unwrap()).ln()) / (2.0 * h)
        };
        let gd = l * d(|g| g.0) + (1.0 - l) * d(|g| g.1);
        prop_assert!(gd.abs() < 1e-6 * (r1.abs() + r2.abs()).max(1.0), "Gibbs-Duhem residual {gd}");
    }

    #[test]
    fn sigma_lin_decreases_when_experiments_are_added(
        base in vle_design(4..8),
        more in vle_design(1..5),
        x in vle_point(),
    ) {
        let model = VleModel::default();
        let theta = io::theta_tot_fixture().to_dvector();
        let bigger = base.concat(&more);
        let (Ok(s0), Ok(s1)) = (
            lin_prediction_sigma(&model, &x, &base, &theta, &noise(), InfoNormalization::Total),
            lin_prediction_sigma(&model, &x, &bigger, &theta, &noise(), InfoNormalization::Total),
        ) else {
            return Ok(());
        };
        for j in 0..2 {
            prop_assert!(s1[j] <= s0[j] * (1.0 + 1e-9) + 1e-15, "{s1:?} vs {s0:?}");
        }
    }
}

#[test]
fn antoine_pressure_is_increasing_over_the_window() {
    for comp in VleModel::default().system.components {
        let mut last = 0.0;
        for i in 0..=1500 {
            let t = T_WINDOW.0 + (T_WINDOW.1 - T_WINDOW.0) * i as f64 / 1500.0;
            let p = antoine_pressure(t, &comp).unwrap();
            assert!(p > last, "{} at {t}", comp.component);
            assert!((p - antoine_reference(t, &comp)).abs() <= 1e-12 * p);
            last = p;
        }
    }
}

fn tot_data() -> Dataset {
    io::to_dataset(&io::fixture("tot").unwrap()).unwrap()
}

#[test]
fn multistart_estimates_are_reproducible() {
    let model = VleModel::default();
    let data = io::to_dataset(&io::fixture("oed1").unwrap()).unwrap();
    let cfg = EstimationConfig {
        n_starts: 8,
        seed: 42,
        ..EstimationConfig::default()
    };
    let a = wls_estimate(&model, &data, &noise(), &cfg).unwrap();
    let b = wls_estimate(&model, &data, &noise(), &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for v in &a.theta {
        assert!(v.is_finite());
    }
    assert!(ParamVector::admissible_box().contains(&a.theta_vector()));
}

#[test]
fn warm_start_is_never_worsened() {
    let model = VleModel::default();
    let data = tot_data();
    let warm = io::theta_tot_fixture().to_dvector();
    let at_warm = weighted_sse(&model, &warm, &data, &noise()).unwrap();
    for seed in 0..4 {
        let cfg = EstimationConfig {
            n_starts: 4,
            seed,
            warm_start: Some(warm.iter().cloned().collect()),
            ..EstimationConfig::default()
        };
        let r = wls_estimate(&model, &data, &noise(), &cfg).unwrap();
        assert!(r.sse <= at_warm, "seed {seed}: {} > {at_warm}", r.sse);
        let recomputed = weighted_sse(&model, &r.theta_vector(), &data, &noise()).unwrap();
        assert!((recomputed - r.sse).abs() <= 1e-9 * r.sse);
    }
}

#[test]
fn gauss_newton_lands_on_the_linear_estimate() {
    let model = Linear(Polynomial { degree: 2 });
    let nz = NoiseModel::from_std_devs(&[0.5]).unwrap();
    let design = UnweightedDesign::new((0..7).map(|i| InputPoint::new(vec![-1.0 + i as f64 / 3.0])).collect());
    let mut data = Dataset::synthetic(&model, &design, &DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
    for (i, r) in data.records.iter_mut().enumerate() {
        r.y[0] += 0.1 * ((i * 37 % 11) as f64 - 5.0);
    }
    let exact = linear_lse(&model.0, &data, &nz).unwrap().theta;
    let step = gauss_newton_step(&model, &DVector::from_vec(vec![10.0, 3.0, -7.0]), &data, &nz).unwrap();
    assert!((step - &exact).amax() < 1e-10);
    let est = wls_estimate(&model, &data, &nz, &EstimationConfig { n_starts: 2, ..EstimationConfig::default() }).unwrap();
    assert!((est.theta_vector() - exact).amax() < 1e-8);
}

#[test]
fn sampled_estimates_depend_only_on_the_seed() {
    let model = VleModel::default();
    let design = io::actual_design(&io::fixture("oed3").unwrap());
    let theta = io::theta_tot_fixture().to_dvector();
    let cfg = SamplingConfig {
        n_sam: 12,
        seed: 9,
        ..SamplingConfig::default()
    };
    let a = sample_estimates(&model, &design, &theta, &noise(), &cfg).unwrap();
    let b = sample_estimates(&model, &design, &theta, &noise(), &cfg).unwrap();
    assert_eq!(a, b);
    let c = sample_estimates(&model, &design, &theta, &noise(), &SamplingConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(a, c);

    // without noise every refit returns the reference parameter
    let quiet = NoiseModel::from_std_devs(&[1e-14, 1e-14]).unwrap();
    for t in sample_estimates(&model, &design, &theta, &quiet, &cfg).unwrap() {
        let x = InputPoint::new(vec![0.37, 1.7e5]);
        let y0 = bubble_point(0.37, 1.7e5, &ParamVector::from_slice(theta.as_slice()).unwrap()).unwrap();
        let y = bubble_point(x.0[0], x.0[1], &ParamVector::from_slice(t.as_slice()).unwrap()).unwrap();
        assert!((y.v - y0.v).abs() < 1e-10 && (y.t - y0.t).abs() < 1e-10);
    }
}
