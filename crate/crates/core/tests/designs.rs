use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use seqoed::batch::{select_batch, select_batch_with, sieve, SubsetSearch};
use seqoed::campaign::CampaignConfig;
use seqoed::criteria::{sensitivity, two_stage_value, Criterion, TwoStageContext};
use seqoed::io;
use seqoed::model::{InputPoint, Linear, NoiseModel, Polynomial, UnweightedDesign, WeightedDesign};
use seqoed::reference::Stage;
use seqoed::solver::{solve_weighted, DesignSpace, InfoCache};
use seqoed::vle::VleModel;

fn line() -> Linear<Polynomial> {
    Linear(Polynomial { degree: 1 })
}

fn pts(xs: &[f64]) -> Vec<InputPoint> {
    xs.iter().map(|&x| InputPoint::new(vec![x])).collect()
}

/// Criterion of `α M⁻ + (1−α) Σ w_i f(x_i) f(x_i)ᵀ` for the line, in closed
/// form.
fn line_value(criterion: Criterion, alpha: f64, prior: &[f64], xs: &[f64], w: &[f64]) -> f64 {
    let mut m = [0.0; 3];
    let mut add = |x: f64, c: f64| {
        m[0] += c;
        m[1] += c * x;
        m[2] += c * x * x;
    };
    for &x in prior {
        add(x, alpha / prior.len() as f64);
    }
    for (&x, &wi) in xs.iter().zip(w) {
        add(x, (1.0 - alpha) * wi);
    }
    let det = m[0] * m[2] - m[1] * m[1];
    if det <= 1e-300 {
        return f64::INFINITY;
    }
    match criterion {
        Criterion::D => -det.ln(),
        Criterion::A => (m[0] + m[2]) / det,
    }
}

/// Best value over every weight vector with grid step `1/steps` supported on
/// at most three of the candidates. Three points suffice for a model with
/// two parameters.
fn line_brute_force(criterion: Criterion, alpha: f64, prior: &[f64], cand: &[f64], steps: usize) -> f64 {
    let n = cand.len();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a..n {
            for c in b..n {
                let xs = [cand[a], cand[b], cand[c]];
                for i in 0..=steps {
                    for j in 0..=steps - i {
                        let w = [i, j, steps - i - j].map(|k| k as f64 / steps as f64);
                        best = best.min(line_value(criterion, alpha, prior, &xs, &w));
                    }
                }
            }
        }
    }
    best
}

fn solve_line(criterion: Criterion, alpha: f64, prior: &[f64], cand: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let model = line();
    let nz = NoiseModel::identity(1);
    let theta = DVector::zeros(2);
    let space = DesignSpace::new(pts(cand)).unwrap();
    let cache = InfoCache::new(&model, &space, &theta, &nz).unwrap();
    let ctx = if alpha == 0.0 {
        TwoStageContext::one_stage(criterion, theta)
    } else {
        TwoStageContext::new(&model, &nz, criterion, alpha, UnweightedDesign::new(pts(prior)), theta).unwrap()
    };
    let r = solve_weighted(&ctx, &space, &cache, eps).unwrap();
    assert!(r.certified());
    let xs: Vec<f64> = r.design.support().map(|(_, x)| x.0[0]).collect();
    let w = r.design.weights();
    let v = line_value(criterion, alpha, prior, &xs, &w);
    (xs, w, v)
}

fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n).prop_filter("well separated", |v| {
        v.iter().enumerate().all(|(i, a)| v[..i].iter().all(|b| (a - b).abs() > 0.05))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn two_parameter_designs_match_brute_force(
        cand in distinct(4),
        prior in distinct(2),
        alpha in prop_oneof![Just(0.0), 0.1f64..0.9],
        a_criterion in any::<bool>(),
    ) {
        let criterion = if a_criterion { Criterion::A } else { Criterion::D };
        let (_, _, v) = solve_line(criterion, alpha, &prior, &cand, 1e-8);
        let brute = line_brute_force(criterion, alpha, &prior, &cand, 1000);
        let scale = criterion.tolerance_scale(brute);
        prop_assert!(v <= brute + 1e-9 * scale, "solver {v} above brute force {brute}");
        prop_assert!(brute - v <= 1e-4 * scale, "solver {v}, brute force {brute}");
    }

    #[test]
    fn certificate_bounds_the_optimality_gap(
        cand in distinct(3),
        prior in distinct(2),
        alpha in 0.1f64..0.9,
    ) {
        // a loose tolerance, so that the solver stops early
        let eps = 1e-2;
        let (_, _, v) = solve_line(Criterion::D, alpha, &prior, &cand, eps);
        let coarse = line_brute_force(Criterion::D, alpha, &prior, &cand, 1000);
        // the optimum on three candidates, refined by a tight solve
        let (_, _, tight) = solve_line(Criterion::D, alpha, &prior, &cand, 1e-10);
        prop_assert!(tight <= coarse + 1e-12);
        prop_assert!(v - tight <= eps, "gap {} exceeds {eps}", v - tight);
    }
}

#[test]
fn a_optimal_classical_designs() {
    let grid: Vec<f64> = DesignSpace::linspace(-1.0, 1.0, 21);
    let (xs, w, _) = solve_line(Criterion::A, 0.0, &[], &grid, 1e-9);
    assert_eq!(xs, vec![-1.0, 1.0]);
    assert!(w.iter().all(|w| (w - 0.5).abs() < 1e-6), "{w:?}");

    // quadratic: weights 1/4, 1/2, 1/4 at -1, 0, 1
    let model = Linear(Polynomial { degree: 2 });
    let nz = NoiseModel::identity(1);
    let theta = DVector::zeros(3);
    let space = DesignSpace::new(pts(&grid)).unwrap();
    let cache = InfoCache::new(&model, &space, &theta, &nz).unwrap();
    let r = solve_weighted(&TwoStageContext::one_stage(Criterion::A, theta), &space, &cache, 1e-9).unwrap();
    let got: Vec<(f64, f64)> = r.design.support().map(|(w, x)| (x.0[0], *w)).collect();
    let want = [(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)];
    assert_eq!(got.len(), 3, "{got:?}");
    for (g, e) in got.iter().zip(want) {
        assert!((g.0 - e.0).abs() < 1e-12 && (g.1 - e.1).abs() < 1e-5, "{got:?}");
    }
}

fn case_study_contexts() -> Vec<TwoStageContext> {
    let model = VleModel::default();
    let nz = CampaignConfig::case_study().noise;
    let theta = io::theta_tot_fixture().to_dvector();
    let mut out = vec![TwoStageContext::one_stage(Criterion::A, theta.clone())];
    for stage in [Stage::Init, Stage::Oed2, Stage::Fed3] {
        let prior = io::actual_design(&io::fixture(stage.fixture_id()).unwrap());
        for c in [Criterion::D, Criterion::A] {
            out.push(TwoStageContext::new(&model, &nz, c, 0.5, prior.clone(), theta.clone()).unwrap());
        }
    }
    out
}

#[test]
fn solver_history_descends_and_grows_one_point_at_a_time() {
    let model = VleModel::default();
    let nz = CampaignConfig::case_study().noise;
    let space = DesignSpace::oed_grid();
    let theta = io::theta_tot_fixture().to_dvector();
    let cache = InfoCache::new(&model, &space, &theta, &nz).unwrap();
    for ctx in case_study_contexts() {
        let r = solve_weighted(&ctx, &space, &cache, 5e-5).unwrap();
        assert!(r.certified());
        let h = &r.history;
        assert_eq!(h[0].discretization_size, r.initial_support.len());
        for pair in h.windows(2) {
            let scale = ctx.criterion.tolerance_scale(pair[0].value);
            assert!(pair[1].value <= pair[0].value + 1e-9 * scale, "{:?}", h);
            assert_eq!(pair[1].discretization_size, pair[0].discretization_size + 1);
            assert!(pair[0].added.is_some());
            assert!(pair[0].min_sensitivity < -r.threshold);
        }
        let last = h.last().unwrap();
        assert!(last.added.is_none());
        assert_eq!(last.min_sensitivity, r.min_sensitivity);

        // the reported minimum is the minimum over the grid, and the design's
        // value is the reported one
        let all: Vec<f64> = space.points.iter().map(|x| sensitivity(&ctx, &r.design, x, &model, &nz).unwrap()).collect();
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = ctx.criterion.tolerance_scale(r.criterion_value);
        assert!((min - r.min_sensitivity).abs() <= 1e-6 * scale, "{min} vs {}", r.min_sensitivity);
        let v = two_stage_value(&ctx, &r.design, &model, &nz).unwrap();
        assert!((v - r.criterion_value).abs() <= 1e-9 * scale.max(v.abs()));
    }
}

#[test]
fn sensitivity_has_zero_mean_over_the_design() {
    let model = VleModel::default();
    let nz = CampaignConfig::case_study().noise;
    let space = DesignSpace::oed_grid();
    for ctx in case_study_contexts() {
        for k in 0..5 {
            let entries: Vec<(f64, InputPoint)> = (0..4)
                .map(|i| ((1 + i + k) as f64, space.points[(17 * i + 31 * k + 3) % space.len()].clone()))
                .collect();
            let total: f64 = entries.iter().map(|e| e.0).sum();
            let xi = WeightedDesign::new(entries.into_iter().map(|(w, x)| (w / total, x)).collect()).unwrap();
            let mean: f64 = xi.support().map(|(w, x)| w * sensitivity(&ctx, &xi, x, &model, &nz).unwrap()).sum();
            let magnitude: f64 = xi.support().map(|(w, x)| w * sensitivity(&ctx, &xi, x, &model, &nz).unwrap().abs()).sum();
            assert!(mean.abs() <= 1e-9 * magnitude.max(1.0), "{mean} of {magnitude}");
        }
    }
}

fn random_survivors(n: usize, seed: u64) -> UnweightedDesign {
    // deterministic scatter over the unit interval
    UnweightedDesign::new(pts(&(0..n).map(|i| (((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 500.0) - 1.0).collect::<Vec<_>>()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn greedy_never_beats_exhaustive_and_selection_is_idempotent(
        xs in distinct(8),
        prior in distinct(3),
        alpha in 0.05f64..0.95,
        k in 1usize..5,
        degree in 1usize..3,
    ) {
        let model = Linear(Polynomial { degree });
        let nz = NoiseModel::identity(1);
        let ctx = TwoStageContext::new(&model, &nz, Criterion::D, alpha, UnweightedDesign::new(pts(&prior)), DVector::zeros(degree + 1)).unwrap();
        let survivors = UnweightedDesign::new(pts(&xs));
        let value = |d: &UnweightedDesign| two_stage_value(&ctx, &d.to_weighted().unwrap(), &model, &nz).unwrap();
        let (ex, _) = select_batch_with(&ctx, &survivors, k, &model, &nz, Some(SubsetSearch::Exhaustive)).unwrap();
        let (gr, _) = select_batch_with(&ctx, &survivors, k, &model, &nz, Some(SubsetSearch::Greedy)).unwrap();
        prop_assert_eq!(ex.len(), k);
        prop_assert_eq!(gr.len(), k);
        prop_assert!(value(&ex) <= value(&gr) + 1e-12 * value(&gr).abs().max(1.0));
        let again = select_batch(&ctx, &ex, k, &model, &nz).unwrap();
        prop_assert_eq!(&again, &ex);
        let chosen = select_batch(&ctx, &survivors, k, &model, &nz).unwrap();
        prop_assert_eq!(chosen, ex);
    }

    #[test]
    fn sieve_keeps_the_heaviest_points_and_enough_weight(
        raw in proptest::collection::vec(0.001f64..1.0, 1..12),
        min_weight in 0.5f64..1.0,
    ) {
        let total: f64 = raw.iter().sum();
        let xi = WeightedDesign::new(raw.iter().enumerate().map(|(i, w)| (w / total, InputPoint::new(vec![i as f64]))).collect()).unwrap();
        let kept = sieve(&xi, min_weight);
        let weight_of = |x: &InputPoint| xi.entries.iter().find(|e| &e.1 == x).unwrap().0;
        let kept_w: Vec<f64> = kept.points.iter().map(weight_of).collect();
        let kept_total: f64 = kept_w.iter().sum();
        prop_assert!(!kept.is_empty());
        prop_assert!(kept_total >= min_weight - 1e-12 || kept.len() == 1);
        // dropping the lightest survivor would fall below the threshold
        let lightest = kept_w.iter().cloned().fold(f64::INFINITY, f64::min);
        if kept.len() > 1 {
            prop_assert!(kept_total - lightest < min_weight + 1e-12);
        }
        // every discarded point is at most as heavy as every survivor
        for (w, x) in &xi.entries {
            if !kept.points.contains(x) {
                prop_assert!(*w <= lightest);
            }
        }
        // survivors are distinct and sorted heaviest first
        prop_assert!(kept_w.windows(2).all(|p| p[0] >= p[1]));
        prop_assert_eq!(kept.distinct_count(), kept.len());
    }
}

#[test]
fn uniform_survivors_are_returned_unchanged() {
    let model = line();
    let nz = NoiseModel::identity(1);
    let ctx = TwoStageContext::new(&model, &nz, Criterion::D, 0.5, random_survivors(3, 1), DVector::zeros(2)).unwrap();
    let s = random_survivors(3, 2);
    assert_eq!(select_batch(&ctx, &s, 3, &model, &nz).unwrap(), s);
    assert!(select_batch(&ctx, &s, 0, &model, &nz).is_err());
    assert!(select_batch(&ctx, &UnweightedDesign::default(), 2, &model, &nz).is_err());
}

#[test]
fn batch_value_matches_closed_form() {
    let model = line();
    let nz = NoiseModel::identity(1);
    let prior = [-0.3, 0.4];
    let ctx = TwoStageContext::new(&model, &nz, Criterion::D, 0.3, UnweightedDesign::new(pts(&prior)), DVector::zeros(2)).unwrap();
    let d = UnweightedDesign::new(pts(&[-1.0, 0.2, 1.0]));
    let v = two_stage_value(&ctx, &d.to_weighted().unwrap(), &model, &nz).unwrap();
    let expect = line_value(Criterion::D, 0.3, &prior, &[-1.0, 0.2, 1.0], &[1.0 / 3.0; 3]);
    assert!((v - expect).abs() < 1e-12);
    let m = DMatrix::<f64>::identity(2, 2);
    assert!((ctx.with_criterion(Criterion::A).value_of_info(&m) - Criterion::A.value(&ctx.combined(&m))).abs() < 1e-12);
}
