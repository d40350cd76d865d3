//! Adaptive discretization for locally ε-optimal weighted designs on a
//! finite design space, with a Frank-Wolfe inner solver on the weight simplex.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{Criterion, Sensitivity, TwoStageContext};
use crate::error::{Error, Result};
use crate::model::{info_from_jacobian, info_root, InputPoint, NoiseModel, ParametricModel, WeightedDesign};

/// Weights below this are dropped after each inner solve.
pub const PRUNE_TOL: f64 = 1e-9;
pub const MAX_OUTER: usize = 200;
const MAX_INNER: usize = 20_000;
/// Gap, in units of the rounding level, accepted when no step makes progress.
const STALL_FACTOR: f64 = 100.0;

/// Finite candidate set with the side lengths of its enclosing box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub points: Vec<InputPoint>,
    /// Side lengths of the smallest axis-aligned box containing the points.
    pub lambda: Vec<f64>,
}

impl DesignSpace {
    pub fn new(points: Vec<InputPoint>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Config("design space is empty".into()));
        };
        let dim = first.dim();
        if points.iter().any(|p| p.dim() != dim || p.coords().iter().any(|c| !c.is_finite())) {
            return Err(Error::Config("design space points must be finite and of equal dimension".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if points[..i].contains(p) {
                return Err(Error::Config(format!("duplicate design space point {:?}", p.coords())));
            }
        }
        let lambda = (0..dim)
            .map(|j| {
                let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.0[j]), hi.max(p.0[j]))
                });
                hi - lo
            })
            .collect();
        Ok(DesignSpace { points, lambda })
    }

    /// Full factorial grid, first coordinate varying slowest.
    pub fn grid(axes: &[Vec<f64>]) -> Result<Self> {
        let mut points = vec![Vec::new()];
        for axis in axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        Self::new(points.into_iter().map(InputPoint).collect())
    }

    /// `n` equidistant values on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// 10 × 10 grid on `[0, 1] × [1e5, 3e5]` Pa.
    pub fn oed_grid() -> Self {
        Self::grid(&[Self::linspace(0.0, 1.0, 10), Self::linspace(1e5, 3e5, 10)])
            .expect("static grid is valid")
    }

    /// 9 × 3 grid on `[0.05, 0.95] × {1, 2, 3}e5` Pa.
    pub fn fed_grid() -> Self {
        Self::grid(&[Self::linspace(0.05, 0.95, 9), vec![1e5, 2e5, 3e5]])
            .expect("static grid is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest scaled max-norm distance between two distinct candidates.
    pub fn mesh_size(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.points.len() {
            for j in 0..i {
                best = best.min(self.scaled_distance(&self.points[i], &self.points[j]));
            }
        }
        best
    }

    /// `max_j |x_j − x'_j| / λ_j`, skipping coordinates with `λ_j = 0`.
    pub fn scaled_distance(&self, a: &InputPoint, b: &InputPoint) -> f64 {
        a.coords()
            .iter()
            .zip(b.coords())
            .zip(&self.lambda)
            .filter(|(_, l)| **l > 0.0)
            .map(|((x, y), l)| (x - y).abs() / l)
            .fold(0.0, f64::max)
    }

    /// Coordinates with a degenerate (zero-length) box side.
    pub fn degenerate_axes(&self) -> Vec<usize> {
        self.lambda
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn index_of(&self, x: &InputPoint) -> Option<usize> {
        self.points.iter().position(|p| p == x)
    }
}

/// One-point information matrices of every candidate at a fixed `θ̄`.
#[derive(Debug, Clone)]
pub struct InfoCache {
    theta_ref: DVector<f64>,
    mats: Vec<DMatrix<f64>>,
    roots: Vec<DMatrix<f64>>,
}

impl InfoCache {
    pub fn new<M: ParametricModel + ?Sized>(
        model: &M,
        space: &DesignSpace,
        theta_ref: &DVector<f64>,
        noise: &NoiseModel,
    ) -> Result<Self> {
        let pairs = space
            .points
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                model
                    .jacobian(x.coords(), theta_ref)
                    .map(|j| (info_from_jacobian(&j, noise), info_root(&j, noise)))
                    .map_err(|e| Error::at(i, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mats, roots) = pairs.into_iter().unzip();
        Ok(InfoCache {
            theta_ref: theta_ref.clone(),
            mats,
            roots,
        })
    }

    pub fn is_valid_for(&self, theta: &DVector<f64>) -> bool {
        &self.theta_ref == theta
    }

    pub fn matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.mats[i]
    }

    /// `B_i` with `B_i B_iᵀ = m_i`.
    pub fn root(&self, i: usize) -> &DMatrix<f64> {
        &self.roots[i]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    fn dim(&self) -> usize {
        self.theta_ref.len()
    }

    /// Sensitivity function of the two-stage criterion at the design with
    /// weights `w` on `support`.
    pub fn sensitivity(&self, ctx: &TwoStageContext, support: &[usize], w: &[f64]) -> Result<(DMatrix<f64>, Sensitivity)> {
        let m = self.mix(support, w);
        let s = ctx.sensitivity_mixture(support.iter().zip(w).map(|(&i, &wi)| (wi, &self.roots[i])))?;
        Ok((m, s))
    }

    /// `Σ w_i m_i` over `support`.
    pub fn mix(&self, support: &[usize], w: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (&i, &wi) in support.iter().zip(w) {
            if wi != 0.0 {
                m += &self.mats[i] * wi;
            }
        }
        m
    }
}

fn ensure_cache(ctx: &TwoStageContext, cache: &InfoCache) -> Result<()> {
    if cache.is_valid_for(&ctx.theta_ref) {
        Ok(())
    } else {
        Err(Error::State("information cache was built for a different reference parameter".into()))
    }
}

/// Greedy choice of a small candidate subset whose uniform design makes the
/// combined matrix invertible; each step adds the candidate with the largest
/// regularized log-det gain.
pub fn initial_support(ctx: &TwoStageContext, cache: &InfoCache) -> Result<Vec<usize>> {
    ensure_cache(ctx, cache)?;
    let n = cache.len();
    let d = cache.dim();
    // Regularizer proportional to the average diagonal keeps scores finite
    // while the selection is still rank deficient.
    let mut reference = DMatrix::zeros(d, d);
    for m in &cache.mats {
        reference += m;
    }
    reference /= n as f64;
    let ridge_root = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| {
        ((reference[(i, i)] + ctx.prior_info[(i, i)]).max(f64::MIN_POSITIVE) * 1e-8).sqrt()
    }));
    let d_ctx = ctx.with_criterion(Criterion::D);
    let uniform = |sel: &[usize]| 1.0 / sel.len() as f64;
    let score = |sel: &[usize]| -> f64 {
        let w = uniform(sel);
        let mut roots: Vec<(f64, &DMatrix<f64>)> = sel.iter().map(|&i| (w, cache.root(i))).collect();
        roots.push((1.0, &ridge_root));
        -d_ctx.value_mixture(roots)
    };
    let invertible = |sel: &[usize]| {
        let w = uniform(sel);
        ctx.value_mixture(sel.iter().map(|&i| (w, cache.root(i)))).is_finite()
    };
    let mut chosen: Vec<usize> = Vec::new();
    loop {
        let candidates: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        if candidates.is_empty() {
            return Err(Error::Infeasible(format!(
                "no subset of the {n} candidates yields an invertible information matrix"
            )));
        }
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|&i| {
                let mut sel = chosen.clone();
                sel.push(i);
                score(&sel)
            })
            .collect();
        let mut best = 0;
        for k in 1..candidates.len() {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        chosen.push(candidates[best]);
        if invertible(&chosen) {
            chosen.sort_unstable();
            return Ok(chosen);
        }
    }
}

/// Sensitivities of the support points at weights `w`.
fn support_sensitivities(
    ctx: &TwoStageContext,
    cache: &InfoCache,
    support: &[usize],
    w: &[f64],
) -> Option<Vec<f64>> {
    support_state(ctx, cache, support, w).map(|(v, _)| v)
}

fn support_state(
    ctx: &TwoStageContext,
    cache: &InfoCache,
    support: &[usize],
    w: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let (_, s) = cache.sensitivity(ctx, support, w).ok()?;
    Some((support.iter().map(|&i| s.at_root(cache.root(i))).collect(), s.value()))
}

/// Exact line search along `w + γ d` for `γ ∈ [0, γ_max]`; `slope` maps the
/// support sensitivities at the trial weights to the directional derivative.
fn line_search(
    ctx: &TwoStageContext,
    cache: &InfoCache,
    support: &[usize],
    trial: impl Fn(f64) -> Vec<f64>,
    slope: impl Fn(f64, &[f64]) -> f64,
    gamma_max: f64,
) -> f64 {
    let deriv = |g: f64| -> f64 {
        match support_sensitivities(ctx, cache, support, &trial(g)) {
            Some(s) => slope(g, &s),
            None => f64::INFINITY,
        }
    };
    if gamma_max.is_finite() && deriv(gamma_max) <= 0.0 {
        return gamma_max;
    }
    let (mut lo, mut hi) = (0.0, gamma_max.min(1e6));
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1e-3) {
            break;
        }
    }
    lo
}

/// Optimal weights on `support` (indices into the cache) up to a simplex
/// sensitivity tolerance `tol`. `start` optionally warm-starts the weights.
///
/// Projected Newton steps on the face of the active points (plus any point
/// with negative sensitivity) drive the iteration; a Frank-Wolfe or away step
/// is taken whenever the Newton direction fails to descend.
pub fn inner_weight_solve(
    ctx: &TwoStageContext,
    cache: &InfoCache,
    support: &[usize],
    start: Option<&[f64]>,
    tol: f64,
) -> Result<Vec<f64>> {
    ensure_cache(ctx, cache)?;
    let k = support.len();
    if k == 0 {
        return Err(Error::Infeasible("empty support".into()));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let mut w = match start {
        Some(s) if s.len() == k && ctx.value_mixture(support.iter().zip(s).map(|(&i, &wi)| (wi, cache.root(i)))).is_finite() => s.to_vec(),
        _ => vec![1.0 / k as f64; k],
    };
    let roots: Vec<&DMatrix<f64>> = support.iter().map(|&i| cache.root(i)).collect();
    for _ in 0..MAX_INNER {
        let (_, sens) = cache.sensitivity(ctx, support, &w).map_err(|_| Error::Singular {
            what: "combined information matrix on the discretization",
            null_space: vec![],
        })?;
        let values: Vec<f64> = roots.iter().map(|b| sens.at_root(b)).collect();
        let magnitude = roots.iter().map(|b| sens.quad(b).abs()).fold(0.0, f64::max);
        let noise = sens.noise_floor(magnitude);
        let tol = (tol * ctx.criterion.tolerance_scale(sens.value())).max(noise);
        let (fw, away) = fw_away_vertices(&w, &values);
        let gap_fw = -values[fw];
        let gap_away = values[away];
        let gap = gap_fw.max(gap_away);
        if gap <= tol {
            return Ok(w);
        }
        let before = w.clone();
        if let Some(d) = newton_direction(&sens, &roots, &w, &values, tol) {
            let slope0: f64 = d.iter().zip(&values).map(|(a, b)| a * b).sum();
            if slope0 < 0.0 {
                let gmax = d
                    .iter()
                    .zip(&w)
                    .filter(|(di, _)| **di < 0.0)
                    .map(|(di, wi)| wi / -di)
                    .fold(f64::INFINITY, f64::min);
                let trial = |g: f64| -> Vec<f64> {
                    w.iter()
                        .zip(&d)
                        .map(|(wi, di)| {
                            let t = wi + g * di;
                            if t <= 1e-15 {
                                0.0
                            } else {
                                t
                            }
                        })
                        .collect()
                };
                // Near the optimum the derivative along `d` drowns in rounding,
                // so the full step is judged by the optimality gap instead.
                let full = trial(gmax.min(1.0));
                if let Some(s) = support_sensitivities(ctx, cache, support, &full) {
                    let (f, a) = fw_away_vertices(&full, &s);
                    if (-s[f]).max(s[a]) < gap {
                        w = full;
                        continue;
                    }
                }
                let slope = |_: f64, s: &[f64]| d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                let g = line_search(ctx, cache, support, &trial, slope, gmax.min(1.0));
                if g > 0.0 {
                    w = trial(g);
                    if w != before {
                        continue;
                    }
                }
            }
        }
        if gap_fw >= gap_away {
            // towards the vertex e_fw
            let base = w.clone();
            let trial = |g: f64| {
                let mut t: Vec<f64> = base.iter().map(|wi| wi * (1.0 - g)).collect();
                t[fw] += g;
                t
            };
            // d/dγ along e_fw − w equals ψ_γ(fw) − Σ_i w_i ψ_γ(i)
            let slope = |_: f64, s: &[f64]| s[fw] - base.iter().zip(s).map(|(b, si)| b * si).sum::<f64>();
            let g = line_search(ctx, cache, support, &trial, slope, 1.0);
            w = trial(g);
        } else {
            // away from the vertex e_away
            let wa = w[away];
            let gmax = if wa < 1.0 { wa / (1.0 - wa) } else { f64::INFINITY };
            let base = w.clone();
            let trial = |g: f64| {
                let mut t: Vec<f64> = base.iter().map(|wi| wi * (1.0 + g)).collect();
                t[away] = if g >= gmax { 0.0 } else { t[away] - g };
                t
            };
            let slope = |_: f64, s: &[f64]| base.iter().zip(s).map(|(b, si)| b * si).sum::<f64>() - s[away];
            let g = line_search(ctx, cache, support, &trial, slope, gmax);
            w = trial(g);
        }
        if w == before {
            // no representable improvement left
            if gap <= STALL_FACTOR * noise {
                return Ok(w);
            }
            return Err(Error::Convergence {
                what: "simplex weight optimization",
                detail: format!("stalled with optimality gap {gap:e} (rounding level {noise:e}); weights {w:?}"),
            });
        }
    }
    Err(Error::Convergence {
        what: "simplex weight optimization",
        detail: format!("iteration cap reached; last weights {w:?}"),
    })
}

fn fw_away_vertices(w: &[f64], values: &[f64]) -> (usize, usize) {
    let (mut fw, mut away) = (0, usize::MAX);
    for i in 0..w.len() {
        if values[i] < values[fw] {
            fw = i;
        }
        if w[i] > 0.0 && (away == usize::MAX || values[i] > values[away]) {
            away = i;
        }
    }
    (fw, away)
}

/// Newton direction on the face spanned by the points with positive weight
/// and the points with sensitivity below `−tol`, with `Σ d_i = 0`. Points at
/// zero weight whose component would turn negative are dropped and the
/// system is re-solved.
fn newton_direction(
    sens: &Sensitivity,
    roots: &[&DMatrix<f64>],
    w: &[f64],
    values: &[f64],
    tol: f64,
) -> Option<Vec<f64>> {
    let k = w.len();
    let h = sens.weight_hessian(roots);
    let mut free: Vec<usize> = (0..k).filter(|&i| w[i] > 0.0 || values[i] < -tol).collect();
    loop {
        let f = free.len();
        if f < 2 {
            return None;
        }
        let hmax = free.iter().map(|&i| h[(i, i)]).fold(0.0, f64::max);
        let mut kkt = DMatrix::zeros(f + 1, f + 1);
        let mut rhs = DVector::zeros(f + 1);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = h[(i, j)];
            }
            kkt[(a, a)] += 1e-12 * hmax;
            kkt[(a, f)] = 1.0;
            kkt[(f, a)] = 1.0;
            rhs[a] = -values[i];
        }
        let sol = kkt.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let blocked: Vec<usize> = free
            .iter()
            .enumerate()
            .filter(|(a, &i)| w[i] == 0.0 && sol[*a] < 0.0)
            .map(|(_, &i)| i)
            .collect();
        if blocked.is_empty() {
            let mut d = vec![0.0; k];
            for (a, &i) in free.iter().enumerate() {
                d[i] = sol[a];
            }
            return Some(d);
        }
        free.retain(|i| !blocked.contains(i));
    }
}

fn prune(w: &mut [f64]) {
    for wi in w.iter_mut() {
        if *wi < PRUNE_TOL {
            *wi = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|wi| *wi /= s);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveIteration {
    /// Size of the current discretization.
    pub discretization_size: usize,
    /// Optimal value on the current discretization.
    pub value: f64,
    /// Minimum sensitivity over the whole design space.
    pub min_sensitivity: f64,
    /// Grid index added to the discretization after this iteration.
    pub added: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Support points of the optimized design with positive weights.
    pub design: WeightedDesign,
    /// Grid indices of `design`'s entries.
    pub support_indices: Vec<usize>,
    pub initial_support: Vec<usize>,
    pub iterations: usize,
    pub min_sensitivity: f64,
    pub argmin_index: usize,
    pub epsilon: f64,
    /// `ε` in units of the sensitivity function (equal to `ε` for D).
    pub threshold: f64,
    pub criterion_value: f64,
    pub history: Vec<SolveIteration>,
}

impl SolveReport {
    pub fn certified(&self) -> bool {
        self.min_sensitivity >= -self.threshold
    }
}

/// Adaptive discretization: alternate inner weight solves with additions of
/// the strongest optimality violator until the sensitivity is at least `−ε`
/// everywhere on the design space.
pub fn solve_weighted(
    ctx: &TwoStageContext,
    space: &DesignSpace,
    cache: &InfoCache,
    epsilon: f64,
) -> Result<SolveReport> {
    ensure_cache(ctx, cache)?;
    if cache.len() != space.len() {
        return Err(Error::State("information cache does not match the design space".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let tol = (epsilon / 10.0).min(1e-6);
    let initial = initial_support(ctx, cache)?;
    let mut support = initial.clone();
    let mut weights: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    for it in 0..MAX_OUTER {
        let mut w = inner_weight_solve(ctx, cache, &support, weights.as_deref(), tol).map_err(|e| match e {
            Error::Convergence { what, detail } => Error::Convergence {
                what,
                detail: format!("outer iteration {it}: {detail}"),
            },
            e => e,
        })?;
        prune(&mut w);
        let (_, sens) = cache.sensitivity(ctx, &support, &w)?;
        let value = sens.value();
        let all: Vec<f64> = (0..cache.len()).into_par_iter().map(|i| sens.at_root(cache.root(i))).collect();
        let mut argmin = 0;
        for i in 1..all.len() {
            if all[i] < all[argmin] {
                argmin = i;
            }
        }
        let min_s = all[argmin];
        let threshold = epsilon * ctx.criterion.tolerance_scale(value);
        let done = min_s >= -threshold;
        history.push(SolveIteration {
            discretization_size: support.len(),
            value,
            min_sensitivity: min_s,
            added: if done { None } else { Some(argmin) },
        });
        if done || support.contains(&argmin) {
            if !done {
                return Err(Error::Convergence {
                    what: "adaptive discretization",
                    detail: format!("violator {argmin} already in the discretization (ψ = {min_s:e})"),
                });
            }
            let mut entries = Vec::new();
            let mut idx = Vec::new();
            for (&i, &wi) in support.iter().zip(&w) {
                if wi > 0.0 {
                    entries.push((wi, space.points[i].clone()));
                    idx.push(i);
                }
            }
            return Ok(SolveReport {
                design: WeightedDesign { entries },
                support_indices: idx,
                initial_support: initial,
                iterations: it + 1,
                min_sensitivity: min_s,
                argmin_index: argmin,
                epsilon,
                threshold,
                criterion_value: value,
                history,
            });
        }
        support.push(argmin);
        w.push(0.0);
        weights = Some(w);
    }
    Err(Error::Convergence {
        what: "adaptive discretization",
        detail: format!("{MAX_OUTER} refinements without an ε-certificate"),
    })
}
