//! Weighted least-squares estimation: closed form for linear models and a
//! box-constrained multistart Levenberg-Marquardt solver for nonlinear ones.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor, Spectrum};
use crate::model::{
    design_info, InputPoint, LinearModel, NoiseModel, ParamBox, ParametricModel, UnweightedDesign,
};

/// One observation: the input actually realized, optionally the input that
/// was planned, and the measured output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: InputPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planned: Option<InputPoint>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Estimation("dataset is empty".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.y.iter().chain(r.x.coords()).any(|v| !v.is_finite()) {
                return Err(Error::Estimation(format!("record {i} has a non-finite value")));
            }
        }
        Ok(Dataset { records })
    }

    /// Noise-free data `y_i = f(x_i, θ)`.
    pub fn synthetic<M: ParametricModel + ?Sized>(
        model: &M,
        design: &UnweightedDesign,
        theta: &DVector<f64>,
    ) -> Result<Self> {
        let records = design
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = model.predict(x.coords(), theta).map_err(|e| Error::at(i, e))?;
                Ok(Record {
                    x: x.clone(),
                    planned: None,
                    y: y.iter().cloned().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The realized inputs as an unweighted design.
    pub fn design(&self) -> UnweightedDesign {
        UnweightedDesign::new(self.records.iter().map(|r| r.x.clone()).collect())
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Dataset { records }
    }
}

fn whitener(noise: &NoiseModel) -> DMatrix<f64> {
    noise.whitener().clone()
}

/// Stacked whitened residuals `U (f(x_i, θ) − y_i)`.
fn whitened_residuals<M: ParametricModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    u: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let dy = u.nrows();
    let mut r = DVector::zeros(data.len() * dy);
    for (i, rec) in data.records.iter().enumerate() {
        let f = model.predict(rec.x.coords(), theta).map_err(|e| Error::at(i, e))?;
        let res = u * (f - DVector::from_row_slice(&rec.y));
        r.rows_mut(i * dy, dy).copy_from(&res);
    }
    Ok(r)
}

fn whitened_system<M: ParametricModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    u: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dy = u.nrows();
    let n = data.len() * dy;
    let mut r = DVector::zeros(n);
    let mut j = DMatrix::zeros(n, theta.len());
    for (i, rec) in data.records.iter().enumerate() {
        let (f, jac) = model
            .predict_with_jacobian(rec.x.coords(), theta)
            .map_err(|e| Error::at(i, e))?;
        r.rows_mut(i * dy, dy)
            .copy_from(&(u * (f - DVector::from_row_slice(&rec.y))));
        j.rows_mut(i * dy, dy).copy_from(&(u * jac));
    }
    Ok((r, j))
}

/// `Σ_i (f(x_i,θ) − y_i)ᵀ ς⁻¹ (f(x_i,θ) − y_i)`.
pub fn weighted_sse<M: ParametricModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    noise: &NoiseModel,
) -> Result<f64> {
    Ok(whitened_residuals(model, theta, data, &whitener(noise))?.norm_squared())
}

/// `∇_θ SSE = 2 Σ_i D_θf(x_i,θ)ᵀ ς⁻¹ (f(x_i,θ) − y_i)`.
pub fn sse_gradient<M: ParametricModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    noise: &NoiseModel,
) -> Result<DVector<f64>> {
    let (r, j) = whitened_system(model, theta, data, &whitener(noise))?;
    Ok(j.transpose() * r * 2.0)
}

/// Result of the closed-form linear estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimate {
    pub theta: DVector<f64>,
    /// Set when the normal matrix is singular and the minimal-norm solution
    /// was returned instead of the unique minimizer.
    pub minimal_norm: bool,
}

/// Exact weighted least-squares estimate for `f(x,θ) = c(x) + J(x)θ`.
pub fn linear_lse<L: LinearModel + ?Sized>(
    model: &L,
    data: &Dataset,
    noise: &NoiseModel,
) -> Result<LinearEstimate> {
    let u = whitener(noise);
    let dy = u.nrows();
    let d = model.param_dim();
    let mut a = DMatrix::zeros(data.len() * dy, d);
    let mut b = DVector::zeros(data.len() * dy);
    for (i, rec) in data.records.iter().enumerate() {
        let x = rec.x.coords();
        a.rows_mut(i * dy, dy).copy_from(&(&u * model.regressors(x)));
        b.rows_mut(i * dy, dy)
            .copy_from(&(&u * (DVector::from_row_slice(&rec.y) - model.offset(x))));
    }
    let normal = a.transpose() * &a;
    if let Some(f) = SpdFactor::new(&normal) {
        let rhs = a.transpose() * &b;
        let theta = f.solve(&DMatrix::from_column_slice(d, 1, rhs.as_slice())).column(0).into_owned();
        return Ok(LinearEstimate {
            theta,
            minimal_norm: false,
        });
    }
    let svd = a.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    let theta = svd
        .solve(&b, eps)
        .map_err(|e| Error::Estimation(format!("pseudoinverse failed: {e}")))?;
    Ok(LinearEstimate {
        theta,
        minimal_norm: true,
    })
}

/// One undamped Gauss-Newton update `θ − (JᵀΣ⁻¹J)⁻¹ JᵀΣ⁻¹ r`.
pub fn gauss_newton_step<M: ParametricModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    noise: &NoiseModel,
) -> Result<DVector<f64>> {
    let (r, j) = whitened_system(model, theta, data, &whitener(noise))?;
    let normal = j.transpose() * &j;
    let f = SpdFactor::new(&normal).ok_or_else(|| Error::Singular {
        what: "Gauss-Newton normal matrix",
        null_space: Spectrum::of(&normal).null_space(),
    })?;
    let g = j.transpose() * r;
    let step = f.solve(&DMatrix::from_column_slice(g.len(), 1, g.as_slice()));
    Ok(theta - step.column(0))
}

/// Upper bound on candidate draws per requested start.
const MAX_DRAW_FACTOR: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_starts: usize,
    pub seed: u64,
    /// Previous estimate, tried first when present.
    #[serde(default)]
    pub warm_start: Option<Vec<f64>>,
    /// Falls back to the model's own box when absent.
    #[serde(default)]
    pub param_box: Option<ParamBox>,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Starts whose SSE exceeds this multiple of the best start seen so far
    /// are skipped.
    pub filter_factor: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            n_starts: 32,
            seed: 0,
            warm_start: None,
            param_box: None,
            max_iter: 500,
            grad_tol: 1e-8,
            step_tol: 1e-12,
            filter_factor: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta: Vec<f64>,
    pub sse: f64,
    pub converged: bool,
    pub start_index: usize,
    pub iterations: usize,
    pub starts_solved: usize,
    pub starts_converged: usize,
}

impl EstimateResult {
    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.theta)
    }
}

#[derive(Debug, Clone)]
struct LocalFit {
    theta: DVector<f64>,
    sse: f64,
    converged: bool,
    iterations: usize,
}

struct Problem<'a, M: ?Sized> {
    model: &'a M,
    data: &'a Dataset,
    u: DMatrix<f64>,
    bounds: Option<ParamBox>,
    scale: DVector<f64>,
    cfg: &'a EstimationConfig,
}

impl<M: ParametricModel + ?Sized> Problem<'_, M> {
    fn sse(&self, theta: &DVector<f64>) -> Option<f64> {
        whitened_residuals(self.model, theta, self.data, &self.u)
            .ok()
            .map(|r| r.norm_squared())
            .filter(|s| s.is_finite())
    }

    fn project(&self, theta: &mut DVector<f64>) {
        if let Some(b) = &self.bounds {
            b.project(theta);
        }
    }

    /// Variables sitting on a bound with the gradient pushing outward.
    fn active(&self, theta: &DVector<f64>, grad: &DVector<f64>) -> Vec<bool> {
        (0..theta.len())
            .map(|i| match &self.bounds {
                Some(b) => {
                    (theta[i] <= b.lower[i] && grad[i] > 0.0)
                        || (theta[i] >= b.upper[i] && grad[i] < 0.0)
                }
                None => false,
            })
            .collect()
    }

    fn local_fit(&self, start: DVector<f64>) -> Option<LocalFit> {
        let d = start.len();
        let mut theta = start;
        self.project(&mut theta);
        let (mut r, mut j) = whitened_system(self.model, &theta, self.data, &self.u).ok()?;
        let mut sse = r.norm_squared();
        if !sse.is_finite() {
            return None;
        }
        let mut lambda = 1e-3;
        for it in 0..self.cfg.max_iter {
            let grad = j.transpose() * &r * 2.0;
            let active = self.active(&theta, &grad);
            let scaled_grad = (0..d)
                .filter(|&i| !active[i])
                .map(|i| (grad[i] * self.scale[i]).abs())
                .fold(0.0, f64::max)
                / sse.max(1.0);
            if scaled_grad < self.cfg.grad_tol {
                return Some(LocalFit { theta, sse, converged: true, iterations: it });
            }
            let free: Vec<usize> = (0..d).filter(|&i| !active[i]).collect();
            let jf = j.select_columns(&free);
            let jtj = jf.transpose() * &jf;
            let jtr = jf.transpose() * &r;
            let diag_floor = jtj.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;
            let mut accepted = false;
            while lambda < 1e16 {
                let mut a = jtj.clone();
                for k in 0..free.len() {
                    a[(k, k)] += lambda * jtj[(k, k)].max(diag_floor);
                }
                let Some(f) = SpdFactor::new(&a) else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = f.solve(&DMatrix::from_column_slice(free.len(), 1, jtr.as_slice()));
                let mut trial = theta.clone();
                for (k, &i) in free.iter().enumerate() {
                    trial[i] -= delta[(k, 0)];
                }
                self.project(&mut trial);
                let step = (0..d)
                    .map(|i| ((trial[i] - theta[i]) / self.scale[i]).abs())
                    .fold(0.0, f64::max);
                if step < self.cfg.step_tol {
                    return Some(LocalFit { theta, sse, converged: true, iterations: it });
                }
                match whitened_system(self.model, &trial, self.data, &self.u) {
                    Ok((r_new, j_new)) if r_new.norm_squared() < sse => {
                        theta = trial;
                        sse = r_new.norm_squared();
                        r = r_new;
                        j = j_new;
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !accepted {
                // No damping level yields a decrease: the iterate is stationary
                // up to rounding.
                return Some(LocalFit { theta, sse, converged: true, iterations: it });
            }
        }
        Some(LocalFit { theta, sse, converged: false, iterations: self.cfg.max_iter })
    }
}

/// Multistart weighted least-squares estimate.
pub fn wls_estimate<M: ParametricModel + ?Sized>(
    model: &M,
    data: &Dataset,
    noise: &NoiseModel,
    cfg: &EstimationConfig,
) -> Result<EstimateResult> {
    if data.is_empty() {
        return Err(Error::Estimation("dataset is empty".into()));
    }
    let d = model.param_dim();
    let bounds = cfg.param_box.clone().or_else(|| model.param_box());
    if let Some(b) = &bounds {
        if b.dim() != d {
            return Err(Error::Config("parameter box dimension mismatch".into()));
        }
    }
    let scale = match &bounds {
        Some(b) => DVector::from_vec(b.widths()),
        None => DVector::from_element(d, 1.0),
    };
    let problem = Problem {
        model,
        data,
        u: whitener(noise),
        bounds: bounds.clone(),
        scale,
        cfg,
    };

    // Random candidates are screened in rounds: a candidate is accepted when
    // the model can be evaluated there and its SSE is within `filter_factor`
    // of the best random candidate seen so far. Rejected candidates are
    // redrawn, up to `MAX_DRAW_FACTOR * n_starts` draws in total. An
    // evaluable warm start is always kept, on top of the random starts.
    let mut starts: Vec<DVector<f64>> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    let mut best = f64::INFINITY;
    let mut screen = |batch: Vec<DVector<f64>>, starts: &mut Vec<DVector<f64>>, accepted: &mut Vec<usize>, quota: usize| {
        let sse: Vec<Option<f64>> = batch
            .par_iter()
            .map(|s| {
                let mut s = s.clone();
                problem.project(&mut s);
                problem.sse(&s)
            })
            .collect();
        for (s, v) in batch.into_iter().zip(sse) {
            if accepted.len() >= quota {
                break;
            }
            starts.push(s);
            let Some(v) = v else { continue };
            best = best.min(v);
            if v <= cfg.filter_factor * best {
                accepted.push(starts.len() - 1);
            }
        }
    };
    if let Some(w) = &cfg.warm_start {
        if w.len() != d {
            return Err(Error::Config("warm start dimension mismatch".into()));
        }
        let mut s = DVector::from_row_slice(w);
        problem.project(&mut s);
        if problem.sse(&s).is_some() {
            accepted.push(0);
        }
        starts.push(s);
    }
    // without an evaluable warm start at least one random start is needed
    let quota = if accepted.is_empty() { cfg.n_starts.max(1) } else { 1 + cfg.n_starts };
    match &bounds {
        Some(b) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let max_draws = MAX_DRAW_FACTOR * cfg.n_starts.max(1);
            let starts_offset = starts.len();
            while accepted.len() < quota && starts.len() < max_draws + starts_offset {
                let want = (quota - accepted.len()).max(8);
                let batch = (0..want)
                    .map(|_| DVector::from_fn(d, |i, _| rng.random_range(b.lower[i]..=b.upper[i])))
                    .collect();
                screen(batch, &mut starts, &mut accepted, quota);
            }
        }
        None if starts.is_empty() => screen(vec![DVector::zeros(d)], &mut starts, &mut accepted, quota),
        None => {}
    }

    let fits: Vec<(usize, Option<LocalFit>)> = accepted
        .par_iter()
        .map(|&i| (i, problem.local_fit(starts[i].clone())))
        .collect();
    let solved = fits.iter().filter(|(_, f)| f.is_some()).count();
    let converged: Vec<(usize, LocalFit)> = fits
        .into_iter()
        .filter_map(|(i, f)| f.filter(|f| f.converged).map(|f| (i, f)))
        .collect();
    let n_conv = converged.len();
    let (idx, fit) = converged
        .into_iter()
        .min_by(|a, b| a.1.sse.total_cmp(&b.1.sse).then(a.0.cmp(&b.0)))
        .ok_or_else(|| {
            Error::Estimation(format!(
                "none of {} starts converged ({} evaluable, {} locally solved)",
                starts.len(),
                accepted.len(),
                solved
            ))
        })?;
    Ok(EstimateResult {
        theta: fit.theta.iter().cloned().collect(),
        sse: fit.sse,
        converged: fit.converged,
        start_index: idx,
        iterations: fit.iterations,
        starts_solved: solved,
        starts_converged: n_conv,
    })
}

/// `M(x̃, θ̄)⁻¹`, the linearized covariance of the estimator.
pub fn covariance_estimate<M: ParametricModel + ?Sized>(
    model: &M,
    design: &UnweightedDesign,
    theta_ref: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<DMatrix<f64>> {
    let info = design_info(model, design, theta_ref, noise)?;
    covariance_from_info(&info.matrix)
}

pub fn covariance_from_info(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = SpdFactor::new(info).ok_or_else(|| Error::Singular {
        what: "information matrix",
        null_space: Spectrum::of(info).null_space(),
    })?;
    let mut cov = f.inverse();
    linalg::symmetrize(&mut cov);
    Ok(cov)
}
