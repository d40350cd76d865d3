//! Prediction-quality metrics: root mean squared errors and
//! linearization- or sampling-based prediction uncertainties together with
//! their worst cases over an evaluation grid.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{wls_estimate, Dataset, EstimationConfig, Record};
use crate::linalg::RootFactor;
use crate::model::{info_root, InputPoint, NoiseModel, ParametricModel, UnweightedDesign};

/// Component-wise root mean squared prediction error on `reference`.
pub fn rmse<M: ParametricModel + ?Sized>(model: &M, theta: &DVector<f64>, reference: &Dataset) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::Estimation("reference dataset is empty".into()));
    }
    let mut sum = vec![0.0; model.output_dim()];
    for (i, rec) in reference.records.iter().enumerate() {
        let f = model.predict(rec.x.coords(), theta).map_err(|e| Error::at(i, e))?;
        for (s, (fj, yj)) in sum.iter_mut().zip(f.iter().zip(&rec.y)) {
            *s += (fj - yj).powi(2);
        }
    }
    let n = reference.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Scaling of the information matrix inside the linearized variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNormalization {
    /// `M(x̃)/n`, the information per experiment. Reproduces the reference
    /// worst-case tables.
    #[default]
    PerExperiment,
    /// `M(x̃)`, the covariance of the estimator itself.
    Total,
}

/// Precomputed factor of the design's information for repeated
/// `∇f_jᵀ M⁻¹ ∇f_j` evaluations.
pub struct LinPredictor<'m, M: ?Sized> {
    model: &'m M,
    theta: DVector<f64>,
    factor: RootFactor,
}

impl<'m, M: ParametricModel + ?Sized> LinPredictor<'m, M> {
    pub fn new(
        model: &'m M,
        design: &UnweightedDesign,
        theta: &DVector<f64>,
        noise: &NoiseModel,
        normalization: InfoNormalization,
    ) -> Result<Self> {
        if design.is_empty() {
            return Err(Error::Config("design is empty".into()));
        }
        let roots = design
            .points
            .par_iter()
            .enumerate()
            .map(|(i, x)| Ok(info_root(&model.jacobian(x.coords(), theta).map_err(|e| Error::at(i, e))?, noise)))
            .collect::<Result<Vec<_>>>()?;
        let scale = match normalization {
            InfoNormalization::PerExperiment => 1.0 / (design.len() as f64).sqrt(),
            InfoNormalization::Total => 1.0,
        };
        let d = theta.len();
        let dy = noise.dim();
        let mut z = DMatrix::zeros(d, dy * roots.len());
        for (i, b) in roots.iter().enumerate() {
            z.columns_mut(i * dy, dy).copy_from(&(b * scale));
        }
        let factor = RootFactor::new(&z).ok_or_else(|| Error::Singular {
            what: "information matrix of the design",
            null_space: crate::linalg::Spectrum::of(&(&z * z.transpose())).null_space(),
        })?;
        Ok(LinPredictor {
            model,
            theta: theta.clone(),
            factor,
        })
    }

    /// `σ_j^lin(x)` for every output `j`.
    pub fn sigma(&self, x: &InputPoint) -> Result<Vec<f64>> {
        let jac = self.model.jacobian(x.coords(), &self.theta)?;
        Ok((0..jac.nrows())
            .map(|j| {
                let g = jac.row(j).transpose();
                self.factor.inv_quad(&DMatrix::from_column_slice(g.len(), 1, g.as_slice())).sqrt()
            })
            .collect())
    }
}

/// `σ_j^lin(x, x̃) = (∇f_jᵀ M⁻¹ ∇f_j)^½` at `θ̄`.
pub fn lin_prediction_sigma<M: ParametricModel + ?Sized>(
    model: &M,
    x: &InputPoint,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    normalization: InfoNormalization,
) -> Result<Vec<f64>> {
    LinPredictor::new(model, design, theta, noise, normalization)?.sigma(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_sam: usize,
    pub seed: u64,
    /// Random starts per refit, on top of the warm start at `θ̄`. Extra
    /// starts let refits of noisy samples escape into remote minima of the
    /// sum of squares, which dominates the spread; local refits are the
    /// default.
    pub n_starts: usize,
    /// Redraws allowed per sample when a refit fails.
    pub max_retries: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_sam: 1000,
            seed: 0,
            n_starts: 0,
            max_retries: 10,
        }
    }
}

/// Refits of the model to `n_sam` synthetic datasets `f(x̃, θ̄) + ε`.
/// Sample `s` draws from its own stream, so the result does not depend on
/// scheduling.
pub fn sample_estimates<M: ParametricModel + ?Sized>(
    model: &M,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    cfg: &SamplingConfig,
) -> Result<Vec<DVector<f64>>> {
    if cfg.n_sam < 2 {
        return Err(Error::Config("n_sam must be at least 2".into()));
    }
    let clean = Dataset::synthetic(model, design, theta)?;
    let chol = noise.cholesky_factor();
    let attempts = cfg.max_retries + 1;
    (0..cfg.n_sam)
        .into_par_iter()
        .map(|s| {
            let mut last = None;
            for attempt in 0..attempts {
                let stream = (s * attempts + attempt) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                let records = clean
                    .records
                    .iter()
                    .map(|r| {
                        let z = DVector::from_fn(r.y.len(), |_, _| StandardNormal.sample(&mut rng));
                        let y = DVector::from_row_slice(&r.y) + &chol * z;
                        Record {
                            x: r.x.clone(),
                            planned: None,
                            y: y.iter().cloned().collect(),
                        }
                    })
                    .collect();
                let data = Dataset { records };
                let est = EstimationConfig {
                    n_starts: cfg.n_starts,
                    seed: cfg.seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15),
                    warm_start: Some(theta.iter().cloned().collect()),
                    ..EstimationConfig::default()
                };
                match wls_estimate(model, &data, noise, &est) {
                    Ok(r) => return Ok(r.theta_vector()),
                    Err(e) => last = Some(e),
                }
            }
            Err(Error::Estimation(format!(
                "sample {s}: all {attempts} refits failed; last error: {}",
                last.map(|e| e.to_string()).unwrap_or_default()
            )))
        })
        .collect()
}

/// Population standard deviation of the predictions at `x` over the
/// sampled estimates.
pub fn sample_sigma<M: ParametricModel + ?Sized>(
    model: &M,
    x: &InputPoint,
    estimates: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let preds = estimates
        .iter()
        .map(|t| model.predict(x.coords(), t))
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let dy = model.output_dim();
    Ok((0..dy)
        .map(|j| {
            let mean = preds.iter().map(|p| p[j]).sum::<f64>() / n;
            (preds.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect())
}

/// `σ_j^sam(x, x̃)` with `cfg.n_sam` refits.
pub fn sam_prediction_sigma<M: ParametricModel + ?Sized>(
    model: &M,
    x: &InputPoint,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    cfg: &SamplingConfig,
) -> Result<Vec<f64>> {
    sample_sigma(model, x, &sample_estimates(model, design, theta, noise, cfg)?)
}

/// Tensor grid of 2-D inputs; curves run along the first coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl EvalGrid {
    pub fn new(first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        if first.is_empty() || second.is_empty() {
            return Err(Error::Config("evaluation grid is empty".into()));
        }
        Ok(EvalGrid { first, second })
    }

    pub fn linspace(lo: (f64, f64), hi: (f64, f64), n: (usize, usize)) -> Result<Self> {
        let ls = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![a];
            }
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        };
        Self::new(ls(lo.0, hi.0, n.0), ls(lo.1, hi.1, n.1))
    }

    /// 201 compositions × 21 pressures over `[0,1] × [1e5, 3e5]`.
    pub fn standard() -> Self {
        Self::linspace((0.0, 1e5), (1.0, 3e5), (201, 21)).expect("nonempty")
    }

    pub fn len(&self) -> usize {
        self.first.len() * self.second.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    Lin,
    Sam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub l: f64,
    /// Max over the second coordinate, per output.
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub kind: SigmaKind,
    /// Max over the grid, per output.
    pub sigma: Vec<f64>,
    /// Where each maximum is attained.
    pub argmax: Vec<InputPoint>,
    pub curves: Vec<CurvePoint>,
}

fn worst_case_from(kind: SigmaKind, grid: &EvalGrid, eval: impl Fn(&InputPoint) -> Result<Vec<f64>> + Sync) -> Result<WorstCase> {
    let curves_full: Vec<Vec<(Vec<f64>, InputPoint)>> = grid
        .first
        .par_iter()
        .map(|&a| {
            grid.second
                .iter()
                .map(|&b| {
                    let x = InputPoint::new(vec![a, b]);
                    Ok((eval(&x)?, x))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let dy = curves_full[0][0].0.len();
    let mut sigma = vec![f64::NEG_INFINITY; dy];
    let mut argmax = vec![curves_full[0][0].1.clone(); dy];
    let mut curves = Vec::with_capacity(grid.first.len());
    for (row, &l) in curves_full.iter().zip(&grid.first) {
        let mut c = vec![f64::NEG_INFINITY; dy];
        for (s, x) in row {
            for j in 0..dy {
                c[j] = c[j].max(s[j]);
                if s[j] > sigma[j] {
                    sigma[j] = s[j];
                    argmax[j] = x.clone();
                }
            }
        }
        curves.push(CurvePoint { l, sigma: c });
    }
    Ok(WorstCase {
        kind,
        sigma,
        argmax,
        curves,
    })
}

/// Worst-case linearized prediction uncertainty over `grid`.
pub fn worst_case_lin<M: ParametricModel + ?Sized>(
    model: &M,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    grid: &EvalGrid,
    normalization: InfoNormalization,
) -> Result<WorstCase> {
    let p = LinPredictor::new(model, design, theta, noise, normalization)?;
    worst_case_from(SigmaKind::Lin, grid, |x| p.sigma(x))
}

/// Worst-case sampling-based prediction uncertainty over `grid`.
pub fn worst_case_sam<M: ParametricModel + ?Sized>(
    model: &M,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    grid: &EvalGrid,
    cfg: &SamplingConfig,
) -> Result<WorstCase> {
    let est = sample_estimates(model, design, theta, noise, cfg)?;
    worst_case_from(SigmaKind::Sam, grid, |x| sample_sigma(model, x, &est))
}

/// Either worst case, dispatching on `kind`.
pub fn worst_case_sigma<M: ParametricModel + ?Sized>(
    kind: SigmaKind,
    model: &M,
    design: &UnweightedDesign,
    theta: &DVector<f64>,
    noise: &NoiseModel,
    grid: &EvalGrid,
    sampling: &SamplingConfig,
) -> Result<WorstCase> {
    match kind {
        SigmaKind::Lin => worst_case_lin(model, design, theta, noise, grid, InfoNormalization::PerExperiment),
        SigmaKind::Sam => worst_case_sam(model, design, theta, noise, grid, sampling),
    }
}

/// Curve table with header `l,sigma_<name>...`.
pub fn curves_csv(curves: &[CurvePoint], output_names: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["l".to_string()];
    header.extend(output_names.iter().map(|n| format!("sigma_{n}")));
    w.write_record(&header)?;
    for c in curves {
        if c.sigma.len() != output_names.len() {
            return Err(Error::Config("output name count does not match the curves".into()));
        }
        let mut row = vec![c.l.to_string()];
        row.extend(c.sigma.iter().map(|s| s.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Every metric for one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMetrics {
    pub label: String,
    pub size: usize,
    /// Parameters fitted to the design's own data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<Vec<f64>>,
    /// Errors of that fit on the reference data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<Vec<f64>>,
    pub lin: WorstCase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam: Option<WorstCase>,
}
