//! Parametric models, measurement noise, experimental designs and their
//! information matrices.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A point of the input space. For the VLE case study the coordinates are
/// `(l, P)`: liquid mole fraction of component 1 and pressure in Pa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputPoint(pub Vec<f64>);

impl InputPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        InputPoint(coords.into())
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Lexicographic order on coordinates; used for deterministic tie-breaking.
    pub fn lex_cmp(&self, other: &InputPoint) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl From<Vec<f64>> for InputPoint {
    fn from(v: Vec<f64>) -> Self {
        InputPoint(v)
    }
}

/// Axis-aligned box of admissible parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        ParamBox { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, theta: &mut DVector<f64>) {
        for i in 0..theta.len() {
            theta[i] = theta[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta
            .iter()
            .enumerate()
            .all(|(i, t)| *t >= self.lower[i] && *t <= self.upper[i])
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }
}

/// A model `f: X × Θ → Y` with parameter Jacobian.
pub trait ParametricModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn predict(&self, x: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// `D_θ f(x, θ)`, a `output_dim × param_dim` matrix.
    fn jacobian(&self, x: &[f64], theta: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn predict_with_jacobian(
        &self,
        x: &[f64],
        theta: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.predict(x, theta)?, self.jacobian(x, theta)?))
    }

    /// Admissible parameter set, if the model has one.
    fn param_box(&self) -> Option<ParamBox> {
        None
    }
}

impl<M: ParametricModel + ?Sized> ParametricModel for &M {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn predict(&self, x: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).predict(x, theta)
    }
    fn jacobian(&self, x: &[f64], theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x, theta)
    }
    fn predict_with_jacobian(
        &self,
        x: &[f64],
        theta: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (**self).predict_with_jacobian(x, theta)
    }
    fn param_box(&self) -> Option<ParamBox> {
        (**self).param_box()
    }
}

/// Models that are affine in the parameters: `f(x, θ) = c(x) + J(x) θ`.
pub trait LinearModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn offset(&self, x: &[f64]) -> DVector<f64>;
    fn regressors(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Adapter exposing a [`LinearModel`] through [`ParametricModel`].
#[derive(Debug, Clone)]
pub struct Linear<L>(pub L);

impl<L: LinearModel> ParametricModel for Linear<L> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn predict(&self, x: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0.offset(x) + self.0.regressors(x) * theta)
    }
    fn jacobian(&self, x: &[f64], _theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.0.regressors(x))
    }
}

/// Scalar polynomial regression `θ_1 + θ_2 x + … + θ_{d+1} x^d`.
#[derive(Debug, Clone, Copy)]
pub struct Polynomial {
    pub degree: usize,
}

impl LinearModel for Polynomial {
    fn input_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        self.degree + 1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn offset(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn regressors(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(1, self.degree + 1, |_, j| x[0].powi(j as i32))
    }
}

/// Gaussian measurement noise with covariance `ς`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseRepr", into = "NoiseRepr")]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    whitener: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseRepr {
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<NoiseRepr> for NoiseModel {
    type Error = Error;
    fn try_from(r: NoiseRepr) -> Result<Self> {
        let n = r.covariance.len();
        if r.covariance.iter().any(|row| row.len() != n) {
            return Err(Error::Config("noise covariance must be square".into()));
        }
        NoiseModel::new(DMatrix::from_fn(n, n, |i, j| r.covariance[i][j]))
    }
}

impl From<NoiseModel> for NoiseRepr {
    fn from(n: NoiseModel) -> Self {
        let c = &n.covariance;
        NoiseRepr {
            covariance: (0..c.nrows())
                .map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect())
                .collect(),
        }
    }
}

impl NoiseModel {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        let factor = linalg::SpdFactor::new(&covariance)
            .ok_or_else(|| Error::Config("noise covariance must be positive definite".into()))?;
        let precision = factor.inverse();
        let whitener = nalgebra::Cholesky::new(precision.clone())
            .ok_or_else(|| Error::Config("noise covariance must be positive definite".into()))?
            .l()
            .transpose();
        Ok(NoiseModel {
            precision,
            whitener,
            covariance,
        })
    }

    /// Independent outputs with the given standard deviations.
    pub fn from_std_devs(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        let var: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
        Self::new(DMatrix::from_diagonal(&DVector::from_vec(var)))
    }

    /// Unit covariance of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        NoiseModel {
            covariance: DMatrix::identity(dim, dim),
            precision: DMatrix::identity(dim, dim),
            whitener: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `ς⁻¹`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Upper triangular `U` with `Uᵀ U = ς⁻¹`.
    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.covariance[(i, i)].sqrt()).collect()
    }

    /// Lower Cholesky factor of `ς`, for sampling.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        nalgebra::Cholesky::new(self.covariance.clone())
            .expect("covariance validated at construction")
            .l()
    }
}

/// An ordered tuple of experiments; duplicates are replications.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnweightedDesign {
    pub points: Vec<InputPoint>,
}

impl UnweightedDesign {
    pub fn new(points: Vec<InputPoint>) -> Self {
        UnweightedDesign { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenation `self & other`.
    pub fn concat(&self, other: &UnweightedDesign) -> UnweightedDesign {
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        UnweightedDesign { points }
    }

    /// Number of distinct experimental points.
    pub fn distinct_count(&self) -> usize {
        self.to_weighted().map(|w| w.entries.len()).unwrap_or(0)
    }

    /// The weighted design with weights `r_x / n`.
    pub fn to_weighted(&self) -> Result<WeightedDesign> {
        if self.points.is_empty() {
            return Err(Error::Config("empty design has no weighted form".into()));
        }
        let n = self.points.len() as f64;
        let mut entries: Vec<(f64, InputPoint)> = Vec::new();
        for p in &self.points {
            match entries.iter_mut().find(|(_, q)| q == p) {
                Some((w, _)) => *w += 1.0,
                None => entries.push((1.0, p.clone())),
            }
        }
        entries.iter_mut().for_each(|(w, _)| *w /= n);
        WeightedDesign::new(entries)
    }
}

/// Probability weights on finitely many input points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDesign {
    pub entries: Vec<(f64, InputPoint)>,
}

impl WeightedDesign {
    pub const WEIGHT_SUM_TOL: f64 = 1e-12;

    pub fn new(entries: Vec<(f64, InputPoint)>) -> Result<Self> {
        if entries.iter().any(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("design weights must be nonnegative".into()));
        }
        let total: f64 = entries.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > Self::WEIGHT_SUM_TOL * entries.len().max(1) as f64 {
            return Err(Error::Config(format!(
                "design weights sum to {total}, expected 1"
            )));
        }
        Ok(WeightedDesign { entries })
    }

    /// Entries with strictly positive weight.
    pub fn support(&self) -> impl Iterator<Item = &(f64, InputPoint)> {
        self.entries.iter().filter(|(w, _)| *w > 0.0)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|(w, _)| *w).collect()
    }
}

/// A symmetric PSD information matrix together with its reference parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    pub theta_ref: DVector<f64>,
}

impl InfoMatrix {
    pub fn zeros(theta_ref: &DVector<f64>) -> Self {
        let d = theta_ref.len();
        InfoMatrix {
            matrix: DMatrix::zeros(d, d),
            theta_ref: theta_ref.clone(),
        }
    }

    pub fn is_valid(&self) -> bool {
        linalg::is_psd(&self.matrix)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        InfoMatrix {
            matrix: &self.matrix * factor,
            theta_ref: self.theta_ref.clone(),
        }
    }
}

/// `Jᵀ ς⁻¹ J` for a single Jacobian.
pub fn info_from_jacobian(jac: &DMatrix<f64>, noise: &NoiseModel) -> DMatrix<f64> {
    let mut m = jac.transpose() * noise.precision() * jac;
    linalg::symmetrize(&mut m);
    m
}

/// `B = (U J)ᵀ` with `B Bᵀ = Jᵀ ς⁻¹ J`; a square root of the one-point
/// information matrix.
pub fn info_root(jac: &DMatrix<f64>, noise: &NoiseModel) -> DMatrix<f64> {
    (noise.whitener() * jac).transpose()
}

/// One-point information matrix `m_f(x, θ̄) = D_θf(x,θ̄)ᵀ ς⁻¹ D_θf(x,θ̄)`.
pub fn one_point_info<M: ParametricModel + ?Sized>(
    model: &M,
    x: &InputPoint,
    theta_ref: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<InfoMatrix> {
    let jac = model.jacobian(x.coords(), theta_ref)?;
    Ok(InfoMatrix {
        matrix: info_from_jacobian(&jac, noise),
        theta_ref: theta_ref.clone(),
    })
}

/// Sum of one-point information matrices over an unweighted design.
pub fn design_info<M: ParametricModel + ?Sized>(
    model: &M,
    design: &UnweightedDesign,
    theta_ref: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<InfoMatrix> {
    let parts: Vec<DMatrix<f64>> = design
        .points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            one_point_info(model, x, theta_ref, noise)
                .map(|m| m.matrix)
                .map_err(|e| Error::at(i, e))
        })
        .collect::<Result<_>>()?;
    let mut total = InfoMatrix::zeros(theta_ref);
    for p in parts {
        total.matrix += p;
    }
    Ok(total)
}

/// Weighted sum of one-point information matrices.
pub fn weighted_design_info<M: ParametricModel + ?Sized>(
    model: &M,
    design: &WeightedDesign,
    theta_ref: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<InfoMatrix> {
    let mut total = InfoMatrix::zeros(theta_ref);
    for (i, (w, x)) in design.entries.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let m = one_point_info(model, x, theta_ref, noise).map_err(|e| Error::at(i, e))?;
        total.matrix += m.matrix * *w;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Linear<Polynomial> {
        Linear(Polynomial { degree: 1 })
    }

    #[test]
    fn line_one_point_info() {
        let theta = DVector::from_vec(vec![0.3, -1.0]);
        let m = one_point_info(&line(), &InputPoint::new(vec![0.7]), &theta, &NoiseModel::identity(1))
            .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 0.49]);
        assert!((m.matrix - expected).abs().max() < 1e-15);
    }

    #[test]
    fn duplicated_point_doubles_information() {
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        let noise = NoiseModel::identity(1);
        let x = InputPoint::new(vec![0.4]);
        let single = one_point_info(&line(), &x, &theta, &noise).unwrap();
        let double =
            design_info(&line(), &UnweightedDesign::new(vec![x.clone(), x]), &theta, &noise).unwrap();
        assert_eq!(double.matrix, single.matrix * 2.0);
    }

    #[test]
    fn weighted_point_mass_is_one_point_info() {
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        let noise = NoiseModel::identity(1);
        let x = InputPoint::new(vec![-0.25]);
        let xi = WeightedDesign::new(vec![(1.0, x.clone()), (0.0, InputPoint::new(vec![1.0]))]).unwrap();
        let a = weighted_design_info(&line(), &xi, &theta, &noise).unwrap();
        let b = one_point_info(&line(), &x, &theta, &noise).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn weighted_form_of_unweighted_design() {
        let d = UnweightedDesign::new(vec![
            InputPoint::new(vec![1.0]),
            InputPoint::new(vec![2.0]),
            InputPoint::new(vec![1.0]),
            InputPoint::new(vec![3.0]),
        ]);
        let w = d.to_weighted().unwrap();
        assert_eq!(w.entries.len(), 3);
        assert_eq!(w.entries[0].0, 0.5);
        assert_eq!(d.distinct_count(), 3);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let x = InputPoint::new(vec![0.0]);
        assert!(WeightedDesign::new(vec![(0.5, x.clone()), (0.4, x.clone())]).is_err());
        assert!(WeightedDesign::new(vec![(1.5, x.clone()), (-0.5, x)]).is_err());
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::from_std_devs(&[0.0015, 0.03]).is_ok());
        assert!(NoiseModel::from_std_devs(&[0.0, 1.0]).is_err());
        let n = NoiseModel::from_std_devs(&[0.0015, 0.03]).unwrap();
        assert!((n.covariance()[(0, 0)] - 2.25e-6).abs() < 1e-20);
        assert!((n.covariance()[(1, 1)] - 9e-4).abs() < 1e-18);
        let json = serde_json::to_string(&n).unwrap();
        let back: NoiseModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.std_devs(), n.std_devs());
    }
}
