//! Design criteria, the two-stage criterion and its sensitivity function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, RootFactor, SpdFactor, Spectrum};
use crate::model::{
    info_root, InfoMatrix, InputPoint, NoiseModel,
    ParametricModel, UnweightedDesign, WeightedDesign,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Criterion {
    /// `Ψ0(M) = −ln det M`
    #[default]
    D,
    /// `Ψ1(M) = tr M⁻¹`
    A,
}

impl Criterion {
    /// Criterion value, `+∞` for singular matrices.
    pub fn value(self, m: &DMatrix<f64>) -> f64 {
        match SpdFactor::new(m) {
            Some(f) => match self {
                Criterion::D => -f.log_det(),
                Criterion::A => f.inverse().trace(),
            },
            None => f64::INFINITY,
        }
    }

    /// Criterion value of `Z Zᵀ` from its factored root.
    pub fn value_factored(self, f: &RootFactor) -> f64 {
        match self {
            Criterion::D => -f.log_det(),
            Criterion::A => f.inverse().trace(),
        }
    }

    /// Unit of the sensitivity function at a design with criterion value
    /// `value`. D is invariant under parameter rescaling; the A-criterion
    /// carries the units of the parameter variances, so its sensitivity
    /// tolerances are taken relative to the criterion value.
    pub fn tolerance_scale(self, value: f64) -> f64 {
        match self {
            Criterion::D => 1.0,
            Criterion::A => value.abs(),
        }
    }

    /// `∇Ψ(M)`: `−M⁻¹` for D and `−M⁻²` for A. `None` when `M` is singular.
    pub fn gradient(self, m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let inv = SpdFactor::new(m)?.inverse();
        Some(match self {
            Criterion::D => -inv,
            Criterion::A => {
                let mut g = -(&inv * &inv);
                linalg::symmetrize(&mut g);
                g
            }
        })
    }
}

pub fn criterion_value(c: Criterion, m: &InfoMatrix) -> f64 {
    c.value(&m.matrix)
}

/// Prior design, its importance `α` and the reference parameter for the
/// two-stage problem `min_ξ Ψ(α M(ξ_x̃⁻) + (1−α) M(ξ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageContext {
    pub criterion: Criterion,
    pub alpha: f64,
    pub prior_design: UnweightedDesign,
    pub theta_ref: DVector<f64>,
    /// `M(ξ_x̃⁻, θ̄) = M(x̃⁻, θ̄) / n⁻`; zero for an empty prior.
    pub prior_info: DMatrix<f64>,
    /// `R` with `R Rᵀ = prior_info`.
    prior_root: DMatrix<f64>,
}

impl TwoStageContext {
    pub fn new<M: ParametricModel + ?Sized>(
        model: &M,
        noise: &NoiseModel,
        criterion: Criterion,
        alpha: f64,
        prior_design: UnweightedDesign,
        theta_ref: DVector<f64>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("importance factor {alpha} outside [0, 1)")));
        }
        if alpha > 0.0 && prior_design.is_empty() {
            return Err(Error::Config("a positive importance factor needs a prior design".into()));
        }
        let d = model.param_dim();
        let dy = model.output_dim();
        let n = prior_design.len();
        let mut prior_root = DMatrix::zeros(d, n * dy);
        for (i, x) in prior_design.points.iter().enumerate() {
            let jac = model.jacobian(x.coords(), &theta_ref).map_err(|e| Error::at(i, e))?;
            let b = info_root(&jac, noise) / (n as f64).sqrt();
            prior_root.columns_mut(i * dy, dy).copy_from(&b);
        }
        let mut prior_info = &prior_root * prior_root.transpose();
        linalg::symmetrize(&mut prior_info);
        Ok(TwoStageContext {
            criterion,
            alpha,
            prior_design,
            theta_ref,
            prior_info,
            prior_root,
        })
    }

    /// One-stage problem: `α = 0`, no prior.
    pub fn one_stage(criterion: Criterion, theta_ref: DVector<f64>) -> Self {
        let d = theta_ref.len();
        TwoStageContext {
            criterion,
            alpha: 0.0,
            prior_design: UnweightedDesign::default(),
            theta_ref,
            prior_info: DMatrix::zeros(d, d),
            prior_root: DMatrix::zeros(d, 0),
        }
    }

    pub fn with_criterion(&self, criterion: Criterion) -> Self {
        TwoStageContext {
            criterion,
            ..self.clone()
        }
    }

    /// `α M⁻ + (1−α) M`.
    pub fn combined(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.alpha == 0.0 {
            m.clone()
        } else {
            &self.prior_info * self.alpha + m * (1.0 - self.alpha)
        }
    }

    /// `Ψ^(α)` as a function of the new design's information matrix.
    pub fn value_of_info(&self, m: &DMatrix<f64>) -> f64 {
        self.criterion.value(&self.combined(m))
    }

    /// Square root of the combined matrix for `M(ξ) = Σ w_i B_i B_iᵀ`.
    pub fn combined_root<'a>(
        &self,
        roots: impl IntoIterator<Item = (f64, &'a DMatrix<f64>)>,
    ) -> DMatrix<f64> {
        let d = self.theta_ref.len();
        let mut cols: Vec<DMatrix<f64>> = Vec::new();
        if self.alpha > 0.0 {
            cols.push(&self.prior_root * self.alpha.sqrt());
        }
        for (w, b) in roots {
            if w > 0.0 {
                cols.push(b * ((1.0 - self.alpha) * w).sqrt());
            }
        }
        let total: usize = cols.iter().map(|c| c.ncols()).sum();
        let mut z = DMatrix::zeros(d, total);
        let mut at = 0;
        for c in cols {
            z.columns_mut(at, c.ncols()).copy_from(&c);
            at += c.ncols();
        }
        z
    }

    /// `Ψ^(α)` for `M(ξ) = Σ w_i B_i B_iᵀ`; `+∞` if the combined matrix is singular.
    pub fn value_mixture<'a>(&self, roots: impl IntoIterator<Item = (f64, &'a DMatrix<f64>)>) -> f64 {
        match RootFactor::new(&self.combined_root(roots)) {
            Some(f) => self.criterion.value_factored(&f),
            None => f64::INFINITY,
        }
    }

    /// Linearization of `Ψ^(α)` at `M(ξ)`, reusable across candidate points.
    pub fn sensitivity_at(&self, m_xi: &DMatrix<f64>) -> Result<Sensitivity> {
        let root = linalg::psd_root(m_xi);
        self.sensitivity_mixture([(1.0, &root)])
    }

    /// As [`sensitivity_at`](Self::sensitivity_at) for `M(ξ) = Σ w_i B_i B_iᵀ`
    /// given through the roots `B_i`, which keeps every quantity accurate
    /// when the combined matrix is badly conditioned.
    pub fn sensitivity_mixture<'a>(
        &self,
        roots: impl IntoIterator<Item = (f64, &'a DMatrix<f64>)> + Clone,
    ) -> Result<Sensitivity> {
        let z = self.combined_root(roots.clone());
        let factor = RootFactor::new(&z).ok_or_else(|| Error::Singular {
            what: "combined information matrix",
            null_space: Spectrum::of(&(&z * z.transpose())).null_space(),
        })?;
        let value = self.criterion.value_factored(&factor);
        let mut s = Sensitivity {
            factor,
            criterion: self.criterion,
            scale: 1.0 - self.alpha,
            offset: 0.0,
            value,
        };
        s.offset = roots
            .into_iter()
            .filter(|(w, _)| *w != 0.0)
            .map(|(w, b)| w * s.quad(b))
            .sum();
        Ok(s)
    }
}

/// `ψ(x) = (1−α) tr(∇Ψ(A) (m(x) − M(ξ)))`, the directional derivative of the
/// two-stage criterion towards the point mass at `x`.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    factor: RootFactor,
    criterion: Criterion,
    scale: f64,
    offset: f64,
    value: f64,
}

impl Sensitivity {
    /// `tr(∇Ψ(A) B Bᵀ)`.
    pub fn quad(&self, root: &DMatrix<f64>) -> f64 {
        match self.criterion {
            Criterion::D => -self.factor.inv_quad(root),
            Criterion::A => -self.factor.inv_sq_quad(root),
        }
    }

    /// Sensitivity towards a point with information `B Bᵀ`.
    pub fn at_root(&self, root: &DMatrix<f64>) -> f64 {
        self.scale * (self.quad(root) - self.offset)
    }

    /// Sensitivity towards a point with information matrix `m_x`.
    pub fn at(&self, m_x: &DMatrix<f64>) -> f64 {
        self.at_root(&linalg::psd_root(m_x))
    }

    /// Hessian of `w ↦ Ψ^(α)` with respect to the weights of the points
    /// with roots `roots`, at the design this sensitivity was computed for.
    pub fn weight_hessian(&self, roots: &[&DMatrix<f64>]) -> DMatrix<f64> {
        let k = roots.len();
        let c: Vec<DMatrix<f64>> = roots.iter().map(|b| self.factor.half_solve(b)).collect();
        let s2 = self.scale * self.scale;
        let mut h = DMatrix::zeros(k, k);
        match self.criterion {
            Criterion::D => {
                for i in 0..k {
                    for j in 0..=i {
                        let v = s2 * (c[i].transpose() * &c[j]).norm_squared();
                        h[(i, j)] = v;
                        h[(j, i)] = v;
                    }
                }
            }
            Criterion::A => {
                let e: Vec<DMatrix<f64>> = c.iter().map(|ci| self.factor.solve_half(ci)).collect();
                for i in 0..k {
                    for j in 0..=i {
                        let p = c[i].transpose() * &c[j];
                        let q = e[j].transpose() * &e[i];
                        let v = 2.0 * s2 * (p * q).trace();
                        h[(i, j)] = v;
                        h[(j, i)] = v;
                    }
                }
            }
        }
        h
    }

    /// Rounding level of [`at_root`](Self::at_root) for roots with
    /// `|quad| ≤ magnitude`, from the conditioning of the combined matrix.
    pub fn noise_floor(&self, magnitude: f64) -> f64 {
        f64::EPSILON * self.factor.condition() * magnitude * self.scale
    }

    /// `Ψ^(α)` at the design this sensitivity was computed for.
    pub fn value(&self) -> f64 {
        self.value
    }
}

/// `Ψ^(α)(ξ)` for a weighted design.
pub fn two_stage_value<M: ParametricModel + ?Sized>(
    ctx: &TwoStageContext,
    xi: &WeightedDesign,
    model: &M,
    noise: &NoiseModel,
) -> Result<f64> {
    let roots = xi
        .entries
        .iter()
        .map(|(w, p)| Ok((*w, info_root(&model.jacobian(p.coords(), &ctx.theta_ref)?, noise))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ctx.value_mixture(roots.iter().map(|(w, b)| (*w, b))))
}

/// Sensitivity of `Ψ^(α)` at `ξ` towards `x`.
pub fn sensitivity<M: ParametricModel + ?Sized>(
    ctx: &TwoStageContext,
    xi: &WeightedDesign,
    x: &InputPoint,
    model: &M,
    noise: &NoiseModel,
) -> Result<f64> {
    let root_at = |p: &InputPoint| -> Result<DMatrix<f64>> {
        Ok(info_root(&model.jacobian(p.coords(), &ctx.theta_ref)?, noise))
    };
    let roots = xi
        .entries
        .iter()
        .map(|(w, p)| Ok((*w, root_at(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let sens = ctx.sensitivity_mixture(roots.iter().map(|(w, b)| (*w, b)))?;
    Ok(sens.at_root(&root_at(x)?))
}
