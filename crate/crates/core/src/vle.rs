//! Binary vapor-liquid equilibrium: Antoine vapor pressures, NRTL activity
//! coefficients and the implicit bubble-point model `(l, P, θ) ↦ (v, T)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::model::{ParamBox, ParametricModel};

const LN_10: f64 = std::f64::consts::LN_10;

/// Temperature window (K) every solve is confined to.
pub const T_WINDOW: (f64, f64) = (300.0, 450.0);

/// Pressure range (Pa) of the case-study design space.
pub const P_RANGE: (f64, f64) = (1e5, 3e5);

const BRACKET_MARGIN: f64 = 20.0;
const RESIDUAL_TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Antoine coefficients for `P(T) = 1e5 · 10^(A − B/(T + C))`, P in Pa, T in K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntoineParams {
    pub component: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl AntoineParams {
    pub fn new(component: impl Into<String>, a: f64, b: f64, c: f64) -> Result<Self> {
        let p = AntoineParams {
            component: component.into(),
            a,
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn propanol() -> Self {
        AntoineParams {
            component: "propanol".into(),
            a: 4.65413,
            b: 1292.869,
            c: -91.992,
        }
    }

    pub fn propyl_acetate() -> Self {
        AntoineParams {
            component: "propyl acetate".into(),
            a: 3.84871,
            b: 1088.392,
            c: -90.571,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.c.is_finite()) {
            return Err(Error::Domain(format!("{}: non-finite Antoine coefficient", self.component)));
        }
        if self.b <= 0.0 {
            return Err(Error::Domain(format!("{}: Antoine B must be positive", self.component)));
        }
        let pole = -self.c;
        if pole >= T_WINDOW.0 && pole <= T_WINDOW.1 {
            return Err(Error::Domain(format!(
                "{}: Antoine pole at {pole} K lies inside the operating window",
                self.component
            )));
        }
        Ok(())
    }

    fn pressure<R: Real>(&self, t: R) -> R {
        ((R::constant(self.a) - R::constant(self.b) / (t + self.c)) * LN_10).exp() * 1e5
    }

    /// Temperature at which the saturation pressure equals `p`.
    pub fn boiling_point(&self, p: f64) -> f64 {
        self.b / (self.a - (p / 1e5).log10()) - self.c
    }
}

/// Saturation pressure in Pa.
pub fn antoine_pressure(t: f64, p: &AntoineParams) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    if t + p.c == 0.0 {
        return Err(Error::Domain(format!("Antoine pole at T = {t} K")));
    }
    Ok(p.pressure(t))
}

/// NRTL interaction parameters with symmetric, temperature-independent
/// non-randomness `c12 = c21`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub a12: f64,
    pub a21: f64,
    pub b12: f64,
    pub b21: f64,
    pub c12: f64,
}

impl ParamVector {
    pub const DIM: usize = 5;

    pub fn new(a12: f64, a21: f64, b12: f64, b21: f64, c12: f64) -> Self {
        ParamVector { a12, a21, b12, b21, c12 }
    }

    /// The final all-data estimate of the propanol/propyl-acetate system.
    pub fn theta_tot() -> Self {
        ParamVector::new(9.396525, -10.305843, -786.446701, 1510.352034, 0.010000)
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.a12, self.a21, self.b12, self.b21, self.c12]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        ParamVector::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn to_dvector(self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        let a: [f64; 5] = s
            .try_into()
            .map_err(|_| Error::Domain(format!("expected 5 NRTL parameters, got {}", s.len())))?;
        Ok(Self::from_array(a))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Admissible box for the five parameters.
    pub fn admissible_box() -> ParamBox {
        ParamBox::new(
            vec![-50.0, -50.0, -1e4, -1e4, 0.01],
            vec![50.0, 50.0, 1e4, 1e4, 0.6],
        )
    }
}

/// Equilibrium observation: vapor mole fraction of component 1 and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub v: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

/// `(ln γ1, ln γ2)` for liquid mole fraction `l` of component 1.
fn nrtl_ln_gamma<R: Real>(l: f64, t: R, theta: &[R; 5]) -> (R, R) {
    let [a12, a21, b12, b21, c12] = *theta;
    let x1 = l;
    let x2 = 1.0 - l;
    let tau12 = a12 + b12 / t;
    let tau21 = a21 + b21 / t;
    let g12 = (-(c12 * tau12)).exp();
    let g21 = (-(c12 * tau21)).exp();
    // x1 + x2 G21 and x2 + x1 G12
    let d1 = g21 * x2 + x1;
    let d2 = g12 * x1 + x2;
    let ln_g1 = (tau21 * (g21 / d1).powi(2) + tau12 * g12 / d2.powi(2)) * (x2 * x2);
    let ln_g2 = (tau12 * (g12 / d2).powi(2) + tau21 * g21 / d1.powi(2)) * (x1 * x1);
    (ln_g1, ln_g2)
}

fn check_composition(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::Domain(format!("mole fraction {l} outside [0, 1]")));
    }
    Ok(())
}

/// NRTL activity coefficients `(γ1, γ2)`.
pub fn nrtl_gamma(l: f64, t: f64, theta: &ParamVector) -> Result<(f64, f64)> {
    check_composition(l)?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    let (g1, g2) = nrtl_ln_gamma(l, t, &theta.to_array());
    Ok((g1.exp(), g2.exp()))
}

/// A binary mixture described by two Antoine components and NRTL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySystem {
    pub components: [AntoineParams; 2],
}

impl Default for BinarySystem {
    fn default() -> Self {
        Self::propanol_propyl_acetate()
    }
}

impl BinarySystem {
    pub fn new(first: AntoineParams, second: AntoineParams) -> Result<Self> {
        first.validate()?;
        second.validate()?;
        Ok(BinarySystem {
            components: [first, second],
        })
    }

    pub fn propanol_propyl_acetate() -> Self {
        BinarySystem {
            components: [AntoineParams::propanol(), AntoineParams::propyl_acetate()],
        }
    }

    /// Bubble-point residual `g = P1 γ1 l + P2 γ2 (1 − l) − P` and the vapor
    /// fraction `v = P1 γ1 l / P`.
    fn residual<R: Real>(&self, l: f64, p: f64, t: R, theta: &[R; 5]) -> (R, R) {
        let (ln_g1, ln_g2) = nrtl_ln_gamma(l, t, theta);
        let y1 = self.components[0].pressure(t) * ln_g1.exp() * l;
        let y2 = self.components[1].pressure(t) * ln_g2.exp() * (1.0 - l);
        (y1 + y2 - p, y1 / p)
    }

    fn residual_with_slope(&self, l: f64, p: f64, t: f64, theta: &[f64; 5]) -> (f64, f64) {
        let th = theta.map(Dual::<1>::constant);
        let (g, _) = self.residual(l, p, Dual::<1>::variable(t, 0), &th);
        (g.re, g.eps[0])
    }

    fn validate_input(&self, l: f64, p: f64, theta: &ParamVector) -> Result<()> {
        check_composition(l)?;
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Domain(format!("pressure must be positive, got {p}")));
        }
        if !theta.is_finite() {
            return Err(Error::Domain("non-finite NRTL parameter".into()));
        }
        Ok(())
    }

    fn solve_temperature(&self, l: f64, p: f64, theta: &[f64; 5]) -> Result<f64> {
        let tb1 = self.components[0].boiling_point(p);
        let tb2 = self.components[1].boiling_point(p);
        let mut lo = (tb1.min(tb2) - BRACKET_MARGIN).max(T_WINDOW.0);
        let mut hi = (tb1.max(tb2) + BRACKET_MARGIN).min(T_WINDOW.1);
        let mut t = (l * tb1 + (1.0 - l) * tb2).clamp(lo, hi);

        let g_lo = self.residual_with_slope(l, p, lo, theta).0;
        let g_hi = self.residual_with_slope(l, p, hi, theta).0;
        if !(g_lo.is_finite() && g_hi.is_finite()) || g_lo.signum() == g_hi.signum() {
            return Err(Error::Convergence {
                what: "bubble point",
                detail: format!(
                    "no sign change of the residual on [{lo:.2}, {hi:.2}] K at l={l}, P={p}"
                ),
            });
        }
        let rising = g_hi > 0.0;

        for _ in 0..MAX_ITER {
            let (g, dg) = self.residual_with_slope(l, p, t, theta);
            if !g.is_finite() {
                return Err(Error::Convergence {
                    what: "bubble point",
                    detail: format!("non-finite residual at T={t}"),
                });
            }
            if g.abs() <= 1e-3 * RESIDUAL_TOL * p {
                return Ok(t);
            }
            if (g > 0.0) == rising {
                hi = t;
            } else {
                lo = t;
            }
            let newton = t - g / dg;
            let next = if dg.is_finite() && dg != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - t).abs() <= 1e-14 * t || hi - lo <= 1e-13 * t {
                t = next;
                break;
            }
            t = next;
        }
        let g = self.residual_with_slope(l, p, t, theta).0;
        if g.abs() <= RESIDUAL_TOL * p {
            Ok(t)
        } else {
            Err(Error::Convergence {
                what: "bubble point",
                detail: format!("relative residual {:e} at T={t} (l={l}, P={p})", g.abs() / p),
            })
        }
    }

    /// Equilibrium `(v, T)` for liquid composition `l` and pressure `p`.
    pub fn bubble_point(&self, l: f64, p: f64, theta: &ParamVector) -> Result<Output> {
        self.validate_input(l, p, theta)?;
        let th = theta.to_array();
        let t = self.solve_temperature(l, p, &th)?;
        let (_, v) = self.residual(l, p, t, &th);
        Ok(Output { v, t })
    }

    /// Bubble point together with `∂(v, T)/∂θ` (rows v, T).
    pub fn bubble_point_with_jacobian(
        &self,
        l: f64,
        p: f64,
        theta: &ParamVector,
    ) -> Result<(Output, DMatrix<f64>)> {
        let out = self.bubble_point(l, p, theta)?;
        let th = theta.to_array();
        let th_dual: [Dual<6>; 5] = std::array::from_fn(|i| Dual::variable(th[i], i + 1));
        let (g, v) = self.residual(l, p, Dual::<6>::variable(out.t, 0), &th_dual);
        let g_t = g.eps[0];
        if g_t == 0.0 || !g_t.is_finite() {
            return Err(Error::Singular {
                what: "bubble-point temperature derivative",
                null_space: vec![],
            });
        }
        let mut jac = DMatrix::zeros(2, 5);
        for j in 0..5 {
            let dt = -g.eps[j + 1] / g_t;
            jac[(1, j)] = dt;
            jac[(0, j)] = v.eps[j + 1] + v.eps[0] * dt;
        }
        Ok((out, jac))
    }

    pub fn bubble_point_jacobian(&self, l: f64, p: f64, theta: &ParamVector) -> Result<DMatrix<f64>> {
        self.bubble_point_with_jacobian(l, p, theta).map(|(_, j)| j)
    }

    /// Isobaric T–x–y data: bubble points at `n` evenly spaced liquid
    /// compositions from 0 to 1. Read as `(l, T)` the points trace the
    /// bubble curve and as `(v, T)` the dew curve.
    pub fn txy(&self, p: f64, theta: &ParamVector, n: usize) -> Result<Vec<TxyPoint>> {
        if n < 2 {
            return Err(Error::Domain(format!("need at least 2 curve points, got {n}")));
        }
        (0..n)
            .map(|i| {
                let l = if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 };
                let o = self.bubble_point(l, p, theta)?;
                Ok(TxyPoint { l, v: o.v, t: o.t })
            })
            .collect()
    }

    /// Dew point `(l, T)` of a vapor with composition `v` at pressure `p`,
    /// found by bisection on the liquid composition.
    pub fn dew_point(&self, v: f64, p: f64, theta: &ParamVector) -> Result<(f64, f64)> {
        check_composition(v)?;
        if v == 0.0 || v == 1.0 {
            return Ok((v, self.bubble_point(v, p, theta)?.t));
        }
        let f = |l: f64| self.bubble_point(l, p, theta).map(|o| o.v - v);
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut f_lo = f(lo)?;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid)?;
            if fm.signum() == f_lo.signum() {
                lo = mid;
                f_lo = fm;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        let l = 0.5 * (lo + hi);
        Ok((l, self.bubble_point(l, p, theta)?.t))
    }
}

/// Coexisting liquid and vapor compositions at temperature `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxyPoint {
    pub l: f64,
    pub v: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

/// Convenience wrapper around the default propanol/propyl-acetate system.
pub fn bubble_point(l: f64, p: f64, theta: &ParamVector) -> Result<Output> {
    BinarySystem::default().bubble_point(l, p, theta)
}

pub fn bubble_point_jacobian(l: f64, p: f64, theta: &ParamVector) -> Result<DMatrix<f64>> {
    BinarySystem::default().bubble_point_jacobian(l, p, theta)
}

/// The bubble-point model as a [`ParametricModel`]: inputs `(l, P)`, outputs
/// `(v, T)`, parameters `(a12, a21, b12, b21, c12)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VleModel {
    pub system: BinarySystem,
}

impl VleModel {
    pub fn new(system: BinarySystem) -> Self {
        VleModel { system }
    }

    fn unpack(x: &[f64], theta: &DVector<f64>) -> Result<(f64, f64, ParamVector)> {
        if x.len() != 2 {
            return Err(Error::Domain(format!("expected input (l, P), got {} coordinates", x.len())));
        }
        Ok((x[0], x[1], ParamVector::from_slice(theta.as_slice())?))
    }
}

impl ParametricModel for VleModel {
    fn input_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        5
    }
    fn output_dim(&self) -> usize {
        2
    }

    fn predict(&self, x: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (l, p, th) = Self::unpack(x, theta)?;
        let o = self.system.bubble_point(l, p, &th)?;
        Ok(DVector::from_row_slice(&[o.v, o.t]))
    }

    fn jacobian(&self, x: &[f64], theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (l, p, th) = Self::unpack(x, theta)?;
        self.system.bubble_point_jacobian(l, p, &th)
    }

    fn predict_with_jacobian(
        &self,
        x: &[f64],
        theta: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (l, p, th) = Self::unpack(x, theta)?;
        let (o, j) = self.system.bubble_point_with_jacobian(l, p, &th)?;
        Ok((DVector::from_row_slice(&[o.v, o.t]), j))
    }

    fn param_box(&self) -> Option<ParamBox> {
        Some(ParamVector::admissible_box())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_theta() -> ParamVector {
        ParamVector::new(0.5, -0.3, 100.0, 200.0, 0.3)
    }

    #[test]
    fn antoine_round_trip_at_one_bar() {
        let p1 = AntoineParams::propanol();
        let t = p1.boiling_point(1e5);
        assert!((t - 369.78).abs() < 0.01, "{t}");
        let p = antoine_pressure(369.78, &p1).unwrap();
        assert!((p / 1e5 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn antoine_pole_and_negative_temperature() {
        let p1 = AntoineParams::propanol();
        assert!(matches!(antoine_pressure(91.992, &p1), Err(Error::Domain(_))));
        assert!(antoine_pressure(-1.0, &p1).is_err());
        assert!(AntoineParams::new("x", 4.0, 1000.0, -350.0).is_err());
        assert!(AntoineParams::new("x", 4.0, -1.0, -50.0).is_err());
    }

    #[test]
    fn pure_component_activity() {
        let th = toy_theta();
        assert_eq!(nrtl_gamma(1.0, 350.0, &th).unwrap().0, 1.0);
        assert_eq!(nrtl_gamma(0.0, 350.0, &th).unwrap().1, 1.0);
    }

    #[test]
    fn infinite_dilution_limit() {
        let th = toy_theta();
        let t = 370.0;
        let tau12 = th.a12 + th.b12 / t;
        let tau21 = th.a21 + th.b21 / t;
        let expected = tau21 + tau12 * (-th.c12 * tau12).exp();
        let (g1, _) = nrtl_gamma(1e-12, t, &th).unwrap();
        assert!((g1.ln() - expected).abs() / expected.abs() < 1e-6);
    }

    #[test]
    fn txy_endpoints_are_pure_boiling_points() {
        let sys = BinarySystem::default();
        let th = ParamVector::theta_tot();
        let c = sys.txy(1e5, &th, 11).unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!((c[0].l, c[0].v), (0.0, 0.0));
        assert_eq!((c[10].l, c[10].v), (1.0, 1.0));
        assert!((c[10].t - 369.78).abs() < 0.01, "{}", c[10].t);
        assert!((c[0].t - AntoineParams::propyl_acetate().boiling_point(1e5)).abs() < 1e-6);
        assert!(sys.txy(1e5, &th, 1).is_err());
    }

    #[test]
    fn pure_propanol_bubble_point() {
        let out = bubble_point(1.0, 1e5, &toy_theta()).unwrap();
        assert_eq!(out.v, 1.0);
        assert!((out.t - 369.78).abs() < 0.01);
    }

    #[test]
    fn measured_point_is_reproduced() {
        let out = bubble_point(0.4466, 199950.0, &ParamVector::theta_tot()).unwrap();
        assert!((out.v - 0.5257).abs() <= 0.01, "{out:?}");
        assert!((out.t - 389.12).abs() <= 0.3, "{out:?}");
    }

    #[test]
    fn residual_holds_at_solution() {
        let sys = BinarySystem::default();
        let th = ParamVector::theta_tot();
        for &(l, p) in &[(0.1, 1e5), (0.5, 2e5), (0.93, 3e5)] {
            let out = sys.bubble_point(l, p, &th).unwrap();
            let (g1, g2) = nrtl_gamma(l, out.t, &th).unwrap();
            let c = &sys.components;
            let sum = c[0].pressure(out.t) * g1 * l + c[1].pressure(out.t) * g2 * (1.0 - l);
            assert!(((sum - p) / p).abs() < 1e-10);
            assert!((out.v - c[0].pressure(out.t) * g1 * l / p).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_jacobian_is_zero() {
        for l in [0.0, 1.0] {
            let j = bubble_point_jacobian(l, 2e5, &toy_theta()).unwrap();
            assert!(j.iter().all(|v| v.abs() < 1e-12), "{j}");
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let th = ParamVector::theta_tot();
        let j = bubble_point_jacobian(0.5, 2e5, &th).unwrap();
        let base = th.to_array();
        for k in 0..5 {
            let h = 1e-6 * base[k].abs().max(1e-2);
            let mut up = base;
            let mut dn = base;
            up[k] += h;
            dn[k] -= h;
            let fu = bubble_point(0.5, 2e5, &ParamVector::from_array(up)).unwrap();
            let fd = bubble_point(0.5, 2e5, &ParamVector::from_array(dn)).unwrap();
            let dv = (fu.v - fd.v) / (2.0 * h);
            let dt = (fu.t - fd.t) / (2.0 * h);
            assert!((dv - j[(0, k)]).abs() <= 1e-5 * j[(0, k)].abs().max(1e-8), "v {k}");
            assert!((dt - j[(1, k)]).abs() <= 1e-5 * j[(1, k)].abs().max(1e-8), "T {k}");
        }
    }

    #[test]
    fn dew_point_inverts_bubble_point() {
        let th = ParamVector::theta_tot();
        let out = bubble_point(0.3, 1e5, &th).unwrap();
        let (l, t) = BinarySystem::default().dew_point(out.v, 1e5, &th).unwrap();
        assert!((l - 0.3).abs() < 1e-8);
        assert!((t - out.t).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(bubble_point(1.2, 1e5, &toy_theta()).is_err());
        assert!(bubble_point(0.5, -1.0, &toy_theta()).is_err());
        let mut th = toy_theta();
        th.a12 = f64::NAN;
        assert!(bubble_point(0.5, 1e5, &th).is_err());
    }
}
