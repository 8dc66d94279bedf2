//! Plant models and their discrete-time linearization.
//!
//! A plant evolves as `x' = x + f(x, u)·dt + w` with additive noise `w`
//! (the noise map is the identity). Jacobians are closed-form so repeated
//! linearizations along a nominal trajectory are cheap and deterministic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{check_dim, DrocError, Result};

/// Discrete-time Jacobians of one plant step around a nominal point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// `∂x'/∂x`, state_dim × state_dim.
    pub a: DMatrix<f64>,
    /// `∂x'/∂u`, state_dim × control_dim.
    pub b: DMatrix<f64>,
}

pub trait Plant: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dt(&self) -> f64;

    /// Continuous-time drift `f(x, u)`.
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Continuous-time Jacobians `(∂f/∂x, ∂f/∂u)`.
    fn drift_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// Whether `u` lies in the domain where the model is valid.
    fn control_admissible(&self, _u: &DVector<f64>) -> bool {
        true
    }

    /// One noisy step: `x + f(x,u)·dt + w`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("step state", self.state_dim(), x.len())?;
        check_dim("step control", self.control_dim(), u.len())?;
        check_dim("step noise", self.state_dim(), w.len())?;
        let mut next = self.drift(x, u);
        next *= self.dt();
        next += x;
        next += w;
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(DrocError::NumericalFault("plant step"))
        }
    }

    /// `A = I + dt·∂f/∂x`, `B = dt·∂f/∂u` at the nominal point.
    fn linearize(&self, x_nom: &DVector<f64>, u_nom: &DVector<f64>) -> Result<Linearization> {
        check_dim("linearize state", self.state_dim(), x_nom.len())?;
        check_dim("linearize control", self.control_dim(), u_nom.len())?;
        let (fx, fu) = self.drift_jacobians(x_nom, u_nom)?;
        let dt = self.dt();
        let a = DMatrix::identity(self.state_dim(), self.state_dim()) + fx * dt;
        let b = fu * dt;
        if a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            Ok(Linearization { a, b })
        } else {
            Err(DrocError::NumericalFault("linearize"))
        }
    }
}

/// Plant parameters as they appear in the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Wheelbase `L` [m].
    pub wheelbase: f64,
    /// Integration step [s].
    pub dt: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            wheelbase: 0.3,
            dt: 0.1,
        }
    }
}

/// Kinematic bicycle: state `[x, y, θ, v]`, control `[a, δ]`.
///
/// ```text
/// ẋ = v cos θ    ẏ = v sin θ    θ̇ = (v / L) tan δ    v̇ = a
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bicycle {
    pub wheelbase: f64,
    pub dt: f64,
}

impl Bicycle {
    pub fn new(wheelbase: f64, dt: f64) -> Result<Self> {
        if !(wheelbase > 0.0 && wheelbase.is_finite()) {
            return Err(DrocError::InvalidConfig(format!(
                "wheelbase must be positive, got {wheelbase}"
            )));
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(DrocError::InvalidConfig(format!(
                "dt must be non-negative, got {dt}"
            )));
        }
        Ok(Bicycle { wheelbase, dt })
    }

    pub fn from_config(cfg: &PlantConfig) -> Result<Self> {
        Self::new(cfg.wheelbase, cfg.dt)
    }
}

impl Default for Bicycle {
    fn default() -> Self {
        let cfg = PlantConfig::default();
        Bicycle {
            wheelbase: cfg.wheelbase,
            dt: cfg.dt,
        }
    }
}

impl Plant for Bicycle {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (theta, v) = (x[2], x[3]);
        DVector::from_vec(vec![
            v * theta.cos(),
            v * theta.sin(),
            v / self.wheelbase * u[1].tan(),
            u[0],
        ])
    }

    fn drift_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let delta = u[1];
        if !(delta.abs() < FRAC_PI_2) {
            return Err(DrocError::SingularLinearization { delta });
        }
        let (theta, v) = (x[2], x[3]);
        let (s, c) = theta.sin_cos();
        let tan_d = delta.tan();
        let sec2 = 1.0 + tan_d * tan_d;

        let mut fx = DMatrix::zeros(4, 4);
        fx[(0, 2)] = -v * s;
        fx[(0, 3)] = c;
        fx[(1, 2)] = v * c;
        fx[(1, 3)] = s;
        fx[(2, 3)] = tan_d / self.wheelbase;

        let mut fu = DMatrix::zeros(4, 2);
        fu[(2, 1)] = v / self.wheelbase * sec2;
        fu[(3, 0)] = 1.0;
        Ok((fx, fu))
    }

    fn control_admissible(&self, u: &DVector<f64>) -> bool {
        u[1].abs() < FRAC_PI_2
    }
}

/// Linear plant `x' = A x + B u + w`, expressed through the drift
/// `f = ((A − I) x + B u) / dt`. Used for LQ problems and solver checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        check_dim("linear plant A columns", a.nrows(), a.ncols())?;
        check_dim("linear plant B rows", a.nrows(), b.nrows())?;
        if !(dt > 0.0) {
            return Err(DrocError::InvalidConfig("linear plant needs dt > 0".into()));
        }
        Ok(LinearPlant { a, b, dt })
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (&self.a * x - x + &self.b * u) / self.dt
    }

    fn drift_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        Ok((
            (&self.a - DMatrix::identity(n, n)) / self.dt,
            &self.b / self.dt,
        ))
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("step state", self.state_dim(), x.len())?;
        check_dim("step control", self.control_dim(), u.len())?;
        check_dim("step noise", self.state_dim(), w.len())?;
        let next = &self.a * x + &self.b * u + w;
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(DrocError::NumericalFault("plant step"))
        }
    }

    fn linearize(&self, x_nom: &DVector<f64>, u_nom: &DVector<f64>) -> Result<Linearization> {
        check_dim("linearize state", self.state_dim(), x_nom.len())?;
        check_dim("linearize control", self.control_dim(), u_nom.len())?;
        Ok(Linearization {
            a: self.a.clone(),
            b: self.b.clone(),
        })
    }
}

/// Robot state `[x, y, θ, v]` with named fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl CarState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.y, self.theta, self.v])
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        check_dim("car state", 4, s.len())?;
        Ok(CarState {
            x: s[0],
            y: s[1],
            theta: s[2],
            v: s[3],
        })
    }

    pub fn distance_to_origin(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Robot input `[a, δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarControl {
    pub a: f64,
    pub delta: f64,
}

impl CarControl {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.a, self.delta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let car = Bicycle::default();
        let next = car.step(&v(&[0.0; 4]), &v(&[0.0; 2]), &v(&[0.0; 4])).unwrap();
        assert_eq!(next, v(&[0.0; 4]));
    }

    #[test]
    fn straight_line_motion() {
        let car = Bicycle::default();
        let next = car
            .step(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0]), &v(&[0.0; 4]))
            .unwrap();
        assert_abs_diff_eq!(next, v(&[0.1, 0.0, 0.0, 1.0]), epsilon = 1e-15);

        let theta = std::f64::consts::FRAC_PI_2;
        let next = car
            .step(&v(&[0.0, 0.0, theta, 1.0]), &v(&[0.0, 0.0]), &v(&[0.0; 4]))
            .unwrap();
        assert_abs_diff_eq!(next, v(&[0.0, 0.1, theta, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn linearization_at_rest() {
        let car = Bicycle::default();
        let theta = 0.4;
        let lin = car
            .linearize(&v(&[1.0, 2.0, theta, 0.0]), &v(&[0.0, 0.0]))
            .unwrap();
        assert_abs_diff_eq!(lin.a[(0, 3)], 0.1 * theta.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(lin.b[(3, 0)], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn zero_step_linearization_is_identity() {
        let car = Bicycle::new(0.3, 0.0).unwrap();
        let lin = car
            .linearize(&v(&[1.0, -2.0, 0.7, 1.5]), &v(&[0.3, 0.2]))
            .unwrap();
        assert_eq!(lin.a, DMatrix::identity(4, 4));
        assert_eq!(lin.b, DMatrix::zeros(4, 2));
    }

    #[test]
    fn steering_singularity_is_rejected() {
        let car = Bicycle::default();
        let err = car
            .linearize(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, FRAC_PI_2]))
            .unwrap_err();
        assert!(matches!(err, DrocError::SingularLinearization { .. }));
        assert!(!car.control_admissible(&v(&[0.0, -2.0])));
    }

    #[test]
    fn dimension_errors() {
        let car = Bicycle::default();
        assert!(matches!(
            car.step(&v(&[0.0; 3]), &v(&[0.0; 2]), &v(&[0.0; 4])),
            Err(DrocError::DimensionError { .. })
        ));
    }

    #[test]
    fn non_finite_step_is_a_fault() {
        let car = Bicycle::default();
        let err = car
            .step(&v(&[f64::INFINITY, 0.0, 0.0, 0.0]), &v(&[0.0; 2]), &v(&[0.0; 4]))
            .unwrap_err();
        assert!(matches!(err, DrocError::NumericalFault(_)));
    }

    fn finite_difference(car: &Bicycle, x: &DVector<f64>, u: &DVector<f64>) -> Linearization {
        let h = 1e-6;
        let zero = DVector::zeros(4);
        let mut a = DMatrix::zeros(4, 4);
        let mut b = DMatrix::zeros(4, 2);
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (car.step(&xp, u, &zero).unwrap() - car.step(&xm, u, &zero).unwrap())
                / (2.0 * h);
            a.set_column(j, &col);
        }
        for j in 0..2 {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (car.step(x, &up, &zero).unwrap() - car.step(x, &um, &zero).unwrap())
                / (2.0 * h);
            b.set_column(j, &col);
        }
        Linearization { a, b }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn jacobians_match_central_differences(
            px in -5.0..5.0f64, py in -5.0..5.0f64, th in -4.0..4.0f64, sp in -3.0..3.0f64,
            acc in -2.0..2.0f64, delta in -1.2..1.2f64,
        ) {
            let car = Bicycle::default();
            let x = v(&[px, py, th, sp]);
            let u = v(&[acc, delta]);
            let lin = car.linearize(&x, &u).unwrap();
            let fd = finite_difference(&car, &x, &u);
            prop_assert!((&lin.a - &fd.a).amax() <= 1e-5);
            prop_assert!((&lin.b - &fd.b).amax() <= 1e-5);
        }

        #[test]
        fn noise_enters_additively(
            th in -4.0..4.0f64, sp in -3.0..3.0f64, delta in -1.2..1.2f64,
            w1 in proptest::collection::vec(-1.0..1.0f64, 4),
            w2 in proptest::collection::vec(-1.0..1.0f64, 4),
        ) {
            let car = Bicycle::default();
            let x = v(&[1.0, 2.0, th, sp]);
            let u = v(&[0.5, delta]);
            let w1 = v(&w1);
            let w2 = v(&w2);
            let base = car.step(&x, &u, &w1).unwrap();
            let both = car.step(&x, &u, &(&w1 + &w2)).unwrap();
            prop_assert!((both - base - &w2).amax() <= 1e-12);
            // noiseless steps are bit-exact repeatable
            let z = DVector::zeros(4);
            prop_assert_eq!(car.step(&x, &u, &z).unwrap(), car.step(&x, &u, &z).unwrap());
        }
    }
}
