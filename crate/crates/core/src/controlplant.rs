//! Discrete-time plant, PI controller and Kalman filter.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
}

/// `x' = A x + B (u + w)`, `y = C x'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub ts: f64,
}

/// Default servo viscous damping coefficient.
pub const SERVO_DAMPING: f64 = 8.0;
/// Default servo input gain.
pub const SERVO_GAIN: f64 = 8.0;
pub const SERVO_TS: f64 = 0.01;

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, ts: f64) -> Result<Self, ControlError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(ControlError::Dimension(format!("A is {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(ControlError::Dimension(format!("B has {} rows, A has {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(ControlError::Dimension(format!("C has {} columns, A has {n}", c.ncols())));
        }
        if !(ts > 0.0) {
            return Err(ControlError::Dimension(format!("sample time {ts} must be positive")));
        }
        Ok(Self { a, b, c, ts })
    }

    /// Damped double integrator: position and velocity, force input.
    pub fn servo(damping: f64, gain: f64, ts: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, ts, 0.0, 1.0 - damping * ts]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, gain * ts]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            ts,
        }
    }

    pub fn default_servo() -> Self {
        Self::servo(SERVO_DAMPING, SERVO_GAIN, SERVO_TS)
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
        if x.len() != self.states() || u.len() != self.inputs() || w.len() != self.inputs() {
            return Err(ControlError::Dimension(format!(
                "state {} / input {} / noise {} against a {}-state {}-input plant",
                x.len(),
                u.len(),
                w.len(),
                self.states(),
                self.inputs()
            )));
        }
        let next = &self.a * x + &self.b * (u + w);
        let y = self.output(&next);
        Ok((next, y))
    }
}

/// Scalar-output convenience wrapper around [`PlantModel::step`].
pub fn plant_step(
    model: &PlantModel,
    x: &DVector<f64>,
    u: f64,
    w: f64,
) -> Result<(DVector<f64>, f64), ControlError> {
    let (next, y) = model.step(x, &DVector::from_element(1, u), &DVector::from_element(1, w))?;
    Ok((next, y[0]))
}

/// PI law with forward-Euler integration, actuator clamp and integrator clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PIController {
    pub kp: f64,
    pub ki: f64,
    pub ts: f64,
    /// Symmetric actuator limit.
    pub clamp: f64,
    integrator: f64,
}

pub const DEFAULT_KP: f64 = 4.0;
pub const DEFAULT_KI: f64 = 0.5;
pub const DEFAULT_CLAMP: f64 = 10.0;

impl PIController {
    pub fn new(kp: f64, ki: f64, ts: f64, clamp: f64) -> Self {
        Self {
            kp,
            ki,
            ts,
            clamp,
            integrator: 0.0,
        }
    }

    /// Static gain `F`: the `Ki = 0` special case.
    pub fn static_gain(f: f64, ts: f64, clamp: f64) -> Self {
        Self::new(f, 0.0, ts, clamp)
    }

    pub fn integrator(&self) -> f64 {
        self.integrator
    }

    pub fn reset(&mut self) {
        self.integrator = 0.0;
    }

    pub fn control(&mut self, reference: f64, measured: f64) -> f64 {
        let e = reference - measured;
        self.integrator += e * self.ts;
        if self.ki > 0.0 {
            let limit = self.clamp / self.ki;
            self.integrator = self.integrator.clamp(-limit, limit);
        }
        (self.kp * e + self.ki * self.integrator).clamp(-self.clamp, self.clamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x_hat: DVector<f64>,
    pub p_cov: DMatrix<f64>,
    pub q_cov: DMatrix<f64>,
    pub r_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(x0: DVector<f64>, p0: DMatrix<f64>, q_cov: DMatrix<f64>, r_cov: DMatrix<f64>) -> Self {
        let gain = DMatrix::zeros(x0.len(), r_cov.nrows());
        Self {
            x_hat: x0,
            p_cov: p0,
            q_cov,
            r_cov,
            gain,
        }
    }

    /// Process noise entering through the input channel: `Q = B var_w B^T`.
    pub fn for_plant(model: &PlantModel, input_noise_var: f64, meas_noise_var: f64) -> Self {
        let n = model.states();
        let q = &model.b * model.b.transpose() * input_noise_var;
        let r = DMatrix::identity(model.outputs(), model.outputs()) * meas_noise_var;
        Self::new(DVector::zeros(n), DMatrix::identity(n, n) * 1e-3, q, r)
    }
}

pub fn kalman_predict(ks: &KalmanState, model: &PlantModel, u_prev: &DVector<f64>) -> KalmanState {
    let x_hat = &model.a * &ks.x_hat + &model.b * u_prev;
    let p_cov = &model.a * &ks.p_cov * model.a.transpose() + &ks.q_cov;
    KalmanState {
        x_hat,
        p_cov,
        ..ks.clone()
    }
}

pub fn kalman_update(ks: &KalmanState, model: &PlantModel, y: &DVector<f64>) -> Result<KalmanState, ControlError> {
    let c = &model.c;
    let innovation_cov = c * &ks.p_cov * c.transpose() + &ks.r_cov;
    let inv = innovation_cov
        .try_inverse()
        .ok_or(ControlError::SingularInnovation)?;
    let gain = &ks.p_cov * c.transpose() * inv;
    let x_hat = &ks.x_hat + &gain * (y - c * &ks.x_hat);
    let n = ks.x_hat.len();
    let p = (DMatrix::identity(n, n) - &gain * c) * &ks.p_cov;
    let p_cov = (&p + p.transpose()) * 0.5;
    Ok(KalmanState {
        x_hat,
        p_cov,
        gain,
        ..ks.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn autonomous_identity_plant_holds_state() {
        let m = PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            0.01,
        )
        .unwrap();
        let (x, y) = plant_step(&m, &v(&[1.5, -2.0]), 7.0, 0.0).unwrap();
        assert_eq!(x, v(&[1.5, -2.0]));
        assert_eq!(y, 1.5);
    }

    #[test]
    fn servo_unit_input_from_rest() {
        let m = PlantModel::default_servo();
        let (x, _) = plant_step(&m, &v(&[0.0, 0.0]), 1.0, 0.0).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 0.01 * SERVO_GAIN).abs() < 1e-15);
    }

    #[test]
    fn zero_stays_zero() {
        let m = PlantModel::default_servo();
        let mut x = v(&[0.0, 0.0]);
        for _ in 0..100 {
            x = plant_step(&m, &x, 0.0, 0.0).unwrap().0;
        }
        assert_eq!(x, v(&[0.0, 0.0]));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = PlantModel::default_servo();
        assert!(plant_step(&m, &v(&[0.0]), 0.0, 0.0).is_err());
        assert!(PlantModel::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), 0.01).is_err());
    }

    #[test]
    fn proportional_only() {
        let mut c = PIController::new(1.0, 0.0, 0.01, 10.0);
        assert_eq!(c.control(2.0, 0.0), 2.0);
    }

    #[test]
    fn integral_accumulates() {
        let mut c = PIController::new(0.0, 1.0, 1.0, 100.0);
        let u: Vec<f64> = (0..3).map(|_| c.control(1.0, 0.0)).collect();
        assert_eq!(u, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn actuator_saturates() {
        let mut c = PIController::new(100.0, 0.0, 0.01, 10.0);
        assert_eq!(c.control(1.0, 0.0), 10.0);
        assert_eq!(c.control(-1.0, 0.0), -10.0);
    }

    #[test]
    fn integrator_is_clamped() {
        let mut c = PIController::new(0.0, 2.0, 1.0, 10.0);
        for _ in 0..100 {
            c.control(1.0, 0.0);
        }
        assert_eq!(c.integrator(), 5.0);
    }

    #[test]
    fn static_system_predict_is_identity() {
        let m = PlantModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), 0.01).unwrap();
        let ks = KalmanState::new(v(&[1.0, 2.0]), DMatrix::identity(2, 2) * 3.0, DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        let next = kalman_predict(&ks, &m, &v(&[5.0]));
        assert_eq!(next.x_hat, ks.x_hat);
        assert_eq!(next.p_cov, ks.p_cov);
    }

    #[test]
    fn scalar_predict_adds_q() {
        let m = PlantModel::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 1.0).unwrap();
        let ks = KalmanState::new(v(&[0.0]), DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.25), DMatrix::identity(1, 1));
        assert_eq!(kalman_predict(&ks, &m, &v(&[0.0])).p_cov[(0, 0)], 0.75);
    }

    #[test]
    fn untrusted_measurement_barely_moves_estimate() {
        let m = PlantModel::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 1.0).unwrap();
        let ks = KalmanState::new(v(&[2.0]), DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1e12));
        let up = kalman_update(&ks, &m, &v(&[100.0])).unwrap();
        assert!(up.gain[(0, 0)] < 1e-11);
        assert!((up.x_hat[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_measurement_is_adopted() {
        let m = PlantModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), 1.0).unwrap();
        let ks = KalmanState::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let up = kalman_update(&ks, &m, &v(&[3.0, -4.0])).unwrap();
        assert!((up.x_hat - v(&[3.0, -4.0])).norm() < 1e-12);
    }

    #[test]
    fn singular_innovation_reported() {
        let m = PlantModel::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 1.0).unwrap();
        let ks = KalmanState::new(v(&[0.0]), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1));
        assert_eq!(kalman_update(&ks, &m, &v(&[1.0])), Err(ControlError::SingularInnovation));
    }
}
