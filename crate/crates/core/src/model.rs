//! Multirotor models: the hover-linearized prediction model used by the
//! expert and the nonlinear simulator used as the plant.
//!
//! State layout is `[p_x, p_y, p_z, v_x, v_y, v_z, roll, pitch]` in an
//! inertial z-up frame with yaw fixed at zero. Actions are
//! `[roll_cmd, pitch_cmd, thrust]` with *absolute* thrust in newtons; the
//! linear model works with the thrust deviation from hover, see
//! [`to_linear_input`] and [`from_linear_input`].

use nalgebra::{DMatrix, DVector, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 8;
pub const NU: usize = 3;
/// Number of low-dimensional measurements given to the policy: `[p_z, v, roll, pitch]`.
pub const N_OTHER: usize = 6;

pub type State = SVector<f64, NX>;
pub type Action = SVector<f64, NU>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultirotorParams {
    pub mass: f64,
    pub gravity: f64,
    pub attitude_time_constant: f64,
    pub linear_drag_coeff: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub tilt_max: f64,
}

impl Default for MultirotorParams {
    fn default() -> Self {
        let mass = 1.0;
        let gravity = 9.81;
        Self {
            mass,
            gravity,
            attitude_time_constant: 0.15,
            linear_drag_coeff: 0.1,
            thrust_min: 0.0,
            thrust_max: 2.0 * mass * gravity,
            tilt_max: 0.5,
        }
    }
}

impl MultirotorParams {
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_input(&self) -> Action {
        Action::new(0.0, 0.0, self.weight())
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.mass,
            self.gravity,
            self.attitude_time_constant,
            self.linear_drag_coeff,
            self.thrust_min,
            self.thrust_max,
            self.tilt_max,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "multirotor parameters must be finite".into(),
            ));
        }
        if self.mass <= 0.0 || self.attitude_time_constant <= 0.0 || self.tilt_max <= 0.0 {
            return Err(Error::InvalidParameter(
                "mass, attitude time constant and tilt limit must be positive".into(),
            ));
        }
        if self.linear_drag_coeff < 0.0 {
            return Err(Error::InvalidParameter("drag must be non-negative".into()));
        }
        let w = self.weight();
        if !(self.thrust_min < w && w < self.thrust_max) {
            return Err(Error::InvalidParameter(format!(
                "hover thrust {w} outside ({}, {})",
                self.thrust_min, self.thrust_max
            )));
        }
        Ok(())
    }
}

/// Discrete-time linear system `x+ = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols(),
                context: "A must be square",
            });
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
                context: "rows of B",
            });
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: c.ncols(),
                context: "columns of C",
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { a, b, c, dt })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn no(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

fn continuous_matrices(params: &MultirotorParams) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let g = params.gravity;
    let d = params.linear_drag_coeff;
    let tau = params.attitude_time_constant;
    let m = params.mass;

    let mut ac = DMatrix::zeros(NX, NX);
    for i in 0..3 {
        ac[(i, 3 + i)] = 1.0;
        ac[(3 + i, 3 + i)] = -d;
    }
    ac[(3, 7)] = g;
    ac[(4, 6)] = -g;
    ac[(6, 6)] = -1.0 / tau;
    ac[(7, 7)] = -1.0 / tau;

    let mut bc = DMatrix::zeros(NX, NU);
    bc[(6, 0)] = 1.0 / tau;
    bc[(7, 1)] = 1.0 / tau;
    bc[(5, 2)] = 1.0 / m;

    // external force enters the velocity derivative
    let mut fc = DMatrix::zeros(NX, 3);
    for i in 0..3 {
        fc[(3 + i, i)] = 1.0 / m;
    }
    (ac, bc, fc)
}

/// Zero-order-hold discretization of `[A_c | B_c F_c]` through the matrix
/// exponential of the augmented block matrix.
fn discretize(params: &MultirotorParams, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    params.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let (ac, bc, fc) = continuous_matrices(params);
    let n = NX + NU + 3;
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (NX, NX)).copy_from(&ac);
    m.view_mut((0, NX), (NX, NU)).copy_from(&bc);
    m.view_mut((0, NX + NU), (NX, 3)).copy_from(&fc);
    let e = (m * dt).exp();
    let a = e.view((0, 0), (NX, NX)).into_owned();
    let b = e.view((0, NX), (NX, NU)).into_owned();
    let f = e.view((0, NX + NU), (NX, 3)).into_owned();
    if a.iter().chain(b.iter()).chain(f.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("discretization produced non-finite entries".into()));
    }
    Ok((a, b, f))
}

/// Hover-linearized multirotor, discretized exactly at `dt`. The input is
/// `[roll_cmd, pitch_cmd, thrust - m g]`; `C` is the identity.
pub fn build_linear_model(params: &MultirotorParams, dt: f64) -> Result<LinearSystem> {
    let (a, b, _) = discretize(params, dt)?;
    LinearSystem::new(a, b, DMatrix::identity(NX, NX), dt)
}

/// Per-period state increment caused by a constant external force (N),
/// consistent with [`build_linear_model`] at the same `dt`.
pub fn force_to_state_map(params: &MultirotorParams, dt: f64) -> Result<DMatrix<f64>> {
    Ok(discretize(params, dt)?.2)
}

pub fn to_linear_input(u: &Action, params: &MultirotorParams) -> DVector<f64> {
    DVector::from_column_slice((u - params.hover_input()).as_slice())
}

pub fn from_linear_input(du: &DVector<f64>, params: &MultirotorParams) -> Action {
    Action::from_column_slice(du.as_slice()) + params.hover_input()
}

pub fn state_to_dvector(x: &State) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn state_from_slice(v: &[f64]) -> State {
    State::from_column_slice(v)
}

fn derivative(x: &State, u: &Action, wind: &Vector3<f64>, params: &MultirotorParams) -> State {
    let (roll, pitch) = (x[6], x[7]);
    let thrust_dir = Vector3::new(roll.cos() * pitch.sin(), -roll.sin(), roll.cos() * pitch.cos());
    let v = Vector3::new(x[3], x[4], x[5]);
    let acc = thrust_dir * (u[2] / params.mass) - Vector3::new(0.0, 0.0, params.gravity)
        - v * params.linear_drag_coeff
        + wind / params.mass;
    let tau = params.attitude_time_constant;
    let mut dx = State::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&v);
    dx.fixed_rows_mut::<3>(3).copy_from(&acc);
    dx[6] = (u[0] - roll) / tau;
    dx[7] = (u[1] - pitch) / tau;
    dx
}

/// One RK4 step of the nonlinear multirotor with yaw held at zero.
pub fn step_nonlinear(
    x: &State,
    u: &Action,
    wind_force: &Vector3<f64>,
    params: &MultirotorParams,
    dt_sim: f64,
) -> State {
    let k1 = derivative(x, u, wind_force, params);
    let k2 = derivative(&(x + k1 * (0.5 * dt_sim)), u, wind_force, params);
    let k3 = derivative(&(x + k2 * (0.5 * dt_sim)), u, wind_force, params);
    let k4 = derivative(&(x + k3 * dt_sim), u, wind_force, params);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt_sim / 6.0)
}

/// Advance the nonlinear model over one control period with the action held
/// constant, in substeps no longer than `dt_sim`.
pub fn simulate_period(
    x: &State,
    u: &Action,
    wind_force: &Vector3<f64>,
    params: &MultirotorParams,
    dt: f64,
    dt_sim: f64,
) -> State {
    let n = (dt / dt_sim).round().max(1.0) as usize;
    let h = dt / n as f64;
    (0..n).fold(*x, |x, _| step_nonlinear(&x, u, wind_force, params, h))
}
