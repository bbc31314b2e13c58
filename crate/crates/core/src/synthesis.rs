//! Offline synthesis of the output-feedback tube controller: terminal cost
//! and ancillary gain (DARE), observer gain, the stacked estimation/control
//! error system, a Monte-Carlo outer box of its invariant set, and the
//! resulting constraint tightening.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block2x2, is_schur, is_symmetric, min_symmetric_eigenvalue, row_major, spectral_radius};
use crate::model::LinearSystem;
use crate::rng;
use crate::setops::{linear_map_outer, minkowski_sum, pontryagin_diff, BoxSet};

const DARE_MAX_ITER: usize = 100_000;
const DARE_TOL: f64 = 1e-12;
const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(with = "row_major")]
    pub q: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub r: DMatrix<f64>,
}

impl CostSpec {
    pub fn diagonal(q: &[f64], r: &[f64]) -> Result<Self> {
        let c = Self {
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(r)),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_symmetric(&self.q, 1e-12) || !is_symmetric(&self.r, 1e-12) {
            return Err(Error::InvalidParameter("Q and R must be symmetric".into()));
        }
        if min_symmetric_eigenvalue(&self.q) < -1e-10 {
            return Err(Error::InvalidParameter("Q must be positive semidefinite".into()));
        }
        if min_symmetric_eigenvalue(&self.r) < 1e-10 {
            return Err(Error::InvalidParameter("R must be positive definite".into()));
        }
        Ok(())
    }
}

/// Process set `w`, the inflated process set `w_bar` used for the tube, and
/// the sensing set `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub w: BoxSet,
    pub w_bar: BoxSet,
    pub v: BoxSet,
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("W", &self.w), ("W_bar", &self.w_bar), ("V", &self.v)] {
            if !b.contains_origin() {
                return Err(Error::InvalidParameter(format!("{name} must contain the origin")));
            }
        }
        if !self.w_bar.contains_box(&self.w) {
            return Err(Error::InvalidParameter("W must be a subset of W_bar".into()));
        }
        Ok(())
    }
}

/// `xi+ = A_xi xi + delta`, `delta in D`, with `xi = [x - x_hat; x_hat - x_bar]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSystem {
    pub a_xi: DMatrix<f64>,
    pub d: BoxSet,
    /// `delta = G s` with `s` in a primitive box. When present, Monte-Carlo
    /// draws `s` instead of `delta`, so `delta` keeps the correlation between
    /// blocks that the outer box `D` forgets.
    pub sources: Option<(DMatrix<f64>, BoxSet)>,
}

impl ErrorSystem {
    pub fn from_box(a_xi: DMatrix<f64>, d: BoxSet) -> Self {
        Self { a_xi, d, sources: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceSampling {
    /// Each component independently at one of its bounds.
    Vertex,
    /// Uniform over the box.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    #[serde(with = "row_major")]
    pub k: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub l: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub p: DMatrix<f64>,
    /// Outer box of the invariant set of the stacked error (inflated).
    pub s: BoxSet,
    /// Tube cross-section `[I I] S`.
    pub z: BoxSet,
    /// Control-error block `[0 I] S` bounding `x_hat - x_bar_0`.
    pub s_ctrl: BoxSet,
    pub x_bar: BoxSet,
    pub u_bar: BoxSet,
    pub x_bar_n: BoxSet,
}

impl SynthesisResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tightened {
    pub x_bar: BoxSet,
    pub u_bar: BoxSet,
    pub z: BoxSet,
    pub s_ctrl: BoxSet,
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration.
///
/// Returns `(P, K)` where `K = -(R + B'PB)^-1 B'PA` is stored with the sign
/// that makes `A + BK` Schur.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Synthesis("R + B'PB is not positive definite".into()))?;
        Ok(chol.solve(&(b.transpose() * p * a)))
    };

    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..DARE_MAX_ITER {
        let k_lqr = gain(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k_lqr;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).amax();
        p = next;
        if !delta.is_finite() {
            break;
        }
        // absolute 1e-12 sits below round-off once entries of P grow large
        if delta < DARE_TOL * p.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Synthesis(format!(
            "Riccati iteration did not converge within {DARE_MAX_ITER} iterations"
        )));
    }
    let k = -gain(&p)?;
    if !is_schur(&(a + b * &k)) {
        return Err(Error::Synthesis("(A, B) not stabilizable: A + BK is not Schur".into()));
    }
    Ok((p, k))
}

/// `|P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)|_max`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let s = r + b.transpose() * p * b;
    let s_inv = s.try_inverse().expect("R + B'PB invertible");
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * s_inv * b.transpose() * p * a;
    (p - rhs).amax()
}

/// Observer gain placing every eigenvalue of `A - LC` at `exp(-pole_rate dt)`.
/// Closed form for `C = I`.
pub fn observer_gain(a: &DMatrix<f64>, c: &DMatrix<f64>, pole_rate: f64, dt: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if c.shape() != (n, n) || (c - DMatrix::identity(n, n)).amax() > 0.0 {
        return Err(Error::Unsupported(
            "observer pole placement requires C = I".into(),
        ));
    }
    if !(pole_rate.is_finite() && pole_rate >= 0.0 && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "invalid observer pole rate {pole_rate} or dt {dt}"
        )));
    }
    let pole = (-pole_rate * dt).exp();
    let l = a - DMatrix::identity(n, n) * pole;
    if !is_schur(&(a - &l * c)) {
        return Err(Error::Synthesis(format!(
            "observer pole {pole} is not strictly inside the unit circle"
        )));
    }
    Ok(l)
}

pub fn build_error_system(
    sys: &LinearSystem,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    w_bar: &BoxSet,
    v: &BoxSet,
) -> Result<ErrorSystem> {
    let n = sys.nx();
    let no = sys.no();
    let lc = l * &sys.c;
    let est = &sys.a - &lc;
    let ctrl = &sys.a + &sys.b * k;
    if !is_schur(&est) {
        return Err(Error::Synthesis("A - LC is not Schur".into()));
    }
    if !is_schur(&ctrl) {
        return Err(Error::Synthesis("A + BK is not Schur".into()));
    }
    let a_xi = block2x2(&est, &DMatrix::zeros(n, n), &lc, &ctrl);
    let m = block2x2(&DMatrix::identity(n, n), &(-l), &DMatrix::zeros(n, n), l);
    debug_assert_eq!(m.ncols(), n + no);
    let d = linear_map_outer(&m, &w_bar.stack(v))?;
    if spectral_radius(&a_xi) >= 1.0 {
        return Err(Error::Synthesis("A_xi is not Schur".into()));
    }
    Ok(ErrorSystem {
        a_xi,
        d,
        sources: Some((m, w_bar.stack(v))),
    })
}

/// Outer box of Monte-Carlo trajectories of the error system started at the
/// origin. Rollout `i` draws from its own stream of `seed`, so the result
/// does not depend on scheduling. Not inflated.
pub fn estimate_mrpi_monte_carlo(
    err: &ErrorSystem,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
    sampling: DisturbanceSampling,
) -> Result<BoxSet> {
    if n_rollouts == 0 || horizon == 0 {
        return Err(Error::InvalidParameter(
            "Monte-Carlo tube needs at least one rollout and one step".into(),
        ));
    }
    let n = err.a_xi.nrows();
    if err.d.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: err.d.dim(),
            context: "disturbance box of the error system",
        });
    }
    let rollout = |i: usize| -> Result<BoxSet> {
        let mut rng = rng::stream(seed, &[rng::purpose::MRPI, i as u64]);
        let mut xi = DVector::zeros(n);
        let mut next = DVector::zeros(n);
        let mut b = BoxSet::zeros(n);
        for t in 0..horizon {
            let src = err.sources.as_ref().map_or(&err.d, |(_, b)| b);
            let raw = match sampling {
                DisturbanceSampling::Vertex => src.sample_vertex(&mut rng),
                DisturbanceSampling::Uniform => src.sample_uniform(&mut rng),
            };
            match &err.sources {
                Some((g, _)) => next.gemv(1.0, g, &DVector::from_vec(raw), 0.0),
                None => next.copy_from_slice(&raw),
            }
            next.gemv(1.0, &err.a_xi, &xi, 1.0);
            std::mem::swap(&mut xi, &mut next);
            let norm = xi.amax();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(Error::Unstable { rollout: i, step: t, norm });
            }
            for j in 0..n {
                b.lo[j] = b.lo[j].min(xi[j]);
                b.hi[j] = b.hi[j].max(xi[j]);
            }
        }
        Ok(b)
    };
    let boxes: Vec<BoxSet> = (0..n_rollouts)
        .into_par_iter()
        .map(rollout)
        .collect::<Result<_>>()?;
    let mut out = BoxSet::zeros(n);
    for b in &boxes {
        for j in 0..n {
            out.lo[j] = out.lo[j].min(b.lo[j]);
            out.hi[j] = out.hi[j].max(b.hi[j]);
        }
    }
    Ok(out)
}

/// Tighten state and input constraints by the tube. `s` is the stacked
/// `[estimation; control]` error box of dimension `2 n_x`.
pub fn tighten(x_set: &BoxSet, u_set: &BoxSet, s: &BoxSet, k: &DMatrix<f64>) -> Result<Tightened> {
    let n = x_set.dim();
    if s.dim() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: 2 * n,
            got: s.dim(),
            context: "tube box must stack estimation and control errors",
        });
    }
    let ii = DMatrix::from_fn(n, 2 * n, |i, j| if j == i || j == i + n { 1.0 } else { 0.0 });
    let z = linear_map_outer(&ii, s)?;
    let s_ctrl = s.slice(n, n);
    let ku = linear_map_outer(k, &s_ctrl)?;
    let x_bar = pontryagin_diff(x_set, &z).map_err(|e| match e {
        Error::EmptySet { components, .. } => Error::TubeTooLarge { set: "X_bar", components },
        other => other,
    })?;
    let u_bar = pontryagin_diff(u_set, &ku).map_err(|e| match e {
        Error::EmptySet { components, .. } => Error::TubeTooLarge { set: "U_bar", components },
        other => other,
    })?;
    Ok(Tightened { x_bar, u_bar, z, s_ctrl })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeSettings {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub inflation: f64,
    pub sampling: DisturbanceSampling,
}

impl Default for TubeSettings {
    fn default() -> Self {
        Self {
            n_rollouts: 2000,
            horizon: 300,
            inflation: 1.1,
            sampling: DisturbanceSampling::Uniform,
        }
    }
}

/// Full offline pipeline. `x_set`/`u_set` are the constraint boxes in the
/// coordinates the controller uses for states and (absolute) inputs.
pub fn synthesize(
    sys: &LinearSystem,
    cost: &CostSpec,
    unc: &UncertaintySpec,
    x_set: &BoxSet,
    u_set: &BoxSet,
    observer_pole_rate: f64,
    tube: &TubeSettings,
    seed: u64,
) -> Result<SynthesisResult> {
    cost.validate()?;
    unc.validate()?;
    let (p, k) = solve_dare(&sys.a, &sys.b, &cost.q, &cost.r)?;
    let l = observer_gain(&sys.a, &sys.c, observer_pole_rate, sys.dt)?;
    let err = build_error_system(sys, &k, &l, &unc.w_bar, &unc.v)?;
    let raw = estimate_mrpi_monte_carlo(&err, tube.n_rollouts, tube.horizon, seed, tube.sampling)?;
    let s = raw.inflate(tube.inflation);
    let t = tighten(x_set, u_set, &s, &k)?;
    Ok(SynthesisResult {
        k,
        l,
        p,
        s,
        z: t.z,
        s_ctrl: t.s_ctrl,
        x_bar_n: t.x_bar.clone(),
        x_bar: t.x_bar,
        u_bar: t.u_bar,
    })
}

/// Check the tightening invariants: `X_bar ⊕ Z ⊆ X` and `U_bar ⊕ K S_ctrl ⊆ U`.
pub fn tightening_is_sound(syn: &SynthesisResult, x_set: &BoxSet, u_set: &BoxSet) -> Result<bool> {
    let xz = minkowski_sum(&syn.x_bar, &syn.z)?;
    let uk = minkowski_sum(&syn.u_bar, &linear_map_outer(&syn.k, &syn.s_ctrl)?)?;
    let tol = 1e-9;
    let inside = |inner: &BoxSet, outer: &BoxSet| {
        (0..inner.dim()).all(|i| inner.lo[i] >= outer.lo[i] - tol && inner.hi[i] <= outer.hi[i] + tol)
    };
    Ok(inside(&xz, x_set) && inside(&uk, u_set))
}
