//! Online expert: robust tube MPC on the condensed QP, ancillary feedback,
//! Luenberger observer and input saturation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{from_linear_input, to_linear_input, Action, LinearSystem, MultirotorParams, State, NU, NX};
use crate::qp::{QpSettings, QpSolver, RowBlock};
use crate::setops::BoxSet;
use crate::synthesis::{CostSpec, SynthesisResult};

/// Desired states at the control period. Windows past the end repeat the
/// final sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub samples: Vec<State>,
    pub dt: f64,
}

impl ReferenceTrajectory {
    pub fn new(samples: Vec<State>, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter("reference needs at least one sample".into()));
        }
        if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter("reference samples must be finite".into()));
        }
        Ok(Self { samples, dt })
    }

    pub fn constant(x: State, len: usize, dt: f64) -> Self {
        Self { samples: vec![x; len.max(1)], dt }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn at(&self, t: usize) -> State {
        self.samples[t.min(self.samples.len() - 1)]
    }

    /// `N + 1` desired states starting at `t`.
    pub fn window(&self, t: usize, horizon: usize) -> Vec<State> {
        (0..=horizon).map(|i| self.at(t + i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub x_bar_star: State,
    /// Absolute input (thrust in N).
    pub u_bar_star: Action,
    pub predicted_states: Vec<State>,
    pub predicted_inputs: Vec<Action>,
    pub qp_iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Solved with softened state constraints.
    pub softened: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub x_hat: State,
}

/// Weight of the quadratic penalty on state-constraint softening.
pub const SOFT_PENALTY: f64 = 1e6;
const SOFT_EPS_REL: f64 = 1e-5;

/// Condensed RTMPC over `z = [x_bar_0; u_bar_0 .. u_bar_{N-1}]` with inputs
/// as deviations from hover. Factorizations persist between solves.
pub struct Rtmpc {
    horizon: usize,
    hover: Action,
    params: MultirotorParams,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    /// `x_bar_i = pred[i] z`.
    pred: Vec<DMatrix<f64>>,
    x_bar: BoxSet,
    x_bar_n: BoxSet,
    u_bar: BoxSet,
    s_ctrl: BoxSet,
    hard: QpSolver,
    soft: Option<QpSolver>,
    settings: QpSettings,
    warm: Option<(DVector<f64>, DVector<f64>)>,
}

impl Rtmpc {
    pub fn new(
        sys: &LinearSystem,
        cost: &CostSpec,
        syn: &SynthesisResult,
        params: &MultirotorParams,
        horizon: usize,
        settings: QpSettings,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("MPC horizon must be at least 1".into()));
        }
        if sys.nx() != NX || sys.nu() != NU {
            return Err(Error::DimensionMismatch { expected: NX, got: sys.nx(), context: "MPC expects the multirotor model" });
        }
        let nz = NX + horizon * NU;
        let mut pred = Vec::with_capacity(horizon + 1);
        let mut m = DMatrix::zeros(NX, nz);
        m.view_mut((0, 0), (NX, NX)).fill_with_identity();
        pred.push(m.clone());
        for i in 0..horizon {
            let mut next = &sys.a * &m;
            let mut cols = next.view_mut((0, NX + i * NU), (NX, NU));
            cols += &sys.b;
            m = next;
            pred.push(m.clone());
        }
        let mut h = DMatrix::zeros(nz, nz);
        for (i, mi) in pred.iter().enumerate() {
            let w = if i == horizon { &syn.p } else { &cost.q };
            h += mi.transpose() * w * mi;
        }
        for i in 0..horizon {
            let mut blk = h.view_mut((NX + i * NU, NX + i * NU), (NU, NU));
            blk += &cost.r;
        }
        h *= 2.0;
        h = (&h + h.transpose()) * 0.5;

        let a_hard = constraint_matrix(&pred, horizon, None);
        let blocks = row_blocks(horizon);
        let hard = QpSolver::new(h, a_hard, blocks, settings)?;
        Ok(Self {
            horizon,
            hover: params.hover_input(),
            params: params.clone(),
            q: cost.q.clone(),
            p: syn.p.clone(),
            pred,
            x_bar: syn.x_bar.clone(),
            x_bar_n: syn.x_bar_n.clone(),
            u_bar: syn.u_bar.clone(),
            s_ctrl: syn.s_ctrl.clone(),
            hard,
            soft: None,
            settings,
            warm: None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    fn build_soft(&self) -> Result<QpSolver> {
        let nz = NX + self.horizon * NU;
        let mut h = DMatrix::zeros(nz + NX, nz + NX);
        h.view_mut((0, 0), (nz, nz)).copy_from(self.hard.hessian());
        for j in 0..NX {
            h[(nz + j, nz + j)] = 2.0 * SOFT_PENALTY;
        }
        let a = constraint_matrix(&self.pred, self.horizon, Some(NX));
        // the slack penalty dwarfs the tracking terms, so stationarity is
        // judged relative to the gradient scale
        let settings = QpSettings { eps_rel: self.settings.eps_rel.max(SOFT_EPS_REL), ..self.settings };
        QpSolver::new(h, a, row_blocks(self.horizon), settings)
    }

    /// Linear term and the constant that makes the reported objective the
    /// full tracking cost.
    fn linear_term(&self, window: &[State]) -> (DVector<f64>, f64) {
        let nz = NX + self.horizon * NU;
        let mut f = DVector::zeros(nz);
        let mut c = 0.0;
        for (i, mi) in self.pred.iter().enumerate() {
            let w = if i == self.horizon { &self.p } else { &self.q };
            let r = DVector::from_column_slice(window[i].as_slice());
            let wr = w * &r;
            f.gemv_tr(-2.0, mi, &wr, 1.0);
            c += r.dot(&wr);
        }
        (f, c)
    }

    fn bounds(&self, x_hat: &State, extra: usize) -> (DVector<f64>, DVector<f64>) {
        let n = self.horizon;
        let m = (n + 1) * NX + n * NU + NX + extra;
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for i in 0..=n {
            let set = if i == n { &self.x_bar_n } else { &self.x_bar };
            for j in 0..NX {
                l[i * NX + j] = set.lo[j];
                u[i * NX + j] = set.hi[j];
            }
        }
        let off = (n + 1) * NX;
        for i in 0..n {
            for j in 0..NU {
                l[off + i * NU + j] = self.u_bar.lo[j] - self.hover[j];
                u[off + i * NU + j] = self.u_bar.hi[j] - self.hover[j];
            }
        }
        let off = off + n * NU;
        // x_hat - x_bar_0 in S_ctrl  <=>  x_bar_0 in [x_hat - hi, x_hat - lo]
        for j in 0..NX {
            l[off + j] = x_hat[j] - self.s_ctrl.hi[j];
            u[off + j] = x_hat[j] - self.s_ctrl.lo[j];
        }
        for j in 0..extra {
            l[off + NX + j] = f64::NEG_INFINITY;
            u[off + NX + j] = f64::INFINITY;
        }
        (l, u)
    }

    /// Hard-constrained solve.
    pub fn solve(&mut self, x_hat: &State, window: &[State]) -> Result<MpcSolution> {
        self.check_window(x_hat, window)?;
        let (f, c) = self.linear_term(window);
        let (l, u) = self.bounds(x_hat, 0);
        let warm = self.shifted_warm_start(self.hard.n(), self.hard.m());
        let sol = self
            .hard
            .solve(&f, &l, &u, warm.as_ref().map(|(x, y)| (x, y)))?;
        self.warm = Some((sol.x.clone(), sol.y.clone()));
        Ok(self.package(&sol.x, sol.objective + c, sol.iterations, sol.primal_residual, sol.dual_residual, false))
    }

    /// Solve with the state constraints shifted by a penalized per-dimension
    /// slack. Input and initial-state constraints stay hard.
    pub fn solve_soft(&mut self, x_hat: &State, window: &[State]) -> Result<MpcSolution> {
        self.check_window(x_hat, window)?;
        if self.soft.is_none() {
            self.soft = Some(self.build_soft()?);
        }
        let nz = NX + self.horizon * NU;
        let (f0, c) = self.linear_term(window);
        let mut f = DVector::zeros(nz + NX);
        f.rows_mut(0, nz).copy_from(&f0);
        let (l, u) = self.bounds(x_hat, 0);
        let soft = self.soft.as_mut().expect("built above");
        let sol = soft.solve(&f, &l, &u, None)?;
        self.warm = None;
        let z = sol.x.rows(0, nz).into_owned();
        Ok(self.package(&z, sol.objective + c, sol.iterations, sol.primal_residual, sol.dual_residual, true))
    }

    fn check_window(&self, x_hat: &State, window: &[State]) -> Result<()> {
        if window.len() != self.horizon + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.horizon + 1,
                got: window.len(),
                context: "reference window length",
            });
        }
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("state estimate is not finite".into()));
        }
        Ok(())
    }

    fn shifted_warm_start(&self, n: usize, m: usize) -> Option<(DVector<f64>, DVector<f64>)> {
        let (x, y) = self.warm.as_ref()?;
        if x.len() != n || y.len() != m {
            return None;
        }
        let mut xs = x.clone();
        // x_bar_0 <- predicted x_bar_1; inputs shift left, last repeated
        let x1 = &self.pred[1] * x;
        xs.rows_mut(0, NX).copy_from(&x1);
        let nu_total = self.horizon * NU;
        for i in 0..nu_total - NU {
            xs[NX + i] = x[NX + NU + i];
        }
        Some((xs, y.clone()))
    }

    fn package(&self, z: &DVector<f64>, objective: f64, iters: usize, rp: f64, rd: f64, softened: bool) -> MpcSolution {
        let predicted_states: Vec<State> = self
            .pred
            .iter()
            .map(|m| State::from_column_slice((m * z).as_slice()))
            .collect();
        let predicted_inputs: Vec<Action> = (0..self.horizon)
            .map(|i| from_linear_input(&z.rows(NX + i * NU, NU).into_owned(), &self.params))
            .collect();
        MpcSolution {
            x_bar_star: predicted_states[0],
            u_bar_star: predicted_inputs[0],
            predicted_states,
            predicted_inputs,
            qp_iterations: iters,
            objective,
            primal_residual: rp,
            dual_residual: rd,
            softened,
        }
    }
}

fn row_blocks(n: usize) -> Vec<RowBlock> {
    let s = n * NX;
    let t = s + NX;
    let i = t + n * NU;
    vec![
        RowBlock { name: "state", rows: 0..s },
        RowBlock { name: "terminal_state", rows: s..t },
        RowBlock { name: "input", rows: t..i },
        RowBlock { name: "initial_state", rows: i..i + NX },
    ]
}

/// Rows: states `0..=N`, inputs, initial state. With `slack = Some(k)` the
/// state rows get `-I` on `k` trailing slack columns.
fn constraint_matrix(pred: &[DMatrix<f64>], n: usize, slack: Option<usize>) -> DMatrix<f64> {
    let nz = NX + n * NU;
    let ns = slack.unwrap_or(0);
    let m = (n + 1) * NX + n * NU + NX;
    let mut a = DMatrix::zeros(m, nz + ns);
    for (i, mi) in pred.iter().enumerate() {
        a.view_mut((i * NX, 0), (NX, nz)).copy_from(mi);
        for j in 0..ns {
            a[(i * NX + j, nz + j)] = -1.0;
        }
    }
    let off = (n + 1) * NX;
    for i in 0..n * NU {
        a[(off + i, NX + i)] = 1.0;
    }
    let off = off + n * NU;
    for j in 0..NX {
        a[(off + j, j)] = 1.0;
    }
    a
}

/// `u = u_bar* + K (x_hat - x_bar*)`, before saturation.
pub fn ancillary(x_hat: &State, sol: &MpcSolution, k: &DMatrix<f64>) -> Action {
    let e = DVector::from_column_slice((x_hat - sol.x_bar_star).as_slice());
    let fb = k * e;
    sol.u_bar_star + Action::from_column_slice(fb.as_slice())
}

pub fn saturate(u: &Action, set: &BoxSet) -> Action {
    Action::from_fn(|i, _| u[i].clamp(set.lo[i], set.hi[i]))
}

/// `x_hat+ = A x_hat + B du + L (obs - C x_hat)` with `du` the input
/// deviation from hover.
pub fn observer_step(
    est: &EstimatorState,
    du: &DVector<f64>,
    obs: &DVector<f64>,
    sys: &LinearSystem,
    l: &DMatrix<f64>,
) -> EstimatorState {
    let x = DVector::from_column_slice(est.x_hat.as_slice());
    let next = observer_update(&x, du, obs, sys, l);
    EstimatorState { x_hat: State::from_column_slice(next.as_slice()) }
}

/// Dimension-agnostic form of [`observer_step`].
pub fn observer_update(
    x_hat: &DVector<f64>,
    du: &DVector<f64>,
    obs: &DVector<f64>,
    sys: &LinearSystem,
    l: &DMatrix<f64>,
) -> DVector<f64> {
    let innov = obs - &sys.c * x_hat;
    &sys.a * x_hat + &sys.b * du + l * innov
}

/// One expert decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStep {
    pub x_hat: State,
    /// Executed (saturated) action.
    pub u: Action,
    pub solution: MpcSolution,
}

/// Observer + RTMPC + ancillary law + saturation, stateful across an episode.
pub struct Expert {
    pub mpc: Rtmpc,
    sys: LinearSystem,
    syn: SynthesisResult,
    params: MultirotorParams,
    u_set: BoxSet,
    est: Option<EstimatorState>,
    /// Fall back to the softened QP instead of failing.
    pub allow_soft: bool,
}

impl Expert {
    pub fn new(
        sys: &LinearSystem,
        cost: &CostSpec,
        syn: &SynthesisResult,
        params: &MultirotorParams,
        u_set: &BoxSet,
        horizon: usize,
        settings: QpSettings,
    ) -> Result<Self> {
        Ok(Self {
            mpc: Rtmpc::new(sys, cost, syn, params, horizon, settings)?,
            sys: sys.clone(),
            syn: syn.clone(),
            params: params.clone(),
            u_set: u_set.clone(),
            est: None,
            allow_soft: true,
        })
    }

    pub fn reset(&mut self) {
        self.est = None;
        self.mpc.reset();
    }

    pub fn synthesis(&self) -> &SynthesisResult {
        &self.syn
    }

    pub fn estimate(&self) -> Option<State> {
        self.est.map(|e| e.x_hat)
    }

    /// Plan from the current estimate without touching the observer.
    pub fn plan(&mut self, x_hat: &State, window: &[State]) -> Result<MpcSolution> {
        match self.mpc.solve(x_hat, window) {
            Ok(s) => Ok(s),
            Err(e @ (Error::Infeasible { .. } | Error::NotConverged { .. })) if self.allow_soft => {
                self.mpc.solve_soft(x_hat, window).map_err(|_| e)
            }
            Err(e) => Err(e),
        }
    }

    /// Saturated ancillary action for a given estimate and plan.
    pub fn action(&self, x_hat: &State, sol: &MpcSolution) -> Action {
        saturate(&ancillary(x_hat, sol, &self.syn.k), &self.u_set)
    }

    /// Act on measurement `obs` (full noisy state). The first call
    /// initializes the estimate to `obs`; afterwards the estimate is the
    /// observer prediction from the previous step.
    pub fn step(&mut self, obs: &State, window: &[State]) -> Result<ExpertStep> {
        let x_hat = self.est.map_or(*obs, |e| e.x_hat);
        let solution = self.plan(&x_hat, window)?;
        let u = self.action(&x_hat, &solution);
        Ok(ExpertStep { x_hat, u, solution })
    }

    /// Advance the observer with the action actually executed at this step
    /// (which differs from the expert's under DAgger mixing).
    pub fn observe(&mut self, x_hat: &State, executed: &Action, obs: &State) {
        let du = to_linear_input(executed, &self.params);
        let next = observer_step(
            &EstimatorState { x_hat: *x_hat },
            &du,
            &DVector::from_column_slice(obs.as_slice()),
            &self.sys,
            &self.syn.l,
        );
        self.est = Some(next);
    }
}
