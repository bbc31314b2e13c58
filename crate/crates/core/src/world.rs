//! Episode simulation: reference trajectories, disturbance and sensing-noise
//! realizations, closed-loop rollouts of any controller, and scoring.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{NoiseMode, PlantMode, RunConfig, TrajectoryKind};
use crate::control::{saturate, Expert, ReferenceTrajectory};
use crate::error::{Error, Result};
use crate::model::{force_to_state_map, simulate_period, to_linear_input, Action, LinearSystem, MultirotorParams, State, NX, NU};
use crate::rng::{self, purpose};
use crate::setops::BoxSet;
use crate::synthesis::{CostSpec, SynthesisResult};
use crate::vision::{other_from_state, pose_from_state, render, apply_visual_stress, CameraRig, Image, Observation, StressKind, Texture};

/// Gerono lemniscate: loops per duration and peak speed at unit scale.
pub const LEMNISCATE_LOOPS: f64 = 2.0;
pub const LEMNISCATE_PEAK_SPEED: f64 = 3.15;
pub const CIRCLE_RADIUS: f64 = 3.0;
pub const CIRCLE_PEAK_SPEED: f64 = 2.0;

/// Desired state at time `t`: analytic position and velocity, level attitude.
pub fn reference_state(kind: TrajectoryKind, t: f64, duration: f64, speed_scale: f64) -> State {
    let mut x = State::zeros();
    match kind {
        TrajectoryKind::Lemniscate => {
            let w = std::f64::consts::TAU * LEMNISCATE_LOOPS / duration;
            // peak speed a w sqrt(2) is reached at the crossing
            let a = speed_scale * LEMNISCATE_PEAK_SPEED / (w * std::f64::consts::SQRT_2);
            x[0] = a * (w * t).sin();
            x[1] = 0.5 * a * (2.0 * w * t).sin();
            x[3] = a * w * (w * t).cos();
            x[4] = a * w * (2.0 * w * t).cos();
        }
        TrajectoryKind::Circle => {
            let r = CIRCLE_RADIUS;
            let w = speed_scale * CIRCLE_PEAK_SPEED / r;
            x[0] = -r + r * (w * t).cos();
            x[1] = r * (w * t).sin();
            x[3] = -r * w * (w * t).sin();
            x[4] = r * w * (w * t).cos();
        }
        TrajectoryKind::Hover => {}
    }
    x
}

pub fn circle_center() -> Vector3<f64> {
    Vector3::new(-CIRCLE_RADIUS, 0.0, 0.0)
}

/// `round(duration / dt)` samples starting at `t = 0`.
pub fn make_reference(kind: TrajectoryKind, duration: f64, speed_scale: f64, dt: f64) -> Result<ReferenceTrajectory> {
    if !(duration > 0.0 && dt > 0.0 && speed_scale > 0.0) {
        return Err(Error::InvalidParameter("reference needs positive duration, dt and speed scale".into()));
    }
    let n = ((duration / dt).round() as usize).max(1);
    let samples = (0..n).map(|i| reference_state(kind, i as f64 * dt, duration, speed_scale)).collect();
    ReferenceTrajectory::new(samples, dt)
}

/// Sensing noise: `three_sigma` gives the Gaussian spread and the bounded
/// set `V` alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mode: NoiseMode,
    pub three_sigma: [f64; NX],
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self { mode: NoiseMode::Zero, three_sigma: [0.0; NX] }
    }

    pub fn bound(&self) -> BoxSet {
        BoxSet::symmetric(&self.three_sigma).expect("non-negative noise bounds")
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> State {
        match self.mode {
            NoiseMode::Zero => State::zeros(),
            NoiseMode::Gaussian => State::from_fn(|i, _| {
                let s = self.three_sigma[i] / 3.0;
                if s > 0.0 { Normal::new(0.0, s).expect("finite sigma").sample(rng) } else { 0.0 }
            }),
            NoiseMode::Bounded => State::from_fn(|i, _| {
                let h = self.three_sigma[i];
                if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 }
            }),
        }
    }
}

/// Disturbance statistics of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    /// Wind magnitude band as fractions of the weight; `None` for no wind.
    pub wind_band: Option<[f64; 2]>,
    pub noise: NoiseModel,
}

impl DisturbanceModel {
    pub fn calm() -> Self {
        Self { wind_band: None, noise: NoiseModel::zero() }
    }

    /// Draw one episode's constant wind and sensing stream.
    pub fn realize(&self, weight: f64, seed: u64, tags: &[u64]) -> DisturbanceRealization {
        let wind_force = match self.wind_band {
            Some([lo, hi]) => {
                let mut r = rng::stream(seed, &[&[purpose::WIND], tags].concat());
                let dir: [f64; 3] = UnitSphere.sample(&mut r);
                let mag = if hi > lo { r.random_range(lo..=hi) } else { lo } * weight;
                Vector3::from(dir) * mag
            }
            None => Vector3::zeros(),
        };
        let sensing_seed = rng::stream(seed, &[&[purpose::SENSING], tags].concat()).random();
        DisturbanceRealization { wind_force, noise: self.noise.clone(), sensing_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceRealization {
    pub wind_force: Vector3<f64>,
    pub noise: NoiseModel,
    pub sensing_seed: u64,
}

impl DisturbanceRealization {
    pub fn calm() -> Self {
        Self { wind_force: Vector3::zeros(), noise: NoiseModel::zero(), sensing_seed: 0 }
    }
}

/// Full noisy measurement for the expert and the policy's low-dimensional
/// part (no horizontal position).
pub fn sense<R: rand::Rng + ?Sized>(x: &State, noise: &NoiseModel, rng: &mut R) -> (State, [f64; 6]) {
    let o = x + noise.sample(rng);
    (o, other_from_state(&o))
}

pub fn initial_state(half_width: f64, seed: u64, tags: &[u64]) -> State {
    let mut r = rng::stream(seed, &[&[purpose::INITIAL_STATE], tags].concat());
    State::from_fn(|_, _| if half_width > 0.0 { r.random_range(-half_width..=half_width) } else { 0.0 })
}

/// Camera and ground used to produce policy images.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rig: CameraRig,
    pub texture: Texture,
    pub anchor: Vector3<f64>,
}

impl Scene {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self { rig: CameraRig::from_config(&cfg.camera)?, texture: cfg.texture.clone(), anchor: Vector3::from(cfg.world.anchor) })
    }

    /// Image at the nominal extrinsics.
    pub fn render_state(&self, x: &State) -> Result<Image> {
        let mut unused = rng::stream(0, &[]);
        render(&pose_from_state(x, &self.anchor, &self.rig, None, &mut unused), &self.rig, &self.texture)
    }
}

/// Plant, constraints and sensing shared by all episodes of a run.
#[derive(Debug, Clone)]
pub struct Environment {
    pub params: MultirotorParams,
    pub sys: LinearSystem,
    pub force_map: DMatrix<f64>,
    pub cost: CostSpec,
    pub x_set: BoxSet,
    pub u_set: BoxSet,
    pub plant: PlantMode,
    pub dt_sim: f64,
    pub horizon: usize,
    pub t_max: usize,
    pub scene: Scene,
    /// Corruption applied to policy images.
    pub visual_stress: Option<(StressKind, f64)>,
}

impl Environment {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            params: cfg.model,
            sys: cfg.linear_system()?,
            force_map: force_to_state_map(&cfg.model, cfg.control.dt)?,
            cost: cfg.cost()?,
            x_set: cfg.x_set()?,
            u_set: cfg.u_set()?,
            plant: cfg.world.plant,
            dt_sim: cfg.control.dt_sim,
            horizon: cfg.control.horizon,
            t_max: cfg.world.t_max,
            scene: Scene::from_config(cfg)?,
            visual_stress: None,
        })
    }

    pub fn step(&self, x: &State, u: &Action, wind: &Vector3<f64>) -> State {
        match self.plant {
            PlantMode::Nonlinear => simulate_period(x, u, wind, &self.params, self.sys.dt, self.dt_sim),
            PlantMode::Linear => {
                let du = to_linear_input(u, &self.params);
                let next = self.sys.step(&DVector::from_column_slice(x.as_slice()), &du) + &self.force_map * DVector::from_column_slice(wind.as_slice());
                State::from_column_slice(next.as_slice())
            }
        }
    }

    /// `||x - r||_Q^2 + ||u - u_hover||_R^2`.
    pub fn stage_cost(&self, x: &State, r: &State, u: &Action) -> f64 {
        let e = DVector::from_column_slice((x - r).as_slice());
        let du = to_linear_input(u, &self.params);
        (e.transpose() * &self.cost.q * &e)[(0, 0)] + (du.transpose() * &self.cost.r * &du)[(0, 0)]
    }
}

pub struct StepInput<'a> {
    pub t: usize,
    /// Noisy full state.
    pub measurement: &'a State,
    /// Present when the controller asked for images.
    pub observation: Option<&'a Observation>,
    /// `N + 1` desired states.
    pub window: &'a [State],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub u: Action,
    /// Controller's state estimate (observer or auxiliary head).
    pub x_hat: State,
    pub x_bar_star: Option<State>,
    pub u_bar_star: Option<Action>,
    pub softened: bool,
}

/// Anything that maps observations and a reference window to an action.
pub trait Controller {
    fn needs_image(&self) -> bool {
        false
    }
    fn reset(&mut self);
    fn act(&mut self, input: &StepInput) -> Result<Decision>;
    /// Called after the plant executed `executed` at this step.
    fn observe(&mut self, _executed: &Action, _measurement: &State) {}
}

/// The tube MPC expert as a [`Controller`].
pub struct ExpertController {
    pub expert: Expert,
    last_x_hat: Option<State>,
}

impl ExpertController {
    pub fn new(expert: Expert) -> Self {
        Self { expert, last_x_hat: None }
    }

    pub fn from_config(cfg: &RunConfig, syn: &SynthesisResult) -> Result<Self> {
        let expert = Expert::new(&cfg.linear_system()?, &cfg.cost()?, syn, &cfg.model, &cfg.u_set()?, cfg.control.horizon, cfg.control.qp)?;
        Ok(Self::new(expert))
    }
}

impl Controller for ExpertController {
    fn reset(&mut self) {
        self.expert.reset();
        self.last_x_hat = None;
    }

    fn act(&mut self, input: &StepInput) -> Result<Decision> {
        let s = self.expert.step(input.measurement, input.window)?;
        self.last_x_hat = Some(s.x_hat);
        Ok(Decision {
            u: s.u,
            x_hat: s.x_hat,
            x_bar_star: Some(s.solution.x_bar_star),
            u_bar_star: Some(s.solution.u_bar_star),
            softened: s.solution.softened,
        })
    }

    fn observe(&mut self, executed: &Action, measurement: &State) {
        if let Some(x_hat) = self.last_x_hat {
            self.expert.observe(&x_hat, executed, measurement);
        }
    }
}

/// Constant action regardless of input.
pub struct ConstantController(pub Action);

impl Controller for ConstantController {
    fn reset(&mut self) {}

    fn act(&mut self, input: &StepInput) -> Result<Decision> {
        Ok(Decision { u: self.0, x_hat: *input.measurement, x_bar_star: None, u_bar_star: None, softened: false })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: State,
    pub x_hat: State,
    /// Executed (saturated) action.
    pub u: Action,
    pub x_bar_star: Option<State>,
    pub u_bar_star: Option<Action>,
    pub measurement: State,
    pub reference: State,
    pub cost: f64,
    pub softened: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_length: usize,
    pub success: bool,
    pub stage_cost: f64,
    pub rms_xyz: f64,
    pub trace: Vec<StepRecord>,
    /// Final state (the one that left the box on failure).
    pub final_state: State,
    /// Mean PSNR of corrupted policy images, when stress is applied.
    pub mean_psnr: Option<f64>,
}

/// Closed-loop rollout until the state leaves `X` or `t_max` steps pass.
/// Controller errors are returned with the step index.
pub fn run_episode(
    ctrl: &mut dyn Controller,
    env: &Environment,
    reference: &ReferenceTrajectory,
    dist: &DisturbanceRealization,
    x0: &State,
    t_max: usize,
) -> Result<EpisodeResult> {
    if t_max == 0 {
        return Err(Error::InvalidParameter("T_max must be at least 1".into()));
    }
    ctrl.reset();
    let mut sense_rng = rng::stream(dist.sensing_seed, &[purpose::SENSING]);
    let mut stress_rng = rng::stream(dist.sensing_seed, &[purpose::VISUAL_STRESS]);
    let mut x = *x0;
    let mut trace = Vec::with_capacity(t_max);
    let (mut cost, mut sq) = (0.0, 0.0);
    let (mut psnr_sum, mut psnr_n) = (0.0, 0usize);
    for t in 0..t_max {
        if !env.x_set.contains(x.as_slice()) {
            break;
        }
        let (meas, other) = sense(&x, &dist.noise, &mut sense_rng);
        let window = reference.window(t, env.horizon);
        let observation = if ctrl.needs_image() {
            let mut image = env.scene.render_state(&x).map_err(|e| e.at_step(t))?;
            if let Some((kind, mag)) = env.visual_stress {
                let (img, psnr) = apply_visual_stress(&image, kind, mag, &mut stress_rng).map_err(|e| e.at_step(t))?;
                image = img;
                if psnr.is_finite() {
                    psnr_sum += psnr;
                    psnr_n += 1;
                }
            }
            Some(Observation { image, other })
        } else {
            None
        };
        let input = StepInput { t, measurement: &meas, observation: observation.as_ref(), window: &window };
        let d = ctrl.act(&input).map_err(|e| e.at_step(t))?;
        if d.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("controller produced a non-finite action".into()).at_step(t));
        }
        let u = saturate(&d.u, &env.u_set);
        let r = window[0];
        let c = env.stage_cost(&x, &r, &u);
        cost += c;
        sq += (x.fixed_rows::<3>(0) - r.fixed_rows::<3>(0)).norm_squared();
        trace.push(StepRecord {
            t,
            x,
            x_hat: d.x_hat,
            u,
            x_bar_star: d.x_bar_star,
            u_bar_star: d.u_bar_star,
            measurement: meas,
            reference: r,
            cost: c,
            softened: d.softened,
        });
        x = env.step(&x, &u, &dist.wind_force);
        ctrl.observe(&u, &meas);
    }
    let len = trace.len();
    Ok(EpisodeResult {
        episode_length: len,
        success: len == t_max,
        stage_cost: cost,
        rms_xyz: if len > 0 { (sq / len as f64).sqrt() } else { 0.0 },
        trace,
        final_state: x,
        mean_psnr: (psnr_n > 0).then(|| psnr_sum / psnr_n as f64),
    })
}

/// Seeds of one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeKey {
    pub seed: u64,
    pub env_tag: u64,
    pub index: u64,
}

impl EpisodeKey {
    pub fn tags(&self) -> [u64; 2] {
        [self.env_tag, self.index]
    }
}

/// `seeds x per_seed` keys for an environment.
pub fn episode_keys(base_seed: u64, env_tag: u64, seeds: usize, per_seed: usize) -> Vec<EpisodeKey> {
    (0..seeds as u64)
        .flat_map(|s| (0..per_seed as u64).map(move |i| EpisodeKey { seed: base_seed.wrapping_add(s), env_tag, index: i }))
        .collect()
}

/// Run one episode per key in parallel; each episode builds its own
/// controller so results do not depend on scheduling.
pub fn run_batch<C, F>(
    make: F,
    env: &Environment,
    reference: &ReferenceTrajectory,
    model: &DisturbanceModel,
    x0_half_width: f64,
    keys: &[EpisodeKey],
) -> Result<Vec<EpisodeResult>>
where
    C: Controller,
    F: Fn() -> Result<C> + Sync,
{
    keys.par_iter()
        .map(|k| {
            let mut c = make()?;
            let dist = model.realize(env.params.weight(), k.seed, &k.tags());
            let x0 = initial_state(x0_half_width, k.seed, &k.tags());
            run_episode(&mut c, env, reference, &dist, &x0, env.t_max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    /// Half-width of the 95% interval of the mean episode length.
    pub ci95: f64,
    /// `None` when no episode succeeded.
    pub expert_gap: Option<f64>,
    pub mean_stage_cost: Option<f64>,
    pub mean_rms_xyz: f64,
}

/// Mean stage cost over successful episodes.
pub fn mean_success_cost(results: &[EpisodeResult]) -> Option<f64> {
    let ok: Vec<f64> = results.iter().filter(|r| r.success).map(|r| r.stage_cost).collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

pub fn score(results: &[EpisodeResult], expert_cost: f64) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::InvalidParameter("cannot score an empty set of episodes".into()));
    }
    if !(expert_cost > 0.0) {
        return Err(Error::InvalidParameter("expert cost must be positive".into()));
    }
    let n = results.len() as f64;
    let lens: Vec<f64> = results.iter().map(|r| r.episode_length as f64).collect();
    let mean = lens.iter().sum::<f64>() / n;
    let ci95 = if results.len() > 1 {
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    let mean_cost = mean_success_cost(results);
    Ok(Metrics {
        episodes: results.len(),
        success_rate: 100.0 * results.iter().filter(|r| r.success).count() as f64 / n,
        mean_episode_length: mean,
        ci95,
        expert_gap: mean_cost.map(|c| 100.0 * (c - expert_cost) / expert_cost),
        mean_stage_cost: mean_cost,
        mean_rms_xyz: results.iter().map(|r| r.rms_xyz).sum::<f64>() / n,
    })
}

fn push_state(row: &mut Vec<String>, v: Option<&[f64]>, n: usize) {
    match v {
        Some(v) => row.extend(v.iter().map(|x| x.to_string())),
        None => row.extend(std::iter::repeat_n("nan".to_string(), n)),
    }
}

pub fn trace_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..NX).map(|i| format!("x{i}")));
    h.extend((0..NX).map(|i| format!("x_hat{i}")));
    h.extend((0..NU).map(|i| format!("u{i}")));
    h.extend((0..NX).map(|i| format!("x_bar{i}")));
    h.push("cost".into());
    h
}

/// One row per step: `t, x(8), x_hat(8), u(3), x_bar*(8), cost`, preceded
/// by `#` comment lines.
pub fn write_trace_csv<W: Write>(mut w: W, result: &EpisodeResult, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(trace_header())?;
    for s in &result.trace {
        let mut row = vec![s.t.to_string()];
        push_state(&mut row, Some(s.x.as_slice()), NX);
        push_state(&mut row, Some(s.x_hat.as_slice()), NX);
        push_state(&mut row, Some(s.u.as_slice()), NU);
        push_state(&mut row, s.x_bar_star.as_ref().map(|v| v.as_slice()), NX);
        row.push(s.cost.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::synthesize;

    fn lemniscate_speed(scale: f64) -> f64 {
        let r = make_reference(TrajectoryKind::Lemniscate, 30.0, scale, 0.1).unwrap();
        r.samples
            .windows(2)
            .map(|w| (w[1].fixed_rows::<3>(0) - w[0].fixed_rows::<3>(0)).norm() / 0.1)
            .fold(0.0, f64::max)
    }

    #[test]
    fn reference_shapes() {
        let r = make_reference(TrajectoryKind::Lemniscate, 30.0, 1.0, 0.1).unwrap();
        assert_eq!(r.len(), 300);
        let start = reference_state(TrajectoryKind::Lemniscate, 0.0, 30.0, 1.0);
        let end = reference_state(TrajectoryKind::Lemniscate, 30.0, 30.0, 1.0);
        assert!((start - end).fixed_rows::<3>(0).amax() < 1e-9);
        assert!(r.samples.iter().all(|s| s[6] == 0.0 && s[7] == 0.0));

        let c = make_reference(TrajectoryKind::Circle, 30.0, 1.0, 0.1).unwrap();
        for s in &c.samples {
            let d = s.fixed_rows::<3>(0) - circle_center();
            assert!((d.norm() - CIRCLE_RADIUS).abs() < 1e-9);
            assert!((s.fixed_rows::<3>(3).norm() - CIRCLE_PEAK_SPEED).abs() < 1e-9);
        }
        assert!(make_reference(TrajectoryKind::Circle, 0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn lemniscate_speed_scales_linearly() {
        let (a, b) = (lemniscate_speed(1.0), lemniscate_speed(0.5));
        assert!((a / b - 2.0).abs() < 1e-9);
        // finite differences see slightly less than the analytic peak
        assert!(a < LEMNISCATE_PEAK_SPEED && a > 0.99 * LEMNISCATE_PEAK_SPEED);
    }

    #[test]
    fn analytic_velocity_matches_positions() {
        for kind in [TrajectoryKind::Lemniscate, TrajectoryKind::Circle] {
            for k in 0..50 {
                let t = 0.6 * k as f64;
                let h = 1e-6;
                let fd = (reference_state(kind, t + h, 30.0, 1.0) - reference_state(kind, t - h, 30.0, 1.0)) / (2.0 * h);
                let x = reference_state(kind, t, 30.0, 1.0);
                assert!((fd.fixed_rows::<3>(0) - x.fixed_rows::<3>(3)).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn sensing_modes() {
        let mut r = rng::stream(3, &[]);
        let x = State::from_element(0.3);
        let zero = NoiseModel::zero();
        let (o, other) = sense(&x, &zero, &mut r);
        assert_eq!(o, x);
        assert_eq!(other, [0.3; 6]);

        let three_sigma = RunConfig::default().uncertainty.v_three_sigma;
        let g = NoiseModel { mode: NoiseMode::Gaussian, three_sigma };
        let n = 10_000;
        let z: Vec<f64> = (0..n).map(|_| sense(&x, &g, &mut r).1[0] - 0.3).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std / (0.4 / 3.0) - 1.0).abs() < 0.1, "{std}");

        let b = NoiseModel { mode: NoiseMode::Bounded, three_sigma };
        let v = b.bound();
        for _ in 0..n {
            assert!(v.contains((sense(&x, &b, &mut r).0 - x).as_slice()));
        }
    }

    #[test]
    fn wind_band_and_determinism() {
        let m = DisturbanceModel { wind_band: Some([0.10, 0.19]), noise: NoiseModel::zero() };
        for i in 0..500 {
            let d = m.realize(9.81, 4, &[1, i]);
            let f = d.wind_force.norm() / 9.81;
            assert!((0.10 - 1e-12..=0.19 + 1e-12).contains(&f));
        }
        assert_eq!(m.realize(9.81, 4, &[1, 2]), m.realize(9.81, 4, &[1, 2]));
        assert_ne!(m.realize(9.81, 4, &[1, 2]), m.realize(9.81, 4, &[1, 3]));
        assert_eq!(initial_state(0.1, 1, &[2]), initial_state(0.1, 1, &[2]));
        assert!(initial_state(0.1, 1, &[2]).amax() <= 0.1);
    }

    #[test]
    fn score_rules() {
        let ep = |len: usize, cost: f64| EpisodeResult {
            episode_length: len,
            success: len == 300,
            stage_cost: cost,
            rms_xyz: 0.0,
            trace: Vec::new(),
            final_state: State::zeros(),
            mean_psnr: None,
        };
        let m = score(&[ep(300, 5.0), ep(300, 5.0)], 5.0).unwrap();
        assert_eq!(m.success_rate, 100.0);
        assert_eq!(m.expert_gap, Some(0.0));
        let m = score(&[ep(300, 6.0), ep(100, 50.0)], 5.0).unwrap();
        assert_eq!(m.success_rate, 50.0);
        assert!((m.expert_gap.unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(m.mean_episode_length, 200.0);
        let m = score(&[ep(10, 1.0)], 5.0).unwrap();
        assert_eq!(m.expert_gap, None);
        assert!(score(&[], 1.0).is_err());
        assert!(score(&[ep(300, 1.0)], 0.0).is_err());
    }

    fn env_and_syn() -> (RunConfig, Environment, SynthesisResult) {
        let mut cfg = RunConfig::default();
        cfg.control.tube.n_rollouts = 300;
        let env = Environment::from_config(&cfg).unwrap();
        let syn = synthesize(&env.sys, &env.cost, &cfg.uncertainty_spec().unwrap(), &env.x_set, &env.u_set, 30.0, &cfg.control.tube, 1).unwrap();
        (cfg, env, syn)
    }

    #[test]
    fn expert_regulates_hover_and_max_tilt_fails() {
        let (cfg, env, syn) = env_and_syn();
        let reference = make_reference(TrajectoryKind::Hover, 30.0, 1.0, 0.1).unwrap();
        let mut expert = ExpertController::from_config(&cfg, &syn).unwrap();
        let res = run_episode(&mut expert, &env, &reference, &DisturbanceRealization::calm(), &State::zeros(), 300).unwrap();
        assert!(res.success);
        assert_eq!(res.episode_length, 300);
        assert!(res.stage_cost < 1e-4, "{}", res.stage_cost);

        let mut tilt = ConstantController(Action::new(0.5, 0.5, env.params.weight()));
        let res = run_episode(&mut tilt, &env, &reference, &DisturbanceRealization::calm(), &State::zeros(), 300).unwrap();
        assert!(!res.success && res.episode_length < 300);
        assert!(!env.x_set.contains(res.final_state.as_slice()));
    }

    #[test]
    fn trace_csv_layout() {
        let (_, env, _) = env_and_syn();
        let reference = make_reference(TrajectoryKind::Hover, 1.0, 1.0, 0.1).unwrap();
        let mut c = ConstantController(env.params.hover_input());
        let res = run_episode(&mut c, &env, &reference, &DisturbanceRealization::calm(), &State::zeros(), 5).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &res, &["config=x seed=1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config=x seed=1");
        assert_eq!(lines[1].split(',').count(), 1 + 8 + 8 + 3 + 8 + 1);
        assert_eq!(lines.len(), 2 + 5);
        assert!(lines[2].contains("nan"));
    }
}
