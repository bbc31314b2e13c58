//! Run configuration: every tunable number in one TOML document with
//! defaults, validated at load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ReferenceTrajectory;
use crate::error::{Error, Result};
use crate::model::{build_linear_model, force_to_state_map, LinearSystem, MultirotorParams, NU, NX};
use crate::qp::QpSettings;
use crate::setops::{linear_map_outer, BoxSet};
use crate::synthesis::{CostSpec, SynthesisResult, TubeSettings, UncertaintySpec};
use crate::vision::{CameraConfig, ExtrinsicPerturbation, RandomizeConfig, Texture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub q: [f64; NX],
    pub r: [f64; NU],
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { q: [1.0, 1.0, 1.0, 0.3, 0.3, 0.3, 0.1, 0.1], r: [100.0, 100.0, 0.3] }
    }
}

/// State box relative to the hover anchor; the input box is derived from
/// the tilt and thrust limits of the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    pub x_lo: [f64; NX],
    pub x_hi: [f64; NX],
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            x_lo: [-10.5, -8.0, -4.5, -6.0, -6.0, -6.0, -0.7, -0.7],
            x_hi: [10.5, 8.0, 4.5, 6.0, 6.0, 6.0, 0.7, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Wind magnitude band as fractions of the weight.
    pub wind_band: [f64; 2],
    /// Per-axis force bound used for the tube, as a fraction of the weight.
    pub w_bar_fraction: f64,
    /// Three-sigma sensing noise per state component; also the half-widths
    /// of the bounded noise set.
    pub v_three_sigma: [f64; NX],
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self { wind_band: [0.10, 0.19], w_bar_fraction: 0.20, v_three_sigma: [0.6, 0.6, 0.4, 0.2, 0.2, 0.2, 0.05, 0.05] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub dt: f64,
    pub dt_sim: f64,
    pub horizon: usize,
    pub observer_pole_rate: f64,
    pub tube: TubeSettings,
    pub qp: QpSettings,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { dt: 0.1, dt_sim: 0.01, horizon: 30, observer_pole_rate: 30.0, tube: TubeSettings::default(), qp: QpSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Lemniscate,
    Circle,
    Hover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Zero,
    Gaussian,
    Bounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub trajectory: TrajectoryKind,
    pub duration: f64,
    pub speed_scale: f64,
    pub t_max: usize,
    pub plant: PlantMode,
    /// World position of the state origin (m); its height keeps the camera
    /// above ground over the whole state box.
    pub anchor: [f64; 3],
    pub initial_state_half_width: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Lemniscate,
            duration: 30.0,
            speed_scale: 0.6,
            t_max: 300,
            plant: PlantMode::Nonlinear,
            anchor: [0.0, 0.0, 5.0],
            initial_state_half_width: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaConfig {
    pub n_samples: usize,
    pub epsilon_bar: f64,
    /// Perturb the camera extrinsics of synthetic views.
    pub perturb_extrinsics: bool,
    pub perturbation: ExtrinsicPerturbation,
    pub randomize: RandomizeConfig,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            epsilon_bar: 0.5,
            perturb_extrinsics: true,
            perturbation: ExtrinsicPerturbation::default(),
            randomize: RandomizeConfig::off(),
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("augmentation needs at least one sample per timestep".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_bar) {
            return Err(Error::InvalidParameter("epsilon_bar must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Largest admissible number of real observations per timestep.
    pub fn max_real(&self) -> usize {
        (self.epsilon_bar * self.n_samples as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_hidden: usize,
    pub embedding: usize,
    pub fusion_hidden: usize,
    pub fusion_out: usize,
    /// Horizon indices of the reference fed to the network.
    pub reference_indices: Vec<usize>,
    pub use_image: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_hidden: 128,
            embedding: 64,
            fusion_hidden: 128,
            fusion_out: 64,
            reference_indices: vec![0, 2, 4, 8, 16, 29],
            use_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lambda_aux: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, epochs: 50, patience: 7, lambda_aux: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Bc,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Dr,
    TubeNerf,
}

/// One cell of the comparison: learner, augmentation and samples per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub learner: Learner,
    pub augmentation: Augmentation,
    #[serde(default)]
    pub n_samples: usize,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        let l = match self.learner {
            Learner::Bc => "BC",
            Learner::Dagger => "DAgger",
        };
        match self.augmentation {
            Augmentation::None => l.to_string(),
            Augmentation::Dr => format!("{l}+DR"),
            Augmentation::TubeNerf => format!("{l}+TN-{}", self.n_samples),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TargetEnv {
    Noise,
    NoiseWind,
}

impl TargetEnv {
    pub fn name(&self) -> &'static str {
        match self {
            TargetEnv::Noise => "noise",
            TargetEnv::NoiseWind => "noise+wind",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub demos_per_round_tn: usize,
    pub demos_per_round_baseline: usize,
    /// Mixing probability per round; the last entry repeats.
    pub beta_schedule: Vec<f64>,
    pub eval_seeds: usize,
    pub eval_episodes_per_seed: usize,
    pub full_scale_eval_seeds: usize,
    pub full_scale_eval_episodes_per_seed: usize,
    pub success_threshold: f64,
    /// Nominal cost of rendering one synthetic view, for the time axis.
    pub nominal_render_seconds: f64,
    /// Nominal cost of one sample through one training epoch.
    pub nominal_sample_epoch_seconds: f64,
    /// Sensing noise during demonstration collection (source domain).
    pub source_noise: NoiseMode,
    /// Sensing noise in the target environments.
    pub target_noise: NoiseMode,
    pub methods: Vec<MethodSpec>,
    pub envs: Vec<TargetEnv>,
    /// Method used by the standalone training command.
    pub train_method: MethodSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = |learner, augmentation, n_samples| MethodSpec { learner, augmentation, n_samples };
        Self {
            rounds: 4,
            demos_per_round_tn: 1,
            demos_per_round_baseline: 10,
            beta_schedule: vec![1.0, 0.0],
            eval_seeds: 3,
            eval_episodes_per_seed: 5,
            full_scale_eval_seeds: 10,
            full_scale_eval_episodes_per_seed: 10,
            success_threshold: 70.0,
            nominal_render_seconds: 2e-4,
            nominal_sample_epoch_seconds: 1e-4,
            source_noise: NoiseMode::Gaussian,
            target_noise: NoiseMode::Gaussian,
            methods: vec![
                m(Learner::Bc, Augmentation::None, 0),
                m(Learner::Dagger, Augmentation::None, 0),
                m(Learner::Bc, Augmentation::Dr, 0),
                m(Learner::Dagger, Augmentation::Dr, 0),
                m(Learner::Bc, Augmentation::TubeNerf, 100),
                m(Learner::Dagger, Augmentation::TubeNerf, 100),
                m(Learner::Bc, Augmentation::TubeNerf, 50),
                m(Learner::Dagger, Augmentation::TubeNerf, 50),
            ],
            envs: vec![TargetEnv::Noise, TargetEnv::NoiseWind],
            train_method: m(Learner::Dagger, Augmentation::TubeNerf, 100),
        }
    }
}

impl ExperimentConfig {
    pub fn beta(&self, round: usize) -> f64 {
        match self.beta_schedule.get(round) {
            Some(b) => *b,
            None => *self.beta_schedule.last().unwrap_or(&0.0),
        }
    }

    pub fn demos_per_round(&self, m: &MethodSpec) -> usize {
        match m.augmentation {
            Augmentation::TubeNerf => self.demos_per_round_tn,
            _ => self.demos_per_round_baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub noise_magnitudes: Vec<f64>,
    pub blur_magnitudes: Vec<f64>,
    pub episodes: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            noise_magnitudes: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2],
            blur_magnitudes: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: MultirotorParams,
    pub cost: CostConfig,
    pub constraints: ConstraintConfig,
    pub uncertainty: UncertaintyConfig,
    pub control: ControlConfig,
    pub world: WorldConfig,
    pub camera: CameraConfig,
    pub texture: Texture,
    pub da: DaConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost()?;
        let x = self.x_set()?;
        if !x.contains_origin() {
            return Err(Error::Config("state box must contain the hover point".into()));
        }
        if self.world.anchor[2] + x.lo[2] <= crate::vision::MIN_CAMERA_HEIGHT {
            return Err(Error::Config("state box reaches the ground below the anchor".into()));
        }
        let [lo, hi] = self.uncertainty.wind_band;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::Config("wind band must satisfy 0 <= lo <= hi".into()));
        }
        if self.uncertainty.w_bar_fraction < hi {
            return Err(Error::Config("tube force bound must cover the wind band".into()));
        }
        if self.uncertainty.v_three_sigma.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sensing noise must be finite and non-negative".into()));
        }
        let c = &self.control;
        if !(c.dt > 0.0 && c.dt_sim > 0.0 && c.dt_sim <= c.dt) {
            return Err(Error::Config("need 0 < dt_sim <= dt".into()));
        }
        if (c.dt / c.dt_sim - (c.dt / c.dt_sim).round()).abs() > 1e-9 {
            return Err(Error::Config("dt must be a multiple of dt_sim".into()));
        }
        if c.horizon == 0 || c.observer_pole_rate <= 0.0 {
            return Err(Error::Config("horizon and observer pole rate must be positive".into()));
        }
        if c.tube.n_rollouts == 0 || c.tube.horizon == 0 || c.tube.inflation < 1.0 {
            return Err(Error::Config("tube estimation needs rollouts, steps and inflation >= 1".into()));
        }
        let w = &self.world;
        if !(w.duration > 0.0 && w.speed_scale > 0.0) || w.t_max == 0 {
            return Err(Error::Config("trajectory duration, speed scale and T_max must be positive".into()));
        }
        if !(w.initial_state_half_width >= 0.0) {
            return Err(Error::Config("initial state spread must be non-negative".into()));
        }
        self.da.validate()?;
        let n = &self.network;
        if n.reference_indices.is_empty() || n.reference_indices.iter().any(|&i| i > c.horizon) {
            return Err(Error::Config("reference indices must lie within the horizon".into()));
        }
        if [n.image_hidden, n.embedding, n.fusion_hidden, n.fusion_out].contains(&0) {
            return Err(Error::Config("network layers must be non-empty".into()));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.batch_size == 0 || t.epochs == 0 || t.lambda_aux < 0.0 {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        let e = &self.experiment;
        if e.rounds == 0 || e.eval_seeds == 0 || e.eval_episodes_per_seed == 0 {
            return Err(Error::Config("experiment needs rounds and evaluation episodes".into()));
        }
        if e.beta_schedule.is_empty() || e.beta_schedule.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("beta schedule entries must lie in [0, 1]".into()));
        }
        if e.demos_per_round_tn == 0 || e.demos_per_round_baseline == 0 {
            return Err(Error::Config("demonstrations per round must be positive".into()));
        }
        for m in e.methods.iter().chain([&e.train_method]) {
            if m.augmentation == crate::config::Augmentation::TubeNerf && m.n_samples == 0 {
                return Err(Error::Config(format!("{} needs n_samples > 0", m.name())));
            }
        }
        Ok(())
    }

    pub fn linear_system(&self) -> Result<LinearSystem> {
        build_linear_model(&self.model, self.control.dt)
    }

    pub fn cost(&self) -> Result<CostSpec> {
        CostSpec::diagonal(&self.cost.q, &self.cost.r)
    }

    pub fn x_set(&self) -> Result<BoxSet> {
        BoxSet::new(self.constraints.x_lo.to_vec(), self.constraints.x_hi.to_vec())
    }

    /// Absolute input box `[-tilt, tilt]^2 x [thrust_min, thrust_max]`.
    pub fn u_set(&self) -> Result<BoxSet> {
        let m = &self.model;
        BoxSet::new(vec![-m.tilt_max, -m.tilt_max, m.thrust_min], vec![m.tilt_max, m.tilt_max, m.thrust_max])
    }

    /// Per-axis force boxes mapped through the force-to-state map.
    pub fn uncertainty_spec(&self) -> Result<UncertaintySpec> {
        let f = force_to_state_map(&self.model, self.control.dt)?;
        let wt = self.model.weight();
        let w = linear_map_outer(&f, &BoxSet::symmetric(&[self.uncertainty.wind_band[1] * wt; 3])?)?;
        let w_bar = linear_map_outer(&f, &BoxSet::symmetric(&[self.uncertainty.w_bar_fraction * wt; 3])?)?;
        let v = BoxSet::symmetric(&self.uncertainty.v_three_sigma)?;
        Ok(UncertaintySpec { w, w_bar, v })
    }

    /// Sensing noise set `V`.
    pub fn v_set(&self) -> Result<BoxSet> {
        BoxSet::symmetric(&self.uncertainty.v_three_sigma)
    }

    /// Offline tube synthesis for this configuration.
    pub fn synthesize(&self) -> Result<SynthesisResult> {
        let (sys, u_set) = (self.linear_system()?, self.u_set()?);
        crate::synthesis::synthesize(&sys, &self.cost()?, &self.uncertainty_spec()?, &self.x_set()?, &u_set, self.control.observer_pole_rate, &self.control.tube, self.seed)
    }

    pub fn reference(&self) -> Result<ReferenceTrajectory> {
        crate::world::make_reference(self.world.trajectory, self.world.duration, self.world.speed_scale, self.control.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("[model]\nmass = -1.0").is_err());
        assert!(RunConfig::from_toml("[da]\nepsilon_bar = 1.5").is_err());
        assert!(RunConfig::from_toml("[control]\ndt_sim = 0.03").is_err());
        assert!(RunConfig::from_toml("[uncertainty]\nw_bar_fraction = 0.1").is_err());
        assert!(RunConfig::from_toml("[experiment]\nbeta_schedule = [2.0]").is_err());
    }

    #[test]
    fn ratio_cap() {
        let da = DaConfig { n_samples: 100, epsilon_bar: 0.5, ..DaConfig::default() };
        assert_eq!(da.max_real(), 50);
        let da = DaConfig { n_samples: 7, epsilon_bar: 0.3, ..DaConfig::default() };
        assert_eq!(da.max_real(), 2);
        assert_eq!(DaConfig { epsilon_bar: 0.0, ..da }.max_real(), 0);
    }

    #[test]
    fn method_names() {
        let e = ExperimentConfig::default();
        let names: Vec<String> = e.methods.iter().map(MethodSpec::name).collect();
        assert_eq!(names, ["BC", "DAgger", "BC+DR", "DAgger+DR", "BC+TN-100", "DAgger+TN-100", "BC+TN-50", "DAgger+TN-50"]);
        assert_eq!(e.demos_per_round(&e.methods[4]), 1);
        assert_eq!(e.demos_per_round(&e.methods[0]), 10);
        assert_eq!(e.beta(0), 1.0);
        assert_eq!(e.beta(7), 0.0);
    }
}
