//! Imitation rounds: collect demonstrations (expert or beta-mixture),
//! optionally augment them, update the policy on the new data, evaluate.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{augment_demonstration, collect_demonstration, demo_sample, AugmentContext, AugmentCounts, Collector, Demonstration};
use super::net::{Architecture, Normalization, PolicyParams};
use super::train::{train, TrainReport, TrainingSample};
use crate::config::{Augmentation, DaConfig, Learner, MethodSpec, RunConfig, TargetEnv};
use crate::control::ReferenceTrajectory;
use crate::error::{Error, Result};
use crate::model::State;
use crate::synthesis::SynthesisResult;
use crate::vision::ObservationDatabase;
use crate::world::{
    episode_keys, initial_state, mean_success_cost, run_batch, score, Controller, Decision, DisturbanceModel, EpisodeKey, EpisodeResult,
    Environment, ExpertController, Metrics, NoiseModel, StepInput,
};

/// Tag for demonstration episodes, distinct from evaluation tags.
const DEMO_TAG: u64 = 1000;
const MAX_DEMO_ATTEMPTS: u64 = 5;

/// The learned policy as a [`Controller`].
pub struct PolicyController {
    pub params: PolicyParams,
}

impl Controller for PolicyController {
    fn needs_image(&self) -> bool {
        self.params.arch.use_image
    }

    fn reset(&mut self) {}

    fn act(&mut self, input: &StepInput) -> Result<Decision> {
        let (image, other): (&[f64], [f64; 6]) = match input.observation {
            Some(o) => (&o.image.data, o.other),
            None => (&[], crate::vision::other_from_state(input.measurement)),
        };
        let (u, x_hat) = self.params.forward(image, &other, input.window)?;
        Ok(Decision { u, x_hat, x_bar_star: None, u_bar_star: None, softened: false })
    }
}

/// Disturbances of a target environment.
pub fn target_model(cfg: &RunConfig, target: TargetEnv) -> DisturbanceModel {
    let noise = NoiseModel { mode: cfg.experiment.target_noise, three_sigma: cfg.uncertainty.v_three_sigma };
    let wind_band = match target {
        TargetEnv::Noise => None,
        TargetEnv::NoiseWind => Some(cfg.uncertainty.wind_band),
    };
    DisturbanceModel { wind_band, noise }
}

/// Disturbances while collecting demonstrations; DR adds wind from `W`.
pub fn source_model(cfg: &RunConfig, augmentation: Augmentation) -> DisturbanceModel {
    let noise = NoiseModel { mode: cfg.experiment.source_noise, three_sigma: cfg.uncertainty.v_three_sigma };
    let wind_band = (augmentation == Augmentation::Dr).then_some(cfg.uncertainty.wind_band);
    DisturbanceModel { wind_band, noise }
}

pub fn env_tag(target: TargetEnv) -> u64 {
    match target {
        TargetEnv::Noise => 1,
        TargetEnv::NoiseWind => 2,
    }
}

/// Evaluation episode keys for a target.
pub fn eval_keys(cfg: &RunConfig, target: TargetEnv, full_scale: bool) -> Vec<EpisodeKey> {
    let e = &cfg.experiment;
    let (s, n) = if full_scale { (e.full_scale_eval_seeds, e.full_scale_eval_episodes_per_seed) } else { (e.eval_seeds, e.eval_episodes_per_seed) };
    episode_keys(cfg.seed, env_tag(target), s, n)
}

/// A target environment with its expert baseline.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub target: TargetEnv,
    pub model: DisturbanceModel,
    pub keys: Vec<EpisodeKey>,
    pub expert: Metrics,
    pub expert_cost: f64,
}

pub fn evaluate_expert(cfg: &RunConfig, syn: &SynthesisResult, env: &Environment, reference: &ReferenceTrajectory, model: &DisturbanceModel, keys: &[EpisodeKey]) -> Result<Vec<EpisodeResult>> {
    run_batch(|| ExpertController::from_config(cfg, syn), env, reference, model, cfg.world.initial_state_half_width, keys)
}

pub fn evaluate_policy(cfg: &RunConfig, params: &PolicyParams, env: &Environment, reference: &ReferenceTrajectory, model: &DisturbanceModel, keys: &[EpisodeKey]) -> Result<Vec<EpisodeResult>> {
    run_batch(|| Ok(PolicyController { params: params.clone() }), env, reference, model, cfg.world.initial_state_half_width, keys)
}

impl EvalTarget {
    pub fn new(cfg: &RunConfig, syn: &SynthesisResult, env: &Environment, reference: &ReferenceTrajectory, target: TargetEnv, full_scale: bool) -> Result<Self> {
        let model = target_model(cfg, target);
        let keys = eval_keys(cfg, target, full_scale);
        let results = evaluate_expert(cfg, syn, env, reference, &model, &keys)?;
        let expert_cost = mean_success_cost(&results).ok_or_else(|| Error::Synthesis(format!("expert never succeeds in the {} environment", target.name())))?;
        let expert = score(&results, expert_cost)?;
        Ok(Self { target, model, keys, expert, expert_cost })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub env: String,
    pub round: usize,
    pub demos: usize,
    pub wallclock_s: f64,
    pub mean_episode_length: f64,
    pub ci95: f64,
    pub success_rate: f64,
    pub expert_gap: Option<f64>,
    pub train_samples: usize,
}

/// Nominal compute costs used for the time axis, so that curves are
/// reproducible; measured times go to the log only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    pub dt: f64,
    pub render_s: f64,
    pub sample_epoch_s: f64,
}

impl TimeModel {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { dt: cfg.control.dt, render_s: cfg.experiment.nominal_render_seconds, sample_epoch_s: cfg.experiment.nominal_sample_epoch_seconds }
    }
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    pub demos: Vec<Demonstration>,
    pub rejected: usize,
    pub counts: Vec<AugmentCounts>,
    pub samples: usize,
    pub report: TrainReport,
    pub measured_s: f64,
}

pub struct MethodOutcome {
    pub curve: Vec<CurvePoint>,
    pub policy: PolicyParams,
    pub rounds: Vec<RoundLog>,
    pub db: ObservationDatabase,
}

/// Shared inputs of the imitation rounds.
pub struct Session<'a> {
    pub cfg: &'a RunConfig,
    pub syn: &'a SynthesisResult,
    pub env: &'a Environment,
    pub reference: &'a ReferenceTrajectory,
}

impl Session<'_> {
    pub fn initial_policy(&self) -> Result<PolicyParams> {
        let c = &self.cfg.camera;
        let arch = Architecture::from_config(&self.cfg.network, c.width * c.height);
        Ok(PolicyParams::init(arch, Normalization::from_sets(&self.env.x_set, &self.env.u_set)?, self.cfg.seed))
    }

    /// One demonstration for `(round, index)`, retried on rejection.
    pub fn demonstration(
        &self,
        learner: Learner,
        augmentation: Augmentation,
        beta: f64,
        policy: Option<&PolicyParams>,
        round: usize,
        index: usize,
        db: &mut ObservationDatabase,
    ) -> Result<(Demonstration, usize, usize)> {
        let model = source_model(self.cfg, augmentation);
        let mut rejected_steps = 0;
        for attempt in 0..MAX_DEMO_ATTEMPTS {
            let tags = [DEMO_TAG, round as u64, index as u64, attempt];
            let dist = model.realize(self.env.params.weight(), self.cfg.seed, &tags);
            let x0: State = initial_state(self.cfg.world.initial_state_half_width, self.cfg.seed, &tags);
            let expert = ExpertController::from_config(self.cfg, self.syn)?;
            let mix_seed = crate::rng::stream(self.cfg.seed, &tags).next_u64_det();
            let mut c = Collector::new(expert, policy, learner, beta, mix_seed);
            match collect_demonstration(&mut c, self.env, self.reference, &dist, &x0, db) {
                Ok(d) => return Ok((d, attempt as usize, rejected_steps)),
                Err(Error::DemoRejected(_)) => rejected_steps += self.env.t_max,
                Err(e) => return Err(e),
            }
        }
        Err(Error::DemoRejected(format!("{MAX_DEMO_ATTEMPTS} attempts rejected in round {round}")))
    }

    /// Training samples of one demonstration under a method.
    pub fn samples(&self, method: &MethodSpec, demo: &Demonstration, db: &ObservationDatabase, tags: &[u64]) -> Result<(Vec<TrainingSample>, Vec<AugmentCounts>)> {
        let idx = &self.cfg.network.reference_indices;
        let mut out: Vec<TrainingSample> = demo.records.iter().map(|r| demo_sample(r, idx)).collect();
        let mut counts = Vec::new();
        if method.augmentation == Augmentation::TubeNerf {
            let da = DaConfig { n_samples: method.n_samples, ..self.cfg.da.clone() };
            let ctx = AugmentContext { syn: self.syn, db, da: &da, scene: &self.env.scene, u_set: &self.env.u_set, reference_indices: idx };
            let (s, c) = augment_demonstration(demo, &ctx, self.cfg.seed, tags)?;
            out.extend(s);
            counts = c;
        }
        Ok((out, counts))
    }

    /// Rounds of collection, augmentation, training and evaluation.
    /// `on_point` sees every curve point as soon as it exists.
    pub fn run_method(
        &self,
        method: &MethodSpec,
        rounds: usize,
        demos_per_round: usize,
        targets: &[EvalTarget],
        mut on_point: impl FnMut(&CurvePoint),
    ) -> Result<MethodOutcome> {
        let tm = TimeModel::from_config(self.cfg);
        let mut policy = self.initial_policy()?;
        let mut db = ObservationDatabase::new();
        let mut curve = Vec::new();
        let mut logs = Vec::new();
        let (mut demos, mut clock) = (0usize, 0.0f64);
        for round in 0..rounds {
            let started = Instant::now();
            let beta = self.cfg.experiment.beta(round);
            let current = (round > 0).then_some(&policy);
            let mut round_demos = Vec::new();
            let mut rejected = 0;
            for d in 0..demos_per_round {
                let (demo, rej, rej_steps) = self
                    .demonstration(method.learner, method.augmentation, beta, current, round, d, &mut db)
                    .map_err(|e| e.at_round(round))?;
                rejected += rej;
                clock += (demo.flight_steps + rej_steps) as f64 * tm.dt;
                round_demos.push(demo);
            }
            let mut samples = Vec::new();
            let mut counts = Vec::new();
            for (d, demo) in round_demos.iter().enumerate() {
                let (s, c) = self.samples(method, demo, &db, &[round as u64, d as u64]).map_err(|e| e.at_round(round))?;
                clock += c.iter().map(|c| c.n_synthetic).sum::<usize>() as f64 * tm.render_s;
                samples.extend(s);
                counts.extend(c);
            }
            demos += demos_per_round;
            let report = if samples.is_empty() {
                TrainReport { initial_loss: 0.0, final_loss: 0.0, epochs_run: 0, best_epoch: 0 }
            } else {
                let (p, rep) = train(&policy, &samples, &self.cfg.train, self.cfg.seed.wrapping_add(round as u64)).map_err(|e| e.at_round(round))?;
                policy = p;
                rep
            };
            clock += (report.epochs_run + 1) as f64 * samples.len() as f64 * tm.sample_epoch_s;
            let measured = started.elapsed().as_secs_f64();
            for t in targets {
                let res = evaluate_policy(self.cfg, &policy, self.env, self.reference, &t.model, &t.keys).map_err(|e| e.at_round(round))?;
                let m = score(&res, t.expert_cost)?;
                let p = CurvePoint {
                    method: method.name(),
                    env: t.target.name().to_string(),
                    round,
                    demos,
                    wallclock_s: clock,
                    mean_episode_length: m.mean_episode_length,
                    ci95: m.ci95,
                    success_rate: m.success_rate,
                    expert_gap: m.expert_gap,
                    train_samples: samples.len(),
                };
                on_point(&p);
                curve.push(p);
            }
            logs.push(RoundLog { round, demos: round_demos, rejected, counts, samples: samples.len(), report, measured_s: measured });
        }
        Ok(MethodOutcome { curve, policy, rounds: logs, db })
    }
}

/// Deterministic `u64` from a generator without pulling in the `Rng` trait
/// at call sites.
trait NextU64 {
    fn next_u64_det(&mut self) -> u64;
}

impl NextU64 for crate::rng::Rng {
    fn next_u64_det(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

pub const CURVE_HEADER: [&str; 7] = ["method", "env", "demos", "wallclock_s", "mean_episode_length", "ci95", "status"];

/// Learning curves as CSV with `#` comment lines.
pub fn write_curves_csv<W: Write>(mut w: W, points: &[Result<CurvePoint, (String, String, String)>], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CURVE_HEADER)?;
    for p in points {
        match p {
            Ok(p) => wtr.write_record([
                p.method.clone(),
                p.env.clone(),
                p.demos.to_string(),
                format!("{:.3}", p.wallclock_s),
                format!("{:.3}", p.mean_episode_length),
                format!("{:.3}", p.ci95),
                "ok".into(),
            ])?,
            Err((method, env, msg)) => wtr.write_record([method.clone(), env.clone(), String::new(), String::new(), String::new(), String::new(), format!("error: {msg}")])?,
        }
    }
    wtr.flush()?;
    Ok(())
}

/// First demonstration count at which success reaches `threshold` percent.
pub fn demo_efficiency(curve: &[CurvePoint], env: &str, threshold: f64) -> Option<usize> {
    curve.iter().filter(|p| p.env == env).find(|p| p.success_rate >= threshold).map(|p| p.demos)
}
