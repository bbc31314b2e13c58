//! Demonstration collection and tube-guided augmentation.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{subsample_reference, PolicyParams};
use super::train::{image_to_f32, SampleOrigin, TrainingSample};
use crate::config::{DaConfig, Learner};
use crate::control::{saturate, ReferenceTrajectory};
use crate::error::{Error, Result};
use crate::model::{Action, State, NX};
use crate::rng::{self, purpose};
use crate::setops::{dvec, BoxSet};
use crate::synthesis::SynthesisResult;
use crate::vision::{other_from_state, pose_from_state, randomize_image, render, Observation, ObservationDatabase};
use crate::world::{run_episode, Controller, EpisodeResult, Decision, DisturbanceRealization, Environment, ExpertController, Scene, StepInput};

/// One step of a demonstration: observation, expert action, safe plan
/// `(u_bar*, x_bar*)`, reference window and estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecord {
    pub t: usize,
    pub observation: Observation,
    /// Expert (label) action, saturated.
    pub u: Action,
    pub u_bar_star: Action,
    pub x_bar_star: State,
    pub window: Vec<State>,
    pub x_hat: State,
    /// True state, kept for diagnostics only.
    pub x: State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub records: Vec<DemoRecord>,
    pub episode_length: usize,
    pub success: bool,
    /// Steps where the expert executed (the rest ran the learner).
    pub expert_steps: usize,
    pub flight_steps: usize,
    /// The executed closed-loop episode.
    pub episode: EpisodeResult,
}

/// Ancillary law at `x` around the plan, then saturation.
pub fn tube_action(syn: &SynthesisResult, u_bar_star: &Action, x_bar_star: &State, x: &State, u_set: &BoxSet) -> Action {
    let fb = &syn.k * dvec((x - x_bar_star).as_slice());
    saturate(&(u_bar_star + Action::from_column_slice(fb.as_slice())), u_set)
}

/// Runs the expert and, under DAgger, the learner; records expert labels.
pub struct Collector<'a> {
    pub expert: ExpertController,
    pub policy: Option<&'a PolicyParams>,
    pub learner: Learner,
    pub beta: f64,
    mix: rng::Rng,
    pub records: Vec<DemoRecord>,
    /// First step whose expert solution was softened or failed.
    pub flagged: Option<usize>,
    pub expert_steps: usize,
}

impl<'a> Collector<'a> {
    pub fn new(expert: ExpertController, policy: Option<&'a PolicyParams>, learner: Learner, beta: f64, mix_seed: u64) -> Self {
        Self {
            expert,
            policy,
            learner,
            beta,
            mix: rng::stream(mix_seed, &[purpose::DAGGER_MIX]),
            records: Vec::new(),
            flagged: None,
            expert_steps: 0,
        }
    }

    /// Executes the expert at this step.
    fn expert_turn(&mut self) -> bool {
        let draw: f64 = self.mix.random();
        match self.learner {
            Learner::Bc => true,
            Learner::Dagger => self.policy.is_none() || draw < self.beta,
        }
    }
}

impl Controller for Collector<'_> {
    fn needs_image(&self) -> bool {
        true
    }

    fn reset(&mut self) {
        self.expert.reset();
        self.records.clear();
        self.flagged = None;
        self.expert_steps = 0;
    }

    fn act(&mut self, input: &StepInput) -> Result<Decision> {
        let obs = input.observation.ok_or_else(|| Error::InvalidParameter("collector needs images".into()))?;
        let expert_first = self.expert_turn();
        let label = self.expert.act(input);
        let policy_u = match (self.policy, expert_first) {
            (Some(p), false) => Some(p.forward(&obs.image.data, &obs.other, input.window)?),
            _ => None,
        };
        let d = match label {
            Ok(d) => d,
            Err(e) => {
                // the learner can fly on without a label; the expert cannot
                let (u, x_hat) = policy_u.ok_or(e)?;
                self.flagged.get_or_insert(input.t);
                return Ok(Decision { u, x_hat, x_bar_star: None, u_bar_star: None, softened: true });
            }
        };
        if d.softened {
            self.flagged.get_or_insert(input.t);
        }
        if self.flagged.is_none() {
            self.records.push(DemoRecord {
                t: input.t,
                observation: obs.clone(),
                u: d.u,
                u_bar_star: d.u_bar_star.expect("expert plans"),
                x_bar_star: d.x_bar_star.expect("expert plans"),
                window: input.window.to_vec(),
                x_hat: d.x_hat,
                x: State::zeros(),
            });
        }
        match policy_u {
            Some((u, x_hat)) => Ok(Decision { u, x_hat, ..d }),
            None => {
                self.expert_steps += 1;
                Ok(d)
            }
        }
    }

    fn observe(&mut self, executed: &Action, measurement: &State) {
        self.expert.observe(executed, measurement);
    }
}

/// Run one collection episode. Expert-executed demonstrations must finish
/// without softened steps; learner-executed (DAgger) runs keep the labels
/// up to the first flagged step.
#[allow(clippy::too_many_arguments)]
pub fn collect_demonstration(
    collector: &mut Collector,
    env: &Environment,
    reference: &ReferenceTrajectory,
    dist: &DisturbanceRealization,
    x0: &State,
    db: &mut ObservationDatabase,
) -> Result<Demonstration> {
    let res = run_episode(collector, env, reference, dist, x0, env.t_max)?;
    let expert_only = collector.expert_steps == res.episode_length;
    if expert_only {
        if let Some(t) = collector.flagged {
            return Err(Error::DemoRejected(format!("expert softened its constraints at step {t}")));
        }
        if !res.success {
            return Err(Error::DemoRejected(format!("expert left the state box at step {}", res.episode_length)));
        }
    }
    let mut records = std::mem::take(&mut collector.records);
    for (r, s) in records.iter_mut().zip(&res.trace) {
        r.x = s.x;
    }
    for r in &records {
        db.push(r.x_hat, r.observation.clone());
    }
    Ok(Demonstration {
        episode_length: res.episode_length,
        success: res.success,
        expert_steps: collector.expert_steps,
        flight_steps: res.episode_length,
        records,
        episode: res,
    })
}

/// Sample derived directly from a demonstration record.
pub fn demo_sample(rec: &DemoRecord, indices: &[usize]) -> TrainingSample {
    TrainingSample {
        t: rec.t,
        image: image_to_f32(&rec.observation.image.data),
        other: rec.observation.other,
        reference: subsample_reference(&rec.window, indices),
        action: rec.u,
        state: rec.x_hat,
        origin: SampleOrigin::Demo,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentCounts {
    pub t: usize,
    pub n_real: usize,
    pub n_synthetic: usize,
}

/// Everything augmentation needs besides the record.
pub struct AugmentContext<'a> {
    pub syn: &'a SynthesisResult,
    pub db: &'a ObservationDatabase,
    pub da: &'a DaConfig,
    pub scene: &'a Scene,
    pub u_set: &'a BoxSet,
    pub reference_indices: &'a [usize],
}

/// `N_samples` samples around the plan of one timestep: up to
/// `floor(eps_bar N_samples)` real observations from the database inside
/// `x_bar* + Z`, the rest rendered at states drawn uniformly in the tube.
/// Every label is the saturated ancillary law at the sample's state.
pub fn augment_timestep<R: rand::Rng + ?Sized>(rec: &DemoRecord, ctx: &AugmentContext, rng: &mut R) -> Result<(Vec<TrainingSample>, AugmentCounts)> {
    let z = &ctx.syn.z;
    if z.dim() != NX || z.lo.iter().chain(&z.hi).any(|v| !v.is_finite()) {
        return Err(Error::Augmentation("tube cross-section is empty or malformed".into()));
    }
    let n = ctx.da.n_samples;
    let reference = subsample_reference(&rec.window, ctx.reference_indices);
    let real = ctx.db.query_tube(&rec.x_bar_star, z, ctx.da.max_real().min(n), rng);
    let mut out = Vec::with_capacity(n);
    for e in &real {
        let image = randomize_image(&e.observation.image, &ctx.da.randomize, rng);
        out.push(TrainingSample {
            t: rec.t,
            image: image_to_f32(&image.data),
            other: e.observation.other,
            reference: reference.clone(),
            action: tube_action(ctx.syn, &rec.u_bar_star, &rec.x_bar_star, &e.x_hat, ctx.u_set),
            state: e.x_hat,
            origin: SampleOrigin::RealDb,
        });
    }
    let n_real = out.len();
    let tube = z.translate(rec.x_bar_star.as_slice())?;
    for _ in n_real..n {
        let x = State::from_column_slice(&tube.sample_uniform(rng));
        let perturb = ctx.da.perturb_extrinsics.then_some(&ctx.da.perturbation);
        let pose = pose_from_state(&x, &ctx.scene.anchor, &ctx.scene.rig, perturb, rng);
        let image = render(&pose, &ctx.scene.rig, &ctx.scene.texture).map_err(|e| Error::Augmentation(format!("view at step {}: {e}", rec.t)))?;
        let image = randomize_image(&image, &ctx.da.randomize, rng);
        out.push(TrainingSample {
            t: rec.t,
            image: image_to_f32(&image.data),
            other: other_from_state(&x),
            reference: reference.clone(),
            action: tube_action(ctx.syn, &rec.u_bar_star, &rec.x_bar_star, &x, ctx.u_set),
            state: x,
            origin: SampleOrigin::Synthetic,
        });
    }
    Ok((out, AugmentCounts { t: rec.t, n_real, n_synthetic: n - n_real }))
}

/// Augment every record in parallel; each timestep draws from its own
/// stream so the result does not depend on scheduling.
pub fn augment_demonstration(demo: &Demonstration, ctx: &AugmentContext, seed: u64, tags: &[u64]) -> Result<(Vec<TrainingSample>, Vec<AugmentCounts>)> {
    let per: Vec<(Vec<TrainingSample>, AugmentCounts)> = demo
        .records
        .par_iter()
        .map(|rec| {
            let mut r = rng::stream(seed, &[&[purpose::AUGMENT], tags, &[rec.t as u64]].concat());
            augment_timestep(rec, ctx, &mut r)
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(per.iter().map(|p| p.0.len()).sum());
    let mut counts = Vec::with_capacity(per.len());
    for (s, c) in per {
        samples.extend(s);
        counts.push(c);
    }
    Ok((samples, counts))
}
