//! Supervised training of the policy on a fixed set of samples.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{Adam, AdamSettings, Inputs, PolicyParams};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Action, State, NU, NX, N_OTHER};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    Demo,
    Synthetic,
    RealDb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Demonstration timestep the sample was derived from.
    pub t: usize,
    pub image: Vec<f32>,
    pub other: [f64; N_OTHER],
    /// Reference states at the network's horizon indices.
    pub reference: Vec<State>,
    pub action: Action,
    pub state: State,
    pub origin: SampleOrigin,
}

pub fn image_to_f32(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&v| v as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Normalized inputs and targets for the given sample indices.
pub fn assemble(params: &PolicyParams, samples: &[TrainingSample], idx: &[usize]) -> (Inputs, DMatrix<f64>, DMatrix<f64>) {
    let b = idx.len();
    let pix = if params.arch.use_image { params.arch.image_pixels } else { 0 };
    let mut image = DMatrix::zeros(pix, b);
    let mut aux = DMatrix::zeros(params.arch.aux_len(), b);
    let mut tu = DMatrix::zeros(NU, b);
    let mut tx = DMatrix::zeros(NX, b);
    for (c, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        if pix > 0 {
            for (dst, src) in image.column_mut(c).iter_mut().zip(&s.image) {
                *dst = *src as f64;
            }
        }
        aux.column_mut(c).copy_from_slice(&params.encode_aux(&s.other, &s.reference));
        tu.column_mut(c).copy_from_slice(&params.norm.action_in(&s.action));
        tx.column_mut(c).copy_from_slice(&params.norm.state_in(&s.state));
    }
    (Inputs { image, aux }, tu, tx)
}

/// Mean loss over all samples, evaluated in chunks.
pub fn dataset_loss(params: &PolicyParams, samples: &[TrainingSample], lambda: f64) -> f64 {
    let n = samples.len();
    let mut acc = 0.0;
    for start in (0..n).step_by(512) {
        let idx: Vec<usize> = (start..(start + 512).min(n)).collect();
        let (inp, tu, tx) = assemble(params, samples, &idx);
        acc += params.loss(&inp, &tu, &tx, lambda) * idx.len() as f64;
    }
    acc / n as f64
}

/// Adam with shuffled mini-batches. Returns the parameters with the lowest
/// full-dataset loss seen (the starting point included) and stops after
/// `patience` epochs without improvement.
pub fn train(params: &PolicyParams, samples: &[TrainingSample], hyper: &TrainConfig, seed: u64) -> Result<(PolicyParams, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    for s in samples {
        if s.reference.len() != params.arch.reference_indices.len() {
            return Err(Error::DimensionMismatch { expected: params.arch.reference_indices.len(), got: s.reference.len(), context: "sample reference" });
        }
        if params.arch.use_image && s.image.len() != params.arch.image_pixels {
            return Err(Error::DimensionMismatch { expected: params.arch.image_pixels, got: s.image.len(), context: "sample image" });
        }
    }
    let lambda = hyper.lambda_aux;
    let initial = dataset_loss(params, samples, lambda);
    if !initial.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    let mut cur = params.clone();
    let mut best = (params.clone(), initial, 0usize);
    let mut adam = Adam::new(&cur, AdamSettings { lr: hyper.learning_rate, ..AdamSettings::default() });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut since = 0;
    let mut epochs_run = 0;
    for epoch in 1..=hyper.epochs {
        let mut r = rng::stream(seed, &[purpose::SHUFFLE, epoch as u64]);
        order.shuffle(&mut r);
        for chunk in order.chunks(hyper.batch_size) {
            let (inp, tu, tx) = assemble(&cur, samples, chunk);
            let (loss, grads) = cur.loss_and_grad(&inp, &tu, &tx, lambda);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut cur, &grads);
        }
        epochs_run = epoch;
        let l = dataset_loss(&cur, samples, lambda);
        if !l.is_finite() || !cur.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if l < best.1 {
            best = (cur.clone(), l, epoch);
            since = 0;
        } else {
            since += 1;
            if since >= hyper.patience {
                break;
            }
        }
    }
    let report = TrainReport { initial_loss: initial, final_loss: best.1, epochs_run, best_epoch: best.2 };
    Ok((best.0, report))
}
