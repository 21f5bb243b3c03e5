//! End-to-end building blocks shared by the command-line tool and the
//! experiment tests: training data, prior training and enhancement of one
//! mixture.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::{stft, AudioClip, DspError, DEFAULT_FRAME_LEN, DEFAULT_HOP};
use crate::mcem::{run_mcem_with, IterationRecord, JointModel, McemError, SchemeConfig};
use crate::metrics::{MetricError, SceneMetric};
use crate::mnmf::{train_ego, EgoPrior, EgoTrainConfig, MnmfError};
use crate::scenes::{gen_ego_noise, gen_speech_mono, scene_seed, Scene, SceneError, SceneSpec};
use crate::vae::{train, TrainOutcome, TrainingConfig, VaeArch, VaeError, VaeModel};
use crate::wiener::{wiener_filter, EnhancementResult, WienerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Mnmf(#[from] MnmfError),
    #[error(transparent)]
    Mcem(#[from] McemError),
    #[error(transparent)]
    Wiener(#[from] WienerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Clean single-channel speech power frames (`frames x F`) from `clips`
/// independently seeded clips of the scene generator.
pub fn speech_training_frames(base: &SceneSpec, clips: usize, seed: u64) -> Result<Array2<f64>, PipelineError> {
    let parts: Vec<Array2<f64>> = (0..clips)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec { rng_seed: scene_seed(seed ^ 0x5eec_4000, i), ..base.clone() };
            let clip = AudioClip::mono(gen_speech_mono(&spec)?, spec.sample_rate)?;
            Ok(stft(&clip, DEFAULT_FRAME_LEN, DEFAULT_HOP)?.power_frames(0))
        })
        .collect::<Result<_, PipelineError>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("clips share the bin count"))
}

/// Trains the speech prior with the standard architecture.
pub fn train_speech_prior(frames: &Array2<f64>, cfg: &TrainingConfig) -> Result<TrainOutcome, PipelineError> {
    let model = VaeModel::new(VaeArch::standard(frames.ncols()), cfg.rng_seed)?;
    Ok(train(&model, frames.view(), cfg)?)
}

/// Ego-noise-only recording of the scene's robot for pre-training. The
/// activations come from `seed` and `gating_rate`, so they differ from any
/// test scene.
pub fn ego_training_clip(base: &SceneSpec, duration_s: f64, gating_rate: f64, seed: u64) -> Result<AudioClip, PipelineError> {
    let mut spec = SceneSpec { duration_s, rng_seed: scene_seed(seed ^ 0xe90_7a1, 0), ..base.clone() };
    spec.ego.gating_rate = gating_rate;
    Ok(gen_ego_noise(&spec)?)
}

pub fn train_ego_prior(clip: &AudioClip, rank: usize, cfg: &EgoTrainConfig) -> Result<EgoPrior, PipelineError> {
    let spec = stft(clip, DEFAULT_FRAME_LEN, DEFAULT_HOP)?;
    Ok(EgoPrior::from_training(&train_ego(&spec, rank, cfg)?))
}

/// Output of [`enhance`].
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub result: EnhancementResult,
    pub history: Vec<IterationRecord>,
    pub model: JointModel,
}

/// Runs inference on one mixture and filters it.
pub fn enhance(
    mixture: &AudioClip,
    vae: Arc<VaeModel>,
    ego_prior: Option<&EgoPrior>,
    cfg: &SchemeConfig,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<Enhanced, PipelineError> {
    let spec = stft(mixture, DEFAULT_FRAME_LEN, DEFAULT_HOP)?;
    let model = JointModel::initialize(vae, ego_prior, &spec, cfg)?;
    let (model, state) = run_mcem_with(&spec, model, cfg, on_iteration)?;
    let result = wiener_filter(&spec, &model, &state)?;
    Ok(Enhanced { result, history: state.history, model })
}

/// SI-SDR of a scene's reference channel before and after enhancement.
pub fn score(scene: &Scene, estimate: &AudioClip) -> Result<SceneMetric, PipelineError> {
    Ok(SceneMetric::new(scene.id.clone(), &scene.speech.channel(0), &scene.mixture.channel(0), &estimate.channel(0))?)
}
