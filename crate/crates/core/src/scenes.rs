//! Synthetic multichannel scenes: structured ego-noise, diffuse environmental
//! noise and a harmonic speech surrogate, mixed at controlled SNRs.
//!
//! Noise stems are drawn in the STFT domain from their covariance model and
//! resynthesized, so the ego-noise follows `Sigma_E,ft = R_f [W H]_ft` by
//! construction. Speech is synthesized in the time domain and spatialized by
//! a per-scene steering vector.
//!
//! The robot identity (`EgoParams::robot_seed`) fixes the ego dictionary `W`
//! and spatial covariances `R_f`; the scene seed drives everything else.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{
    frame_count, istft, read_wav, stft, write_wav, AudioClip, DspError, Spectrogram, WavEncoding, DEFAULT_FRAME_LEN,
    DEFAULT_HOP, DEFAULT_SAMPLE_RATE,
};
use crate::linalg::{CMat, CVec, C64};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene specification: {0}")]
    Invalid(String),
    #[error("{0} stem is silent")]
    Silent(&'static str),
    #[error("stems differ in shape: {0}")]
    Shape(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Evaluation scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Speech plus ego-noise.
    #[serde(rename = "ego")]
    Ego,
    /// Speech plus ego-noise plus environmental noise.
    #[serde(rename = "egoenv")]
    EgoEnv,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ego => "ego",
            Scenario::EgoEnv => "egoenv",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_', '+'], "").as_str() {
            "ego" => Ok(Scenario::Ego),
            "egoenv" => Ok(Scenario::EgoEnv),
            other => Err(SceneError::Invalid(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoParams {
    /// Number of generating spectral atoms.
    pub k_true: usize,
    /// Expected on/off switches per second of each atom; 0 gives stationary noise.
    pub gating_rate: f64,
    /// Identity of the robot: fixes `W` and `R_f`.
    pub robot_seed: u64,
}

impl Default for EgoParams {
    fn default() -> Self {
        Self { k_true: 8, gating_rate: 2.0, robot_seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    /// Power falls as `(1 + f / 200 Hz)^slope`.
    pub spectral_slope: f64,
    /// 1 is spatially white; 0 is a single coherent direction.
    pub diffuseness: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self { spectral_slope: -1.0, diffuseness: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechParams {
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
    /// Probability that a segment is voiced; the rest splits evenly between
    /// unvoiced bursts and pauses.
    pub voiced_prob: f64,
}

impl Default for SpeechParams {
    fn default() -> Self {
        Self { pitch_min_hz: 90.0, pitch_max_hz: 240.0, voiced_prob: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub channels: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub ego: EgoParams,
    pub env: EnvParams,
    pub speech: SpeechParams,
    /// Speech-to-ego-noise ratio.
    pub snr_ego_db: f64,
    /// Speech-to-environmental-noise ratio; `None` leaves the env stem at zero.
    pub snr_env_db: Option<f64>,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            duration_s: 3.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            ego: EgoParams::default(),
            env: EnvParams::default(),
            speech: SpeechParams::default(),
            snr_ego_db: 0.0,
            snr_env_db: Some(0.0),
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration must be positive");
        }
        if self.channels == 0 || self.channels > crate::linalg::MAX_CHANNELS {
            return bad("channel count must be between 1 and 8");
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        if self.ego.k_true == 0 {
            return bad("ego noise needs at least one atom");
        }
        if !(self.ego.gating_rate >= 0.0 && self.ego.gating_rate.is_finite()) {
            return bad("gating rate must be finite and nonnegative");
        }
        if !self.snr_ego_db.is_finite() || self.snr_env_db.is_some_and(|s| !s.is_finite()) {
            return bad("SNRs must be finite");
        }
        let p = &self.speech;
        if !(p.pitch_min_hz > 0.0 && p.pitch_min_hz <= p.pitch_max_hz && p.pitch_max_hz < self.sample_rate as f64 / 4.0) {
            return bad("pitch range must satisfy 0 < min <= max < fs / 4");
        }
        if !(0.0..=1.0).contains(&p.voiced_prob) || !(0.0..=1.0).contains(&self.env.diffuseness) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(id);
        rng
    }
}

const STREAM_SPEECH: u64 = 1;
const STREAM_EGO: u64 = 2;
const STREAM_ENV: u64 = 3;
const STREAM_ROBOT: u64 = 4;

/// Scene with its ground-truth stems.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub snr_ego_db: f64,
    pub snr_env_db: Option<f64>,
    pub mixture: AudioClip,
    pub speech: AudioClip,
    pub ego: AudioClip,
    pub env: AudioClip,
}

fn complex_normal(rng: &mut impl Rng) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal))
}

fn bin_hz(f: usize, sample_rate: u32) -> f64 {
    f as f64 * sample_rate as f64 / DEFAULT_FRAME_LEN as f64
}

/// Steering vector `a_f,m = g_m exp(-j 2 pi f tau_m)`.
struct Steering {
    gains: Vec<f64>,
    delays: Vec<f64>,
}

impl Steering {
    fn random(channels: usize, max_delay_s: f64, rng: &mut impl Rng) -> Self {
        Self {
            gains: (0..channels).map(|_| rng.random_range(0.7..1.3)).collect(),
            delays: (0..channels).map(|_| rng.random_range(-max_delay_s..max_delay_s)).collect(),
        }
    }

    fn at(&self, hz: f64) -> CVec {
        CVec::from_fn(self.gains.len(), |m| C64::from_polar(self.gains[m], -2.0 * PI * hz * self.delays[m]))
    }
}

/// Generating ego-noise parameters of one robot.
#[derive(Clone, Debug)]
pub struct EgoModel {
    /// `F x K_true`, unit column sums.
    pub w: Array2<f64>,
    /// `a_f a_f^H + 0.05 I` per bin.
    pub spatial: Vec<CMat>,
}

impl EgoModel {
    pub fn for_robot(params: &EgoParams, channels: usize, sample_rate: u32) -> Self {
        let bins = DEFAULT_FRAME_LEN / 2 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(params.robot_seed);
        rng.set_stream(STREAM_ROBOT);
        let nyquist = sample_rate as f64 / 2.0;
        let mut w = Array2::zeros((bins, params.k_true));
        for k in 0..params.k_true {
            let narrowband = k % 2 == 0;
            if narrowband {
                // Motor whine: a harmonic series with narrow lines.
                let f0 = rng.random_range(150.0..1200.0);
                let width = rng.random_range(15.0..40.0);
                let mut h = 1.0;
                while h * f0 < nyquist.min(6000.0) {
                    let amp = h.powf(-0.7);
                    for f in 0..bins {
                        let d = (bin_hz(f, sample_rate) - h * f0) / width;
                        w[(f, k)] += amp * (-0.5 * d * d).exp();
                    }
                    h += 1.0;
                }
            } else {
                // Gear and airflow noise: one broad resonance.
                let center = rng.random_range(400.0..5000.0);
                let bw = rng.random_range(300.0..2000.0);
                for f in 0..bins {
                    let d = (bin_hz(f, sample_rate) - center) / bw;
                    w[(f, k)] = (-0.5 * d * d).exp();
                }
            }
            let mut col = w.column_mut(k);
            col.mapv_inplace(|v| v + 1e-3);
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        let steering = Steering::random(channels, 5e-4, &mut rng);
        let spatial = (0..bins)
            .map(|f| {
                let a = steering.at(bin_hz(f, sample_rate));
                CMat::outer(&a).add_diag(0.05)
            })
            .collect();
        Self { w, spatial }
    }
}

/// Draws `x_ft = chol(R_f) n sqrt(v_ft)` and resynthesizes `len` samples.
fn synthesize(
    spatial: &[CMat],
    variance: &Array2<f64>,
    len: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Result<AudioClip, SceneError> {
    let (bins, frames) = variance.dim();
    let m = spatial[0].dim();
    let mut coeffs = Array3::<C64>::zeros((m, bins, frames));
    for (f, r) in spatial.iter().enumerate() {
        let l = r.cholesky().ok_or_else(|| SceneError::Invalid(format!("spatial covariance not PD at bin {f}")))?;
        for t in 0..frames {
            let n = CVec::from_fn(m, |_| complex_normal(rng));
            let x = l.mul_vec(&n);
            let s = variance[(f, t)].sqrt();
            for c in 0..m {
                coeffs[(c, f, t)] = x[c] * s;
            }
        }
    }
    let spec =
        Spectrogram::from_parts(coeffs, DEFAULT_FRAME_LEN, DEFAULT_HOP, sample_rate, DEFAULT_FRAME_LEN - DEFAULT_HOP, Some(len))?;
    Ok(istft(&spec)?)
}

fn stft_frames(len: usize) -> usize {
    frame_count(len, DEFAULT_FRAME_LEN, DEFAULT_HOP)
}

/// On/off activations of each atom: a two-state Markov chain per atom with
/// switching probability `gating_rate * hop / fs` per frame.
pub fn ego_activations(spec: &SceneSpec, frames: usize, rng: &mut impl Rng) -> Array2<f64> {
    let k = spec.ego.k_true;
    let p_switch = (spec.ego.gating_rate * DEFAULT_HOP as f64 / spec.sample_rate as f64).min(1.0);
    let mut h = Array2::zeros((k, frames));
    for i in 0..k {
        let level = rng.random_range(0.5..1.5);
        let mut on = p_switch == 0.0 || rng.random_bool(0.5);
        for t in 0..frames {
            if p_switch > 0.0 && rng.random_bool(p_switch) {
                on = !on;
            }
            h[(i, t)] = if on { level } else { 0.02 * level };
        }
    }
    h
}

pub fn gen_ego_noise(spec: &SceneSpec) -> Result<AudioClip, SceneError> {
    spec.validate()?;
    let len = spec.num_samples();
    let model = EgoModel::for_robot(&spec.ego, spec.channels, spec.sample_rate);
    let mut rng = spec.stream(STREAM_EGO);
    let h = ego_activations(spec, stft_frames(len), &mut rng);
    synthesize(&model.spatial, &model.w.dot(&h), len, spec.sample_rate, &mut rng)
}

/// Environmental noise covariance `d I + (1 - d) b b^H` with a random unit-modulus `b`.
fn env_spatial(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<CMat> {
    let bins = DEFAULT_FRAME_LEN / 2 + 1;
    let d = spec.env.diffuseness;
    let steering = Steering { gains: vec![1.0; spec.channels], delays: Steering::random(spec.channels, 1e-3, rng).delays };
    (0..bins)
        .map(|f| {
            let b = steering.at(bin_hz(f, spec.sample_rate));
            (CMat::outer(&b).scale(1.0 - d) + CMat::scaled_identity(spec.channels, d)).add_diag(1e-6)
        })
        .collect()
}

pub fn gen_env_noise(spec: &SceneSpec) -> Result<AudioClip, SceneError> {
    spec.validate()?;
    let len = spec.num_samples();
    let mut rng = spec.stream(STREAM_ENV);
    let spatial = env_spatial(spec, &mut rng);
    let frames = stft_frames(len);
    let profile: Vec<f64> =
        (0..spatial.len()).map(|f| (1.0 + bin_hz(f, spec.sample_rate) / 200.0).powf(spec.env.spectral_slope)).collect();
    let variance = Array2::from_shape_fn((profile.len(), frames), |(f, _)| profile[f]);
    synthesize(&spatial, &variance, len, spec.sample_rate, &mut rng)
}

/// Vowel formant triples (Hz).
const VOWELS: [[f64; 3]; 7] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 160.0];

fn envelope(hz: f64, formants: &[f64; 3]) -> f64 {
    let peaks: f64 = formants
        .iter()
        .zip(FORMANT_BW)
        .enumerate()
        .map(|(i, (fc, bw))| {
            let d = (hz - fc) / bw;
            (-0.5 * d * d).exp() / (1.0 + i as f64)
        })
        .sum();
    (peaks + 0.02) / (1.0 + hz / 1000.0)
}

/// Raised-cosine fade of `ramp` samples at both ends of a segment.
fn fade(i: usize, len: usize, ramp: usize) -> f64 {
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

/// Single-channel speech surrogate: voiced harmonic segments with gliding
/// pitch and interpolated formants, unvoiced noise bursts and pauses.
pub fn gen_speech_mono(spec: &SceneSpec) -> Result<Vec<f64>, SceneError> {
    spec.validate()?;
    let mut rng = spec.stream(STREAM_SPEECH);
    let n = spec.num_samples();
    let fs = spec.sample_rate as f64;
    let p = &spec.speech;
    let mut out = vec![0.0; n];
    let mut pos = 0;
    let mut phase = 0.0;
    let mut hp_prev = 0.0;
    while pos < n {
        let u: f64 = rng.random();
        let rest = (1.0 - p.voiced_prob) / 2.0;
        let (kind, dur) = if u < p.voiced_prob {
            (0, rng.random_range(0.12..0.30))
        } else if u < p.voiced_prob + rest {
            (1, rng.random_range(0.04..0.10))
        } else {
            (2, rng.random_range(0.05..0.15))
        };
        let len = ((dur * fs) as usize).clamp(2, n - pos);
        let ramp = ((0.02 * fs) as usize).min(len / 2).max(1);
        match kind {
            0 => {
                let f_start = rng.random_range(p.pitch_min_hz..=p.pitch_max_hz);
                let f_end = rng.random_range(p.pitch_min_hz..=p.pitch_max_hz);
                let va = VOWELS[rng.random_range(0..VOWELS.len())];
                let vb = VOWELS[rng.random_range(0..VOWELS.len())];
                let gain = rng.random_range(0.5..1.0);
                let max_h = ((fs / 2.0 - 200.0) / p.pitch_min_hz).floor() as usize;
                // Harmonic amplitudes are refreshed every 5 ms.
                let block = (0.005 * fs) as usize;
                let mut amps = vec![0.0; max_h];
                for i in 0..len {
                    let x = i as f64 / len as f64;
                    let f0 = f_start + (f_end - f_start) * x;
                    if i % block == 0 {
                        let formants = [0, 1, 2].map(|j| va[j] + (vb[j] - va[j]) * x);
                        for (h, a) in amps.iter_mut().enumerate() {
                            let hz = (h + 1) as f64 * f0;
                            *a = if hz < fs / 2.0 - 200.0 { envelope(hz, &formants) } else { 0.0 };
                        }
                    }
                    phase = (phase + 2.0 * PI * f0 / fs) % (2.0 * PI);
                    let s: f64 = amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum();
                    out[pos + i] = gain * fade(i, len, ramp) * s;
                }
            }
            1 => {
                let gain = rng.random_range(0.05..0.15);
                for i in 0..len {
                    let x: f64 = rng.sample(StandardNormal);
                    let hp = x - 0.9 * hp_prev;
                    hp_prev = x;
                    out[pos + i] = gain * fade(i, len, ramp) * hp;
                }
            }
            _ => {}
        }
        pos += len;
    }
    Ok(out)
}

/// Speech surrogate rendered to `channels` microphones by a per-scene
/// steering vector.
pub fn gen_speech(spec: &SceneSpec) -> Result<AudioClip, SceneError> {
    let mono = gen_speech_mono(spec)?;
    let len = mono.len();
    let clip = AudioClip::mono(mono, spec.sample_rate)?;
    let s = stft(&clip, DEFAULT_FRAME_LEN, DEFAULT_HOP)?;
    let mut rng = spec.stream(STREAM_SPEECH);
    rng.set_word_pos(1 << 40);
    let steering = Steering::random(spec.channels, 5e-4, &mut rng);
    let (_, bins, frames) = s.coeffs().dim();
    let mut coeffs = Array3::<C64>::zeros((spec.channels, bins, frames));
    for f in 0..bins {
        let a = steering.at(bin_hz(f, spec.sample_rate));
        for t in 0..frames {
            let v = s.coeffs()[(0, f, t)];
            for m in 0..spec.channels {
                coeffs[(m, f, t)] = a[m] * v;
            }
        }
    }
    let out = istft(&s.with_coeffs(coeffs)?)?;
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

/// Scales `noise` so that `10 log10(P_speech / P_noise) = snr_db` and returns
/// `(speech + scaled noise, scaled noise)`.
pub fn mix_at_snr(speech: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<(AudioClip, AudioClip), SceneError> {
    if speech.samples().dim() != noise.samples().dim() {
        return Err(SceneError::Shape(format!("{:?} vs {:?}", speech.samples().dim(), noise.samples().dim())));
    }
    if snr_db.is_nan() {
        return Err(SceneError::Invalid("SNR is NaN".into()));
    }
    let (ps, pn) = (speech.power(), noise.power());
    if ps <= 0.0 {
        return Err(SceneError::Silent("speech"));
    }
    if pn <= 0.0 {
        return Err(SceneError::Silent("noise"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = noise.scaled(gain);
    let mixture = AudioClip::new(speech.samples() + scaled.samples(), speech.sample_rate())?;
    Ok((mixture, scaled))
}

/// One scene from a fully specified [`SceneSpec`].
pub fn build_scene(spec: &SceneSpec, id: impl Into<String>) -> Result<Scene, SceneError> {
    spec.validate()?;
    let speech = gen_speech(spec)?;
    let (_, ego) = mix_at_snr(&speech, &gen_ego_noise(spec)?, spec.snr_ego_db)?;
    let env = match spec.snr_env_db {
        Some(snr) => mix_at_snr(&speech, &gen_env_noise(spec)?, snr)?.1,
        None => AudioClip::zeros(spec.channels, speech.len(), spec.sample_rate),
    };
    let mixture = AudioClip::new(speech.samples() + ego.samples() + env.samples(), spec.sample_rate)?;
    Ok(Scene {
        id: id.into(),
        scenario: if spec.snr_env_db.is_some() { Scenario::EgoEnv } else { Scenario::Ego },
        seed: spec.rng_seed,
        snr_ego_db: spec.snr_ego_db,
        snr_env_db: spec.snr_env_db,
        mixture,
        speech,
        ego,
        env,
    })
}

/// Seed of scene `index` in a test set.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer of (seed, index).
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene specifications of a test set: ego SNR drawn from {-5, ..., 5} dB;
/// in `EgoEnv` the environmental noise sits at 0 dB relative to speech.
pub fn testset_specs(base: &SceneSpec, n: usize, scenario: Scenario, seed: u64) -> Result<Vec<SceneSpec>, SceneError> {
    if n == 0 {
        return Err(SceneError::Invalid("a test set needs at least one scene".into()));
    }
    base.validate()?;
    Ok((0..n)
        .map(|i| {
            let s = scene_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            SceneSpec {
                rng_seed: s,
                snr_ego_db: rng.random_range(-5..=5) as f64,
                snr_env_db: match scenario {
                    Scenario::Ego => None,
                    Scenario::EgoEnv => Some(base.snr_env_db.unwrap_or(0.0)),
                },
                ..base.clone()
            }
        })
        .collect())
}

pub fn build_testset_with(base: &SceneSpec, n: usize, scenario: Scenario, seed: u64) -> Result<Vec<Scene>, SceneError> {
    testset_specs(base, n, scenario, seed)?
        .par_iter()
        .enumerate()
        .map(|(i, spec)| build_scene(spec, format!("{}-{i:03}", scenario.name())))
        .collect()
}

/// Test set with default scene parameters.
pub fn build_testset(n: usize, scenario: Scenario, seed: u64) -> Result<Vec<Scene>, SceneError> {
    build_testset_with(&SceneSpec::default(), n, scenario, seed)
}

/// Mean over bins of the eigenvalue entropy `-sum p ln p` of the empirical
/// spatial covariance, `p = eig / tr`. Zero for a rank-one field, `ln M` for
/// a spatially white one.
pub fn spatial_entropy(clip: &AudioClip) -> Result<f64, SceneError> {
    let covs = empirical_spatial_covariances(clip)?;
    let mut acc = 0.0;
    for r in &covs {
        let tr = r.trace_re();
        if tr <= 0.0 {
            continue;
        }
        acc -= r.hermitian_eigen().values().iter().map(|&v| v.max(0.0) / tr).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    Ok(acc / covs.len() as f64)
}

/// `(1 / T) sum_t x_ft x_ft^H` for every bin.
pub fn empirical_spatial_covariances(clip: &AudioClip) -> Result<Vec<CMat>, SceneError> {
    let s = stft(clip, DEFAULT_FRAME_LEN, DEFAULT_HOP)?;
    let frames = s.frames();
    let x = s.bin_vectors();
    Ok((0..s.bins())
        .map(|f| {
            let mut r = CMat::zeros(s.channels());
            for t in 0..frames {
                r.add_scaled_outer(1.0 / frames as f64, &x[f * frames + t]);
            }
            r
        })
        .collect())
}

/// Correlation matrix distance `1 - tr(A B) / (|A|_F |B|_F)`.
pub fn correlation_matrix_distance(a: &CMat, b: &CMat) -> f64 {
    1.0 - a.trace_of_product(b).re / (a.frobenius_norm() * b.frobenius_norm())
}

pub const MANIFEST_HEADER: &str = "# egonoise scene manifest v1";
const MANIFEST_COLUMNS: &str = "id\tscenario\tseed\tsnr_ego_db\tsnr_env_db\tmixture\tspeech\tego\tenv";

/// One manifest row; stem paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub snr_ego_db: f64,
    pub snr_env_db: Option<f64>,
    pub mixture: PathBuf,
    pub speech: PathBuf,
    pub ego: PathBuf,
    pub env: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n{MANIFEST_COLUMNS}\n");
        for e in &self.entries {
            let env = e.snr_env_db.map_or_else(|| "-".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.scenario,
                e.seed,
                e.snr_ego_db,
                env,
                e.mixture.display(),
                e.speech.display(),
                e.ego.display(),
                e.env.display()
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let bad = |line: usize, msg: &str| SceneError::Manifest(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(bad(1, "missing version header")),
        }
        match lines.next() {
            Some((_, c)) if c.trim() == MANIFEST_COLUMNS => {}
            _ => return Err(bad(2, "unexpected column header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 9 {
                return Err(bad(i + 1, "expected 9 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                scenario: cols[1].parse()?,
                seed: cols[2].parse().map_err(|_| bad(i + 1, "bad seed"))?,
                snr_ego_db: num(cols[3])?,
                snr_env_db: if cols[4] == "-" { None } else { Some(num(cols[4])?) },
                mixture: cols[5].into(),
                speech: cols[6].into(),
                ego: cols[7].into(),
                env: cols[8].into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        let mut text = String::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

/// Writes the stems of `scene` as float WAV files under `dir/<id>/` and
/// returns its manifest row.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<ManifestEntry, SceneError> {
    let sub = PathBuf::from(&scene.id);
    fs::create_dir_all(dir.join(&sub))?;
    let mut paths = Vec::new();
    for (name, clip) in [("mixture", &scene.mixture), ("speech", &scene.speech), ("ego", &scene.ego), ("env", &scene.env)] {
        let rel = sub.join(format!("{name}.wav"));
        write_wav(dir.join(&rel), clip, WavEncoding::Float32)?;
        paths.push(rel);
    }
    let [mixture, speech, ego, env]: [PathBuf; 4] = paths.try_into().expect("four stems");
    Ok(ManifestEntry {
        id: scene.id.clone(),
        scenario: scene.scenario,
        seed: scene.seed,
        snr_ego_db: scene.snr_ego_db,
        snr_env_db: scene.snr_env_db,
        mixture,
        speech,
        ego,
        env,
    })
}

/// Stems of one manifest row, resolved against the manifest directory.
pub fn load_stems(dir: &Path, entry: &ManifestEntry) -> Result<[AudioClip; 4], SceneError> {
    Ok([
        read_wav(dir.join(&entry.mixture))?,
        read_wav(dir.join(&entry.speech))?,
        read_wav(dir.join(&entry.ego))?,
        read_wav(dir.join(&entry.env))?,
    ])
}
