//! Test-time inference by Monte Carlo EM.
//!
//! The mixture at bin `f`, frame `t` is modeled as
//!
//! ```text
//! X_ft ~ N_C(0, g_t sigma^2_f(z_t) R_S,f + R_E,f [W_E H_E]_ft + R_B,f [W_B H_B]_ft)
//! ```
//!
//! with the speech variance `sigma^2_f(z)` given by the VAE decoder, an
//! ego-noise component (E) and an environmental-noise component (B).
//!
//! The E-step draws `R` latent samples per frame with random-walk
//! Metropolis-Hastings. The M-step minimizes the sample-averaged negative
//! log-likelihood
//!
//! ```text
//! -R Q = sum_r sum_{f,t} tr(X X^H Sigma_ft(z_t^(r))^{-1}) + ln det Sigma_ft(z_t^(r))
//! ```
//!
//! block by block: square-root multiplicative updates for `g`, `W_B`, `H_B`,
//! `H_E` and Riccati solves for `R_S` and `R_B`. Which blocks adapt depends on
//! the [`Scheme`].

mod kernel;
mod sampler;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use kernel::{load as load_noise, Basis};
use kernel::SpectralCache;
pub use sampler::{metropolis_hastings, EStepTarget, MhChain};
use sampler::FrameChains;

use crate::dsp::Spectrogram;
use crate::linalg::{CMat, CVec, KahanSum, MAX_CHANNELS};
use crate::mnmf::{
    clamp_spectrum, multiplicative_update, solve_riccati, EgoPrior, MnmfError, NmfFactor, NoiseComponentModel,
    SpatialCovSet, EPS_FLOOR,
};
use crate::vae::{VaeError, VaeModel};

/// Dictionary splits `(K, K_B, K_E)` of the partially adaptive scheme.
pub const PARTIAL_SPLITS: [(usize, usize, usize); 7] =
    [(16, 8, 8), (32, 16, 16), (64, 32, 32), (96, 32, 64), (128, 32, 96), (160, 32, 128), (192, 32, 160)];

#[derive(Debug, Error)]
pub enum McemError {
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("the {0} scheme needs a pre-trained ego-noise model")]
    MissingEgoPrior(Scheme),
    #[error("ego-noise model does not fit this run: {0}")]
    EgoPriorMismatch(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mixture covariance is singular at bin {f}, frame {t}")]
    Singular { f: usize, t: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no latent samples; run the E-step first")]
    NoSamples,
    #[error("frozen ego-noise parameters changed during inference")]
    FrozenPriorModified,
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Mnmf(#[from] MnmfError),
}

/// Which noise parameters are learned at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Ego-noise dictionary and spatial covariances pre-trained and frozen; no
    /// environmental component.
    Fixed,
    /// A single environmental component learned entirely from the mixture.
    Adaptive,
    /// Frozen ego-noise dictionary and spatial covariances plus an adaptive
    /// environmental component.
    Partial,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Fixed, Scheme::Adaptive, Scheme::Partial];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fixed => "fixed",
            Scheme::Adaptive => "adaptive",
            Scheme::Partial => "partial",
        }
    }

    pub fn needs_ego_prior(self) -> bool {
        self != Scheme::Adaptive
    }

    /// `(K_E, K_B)` for a total dictionary size `k`.
    pub fn split(self, k: usize) -> Result<(usize, usize), McemError> {
        match self {
            Scheme::Fixed => Ok((k, 0)),
            Scheme::Adaptive => Ok((0, k)),
            Scheme::Partial => PARTIAL_SPLITS
                .iter()
                .find(|(total, _, _)| *total == k)
                .map(|&(_, kb, ke)| (ke, kb))
                .ok_or_else(|| {
                    McemError::Config(format!(
                        "no default partial split for K = {k}; choose one of 16, 32, 64, 96, 128, 160, 192 or set k_ego/k_env"
                    ))
                }),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = McemError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Scheme::Fixed),
            "adaptive" => Ok(Scheme::Adaptive),
            "partial" => Ok(Scheme::Partial),
            other => Err(McemError::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Settings of one inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub dict_size: usize,
    pub k_ego: usize,
    pub k_env: usize,
    pub em_iters: usize,
    pub r_samples: usize,
    /// Metropolis-Hastings steps discarded at the start of every E-step.
    pub burn_in: usize,
    /// Random-walk step per coordinate; `None` means `0.01 * sqrt(L)`.
    pub mh_proposal_std: Option<f64>,
    pub rng_seed: u64,
    /// Stop once the relative loss change over `early_stop_window` iterations
    /// drops below this.
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
    #[serde(skip)]
    pub e_step_target: EStepTarget,
}

impl SchemeConfig {
    /// Defaults with the dictionary split of `scheme` for total size `dict_size`.
    pub fn new(scheme: Scheme, dict_size: usize) -> Result<Self, McemError> {
        let (k_ego, k_env) = scheme.split(dict_size)?;
        Ok(Self {
            scheme,
            dict_size,
            k_ego,
            k_env,
            em_iters: 100,
            r_samples: 10,
            burn_in: 30,
            mh_proposal_std: None,
            rng_seed: 0,
            early_stop_tol: 1e-4,
            early_stop_window: 5,
            e_step_target: EStepTarget::Posterior,
        })
    }

    pub fn validate(&self) -> Result<(), McemError> {
        let bad = |msg: String| Err(McemError::Config(msg));
        if self.k_ego + self.k_env != self.dict_size {
            return bad(format!("K_E ({}) + K_B ({}) must equal K ({})", self.k_ego, self.k_env, self.dict_size));
        }
        match self.scheme {
            Scheme::Fixed if self.k_env != 0 || self.k_ego == 0 => {
                return bad("fixed scheme needs K_B = 0 and K_E >= 1".into())
            }
            Scheme::Adaptive if self.k_ego != 0 || self.k_env == 0 => {
                return bad("adaptive scheme needs K_E = 0 and K_B >= 1".into())
            }
            Scheme::Partial if self.k_ego == 0 || self.k_env == 0 => {
                return bad("partial scheme needs K_E >= 1 and K_B >= 1".into())
            }
            _ => {}
        }
        if self.r_samples == 0 {
            return bad("r_samples must be at least 1".into());
        }
        if self.em_iters == 0 {
            return bad("em_iters must be at least 1".into());
        }
        if self.early_stop_window == 0 {
            return bad("early_stop_window must be at least 1".into());
        }
        if let Some(s) = self.mh_proposal_std {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("mh_proposal_std must be finite and nonnegative".into());
            }
        }
        Ok(())
    }

    pub fn proposal_std(&self, latent_dim: usize) -> f64 {
        self.mh_proposal_std.unwrap_or(0.01 * (latent_dim as f64).sqrt())
    }
}

/// Speech prior plus both noise components.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub vae: Arc<VaeModel>,
    pub speech_spatial: SpatialCovSet,
    pub ego: NoiseComponentModel,
    pub env: NoiseComponentModel,
}

fn empty_component(bins: usize, frames: usize, channels: usize) -> NoiseComponentModel {
    let mut c = NoiseComponentModel::new(
        NmfFactor::new(Array2::zeros((bins, 0)), Array2::zeros((0, frames))).expect("empty factor"),
        SpatialCovSet::identity(bins, channels),
    )
    .expect("consistent shapes");
    c.adapt_w = false;
    c.adapt_h = false;
    c.adapt_r = false;
    c
}

impl JointModel {
    /// Initial parameters for a mixture: `R_S = R_B = I`, random `W_B` (unit
    /// column sums), `H_B`, `H_E` from `Uniform(0.1, 1)` (activations then rescaled by one scalar
    /// so that the noise model carries the mixture power), and `W_E`, `R_E`
    /// taken from the ego prior.
    pub fn initialize(
        vae: Arc<VaeModel>,
        ego_prior: Option<&EgoPrior>,
        spec: &Spectrogram,
        cfg: &SchemeConfig,
    ) -> Result<Self, McemError> {
        cfg.validate()?;
        let (m, bins, frames) = (spec.channels(), spec.bins(), spec.frames());
        if m > MAX_CHANNELS {
            return Err(McemError::Dimension(format!("{m} channels, at most {MAX_CHANNELS} supported")));
        }
        if vae.freq_bins() != bins {
            return Err(McemError::Dimension(format!("VAE has {} bins, mixture has {bins}", vae.freq_bins())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x1417_1a11_2e00_0001));
        let mut ego = if cfg.k_ego > 0 {
            let prior = ego_prior.ok_or(McemError::MissingEgoPrior(cfg.scheme))?;
            if prior.rank() != cfg.k_ego {
                return Err(McemError::EgoPriorMismatch(format!(
                    "prior has K_E = {}, configuration needs {}",
                    prior.rank(),
                    cfg.k_ego
                )));
            }
            if prior.w.nrows() != bins || prior.spatial.channels() != m {
                return Err(McemError::EgoPriorMismatch(format!(
                    "prior is {} ch x {} bins, mixture is {m} ch x {bins} bins",
                    prior.spatial.channels(),
                    prior.w.nrows()
                )));
            }
            let h = Array2::from_shape_simple_fn((cfg.k_ego, frames), || rng.random_range(0.1..1.0));
            let mut c = NoiseComponentModel::new(NmfFactor::new(prior.w.clone(), h)?, prior.spatial.clone())?;
            c.adapt_w = false;
            c.adapt_r = false;
            c
        } else {
            empty_component(bins, frames, m)
        };
        let mut env = if cfg.k_env > 0 {
            let mut c = NoiseComponentModel::random(bins, cfg.k_env, frames, m, &mut rng);
            // Same unit column sums as the prior's atoms, so both start with
            // comparable per-atom power.
            for mut col in c.factor.w_mut().columns_mut() {
                let sum = col.sum();
                col.mapv_inplace(|v| v / sum);
            }
            c
        } else {
            empty_component(bins, frames, m)
        };

        let data_power = spec.coeffs().iter().map(|c| c.norm_sqr()).sum::<f64>() / spec.coeffs().len() as f64;
        let model_power = (ego.factor.product() + env.factor.product()).mean().unwrap_or(0.0);
        if data_power > 0.0 && model_power > 0.0 {
            let s = data_power / model_power;
            ego.factor.h_mut().mapv_inplace(|h| (h * s).max(EPS_FLOOR));
            env.factor.h_mut().mapv_inplace(|h| (h * s).max(EPS_FLOOR));
        }
        Ok(Self { vae, speech_spatial: SpatialCovSet::identity(bins, m), ego, env })
    }

    pub fn bins(&self) -> usize {
        self.speech_spatial.bins()
    }

    pub fn channels(&self) -> usize {
        self.speech_spatial.channels()
    }

    pub fn frames(&self) -> usize {
        self.env.factor.frames()
    }

    /// `Sigma_E,ft + Sigma_B,ft + delta I` with `delta = 1e-10 tr / M`.
    pub fn noise_cov(&self, f: usize, t: usize) -> CMat {
        load_noise(self.ego.cov(f, t) + self.env.cov(f, t))
    }

    fn check_scheme(&self, cfg: &SchemeConfig) -> Result<(), McemError> {
        if self.ego.factor.rank() != cfg.k_ego || self.env.factor.rank() != cfg.k_env {
            return Err(McemError::Config(format!(
                "model has K_E = {}, K_B = {}; configuration says {}, {}",
                self.ego.factor.rank(),
                self.env.factor.rank(),
                cfg.k_ego,
                cfg.k_env
            )));
        }
        if cfg.scheme.needs_ego_prior() && (self.ego.adapt_w || self.ego.adapt_r) {
            return Err(McemError::Config(format!("{} scheme must keep W_E and R_E fixed", cfg.scheme)));
        }
        Ok(())
    }

    fn check_dims(&self, obs: &Observations) -> Result<(), McemError> {
        if self.bins() != obs.bins || self.channels() != obs.channels || self.frames() != obs.frames {
            return Err(McemError::Dimension(format!(
                "model is {} ch x {} bins x {} frames, mixture is {} x {} x {}",
                self.channels(),
                self.bins(),
                self.frames(),
                obs.channels,
                obs.bins,
                obs.frames
            )));
        }
        Ok(())
    }
}

/// `g_t sigma^2 R_S,f + Sigma_E,ft + Sigma_B,ft`, with the noise part loaded
/// as in [`JointModel::noise_cov`].
pub fn mixture_cov(model: &JointModel, g_t: f64, sigma2_f: f64, f: usize, t: usize) -> CMat {
    model.speech_spatial.get(f).scale(g_t * sigma2_f) + model.noise_cov(f, t)
}

/// [`mixture_cov`] with the speech variance decoded from a latent vector.
pub fn mixture_cov_at(model: &JointModel, state: &McemState, z: &[f64], f: usize, t: usize) -> Result<CMat, McemError> {
    let sigma2 = model.vae.decode(z)?;
    Ok(mixture_cov(model, state.g[t], sigma2[f], f, t))
}

/// Loss of the model before and after one block update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstepLoss {
    /// Block updated last: `start`, `g`, `W_B`, `H_B`, `H_E`, `R_S` or `R_B`.
    pub after: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub substeps: Vec<SubstepLoss>,
}

/// One EM iteration as written to the inference log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub acceptance_rate: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub substeps: Vec<SubstepLoss>,
}

/// Gains, Markov chains and retained latent samples.
#[derive(Clone, Debug)]
pub struct McemState {
    pub g: Vec<f64>,
    /// Current chain position per frame, `T x L`.
    pub chain: Array2<f64>,
    /// Decoded variances at `chain`, `T x F`.
    pub chain_sigma2: Array2<f64>,
    /// Retained samples, `R` arrays of `T x L`.
    pub z_samples: Vec<Array2<f64>>,
    /// Decoded variances of `z_samples`, `R` arrays of `T x F`.
    pub sigma2_samples: Vec<Array2<f64>>,
    pub history: Vec<IterationRecord>,
    /// Acceptance rate of the last E-step.
    pub last_acceptance: f64,
    rng: ChaCha8Rng,
}

impl McemState {
    /// `g = 1`; chains start at the prior mean `z = 0`. Encoder means of
    /// noisy mixtures land far outside the prior and decode to variances
    /// orders of magnitude above the data.
    pub fn initialize(model: &JointModel, spec: &Spectrogram, cfg: &SchemeConfig) -> Result<Self, McemError> {
        let mu = Array2::zeros((spec.frames(), model.vae.latent_dim()));
        let sigma2 = model.vae.decode_batch_unchecked(mu.view());
        Ok(Self {
            g: vec![1.0; spec.frames()],
            chain: mu,
            chain_sigma2: sigma2,
            z_samples: Vec::new(),
            sigma2_samples: Vec::new(),
            history: Vec::new(),
            last_acceptance: 0.0,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
        })
    }

    /// State with the given gains and latent samples; the chains sit at the
    /// last sample.
    pub fn from_samples(vae: &VaeModel, g: Vec<f64>, z_samples: Vec<Array2<f64>>, seed: u64) -> Result<Self, McemError> {
        let last = z_samples.last().ok_or(McemError::NoSamples)?.clone();
        let sigma2_samples = z_samples.iter().map(|z| vae.decode_batch(z.view())).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            g,
            chain_sigma2: sigma2_samples.last().unwrap().clone(),
            chain: last,
            z_samples,
            sigma2_samples,
            history: Vec::new(),
            last_acceptance: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

pub(crate) struct Observations {
    pub x: Vec<CVec>,
    pub bins: usize,
    pub frames: usize,
    pub channels: usize,
}

impl Observations {
    pub fn new(spec: &Spectrogram) -> Result<Self, McemError> {
        if spec.channels() > MAX_CHANNELS {
            return Err(McemError::Dimension(format!("{} channels, at most {MAX_CHANNELS}", spec.channels())));
        }
        Ok(Self { x: spec.bin_vectors(), bins: spec.bins(), frames: spec.frames(), channels: spec.channels() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Ego,
    Env,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SpatialTarget {
    Speech,
    Env,
}

#[derive(Clone, Copy, Debug, Default)]
struct Needs {
    g: bool,
    source: Option<Source>,
    riccati: Option<SpatialTarget>,
    cache: bool,
}

#[derive(Default)]
struct BinOut {
    loss: f64,
    g_num: Vec<f64>,
    g_den: Vec<f64>,
    c_num: Vec<f64>,
    c_den: Vec<f64>,
    riccati: Option<(CMat, CMat)>,
    wabs2: Vec<f64>,
    lambda: Vec<f64>,
}

struct PassOut {
    loss: f64,
    g_num: Vec<f64>,
    g_den: Vec<f64>,
    c_num: Array2<f64>,
    c_den: Array2<f64>,
    riccati: Vec<(CMat, CMat)>,
    cache: Option<SpectralCache>,
}

struct PassCtx<'a> {
    model: &'a JointModel,
    obs: &'a Observations,
    g: &'a [f64],
    sigma2: &'a [Array2<f64>],
    v_ego: Array2<f64>,
    v_env: Array2<f64>,
}

impl PassCtx<'_> {
    fn bin(&self, f: usize, needs: Needs) -> Result<BinOut, McemError> {
        let frames = self.obs.frames;
        let m = self.obs.channels;
        let rs = self.model.speech_spatial.get(f);
        let re = self.model.ego.spatial.get(f);
        let rb = self.model.env.spatial.get(f);
        let mut out = BinOut::default();
        if needs.g {
            out.g_num = vec![0.0; frames];
            out.g_den = vec![0.0; frames];
        }
        if needs.source.is_some() {
            out.c_num = vec![0.0; frames];
            out.c_den = vec![0.0; frames];
        }
        let source_cov = needs.source.map(|s| match s {
            Source::Ego => re,
            Source::Env => rb,
        });
        let mut ric_a = CMat::zeros(m);
        let mut ric_b = CMat::zeros(m);
        let mut loss = KahanSum::new();
        // With a single noise component N_ft = v_ft R_f, so one decomposition
        // per bin serves every frame.
        let single = match (self.model.ego.factor.rank(), self.model.env.factor.rank()) {
            (0, _) => Some((rb, &self.v_env)),
            (_, 0) => Some((re, &self.v_ego)),
            _ => None,
        };
        let unit = match single {
            Some((r, _)) => Some(Basis::new(&load_noise(*r), rs, &self.obs.x[f * frames]).ok_or(McemError::Singular { f, t: 0 })?),
            None => None,
        };
        for t in 0..frames {
            let (ve, vb) = (self.v_ego[(f, t)], self.v_env[(f, t)]);
            let x = &self.obs.x[f * frames + t];
            let basis = match (&unit, single) {
                (Some(u), Some((_, v))) if v[(f, t)] > 0.0 => u.rescaled(v[(f, t)], x),
                _ => Basis::new(&load_noise(re.scale(ve) + rb.scale(vb)), rs, x).ok_or(McemError::Singular { f, t })?,
            };
            let wabs2 = basis.wabs2();
            let q = source_cov.map(|c| basis.p.congruence(c));
            let mut diag_acc = [0.0; MAX_CHANNELS];
            let mut outer_acc = CMat::zeros(m);
            for s2 in self.sigma2 {
                let s2 = s2[(t, f)];
                let a = self.g[t] * s2;
                let mut d = [0.0; MAX_CHANNELS];
                let mut tr = 0.0;
                let mut prod = 1.0;
                for i in 0..m {
                    let qi = 1.0 + a * basis.lambda[i];
                    d[i] = 1.0 / qi;
                    tr += wabs2[i] * d[i];
                    prod *= qi;
                }
                loss.add(tr + basis.logdet_noise + prod.ln());
                if needs.g {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..m {
                        num += basis.lambda[i] * d[i] * d[i] * wabs2[i];
                        den += basis.lambda[i] * d[i];
                    }
                    out.g_num[t] += s2 * num;
                    out.g_den[t] += s2 * den;
                }
                let u = CVec::from_fn(m, |i| basis.w[i] * d[i]);
                if let Some(q) = &q {
                    out.c_num[t] += q.quad_form(&u);
                    out.c_den[t] += (0..m).map(|i| d[i] * q[(i, i)].re).sum::<f64>();
                }
                if let Some(target) = needs.riccati {
                    let phi = match target {
                        SpatialTarget::Speech => a,
                        SpatialTarget::Env => vb,
                    };
                    for i in 0..m {
                        diag_acc[i] += phi * d[i];
                    }
                    outer_acc.add_scaled_outer(phi, &u);
                }
            }
            if needs.riccati.is_some() {
                ric_a += basis.expand_diag(&diag_acc[..m]);
                ric_b += basis.expand(&outer_acc);
            }
            if needs.cache {
                out.wabs2.extend_from_slice(&wabs2[..m]);
                out.lambda.extend_from_slice(&basis.lambda[..m]);
            }
        }
        out.loss = loss.value();
        if needs.riccati.is_some() {
            out.riccati = Some((ric_a, ric_b));
        }
        Ok(out)
    }
}

fn pass(
    model: &JointModel,
    obs: &Observations,
    g: &[f64],
    sigma2: &[Array2<f64>],
    needs: Needs,
) -> Result<PassOut, McemError> {
    let ctx = PassCtx { model, obs, g, sigma2, v_ego: model.ego.factor.product(), v_env: model.env.factor.product() };
    let bins: Vec<BinOut> = (0..obs.bins).into_par_iter().map(|f| ctx.bin(f, needs)).collect::<Result<_, _>>()?;
    let (nb, nt, m) = (obs.bins, obs.frames, obs.channels);
    let loss: f64 = bins.iter().map(|b| b.loss).collect::<KahanSum>().value();
    if !loss.is_finite() {
        return Err(McemError::NonFinite("surrogate loss"));
    }
    let mut out = PassOut {
        loss,
        g_num: vec![0.0; nt],
        g_den: vec![0.0; nt],
        c_num: Array2::zeros((0, 0)),
        c_den: Array2::zeros((0, 0)),
        riccati: Vec::new(),
        cache: None,
    };
    if needs.g {
        for b in &bins {
            for t in 0..nt {
                out.g_num[t] += b.g_num[t];
                out.g_den[t] += b.g_den[t];
            }
        }
    }
    if needs.source.is_some() {
        out.c_num = Array2::from_shape_fn((nb, nt), |(f, t)| bins[f].c_num[t]);
        out.c_den = Array2::from_shape_fn((nb, nt), |(f, t)| bins[f].c_den[t]);
    }
    if needs.riccati.is_some() {
        out.riccati = bins.iter().map(|b| b.riccati.expect("requested")).collect();
    }
    if needs.cache {
        let mut wabs2 = vec![0.0; nb * nt * m];
        let mut lambda = vec![0.0; nb * nt * m];
        for (f, b) in bins.iter().enumerate() {
            for t in 0..nt {
                let dst = (t * nb + f) * m;
                wabs2[dst..dst + m].copy_from_slice(&b.wabs2[t * m..(t + 1) * m]);
                lambda[dst..dst + m].copy_from_slice(&b.lambda[t * m..(t + 1) * m]);
            }
        }
        out.cache = Some(SpectralCache { bins: nb, channels: m, wabs2, lambda });
    }
    Ok(out)
}

/// `-R Q`: the negative log-likelihood summed over the retained samples.
pub fn surrogate_loss(model: &JointModel, state: &McemState, spec: &Spectrogram) -> Result<f64, McemError> {
    let obs = Observations::new(spec)?;
    model.check_dims(&obs)?;
    if state.sigma2_samples.is_empty() {
        return Err(McemError::NoSamples);
    }
    Ok(pass(model, &obs, &state.g, &state.sigma2_samples, Needs::default())?.loss)
}

fn e_step_cached(model: &JointModel, state: &mut McemState, cache: &SpectralCache, cfg: &SchemeConfig) -> f64 {
    let chains = FrameChains { vae: &model.vae, cache, g: &state.g, target: cfg.e_step_target };
    let std = cfg.proposal_std(model.vae.latent_dim());
    let draws = chains.run(&mut state.chain, &mut state.chain_sigma2, cfg.burn_in, cfg.r_samples, std, &mut state.rng);
    state.z_samples = draws.samples;
    state.sigma2_samples = draws.sample_sigma2;
    let rate = if draws.proposals == 0 { 0.0 } else { draws.accepted as f64 / draws.proposals as f64 };
    if draws.accepted == 0 && std > 0.0 {
        log::warn!("E-step accepted no proposals");
    }
    state.last_acceptance = rate;
    rate
}

/// Draws `r_samples` latent vectors per frame after `burn_in` steps, continuing
/// the chains in `state`. Returns the acceptance rate.
pub fn e_step_sample(
    model: &JointModel,
    state: &mut McemState,
    spec: &Spectrogram,
    cfg: &SchemeConfig,
) -> Result<f64, McemError> {
    let obs = Observations::new(spec)?;
    model.check_dims(&obs)?;
    let cache = pass(model, &obs, &state.g, &[], Needs { cache: true, ..Default::default() })?.cache.unwrap();
    Ok(e_step_cached(model, state, &cache, cfg))
}

/// One M-step on the current samples. Parameters frozen by the scheme (see
/// the component adaptation flags) are left untouched.
pub fn m_step(model: &mut JointModel, state: &mut McemState, spec: &Spectrogram) -> Result<MStepReport, McemError> {
    let obs = Observations::new(spec)?;
    model.check_dims(&obs)?;
    Ok(m_step_obs(model, state, &obs)?.0)
}

fn finite(values: impl IntoIterator<Item = f64>, what: &'static str) -> Result<(), McemError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(McemError::NonFinite(what))
    }
}

fn m_step_obs(
    model: &mut JointModel,
    state: &mut McemState,
    obs: &Observations,
) -> Result<(MStepReport, SpectralCache), McemError> {
    if state.sigma2_samples.is_empty() {
        return Err(McemError::NoSamples);
    }
    let m = obs.channels as f64;
    let mut substeps = Vec::new();
    let mut record = |after: &str, loss: f64| substeps.push(SubstepLoss { after: after.to_string(), loss });

    let out = pass(model, obs, &state.g, &state.sigma2_samples, Needs { g: true, ..Default::default() })?;
    record("start", out.loss);
    for (t, g) in state.g.iter_mut().enumerate() {
        if out.g_den[t] > 0.0 {
            *g = (*g * (out.g_num[t].max(0.0) / out.g_den[t]).sqrt()).max(EPS_FLOOR);
        }
    }
    finite(state.g.iter().copied(), "g")?;
    let mut last = "g";

    let source_pass = |model: &JointModel, g: &[f64], source| {
        pass(model, obs, g, &state.sigma2_samples, Needs { source: Some(source), ..Default::default() })
    };
    if model.env.adapt_w && model.env.factor.rank() > 0 {
        let out = source_pass(model, &state.g, Source::Env)?;
        record(last, out.loss);
        let ht = model.env.factor.h().t().to_owned();
        let (num, den) = (out.c_num.dot(&ht), out.c_den.dot(&ht));
        multiplicative_update(model.env.factor.w_mut().view_mut(), num.view(), den.view());
        finite(model.env.factor.w().iter().copied(), "W_B")?;
        last = "W_B";
    }
    if model.env.adapt_h && model.env.factor.rank() > 0 {
        let out = source_pass(model, &state.g, Source::Env)?;
        record(last, out.loss);
        let wt = model.env.factor.w().t().to_owned();
        let (num, den) = (wt.dot(&out.c_num), wt.dot(&out.c_den));
        multiplicative_update(model.env.factor.h_mut().view_mut(), num.view(), den.view());
        finite(model.env.factor.h().iter().copied(), "H_B")?;
        last = "H_B";
    }
    if model.ego.adapt_h && model.ego.factor.rank() > 0 {
        let out = source_pass(model, &state.g, Source::Ego)?;
        record(last, out.loss);
        let wt = model.ego.factor.w().t().to_owned();
        let (num, den) = (wt.dot(&out.c_num), wt.dot(&out.c_den));
        multiplicative_update(model.ego.factor.h_mut().view_mut(), num.view(), den.view());
        finite(model.ego.factor.h().iter().copied(), "H_E")?;
        last = "H_E";
    }

    let out = pass(
        model,
        obs,
        &state.g,
        &state.sigma2_samples,
        Needs { riccati: Some(SpatialTarget::Speech), ..Default::default() },
    )?;
    record(last, out.loss);
    update_spatial(model.speech_spatial.mats_mut(), &out.riccati)?;
    // Global scale of R_S moves into g; a per-bin scale has no counterpart.
    let mean_tr = model.speech_spatial.as_slice().iter().map(CMat::trace_re).sum::<f64>() / obs.bins as f64;
    let c = mean_tr / m;
    if c > 0.0 && c.is_finite() {
        for r in model.speech_spatial.mats_mut() {
            *r = r.scale(1.0 / c);
        }
        state.g.iter_mut().for_each(|g| *g = (*g * c).max(EPS_FLOOR));
    }
    last = "R_S";

    if model.env.adapt_r && model.env.factor.rank() > 0 {
        let out = pass(
            model,
            obs,
            &state.g,
            &state.sigma2_samples,
            Needs { riccati: Some(SpatialTarget::Env), ..Default::default() },
        )?;
        record(last, out.loss);
        update_spatial(model.env.spatial.mats_mut(), &out.riccati)?;
        last = "R_B";
    }
    if model.env.factor.rank() > 0 && model.env.adapt_w && model.env.adapt_r {
        model.env.normalize();
    }

    let out = pass(model, obs, &state.g, &state.sigma2_samples, Needs { cache: true, ..Default::default() })?;
    record(last, out.loss);
    let report = MStepReport { loss_before: substeps[0].loss, loss_after: out.loss, substeps };
    Ok((report, out.cache.expect("requested")))
}

/// `R <- solve(A, R B R)` per bin.
fn update_spatial(mats: &mut [CMat], acc: &[(CMat, CMat)]) -> Result<(), McemError> {
    let updated: Vec<CMat> = mats
        .par_iter()
        .zip(acc.par_iter())
        .map(|(r, (a, b))| {
            let rhs = (*r * *b * *r).hermitize();
            Ok(clamp_spectrum(solve_riccati(a, &rhs)?))
        })
        .collect::<Result<_, McemError>>()?;
    mats.copy_from_slice(&updated);
    Ok(())
}

fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn spatial_bits(s: &SpatialCovSet) -> Vec<f64> {
    s.as_slice().iter().flat_map(|r| r.to_row_major().into_iter().flat_map(|c| [c.re, c.im])).collect()
}

/// Alternates E- and M-steps, then draws a final set of samples under the
/// converged parameters for reconstruction.
pub fn run_mcem(spec: &Spectrogram, model: JointModel, cfg: &SchemeConfig) -> Result<(JointModel, McemState), McemError> {
    run_mcem_with(spec, model, cfg, |_| {})
}

/// [`run_mcem`] with a callback after every iteration.
pub fn run_mcem_with(
    spec: &Spectrogram,
    mut model: JointModel,
    cfg: &SchemeConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<(JointModel, McemState), McemError> {
    cfg.validate()?;
    model.check_scheme(cfg)?;
    let obs = Observations::new(spec)?;
    model.check_dims(&obs)?;
    let frozen = cfg
        .scheme
        .needs_ego_prior()
        .then(|| (model.ego.factor.w().iter().copied().collect::<Vec<_>>(), spatial_bits(&model.ego.spatial)));

    let mut state = McemState::initialize(&model, spec, cfg)?;
    let mut cache = pass(&model, &obs, &state.g, &[], Needs { cache: true, ..Default::default() })?.cache.unwrap();
    for iteration in 1..=cfg.em_iters {
        let acceptance_rate = e_step_cached(&model, &mut state, &cache, cfg);
        let (report, next) = m_step_obs(&mut model, &mut state, &obs)?;
        cache = next;
        let record = IterationRecord {
            iteration,
            acceptance_rate,
            loss_before: report.loss_before,
            loss_after: report.loss_after,
            substeps: report.substeps,
        };
        log::debug!("{} iteration {iteration}: loss {:.6e}, acceptance {acceptance_rate:.3}", cfg.scheme, record.loss_after);
        on_iteration(&record);
        state.history.push(record);
        let n = state.history.len();
        if n > cfg.early_stop_window {
            let old = state.history[n - 1 - cfg.early_stop_window].loss_after;
            let new = state.history[n - 1].loss_after;
            if ((old - new) / old.abs().max(f64::MIN_POSITIVE)).abs() < cfg.early_stop_tol {
                break;
            }
        }
    }
    e_step_cached(&model, &mut state, &cache, cfg);

    if let Some((w, r)) = frozen {
        let w_now: Vec<f64> = model.ego.factor.w().iter().copied().collect();
        if !bitwise_equal(&w, &w_now) || !bitwise_equal(&r, &spatial_bits(&model.ego.spatial)) {
            return Err(McemError::FrozenPriorModified);
        }
    }
    Ok((model, state))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::mnmf::tests::{random_hpd, sample_component};
    use crate::vae::VaeArch;
    use ndarray::Array3;
    use rand_distr::StandardNormal;

    pub(crate) fn toy_vae(bins: usize, seed: u64) -> Arc<VaeModel> {
        let arch = VaeArch { freq_bins: bins, latent_dim: 3, encoder_hidden: vec![8], decoder_hidden: vec![8] };
        Arc::new(VaeModel::new(arch, seed).unwrap())
    }

    pub(crate) fn random_spatial(bins: usize, m: usize, rng: &mut ChaCha8Rng) -> SpatialCovSet {
        SpatialCovSet::from_mats(
            (0..bins)
                .map(|_| {
                    let r = random_hpd(m, rng);
                    r.scale(m as f64 / r.trace_re()).hermitize()
                })
                .collect(),
        )
        .unwrap()
    }

    fn spectrogram(coeffs: Array3<C64>) -> Spectrogram {
        let f = coeffs.dim().1;
        let frame_len = 2 * (f - 1);
        Spectrogram::from_parts(coeffs, frame_len, frame_len / 2, 16_000, 0, None).unwrap()
    }

    fn ego_prior(bins: usize, rank: usize, m: usize, rng: &mut ChaCha8Rng) -> EgoPrior {
        let mut w = Array2::from_shape_simple_fn((bins, rank), || rng.random_range(0.05..1.0));
        for mut col in w.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        EgoPrior { w, spatial: random_spatial(bins, m, rng), loss_history: vec![] }
    }

    /// Mixture of speech-like, ego and environmental components on a small grid.
    pub(crate) fn toy_problem(scheme: Scheme, seed: u64) -> (Spectrogram, JointModel, SchemeConfig) {
        let (bins, frames, m) = (9, 40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = ego_prior(bins, 4, m, &mut rng);
        let v_ego = prior.w.dot(&Array2::from_shape_simple_fn((4, frames), || 5.0 * rng.random_range(0.0..1.0f64)));
        let v_env = Array2::from_shape_simple_fn((bins, frames), || rng.random_range(0.5..2.0));
        let v_sp = Array2::from_shape_simple_fn((bins, frames), || rng.random_range(0.0..3.0f64).powi(2));
        let env_spatial = SpatialCovSet::identity(bins, m);
        let sp_spatial = random_spatial(bins, m, &mut rng);
        let parts = [
            sample_component(&prior.spatial, &v_ego, &mut rng),
            sample_component(&env_spatial, &v_env, &mut rng),
            sample_component(&sp_spatial, &v_sp, &mut rng),
        ];
        let mut coeffs = Array3::zeros((m, bins, frames));
        for p in &parts {
            coeffs += p.coeffs();
        }
        let spec = spectrogram(coeffs);
        let (k_ego, k_env) = match scheme {
            Scheme::Fixed => (4, 0),
            Scheme::Adaptive => (0, 6),
            Scheme::Partial => (4, 3),
        };
        let cfg = SchemeConfig {
            scheme,
            dict_size: k_ego + k_env,
            k_ego,
            k_env,
            em_iters: 20,
            r_samples: 4,
            burn_in: 5,
            mh_proposal_std: Some(0.2),
            rng_seed: seed,
            early_stop_tol: 0.0,
            early_stop_window: 5,
            e_step_target: EStepTarget::Posterior,
        };
        let model = JointModel::initialize(toy_vae(bins, seed), Some(&prior), &spec, &cfg).unwrap();
        (spec, model, cfg)
    }

    #[test]
    fn partial_splits() {
        assert_eq!(Scheme::Partial.split(96).unwrap(), (64, 32));
        assert_eq!(Scheme::Partial.split(128).unwrap(), (96, 32));
        assert_eq!(Scheme::Partial.split(16).unwrap(), (8, 8));
        assert_eq!(Scheme::Partial.split(192).unwrap(), (160, 32));
        assert!(Scheme::Partial.split(100).is_err());
        assert_eq!(Scheme::Fixed.split(96).unwrap(), (96, 0));
        assert_eq!(Scheme::Adaptive.split(96).unwrap(), (0, 96));
        let cfg = SchemeConfig::new(Scheme::Partial, 96).unwrap();
        assert_eq!((cfg.k_env, cfg.k_ego), (32, 64));
        assert_eq!(cfg.r_samples, 10);
        assert_eq!(cfg.burn_in, 30);
        assert!((cfg.proposal_std(16) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SchemeConfig::new(Scheme::Fixed, 32).unwrap();
        cfg.k_env = 1;
        cfg.dict_size = 33;
        assert!(cfg.validate().is_err());
        let mut cfg = SchemeConfig::new(Scheme::Adaptive, 32).unwrap();
        cfg.r_samples = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SchemeConfig::new(Scheme::Partial, 32).unwrap();
        cfg.k_ego = 10;
        assert!(cfg.validate().is_err());
        assert!("Partial".parse::<Scheme>().is_ok());
        assert!("mixed".parse::<Scheme>().is_err());
    }

    #[test]
    fn missing_ego_prior_is_reported() {
        let (spec, model, _) = toy_problem(Scheme::Adaptive, 1);
        let cfg = SchemeConfig { k_ego: 4, k_env: 0, dict_size: 4, scheme: Scheme::Fixed, ..SchemeConfig::new(Scheme::Fixed, 4).unwrap() };
        assert!(matches!(
            JointModel::initialize(model.vae.clone(), None, &spec, &cfg),
            Err(McemError::MissingEgoPrior(Scheme::Fixed))
        ));
        let adaptive = SchemeConfig::new(Scheme::Adaptive, 6).unwrap();
        assert!(JointModel::initialize(model.vae, None, &spec, &adaptive).is_ok());
    }

    #[test]
    fn mixture_cov_cases() {
        let (_, mut model, _) = toy_problem(Scheme::Partial, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.speech_spatial = random_spatial(9, 3, &mut rng);
        // Random instance against a direct sum.
        let (f, t) = (4, 7);
        let ve = model.ego.factor.w().row(f).dot(&model.ego.factor.h().column(t));
        let vb = model.env.factor.w().row(f).dot(&model.env.factor.h().column(t));
        let noise = model.ego.spatial.get(f).scale(ve) + model.env.spatial.get(f).scale(vb);
        let want = model.speech_spatial.get(f).scale(1.3 * 0.8) + noise.add_diag(1e-10 * noise.trace_re() / 3.0);
        assert!((mixture_cov(&model, 1.3, 0.8, f, t) - want).frobenius_norm() < 1e-12 * want.frobenius_norm());
        // Zero noise activations.
        model.ego.factor.h_mut().fill(0.0);
        model.env.factor.h_mut().fill(0.0);
        let got = mixture_cov(&model, 1.0, 2.5, f, t);
        assert_eq!(got, model.speech_spatial.get(f).scale(2.5));
    }

    #[test]
    fn mixture_cov_scalar() {
        let vae = toy_vae(2, 0);
        let one = |v: f64| NmfFactor::new(Array2::from_elem((2, 1), 1.0), Array2::from_elem((1, 1), v)).unwrap();
        let model = JointModel {
            vae,
            speech_spatial: SpatialCovSet::identity(2, 1),
            ego: NoiseComponentModel::new(one(0.7), SpatialCovSet::identity(2, 1)).unwrap(),
            env: NoiseComponentModel::new(one(0.2), SpatialCovSet::identity(2, 1)).unwrap(),
        };
        let got = mixture_cov(&model, 2.0, 1.5, 1, 0)[(0, 0)].re;
        assert!((got - (3.0 + 0.9 * (1.0 + 1e-10))).abs() < 1e-15);
    }

    fn scalar_model(ve: f64, vb: f64) -> JointModel {
        let one = |v: f64| NmfFactor::new(Array2::from_elem((2, 1), 1.0), Array2::from_elem((1, 1), v)).unwrap();
        JointModel {
            vae: toy_vae(2, 0),
            speech_spatial: SpatialCovSet::identity(2, 1),
            ego: NoiseComponentModel::new(one(ve), SpatialCovSet::identity(2, 1)).unwrap(),
            env: NoiseComponentModel::new(one(vb), SpatialCovSet::identity(2, 1)).unwrap(),
        }
    }

    #[test]
    fn scalar_gain_update_by_hand() {
        let mut model = scalar_model(0.4, 0.3);
        model.ego.adapt_h = false;
        model.env.adapt_w = false;
        model.env.adapt_h = false;
        model.env.adapt_r = false;
        let x = [C64::new(1.5, -0.5), C64::new(0.2, 0.1)];
        let mut coeffs = Array3::zeros((1, 2, 1));
        coeffs[(0, 0, 0)] = x[0];
        coeffs[(0, 1, 0)] = x[1];
        let spec = spectrogram(coeffs);
        let z = Array2::from_elem((1, 3), 0.1);
        let mut state = McemState::from_samples(&model.vae, vec![1.7], vec![z.clone()], 0).unwrap();
        let s2 = model.vae.decode(&[0.1; 3]).unwrap();
        let noise = 0.7 * (1.0 + 1e-10);
        let mut num = 0.0;
        let mut den = 0.0;
        for f in 0..2 {
            let sigma = 1.7 * s2[f] + noise;
            num += s2[f] * x[f].norm_sqr() / (sigma * sigma);
            den += s2[f] / sigma;
        }
        let g1 = 1.7 * (num / den).sqrt();
        // Scalar Riccati per bin: r = sqrt(B / A), then the mean of r moves into g.
        let r: Vec<f64> = (0..2)
            .map(|f| {
                let phi = g1 * s2[f];
                let sigma = phi + noise;
                let a = phi / sigma;
                let b = phi * x[f].norm_sqr() / (sigma * sigma);
                (b / a).sqrt()
            })
            .collect();
        let c = (r[0] + r[1]) / 2.0;
        m_step(&mut model, &mut state, &spec).unwrap();
        let want = g1 * c;
        assert!((state.g[0] - want).abs() < 1e-12 * want, "{} vs {want}", state.g[0]);
        for f in 0..2 {
            let got = model.speech_spatial.get(f)[(0, 0)].re;
            assert!((got - r[f] / c).abs() < 1e-12, "{got} vs {}", r[f] / c);
        }
    }

    #[test]
    fn fixed_point_leaves_parameters_unchanged() {
        // M = 1, one bin pair, |X|^2 = Sigma: every ratio is one.
        let mut model = scalar_model(0.4, 0.3);
        let z = Array2::from_elem((1, 3), -0.2);
        let s2 = model.vae.decode(&[-0.2; 3]).unwrap();
        let g = 1.1;
        let mut coeffs = Array3::zeros((1, 2, 1));
        for f in 0..2 {
            let sigma = g * s2[f] + 0.7 * (1.0 + 1e-10);
            coeffs[(0, f, 0)] = C64::new(sigma.sqrt(), 0.0);
        }
        let spec = spectrogram(coeffs);
        let mut state = McemState::from_samples(&model.vae, vec![g], vec![z], 0).unwrap();
        let before = model.clone();
        m_step(&mut model, &mut state, &spec).unwrap();
        // Exact up to the 1e-10 diagonal loading inside the Riccati solve.
        assert!((state.g[0] - g).abs() < 1e-9 * g, "{} vs {g}", state.g[0]);
        assert!((model.ego.factor.h()[(0, 0)] - 0.4).abs() < 1e-12);
        let env_before = before.env.cov(0, 0)[(0, 0)].re;
        let env_after = model.env.cov(0, 0)[(0, 0)].re;
        assert!((env_after - env_before).abs() < 1e-9 * env_before);
        assert!((model.speech_spatial.get(0)[(0, 0)].re - 1.0).abs() < 1e-9);
    }

    /// Dense reference for one M-step: explicit inverses per sample.
    fn dense_m_step(model: &mut JointModel, state: &mut McemState, spec: &Spectrogram) {
        let x = spec.bin_vectors();
        let (nb, nt) = (spec.bins(), spec.frames());
        let sig = |model: &JointModel, g: &[f64], f: usize, t: usize, r: usize| {
            let s2 = state.sigma2_samples[r][(t, f)];
            let cov = mixture_cov(model, g[t], s2, f, t);
            let inv = cov.hpd_inverse().unwrap();
            let mm = inv * CMat::outer(&x[f * nt + t]) * inv;
            (s2, inv, mm)
        };
        let nr = state.sigma2_samples.len();
        let mut g = state.g.clone();
        for t in 0..nt {
            let (mut num, mut den) = (0.0, 0.0);
            for f in 0..nb {
                for r in 0..nr {
                    let (s2, inv, mm) = sig(model, &state.g, f, t, r);
                    let rs = model.speech_spatial.get(f);
                    num += s2 * mm.trace_of_product(rs).re;
                    den += s2 * inv.trace_of_product(rs).re;
                }
            }
            g[t] *= (num / den).sqrt();
        }
        state.g = g;
        let stats = |model: &JointModel, g: &[f64], ego: bool| {
            let mut num = Array2::zeros((nb, nt));
            let mut den = Array2::zeros((nb, nt));
            for f in 0..nb {
                let rc = if ego { model.ego.spatial.get(f) } else { model.env.spatial.get(f) };
                for t in 0..nt {
                    for r in 0..nr {
                        let (_, inv, mm) = sig(model, g, f, t, r);
                        num[(f, t)] += mm.trace_of_product(rc).re;
                        den[(f, t)] += inv.trace_of_product(rc).re;
                    }
                }
            }
            (num, den)
        };
        let (num, den) = stats(model, &state.g, false);
        let ht = model.env.factor.h().t().to_owned();
        multiplicative_update(model.env.factor.w_mut().view_mut(), num.dot(&ht).view(), den.dot(&ht).view());
        let (num, den) = stats(model, &state.g, false);
        let wt = model.env.factor.w().t().to_owned();
        multiplicative_update(model.env.factor.h_mut().view_mut(), wt.dot(&num).view(), wt.dot(&den).view());
        let (num, den) = stats(model, &state.g, true);
        let wt = model.ego.factor.w().t().to_owned();
        multiplicative_update(model.ego.factor.h_mut().view_mut(), wt.dot(&num).view(), wt.dot(&den).view());
        let riccati = |model: &JointModel, g: &[f64], speech: bool| -> Vec<CMat> {
            let v_env = model.env.factor.product();
            (0..nb)
                .map(|f| {
                    let (mut a, mut b) = (CMat::zeros(3), CMat::zeros(3));
                    for t in 0..nt {
                        for r in 0..nr {
                            let (s2, inv, mm) = sig(model, g, f, t, r);
                            let phi = if speech { g[t] * s2 } else { v_env[(f, t)] };
                            a += inv.scale(phi);
                            b += mm.scale(phi);
                        }
                    }
                    let old = if speech { *model.speech_spatial.get(f) } else { *model.env.spatial.get(f) };
                    solve_riccati(&a.hermitize(), &(old * b * old).hermitize()).unwrap()
                })
                .collect()
        };
        let rs = riccati(model, &state.g, true);
        model.speech_spatial.mats_mut().copy_from_slice(&rs);
        let c = rs.iter().map(CMat::trace_re).sum::<f64>() / (3.0 * nb as f64);
        for r in model.speech_spatial.mats_mut() {
            *r = r.scale(1.0 / c);
        }
        state.g.iter_mut().for_each(|g| *g *= c);
        let rb = riccati(model, &state.g, false);
        model.env.spatial.mats_mut().copy_from_slice(&rb);
        model.env.normalize();
    }

    #[test]
    fn m_step_matches_dense_reference() {
        let (spec, model, cfg) = toy_problem(Scheme::Partial, 5);
        let mut state = McemState::initialize(&model, &spec, &cfg).unwrap();
        e_step_sample(&model, &mut state, &spec, &cfg).unwrap();
        let (mut fast, mut fast_state) = (model.clone(), state.clone());
        m_step(&mut fast, &mut fast_state, &spec).unwrap();
        let (mut slow, mut slow_state) = (model, state);
        dense_m_step(&mut slow, &mut slow_state, &spec);
        let close = |a: &[f64], b: &[f64], what: &str| {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-12), "{what}: {x} vs {y}");
            }
        };
        close(&fast_state.g, &slow_state.g, "g");
        close(fast.env.factor.w().as_slice().unwrap(), slow.env.factor.w().as_slice().unwrap(), "W_B");
        close(fast.env.factor.h().as_slice().unwrap(), slow.env.factor.h().as_slice().unwrap(), "H_B");
        close(fast.ego.factor.h().as_slice().unwrap(), slow.ego.factor.h().as_slice().unwrap(), "H_E");
        for f in 0..spec.bins() {
            let (a, b) = (fast.speech_spatial.get(f), slow.speech_spatial.get(f));
            assert!((*a - *b).frobenius_norm() < 1e-8 * b.frobenius_norm());
            let (a, b) = (fast.env.spatial.get(f), slow.env.spatial.get(f));
            assert!((*a - *b).frobenius_norm() < 1e-8 * b.frobenius_norm());
        }
    }

    #[test]
    fn surrogate_loss_matches_dense_sum() {
        let (spec, model, cfg) = toy_problem(Scheme::Partial, 6);
        let mut state = McemState::initialize(&model, &spec, &cfg).unwrap();
        e_step_sample(&model, &mut state, &spec, &cfg).unwrap();
        let x = spec.bin_vectors();
        let mut want = 0.0;
        for s2 in &state.sigma2_samples {
            for f in 0..spec.bins() {
                for t in 0..spec.frames() {
                    let cov = mixture_cov(&model, state.g[t], s2[(t, f)], f, t);
                    want += cov.hpd_inverse().unwrap().quad_form(&x[f * spec.frames() + t]) + cov.hpd_logdet().unwrap();
                }
            }
        }
        let got = surrogate_loss(&model, &state, &spec).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs());
    }

    #[test]
    fn m_steps_are_monotone_and_prior_stays_frozen() {
        for scheme in Scheme::ALL {
            let (spec, model, cfg) = toy_problem(scheme, 7);
            let w_before = model.ego.factor.w().clone();
            let (model, state) = run_mcem(&spec, model, &cfg).unwrap();
            assert_eq!(state.history.len(), 20);
            for rec in &state.history {
                for pair in rec.substeps.windows(2) {
                    let tol = 1e-8 * pair[0].loss.abs().max(1.0);
                    assert!(pair[1].loss <= pair[0].loss + tol, "{scheme} {rec:?}");
                }
                assert!(rec.acceptance_rate > 0.0 && rec.acceptance_rate < 1.0);
            }
            assert!(state.g.iter().all(|g| *g > 0.0));
            for r in model.speech_spatial.as_slice().iter().chain(model.env.spatial.as_slice()) {
                assert!(r.hermitian_eigen().min_value() > 0.0);
            }
            if scheme != Scheme::Adaptive {
                assert_eq!(model.ego.factor.w(), &w_before);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (spec, model, cfg) = toy_problem(Scheme::Partial, 8);
        let cfg = SchemeConfig { em_iters: 5, ..cfg };
        let (a, sa) = run_mcem(&spec, model.clone(), &cfg).unwrap();
        let (b, sb) = run_mcem(&spec, model, &cfg).unwrap();
        assert_eq!(sa.g, sb.g);
        assert_eq!(sa.z_samples, sb.z_samples);
        assert_eq!(a.env.factor, b.env.factor);
        assert_eq!(a.speech_spatial, b.speech_spatial);
        assert_eq!(sa.history, sb.history);
    }

    #[test]
    fn frozen_flags_are_enforced() {
        let (spec, mut model, cfg) = toy_problem(Scheme::Partial, 9);
        model.ego.adapt_w = true;
        assert!(matches!(run_mcem(&spec, model, &cfg), Err(McemError::Config(_))));
    }

    #[test]
    fn prior_target_samples_standard_normal() {
        let (bins, frames) = (6, 3000);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = Array3::from_shape_simple_fn((1, bins, frames), || {
            C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let spec = spectrogram(coeffs);
        let vae = toy_vae(bins, 3);
        let cfg = SchemeConfig {
            burn_in: 300,
            r_samples: 1,
            mh_proposal_std: Some(1.0),
            e_step_target: EStepTarget::Prior,
            ..SchemeConfig::new(Scheme::Adaptive, 2).unwrap()
        };
        let model = JointModel::initialize(vae, None, &spec, &cfg).unwrap();
        let mut state = McemState::initialize(&model, &spec, &cfg).unwrap();
        e_step_sample(&model, &mut state, &spec, &cfg).unwrap();
        let z = &state.z_samples[0];
        let n = frames as f64;
        for l in 0..3 {
            let mean = z.column(l).sum() / n;
            assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
            for k in 0..3 {
                let cov = z.column(l).iter().zip(z.column(k)).map(|(a, b)| a * b).sum::<f64>() / n;
                let want = if l == k { 1.0 } else { 0.0 };
                let se = if l == k { (2.0 / n).sqrt() } else { (1.0 / n).sqrt() };
                assert!((cov - want).abs() < 3.0 * se, "cov[{l}][{k}] = {cov}");
            }
        }
    }

    #[test]
    fn zero_proposal_keeps_initial_chain() {
        let (spec, model, cfg) = toy_problem(Scheme::Adaptive, 3);
        let cfg = SchemeConfig { mh_proposal_std: Some(0.0), ..cfg };
        let mut state = McemState::initialize(&model, &spec, &cfg).unwrap();
        let init = state.chain.clone();
        e_step_sample(&model, &mut state, &spec, &cfg).unwrap();
        assert!(state.z_samples.iter().all(|z| z == &init));
    }
}
