//! Multichannel Wiener filtering of the mixture with the fitted model.
//!
//! For every retained latent sample the speech image estimate is
//! `g_t sigma^2_f(z) R_S,f Sigma_ft(z)^{-1} X_ft`; the filter is averaged over
//! the samples. With `g sigma^2 R_S = Sigma - N` this equals
//! `X - N mean_r(Sigma_r^{-1}) X`, which the eigenbasis of `(R_S, N)` gives in
//! `O(M)` per sample.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{istft, AudioClip, DspError, Spectrogram};
use crate::linalg::{CVec, C64, MAX_CHANNELS};
use crate::mcem::{load_noise, Basis, JointModel, McemState};

#[derive(Debug, Error)]
pub enum WienerError {
    #[error("no latent samples in the inference state")]
    NoSamples,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise covariance is singular at bin {f}, frame {t}")]
    Singular { f: usize, t: usize },
    #[error("non-finite speech estimate at bin {f}, frame {t}")]
    NonFinite { f: usize, t: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Per-frame power summaries, averaged over bins and channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub gain: f64,
    /// `mean_f g_t E_r[sigma^2_f] tr(R_S,f) / M`
    pub speech_power: f64,
    /// `mean_f tr(Sigma_E,ft + Sigma_B,ft) / M`
    pub noise_power: f64,
    pub mixture_power: f64,
    pub estimate_power: f64,
}

#[derive(Clone, Debug)]
pub struct EnhancementResult {
    /// Multichannel speech image estimate.
    pub speech_spec: Spectrogram,
    pub speech_clip: AudioClip,
    pub diagnostics: Vec<FrameDiagnostics>,
}

impl EnhancementResult {
    /// Reference channel of the estimate.
    pub fn mono(&self) -> Vec<f64> {
        self.speech_clip.channel(0)
    }
}

/// Speech image estimate in the STFT domain.
pub fn wiener_spec(spec: &Spectrogram, model: &JointModel, state: &McemState) -> Result<Spectrogram, WienerError> {
    Ok(filter(spec, model, state)?.0)
}

/// Filters the mixture and resynthesizes the time signal.
pub fn wiener_filter(spec: &Spectrogram, model: &JointModel, state: &McemState) -> Result<EnhancementResult, WienerError> {
    let (speech_spec, diagnostics) = filter(spec, model, state)?;
    let speech_clip = istft(&speech_spec)?;
    Ok(EnhancementResult { speech_spec, speech_clip, diagnostics })
}

struct BinResult {
    est: Vec<CVec>,
    speech: Vec<f64>,
    noise: Vec<f64>,
}

fn filter(
    spec: &Spectrogram,
    model: &JointModel,
    state: &McemState,
) -> Result<(Spectrogram, Vec<FrameDiagnostics>), WienerError> {
    let (m, bins, frames) = spec.coeffs().dim();
    if m > MAX_CHANNELS || model.channels() != m || model.bins() != bins || model.frames() != frames {
        return Err(WienerError::Dimension(format!(
            "model is {} ch x {} bins x {} frames, mixture is {m} x {bins} x {frames}",
            model.channels(),
            model.bins(),
            model.frames()
        )));
    }
    if state.sigma2_samples.is_empty() {
        return Err(WienerError::NoSamples);
    }
    if state.g.len() != frames || state.sigma2_samples.iter().any(|s| s.dim() != (frames, bins)) {
        return Err(WienerError::Dimension("inference state does not match the mixture".into()));
    }
    let x = spec.bin_vectors();
    let v_ego = model.ego.factor.product();
    let v_env = model.env.factor.product();
    let nr = state.sigma2_samples.len() as f64;

    let per_bin: Vec<BinResult> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let rs = model.speech_spatial.get(f);
            let mut out = BinResult { est: Vec::with_capacity(frames), speech: vec![0.0; frames], noise: vec![0.0; frames] };
            for t in 0..frames {
                let xt = &x[f * frames + t];
                let raw = model.ego.spatial.get(f).scale(v_ego[(f, t)]) + model.env.spatial.get(f).scale(v_env[(f, t)]);
                let mean_s2 = state.sigma2_samples.iter().map(|s| s[(t, f)]).sum::<f64>() / nr;
                out.speech[t] = state.g[t] * mean_s2 * rs.trace_re() / m as f64;
                out.noise[t] = raw.trace_re() / m as f64;
                if raw.trace_re() <= 0.0 {
                    // No noise: every sample's filter is the identity.
                    out.est.push(*xt);
                    continue;
                }
                let noise = load_noise(raw);
                let basis = Basis::new(&noise, rs, xt).ok_or(WienerError::Singular { f, t })?;
                let mut d = [0.0; MAX_CHANNELS];
                for s2 in &state.sigma2_samples {
                    let a = state.g[t] * s2[(t, f)];
                    for (i, di) in d.iter_mut().enumerate().take(m) {
                        *di += 1.0 / (1.0 + a * basis.lambda[i]);
                    }
                }
                let u = CVec::from_fn(m, |i| basis.w[i] * (d[i] / nr));
                let inv_x = basis.p.mul_vec(&u);
                let nx = noise.mul_vec(&inv_x);
                let est = CVec::from_fn(m, |i| xt[i] - nx[i]);
                if !est.as_slice().iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                    return Err(WienerError::NonFinite { f, t });
                }
                out.est.push(est);
            }
            Ok(out)
        })
        .collect::<Result<_, WienerError>>()?;

    let mut coeffs = Array3::<C64>::zeros((m, bins, frames));
    let mut diagnostics: Vec<FrameDiagnostics> = (0..frames)
        .map(|t| FrameDiagnostics {
            frame: t,
            gain: state.g[t],
            speech_power: 0.0,
            noise_power: 0.0,
            mixture_power: 0.0,
            estimate_power: 0.0,
        })
        .collect();
    for (f, b) in per_bin.iter().enumerate() {
        for t in 0..frames {
            let d = &mut diagnostics[t];
            d.speech_power += b.speech[t] / bins as f64;
            d.noise_power += b.noise[t] / bins as f64;
            d.mixture_power += x[f * frames + t].norm_sqr() / (bins * m) as f64;
            d.estimate_power += b.est[t].norm_sqr() / (bins * m) as f64;
            for c in 0..m {
                coeffs[(c, f, t)] = b.est[t][c];
            }
        }
    }
    Ok((spec.with_coeffs(coeffs)?, diagnostics))
}
