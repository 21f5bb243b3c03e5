//! Per-bin algebra in the generalized eigenbasis of speech and noise.
//!
//! At one `(f, t)` the mixture covariance is `Sigma(a) = a R_S + N` with the
//! speech scale `a = g_t sigma^2_f(z)` and a noise covariance `N` that does
//! not depend on `z`. With `N = L L^H` and `L^{-1} R_S L^{-H} = U diag(lambda) U^H`
//! we set `P = L^{-H} U`, so that
//!
//! ```text
//! Sigma(a)^{-1} = P diag(1 / (1 + a lambda)) P^H
//! ln det Sigma(a) = ln det N + sum_i ln(1 + a lambda_i)
//! ```
//!
//! One decomposition per `(f, t)` then serves every latent sample.

use crate::linalg::{CMat, CVec, MAX_CHANNELS};
use crate::mnmf::PD_LOADING;

/// `N + delta I` with `delta = PD_LOADING * tr(N) / M`.
pub(crate) fn load(noise: CMat) -> CMat {
    let delta = PD_LOADING * noise.trace_re().max(0.0) / noise.dim() as f64;
    noise.add_diag(delta)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Basis {
    pub p: CMat,
    pub lambda: [f64; MAX_CHANNELS],
    /// `P^H X`
    pub w: CVec,
    pub logdet_noise: f64,
}

impl Basis {
    /// `None` if `noise` is not positive definite.
    pub fn new(noise: &CMat, speech_spatial: &CMat, x: &CVec) -> Option<Self> {
        let m = noise.dim();
        let l = noise.cholesky()?;
        let linv = l.lower_triangular_inverse();
        let c = (linv * *speech_spatial * linv.adjoint()).hermitize();
        let eig = c.hermitian_eigen();
        let mut lambda = [0.0; MAX_CHANNELS];
        for (dst, v) in lambda.iter_mut().zip(eig.values()) {
            *dst = v.max(0.0);
        }
        let p = linv.adjoint() * *eig.vectors();
        let w = p.adjoint_mul_vec(x);
        let logdet_noise = (0..m).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
        Some(Self { p, lambda, w, logdet_noise })
    }

    /// Basis for the noise `v N` (`v > 0`) and mixture `x`, given the basis
    /// of `N`: `P` scales by `1 / sqrt(v)` and the eigenvalues by `1 / v`.
    /// Loading is proportional to the trace, so `load(v N) = v load(N)`.
    pub fn rescaled(&self, v: f64, x: &CVec) -> Self {
        let m = self.dim();
        let p = self.p.scale(1.0 / v.sqrt());
        let mut lambda = [0.0; MAX_CHANNELS];
        for i in 0..m {
            lambda[i] = self.lambda[i] / v;
        }
        let w = p.adjoint_mul_vec(x);
        Self { p, lambda, w, logdet_noise: self.logdet_noise + m as f64 * v.ln() }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn wabs2(&self) -> [f64; MAX_CHANNELS] {
        let mut out = [0.0; MAX_CHANNELS];
        for (i, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.w[i].norm_sqr();
        }
        out
    }

    /// `tr(X X^H Sigma(a)^{-1}) + ln det Sigma(a)`.
    #[cfg(test)]
    pub fn loss(&self, a: f64) -> f64 {
        let mut tr = 0.0;
        let mut prod = 1.0;
        for i in 0..self.dim() {
            let q = 1.0 + a * self.lambda[i];
            tr += self.w[i].norm_sqr() / q;
            prod *= q;
        }
        tr + self.logdet_noise + prod.ln()
    }

    /// `Sigma(a)^{-1}` as a dense matrix.
    #[cfg(test)]
    pub fn inverse(&self, a: f64) -> CMat {
        let d: Vec<f64> = (0..self.dim()).map(|i| 1.0 / (1.0 + a * self.lambda[i])).collect();
        self.expand_diag(&d)
    }

    /// `P diag(d) P^H`
    pub fn expand_diag(&self, d: &[f64]) -> CMat {
        (self.p * CMat::from_diag(d) * self.p.adjoint()).hermitize()
    }

    /// `P B P^H`
    pub fn expand(&self, b: &CMat) -> CMat {
        (self.p * *b * self.p.adjoint()).hermitize()
    }
}

/// Frame log-likelihood terms of the current parameters, frame-major, for
/// fast re-evaluation under new speech variances.
#[derive(Clone, Debug)]
pub(crate) struct SpectralCache {
    pub bins: usize,
    pub channels: usize,
    /// `|w_i|^2` at `((t * bins) + f) * channels + i`.
    pub wabs2: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SpectralCache {
    /// `-sum_f [tr(X X^H Sigma^{-1}) + ln det Sigma]` up to the `z`-independent
    /// `ln det N` term, for speech variances `sigma2` (length `bins`).
    pub fn frame_loglik(&self, t: usize, g: f64, sigma2: &[f64]) -> f64 {
        let m = self.channels;
        let base = t * self.bins * m;
        let mut acc = 0.0;
        for (f, &s2) in sigma2.iter().enumerate() {
            let a = g * s2;
            let off = base + f * m;
            let mut prod = 1.0;
            for i in 0..m {
                let q = 1.0 + a * self.lambda[off + i];
                acc += self.wabs2[off + i] / q;
                prod *= q;
            }
            acc += prod.ln();
        }
        -acc
    }
}
