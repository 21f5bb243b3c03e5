//! Random-walk Metropolis-Hastings.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::kernel::SpectralCache;
use crate::vae::VaeModel;

/// Draws of one chain and the number of accepted proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct MhChain {
    /// State after every step, burn-in included.
    pub states: Vec<Vec<f64>>,
    pub accepted: usize,
}

impl MhChain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        self.accepted as f64 / self.states.len() as f64
    }
}

/// Runs `steps` Metropolis-Hastings steps on an unnormalized log density with
/// an isotropic Gaussian proposal of standard deviation `proposal_std`.
pub fn metropolis_hastings<R, F>(mut log_target: F, init: &[f64], proposal_std: f64, steps: usize, rng: &mut R) -> MhChain
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    let mut current = init.to_vec();
    let mut current_lp = log_target(&current);
    let mut states = Vec::with_capacity(steps);
    let mut accepted = 0;
    for _ in 0..steps {
        let proposal: Vec<f64> =
            current.iter().map(|c| c + proposal_std * rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = log_target(&proposal);
        let u: f64 = rng.random();
        if u.ln() < lp - current_lp {
            current = proposal;
            current_lp = lp;
            accepted += 1;
        }
        states.push(current.clone());
    }
    MhChain { states, accepted }
}

/// Density targeted by the per-frame chains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EStepTarget {
    /// `p(X_t | z_t) p(z_t)`
    #[default]
    Posterior,
    /// `p(z_t)` only; the data term is dropped.
    Prior,
}

pub(crate) struct FrameChains<'a> {
    pub vae: &'a VaeModel,
    pub cache: &'a SpectralCache,
    pub g: &'a [f64],
    pub target: EStepTarget,
}

pub(crate) struct FrameDraws {
    pub samples: Vec<Array2<f64>>,
    pub sample_sigma2: Vec<Array2<f64>>,
    pub accepted: usize,
    pub proposals: usize,
}

impl FrameChains<'_> {
    fn log_target(&self, t: usize, z: ndarray::ArrayView1<f64>, sigma2: ndarray::ArrayView1<f64>) -> f64 {
        let prior = -0.5 * z.dot(&z);
        match self.target {
            EStepTarget::Prior => prior,
            EStepTarget::Posterior => {
                prior + self.cache.frame_loglik(t, self.g[t], sigma2.as_slice().expect("contiguous row"))
            }
        }
    }

    /// Advances one independent chain per frame by `burn_in + keep` steps and
    /// returns the last `keep` states. `chain` and `chain_sigma2` (decoded
    /// variances of `chain`) are updated in place.
    pub fn run<R: Rng + ?Sized>(
        &self,
        chain: &mut Array2<f64>,
        chain_sigma2: &mut Array2<f64>,
        burn_in: usize,
        keep: usize,
        proposal_std: f64,
        rng: &mut R,
    ) -> FrameDraws {
        let (frames, latent) = chain.dim();
        let mut current: Vec<f64> = (0..frames).map(|t| self.log_target(t, chain.row(t), chain_sigma2.row(t))).collect();
        let mut samples = Vec::with_capacity(keep);
        let mut sample_sigma2 = Vec::with_capacity(keep);
        let mut accepted = 0;
        for step in 0..burn_in + keep {
            let noise = Array2::from_shape_simple_fn((frames, latent), || rng.sample::<f64, _>(StandardNormal));
            let proposal = &*chain + &(noise * proposal_std);
            let proposal_sigma2 = self.vae.decode_batch_unchecked(proposal.view());
            for t in 0..frames {
                let lp = self.log_target(t, proposal.row(t), proposal_sigma2.row(t));
                let u: f64 = rng.random();
                if lp.is_finite() && u.ln() < lp - current[t] {
                    chain.row_mut(t).assign(&proposal.row(t));
                    chain_sigma2.row_mut(t).assign(&proposal_sigma2.row(t));
                    current[t] = lp;
                    accepted += 1;
                }
            }
            if step >= burn_in {
                samples.push(chain.clone());
                sample_sigma2.push(chain_sigma2.clone());
            }
        }
        FrameDraws { samples, sample_sigma2, accepted, proposals: frames * (burn_in + keep) }
    }
}
