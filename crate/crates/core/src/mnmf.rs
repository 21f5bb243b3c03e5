//! Multichannel NMF noise model.
//!
//! A noise component has covariance `Sigma_ft = R_f [W H]_ft`: a per-bin
//! spatial covariance `R_f` times a nonnegative low-rank variance. This module
//! fits such a component to noise-only recordings (used for the ego-noise
//! prior), and provides the Riccati solver and scale normalization shared with
//! the test-time EM.
//!
//! Training minimizes
//!
//! ```text
//! L = sum_{f,t} tr(E_ft E_ft^H Sigma_ft^{-1}) + ln det Sigma_ft
//! ```
//!
//! by majorization: square-root multiplicative updates for `W` and `H` and a
//! Riccati solve per bin for `R_f`. Each block update does not increase `L`.

use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dsp::Spectrogram;
use crate::linalg::{CMat, CVec, KahanSum, C64};

/// Lower bound applied to `W`, `H` and `g` after every multiplicative update.
pub const EPS_FLOOR: f64 = 1e-12;
/// Relative diagonal loading `delta = PD_LOADING * tr(A) / M` before inversions.
pub const PD_LOADING: f64 = 1e-10;
/// Relative tolerance on `||A - A^H||_F` accepted as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-9;

const CHECKPOINT_KIND: &str = "ego-mnmf";

#[derive(Debug, Error)]
pub enum MnmfError {
    #[error("covariance is singular at bin {f}, frame {t}")]
    Singular { f: usize, t: usize },
    #[error("{0} is not Hermitian")]
    NonHermitian(&'static str),
    #[error("Riccati coefficient A is singular")]
    SingularRiccati,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("input is all zeros")]
    Degenerate,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Nonnegative factorization `W (F x K)`, `H (K x T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NmfFactor {
    w: Array2<f64>,
    h: Array2<f64>,
}

impl NmfFactor {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self, MnmfError> {
        if w.ncols() != h.nrows() {
            return Err(MnmfError::Dimension(format!("W has {} columns, H has {} rows", w.ncols(), h.nrows())));
        }
        if w.iter().chain(h.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MnmfError::Invalid("NMF factors must be finite and nonnegative".into()));
        }
        Ok(Self { w, h })
    }

    /// Entries drawn from `Uniform(0.1, 1)`.
    pub fn random<R: Rng + ?Sized>(bins: usize, rank: usize, frames: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_simple_fn((bins, rank), || rng.random_range(0.1..1.0));
        let h = Array2::from_shape_simple_fn((rank, frames), || rng.random_range(0.1..1.0));
        Self { w, h }
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn h(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn w_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }

    pub fn h_mut(&mut self) -> &mut Array2<f64> {
        &mut self.h
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn bins(&self) -> usize {
        self.w.nrows()
    }

    pub fn frames(&self) -> usize {
        self.h.ncols()
    }

    /// `W H`, `F x T`.
    pub fn product(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }
}

/// One Hermitian positive definite `M x M` matrix per frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCovSet {
    mats: Vec<CMat>,
}

impl SpatialCovSet {
    pub fn identity(bins: usize, channels: usize) -> Self {
        Self { mats: vec![CMat::identity(channels); bins] }
    }

    pub fn from_mats(mats: Vec<CMat>) -> Result<Self, MnmfError> {
        let m = mats.first().map(CMat::dim).unwrap_or(0);
        for r in &mats {
            if r.dim() != m {
                return Err(MnmfError::Dimension("spatial covariances differ in size".into()));
            }
            if r.hermitian_defect() > 1e-12 * r.frobenius_norm().max(1.0) {
                return Err(MnmfError::NonHermitian("spatial covariance"));
            }
            if r.cholesky().is_none() {
                return Err(MnmfError::Invalid("spatial covariance is not positive definite".into()));
            }
        }
        Ok(Self { mats })
    }

    pub fn bins(&self) -> usize {
        self.mats.len()
    }

    pub fn channels(&self) -> usize {
        self.mats.first().map(CMat::dim).unwrap_or(0)
    }

    pub fn get(&self, f: usize) -> &CMat {
        &self.mats[f]
    }

    pub fn as_slice(&self) -> &[CMat] {
        &self.mats
    }

    pub(crate) fn mats_mut(&mut self) -> &mut [CMat] {
        &mut self.mats
    }
}

/// Spatial covariances plus NMF variances, with per-block adaptation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseComponentModel {
    pub factor: NmfFactor,
    pub spatial: SpatialCovSet,
    pub adapt_w: bool,
    pub adapt_h: bool,
    pub adapt_r: bool,
}

impl NoiseComponentModel {
    pub fn new(factor: NmfFactor, spatial: SpatialCovSet) -> Result<Self, MnmfError> {
        if factor.bins() != spatial.bins() {
            return Err(MnmfError::Dimension(format!(
                "NMF has {} bins, spatial set has {}",
                factor.bins(),
                spatial.bins()
            )));
        }
        Ok(Self { factor, spatial, adapt_w: true, adapt_h: true, adapt_r: true })
    }

    /// Random NMF factors, identity spatial covariances, all blocks adaptive.
    pub fn random<R: Rng + ?Sized>(bins: usize, rank: usize, frames: usize, channels: usize, rng: &mut R) -> Self {
        Self::new(NmfFactor::random(bins, rank, frames, rng), SpatialCovSet::identity(bins, channels))
            .expect("consistent shapes")
    }

    pub fn channels(&self) -> usize {
        self.spatial.channels()
    }

    /// `R_f [W H]_ft`.
    pub fn cov(&self, f: usize, t: usize) -> CMat {
        let v = self.factor.w.row(f).dot(&self.factor.h.column(t));
        self.spatial.mats[f].scale(v)
    }

    /// Rescales to `tr(R_f) = M` and unit column sums of `W`, moving the
    /// scale into `W` rows and `H` rows respectively. Every `Sigma_ft` is
    /// preserved. Columns that sum to zero are floored first.
    pub fn normalize(&mut self) {
        let m = self.channels() as f64;
        for (f, r) in self.spatial.mats.iter_mut().enumerate() {
            let tr = r.trace_re();
            if tr > 0.0 && tr.is_finite() {
                *r = r.scale(m / tr);
                self.factor.w.row_mut(f).mapv_inplace(|v| v * tr / m);
            }
        }
        let rank = self.factor.rank();
        for k in 0..rank {
            let mut col = self.factor.w.column_mut(k);
            let mut sum: f64 = col.sum();
            if !(sum > 0.0) {
                col.fill(EPS_FLOOR);
                sum = col.sum();
            }
            col.mapv_inplace(|v| v / sum);
            self.factor.h.row_mut(k).mapv_inplace(|v| v * sum);
        }
    }
}

/// Applies `x <- max(x * sqrt(num / den), EPS_FLOOR)` elementwise; entries
/// with a nonpositive denominator are left unchanged.
pub(crate) fn multiplicative_update(mut x: ArrayViewMut2<f64>, num: ArrayView2<f64>, den: ArrayView2<f64>) {
    Zip::from(&mut x).and(&num).and(&den).for_each(|x, &n, &d| {
        if d > 0.0 {
            *x = (*x * (n.max(0.0) / d).sqrt()).max(EPS_FLOOR);
        }
    });
}

/// Solves `R A R = B` for Hermitian positive semidefinite `R` as
/// `A^{-1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`.
///
/// Eigenvalues of `A` below `PD_LOADING * tr(A) / M` are raised to that
/// floor, so well-conditioned inputs are solved exactly. The result is
/// hermitized.
pub fn solve_riccati(a: &CMat, b: &CMat) -> Result<CMat, MnmfError> {
    if a.dim() != b.dim() {
        return Err(MnmfError::Dimension("Riccati coefficients differ in size".into()));
    }
    if a.hermitian_defect() > HERMITIAN_TOL * a.frobenius_norm().max(f64::MIN_POSITIVE) {
        return Err(MnmfError::NonHermitian("Riccati coefficient A"));
    }
    if b.hermitian_defect() > HERMITIAN_TOL * b.frobenius_norm().max(f64::MIN_POSITIVE) {
        return Err(MnmfError::NonHermitian("Riccati coefficient B"));
    }
    let m = a.dim() as f64;
    let tr = a.trace_re();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(MnmfError::SingularRiccati);
    }
    let floor = PD_LOADING * tr / m;
    let eig = a.hermitize().hermitian_eigen();
    if !(eig.min_value() > -floor) {
        return Err(MnmfError::SingularRiccati);
    }
    let root: Vec<f64> = eig.values().iter().map(|v| v.max(floor).sqrt()).collect();
    let inv_root: Vec<f64> = root.iter().map(|v| 1.0 / v).collect();
    let a_half = eig.reconstruct_with(&root);
    let a_inv_half = eig.reconstruct_with(&inv_root);
    let inner = (a_half * b.hermitize() * a_half).hermitize();
    let r = (a_inv_half * inner.hermitian_sqrt() * a_inv_half).hermitize();
    if r.to_row_major().iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(MnmfError::Invalid("non-finite Riccati solution".into()));
    }
    Ok(r)
}

/// Raises eigenvalues of a Hermitian matrix to at least
/// `PD_LOADING * tr / M`; leaves well-conditioned matrices untouched.
pub(crate) fn clamp_spectrum(r: CMat) -> CMat {
    let floor = PD_LOADING * r.trace_re().max(0.0) / r.dim() as f64;
    let eig = r.hermitian_eigen();
    if eig.min_value() >= floor && floor > 0.0 {
        return r;
    }
    let floor = floor.max(f64::MIN_POSITIVE);
    let vals: Vec<f64> = eig.values().iter().map(|v| v.max(floor)).collect();
    eig.reconstruct_with(&vals).hermitize()
}

fn check_shapes(x_bins: usize, x_frames: usize, x_channels: usize, model: &NoiseComponentModel) -> Result<(), MnmfError> {
    let fac = &model.factor;
    if fac.bins() != x_bins || fac.frames() != x_frames || model.channels() != x_channels {
        return Err(MnmfError::Dimension(format!(
            "data is {x_channels} ch x {x_bins} bins x {x_frames} frames, model is {} ch x {} bins x {} frames",
            model.channels(),
            fac.bins(),
            fac.frames()
        )));
    }
    Ok(())
}

/// Per bin: `(E_ft^H R_f^{-1} E_ft for all t, ln det R_f)`.
fn whitened_power(x: &[CVec], frames: usize, spatial: &SpatialCovSet) -> Result<(Array2<f64>, Vec<f64>), MnmfError> {
    let bins = spatial.bins();
    let rows: Vec<(Vec<f64>, f64)> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let l = spatial.mats[f].cholesky().ok_or(MnmfError::Singular { f, t: 0 })?;
            let linv = l.lower_triangular_inverse();
            let logdet: f64 = (0..l.dim()).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
            let q = x[f * frames..(f + 1) * frames].iter().map(|e| linv.mul_vec(e).norm_sqr()).collect();
            Ok((q, logdet))
        })
        .collect::<Result<_, MnmfError>>()?;
    let mut q = Array2::zeros((bins, frames));
    let mut logdet = Vec::with_capacity(bins);
    for (f, (row, ld)) in rows.into_iter().enumerate() {
        q.row_mut(f).assign(&ndarray::Array1::from(row));
        logdet.push(ld);
    }
    Ok((q, logdet))
}

fn loss_from_parts(q: &Array2<f64>, logdet_r: &[f64], v: &Array2<f64>, channels: usize) -> Result<f64, MnmfError> {
    let m = channels as f64;
    let mut acc = KahanSum::new();
    for ((f, t), &vf) in v.indexed_iter() {
        if !(vf > 0.0) || !vf.is_finite() {
            return Err(MnmfError::Singular { f, t });
        }
        acc.add(q[(f, t)] / vf + logdet_r[f] + m * vf.ln());
    }
    Ok(acc.value())
}

/// `sum_{f,t} tr(E E^H Sigma^{-1}) + ln det Sigma` with `Sigma_ft = R_f [W H]_ft`.
pub fn mnmf_loss(spec: &Spectrogram, model: &NoiseComponentModel) -> Result<f64, MnmfError> {
    check_shapes(spec.bins(), spec.frames(), spec.channels(), model)?;
    let x = spec.bin_vectors();
    let (q, logdet) = whitened_power(&x, spec.frames(), &model.spatial)?;
    loss_from_parts(&q, &logdet, &model.factor.product(), model.channels())
}

/// Settings for [`train_ego`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoTrainConfig {
    pub max_sweeps: usize,
    /// Stop when the relative loss change of one sweep falls below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EgoTrainConfig {
    fn default() -> Self {
        Self { max_sweeps: 200, rel_tol: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct EgoTraining {
    pub model: NoiseComponentModel,
    /// Loss at initialization followed by the loss after every sweep.
    pub loss_history: Vec<f64>,
}

/// Fits a single MNMF component of rank `rank` to a noise-only spectrogram.
///
/// One sweep updates `W`, then `H`, then every `R_f`, then normalizes.
pub fn train_ego(spec: &Spectrogram, rank: usize, cfg: &EgoTrainConfig) -> Result<EgoTraining, MnmfError> {
    if cfg.max_sweeps == 0 {
        return Err(MnmfError::Invalid("sweep count must be at least 1".into()));
    }
    if rank == 0 {
        return Err(MnmfError::Invalid("rank must be at least 1".into()));
    }
    let x = spec.bin_vectors();
    if x.iter().all(|e| e.norm_sqr() == 0.0) {
        return Err(MnmfError::Degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = NoiseComponentModel::random(spec.bins(), rank, spec.frames(), spec.channels(), &mut rng);
    fit_component(&x, model, cfg)
}

/// Runs [`train_ego`] sweeps from a given starting model.
pub fn refine_component(
    spec: &Spectrogram,
    model: NoiseComponentModel,
    cfg: &EgoTrainConfig,
) -> Result<EgoTraining, MnmfError> {
    check_shapes(spec.bins(), spec.frames(), spec.channels(), &model)?;
    fit_component(&spec.bin_vectors(), model, cfg)
}

fn fit_component(x: &[CVec], mut model: NoiseComponentModel, cfg: &EgoTrainConfig) -> Result<EgoTraining, MnmfError> {
    let bins = model.factor.bins();
    let frames = model.factor.frames();
    let m = model.channels() as f64;

    // Match the overall model power to the data before the first sweep.
    let data_power = x.iter().map(CVec::norm_sqr).sum::<f64>() / (x.len() as f64 * m);
    let model_power = model.factor.product().mean().unwrap_or(1.0);
    if model.adapt_h && data_power > 0.0 && model_power > 0.0 {
        let s = data_power / model_power;
        model.factor.h.mapv_inplace(|v| (v * s).max(EPS_FLOOR));
    }
    model.normalize();

    let (mut q, mut logdet) = whitened_power(x, frames, &model.spatial)?;
    let mut history = vec![loss_from_parts(&q, &logdet, &model.factor.product(), model.channels())?];
    for sweep in 0..cfg.max_sweeps {
        if model.adapt_w {
            let v = model.factor.product();
            let num = (&q / &(&v * &v)).dot(&model.factor.h.t());
            let den = v.mapv(|x| m / x).dot(&model.factor.h.t());
            multiplicative_update(model.factor.w.view_mut(), num.view(), den.view());
        }
        if model.adapt_h {
            let v = model.factor.product();
            let num = model.factor.w.t().dot(&(&q / &(&v * &v)));
            let den = model.factor.w.t().dot(&v.mapv(|x| m / x));
            multiplicative_update(model.factor.h.view_mut(), num.view(), den.view());
        }
        if model.adapt_r {
            let v = model.factor.product();
            let updated: Vec<CMat> = (0..bins)
                .into_par_iter()
                .map(|f| {
                    let r = &model.spatial.mats[f];
                    let rinv = r.hpd_inverse().ok_or(MnmfError::Singular { f, t: 0 })?;
                    let mut b = CMat::zeros(r.dim());
                    for t in 0..frames {
                        b += CMat::outer(&x[f * frames + t]).scale(1.0 / v[(f, t)]);
                    }
                    let a = rinv.scale(frames as f64);
                    Ok(clamp_spectrum(solve_riccati(&a, &b.hermitize())?))
                })
                .collect::<Result<_, MnmfError>>()?;
            model.spatial.mats = updated;
        }
        model.normalize();
        (q, logdet) = whitened_power(x, frames, &model.spatial)?;
        let loss = loss_from_parts(&q, &logdet, &model.factor.product(), model.channels())?;
        let prev = *history.last().unwrap();
        history.push(loss);
        log::debug!("mnmf sweep {}: loss {loss:.6}", sweep + 1);
        if ((prev - loss) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.rel_tol {
            break;
        }
    }
    Ok(EgoTraining { model, loss_history: history })
}

/// Pre-trained ego-noise dictionary and spatial covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoPrior {
    pub w: Array2<f64>,
    pub spatial: SpatialCovSet,
    pub loss_history: Vec<f64>,
}

impl EgoPrior {
    pub fn from_training(t: &EgoTraining) -> Self {
        Self { w: t.model.factor.w.clone(), spatial: t.model.spatial.clone(), loss_history: t.loss_history.clone() }
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (f, k) = self.w.dim();
        let m = self.spatial.channels();
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set_meta("freq_bins", f);
        ck.set_meta("rank", k);
        ck.set_meta("channels", m);
        ck.set_meta("normalization", "trace(R_f)=M; sum_f W[f,k]=1");
        ck.insert("W", vec![f, k], self.w.iter().copied().collect());
        let mut r = Vec::with_capacity(f * m * m * 2);
        for mat in &self.spatial.mats {
            for c in mat.to_row_major() {
                r.push(c.re);
                r.push(c.im);
            }
        }
        ck.insert("R", vec![f, m, m, 2], r);
        ck.insert("loss_history", vec![self.loss_history.len()], self.loss_history.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MnmfError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let f = ck.meta_usize("freq_bins")?;
        let k = ck.meta_usize("rank")?;
        let m = ck.meta_usize("channels")?;
        if m == 0 || m > crate::linalg::MAX_CHANNELS {
            return Err(CheckpointError::Invalid("channels".into()).into());
        }
        let w = Array2::from_shape_vec((f, k), ck.tensor_shaped("W", &[f, k])?.data.clone())
            .map_err(|_| CheckpointError::Invalid("W".into()))?;
        let raw = &ck.tensor_shaped("R", &[f, m, m, 2])?.data;
        let mats = raw
            .chunks_exact(m * m * 2)
            .map(|c| {
                let vals: Vec<C64> = c.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
                CMat::from_row_major(m, &vals)
            })
            .collect();
        let spatial = SpatialCovSet::from_mats(mats)?;
        let loss_history = ck.tensor("loss_history")?.data.clone();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CheckpointError::Invalid("W".into()).into());
        }
        Ok(Self { w, spatial, loss_history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MnmfError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MnmfError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
