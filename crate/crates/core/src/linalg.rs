//! Small dense complex matrices for per-bin spatial covariances.
//!
//! Every spatial model in this crate works with `M x M` Hermitian matrices
//! where `M` is the microphone count. These are tiny (a robot array has four
//! channels) and are touched millions of times per inference run, so they live
//! on the stack in a fixed-capacity buffer instead of a heap-allocated matrix.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

/// Largest supported channel count.
pub const MAX_CHANNELS: usize = 8;

const CAP: usize = MAX_CHANNELS * MAX_CHANNELS;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Fixed-capacity complex vector of length `n <= MAX_CHANNELS`.
#[derive(Clone, Copy, PartialEq)]
pub struct CVec {
    n: usize,
    data: [C64; MAX_CHANNELS],
}

impl CVec {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_CHANNELS, "vector length {n} exceeds {MAX_CHANNELS}");
        Self { n, data: [ZERO; MAX_CHANNELS] }
    }

    pub fn from_slice(values: &[C64]) -> Self {
        let mut v = Self::zeros(values.len());
        v.data[..values.len()].copy_from_slice(values);
        v
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize) -> C64) -> Self {
        let mut v = Self::zeros(n);
        for i in 0..n {
            v.data[i] = f(i);
        }
        v
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data[..self.n]
    }

    /// `x^H y`
    pub fn dot(&self, other: &CVec) -> C64 {
        debug_assert_eq!(self.n, other.n);
        let mut acc = ZERO;
        for i in 0..self.n {
            acc += self.data[i].conj() * other.data[i];
        }
        acc
    }

    pub fn norm_sqr(&self) -> f64 {
        self.as_slice().iter().map(|c| c.norm_sqr()).sum()
    }
}

impl Index<usize> for CVec {
    type Output = C64;
    #[inline]
    fn index(&self, i: usize) -> &C64 {
        debug_assert!(i < self.n);
        &self.data[i]
    }
}

impl IndexMut<usize> for CVec {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        debug_assert!(i < self.n);
        &mut self.data[i]
    }
}

impl fmt::Debug for CVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

/// Fixed-capacity square complex matrix, row-major.
#[derive(Clone, Copy, PartialEq)]
pub struct CMat {
    n: usize,
    data: [C64; CAP],
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_CHANNELS, "matrix order {n} exceeds {MAX_CHANNELS}");
        Self { n, data: [ZERO; CAP] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = C64::new(value, 0.0);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from `n * n` row-major entries.
    pub fn from_row_major(n: usize, values: &[C64]) -> Self {
        assert_eq!(values.len(), n * n);
        Self::from_fn(n, |i, j| values[i * n + j])
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        m
    }

    /// Rank-one outer product `x x^H`.
    pub fn outer(x: &CVec) -> Self {
        Self::from_fn(x.len(), |i, j| x[i] * x[j].conj())
    }

    /// `self += s * x x^H`
    pub fn add_scaled_outer(&mut self, s: f64, x: &CVec) {
        let n = self.n;
        debug_assert_eq!(n, x.len());
        for i in 0..n {
            let xi = x[i] * s;
            for j in 0..n {
                self.data[i * n + j] += xi * x[j].conj();
            }
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn to_row_major(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for v in out.data[..self.n * self.n].iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Real part of the trace; the trace of a Hermitian matrix is real.
    pub fn trace_re(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)].re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += self[(i, j)].norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// `|| A - A^H ||_F`
    pub fn hermitian_defect(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += (self[(i, j)] - self[(j, i)].conj()).norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// Replaces the matrix by `(A + A^H) / 2`.
    pub fn hermitize(&self) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            out[(i, i)] = C64::new(self[(i, i)].re, 0.0);
            for j in (i + 1)..self.n {
                let v = (self[(i, j)] + self[(j, i)].conj()) * 0.5;
                out[(i, j)] = v;
                out[(j, i)] = v.conj();
            }
        }
        out
    }

    pub fn add_diag(&self, value: f64) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            out[(i, i)].re += value;
        }
        out
    }

    pub fn mul_vec(&self, x: &CVec) -> CVec {
        debug_assert_eq!(self.n, x.len());
        CVec::from_fn(self.n, |i| {
            let mut acc = ZERO;
            for j in 0..self.n {
                acc += self[(i, j)] * x[j];
            }
            acc
        })
    }

    /// `A^H x`
    pub fn adjoint_mul_vec(&self, x: &CVec) -> CVec {
        debug_assert_eq!(self.n, x.len());
        CVec::from_fn(self.n, |i| {
            let mut acc = ZERO;
            for j in 0..self.n {
                acc += self[(j, i)].conj() * x[j];
            }
            acc
        })
    }

    /// Quadratic form `x^H A x`, real part.
    pub fn quad_form(&self, x: &CVec) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut row = ZERO;
            for j in 0..self.n {
                row += self[(i, j)] * x[j];
            }
            acc += (x[i].conj() * row).re;
        }
        acc
    }

    /// `tr(A B)` without forming the product.
    pub fn trace_of_product(&self, other: &CMat) -> C64 {
        let mut acc = ZERO;
        for i in 0..self.n {
            for k in 0..self.n {
                acc += self[(i, k)] * other[(k, i)];
            }
        }
        acc
    }

    /// `A^H B A` for Hermitian `B`, hermitized.
    pub fn congruence(&self, b: &CMat) -> CMat {
        (self.adjoint() * *b * *self).hermitize()
    }

    /// Lower Cholesky factor `L` with `A = L L^H`, or `None` if `A` is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<CMat> {
        let n = self.n;
        let mut l = CMat::zeros(n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            let inv = 1.0 / djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s * inv;
            }
        }
        Some(l)
    }

    /// Inverse of a lower-triangular matrix.
    pub fn lower_triangular_inverse(&self) -> CMat {
        let n = self.n;
        let mut inv = CMat::zeros(n);
        for j in 0..n {
            inv[(j, j)] = ONE / self[(j, j)];
            for i in (j + 1)..n {
                let mut s = ZERO;
                for k in j..i {
                    s += self[(i, k)] * inv[(k, j)];
                }
                inv[(i, j)] = -s / self[(i, i)];
            }
        }
        inv
    }

    /// Inverse of a Hermitian positive definite matrix via Cholesky.
    pub fn hpd_inverse(&self) -> Option<CMat> {
        let l = self.cholesky()?;
        let li = l.lower_triangular_inverse();
        Some((li.adjoint() * li).hermitize())
    }

    /// `ln det A` for Hermitian positive definite `A`.
    pub fn hpd_logdet(&self) -> Option<f64> {
        let l = self.cholesky()?;
        Some((0..self.n).map(|i| 2.0 * l[(i, i)].re.ln()).sum())
    }

    /// Solves `A y = x` for Hermitian positive definite `A`.
    pub fn hpd_solve(&self, x: &CVec) -> Option<CVec> {
        let l = self.cholesky()?;
        Some(cholesky_solve(&l, x))
    }

    /// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
    ///
    /// Eigenvalues are returned in ascending order with the matching
    /// eigenvectors as the columns of the returned unitary matrix.
    pub fn hermitian_eigen(&self) -> HermitianEigen {
        let n = self.n;
        let mut a = self.hermitize();
        let mut v = CMat::identity(n);
        let scale = a.frobenius_norm();
        if n > 1 && scale > 0.0 {
            let tol = scale * 1e-17;
            for _sweep in 0..64 {
                let mut off = 0.0;
                for p in 0..n {
                    for q in (p + 1)..n {
                        off += a.data[p * n + q].norm_sqr();
                    }
                }
                if off.sqrt() <= tol {
                    break;
                }
                for p in 0..n {
                    for q in (p + 1)..n {
                        // Entries at rounding level of both diagonals are dropped
                        // instead of rotated.
                        let g = 100.0 * a.data[p * n + q].norm_sqr().sqrt();
                        let (app, aqq) = (a.data[p * n + p].re.abs(), a.data[q * n + q].re.abs());
                        if app + g == app && aqq + g == aqq {
                            a.data[p * n + q] = ZERO;
                            a.data[q * n + p] = ZERO;
                        } else {
                            jacobi_rotate(&mut a, &mut v, p, q);
                        }
                    }
                }
            }
        }
        let mut order: [usize; MAX_CHANNELS] = [0; MAX_CHANNELS];
        for (i, o) in order.iter_mut().enumerate().take(n) {
            *o = i;
        }
        order[..n].sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
        let mut values = [0.0; MAX_CHANNELS];
        let mut vectors = CMat::zeros(n);
        for (dst, &src) in order[..n].iter().enumerate() {
            values[dst] = a[(src, src)].re;
            for i in 0..n {
                vectors[(i, dst)] = v[(i, src)];
            }
        }
        HermitianEigen { n, values, vectors }
    }

    /// Applies `g` to the eigenvalues of a Hermitian matrix.
    pub fn hermitian_map(&self, g: impl Fn(f64) -> f64) -> CMat {
        let eig = self.hermitian_eigen();
        let mapped: Vec<f64> = eig.values().iter().map(|&x| g(x)).collect();
        eig.reconstruct_with(&mapped)
    }

    /// Principal square root of a Hermitian PSD matrix; negative eigenvalues
    /// from round-off are clamped to zero.
    pub fn hermitian_sqrt(&self) -> CMat {
        self.hermitian_map(|x| x.max(0.0).sqrt())
    }
}

/// Result of [`CMat::hermitian_eigen`].
#[derive(Clone, Copy, Debug)]
pub struct HermitianEigen {
    n: usize,
    values: [f64; MAX_CHANNELS],
    vectors: CMat,
}

impl HermitianEigen {
    pub fn values(&self) -> &[f64] {
        &self.values[..self.n]
    }

    pub fn vectors(&self) -> &CMat {
        &self.vectors
    }

    pub fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `U diag(values) U^H`
    pub fn reconstruct_with(&self, values: &[f64]) -> CMat {
        let n = self.n;
        let u = &self.vectors;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut acc = ZERO;
                for (k, &lam) in values.iter().enumerate() {
                    acc += u[(i, k)] * u[(j, k)].conj() * lam;
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc.conj();
            }
            out[(i, i)].im = 0.0;
        }
        out
    }
}

fn jacobi_rotate(a: &mut CMat, v: &mut CMat, p: usize, q: usize) {
    let n = a.n;
    let apq = a.data[p * n + q];
    // hypot is slow and the magnitudes here cannot overflow a square
    let r = apq.norm_sqr().sqrt();
    if r == 0.0 {
        return;
    }
    let phase = apq / r;
    let app = a.data[p * n + p].re;
    let aqq = a.data[q * n + q].re;
    let theta = (aqq - app) / (2.0 * r);
    let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    // G = diag(1, conj(phase)) * [[c, s], [-s, c]] restricted to (p, q).
    let gqp = -phase.conj() * s;
    let gqq = phase.conj() * c;
    let (ad, vd) = (&mut a.data[..n * n], &mut v.data[..n * n]);
    for k in 0..n {
        let akp = ad[k * n + p];
        let akq = ad[k * n + q];
        ad[k * n + p] = akp * c + akq * gqp;
        ad[k * n + q] = akp * s + akq * gqq;
    }
    let (gqp_c, gqq_c) = (gqp.conj(), gqq.conj());
    for k in 0..n {
        let apk = ad[p * n + k];
        let aqk = ad[q * n + k];
        ad[p * n + k] = apk * c + gqp_c * aqk;
        ad[q * n + k] = apk * s + gqq_c * aqk;
    }
    ad[p * n + q] = ZERO;
    ad[q * n + p] = ZERO;
    ad[p * n + p].im = 0.0;
    ad[q * n + q].im = 0.0;
    for k in 0..n {
        let vkp = vd[k * n + p];
        let vkq = vd[k * n + q];
        vd[k * n + p] = vkp * c + vkq * gqp;
        vd[k * n + q] = vkp * s + vkq * gqq;
    }
}

/// Solves `L L^H y = x` given the lower Cholesky factor.
pub fn cholesky_solve(l: &CMat, x: &CVec) -> CVec {
    let n = l.dim();
    let mut y = *x;
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)].conj() * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.n && j < self.n);
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.n && j < self.n);
        &mut self.data[i * self.n + j]
    }
}

impl Mul for CMat {
    type Output = CMat;
    fn mul(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self[(i, k)];
                if aik == ZERO {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += aik * rhs.data[k * n + j];
                }
            }
        }
        out
    }
}

impl Add for CMat {
    type Output = CMat;
    fn add(mut self, rhs: CMat) -> CMat {
        self += rhs;
        self
    }
}

impl AddAssign for CMat {
    fn add_assign(&mut self, rhs: CMat) {
        debug_assert_eq!(self.n, rhs.n);
        let nn = self.n * self.n;
        for (a, b) in self.data[..nn].iter_mut().zip(&rhs.data[..nn]) {
            *a += *b;
        }
    }
}

impl Sub for CMat {
    type Output = CMat;
    fn sub(mut self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let nn = self.n * self.n;
        for (a, b) in self.data[..nn].iter_mut().zip(&rhs.data[..nn]) {
            *a -= *b;
        }
        self
    }
}

impl fmt::Debug for CMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<Vec<C64>> = (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)]).collect())
            .collect();
        f.debug_struct("CMat").field("n", &self.n).field("rows", &rows).finish()
    }
}

/// Neumaier-compensated running sum, used for long likelihood reductions
/// whose per-step differences are compared at tight tolerances.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hpd(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        let g = CMat::from_fn(n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (g * g.adjoint()).add_diag(0.1).hermitize()
    }

    fn to_na(a: &CMat) -> DMatrix<C64> {
        DMatrix::from_fn(a.dim(), a.dim(), |i, j| a[(i, j)])
    }

    #[test]
    fn cholesky_inverse_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=MAX_CHANNELS {
            let a = random_hpd(n, &mut rng);
            let inv = a.hpd_inverse().unwrap();
            let reference = to_na(&a).try_inverse().unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!((inv[(i, j)] - reference[(i, j)]).norm() < 1e-9 * reference.norm());
                }
            }
            let logdet = a.hpd_logdet().unwrap();
            let det = to_na(&a).determinant();
            assert!((logdet - det.re.ln()).abs() < 1e-10 * logdet.abs().max(1.0));
        }
    }

    #[test]
    fn eigen_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            let g = CMat::from_fn(n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let a = (g + g.adjoint()).hermitize();
            let eig = a.hermitian_eigen();
            let mut reference: Vec<f64> = to_na(&a).symmetric_eigenvalues().iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            for (x, y) in eig.values().iter().zip(reference.iter()) {
                assert!((x - y).abs() < 1e-12 * a.frobenius_norm().max(1.0), "{x} vs {y}");
            }
            let back = eig.reconstruct_with(eig.values());
            assert!((back - a).frobenius_norm() < 1e-12 * a.frobenius_norm().max(1.0));
            let u = eig.vectors();
            let gram = u.adjoint() * *u;
            assert!((gram - CMat::identity(n)).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn non_pd_matrix_has_no_cholesky() {
        let a = CMat::from_diag(&[1.0, -1.0]);
        assert!(a.cholesky().is_none());
        assert!(CMat::zeros(3).cholesky().is_none());
    }

    #[test]
    fn solve_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_hpd(4, &mut rng);
        let x = CVec::from_fn(4, |i| C64::new(i as f64, 1.0 - i as f64));
        let y = a.hpd_solve(&x).unwrap();
        let back = a.mul_vec(&y);
        for i in 0..4 {
            assert!((back[i] - x[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn kahan_beats_naive_on_cancellation() {
        let mut s = KahanSum::new();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    proptest! {
        #[test]
        fn sqrt_squares_back(seed in 0u64..500, n in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_hpd(n, &mut rng);
            let s = a.hermitian_sqrt();
            let back = s * s;
            prop_assert!((back - a).frobenius_norm() < 1e-10 * a.frobenius_norm());
            prop_assert!(s.hermitian_defect() < 1e-12 * s.frobenius_norm());
        }
    }
}
