//! Hyperpriors over the log length-scale field: the sparse AR(1) form, the
//! dense squared-exponential form, their whitening maps and log-densities,
//! and the data-driven elicitation of the prior location and magnitude.

use crate::banded::BandedMatrix;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::sync::{Arc, Mutex, OnceLock};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Initial diagonal jitter for the squared-exponential Cholesky, as a
/// fraction of the marginal variance; escalated tenfold on failure.
const SE_JITTER_START: f64 = 1e-10;
const SE_JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperpriorKind {
    /// Ornstein-Uhlenbeck covariance written as an AR(1) lattice process;
    /// sparse bidiagonal factor.
    Ar1,
    /// Squared-exponential covariance; dense Cholesky factor.
    Se,
    /// Degenerate constant field, realising the stationary baseline model.
    Const,
}

impl HyperpriorKind {
    fn name(self) -> &'static str {
        match self {
            HyperpriorKind::Ar1 => "ar1",
            HyperpriorKind::Se => "se",
            HyperpriorKind::Const => "const",
        }
    }
}

/// Parameters of the hyperprior over the log length-scale field.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperpriorSpec {
    pub kind: HyperpriorKind,
    /// Hyper length-scale (input units).
    pub lambda: f64,
    /// Prior magnitude of the log length-scale.
    pub tau_ell: f64,
    /// Prior mean of the log length-scale.
    pub mu_ell: f64,
    /// Grid step.
    pub h: f64,
    /// Grid size.
    pub n: usize,
}

impl HyperpriorSpec {
    pub fn new(
        kind: HyperpriorKind,
        lambda: f64,
        tau_ell: f64,
        mu_ell: f64,
        h: f64,
        n: usize,
    ) -> Result<Self> {
        if kind != HyperpriorKind::Const {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::Config(format!("hyper length-scale must be positive, got {lambda}")));
            }
            if !(tau_ell > 0.0) || !tau_ell.is_finite() {
                return Err(Error::Config(format!("prior magnitude must be positive, got {tau_ell}")));
            }
        }
        if !(h > 0.0) || n == 0 {
            return Err(Error::Config("grid step and size must be positive".into()));
        }
        Ok(HyperpriorSpec { kind, lambda, tau_ell, mu_ell, h, n })
    }

    /// Same spec with a different hyper length-scale.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        HyperpriorSpec { lambda, ..self.clone() }
    }

    /// AR(1) factor coefficients
    /// `a₀ = (√(h/λ) + √(h/λ + 4λ/h)) / (τ_ℓ √8)` and
    /// `a₁ = (√(h/λ) − √(h/λ + 4λ/h)) / (τ_ℓ √8)`.
    pub fn ar1_coefficients(&self) -> (f64, f64) {
        let r = self.h / self.lambda;
        let s = (r + 4.0 * self.lambda / self.h).sqrt();
        let denom = self.tau_ell * 8.0f64.sqrt();
        ((r.sqrt() + s) / denom, (r.sqrt() - s) / denom)
    }

    /// Implied AR(1) autoregression weight `β = −a₁/a₀`, always in (0, 1).
    pub fn ar1_beta(&self) -> f64 {
        let (a0, a1) = self.ar1_coefficients();
        -a1 / a0
    }

    fn expect_kind(&self, kind: HyperpriorKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind {
                expected: kind.name(),
                actual: self.kind.name(),
            });
        }
        Ok(())
    }

    fn same_family(&self, other: &HyperpriorSpec) -> bool {
        self.kind == other.kind
            && self.n == other.n
            && self.h == other.h
            && self.mu_ell == other.mu_ell
            && self.tau_ell == other.tau_ell
    }
}

/// Upper-bidiagonal AR(1) factor `L(φ)` with `Q_φ = L(φ)ᵀ L(φ)`:
/// main diagonal `(a₀, …, a₀, 1)`, first superdiagonal `(a₁, …, a₁)`.
pub fn ar1_factor(spec: &HyperpriorSpec) -> Result<BandedMatrix> {
    spec.expect_kind(HyperpriorKind::Ar1)?;
    let (a0, a1) = spec.ar1_coefficients();
    let n = spec.n;
    let mut l = BandedMatrix::zeros(n, 0, 1.min(n - 1));
    for j in 0..n {
        l.set_unchecked(j, j, if j + 1 == n { 1.0 } else { a0 });
        if j + 1 < n {
            l.set_unchecked(j, j + 1, a1);
        }
    }
    Ok(l)
}

/// Entry `(k, j)` of the tridiagonal AR(1) precision `Q_φ`, nonzero only for
/// `|k − j| ≤ 1`.
fn ar1_precision_entry(spec: &HyperpriorSpec, k: usize, j: usize) -> f64 {
    let (a0, a1) = spec.ar1_coefficients();
    let n = spec.n;
    if k == j {
        if k == 0 && n > 1 {
            a0 * a0
        } else if k + 1 == n {
            if n == 1 {
                1.0
            } else {
                1.0 + a1 * a1
            }
        } else {
            a0 * a0 + a1 * a1
        }
    } else if k.abs_diff(j) == 1 {
        a0 * a1
    } else {
        0.0
    }
}

/// Dense squared-exponential covariance over the uniform grid, including the
/// stabilising jitter actually applied.
fn se_covariance(spec: &HyperpriorSpec, jitter: f64) -> DMatrix<f64> {
    let t2 = spec.tau_ell * spec.tau_ell;
    DMatrix::from_fn(spec.n, spec.n, |i, j| {
        let r = (i as f64 - j as f64) * spec.h;
        let c = t2 * (-r * r / (2.0 * spec.lambda * spec.lambda)).exp();
        if i == j {
            c + jitter * t2
        } else {
            c
        }
    })
}

/// Cached factors of one squared-exponential hyperprior: the lower Cholesky
/// factor of the jittered covariance, with the dense precision derived from
/// it on first use (only the single-site updates need it).
#[derive(Debug, Clone)]
pub struct SeFactors {
    pub chol: DMatrix<f64>,
    /// `Σ ln diag(chol)`, half the covariance log-determinant.
    pub half_logdet: f64,
    precision: OnceLock<DMatrix<f64>>,
    /// Jitter fraction that was needed for a successful factorisation.
    pub jitter: f64,
}

impl SeFactors {
    pub fn compute(spec: &HyperpriorSpec) -> Result<Self> {
        spec.expect_kind(HyperpriorKind::Se)?;
        let mut jitter = SE_JITTER_START;
        loop {
            let cov = se_covariance(spec, jitter);
            if let Some(chol) = cov.cholesky() {
                let l = chol.l();
                let half_logdet = (0..spec.n).map(|i| l[(i, i)].ln()).sum();
                return Ok(SeFactors {
                    chol: l,
                    half_logdet,
                    precision: OnceLock::new(),
                    jitter,
                });
            }
            if jitter >= SE_JITTER_MAX {
                return Err(Error::NotPositiveDefinite { index: 0 });
            }
            jitter *= 10.0;
        }
    }

    /// Dense precision `C_φ⁻¹ = R⁻ᵀ R⁻¹`, built lazily from the factor.
    pub fn precision(&self) -> &DMatrix<f64> {
        self.precision.get_or_init(|| {
            let n = self.chol.nrows();
            let linv = self
                .chol
                .clone()
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .expect("triangular factor has positive diagonal");
            linv.transpose() * linv
        })
    }
}

/// Lower-triangular Cholesky factor `R` of the (jittered) squared-exponential
/// covariance, `R Rᵀ = C_φ`.
pub fn se_chol(spec: &HyperpriorSpec) -> Result<DMatrix<f64>> {
    Ok(SeFactors::compute(spec)?.chol)
}

/// Bounded cache of squared-exponential factors keyed by the spec parameters.
///
/// Samplers propose a fresh hyper length-scale every sweep, so the cache keeps
/// only the few most recent factorisations. Interior locking keeps it safe to
/// share between concurrently running chains.
#[derive(Debug, Default)]
pub struct SeCache {
    entries: Mutex<VecDeque<((u64, u64, u64, usize), Arc<SeFactors>)>>,
}

const SE_CACHE_CAP: usize = 4;

impl SeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, spec: &HyperpriorSpec) -> Result<Arc<SeFactors>> {
        let key = (
            spec.lambda.to_bits(),
            spec.tau_ell.to_bits(),
            spec.h.to_bits(),
            spec.n,
        );
        let entries = self.entries.lock().expect("se cache poisoned");
        if let Some((_, f)) = entries.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(f));
        }
        drop(entries);
        let factors = Arc::new(SeFactors::compute(spec)?);
        let mut entries = self.entries.lock().expect("se cache poisoned");
        entries.push_back((key, Arc::clone(&factors)));
        while entries.len() > SE_CACHE_CAP {
            entries.pop_front();
        }
        Ok(factors)
    }
}

/// Maps whitened coordinates to the field: `u = R_φ ζ + μ_ℓ`, with
/// `R_φ = L(φ)⁻¹` for AR(1) (a banded back-substitution) and
/// `R_φ = chol(C_φ)` for the squared exponential.
pub fn unwhiten(spec: &HyperpriorSpec, zeta: &[f64]) -> Result<Vec<f64>> {
    if zeta.len() != spec.n {
        return Err(Error::DimensionMismatch { expected: spec.n, actual: zeta.len() });
    }
    match spec.kind {
        HyperpriorKind::Ar1 => {
            let (a0, a1) = spec.ar1_coefficients();
            Ok(ar1_unwhiten(zeta, a0, a1, spec.mu_ell))
        }
        HyperpriorKind::Se => {
            let f = SeFactors::compute(spec)?;
            Ok(se_unwhiten(&f, zeta, spec.mu_ell))
        }
        HyperpriorKind::Const => Err(Error::WrongKind { expected: "ar1 or se", actual: "const" }),
    }
}

/// Inverse of [`unwhiten`]: `ζ = R_φ⁻¹ (u − μ_ℓ)`.
pub fn whiten(spec: &HyperpriorSpec, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != spec.n {
        return Err(Error::DimensionMismatch { expected: spec.n, actual: u.len() });
    }
    match spec.kind {
        HyperpriorKind::Ar1 => {
            let (a0, a1) = spec.ar1_coefficients();
            let n = spec.n;
            let mut zeta = vec![0.0; n];
            for j in 0..n {
                let d = if j + 1 == n { 1.0 } else { a0 };
                let mut v = d * (u[j] - spec.mu_ell);
                if j + 1 < n {
                    v += a1 * (u[j + 1] - spec.mu_ell);
                }
                zeta[j] = v;
            }
            Ok(zeta)
        }
        HyperpriorKind::Se => {
            let f = SeFactors::compute(spec)?;
            let centered = DVector::from_iterator(spec.n, u.iter().map(|v| v - spec.mu_ell));
            let z = f
                .chol
                .clone()
                .solve_lower_triangular(&centered)
                .ok_or(Error::Singular { index: 0 })?;
            Ok(z.iter().copied().collect())
        }
        HyperpriorKind::Const => Err(Error::WrongKind { expected: "ar1 or se", actual: "const" }),
    }
}

/// Back-substitution of the upper-bidiagonal AR(1) factor, `L(φ)(u − μ) = ζ`.
pub(crate) fn ar1_unwhiten(zeta: &[f64], a0: f64, a1: f64, mu_ell: f64) -> Vec<f64> {
    let n = zeta.len();
    let mut u = vec![0.0; n];
    u[n - 1] = zeta[n - 1] + mu_ell;
    for j in (0..n - 1).rev() {
        u[j] = (zeta[j] - a1 * (u[j + 1] - mu_ell)) / a0 + mu_ell;
    }
    u
}

/// Dense triangular multiply `u = R ζ + μ`.
pub(crate) fn se_unwhiten(f: &SeFactors, zeta: &[f64], mu_ell: f64) -> Vec<f64> {
    let n = zeta.len();
    let mut u = vec![mu_ell; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += f.chol[(i, j)] * zeta[j];
        }
        u[i] += acc;
    }
    u
}

/// Log-density `log N(u | μ_ℓ 1, C_φ)`.
pub fn logpdf_u(spec: &HyperpriorSpec, u: &[f64]) -> Result<f64> {
    if u.len() != spec.n {
        return Err(Error::DimensionMismatch { expected: spec.n, actual: u.len() });
    }
    match spec.kind {
        HyperpriorKind::Ar1 => {
            let zeta = whiten(spec, u)?;
            let (a0, _) = spec.ar1_coefficients();
            let logdet_l = (spec.n as f64 - 1.0) * a0.ln();
            let quad: f64 = zeta.iter().map(|v| v * v).sum();
            Ok(-0.5 * spec.n as f64 * LN_2PI + logdet_l - 0.5 * quad)
        }
        HyperpriorKind::Se => {
            let f = SeFactors::compute(spec)?;
            Ok(se_logpdf(&f, u, spec.mu_ell))
        }
        HyperpriorKind::Const => Err(Error::WrongKind { expected: "ar1 or se", actual: "const" }),
    }
}

pub(crate) fn se_logpdf(f: &SeFactors, u: &[f64], mu_ell: f64) -> f64 {
    let n = u.len();
    let centered = DVector::from_iterator(n, u.iter().map(|v| v - mu_ell));
    let w = f
        .chol
        .clone()
        .solve_lower_triangular(&centered)
        .expect("triangular factor has positive diagonal");
    let quad: f64 = w.iter().map(|v| v * v).sum();
    -0.5 * n as f64 * LN_2PI - f.half_logdet - 0.5 * quad
}

/// Single-site log-ratio
/// `log N(u* | μ_ℓ, C_φ) − log N(u | μ_ℓ, C_φ)` where `u*` replaces
/// coordinate `k` with `u_k_new`. Touches only precision row `k` (its
/// immediate neighbours for AR(1)).
pub fn logratio_u_site(spec: &HyperpriorSpec, u: &[f64], k: usize, u_k_new: f64) -> Result<f64> {
    if u.len() != spec.n {
        return Err(Error::DimensionMismatch { expected: spec.n, actual: u.len() });
    }
    assert!(k < spec.n, "site index out of range");
    match spec.kind {
        HyperpriorKind::Ar1 => {
            let old_c = u[k] - spec.mu_ell;
            let new_c = u_k_new - spec.mu_ell;
            let qkk = ar1_precision_entry(spec, k, k);
            let mut cross = 0.0;
            if k > 0 {
                cross += ar1_precision_entry(spec, k, k - 1) * (u[k - 1] - spec.mu_ell);
            }
            if k + 1 < spec.n {
                cross += ar1_precision_entry(spec, k, k + 1) * (u[k + 1] - spec.mu_ell);
            }
            Ok(-0.5 * (qkk * (new_c * new_c - old_c * old_c) + 2.0 * (new_c - old_c) * cross))
        }
        HyperpriorKind::Se => {
            let f = SeFactors::compute(spec)?;
            Ok(se_logratio_site(&f, u, k, u_k_new, spec.mu_ell))
        }
        HyperpriorKind::Const => Err(Error::WrongKind { expected: "ar1 or se", actual: "const" }),
    }
}

pub(crate) fn se_logratio_site(
    f: &SeFactors,
    u: &[f64],
    k: usize,
    u_k_new: f64,
    mu_ell: f64,
) -> f64 {
    let precision = f.precision();
    let old_c = u[k] - mu_ell;
    let new_c = u_k_new - mu_ell;
    let qkk = precision[(k, k)];
    let mut cross = 0.0;
    for (j, uj) in u.iter().enumerate() {
        if j != k {
            cross += precision[(k, j)] * (uj - mu_ell);
        }
    }
    -0.5 * (qkk * (new_c * new_c - old_c * old_c) + 2.0 * (new_c - old_c) * cross)
}

/// Log-ratio of the field prior under a new hyper length-scale,
/// `log N(u | μ_ℓ, C_φ*) − log N(u | μ_ℓ, C_φ)`.
pub fn logratio_lambda(
    spec_new: &HyperpriorSpec,
    spec_old: &HyperpriorSpec,
    u: &[f64],
) -> Result<f64> {
    if !spec_new.same_family(spec_old) {
        return Err(Error::KindMismatch);
    }
    Ok(logpdf_u(spec_new, u)? - logpdf_u(spec_old, u)?)
}

/// Cache-aware unwhitening used by the samplers' inner loops.
pub(crate) fn unwhiten_cached(
    spec: &HyperpriorSpec,
    cache: &SeCache,
    zeta: &[f64],
) -> Result<Vec<f64>> {
    match spec.kind {
        HyperpriorKind::Ar1 => {
            let (a0, a1) = spec.ar1_coefficients();
            Ok(ar1_unwhiten(zeta, a0, a1, spec.mu_ell))
        }
        HyperpriorKind::Se => {
            let f = cache.get(spec)?;
            Ok(se_unwhiten(&f, zeta, spec.mu_ell))
        }
        HyperpriorKind::Const => Err(Error::WrongKind {
            expected: "ar1 or se",
            actual: "const",
        }),
    }
}

/// Cache-aware field log-density used by the samplers' inner loops.
pub(crate) fn logpdf_u_cached(
    spec: &HyperpriorSpec,
    cache: &SeCache,
    u: &[f64],
) -> Result<f64> {
    match spec.kind {
        HyperpriorKind::Ar1 => logpdf_u(spec, u),
        HyperpriorKind::Se => {
            let f = cache.get(spec)?;
            Ok(se_logpdf(&f, u, spec.mu_ell))
        }
        HyperpriorKind::Const => Err(Error::WrongKind {
            expected: "ar1 or se",
            actual: "const",
        }),
    }
}

/// Cache-aware single-site prior ratio used by the samplers' inner loops.
pub(crate) fn logratio_u_site_cached(
    spec: &HyperpriorSpec,
    cache: &SeCache,
    u: &[f64],
    k: usize,
    u_k_new: f64,
) -> Result<f64> {
    match spec.kind {
        HyperpriorKind::Se => {
            let f = cache.get(spec)?;
            Ok(se_logratio_site(&f, u, k, u_k_new, spec.mu_ell))
        }
        _ => logratio_u_site(spec, u, k, u_k_new),
    }
}

/// Prior elicitation from the covariate distances: solves
/// `μ_ℓ ∓ 1.96 τ_ℓ = log α, log β` for the prior mean and magnitude, so the
/// central 95% prior mass of each length-scale lies in `[α, β]`.
pub fn elicit_prior(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && beta > alpha) || !beta.is_finite() {
        return Err(Error::InvalidRange);
    }
    let (la, lb) = (alpha.ln(), beta.ln());
    Ok(((la + lb) / 2.0, (lb - la) / (2.0 * 1.96)))
}
