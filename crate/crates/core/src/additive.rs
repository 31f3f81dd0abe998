//! Two-dimensional additive model: two first-order fields, an optional
//! Kronecker-structured interaction field, a blocked marginal elliptical
//! slice sampler, and Gibbs imputation of unobserved cells.
//!
//! The grid is the tensor product of two extended axes; cell `(j1, j2)` maps
//! to flat index `j1·n2 + j2` (axis 2 fastest), matching the column-major
//! reshape used by the Kronecker identities.

use crate::banded::{sample_from_precision, BandedMatrix};
use crate::error::{Error, Result};
use crate::experiments::{Dataset2d, Grid1d};
use crate::hyperprior::{HyperpriorKind, HyperpriorSpec, SeCache};
use crate::sampler::{
    adaptive_rw_step, ess_slice_step, metropolis_accept, FitSettings, ScalarAdapt,
};
use crate::spde::{self, ObsOperator, SpdeConfig};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Relative tolerance for axis uniformity when building a grid from data.
const AXIS_UNIFORM_RTOL: f64 = 1e-6;

/// What one grid cell contributes: a data row, an in-hull gap to impute, or
/// a domain-extension cell (also imputed, never scored).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Observed(usize),
    Missing,
    Extension,
}

/// Two-dimensional grid bookkeeping: extended axes and the per-cell
/// observation map. Observed, missing and extension cells partition the grid.
#[derive(Debug, Clone)]
pub struct Grid2D {
    pub axis1: Grid1d,
    pub axis2: Grid1d,
    pub cells: Vec<CellKind>,
}

impl Grid2D {
    pub fn n1(&self) -> usize {
        self.axis1.n
    }

    pub fn n2(&self) -> usize {
        self.axis2.n
    }

    pub fn n_cells(&self) -> usize {
        self.axis1.n * self.axis2.n
    }

    #[inline]
    pub fn flat(&self, j1: usize, j2: usize) -> usize {
        j1 * self.axis2.n + j2
    }

    pub fn observed_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellKind::Observed(_)))
            .count()
    }

    /// Builds the extended grid from a complete-grid data set and returns it
    /// with the observed responses in grid scan order.
    pub fn from_dataset(data: &Dataset2d, ext: usize) -> Result<(Self, Vec<f64>)> {
        let axis1 = axis_from_coords(&data.x1)?.extend(ext);
        let axis2 = axis_from_coords(&data.x2)?.extend(ext);
        let (n1, n2) = (axis1.n, axis2.n);
        let mut cells = vec![CellKind::Extension; n1 * n2];
        let mut y_obs = Vec::new();
        for j1 in 0..n1 {
            for j2 in 0..n2 {
                let inside1 = j1 >= ext && j1 < ext + data.n1();
                let inside2 = j2 >= ext && j2 < ext + data.n2();
                if inside1 && inside2 {
                    let cell = (j1 - ext) * data.n2() + (j2 - ext);
                    if data.missing[cell] {
                        cells[j1 * n2 + j2] = CellKind::Missing;
                    } else {
                        cells[j1 * n2 + j2] = CellKind::Observed(y_obs.len());
                        y_obs.push(data.y[cell]);
                    }
                }
            }
        }
        Ok((Grid2D { axis1, axis2, cells }, y_obs))
    }
}

fn axis_from_coords(x: &[f64]) -> Result<Grid1d> {
    if x.len() < 2 {
        return Err(Error::Config("axis needs at least two coordinates".into()));
    }
    let h = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    if !(h > 0.0) {
        return Err(Error::Config("axis coordinates must be increasing".into()));
    }
    for w in x.windows(2) {
        if ((w[1] - w[0]) - h).abs() > AXIS_UNIFORM_RTOL * h {
            return Err(Error::Config(
                "axis coordinates must be uniformly spaced".into(),
            ));
        }
    }
    Ok(Grid1d {
        x0: x[0],
        h,
        n: x.len(),
    })
}

/// Eigendecompositions of the two interaction-axis precisions,
/// `Q₃ = E₃ Λ₃ E₃ᵀ` and `Q₄ = E₄ Λ₄ E₄ᵀ`.
#[derive(Debug, Clone)]
pub struct KroneckerEigen {
    pub e3: DMatrix<f64>,
    pub lam3: DVector<f64>,
    pub e4: DMatrix<f64>,
    pub lam4: DVector<f64>,
}

impl KroneckerEigen {
    pub fn new(q3: &BandedMatrix, q4: &BandedMatrix) -> Result<Self> {
        let (e3, lam3) = symmetric_eigen(q3)?;
        let (e4, lam4) = symmetric_eigen(q4)?;
        Ok(KroneckerEigen { e3, lam3, e4, lam4 })
    }

    pub fn n1(&self) -> usize {
        self.lam3.len()
    }

    pub fn n2(&self) -> usize {
        self.lam4.len()
    }
}

fn symmetric_eigen(q: &BandedMatrix) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(q.to_dense());
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite { index: 0 });
    }
    Ok((eig.eigenvectors, eig.eigenvalues))
}

/// Kronecker matrix-vector product `(E₃ ⊗ E₄) α` through the reshape
/// identity `vec(E₄ · reshape(α, n₂, n₁) · E₃ᵀ)`, at cost
/// `O(n₁ n₂ (n₁ + n₂))`.
pub fn kron_mv(e3: &DMatrix<f64>, e4: &DMatrix<f64>, alpha: &[f64]) -> Result<Vec<f64>> {
    let (n1, n2) = (e3.ncols(), e4.ncols());
    if alpha.len() != n1 * n2 || e3.nrows() != n1 || e4.nrows() != n2 {
        return Err(Error::DimensionMismatch {
            expected: n1 * n2,
            actual: alpha.len(),
        });
    }
    let m = DMatrix::from_column_slice(n2, n1, alpha);
    let out = e4 * m * e3.transpose();
    Ok(out.as_slice().to_vec())
}

/// `(E₃ᵀ ⊗ E₄ᵀ) α`, the transpose action of [`kron_mv`].
pub fn kron_mv_transpose(e3: &DMatrix<f64>, e4: &DMatrix<f64>, alpha: &[f64]) -> Result<Vec<f64>> {
    let (n1, n2) = (e3.ncols(), e4.ncols());
    if alpha.len() != n1 * n2 {
        return Err(Error::DimensionMismatch {
            expected: n1 * n2,
            actual: alpha.len(),
        });
    }
    let m = DMatrix::from_column_slice(n2, n1, alpha);
    let out = e4.transpose() * m * e3;
    Ok(out.as_slice().to_vec())
}

/// Exact draw from the interaction-field conditional
/// `N(μ, Σ)` with `Σ = (Q₃⊗Q₄ + σ⁻²I)⁻¹` and `μ = σ⁻² Σ ỹ`, using only
/// eigenbasis rotations and diagonal scalings. A zero `noise` vector returns
/// exactly the mean.
pub fn z3_posterior_draw(
    eig: &KroneckerEigen,
    sigma2: f64,
    y_resid: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::NotPositiveDefinite { index: 0 });
    }
    let (n1, n2) = (eig.n1(), eig.n2());
    if noise.len() != n1 * n2 {
        return Err(Error::DimensionMismatch {
            expected: n1 * n2,
            actual: noise.len(),
        });
    }
    let inv_s2 = 1.0 / sigma2;
    let mut alpha = kron_mv_transpose(&eig.e3, &eig.e4, y_resid)?;
    let mut scaled_noise = vec![0.0; n1 * n2];
    for j1 in 0..n1 {
        for j2 in 0..n2 {
            let idx = j1 * n2 + j2;
            let d = eig.lam3[j1] * eig.lam4[j2] + inv_s2;
            alpha[idx] *= inv_s2 / d;
            scaled_noise[idx] = noise[idx] / d.sqrt();
        }
    }
    let mean = kron_mv(&eig.e3, &eig.e4, &alpha)?;
    let pert = kron_mv(&eig.e3, &eig.e4, &scaled_noise)?;
    Ok(mean.iter().zip(&pert).map(|(m, p)| m + p).collect())
}

/// Marginal log-likelihood of one first-order block,
/// `log N(ỹ | 0, A_r Q_r⁻¹ A_rᵀ + σ² I)`; the determinant is reduced to the
/// banded factors so no m×m matrix is ever formed.
pub fn block_marginal_loglik_1d(
    u_r: &[f64],
    sigma2: f64,
    a_r: &ObsOperator,
    y_resid: &[f64],
    cfg_r: &SpdeConfig,
) -> Result<f64> {
    let l = spde::factor_from_logs(u_r, cfg_r)?;
    spde::marginal_loglik_with_factor(&l, sigma2, a_r, y_resid)
}

/// Marginal log-likelihood of the interaction block,
/// `log N(ỹ | 0, Q₃⁻¹ ⊗ Q₄⁻¹ + σ² I)`, via the eigendecomposition: the
/// log-determinant is `Σ log(1/(λ₃λ₄) + σ²)` and the quadratic term uses the
/// Kronecker pipeline.
pub fn block_marginal_loglik_interaction(
    eig: &KroneckerEigen,
    sigma2: f64,
    y_resid: &[f64],
) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::NotPositiveDefinite { index: 0 });
    }
    let (n1, n2) = (eig.n1(), eig.n2());
    let n = n1 * n2;
    let alpha = kron_mv_transpose(&eig.e3, &eig.e4, y_resid)?;
    let mut logdet = 0.0;
    let mut quad = 0.0;
    for j1 in 0..n1 {
        for j2 in 0..n2 {
            let d = 1.0 / (eig.lam3[j1] * eig.lam4[j2]) + sigma2;
            logdet += d.ln();
            let a = alpha[j1 * n2 + j2];
            quad += a * a / d;
        }
    }
    Ok(-0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * quad)
}

/// Gibbs imputation: every unobserved cell (missing or extension) is redrawn
/// independently around the current fitted surface.
pub fn impute_missing(
    y_aug: &mut [f64],
    fitted: &[f64],
    grid: &Grid2D,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) {
    let sd = sigma2.sqrt();
    for (c, kind) in grid.cells.iter().enumerate() {
        if !matches!(kind, CellKind::Observed(_)) {
            y_aug[c] = fitted[c] + sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Translation-group move along the shared constant direction of the two
/// first-order fields: draws the shift from its exact Gaussian conditional
/// under the field priors and applies `z1 ← z1 − c`, `z2 ← z2 + c`.
///
/// The fitted surface is unchanged (each cell gains `−c + c`), and sampling
/// the shift from its conditional keeps the posterior invariant, unlike hard
/// mean-centering. Returns the applied shift.
pub fn centering_shift(
    q1: &BandedMatrix,
    q2: &BandedMatrix,
    z1: &mut [f64],
    z2: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let q1_ones = q1.matvec(&vec![1.0; z1.len()]);
    let q2_ones = q2.matvec(&vec![1.0; z2.len()]);
    let prec: f64 = q1_ones.iter().sum::<f64>() + q2_ones.iter().sum::<f64>();
    if !(prec > 0.0) {
        return 0.0;
    }
    let lin: f64 = z1.iter().zip(&q1_ones).map(|(z, q)| z * q).sum::<f64>()
        - z2.iter().zip(&q2_ones).map(|(z, q)| z * q).sum::<f64>();
    let c = lin / prec + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
    for v in z1.iter_mut() {
        *v -= c;
    }
    for v in z2.iter_mut() {
        *v += c;
    }
    c
}

/// The additive two-dimensional model: grid, observed responses, per-axis
/// discretisations and the four hyperprior templates (the last two are used
/// only when the interaction term is enabled).
#[derive(Debug, Clone)]
pub struct Model2d {
    pub grid: Grid2D,
    pub y_obs: Vec<f64>,
    pub spde1: SpdeConfig,
    pub spde2: SpdeConfig,
    pub hyper: [HyperpriorSpec; 4],
    pub interaction: bool,
}

impl Model2d {
    /// Convenience constructor with one hyperprior kind shared by all four
    /// length-scale processes.
    pub fn new(
        grid: Grid2D,
        y_obs: Vec<f64>,
        kind: HyperpriorKind,
        lambda0: f64,
        tau_ell: f64,
        mu_ell: f64,
        interaction: bool,
    ) -> Result<Self> {
        let (n1, n2) = (grid.n1(), grid.n2());
        let spde1 = SpdeConfig::new(n1, grid.axis1.h, 0)?;
        let spde2 = SpdeConfig::new(n2, grid.axis2.h, 0)?;
        let (h1, h2) = (grid.axis1.h, grid.axis2.h);
        let hyper = [
            HyperpriorSpec::new(kind, lambda0, tau_ell, mu_ell, h1, n1)?,
            HyperpriorSpec::new(kind, lambda0, tau_ell, mu_ell, h2, n2)?,
            HyperpriorSpec::new(kind, lambda0, tau_ell, mu_ell, h1, n1)?,
            HyperpriorSpec::new(kind, lambda0, tau_ell, mu_ell, h2, n2)?,
        ];
        Ok(Model2d {
            grid,
            y_obs,
            spde1,
            spde2,
            hyper,
            interaction,
        })
    }
}

/// Full state of the blocked sampler.
#[derive(Debug, Clone)]
pub struct AdditiveState {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// Interaction field on the full grid; empty when disabled.
    pub z3: Vec<f64>,
    pub zeta: [Vec<f64>; 4],
    pub u: [Vec<f64>; 4],
    pub log_lambda: [f64; 4],
    pub log_sigma2: f64,
    /// Responses on the full grid, with imputed values at unobserved cells.
    pub y_aug: Vec<f64>,
}

/// Thinned samples of the blocked sampler, including the fitted surface
/// (the identified quantity) per kept draw.
#[derive(Debug, Clone, Default)]
pub struct Trace2d {
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
    pub fitted: Vec<Vec<f64>>,
    pub u: [Vec<Vec<f64>>; 4],
    pub zeta: [Vec<Vec<f64>>; 4],
    pub log_lambda: Vec<[f64; 4]>,
    pub log_sigma2: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub burned_secs: f64,
    pub sampling_secs: f64,
}

impl Trace2d {
    pub fn kept(&self) -> usize {
        self.log_sigma2.len()
    }

    /// Interaction-field sample `t`, reconstructed as fitted − z1 − z2.
    pub fn z3_row(&self, t: usize, grid: &Grid2D) -> Vec<f64> {
        let (n1, n2) = (grid.n1(), grid.n2());
        let mut out = vec![0.0; n1 * n2];
        for j1 in 0..n1 {
            for j2 in 0..n2 {
                let c = j1 * n2 + j2;
                out[c] = self.fitted[t][c] - self.z1[t][j1] - self.z2[t][j2];
            }
        }
        out
    }
}

struct BlockChain<'m> {
    model: &'m Model2d,
    set: &'m FitSettings,
    st: AdditiveState,
    a1: ObsOperator,
    a2: ObsOperator,
    fitted: Vec<f64>,
    eig: Option<KroneckerEigen>,
    se: SeCache,
    s_sigma: ScalarAdapt,
    s_lambda: [ScalarAdapt; 4],
    adapting: bool,
}

fn block_marg(
    lik_off: bool,
    u: &[f64],
    sigma2: f64,
    a: &ObsOperator,
    resid: &[f64],
    cfg: &SpdeConfig,
) -> f64 {
    if lik_off {
        0.0
    } else {
        block_marginal_loglik_1d(u, sigma2, a, resid, cfg).unwrap_or(f64::NEG_INFINITY)
    }
}

impl<'m> BlockChain<'m> {
    fn build(model: &'m Model2d, set: &'m FitSettings) -> Result<Self> {
        let grid = &model.grid;
        let (n1, n2) = (grid.n1(), grid.n2());
        if model.y_obs.len() != grid.observed_count() {
            return Err(Error::DimensionMismatch {
                expected: grid.observed_count(),
                actual: model.y_obs.len(),
            });
        }
        // cell-to-axis selection operators over the full grid
        let mut a1 = ObsOperator::new(n1);
        let mut a2 = ObsOperator::new(n2);
        for j1 in 0..n1 {
            for _ in 0..n2 {
                a1.push_node(j1);
            }
        }
        for _ in 0..n1 {
            for j2 in 0..n2 {
                a2.push_node(j2);
            }
        }

        let log_lambda0 = set.init_log_lambda.unwrap_or(set.log_lambda_prior.mean);
        let obs_mean = if model.y_obs.is_empty() {
            0.0
        } else {
            model.y_obs.iter().sum::<f64>() / model.y_obs.len() as f64
        };
        let mut y_aug = vec![obs_mean; n1 * n2];
        for (c, kind) in grid.cells.iter().enumerate() {
            if let CellKind::Observed(row) = kind {
                y_aug[c] = model.y_obs[*row];
            }
        }
        let log_sigma2 = set.init_log_sigma2.unwrap_or_else(|| {
            let diffs: Vec<f64> = model.y_obs.windows(2).map(|w| w[1] - w[0]).collect();
            if diffs.len() < 2 {
                return set.log_sigma2_prior.mean;
            }
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>()
                / (diffs.len() as f64 - 1.0);
            if var > 0.0 {
                (var / 2.0).ln()
            } else {
                set.log_sigma2_prior.mean
            }
        });

        let field0 = |spec: &HyperpriorSpec, n: usize, on: bool| -> Vec<f64> {
            if !on {
                return Vec::new();
            }
            match spec.kind {
                HyperpriorKind::Const => vec![log_lambda0; n],
                _ => vec![spec.mu_ell; n],
            }
        };
        let zeta0 = |spec: &HyperpriorSpec, n: usize, on: bool| -> Vec<f64> {
            if !on || spec.kind == HyperpriorKind::Const {
                return Vec::new();
            }
            vec![0.0; n]
        };
        let inter = model.interaction;
        let st = AdditiveState {
            z1: vec![0.0; n1],
            z2: vec![0.0; n2],
            z3: if inter { vec![0.0; n1 * n2] } else { Vec::new() },
            zeta: [
                zeta0(&model.hyper[0], n1, true),
                zeta0(&model.hyper[1], n2, true),
                zeta0(&model.hyper[2], n1, inter),
                zeta0(&model.hyper[3], n2, inter),
            ],
            u: [
                field0(&model.hyper[0], n1, true),
                field0(&model.hyper[1], n2, true),
                field0(&model.hyper[2], n1, inter),
                field0(&model.hyper[3], n2, inter),
            ],
            log_lambda: [log_lambda0; 4],
            log_sigma2,
            y_aug,
        };
        let mut chain = BlockChain {
            model,
            set,
            st,
            a1,
            a2,
            fitted: vec![0.0; n1 * n2],
            eig: None,
            se: SeCache::new(),
            s_sigma: ScalarAdapt::new(set.init_scalar_scale),
            s_lambda: std::array::from_fn(|_| ScalarAdapt::new(set.init_scalar_scale)),
            adapting: true,
        };
        if inter {
            chain.eig = Some(KroneckerEigen::new(
                &spde::factor_from_logs(&chain.st.u[2], &model.spde1)?.normal_form(),
                &spde::factor_from_logs(&chain.st.u[3], &model.spde2)?.normal_form(),
            )?);
        }
        chain.refresh_fitted();
        Ok(chain)
    }

    fn refresh_fitted(&mut self) {
        let (n1, n2) = (self.model.grid.n1(), self.model.grid.n2());
        for j1 in 0..n1 {
            for j2 in 0..n2 {
                let c = j1 * n2 + j2;
                let mut v = self.st.z1[j1] + self.st.z2[j2];
                if self.model.interaction {
                    v += self.st.z3[c];
                }
                self.fitted[c] = v;
            }
        }
    }

    fn sigma2_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = self.set.log_sigma2_prior;
        let m = self.fitted.len() as f64;
        let ssr: f64 = self
            .st
            .y_aug
            .iter()
            .zip(&self.fitted)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        let lik_off = self.set.likelihood_off;
        let loglik = |ls: f64| {
            if lik_off {
                0.0
            } else {
                -0.5 * m * (LN_2PI + ls) - 0.5 * ssr / ls.exp()
            }
        };
        let cur = loglik(self.st.log_sigma2) + prior.logpdf(self.st.log_sigma2);
        let adapting = self.adapting;
        let out = adaptive_rw_step(
            self.st.log_sigma2,
            cur,
            |ls| loglik(ls) + prior.logpdf(ls),
            &mut self.s_sigma,
            adapting,
            rng,
        )?;
        self.st.log_sigma2 = out.x;
        Ok(())
    }

    /// Residual against every component except block `r` (1, 2 or 3).
    fn residual_for(&self, r: usize) -> Vec<f64> {
        let (n1, n2) = (self.model.grid.n1(), self.model.grid.n2());
        let mut out = vec![0.0; n1 * n2];
        for j1 in 0..n1 {
            for j2 in 0..n2 {
                let c = j1 * n2 + j2;
                let mut v = self.st.y_aug[c];
                if r != 1 {
                    v -= self.st.z1[j1];
                }
                if r != 2 {
                    v -= self.st.z2[j2];
                }
                if self.model.interaction && r != 3 {
                    v -= self.st.z3[c];
                }
                out[c] = v;
            }
        }
        out
    }

    fn first_order_block(&mut self, r: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let idx = r - 1;
        let cfg = if r == 1 { &self.model.spde1 } else { &self.model.spde2 };
        let a = if r == 1 { &self.a1 } else { &self.a2 };
        let spec = &self.model.hyper[idx];
        let sigma2 = self.st.log_sigma2.exp();
        let resid = self.residual_for(r);
        let lik_off = self.set.likelihood_off;

        // elliptical slice move on the whitened length-scale field
        if self.set.update_u && spec.kind != HyperpriorKind::Const {
            let spec_now = spec.with_lambda(self.st.log_lambda[idx].exp());
            let zeta = self.st.zeta[idx].clone();
            let cur = block_marg(lik_off, &self.st.u[idx], sigma2, a, &resid, cfg);
            let se = &self.se;
            let out = ess_slice_step(
                &zeta,
                cur,
                |prop| {
                    let u = crate::hyperprior::unwhiten_cached(&spec_now, se, prop)?;
                    let ll = block_marg(lik_off, &u, sigma2, a, &resid, cfg);
                    Ok((ll, u))
                },
                rng,
            )?;
            self.st.zeta[idx] = out.v;
            self.st.u[idx] = out.payload;
        }

        // random walk on the hyper length-scale
        if self.set.update_lambda {
            let prior = self.set.log_lambda_prior;
            let cur_ll = self.st.log_lambda[idx];
            let proposal = cur_ll + self.s_lambda[idx].scale * rng.sample::<f64, _>(StandardNormal);
            let u_new =
                crate::sampler::field_for_lambda(spec, &self.se, &self.st.zeta[idx], proposal)?;
            let ratio = block_marg(lik_off, &u_new, sigma2, a, &resid, cfg)
                - block_marg(lik_off, &self.st.u[idx], sigma2, a, &resid, cfg)
                + prior.logpdf(proposal)
                - prior.logpdf(cur_ll);
            let accepted = metropolis_accept(rng, ratio);
            if accepted {
                self.st.log_lambda[idx] = proposal;
                self.st.u[idx] = u_new;
            }
            let adapting = self.adapting;
            self.s_lambda[idx].record(accepted, adapting);
        }

        // exact conditional draw of the block field
        let n_r = cfg.n;
        let l = spde::factor_from_logs(&self.st.u[idx], cfg)?;
        let mut p = l.normal_form();
        let mut b = vec![0.0; n_r];
        if !lik_off {
            a.add_gram_scaled(1.0 / sigma2, &mut p);
            b = a.matvec_transpose(&resid);
            for v in &mut b {
                *v /= sigma2;
            }
        }
        let noise: Vec<f64> = (0..n_r).map(|_| rng.sample(StandardNormal)).collect();
        let z = sample_from_precision(&p, &b, &noise)?;
        if r == 1 {
            self.st.z1 = z;
        } else {
            self.st.z2 = z;
        }
        self.refresh_fitted();
        Ok(())
    }

    fn centering_move(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let q1 = spde::factor_from_logs(&self.st.u[0], &self.model.spde1)?.normal_form();
        let q2 = spde::factor_from_logs(&self.st.u[1], &self.model.spde2)?.normal_form();
        centering_shift(&q1, &q2, &mut self.st.z1, &mut self.st.z2, rng);
        self.refresh_fitted();
        Ok(())
    }

    fn interaction_block(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (n1, n2) = (self.model.grid.n1(), self.model.grid.n2());
        let sigma2 = self.st.log_sigma2.exp();
        let resid = self.residual_for(3);
        let lik_off = self.set.likelihood_off;
        let marg = |eig: &KroneckerEigen| -> f64 {
            if lik_off {
                0.0
            } else {
                block_marginal_loglik_interaction(eig, sigma2, &resid)
                    .unwrap_or(f64::NEG_INFINITY)
            }
        };
        let spde1 = &self.model.spde1;
        let spde2 = &self.model.spde2;

        // joint elliptical slice move on the stacked whitened fields
        let kind3 = self.model.hyper[2].kind;
        if self.set.update_u && kind3 != HyperpriorKind::Const {
            let spec3 = self.model.hyper[2].with_lambda(self.st.log_lambda[2].exp());
            let spec4 = self.model.hyper[3].with_lambda(self.st.log_lambda[3].exp());
            let mut stacked = self.st.zeta[2].clone();
            stacked.extend_from_slice(&self.st.zeta[3]);
            let cur = marg(self.eig.as_ref().expect("interaction eigen cache"));
            let se = &self.se;
            let out = ess_slice_step(
                &stacked,
                cur,
                |prop| {
                    let (p3, p4) = prop.split_at(n1);
                    let u3 = crate::hyperprior::unwhiten_cached(&spec3, se, p3)?;
                    let u4 = crate::hyperprior::unwhiten_cached(&spec4, se, p4)?;
                    let eig = KroneckerEigen::new(
                        &spde::factor_from_logs(&u3, spde1)?.normal_form(),
                        &spde::factor_from_logs(&u4, spde2)?.normal_form(),
                    )?;
                    let ll = marg(&eig);
                    Ok((ll, (u3, u4, eig)))
                },
                rng,
            )?;
            let (u3, u4, eig) = out.payload;
            self.st.zeta[2] = out.v[..n1].to_vec();
            self.st.zeta[3] = out.v[n1..].to_vec();
            self.st.u[2] = u3;
            self.st.u[3] = u4;
            self.eig = Some(eig);
        }

        // sequential random walks on the two interaction hyper length-scales
        if self.set.update_lambda {
            for s in [2usize, 3] {
                let prior = self.set.log_lambda_prior;
                let spec = &self.model.hyper[s];
                let cur_ll = self.st.log_lambda[s];
                let proposal =
                    cur_ll + self.s_lambda[s].scale * rng.sample::<f64, _>(StandardNormal);
                let u_new =
                    crate::sampler::field_for_lambda(spec, &self.se, &self.st.zeta[s], proposal)?;
                let eig_new = if s == 2 {
                    KroneckerEigen::new(
                        &spde::factor_from_logs(&u_new, spde1)?.normal_form(),
                        &spde::factor_from_logs(&self.st.u[3], spde2)?.normal_form(),
                    )?
                } else {
                    KroneckerEigen::new(
                        &spde::factor_from_logs(&self.st.u[2], spde1)?.normal_form(),
                        &spde::factor_from_logs(&u_new, spde2)?.normal_form(),
                    )?
                };
                let ratio = marg(&eig_new) - marg(self.eig.as_ref().expect("eigen cache"))
                    + prior.logpdf(proposal)
                    - prior.logpdf(cur_ll);
                let accepted = metropolis_accept(rng, ratio);
                if accepted {
                    self.st.log_lambda[s] = proposal;
                    self.st.u[s] = u_new;
                    self.eig = Some(eig_new);
                }
                let adapting = self.adapting;
                self.s_lambda[s].record(accepted, adapting);
            }
        }

        // exact conditional draw of the interaction field
        let noise: Vec<f64> = (0..n1 * n2).map(|_| rng.sample(StandardNormal)).collect();
        let eig = self.eig.as_ref().expect("eigen cache");
        self.st.z3 = if lik_off {
            // prior draw: mean zero, covariance (Q₃⊗Q₄)⁻¹
            let mut w = vec![0.0; n1 * n2];
            for j1 in 0..n1 {
                for j2 in 0..n2 {
                    let idx = j1 * n2 + j2;
                    w[idx] = noise[idx] / (eig.lam3[j1] * eig.lam4[j2]).sqrt();
                }
            }
            kron_mv(&eig.e3, &eig.e4, &w)?
        } else {
            z3_posterior_draw(eig, sigma2, &resid, &noise)?
        };
        self.refresh_fitted();
        Ok(())
    }

    fn sweep(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.set.update_sigma2 {
            self.sigma2_step(rng)?;
        }
        self.first_order_block(1, rng)?;
        self.first_order_block(2, rng)?;
        self.centering_move(rng)?;
        if self.model.interaction {
            self.interaction_block(rng)?;
        }
        let sigma2 = self.st.log_sigma2.exp();
        let fitted = self.fitted.clone();
        impute_missing(&mut self.st.y_aug, &fitted, &self.model.grid, sigma2, rng);
        Ok(())
    }
}

/// Runs the blocked marginal sampler on the additive model. Deterministic
/// for a fixed seed.
pub fn run_chain_2d(model: &Model2d, set: &FitSettings) -> Result<Trace2d> {
    if set.iterations == 0 || set.thin == 0 || !(0.0..1.0).contains(&set.burnin_frac) {
        return Err(Error::Config("bad run-length settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed);
    let mut chain = BlockChain::build(model, set)?;
    let burnin = set.burnin();
    if burnin == 0 {
        chain.adapting = false;
    }
    let start = Instant::now();
    let mut burned_secs = 0.0;
    let mut trace = Trace2d {
        iterations: set.iterations,
        burnin,
        thin: set.thin,
        ..Trace2d::default()
    };
    for t in 1..=set.iterations {
        chain.sweep(&mut rng)?;
        if t == burnin {
            chain.adapting = false;
            burned_secs = start.elapsed().as_secs_f64();
        }
        if t > burnin && (t - burnin) % set.thin == 0 {
            trace.z1.push(chain.st.z1.clone());
            trace.z2.push(chain.st.z2.clone());
            trace.fitted.push(chain.fitted.clone());
            for s in 0..4 {
                trace.u[s].push(chain.st.u[s].clone());
                trace.zeta[s].push(chain.st.zeta[s].clone());
            }
            trace.log_lambda.push(chain.st.log_lambda);
            trace.log_sigma2.push(chain.st.log_sigma2);
            trace.timestamps.push(start.elapsed().as_secs_f64());
        }
    }
    trace.burned_secs = burned_secs;
    trace.sampling_secs = start.elapsed().as_secs_f64() - burned_secs;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_spd_banded(n: usize, p: usize, rng: &mut ChaCha8Rng) -> BandedMatrix {
        let mut m = BandedMatrix::zeros(n, p, p);
        for i in 0..n {
            for j in i..(i + p + 1).min(n) {
                if i == j {
                    continue;
                }
                let v: f64 = rng.sample(StandardNormal);
                m.set(i, j, v).unwrap();
                m.set(j, i, v).unwrap();
            }
        }
        for i in 0..n {
            let row_sum: f64 = (0..n).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
            m.set(i, i, row_sum + 1.0 + rng.random::<f64>()).unwrap();
        }
        m
    }

    #[test]
    fn eigen_reconstructs_the_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q3 = random_spd_banded(6, 2, &mut rng);
        let q4 = random_spd_banded(5, 2, &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let recon3 = &eig.e3 * DMatrix::from_diagonal(&eig.lam3) * eig.e3.transpose();
        let scale = q3.to_dense().amax();
        for i in 0..6 {
            for j in 0..6 {
                assert!((recon3[(i, j)] - q3.get(i, j)).abs() <= 1e-8 * scale);
            }
        }
        assert!(eig.lam3.iter().all(|&v| v > 0.0));
        assert!(eig.lam4.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn kron_mv_identity_and_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // identity factors leave the vector unchanged
        let i3 = DMatrix::<f64>::identity(3, 3);
        let i4 = DMatrix::<f64>::identity(4, 4);
        let alpha: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        assert_eq!(kron_mv(&i3, &i4, &alpha).unwrap(), alpha);

        // random orthogonal pair against the dense Kronecker product
        let q3 = random_spd_banded(2, 1, &mut rng);
        let q4 = random_spd_banded(2, 1, &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let alpha: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let got = kron_mv(&eig.e3, &eig.e4, &alpha).unwrap();
        let dense = eig.e3.kronecker(&eig.e4) * DVector::from_column_slice(&alpha);
        for i in 0..4 {
            assert_abs_diff_eq!(got[i], dense[i], epsilon = 1e-10);
        }

        // orthogonality: transpose pair round-trips
        let back = kron_mv_transpose(&eig.e3, &eig.e4, &got).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(back[i], alpha[i], epsilon = 1e-9);
        }

        assert!(kron_mv(&i3, &i4, &[0.0; 5]).is_err());
    }

    #[test]
    fn z3_draw_scalar_and_zero_noise_mean() {
        // 1×1 case: Q = 1, σ² = 1, ỹ = 2 gives mean (1/(1+1))·2 = 1
        let one = BandedMatrix::identity(1);
        let eig = KroneckerEigen::new(&one, &one).unwrap();
        let z = z3_posterior_draw(&eig, 1.0, &[2.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-12);

        // zero noise returns the dense-computed mean
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q3 = random_spd_banded(3, 1, &mut rng);
        let q4 = random_spd_banded(3, 1, &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let y: Vec<f64> = (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma2 = 0.3;
        let z = z3_posterior_draw(&eig, sigma2, &y, &[0.0; 9]).unwrap();
        let p = q3.to_dense().kronecker(&q4.to_dense()) + DMatrix::identity(9, 9) / sigma2;
        let mu = p
            .lu()
            .solve(&(DVector::from_column_slice(&y) / sigma2))
            .unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(z[i], mu[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn z3_draw_empirical_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q3 = random_spd_banded(2, 1, &mut rng);
        let q4 = random_spd_banded(2, 1, &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let sigma2 = 0.5;
        let y = [0.4, -0.2, 1.0, 0.1];
        let p = q3.to_dense().kronecker(&q4.to_dense()) + DMatrix::identity(4, 4) / sigma2;
        let cov = p.try_inverse().unwrap();
        let n_draws = 100_000;
        let mut sums = [0.0f64; 4];
        let mut prods = [[0.0f64; 4]; 4];
        for _ in 0..n_draws {
            let noise: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let z = z3_posterior_draw(&eig, sigma2, &y, &noise).unwrap();
            for i in 0..4 {
                sums[i] += z[i];
                for j in 0..4 {
                    prods[i][j] += z[i] * z[j];
                }
            }
        }
        let nf = n_draws as f64;
        for i in 0..4 {
            for j in 0..4 {
                let emp = prods[i][j] / nf - (sums[i] / nf) * (sums[j] / nf);
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)] * cov[(i, j)]) / nf).sqrt();
                assert!(
                    (emp - cov[(i, j)]).abs() <= 3.5 * se,
                    "cov[{i}{j}]: {emp} vs {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn interaction_marginal_scalar_and_dense_oracle() {
        // Λ₃ = Λ₄ = (1), σ² = 1, ỹ = 0: −½ log 2π − ½ log 2
        let one = BandedMatrix::identity(1);
        let eig = KroneckerEigen::new(&one, &one).unwrap();
        let got = block_marginal_loglik_interaction(&eig, 1.0, &[0.0]).unwrap();
        assert_abs_diff_eq!(got, -0.5 * LN_2PI - 0.5 * 2.0f64.ln(), epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q3 = random_spd_banded(3, 1, &mut rng);
        let q4 = random_spd_banded(3, 1, &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let y: Vec<f64> = (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma2 = 0.7;
        let got = block_marginal_loglik_interaction(&eig, sigma2, &y).unwrap();
        let cov = q3
            .to_dense()
            .try_inverse()
            .unwrap()
            .kronecker(&q4.to_dense().try_inverse().unwrap())
            + DMatrix::identity(9, 9) * sigma2;
        let yv = DVector::from_column_slice(&y);
        let lu = cov.clone().lu();
        let logdet = lu.determinant().ln();
        let quad = (yv.transpose() * lu.solve(&yv).unwrap())[(0, 0)];
        let want = -0.5 * 9.0 * LN_2PI - 0.5 * logdet - 0.5 * quad;
        assert_abs_diff_eq!(got, want, epsilon = 1e-6);

        // scaling the residual by c changes only the quadratic term by c²
        let yc: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let got_c = block_marginal_loglik_interaction(&eig, sigma2, &yc).unwrap();
        assert_abs_diff_eq!(got_c - got, -0.5 * 3.0 * quad, epsilon = 1e-8);
    }

    #[test]
    fn block_marginal_1d_zero_operator_gives_iid_loglik() {
        // a zero observation operator leaves pure i.i.d. Gaussian scoring
        let cfg = SpdeConfig::new(6, 0.5, 0).unwrap();
        let u = vec![0.0; 6];
        let mut a = ObsOperator::new(6);
        for _ in 0..4 {
            a.push_empty();
        }
        let y = [0.3, -1.0, 0.2, 0.8];
        let sigma2 = 0.6;
        let got = block_marginal_loglik_1d(&u, sigma2, &a, &y, &cfg).unwrap();
        let want: f64 = y
            .iter()
            .map(|v| -0.5 * (LN_2PI + sigma2.ln()) - 0.5 * v * v / sigma2)
            .sum();
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn impute_fills_only_unobserved_cells() {
        let axis = Grid1d {
            x0: 0.0,
            h: 1.0,
            n: 2,
        };
        let grid = Grid2D {
            axis1: axis,
            axis2: axis,
            cells: vec![
                CellKind::Observed(0),
                CellKind::Missing,
                CellKind::Extension,
                CellKind::Observed(1),
            ],
        };
        let fitted = [1.0, 2.0, 3.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);

        // empty missing set: nothing changes
        let full = Grid2D {
            cells: vec![
                CellKind::Observed(0),
                CellKind::Observed(1),
                CellKind::Observed(2),
                CellKind::Observed(3),
            ],
            ..grid.clone()
        };
        let mut y = [9.0, 9.0, 9.0, 9.0];
        impute_missing(&mut y, &fitted, &full, 0.5, &mut rng);
        assert_eq!(y, [9.0, 9.0, 9.0, 9.0]);

        // vanishing noise: imputed values equal the additive mean
        let mut y = [9.0, 9.0, 9.0, 9.0];
        impute_missing(&mut y, &fitted, &grid, 1e-30, &mut rng);
        assert_eq!(y[0], 9.0);
        assert_abs_diff_eq!(y[1], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(y[2], 3.0, epsilon = 1e-10);
        assert_eq!(y[3], 9.0);

        // long-run mean of an imputed cell equals the fitted mean
        let mut sum = 0.0;
        let n_draws = 100_000;
        for _ in 0..n_draws {
            let mut y = [0.0; 4];
            impute_missing(&mut y, &fitted, &grid, 0.25, &mut rng);
            sum += y[1];
        }
        let se = 0.5 / (n_draws as f64).sqrt();
        assert!((sum / n_draws as f64 - 2.0).abs() <= 3.0 * se);
    }

    #[test]
    fn centering_preserves_the_fitted_sum_and_samples_the_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q1 = random_spd_banded(5, 2, &mut rng);
        let q2 = random_spd_banded(4, 2, &mut rng);
        let z1_orig: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z2_orig: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let mut z1 = z1_orig.clone();
        let mut z2 = z2_orig.clone();
        let c = centering_shift(&q1, &q2, &mut z1, &mut z2, &mut rng);
        for i in 0..5 {
            for j in 0..4 {
                let before = z1_orig[i] + z2_orig[j];
                let after = z1[i] + z2[j];
                assert_abs_diff_eq!(before, after, epsilon = 1e-12);
            }
        }
        assert!(c.is_finite());

        // repeated shifts from the zero state sample the exact conditional:
        // c ~ N(0, 1/ρ) with ρ = 1ᵀQ₁1 + 1ᵀQ₂1
        let ones1 = vec![1.0; 5];
        let ones2 = vec![1.0; 4];
        let rho: f64 =
            q1.matvec(&ones1).iter().sum::<f64>() + q2.matvec(&ones2).iter().sum::<f64>();
        let n_draws = 50_000;
        let mut sq = 0.0;
        for _ in 0..n_draws {
            let mut z1 = vec![0.0; 5];
            let mut z2 = vec![0.0; 4];
            let c = centering_shift(&q1, &q2, &mut z1, &mut z2, &mut rng);
            sq += c * c;
        }
        let var = sq / n_draws as f64;
        let want = 1.0 / rho;
        let se = want * (2.0 / n_draws as f64).sqrt();
        assert!((var - want).abs() <= 3.5 * se, "{var} vs {want}");
    }
}
