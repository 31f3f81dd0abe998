//! Metropolis-within-Gibbs: scalar random walks for the noise variance and
//! hyper length-scale, an exact Gibbs draw of the latent field, and
//! single-site Metropolis updates of the log length-scale field with the
//! sparse prior-ratio shortcuts.

use super::{
    adaptive_rw_step, field_for_lambda, initial_state, metropolis_accept, Chain1d, ChainState,
    FitSettings, Model1d, LN_2PI,
};
use crate::banded::{sample_from_precision, BandedMatrix};
use crate::error::Result;
use crate::hyperprior::{self, HyperpriorKind, SeCache};
use crate::spde;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(super) struct MwgChain<'m> {
    model: &'m Model1d,
    set: &'m FitSettings,
    st: ChainState,
    /// Operator factor at the current length-scale field.
    l: BandedMatrix,
    logdet_l: f64,
    /// Cached `(L z)` vector; entry `k` depends only on field row `k`.
    lz: Vec<f64>,
    fitted: Vec<f64>,
    ssr: f64,
    se: SeCache,
    decisions: usize,
}

impl<'m> MwgChain<'m> {
    pub(super) fn build(model: &'m Model1d, set: &'m FitSettings) -> Result<Self> {
        let mut st = initial_state(model, set)?;
        // this scheme samples u directly; it carries no whitened coordinates
        st.zeta = Vec::new();
        let l = spde::factor_from_logs(&st.u.u, &model.spde)?;
        let logdet_l = l.tridiagonal_logdet()?;
        let lz = l.matvec(&st.z);
        let fitted = model.a.matvec(&st.z);
        let ssr = ssr_of(&model.y, &fitted);
        Ok(MwgChain {
            model,
            set,
            st,
            l,
            logdet_l,
            lz,
            fitted,
            ssr,
            se: SeCache::new(),
            decisions: 0,
        })
    }

    fn loglik_given_ssr(&self, log_sigma2: f64) -> f64 {
        if self.set.likelihood_off {
            return 0.0;
        }
        let m = self.model.y.len() as f64;
        -0.5 * m * (LN_2PI + log_sigma2) - 0.5 * self.ssr / log_sigma2.exp()
    }

    fn current_spec(&self) -> crate::hyperprior::HyperpriorSpec {
        self.model.hyper.with_lambda(self.st.lambda())
    }

    fn sigma2_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = self.set.log_sigma2_prior;
        let cur = self.loglik_given_ssr(self.st.log_sigma2) + prior.logpdf(self.st.log_sigma2);
        let adapting = self.st.adapt.adapting;
        let ssr = self.ssr;
        let m = self.model.y.len() as f64;
        let lik_off = self.set.likelihood_off;
        let out = adaptive_rw_step(
            self.st.log_sigma2,
            cur,
            |ls| {
                let ll = if lik_off {
                    0.0
                } else {
                    -0.5 * m * (LN_2PI + ls) - 0.5 * ssr / ls.exp()
                };
                ll + prior.logpdf(ls)
            },
            &mut self.st.adapt.s1,
            adapting,
            rng,
        )?;
        self.st.log_sigma2 = out.x;
        Ok(())
    }

    /// Exact Gibbs draw of the latent field from its full conditional.
    fn z_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.model.spde.n;
        let mut p = self.l.normal_form();
        let mut b = vec![0.0; n];
        if !self.set.likelihood_off {
            let sigma2 = self.st.sigma2();
            self.model.a.add_gram_scaled(1.0 / sigma2, &mut p);
            b = self.model.a.matvec_transpose(&self.model.y);
            for v in &mut b {
                *v /= sigma2;
            }
        }
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        self.st.z = sample_from_precision(&p, &b, &noise)?;
        self.lz = self.l.matvec(&self.st.z);
        self.fitted = self.model.a.matvec(&self.st.z);
        self.ssr = ssr_of(&self.model.y, &self.fitted);
        Ok(())
    }

    /// One sweep of single-site Metropolis updates over the length-scale
    /// field. The latent-prior ratio needs only the changed factor row and a
    /// fresh tridiagonal log-determinant; the hyperprior ratio touches only
    /// the neighbouring precision entries.
    fn site_sweep(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.model.spde.n;
        let spec = self.current_spec();
        let adapting = self.st.adapt.adapting;
        for k in 0..n {
            let scale = self.st.adapt.sites[k].scale;
            let proposal = self.st.u.u[k] + scale * rng.sample::<f64, _>(StandardNormal);

            let old_row = (
                if k > 0 { self.l.get(k, k - 1) } else { 0.0 },
                self.l.get(k, k),
                if k + 1 < n { self.l.get(k, k + 1) } else { 0.0 },
            );
            spde::write_factor_row(&mut self.l, k, proposal.exp(), &self.model.spde);
            let logdet_new = self.l.tridiagonal_logdet()?;
            let rowdot_new = self.l.row_dot(k, &self.st.z);
            let prior_z = (logdet_new - self.logdet_l)
                - 0.5 * (rowdot_new * rowdot_new - self.lz[k] * self.lz[k]);
            let prior_u =
                hyperprior::logratio_u_site_cached(&spec, &self.se, &self.st.u.u, k, proposal)?;

            let accepted = metropolis_accept(rng, prior_z + prior_u);
            if accepted {
                self.st.u.u[k] = proposal;
                self.logdet_l = logdet_new;
                self.lz[k] = rowdot_new;
            } else {
                if k > 0 {
                    self.l.set_unchecked(k, k - 1, old_row.0);
                }
                self.l.set_unchecked(k, k, old_row.1);
                if k + 1 < n {
                    self.l.set_unchecked(k, k + 1, old_row.2);
                }
            }
            self.st.adapt.sites[k].record(accepted, adapting);
            self.decisions += 1;
        }
        Ok(())
    }

    fn lambda_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = &self.set.log_lambda_prior;
        let proposal = self.st.log_lambda + self.st.adapt.s2.scale * rng.sample::<f64, _>(StandardNormal);
        let adapting = self.st.adapt.adapting;

        let log_ratio = match self.model.hyper.kind {
            HyperpriorKind::Const => {
                // the whole field moves with λ, so the latent-prior ratio is
                // the full determinant and quadratic difference
                let u_new = field_for_lambda(&self.model.hyper, &self.se, &[], proposal)?;
                let l_new = spde::factor_from_logs(&u_new, &self.model.spde)?;
                let logdet_new = l_new.tridiagonal_logdet()?;
                let lz_new = l_new.matvec(&self.st.z);
                let quad_new: f64 = lz_new.iter().map(|v| v * v).sum();
                let quad_old: f64 = self.lz.iter().map(|v| v * v).sum();
                let ratio = (logdet_new - self.logdet_l) - 0.5 * (quad_new - quad_old)
                    + prior.logpdf(proposal)
                    - prior.logpdf(self.st.log_lambda);
                if metropolis_accept(rng, ratio) {
                    self.st.log_lambda = proposal;
                    self.st.u.u = u_new;
                    self.l = l_new;
                    self.logdet_l = logdet_new;
                    self.lz = lz_new;
                    self.st.adapt.s2.record(true, adapting);
                } else {
                    self.st.adapt.s2.record(false, adapting);
                }
                return Ok(());
            }
            _ => {
                let spec_new = self.model.hyper.with_lambda(proposal.exp());
                let spec_old = self.current_spec();
                hyperprior::logpdf_u_cached(&spec_new, &self.se, &self.st.u.u)?
                    - hyperprior::logpdf_u_cached(&spec_old, &self.se, &self.st.u.u)?
                    + prior.logpdf(proposal)
                    - prior.logpdf(self.st.log_lambda)
            }
        };
        let accepted = metropolis_accept(rng, log_ratio);
        if accepted {
            self.st.log_lambda = proposal;
        }
        self.st.adapt.s2.record(accepted, adapting);
        Ok(())
    }
}

fn ssr_of(y: &[f64], fitted: &[f64]) -> f64 {
    y.iter()
        .zip(fitted)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

impl Chain1d for MwgChain<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.set.update_sigma2 {
            self.sigma2_step(rng)?;
        }
        self.z_step(rng)?;
        if self.set.update_u && self.model.hyper.kind != HyperpriorKind::Const {
            self.site_sweep(rng)?;
        }
        if self.set.update_lambda {
            self.lambda_step(rng)?;
        }
        Ok(())
    }

    fn state(&self) -> &ChainState {
        &self.st
    }

    fn freeze_adaptation(&mut self) {
        self.st.adapt.adapting = false;
    }

    fn record_z(&mut self, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.st.z.clone())
    }

    fn site_decisions(&self) -> usize {
        self.decisions
    }
}
