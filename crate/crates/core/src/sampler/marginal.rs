//! Marginal elliptical slice sampling: the latent field is integrated out
//! analytically and every move scores the marginal likelihood of the data,
//! so only `(ζ, λ, σ²)` are sampled. Latent-field draws are produced from
//! the exact conditional at recording times only.

use super::{
    adaptive_rw_step, ess_slice_step, field_for_lambda, initial_state, metropolis_accept,
    Chain1d, ChainState, FitSettings, Model1d,
};
use crate::banded::sample_from_precision;
use crate::error::Result;
use crate::hyperprior::{HyperpriorKind, SeCache};
use crate::spde;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(super) struct MarginalChain<'m> {
    model: &'m Model1d,
    set: &'m FitSettings,
    st: ChainState,
    /// Marginal log-likelihood at the current `(u, σ²)`.
    marg: f64,
    se: SeCache,
}

impl<'m> MarginalChain<'m> {
    pub(super) fn build(model: &'m Model1d, set: &'m FitSettings) -> Result<Self> {
        let st = initial_state(model, set)?;
        let mut chain = MarginalChain {
            model,
            set,
            st,
            marg: 0.0,
            se: SeCache::new(),
        };
        chain.marg = chain.marginal(&chain.st.u.u.clone(), chain.st.sigma2())?;
        Ok(chain)
    }

    /// Marginal log-likelihood, or zero when the likelihood is disabled.
    /// Numerical failures at proposed states score as −∞ (certain rejection).
    fn marginal(&self, u: &[f64], sigma2: f64) -> Result<f64> {
        marginal_of(self.model, self.set.likelihood_off, u, sigma2)
    }

    fn sigma2_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = self.set.log_sigma2_prior;
        let cur = self.marg + prior.logpdf(self.st.log_sigma2);
        let adapting = self.st.adapt.adapting;
        let u = self.st.u.u.clone();
        let model = self.model;
        let lik_off = self.set.likelihood_off;
        let mut marg_at = f64::NEG_INFINITY;
        let out = adaptive_rw_step(
            self.st.log_sigma2,
            cur,
            |ls| {
                marg_at =
                    marginal_of(model, lik_off, &u, ls.exp()).unwrap_or(f64::NEG_INFINITY);
                marg_at + prior.logpdf(ls)
            },
            &mut self.st.adapt.s1,
            adapting,
            rng,
        )?;
        if out.accepted {
            self.st.log_sigma2 = out.x;
            self.marg = marg_at;
        }
        Ok(())
    }

    fn zeta_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let spec = self.model.hyper.with_lambda(self.st.lambda());
        let sigma2 = self.st.sigma2();
        let zeta = self.st.zeta.clone();
        let out = ess_slice_step(
            &zeta,
            self.marg,
            |prop| {
                let u = crate::hyperprior::unwhiten_cached(&spec, &self.se, prop)?;
                let ll = self.marginal(&u, sigma2)?;
                Ok((ll, u))
            },
            rng,
        )?;
        self.st.zeta = out.v;
        self.st.u.u = out.payload;
        self.marg = out.loglik;
        Ok(())
    }

    fn lambda_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = &self.set.log_lambda_prior;
        let proposal =
            self.st.log_lambda + self.st.adapt.s2.scale * rng.sample::<f64, _>(StandardNormal);
        let adapting = self.st.adapt.adapting;
        let u_new = field_for_lambda(&self.model.hyper, &self.se, &self.st.zeta, proposal)?;
        let marg_new = self.marginal(&u_new, self.st.sigma2())?;
        let log_ratio =
            marg_new - self.marg + prior.logpdf(proposal) - prior.logpdf(self.st.log_lambda);
        let accepted = metropolis_accept(rng, log_ratio);
        if accepted {
            self.st.log_lambda = proposal;
            self.st.u.u = u_new;
            self.marg = marg_new;
        }
        self.st.adapt.s2.record(accepted, adapting);
        Ok(())
    }
}

fn marginal_of(model: &Model1d, likelihood_off: bool, u: &[f64], sigma2: f64) -> Result<f64> {
    if likelihood_off {
        return Ok(0.0);
    }
    let l = spde::factor_from_logs(u, &model.spde)?;
    Ok(spde::marginal_loglik_with_factor(&l, sigma2, &model.a, &model.y)
        .unwrap_or(f64::NEG_INFINITY))
}

impl Chain1d for MarginalChain<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.set.update_sigma2 {
            self.sigma2_step(rng)?;
        }
        if self.set.update_u && self.model.hyper.kind != HyperpriorKind::Const {
            self.zeta_step(rng)?;
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

    /// Post-hoc smoothing draw: the latent field is not part of the kernel,
    /// so recording times draw it fresh from the exact conditional.
    fn record_z(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.model.spde.n;
        let l = spde::factor_from_logs(&self.st.u.u, &self.model.spde)?;
        let mut p = l.normal_form();
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
        let z = sample_from_precision(&p, &b, &noise)?;
        self.st.z = z.clone();
        Ok(z)
    }
}
