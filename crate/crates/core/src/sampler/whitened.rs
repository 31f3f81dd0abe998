//! Whitened elliptical slice sampling: both latent fields are re-expressed
//! as standard normals (`z = L(u)⁻¹ξ`, `u = R_φ ζ + μ_ℓ`), the length-scale
//! field moves jointly along an ellipse, and the latent field is refreshed
//! from its exact conditional at the end of every sweep.

use super::{
    adaptive_rw_step, ess_slice_step, field_for_lambda, initial_state, metropolis_accept,
    Chain1d, ChainState, FitSettings, Model1d, LN_2PI,
};
use crate::banded::{sample_from_precision, BandedMatrix};
use crate::error::Result;
use crate::hyperprior::{HyperpriorKind, SeCache};
use crate::spde;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(super) struct WhitenedChain<'m> {
    model: &'m Model1d,
    set: &'m FitSettings,
    st: ChainState,
    l: BandedMatrix,
    fitted: Vec<f64>,
    ssr: f64,
    /// Data log-likelihood at the current state (zero when disabled).
    loglik: f64,
    se: SeCache,
}

struct FieldUpdate {
    u: Vec<f64>,
    l: BandedMatrix,
    z: Vec<f64>,
    fitted: Vec<f64>,
    ssr: f64,
}

impl<'m> WhitenedChain<'m> {
    pub(super) fn build(model: &'m Model1d, set: &'m FitSettings) -> Result<Self> {
        let mut st = initial_state(model, set)?;
        st.xi = vec![0.0; model.spde.n];
        let l = spde::factor_from_logs(&st.u.u, &model.spde)?;
        // ξ = 0 gives z = 0, consistent with the whitening identity
        let fitted = model.a.matvec(&st.z);
        let ssr = ssr_of(&model.y, &fitted);
        let mut chain = WhitenedChain {
            model,
            set,
            st,
            l,
            fitted,
            ssr,
            loglik: 0.0,
            se: SeCache::new(),
        };
        chain.loglik = chain.loglik_of(chain.ssr, chain.st.log_sigma2);
        Ok(chain)
    }

    fn loglik_of(&self, ssr: f64, log_sigma2: f64) -> f64 {
        if self.set.likelihood_off {
            return 0.0;
        }
        let m = self.model.y.len() as f64;
        -0.5 * m * (LN_2PI + log_sigma2) - 0.5 * ssr / log_sigma2.exp()
    }

    /// Solves the field for a whitened proposal and scores it.
    fn eval_field(&self, u: Vec<f64>) -> Result<(f64, FieldUpdate)> {
        let l = spde::factor_from_logs(&u, &self.model.spde)?;
        let z = l.solve(&self.st.xi)?;
        let fitted = self.model.a.matvec(&z);
        let ssr = ssr_of(&self.model.y, &fitted);
        let ll = self.loglik_of(ssr, self.st.log_sigma2);
        Ok((ll, FieldUpdate { u, l, z, fitted, ssr }))
    }

    fn install(&mut self, up: FieldUpdate, loglik: f64) {
        self.st.u.u = up.u;
        self.l = up.l;
        self.st.z = up.z;
        self.fitted = up.fitted;
        self.ssr = up.ssr;
        self.loglik = loglik;
    }

    fn sigma2_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = &self.set.log_sigma2_prior;
        let cur = self.loglik + prior.logpdf(self.st.log_sigma2);
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
        if out.accepted {
            self.st.log_sigma2 = out.x;
            self.loglik = self.loglik_of(self.ssr, out.x);
        }
        Ok(())
    }

    fn zeta_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let spec = self.model.hyper.with_lambda(self.st.lambda());
        let zeta = self.st.zeta.clone();
        let out = ess_slice_step(
            &zeta,
            self.loglik,
            |prop| {
                let u = crate::hyperprior::unwhiten_cached(&spec, &self.se, prop)?;
                self.eval_field(u)
            },
            rng,
        )?;
        self.st.zeta = out.v;
        let ll = out.loglik;
        self.install(out.payload, ll);
        Ok(())
    }

    /// Random-walk move on the hyper length-scale in the whitened
    /// parametrisation: the field and latent process are recomputed under the
    /// proposed value before scoring.
    fn lambda_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let prior = &self.set.log_lambda_prior;
        let proposal =
            self.st.log_lambda + self.st.adapt.s2.scale * rng.sample::<f64, _>(StandardNormal);
        let adapting = self.st.adapt.adapting;
        let u_new = field_for_lambda(&self.model.hyper, &self.se, &self.st.zeta, proposal)?;
        let (ll_new, up) = self.eval_field(u_new)?;
        let log_ratio =
            ll_new - self.loglik + prior.logpdf(proposal) - prior.logpdf(self.st.log_lambda);
        let accepted = metropolis_accept(rng, log_ratio);
        if accepted {
            self.st.log_lambda = proposal;
            self.install(up, ll_new);
        }
        self.st.adapt.s2.record(accepted, adapting);
        Ok(())
    }

    /// Joint refresh of the latent field from its exact conditional, followed
    /// by re-deriving the whitened coordinates through `ξ = L(u) z`.
    fn z_refresh(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
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
        self.st.xi = self.l.matvec(&self.st.z);
        self.fitted = self.model.a.matvec(&self.st.z);
        self.ssr = ssr_of(&self.model.y, &self.fitted);
        self.loglik = self.loglik_of(self.ssr, self.st.log_sigma2);
        Ok(())
    }
}

fn ssr_of(y: &[f64], fitted: &[f64]) -> f64 {
    y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl Chain1d for WhitenedChain<'_> {
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
        self.z_refresh(rng)?;
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
}
