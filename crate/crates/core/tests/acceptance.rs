//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Run with `cargo test --test acceptance -- --nocapture`.

use nalgebra::{DMatrix, DVector};
use nsgp::additive::{
    block_marginal_loglik_1d, block_marginal_loglik_interaction, kron_mv, run_chain_2d, CellKind,
    Grid2D, KroneckerEigen, Model2d,
};
use nsgp::banded::BandedMatrix;
use nsgp::diagnostics::{credible_band, ec, ess, geweke_failure_fraction, ks_test_normal_ess, mae, posterior_mean};
use nsgp::experiments::{build_observation_operator, exp1_grid, gen_additive_2d, gen_experiment1};
use nsgp::hyperprior::{ar1_factor, HyperpriorKind, HyperpriorSpec};
use nsgp::sampler::{run_chain, FitSettings, Model1d, SamplerKind};
use nsgp::spde::{factor, marginal_loglik, stat_matern, LengthScaleField, ObsOperator, SpdeConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

const LN_2PI: f64 = 1.837877066409345483560659472811;

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

fn obs_dense(a: &ObsOperator, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(a.n_rows(), n, |i, j| {
        let r = a.rows()[i];
        if j == r.node {
            r.w0
        } else if r.w1 != 0.0 && j == r.node + 1 {
            r.w1
        } else {
            0.0
        }
    })
}

fn dense_psi_loglik(
    field: &LengthScaleField,
    sigma2: f64,
    a: &ObsOperator,
    y: &[f64],
    cfg: &SpdeConfig,
) -> f64 {
    let m = a.n_rows();
    let l = factor(field, cfg).unwrap().to_dense();
    let cov = (l.transpose() * l).try_inverse().unwrap();
    let a_dense = obs_dense(a, cfg.n);
    let psi = &a_dense * cov * a_dense.transpose() + DMatrix::identity(m, m) * sigma2;
    let yv = DVector::from_column_slice(y);
    let lu = psi.lu();
    let logdet = lu.determinant().ln();
    let quad = (yv.transpose() * lu.solve(&yv).unwrap())[(0, 0)];
    -0.5 * m as f64 * LN_2PI - 0.5 * logdet - 0.5 * quad
}

/// Criterion 1: banded Cholesky/solve/logdet, the Woodbury marginal
/// likelihood, the determinant-lemma block path and the Kronecker eigen path
/// all match dense brute-force oracles on randomized instances, in under a
/// minute.
#[test]
fn criterion_1_kernel_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut max_factor_rel = 0.0f64;
    let mut max_loglik_abs = 0.0f64;

    // banded kernels against dense oracles
    for trial in 0..20 {
        let n = 5 + (trial * 7) % 56;
        let p = 1 + trial % 3;
        let m = random_spd_banded(n, p.min(n - 1), &mut rng);
        let dense = m.to_dense();

        let r = m.cholesky().unwrap();
        let oracle_r = dense.clone().cholesky().unwrap().l();
        let scale = oracle_r.amax();
        for i in 0..n {
            for j in 0..n {
                max_factor_rel = max_factor_rel.max((r.get(i, j) - oracle_r[(i, j)]).abs() / scale);
            }
        }

        let b: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = m.solve(&b).unwrap();
        let oracle_x = dense.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let xs = oracle_x.amax().max(1.0);
        for i in 0..n {
            max_factor_rel = max_factor_rel.max((x[i] - oracle_x[i]).abs() / xs);
        }

        let oracle_ld = dense.lu().determinant().abs().ln();
        max_loglik_abs = max_loglik_abs.max((m.logdet().unwrap() - oracle_ld).abs());
    }

    // Woodbury marginal likelihood path
    for trial in 0..12 {
        let n = 10 + (trial * 5) % 50;
        let m_rows = 3 + (trial * 3) % (2 * n);
        let cfg = SpdeConfig::new(n, 0.25, 0).unwrap();
        let u: Vec<f64> = (0..n).map(|_| -0.6 + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let field = LengthScaleField::new(u, 0.0, 1.0, 0.25).unwrap();
        let mut a = ObsOperator::new(n);
        for _ in 0..m_rows {
            let j = rng.random_range(0..n - 1);
            let w: f64 = rng.random();
            a.push_pair(j, 1.0 - w, w);
        }
        let y: Vec<f64> = (0..m_rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma2 = 0.05 + rng.random::<f64>();
        let got = marginal_loglik(&field, sigma2, &a, &y, &cfg).unwrap();
        let want = dense_psi_loglik(&field, sigma2, &a, &y, &cfg);
        max_loglik_abs = max_loglik_abs.max((got - want).abs());
    }

    // determinant-lemma block path: selection operator with m >> n_r
    for _ in 0..4 {
        let n_r = 20;
        let m_rows = 300;
        let cfg = SpdeConfig::new(n_r, 0.5, 0).unwrap();
        let u = vec![-0.3; n_r];
        let field = LengthScaleField::new(u.clone(), 0.0, 1.0, 0.5).unwrap();
        let mut a = ObsOperator::new(n_r);
        for i in 0..m_rows {
            a.push_node(i % n_r);
        }
        let y: Vec<f64> = (0..m_rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma2 = 0.3;
        let got = block_marginal_loglik_1d(&u, sigma2, &a, &y, &cfg).unwrap();
        let want = dense_psi_loglik(&field, sigma2, &a, &y, &cfg);
        max_loglik_abs = max_loglik_abs.max((got - want).abs());
    }

    // Kronecker eigen path on grids up to 8×8
    for trial in 0..6 {
        let n1 = 2 + trial % 7;
        let n2 = 64 / n1.max(1).min(8);
        let n2 = n2.clamp(2, 8);
        let q3 = random_spd_banded(n1, 1.min(n1 - 1), &mut rng);
        let q4 = random_spd_banded(n2, 1.min(n2 - 1), &mut rng);
        let eig = KroneckerEigen::new(&q3, &q4).unwrap();
        let nc = n1 * n2;
        let y: Vec<f64> = (0..nc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma2 = 0.4;

        let got = block_marginal_loglik_interaction(&eig, sigma2, &y).unwrap();
        let cov = q3
            .to_dense()
            .try_inverse()
            .unwrap()
            .kronecker(&q4.to_dense().try_inverse().unwrap())
            + DMatrix::identity(nc, nc) * sigma2;
        let yv = DVector::from_column_slice(&y);
        let lu = cov.lu();
        let want = -0.5 * nc as f64 * LN_2PI
            - 0.5 * lu.determinant().ln()
            - 0.5 * (yv.transpose() * lu.solve(&yv).unwrap())[(0, 0)];
        max_loglik_abs = max_loglik_abs.max((got - want).abs());

        // the Kronecker action itself
        let alpha: Vec<f64> = (0..nc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let got_mv = kron_mv(&eig.e3, &eig.e4, &alpha).unwrap();
        let dense_mv = eig.e3.kronecker(&eig.e4) * DVector::from_column_slice(&alpha);
        for i in 0..nc {
            max_factor_rel = max_factor_rel.max((got_mv[i] - dense_mv[i]).abs());
        }

        // conditional-mean pipeline (zero noise)
        let z = nsgp::additive::z3_posterior_draw(&eig, sigma2, &y, &vec![0.0; nc]).unwrap();
        let p = q3.to_dense().kronecker(&q4.to_dense()) + DMatrix::identity(nc, nc) / sigma2;
        let mu = p.lu().solve(&(DVector::from_column_slice(&y) / sigma2)).unwrap();
        for i in 0..nc {
            max_factor_rel = max_factor_rel.max((z[i] - mu[i]).abs() / mu.amax().max(1.0));
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(max_factor_rel <= 1e-8, "factor error {max_factor_rel}");
    assert!(max_loglik_abs <= 1e-6, "log-likelihood error {max_loglik_abs}");
    assert!(elapsed < 60.0, "kernel suite took {elapsed:.1}s");
    println!(
        "ACCEPTANCE 1: PASS — kernel oracles: factor rel {max_factor_rel:.2e}, loglik abs {max_loglik_abs:.2e}, {elapsed:.2}s"
    );
}

/// Criterion 2: stationary-limit calibration of the discretised field and
/// the AR(1) hyperprior against their closed forms.
#[test]
fn criterion_2_stationary_calibration() {
    let lambda: f64 = 1.0;
    let h = lambda / 10.0;
    let n_ext = (4.0 * lambda / h).round() as usize;
    let n_int = (6.0 * lambda / h).round() as usize + 1;
    let n = n_int + 2 * n_ext;
    let cfg = SpdeConfig::new(n, h, n_ext).unwrap();
    let field = LengthScaleField::constant(n, lambda.ln(), 0.0, 1.0, h);
    let l = factor(&field, &cfg).unwrap().to_dense();
    let cov = (l.transpose() * l).try_inverse().unwrap();
    let mid = n / 2;

    let mut max_rel = 0.0f64;
    for k in 0..=(3.0 * lambda / h).round() as usize {
        let r = k as f64 * h;
        let truth = stat_matern(r, lambda, 1.0, 1.5);
        max_rel = max_rel.max((cov[(mid, mid + k)] - truth).abs() / truth);
    }
    assert!(max_rel <= 0.05, "field covariance error {max_rel}");
    let var = cov[(mid, mid)];
    assert!((0.95..=1.05).contains(&var), "marginal variance {var}");

    // AR(1) hyperprior: interior variance within 2% of τ², correlation decay
    // within 5% of the exponential
    let n_h = 240;
    let spec = HyperpriorSpec::new(HyperpriorKind::Ar1, lambda, 1.3, 0.0, h, n_h).unwrap();
    let lphi = ar1_factor(&spec).unwrap().to_dense();
    let cphi = (lphi.transpose() * lphi).try_inverse().unwrap();
    let mid_h = n_h / 2;
    let tau2 = 1.3f64 * 1.3;
    let var_err = (cphi[(mid_h, mid_h)] - tau2).abs() / tau2;
    assert!(var_err <= 0.02, "AR(1) variance error {var_err}");
    let mut max_corr_rel = 0.0f64;
    for k in 1..(3.0 * lambda / h) as usize {
        let got = cphi[(mid_h, mid_h + k)] / cphi[(mid_h, mid_h)];
        let want = (-(k as f64) * h / lambda).exp();
        max_corr_rel = max_corr_rel.max((got - want).abs() / want);
    }
    assert!(max_corr_rel <= 0.05, "AR(1) correlation error {max_corr_rel}");
    println!(
        "ACCEPTANCE 2: PASS — stationary limit: field cov rel {max_rel:.4}, variance {var:.4}, AR(1) var rel {var_err:.5}, corr rel {max_corr_rel:.4}"
    );
}

fn conjugate_model(seed: u64) -> Model1d {
    let n = 24;
    let h = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spde = SpdeConfig::new(n, h, 0).unwrap();
    let mut a = ObsOperator::new(n);
    for _ in 0..15 {
        let j = rng.random_range(0..n - 1);
        let w: f64 = rng.random();
        a.push_pair(j, 1.0 - w, w);
    }
    let y: Vec<f64> = (0..15)
        .map(|i| (i as f64 * 0.7).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let hyper = HyperpriorSpec::new(HyperpriorKind::Ar1, 1.0, 1.0, -0.5, h, n).unwrap();
    Model1d { a, y, spde, hyper }
}

/// Criterion 3: (a) conjugate recovery within 3 MC standard errors for all
/// three 1-D samplers and the 2-D block sampler; (b) prior preservation at
/// KS level 0.001 with the likelihood disabled. Budget: 10 minutes.
#[test]
fn criterion_3_sampler_correctness() {
    let start = Instant::now();

    // (a) 1-D conjugate recovery
    let model = conjugate_model(42);
    let sigma2 = 0.04;
    let field = LengthScaleField::constant(
        model.spde.n,
        model.hyper.mu_ell,
        model.hyper.mu_ell,
        model.hyper.tau_ell,
        model.spde.h,
    );
    let l = factor(&field, &model.spde).unwrap().to_dense();
    let a_dense = obs_dense(&model.a, model.spde.n);
    let mut p = l.transpose() * l;
    p += a_dense.transpose() * &a_dense / sigma2;
    let cov = p.try_inverse().unwrap();
    let mu = &cov * (a_dense.transpose() * DVector::from_column_slice(&model.y) / sigma2);

    for (i, kind) in [SamplerKind::Mwg, SamplerKind::WhitenedEss, SamplerKind::MarginalEss]
        .iter()
        .enumerate()
    {
        let set = FitSettings {
            iterations: 25_000,
            burnin_frac: 0.2,
            thin: 1,
            seed: 300 + i as u64,
            init_log_sigma2: Some(sigma2.ln()),
            update_sigma2: false,
            update_u: false,
            update_lambda: false,
            ..FitSettings::default()
        };
        let trace = run_chain(*kind, &model, &set).unwrap();
        assert!(trace.kept() >= 20_000);
        let nf = trace.kept() as f64;
        for k in 0..model.spde.n {
            let zs = trace.z_coordinate(k);
            let mean = zs.iter().sum::<f64>() / nf;
            let se = (cov[(k, k)] / nf).sqrt();
            assert!(
                (mean - mu[k]).abs() <= 3.0 * se,
                "{kind:?} z[{k}]: {mean} vs {} ({} se)",
                mu[k],
                (mean - mu[k]).abs() / se
            );
        }
    }

    // 2-D block sampler conjugate recovery on a 6×5 grid
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x1: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let x2: Vec<f64> = (0..5).map(|i| i as f64 * 0.5).collect();
        let truth: Vec<f64> = (0..30).map(|c| ((c / 5) as f64 * 0.4).sin()).collect();
        let y: Vec<f64> = truth
            .iter()
            .map(|t| t + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = nsgp::experiments::Dataset2d {
            x1,
            x2,
            y,
            truth,
            missing: vec![false; 30],
            noise_var: 0.09,
        };
        let (grid, y_obs) = Grid2D::from_dataset(&data, 0).unwrap();
        let model2 = Model2d::new(grid, y_obs, HyperpriorKind::Ar1, 1.0, 1.0, -0.4, true).unwrap();
        let set = FitSettings {
            iterations: 25_000,
            burnin_frac: 0.2,
            thin: 1,
            seed: 310,
            init_log_sigma2: Some(0.09f64.ln()),
            update_sigma2: false,
            update_u: false,
            update_lambda: false,
            ..FitSettings::default()
        };
        let trace = run_chain_2d(&model2, &set).unwrap();
        assert!(trace.kept() >= 20_000);

        // dense joint posterior of (z1, z2, z3)
        let (n1, n2) = (model2.grid.n1(), model2.grid.n2());
        let nc = n1 * n2;
        let dense_q = |mu_ell: f64, n: usize, cfg: &SpdeConfig| {
            let f = LengthScaleField::constant(n, mu_ell, mu_ell, 1.0, cfg.h);
            let l = factor(&f, cfg).unwrap().to_dense();
            l.transpose() * l
        };
        let q1 = dense_q(model2.hyper[0].mu_ell, n1, &model2.spde1);
        let q2 = dense_q(model2.hyper[1].mu_ell, n2, &model2.spde2);
        let q3 = dense_q(model2.hyper[2].mu_ell, n1, &model2.spde1);
        let q4 = dense_q(model2.hyper[3].mu_ell, n2, &model2.spde2);
        let dim = n1 + n2 + nc;
        let mut p = DMatrix::zeros(dim, dim);
        p.view_mut((0, 0), (n1, n1)).copy_from(&q1);
        p.view_mut((n1, n1), (n2, n2)).copy_from(&q2);
        p.view_mut((n1 + n2, n1 + n2), (nc, nc)).copy_from(&q3.kronecker(&q4));
        let mut design = DMatrix::zeros(nc, dim);
        for j1 in 0..n1 {
            for j2 in 0..n2 {
                let c = j1 * n2 + j2;
                design[(c, j1)] = 1.0;
                design[(c, n1 + j2)] = 1.0;
                design[(c, n1 + n2 + c)] = 1.0;
            }
        }
        p += design.transpose() * &design / 0.09;
        let cov2 = p.try_inverse().unwrap();
        let mut yv = DVector::zeros(nc);
        for (c, kind) in model2.grid.cells.iter().enumerate() {
            if let CellKind::Observed(row) = kind {
                yv[c] = model2.y_obs[*row];
            }
        }
        let mu2 = &cov2 * (design.transpose() * yv / 0.09);

        let check = |series: &[f64], want: f64, label: &str| {
            let nf = series.len() as f64;
            let mean = series.iter().sum::<f64>() / nf;
            let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let neff = ess(series).unwrap_or(nf).min(nf);
            let se = (var / neff).sqrt().max(1e-12);
            assert!(
                (mean - want).abs() <= 3.0 * se,
                "block {label}: {mean} vs {want} ({} se)",
                (mean - want).abs() / se
            );
        };
        for j in 0..n1 {
            let s: Vec<f64> = trace.z1.iter().map(|r| r[j]).collect();
            check(&s, mu2[j], &format!("z1[{j}]"));
        }
        for j in 0..n2 {
            let s: Vec<f64> = trace.z2.iter().map(|r| r[j]).collect();
            check(&s, mu2[n1 + j], &format!("z2[{j}]"));
        }
        for c in [0usize, 11, 23, 29] {
            let s: Vec<f64> = (0..trace.kept()).map(|t| trace.z3_row(t, &model2.grid)[c]).collect();
            check(&s, mu2[n1 + n2 + c], &format!("z3[{c}]"));
        }
    }

    // (b) prior preservation, likelihood disabled
    let defaults = FitSettings::default();
    for (kind, iters, thin, seed) in [
        (SamplerKind::Mwg, 200_000usize, 100usize, 501u64),
        (SamplerKind::WhitenedEss, 42_000, 40, 502),
        (SamplerKind::MarginalEss, 42_000, 40, 503),
    ] {
        let set = FitSettings {
            iterations: iters,
            burnin_frac: 0.05,
            thin,
            seed,
            likelihood_off: true,
            ..FitSettings::default()
        };
        let trace = run_chain(kind, &model, &set).unwrap();
        let (_, p_lam) = ks_test_normal_ess(
            &trace.log_lambda,
            defaults.log_lambda_prior.mean,
            defaults.log_lambda_prior.sd(),
        )
        .unwrap();
        let (_, p_sig) = ks_test_normal_ess(
            &trace.log_sigma2,
            defaults.log_sigma2_prior.mean,
            defaults.log_sigma2_prior.sd(),
        )
        .unwrap();
        assert!(p_lam > 0.001 && p_sig > 0.001, "{kind:?}: p {p_lam} {p_sig}");
        for k in [0usize, 11, 23] {
            let zetas: Vec<f64> = if trace.zeta[0].is_empty() {
                trace
                    .u
                    .iter()
                    .zip(&trace.log_lambda)
                    .map(|(u, ll)| {
                        let spec = model.hyper.with_lambda(ll.exp());
                        nsgp::hyperprior::whiten(&spec, u).unwrap()[k]
                    })
                    .collect()
            } else {
                trace.zeta.iter().map(|row| row[k]).collect()
            };
            let (_, p) = ks_test_normal_ess(&zetas, 0.0, 1.0).unwrap();
            assert!(p > 0.001, "{kind:?} ζ[{k}]: p = {p}");
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 600.0, "sampler correctness took {elapsed:.0}s");
    println!(
        "ACCEPTANCE 3: PASS — conjugate recovery within 3 MC se (3 samplers + block), prior-preservation KS at 0.001, {elapsed:.1}s"
    );
}

struct DeskFit {
    mae: f64,
    ec: f64,
    ell_mean: Vec<f64>,
}

fn exp1_desk_fit(kind: SamplerKind, hyper_kind: HyperpriorKind, seed: u64) -> DeskFit {
    let data = gen_experiment1(81, 0.01, 1234);
    let grid = exp1_grid(85).unwrap();
    let a = build_observation_operator(&data.x, &grid).unwrap();
    let spde = SpdeConfig::new(grid.n, grid.h, 2).unwrap();
    let hyper = HyperpriorSpec::new(hyper_kind, 1.0, 1.0, 0.0, grid.h, grid.n).unwrap();
    let model = Model1d {
        a: a.clone(),
        y: data.y.clone(),
        spde,
        hyper,
    };
    let set = FitSettings {
        iterations: 50_000,
        burnin_frac: 0.2,
        thin: 5,
        seed,
        ..FitSettings::default()
    };
    let run_start = Instant::now();
    let trace = run_chain(kind, &model, &set).unwrap();
    let run_secs = run_start.elapsed().as_secs_f64();
    assert!(run_secs <= 900.0, "desk-scale run took {run_secs:.0}s");

    // score at observation locations (all on nodes for this grid)
    let fitted: Vec<Vec<f64>> = trace.z.iter().map(|z| a.matvec(z)).collect();
    let mean_fit = posterior_mean(&fitted);
    let (lo, hi) = credible_band(&fitted, 0.95).unwrap();
    let mae_val = mae(&mean_fit, &data.truth).unwrap();
    let ec_val = ec(&lo, &hi, &data.truth).unwrap();
    let ell_mean = posterior_mean(&trace.ell());
    DeskFit {
        mae: mae_val,
        ec: ec_val,
        ell_mean,
    }
}

/// Criterion 4: desk-scale reproduction of the smooth-piecewise-constant
/// experiment at n = 85 with 5·10⁴ iterations: MAE ≤ 0.06 and EC ≥ 0.90 for
/// the marginal sampler under both hyperpriors, and for the site-wise
/// sampler under AR(1). The posterior mean length-scale curves of the two
/// samplers agree within 15% sup-norm.
#[test]
fn criterion_4_experiment1_desk_scale() {
    let mell_ar = exp1_desk_fit(SamplerKind::MarginalEss, HyperpriorKind::Ar1, 41);
    assert!(mell_ar.mae <= 0.06, "marginal AR(1) MAE {}", mell_ar.mae);
    assert!(mell_ar.ec >= 0.90, "marginal AR(1) EC {}", mell_ar.ec);

    let mell_se = exp1_desk_fit(SamplerKind::MarginalEss, HyperpriorKind::Se, 42);
    assert!(mell_se.mae <= 0.06, "marginal SE MAE {}", mell_se.mae);
    assert!(mell_se.ec >= 0.90, "marginal SE EC {}", mell_se.ec);

    let mwg_ar = exp1_desk_fit(SamplerKind::Mwg, HyperpriorKind::Ar1, 43);
    assert!(mwg_ar.mae <= 0.06, "site-wise AR(1) MAE {}", mwg_ar.mae);
    assert!(mwg_ar.ec >= 0.90, "site-wise AR(1) EC {}", mwg_ar.ec);

    // cross-sampler agreement of the posterior mean length-scale curve
    let sup_ell = mell_ar
        .ell_mean
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut sup_diff = 0.0f64;
    for (a, b) in mwg_ar.ell_mean.iter().zip(&mell_ar.ell_mean) {
        sup_diff = sup_diff.max((a - b).abs());
    }
    assert!(
        sup_diff <= 0.15 * sup_ell,
        "length-scale curves differ: sup diff {sup_diff} vs scale {sup_ell}"
    );

    println!(
        "ACCEPTANCE 4: PASS — desk-scale fits: marginal AR(1) MAE {:.3} EC {:.3}; marginal SE MAE {:.3} EC {:.3}; site-wise AR(1) MAE {:.3} EC {:.3}; ℓ̂ sup-diff {:.3} (scale {:.2})",
        mell_ar.mae, mell_ar.ec, mell_se.mae, mell_se.ec, mwg_ar.mae, mwg_ar.ec, sup_diff, sup_ell
    );
}

/// Criterion 5: qualitative efficiency ranking at n = 253 with the smooth
/// hyperprior — the marginal sampler's minimum-coordinate ESS for the
/// length-scale field beats the whitened sampler's by at least 5× at equal
/// iteration count, and the site-wise sampler fails a stationarity check
/// that the marginal sampler passes.
#[test]
fn criterion_5_efficiency_ranking() {
    let data = gen_experiment1(81, 0.01, 1234);
    let grid = exp1_grid(253).unwrap();
    let a = build_observation_operator(&data.x, &grid).unwrap();
    let spde = SpdeConfig::new(grid.n, grid.h, 2).unwrap();
    let hyper = HyperpriorSpec::new(HyperpriorKind::Se, 1.0, 1.0, 0.0, grid.h, grid.n).unwrap();
    let model = Model1d {
        a,
        y: data.y.clone(),
        spde,
        hyper,
    };
    let set = FitSettings {
        iterations: 20_000,
        burnin_frac: 0.2,
        thin: 10,
        seed: 55,
        ..FitSettings::default()
    };

    let min_u_ess = |trace: &nsgp::sampler::Trace| -> f64 {
        (0..grid.n)
            .map(|k| ess(&trace.u_coordinate(k)).unwrap_or(1.0))
            .fold(f64::INFINITY, f64::min)
    };
    let u_chains = |trace: &nsgp::sampler::Trace| -> Vec<Vec<f64>> {
        (0..grid.n).map(|k| trace.u_coordinate(k)).collect()
    };

    let mell = run_chain(SamplerKind::MarginalEss, &model, &set).unwrap();
    let well = run_chain(SamplerKind::WhitenedEss, &model, &set).unwrap();
    let mwg = run_chain(SamplerKind::Mwg, &model, &set).unwrap();

    let ess_mell = min_u_ess(&mell);
    let ess_well = min_u_ess(&well);
    assert!(
        ess_mell >= 5.0 * ess_well,
        "ESS ordering violated: marginal {ess_mell:.1} vs whitened {ess_well:.1}"
    );

    let frac_mwg = geweke_failure_fraction(&u_chains(&mwg));
    let frac_mell = geweke_failure_fraction(&u_chains(&mell));
    assert!(
        frac_mwg > 0.25,
        "site-wise sampler unexpectedly passes stationarity ({frac_mwg:.2} failures)"
    );
    assert!(
        frac_mell <= 0.25,
        "marginal sampler fails stationarity ({frac_mell:.2} failures)"
    );

    println!(
        "ACCEPTANCE 5: PASS — ranking at n=253/SE: min-ESS(u) marginal {ess_mell:.1} ≥ 5× whitened {ess_well:.1}; Geweke failure fraction site-wise {frac_mwg:.2} vs marginal {frac_mell:.2}"
    );
}

/// Criterion 6: desk-scale first-order additive fit on a 41×41 grid with
/// 2·10⁴ iterations: MAE ≤ 0.10 and EC ≥ 0.90 at the observed cells.
#[test]
fn criterion_6_experiment4_desk_scale() {
    let start = Instant::now();
    let data = gen_additive_2d(41, 41, 0.06, 4321);
    let ext = 4;
    let (grid, y_obs) = Grid2D::from_dataset(&data, ext).unwrap();
    let model = Model2d::new(grid, y_obs, HyperpriorKind::Ar1, 1.0, 1.0, 0.0, false).unwrap();
    let set = FitSettings {
        iterations: 20_000,
        burnin_frac: 0.2,
        thin: 10,
        seed: 66,
        ..FitSettings::default()
    };
    let trace = run_chain_2d(&model, &set).unwrap();

    // score on observed cells only
    let mut obs_cells = Vec::new();
    let mut truth_obs = Vec::new();
    for (c, kind) in model.grid.cells.iter().enumerate() {
        if matches!(kind, CellKind::Observed(_)) {
            obs_cells.push(c);
        }
    }
    // dataset truth is in the unextended grid order; rebuild per observed cell
    let n2_ext = model.grid.n2();
    for &c in &obs_cells {
        let j1 = c / n2_ext - ext;
        let j2 = c % n2_ext - ext;
        truth_obs.push(data.truth[j1 * data.n2() + j2]);
    }
    let fitted_obs: Vec<Vec<f64>> = trace
        .fitted
        .iter()
        .map(|row| obs_cells.iter().map(|&c| row[c]).collect())
        .collect();
    let mean_fit = posterior_mean(&fitted_obs);
    let (lo, hi) = credible_band(&fitted_obs, 0.95).unwrap();
    let mae_val = mae(&mean_fit, &truth_obs).unwrap();
    let ec_val = ec(&lo, &hi, &truth_obs).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(mae_val <= 0.10, "additive desk MAE {mae_val}");
    assert!(ec_val >= 0.90, "additive desk EC {ec_val}");
    assert!(elapsed <= 1800.0, "additive desk run took {elapsed:.0}s");
    println!(
        "ACCEPTANCE 6: PASS — additive desk scale: MAE {mae_val:.3}, EC {ec_val:.3}, {elapsed:.1}s"
    );
}
