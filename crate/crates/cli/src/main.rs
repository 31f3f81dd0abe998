//! Command-line interface: data simulation, 1-D and 2-D fits, and
//! diagnostics over previously written traces. All commands are
//! deterministic under a fixed `--seed`; every numeric output is written as
//! full-precision shortest-round-trip decimal text.

mod config;
mod io;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nsgp::additive::{run_chain_2d, Grid2D, Model2d};
use nsgp::experiments::{
    build_observation_operator, gen_additive_2d, gen_bumps, gen_damped_sine, gen_experiment1,
    standardize, Dataset, Dataset2d, Grid1d,
};
use nsgp::hyperprior::{elicit_prior, HyperpriorKind, HyperpriorSpec};
use nsgp::sampler::{run_chain, FitSettings, GaussianPrior, Model1d, SamplerKind};
use nsgp::spde::SpdeConfig;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "nsgp",
    about = "Non-stationary Gaussian process regression with sparse precision operators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data set as CSV (plus the noiseless truth).
    Simulate(SimulateArgs),
    /// Fit the 1-D hierarchical model and write traces plus a report.
    Fit(FitArgs),
    /// Fit the 2-D additive model and write traces plus a report.
    Fit2d(Fit2dArgs),
    /// Recompute diagnostics from previously written trace files.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// One of: exp1, sine, bumps, additive2d.
    #[arg(long)]
    experiment: String,
    /// Number of observations (1-D experiments).
    #[arg(long)]
    m: Option<usize>,
    /// Per-axis grid size (additive2d).
    #[arg(long)]
    grid: Option<usize>,
    /// Noise variance override.
    #[arg(long)]
    noise_var: Option<f64>,
    /// Signal-to-noise ratio (bumps only).
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CommonFitArgs {
    /// Input data CSV.
    #[arg(long)]
    data: PathBuf,
    /// Optional truth CSV for error and coverage scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Hyperprior kind: ar1, se or const.
    #[arg(long)]
    hyperprior: Option<String>,
    /// Total iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in fraction.
    #[arg(long)]
    burnin_frac: Option<f64>,
    /// Thinning interval for kept samples.
    #[arg(long)]
    thin: Option<usize>,
    /// Prior mean of the log length-scale field (default 0, or elicited).
    #[arg(long)]
    mu_ell: Option<f64>,
    /// Prior variance of the log length-scale field (default 1, or elicited).
    #[arg(long)]
    tau2_ell: Option<f64>,
    /// Derive the field prior and the log λ prior from the covariate range.
    #[arg(long, default_value_t = false)]
    elicit: bool,
    /// Prior on log λ as "mean,variance".
    #[arg(long)]
    loglambda_prior: Option<String>,
    /// Prior on log σ² as "mean,variance".
    #[arg(long)]
    logsigma2_prior: Option<String>,
    /// Standardise the responses before fitting (outputs are mapped back).
    #[arg(long, default_value_t = false)]
    standardize: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent chains (derived seeds, per-chain directories).
    #[arg(long, default_value_t = 1)]
    chains: usize,
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonFitArgs,
    /// Sampler: mwg, wellss or mellss.
    #[arg(long, default_value = "mellss")]
    sampler: String,
    /// Interior grid nodes spanning the data hull (default: number of
    /// observations, capped at 400).
    #[arg(long)]
    grid_n: Option<usize>,
    /// Extension cells per side (default: 4·exp(μ_ℓ)/h).
    #[arg(long)]
    ext: Option<usize>,
}

#[derive(Args)]
struct Fit2dArgs {
    #[command(flatten)]
    common: CommonFitArgs,
    /// Enable the Kronecker-structured interaction field.
    #[arg(long, default_value_t = false)]
    interaction: bool,
    /// Extension cells per axis side.
    #[arg(long, default_value_t = 4)]
    ext: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory containing trace files written by `fit`.
    #[arg(long)]
    traces: PathBuf,
    /// Optional truth CSV for error and coverage scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output report path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Fit2d(args) => cmd_fit2d(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn parse_hyperprior(s: &str) -> Result<HyperpriorKind> {
    match s {
        "ar1" => Ok(HyperpriorKind::Ar1),
        "se" => Ok(HyperpriorKind::Se),
        "const" => Ok(HyperpriorKind::Const),
        other => bail!("unknown hyperprior '{other}' (expected ar1, se or const)"),
    }
}

fn parse_sampler(s: &str) -> Result<SamplerKind> {
    match s {
        "mwg" => Ok(SamplerKind::Mwg),
        "wellss" => Ok(SamplerKind::WhitenedEss),
        "mellss" => Ok(SamplerKind::MarginalEss),
        other => bail!("unknown sampler '{other}' (expected mwg, wellss or mellss)"),
    }
}

fn parse_prior(s: &str) -> Result<GaussianPrior> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("prior must be 'mean,variance', got '{s}'");
    }
    let mean: f64 = parts[0].trim().parse().context("prior mean")?;
    let var: f64 = parts[1].trim().parse().context("prior variance")?;
    if !(var > 0.0) {
        bail!("prior variance must be positive");
    }
    Ok(GaussianPrior::new(mean, var))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let guard = io::OutputGuard::new();
    match args.experiment.as_str() {
        "exp1" => {
            let d =
                gen_experiment1(args.m.unwrap_or(81), args.noise_var.unwrap_or(0.01), args.seed);
            write_dataset_1d(&args.out, &d, &guard)?;
        }
        "sine" => {
            let d =
                gen_damped_sine(args.m.unwrap_or(350), args.noise_var.unwrap_or(0.04), args.seed);
            write_dataset_1d(&args.out, &d, &guard)?;
        }
        "bumps" => {
            let d = gen_bumps(args.m.unwrap_or(512), args.snr, args.seed);
            write_dataset_1d(&args.out, &d, &guard)?;
        }
        "additive2d" => {
            let n = args.grid.unwrap_or(143);
            let d = gen_additive_2d(n, n, args.noise_var.unwrap_or(0.06), args.seed);
            write_dataset_2d(&args.out, &d, &guard)?;
        }
        other => bail!("unknown experiment '{other}' (expected exp1, sine, bumps or additive2d)"),
    }
    guard.commit();
    Ok(())
}

fn write_dataset_1d(dir: &Path, d: &Dataset, guard: &io::OutputGuard) -> Result<()> {
    io::write_csv(
        &guard.track(dir.join("data.csv")),
        &["x", "y"],
        d.x.iter().zip(&d.y).map(|(x, y)| vec![*x, *y]),
    )?;
    io::write_csv(
        &guard.track(dir.join("truth.csv")),
        &["x", "truth"],
        d.x.iter().zip(&d.truth).map(|(x, t)| vec![*x, *t]),
    )?;
    Ok(())
}

fn write_dataset_2d(dir: &Path, d: &Dataset2d, guard: &io::OutputGuard) -> Result<()> {
    let (n1, n2) = (d.n1(), d.n2());
    let rows = (0..n1 * n2).map(|c| {
        let (j1, j2) = (c / n2, c % n2);
        vec![
            d.x1[j1],
            d.x2[j2],
            d.y[c],
            if d.missing[c] { 1.0 } else { 0.0 },
        ]
    });
    io::write_csv(
        &guard.track(dir.join("data.csv")),
        &["x1", "x2", "y", "missing"],
        rows,
    )?;
    let rows = (0..n1 * n2).map(|c| {
        let (j1, j2) = (c / n2, c % n2);
        vec![d.x1[j1], d.x2[j2], d.truth[c]]
    });
    io::write_csv(
        &guard.track(dir.join("truth.csv")),
        &["x1", "x2", "truth"],
        rows,
    )?;
    Ok(())
}

/// Shared assembly of priors and run-length settings from flags + config.
fn build_settings(
    common: &CommonFitArgs,
    alpha_beta: Option<(f64, f64)>,
) -> Result<(FitSettings, f64, f64, HyperpriorKind)> {
    let merged = config::merge(common)?;
    let kind = parse_hyperprior(&merged.hyperprior)?;
    let (mut mu_ell, mut tau2_ell) =
        (merged.mu_ell.unwrap_or(0.0), merged.tau2_ell.unwrap_or(1.0));
    let mut log_lambda_prior = merged
        .loglambda_prior
        .as_deref()
        .map(parse_prior)
        .transpose()?
        .unwrap_or(GaussianPrior::new(0.0, 3.0));
    if merged.elicit {
        let (alpha, beta) =
            alpha_beta.context("prior elicitation needs the covariate distances")?;
        let (mu, tau) = elicit_prior(alpha, beta)?;
        if merged.mu_ell.is_none() {
            mu_ell = mu;
        }
        if merged.tau2_ell.is_none() {
            tau2_ell = tau * tau;
        }
        if merged.loglambda_prior.is_none() {
            log_lambda_prior = GaussianPrior::new(mu, tau * tau);
        }
    }
    let log_sigma2_prior = merged
        .logsigma2_prior
        .as_deref()
        .map(parse_prior)
        .transpose()?
        .unwrap_or(GaussianPrior::new(0.0, 10.0));
    let settings = FitSettings {
        iterations: merged.iters,
        burnin_frac: merged.burnin_frac,
        thin: merged.thin,
        seed: merged.seed,
        log_lambda_prior,
        log_sigma2_prior,
        ..FitSettings::default()
    };
    Ok((settings, mu_ell, tau2_ell, kind))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (x, y_raw) = io::read_data_1d(&args.common.data)?;
    let truth = args
        .common
        .truth
        .as_deref()
        .map(io::read_truth_1d)
        .transpose()?;
    let sampler = parse_sampler(&args.sampler)?;

    // covariate distances for elicitation
    let mut xs = x.clone();
    xs.sort_by(|a, b| a.total_cmp(b));
    let min_gap = xs
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 0.0)
        .fold(f64::INFINITY, f64::min);
    let span = xs[xs.len() - 1] - xs[0];
    let alpha_beta = if min_gap.is_finite() && span > 0.0 {
        Some((min_gap, span))
    } else {
        None
    };
    let (settings, mu_ell, tau2_ell, kind) = build_settings(&args.common, alpha_beta)?;

    let mut y = y_raw;
    let mut scale_back = (0.0, 1.0);
    if args.common.standardize {
        let (sy, mean, scale) = standardize(&y)?;
        y = sy;
        scale_back = (mean, scale);
    }

    // grid over the data hull plus extension
    let grid_n = args.grid_n.unwrap_or_else(|| x.len().clamp(10, 400));
    let base = Grid1d::over(xs[0], xs[xs.len() - 1], grid_n)?;
    let ext = args
        .ext
        .unwrap_or_else(|| ((4.0 * mu_ell.exp() / base.h).ceil() as usize).clamp(2, 200));
    let grid = base.extend(ext);

    let a = build_observation_operator(&x, &grid)?;
    let spde = SpdeConfig::new(grid.n, grid.h, ext)?;
    let hyper = HyperpriorSpec::new(
        kind,
        settings.log_lambda_prior.mean.exp(),
        tau2_ell.sqrt(),
        mu_ell,
        grid.h,
        grid.n,
    )?;
    let model = Model1d {
        a: a.clone(),
        y: y.clone(),
        spde,
        hyper,
    };

    std::fs::create_dir_all(&args.common.out)?;
    let chains = args.common.chains.max(1);
    for chain_idx in 0..chains {
        let dir = if chains == 1 {
            args.common.out.clone()
        } else {
            let d = args.common.out.join(format!("chain{chain_idx}"));
            std::fs::create_dir_all(&d)?;
            d
        };
        let guard = io::OutputGuard::new();
        let mut set = settings.clone();
        set.seed = settings.seed + chain_idx as u64;
        let trace = run_chain(sampler, &model, &set)?;
        report::write_fit_outputs(
            &dir,
            &guard,
            &trace,
            &grid,
            &x,
            &a,
            truth.as_deref(),
            scale_back,
        )?;
        guard.commit();
    }
    Ok(())
}

fn cmd_fit2d(args: Fit2dArgs) -> Result<()> {
    let data = io::read_data_2d(&args.common.data)?;
    let truth = args
        .common
        .truth
        .as_deref()
        .map(io::read_truth_2d)
        .transpose()?;

    let h1 = (data.x1[data.x1.len() - 1] - data.x1[0]) / (data.x1.len() - 1) as f64;
    let h2 = (data.x2[data.x2.len() - 1] - data.x2[0]) / (data.x2.len() - 1) as f64;
    let span = (data.x1[data.x1.len() - 1] - data.x1[0])
        .max(data.x2[data.x2.len() - 1] - data.x2[0]);
    let (settings, mu_ell, tau2_ell, kind) =
        build_settings(&args.common, Some((h1.min(h2), span)))?;

    let (grid, y_obs) = Grid2D::from_dataset(&data, args.ext)?;
    let model = Model2d::new(
        grid,
        y_obs,
        kind,
        settings.log_lambda_prior.mean.exp(),
        tau2_ell.sqrt(),
        mu_ell,
        args.interaction,
    )?;

    std::fs::create_dir_all(&args.common.out)?;
    let chains = args.common.chains.max(1);
    for chain_idx in 0..chains {
        let dir = if chains == 1 {
            args.common.out.clone()
        } else {
            let d = args.common.out.join(format!("chain{chain_idx}"));
            std::fs::create_dir_all(&d)?;
            d
        };
        let guard = io::OutputGuard::new();
        let mut set = settings.clone();
        set.seed = settings.seed + chain_idx as u64;
        let trace = run_chain_2d(&model, &set)?;
        report::write_fit2d_outputs(&dir, &guard, &trace, &model, truth.as_ref())?;
        guard.commit();
    }
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let truth = args.truth.as_deref().map(io::read_truth_1d).transpose()?;
    report::diagnose(&args.traces, truth.as_deref(), &args.out)
}
