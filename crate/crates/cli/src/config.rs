//! Flat `key = value` config files. Command-line flags always win; no
//! environment variables are consulted.

use crate::CommonFitArgs;
use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::path::Path;

/// Fully resolved fit options after merging the config file (if any) with
/// the command-line flags.
pub struct Merged {
    pub hyperprior: String,
    pub iters: usize,
    pub burnin_frac: f64,
    pub thin: usize,
    pub seed: u64,
    pub mu_ell: Option<f64>,
    pub tau2_ell: Option<f64>,
    pub elicit: bool,
    pub loglambda_prior: Option<String>,
    pub logsigma2_prior: Option<String>,
}

fn parse_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {} is not 'key = value': {line}", lineno + 1);
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn get_parsed<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => match raw.parse::<T>() {
            Ok(v) => Ok(Some(v)),
            Err(e) => bail!("config key '{key}': {e}"),
        },
    }
}

pub fn merge(args: &CommonFitArgs) -> Result<Merged> {
    let file = match &args.config {
        Some(path) => parse_file(path)?,
        None => HashMap::new(),
    };
    Ok(Merged {
        hyperprior: args
            .hyperprior
            .clone()
            .or_else(|| file.get("hyperprior").cloned())
            .unwrap_or_else(|| "ar1".to_string()),
        iters: args
            .iters
            .or(get_parsed(&file, "iters")?)
            .unwrap_or(10_000),
        burnin_frac: args
            .burnin_frac
            .or(get_parsed(&file, "burnin_frac")?)
            .unwrap_or(0.2),
        thin: args.thin.or(get_parsed(&file, "thin")?).unwrap_or(10),
        seed: args.seed.or(get_parsed(&file, "seed")?).unwrap_or(0),
        mu_ell: args.mu_ell.or(get_parsed(&file, "mu_ell")?),
        tau2_ell: args.tau2_ell.or(get_parsed(&file, "tau2_ell")?),
        elicit: args.elicit || get_parsed(&file, "elicit")?.unwrap_or(false),
        loglambda_prior: args
            .loglambda_prior
            .clone()
            .or_else(|| file.get("loglambda_prior").cloned()),
        logsigma2_prior: args
            .logsigma2_prior
            .clone()
            .or_else(|| file.get("logsigma2_prior").cloned()),
    })
}
