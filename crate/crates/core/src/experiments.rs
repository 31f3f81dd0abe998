//! Synthetic data generators, uniform grids with domain extension,
//! observation-operator assembly and data standardisation.

use crate::error::{Error, Result};
use crate::spde::ObsOperator;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Snap tolerance for observations landing on grid nodes, relative to `h`.
const NODE_SNAP_RTOL: f64 = 1e-9;

/// Uniform one-dimensional grid: nodes `x0 + j h` for `j = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1d {
    pub x0: f64,
    pub h: f64,
    pub n: usize,
}

impl Grid1d {
    /// Grid spanning `[lo, hi]` with `n` nodes.
    pub fn over(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(Error::Config(format!(
                "bad grid range [{lo}, {hi}] with {n} nodes"
            )));
        }
        Ok(Grid1d {
            x0: lo,
            h: (hi - lo) / (n - 1) as f64,
            n,
        })
    }

    pub fn node(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Pads the grid with `n_ext` cells on each side at the same step.
    pub fn extend(&self, n_ext: usize) -> Grid1d {
        Grid1d {
            x0: self.x0 - n_ext as f64 * self.h,
            h: self.h,
            n: self.n + 2 * n_ext,
        }
    }

    /// True when node `j` lies outside `[lo, hi]` (an extension node).
    pub fn is_extension(&self, j: usize, lo: f64, hi: f64) -> bool {
        let x = self.node(j);
        x < lo - NODE_SNAP_RTOL * self.h || x > hi + NODE_SNAP_RTOL * self.h
    }
}

/// One synthetic or user-supplied one-dimensional data set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Noiseless signal at the observation locations.
    pub truth: Vec<f64>,
    pub noise_var: f64,
}

/// Smooth-piecewise-constant test function on `[0, 10]`:
/// a bump `exp(4 − 25/(x(5−x)))` on `(0, 5)`, a step `1` on `[7, 8]`,
/// a step `−1` on `(8, 9]`, zero otherwise.
pub fn exp1_truth(x: f64) -> f64 {
    if x > 0.0 && x < 5.0 {
        (4.0 - 25.0 / (x * (5.0 - x))).exp()
    } else if (7.0..=8.0).contains(&x) {
        1.0
    } else if x > 8.0 && x <= 9.0 {
        -1.0
    } else {
        0.0
    }
}

/// Damped sine wave `exp(−x) cos(2πx)`.
pub fn damped_sine_truth(x: f64) -> f64 {
    (-x).exp() * (2.0 * std::f64::consts::PI * x).cos()
}

/// Canonical bumps signal: `Σ h_j (1 + |t − t_j|/w_j)^{−4}` with the eleven
/// standard (location, height, width) triples.
pub fn bumps_raw(t: f64) -> f64 {
    const POS: [f64; 11] = [0.1, 0.13, 0.15, 0.23, 0.25, 0.4, 0.44, 0.65, 0.76, 0.78, 0.81];
    const HEIGHT: [f64; 11] = [4.0, 5.0, 3.0, 4.0, 5.0, 4.2, 2.1, 4.3, 3.1, 5.1, 4.2];
    const WIDTH: [f64; 11] = [
        0.005, 0.005, 0.006, 0.01, 0.01, 0.03, 0.01, 0.01, 0.005, 0.008, 0.005,
    ];
    let mut acc = 0.0;
    for j in 0..11 {
        acc += HEIGHT[j] * (1.0 + (t - POS[j]).abs() / WIDTH[j]).powi(-4);
    }
    acc
}

/// Additive two-dimensional surface built from two copies of [`exp1_truth`].
pub fn additive2d_truth(x1: f64, x2: f64) -> f64 {
    exp1_truth(x1) + exp1_truth(x2)
}

fn equispaced(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let h = (hi - lo) / (m - 1) as f64;
    (0..m).map(|i| lo + i as f64 * h).collect()
}

fn noisy(truth: &[f64], noise_var: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = noise_var.sqrt();
    truth
        .iter()
        .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Smooth-piecewise-constant data on `[0, 10]`.
pub fn gen_experiment1(m: usize, noise_var: f64, seed: u64) -> Dataset {
    assert!(m >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = equispaced(0.0, 10.0, m);
    let truth: Vec<f64> = x.iter().map(|&v| exp1_truth(v)).collect();
    let y = noisy(&truth, noise_var, &mut rng);
    Dataset {
        x,
        y,
        truth,
        noise_var,
    }
}

/// Damped sine wave data on `[0, 8]`.
pub fn gen_damped_sine(m: usize, noise_var: f64, seed: u64) -> Dataset {
    assert!(m >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = equispaced(0.0, 8.0, m);
    let truth: Vec<f64> = x.iter().map(|&v| damped_sine_truth(v)).collect();
    let y = noisy(&truth, noise_var, &mut rng);
    Dataset {
        x,
        y,
        truth,
        noise_var,
    }
}

/// Bumps data on `[0, 1]`: the raw signal standardised to zero mean and unit
/// variance, then observed at the stated signal-to-noise ratio
/// (`σ² = 1/snr²`, so snr 5 gives 0.04).
pub fn gen_bumps(m: usize, snr: f64, seed: u64) -> Dataset {
    assert!(m >= 2 && snr > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = equispaced(0.0, 1.0, m);
    let raw: Vec<f64> = x.iter().map(|&v| bumps_raw(v)).collect();
    let (truth, _, _) = standardize(&raw).expect("bumps signal is non-degenerate");
    let noise_var = 1.0 / (snr * snr);
    let y = noisy(&truth, noise_var, &mut rng);
    Dataset {
        x,
        y,
        truth,
        noise_var,
    }
}

/// Two-dimensional data set observed on a complete grid; `missing` marks
/// cells whose response should be treated as unobserved.
#[derive(Debug, Clone)]
pub struct Dataset2d {
    /// Axis-1 coordinates (length `n1`).
    pub x1: Vec<f64>,
    /// Axis-2 coordinates (length `n2`).
    pub x2: Vec<f64>,
    /// Responses in cell order, axis-2 fastest: cell `(j1, j2)` at `j1·n2 + j2`.
    pub y: Vec<f64>,
    pub truth: Vec<f64>,
    pub missing: Vec<bool>,
    pub noise_var: f64,
}

impl Dataset2d {
    pub fn n1(&self) -> usize {
        self.x1.len()
    }

    pub fn n2(&self) -> usize {
        self.x2.len()
    }
}

/// Additive two-dimensional data on an `n1 × n2` grid over `[0, 10]²`.
pub fn gen_additive_2d(n1: usize, n2: usize, noise_var: f64, seed: u64) -> Dataset2d {
    assert!(n1 >= 2 && n2 >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = equispaced(0.0, 10.0, n1);
    let x2 = equispaced(0.0, 10.0, n2);
    let mut truth = Vec::with_capacity(n1 * n2);
    for a in &x1 {
        for b in &x2 {
            truth.push(additive2d_truth(*a, *b));
        }
    }
    let y = noisy(&truth, noise_var, &mut rng);
    Dataset2d {
        x1,
        x2,
        y,
        truth,
        missing: vec![false; n1 * n2],
        noise_var,
    }
}

/// Linear-interpolation observation operator: one unit weight when an
/// observation coincides with a node, otherwise weights `(1−w, w)` on the
/// bracketing nodes. Every row sums to one.
pub fn build_observation_operator(obs_x: &[f64], grid: &Grid1d) -> Result<ObsOperator> {
    let mut a = ObsOperator::new(grid.n);
    let tol = NODE_SNAP_RTOL * grid.h;
    let hull_hi = grid.node(grid.n - 1);
    for &x in obs_x {
        if x < grid.x0 - tol || x > hull_hi + tol {
            return Err(Error::OutOfHull { x });
        }
        let pos = (x - grid.x0) / grid.h;
        let j = (pos.floor() as usize).min(grid.n - 1);
        let frac = pos - j as f64;
        if (x - grid.node(j)).abs() <= tol {
            a.push_node(j);
        } else if j + 1 < grid.n && (x - grid.node(j + 1)).abs() <= tol {
            a.push_node(j + 1);
        } else {
            a.push_pair(j, 1.0 - frac, frac);
        }
    }
    Ok(a)
}

/// Centers and scales to zero mean and unit sample standard deviation
/// (divisor `n − 1`); returns `(standardised, mean, scale)`.
pub fn standardize(y: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if y.len() < 2 {
        return Err(Error::ChainTooShort { minimum: 2 });
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::DegenerateChain);
    }
    let scale = var.sqrt();
    Ok((y.iter().map(|v| (v - mean) / scale).collect(), mean, scale))
}

/// Fit grid used for the smooth-piecewise-constant experiment: the data hull
/// `[0, 10]` plus two base cells of extension per side, refined so the total
/// node count is `n` (85, 169 and 253 all place the 81 observations on
/// nodes).
pub fn exp1_grid(n: usize) -> Result<Grid1d> {
    if n < 5 {
        return Err(Error::Config(format!("grid too small: {n}")));
    }
    Ok(Grid1d {
        x0: -0.25,
        h: 10.5 / (n - 1) as f64,
        n,
    })
}
