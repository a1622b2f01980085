//! Gaussian-process Bayesian optimization with expected improvement.
//!
//! Inputs are rescaled to the unit square, observations standardized, and
//! the squared-exponential kernel's hyperparameters refit by multi-start
//! gradient ascent on the marginal likelihood. The first
//! `max(5, iterations/10)` evaluations come from a seeded, rotated Halton
//! sequence.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum BoError {
    AllTrialsFailed { trials: usize },
    InvalidSpace(&'static str),
}

impl fmt::Display for BoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoError::AllTrialsFailed { trials } => {
                write!(f, "all {trials} trials failed")
            }
            BoError::InvalidSpace(s) => write!(f, "invalid search space: {s}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub x: Vec<f64>,
    /// Objective value; NaN when the trial failed.
    pub y: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub observations: Vec<Observation>,
    pub best_index: usize,
    /// Number of accepted proposals that had to be clamped into the box.
    pub clamped_proposals: usize,
}

const NOISE: f64 = 1e-8;
const RESTARTS: usize = 8;
const ASCENT_STEPS: usize = 30;

/// Minimize `objective` over the box with exactly `iterations`
/// evaluations. A `None` return marks a failed trial; failed trials are
/// fed to the surrogate at worst-observed-plus-margin so the search
/// avoids, rather than ignores, that region.
pub fn minimize(
    objective: &mut dyn FnMut(&[f64]) -> Option<f64>,
    bounds: &[(f64, f64)],
    iterations: usize,
    seed: u64,
) -> Result<MinimizeResult, BoError> {
    if bounds.is_empty() {
        return Err(BoError::InvalidSpace("no dimensions"));
    }
    for &(lo, hi) in bounds {
        if hi <= lo || !lo.is_finite() || !hi.is_finite() {
            return Err(BoError::InvalidSpace("degenerate range"));
        }
    }
    if iterations == 0 {
        return Err(BoError::InvalidSpace("iterations must be >= 1"));
    }
    let dim = bounds.len();
    let mut chacha = rng::seeded(seed);
    let shifts: Vec<f64> = (0..dim).map(|_| rng::uniform(&mut chacha)).collect();
    let n_init = core::cmp::max(5, iterations / 10).min(iterations);

    let mut observations: Vec<Observation> = Vec::with_capacity(iterations);
    let mut clamped = 0usize;
    let mut halton_cursor = 0usize;
    let mut warm_params: Option<(Vec<f64>, f64)> = None;

    for trial in 0..iterations {
        let unit_x: Vec<f64> = if trial < n_init {
            halton_cursor += 1;
            halton_point(halton_cursor, dim, &shifts)
        } else {
            match propose(
                &observations,
                bounds,
                &shifts,
                &mut halton_cursor,
                &mut chacha,
                &mut warm_params,
            ) {
                Some((x, was_clamped)) => {
                    if was_clamped {
                        clamped += 1;
                    }
                    x
                }
                // Degenerate surrogate (e.g. all failures so far): fall
                // back to the low-discrepancy stream.
                None => {
                    halton_cursor += 1;
                    halton_point(halton_cursor, dim, &shifts)
                }
            }
        };
        let x: Vec<f64> = unit_x
            .iter()
            .zip(bounds)
            .map(|(&u, &(lo, hi))| lo + u * (hi - lo))
            .collect();
        match objective(&x) {
            Some(y) if y.is_finite() => observations.push(Observation {
                x,
                y,
                failed: false,
            }),
            _ => observations.push(Observation {
                x,
                y: f64::NAN,
                failed: true,
            }),
        }
    }

    let best_index = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.failed)
        .min_by(|a, b| a.1.y.partial_cmp(&b.1.y).expect("finite losses"))
        .map(|(i, _)| i)
        .ok_or(BoError::AllTrialsFailed { trials: iterations })?;

    Ok(MinimizeResult {
        observations,
        best_index,
        clamped_proposals: clamped,
    })
}

/// Failed trials score worst-observed plus a 50% margin.
fn effective_values(observations: &[Observation]) -> Option<Vec<f64>> {
    let valid: Vec<f64> = observations
        .iter()
        .filter(|o| !o.failed)
        .map(|o| o.y)
        .collect();
    if valid.is_empty() {
        return None;
    }
    let worst = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sentinel = worst + 0.5 * libm::fabs(worst) + 1e-3;
    Some(
        observations
            .iter()
            .map(|o| if o.failed { sentinel } else { o.y })
            .collect(),
    )
}

fn propose(
    observations: &[Observation],
    bounds: &[(f64, f64)],
    shifts: &[f64],
    halton_cursor: &mut usize,
    chacha: &mut rng::ChaCha8Rng,
    warm_params: &mut Option<(Vec<f64>, f64)>,
) -> Option<(Vec<f64>, bool)> {
    let dim = bounds.len();
    let ys = effective_values(observations)?;
    let xs: Vec<Vec<f64>> = observations
        .iter()
        .map(|o| {
            o.x.iter()
                .zip(bounds)
                .map(|(&v, &(lo, hi))| (v - lo) / (hi - lo))
                .collect()
        })
        .collect();
    // A full multi-start refit every few points; cheap warm-started
    // ascent in between.
    let warm = warm_params.take();
    let thorough = warm.is_none() || observations.len().is_multiple_of(5);
    let gp = Gp::fit_multi_start(&xs, &ys, NOISE, chacha, warm, thorough)?;
    *warm_params = Some((gp.log_ls.clone(), gp.log_sf));

    let best_y = gp.standardize(
        observations
            .iter()
            .filter(|o| !o.failed)
            .map(|o| o.y)
            .fold(f64::INFINITY, f64::min),
    );
    let incumbent: &Vec<f64> = {
        let mut bi = 0;
        let mut by = f64::INFINITY;
        for (i, o) in observations.iter().enumerate() {
            if !o.failed && o.y < by {
                by = o.y;
                bi = i;
            }
        }
        &xs[bi]
    };

    let mut best_cand: Option<(Vec<f64>, f64, bool)> = None;
    let mut consider = |cand: Vec<f64>, was_clamped: bool, gp: &Gp| {
        let (mu, var) = gp.posterior_unit(&cand);
        let ei = expected_improvement(best_y, mu, var);
        match &best_cand {
            Some((_, best_ei, _)) if *best_ei >= ei => {}
            _ => best_cand = Some((cand, ei, was_clamped)),
        }
    };

    for _ in 0..512 {
        *halton_cursor += 1;
        consider(halton_point(*halton_cursor, dim, shifts), false, &gp);
    }
    for _ in 0..64 {
        let mut clamp_hit = false;
        let cand: Vec<f64> = incumbent
            .iter()
            .map(|&v| {
                let p = v + 0.05 * rng::gaussian(chacha);
                if !(0.0..=1.0).contains(&p) {
                    clamp_hit = true;
                }
                p.clamp(0.0, 1.0)
            })
            .collect();
        consider(cand, clamp_hit, &gp);
    }
    best_cand.map(|(x, _, c)| (x, c))
}

fn expected_improvement(best: f64, mu: f64, var: f64) -> f64 {
    let sigma = libm::sqrt(var.max(1e-18));
    let z = (best - mu) / sigma;
    (best - mu) * normal_cdf(z) + sigma * normal_pdf(z)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Radical-inverse Halton point with a fixed per-dimension rotation.
fn halton_point(index: usize, dim: usize, shifts: &[f64]) -> Vec<f64> {
    const PRIMES: [usize; 6] = [2, 3, 5, 7, 11, 13];
    (0..dim)
        .map(|d| {
            let h = radical_inverse(index, PRIMES[d % PRIMES.len()]);
            let v = h + shifts[d];
            v - libm::floor(v)
        })
        .collect()
}

fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f /= base as f64;
    }
    result
}

/// Squared-exponential GP on unit-cube inputs and standardized outputs.
pub struct Gp {
    xs: Vec<Vec<f64>>,
    dim: usize,
    pub log_ls: Vec<f64>,
    pub log_sf: f64,
    noise: f64,
    y_mean: f64,
    y_std: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl Gp {
    /// Fit on raw (already unit-scaled) points and raw objective values.
    pub fn fit(points: &[Vec<f64>], values: &[f64], noise: f64, seed: u64) -> Option<Gp> {
        let mut chacha = rng::seeded(seed);
        Gp::fit_multi_start(points, values, noise, &mut chacha, None, true)
    }

    fn fit_multi_start(
        points: &[Vec<f64>],
        values: &[f64],
        noise: f64,
        chacha: &mut rng::ChaCha8Rng,
        warm: Option<(Vec<f64>, f64)>,
        thorough: bool,
    ) -> Option<Gp> {
        let n = points.len();
        if n == 0 {
            return None;
        }
        let dim = points[0].len();
        let y_mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if var > 1e-24 { libm::sqrt(var) } else { 1.0 };
        let ys: Vec<f64> = values.iter().map(|v| (v - y_mean) / y_std).collect();

        let restarts = if thorough { RESTARTS } else { 1 };
        let steps = if thorough { ASCENT_STEPS } else { 10 };
        let mut best: Option<(Vec<f64>, f64, f64)> = None; // (log_ls, log_sf, lml)
        for restart in 0..restarts {
            let (mut log_ls, mut log_sf) = match (&warm, restart) {
                (Some((ls, sf)), 0) => (ls.clone(), *sf),
                _ => {
                    let ls: Vec<f64> = (0..dim)
                        .map(|_| libm::log(0.05 + 0.95 * rng::uniform(chacha)))
                        .collect();
                    (ls, libm::log(0.3 + 1.7 * rng::uniform(chacha)))
                }
            };
            let mut step = 0.1;
            let mut lml = match GpState::build(points, &ys, &log_ls, log_sf, noise) {
                Some(s) => s.log_marginal(),
                None => continue,
            };
            for _ in 0..steps {
                let state = match GpState::build(points, &ys, &log_ls, log_sf, noise) {
                    Some(s) => s,
                    None => break,
                };
                let grad = state.log_marginal_grad();
                let mut cand_ls: Vec<f64> = log_ls
                    .iter()
                    .zip(&grad)
                    .map(|(v, g)| (v + step * g).clamp(libm::log(1e-3), libm::log(10.0)))
                    .collect();
                let cand_sf =
                    (log_sf + step * grad[dim]).clamp(libm::log(1e-3), libm::log(1e3));
                let cand_lml = GpState::build(points, &ys, &cand_ls, cand_sf, noise)
                    .map(|s| s.log_marginal())
                    .unwrap_or(f64::NEG_INFINITY);
                if cand_lml > lml {
                    lml = cand_lml;
                    log_ls = core::mem::take(&mut cand_ls);
                    log_sf = cand_sf;
                    step *= 1.2;
                } else {
                    step *= 0.5;
                    if step < 1e-5 {
                        break;
                    }
                }
            }
            match &best {
                Some((_, _, b)) if *b >= lml => {}
                _ => best = Some((log_ls, log_sf, lml)),
            }
        }
        let (log_ls, log_sf, _) = best?;
        let state = GpState::build(points, &ys, &log_ls, log_sf, noise)?;
        Some(Gp {
            xs: points.to_vec(),
            dim,
            log_ls,
            log_sf,
            noise,
            y_mean,
            y_std,
            chol: state.chol,
            alpha: state.alpha,
        })
    }

    fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let sf2 = libm::exp(2.0 * self.log_sf);
        let mut s = 0.0;
        for d in 0..self.dim {
            let ls = libm::exp(self.log_ls[d]);
            let diff = (a[d] - b[d]) / ls;
            s += diff * diff;
        }
        sf2 * libm::exp(-0.5 * s)
    }

    /// Posterior mean and variance at a unit-cube point, standardized y.
    fn posterior_unit(&self, x: &[f64]) -> (f64, f64) {
        let n = self.xs.len();
        let kstar: Vec<f64> = self.xs.iter().map(|xi| self.kernel(x, xi)).collect();
        let mean: f64 = kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = chol_forward_solve(&self.chol, n, &kstar);
        let kxx = libm::exp(2.0 * self.log_sf) + self.noise;
        let var = (kxx - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (mean, var)
    }

    /// Posterior mean at a unit-cube point in the original y units.
    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        let (mu, _) = self.posterior_unit(x);
        mu * self.y_std + self.y_mean
    }
}

struct GpState {
    n: usize,
    dim: usize,
    kf: Vec<f64>, // noise-free kernel matrix
    chol: Vec<f64>,
    alpha: Vec<f64>,
    ys: Vec<f64>,
    sq_dists: Vec<f64>, // per-dim scaled squared distances, [d][i*n+j]
}

impl GpState {
    fn build(
        points: &[Vec<f64>],
        ys: &[f64],
        log_ls: &[f64],
        log_sf: f64,
        noise: f64,
    ) -> Option<GpState> {
        let n = points.len();
        let dim = log_ls.len();
        let sf2 = libm::exp(2.0 * log_sf);
        let ls: Vec<f64> = log_ls.iter().map(|&v| libm::exp(v)).collect();
        let mut sq_dists = vec![0.0; dim * n * n];
        let mut kf = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for d in 0..dim {
                    let diff = (points[i][d] - points[j][d]) / ls[d];
                    let sq = diff * diff;
                    sq_dists[d * n * n + i * n + j] = sq;
                    s += sq;
                }
                kf[i * n + j] = sf2 * libm::exp(-0.5 * s);
            }
        }
        let mut k = kf.clone();
        let mut jitter = noise;
        let chol = loop {
            for i in 0..n {
                k[i * n + i] = kf[i * n + i] + jitter;
            }
            if let Some(c) = cholesky(&k, n) {
                break c;
            }
            jitter *= 10.0;
            if jitter > 1e-2 {
                return None;
            }
        };
        let alpha = chol_solve(&chol, n, ys);
        Some(GpState {
            n,
            dim,
            kf,
            chol,
            alpha,
            ys: ys.to_vec(),
            sq_dists,
        })
    }

    fn log_marginal(&self) -> f64 {
        let n = self.n;
        let fit: f64 = self.ys.iter().zip(&self.alpha).map(|(y, a)| y * a).sum();
        let logdet: f64 = (0..n).map(|i| libm::log(self.chol[i * n + i])).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * libm::log(2.0 * core::f64::consts::PI)
    }

    /// d lml / d(log_ls_0..log_ls_{D-1}, log_sf)
    fn log_marginal_grad(&self) -> Vec<f64> {
        let n = self.n;
        let kinv = chol_inverse(&self.chol, n);
        // M = ααᵀ − K⁻¹
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.alpha[i] * self.alpha[j] - kinv[i * n + j];
            }
        }
        let mut grad = Vec::with_capacity(self.dim + 1);
        for d in 0..self.dim {
            // dK/d log_ls_d = Kf ∘ sq_dists_d
            let mut g = 0.0;
            let sd = &self.sq_dists[d * n * n..(d + 1) * n * n];
            for idx in 0..n * n {
                g += m[idx] * self.kf[idx] * sd[idx];
            }
            grad.push(0.5 * g);
        }
        let g: f64 = m.iter().zip(&self.kf).map(|(mv, kv)| mv * 2.0 * kv).sum();
        grad.push(0.5 * g);
        grad
    }
}

/// Lower-triangular Cholesky factor of a symmetric PD matrix, or None.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L v = b.
fn chol_forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * v[k];
        }
        v[i] = s / l[i * n + i];
    }
    v
}

/// Solve (L Lᵀ) x = b.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = chol_forward_solve(l, n, b);
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = chol_solve(l, n, &e);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_objective_degenerate_landscape() {
        let mut count = 0;
        let mut f = |_: &[f64]| {
            count += 1;
            Some(3.25)
        };
        let res = minimize(&mut f, &[(0.0, 1.0), (1.0, 11.0)], 12, 9).unwrap();
        assert_eq!(count, 12);
        assert_eq!(res.observations.len(), 12);
        assert!(res.observations.iter().all(|o| !o.failed));
        assert_eq!(res.observations[res.best_index].y, 3.25);
    }

    #[test]
    fn quadratic_lands_near_optimum() {
        let mut f = |x: &[f64]| {
            let a = x[0] - 0.5;
            let t = (x[1] - 6.0) / 10.0;
            Some(a * a + t * t)
        };
        let res = minimize(&mut f, &[(0.0, 1.0), (1.0, 11.0)], 50, 3).unwrap();
        let best = &res.observations[res.best_index];
        assert!((best.x[0] - 0.5).abs() < 0.05, "alpha {}", best.x[0]);
        assert!((best.x[1] - 6.0).abs() < 0.5, "temp {}", best.x[1]);
    }

    #[test]
    fn proposals_stay_inside_box() {
        let mut f = |x: &[f64]| Some((x[0] - 0.2) * (x[0] - 0.2) + x[1] * x[1] * 0.01);
        let res = minimize(&mut f, &[(0.0, 1.0), (1.0, 11.0)], 30, 5).unwrap();
        for o in &res.observations {
            assert!((0.0..=1.0).contains(&o.x[0]));
            assert!((1.0..=11.0).contains(&o.x[1]));
        }
    }

    #[test]
    fn failures_are_penalized_not_fatal() {
        let mut f = |x: &[f64]| {
            if x[0] < 0.5 {
                None
            } else {
                Some(x[0])
            }
        };
        let res = minimize(&mut f, &[(0.0, 1.0)], 20, 11).unwrap();
        let best = &res.observations[res.best_index];
        assert!(!best.failed);
        assert!(best.x[0] >= 0.5);
    }

    #[test]
    fn all_failures_error_carries_trial_count() {
        let mut f = |_: &[f64]| None;
        match minimize(&mut f, &[(0.0, 1.0)], 7, 1) {
            Err(BoError::AllTrialsFailed { trials }) => assert_eq!(trials, 7),
            other => panic!("expected AllTrialsFailed, got {other:?}"),
        }
    }

    #[test]
    fn gp_interpolates_observations_noiselessly() {
        let points = vec![
            vec![0.1, 0.2],
            vec![0.5, 0.8],
            vec![0.9, 0.3],
            vec![0.3, 0.6],
            vec![0.7, 0.1],
        ];
        let values = vec![1.0, 2.0, 0.5, 1.7, 0.9];
        let gp = Gp::fit(&points, &values, 1e-10, 42).unwrap();
        for (p, &v) in points.iter().zip(&values) {
            let mu = gp.posterior_mean(p);
            assert!((mu - v).abs() < 1e-6, "{mu} vs {v}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let run = || {
            let mut f = |x: &[f64]| Some((x[0] - 0.3) * (x[0] - 0.3));
            minimize(&mut f, &[(0.0, 1.0)], 15, 21).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.best_index, b.best_index);
        for (oa, ob) in a.observations.iter().zip(&b.observations) {
            assert_eq!(oa.x, ob.x);
        }
    }
}
