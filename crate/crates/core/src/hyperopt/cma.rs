//! CMA-ES on the unit hypercube with IPOP restarts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Generations inspected by the stagnation test.
pub const STAGNATION_GENERATIONS: usize = 20;
/// Minimum improvement of the best fitness over that horizon.
pub const STAGNATION_TOLERANCE: f64 = 1e-12;

/// Default population size `4 + floor(3 ln n)`.
pub fn default_population(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

/// Folds `x` back into `[0, 1]` by mirroring at the walls.
pub fn reflect(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

/// Sampling distribution and evolution paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: usize,
    pub lambda: usize,
    pub mu: usize,
    /// Positive recombination weights summing to one.
    pub weights: Vec<f64>,
    mu_eff: f64,
    c_c: f64,
    c_s: f64,
    c_1: f64,
    c_mu: f64,
    damps: f64,
    chi_n: f64,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
}

impl CmaState {
    pub fn new(mean: &[f64], sigma: f64, lambda: Option<usize>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || !(sigma > 0.0) {
            return Err(Error::Search("CMA-ES needs n >= 1 and sigma > 0".into()));
        }
        let lambda = lambda.unwrap_or_else(|| default_population(n)).max(2);
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_s = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let damps = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_s;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            lambda,
            mu,
            weights,
            mu_eff,
            c_c,
            c_s,
            c_1,
            c_mu,
            damps,
            chi_n,
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Recomputes `C = B diag(d^2) B^T`, symmetrizing and flooring the
    /// eigenvalues if rounding has broken positive definiteness.
    fn decompose(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
        let floor = max * 1e-14;
        let values = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
        self.cov = &self.basis * DMatrix::from_diagonal(&values) * self.basis.transpose();
    }
}

/// Samples `lambda` candidates `mean + sigma * N(0, C)`, reflected into
/// `[0, 1]^n`.
pub fn cma_ask<R: Rng + ?Sized>(state: &CmaState, rng: &mut R) -> Vec<Vec<f64>> {
    let n = state.dim();
    (0..state.lambda)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &state.basis * z.component_mul(&state.scales);
            (0..n).map(|i| reflect(state.mean[i] + state.sigma * y[i])).collect()
        })
        .collect()
}

/// Rank-based `(mu/mu_w, lambda)` update; NaN fitness ranks last.
pub fn cma_tell(state: &mut CmaState, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<()> {
    let n = state.dim();
    if candidates.len() != state.lambda || fitness.len() != state.lambda {
        return Err(Error::Search(format!(
            "expected {} candidates and fitnesses, got {} and {}",
            state.lambda,
            candidates.len(),
            fitness.len()
        )));
    }
    if candidates.iter().any(|c| c.len() != n) {
        return Err(Error::Search(format!("candidates must have {n} coordinates")));
    }
    let key = |f: f64| if f.is_nan() { f64::INFINITY } else { f };
    let mut order: Vec<usize> = (0..state.lambda).collect();
    order.sort_by(|&a, &b| key(fitness[a]).total_cmp(&key(fitness[b])));
    state.generation += 1;

    // Flat fitness: no selection information, widen the search instead.
    let pivot = order[((0.7 * state.lambda as f64).ceil() as usize).clamp(1, state.lambda) - 1];
    if key(fitness[order[0]]) == key(fitness[pivot]) {
        state.sigma *= (0.2 + state.c_s / state.damps).exp();
        return Ok(());
    }

    let old_mean = state.mean.clone();
    let steps: Vec<DVector<f64>> = order[..state.mu]
        .iter()
        .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / state.sigma)
        .collect();
    let mut y_w = DVector::zeros(n);
    for (w, y) in state.weights.iter().zip(&steps) {
        y_w += y * *w;
    }
    state.mean = &old_mean + &y_w * state.sigma;

    // C^{-1/2} y_w = B diag(1/d) B^T y_w
    let inv = state.scales.map(|d| 1.0 / d);
    let c_inv_sqrt_y = &state.basis * (state.basis.transpose() * &y_w).component_mul(&inv);
    state.p_sigma = &state.p_sigma * (1.0 - state.c_s)
        + c_inv_sqrt_y * (state.c_s * (2.0 - state.c_s) * state.mu_eff).sqrt();
    let ps_norm = state.p_sigma.norm();
    let decay = 1.0 - (1.0 - state.c_s).powi(2 * state.generation as i32);
    let h_sigma = ps_norm / decay.sqrt() / state.chi_n < 1.4 + 2.0 / (n as f64 + 1.0);
    let h = if h_sigma { 1.0 } else { 0.0 };
    state.p_c = &state.p_c * (1.0 - state.c_c)
        + &y_w * (h * (state.c_c * (2.0 - state.c_c) * state.mu_eff).sqrt());

    let mut rank_mu = DMatrix::zeros(n, n);
    for (w, y) in state.weights.iter().zip(&steps) {
        rank_mu += y * y.transpose() * *w;
    }
    let rank_one = &state.p_c * state.p_c.transpose()
        + &state.cov * ((1.0 - h) * state.c_c * (2.0 - state.c_c));
    state.cov = &state.cov * (1.0 - state.c_1 - state.c_mu) + rank_one * state.c_1 + rank_mu * state.c_mu;
    state.sigma *= ((state.c_s / state.damps) * (ps_norm / state.chi_n - 1.0)).exp();
    state.decompose();
    Ok(())
}

/// Settings for [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct CmaOptions {
    pub sigma0: f64,
    /// First population size; doubled at every restart.
    pub lambda: Option<usize>,
    pub restarts: bool,
    pub seed: u64,
}

impl Default for CmaOptions {
    fn default() -> Self {
        Self {
            sigma0: 0.3,
            lambda: None,
            restarts: true,
            seed: 0,
        }
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub restart: usize,
    pub generation: usize,
    pub x: Vec<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fitness: f64,
    pub evaluations: usize,
    pub history: Vec<Evaluated>,
}

/// Minimizes over `[0, 1]^n` within `budget` evaluations. `evaluate` gets a
/// whole generation at once so it may parallelize. The first run starts at
/// the center; restarts draw a uniform mean and double the population. A
/// generation only runs when the remaining budget covers it.
pub fn minimize<F>(n: usize, budget: usize, options: &CmaOptions, mut evaluate: F) -> Result<Minimum>
where
    F: FnMut(usize, &[Vec<f64>]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut state = CmaState::new(&vec![0.5; n], options.sigma0, options.lambda)?;
    if budget < state.lambda {
        return Err(Error::Search(format!(
            "budget {budget} is smaller than the population size {}",
            state.lambda
        )));
    }
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restart = 0;
    let mut generation = 0;
    let mut run_best: Vec<f64> = Vec::new();
    while history.len() + state.lambda <= budget {
        let candidates = cma_ask(&state, &mut rng);
        let fitness = evaluate(generation, &candidates);
        for (x, &f) in candidates.iter().zip(&fitness) {
            history.push(Evaluated {
                restart,
                generation,
                x: x.clone(),
                fitness: f,
            });
            let better = match &best {
                None => !f.is_nan(),
                Some((_, b)) => f < *b,
            };
            if better {
                best = Some((x.clone(), f));
            }
        }
        cma_tell(&mut state, &candidates, &fitness)?;
        generation += 1;
        run_best.push(best.as_ref().map_or(f64::INFINITY, |b| b.1));
        let stagnated = run_best.len() > STAGNATION_GENERATIONS && {
            let old = run_best[run_best.len() - 1 - STAGNATION_GENERATIONS];
            let now = run_best[run_best.len() - 1];
            !(old - now >= STAGNATION_TOLERANCE)
        };
        let collapsed = !(state.sigma > 1e-300) || !state.sigma.is_finite();
        if options.restarts && (stagnated || collapsed) {
            restart += 1;
            let mean: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            state = CmaState::new(&mean, options.sigma0, Some(state.lambda * 2))?;
            run_best.clear();
        }
    }
    let (x, fitness) = best.unwrap_or_else(|| (vec![0.5; n], f64::NAN));
    Ok(Minimum {
        x,
        fitness,
        evaluations: history.len(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(target: &[f64]) -> impl Fn(&[f64]) -> f64 + '_ {
        move |v| v.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
    }

    #[test]
    fn population_formula() {
        assert_eq!(default_population(10), 10);
        assert_eq!(default_population(5), 8);
        assert_eq!(CmaState::new(&[0.5; 10], 0.3, None).unwrap().lambda, 10);
    }

    #[test]
    fn weights_sum_to_one() {
        let s = CmaState::new(&[0.5; 7], 0.3, None).unwrap();
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(s.weights.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn reflection_stays_in_bounds() {
        assert_eq!(reflect(0.3), 0.3);
        assert!((reflect(-0.2) - 0.2).abs() < 1e-15);
        assert!((reflect(1.25) - 0.75).abs() < 1e-15);
        assert!((reflect(2.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_sigma_samples_the_mean() {
        let s = CmaState::new(&[0.25, 0.75], 1e-14, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in cma_ask(&s, &mut rng) {
            assert!((c[0] - 0.25).abs() < 1e-12 && (c[1] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_populations_repeat() {
        let s = CmaState::new(&[0.5; 3], 0.3, None).unwrap();
        let a = cma_ask(&s, &mut ChaCha8Rng::seed_from_u64(9));
        let b = cma_ask(&s, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn flat_fitness_keeps_the_mean() {
        let mut s = CmaState::new(&[0.4; 4], 0.2, None).unwrap();
        let c = cma_ask(&s, &mut ChaCha8Rng::seed_from_u64(0));
        let mean = s.mean.clone();
        let flat = vec![3.0; s.lambda];
        cma_tell(&mut s, &c, &flat).unwrap();
        assert_eq!(s.mean, mean);
        assert!(s.sigma > 0.2);
    }

    #[test]
    fn nan_fitness_ranks_last() {
        let mut a = CmaState::new(&[0.5; 2], 0.2, Some(6)).unwrap();
        let mut b = a.clone();
        let c = cma_ask(&a, &mut ChaCha8Rng::seed_from_u64(4));
        let f = [1.0, f64::NAN, 0.5, 2.0, 0.1, 3.0];
        let g = [1.0, 100.0, 0.5, 2.0, 0.1, 3.0];
        cma_tell(&mut a, &c, &f).unwrap();
        cma_tell(&mut b, &c, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sphere_converges() {
        let target = [0.3, 0.6, 0.45, 0.7, 0.2];
        let f = sphere(&target);
        let opts = CmaOptions {
            seed: 5,
            ..CmaOptions::default()
        };
        let min = minimize(5, 3000, &opts, |_, cands| cands.iter().map(|c| f(c)).collect()).unwrap();
        assert!(min.fitness < 1e-8, "{}", min.fitness);
        assert!(min.evaluations <= 3000);
    }

    #[test]
    fn budget_smaller_than_population_fails() {
        assert!(minimize(5, 7, &CmaOptions::default(), |_, c| vec![0.0; c.len()]).is_err());
        let one = minimize(5, 8, &CmaOptions::default(), |_, c| vec![1.0; c.len()]).unwrap();
        assert_eq!(one.evaluations, 8);
    }
}
