//! Benchmark generators with known Granger-causal structure: the Lorenz-96 system
//! and sparse stationary VAR(L) processes.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, so a seed gives the
//! same series on every platform and build.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::gc::GcGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz96Config {
    pub variates: usize,
    pub steps: usize,
    pub forcing: f64,
    pub dt: f64,
    /// Std of the Gaussian noise added to the state after every integration step.
    pub noise_std: f64,
    /// Std of the i.i.d. Gaussian initial condition.
    pub init_std: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            variates: 20,
            steps: 500,
            forcing: 10.0,
            dt: 0.05,
            noise_std: 0.1,
            init_std: 0.01,
            burn_in: 1000,
            seed: 0,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if self.variates < 4 {
            return Err(Error::Config(format!(
                "Lorenz-96 needs at least 4 variates, got {}",
                self.variates
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.init_std >= 0.0 && self.forcing.is_finite()) {
            return Err(Error::Config("noise and init std must be non-negative".into()));
        }
        Ok(())
    }
}

/// `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` with cyclic indices.
pub fn lorenz96_derivative(x: ArrayView1<'_, f64>, forcing: f64) -> Result<Array1<f64>> {
    let v = x.len();
    if v < 4 {
        return Err(Error::Shape(format!("Lorenz-96 needs at least 4 variates, got {v}")));
    }
    Ok(Array1::from_shape_fn(v, |i| {
        (x[(i + 1) % v] - x[(i + v - 2) % v]) * x[(i + v - 1) % v] - x[i] + forcing
    }))
}

fn rk4_step(x: &Array1<f64>, forcing: f64, dt: f64) -> Array1<f64> {
    let f = |y: &Array1<f64>| lorenz96_derivative(y.view(), forcing).expect("validated size");
    let k1 = f(x);
    let k2 = f(&(x + &(&k1 * (dt / 2.0))));
    let k3 = f(&(x + &(&k2 * (dt / 2.0))));
    let k4 = f(&(x + &(&k3 * dt)));
    x + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0))
}

/// Ground truth of Lorenz-96: `w -> v` iff `w` is one of `v-2, v-1, v, v+1` (mod V).
pub fn lorenz96_truth(variates: usize) -> GcGraph {
    let v = variates;
    let adj = Array2::from_shape_fn((v, v), |(a, b)| {
        [(a + v - 2) % v, (a + v - 1) % v, a, (a + 1) % v].contains(&b)
    });
    GcGraph::new(adj, (0..v).map(|i| format!("x{i}")).collect()).expect("square")
}

/// Lorenz-96 series from a random initial condition, RK4-integrated with step `dt`.
pub fn simulate_lorenz96(cfg: &Lorenz96Config) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = Array1::from_shape_simple_fn(cfg.variates, || {
        cfg.init_std * rng.sample::<f64, _>(StandardNormal)
    });
    run_lorenz96(cfg, x0, &mut rng)
}

/// Lorenz-96 series from a given initial state (noise still drawn from `cfg.seed`).
pub fn simulate_lorenz96_from(cfg: &Lorenz96Config, x0: Array1<f64>) -> Result<Dataset> {
    cfg.validate()?;
    if x0.len() != cfg.variates {
        return Err(Error::Shape("initial state length differs from variates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_lorenz96(cfg, x0, &mut rng)
}

fn run_lorenz96(cfg: &Lorenz96Config, mut x: Array1<f64>, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut values = Array2::zeros((cfg.variates, cfg.steps));
    for step in 0..cfg.burn_in + cfg.steps {
        x = rk4_step(&x, cfg.forcing, cfg.dt);
        for xi in x.iter_mut() {
            *xi += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::Diverged { step });
        }
        if step >= cfg.burn_in {
            values.column_mut(step - cfg.burn_in).assign(&x);
        }
    }
    let truth = lorenz96_truth(cfg.variates);
    Dataset::new(values, truth.variate_names().to_vec())?.with_truth(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarConfig {
    pub variates: usize,
    pub steps: usize,
    pub lag: usize,
    /// Extra non-self inputs per variate, each acting at one random lag.
    pub extra_edges: usize,
    /// Nonzero coefficient magnitudes are drawn from `[coeff_min, coeff_scale]`.
    pub coeff_scale: f64,
    pub coeff_min: f64,
    pub noise_std: f64,
    pub burn_in: usize,
    pub seed: u64,
    /// Rescale an unstable draw to spectral radius 0.95 instead of redrawing it.
    pub rescale_unstable: bool,
    pub max_attempts: usize,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self {
            variates: 10,
            steps: 1000,
            lag: 2,
            extra_edges: 3,
            coeff_scale: 0.5,
            coeff_min: 0.05,
            noise_std: 0.1,
            burn_in: 1000,
            seed: 0,
            rescale_unstable: true,
            max_attempts: 100,
        }
    }
}

/// Spectral radius after rescaling an unstable draw.
pub const VAR_TARGET_RADIUS: f64 = 0.95;

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variates < 2 || self.lag < 1 || self.steps < 1 {
            return Err(Error::Config("VAR needs V >= 2, L >= 1 and T >= 1".into()));
        }
        if self.extra_edges >= self.variates {
            return Err(Error::Config(format!(
                "{} extra edges do not fit in {} variates",
                self.extra_edges, self.variates
            )));
        }
        if !(self.coeff_min > 0.0 && self.coeff_scale >= self.coeff_min && self.noise_std >= 0.0) {
            return Err(Error::Config("need 0 < coeff_min <= coeff_scale and noise_std >= 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// A simulated VAR series with everything needed to replay it.
#[derive(Debug, Clone)]
pub struct VarSimulation {
    /// Series with per-lag ground truth attached.
    pub dataset: Dataset,
    /// `coefficients[l]` is `A^(l+1)`, acting on the state `l + 1` steps back.
    pub coefficients: Vec<Array2<f64>>,
    /// Innovation added at each recorded step, `V x T`.
    pub innovations: Array2<f64>,
    /// The `L` states preceding the first recorded step, oldest first (`V x L`).
    pub presample: Array2<f64>,
}

/// Spectral radius of the VAR companion matrix.
pub fn companion_spectral_radius(coefficients: &[Array2<f64>]) -> f64 {
    let lag = coefficients.len();
    let v = coefficients[0].nrows();
    let n = v * lag;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (l, a) in coefficients.iter().enumerate() {
        for ((r, c), &x) in a.indexed_iter() {
            m[(r, l * v + c)] = x;
        }
    }
    for i in v..n {
        m[(i, i - v)] = 1.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// One VAR step: `sum_l A^(l) s_{t-l} + eps`, with `history` oldest first.
pub fn var_step(coefficients: &[Array2<f64>], history: &[Array1<f64>], eps: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut next = eps.to_owned();
    for (l, a) in coefficients.iter().enumerate() {
        next += &a.dot(&history[history.len() - 1 - l]);
    }
    next
}

fn draw_coefficients(cfg: &VarConfig, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let (v, lag) = (cfg.variates, cfg.lag);
    let magnitude = Uniform::new_inclusive(cfg.coeff_min, cfg.coeff_scale).expect("validated range");
    let coeff = |rng: &mut ChaCha8Rng| {
        let m = rng.sample(magnitude);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let mut a = vec![Array2::zeros((v, v)); lag];
    for target in 0..v {
        for al in a.iter_mut() {
            al[[target, target]] = coeff(rng);
        }
        // distinct non-self sources; index i maps to the i-th variate skipping `target`
        for i in sample(rng, v - 1, cfg.extra_edges).into_iter() {
            let source = if i >= target { i + 1 } else { i };
            let l = rng.random_range(0..lag);
            a[l][[target, source]] = coeff(rng);
        }
    }
    a
}

/// Sparse stationary VAR(L) series with per-lag ground truth.
pub fn simulate_var(cfg: &VarConfig) -> Result<VarSimulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coefficients = None;
    for attempt in 0..cfg.max_attempts {
        let mut a = draw_coefficients(cfg, &mut rng);
        let rho = companion_spectral_radius(&a);
        if rho < 1.0 {
            coefficients = Some(a);
            break;
        }
        if cfg.rescale_unstable {
            // scaling A^(l) by c^l scales every companion eigenvalue by c
            let c = VAR_TARGET_RADIUS / rho;
            for (l, al) in a.iter_mut().enumerate() {
                *al *= c.powi(l as i32 + 1);
            }
            coefficients = Some(a);
            break;
        }
        log::debug!("VAR draw {attempt} rejected with spectral radius {rho:.3}");
    }
    let coefficients = coefficients.ok_or(Error::Unstable {
        attempts: cfg.max_attempts,
    })?;

    let (v, lag) = (cfg.variates, cfg.lag);
    let normal = |rng: &mut ChaCha8Rng| cfg.noise_std * Distribution::<f64>::sample(&StandardNormal, rng);
    let mut history: Vec<Array1<f64>> = vec![Array1::zeros(v); lag];
    for _ in 0..cfg.burn_in {
        let eps = Array1::from_shape_simple_fn(v, || normal(&mut rng));
        let next = var_step(&coefficients, &history, eps.view());
        history.remove(0);
        history.push(next);
    }
    let mut presample = Array2::zeros((v, lag));
    for (l, s) in history.iter().enumerate() {
        presample.column_mut(l).assign(s);
    }
    let mut values = Array2::zeros((v, cfg.steps));
    let mut innovations = Array2::zeros((v, cfg.steps));
    for t in 0..cfg.steps {
        let eps = Array1::from_shape_simple_fn(v, || normal(&mut rng));
        let next = var_step(&coefficients, &history, eps.view());
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { step: t });
        }
        values.column_mut(t).assign(&next);
        innovations.column_mut(t).assign(&eps);
        history.remove(0);
        history.push(next);
    }

    let lags = Array3::from_shape_fn((lag, v, v), |(l, a, b)| coefficients[l][[a, b]] != 0.0);
    let names: Vec<String> = (0..v).map(|i| format!("x{i}")).collect();
    let truth = GcGraph::with_lags(lags, names.clone())?;
    let dataset = Dataset::new(values, names)?.with_truth(truth)?;
    Ok(VarSimulation {
        dataset,
        coefficients,
        innovations,
        presample,
    })
}
