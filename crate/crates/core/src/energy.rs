//! Source/target densities and the density paths between them.
//!
//! Energies are unnormalized negative log-densities, `U = -log pi_hat`.
//! Tempered (continuum) energies scale exactly with the inverse temperature,
//! `U_t^beta(x) = beta * U_t^1(x)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CtdsError, Result};
use crate::models::PathCorrectionNet;
use crate::nn::Direction;
use crate::tempering::TemperatureSchedule;

/// Isotropic Gaussian source `N(0, variance * I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSource {
    pub dim: usize,
    pub variance: f64,
}

impl GaussianSource {
    pub fn gmm_default() -> Self {
        Self {
            dim: 2,
            variance: 5.0,
        }
    }

    /// Normalized log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * r2 / self.variance
            - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * self.variance).ln()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = self.variance.sqrt();
        Array2::from_shape_fn((n, self.dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureTarget {
    /// Row-major `n_components x dim`.
    pub means: Vec<f64>,
    pub dim: usize,
    pub component_std: f64,
    pub weights: Vec<f64>,
    pub mean_seed: u64,
}

impl GaussianMixtureTarget {
    /// Equal-weight mixture with means uniform on `[-box_half_width, box_half_width]^dim`.
    pub fn random(
        n_components: usize,
        dim: usize,
        box_half_width: f64,
        component_std: f64,
        mean_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mean_seed);
        let means = (0..n_components * dim)
            .map(|_| rng.random_range(-box_half_width..box_half_width))
            .collect();
        Self {
            means,
            dim,
            component_std,
            weights: vec![1.0 / n_components as f64; n_components],
            mean_seed,
        }
    }

    /// The 40-mode benchmark: means in `[-40, 40]^2`, component std 0.25.
    pub fn gmm40(mean_seed: u64) -> Self {
        Self::random(40, 2, 40.0, 0.25, mean_seed)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_components();
        if n == 0 || self.means.len() != n * self.dim {
            return Err(CtdsError::InvalidConfig("mixture means/weights disagree".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| *w <= 0.0) {
            return Err(CtdsError::InvalidConfig("mixture weights must sum to 1".into()));
        }
        if self.component_std <= 0.0 {
            return Err(CtdsError::InvalidConfig("component std must be positive".into()));
        }
        Ok(())
    }

    /// Normalized log-density and its gradient, via a stabilised log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let var = self.component_std * self.component_std;
        let n = self.n_components();
        let mut logits = Vec::with_capacity(n);
        for k in 0..n {
            let m = self.mean(k);
            let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            logits.push(self.weights[k].ln() - 0.5 * r2 / var);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (k, l) in logits.iter().enumerate() {
            let r = (l - max).exp();
            total += r;
            for (g, (xi, mi)) in grad.iter_mut().zip(x.iter().zip(self.mean(k))) {
                *g += r * (mi - xi) / var;
            }
        }
        grad.iter_mut().for_each(|g| *g /= total);
        let norm = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * var).ln();
        (max + total.ln() + norm, grad)
    }

    /// Draws `n` points: categorical component, then Gaussian perturbation.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        self.sample_labeled(n, seed).0
    }

    /// Like [`sample`](Self::sample) but also returns the component of each point.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cdf = Vec::with_capacity(self.n_components());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut out = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c <= u).min(self.n_components() - 1);
            labels.push(k);
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = self.mean(k)[j] + self.component_std * z;
            }
        }
        (out, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Mixture(GaussianMixtureTarget),
    /// Unnormalized isotropic Gaussian energy `|x|^2 / (2 variance)`.
    Gaussian { dim: usize, variance: f64 },
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Mixture(m) => m.dim,
            Target::Gaussian { dim, .. } => *dim,
        }
    }

    /// Energy `U_1` and gradient.
    pub fn energy(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Target::Mixture(m) => {
                let (lp, g) = m.log_density(x);
                (-lp, g.into_iter().map(|v| -v).collect())
            }
            Target::Gaussian { variance, .. } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (0.5 * r2 / variance, x.iter().map(|v| v / variance).collect())
            }
        }
    }

    /// Unnormalized log-density `-U_1`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        -self.energy(x).0
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        match self {
            Target::Mixture(m) => m.sample(n, seed),
            Target::Gaussian { dim, variance } => GaussianSource {
                dim: *dim,
                variance: *variance,
            }
            .sample(n, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Linear,
    Learned,
    LinearContinuum,
    LearnedContinuum,
}

impl PathKind {
    pub fn is_continuum(self) -> bool {
        matches!(self, PathKind::LinearContinuum | PathKind::LearnedContinuum)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PathKind::Learned | PathKind::LearnedContinuum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub kind: PathKind,
    pub source: GaussianSource,
    pub target: Target,
    pub schedule: Option<TemperatureSchedule>,
}

/// Path energy and partials for a batch of points.
#[derive(Debug, Clone)]
pub struct PathEval {
    pub u: Array1<f64>,
    pub grad_x: Array2<f64>,
    pub du_dt: Array1<f64>,
    pub du_dxi: Array1<f64>,
    /// `beta(xi)` per point (ones for single-temperature paths).
    pub beta: Array1<f64>,
    pub dbeta_dxi: Array1<f64>,
}

impl PathSpec {
    pub fn new(
        kind: PathKind,
        source: GaussianSource,
        target: Target,
        schedule: Option<TemperatureSchedule>,
    ) -> Result<Self> {
        if source.dim != target.dim() {
            return Err(CtdsError::DimensionMismatch {
                what: "source/target dimension",
                expected: source.dim,
                got: target.dim(),
            });
        }
        if kind.is_continuum() && schedule.is_none() {
            return Err(CtdsError::InvalidConfig(
                "continuum paths require a temperature schedule".into(),
            ));
        }
        Ok(Self {
            kind,
            source,
            target,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.source.dim
    }

    /// Temperatures `(beta, beta')` for a batch; ones/zeros off-continuum.
    pub fn temperatures(
        &self,
        n: usize,
        xi: Option<ArrayView1<'_, f64>>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        if !self.kind.is_continuum() {
            return Ok((Array1::ones(n), Array1::zeros(n)));
        }
        let xi = xi.ok_or(CtdsError::MissingTemperature)?;
        let sched = self.schedule.as_ref().expect("validated");
        let mut beta = Array1::zeros(n);
        let mut dbeta = Array1::zeros(n);
        for (i, &z) in xi.iter().enumerate() {
            let (b, db) = sched.beta(z);
            beta[i] = b;
            dbeta[i] = db;
        }
        Ok((beta, dbeta))
    }

    /// Untempered linear-interpolation energy `U_t^1` (no learned correction).
    pub fn base_energy(&self, x: &[f64], t: f64) -> (f64, Vec<f64>, f64) {
        let var0 = self.source.variance;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let u0 = 0.5 * r2 / var0;
        let (u1, g1) = self.target.energy(x);
        let u = (1.0 - t) * u0 + t * u1;
        let grad = x
            .iter()
            .zip(&g1)
            .map(|(xi, g1i)| (1.0 - t) * xi / var0 + t * g1i)
            .collect();
        (u, grad, u1 - u0)
    }

    /// Batched path energy with all partials.
    pub fn evaluate(
        &self,
        correction: Option<&PathCorrectionNet>,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        xi: Option<ArrayView1<'_, f64>>,
    ) -> Result<PathEval> {
        let n = x.nrows();
        let d = self.dim();
        if x.ncols() != d {
            return Err(CtdsError::DimensionMismatch {
                what: "path energy input",
                expected: d,
                got: x.ncols(),
            });
        }
        let (beta, dbeta) = self.temperatures(n, xi)?;
        let mut u = Array1::zeros(n);
        let mut grad_x = Array2::zeros((n, d));
        let mut du_dt = Array1::zeros(n);
        let mut du_dxi = Array1::zeros(n);
        for i in 0..n {
            let xi_row = x.row(i);
            let xs = xi_row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| xi_row.to_vec());
            let (ub, gb, dtb) = self.base_energy(&xs, t[i]);
            u[i] = beta[i] * ub;
            for j in 0..d {
                grad_x[[i, j]] = beta[i] * gb[j];
            }
            du_dt[i] = beta[i] * dtb;
            du_dxi[i] = dbeta[i] * ub;
        }
        if self.kind.is_learned() {
            let corr = correction.ok_or_else(|| {
                CtdsError::InvalidConfig("learned path requires a correction network".into())
            })?;
            let tape = corr.forward(x, t, true)?;
            let uc = tape.value().column(0).to_owned();
            let uc_t = tape.tangent(Direction::Time).expect("requested").column(0).to_owned();
            for i in 0..n {
                let ti = t[i];
                let s = ti * (1.0 - ti);
                u[i] += beta[i] * s * uc[i];
                du_dt[i] += beta[i] * ((1.0 - 2.0 * ti) * uc[i] + s * uc_t[i]);
                du_dxi[i] += dbeta[i] * s * uc[i];
            }
            for j in 0..d {
                let g = tape.tangent(Direction::X(j)).expect("requested");
                for i in 0..n {
                    let s = t[i] * (1.0 - t[i]);
                    grad_x[[i, j]] += beta[i] * s * g[[i, 0]];
                }
            }
        }
        Ok(PathEval {
            u,
            grad_x,
            du_dt,
            du_dxi,
            beta,
            dbeta_dxi: dbeta,
        })
    }

    /// Single-point `(U, grad_x U, dU/dt, dU/dxi)`.
    pub fn energy_at(
        &self,
        correction: Option<&PathCorrectionNet>,
        x: &[f64],
        t: f64,
        xi: Option<f64>,
    ) -> Result<(f64, Vec<f64>, f64, f64)> {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|_| {
            CtdsError::DimensionMismatch {
                what: "path energy input",
                expected: self.dim(),
                got: x.len(),
            }
        })?;
        let ta = Array1::from(vec![t]);
        let xia = xi.map(|v| Array1::from(vec![v]));
        let ev = self.evaluate(correction, xa.view(), ta.view(), xia.as_ref().map(|a| a.view()))?;
        Ok((ev.u[0], ev.grad_x.row(0).to_vec(), ev.du_dt[0], ev.du_dxi[0]))
    }
}

/// Gaussian-to-Gaussian linear path with closed-form control and free energy.
///
/// With `a_t = (1 - t) / sigma0^2 + t / sigma1^2` the path density is
/// `N(0, I / a_t)`, the transporting control is `(sigma_t' / sigma_t) x`,
/// and `F_t = -(d/2) log(2 pi / a_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracle {
    pub sigma0: f64,
    pub sigma1: f64,
    pub dim: usize,
}

impl GaussianOracle {
    pub fn new(sigma0: f64, sigma1: f64, dim: usize) -> Self {
        Self {
            sigma0,
            sigma1,
            dim,
        }
    }

    pub fn precision(&self, t: f64) -> f64 {
        (1.0 - t) / (self.sigma0 * self.sigma0) + t / (self.sigma1 * self.sigma1)
    }

    pub fn precision_rate(&self) -> f64 {
        1.0 / (self.sigma1 * self.sigma1) - 1.0 / (self.sigma0 * self.sigma0)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.precision(t).powf(-0.5)
    }

    /// `sigma_t' / sigma_t`.
    pub fn log_sigma_rate(&self, t: f64) -> f64 {
        -0.5 * self.precision_rate() / self.precision(t)
    }

    pub fn exact_control(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = self.log_sigma_rate(t);
        x.iter().map(|v| c * v).collect()
    }

    /// Free energy of the path at inverse temperature `beta`.
    pub fn free_energy(&self, t: f64, beta: f64) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI / (beta * self.precision(t))).ln()
    }

    pub fn free_energy_rate(&self, t: f64) -> f64 {
        0.5 * self.dim as f64 * self.precision_rate() / self.precision(t)
    }

    /// `Z_1 / Z_0 = (sigma1 / sigma0)^d`.
    pub fn partition_ratio(&self) -> f64 {
        (self.sigma1 / self.sigma0).powi(self.dim as i32)
    }

    pub fn path(&self, kind: PathKind, schedule: Option<TemperatureSchedule>) -> Result<PathSpec> {
        PathSpec::new(
            kind,
            GaussianSource {
                dim: self.dim,
                variance: self.sigma0 * self.sigma0,
            },
            Target::Gaussian {
                dim: self.dim,
                variance: self.sigma1 * self.sigma1,
            },
            schedule,
        )
    }
}
