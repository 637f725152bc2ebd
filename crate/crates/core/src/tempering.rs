//! The temperature axis: `beta(xi)`, the confining potential on `xi`, the
//! non-separable kinetic energy and the joint energy over `(x, xi)`.
//!
//! The joint energy is `U~(x, xi) = U_t^xi(x) - F_t(xi) + psi_conf(xi)`, so the
//! `xi`-marginal tends to `exp(-psi_conf)` (flat inside the walls) as the
//! learned free energy approaches the true one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{particle_rng, Ensemble, RngPurpose};
use crate::energy::{PathEval, PathSpec};
use crate::error::{CtdsError, Result};
use crate::models::{FreeEval, Models};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub beta_min: f64,
    pub delta: f64,
    pub delta_prime: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.2,
            delta: 0.25,
            delta_prime: 1.9,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= 1.0) {
            return Err(CtdsError::InvalidConfig("beta_min must lie in (0, 1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < self.delta_prime) {
            return Err(CtdsError::InvalidConfig(
                "schedule needs 0 < delta < delta_prime".into(),
            ));
        }
        Ok(())
    }

    /// `(beta(xi), beta'(xi))`: 1 on `|xi| < delta`, `beta_min` beyond
    /// `delta_prime`, cubic smoothstep in between.
    pub fn beta(&self, xi: f64) -> (f64, f64) {
        let a = xi.abs();
        if a < self.delta {
            (1.0, 0.0)
        } else if a > self.delta_prime {
            (self.beta_min, 0.0)
        } else {
            let span = self.delta_prime - self.delta;
            let u = (a - self.delta) / span;
            let drop = 1.0 - self.beta_min;
            let beta = 1.0 - drop * (3.0 * u * u - 2.0 * u * u * u);
            let dbeta = -drop * (6.0 * u - 6.0 * u * u) / span * xi.signum();
            (beta, dbeta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfiningPotential {
    pub eta: f64,
    pub delta_tilde: f64,
}

impl Default for ConfiningPotential {
    fn default() -> Self {
        Self {
            eta: 10.0,
            delta_tilde: 2.0,
        }
    }
}

impl ConfiningPotential {
    pub fn validate(&self, schedule: &TemperatureSchedule) -> Result<()> {
        if self.eta <= 0.0 || self.delta_tilde <= schedule.delta_prime {
            return Err(CtdsError::InvalidConfig(
                "confining potential needs eta > 0 and delta_tilde > delta_prime".into(),
            ));
        }
        Ok(())
    }

    /// `(psi(xi), psi'(xi))`; zero on `[-delta_tilde, delta_tilde]`, quadratic walls outside.
    pub fn eval(&self, xi: f64) -> (f64, f64) {
        if xi > self.delta_tilde {
            let e = xi - self.delta_tilde;
            (self.eta * e * e, 2.0 * self.eta * e)
        } else if xi < -self.delta_tilde {
            let e = xi + self.delta_tilde;
            (self.eta * e * e, 2.0 * self.eta * e)
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticSpec {
    pub m_x: f64,
    pub m_xi: f64,
    /// Adds the momentum normalizer `-(d/2) log beta(xi)` to the Hamiltonian
    /// so that `exp(-H)` is the product of `exp(-U~)` with a normalized
    /// `N(0, M_x / beta)` momentum density. Without it the dynamics keep
    /// `exp(-U~) beta^(-d/2)` invariant and temperatures pool at `beta_min`.
    #[serde(default = "default_true")]
    pub normalized_momentum: bool,
}

fn default_true() -> bool {
    true
}

impl Default for KineticSpec {
    fn default() -> Self {
        Self {
            m_x: 1.0,
            m_xi: 1.0,
            normalized_momentum: true,
        }
    }
}

/// Kinetic energy and its partials.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticEval {
    pub k: f64,
    pub grad_px: Vec<f64>,
    pub grad_pxi: f64,
    pub dk_dxi: f64,
}

impl KineticSpec {
    /// `K = beta(xi) |p_x|^2 / (2 M_x) + p_xi^2 / (2 M_xi)`.
    pub fn eval(&self, schedule: &TemperatureSchedule, xi: f64, px: &[f64], pxi: f64) -> KineticEval {
        let (beta, dbeta) = schedule.beta(xi);
        let p2: f64 = px.iter().map(|p| p * p).sum();
        KineticEval {
            k: beta * p2 / (2.0 * self.m_x) + pxi * pxi / (2.0 * self.m_xi),
            grad_px: px.iter().map(|p| beta * (p / self.m_x)).collect(),
            grad_pxi: pxi / self.m_xi,
            dk_dxi: dbeta * p2 / (2.0 * self.m_x),
        }
    }

    /// `(-(d/2) log beta, -(d/2) beta' / beta)`, or zeros when disabled.
    pub fn log_normalizer(&self, schedule: &TemperatureSchedule, xi: f64, dim: usize) -> (f64, f64) {
        if !self.normalized_momentum {
            return (0.0, 0.0);
        }
        let (beta, dbeta) = schedule.beta(xi);
        let h = 0.5 * dim as f64;
        (-h * beta.ln(), -h * dbeta / beta)
    }
}

/// Tempering configuration bundled for the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Tempering {
    pub schedule: TemperatureSchedule,
    pub confining: ConfiningPotential,
    pub kinetic: KineticSpec,
}

/// Joint energy and partials for a batch of `(x, xi)` points.
#[derive(Debug, Clone)]
pub struct JointEval {
    pub u_tilde: Array1<f64>,
    pub grad_x: Array2<f64>,
    pub du_dxi: Array1<f64>,
    pub du_dt: Array1<f64>,
    pub path: PathEval,
    pub free: FreeEval,
}

/// `U~ = U_t^xi(x) - F_t(xi) + psi_conf(xi)` with all partials.
pub fn joint_energy(
    path: &PathSpec,
    models: &Models,
    confining: &ConfiningPotential,
    x: ArrayView2<'_, f64>,
    xi: ArrayView1<'_, f64>,
    t: ArrayView1<'_, f64>,
) -> Result<JointEval> {
    if !path.kind.is_continuum() {
        return Err(CtdsError::WrongPathKind("continuum"));
    }
    let pe = path.evaluate(models.correction.as_ref(), x, t, Some(xi))?;
    let free = models.free_energy.eval(t, pe.beta.view(), true)?;
    let n = x.nrows();
    let mut u_tilde = Array1::zeros(n);
    let mut du_dxi = Array1::zeros(n);
    let mut du_dt = Array1::zeros(n);
    for i in 0..n {
        let (psi, dpsi) = confining.eval(xi[i]);
        u_tilde[i] = pe.u[i] - free.f[i] + psi;
        du_dxi[i] = pe.du_dxi[i] - free.df_dbeta[i] * pe.dbeta_dxi[i] + dpsi;
        du_dt[i] = pe.du_dt[i] - free.df_dt[i];
    }
    Ok(JointEval {
        u_tilde,
        grad_x: pe.grad_x.clone(),
        du_dxi,
        du_dt,
        path: pe,
        free,
    })
}

/// Tabulated inverse CDF of the `t = 0` marginal of `xi`.
///
/// Because the free energy is anchored to the source's exact value at
/// `t = 0`, the `x`-integral of `exp(-U~_0)` is exactly `exp(-psi_conf(xi))`.
#[derive(Debug, Clone)]
pub struct XiMarginal {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl XiMarginal {
    pub const DEFAULT_POINTS: usize = 4096;

    pub fn new(confining: &ConfiningPotential, points: usize) -> Result<Self> {
        let lo = -confining.delta_tilde - 2.0;
        let hi = confining.delta_tilde + 2.0;
        Self::from_density(lo, hi, points, |xi| (-confining.eval(xi).0).exp())
    }

    /// Trapezoid-normalized CDF of an arbitrary non-negative density on `[lo, hi]`.
    pub fn from_density(lo: f64, hi: f64, points: usize, density: impl Fn(f64) -> f64) -> Result<Self> {
        if points < 16 || hi <= lo {
            return Err(CtdsError::Quadrature(format!(
                "need at least 16 grid points on a non-empty interval, got {points}"
            )));
        }
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
        let dens: Vec<f64> = grid.iter().map(|&g| density(g)).collect();
        let mut cdf = Vec::with_capacity(points);
        cdf.push(0.0);
        for i in 1..points {
            let prev = cdf[i - 1];
            cdf.push(prev + 0.5 * h * (dens[i - 1] + dens[i]));
        }
        let total = *cdf.last().expect("non-empty");
        if !(total.is_finite() && total > 0.0) {
            return Err(CtdsError::Quadrature(format!("marginal mass {total}")));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        if cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(CtdsError::Quadrature("CDF is not monotone".into()));
        }
        Ok(Self { grid, cdf })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn cdf_at(&self, xi: f64) -> f64 {
        if xi <= self.grid[0] {
            return 0.0;
        }
        if xi >= *self.grid.last().expect("non-empty") {
            return 1.0;
        }
        let j = self.grid.partition_point(|g| *g <= xi);
        let (g0, g1) = (self.grid[j - 1], self.grid[j]);
        let w = (xi - g0) / (g1 - g0);
        self.cdf[j - 1] + w * (self.cdf[j] - self.cdf[j - 1])
    }

    pub fn inverse(&self, u: f64) -> f64 {
        let j = self.cdf.partition_point(|c| *c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.grid[j - 1] + w * (self.grid[j] - self.grid[j - 1])
    }
}

/// Draws `n` augmented states at `t = 0`: `xi` from its marginal, then
/// `x ~ N(0, sigma0^2 / beta)`, `p_x ~ N(0, M_x / beta)`, `p_xi ~ N(0, M_xi)`.
pub fn sample_pi_dagger(
    path: &PathSpec,
    tempering: &Tempering,
    n: usize,
    seed: u64,
) -> Result<Ensemble> {
    if !path.kind.is_continuum() {
        return Err(CtdsError::WrongPathKind("continuum"));
    }
    let marginal = XiMarginal::new(&tempering.confining, XiMarginal::DEFAULT_POINTS)?;
    sample_pi_dagger_with(path, tempering, &marginal, n, seed)
}

pub fn sample_pi_dagger_with(
    path: &PathSpec,
    tempering: &Tempering,
    marginal: &XiMarginal,
    n: usize,
    seed: u64,
) -> Result<Ensemble> {
    let d = path.dim();
    let sched = path.schedule.as_ref().unwrap_or(&tempering.schedule);
    let kin = tempering.kinetic;
    let mut x = Array2::zeros((n, d));
    let mut px = Array2::zeros((n, d));
    let mut xi = Array1::zeros(n);
    let mut pxi = Array1::zeros(n);
    for i in 0..n {
        let mut rng = particle_rng(seed, RngPurpose::Init, i as u64);
        let u: f64 = rng.random();
        let z = marginal.inverse(u);
        let (beta, _) = sched.beta(z);
        xi[i] = z;
        let sx = (path.source.variance / beta).sqrt();
        let sp = (kin.m_x / beta).sqrt();
        for j in 0..d {
            let a: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = sx * a;
        }
        for j in 0..d {
            let a: f64 = StandardNormal.sample(&mut rng);
            px[[i, j]] = sp * a;
        }
        let a: f64 = StandardNormal.sample(&mut rng);
        pxi[i] = kin.m_xi.sqrt() * a;
    }
    Ok(Ensemble::new(x, seed)
        .with_temperature(xi)
        .with_momenta(px, Some(pxi)))
}
