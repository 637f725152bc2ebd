//! Proposal integrators: the baseline flow, controlled overdamped and
//! underdamped Langevin, and the continuously tempered sampler (CTDS).
//!
//! All schemes are Euler–Maruyama with drifts evaluated at the pre-step
//! state, and the work increment uses the same left-point values.
//! Every particle owns its own noise streams, so results do not depend on
//! how the ensemble is chunked or how many threads run it.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::PathSpec;
use crate::error::{CtdsError, Result};
use crate::models::Models;
use crate::tempering::{joint_energy, sample_pi_dagger, Tempering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RngPurpose {
    Init,
    NoiseX,
    NoiseXi,
    Batch,
    Eval,
}

impl RngPurpose {
    fn tag(self) -> u64 {
        match self {
            RngPurpose::Init => 1,
            RngPurpose::NoiseX => 2,
            RngPurpose::NoiseXi => 3,
            RngPurpose::Batch => 4,
            RngPurpose::Eval => 5,
        }
    }
}

/// Independent stream for one particle: the key mixes run seed and purpose,
/// the ChaCha stream id is the particle index.
pub fn particle_rng(seed: u64, purpose: RngPurpose, particle: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.tag().to_le_bytes());
    key[16..24].copy_from_slice(&0x6374_6473_u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(particle);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    Overdamped,
    Underdamped,
    Ctds,
}

impl Scheme {
    pub fn is_inertial(self) -> bool {
        matches!(self, Scheme::Underdamped | Scheme::Ctds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: f64,
    /// Spatial scaling; unused by the baseline and overdamped schemes.
    pub gamma_x: f64,
    /// Spatial damping, or the Langevin strength of the overdamped scheme.
    pub eps_x: f64,
    pub gamma_xi: f64,
    pub eps_xi: f64,
    pub track_work: bool,
}

impl IntegratorConfig {
    pub fn baseline(dt: f64, horizon: f64) -> Self {
        Self {
            scheme: Scheme::Baseline,
            dt,
            horizon,
            gamma_x: 0.0,
            eps_x: 0.0,
            gamma_xi: 0.0,
            eps_xi: 0.0,
            track_work: true,
        }
    }

    pub fn overdamped(eps: f64, dt: f64, horizon: f64) -> Self {
        Self {
            scheme: Scheme::Overdamped,
            eps_x: eps,
            ..Self::baseline(dt, horizon)
        }
    }

    pub fn underdamped(gamma: f64, eps: f64, dt: f64, horizon: f64) -> Self {
        Self {
            scheme: Scheme::Underdamped,
            gamma_x: gamma,
            eps_x: eps,
            ..Self::baseline(dt, horizon)
        }
    }

    pub fn ctds(gamma_x: f64, eps_x: f64, gamma_xi: f64, eps_xi: f64, dt: f64, horizon: f64) -> Self {
        Self {
            scheme: Scheme::Ctds,
            gamma_x,
            eps_x,
            gamma_xi,
            eps_xi,
            ..Self::baseline(dt, horizon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CtdsError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return Err(CtdsError::InvalidConfig(format!(
                "horizon must lie in (0, 1], got {}",
                self.horizon
            )));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            return Err(CtdsError::InvalidConfig(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.dt
            )));
        }
        for (name, v) in [
            ("gamma_x", self.gamma_x),
            ("eps_x", self.eps_x),
            ("gamma_xi", self.gamma_xi),
            ("eps_xi", self.eps_xi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CtdsError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// One particle at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub xi: Option<f64>,
    pub px: Option<Vec<f64>>,
    pub pxi: Option<f64>,
    pub t: f64,
    pub work: f64,
}

/// A population of particles advanced in lockstep.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub x: Array2<f64>,
    pub xi: Option<Array1<f64>>,
    pub px: Option<Array2<f64>>,
    pub pxi: Option<Array1<f64>>,
    pub work: Array1<f64>,
    pub ids: Vec<u64>,
    pub steps: usize,
    pub t: f64,
    /// Particles dropped after producing a non-finite state.
    pub diverged: usize,
    noise_x: Vec<ChaCha8Rng>,
    noise_xi: Vec<ChaCha8Rng>,
}

impl Ensemble {
    pub fn new(x: Array2<f64>, seed: u64) -> Self {
        let n = x.nrows();
        let ids: Vec<u64> = (0..n as u64).collect();
        Self::with_ids(x, ids, seed)
    }

    pub fn with_ids(x: Array2<f64>, ids: Vec<u64>, seed: u64) -> Self {
        assert_eq!(x.nrows(), ids.len(), "one id per particle");
        let noise_x = ids.iter().map(|&i| particle_rng(seed, RngPurpose::NoiseX, i)).collect();
        let noise_xi = ids.iter().map(|&i| particle_rng(seed, RngPurpose::NoiseXi, i)).collect();
        Self {
            work: Array1::zeros(x.nrows()),
            x,
            xi: None,
            px: None,
            pxi: None,
            ids,
            steps: 0,
            t: 0.0,
            diverged: 0,
            noise_x,
            noise_xi,
        }
    }

    pub fn with_temperature(mut self, xi: Array1<f64>) -> Self {
        assert_eq!(xi.len(), self.len());
        self.xi = Some(xi);
        self
    }

    pub fn with_momenta(mut self, px: Array2<f64>, pxi: Option<Array1<f64>>) -> Self {
        assert_eq!(px.dim(), self.x.dim());
        self.px = Some(px);
        if let Some(p) = &pxi {
            assert_eq!(p.len(), self.len());
        }
        self.pxi = pxi;
        self
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn state(&self, i: usize) -> AugmentedState {
        AugmentedState {
            x: self.x.row(i).to_vec(),
            xi: self.xi.as_ref().map(|v| v[i]),
            px: self.px.as_ref().map(|p| p.row(i).to_vec()),
            pxi: self.pxi.as_ref().map(|v| v[i]),
            t: self.t,
            work: self.work[i],
        }
    }

    /// `beta(xi)` per particle, or ones for single-temperature ensembles.
    pub fn betas(&self, path: &PathSpec) -> Result<Array1<f64>> {
        Ok(path.temperatures(self.len(), self.xi.as_ref().map(|v| v.view()))?.0)
    }

    fn finite_rows(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| {
                self.x.row(i).iter().all(|v| v.is_finite())
                    && self.work[i].is_finite()
                    && self.xi.as_ref().is_none_or(|v| v[i].is_finite())
                    && self.pxi.as_ref().is_none_or(|v| v[i].is_finite())
                    && self
                        .px
                        .as_ref()
                        .is_none_or(|p| p.row(i).iter().all(|v| v.is_finite()))
            })
            .collect()
    }

    /// Keeps the rows flagged `true`, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        let idx: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
        if idx.len() == self.len() {
            return;
        }
        self.diverged += self.len() - idx.len();
        self.x = self.x.select(Axis(0), &idx);
        self.work = self.work.select(Axis(0), &idx);
        self.xi = self.xi.as_ref().map(|v| v.select(Axis(0), &idx));
        self.pxi = self.pxi.as_ref().map(|v| v.select(Axis(0), &idx));
        self.px = self.px.as_ref().map(|p| p.select(Axis(0), &idx));
        self.ids = idx.iter().map(|&i| self.ids[i]).collect();
        let take = |v: &mut Vec<ChaCha8Rng>| {
            let old = std::mem::take(v);
            *v = old
                .into_iter()
                .enumerate()
                .filter(|(i, _)| keep[*i])
                .map(|(_, r)| r)
                .collect();
        };
        take(&mut self.noise_x);
        take(&mut self.noise_xi);
    }

    /// Splits into consecutive chunks of at most `size` particles.
    pub fn into_chunks(self, size: usize) -> Vec<Ensemble> {
        let n = self.len();
        let size = size.max(1);
        let mut out = Vec::new();
        let mut noise_x = self.noise_x.into_iter();
        let mut noise_xi = self.noise_xi.into_iter();
        let mut start = 0;
        while start < n {
            let end = (start + size).min(n);
            let r = s![start..end];
            out.push(Ensemble {
                x: self.x.slice(s![start..end, ..]).to_owned(),
                xi: self.xi.as_ref().map(|v| v.slice(r).to_owned()),
                px: self.px.as_ref().map(|p| p.slice(s![start..end, ..]).to_owned()),
                pxi: self.pxi.as_ref().map(|v| v.slice(r).to_owned()),
                work: self.work.slice(r).to_owned(),
                ids: self.ids[start..end].to_vec(),
                steps: self.steps,
                t: self.t,
                diverged: 0,
                noise_x: noise_x.by_ref().take(end - start).collect(),
                noise_xi: noise_xi.by_ref().take(end - start).collect(),
            });
            start = end;
        }
        if let Some(first) = out.first_mut() {
            first.diverged = self.diverged;
        }
        out
    }

    /// Concatenates chunks produced by [`into_chunks`](Self::into_chunks).
    pub fn concat(chunks: Vec<Ensemble>) -> Result<Ensemble> {
        let first = chunks.first().ok_or(CtdsError::Empty("ensemble chunks"))?;
        let (steps, t, d) = (first.steps, first.t, first.dim());
        let has_xi = first.xi.is_some();
        let has_px = first.px.is_some();
        let has_pxi = first.pxi.is_some();
        let n: usize = chunks.iter().map(|c| c.len()).sum();
        let mut x = Array2::zeros((0, d));
        let mut xi = Vec::with_capacity(n);
        let mut px = Array2::zeros((0, d));
        let mut pxi = Vec::with_capacity(n);
        let mut work = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut noise_x = Vec::with_capacity(n);
        let mut noise_xi = Vec::with_capacity(n);
        let mut diverged = 0;
        for c in chunks {
            x.append(Axis(0), c.x.view()).expect("same width");
            if let Some(v) = &c.xi {
                xi.extend(v.iter());
            }
            if let Some(p) = &c.px {
                px.append(Axis(0), p.view()).expect("same width");
            }
            if let Some(v) = &c.pxi {
                pxi.extend(v.iter());
            }
            work.extend(c.work.iter());
            ids.extend(c.ids);
            noise_x.extend(c.noise_x);
            noise_xi.extend(c.noise_xi);
            diverged += c.diverged;
        }
        Ok(Ensemble {
            x,
            xi: has_xi.then(|| Array1::from(xi)),
            px: has_px.then_some(px),
            pxi: has_pxi.then(|| Array1::from(pxi)),
            work: Array1::from(work),
            ids,
            steps,
            t,
            diverged,
            noise_x,
            noise_xi,
        })
    }
}

/// Draws the `t = 0` ensemble appropriate to the scheme: source positions,
/// plus `p_x ~ N(0, M_x)` for underdamped, plus the extended density for CTDS.
pub fn initial_ensemble(
    path: &PathSpec,
    tempering: &Tempering,
    scheme: Scheme,
    n: usize,
    seed: u64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(CtdsError::Empty("particle count"));
    }
    if scheme == Scheme::Ctds {
        return sample_pi_dagger(path, tempering, n, seed);
    }
    let d = path.dim();
    let sx = path.source.variance.sqrt();
    let sp = tempering.kinetic.m_x.sqrt();
    let mut x = Array2::zeros((n, d));
    let mut px = Array2::zeros((n, d));
    for i in 0..n {
        let mut rng = particle_rng(seed, RngPurpose::Init, i as u64);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = sx * z;
        }
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            px[[i, j]] = sp * z;
        }
    }
    let ens = Ensemble::new(x, seed);
    Ok(if scheme == Scheme::Underdamped {
        ens.with_momenta(px, None)
    } else {
        ens
    })
}

/// Left-point quantities shared by the update rule and the work increment.
#[derive(Debug, Clone)]
pub struct Drift {
    pub mu: Array2<f64>,
    pub div: Option<Array1<f64>>,
    /// `grad_x` of the (joint) energy.
    pub grad_x: Option<Array2<f64>>,
    /// `d/dt` of the (joint) energy.
    pub du_dt: Option<Array1<f64>>,
    pub du_dxi: Option<Array1<f64>>,
    pub beta: Array1<f64>,
    pub dbeta: Array1<f64>,
}

/// `dA = [div mu - dU/dt - mu . grad_x U] dt`, evaluated at the pre-step state.
pub fn work_increment(drift: &Drift, dt: f64) -> Result<Array1<f64>> {
    let grad = drift.grad_x.as_ref().ok_or(CtdsError::Numerical("work needs grad_x".into()))?;
    let du_dt = drift.du_dt.as_ref().ok_or(CtdsError::Numerical("work needs dU/dt".into()))?;
    let n = drift.mu.nrows();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let dot: f64 = drift.mu.row(i).dot(&grad.row(i));
        let div = drift.div.as_ref().map_or(0.0, |d| d[i]);
        out[i] = (div - du_dt[i] - dot) * dt;
    }
    Ok(out)
}

/// Everything a step needs, borrowed read-only.
#[derive(Debug, Clone, Copy)]
pub struct Proposal<'a> {
    pub path: &'a PathSpec,
    pub models: &'a Models,
    pub tempering: &'a Tempering,
    pub cfg: &'a IntegratorConfig,
}

impl<'a> Proposal<'a> {
    pub fn new(
        path: &'a PathSpec,
        models: &'a Models,
        tempering: &'a Tempering,
        cfg: &'a IntegratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.scheme == Scheme::Ctds && !path.kind.is_continuum() {
            return Err(CtdsError::WrongPathKind("continuum"));
        }
        if models.control.dim() != path.dim() {
            return Err(CtdsError::DimensionMismatch {
                what: "control output",
                expected: path.dim(),
                got: models.control.dim(),
            });
        }
        Ok(Self {
            path,
            models,
            tempering,
            cfg,
        })
    }

    fn needs_energy(&self) -> bool {
        self.cfg.track_work || self.cfg.scheme != Scheme::Baseline
    }

    /// Evaluates control and energy partials at the ensemble's current state.
    pub fn drift(&self, ens: &Ensemble) -> Result<Drift> {
        let n = ens.len();
        let tv = Array1::from_elem(n, ens.t);
        let with_div = self.cfg.track_work && !matches!(self.models.control, crate::models::Control::Zero { .. });
        if self.cfg.scheme == Scheme::Ctds {
            let xi = ens.xi.as_ref().ok_or(CtdsError::MissingTemperature)?;
            let j = joint_energy(
                self.path,
                self.models,
                &self.tempering.confining,
                ens.x.view(),
                xi.view(),
                tv.view(),
            )?;
            let beta = j.path.beta.clone();
            let c = self.models.control.eval(ens.x.view(), tv.view(), Some(beta.view()), with_div)?;
            return Ok(Drift {
                mu: c.mu,
                div: c.div,
                grad_x: Some(j.grad_x),
                du_dt: Some(j.du_dt),
                du_dxi: Some(j.du_dxi),
                dbeta: j.path.dbeta_dxi,
                beta,
            });
        }
        // Single-temperature schemes run at beta = 1 even on a continuum path.
        let ones = Array1::ones(n);
        let xi_one = self.path.kind.is_continuum().then(|| Array1::<f64>::zeros(n));
        let c = self.models.control.eval(ens.x.view(), tv.view(), Some(ones.view()), with_div)?;
        let (grad_x, du_dt) = if self.needs_energy() {
            let pe = self.path.evaluate(
                self.models.correction.as_ref(),
                ens.x.view(),
                tv.view(),
                xi_one.as_ref().map(|v| v.view()),
            )?;
            (Some(pe.grad_x), Some(pe.du_dt))
        } else {
            (None, None)
        };
        Ok(Drift {
            mu: c.mu,
            div: c.div,
            grad_x,
            du_dt,
            du_dxi: None,
            beta: ones,
            dbeta: Array1::zeros(n),
        })
    }

    /// Advances by one step of the configured scheme.
    pub fn step(&self, ens: &mut Ensemble) -> Result<()> {
        if ens.is_empty() {
            return Ok(());
        }
        let drift = self.drift(ens)?;
        if self.cfg.track_work {
            let dw = work_increment(&drift, self.cfg.dt)?;
            ens.work += &dw;
        }
        match self.cfg.scheme {
            Scheme::Baseline => self.update_baseline(ens, &drift),
            Scheme::Overdamped => self.update_overdamped(ens, &drift)?,
            Scheme::Underdamped | Scheme::Ctds => self.update_inertial(ens, &drift)?,
        }
        ens.steps += 1;
        ens.t = ens.steps as f64 * self.cfg.dt;
        let keep = ens.finite_rows();
        ens.retain(&keep);
        Ok(())
    }

    fn update_baseline(&self, ens: &mut Ensemble, drift: &Drift) {
        let dt = self.cfg.dt;
        ens.x.zip_mut_with(&drift.mu, |x, m| *x += m * dt);
    }

    /// `x += (mu - eps grad U) dt + sqrt(2 eps dt) z`.
    fn update_overdamped(&self, ens: &mut Ensemble, drift: &Drift) -> Result<()> {
        let dt = self.cfg.dt;
        let eps = self.cfg.eps_x;
        let grad = drift.grad_x.as_ref().ok_or(CtdsError::Numerical("missing gradient".into()))?;
        let amp = (2.0 * eps * dt).sqrt();
        for (i, mut row) in ens.x.rows_mut().into_iter().enumerate() {
            let rng = &mut ens.noise_x[i];
            for j in 0..row.len() {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = row[j] + (drift.mu[[i, j]] - eps * grad[[i, j]]) * dt + amp * z;
            }
        }
        Ok(())
    }

    /// Shared by underdamped and CTDS; the underdamped scheme is the CTDS
    /// `x`-block at `beta = 1`.
    fn update_inertial(&self, ens: &mut Ensemble, drift: &Drift) -> Result<()> {
        let dt = self.cfg.dt;
        let (gx, ex) = (self.cfg.gamma_x, self.cfg.eps_x);
        let m_x = self.tempering.kinetic.m_x;
        let grad = drift.grad_x.as_ref().ok_or(CtdsError::Numerical("missing gradient".into()))?;
        let px = ens.px.as_mut().ok_or(CtdsError::InvalidConfig(
            "inertial schemes need spatial momenta".into(),
        ))?;
        let n = ens.x.nrows();
        let d = ens.x.ncols();
        let ctds = self.cfg.scheme == Scheme::Ctds;
        // dK/dxi = beta' |p_x|^2 / (2 M_x), taken before p_x moves, plus the
        // momentum normalizer's -(d/2) beta' / beta when enabled.
        let half_d = if self.tempering.kinetic.normalized_momentum { 0.5 * d as f64 } else { 0.0 };
        let dk_dxi: Vec<f64> = if ctds {
            (0..n)
                .map(|i| {
                    let db = drift.dbeta[i];
                    db * px.row(i).dot(&px.row(i)) / (2.0 * m_x) - half_d * db / drift.beta[i]
                })
                .collect()
        } else {
            Vec::new()
        };
        let amp_x = (2.0 * gx * ex * dt).sqrt();
        for i in 0..n {
            let beta = drift.beta[i];
            let rng = &mut ens.noise_x[i];
            for j in 0..d {
                let p = px[[i, j]];
                let dk_dp = beta * p / m_x;
                let z: f64 = StandardNormal.sample(rng);
                ens.x[[i, j]] += (drift.mu[[i, j]] + gx * dk_dp) * dt;
                px[[i, j]] = p + gx * (-grad[[i, j]] - ex * dk_dp) * dt + amp_x * z;
            }
        }
        if !ctds {
            return Ok(());
        }
        let (gc, ec) = (self.cfg.gamma_xi, self.cfg.eps_xi);
        let m_xi = self.tempering.kinetic.m_xi;
        let amp_c = (2.0 * gc * ec * dt).sqrt();
        let du_dxi = drift.du_dxi.as_ref().ok_or(CtdsError::MissingTemperature)?;
        let xi = ens.xi.as_mut().ok_or(CtdsError::MissingTemperature)?;
        let pxi = ens.pxi.as_mut().ok_or(CtdsError::InvalidConfig(
            "CTDS needs a temperature momentum".into(),
        ))?;
        for i in 0..n {
            let p = pxi[i];
            let dk_dp = p / m_xi;
            let z: f64 = StandardNormal.sample(&mut ens.noise_xi[i]);
            xi[i] += gc * dk_dp * dt;
            pxi[i] = p + gc * (-(du_dxi[i] + dk_dxi[i]) - ec * dk_dp) * dt + amp_c * z;
        }
        Ok(())
    }
}

/// Snapshots of every particle at every step time, column-major by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub dim: usize,
    /// Row-major `len x dim`.
    pub x: Vec<f64>,
    /// Empty for single-temperature schemes.
    pub xi: Vec<f64>,
    pub t: Vec<f64>,
    pub work: Vec<f64>,
    pub id: Vec<u64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn has_temperature(&self) -> bool {
        !self.xi.is_empty()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn record(&mut self, ens: &Ensemble) {
        self.dim = ens.dim();
        self.x.extend(ens.x.iter());
        if let Some(xi) = &ens.xi {
            self.xi.extend(xi.iter());
        }
        self.t.extend(std::iter::repeat_n(ens.t, ens.len()));
        self.work.extend(ens.work.iter());
        self.id.extend(ens.ids.iter());
    }

    fn append(&mut self, other: TrajectoryBatch) {
        if self.is_empty() {
            *self = other;
            return;
        }
        self.x.extend(other.x);
        self.xi.extend(other.xi);
        self.t.extend(other.t);
        self.work.extend(other.work);
        self.id.extend(other.id);
    }

    /// Little-endian columnar encoding: header, then x, xi, t, work, id.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.x.len() + self.xi.len() + 3 * self.len()));
        out.extend_from_slice(b"CTDSTRJ1");
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.has_temperature() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in self.x.iter().chain(&self.xi).chain(&self.t).chain(&self.work) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.id {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || CtdsError::Mismatch("malformed trajectory snapshot".into());
        if bytes.len() < 24 || &bytes[..8] != b"CTDSTRJ1" {
            return Err(bad());
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let has_xi = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) != 0;
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let nxi = if has_xi { n } else { 0 };
        let floats = n * dim + nxi + 2 * n;
        if bytes.len() != 24 + 8 * (floats + n) {
            return Err(bad());
        }
        let mut words = bytes[24..].chunks_exact(8).map(|c| c.try_into().unwrap());
        let mut take_f = |k: usize| -> Vec<f64> {
            words.by_ref().take(k).map(f64::from_le_bytes).collect()
        };
        let x = take_f(n * dim);
        let xi = take_f(nxi);
        let t = take_f(n);
        let work = take_f(n);
        let id = words.map(u64::from_le_bytes).collect();
        Ok(Self {
            dim,
            x,
            xi,
            t,
            work,
            id,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProposalRun {
    pub ensemble: Ensemble,
    pub snapshots: Option<TrajectoryBatch>,
}

/// Particles per parallel work unit. Fixed so results never depend on the
/// number of threads.
pub const CHUNK: usize = 256;

impl Proposal<'_> {
    /// Integrates `ens` to the configured horizon, optionally recording every
    /// intermediate state.
    pub fn run(&self, ens: Ensemble, record: bool) -> Result<ProposalRun> {
        let steps = self.cfg.num_steps().saturating_sub(ens.steps);
        let results: Vec<Result<(Ensemble, TrajectoryBatch)>> = ens
            .into_chunks(CHUNK)
            .into_par_iter()
            .map(|mut chunk| {
                let mut snaps = TrajectoryBatch::default();
                if record {
                    snaps.record(&chunk);
                }
                for _ in 0..steps {
                    self.step(&mut chunk)?;
                    if record {
                        snaps.record(&chunk);
                    }
                }
                Ok((chunk, snaps))
            })
            .collect();
        let mut chunks = Vec::with_capacity(results.len());
        let mut all = TrajectoryBatch::default();
        for r in results {
            let (c, s) = r?;
            chunks.push(c);
            all.append(s);
        }
        Ok(ProposalRun {
            ensemble: Ensemble::concat(chunks)?,
            snapshots: record.then_some(all),
        })
    }
}

/// Samples the initial ensemble and integrates `n` particles to the horizon.
pub fn run_proposal(
    proposal: &Proposal<'_>,
    n: usize,
    seed: u64,
    record: bool,
) -> Result<ProposalRun> {
    let ens = initial_ensemble(proposal.path, proposal.tempering, proposal.cfg.scheme, n, seed)?;
    proposal.run(ens, record)
}

/// Effective sample size `(sum w)^2 / sum w^2` of `w = exp(log_w)`.
pub fn effective_sample_size(log_w: ArrayView1<'_, f64>) -> f64 {
    let max = log_w.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &l in log_w {
        let w = (l - max).exp();
        if w.is_finite() {
            s1 += w;
            s2 += w * w;
        }
    }
    if s2 > 0.0 {
        s1 * s1 / s2
    } else {
        0.0
    }
}

/// Self-normalized `log E[exp(A)]`.
pub fn log_mean_exp(a: ArrayView1<'_, f64>) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = a.iter().map(|v| (v - max).exp()).sum();
    max + (s / a.len() as f64).ln()
}
