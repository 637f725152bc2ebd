//! PINN residuals and losses, the replay buffer, the curriculum, Adam and
//! the epoch loop.
//!
//! The residual of the continuity equation in log-density form is
//! `r = dF/dt - dU/dt + div mu - grad U . mu`. Every term comes from the
//! networks' exact derivative blocks, and parameter gradients flow back
//! through those blocks.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    effective_sample_size, particle_rng, run_proposal, IntegratorConfig, Proposal, RngPurpose,
    Scheme, TrajectoryBatch,
};
use crate::energy::{PathKind, PathSpec};
use crate::error::{CtdsError, Result};
use crate::models::{
    Control, ControlNet, FreeEnergyKind, FreeEnergyModel, FreeEnergyNet, Models, PathCorrectionNet,
};
use crate::nn::{Activation, Direction, FourierSpec, NetParams, NetSpec, Network};
use crate::tempering::Tempering;

/// Network sizes and Fourier embeddings shared by the three models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub x_features: Option<FourierSpec>,
    pub time_features: Option<FourierSpec>,
    pub temperature_features: Option<FourierSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            depth: 3,
            x_features: Some(FourierSpec {
                num_features: 100,
                frequency_scale: 0.1,
            }),
            time_features: Some(FourierSpec {
                num_features: 20,
                frequency_scale: 5.0,
            }),
            temperature_features: Some(FourierSpec {
                num_features: 20,
                frequency_scale: 1.0,
            }),
        }
    }
}

impl ArchConfig {
    fn spec(&self, x_dim: usize, temperature: bool, output_dim: usize) -> NetSpec {
        NetSpec {
            x_dim,
            time_input: true,
            temperature_input: temperature,
            hidden_width: self.hidden_width,
            depth: self.depth,
            output_dim,
            activation: Activation::Silu,
            x_features: if x_dim > 0 { self.x_features } else { None },
            time_features: self.time_features,
            temperature_features: if temperature { self.temperature_features } else { None },
        }
    }

    /// Freshly initialised networks for `path`. The control and the path
    /// correction start as the zero function.
    pub fn build(&self, path: &PathSpec, seed: u64) -> Result<Models> {
        let d = path.dim();
        let cont = path.kind.is_continuum();
        let cnet = Network::new(self.spec(d, cont, d), seed.wrapping_add(1))?;
        let cparams = cnet.init_params(seed.wrapping_add(2), true);
        let fnet = Network::new(self.spec(0, cont, 1), seed.wrapping_add(3))?;
        let fparams = fnet.init_params(seed.wrapping_add(4), false);
        let correction = if path.kind.is_learned() {
            let unet = Network::new(self.spec(d, false, 1), seed.wrapping_add(5))?;
            let uparams = unet.init_params(seed.wrapping_add(6), true);
            Some(PathCorrectionNet::new(unet, uparams)?)
        } else {
            None
        };
        Ok(Models {
            control: Control::Net(ControlNet::new(cnet, cparams)?),
            free_energy: FreeEnergyModel {
                source: path.source,
                kind: FreeEnergyKind::Net(FreeEnergyNet::new(fnet, fparams)?),
            },
            correction,
        })
    }
}

/// Trainable parameters of `models`, concatenated as control, free energy,
/// path correction.
pub fn flatten_params(models: &Models) -> Vec<f64> {
    let mut out = Vec::new();
    if let Control::Net(n) = &models.control {
        out.extend_from_slice(&n.params.values);
    }
    if let FreeEnergyKind::Net(n) = &models.free_energy.kind {
        out.extend_from_slice(&n.params.values);
    }
    if let Some(c) = &models.correction {
        out.extend_from_slice(&c.params.values);
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn assign_params(models: &mut Models, values: &[f64]) -> Result<()> {
    let expected = flatten_params(models).len();
    if values.len() != expected {
        return Err(CtdsError::DimensionMismatch {
            what: "flat parameter vector",
            expected,
            got: values.len(),
        });
    }
    let mut off = 0;
    let mut put = |p: &mut NetParams| {
        let n = p.values.len();
        p.values.copy_from_slice(&values[off..off + n]);
        off += n;
    };
    if let Control::Net(n) = &mut models.control {
        put(&mut n.params);
    }
    if let FreeEnergyKind::Net(n) = &mut models.free_energy.kind {
        put(&mut n.params);
    }
    if let Some(c) = &mut models.correction {
        put(&mut c.params);
    }
    Ok(())
}

/// Training points: positions, times, optional temperatures and works.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub t: Array1<f64>,
    pub xi: Option<Array1<f64>>,
    pub work: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn slice(&self, lo: usize, hi: usize) -> BatchView<'_> {
        BatchView {
            x: self.x.slice(s![lo..hi, ..]),
            t: self.t.slice(s![lo..hi]),
            xi: self.xi.as_ref().map(|v| v.slice(s![lo..hi])),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BatchView<'a> {
    x: ArrayView2<'a, f64>,
    t: ArrayView1<'a, f64>,
    xi: Option<ArrayView1<'a, f64>>,
}

fn linear_kind(kind: PathKind) -> PathKind {
    match kind {
        PathKind::Learned => PathKind::Linear,
        PathKind::LearnedContinuum => PathKind::LinearContinuum,
        k => k,
    }
}

/// Residuals for a chunk, and the parameter gradient of `sum_i g_i r_i`
/// when adjoint weights `g` are supplied.
fn residual_chunk(
    models: &Models,
    path: &PathSpec,
    base: &PathSpec,
    b: BatchView<'_>,
    adjoint_weights: Option<&dyn Fn(&Array1<f64>) -> Array1<f64>>,
) -> Result<(Array1<f64>, Option<Vec<f64>>)> {
    let n = b.t.len();
    let d = path.dim();
    let pe = base.evaluate(None, b.x, b.t, b.xi)?;
    let beta = pe.beta.clone();
    let mut grad_u = pe.grad_x;
    let mut du_dt = pe.du_dt;

    let mut corr_tape = None;
    if path.kind.is_learned() {
        let corr = models.correction.as_ref().ok_or_else(|| {
            CtdsError::InvalidConfig("learned path requires a correction network".into())
        })?;
        let tape = corr.forward(b.x, b.t, true)?;
        {
            let uc = tape.value();
            let uc_t = tape.tangent(Direction::Time).expect("requested");
            for i in 0..n {
                let ti = b.t[i];
                du_dt[i] += beta[i] * ((1.0 - 2.0 * ti) * uc[[i, 0]] + ti * (1.0 - ti) * uc_t[[i, 0]]);
            }
            for j in 0..d {
                let g = tape.tangent(Direction::X(j)).expect("requested");
                for i in 0..n {
                    grad_u[[i, j]] += beta[i] * b.t[i] * (1.0 - b.t[i]) * g[[i, 0]];
                }
            }
        }
        corr_tape = Some((corr, tape));
    }

    let mut ctrl_tape = None;
    let (mu, div) = match &models.control {
        Control::Net(net) => {
            let tape = net.forward(b.x, b.t, Some(beta.view()), true)?;
            let mu = tape.value().to_owned();
            let mut div = Array1::zeros(n);
            for j in 0..d {
                div += &tape.tangent(Direction::X(j)).expect("requested").column(j);
            }
            ctrl_tape = Some((net, tape));
            (mu, div)
        }
        other => {
            let c = other.eval(b.x, b.t, Some(beta.view()), true)?;
            (c.mu, c.div.expect("requested"))
        }
    };

    let mut free_tape = None;
    let df_dt = match &models.free_energy.kind {
        FreeEnergyKind::Net(net) => {
            let tape = net.forward(b.t, Some(beta.view()), false)?;
            let g = tape.value();
            let g_t = tape.tangent(Direction::Time).expect("requested");
            let out = Array1::from_shape_fn(n, |i| g[[i, 0]] + b.t[i] * g_t[[i, 0]]);
            free_tape = Some((net, tape));
            out
        }
        _ => models.free_energy.eval(b.t, beta.view(), false)?.df_dt,
    };

    let r = Array1::from_shape_fn(n, |i| {
        df_dt[i] - du_dt[i] + div[i] - mu.row(i).dot(&grad_u.row(i))
    });
    if !r.iter().all(|v| v.is_finite()) {
        return Err(CtdsError::Numerical("non-finite PINN residual".into()));
    }
    let Some(adj_fn) = adjoint_weights else {
        return Ok((r, None));
    };
    let g = adj_fn(&r);

    let mut grad = Vec::new();
    if let Some((net, mut tape)) = ctrl_tape {
        let mut adj = tape.zero_adjoint();
        for i in 0..n {
            for k in 0..d {
                adj[[i, k]] = -g[i] * grad_u[[i, k]];
            }
        }
        for j in 0..d {
            let off = tape.block_offset(Direction::X(j)).expect("requested");
            for i in 0..n {
                adj[[off + i, j]] = g[i];
            }
        }
        grad.extend(net.net.backward(&net.params, &mut tape, &adj)?);
    }
    if let Some((net, mut tape)) = free_tape {
        let mut adj = tape.zero_adjoint();
        let off = tape.block_offset(Direction::Time).expect("requested");
        for i in 0..n {
            adj[[i, 0]] = g[i];
            adj[[off + i, 0]] = g[i] * b.t[i];
        }
        grad.extend(net.net.backward(&net.params, &mut tape, &adj)?);
    }
    if let Some((corr, mut tape)) = corr_tape {
        let mut adj = tape.zero_adjoint();
        let off_t = tape.block_offset(Direction::Time).expect("requested");
        for i in 0..n {
            let ti = b.t[i];
            adj[[i, 0]] = -g[i] * beta[i] * (1.0 - 2.0 * ti);
            adj[[off_t + i, 0]] = -g[i] * beta[i] * ti * (1.0 - ti);
        }
        for j in 0..d {
            let off = tape.block_offset(Direction::X(j)).expect("requested");
            for i in 0..n {
                let ti = b.t[i];
                adj[[off + i, 0]] = -g[i] * beta[i] * ti * (1.0 - ti) * mu[[i, j]];
            }
        }
        grad.extend(corr.net.backward(&corr.params, &mut tape, &adj)?);
    }
    Ok((r, Some(grad)))
}

/// PINN residuals at a batch of points (continuum paths need `xi`).
pub fn pinn_residuals(
    models: &Models,
    path: &PathSpec,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    xi: Option<ArrayView1<'_, f64>>,
) -> Result<Array1<f64>> {
    let base = PathSpec {
        kind: linear_kind(path.kind),
        ..path.clone()
    };
    Ok(residual_chunk(models, path, &base, BatchView { x, t, xi }, None)?.0)
}

/// Single-point residual.
pub fn pinn_residual(models: &Models, path: &PathSpec, x: &[f64], t: f64, xi: Option<f64>) -> Result<f64> {
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|_| CtdsError::DimensionMismatch {
        what: "residual input",
        expected: path.dim(),
        got: x.len(),
    })?;
    let ta = Array1::from(vec![t]);
    let xia = xi.map(|v| Array1::from(vec![v]));
    Ok(pinn_residuals(models, path, xa.view(), ta.view(), xia.as_ref().map(|a| a.view()))?[0])
}

/// Rows per parallel loss chunk; fixed so the reduction order never changes.
const LOSS_CHUNK: usize = 512;

/// `sum_i w_i r_i^2` and its parameter gradient. Weights default to `1/n`.
pub fn loss_batch(
    models: &Models,
    path: &PathSpec,
    batch: &Batch,
    weights: Option<&Array1<f64>>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(CtdsError::Empty("training batch"));
    }
    let n = batch.len();
    let uniform;
    let w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(CtdsError::DimensionMismatch {
                    what: "loss weights",
                    expected: n,
                    got: w.len(),
                });
            }
            w
        }
        None => {
            uniform = Array1::from_elem(n, 1.0 / n as f64);
            &uniform
        }
    };
    let base = PathSpec {
        kind: linear_kind(path.kind),
        ..path.clone()
    };
    let starts: Vec<usize> = (0..n).step_by(LOSS_CHUNK).collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + LOSS_CHUNK).min(n);
            let wc = w.slice(s![lo..hi]);
            let adj = |r: &Array1<f64>| Array1::from_shape_fn(r.len(), |i| 2.0 * wc[i] * r[i]);
            let (r, g) = residual_chunk(models, path, &base, batch.slice(lo, hi), Some(&adj))?;
            let loss: f64 = r.iter().zip(wc.iter()).map(|(r, w)| w * r * r).sum();
            Ok((loss, g.expect("requested")))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        if grad.is_empty() {
            grad = g;
        } else {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grad))
}

/// Self-normalized `exp(work)` weights within equal-width time bins on
/// `[0, horizon]`; each bin keeps its share of the batch, so uniform works
/// give `1/n` everywhere.
pub fn stratified_weights(
    t: ArrayView1<'_, f64>,
    work: ArrayView1<'_, f64>,
    bins: usize,
    horizon: f64,
) -> Result<Array1<f64>> {
    let n = t.len();
    if n == 0 {
        return Err(CtdsError::Empty("weights"));
    }
    let bins = bins.max(1);
    let bin_of = |ti: f64| (((ti / horizon) * bins as f64) as usize).min(bins - 1);
    let mut max = vec![f64::NEG_INFINITY; bins];
    let mut count = vec![0usize; bins];
    for i in 0..n {
        let b = bin_of(t[i]);
        count[b] += 1;
        if work[i].is_finite() {
            max[b] = max[b].max(work[i]);
        }
    }
    let mut sum = vec![0.0; bins];
    let mut raw = Array1::zeros(n);
    for i in 0..n {
        let b = bin_of(t[i]);
        let w = if work[i].is_finite() && max[b].is_finite() {
            (work[i] - max[b]).exp()
        } else {
            0.0
        };
        raw[i] = w;
        sum[b] += w;
    }
    for b in 0..bins {
        if count[b] > 0 && !(sum[b] > 0.0 && sum[b].is_finite()) {
            return Err(CtdsError::DegenerateWeights { ess: 0.0 });
        }
    }
    for i in 0..n {
        let b = bin_of(t[i]);
        raw[i] *= count[b] as f64 / (sum[b] * n as f64);
    }
    Ok(raw)
}

/// One epoch's snapshots; replaced wholesale at every refresh.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub snapshots: TrajectoryBatch,
    pub horizon: f64,
}

impl ReplayBuffer {
    pub fn new(snapshots: TrajectoryBatch, horizon: f64) -> Result<Self> {
        if snapshots.t.iter().any(|t| *t > horizon + 1e-12) {
            return Err(CtdsError::InvalidConfig("buffer entry beyond the horizon".into()));
        }
        Ok(Self { snapshots, horizon })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// `size` entries without replacement (with replacement if the buffer is
    /// smaller than the batch).
    pub fn sample(&self, size: usize, rng: &mut impl Rng) -> Result<Batch> {
        let len = self.len();
        if len == 0 {
            return Err(CtdsError::Empty("replay buffer"));
        }
        let idx: Vec<usize> = if size <= len {
            index::sample(rng, len, size).into_vec()
        } else {
            (0..size).map(|_| rng.random_range(0..len)).collect()
        };
        let s = &self.snapshots;
        let d = s.dim;
        let mut x = Array2::zeros((size, d));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).assign(&ArrayView1::from(s.x_row(i)));
        }
        Ok(Batch {
            x,
            t: idx.iter().map(|&i| s.t[i]).collect(),
            xi: s.has_temperature().then(|| idx.iter().map(|&i| s.xi[i]).collect()),
            work: idx.iter().map(|&i| s.work[i]).collect(),
        })
    }
}

/// Piecewise-constant horizon schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curriculum {
    pub horizons: Vec<f64>,
    pub budgets: Vec<usize>,
    pub total_iterations: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            horizons: (1..=9).map(|k| k as f64 / 10.0).collect(),
            budgets: vec![1000, 1000, 1000, 1000, 2000, 2000, 2000, 3000, 3000],
            total_iterations: 125_000,
        }
    }
}

impl Curriculum {
    /// Every iteration at `T = 1`.
    pub fn constant(total_iterations: usize) -> Self {
        Self {
            horizons: Vec::new(),
            budgets: Vec::new(),
            total_iterations,
        }
    }

    /// Same stage structure with every budget scaled by `factor`.
    pub fn scaled(&self, factor: f64, total_iterations: usize) -> Self {
        Self {
            horizons: self.horizons.clone(),
            budgets: self
                .budgets
                .iter()
                .map(|b| ((*b as f64 * factor).round() as usize).max(1))
                .collect(),
            total_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.len() != self.budgets.len() {
            return Err(CtdsError::InvalidConfig("one budget per curriculum horizon".into()));
        }
        if self.budgets.contains(&0) {
            return Err(CtdsError::InvalidConfig("curriculum budgets must be positive".into()));
        }
        if self.horizons.windows(2).any(|w| w[1] <= w[0])
            || self.horizons.iter().any(|h| !(*h > 0.0 && *h < 1.0))
        {
            return Err(CtdsError::InvalidConfig(
                "curriculum horizons must increase strictly inside (0, 1)".into(),
            ));
        }
        if self.total_iterations == 0 {
            return Err(CtdsError::InvalidConfig("total iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon(&self, iter: usize) -> f64 {
        let mut acc = 0;
        for (h, b) in self.horizons.iter().zip(&self.budgets) {
            acc += b;
            if iter < acc {
                return *h;
            }
        }
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub burn_in: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.97,
            decay_every: 1000,
            burn_in: 15_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, iter: usize) -> f64 {
        let k = iter.saturating_sub(self.burn_in) / self.decay_every.max(1);
        self.learning_rate * self.decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl OptimState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One Adam update at the scheduled rate for the current step.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(CtdsError::DimensionMismatch {
                what: "optimizer state",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        let c = self.config;
        let lr = c.lr(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

/// Everything the epoch loop needs besides the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub path: PathSpec,
    pub tempering: Tempering,
    /// Proposal scheme and coefficients; the horizon follows the curriculum.
    pub integrator: IntegratorConfig,
    pub particles: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub curriculum: Curriculum,
    pub optimizer: AdamConfig,
    pub reweight: bool,
    pub time_bins: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        if self.particles == 0 || self.batch_size == 0 || self.iterations_per_epoch == 0 {
            return Err(CtdsError::InvalidConfig(
                "particles, batch size and iterations per epoch must be positive".into(),
            ));
        }
        if self.integrator.scheme == Scheme::Ctds && !self.path.kind.is_continuum() {
            return Err(CtdsError::WrongPathKind("continuum"));
        }
        self.tempering.schedule.validate()?;
        self.tempering.confining.validate(&self.tempering.schedule)?;
        let mut probe = self.integrator;
        probe.horizon = 1.0;
        probe.validate()?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.curriculum.total_iterations.div_ceil(self.iterations_per_epoch)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Iterations completed after this epoch.
    pub iter: usize,
    pub horizon: f64,
    pub loss: f64,
    pub last_loss: f64,
    pub ess: f64,
    pub particles: usize,
    pub diverged: usize,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// The epoch loop as an explicit state machine, so callers can checkpoint
/// between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub optim: OptimState,
    pub iteration: usize,
    pub epoch: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, models: Models) -> Result<Self> {
        config.validate()?;
        let n = flatten_params(&models).len();
        let optim = OptimState::new(config.optimizer, n);
        Ok(Self {
            config,
            models,
            optim,
            iteration: 0,
            epoch: 0,
            started: Instant::now(),
        })
    }

    /// Resumes from saved state.
    pub fn resume(config: TrainConfig, models: Models, optim: OptimState, iteration: usize, epoch: usize) -> Result<Self> {
        let mut t = Self::new(config, models)?;
        if optim.m.len() != t.optim.m.len() {
            return Err(CtdsError::Mismatch("optimizer state does not match models".into()));
        }
        t.optim = optim;
        t.iteration = iteration;
        t.epoch = epoch;
        Ok(t)
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.config.curriculum.total_iterations
    }

    /// Simulates the current proposal to `horizon` and returns the buffer.
    pub fn refill(&self, horizon: f64) -> Result<(ReplayBuffer, f64, usize, usize)> {
        let c = &self.config;
        let mut icfg = c.integrator;
        icfg.horizon = horizon;
        icfg.track_work = true;
        let prop = Proposal::new(&c.path, &self.models, &c.tempering, &icfg)?;
        let seed = c.seed.wrapping_add(0x9e37_79b9_u64.wrapping_mul(self.epoch as u64 + 1));
        let run = run_proposal(&prop, c.particles, seed, true)?;
        let ess = effective_sample_size(run.ensemble.work.view());
        let buffer = ReplayBuffer::new(run.snapshots.expect("recorded"), horizon)?;
        Ok((buffer, ess, run.ensemble.len(), run.ensemble.diverged))
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let c = self.config.clone();
        let horizon = c.curriculum.horizon(self.iteration);
        let (buffer, ess, alive, diverged) = self.refill(horizon)?;
        let iters = c.iterations_per_epoch.min(c.curriculum.total_iterations - self.iteration);
        let mut params = flatten_params(&self.models);
        let mut total = 0.0;
        let mut last = f64::NAN;
        for _ in 0..iters {
            let mut rng = particle_rng(c.seed, RngPurpose::Batch, self.iteration as u64);
            let batch = buffer.sample(c.batch_size, &mut rng)?;
            let weights = if c.reweight {
                Some(stratified_weights(batch.t.view(), batch.work.view(), c.time_bins, horizon)?)
            } else {
                None
            };
            let (loss, grad) = loss_batch(&self.models, &c.path, &batch, weights.as_ref())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CtdsError::Numerical(format!(
                    "non-finite loss at iteration {}",
                    self.iteration
                )));
            }
            self.optim.step(&mut params, &grad)?;
            assign_params(&mut self.models, &params)?;
            total += loss;
            last = loss;
            self.iteration += 1;
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            iter: self.iteration,
            horizon,
            loss: total / iters.max(1) as f64,
            last_loss: last,
            ess,
            particles: alive,
            diverged,
            lr: c.optimizer.lr(self.iteration.saturating_sub(1)),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }
}

/// Mean squared residual at `points` (a fixed probe set for monitoring).
pub fn mean_squared_residual(models: &Models, path: &PathSpec, batch: &Batch) -> Result<f64> {
    let r = pinn_residuals(
        models,
        path,
        batch.x.view(),
        batch.t.view(),
        batch.xi.as_ref().map(|v| v.view()),
    )?;
    Ok(r.mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Stacks the rows of several batches.
pub fn concat_batches(parts: &[Batch]) -> Result<Batch> {
    let first = parts.first().ok_or(CtdsError::Empty("batches"))?;
    let xs: Vec<_> = parts.iter().map(|b| b.x.view()).collect();
    let ts: Vec<_> = parts.iter().map(|b| b.t.view()).collect();
    let ws: Vec<_> = parts.iter().map(|b| b.work.view()).collect();
    let x = ndarray::concatenate(Axis(0), &xs).map_err(|e| CtdsError::Numerical(e.to_string()))?;
    let t = ndarray::concatenate(Axis(0), &ts).map_err(|e| CtdsError::Numerical(e.to_string()))?;
    let work = ndarray::concatenate(Axis(0), &ws).map_err(|e| CtdsError::Numerical(e.to_string()))?;
    let xi = if first.xi.is_some() {
        let v: Vec<_> = parts
            .iter()
            .map(|b| b.xi.as_ref().map(|v| v.view()).ok_or(CtdsError::MissingTemperature))
            .collect::<Result<_>>()?;
        Some(ndarray::concatenate(Axis(0), &v).map_err(|e| CtdsError::Numerical(e.to_string()))?)
    } else {
        None
    };
    Ok(Batch { x, t, xi, work })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{GaussianMixtureTarget, GaussianOracle, GaussianSource, Target};
    use crate::tempering::TemperatureSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            hidden_width: 6,
            depth: 3,
            x_features: Some(FourierSpec {
                num_features: 3,
                frequency_scale: 0.5,
            }),
            time_features: Some(FourierSpec {
                num_features: 2,
                frequency_scale: 2.0,
            }),
            temperature_features: Some(FourierSpec {
                num_features: 2,
                frequency_scale: 1.0,
            }),
        }
    }

    fn random_batch(n: usize, d: usize, with_xi: bool, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            x: Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
            t: Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0)),
            xi: with_xi.then(|| Array1::from_shape_fn(n, |_| rng.random_range(-2.5..2.5))),
            work: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
        }
    }

    /// Randomizes every parameter, including the zero-initialised last layers.
    fn randomize(models: &mut Models, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = flatten_params(models)
            .iter()
            .map(|_| rng.random_range(-0.6..0.6))
            .collect();
        assign_params(models, &p).unwrap();
    }

    fn small_mixture_path(kind: PathKind) -> PathSpec {
        let target = GaussianMixtureTarget::random(3, 2, 2.0, 0.8, 4);
        let sched = kind.is_continuum().then(TemperatureSchedule::default);
        PathSpec::new(
            kind,
            GaussianSource { dim: 2, variance: 1.5 },
            Target::Mixture(target),
            sched,
        )
        .unwrap()
    }

    #[test]
    fn oracle_residual_vanishes() {
        let o = GaussianOracle::new(1.0, 2.0, 2);
        let models = Models::oracle(o);
        let b = random_batch(200, 2, true, 1);
        let path = o.path(PathKind::Linear, None).unwrap();
        let r = pinn_residuals(&models, &path, b.x.view(), b.t.view(), None).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10), "{r}");
        let cont = o.path(PathKind::LinearContinuum, Some(TemperatureSchedule::default())).unwrap();
        let r = pinn_residuals(&models, &cont, b.x.view(), b.t.view(), b.xi.as_ref().map(|v| v.view())).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn static_path_with_zero_models_has_zero_residual() {
        let o = GaussianOracle::new(1.3, 1.3, 2);
        let path = o.path(PathKind::Linear, None).unwrap();
        let mut models = small_arch().build(&path, 3).unwrap();
        let zeros = vec![0.0; flatten_params(&models).len()];
        assign_params(&mut models, &zeros).unwrap();
        let b = random_batch(20, 2, false, 2);
        let r = pinn_residuals(&models, &path, b.x.view(), b.t.view(), None).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    fn fd_check(kind: PathKind, reweight: bool) {
        let path = small_mixture_path(kind);
        let mut models = small_arch().build(&path, 7).unwrap();
        randomize(&mut models, 8);
        let batch = random_batch(9, 2, kind.is_continuum(), 9);
        let w = reweight.then(|| stratified_weights(batch.t.view(), batch.work.view(), 3, 1.0).unwrap());
        let (_, grad) = loss_batch(&models, &path, &batch, w.as_ref()).unwrap();
        let p0 = flatten_params(&models);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in (0..p0.len()).step_by(7) {
            let mut m = models.clone();
            let mut p = p0.clone();
            p[k] += h;
            assign_params(&mut m, &p).unwrap();
            let lp = loss_batch(&m, &path, &batch, w.as_ref()).unwrap().0;
            p[k] -= 2.0 * h;
            assign_params(&mut m, &p).unwrap();
            let lm = loss_batch(&m, &path, &batch, w.as_ref()).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{kind:?}: worst relative error {worst}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences_linear() {
        fd_check(PathKind::Linear, false);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_learned() {
        fd_check(PathKind::Learned, true);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_learned_continuum() {
        fd_check(PathKind::LearnedContinuum, true);
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let path = small_mixture_path(PathKind::LinearContinuum);
        let mut models = small_arch().build(&path, 1).unwrap();
        randomize(&mut models, 2);
        let batch = random_batch(30, 2, true, 3);
        let n = batch.len();
        let w1 = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 2.0 / n as f64 } else { 0.0 });
        let w2 = Array1::from_shape_fn(n, |i| if i % 2 == 1 { 2.0 / n as f64 } else { 0.0 });
        let (a, b) = (0.3, -1.7);
        let wc = &w1 * a + &w2 * b;
        let g1 = loss_batch(&models, &path, &batch, Some(&w1)).unwrap().1;
        let g2 = loss_batch(&models, &path, &batch, Some(&w2)).unwrap().1;
        let gc = loss_batch(&models, &path, &batch, Some(&wc)).unwrap().1;
        for k in 0..gc.len() {
            let lin = a * g1[k] + b * g2[k];
            assert!((gc[k] - lin).abs() <= 1e-12 * (1.0 + lin.abs()), "{k}: {} vs {lin}", gc[k]);
        }
    }

    #[test]
    fn loss_weighting_properties() {
        let path = small_mixture_path(PathKind::Linear);
        let mut models = small_arch().build(&path, 4).unwrap();
        randomize(&mut models, 5);
        let batch = random_batch(40, 2, false, 6);
        let r = pinn_residuals(&models, &path, batch.x.view(), batch.t.view(), None).unwrap();
        let mean_sq = r.mapv(|v| v * v).mean().unwrap();
        let (l, _) = loss_batch(&models, &path, &batch, None).unwrap();
        assert!((l - mean_sq).abs() < 1e-12 * mean_sq.max(1.0));
        let equal = Array1::zeros(batch.len());
        let w = stratified_weights(batch.t.view(), equal.view(), 5, 1.0).unwrap();
        let (lw, _) = loss_batch(&models, &path, &batch, Some(&w)).unwrap();
        assert!((lw - l).abs() < 1e-12 * l.max(1.0));
        let w1 = stratified_weights(batch.t.view(), batch.work.view(), 5, 1.0).unwrap();
        let shifted = batch.work.mapv(|a| a + 123.0);
        let w2 = stratified_weights(batch.t.view(), shifted.view(), 5, 1.0).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((w1.sum() - 1.0).abs() < 1e-12);
        let single = Batch {
            x: batch.x.slice(s![0..1, ..]).to_owned(),
            t: batch.t.slice(s![0..1]).to_owned(),
            xi: None,
            work: batch.work.slice(s![0..1]).to_owned(),
        };
        let (l1, _) = loss_batch(&models, &path, &single, None).unwrap();
        assert_eq!(l1, r[0] * r[0]);
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let t = Array1::from(vec![0.1, 0.2]);
        let w = Array1::from(vec![f64::NAN, f64::NEG_INFINITY]);
        assert!(matches!(
            stratified_weights(t.view(), w.view(), 1, 1.0),
            Err(CtdsError::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn curriculum_spot_values() {
        let c = Curriculum::default();
        c.validate().unwrap();
        assert_eq!(c.horizon(0), 0.1);
        assert_eq!(c.horizon(3999), 0.4);
        assert_eq!(c.horizon(4000), 0.5);
        assert_eq!(c.horizon(15_999), 0.9);
        assert_eq!(c.horizon(16_000), 1.0);
        assert_eq!(c.horizon(124_999), 1.0);
        let bad = Curriculum {
            horizons: vec![0.2, 0.1],
            budgets: vec![1, 1],
            total_iterations: 10,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_schedule_and_zero_gradient() {
        let c = AdamConfig::default();
        assert_eq!(c.lr(0), 1e-3);
        assert_eq!(c.lr(15_999), 1e-3);
        assert!((c.lr(16_000) - 1e-3 * 0.97).abs() < 1e-18);
        let mut st = OptimState::new(c, 3);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        // First step moves each coordinate by lr against the gradient sign.
        st = OptimState::new(c, 1);
        let mut q = vec![0.0];
        st.step(&mut q, &[5.0]).unwrap();
        assert!((q[0] + 1e-3).abs() < 1e-9);
    }

    fn tiny_config(path: PathSpec, scheme: Scheme) -> TrainConfig {
        let integrator = match scheme {
            Scheme::Ctds => IntegratorConfig::ctds(50.0, 2.0, 5.0, 2.0, 0.01, 1.0),
            Scheme::Underdamped => IntegratorConfig::underdamped(50.0, 2.0, 0.01, 1.0),
            Scheme::Overdamped => IntegratorConfig::overdamped(5.0, 0.01, 1.0),
            Scheme::Baseline => IntegratorConfig::baseline(0.01, 1.0),
        };
        TrainConfig {
            path,
            tempering: Tempering::default(),
            integrator,
            particles: 16,
            iterations_per_epoch: 3,
            batch_size: 32,
            curriculum: Curriculum {
                horizons: vec![0.1],
                budgets: vec![3],
                total_iterations: 6,
            },
            optimizer: AdamConfig::default(),
            reweight: true,
            time_bins: 4,
            seed: 5,
        }
    }

    #[test]
    fn buffer_respects_horizon_and_training_is_deterministic() {
        let path = small_mixture_path(PathKind::LearnedContinuum);
        let cfg = tiny_config(path.clone(), Scheme::Ctds);
        let models = small_arch().build(&path, 1).unwrap();
        let mut a = Trainer::new(cfg.clone(), models.clone()).unwrap();
        let (buf, _, _, _) = a.refill(0.1).unwrap();
        assert!(buf.snapshots.t.iter().all(|t| *t <= 0.1 + 1e-12));
        assert_eq!(buf.len(), 16 * 11);
        let r1 = a.run_epoch().unwrap();
        assert_eq!(r1.horizon, 0.1);
        let r2 = a.run_epoch().unwrap();
        assert_eq!(r2.horizon, 1.0);
        assert!(a.finished());
        assert!(r1.loss.is_finite() && r2.loss.is_finite());
        let mut b = Trainer::new(cfg, models).unwrap();
        b.run_epoch().unwrap();
        b.run_epoch().unwrap();
        assert_eq!(flatten_params(&a.models), flatten_params(&b.models));
    }

    #[test]
    fn every_scheme_trains_for_an_epoch() {
        for scheme in [Scheme::Baseline, Scheme::Overdamped, Scheme::Underdamped] {
            let path = small_mixture_path(PathKind::Learned);
            let models = small_arch().build(&path, 2).unwrap();
            let mut t = Trainer::new(tiny_config(path, scheme), models).unwrap();
            let r = t.run_epoch().unwrap();
            assert!(r.loss.is_finite(), "{scheme:?}");
            assert!(r.ess > 0.0 && r.ess <= 16.0 + 1e-9);
        }
    }

    #[test]
    fn param_round_trip_and_length_check() {
        let path = small_mixture_path(PathKind::Learned);
        let mut models = small_arch().build(&path, 2).unwrap();
        let p = flatten_params(&models);
        assert!(assign_params(&mut models, &p[1..]).is_err());
        assign_params(&mut models, &p).unwrap();
        assert_eq!(flatten_params(&models), p);
    }
}
