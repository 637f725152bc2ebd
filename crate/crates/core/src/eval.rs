//! Sampling with the learned flow and the benchmark metrics: ELBO, EUBO,
//! exact 2-Wasserstein distance and temperature histograms.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{GaussianSource, Target};
use crate::error::{CtdsError, Result};
use crate::models::{Control, Models};

/// Euler step used for sampling (250 steps).
pub const EVAL_DT: f64 = 0.004;
pub const EVAL_SAMPLES: usize = 2500;
pub const EVAL_TRIALS: usize = 10;
pub const HISTOGRAM_BINS: usize = 10;

const CHUNK: usize = 256;

/// Points pushed through the flow with their model log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub x: Array2<f64>,
    pub log_density: Array1<f64>,
    pub seed: u64,
    /// Rows removed because they became non-finite.
    pub dropped: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }
}

fn steps_for(dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(CtdsError::InvalidConfig(format!("sampling dt must be in (0, 1], got {dt}")));
    }
    let steps = (1.0 / dt).round() as usize;
    if ((steps as f64) * dt - 1.0).abs() > 1e-9 {
        return Err(CtdsError::InvalidConfig(format!("1 / dt must be an integer, got dt = {dt}")));
    }
    Ok(steps)
}

/// Euler integration of `dx = mu dt`, forward from `t = 0` or backward from
/// `t = 1`. Returns the end points and the integral of `div mu` along the way.
fn flow_chunk(control: &Control, mut x: Array2<f64>, dt: f64, steps: usize, reverse: bool) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = x.nrows();
    let mut acc = Array1::<f64>::zeros(n);
    let beta = control.needs_temperature().then(|| Array1::<f64>::ones(n));
    for k in 0..steps {
        let t = if reverse { 1.0 - k as f64 * dt } else { k as f64 * dt };
        let tv = Array1::from_elem(n, t.clamp(0.0, 1.0));
        let ev = control.eval(x.view(), tv.view(), beta.as_ref().map(|b| b.view()), true)?;
        let sign = if reverse { -dt } else { dt };
        x.scaled_add(sign, &ev.mu);
        acc.scaled_add(dt, ev.div.as_ref().expect("requested"));
    }
    Ok((x, acc))
}

fn flow(control: &Control, x: ArrayView2<'_, f64>, dt: f64, reverse: bool) -> Result<(Array2<f64>, Array1<f64>)> {
    let steps = steps_for(dt)?;
    if x.ncols() != control.dim() {
        return Err(CtdsError::DimensionMismatch {
            what: "sample points",
            expected: control.dim(),
            got: x.ncols(),
        });
    }
    let parts: Vec<_> = (0..x.nrows().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let hi = ((c + 1) * CHUNK).min(x.nrows());
            flow_chunk(control, x.slice(s![c * CHUNK..hi, ..]).to_owned(), dt, steps, reverse)
        })
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok((Array2::zeros((0, x.ncols())), Array1::zeros(0)));
    }
    let xs: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
    let accs: Vec<_> = parts.iter().map(|p| p.1.view()).collect();
    Ok((concatenate(Axis(0), &xs).expect("same width"), concatenate(Axis(0), &accs).expect("1-d")))
}

fn keep_finite(x: Array2<f64>, lp: Array1<f64>, seed: u64) -> SampleSet {
    let keep: Vec<usize> = (0..lp.len())
        .filter(|&i| lp[i].is_finite() && x.row(i).iter().all(|v| v.is_finite()))
        .collect();
    let dropped = lp.len() - keep.len();
    SampleSet {
        x: x.select(Axis(0), &keep),
        log_density: lp.select(Axis(0), &keep),
        seed,
        dropped,
    }
}

/// Draws `n` source points and pushes them to `t = 1`, tracking
/// `log q(x_1) = log p_0(x_0) - int div mu dt`.
pub fn generate(models: &Models, source: &GaussianSource, n: usize, dt: f64, seed: u64) -> Result<SampleSet> {
    let x0 = source.sample(n, seed);
    let lp0: Array1<f64> = x0.rows().into_iter().map(|r| source.log_density(r.as_slice().expect("standard layout"))).collect();
    let (x1, int_div) = flow(&models.control, x0.view(), dt, false)?;
    Ok(keep_finite(x1, lp0 - int_div, seed))
}

/// Model log-density at given `t = 1` points, by integrating the flow back to
/// the source.
pub fn reverse_log_density(models: &Models, source: &GaussianSource, x1: ArrayView2<'_, f64>, dt: f64) -> Result<SampleSet> {
    let (x0, int_div) = flow(&models.control, x1, dt, true)?;
    let lp: Array1<f64> = x0
        .rows()
        .into_iter()
        .zip(&int_div)
        .map(|(r, a)| source.log_density(&r.to_vec()) - a)
        .collect();
    Ok(keep_finite(x1.to_owned(), lp, 0))
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(v: ArrayView1<'_, f64>) -> Result<Self> {
        let n = v.len();
        if n == 0 {
            return Err(CtdsError::Empty("estimate values"));
        }
        let mean = v.mean().expect("non-empty");
        let var = if n > 1 { v.var(1.0) } else { 0.0 };
        Ok(Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        })
    }
}

fn log_ratio(target: &Target, set: &SampleSet) -> Result<Estimate> {
    let v: Array1<f64> = set
        .x
        .rows()
        .into_iter()
        .zip(&set.log_density)
        .map(|(r, lq)| target.log_density(&r.to_vec()) - lq)
        .collect();
    Estimate::from_values(v.view())
}

/// `E_q[log pi_1 - log q]` over model samples.
pub fn elbo(samples: &SampleSet, target: &Target) -> Result<Estimate> {
    log_ratio(target, samples)
}

/// `E_pi[log pi_1 - log q]` over exact target samples, with `q` from
/// [`reverse_log_density`].
pub fn eubo(models: &Models, source: &GaussianSource, target: &Target, n: usize, dt: f64, seed: u64) -> Result<(Estimate, usize)> {
    let x1 = target.sample(n, seed);
    let set = reverse_log_density(models, source, x1.view(), dt)?;
    Ok((log_ratio(target, &set)?, set.dropped))
}

/// Minimum-cost perfect matching of a dense `n x n` cost matrix (row-major).
/// Shortest augmenting paths with dual potentials, `O(n^3)`. Returns the
/// column assigned to each row and the total cost.
pub fn assignment(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(CtdsError::DimensionMismatch {
            what: "cost matrix",
            expected: n * n,
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(CtdsError::NonFinite { layer: 0 });
    }
    // 1-based columns; column 0 is the virtual start of each augmentation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((assign, total))
}

/// Exact 2-Wasserstein distance between two equal-size empirical measures.
pub fn wasserstein2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(CtdsError::DimensionMismatch {
            what: "W2 point-set sizes",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(CtdsError::DimensionMismatch {
            what: "W2 point dimension",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let n = a.nrows();
    if n == 0 {
        return Err(CtdsError::Empty("W2 point set"));
    }
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ai = a.row(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = ai.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    });
    let (_, total) = assignment(&cost, n)?;
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// Counts of inverse temperatures in equal-width bins over `[beta_min, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaHistogram {
    pub beta_min: f64,
    pub counts: Vec<usize>,
}

impl BetaHistogram {
    pub fn edges(&self) -> Vec<f64> {
        let b = self.counts.len();
        (0..=b).map(|k| self.beta_min + (1.0 - self.beta_min) * k as f64 / b as f64).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        let e = self.edges();
        e.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Share of the mass in the lowest and highest bins.
    pub fn extreme_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.counts[0] + self.counts[self.counts.len() - 1]) as f64 / total as f64
    }
}

pub fn temperature_histogram(betas: &[f64], beta_min: f64, bins: usize) -> Result<BetaHistogram> {
    if bins == 0 || !(beta_min > 0.0 && beta_min < 1.0) {
        return Err(CtdsError::InvalidConfig(format!("histogram needs bins > 0 and beta_min in (0, 1), got {bins}, {beta_min}")));
    }
    let mut counts = vec![0usize; bins];
    let tol = 1e-12;
    for &b in betas {
        if !(b >= beta_min - tol && b <= 1.0 + tol) {
            return Err(CtdsError::InvalidConfig(format!("beta {b} outside [{beta_min}, 1]")));
        }
        let k = ((b - beta_min) / (1.0 - beta_min) * bins as f64).floor().max(0.0) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Ok(BetaHistogram { beta_min, counts })
}

/// Mean and sample standard deviation over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let a = ArrayView1::from(v);
        Self {
            mean: a.mean().unwrap_or(f64::NAN),
            std: if v.len() > 1 { a.std(1.0) } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub seed: u64,
    pub w2: f64,
    pub elbo: Estimate,
    pub eubo: Estimate,
    pub dropped: usize,
}

impl TrialMetrics {
    /// ELBO does not exceed EUBO beyond two combined standard errors.
    pub fn bounds_ordered(&self) -> bool {
        let se = (self.elbo.std_err.powi(2) + self.eubo.std_err.powi(2)).sqrt();
        self.elbo.mean <= self.eubo.mean + 2.0 * se
    }
}

/// One benchmark row: W2, ELBO and EUBO as mean and std over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub manifest_hash: String,
    pub n: usize,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub w2: Summary,
    pub elbo: Summary,
    pub eubo: Summary,
    pub bounds_ordered: bool,
    pub per_trial: Vec<TrialMetrics>,
}

impl MetricsReport {
    pub fn csv_header(&self) -> String {
        if self.trials > 1 {
            "label,n,trials,w2_mean,w2_std,elbo_mean,elbo_std,eubo_mean,eubo_std".into()
        } else {
            "label,n,trials,w2_mean,elbo_mean,eubo_mean".into()
        }
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.label.clone(), self.n.to_string(), self.trials.to_string()];
        for s in [self.w2, self.elbo, self.eubo] {
            cols.push(format!("{}", s.mean));
            if self.trials > 1 {
                cols.push(format!("{}", s.std));
            }
        }
        cols.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n: usize,
    pub trials: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: EVAL_SAMPLES,
            trials: EVAL_TRIALS,
            dt: EVAL_DT,
            seed: 0,
        }
    }
}

/// Runs every trial and collects the benchmark row.
pub fn evaluate(models: &Models, source: &GaussianSource, target: &Target, cfg: &EvalConfig, label: &str, manifest_hash: &str) -> Result<MetricsReport> {
    if cfg.trials == 0 || cfg.n == 0 {
        return Err(CtdsError::InvalidConfig("evaluation needs n > 0 and trials > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.trials).map(|_| rng.random()).collect();
    let per_trial: Vec<TrialMetrics> = seeds
        .par_iter()
        .map(|&seed| -> Result<TrialMetrics> {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (s_src, s_ref, s_eubo): (u64, u64, u64) = (r.random(), r.random(), r.random());
            let samples = generate(models, source, cfg.n, cfg.dt, s_src)?;
            if samples.is_empty() {
                return Err(CtdsError::Numerical("every generated sample diverged".into()));
            }
            let reference = target.sample(samples.len(), s_ref);
            let w2 = wasserstein2(samples.x.view(), reference.view())?;
            let elbo = elbo(&samples, target)?;
            let (eubo, dropped_rev) = eubo(models, source, target, cfg.n, cfg.dt, s_eubo)?;
            Ok(TrialMetrics {
                seed,
                w2,
                elbo,
                eubo,
                dropped: samples.dropped + dropped_rev,
            })
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&TrialMetrics) -> f64| Summary::of(&per_trial.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        label: label.into(),
        manifest_hash: manifest_hash.into(),
        n: cfg.n,
        trials: cfg.trials,
        seeds,
        w2: col(|m| m.w2),
        elbo: col(|m| m.elbo.mean),
        eubo: col(|m| m.eubo.mean),
        bounds_ordered: per_trial.iter().all(TrialMetrics::bounds_ordered),
        per_trial,
    })
}
