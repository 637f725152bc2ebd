//! The learnable objects: control, free energy and path correction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::energy::{GaussianOracle, GaussianSource};
use crate::error::{CtdsError, Result};
use crate::nn::{Direction, Inputs, NetParams, Network, Tape};
use crate::tempering::TemperatureSchedule;

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CtdsError::InvalidConfig(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Control field `mu(x, t[, beta])` with output in the spatial dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlNet {
    pub net: Network,
    pub params: NetParams,
}

impl ControlNet {
    pub fn new(net: Network, params: NetParams) -> Result<Self> {
        let s = net.spec();
        if s.output_dim != s.x_dim || !s.time_input {
            return Err(CtdsError::InvalidConfig(
                "control must map (x, t) to the spatial dimension".into(),
            ));
        }
        if params.len() != net.num_params() {
            return Err(CtdsError::DimensionMismatch {
                what: "control parameters",
                expected: net.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { net, params })
    }

    pub fn is_continuum(&self) -> bool {
        self.net.spec().temperature_input
    }

    pub fn dim(&self) -> usize {
        self.net.spec().x_dim
    }

    /// Recorded forward pass; `with_div` adds one tangent block per x coordinate.
    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        beta: Option<ArrayView1<'_, f64>>,
        with_div: bool,
    ) -> Result<Tape> {
        if self.is_continuum() && beta.is_none() {
            return Err(CtdsError::MissingTemperature);
        }
        let dirs: Vec<Direction> = if with_div {
            (0..self.dim()).map(Direction::X).collect()
        } else {
            Vec::new()
        };
        let inputs = Inputs {
            x: Some(x),
            t: Some(t),
            temperature: if self.is_continuum() { beta } else { None },
        };
        self.net.forward(&self.params, &inputs, &dirs)
    }

    /// Single point `(mu, div mu, d mu / dt)` at inverse temperature `beta`.
    pub fn eval_point(
        &self,
        x: &[f64],
        t: f64,
        beta: Option<f64>,
    ) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        check_time(t)?;
        if self.is_continuum() && beta.is_none() {
            return Err(CtdsError::MissingTemperature);
        }
        let out = self
            .net
            .forward_augmented(&self.params, x, Some(t), beta.filter(|_| self.is_continuum()))?;
        Ok((out.value, out.div_x.unwrap_or(0.0), out.d_dt))
    }
}

/// `(mu, div mu, d mu / dt)` at temperature coordinate `xi`, fed to the
/// network as `beta(xi)`.
pub fn control_eval(
    net: &ControlNet,
    schedule: &TemperatureSchedule,
    x: &[f64],
    t: f64,
    xi: Option<f64>,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let beta = match (net.is_continuum(), xi) {
        (true, None) => return Err(CtdsError::MissingTemperature),
        (true, Some(xi)) => Some(schedule.beta(xi).0),
        (false, _) => None,
    };
    net.eval_point(x, t, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Control {
    Zero { dim: usize },
    /// Closed-form transport of a Gaussian-to-Gaussian path.
    Oracle(GaussianOracle),
    Net(ControlNet),
}

/// Batched control values, with divergence when requested.
#[derive(Debug, Clone)]
pub struct ControlEval {
    pub mu: Array2<f64>,
    pub div: Option<Array1<f64>>,
}

impl Control {
    pub fn dim(&self) -> usize {
        match self {
            Control::Zero { dim } => *dim,
            Control::Oracle(o) => o.dim,
            Control::Net(n) => n.dim(),
        }
    }

    pub fn needs_temperature(&self) -> bool {
        matches!(self, Control::Net(n) if n.is_continuum())
    }

    /// `t` holds one entry per row of `x`.
    pub fn eval(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        beta: Option<ArrayView1<'_, f64>>,
        with_div: bool,
    ) -> Result<ControlEval> {
        let n = x.nrows();
        match self {
            Control::Zero { .. } => Ok(ControlEval {
                mu: Array2::zeros(x.raw_dim()),
                div: with_div.then(|| Array1::zeros(n)),
            }),
            Control::Oracle(o) => {
                let c: Array1<f64> = t.mapv(|ti| o.log_sigma_rate(ti));
                let mu = &x * &c.view().insert_axis(Axis(1));
                Ok(ControlEval {
                    mu,
                    div: with_div.then(|| c.mapv(|ci| ci * o.dim as f64)),
                })
            }
            Control::Net(net) => {
                let tape = net.forward(x, t, beta, with_div)?;
                let mu = tape.value().to_owned();
                let div = with_div.then(|| {
                    let mut div = Array1::zeros(n);
                    for j in 0..net.dim() {
                        let tan = tape.tangent(Direction::X(j)).expect("requested");
                        div += &tan.column(j);
                    }
                    div
                });
                Ok(ControlEval { mu, div })
            }
        }
    }
}

/// Free-energy network output `G(t[, beta])`; the model is `F0(beta) + t G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyNet {
    pub net: Network,
    pub params: NetParams,
}

impl FreeEnergyNet {
    pub fn new(net: Network, params: NetParams) -> Result<Self> {
        let s = net.spec();
        if s.output_dim != 1 || !s.time_input || s.x_dim != 0 {
            return Err(CtdsError::InvalidConfig(
                "free energy network must map (t[, beta]) to a scalar".into(),
            ));
        }
        if params.len() != net.num_params() {
            return Err(CtdsError::DimensionMismatch {
                what: "free energy parameters",
                expected: net.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { net, params })
    }

    pub fn is_continuum(&self) -> bool {
        self.net.spec().temperature_input
    }

    pub fn forward(
        &self,
        t: ArrayView1<'_, f64>,
        beta: Option<ArrayView1<'_, f64>>,
        with_beta_derivative: bool,
    ) -> Result<Tape> {
        if self.is_continuum() && beta.is_none() {
            return Err(CtdsError::MissingTemperature);
        }
        let mut dirs = vec![Direction::Time];
        if with_beta_derivative && self.is_continuum() {
            dirs.push(Direction::Temperature);
        }
        let inputs = Inputs {
            x: None,
            t: Some(t),
            temperature: if self.is_continuum() { beta } else { None },
        };
        self.net.forward(&self.params, &inputs, &dirs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreeEnergyKind {
    /// `F = F0(beta)` for all t.
    Anchor,
    Oracle(GaussianOracle),
    Net(FreeEnergyNet),
}

/// Free energy anchored at `t = 0` to the source's closed form
/// `F0(beta) = -(d/2) log(2 pi sigma0^2 / beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyModel {
    pub source: GaussianSource,
    pub kind: FreeEnergyKind,
}

#[derive(Debug, Clone)]
pub struct FreeEval {
    pub f: Array1<f64>,
    pub df_dt: Array1<f64>,
    pub df_dbeta: Array1<f64>,
}

impl FreeEnergyModel {
    pub fn anchor_value(&self, beta: f64) -> (f64, f64) {
        let d = self.source.dim as f64;
        let f0 = -0.5 * d * (2.0 * std::f64::consts::PI * self.source.variance / beta).ln();
        (f0, 0.5 * d / beta)
    }

    pub fn eval(
        &self,
        t: ArrayView1<'_, f64>,
        beta: ArrayView1<'_, f64>,
        with_beta_derivative: bool,
    ) -> Result<FreeEval> {
        let n = t.len();
        let mut f = Array1::zeros(n);
        let mut df_dt = Array1::zeros(n);
        let mut df_dbeta = Array1::zeros(n);
        for i in 0..n {
            let (f0, df0) = self.anchor_value(beta[i]);
            f[i] = f0;
            df_dbeta[i] = df0;
        }
        match &self.kind {
            FreeEnergyKind::Anchor => {}
            FreeEnergyKind::Oracle(o) => {
                for i in 0..n {
                    f[i] = o.free_energy(t[i], beta[i]);
                    df_dt[i] = o.free_energy_rate(t[i]);
                }
            }
            FreeEnergyKind::Net(net) => {
                let tape = net.forward(t, Some(beta), with_beta_derivative)?;
                let g = tape.value();
                let g_t = tape.tangent(Direction::Time).expect("requested");
                let g_b = tape.tangent(Direction::Temperature);
                for i in 0..n {
                    f[i] += t[i] * g[[i, 0]];
                    df_dt[i] = g[[i, 0]] + t[i] * g_t[[i, 0]];
                    if let Some(gb) = &g_b {
                        df_dbeta[i] += t[i] * gb[[i, 0]];
                    }
                }
            }
        }
        Ok(FreeEval { f, df_dt, df_dbeta })
    }

    /// Single point `(F, dF/dt)` at temperature coordinate `xi`.
    pub fn eval_point(
        &self,
        schedule: Option<&TemperatureSchedule>,
        t: f64,
        xi: Option<f64>,
    ) -> Result<(f64, f64)> {
        check_time(t)?;
        let beta = match (schedule, xi) {
            (Some(s), Some(xi)) => s.beta(xi).0,
            _ => 1.0,
        };
        let ev = self.eval(
            Array1::from(vec![t]).view(),
            Array1::from(vec![beta]).view(),
            false,
        )?;
        Ok((ev.f[0], ev.df_dt[0]))
    }
}

/// Learned path correction `U_theta(x, t)`, a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCorrectionNet {
    pub net: Network,
    pub params: NetParams,
}

impl PathCorrectionNet {
    pub fn new(net: Network, params: NetParams) -> Result<Self> {
        let s = net.spec();
        if s.output_dim != 1 || !s.time_input || s.temperature_input || s.x_dim == 0 {
            return Err(CtdsError::InvalidConfig(
                "path correction must map (x, t) to a scalar".into(),
            ));
        }
        if params.len() != net.num_params() {
            return Err(CtdsError::DimensionMismatch {
                what: "path correction parameters",
                expected: net.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { net, params })
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        with_derivatives: bool,
    ) -> Result<Tape> {
        let mut dirs = Vec::new();
        if with_derivatives {
            dirs.extend((0..self.net.spec().x_dim).map(Direction::X));
            dirs.push(Direction::Time);
        }
        let inputs = Inputs {
            x: Some(x),
            t: Some(t),
            temperature: None,
        };
        self.net.forward(&self.params, &inputs, &dirs)
    }

    /// Single point `(U_theta, grad_x U_theta, d U_theta / dt)`.
    pub fn eval_point(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>, f64)> {
        check_time(t)?;
        let out = self.net.forward_augmented(&self.params, x, Some(t), None)?;
        Ok((out.value[0], out.jac_x, out.d_dt[0]))
    }
}

/// The three learnable objects of a sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub control: Control,
    pub free_energy: FreeEnergyModel,
    pub correction: Option<PathCorrectionNet>,
}

impl Models {
    /// Zero control, anchored free energy, no correction.
    pub fn untrained(source: GaussianSource) -> Self {
        Self {
            control: Control::Zero { dim: source.dim },
            free_energy: FreeEnergyModel {
                source,
                kind: FreeEnergyKind::Anchor,
            },
            correction: None,
        }
    }

    /// Closed-form control and free energy of a Gaussian path.
    pub fn oracle(oracle: GaussianOracle) -> Self {
        Self {
            control: Control::Oracle(oracle),
            free_energy: FreeEnergyModel {
                source: GaussianSource {
                    dim: oracle.dim,
                    variance: oracle.sigma0 * oracle.sigma0,
                },
                kind: FreeEnergyKind::Oracle(oracle),
            },
            correction: None,
        }
    }
}
