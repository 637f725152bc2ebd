//! Feed-forward networks whose forward pass carries exact input derivatives.
//!
//! A forward pass propagates, next to the plain activations, one tangent
//! block per requested input [`Direction`]. All blocks are stacked row-wise
//! into a single matrix, so each affine layer is one matrix product:
//!
//! ```text
//! rows [0, B)        value block
//! rows [B, 2B)       d/d(direction 0)
//! rows [kB, (k+1)B)  d/d(direction k-1)
//! ```
//!
//! The resulting [`Tape`] can be reverse-accumulated with adjoints on any of
//! those blocks, which is what a loss built from input derivatives of the
//! network (divergences, time partials) needs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CtdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Sigmoid-weighted linear unit, `z * sigmoid(z)`.
    #[default]
    Silu,
}

impl Activation {
    /// Returns `(s(z), s'(z), s''(z))`.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                let one_minus = 1.0 - sig;
                let value = z * sig;
                let d1 = sig * (1.0 + z * one_minus);
                let d2 = sig * one_minus * (2.0 + z * (1.0 - 2.0 * sig));
                (value, d1, d2)
            }
        }
    }
}

/// An input coordinate along which derivatives are propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    X(usize),
    Time,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub num_features: usize,
    /// Standard deviation of the Gaussian the frequencies are drawn from.
    pub frequency_scale: f64,
}

/// Random Fourier feature map `v -> [cos(Wv), sin(Wv), v]` with frozen frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMap {
    num_features: usize,
    input_dim: usize,
    frequency_scale: f64,
    seed: u64,
    /// Row-major `num_features x input_dim`.
    frequencies: Vec<f64>,
}

impl FourierMap {
    pub fn sample(input_dim: usize, spec: FourierSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..spec.num_features * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * spec.frequency_scale
            })
            .collect();
        Self {
            num_features: spec.num_features,
            input_dim,
            frequency_scale: spec.frequency_scale,
            seed,
            frequencies,
        }
    }

    /// Builds a map from explicit frequencies (row-major, one row per feature).
    pub fn from_frequencies(input_dim: usize, frequencies: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || frequencies.len() % input_dim != 0 {
            return Err(CtdsError::DimensionMismatch {
                what: "fourier frequencies",
                expected: input_dim,
                got: frequencies.len(),
            });
        }
        Ok(Self {
            num_features: frequencies.len() / input_dim,
            input_dim,
            frequency_scale: f64::NAN,
            seed: 0,
            frequencies,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.num_features, self.input_dim), &self.frequencies)
            .expect("frequency layout")
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.num_features + self.input_dim
    }

    /// Embeds one point; returns the features and their Jacobian
    /// (row-major `embed_dim x input_dim`).
    pub fn embed(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if v.len() != self.input_dim {
            return Err(CtdsError::DimensionMismatch {
                what: "fourier input",
                expected: self.input_dim,
                got: v.len(),
            });
        }
        let m = self.num_features;
        let d = self.input_dim;
        let w = self.frequencies();
        let mut feat = vec![0.0; self.embed_dim()];
        let mut jac = vec![0.0; self.embed_dim() * d];
        for f in 0..m {
            let phase: f64 = (0..d).map(|j| w[[f, j]] * v[j]).sum();
            let (s, c) = phase.sin_cos();
            feat[f] = c;
            feat[m + f] = s;
            for j in 0..d {
                jac[f * d + j] = -s * w[[f, j]];
                jac[(m + f) * d + j] = c * w[[f, j]];
            }
        }
        for j in 0..d {
            feat[2 * m + j] = v[j];
            jac[(2 * m + j) * d + j] = 1.0;
        }
        Ok((feat, jac))
    }
}

/// Architecture of one network: inputs `(x, t?, temperature?)`, each group
/// optionally passed through a Fourier map, then `depth` affine layers with
/// the activation between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub x_dim: usize,
    pub time_input: bool,
    pub temperature_input: bool,
    pub hidden_width: usize,
    /// Number of affine layers; `depth - 1` hidden activations.
    pub depth: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub x_features: Option<FourierSpec>,
    pub time_features: Option<FourierSpec>,
    pub temperature_features: Option<FourierSpec>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CtdsError::InvalidConfig("network depth must be >= 1".into()));
        }
        if self.hidden_width == 0 || self.output_dim == 0 {
            return Err(CtdsError::InvalidConfig(
                "network widths must be >= 1".into(),
            ));
        }
        if self.x_dim == 0 && !self.time_input && !self.temperature_input {
            return Err(CtdsError::InvalidConfig("network has no inputs".into()));
        }
        Ok(())
    }

    pub fn raw_input_dim(&self) -> usize {
        self.x_dim + self.time_input as usize + self.temperature_input as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Batched raw inputs; every present view has one row/entry per point.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub x: Option<ArrayView2<'a, f64>>,
    pub t: Option<ArrayView1<'a, f64>>,
    pub temperature: Option<ArrayView1<'a, f64>>,
}

impl Inputs<'_> {
    fn batch(&self) -> Option<usize> {
        self.x
            .map(|x| x.nrows())
            .or(self.t.map(|t| t.len()))
            .or(self.temperature.map(|b| b.len()))
    }
}

/// A network architecture with its frozen Fourier maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetSpec,
    x_map: Option<FourierMap>,
    time_map: Option<FourierMap>,
    temperature_map: Option<FourierMap>,
}

impl Network {
    /// Samples the Fourier maps from `seed`.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let x_map = match spec.x_features {
            Some(f) if spec.x_dim > 0 => Some(FourierMap::sample(spec.x_dim, f, seed)),
            _ => None,
        };
        let time_map = match spec.time_features {
            Some(f) if spec.time_input => {
                Some(FourierMap::sample(1, f, seed.wrapping_add(0x7417)))
            }
            _ => None,
        };
        let temperature_map = match spec.temperature_features {
            Some(f) if spec.temperature_input => {
                Some(FourierMap::sample(1, f, seed.wrapping_add(0xbe7a)))
            }
            _ => None,
        };
        Ok(Self {
            spec,
            x_map,
            time_map,
            temperature_map,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn x_map(&self) -> Option<&FourierMap> {
        self.x_map.as_ref()
    }

    fn group_width(&self, dim: usize, map: Option<&FourierMap>) -> usize {
        map.map_or(dim, |m| m.embed_dim())
    }

    pub fn embed_dim(&self) -> usize {
        let s = &self.spec;
        let mut n = 0;
        if s.x_dim > 0 {
            n += self.group_width(s.x_dim, self.x_map.as_ref());
        }
        if s.time_input {
            n += self.group_width(1, self.time_map.as_ref());
        }
        if s.temperature_input {
            n += self.group_width(1, self.temperature_map.as_ref());
        }
        n
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        let s = &self.spec;
        let mut shapes = Vec::with_capacity(s.depth);
        let mut offset = 0;
        let mut fan_in = self.embed_dim();
        for l in 0..s.depth {
            let fan_out = if l + 1 == s.depth {
                s.output_dim
            } else {
                s.hidden_width
            };
            let w_offset = offset;
            let b_offset = w_offset + fan_in * fan_out;
            offset = b_offset + fan_out;
            shapes.push(LayerShape {
                fan_in,
                fan_out,
                w_offset,
                b_offset,
            });
            fan_in = fan_out;
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layout()
            .last()
            .map_or(0, |l| l.b_offset + l.fan_out)
    }

    /// Fan-in scaled uniform weights, zero biases; `zero_last` zeroes the
    /// final affine layer so the network starts as the zero function.
    pub fn init_params(&self, seed: u64, zero_last: bool) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.num_params()];
        let layout = self.layout();
        for (l, shape) in layout.iter().enumerate() {
            if zero_last && l + 1 == layout.len() {
                continue;
            }
            let bound = 1.0 / (shape.fan_in as f64).sqrt();
            for w in &mut values[shape.w_offset..shape.b_offset] {
                *w = rng.random_range(-bound..bound);
            }
        }
        NetParams { values }
    }

    pub fn zero_params(&self) -> NetParams {
        NetParams {
            values: vec![0.0; self.num_params()],
        }
    }

    fn check_params(&self, params: &NetParams) -> Result<()> {
        let n = self.num_params();
        if params.len() != n {
            return Err(CtdsError::DimensionMismatch {
                what: "network parameters",
                expected: n,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &Inputs<'_>) -> Result<usize> {
        let s = &self.spec;
        let batch = inputs.batch().ok_or(CtdsError::Empty("network inputs"))?;
        if s.x_dim > 0 {
            let x = inputs.x.ok_or(CtdsError::DimensionMismatch {
                what: "x input",
                expected: s.x_dim,
                got: 0,
            })?;
            if x.ncols() != s.x_dim || x.nrows() != batch {
                return Err(CtdsError::DimensionMismatch {
                    what: "x input",
                    expected: s.x_dim,
                    got: x.ncols(),
                });
            }
        }
        if s.time_input {
            let t = inputs.t.ok_or(CtdsError::DimensionMismatch {
                what: "time input",
                expected: batch,
                got: 0,
            })?;
            if t.len() != batch {
                return Err(CtdsError::DimensionMismatch {
                    what: "time input",
                    expected: batch,
                    got: t.len(),
                });
            }
        }
        if s.temperature_input {
            let b = inputs.temperature.ok_or(CtdsError::MissingTemperature)?;
            if b.len() != batch {
                return Err(CtdsError::DimensionMismatch {
                    what: "temperature input",
                    expected: batch,
                    got: b.len(),
                });
            }
        }
        Ok(batch)
    }

    /// Stacked embedding: value block followed by one tangent block per direction.
    fn embed_stacked(
        &self,
        inputs: &Inputs<'_>,
        batch: usize,
        dirs: &[Direction],
    ) -> Array2<f64> {
        let s = &self.spec;
        let width = self.embed_dim();
        let mut out = Array2::<f64>::zeros(((1 + dirs.len()) * batch, width));
        let mut col = 0;

        let mut group = |raw: ArrayView2<'_, f64>,
                         map: Option<&FourierMap>,
                         local_dir: &dyn Fn(Direction) -> Option<usize>,
                         out: &mut Array2<f64>| {
            let dim = raw.ncols();
            match map {
                None => {
                    out.slice_mut(s![0..batch, col..col + dim]).assign(&raw);
                    for (k, d) in dirs.iter().enumerate() {
                        if let Some(l) = local_dir(*d) {
                            let r0 = (k + 1) * batch;
                            out.slice_mut(s![r0..r0 + batch, col + l]).fill(1.0);
                        }
                    }
                    col += dim;
                }
                Some(map) => {
                    let m = map.num_features();
                    let w = map.frequencies();
                    let phase = raw.dot(&w.t());
                    let cos = phase.mapv(f64::cos);
                    let sin = phase.mapv(f64::sin);
                    out.slice_mut(s![0..batch, col..col + m]).assign(&cos);
                    out.slice_mut(s![0..batch, col + m..col + 2 * m]).assign(&sin);
                    out.slice_mut(s![0..batch, col + 2 * m..col + 2 * m + dim])
                        .assign(&raw);
                    for (k, d) in dirs.iter().enumerate() {
                        if let Some(l) = local_dir(*d) {
                            let r0 = (k + 1) * batch;
                            let wl = w.column(l);
                            let mut dc = out.slice_mut(s![r0..r0 + batch, col..col + m]);
                            dc.assign(&(&sin * &wl));
                            dc.mapv_inplace(|v| -v);
                            out.slice_mut(s![r0..r0 + batch, col + m..col + 2 * m])
                                .assign(&(&cos * &wl));
                            out.slice_mut(s![r0..r0 + batch, col + 2 * m + l]).fill(1.0);
                        }
                    }
                    col += map.embed_dim();
                }
            }
        };

        if s.x_dim > 0 {
            let x = inputs.x.expect("checked");
            group(
                x,
                self.x_map.as_ref(),
                &|d| match d {
                    Direction::X(i) => Some(i),
                    _ => None,
                },
                &mut out,
            );
        }
        if s.time_input {
            let t = inputs.t.expect("checked").insert_axis(Axis(1));
            group(
                t,
                self.time_map.as_ref(),
                &|d| (d == Direction::Time).then_some(0),
                &mut out,
            );
        }
        if s.temperature_input {
            let b = inputs.temperature.expect("checked").insert_axis(Axis(1));
            group(
                b,
                self.temperature_map.as_ref(),
                &|d| (d == Direction::Temperature).then_some(0),
                &mut out,
            );
        }
        out
    }

    /// Batched augmented forward pass.
    pub fn forward(
        &self,
        params: &NetParams,
        inputs: &Inputs<'_>,
        dirs: &[Direction],
    ) -> Result<Tape> {
        self.check_params(params)?;
        let batch = self.check_inputs(inputs)?;
        for d in dirs {
            if let Direction::X(i) = d {
                if *i >= self.spec.x_dim {
                    return Err(CtdsError::DimensionMismatch {
                        what: "x direction",
                        expected: self.spec.x_dim,
                        got: *i,
                    });
                }
            }
        }
        let blocks = 1 + dirs.len();
        let layout = self.layout();
        let act = self.spec.activation;
        let mut a = self.embed_stacked(inputs, batch, dirs);
        let mut layers = Vec::with_capacity(layout.len());
        for (l, shape) in layout.iter().enumerate() {
            let w = ArrayView2::from_shape(
                (shape.fan_out, shape.fan_in),
                &params.values[shape.w_offset..shape.b_offset],
            )
            .expect("layer layout");
            let b = ArrayView1::from(&params.values[shape.b_offset..shape.b_offset + shape.fan_out]);
            let mut z = a.dot(&w.t());
            z.slice_mut(s![0..batch, ..])
                .rows_mut()
                .into_iter()
                .for_each(|mut row| row += &b);
            if !z.iter().all(|v| v.is_finite()) {
                return Err(CtdsError::NonFinite { layer: l });
            }
            if l + 1 == layout.len() {
                layers.push(LayerCache { input: a, pre: None });
                a = z;
            } else {
                let mut next = Array2::<f64>::zeros(z.raw_dim());
                let width = shape.fan_out;
                for i in 0..batch {
                    for j in 0..width {
                        let (v, d1, _) = act.eval(z[[i, j]]);
                        next[[i, j]] = v;
                        for k in 1..blocks {
                            let r = k * batch + i;
                            next[[r, j]] = d1 * z[[r, j]];
                        }
                    }
                }
                layers.push(LayerCache {
                    input: a,
                    pre: Some(z),
                });
                a = next;
            }
        }
        Ok(Tape {
            batch,
            dirs: dirs.to_vec(),
            layers,
            output: a,
            consumed: false,
        })
    }

    /// Reverse accumulation of parameter gradients through a recorded pass.
    ///
    /// `adjoint` has the stacked output shape: row block 0 holds
    /// d(loss)/d(value), block k+1 holds d(loss)/d(tangent k).
    pub fn backward(
        &self,
        params: &NetParams,
        tape: &mut Tape,
        adjoint: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        if tape.consumed {
            return Err(CtdsError::TapeConsumed);
        }
        self.check_params(params)?;
        if adjoint.raw_dim() != tape.output.raw_dim() {
            return Err(CtdsError::DimensionMismatch {
                what: "output adjoint",
                expected: tape.output.len(),
                got: adjoint.len(),
            });
        }
        tape.consumed = true;
        let batch = tape.batch;
        let blocks = 1 + tape.dirs.len();
        let act = self.spec.activation;
        let layout = self.layout();
        let mut grad = vec![0.0; self.num_params()];
        let mut g = adjoint.clone();
        for (l, shape) in layout.iter().enumerate().rev() {
            let cache = &tape.layers[l];
            let gz = match &cache.pre {
                None => g,
                Some(z) => {
                    let mut gz = Array2::<f64>::zeros(z.raw_dim());
                    for i in 0..batch {
                        for j in 0..shape.fan_out {
                            let (_, d1, d2) = act.eval(z[[i, j]]);
                            let mut acc = d1 * g[[i, j]];
                            for k in 1..blocks {
                                let r = k * batch + i;
                                acc += d2 * z[[r, j]] * g[[r, j]];
                                gz[[r, j]] = d1 * g[[r, j]];
                            }
                            gz[[i, j]] = acc;
                        }
                    }
                    gz
                }
            };
            let gw = gz.t().dot(&cache.input);
            grad[shape.w_offset..shape.b_offset]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(dst, v)| *dst = *v);
            let gb = gz.slice(s![0..batch, ..]).sum_axis(Axis(0));
            grad[shape.b_offset..shape.b_offset + shape.fan_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(dst, v)| *dst = *v);
            if l > 0 {
                let w = ArrayView2::from_shape(
                    (shape.fan_out, shape.fan_in),
                    &params.values[shape.w_offset..shape.b_offset],
                )
                .expect("layer layout");
                g = gz.dot(&w);
            } else {
                break;
            }
        }
        Ok(grad)
    }

    /// Single-point forward pass with every input derivative block.
    pub fn forward_augmented(
        &self,
        params: &NetParams,
        x: &[f64],
        t: Option<f64>,
        temperature: Option<f64>,
    ) -> Result<AugmentedActivation> {
        let s = &self.spec;
        if x.len() != s.x_dim {
            return Err(CtdsError::DimensionMismatch {
                what: "x input",
                expected: s.x_dim,
                got: x.len(),
            });
        }
        let xa = Array2::from_shape_vec((1, s.x_dim), x.to_vec()).expect("shape");
        let ta = Array1::from(vec![t.unwrap_or(0.0)]);
        let ba = Array1::from(vec![temperature.unwrap_or(1.0)]);
        if s.temperature_input && temperature.is_none() {
            return Err(CtdsError::MissingTemperature);
        }
        if s.time_input && t.is_none() {
            return Err(CtdsError::DimensionMismatch {
                what: "time input",
                expected: 1,
                got: 0,
            });
        }
        let mut dirs: Vec<Direction> = (0..s.x_dim).map(Direction::X).collect();
        if s.time_input {
            dirs.push(Direction::Time);
        }
        if s.temperature_input {
            dirs.push(Direction::Temperature);
        }
        let inputs = Inputs {
            x: (s.x_dim > 0).then(|| xa.view()),
            t: s.time_input.then(|| ta.view()),
            temperature: s.temperature_input.then(|| ba.view()),
        };
        let tape = self.forward(params, &inputs, &dirs)?;
        let out = s.output_dim;
        let value = tape.value().row(0).to_vec();
        let mut jac_x = vec![0.0; out * s.x_dim];
        for j in 0..s.x_dim {
            let tan = tape.tangent(Direction::X(j)).expect("requested");
            for o in 0..out {
                jac_x[o * s.x_dim + j] = tan[[0, o]];
            }
        }
        let div_x = (out == s.x_dim && out > 0)
            .then(|| (0..out).map(|i| jac_x[i * s.x_dim + i]).sum());
        let d_dt = tape
            .tangent(Direction::Time)
            .map_or(vec![0.0; out], |v| v.row(0).to_vec());
        let d_dtemperature = tape
            .tangent(Direction::Temperature)
            .map_or(vec![0.0; out], |v| v.row(0).to_vec());
        Ok(AugmentedActivation {
            value,
            jac_x,
            div_x,
            d_dt,
            d_dtemperature,
        })
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    pre: Option<Array2<f64>>,
}

/// Recorded augmented forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    dirs: Vec<Direction>,
    layers: Vec<LayerCache>,
    output: Array2<f64>,
    consumed: bool,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn directions(&self) -> &[Direction] {
        &self.dirs
    }

    pub fn value(&self) -> ArrayView2<'_, f64> {
        self.output.slice(s![0..self.batch, ..])
    }

    pub fn tangent(&self, dir: Direction) -> Option<ArrayView2<'_, f64>> {
        let k = self.dirs.iter().position(|d| *d == dir)?;
        let r0 = (k + 1) * self.batch;
        Some(self.output.slice(s![r0..r0 + self.batch, ..]))
    }

    /// Zero adjoint with the stacked output shape.
    pub fn zero_adjoint(&self) -> Array2<f64> {
        Array2::zeros(self.output.raw_dim())
    }

    /// Row offset of a direction's block inside the stacked output.
    pub fn block_offset(&self, dir: Direction) -> Option<usize> {
        self.dirs
            .iter()
            .position(|d| *d == dir)
            .map(|k| (k + 1) * self.batch)
    }
}

/// Single-point output with its exact input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedActivation {
    pub value: Vec<f64>,
    /// Row-major `output_dim x x_dim`.
    pub jac_x: Vec<f64>,
    /// Trace of `jac_x`, present when output and spatial dims agree.
    pub div_x: Option<f64>,
    pub d_dt: Vec<f64>,
    pub d_dtemperature: Vec<f64>,
}
