//! Parameterized layers built on [`Session`]. Weights are Glorot-uniform,
//! biases and `β` zero, `γ` one.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{PoolMode, Var};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

fn glorot<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape is non-empty")
}

fn with_layer<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        AutodiffError::Shape { op, detail } => AutodiffError::Shape {
            op,
            detail: format!("layer `{layer}`: {detail}"),
        },
        other => other,
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    weight: ParamId,
    bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let w = glorot(
            &[out_channels, in_channels, kh, kw],
            in_channels * kh * kw,
            out_channels * kh * kw,
            rng,
        );
        Ok(Self {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let y = with_layer(&self.name, s.graph.conv2d(x, w, self.stride, self.padding))?;
        s.graph.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    weight: ParamId,
    bias: ParamId,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot(
            &[out_channels, in_channels, kernel],
            in_channels * kernel,
            out_channels * kernel,
            rng,
        );
        Ok(Self {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let y = with_layer(&self.name, s.graph.conv1d(x, w, 1, self.padding))?;
        s.graph.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    weight: ParamId,
    bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot(&[inputs, outputs], inputs, outputs, rng);
        Ok(Self {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true)?,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        with_layer(&self.name, s.graph.dense(x, w, b))
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Batch normalization with running statistics (`running = m·running +
/// (1 − m)·batch`, momentum 0.9 by default).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                true,
            )?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            )?,
            momentum: 0.9,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma)?;
        let beta = s.param(self.beta)?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = with_layer(
                    &self.name,
                    s.graph.batch_norm_train(x, gamma, beta, self.eps),
                )?;
                let m = T::from_f64_lossy(self.momentum);
                let store = s.store_mut();
                for (id, batch) in [
                    (self.running_mean, &stats.mean),
                    (self.running_var, &stats.var),
                ] {
                    for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = s.store().get(self.running_mean).data().to_vec();
                let var = s.store().get(self.running_var).data().to_vec();
                with_layer(
                    &self.name,
                    s.graph
                        .batch_norm_eval(x, gamma, beta, &mean, &var, self.eps),
                )
            }
        }
    }
}

/// Dropout that is the identity outside training mode.
pub fn dropout<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: f64) -> Result<Var> {
    if s.mode() == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    let len = s.graph.value(x).len();
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask = (0..len)
        .map(|_| {
            if s.rng().random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    s.graph.apply_mask(x, mask)
}

pub fn max_pool2d<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    window: (usize, usize),
    layer: &str,
) -> Result<Var> {
    with_layer(layer, s.graph.pool2d(x, window, PoolMode::Max))
}

pub fn max_pool1d<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    window: usize,
    layer: &str,
) -> Result<Var> {
    with_layer(layer, s.graph.pool1d(x, window, PoolMode::Max))
}
