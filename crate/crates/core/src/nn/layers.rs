use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::params::{Init, ParamStore};
use crate::error::Result;

/// Gain for fan-in initialization of layers followed by a rectifier.
pub const RELU_GAIN: f64 = 2.0;

/// Forward-pass mode. Training mode carries the generator for dropout masks.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Prefix helper for registering parameters under dotted names.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: impl Into<String>) -> Self {
        Self {
            store,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = self.path(name);
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let p = self.path(name);
        self.store.param(&p, shape, init)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let p = self.path(name);
        self.store.buffer(&p, shape, value)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = scope.param(
            "weight",
            &[c_out, c_in, kernel, kernel],
            Init::FanIn { fan_in, gain },
        )?;
        let bias = if bias {
            Some(scope.param("bias", &[c_out], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), self.stride, self.pad)?;
        match &self.bias {
            Some(b) => ops::add_channel_bias(&y, b.as_tensor()),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Kernel equals stride, so the output is exactly `stride` times larger.
    pub fn new(scope: &mut Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let weight = scope.param(
            "weight",
            &[c_in, c_out, stride, stride],
            Init::FanIn {
                fan_in: c_in,
                gain: 1.0,
            },
        )?;
        let bias = scope.param("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv_transpose2d(x, self.weight.as_tensor(), self.stride, 0)?;
        ops::add_channel_bias(&y, self.bias.as_tensor())
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Const(1.0))?,
            beta: scope.param("beta", &[channels], Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Batch statistics in training mode (updating the running estimates with
    /// the unbiased variance), running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let (mean, var) = ops::channel_moments(x)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let blend = |run: &Var, batch: Vec<f64>| -> Result<()> {
                let batch = Tensor::from_vec(batch, run.dims(), run.device())?.to_dtype(run.dtype())?;
                run.set(&((run.as_tensor() * (1.0 - m))? + (batch * m)?)?)?;
                Ok(())
            };
            blend(&self.running_mean, mean.clone())?;
            blend(&self.running_var, var.iter().map(|v| v * unbiased).collect())?;
            (mean, var)
        } else {
            let read = |v: &Var| -> Result<Vec<f64>> { Ok(v.as_tensor().to_dtype(DType::F64)?.to_vec1()?) };
            (read(&self.running_mean)?, read(&self.running_var)?)
        };
        let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        ops::channel_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), mean, inv_std, train)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(scope: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param(
                "weight",
                &[d_out, d_in],
                Init::FanIn {
                    fan_in: d_in,
                    gain: 1.0,
                },
            )?,
            bias: scope.param("bias", &[d_out], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope·x) for 0 <= slope < 1
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // (tanh(x/2) + 1) / 2 keeps gradients finite for large |x|
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Inverted dropout: kept units are scaled by `1/(1-rate)`.
pub fn dropout(x: &Tensor, rate: f64, mode: &mut Mode) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let keep = 1.0 - rate;
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Mean of `x` over all but the first dimension, returned as shape `(B,)`.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
