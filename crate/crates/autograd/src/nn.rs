//! Layers built on [`Binder`].

use rand::Rng;

use crate::error::Result;
use crate::params::{Binder, Mode, ParamId, ParamStore, StatUpdate};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_kaiming(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, stride, pad, in_channels: cin, out_channels: cout }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, true, rng)
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        x.conv2d(w, bias, self.stride, self.pad)
    }
}

/// Fully connected layer, weight stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add_kaiming(format!("{name}.weight"), &[fin, fout], fin, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fout]));
        Linear { weight, bias, in_features: fin, out_features: fout }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(b.param(self.weight))?.try_add(b.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (gamma, beta) = (b.param(self.gamma), b.param(self.beta));
        match b.mode {
            Mode::Train => {
                let shape = x.shape();
                let (y, mean, var) = x.batch_norm(gamma, beta, T::of(self.eps))?;
                b.record_stats(StatUpdate {
                    mean_buf: self.running_mean,
                    var_buf: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    count: shape[0] * shape[2] * shape[3],
                });
                Ok(y)
            }
            Mode::Eval => {
                let c = self.channels;
                let eps = T::of(self.eps);
                let rm = b.store.get(self.running_mean);
                let rv = b.store.get(self.running_var);
                let scale: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mean = b.tape.constant(Tensor::from_vec(&[1, c, 1, 1], rm.data().to_vec())?);
                let inv = b.tape.constant(Tensor::from_vec(&[1, c, 1, 1], scale)?);
                let gamma = gamma.reshape(&[1, c, 1, 1])?;
                let beta = beta.reshape(&[1, c, 1, 1])?;
                Ok((x - mean) * inv * gamma + beta)
            }
        }
    }
}
