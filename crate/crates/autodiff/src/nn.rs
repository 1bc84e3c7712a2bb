//! Parameterized layers built on the tensor ops. Layers hold their weights as
//! [`Var`]s and take an explicit `frozen` flag on forward, so the same module
//! can serve both optimized and adversarially frozen passes.

use crate::{conv2d, conv_transpose2d, instance_norm, Padding, Tensor, Var};
use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Glorot normal initialization: zero-mean with variance `2 / (fan_in + fan_out)`.
pub fn xavier_normal(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha20Rng,
) -> ArrayD<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn leaf(v: &Var, frozen: bool) -> Tensor {
    if frozen {
        v.frozen()
    } else {
        v.tensor()
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        rng: &mut ChaCha20Rng,
    ) -> Conv2d {
        let w = xavier_normal(&[cout, cin, k, k], cin * k * k, cout * k * k, rng);
        Conv2d {
            w: Var::new(format!("{name}/w"), w),
            b: Var::new(format!("{name}/b"), ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        conv2d(
            x,
            &leaf(&self.w, frozen),
            Some(&leaf(&self.b, frozen)),
            self.stride,
            self.pad,
        )
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut ChaCha20Rng,
    ) -> ConvTranspose2d {
        let w = xavier_normal(&[cin, cout, k, k], cin * k * k, cout * k * k, rng);
        ConvTranspose2d {
            w: Var::new(format!("{name}/w"), w),
            b: Var::new(format!("{name}/b"), ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad,
            output_pad,
        }
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        conv_transpose2d(
            x,
            &leaf(&self.w, frozen),
            Some(&leaf(&self.b, frozen)),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

#[derive(Clone)]
pub struct InstanceNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize) -> InstanceNorm2d {
        InstanceNorm2d {
            gamma: Var::new(format!("{name}/gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Var::new(format!("{name}/beta"), ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        instance_norm(
            x,
            &leaf(&self.gamma, frozen),
            &leaf(&self.beta, frozen),
            self.eps,
        )
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

#[derive(Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize, rng: &mut ChaCha20Rng) -> Linear {
        let w = xavier_normal(&[din, dout], din, dout, rng);
        Linear {
            w: Var::new(format!("{name}/w"), w),
            b: Var::new(format!("{name}/b"), ArrayD::zeros(IxDyn(&[dout]))),
        }
    }

    /// Applies `x w + b` to rows: `[R, din] -> [R, dout]`.
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        x.matmul(&leaf(&self.w, frozen))
            .add_bias_rows(&leaf(&self.b, frozen))
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

/// Uniform interface for seeded weight draws used by tests.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
