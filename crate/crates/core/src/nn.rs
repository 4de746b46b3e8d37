//! Parameterised layers shared by the generator, encoders and fusion head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Binder, Graph, ParamId, Params, Real, Tensor, Var};

/// He-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = params.add(format!("{name}.w"), he_uniform(rng, &[outputs, inputs], inputs));
        let b = params.add(format!("{name}.b"), Tensor::zeros([outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        g.linear(x, p.var(g, self.w), Some(p.var(g, self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let w = params.add(
            format!("{name}.w"),
            he_uniform(rng, &[cout, cin, kernel, kernel, kernel], fan_in),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(g, self.w), Some(p.var(g, self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose3d {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        (stride, pad, output_pad): (usize, usize, usize),
    ) -> Self {
        // each output voxel sees about cin·k³/stride³ inputs
        let fan_in = (cin * kernel.pow(3) / stride.pow(3)).max(1);
        let w = params.add(
            format!("{name}.w"),
            he_uniform(rng, &[cin, cout, kernel, kernel, kernel], fan_in),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride, pad, output_pad }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        g.conv_transpose3d(
            x,
            p.var(g, self.w),
            Some(p.var(g, self.b)),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full([dim], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros([dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(g, self.gamma), p.var(g, self.beta), Self::EPS)
    }
}
