use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{matmul, Float, Tensor};

/// Uniform access to named parameter tensors.
///
/// Names are dotted paths (`layers.0.attn.qkv.weight`) and are what checkpoints
/// store, so they must stay stable.
pub trait Params<F: Float> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>));

    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill_zero());
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_grad();
        z
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Draws `len` values from N(0, std²), computed in f64 so that f32 and f64
/// instantiations share the same initial weights up to rounding.
pub fn normal_init<F: Float, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<F> {
    (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64_lossy(z * std)
        })
        .collect()
}

/// Affine map `y = x W + b` over a batch of rows; `W` is stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Float> Linear<F> {
    /// Weights drawn from N(0, gain²/in_dim); zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        Self {
            weight: Tensor::from_vec(&[in_dim, out_dim], normal_init(rng, in_dim * out_dim, std)),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.data);
        }
        matmul(x, false, &self.weight.data, false, &mut y, rows, i, o, true);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[F], dy: &[F], rows: usize, grad: &mut Linear<F>) -> Vec<F> {
        self.backward_params(x, dy, rows, grad);
        let (i, o) = (self.in_dim(), self.out_dim());
        let mut dx = vec![F::zero(); rows * i];
        matmul(dy, false, &self.weight.data, true, &mut dx, rows, o, i, false);
        dx
    }

    pub fn backward_params(&self, x: &[F], dy: &[F], rows: usize, grad: &mut Linear<F>) {
        let (i, o) = (self.in_dim(), self.out_dim());
        matmul(x, true, dy, false, &mut grad.weight.data, i, rows, o, true);
        for row in dy.chunks_exact(o) {
            for (g, v) in grad.bias.data.iter_mut().zip(row) {
                *g += *v;
            }
        }
    }
}

impl<F: Float> Params<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

pub struct LayerNormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Float> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Tensor::full(&[dim], F::one()), beta: Tensor::zeros(&[dim]) }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> (Vec<F>, LayerNormCache<F>) {
        let dim = self.gamma.len();
        let inv_dim = F::one() / F::from_usize(dim).unwrap();
        let eps = F::from_f64_lossy(LN_EPS);
        let mut xhat = vec![F::zero(); rows * dim];
        let mut rstd = Vec::with_capacity(rows);
        let mut y = vec![F::zero(); rows * dim];
        for r in 0..rows {
            let row = &x[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<F>() * inv_dim;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_dim;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..dim {
                let xh = (row[c] - mean) * rs;
                xhat[r * dim + c] = xh;
                y[r * dim + c] = xh * self.gamma.data[c] + self.beta.data[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &[F], grad: &mut LayerNorm<F>) -> Vec<F> {
        let dim = self.gamma.len();
        let rows = cache.rstd.len();
        let inv_dim = F::one() / F::from_usize(dim).unwrap();
        let mut dx = vec![F::zero(); rows * dim];
        let mut dxhat = vec![F::zero(); dim];
        for r in 0..rows {
            let xh = &cache.xhat[r * dim..(r + 1) * dim];
            let g = &dy[r * dim..(r + 1) * dim];
            let mut mean_d = F::zero();
            let mut mean_dx = F::zero();
            for c in 0..dim {
                grad.gamma.data[c] += g[c] * xh[c];
                grad.beta.data[c] += g[c];
                dxhat[c] = g[c] * self.gamma.data[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xh[c];
            }
            mean_d *= inv_dim;
            mean_dx *= inv_dim;
            let rs = cache.rstd[r];
            for c in 0..dim {
                dx[r * dim + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

impl<F: Float> Params<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

// tanh approximation of GELU
pub fn gelu<F: Float>(x: &[F]) -> Vec<F> {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    x.iter()
        .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<F: Float>(x: &[F], dy: &[F]) -> Vec<F> {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64_lossy(0.044715);
    let three = F::from_f64_lossy(3.0);
    let half = F::from_f64_lossy(0.5);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let th = (c * (v + a * v * v * v)).tanh();
            let d = half * (F::one() + th)
                + half * v * (F::one() - th * th) * c * (F::one() + three * a * v * v);
            g * d
        })
        .collect()
}

pub fn relu_inplace<F: Float>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes the gradient wherever the forward output was clamped.
pub fn relu_backward_inplace<F: Float>(out: &[F], dy: &mut [F]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}
