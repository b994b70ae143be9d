//! Noise predictor over fully connected graphs of set elements.
//!
//! Every node carries `[x_t; h; emb(t)]`. After an input projection the
//! nodes pass through four pre-norm attention layers in which each node
//! attends to every node of its own graph (self included) and to nothing
//! else. Graphs of different sizes share one node matrix; `offsets` delimit
//! the blocks of the block-diagonal attention mask. No node-index encoding is
//! used anywhere, so the map is equivariant to node reordering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{gelu, gelu_backward, join, LayerNormCache};
use crate::nn::{Float, LayerNorm, Linear, Params, Tensor};

/// Number of attention layers in the stack.
pub const NUM_LAYERS: usize = 4;
/// Feed-forward expansion factor.
pub const FF_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub feature_dim: usize,
    pub position_dim: usize,
    /// Diffusion steps `T`; the embedding table has `T + 1` rows.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.time_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidDims(format!("{self:?}")));
        }
        if !(1..=2).contains(&self.position_dim) {
            return Err(Error::InvalidDims(format!(
                "position dimension must be 1 or 2, got {}",
                self.position_dim
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidDims("steps must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::IndivisibleHeads { width: self.width, heads: self.heads });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.position_dim + self.feature_dim + self.time_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<F> {
    pub norm1: LayerNorm<F>,
    /// Fused query/key/value projection, `width -> 3 * width`.
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Float> Params<F> for AttentionLayer<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "attn.qkv"), f);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "ff.fc1"), f);
        self.fc2.visit(&join(prefix, "ff.fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "attn.qkv"), f);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "ff.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "ff.fc2"), f);
    }
}

/// All learnable weights of the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<F> {
    pub config: DenoiserConfig,
    pub input: Linear<F>,
    /// `[T + 1, time_dim]`
    pub time_embed: Tensor<F>,
    pub layers: Vec<AttentionLayer<F>>,
    pub final_norm: LayerNorm<F>,
    pub head: Linear<F>,
}

impl<F: Float> Params<F> for DenoiserParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.input.visit(&join(prefix, "input"), f);
        f(join(prefix, "time_embed"), &self.time_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        f(join(prefix, "time_embed"), &mut self.time_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Sinusoidal starting point for the learned timestep table, so that nearby
/// timesteps begin with similar rows.
fn sinusoidal_table<F: Float>(config: &DenoiserConfig) -> Vec<F> {
    let e = config.time_dim;
    let half = e.div_ceil(2);
    let mut out = Vec::with_capacity((config.steps + 1) * e);
    for t in 0..=config.steps {
        for j in 0..e {
            let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out.push(F::from_f64_lossy(if j < half { a.sin() } else { a.cos() }));
        }
    }
    out
}

/// Deterministic initialization from `seed`.
pub fn init_params<F: Float>(seed: u64, config: &DenoiserConfig) -> Result<DenoiserParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.width;
    let input = Linear::new(&mut rng, config.input_dim(), w, 1.0);
    let time_embed = Tensor::from_vec(&[config.steps + 1, config.time_dim], sinusoidal_table(config));
    let layers = (0..NUM_LAYERS)
        .map(|_| AttentionLayer {
            norm1: LayerNorm::new(w),
            qkv: Linear::new(&mut rng, w, 3 * w, 1.0),
            proj: Linear::new(&mut rng, w, w, 1.0),
            norm2: LayerNorm::new(w),
            fc1: Linear::new(&mut rng, w, FF_MULT * w, 1.0),
            fc2: Linear::new(&mut rng, FF_MULT * w, w, 1.0),
        })
        .collect();
    Ok(DenoiserParams {
        config: config.clone(),
        input,
        time_embed,
        layers,
        final_norm: LayerNorm::new(w),
        head: Linear::new(&mut rng, w, config.position_dim, 1.0),
    })
}

impl<F: Float> DenoiserParams<F> {
    pub fn embed_timestep(&self, t: usize) -> Result<&[F]> {
        if t > self.config.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.config.steps });
        }
        let e = self.config.time_dim;
        Ok(&self.time_embed.data[t * e..(t + 1) * e])
    }

    pub fn cast<G: Float>(&self) -> DenoiserParams<G> {
        let mut out: DenoiserParams<G> =
            init_params(0, &self.config).expect("config was validated on construction");
        let src = self.named_tensors();
        for (dst, (_, s)) in out.tensors_mut().into_iter().zip(src) {
            *dst = s.cast();
        }
        out
    }
}

/// A batch of fully connected graphs sharing one node matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch<F> {
    /// `offsets[g]..offsets[g + 1]` are the nodes of graph `g`.
    pub offsets: Vec<usize>,
    /// `[N, d]`
    pub features: Vec<F>,
    /// `[N, n]`, the noisy positions `x_t`.
    pub positions: Vec<F>,
    /// One timestep per graph.
    pub timesteps: Vec<usize>,
    pub feature_dim: usize,
    pub position_dim: usize,
}

impl<F: Float> GraphBatch<F> {
    pub fn new(
        sizes: &[usize],
        features: Vec<F>,
        positions: Vec<F>,
        timesteps: Vec<usize>,
        feature_dim: usize,
        position_dim: usize,
    ) -> Result<Self> {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for (g, &k) in sizes.iter().enumerate() {
            if k == 0 {
                return Err(Error::EmptyGraph(g));
            }
            offsets.push(offsets[g] + k);
        }
        let n_nodes = *offsets.last().unwrap();
        if timesteps.len() != sizes.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} timesteps", sizes.len()),
                got: timesteps.len().to_string(),
            });
        }
        if features.len() != n_nodes * feature_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_nodes}x{feature_dim} features"),
                got: features.len().to_string(),
            });
        }
        if positions.len() != n_nodes * position_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_nodes}x{position_dim} positions"),
                got: positions.len().to_string(),
            });
        }
        Ok(Self { offsets, features, positions, timesteps, feature_dim, position_dim })
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn graph_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

struct LayerCache<F> {
    ln1: LayerNormCache<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    ln2: LayerNormCache<F>,
    a2: Vec<F>,
    ff_pre: Vec<F>,
    ff_act: Vec<F>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache<F> {
    offsets: Vec<usize>,
    timesteps: Vec<usize>,
    input: Vec<F>,
    layers: Vec<LayerCache<F>>,
    final_ln: LayerNormCache<F>,
    final_out: Vec<F>,
}

/// Offsets into the flat attention-probability buffer, one `K_g * K_g` block per graph and head.
fn prob_offsets(offsets: &[usize], heads: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(offsets.len());
    let mut acc = 0;
    out.push(0);
    for w in offsets.windows(2) {
        let k = w[1] - w[0];
        acc += k * k * heads;
        out.push(acc);
    }
    out
}

fn attention_forward<F: Float>(
    qkv: &[F],
    offsets: &[usize],
    width: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let n = *offsets.last().unwrap();
    let dh = width / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let poff = prob_offsets(offsets, heads);
    let mut probs = vec![F::zero(); *poff.last().unwrap()];
    let mut out = vec![F::zero(); n * width];
    let stride = 3 * width;
    let mut row = Vec::new();
    for g in 0..offsets.len() - 1 {
        let (s, e) = (offsets[g], offsets[g + 1]);
        let k = e - s;
        for h in 0..heads {
            let p = &mut probs[poff[g] + h * k * k..poff[g] + (h + 1) * k * k];
            let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
            for i in 0..k {
                let q = &qkv[(s + i) * stride + qo..][..dh];
                row.clear();
                let mut max = F::neg_infinity();
                for j in 0..k {
                    let kk = &qkv[(s + j) * stride + ko..][..dh];
                    let sc = q.iter().zip(kk).map(|(a, b)| *a * *b).sum::<F>() * scale;
                    if sc > max {
                        max = sc;
                    }
                    row.push(sc);
                }
                let mut z = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let o = &mut out[(s + i) * width + qo..][..dh];
                for j in 0..k {
                    let pij = row[j] / z;
                    p[i * k + j] = pij;
                    let v = &qkv[(s + j) * stride + vo..][..dh];
                    for (oc, vc) in o.iter_mut().zip(v) {
                        *oc += pij * *vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<F: Float>(
    qkv: &[F],
    probs: &[F],
    d_out: &[F],
    offsets: &[usize],
    width: usize,
    heads: usize,
) -> Vec<F> {
    let n = *offsets.last().unwrap();
    let dh = width / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let poff = prob_offsets(offsets, heads);
    let stride = 3 * width;
    let mut d_qkv = vec![F::zero(); n * stride];
    let mut dp = Vec::new();
    for g in 0..offsets.len() - 1 {
        let (s, e) = (offsets[g], offsets[g + 1]);
        let k = e - s;
        for h in 0..heads {
            let p = &probs[poff[g] + h * k * k..poff[g] + (h + 1) * k * k];
            let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
            for i in 0..k {
                let dout = &d_out[(s + i) * width + qo..][..dh];
                dp.clear();
                let mut dot = F::zero();
                for j in 0..k {
                    let v = &qkv[(s + j) * stride + vo..][..dh];
                    let d = dout.iter().zip(v).map(|(a, b)| *a * *b).sum::<F>();
                    dot += p[i * k + j] * d;
                    dp.push(d);
                    let pij = p[i * k + j];
                    let dv = &mut d_qkv[(s + j) * stride + vo..][..dh];
                    for (a, b) in dv.iter_mut().zip(dout) {
                        *a += pij * *b;
                    }
                }
                for j in 0..k {
                    let ds = p[i * k + j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kc = qkv[(s + j) * stride + ko + c];
                        let qc = qkv[(s + i) * stride + qo + c];
                        d_qkv[(s + i) * stride + qo + c] += ds * kc;
                        d_qkv[(s + j) * stride + ko + c] += ds * qc;
                    }
                }
            }
        }
    }
    d_qkv
}

fn check_batch<F: Float>(params: &DenoiserParams<F>, batch: &GraphBatch<F>) -> Result<()> {
    let cfg = &params.config;
    if batch.feature_dim != cfg.feature_dim {
        return Err(Error::FeatureDim { expected: cfg.feature_dim, got: batch.feature_dim });
    }
    if batch.position_dim != cfg.position_dim {
        return Err(Error::DimensionMismatch {
            what: "position dimension n".into(),
            expected: batch.position_dim,
            found: cfg.position_dim,
        });
    }
    if batch.num_graphs() == 0 {
        return Err(Error::EmptyInput("graph batch"));
    }
    for (g, w) in batch.offsets.windows(2).enumerate() {
        if w[1] == w[0] {
            return Err(Error::EmptyGraph(g));
        }
    }
    for &t in &batch.timesteps {
        if t > cfg.steps {
            return Err(Error::TimestepOutOfRange { t, max: cfg.steps });
        }
    }
    Ok(())
}

/// Runs the predictor and keeps what the backward pass needs.
pub fn forward<F: Float>(
    params: &DenoiserParams<F>,
    batch: &GraphBatch<F>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    check_batch(params, batch)?;
    let cfg = &params.config;
    let (w, heads) = (cfg.width, cfg.heads);
    let n_nodes = batch.num_nodes();
    let (pd, fd) = (cfg.position_dim, cfg.feature_dim);
    let in_dim = cfg.input_dim();

    let mut input = Vec::with_capacity(n_nodes * in_dim);
    for g in 0..batch.num_graphs() {
        let temb = params.embed_timestep(batch.timesteps[g])?;
        for i in batch.graph_range(g) {
            input.extend_from_slice(&batch.positions[i * pd..(i + 1) * pd]);
            input.extend_from_slice(&batch.features[i * fd..(i + 1) * fd]);
            input.extend_from_slice(temb);
        }
    }
    debug_assert_eq!(input.len(), n_nodes * in_dim);

    let mut u = params.input.forward(&input, n_nodes);
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a1, ln1) = layer.norm1.forward(&u, n_nodes);
        let qkv = layer.qkv.forward(&a1, n_nodes);
        let (attn, probs) = attention_forward(&qkv, &batch.offsets, w, heads);
        let o = layer.proj.forward(&attn, n_nodes);
        for (x, y) in u.iter_mut().zip(&o) {
            *x += *y;
        }
        let (a2, ln2) = layer.norm2.forward(&u, n_nodes);
        let ff_pre = layer.fc1.forward(&a2, n_nodes);
        let ff_act = gelu(&ff_pre);
        let f = layer.fc2.forward(&ff_act, n_nodes);
        for (x, y) in u.iter_mut().zip(&f) {
            *x += *y;
        }
        caches.push(LayerCache { ln1, a1, qkv, probs, attn, ln2, a2, ff_pre, ff_act });
    }
    let (final_out, final_ln) = params.final_norm.forward(&u, n_nodes);
    let out = params.head.forward(&final_out, n_nodes);
    Ok((
        out,
        ForwardCache {
            offsets: batch.offsets.clone(),
            timesteps: batch.timesteps.clone(),
            input,
            layers: caches,
            final_ln,
            final_out,
        },
    ))
}

/// Per-node noise estimate `[N, n]`.
pub fn denoise<F: Float>(params: &DenoiserParams<F>, batch: &GraphBatch<F>) -> Result<Vec<F>> {
    forward(params, batch).map(|(out, _)| out)
}

/// Accumulates parameter gradients into `grads`; returns `dL/dfeatures` (`[N, d]`).
pub fn backward<F: Float>(
    params: &DenoiserParams<F>,
    cache: &ForwardCache<F>,
    d_out: &[F],
    grads: &mut DenoiserParams<F>,
) -> Vec<F> {
    let cfg = &params.config;
    let (w, heads) = (cfg.width, cfg.heads);
    let n_nodes = *cache.offsets.last().unwrap();

    let d_final = params.head.backward(&cache.final_out, d_out, n_nodes, &mut grads.head);
    let mut du = params.final_norm.backward(&cache.final_ln, &d_final, &mut grads.final_norm);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        let g = &mut grads.layers[li];
        // feed-forward branch
        let d_act = layer.fc2.backward(&c.ff_act, &du, n_nodes, &mut g.fc2);
        let d_pre = gelu_backward(&c.ff_pre, &d_act);
        let d_a2 = layer.fc1.backward(&c.a2, &d_pre, n_nodes, &mut g.fc1);
        let d_ln2 = layer.norm2.backward(&c.ln2, &d_a2, &mut g.norm2);
        for (x, y) in du.iter_mut().zip(&d_ln2) {
            *x += *y;
        }
        // attention branch
        let d_attn = layer.proj.backward(&c.attn, &du, n_nodes, &mut g.proj);
        let d_qkv = attention_backward(&c.qkv, &c.probs, &d_attn, &cache.offsets, w, heads);
        let d_a1 = layer.qkv.backward(&c.a1, &d_qkv, n_nodes, &mut g.qkv);
        let d_ln1 = layer.norm1.backward(&c.ln1, &d_a1, &mut g.norm1);
        for (x, y) in du.iter_mut().zip(&d_ln1) {
            *x += *y;
        }
    }

    let d_input = params.input.backward(&cache.input, &du, n_nodes, &mut grads.input);
    let (pd, fd, td) = (cfg.position_dim, cfg.feature_dim, cfg.time_dim);
    let in_dim = cfg.input_dim();
    let mut d_features = vec![F::zero(); n_nodes * fd];
    for g in 0..cache.offsets.len() - 1 {
        let t = cache.timesteps[g];
        for i in cache.offsets[g]..cache.offsets[g + 1] {
            let row = &d_input[i * in_dim..(i + 1) * in_dim];
            d_features[i * fd..(i + 1) * fd].copy_from_slice(&row[pd..pd + fd]);
            let trow = &mut grads.time_embed.data[t * td..(t + 1) * td];
            for (a, b) in trow.iter_mut().zip(&row[pd + fd..]) {
                *a += *b;
            }
        }
    }
    d_features
}

/// Mean squared error against `eps` and the gradient of the prediction.
pub fn mse_and_grad<F: Float>(pred: &[F], eps: &[F]) -> Result<(f64, Vec<F>)> {
    if pred.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: pred.len().to_string(),
            got: eps.len().to_string(),
        });
    }
    let count = F::from_usize(pred.len()).unwrap();
    let two = F::from_f64_lossy(2.0);
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(eps)
        .map(|(&p, &e)| {
            let d = p - e;
            sum += (d * d).to_f64_lossy();
            two * d / count
        })
        .collect();
    Ok((sum / pred.len() as f64, grad))
}

pub struct Gradients<F> {
    pub params: DenoiserParams<F>,
    /// `dL/dh`, `[N, d]`, for training an upstream feature encoder.
    pub features: Vec<F>,
}

/// Simple-loss value and exact gradients with respect to every parameter and every node feature.
pub fn loss_and_gradients<F: Float>(
    params: &DenoiserParams<F>,
    batch: &GraphBatch<F>,
    eps: &[F],
) -> Result<(f64, Gradients<F>)> {
    let (out, cache) = forward(params, batch)?;
    let (loss, d_out) = mse_and_grad(&out, eps)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    let mut grads = params.zeros_like();
    let features = backward(params, &cache, &d_out, &mut grads);
    Ok((loss, Gradients { params: grads, features }))
}
