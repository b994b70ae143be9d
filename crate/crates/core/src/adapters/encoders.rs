//! Small trainable feature extractors that turn raw elements into node features `h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patches::{Patch, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::layers::{join, normal_init, relu_backward_inplace, relu_inplace};
use crate::nn::{Conv2d, ConvShape, Float, Linear, Params, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEncoderConfig {
    pub channels: [usize; 3],
    pub feature_dim: usize,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], feature_dim: 64 }
    }
}

/// Three stride-2 convolutions (32 -> 16 -> 8 -> 4), 2x2 average pooling and a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder<F> {
    pub convs: [Conv2d<F>; 3],
    pub proj: Linear<F>,
}

pub struct PatchEncoderCache<F> {
    batch: usize,
    cols: [Vec<F>; 3],
    acts: [Vec<F>; 3],
    pooled: Vec<F>,
}

const POOL: usize = 2;

impl<F: Float> PatchEncoder<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &PatchEncoderConfig) -> Self {
        let [c1, c2, c3] = cfg.channels;
        Self {
            convs: [
                Conv2d::new(rng, 3, c1, 3, 2, 1),
                Conv2d::new(rng, c1, c2, 3, 2, 1),
                Conv2d::new(rng, c2, c3, 3, 2, 1),
            ],
            proj: Linear::new(rng, c3 * POOL * POOL, cfg.feature_dim, 1.0),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn config(&self) -> PatchEncoderConfig {
        PatchEncoderConfig {
            channels: [self.convs[0].out_channels(), self.convs[1].out_channels(), self.convs[2].out_channels()],
            feature_dim: self.feature_dim(),
        }
    }

    /// Features `[B, d]` for a batch of patches.
    pub fn forward(&self, patches: &[&Patch]) -> Result<(Vec<F>, PatchEncoderCache<F>)> {
        let b = patches.len();
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut x = vec![F::zero(); 3 * b * plane];
        let half = F::from_f64_lossy(0.5);
        for (i, p) in patches.iter().enumerate() {
            if p.0.len() != 3 * plane {
                return Err(Error::PatchSize { expected: PATCH_SIZE, got: p.0.len() });
            }
            for c in 0..3 {
                let dst = &mut x[(c * b + i) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(&p.0[c * plane..(c + 1) * plane]) {
                    *d = F::from_f64_lossy(s as f64) - half;
                }
            }
        }
        let mut shape = ConvShape { batch: b, height: PATCH_SIZE, width: PATCH_SIZE };
        let mut cols: [Vec<F>; 3] = Default::default();
        let mut acts: [Vec<F>; 3] = Default::default();
        let mut input = x;
        for (li, conv) in self.convs.iter().enumerate() {
            let (mut y, c, s) = conv.forward(&input, shape);
            relu_inplace(&mut y);
            cols[li] = c;
            shape = s;
            input = y.clone();
            acts[li] = y;
        }
        // [C, B, 4, 4] -> [B, C * 2 * 2]
        let ch = self.convs[2].out_channels();
        let (h, w) = (shape.height, shape.width);
        let (ph, pw) = (h / POOL, w / POOL);
        let inv = F::one() / F::from_usize(ph * pw).unwrap();
        let mut pooled = vec![F::zero(); b * ch * POOL * POOL];
        let last = &acts[2];
        for c in 0..ch {
            for i in 0..b {
                let src = &last[(c * b + i) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let cell = (y / ph) * POOL + xx / pw;
                        pooled[i * ch * POOL * POOL + c * POOL * POOL + cell] += src[y * w + xx] * inv;
                    }
                }
            }
        }
        let feats = self.proj.forward(&pooled, b);
        Ok((feats, PatchEncoderCache { batch: b, cols, acts, pooled }))
    }

    pub fn backward(&self, cache: &PatchEncoderCache<F>, d_feats: &[F], grad: &mut PatchEncoder<F>) {
        let b = cache.batch;
        let d_pooled = self.proj.backward(&cache.pooled, d_feats, b, &mut grad.proj);
        let ch = self.convs[2].out_channels();
        let side = PATCH_SIZE / 8;
        let (ph, pw) = (side / POOL, side / POOL);
        let inv = F::one() / F::from_usize(ph * pw).unwrap();
        let mut dy = vec![F::zero(); ch * b * side * side];
        for c in 0..ch {
            for i in 0..b {
                let dst = &mut dy[(c * b + i) * side * side..][..side * side];
                for y in 0..side {
                    for x in 0..side {
                        let cell = (y / ph) * POOL + x / pw;
                        dst[y * side + x] = d_pooled[i * ch * POOL * POOL + c * POOL * POOL + cell] * inv;
                    }
                }
            }
        }
        let sizes = [PATCH_SIZE, PATCH_SIZE / 2, PATCH_SIZE / 4];
        for li in (0..3).rev() {
            relu_backward_inplace(&cache.acts[li], &mut dy);
            let in_shape = ConvShape { batch: b, height: sizes[li], width: sizes[li] };
            let dx = self.convs[li].backward(&cache.cols[li], &dy, in_shape, &mut grad.convs[li], li > 0);
            match dx {
                Some(d) => dy = d,
                None => break,
            }
        }
    }
}

impl<F: Float> Params<F> for PatchEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEncoderConfig {
    pub vocab: usize,
    pub feature_dim: usize,
    pub max_tokens: usize,
}

impl Default for SequenceEncoderConfig {
    fn default() -> Self {
        Self { vocab: 512, feature_dim: 64, max_tokens: 8 }
    }
}

/// Token embeddings pooled with learned per-position weights.
///
/// For an element of length `L` the weights are `softmax(logits[..L])`, so a
/// single token maps to exactly its embedding while reordering tokens inside an
/// element changes the result.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEncoder<F> {
    /// `[vocab, d]`
    pub embed: Tensor<F>,
    /// `[max_tokens]`
    pub pos_logits: Tensor<F>,
}

pub struct SequenceEncoderCache<F> {
    tokens: Vec<Vec<u32>>,
    weights: Vec<Vec<F>>,
}

impl<F: Float> SequenceEncoder<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &SequenceEncoderConfig) -> Self {
        let embed = Tensor::from_vec(&[cfg.vocab, cfg.feature_dim], normal_init(rng, cfg.vocab * cfg.feature_dim, 1.0));
        let logits = (0..cfg.max_tokens).map(|j| F::from_f64_lossy(-0.25 * j as f64)).collect();
        Self { embed, pos_logits: Tensor::from_vec(&[cfg.max_tokens], logits) }
    }

    pub fn vocab(&self) -> usize {
        self.embed.shape[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.embed.shape[1]
    }

    pub fn max_tokens(&self) -> usize {
        self.pos_logits.len()
    }

    pub fn config(&self) -> SequenceEncoderConfig {
        SequenceEncoderConfig { vocab: self.vocab(), feature_dim: self.feature_dim(), max_tokens: self.max_tokens() }
    }

    fn pool_weights(&self, len: usize) -> Vec<F> {
        let l = &self.pos_logits.data[..len];
        let max = l.iter().copied().fold(F::neg_infinity(), F::max);
        let e: Vec<F> = l.iter().map(|&v| (v - max).exp()).collect();
        let z = e.iter().copied().sum::<F>();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn forward(&self, elements: &[&[u32]]) -> Result<(Vec<F>, SequenceEncoderCache<F>)> {
        let d = self.feature_dim();
        let mut out = vec![F::zero(); elements.len() * d];
        let mut weights = Vec::with_capacity(elements.len());
        for (i, toks) in elements.iter().enumerate() {
            if toks.is_empty() {
                return Err(Error::EmptyInput("sequence element"));
            }
            if toks.len() > self.max_tokens() {
                return Err(Error::InvalidDims(format!(
                    "element has {} tokens, encoder supports {}",
                    toks.len(),
                    self.max_tokens()
                )));
            }
            let w = self.pool_weights(toks.len());
            let row = &mut out[i * d..(i + 1) * d];
            for (&tok, &wj) in toks.iter().zip(&w) {
                if tok as usize >= self.vocab() {
                    return Err(Error::UnknownToken { token: tok, vocab: self.vocab() });
                }
                let e = &self.embed.data[tok as usize * d..(tok as usize + 1) * d];
                for (o, &v) in row.iter_mut().zip(e) {
                    *o += wj * v;
                }
            }
            weights.push(w);
        }
        let tokens = elements.iter().map(|t| t.to_vec()).collect();
        Ok((out, SequenceEncoderCache { tokens, weights }))
    }

    pub fn backward(&self, cache: &SequenceEncoderCache<F>, d_feats: &[F], grad: &mut SequenceEncoder<F>) {
        let d = self.feature_dim();
        for (i, (toks, w)) in cache.tokens.iter().zip(&cache.weights).enumerate() {
            let g = &d_feats[i * d..(i + 1) * d];
            let mut dw = Vec::with_capacity(toks.len());
            for (&tok, &wj) in toks.iter().zip(w) {
                let t = tok as usize;
                let e = &self.embed.data[t * d..(t + 1) * d];
                dw.push(e.iter().zip(g).map(|(a, b)| *a * *b).sum::<F>());
                let ge = &mut grad.embed.data[t * d..(t + 1) * d];
                for (a, &b) in ge.iter_mut().zip(g) {
                    *a += wj * b;
                }
            }
            let dot = w.iter().zip(&dw).map(|(a, b)| *a * *b).sum::<F>();
            for j in 0..toks.len() {
                grad.pos_logits.data[j] += w[j] * (dw[j] - dot);
            }
        }
    }
}

impl<F: Float> Params<F> for SequenceEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "embed"), &self.embed);
        f(join(prefix, "pos_logits"), &self.pos_logits);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        f(join(prefix, "embed"), &mut self.embed);
        f(join(prefix, "pos_logits"), &mut self.pos_logits);
    }
}
