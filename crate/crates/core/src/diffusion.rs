//! Gaussian diffusion over element positions.
//!
//! Positions are noised with the closed-form marginal
//! `x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps` and recovered with the
//! deterministic (zero-variance) DDIM update, visiting a strided subsequence
//! of timesteps from `T` down to `0`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precomputed variance tables for a linear beta ramp.
///
/// `alpha_bar` has `T + 1` entries with `alpha_bar[0] == 1`, so `t = 0` is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (i as f64) / ((steps - 1) as f64) * (beta_end - beta_start)
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Start the reverse process at `x_T = 0`.
    #[default]
    ZeroCentered,
    /// Start from `x_T ~ N(0, I)`.
    StandardGaussian,
}

/// Sampling is always deterministic DDIM (sigma = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub inference_ratio: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub init_mode: InitMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            inference_ratio: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            init_mode: InitMode::ZeroCentered,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::from_config(self)?;
        timestep_subsequence(self.steps, self.inference_ratio)?;
        Ok(())
    }
}

/// `K` points in `R^dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PositionSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {dim}"),
                got: coords.len().to_string(),
            });
        }
        Ok(Self { dim, coords })
    }

    pub fn zeros(count: usize, dim: usize) -> Self {
        Self { dim, coords: vec![0.0; count * dim] }
    }

    pub fn standard_normal(count: usize, dim: usize, rng: &mut dyn RngCore) -> Self {
        let coords = (0..count * dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { dim, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    fn check_same_shape(&self, other: &PositionSet) -> Result<()> {
        if self.dim != other.dim || self.coords.len() != other.coords.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.len(), self.dim),
                got: format!("{}x{}", other.len(), other.dim),
            });
        }
        Ok(())
    }
}

/// Samples `q(x_t | x_0)` with externally supplied noise.
pub fn forward_sample(
    x0: &PositionSet,
    t: usize,
    eps: &PositionSet,
    sched: &NoiseSchedule,
) -> Result<PositionSet> {
    if t < 1 {
        return Err(Error::TimestepOutOfRange { t, max: sched.steps() });
    }
    sched.check_t(t)?;
    x0.check_same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let coords = x0.coords.iter().zip(&eps.coords).map(|(x, e)| a * x + b * e).collect();
    Ok(PositionSet { dim: x0.dim, coords })
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &PositionSet,
    eps_hat: &PositionSet,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<PositionSet> {
    if t_prev >= t {
        return Err(Error::InvalidStep { t, t_prev });
    }
    sched.check_t(t)?;
    x_t.check_same_shape(eps_hat)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (s_t, s1_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, s1_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let coords = x_t
        .coords
        .iter()
        .zip(&eps_hat.coords)
        .map(|(&x, &e)| {
            let x0_hat = (x - s1_t * e) / s_t;
            s_p * x0_hat + s1_p * e
        })
        .collect();
    Ok(PositionSet { dim: x_t.dim, coords })
}

/// Visited timesteps `T, T-r, T-2r, ...` (all positive) followed by `0`.
pub fn timestep_subsequence(steps: usize, ratio: usize) -> Result<Vec<usize>> {
    if ratio < 1 || ratio > steps {
        return Err(Error::InvalidRatio { ratio, steps });
    }
    let mut seq: Vec<usize> = (1..=steps).rev().step_by(ratio).collect();
    seq.push(0);
    Ok(seq)
}

/// Mean squared error over every scalar entry.
pub fn simple_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: eps.len().to_string(),
            got: eps_hat.len().to_string(),
        });
    }
    if eps.is_empty() {
        return Err(Error::EmptyInput("noise"));
    }
    let sum: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// Runs the full reverse process and returns `x_0`.
///
/// `denoise` maps `(x_t, t)` to a noise estimate of the same shape; element
/// features are whatever the closure captures.
pub fn reverse_process<D>(
    denoise: D,
    count: usize,
    dim: usize,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    rng: Option<&mut dyn RngCore>,
) -> Result<PositionSet>
where
    D: FnMut(&PositionSet, usize) -> Result<PositionSet>,
{
    reverse_process_observed(denoise, count, dim, cfg, sched, rng, |_, _| {})
}

/// Like [`reverse_process`], but reports every visited state (including the
/// initial `x_T` and the final `x_0`) to `observe`.
pub fn reverse_process_observed<D, O>(
    mut denoise: D,
    count: usize,
    dim: usize,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    rng: Option<&mut dyn RngCore>,
    mut observe: O,
) -> Result<PositionSet>
where
    D: FnMut(&PositionSet, usize) -> Result<PositionSet>,
    O: FnMut(usize, &PositionSet),
{
    if cfg.steps != sched.steps() {
        return Err(Error::InvalidConfig(format!(
            "config has T={} but schedule has T={}",
            cfg.steps,
            sched.steps()
        )));
    }
    let seq = timestep_subsequence(cfg.steps, cfg.inference_ratio)?;
    let mut x = match cfg.init_mode {
        InitMode::ZeroCentered => PositionSet::zeros(count, dim),
        InitMode::StandardGaussian => {
            let rng = rng.ok_or(Error::MissingEntropy)?;
            PositionSet::standard_normal(count, dim, rng)
        }
    };
    observe(seq[0], &x);
    for w in seq.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_hat = denoise(&x, t)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, sched)?;
        observe(t_prev, &x);
    }
    Ok(x)
}

/// Noise estimate that is exactly consistent with `target` at step `t`.
///
/// Feeding this to [`ddim_step`] makes the predicted `x_0` equal `target`.
pub fn consistent_noise(
    x_t: &PositionSet,
    target: &PositionSet,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PositionSet> {
    sched.check_t(t)?;
    x_t.check_same_shape(target)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let coords = x_t.coords.iter().zip(&target.coords).map(|(x, x0)| (x - a * x0) / b).collect();
    Ok(PositionSet { dim: x_t.dim, coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(300, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = default_schedule();
        // Oracle: independent evaluation of prod_{t=1..300} (1 - beta_t).
        let mut prod = 1.0f64;
        for t in 1..=300 {
            let beta = 1e-4 + (t - 1) as f64 / 299.0 * (0.02 - 1e-4);
            prod *= 1.0 - beta;
        }
        assert!(((s.alpha_bar(300) - prod) / prod).abs() < 1e-12);
        for t in 1..=300 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_sample_zero_noise_shrinks() {
        let s = default_schedule();
        let x0 = PositionSet::new(2, vec![0.5, -0.25, 1.0, 1.0]).unwrap();
        let eps = PositionSet::zeros(2, 2);
        let xt = forward_sample(&x0, 150, &eps, &s).unwrap();
        let a = s.alpha_bar(150).sqrt();
        for (x, y) in xt.coords().iter().zip(x0.coords()) {
            assert_eq!(*x, a * y);
        }
    }

    #[test]
    fn forward_sample_hand_evaluated() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        let x0 = PositionSet::new(2, vec![1.0, -1.0]).unwrap();
        let eps = PositionSet::new(2, vec![1.0, 1.0]).unwrap();
        let xt = forward_sample(&x0, 2, &eps, &s).unwrap();
        let (a, b) = (0.63f64.sqrt(), 0.37f64.sqrt());
        assert!((xt.coords()[0] - (a + b)).abs() < 1e-12);
        assert!((xt.coords()[1] - (-a + b)).abs() < 1e-12);
        assert!((xt.coords()[0] - (0.7937 + 0.6083)).abs() < 1e-4);
    }

    #[test]
    fn forward_sample_rejects_out_of_range() {
        let s = default_schedule();
        let x = PositionSet::zeros(1, 2);
        assert!(forward_sample(&x, 0, &x, &s).is_err());
        assert!(forward_sample(&x, 301, &x, &s).is_err());
    }

    #[test]
    fn ddim_consistent_noise_recovers_target() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = PositionSet::standard_normal(5, 2, &mut rng);
        let xt = PositionSet::standard_normal(5, 2, &mut rng);
        let eps = consistent_noise(&xt, &x0, 200, &s).unwrap();
        let out = ddim_step(&xt, &eps, 200, 0, &s).unwrap();
        for (a, b) in out.coords().iter().zip(x0.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mid = ddim_step(&xt, &eps, 200, 150, &s).unwrap();
        let ab = s.alpha_bar(150);
        for i in 0..10 {
            let want = ab.sqrt() * x0.coords()[i] + (1.0 - ab).sqrt() * eps.coords()[i];
            assert!((mid.coords()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_scalar_reimplementation() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = PositionSet::standard_normal(8, 2, &mut rng);
        let eps = PositionSet::standard_normal(8, 2, &mut rng);
        let out = ddim_step(&xt, &eps, 200, 190, &s).unwrap();
        // independent: recompute alpha_bar from betas directly
        let ab = |t: usize| -> f64 {
            (1..=t).map(|k| 1.0 - (1e-4 + (k - 1) as f64 / 299.0 * (0.02 - 1e-4))).product()
        };
        let (a200, a190) = (ab(200), ab(190));
        for i in 0..16 {
            let x = xt.coords()[i];
            let e = eps.coords()[i];
            let want = a190.sqrt() * (x - (1.0 - a200).sqrt() * e) / a200.sqrt() + (1.0 - a190).sqrt() * e;
            assert!(((out.coords()[i] - want) / want).abs() < 1e-10);
        }
    }

    #[test]
    fn ddim_rejects_forward_steps() {
        let s = default_schedule();
        let x = PositionSet::zeros(1, 1);
        assert!(matches!(ddim_step(&x, &x, 10, 10, &s), Err(Error::InvalidStep { .. })));
        assert!(ddim_step(&x, &x, 301, 0, &s).is_err());
    }

    #[test]
    fn ddim_chain_equals_direct_jump() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = PositionSet::standard_normal(4, 2, &mut rng);
        let e = PositionSet::standard_normal(4, 2, &mut rng);
        let xt = forward_sample(&x0, 250, &e, &s).unwrap();
        let a = ddim_step(&xt, &e, 250, 120, &s).unwrap();
        let a = ddim_step(&a, &e, 120, 40, &s).unwrap();
        let b = ddim_step(&xt, &e, 250, 40, &s).unwrap();
        for (p, q) in a.coords().iter().zip(b.coords()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn subsequence_examples() {
        let seq = timestep_subsequence(300, 10).unwrap();
        assert_eq!(seq.len(), 31);
        assert_eq!(seq[0], 300);
        assert_eq!(seq[29], 10);
        assert_eq!(seq[30], 0);
        assert!(seq.windows(2).all(|w| w[0] - w[1] == 10));
        assert_eq!(timestep_subsequence(300, 300).unwrap(), vec![300, 0]);
        let full = timestep_subsequence(5, 1).unwrap();
        assert_eq!(full, vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(timestep_subsequence(7, 3).unwrap(), vec![7, 4, 1, 0]);
        assert!(timestep_subsequence(10, 0).is_err());
    }

    #[test]
    fn simple_loss_examples() {
        assert_eq!(simple_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(simple_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(simple_loss(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = PositionSet::standard_normal(6, 2, &mut rng);
        let b = PositionSet::standard_normal(6, 2, &mut rng);
        let mut acc = 0.0;
        for i in 0..12 {
            let d = a.coords()[i] - b.coords()[i];
            acc += d * d;
        }
        assert!((simple_loss(a.coords(), b.coords()).unwrap() - acc / 12.0).abs() < 1e-12);
    }

    #[test]
    fn null_denoiser_stays_at_zero() {
        let cfg = DiffusionConfig::default();
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        let out = reverse_process(|x, _| Ok(PositionSet::zeros(x.len(), x.dim())), 6, 2, &cfg, &s, None)
            .unwrap();
        assert!(out.coords().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_init_requires_entropy() {
        let cfg = DiffusionConfig { init_mode: InitMode::StandardGaussian, ..Default::default() };
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        let r = reverse_process(|x, _| Ok(x.clone()), 3, 1, &cfg, &s, None);
        assert!(matches!(r, Err(Error::MissingEntropy)));
    }

    #[test]
    fn observed_states_count() {
        let cfg = DiffusionConfig::default();
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        let mut visited = Vec::new();
        reverse_process_observed(
            |x, _| Ok(PositionSet::zeros(x.len(), x.dim())),
            2,
            2,
            &cfg,
            &s,
            None,
            |t, _| visited.push(t),
        )
        .unwrap();
        assert_eq!(visited.len(), 31);
        assert_eq!(visited[0], 300);
        assert_eq!(*visited.last().unwrap(), 0);
    }
}
