//! Contrastive training of the latent feature extractor used to key the
//! knowledge base: random augmentations, the InfoNCE objective over
//! noise-augmented latents, and the one-step denoising projection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::diffusion::{forward_diffuse, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientVector};

/// Random-augmentation settings. Transforms apply in the order jitter,
/// scaling, rotation, axis flips; disabled transforms consume no rng draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Std of additive Gaussian jitter per coordinate.
    pub jitter_sigma: f64,
    /// Isotropic scale factor drawn uniformly from this range.
    pub scale_range: (f64, f64),
    /// Rotation angle drawn uniformly from `[-max, max]`; 2-D data only.
    pub rotation_max_radians: f64,
    /// Axes that may be sign-flipped with probability 1/2.
    pub flip_axes: Vec<bool>,
}

impl AugmentConfig {
    /// Configuration that leaves inputs untouched.
    pub fn identity(dim: usize) -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            rotation_max_radians: 0.0,
            flip_axes: vec![false; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "scale range must be finite with lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidConfig("jitter sigma must be >= 0".into()));
        }
        if !(self.rotation_max_radians.is_finite() && self.rotation_max_radians >= 0.0) {
            return Err(Error::InvalidConfig("rotation max must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rotate a 2-D point about the origin.
pub fn rotate_2d(x: &[f64], angle: f64) -> Result<Vec<f64>> {
    if x.len() != 2 {
        return Err(Error::InvalidConfig(
            "rotation is defined for 2-D data only".into(),
        ));
    }
    let (sin, cos) = angle.sin_cos();
    Ok(vec![cos * x[0] - sin * x[1], sin * x[0] + cos * x[1]])
}

/// Apply one random augmentation draw.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = x.to_vec();
    if cfg.jitter_sigma > 0.0 {
        for v in &mut out {
            let j: f64 = rng.sample(StandardNormal);
            *v += cfg.jitter_sigma * j;
        }
    }
    let (lo, hi) = cfg.scale_range;
    if lo < hi {
        let factor = rng.random_range(lo..hi);
        for v in &mut out {
            *v *= factor;
        }
    } else if lo != 1.0 {
        for v in &mut out {
            *v *= lo;
        }
    }
    if cfg.rotation_max_radians > 0.0 {
        let angle = rng.random_range(-cfg.rotation_max_radians..cfg.rotation_max_radians);
        out = rotate_2d(&out, angle)?;
    }
    for (axis, &may_flip) in cfg.flip_axes.iter().enumerate() {
        if may_flip && axis < out.len() && rng.random_bool(0.5) {
            out[axis] = -out[axis];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
}

/// Settings for contrastive training of the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// In-batch negatives per anchor; capped at batch size - 1.
    pub negatives_per_anchor: usize,
    pub similarity: Similarity,
    /// Timestep whose latents are keyed.
    pub key_timestep: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            negatives_per_anchor: usize::MAX,
            similarity: Similarity::Cosine,
            key_timestep: 80,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            feature_dim: 16,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if self.negatives_per_anchor == 0 {
            return Err(Error::InvalidConfig(
                "negatives_per_anchor must be >= 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive batches need at least 2 anchors".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormFeature);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// InfoNCE over cosine similarities:
/// `-log( exp(sim(a,p)/tau) / (sum_n exp(sim(a,n)/tau) + exp(sim(a,p)/tau)) )`.
pub fn infonce_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be > 0".into()));
    }
    let s_pos = cosine(anchor, positive)? / temperature;
    let mut scores = Vec::with_capacity(negatives.len() + 1);
    scores.push(s_pos);
    for n in negatives {
        scores.push(cosine(anchor, n)? / temperature);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - s_pos)
}

/// The trained keying network together with the timestep it was trained at.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    net: DenseNet,
    key_timestep: u32,
}

impl FeatureExtractor {
    /// Relu hidden layers, identity output head.
    pub fn init<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        key_timestep: u32,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![data_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let mut activations = vec![Activation::Relu; dims.len() - 2];
        activations.push(Activation::Identity);
        let mut net = DenseNet::init(&dims, &activations, rng)?;
        // small positive biases keep relu units out of the dead zone at init
        for layer in 0..dims.len() - 2 {
            for row in 0..net.layers()[layer].out_dim {
                let idx = net.bias_index(layer, row);
                net.params_mut()[idx] = 0.01;
            }
        }
        Ok(Self { net, key_timestep })
    }

    pub fn from_parts(net: DenseNet, key_timestep: u32) -> Self {
        Self { net, key_timestep }
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn key_timestep(&self) -> u32 {
        self.key_timestep
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }
}

/// One-step denoising projection feeding the keying network.
///
/// Predicts the noise at `(x_k, k)`, reconstructs the clean-data estimate, and
/// returns the L2-normalized feature of that estimate.
pub fn extract_feature<P: NoisePredictor + ?Sized>(
    extractor: &FeatureExtractor,
    predictor: &P,
    x_k: &[f64],
    k: u32,
    label: Option<u32>,
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if k != extractor.key_timestep {
        return Err(Error::InvalidConfig(format!(
            "extractor was trained at timestep {}, queried at {k}",
            extractor.key_timestep
        )));
    }
    let x0_pred = one_step_projection(predictor, x_k, k, label, schedule)?;
    let raw = extractor.net.forward(&x0_pred)?;
    normalize(raw)
}

/// Clean-data estimate `(x_k - sqrt(1 - ab_k) * eps_hat) / sqrt(ab_k)`.
pub fn one_step_projection<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_k: &[f64],
    k: u32,
    label: Option<u32>,
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if k < 1 || k > schedule.horizon() {
        return Err(Error::TimestepOutOfRange {
            t: k,
            lo: 1,
            hi: schedule.horizon(),
        });
    }
    let eps_hat = predictor.predict(x_k, k, label)?;
    let ab = schedule.alpha_bar_at(k);
    let noise_scale = (1.0 - ab).sqrt();
    let inv_signal = 1.0 / ab.sqrt();
    Ok(x_k
        .iter()
        .zip(&eps_hat)
        .map(|(&x, &e)| (x - noise_scale * e) * inv_signal)
        .collect())
}

fn normalize(raw: Vec<f64>) -> Result<Vec<f64>> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNormFeature);
    }
    Ok(raw.into_iter().map(|v| v / norm).collect())
}

/// Per-epoch mean contrastive loss, recorded during training.
pub type TrainingCurve = Vec<f64>;

/// SimCLR-style training loop over noise-augmented latents.
///
/// Per anchor, two augmented views form the positive pair and the other
/// anchors' second views serve as negatives. Views are diffused to the key
/// timestep with the closed-form forward process, projected through the frozen
/// predictor, and featurized; the extractor alone is updated.
pub fn train_extractor<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    points: &[Vec<f64>],
    schedule: &VarianceSchedule,
    cfg: &ContrastiveConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(FeatureExtractor, TrainingCurve)> {
    cfg.validate()?;
    aug.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data_dim = points[0].len();
    let mut extractor =
        FeatureExtractor::init(data_dim, &cfg.hidden, cfg.feature_dim, cfg.key_timestep, rng)?;
    let mut adam = crate::nn::AdamState::new(extractor.net.parameter_count(), cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..points.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Vec<f64>> = chunk.iter().map(|&i| &points[i]).collect();
            let (loss, grad) =
                contrastive_batch_gradient(&extractor, predictor, &batch, schedule, cfg, aug, rng)?;
            adam.step(extractor.net.params_mut(), grad.values())?;
            epoch_loss += loss;
            batches += 1;
        }
        curve.push(if batches == 0 {
            0.0
        } else {
            epoch_loss / batches as f64
        });
    }
    Ok((extractor, curve))
}

/// Mean InfoNCE loss over a batch and its gradient with respect to the
/// extractor parameters (the predictor is frozen context).
pub fn contrastive_batch_gradient<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    extractor: &FeatureExtractor,
    predictor: &P,
    batch: &[&Vec<f64>],
    schedule: &VarianceSchedule,
    cfg: &ContrastiveConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(f64, GradientVector)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidConfig(
            "contrastive batches need at least 2 anchors".into(),
        ));
    }
    let k = cfg.key_timestep;
    let tau = cfg.temperature;
    let n_neg = cfg.negatives_per_anchor.min(b - 1);

    // Two augmented views per anchor, each independently noise-augmented to
    // timestep k and projected. Views are ordered [anchor views..., positive
    // views...].
    let mut traces = Vec::with_capacity(2 * b);
    let mut units = Vec::with_capacity(2 * b);
    let mut norms = Vec::with_capacity(2 * b);
    for pass in 0..2 {
        for x in batch {
            let view = augment(x, aug, rng)?;
            let eps: Vec<f64> = (0..view.len()).map(|_| rng.sample(StandardNormal)).collect();
            let x_k = forward_diffuse(&view, k, &eps, schedule)?;
            let x0_pred = one_step_projection(predictor, &x_k, k, None, schedule)?;
            let trace = extractor.net.forward_trace(&x0_pred)?;
            let raw = trace.output().to_vec();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormFeature);
            }
            let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let _ = pass;
            traces.push(trace);
            units.push(unit);
            norms.push(norm);
        }
    }

    let feat_dim = extractor.net.output_dim();
    let mut d_units = vec![vec![0.0; feat_dim]; 2 * b];
    let mut total_loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let anchor = &units[i];
        let positive = &units[b + i];
        // negatives: the next n_neg other anchors' positive views, cyclically
        let neg_ids: Vec<usize> = (1..=n_neg).map(|d| b + (i + d) % b).collect();
        let mut scores = Vec::with_capacity(n_neg + 1);
        scores.push(dot(anchor, positive) / tau);
        for &j in &neg_ids {
            scores.push(dot(anchor, &units[j]) / tau);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let lse = max + z.ln();
        total_loss += (lse - scores[0]) * inv_b;

        // d loss / d score: softmax weights, minus 1 on the positive slot
        let mut d_scores: Vec<f64> = exps.iter().map(|e| e / z * inv_b).collect();
        d_scores[0] -= inv_b;
        for (slot, &j) in std::iter::once(&(b + i)).chain(neg_ids.iter()).enumerate() {
            let w = d_scores[slot] / tau;
            for d in 0..feat_dim {
                d_units[i][d] += w * units[j][d];
                d_units[j][d] += w * anchor[d];
            }
        }
    }

    // back through L2 normalization, then through the net
    let mut grad = GradientVector::zeros(extractor.net.parameter_count());
    for v in 0..2 * b {
        let unit = &units[v];
        let du = &d_units[v];
        let radial = dot(unit, du);
        let d_raw: Vec<f64> = (0..feat_dim)
            .map(|d| (du[d] - unit[d] * radial) / norms[v])
            .collect();
        let (g, _) = extractor.net.backward(&traces[v], &d_raw);
        grad.add_assign(&g);
    }
    Ok((total_loss, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
