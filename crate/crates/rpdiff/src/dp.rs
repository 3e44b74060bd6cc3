//! Retrieval-augmented differentially private fine-tuning: Poisson batching,
//! the retrieval-conditioned diffusion loss, per-example clipping, Gaussian
//! sanitization, and retrieval-augmented inference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{DpGuarantee, PrivacyLedger};
use crate::data::Dataset;
use crate::denoiser::{Denoiser, NoisePredictor};
use crate::diffusion::{forward_diffuse, sample_partial, standard_normal, VarianceSchedule};
use crate::error::{Error, Result};
use crate::extractor::{extract_feature, FeatureExtractor};
use crate::kb::KnowledgeBase;
use crate::nn::{AdamState, GradientVector};

/// Hyper-parameters of the private fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-example gradient norm bound C.
    pub clip_norm: f64,
    /// Noise scale sigma. Zero disables noise and accounting (testing mode).
    pub noise_scale: f64,
    /// Expected batch size B; also the fixed normalization constant.
    pub expected_batch: usize,
    pub iterations: u64,
    pub k_timestep: u32,
    pub v_timestep: u32,
    pub delta: f64,
    pub seed: u64,
    pub learning_rate: f64,
    /// Refuse to train past this converted epsilon, when set.
    pub epsilon_budget: Option<f64>,
    /// Independent v' draws averaged per example.
    pub loss_draws: usize,
    /// Neighbors averaged per retrieval; 1 keeps plain nearest-neighbor.
    pub retrieval_topk: usize,
}

impl DpConfig {
    /// Validate against a schedule horizon and the private set size; returns
    /// advisory warnings (non-fatal).
    pub fn validate(&self, horizon: u32, private_len: usize) -> Result<Vec<String>> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip_norm must be > 0".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if self.expected_batch == 0 {
            return Err(Error::InvalidConfig("expected_batch must be >= 1".into()));
        }
        if private_len > 0 && self.expected_batch > private_len {
            return Err(Error::InvalidConfig(format!(
                "expected_batch {} exceeds private set size {private_len}",
                self.expected_batch
            )));
        }
        if !(0 < self.v_timestep && self.v_timestep < self.k_timestep && self.k_timestep < horizon)
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 < v < k < T, got v={}, k={}, T={horizon}",
                self.v_timestep, self.k_timestep
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.loss_draws == 0 {
            return Err(Error::InvalidConfig("loss_draws must be >= 1".into()));
        }
        if self.retrieval_topk == 0 {
            return Err(Error::InvalidConfig("retrieval_topk must be >= 1".into()));
        }
        let mut warnings = Vec::new();
        if private_len > 0 && self.delta >= 1.0 / private_len as f64 {
            warnings.push(format!(
                "delta = {} is not smaller than 1/|private set| = {:.3e}",
                self.delta,
                1.0 / private_len as f64
            ));
        }
        if self.noise_scale == 0.0 {
            warnings.push("noise_scale = 0: non-private testing mode, no accounting".into());
        }
        Ok(warnings)
    }
}

/// Poisson batch: each example joins independently with probability
/// `expected_batch / |data|`. The realized size is random and may be zero.
pub fn poisson_sample<R: Rng + ?Sized>(
    data: &Dataset,
    expected_batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if expected_batch > data.len() {
        return Err(Error::InvalidConfig(format!(
            "expected_batch {} exceeds dataset size {}",
            expected_batch,
            data.len()
        )));
    }
    let q = expected_batch as f64 / data.len() as f64;
    Ok((0..data.len()).filter(|_| rng.random_bool(q)).collect())
}

/// The deterministic pieces of one retrieval-conditioned loss term at `v'`.
#[derive(Debug, Clone, PartialEq)]
pub struct RagLossTerm {
    pub v_prime: u32,
    /// `(x_hat_v - sqrt(ab_v) x) / sqrt(1 - ab_v)`
    pub target_noise: Vec<f64>,
    /// `sqrt(ab_v') x + (sqrt(1 - ab_v') / sqrt(1 - ab_v)) (x_hat_v - sqrt(ab_v) x)`
    pub model_input: Vec<f64>,
}

/// Assemble the loss target and model input for a given `v'`.
pub fn rag_loss_term(
    x: &[f64],
    x_hat_v: &[f64],
    schedule: &VarianceSchedule,
    v: u32,
    v_prime: u32,
) -> Result<RagLossTerm> {
    if v < 1 || v > schedule.horizon() {
        return Err(Error::TimestepOutOfRange {
            t: v,
            lo: 1,
            hi: schedule.horizon(),
        });
    }
    if !(1..=v).contains(&v_prime) {
        return Err(Error::TimestepOutOfRange {
            t: v_prime,
            lo: 1,
            hi: v,
        });
    }
    if x_hat_v.len() != x.len() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            got: x_hat_v.len(),
            expected: x.len(),
        });
    }
    let ab_v = schedule.alpha_bar_at(v);
    let ab_p = schedule.alpha_bar_at(v_prime);
    let signal_v = ab_v.sqrt();
    let noise_v = (1.0 - ab_v).sqrt();
    let signal_p = ab_p.sqrt();
    let noise_ratio = (1.0 - ab_p).sqrt() / noise_v;
    let mut target_noise = Vec::with_capacity(x.len());
    let mut model_input = Vec::with_capacity(x.len());
    for (&xd, &hd) in x.iter().zip(x_hat_v) {
        let residual = hd - signal_v * xd;
        target_noise.push(residual / noise_v);
        model_input.push(signal_p * xd + noise_ratio * residual);
    }
    Ok(RagLossTerm {
        v_prime,
        target_noise,
        model_input,
    })
}

/// Draw `v' ~ U{1..v}` and evaluate the squared-norm retrieval loss.
pub fn rag_diffusion_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    x: &[f64],
    label: Option<u32>,
    x_hat_v: &[f64],
    schedule: &VarianceSchedule,
    v: u32,
    rng: &mut R,
) -> Result<(f64, RagLossTerm)> {
    let v_prime = rng.random_range(1..=v);
    let term = rag_loss_term(x, x_hat_v, schedule, v, v_prime)?;
    let eps_hat = predictor.predict(&term.model_input, v_prime, label)?;
    let loss = eps_hat
        .iter()
        .zip(&term.target_noise)
        .map(|(&p, &n)| (p - n) * (p - n))
        .sum();
    Ok((loss, term))
}

/// Loss and parameter gradient averaged over `draws` independent `v'` draws;
/// the retrieved value and `v'` are stop-gradient context.
pub fn rag_loss_gradient<R: Rng + ?Sized>(
    model: &Denoiser,
    x: &[f64],
    label: Option<u32>,
    x_hat_v: &[f64],
    schedule: &VarianceSchedule,
    v: u32,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, GradientVector)> {
    if draws == 0 {
        return Err(Error::InvalidConfig("loss_draws must be >= 1".into()));
    }
    let mut total_loss = 0.0;
    let mut total_grad = GradientVector::zeros(model.parameter_count());
    for _ in 0..draws {
        let v_prime = rng.random_range(1..=v);
        let term = rag_loss_term(x, x_hat_v, schedule, v, v_prime)?;
        let (loss, grad) =
            model.noise_prediction_gradient(&term.model_input, v_prime, label, &term.target_noise)?;
        total_loss += loss;
        total_grad.add_assign(&grad);
    }
    let inv = 1.0 / draws as f64;
    total_grad.scale(inv);
    Ok((total_loss * inv, total_grad))
}

/// Pass-through slack making clipping exactly idempotent under re-clipping.
const CLIP_SLACK: f64 = 1e-12;

/// Scale `g` to norm at most `C`; gradients already within the bound pass
/// through unchanged, and re-clipping a clipped gradient is a no-op.
pub fn clip_gradient(g: &GradientVector, clip_norm: f64) -> GradientVector {
    let norm = g.l2_norm();
    if norm <= clip_norm * (1.0 + CLIP_SLACK) {
        return g.clone();
    }
    let mut out = g.clone();
    out.scale(clip_norm / norm);
    out
}

/// Mean of clipped gradients normalized by the expected batch size, plus
/// isotropic Gaussian noise with per-coordinate std `C * sigma / B`.
///
/// Inputs exceeding the bound by more than 1e-9 are an invariant breach.
pub fn sanitize_batch_gradient<R: Rng + ?Sized>(
    clipped: &[GradientVector],
    clip_norm: f64,
    sigma: f64,
    expected_batch: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    if clipped.is_empty() {
        return Err(Error::InvalidConfig(
            "sanitize_batch_gradient needs at least one gradient".into(),
        ));
    }
    if expected_batch == 0 {
        return Err(Error::InvalidConfig("expected_batch must be >= 1".into()));
    }
    for g in clipped {
        let norm = g.l2_norm();
        if norm > clip_norm + 1e-9 {
            return Err(Error::UnclippedGradient {
                norm,
                bound: clip_norm,
            });
        }
    }
    let dim = clipped[0].len();
    let inv_b = 1.0 / expected_batch as f64;
    let noise_std = clip_norm * sigma * inv_b;
    let mut out = vec![0.0; dim];
    for g in clipped {
        if g.len() != dim {
            return Err(Error::InvalidConfig("gradient length mismatch".into()));
        }
        for (o, &v) in out.iter_mut().zip(g.values()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv_b;
        if sigma > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            *o += noise_std * z;
        }
    }
    Ok(GradientVector::from_values(out))
}

/// Per-iteration bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub realized_batch: usize,
    pub loss_mean: f64,
    pub preclip_norm_mean: f64,
    pub preclip_norm_max: f64,
}

/// Reproducibility record of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub iterations: Vec<IterationRecord>,
    pub final_guarantee: Option<DpGuarantee>,
    pub denoiser_checksum_before: String,
    pub denoiser_checksum_after: String,
    pub wall_clock_seconds: f64,
    pub non_private: bool,
    pub warnings: Vec<String>,
}

/// Retrieval-augmented differentially private fine-tuning.
///
/// Per iteration: Poisson-sample a batch; per example, diffuse to the cut
/// timestep, key it through the extractor (one-step projection uses the
/// current model), retrieve the nearest value, take the clipped gradient of
/// the retrieval loss; then sanitize, apply Adam, and record one accountant
/// step regardless of the realized batch size. Empty batches skip the update
/// but still consume an iteration. Only the denoiser parameters move; the
/// extractor and knowledge base stay frozen.
pub fn dp_finetune(
    model: &mut Denoiser,
    private: &Dataset,
    kb: &KnowledgeBase,
    extractor: &FeatureExtractor,
    schedule: &VarianceSchedule,
    cfg: &DpConfig,
    ledger: &mut PrivacyLedger,
) -> Result<TrainingRunRecord> {
    let started = Instant::now();
    let warnings = cfg.validate(schedule.horizon(), private.len())?;
    if private.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if kb.k_timestep() != cfg.k_timestep || kb.v_timestep() != cfg.v_timestep {
        return Err(Error::InvalidConfig(format!(
            "knowledge base cut points ({}, {}) do not match config ({}, {})",
            kb.k_timestep(),
            kb.v_timestep(),
            cfg.k_timestep,
            cfg.v_timestep
        )));
    }
    let non_private = cfg.noise_scale == 0.0;
    ledger.set_sampling_rate(cfg.expected_batch as f64 / private.len() as f64);
    let checksum_before = crate::io::checksum_hex(&crate::io::denoiser_checksum(model));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut iterations = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        if let (Some(budget), false) = (cfg.epsilon_budget, non_private) {
            if ledger.steps() > 0 {
                let spent = ledger.to_dp(cfg.delta)?.epsilon;
                if spent > budget {
                    return Err(Error::PrivacyBudgetExceeded {
                        spent,
                        budget,
                    });
                }
            }
        }
        let batch = poisson_sample(private, cfg.expected_batch, &mut rng)?;
        if batch.is_empty() {
            if !non_private {
                ledger.record_step(cfg.noise_scale)?;
            }
            iterations.push(IterationRecord {
                realized_batch: 0,
                loss_mean: 0.0,
                preclip_norm_mean: 0.0,
                preclip_norm_max: 0.0,
            });
            continue;
        }
        let mut clipped = Vec::with_capacity(batch.len());
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut norm_max = 0.0f64;
        for &idx in &batch {
            let x = &private.points[idx];
            let label = private.labels.as_ref().map(|ls| ls[idx]);
            let predict_label = if model.is_conditional() { label } else { None };
            let eps = standard_normal(x.len(), &mut rng);
            let x_k = forward_diffuse(x, cfg.k_timestep, &eps, schedule)?;
            let key = extract_feature(
                extractor,
                model,
                &x_k,
                cfg.k_timestep,
                predict_label,
                schedule,
            )?;
            let hits = kb.query(&key, cfg.retrieval_topk)?;
            let x_hat_v = mean_value(&hits);
            let (loss, grad) = rag_loss_gradient(
                model,
                x,
                predict_label,
                &x_hat_v,
                schedule,
                cfg.v_timestep,
                cfg.loss_draws,
                &mut rng,
            )
            .map_err(|e| e.with_example(idx))?;
            loss_sum += loss;
            let norm = grad.l2_norm();
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            clipped.push(clip_gradient(&grad, cfg.clip_norm));
        }
        let sanitized = sanitize_batch_gradient(
            &clipped,
            cfg.clip_norm,
            cfg.noise_scale,
            cfg.expected_batch,
            &mut rng,
        )?;
        adam.step(&mut params, sanitized.values())?;
        model.set_params(&params)?;
        if !non_private {
            ledger.record_step(cfg.noise_scale)?;
        }
        iterations.push(IterationRecord {
            realized_batch: batch.len(),
            loss_mean: loss_sum / batch.len() as f64,
            preclip_norm_mean: norm_sum / batch.len() as f64,
            preclip_norm_max: norm_max,
        });
    }
    let final_guarantee = if non_private || ledger.steps() == 0 {
        None
    } else {
        Some(ledger.to_dp(cfg.delta)?)
    };
    Ok(TrainingRunRecord {
        iterations,
        final_guarantee,
        denoiser_checksum_before: checksum_before,
        denoiser_checksum_after: crate::io::checksum_hex(&crate::io::denoiser_checksum(model)),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        non_private,
        warnings,
    })
}

fn mean_value(hits: &[(&crate::kb::KbEntry, f64)]) -> Vec<f64> {
    let dim = hits[0].0.value.len();
    let mut out = vec![0.0; dim];
    for (entry, _) in hits {
        for (o, &v) in out.iter_mut().zip(&entry.value) {
            *o += v;
        }
    }
    let inv = 1.0 / hits.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Samples generated by retrieval-augmented inference plus the exact number
/// of denoiser invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct RagSamples {
    pub samples: Vec<Vec<f64>>,
    pub denoiser_calls: u64,
}

/// Sample by running the early steps, retrieving a surrogate value at the
/// resume timestep, and finishing the late steps from it. Per sample the
/// denoiser runs `steps_early + steps_late + 1` times (the +1 is the key
/// projection).
#[allow(clippy::too_many_arguments)]
pub fn rag_inference<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    kb: &KnowledgeBase,
    extractor: &FeatureExtractor,
    schedule: &VarianceSchedule,
    n_samples: usize,
    k: u32,
    v: u32,
    steps_early: u32,
    steps_late: u32,
    retrieval_topk: usize,
    labels: Option<&[u32]>,
    rng: &mut R,
) -> Result<RagSamples> {
    if kb.k_timestep() != k || kb.v_timestep() != v {
        return Err(Error::InvalidConfig(format!(
            "knowledge base cut points ({}, {}) do not match request ({k}, {v})",
            kb.k_timestep(),
            kb.v_timestep()
        )));
    }
    if let Some(labels) = labels {
        if labels.len() != n_samples {
            return Err(Error::InvalidConfig(
                "labels length must match n_samples".into(),
            ));
        }
    }
    let horizon = schedule.horizon();
    let dim = predictor.data_dim();
    let mut samples = Vec::with_capacity(n_samples);
    let mut calls = 0u64;
    for i in 0..n_samples {
        let label = labels.map(|ls| ls[i]);
        let x_t = standard_normal(dim, rng);
        let early = sample_partial(predictor, &x_t, horizon, k, steps_early, label, schedule)?;
        calls += early.denoiser_calls();
        let key = extract_feature(extractor, predictor, &early.last().1, k, label, schedule)?;
        calls += 1;
        let hits = kb.query(&key, retrieval_topk)?;
        let x_hat_v = mean_value(&hits);
        let late = sample_partial(predictor, &x_hat_v, v, 0, steps_late, label, schedule)?;
        calls += late.denoiser_calls();
        samples.push(late.last().1.clone());
    }
    Ok(RagSamples {
        samples,
        denoiser_calls: calls,
    })
}
