//! Pipeline orchestration: dataset generation, the six stage commands,
//! checksum-validated artifact flow, and reproducible run manifests.
//!
//! Every stage reads its inputs by path, validates their checksums against
//! the manifest entries of the producing stages, writes its outputs, and
//! appends (or replaces) its manifest entry. Model and data artifacts are
//! byte-identical across reruns with the same config and seeds; wall-clock
//! timings live in a separate `timing.json` that is excluded from that
//! guarantee.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::config::{ExperimentConfig, ModelChoice, SampleMode};
use crate::data::{generate_dataset, Dataset, Role};
use crate::denoiser::{Denoiser, NoisePredictor};
use crate::diffusion::{ddpm_loss_gradient, sample_partial, standard_normal};
use crate::dp::{dp_finetune, rag_inference, DpConfig, TrainingRunRecord};
use crate::error::{Error, Result};
use crate::eval::{
    coverage, efficiency_report, fit_gaussian, frechet_distance, CoverageConfig, EfficiencyReport,
    KbBuildCostRecord, SampleCostRecord,
};
use crate::extractor::{extract_feature, train_extractor};
use crate::io;
use crate::kb::{build_kb, KnowledgeBase};
use crate::nn::{AdamState, GradientVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

const STAGE_PRETRAIN: &str = "pretrain";
const STAGE_EXTRACTOR: &str = "train-extractor";
const STAGE_KB: &str = "build-kb";
const STAGE_FINETUNE: &str = "dp-finetune";
const STAGE_EVALUATE: &str = "evaluate";

/// Resolved integer cut points and the sampling grids they induce, frozen
/// into the manifest so they are unambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPoints {
    pub k_timestep: u32,
    pub v_timestep: u32,
    pub grid_early: Vec<u32>,
    pub grid_late: Vec<u32>,
    pub grid_full: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub record: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub cut_points: CutPoints,
    pub stages: Vec<StageEntry>,
}

fn stage_level(stage: &str) -> u8 {
    match stage {
        STAGE_PRETRAIN => 0,
        STAGE_EXTRACTOR => 1,
        STAGE_KB => 2,
        STAGE_FINETUNE => 3,
        s if s.starts_with("sample") => 4,
        _ => 5,
    }
}

impl Manifest {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let horizon = config.schedule.timesteps;
        let k = config.k_timestep();
        let v = config.v_timestep();
        Ok(Self {
            config: config.clone(),
            cut_points: CutPoints {
                k_timestep: k,
                v_timestep: v,
                grid_early: crate::diffusion::timestep_grid(
                    horizon,
                    k,
                    config.sample.steps_early,
                )?,
                grid_late: crate::diffusion::timestep_grid(v, 0, config.sample.steps_late)?,
                grid_full: crate::diffusion::timestep_grid(horizon, 0, config.sample.steps_full)?,
            },
            stages: Vec::new(),
        })
    }

    fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: MANIFEST_FILE.into(),
                stage: STAGE_PRETRAIN.into(),
            });
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn save(&self, out_dir: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join(MANIFEST_FILE), body)?;
        Ok(())
    }

    /// Replace this stage's entry and drop entries of later levels.
    fn record(&mut self, entry: StageEntry) {
        let level = stage_level(&entry.stage);
        self.stages
            .retain(|s| s.stage != entry.stage && stage_level(&s.stage) <= level);
        self.stages.push(entry);
    }

    /// Recorded output checksum of `artifact`, from whichever stage made it.
    fn recorded_output(&self, artifact: &str) -> Option<&String> {
        self.stages.iter().rev().find_map(|s| s.outputs.get(artifact))
    }

    /// Validate an input artifact on disk against its recorded checksum.
    fn validated_input(&self, out_dir: &Path, name: &str, producer: &str) -> Result<String> {
        let path = out_dir.join(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: name.into(),
                stage: producer.into(),
            });
        }
        let actual = io::checksum_hex(&io::file_checksum(&path)?);
        match self.recorded_output(name) {
            None => Err(Error::MissingArtifact {
                artifact: format!("{name} (not recorded in the manifest)"),
                stage: producer.into(),
            }),
            Some(expected) if *expected != actual => Err(Error::ChecksumMismatch {
                artifact: name.into(),
                expected: expected.clone(),
                actual,
            }),
            Some(_) => Ok(actual),
        }
    }
}

fn record_timing(out_dir: &Path, stage: &str, seconds: f64) -> Result<()> {
    let path = out_dir.join(TIMING_FILE);
    let mut timings: BTreeMap<String, f64> = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&path)?)?
    } else {
        BTreeMap::new()
    };
    timings.insert(stage.to_string(), seconds);
    std::fs::write(path, serde_json::to_string_pretty(&timings)?)?;
    Ok(())
}

fn load_timings(out_dir: &Path) -> BTreeMap<String, f64> {
    std::fs::read_to_string(out_dir.join(TIMING_FILE))
        .ok()
        .and_then(|body| serde_json::from_str(&body).ok())
        .unwrap_or_default()
}

fn file_checksum_hex(path: &Path) -> Result<String> {
    Ok(io::checksum_hex(&io::file_checksum(path)?))
}

/// Generate the three dataset splits into the run directory, or validate the
/// ones already there.
fn ensure_datasets(config: &ExperimentConfig, out_dir: &Path) -> Result<[Dataset; 3]> {
    let spec = &config.data;
    let plans = [
        ("pub_pre.json", Role::PubPre, spec.n_pub_pre, spec.seed_pub_pre, None),
        ("pub_ref.json", Role::PubRef, spec.n_pub_ref, spec.seed_pub_ref, None),
        ("prv.json", Role::Prv, spec.n_prv, spec.seed_prv, spec.prv_shift()),
    ];
    let mut out = Vec::with_capacity(3);
    for (name, role, n, seed, shift) in plans {
        let path = out_dir.join(name);
        let dataset = if path.exists() {
            let loaded = Dataset::load(&path)?;
            if loaded.role != role {
                return Err(Error::InvalidConfig(format!(
                    "{name} holds the wrong role"
                )));
            }
            loaded
        } else {
            let generated = generate_dataset(&spec.generator, n, role, shift, seed)?;
            generated.save(&path)?;
            generated
        };
        out.push(dataset);
    }
    Ok(out.try_into().expect("three datasets"))
}

fn load_dataset(manifest: &Manifest, out_dir: &Path, name: &str) -> Result<Dataset> {
    manifest.validated_input(out_dir, name, STAGE_PRETRAIN)?;
    Dataset::load(&out_dir.join(name))
}

fn conditioning(config: &ExperimentConfig, data: &Dataset) -> Result<Option<(usize, usize)>> {
    if !config.denoiser.conditional {
        return Ok(None);
    }
    let classes = data.n_classes().ok_or_else(|| {
        Error::InvalidConfig("conditional model requires a labeled dataset".into())
    })? as usize;
    Ok(Some((classes, config.denoiser.class_embed_dim)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epochs: usize,
    pub adam_steps: u64,
    pub epoch_losses: Vec<f64>,
}

/// Pre-train the denoiser on the public pre-training split (plain Adam on the
/// denoising objective) and write its checkpoint. Also generates the dataset
/// splits on first run and freezes the config into a fresh manifest.
pub fn cmd_pretrain(config: &ExperimentConfig, out_dir: &Path) -> Result<PretrainRecord> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = match Manifest::load(out_dir) {
        Ok(existing) => {
            if existing.config != *config {
                return Err(Error::InvalidConfig(
                    "config does not match the frozen manifest; use a fresh --out directory"
                        .into(),
                ));
            }
            existing
        }
        Err(Error::MissingArtifact { .. }) => Manifest::new(config)?,
        Err(e) => return Err(e),
    };
    let [pub_pre, _, _] = ensure_datasets(config, out_dir)?;
    let schedule = config.schedule.build()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.denoiser.seed);
    let mut model = Denoiser::init(
        pub_pre.dim(),
        &config.denoiser.hidden,
        config.denoiser.t_embed_dim,
        schedule.horizon(),
        conditioning(config, &pub_pre)?,
        &mut init_rng,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.pretrain.seed);
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), config.pretrain.learning_rate);
    let mut order: Vec<usize> = (0..pub_pre.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.pretrain.epochs);
    for _ in 0..config.pretrain.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.pretrain.batch_size) {
            let mut grad = GradientVector::zeros(params.len());
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let label = if model.is_conditional() {
                    pub_pre.labels.as_ref().map(|ls| ls[idx])
                } else {
                    None
                };
                let (sample, g) =
                    ddpm_loss_gradient(&model, &pub_pre.points[idx], label, &schedule, &mut rng)
                        .map_err(|e| e.with_example(idx))?;
                batch_loss += sample.loss;
                grad.add_assign(&g);
            }
            grad.scale(1.0 / chunk.len() as f64);
            adam.step(&mut params, grad.values())?;
            model.set_params(&params)?;
            epoch_loss += batch_loss;
            count += chunk.len();
        }
        epoch_losses.push(epoch_loss / count.max(1) as f64);
    }

    let checkpoint = out_dir.join("denoiser_pretrained.rpdn");
    io::save_denoiser(&checkpoint, &model, None)?;

    let record = PretrainRecord {
        epochs: config.pretrain.epochs,
        adam_steps: adam.step_count(),
        epoch_losses,
    };
    let mut inputs = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for name in ["pub_pre.json", "pub_ref.json", "prv.json"] {
        outputs.insert(name.to_string(), file_checksum_hex(&out_dir.join(name))?);
    }
    outputs.insert(
        "denoiser_pretrained.rpdn".into(),
        file_checksum_hex(&checkpoint)?,
    );
    inputs.insert("config".into(), "frozen in manifest".into());
    manifest.record(StageEntry {
        stage: STAGE_PRETRAIN.into(),
        seed: config.pretrain.seed,
        inputs,
        outputs,
        record: serde_json::to_value(&record)?,
    });
    manifest.save(out_dir)?;
    record_timing(out_dir, STAGE_PRETRAIN, started.elapsed().as_secs_f64())?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorRecord {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub key_timestep: u32,
}

/// Contrastively train the keying extractor against the frozen pre-trained
/// denoiser on the public reference split.
pub fn cmd_train_extractor(config: &ExperimentConfig, out_dir: &Path) -> Result<ExtractorRecord> {
    let started = Instant::now();
    let mut manifest = Manifest::load(out_dir)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(
        "denoiser_pretrained.rpdn".to_string(),
        manifest.validated_input(out_dir, "denoiser_pretrained.rpdn", STAGE_PRETRAIN)?,
    );
    let pub_ref = load_dataset(&manifest, out_dir, "pub_ref.json")?;
    inputs.insert(
        "pub_ref.json".to_string(),
        file_checksum_hex(&out_dir.join("pub_ref.json"))?,
    );
    let (model, _) = io::load_denoiser(&out_dir.join("denoiser_pretrained.rpdn"))?;
    let schedule = config.schedule.build()?;
    let k = manifest.cut_points.k_timestep;
    let contrastive = config.extractor.contrastive(k);
    let augment = config.extractor.augment(pub_ref.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.extractor.seed);
    let (extractor, curve) = train_extractor(
        &model,
        &pub_ref.points,
        &schedule,
        &contrastive,
        &augment,
        &mut rng,
    )?;

    let checkpoint = out_dir.join("extractor.rpdn");
    io::save_extractor(&checkpoint, &extractor, None)?;
    let record = ExtractorRecord {
        epochs: contrastive.epochs,
        epoch_losses: curve,
        key_timestep: k,
    };
    let mut outputs = BTreeMap::new();
    outputs.insert("extractor.rpdn".into(), file_checksum_hex(&checkpoint)?);
    manifest.record(StageEntry {
        stage: STAGE_EXTRACTOR.into(),
        seed: config.extractor.seed,
        inputs,
        outputs,
        record: serde_json::to_value(&record)?,
    });
    manifest.save(out_dir)?;
    record_timing(out_dir, STAGE_EXTRACTOR, started.elapsed().as_secs_f64())?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbRecord {
    pub entries: usize,
    pub denoiser_calls: u64,
    pub k_timestep: u32,
    pub v_timestep: u32,
}

/// Build the trajectory knowledge base from the first `kb.size` reference
/// examples.
pub fn cmd_build_kb(config: &ExperimentConfig, out_dir: &Path) -> Result<KbRecord> {
    let started = Instant::now();
    let mut manifest = Manifest::load(out_dir)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(
        "denoiser_pretrained.rpdn".to_string(),
        manifest.validated_input(out_dir, "denoiser_pretrained.rpdn", STAGE_PRETRAIN)?,
    );
    inputs.insert(
        "extractor.rpdn".to_string(),
        manifest.validated_input(out_dir, "extractor.rpdn", STAGE_EXTRACTOR)?,
    );
    let pub_ref = load_dataset(&manifest, out_dir, "pub_ref.json")?;
    inputs.insert(
        "pub_ref.json".to_string(),
        file_checksum_hex(&out_dir.join("pub_ref.json"))?,
    );
    if config.kb.size > pub_ref.len() {
        return Err(Error::InvalidConfig(format!(
            "kb.size {} exceeds reference split size {}",
            config.kb.size,
            pub_ref.len()
        )));
    }
    let subset = Dataset {
        points: pub_ref.points[..config.kb.size].to_vec(),
        labels: pub_ref.labels.as_ref().map(|ls| ls[..config.kb.size].to_vec()),
        ..pub_ref
    };
    let (model, _) = io::load_denoiser(&out_dir.join("denoiser_pretrained.rpdn"))?;
    let k = manifest.cut_points.k_timestep;
    let (extractor, _) = io::load_extractor(&out_dir.join("extractor.rpdn"), Some(k))?;
    let schedule = config.schedule.build()?;
    let v = manifest.cut_points.v_timestep;
    let kb = build_kb(
        &subset,
        &model,
        &extractor,
        &schedule,
        k,
        v,
        config.kb.seed,
        config.kb.entries_per_example,
    )?;
    let kb_path = out_dir.join("kb.rpkb");
    kb.save(&kb_path)?;
    let record = KbRecord {
        entries: kb.len(),
        denoiser_calls: kb.len() as u64,
        k_timestep: k,
        v_timestep: v,
    };
    let mut outputs = BTreeMap::new();
    outputs.insert("kb.rpkb".into(), file_checksum_hex(&kb_path)?);
    manifest.record(StageEntry {
        stage: STAGE_KB.into(),
        seed: config.kb.seed,
        inputs,
        outputs,
        record: serde_json::to_value(&record)?,
    });
    manifest.save(out_dir)?;
    record_timing(out_dir, STAGE_KB, started.elapsed().as_secs_f64())?;
    Ok(record)
}

/// Fine-tune the denoiser on the private split under the sanitized-gradient
/// mechanism; writes the fine-tuned checkpoint and the privacy ledger.
pub fn cmd_dp_finetune(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainingRunRecord> {
    let started = Instant::now();
    let mut manifest = Manifest::load(out_dir)?;
    let mut inputs = BTreeMap::new();
    for (name, producer) in [
        ("denoiser_pretrained.rpdn", STAGE_PRETRAIN),
        ("extractor.rpdn", STAGE_EXTRACTOR),
        ("kb.rpkb", STAGE_KB),
    ] {
        inputs.insert(
            name.to_string(),
            manifest.validated_input(out_dir, name, producer)?,
        );
    }
    let private = load_dataset(&manifest, out_dir, "prv.json")?;
    inputs.insert(
        "prv.json".to_string(),
        file_checksum_hex(&out_dir.join("prv.json"))?,
    );

    let (mut model, _) = io::load_denoiser(&out_dir.join("denoiser_pretrained.rpdn"))?;
    let k = manifest.cut_points.k_timestep;
    let v = manifest.cut_points.v_timestep;
    let (extractor, _) = io::load_extractor(&out_dir.join("extractor.rpdn"), Some(k))?;
    let schedule = config.schedule.build()?;
    let kb = KnowledgeBase::load(&out_dir.join("kb.rpkb"))?;
    kb.validate_models(&model, &extractor, &schedule)?;

    let noise_scale = config.dp.resolve_noise_scale()?;
    let dp_config = DpConfig {
        clip_norm: config.dp.clip_norm,
        noise_scale,
        expected_batch: config.dp.expected_batch,
        iterations: config.dp.iterations,
        k_timestep: k,
        v_timestep: v,
        delta: config.dp.delta,
        seed: config.dp.seed,
        learning_rate: config.dp.learning_rate,
        epsilon_budget: config.dp.epsilon_budget,
        loss_draws: config.dp.loss_draws,
        retrieval_topk: config.dp.retrieval_topk,
    };
    let mut ledger = PrivacyLedger::default();
    let record = dp_finetune(
        &mut model,
        &private,
        &kb,
        &extractor,
        &schedule,
        &dp_config,
        &mut ledger,
    )?;
    for warning in &record.warnings {
        eprintln!("warning: {warning}");
    }

    let checkpoint = out_dir.join("denoiser_finetuned.rpdn");
    io::save_denoiser(&checkpoint, &model, None)?;
    let ledger_path = out_dir.join("ledger.json");
    ledger.save(&ledger_path, (!record.non_private).then_some(config.dp.delta))?;

    let mut outputs = BTreeMap::new();
    outputs.insert(
        "denoiser_finetuned.rpdn".into(),
        file_checksum_hex(&checkpoint)?,
    );
    outputs.insert("ledger.json".into(), file_checksum_hex(&ledger_path)?);
    // wall clock is tracked in the timing sidecar, not the manifest
    let mut manifest_record = record.clone();
    manifest_record.wall_clock_seconds = 0.0;
    let mut record_value = serde_json::to_value(&manifest_record)?;
    record_value["resolved_noise_scale"] = serde_json::json!(noise_scale);
    manifest.record(StageEntry {
        stage: STAGE_FINETUNE.into(),
        seed: config.dp.seed,
        inputs,
        outputs,
        record: record_value,
    });
    manifest.save(out_dir)?;
    record_timing(out_dir, STAGE_FINETUNE, started.elapsed().as_secs_f64())?;
    Ok(record)
}

/// On-disk sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesFile {
    pub mode: SampleMode,
    pub model: ModelChoice,
    pub seed: u64,
    pub n_samples: usize,
    pub denoiser_calls: u64,
    pub labels: Option<Vec<u32>>,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub mode: SampleMode,
    pub model: ModelChoice,
    pub n_samples: usize,
    pub denoiser_calls: u64,
    pub calls_per_sample: f64,
}

fn model_file(choice: ModelChoice) -> (&'static str, &'static str) {
    match choice {
        ModelChoice::Pretrained => ("denoiser_pretrained.rpdn", STAGE_PRETRAIN),
        ModelChoice::Finetuned => ("denoiser_finetuned.rpdn", STAGE_FINETUNE),
    }
}

fn mode_name(mode: SampleMode) -> &'static str {
    match mode {
        SampleMode::Full => "full",
        SampleMode::Rag => "rag",
    }
}

fn model_name(choice: ModelChoice) -> &'static str {
    match choice {
        ModelChoice::Pretrained => "pretrained",
        ModelChoice::Finetuned => "finetuned",
    }
}

/// Generate samples in the configured mode from the configured model,
/// counting denoiser invocations exactly.
pub fn cmd_sample(config: &ExperimentConfig, out_dir: &Path) -> Result<SampleRecord> {
    let started = Instant::now();
    let mut manifest = Manifest::load(out_dir)?;
    let (model_artifact, producer) = model_file(config.sample.model);
    let mut inputs = BTreeMap::new();
    inputs.insert(
        model_artifact.to_string(),
        manifest.validated_input(out_dir, model_artifact, producer)?,
    );
    let (model, _) = io::load_denoiser(&out_dir.join(model_artifact))?;
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.sample.seed);
    let n = config.sample.n_samples;

    let labels: Option<Vec<u32>> = if model.is_conditional() {
        let classes = model
            .class_embed()
            .map(|c| c.n_classes as u32)
            .unwrap_or(1);
        Some((0..n).map(|_| rng.random_range(0..classes)).collect())
    } else {
        None
    };

    let (samples, calls, trajectory) = match config.sample.mode {
        SampleMode::Full => {
            let steps = config.sample.steps_full;
            let mut samples = Vec::with_capacity(n);
            let mut calls = 0u64;
            let mut first_traj = None;
            for i in 0..n {
                let label = labels.as_ref().map(|ls| ls[i]);
                let x_t = standard_normal(model.data_dim(), &mut rng);
                let traj = sample_partial(
                    &model,
                    &x_t,
                    schedule.horizon(),
                    0,
                    steps,
                    label,
                    &schedule,
                )?;
                calls += traj.denoiser_calls();
                samples.push(traj.last().1.clone());
                if i == 0 {
                    first_traj = Some(traj);
                }
            }
            (samples, calls, first_traj)
        }
        SampleMode::Rag => {
            let k = manifest.cut_points.k_timestep;
            let v = manifest.cut_points.v_timestep;
            inputs.insert(
                "extractor.rpdn".to_string(),
                manifest.validated_input(out_dir, "extractor.rpdn", STAGE_EXTRACTOR)?,
            );
            inputs.insert(
                "kb.rpkb".to_string(),
                manifest.validated_input(out_dir, "kb.rpkb", STAGE_KB)?,
            );
            let (extractor, _) = io::load_extractor(&out_dir.join("extractor.rpdn"), Some(k))?;
            let kb = KnowledgeBase::load(&out_dir.join("kb.rpkb"))?;
            let out = rag_inference(
                &model,
                &kb,
                &extractor,
                &schedule,
                n,
                k,
                v,
                config.sample.steps_early,
                config.sample.steps_late,
                config.dp.retrieval_topk,
                labels.as_deref(),
                &mut rng,
            )?;
            (out.samples, out.denoiser_calls, None)
        }
    };

    let file = format!(
        "samples_{}_{}.json",
        mode_name(config.sample.mode),
        model_name(config.sample.model)
    );
    let samples_file = SamplesFile {
        mode: config.sample.mode,
        model: config.sample.model,
        seed: config.sample.seed,
        n_samples: n,
        denoiser_calls: calls,
        labels,
        samples,
    };
    std::fs::write(out_dir.join(&file), serde_json::to_string(&samples_file)?)?;
    let mut outputs = BTreeMap::new();
    outputs.insert(file.clone(), file_checksum_hex(&out_dir.join(&file))?);
    if config.sample.dump_trajectories {
        if let Some(traj) = trajectory {
            let dump = format!(
                "trajectory_{}_{}.rptj",
                mode_name(config.sample.mode),
                model_name(config.sample.model)
            );
            io::save_trajectory(&out_dir.join(&dump), &traj)?;
            outputs.insert(dump.clone(), file_checksum_hex(&out_dir.join(&dump))?);
        }
    }

    let record = SampleRecord {
        file: file.clone(),
        mode: config.sample.mode,
        model: config.sample.model,
        n_samples: n,
        denoiser_calls: calls,
        calls_per_sample: if n == 0 { 0.0 } else { calls as f64 / n as f64 },
    };
    manifest.record(StageEntry {
        stage: format!(
            "sample_{}_{}",
            mode_name(config.sample.mode),
            model_name(config.sample.model)
        ),
        seed: config.sample.seed,
        inputs,
        outputs,
        record: serde_json::to_value(&record)?,
    });
    manifest.save(out_dir)?;
    record_timing(
        out_dir,
        &format!(
            "sample_{}_{}",
            mode_name(config.sample.mode),
            model_name(config.sample.model)
        ),
        started.elapsed().as_secs_f64(),
    )?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSetMetrics {
    pub file: String,
    pub frechet: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_sets: Vec<SampleSetMetrics>,
    pub baseline_frechet: f64,
    pub baseline_coverage: f64,
    pub retrieval_accuracy: Vec<(usize, f64)>,
    pub efficiency: EfficiencyReport,
}

/// Evaluate every sample set in the run directory against the private split:
/// Fréchet distance, coverage, retrieval label accuracy, and the efficiency
/// table. A standard-normal baseline anchors the quality numbers.
pub fn cmd_evaluate(config: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    let started = Instant::now();
    let mut manifest = Manifest::load(out_dir)?;
    let private = load_dataset(&manifest, out_dir, "prv.json")?;
    let mut inputs = BTreeMap::new();
    inputs.insert(
        "prv.json".to_string(),
        file_checksum_hex(&out_dir.join("prv.json"))?,
    );

    let coverage_cfg = CoverageConfig {
        nn_size: config.eval.nn_size,
    };
    let prv_fit = fit_gaussian(&private.points)?;

    // every recorded sample set
    let sample_entries: Vec<(String, String)> = manifest
        .stages
        .iter()
        .filter(|s| s.stage.starts_with("sample"))
        .filter_map(|s| {
            s.outputs
                .iter()
                .find(|(name, _)| name.starts_with("samples_"))
                .map(|(name, sum)| (name.clone(), sum.clone()))
        })
        .collect();
    if sample_entries.is_empty() {
        return Err(Error::MissingArtifact {
            artifact: "samples_*.json".into(),
            stage: "sample".into(),
        });
    }
    let mut sample_sets = Vec::new();
    let mut cost_records = Vec::new();
    let timings = load_timings(out_dir);
    for (name, expected) in &sample_entries {
        let path = out_dir.join(name);
        let actual = file_checksum_hex(&path)?;
        if actual != *expected {
            return Err(Error::ChecksumMismatch {
                artifact: name.clone(),
                expected: expected.clone(),
                actual,
            });
        }
        inputs.insert(name.clone(), actual);
        let set: SamplesFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let fit = fit_gaussian(&set.samples)?;
        sample_sets.push(SampleSetMetrics {
            file: name.clone(),
            frechet: frechet_distance(&fit, &prv_fit)?,
            coverage: coverage(&private.points, &set.samples, &coverage_cfg)?,
        });
        cost_records.push(SampleCostRecord {
            mode: format!("{}_{}", mode_name(set.mode), model_name(set.model)),
            n_samples: set.n_samples,
            denoiser_calls: set.denoiser_calls,
            wall_clock_seconds: *timings
                .get(&format!(
                    "sample_{}_{}",
                    mode_name(set.mode),
                    model_name(set.model)
                ))
                .unwrap_or(&0.0),
        });
    }

    // standard-normal baseline at the same sample count
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let n_baseline = sample_entries
        .first()
        .map(|(name, _)| {
            let set: SamplesFile = serde_json::from_str(
                &std::fs::read_to_string(out_dir.join(name)).expect("just read"),
            )
            .expect("just parsed");
            set.n_samples
        })
        .unwrap_or(config.sample.n_samples)
        .max(private.dim() + 1);
    let baseline: Vec<Vec<f64>> = (0..n_baseline)
        .map(|_| standard_normal(private.dim(), &mut rng))
        .collect();
    let baseline_fit = fit_gaussian(&baseline)?;
    let baseline_frechet = frechet_distance(&baseline_fit, &prv_fit)?;
    let baseline_coverage = coverage(&private.points, &baseline, &coverage_cfg)?;

    // retrieval label accuracy against the reference-split knowledge base
    let mut retrieval_accuracy = Vec::new();
    if out_dir.join("kb.rpkb").exists() {
        inputs.insert(
            "kb.rpkb".to_string(),
            manifest.validated_input(out_dir, "kb.rpkb", STAGE_KB)?,
        );
        let kb = KnowledgeBase::load(&out_dir.join("kb.rpkb"))?;
        let pub_ref = load_dataset(&manifest, out_dir, "pub_ref.json")?;
        let k = manifest.cut_points.k_timestep;
        let (model, _) = io::load_denoiser(&out_dir.join("denoiser_pretrained.rpdn"))?;
        let (extractor, _) = io::load_extractor(&out_dir.join("extractor.rpdn"), Some(k))?;
        let schedule = config.schedule.build()?;
        if let Some(labels) = &pub_ref.labels {
            let mut queries = Vec::new();
            for i in 0..config.eval.retrieval_queries.min(pub_ref.len()) {
                let x = &pub_ref.points[i];
                let predict_label = if model.is_conditional() {
                    Some(labels[i])
                } else {
                    None
                };
                let eps = standard_normal(x.len(), &mut rng);
                let x_k = crate::diffusion::forward_diffuse(x, k, &eps, &schedule)?;
                let z = extract_feature(&extractor, &model, &x_k, k, predict_label, &schedule)?;
                queries.push((z, labels[i]));
            }
            for &topk in &config.eval.retrieval_topk {
                retrieval_accuracy.push((topk, kb.retrieval_label_accuracy(&queries, topk)?));
            }
        }
    }

    let kb_builds: Vec<KbBuildCostRecord> = manifest
        .stages
        .iter()
        .filter(|s| s.stage == STAGE_KB)
        .filter_map(|s| serde_json::from_value::<KbRecord>(s.record.clone()).ok())
        .map(|r| KbBuildCostRecord {
            entries: r.entries,
            denoiser_calls: r.denoiser_calls,
            wall_clock_seconds: *timings.get(STAGE_KB).unwrap_or(&0.0),
        })
        .collect();
    let efficiency = efficiency_report(&cost_records, &kb_builds);

    let report = EvalReport {
        sample_sets,
        baseline_frechet,
        baseline_coverage,
        retrieval_accuracy,
        efficiency,
    };
    // the persisted report strips wall clocks so reruns stay byte-identical;
    // timing.json carries the measured times
    let mut persisted = report.clone();
    for row in &mut persisted.efficiency.rows {
        row.wall_clock_seconds = 0.0;
    }
    for kb in &mut persisted.efficiency.kb_builds {
        kb.wall_clock_seconds = 0.0;
    }
    let report_path = out_dir.join("eval_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&persisted)?)?;
    let mut outputs = BTreeMap::new();
    outputs.insert(
        "eval_report.json".into(),
        file_checksum_hex(&report_path)?,
    );
    manifest.record(StageEntry {
        stage: STAGE_EVALUATE.into(),
        seed: config.eval.seed,
        inputs,
        outputs,
        record: serde_json::to_value(&persisted)?,
    });
    manifest.save(out_dir)?;
    record_timing(out_dir, STAGE_EVALUATE, started.elapsed().as_secs_f64())?;
    Ok(report)
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<34} {:>10} {:>10}", "sample set", "frechet", "coverage")?;
        for s in &self.sample_sets {
            writeln!(f, "{:<34} {:>10.4} {:>10.4}", s.file, s.frechet, s.coverage)?;
        }
        writeln!(
            f,
            "{:<34} {:>10.4} {:>10.4}",
            "standard normal baseline", self.baseline_frechet, self.baseline_coverage
        )?;
        if !self.retrieval_accuracy.is_empty() {
            writeln!(f)?;
            for (topk, acc) in &self.retrieval_accuracy {
                writeln!(f, "retrieval top-{topk} label accuracy: {acc:.4}")?;
            }
        }
        writeln!(f)?;
        write!(f, "{}", self.efficiency)
    }
}

/// Run all six stages in order.
pub fn run_all(config: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    cmd_pretrain(config, out_dir)?;
    cmd_train_extractor(config, out_dir)?;
    cmd_build_kb(config, out_dir)?;
    cmd_dp_finetune(config, out_dir)?;
    cmd_sample(config, out_dir)?;
    cmd_evaluate(config, out_dir)
}

/// One sweep cell: the overridden key, its value, and the cell directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: String,
    pub value: String,
    pub out_dir: PathBuf,
    pub rag_frechet: Option<f64>,
}

/// Run the full pipeline once per `param=value` cell, each in its own
/// subdirectory with its own manifest.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    out_dir: &Path,
    param: &str,
    values: &[String],
) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let base = toml::to_string(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let cell_config =
            crate::config::parse_config(&base, &[format!("{param}={value}")])?;
        let slug: String = format!("{param}_{value}")
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        let cell_dir = out_dir.join(slug);
        std::fs::create_dir_all(&cell_dir)?;
        let report = run_all(&cell_config, &cell_dir)?;
        let rag_frechet = report
            .sample_sets
            .iter()
            .find(|s| s.file.contains("rag"))
            .or(report.sample_sets.first())
            .map(|s| s.frechet);
        cells.push(SweepCell {
            param: param.to_string(),
            value: value.clone(),
            out_dir: cell_dir,
            rag_frechet,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.data.n_pub_pre = 64;
        config.data.n_pub_ref = 48;
        config.data.n_prv = 64;
        config.pretrain.epochs = 1;
        config.pretrain.batch_size = 32;
        config.denoiser.hidden = vec![16];
        config.extractor.epochs = 1;
        config.extractor.batch_size = 16;
        config.extractor.negatives_per_anchor = 15;
        config.extractor.hidden = vec![16];
        config.extractor.feature_dim = 8;
        config.kb.size = 48;
        config.dp.iterations = 2;
        config.dp.expected_batch = 16;
        config.dp.noise_scale = Some(2.0);
        config.dp.target_epsilon = None;
        config.sample.n_samples = 8;
        config.eval.retrieval_queries = 16;
        config.eval.nn_size = 3;
        config
    }

    #[test]
    fn stage_order_violation_names_the_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let err = cmd_build_kb(&config, dir.path()).unwrap_err();
        match err {
            Error::MissingArtifact { artifact, stage } => {
                assert_eq!(artifact, MANIFEST_FILE);
                assert_eq!(stage, "pretrain");
            }
            other => panic!("unexpected error {other:?}"),
        }
        cmd_pretrain(&config, dir.path()).unwrap();
        let err = cmd_build_kb(&config, dir.path()).unwrap_err();
        match err {
            Error::MissingArtifact { artifact, stage } => {
                assert!(artifact.contains("extractor.rpdn"));
                assert_eq!(stage, "train-extractor");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tampering_an_artifact_breaks_validation() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        cmd_pretrain(&config, dir.path()).unwrap();
        cmd_train_extractor(&config, dir.path()).unwrap();
        // flip one byte of the extractor checkpoint
        let path = dir.path().join("extractor.rpdn");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            cmd_build_kb(&config, dir.path()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn config_drift_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        cmd_pretrain(&config, dir.path()).unwrap();
        let mut other = config.clone();
        other.dp.iterations = 99;
        assert!(matches!(
            cmd_pretrain(&other, dir.path()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn full_pipeline_runs_and_reruns_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let report = run_all(&config, dir.path()).unwrap();
        assert_eq!(report.sample_sets.len(), 1);
        assert!(report.retrieval_accuracy.len() == 2);

        let manifest = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.stages.len(), 6);
        assert_eq!(manifest.cut_points.k_timestep, 80);
        assert_eq!(manifest.cut_points.v_timestep, 20);

        // rerun a middle stage: artifacts must be byte-identical
        let kb_before = std::fs::read(dir.path().join("kb.rpkb")).unwrap();
        cmd_build_kb(&config, dir.path()).unwrap();
        let kb_after = std::fs::read(dir.path().join("kb.rpkb")).unwrap();
        assert_eq!(kb_before, kb_after);

        let samples_before = std::fs::read(dir.path().join("samples_rag_finetuned.json")).unwrap();
        cmd_dp_finetune(&config, dir.path()).unwrap();
        cmd_sample(&config, dir.path()).unwrap();
        let samples_after = std::fs::read(dir.path().join("samples_rag_finetuned.json")).unwrap();
        assert_eq!(samples_before, samples_after);
    }
}
