//! Trajectory knowledge base: key-value pairs built from the public reference
//! split in one forward pass per entry, exact cosine retrieval, and bit-exact
//! persistence.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::denoiser::{Denoiser, NoisePredictor};
use crate::diffusion::{forward_diffuse, standard_normal, VarianceSchedule};
use crate::error::{Error, Result};
use crate::extractor::{extract_feature, FeatureExtractor};
use crate::io::{denoiser_checksum, extractor_checksum};

const KB_MAGIC: &[u8; 4] = b"RPKB";
const KB_VERSION: u16 = 1;
const METRIC_COSINE: u8 = 0;

/// One stored trajectory pair: a unit-norm key at the cut timestep `k` and the
/// latent value at the resume timestep `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub label: Option<u32>,
    pub source_index: u64,
}

/// Identity of the models and schedule a knowledge base was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KbManifest {
    pub denoiser_checksum: [u8; 32],
    pub extractor_checksum: [u8; 32],
    pub schedule_hash: [u8; 32],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    k_timestep: u32,
    v_timestep: u32,
    d_feat: usize,
    d_data: usize,
    metric: Metric,
    manifest: KbManifest,
}

/// Deterministic per-entry noise stream: one ChaCha stream per
/// `(seed, source_index, copy)`.
pub fn entry_rng(seed: u64, source_index: u64, copies: u64, copy: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(source_index * copies + copy);
    rng
}

/// Build the knowledge base from the reference split.
///
/// Each entry draws one noise vector and reuses it for both the key latent
/// `x_k` and the value latent `x_v`, so the pair lies on a single forward
/// trajectory. Cost is one denoiser call per entry (the key projection).
/// `entries_per_example` > 1 stores several pairs per example with
/// independent draws.
pub fn build_kb(
    reference: &Dataset,
    model: &Denoiser,
    extractor: &FeatureExtractor,
    schedule: &VarianceSchedule,
    k: u32,
    v: u32,
    seed: u64,
    entries_per_example: usize,
) -> Result<KnowledgeBase> {
    if reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0 < v && v < k && k < schedule.horizon()) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < v < k < T, got v={v}, k={k}, T={}",
            schedule.horizon()
        )));
    }
    if entries_per_example == 0 {
        return Err(Error::InvalidConfig(
            "entries_per_example must be >= 1".into(),
        ));
    }
    if extractor.key_timestep() != k {
        return Err(Error::InvalidConfig(format!(
            "extractor keyed at timestep {}, kb build requested {k}",
            extractor.key_timestep()
        )));
    }
    if model.data_dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            got: reference.dim(),
            expected: model.data_dim(),
        });
    }
    let copies = entries_per_example as u64;
    let mut entries = Vec::with_capacity(reference.len() * entries_per_example);
    for (index, point) in reference.points.iter().enumerate() {
        let label = reference.labels.as_ref().map(|ls| ls[index]);
        let predict_label = if model.is_conditional() { label } else { None };
        for copy in 0..copies {
            let mut rng = entry_rng(seed, index as u64, copies, copy);
            let eps = standard_normal(point.len(), &mut rng);
            let x_k = forward_diffuse(point, k, &eps, schedule)?;
            let x_v = forward_diffuse(point, v, &eps, schedule)?;
            let key = extract_feature(extractor, model, &x_k, k, predict_label, schedule)?;
            entries.push(KbEntry {
                key,
                value: x_v,
                label,
                source_index: index as u64,
            });
        }
    }
    let d_feat = entries[0].key.len();
    let d_data = entries[0].value.len();
    Ok(KnowledgeBase {
        entries,
        k_timestep: k,
        v_timestep: v,
        d_feat,
        d_data,
        metric: Metric::Cosine,
        manifest: KbManifest {
            denoiser_checksum: denoiser_checksum(model),
            extractor_checksum: extractor_checksum(extractor),
            schedule_hash: schedule.hash(),
            seed,
        },
    })
}

impl KnowledgeBase {
    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k_timestep(&self) -> u32 {
        self.k_timestep
    }

    pub fn v_timestep(&self) -> u32 {
        self.v_timestep
    }

    pub fn feature_dim(&self) -> usize {
        self.d_feat
    }

    pub fn data_dim(&self) -> usize {
        self.d_data
    }

    pub fn manifest(&self) -> &KbManifest {
        &self.manifest
    }

    /// Check that the given models and schedule are the ones this base was
    /// built with.
    pub fn validate_models(
        &self,
        model: &Denoiser,
        extractor: &FeatureExtractor,
        schedule: &VarianceSchedule,
    ) -> Result<()> {
        let pairs = [
            ("denoiser", self.manifest.denoiser_checksum, denoiser_checksum(model)),
            ("extractor", self.manifest.extractor_checksum, extractor_checksum(extractor)),
            ("schedule", self.manifest.schedule_hash, schedule.hash()),
        ];
        for (name, expected, actual) in pairs {
            if expected != actual {
                return Err(Error::ChecksumMismatch {
                    artifact: format!("knowledge base {name}"),
                    expected: crate::data::hex(&expected),
                    actual: crate::data::hex(&actual),
                });
            }
        }
        Ok(())
    }

    /// Exact brute-force top-k by cosine similarity, ties broken by lower
    /// source index.
    pub fn query(&self, z: &[f64], topk: usize) -> Result<Vec<(&KbEntry, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        if topk == 0 {
            return Err(Error::InvalidConfig("topk must be >= 1".into()));
        }
        if z.len() != self.d_feat {
            return Err(Error::DimensionMismatch {
                layer: 0,
                got: z.len(),
                expected: self.d_feat,
            });
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormFeature);
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "query feature must be unit norm, got {norm}"
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, z.iter().zip(&e.key).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    self.entries[a.0]
                        .source_index
                        .cmp(&self.entries[b.0].source_index)
                })
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(topk.min(self.entries.len()));
        Ok(scored
            .into_iter()
            .map(|(i, s)| (&self.entries[i], s))
            .collect())
    }

    /// Fraction of queries whose top-k neighbors include the true label.
    pub fn retrieval_label_accuracy(
        &self,
        queries: &[(Vec<f64>, u32)],
        topk: usize,
    ) -> Result<f64> {
        if self.entries.iter().any(|e| e.label.is_none()) {
            return Err(Error::UnlabeledKnowledgeBase);
        }
        if queries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for (feature, truth) in queries {
            let results = self.query(feature, topk)?;
            if results.iter().any(|(e, _)| e.label == Some(*truth)) {
                hits += 1;
            }
        }
        Ok(hits as f64 / queries.len() as f64)
    }

    /// Serialize to the binary container, little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(KB_MAGIC);
        buf.write_u16::<LittleEndian>(KB_VERSION).expect("vec");
        buf.push(METRIC_COSINE);
        buf.write_u32::<LittleEndian>(self.k_timestep).expect("vec");
        buf.write_u32::<LittleEndian>(self.v_timestep).expect("vec");
        buf.write_u32::<LittleEndian>(self.d_feat as u32).expect("vec");
        buf.write_u32::<LittleEndian>(self.d_data as u32).expect("vec");
        buf.write_u64::<LittleEndian>(self.entries.len() as u64)
            .expect("vec");
        buf.extend_from_slice(&self.manifest.denoiser_checksum);
        buf.extend_from_slice(&self.manifest.extractor_checksum);
        buf.extend_from_slice(&self.manifest.schedule_hash);
        buf.write_u64::<LittleEndian>(self.manifest.seed).expect("vec");
        for entry in &self.entries {
            for v in &entry.key {
                buf.write_f64::<LittleEndian>(*v).expect("vec");
            }
            for v in &entry.value {
                buf.write_f64::<LittleEndian>(*v).expect("vec");
            }
            let label = entry.label.map_or(-1i32, |l| l as i32);
            buf.write_i32::<LittleEndian>(label).expect("vec");
            buf.write_u64::<LittleEndian>(entry.source_index).expect("vec");
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KnowledgeBase> {
        let bad = |reason: &str| Error::BadFormat {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let data = std::fs::read(path)?;
        let mut cur = Cursor::new(data.as_slice());
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("empty file"))?;
        if &magic != KB_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))?;
        if version != KB_VERSION {
            return Err(bad("unsupported version"));
        }
        let metric = cur.read_u8().map_err(|_| bad("truncated"))?;
        if metric != METRIC_COSINE {
            return Err(bad("unknown metric"));
        }
        let k_timestep = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        let v_timestep = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        let d_feat = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let d_data = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let count = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let mut checksums = [[0u8; 32]; 3];
        for c in &mut checksums {
            cur.read_exact(c).map_err(|_| bad("truncated manifest"))?;
        }
        let seed = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated manifest"))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut key = Vec::with_capacity(d_feat);
            for _ in 0..d_feat {
                key.push(cur.read_f64::<LittleEndian>().map_err(|_| bad("truncated entry"))?);
            }
            let mut value = Vec::with_capacity(d_data);
            for _ in 0..d_data {
                value.push(cur.read_f64::<LittleEndian>().map_err(|_| bad("truncated entry"))?);
            }
            let label_raw = cur.read_i32::<LittleEndian>().map_err(|_| bad("truncated entry"))?;
            let source_index = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated entry"))?;
            entries.push(KbEntry {
                key,
                value,
                label: (label_raw >= 0).then_some(label_raw as u32),
                source_index,
            });
        }
        Ok(KnowledgeBase {
            entries,
            k_timestep,
            v_timestep,
            d_feat,
            d_data,
            metric: Metric::Cosine,
            manifest: KbManifest {
                denoiser_checksum: checksums[0],
                extractor_checksum: checksums[1],
                schedule_hash: checksums[2],
                seed,
            },
        })
    }

    /// Assemble a base directly from entries (tests and tools).
    pub fn from_entries(
        entries: Vec<KbEntry>,
        k_timestep: u32,
        v_timestep: u32,
        manifest: KbManifest,
    ) -> Result<KnowledgeBase> {
        if entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let d_feat = entries[0].key.len();
        let d_data = entries[0].value.len();
        for e in &entries {
            if e.key.len() != d_feat || e.value.len() != d_data {
                return Err(Error::InvalidConfig("mixed entry dimensions".into()));
            }
            let norm = e.key.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "entry key must be unit norm, got {norm}"
                )));
            }
        }
        Ok(KnowledgeBase {
            entries,
            k_timestep,
            v_timestep,
            d_feat,
            d_data,
            metric: Metric::Cosine,
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorSpec, Role};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn schedule() -> VarianceSchedule {
        make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    fn ring(n: usize, seed: u64) -> Dataset {
        generate_dataset(
            &GeneratorSpec::GaussianRing {
                modes: 8,
                radius: 2.0,
                sigma: 0.05,
            },
            n,
            Role::PubRef,
            None,
            seed,
        )
        .unwrap()
    }

    fn models(seed: u64) -> (Denoiser, FeatureExtractor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Denoiser::init(2, &[16], 8, 100, None, &mut rng).unwrap();
        let extractor = FeatureExtractor::init(2, &[16], 8, 80, &mut rng).unwrap();
        (model, extractor)
    }

    #[test]
    fn build_produces_one_entry_per_example() {
        let s = schedule();
        let data = ring(100, 1);
        let (model, extractor) = models(2);
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, 7, 1).unwrap();
        assert_eq!(kb.len(), 100);
        assert!(kb.entries().iter().all(|e| e.label.is_some()));
        kb.validate_models(&model, &extractor, &s).unwrap();
    }

    #[test]
    fn build_is_deterministic_at_the_byte_level() {
        let dir = tempfile::tempdir().unwrap();
        let s = schedule();
        let data = ring(40, 3);
        let (model, extractor) = models(4);
        let a_path = dir.path().join("a.rpkb");
        let b_path = dir.path().join("b.rpkb");
        build_kb(&data, &model, &extractor, &s, 80, 20, 9, 1)
            .unwrap()
            .save(&a_path)
            .unwrap();
        build_kb(&data, &model, &extractor, &s, 80, 20, 9, 1)
            .unwrap()
            .save(&b_path)
            .unwrap();
        assert_eq!(std::fs::read(&a_path).unwrap(), std::fs::read(&b_path).unwrap());
    }

    #[test]
    fn values_recompute_from_stored_provenance() {
        let s = schedule();
        let data = ring(25, 5);
        let (model, extractor) = models(6);
        let seed = 11u64;
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, seed, 1).unwrap();
        for entry in kb.entries() {
            let x = &data.points[entry.source_index as usize];
            let mut rng = entry_rng(seed, entry.source_index, 1, 0);
            let eps = standard_normal(2, &mut rng);
            let expected = forward_diffuse(x, 20, &eps, &s).unwrap();
            assert_eq!(entry.value, expected, "entry {}", entry.source_index);
        }
    }

    #[test]
    fn multiple_entries_per_example_use_independent_draws() {
        let s = schedule();
        let data = ring(10, 7);
        let (model, extractor) = models(8);
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, 13, 3).unwrap();
        assert_eq!(kb.len(), 30);
        let first: Vec<&KbEntry> = kb
            .entries()
            .iter()
            .filter(|e| e.source_index == 0)
            .collect();
        assert_eq!(first.len(), 3);
        assert_ne!(first[0].value, first[1].value);
        assert_ne!(first[1].value, first[2].value);
    }

    fn manifest() -> KbManifest {
        KbManifest {
            denoiser_checksum: [0; 32],
            extractor_checksum: [0; 32],
            schedule_hash: [0; 32],
            seed: 0,
        }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn querying_an_existing_key_returns_it_first() {
        let entries = vec![
            KbEntry { key: unit(vec![1.0, 0.2]), value: vec![0.0], label: None, source_index: 0 },
            KbEntry { key: unit(vec![-0.3, 1.0]), value: vec![1.0], label: None, source_index: 1 },
            KbEntry { key: unit(vec![0.5, -0.9]), value: vec![2.0], label: None, source_index: 2 },
        ];
        let kb = KnowledgeBase::from_entries(entries.clone(), 80, 20, manifest()).unwrap();
        for e in &entries {
            let hits = kb.query(&e.key, 1).unwrap();
            assert_eq!(hits[0].0.source_index, e.source_index);
            assert!((hits[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slightly_rotated_orthogonal_key_finds_its_neighbor() {
        let entries = vec![
            KbEntry { key: vec![1.0, 0.0, 0.0], value: vec![0.0], label: None, source_index: 0 },
            KbEntry { key: vec![0.0, 1.0, 0.0], value: vec![1.0], label: None, source_index: 1 },
            KbEntry { key: vec![0.0, 0.0, 1.0], value: vec![2.0], label: None, source_index: 2 },
        ];
        let kb = KnowledgeBase::from_entries(entries, 80, 20, manifest()).unwrap();
        let angle = 0.05f64;
        let q = vec![angle.sin(), angle.cos(), 0.0];
        let hits = kb.query(&q, 3).unwrap();
        assert_eq!(hits[0].0.source_index, 1);
        // full scan is sorted non-increasing
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn query_everything_returns_sorted_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let entries: Vec<KbEntry> = (0..50)
            .map(|i| KbEntry {
                key: unit((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
                value: vec![i as f64],
                label: Some(i % 5),
                source_index: i as u64,
            })
            .collect();
        let kb = KnowledgeBase::from_entries(entries, 80, 20, manifest()).unwrap();
        let q = unit(vec![0.3, -0.2, 0.8, 0.1]);
        let hits = kb.query(&q, 50).unwrap();
        assert_eq!(hits.len(), 50);
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    /// Naive double-loop scan used as the retrieval oracle.
    fn naive_scan<'k>(kb: &'k KnowledgeBase, z: &[f64], topk: usize) -> Vec<(&'k KbEntry, f64)> {
        let mut all: Vec<(&KbEntry, f64)> = kb
            .entries()
            .iter()
            .map(|e| {
                let mut s = 0.0;
                for (a, b) in z.iter().zip(&e.key) {
                    s += a * b;
                }
                (e, s)
            })
            .collect();
        all.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.source_index.cmp(&b.0.source_index))
        });
        all.truncate(topk.min(kb.len()));
        all
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn query_matches_naive_scan(seed in 0u64..10_000, n in 1usize..60, topk in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<KbEntry> = (0..n)
                .map(|i| {
                    let mut key: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    if key.iter().all(|&v| v == 0.0) {
                        key[0] = 1.0;
                    }
                    KbEntry {
                        key: unit(key),
                        value: vec![i as f64],
                        label: None,
                        source_index: i as u64,
                    }
                })
                .collect();
            let kb = KnowledgeBase::from_entries(entries, 80, 20, manifest()).unwrap();
            let mut q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            if q.iter().all(|&v| v == 0.0) {
                q[0] = 1.0;
            }
            let q = unit(q);
            let got = kb.query(&q, topk).unwrap();
            let expected = naive_scan(&kb, &q, topk);
            prop_assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                prop_assert_eq!(g.0.source_index, e.0.source_index);
                prop_assert_eq!(g.1, e.1);
            }
        }

        #[test]
        fn growing_the_base_never_hurts_the_top_hit(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let make_entry = |i: usize, rng: &mut ChaCha8Rng| {
                let mut key: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                if key.iter().all(|&v| v == 0.0) {
                    key[0] = 1.0;
                }
                KbEntry { key: unit(key), value: vec![0.0], label: None, source_index: i as u64 }
            };
            let entries: Vec<KbEntry> = (0..30).map(|i| make_entry(i, &mut rng)).collect();
            let q = unit(vec![rng.random_range(-1.0..1.0), 0.4, rng.random_range(-1.0..1.0)]);
            let small = KnowledgeBase::from_entries(entries[..10].to_vec(), 80, 20, manifest()).unwrap();
            let large = KnowledgeBase::from_entries(entries, 80, 20, manifest()).unwrap();
            let s_top = small.query(&q, 1).unwrap()[0].1;
            let l_top = large.query(&q, 1).unwrap()[0].1;
            prop_assert!(l_top >= s_top);
        }
    }

    #[test]
    fn persistence_round_trip_is_bit_exact_and_query_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.rpkb");
        let s = schedule();
        let data = ring(60, 21);
        let (model, extractor) = models(22);
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, 23, 1).unwrap();
        kb.save(&path).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();
        let loaded = KnowledgeBase::load(&path).unwrap();
        assert_eq!(kb, loaded);
        loaded.save(&path).unwrap();
        assert_eq!(first_bytes, std::fs::read(&path).unwrap());

        let q = kb.entries()[17].key.clone();
        let before: Vec<(u64, f64)> = kb
            .query(&q, 5)
            .unwrap()
            .into_iter()
            .map(|(e, s)| (e.source_index, s))
            .collect();
        let after: Vec<(u64, f64)> = loaded
            .query(&q, 5)
            .unwrap()
            .into_iter()
            .map(|(e, s)| (e.source_index, s))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn label_accuracy_is_perfect_for_self_queries() {
        let s = schedule();
        let data = ring(80, 31);
        let (model, extractor) = models(32);
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, 33, 1).unwrap();
        let queries: Vec<(Vec<f64>, u32)> = kb
            .entries()
            .iter()
            .map(|e| (e.key.clone(), e.label.unwrap()))
            .collect();
        let acc = kb.retrieval_label_accuracy(&queries, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        use rand::seq::SliceRandom;
        let s = schedule();
        let data = ring(400, 41);
        let (model, extractor) = models(42);
        let kb = build_kb(&data, &model, &extractor, &s, 80, 20, 43, 1).unwrap();
        // permutation null: shuffle the label assignment, query with held-out
        // features whose "truth" is drawn from the shuffled labels
        let mut accs = Vec::new();
        for perm_seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut labels: Vec<u32> = kb.entries().iter().map(|e| e.label.unwrap()).collect();
            labels.shuffle(&mut rng);
            let entries: Vec<KbEntry> = kb
                .entries()
                .iter()
                .zip(&labels)
                .map(|(e, &l)| KbEntry { label: Some(l), ..e.clone() })
                .collect();
            let shuffled = KnowledgeBase::from_entries(entries, 80, 20, *kb.manifest()).unwrap();
            let queries: Vec<(Vec<f64>, u32)> = kb
                .entries()
                .iter()
                .step_by(4)
                .map(|e| (e.key.clone(), e.label.unwrap()))
                .collect();
            accs.push(shuffled.retrieval_label_accuracy(&queries, 1).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // chance rate 1/8 = 0.125; the permutation null has binomial spread
        let se = (0.125_f64 * 0.875 / (100.0 * 10.0)).sqrt();
        assert!(
            (mean - 0.125).abs() < 5.0 * se + 0.02,
            "null accuracy {mean}"
        );
    }

    #[test]
    fn empty_and_invalid_queries_error() {
        let entries = vec![KbEntry {
            key: vec![1.0, 0.0],
            value: vec![0.0],
            label: None,
            source_index: 0,
        }];
        let kb = KnowledgeBase::from_entries(entries, 80, 20, manifest()).unwrap();
        assert!(kb.query(&[1.0, 0.0], 0).is_err());
        assert!(kb.query(&[2.0, 0.0], 1).is_err());
        assert!(kb
            .retrieval_label_accuracy(&[(vec![1.0, 0.0], 0)], 1)
            .is_err());
    }
}
