//! Labeled toy datasets playing the public-pretrain, public-reference, and
//! private roles, with seeded generators and a configurable domain shift for
//! the private split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PubPre,
    PubRef,
    Prv,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::PubPre => 0,
            Role::PubRef => 1,
            Role::Prv => 2,
        }
    }
}

/// Point-cloud generator and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// `modes` Gaussian clusters equally spaced on a circle; label = mode.
    GaussianRing { modes: usize, radius: f64, sigma: f64 },
    /// 2-D spiral with angular-bin labels.
    SwissRoll { turns: f64, scale: f64, sigma: f64, bins: usize },
    /// Uniform points restricted to the even cells of a 2-D grid, unlabeled.
    Checkerboard { cells_per_side: usize, extent: f64 },
    /// Gaussian clusters at seeded uniform centers; label = cluster.
    Blobs { clusters: usize, dim: usize, center_range: f64, sigma: f64 },
}

/// Rigid shift applied to a generated set, modeling a public-to-private
/// domain gap: rotation about the origin (2-D only), then translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
    pub role: Role,
    pub generator: GeneratorSpec,
    pub shift: Option<Shift>,
    pub seed: u64,
}

/// Sizes split as evenly as integer arithmetic allows, remainder to the
/// earliest groups.
fn stratified_counts(n: usize, groups: usize) -> Vec<usize> {
    let base = n / groups;
    let extra = n % groups;
    (0..groups)
        .map(|g| base + usize::from(g < extra))
        .collect()
}

pub fn generate_dataset(
    generator: &GeneratorSpec,
    n: usize,
    role: Role,
    shift: Option<Shift>,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut points, labels) = match generator {
        GeneratorSpec::GaussianRing {
            modes,
            radius,
            sigma,
        } => {
            if *modes == 0 {
                return Err(Error::InvalidConfig("ring needs at least one mode".into()));
            }
            let mut points = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for (mode, &count) in stratified_counts(n, *modes).iter().enumerate() {
                let angle = 2.0 * std::f64::consts::PI * mode as f64 / *modes as f64;
                let center = [radius * angle.cos(), radius * angle.sin()];
                for _ in 0..count {
                    let px: f64 = rng.sample(StandardNormal);
                    let py: f64 = rng.sample(StandardNormal);
                    points.push(vec![center[0] + sigma * px, center[1] + sigma * py]);
                    labels.push(mode as u32);
                }
            }
            (points, Some(labels))
        }
        GeneratorSpec::SwissRoll {
            turns,
            scale,
            sigma,
            bins,
        } => {
            if *bins == 0 {
                return Err(Error::InvalidConfig("swiss roll needs >= 1 bin".into()));
            }
            let mut points = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.random_range(0.0..1.0);
                let angle = 2.0 * std::f64::consts::PI * turns * u;
                let r = scale * (0.2 + 0.8 * u);
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                points.push(vec![
                    r * angle.cos() + sigma * jx,
                    r * angle.sin() + sigma * jy,
                ]);
                labels.push(((u * *bins as f64) as usize).min(bins - 1) as u32);
            }
            (points, Some(labels))
        }
        GeneratorSpec::Checkerboard {
            cells_per_side,
            extent,
        } => {
            if *cells_per_side == 0 || *extent <= 0.0 {
                return Err(Error::InvalidConfig("bad checkerboard parameters".into()));
            }
            let cell = 2.0 * extent / *cells_per_side as f64;
            let mut points = Vec::with_capacity(n);
            while points.len() < n {
                let x: f64 = rng.random_range(-extent..*extent);
                let y: f64 = rng.random_range(-extent..*extent);
                let cx = ((x + extent) / cell) as usize;
                let cy = ((y + extent) / cell) as usize;
                if (cx + cy) % 2 == 0 {
                    points.push(vec![x, y]);
                }
            }
            (points, None)
        }
        GeneratorSpec::Blobs {
            clusters,
            dim,
            center_range,
            sigma,
        } => {
            if *clusters == 0 || *dim == 0 {
                return Err(Error::InvalidConfig("bad blob parameters".into()));
            }
            let centers: Vec<Vec<f64>> = (0..*clusters)
                .map(|_| {
                    (0..*dim)
                        .map(|_| rng.random_range(-center_range..*center_range))
                        .collect()
                })
                .collect();
            let mut points = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for (cluster, &count) in stratified_counts(n, *clusters).iter().enumerate() {
                for _ in 0..count {
                    let point: Vec<f64> = centers[cluster]
                        .iter()
                        .map(|&c| {
                            let j: f64 = rng.sample(StandardNormal);
                            c + sigma * j
                        })
                        .collect();
                    points.push(point);
                    labels.push(cluster as u32);
                }
            }
            (points, Some(labels))
        }
    };
    if let Some(shift) = &shift {
        apply_shift(&mut points, shift)?;
    }
    Ok(Dataset {
        points,
        labels,
        role,
        generator: generator.clone(),
        shift,
        seed,
    })
}

fn apply_shift(points: &mut [Vec<f64>], shift: &Shift) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    if shift.rotation_radians != 0.0 && dim != 2 {
        return Err(Error::InvalidConfig(
            "rotation shift is defined for 2-D data only".into(),
        ));
    }
    if !shift.translation.is_empty() && shift.translation.len() != dim {
        return Err(Error::DimensionMismatch {
            layer: 0,
            got: shift.translation.len(),
            expected: dim,
        });
    }
    let (sin, cos) = shift.rotation_radians.sin_cos();
    for p in points.iter_mut() {
        if shift.rotation_radians != 0.0 {
            let (x, y) = (p[0], p[1]);
            p[0] = cos * x - sin * y;
            p[1] = sin * x + cos * y;
        }
        for (v, &t) in p.iter_mut().zip(&shift.translation) {
            *v += t;
        }
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// Number of distinct classes when labeled.
    pub fn n_classes(&self) -> Option<u32> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Content hash over role, provenance, labels, and points.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update([self.role.code()]);
        hasher.update(self.seed.to_le_bytes());
        hasher.update(serde_json::to_vec(&self.generator).expect("generator serializes"));
        hasher.update(serde_json::to_vec(&self.shift).expect("shift serializes"));
        hasher.update((self.points.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        match &self.labels {
            Some(labels) => {
                hasher.update([1u8]);
                for l in labels {
                    hasher.update(l.to_le_bytes());
                }
            }
            None => hasher.update([0u8]),
        }
        for p in &self.points {
            for v in p {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn checksum_hex(&self) -> String {
        hex(&self.checksum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct OnDisk<'a> {
            #[serde(flatten)]
            dataset: &'a Dataset,
            checksum: String,
        }
        let body = serde_json::to_string(&OnDisk {
            dataset: self,
            checksum: self.checksum_hex(),
        })?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        #[derive(Deserialize)]
        struct OnDisk {
            #[serde(flatten)]
            dataset: Dataset,
            checksum: String,
        }
        let body = std::fs::read_to_string(path)?;
        let on_disk: OnDisk = serde_json::from_str(&body)?;
        let actual = on_disk.dataset.checksum_hex();
        if actual != on_disk.checksum {
            return Err(Error::ChecksumMismatch {
                artifact: path.display().to_string(),
                expected: on_disk.checksum,
                actual,
            });
        }
        Ok(on_disk.dataset)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring_spec() -> GeneratorSpec {
        GeneratorSpec::GaussianRing {
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
        }
    }

    #[test]
    fn ring_allocation_is_stratified_exactly() {
        let d = generate_dataset(&ring_spec(), 8000, Role::PubPre, None, 1).unwrap();
        let labels = d.labels.as_ref().unwrap();
        for mode in 0..8u32 {
            assert_eq!(labels.iter().filter(|&&l| l == mode).count(), 1000);
        }
        assert_eq!(d.n_classes(), Some(8));
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = generate_dataset(&ring_spec(), 500, Role::PubPre, None, 42).unwrap();
        let b = generate_dataset(&ring_spec(), 500, Role::PubPre, None, 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = generate_dataset(&ring_spec(), 500, Role::PubPre, None, 43).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn rotated_private_ring_recovers_rotated_centers() {
        let n = 8000;
        let rotation = std::f64::consts::PI / 8.0;
        let pub_ring = generate_dataset(&ring_spec(), n, Role::PubPre, None, 7).unwrap();
        let prv_ring = generate_dataset(
            &ring_spec(),
            n,
            Role::Prv,
            Some(Shift {
                rotation_radians: rotation,
                translation: vec![],
            }),
            8,
        )
        .unwrap();
        let mean_of = |d: &Dataset, label: u32| -> [f64; 2] {
            let mut sum = [0.0, 0.0];
            let mut count = 0usize;
            for (p, &l) in d.points.iter().zip(d.labels.as_ref().unwrap()) {
                if l == label {
                    sum[0] += p[0];
                    sum[1] += p[1];
                    count += 1;
                }
            }
            [sum[0] / count as f64, sum[1] / count as f64]
        };
        let per_mode = n / 8;
        let se = 0.05 / (per_mode as f64).sqrt();
        for label in 0..8u32 {
            let pub_mean = mean_of(&pub_ring, label);
            let prv_mean = mean_of(&prv_ring, label);
            let (sin, cos) = rotation.sin_cos();
            let expected = [
                cos * pub_mean[0] - sin * pub_mean[1],
                sin * pub_mean[0] + cos * pub_mean[1],
            ];
            for d in 0..2 {
                assert!(
                    (prv_mean[d] - expected[d]).abs() < 5.0 * se * 2.0_f64.sqrt(),
                    "label {label} axis {d}: {} vs {}",
                    prv_mean[d],
                    expected[d]
                );
            }
        }
    }

    #[test]
    fn translation_shift_moves_every_point() {
        let base = generate_dataset(&ring_spec(), 100, Role::PubPre, None, 3).unwrap();
        let shifted = generate_dataset(
            &ring_spec(),
            100,
            Role::Prv,
            Some(Shift {
                rotation_radians: 0.0,
                translation: vec![0.5, -0.25],
            }),
            3,
        )
        .unwrap();
        for (a, b) in base.points.iter().zip(&shifted.points) {
            assert!((b[0] - a[0] - 0.5).abs() < 1e-15);
            assert!((b[1] - a[1] + 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn other_generators_produce_requested_sizes() {
        let swiss = GeneratorSpec::SwissRoll {
            turns: 1.5,
            scale: 2.0,
            sigma: 0.02,
            bins: 6,
        };
        let board = GeneratorSpec::Checkerboard {
            cells_per_side: 4,
            extent: 2.0,
        };
        let blobs = GeneratorSpec::Blobs {
            clusters: 3,
            dim: 4,
            center_range: 2.0,
            sigma: 0.1,
        };
        for (spec, labeled) in [(swiss, true), (board, false), (blobs, true)] {
            let d = generate_dataset(&spec, 333, Role::PubPre, None, 5).unwrap();
            assert_eq!(d.len(), 333);
            assert_eq!(d.labels.is_some(), labeled);
            if let Some(labels) = &d.labels {
                let classes = d.n_classes().unwrap();
                assert!(labels.iter().all(|&l| l < classes));
            }
        }
    }

    #[test]
    fn save_load_round_trip_validates_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let d = generate_dataset(&ring_spec(), 64, Role::PubRef, None, 9).unwrap();
        d.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(d, loaded);

        // tamper a byte inside a point value
        let mut body = std::fs::read_to_string(&path).unwrap();
        let idx = body.find("2.0").unwrap_or(body.len() / 2);
        body.replace_range(idx..idx + 1, "3");
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            Dataset::load(&path),
            Err(Error::ChecksumMismatch { .. }) | Err(Error::Json(_))
        ));
    }
}
