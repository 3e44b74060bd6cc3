//! Desk-scale quality, diversity, and efficiency metrics: Fréchet distance
//! between Gaussian fits in data space, k-NN coverage, and denoiser-call
//! accounting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub n_samples: usize,
}

pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianFit> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = samples[0].len();
    if samples.len() < dim + 1 {
        return Err(Error::InvalidConfig(format!(
            "need at least dim + 1 = {} samples, got {}",
            dim + 1,
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                layer: 0,
                got: s.len(),
                expected: dim,
            });
        }
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        for i in 0..dim {
            let di = s[i] - mean[i];
            for j in i..dim {
                let dj = s[j] - mean[j];
                cov[(i, j)] += di * dj;
            }
        }
    }
    let denom = if samples.len() > 1 { n - 1.0 } else { 1.0 };
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianFit {
        mean,
        covariance: cov,
        n_samples: samples.len(),
    })
}

const PSD_TOLERANCE: f64 = 1e-8;

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `-PSD_TOLERANCE` are an error, small negatives clamp to zero.
fn sqrt_psd(matrix: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let symmetrized = (matrix + matrix.transpose()) * 0.5;
    let eigen = SymmetricEigen::new(symmetrized);
    let mut roots = eigen.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "{context} is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eigen.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// `d^2 = ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The cross term uses the symmetrized product `sqrt(S_a) S_b sqrt(S_a)`,
/// whose trace of the square root equals `tr((S_a S_b)^{1/2})`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let dim = a.mean.len();
    if b.mean.len() != dim {
        return Err(Error::DimensionMismatch {
            layer: 0,
            got: b.mean.len(),
            expected: dim,
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sqrt_a = sqrt_psd(&a.covariance, "first covariance")?;
    let inner = &sqrt_a * &b.covariance * &sqrt_a;
    let cross = sqrt_psd(&inner, "covariance product")?;
    let trace_term = a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
    let d2 = mean_term + trace_term;
    Ok(d2.max(0.0).sqrt())
}

/// Neighborhood size for the coverage metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub nn_size: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { nn_size: 5 }
    }
}

/// Fraction of real points with at least one synthetic point inside the
/// closed ball whose radius is the `nn_size`-th smallest distinct distance to
/// the other real points. An empty synthetic set scores zero.
///
/// Tie handling: coincident neighbor distances count once, so the radius is
/// the `nn_size`-th distinct value; on continuous data this coincides with
/// the plain k-th-neighbor radius almost surely.
pub fn coverage(real: &[Vec<f64>], synthetic: &[Vec<f64>], cfg: &CoverageConfig) -> Result<f64> {
    if cfg.nn_size == 0 {
        return Err(Error::InvalidConfig("nn_size must be >= 1".into()));
    }
    if real.len() <= cfg.nn_size {
        return Err(Error::InvalidConfig(format!(
            "need more than nn_size = {} real points, got {}",
            cfg.nn_size,
            real.len()
        )));
    }
    if synthetic.is_empty() {
        return Ok(0.0);
    }
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut covered = 0usize;
    for (i, x) in real.iter().enumerate() {
        let mut d2: Vec<f64> = real
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, other)| dist2(x, other))
            .collect();
        d2.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        d2.dedup();
        let radius2 = d2[(cfg.nn_size - 1).min(d2.len() - 1)];
        if synthetic.iter().any(|s| dist2(x, s) <= radius2) {
            covered += 1;
        }
    }
    Ok(covered as f64 / real.len() as f64)
}

/// Cost figures of one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCostRecord {
    pub mode: String,
    pub n_samples: usize,
    pub denoiser_calls: u64,
    pub wall_clock_seconds: f64,
}

/// Cost figures of one knowledge-base build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbBuildCostRecord {
    pub entries: usize,
    pub denoiser_calls: u64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub mode: String,
    pub n_samples: usize,
    pub denoiser_calls: u64,
    pub calls_per_sample: f64,
    pub wall_clock_seconds: f64,
}

/// Aggregated efficiency table over sampling runs and KB builds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    pub kb_builds: Vec<KbBuildCostRecord>,
}

pub fn efficiency_report(
    samples: &[SampleCostRecord],
    kb_builds: &[KbBuildCostRecord],
) -> EfficiencyReport {
    EfficiencyReport {
        rows: samples
            .iter()
            .map(|r| EfficiencyRow {
                mode: r.mode.clone(),
                n_samples: r.n_samples,
                denoiser_calls: r.denoiser_calls,
                calls_per_sample: if r.n_samples == 0 {
                    0.0
                } else {
                    r.denoiser_calls as f64 / r.n_samples as f64
                },
                wall_clock_seconds: r.wall_clock_seconds,
            })
            .collect(),
        kb_builds: kb_builds.to_vec(),
    }
}

impl std::fmt::Display for EfficiencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>14} {:>12} {:>10}", "mode", "samples", "denoiser calls", "calls/sample", "seconds")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>9} {:>14} {:>12.1} {:>10.3}",
                r.mode, r.n_samples, r.denoiser_calls, r.calls_per_sample, r.wall_clock_seconds
            )?;
        }
        for kb in &self.kb_builds {
            writeln!(
                f,
                "kb build   {:>9} {:>14} {:>12.1} {:>10.3}",
                kb.entries,
                kb.denoiser_calls,
                kb.denoiser_calls as f64 / kb.entries.max(1) as f64,
                kb.wall_clock_seconds
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn two_point_fit_matches_hand_formula() {
        let fit = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]])
            .unwrap();
        assert_eq!(fit.mean, vec![1.0, 0.0]);
        // unbiased covariance of {0,2,0,2} is 4/3
        assert!((fit.covariance[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(fit.covariance[(1, 1)], 0.0);
        assert_eq!(fit.covariance[(0, 1)], 0.0);
    }

    #[test]
    fn two_sample_two_point_case() {
        let fit = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(fit.mean, vec![1.0]);
        assert!((fit.covariance[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let fit = fit_gaussian(&vec![vec![1.5, -0.5]; 10]).unwrap();
        assert!(fit.covariance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_rejects_too_few_samples() {
        assert!(fit_gaussian(&[vec![0.0, 0.0], vec![1.0, 1.0]]).is_err());
        assert!(fit_gaussian(&[]).is_err());
    }

    #[test]
    fn standard_normal_fit_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let fit = fit_gaussian(&samples).unwrap();
        let mean_se = 1.0 / (n as f64).sqrt();
        let var_se = (2.0 / n as f64).sqrt();
        for d in 0..2 {
            assert!(fit.mean[d].abs() < 5.0 * mean_se);
            assert!((fit.covariance[(d, d)] - 1.0).abs() < 5.0 * var_se);
        }
        assert!(fit.covariance[(0, 1)].abs() < 5.0 * mean_se);
    }

    fn diag_fit(mean: Vec<f64>, diag: Vec<f64>) -> GaussianFit {
        let dim = mean.len();
        let mut cov = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            cov[(i, i)] = diag[i];
        }
        GaussianFit {
            mean,
            covariance: cov,
            n_samples: 0,
        }
    }

    #[test]
    fn frechet_identical_fits_is_zero() {
        let a = diag_fit(vec![0.3, -0.7], vec![1.0, 2.0]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-10);
    }

    #[test]
    fn frechet_equal_covariances_reduces_to_mean_offset() {
        let a = diag_fit(vec![0.0, 0.0], vec![1.7, 0.4]);
        let b = diag_fit(vec![3.0, 4.0], vec![1.7, 0.4]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-10, "d = {d}");
    }

    #[test]
    fn frechet_scaled_identity_closed_form() {
        // mu equal, S_a = I, S_b = 4I in 2-D: d^2 = tr(5I - 2*2I) = 2
        let a = diag_fit(vec![0.0, 0.0], vec![1.0, 1.0]);
        let b = diag_fit(vec![0.0, 0.0], vec![4.0, 4.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 2.0f64.sqrt()).abs() < 1e-10, "d = {d}");
    }

    #[test]
    fn frechet_is_symmetric_on_random_psd_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let dim = rng.random_range(1..5);
            let random_fit = |rng: &mut ChaCha8Rng| {
                let raw = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                GaussianFit {
                    mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    covariance: &raw * raw.transpose(),
                    n_samples: 0,
                }
            };
            let a = random_fit(&mut rng);
            let b = random_fit(&mut rng);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-10, "{ab} vs {ba}");
        }
    }

    #[test]
    fn frechet_rejects_indefinite_covariance() {
        let mut cov = DMatrix::zeros(2, 2);
        cov[(0, 0)] = 1.0;
        cov[(1, 1)] = -1.0;
        let bad = GaussianFit {
            mean: vec![0.0, 0.0],
            covariance: cov,
            n_samples: 0,
        };
        let good = diag_fit(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(frechet_distance(&bad, &good).is_err());
    }

    #[test]
    fn coverage_of_itself_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let c = coverage(&real, &real, &CoverageConfig::default()).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn far_away_synthetic_set_covers_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let synthetic: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![1e6 + rng.random_range(0.0..1.0), 1e6])
            .collect();
        let c = coverage(&real, &synthetic, &CoverageConfig::default()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn empty_synthetic_set_scores_zero_not_error() {
        let real: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let c = coverage(&real, &[], &CoverageConfig::default()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn one_dimensional_hand_enumerated_fixture() {
        // radius at each x is the distance to its 2nd-nearest neighbor;
        // real = 0..=5, synthetic = {1.5} covers exactly {0, 1, 2, 3}
        let real: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let synthetic = vec![vec![1.5]];
        let c = coverage(&real, &synthetic, &CoverageConfig { nn_size: 2 }).unwrap();
        assert!((c - 4.0 / 6.0).abs() < 1e-12, "coverage {c}");
    }

    /// Naive double-loop oracle over unsquared distances.
    fn coverage_oracle(real: &[Vec<f64>], synthetic: &[Vec<f64>], nn_size: usize) -> f64 {
        if synthetic.is_empty() {
            return 0.0;
        }
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut covered = 0;
        for (i, x) in real.iter().enumerate() {
            let mut ds: Vec<f64> = real
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| dist(x, o))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut distinct = ds;
            distinct.dedup();
            let radius = distinct[(nn_size - 1).min(distinct.len() - 1)];
            if synthetic.iter().any(|s| dist(x, s) <= radius) {
                covered += 1;
            }
        }
        covered as f64 / real.len() as f64
    }

    #[test]
    fn coverage_matches_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..30 {
            let n_real = rng.random_range(7..120);
            let n_syn = rng.random_range(0..100);
            let nn_size = rng.random_range(1..6.min(n_real));
            let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()
            };
            let real: Vec<Vec<f64>> = (0..n_real).map(|_| point(&mut rng)).collect();
            let synthetic: Vec<Vec<f64>> = (0..n_syn).map(|_| point(&mut rng)).collect();
            let got = coverage(&real, &synthetic, &CoverageConfig { nn_size }).unwrap();
            let expected = coverage_oracle(&real, &synthetic, nn_size);
            assert_eq!(got, expected, "trial {trial}");
        }
    }

    #[test]
    fn coverage_monotone_in_nn_size_and_synthetic_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let real: Vec<Vec<f64>> = (0..60).map(|_| point(&mut rng)).collect();
        let synthetic: Vec<Vec<f64>> = (0..40).map(|_| point(&mut rng)).collect();
        let mut prev = 0.0;
        for nn_size in 1..6 {
            let c = coverage(&real, &synthetic, &CoverageConfig { nn_size }).unwrap();
            assert!(c >= prev, "nn_size {nn_size}");
            prev = c;
        }
        for cut in [0usize, 10, 20, 40] {
            let partial = coverage(&real, &synthetic[..cut], &CoverageConfig::default()).unwrap();
            let full = coverage(&real, &synthetic, &CoverageConfig::default()).unwrap();
            assert!(partial <= full);
        }
    }

    #[test]
    fn efficiency_report_computes_per_sample_cost() {
        let report = efficiency_report(
            &[
                SampleCostRecord {
                    mode: "full".into(),
                    n_samples: 10,
                    denoiser_calls: 1000,
                    wall_clock_seconds: 0.5,
                },
                SampleCostRecord {
                    mode: "rag".into(),
                    n_samples: 10,
                    denoiser_calls: 410,
                    wall_clock_seconds: 0.3,
                },
            ],
            &[KbBuildCostRecord {
                entries: 100,
                denoiser_calls: 100,
                wall_clock_seconds: 0.1,
            }],
        );
        assert_eq!(report.rows[0].calls_per_sample, 100.0);
        assert_eq!(report.rows[1].calls_per_sample, 41.0);
        let text = report.to_string();
        assert!(text.contains("full") && text.contains("rag") && text.contains("kb build"));
    }

    #[test]
    fn empty_run_produces_empty_table() {
        let report = efficiency_report(&[], &[]);
        assert!(report.rows.is_empty() && report.kb_builds.is_empty());
    }
}
