//! Feature concatenation, memory-bank scoring, normalization and thresholding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::FeatureMatrix;
use crate::error::{Error, Result};

/// Row-wise `[f3d | f2d]`.
pub fn concat_features(f3d: &FeatureMatrix, f2d: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f3d.n_rows() != f2d.n_rows() {
        return Err(Error::Shape(format!(
            "cannot concatenate {} rows with {} rows",
            f3d.n_rows(),
            f2d.n_rows()
        )));
    }
    let d = f3d.n_cols() + f2d.n_cols();
    let mut data = Vec::with_capacity(f3d.n_rows() * d);
    for i in 0..f3d.n_rows() {
        data.extend_from_slice(f3d.row(i));
        data.extend_from_slice(f2d.row(i));
    }
    FeatureMatrix::from_vec(f3d.n_rows(), d, data)
}

/// Nominal feature rows with the sample each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    rows: FeatureMatrix,
    sources: Vec<String>,
}

impl MemoryBank {
    pub fn rows(&self) -> &FeatureMatrix {
        &self.rows
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.rows.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.n_rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.n_cols()
    }
}

/// Stacks nominal rows, keeping a seeded uniform subset of `subsample · total`.
pub fn bank_build(
    nominal: &[(String, FeatureMatrix)],
    subsample: f64,
    seed: u64,
) -> Result<MemoryBank> {
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample must be in (0, 1], got {subsample}"
        )));
    }
    let total: usize = nominal.iter().map(|(_, f)| f.n_rows()).sum();
    if total == 0 {
        return Err(Error::EmptyBank);
    }
    let d = nominal
        .iter()
        .find(|(_, f)| f.n_rows() > 0)
        .map(|(_, f)| f.n_cols())
        .unwrap_or(0);
    if nominal
        .iter()
        .any(|(_, f)| f.n_rows() > 0 && f.n_cols() != d)
    {
        return Err(Error::Shape("nominal feature widths differ".into()));
    }
    let mut all = Vec::with_capacity(total * d);
    let mut sources = Vec::with_capacity(total);
    for (id, f) in nominal {
        for row in f.rows() {
            all.extend_from_slice(row);
            sources.push(id.clone());
        }
    }
    let rows = FeatureMatrix::from_vec(total, d, all)?;
    if subsample >= 1.0 {
        return Ok(MemoryBank { rows, sources });
    }
    let keep = ((total as f64 * subsample).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, keep).into_vec();
    idx.sort_unstable();
    Ok(MemoryBank {
        rows: rows.select_rows(&idx),
        sources: idx.iter().map(|&i| sources[i].clone()).collect(),
    })
}

/// Euclidean distance from each row to its nearest bank row.
pub fn bank_score(features: &FeatureMatrix, bank: &MemoryBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if features.n_cols() != bank.dim() {
        return Err(Error::Shape(format!(
            "features have width {}, bank has {}",
            features.n_cols(),
            bank.dim()
        )));
    }
    // Squared norms let the inner loop bail out early on partial sums.
    Ok((0..features.n_rows())
        .into_par_iter()
        .map(|i| {
            let q = features.row(i);
            let mut best = f64::INFINITY;
            for b in bank.rows.rows() {
                let mut d2 = 0.0;
                for (x, y) in q.iter().zip(b) {
                    let t = x - y;
                    d2 += t * t;
                    if d2 >= best {
                        break;
                    }
                }
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect())
}

/// Min-max scaling into [0, 1]; a constant input maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter()
        .map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

/// Indices with score strictly above `tau`.
pub fn threshold_detect(norm_scores: &[f64], tau: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must be in [0, 1], got {tau}"
        )));
    }
    Ok((0..norm_scores.len())
        .filter(|&i| norm_scores[i] > tau)
        .collect())
}

/// Maximum raw per-point score.
pub fn image_score(raw: &[f64]) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::DegenerateInput("no scores to reduce".into()));
    }
    Ok(raw.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Scores, threshold and detected set for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub sample_id: String,
    pub image_score: f64,
    pub tau: f64,
    #[serde(skip)]
    pub raw_scores: Vec<f64>,
    #[serde(rename = "scores")]
    pub norm_scores: Vec<f64>,
    #[serde(rename = "anomalies")]
    pub anomaly_set: Vec<usize>,
}

impl AnomalyResult {
    /// Normalizes, thresholds and reduces raw per-point scores.
    pub fn from_raw(sample_id: impl Into<String>, raw_scores: Vec<f64>, tau: f64) -> Result<Self> {
        let norm_scores = normalize_scores(&raw_scores);
        let anomaly_set = threshold_detect(&norm_scores, tau)?;
        Ok(Self {
            sample_id: sample_id.into(),
            image_score: image_score(&raw_scores)?,
            tau,
            raw_scores,
            norm_scores,
            anomaly_set,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite values serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        FeatureMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn concat_examples() {
        let a = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(concat_features(&a, &b).unwrap().data(), &[1.0, 2.0, 3.0]);
        let empty = FeatureMatrix::zeros(1, 0);
        assert_eq!(concat_features(&a, &empty).unwrap(), a);
        assert!(concat_features(&a, &FeatureMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn concat_slices_recover_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(7, 3, &mut rng);
        let b = random_matrix(7, 5, &mut rng);
        let c = concat_features(&a, &b).unwrap();
        for i in 0..7 {
            assert_eq!(&c.row(i)[..3], a.row(i));
            assert_eq!(&c.row(i)[3..], b.row(i));
        }
    }

    #[test]
    fn bank_build_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vec![
            ("a".to_string(), random_matrix(10, 4, &mut rng)),
            ("b".to_string(), random_matrix(10, 4, &mut rng)),
        ];
        assert_eq!(bank_build(&s, 1.0, 0).unwrap().len(), 20);
        let h1 = bank_build(&s, 0.5, 7).unwrap();
        let h2 = bank_build(&s, 0.5, 7).unwrap();
        assert_eq!(h1.len(), 10);
        assert_eq!(h1, h2);
        for (row, src) in h1.rows().rows().zip(h1.sources()) {
            let m = &s.iter().find(|(id, _)| id == src).unwrap().1;
            assert!(m.rows().any(|r| r == row));
        }
        assert!(matches!(bank_build(&[], 1.0, 0), Err(Error::EmptyBank)));
    }

    #[test]
    fn bank_score_examples() {
        let bank = bank_build(
            &[(
                "n".into(),
                FeatureMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            )],
            1.0,
            0,
        )
        .unwrap();
        let q = FeatureMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(bank_score(&q, &bank).unwrap(), vec![5.0, 0.0]);
        assert!(bank_score(&FeatureMatrix::zeros(1, 3), &bank).is_err());
    }

    #[test]
    fn bank_score_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank_rows = random_matrix(80, 6, &mut rng);
        let bank = bank_build(&[("n".into(), bank_rows.clone())], 1.0, 0).unwrap();
        let q = random_matrix(40, 6, &mut rng);
        let s = bank_score(&q, &bank).unwrap();
        for (i, row) in q.rows().enumerate() {
            let e = bank_rows
                .rows()
                .map(|b| {
                    row.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((s[i] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..9.0)).collect();
        let n = normalize_scores(&raw);
        assert_eq!(n.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(n.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        for i in 0..50 {
            for j in 0..50 {
                if raw[i] < raw[j] {
                    assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_detect(&[0.2, 0.9], 0.5).unwrap(), vec![1]);
        assert!(threshold_detect(&[1.0, 0.3], 1.0).unwrap().is_empty());
        assert!(threshold_detect(&[0.5], 1.5).is_err());
    }

    #[test]
    fn image_score_examples() {
        assert_eq!(image_score(&[0.1, 0.7, 0.3]).unwrap(), 0.7);
        assert_eq!(image_score(&[0.4]).unwrap(), 0.4);
        assert!(image_score(&[]).is_err());
    }

    #[test]
    fn result_consistency_and_json() {
        let r = AnomalyResult::from_raw("s1", vec![1.0, 3.0, 2.0], 0.4).unwrap();
        assert_eq!(r.anomaly_set, vec![1, 2]);
        assert_eq!(r.image_score, 3.0);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["sample_id", "image_score", "tau", "scores", "anomalies"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        // argmax is preserved by normalization.
        let best = r
            .norm_scores
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.norm_scores.iter().position(|&v| v == best), Some(1));
    }
}
