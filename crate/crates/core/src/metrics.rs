//! I-ROC (AUROC) and P-PRO evaluation.

use std::collections::VecDeque;

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::neighbors::KdTree;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_THRESHOLDS: usize = 200;

/// Mann-Whitney AUROC with tied scores counted as half, via average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// How positive points are linked into regions of a point-cloud mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointConnectivity {
    /// Edge when each point is among the other's k nearest positives.
    Mutual,
    /// Edge when either point is among the other's k nearest positives.
    Union,
}

/// Ground-truth labels with their connected anomaly regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    labels: Vec<bool>,
    regions: Vec<Vec<usize>>,
}

impl RegionMask {
    /// Row-major grid mask with 8-neighbor connectivity.
    pub fn from_grid(labels: Vec<bool>, rows: usize, cols: usize) -> Result<Self> {
        let regions = grid_components(&labels, rows, cols)?;
        Ok(Self { labels, regions })
    }

    /// Point mask with k-NN connectivity among the positive points.
    pub fn from_points(
        points: &[Point3],
        labels: Vec<bool>,
        k: usize,
        connectivity: PointConnectivity,
    ) -> Result<Self> {
        let regions = point_components(points, &labels, k, connectivity)?;
        Ok(Self { labels, regions })
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn flood(adj: impl Fn(usize, &mut Vec<usize>), labels: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut regions = Vec::new();
    let mut buf = Vec::new();
    for start in 0..labels.len() {
        if !labels[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut region = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            buf.clear();
            adj(u, &mut buf);
            for &v in &buf {
                if labels[v] && !seen[v] {
                    seen[v] = true;
                    region.push(v);
                    queue.push_back(v);
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

/// 8-connected components of a row-major boolean grid, ordered by smallest member.
pub fn grid_components(labels: &[bool], rows: usize, cols: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{rows}x{cols} grid needs {} labels, got {}",
            rows * cols,
            labels.len()
        )));
    }
    Ok(flood(
        |u, out| {
            let (r, c) = ((u / cols) as isize, (u % cols) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) != (0, 0)
                        && nr >= 0
                        && nc >= 0
                        && (nr as usize) < rows
                        && (nc as usize) < cols
                    {
                        out.push(nr as usize * cols + nc as usize);
                    }
                }
            }
        },
        labels,
    ))
}

/// Connected components of the k-NN graph restricted to positive points.
pub fn point_components(
    points: &[Point3],
    labels: &[bool],
    k: usize,
    connectivity: PointConnectivity,
) -> Result<Vec<Vec<usize>>> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return Ok(Vec::new());
    }
    let tree = KdTree::with_ids(pos.iter().map(|&i| points[i]).collect(), pos.clone());
    let k = k.min(pos.len() - 1);
    let mut knn: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for &i in &pos {
        let mut l: Vec<usize> = tree
            .knn(points[i], k, Some(i))
            .into_iter()
            .map(|(j, _)| j)
            .collect();
        l.sort_unstable();
        knn[i] = l;
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for &i in &pos {
        for &j in &knn[i] {
            let linked = match connectivity {
                PointConnectivity::Union => true,
                PointConnectivity::Mutual => knn[j].binary_search(&i).is_ok(),
            };
            if linked {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    Ok(flood(|u, out| out.extend_from_slice(&adj[u]), labels))
}

/// Points (fpr, pro) of the per-region-overlap curve, sorted by fpr then pro,
/// starting at the (0, 0) anchor. Prediction at threshold t is `score >= t`.
pub fn pro_curve(
    scores: &[f64],
    mask: &RegionMask,
    n_thresholds: usize,
) -> Result<Vec<(f64, f64)>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} scores but mask has {} entries",
            scores.len(),
            mask.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let labels = mask.labels();
    let n_neg = labels.iter().filter(|&&l| !l).count();
    if mask.regions().is_empty() || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "P-PRO needs at least one anomalous region and one normal point".into(),
        ));
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument("need at least 2 thresholds".into()));
    }

    let mut region_of = vec![usize::MAX; scores.len()];
    for (r, members) in mask.regions().iter().enumerate() {
        for &i in members {
            region_of[i] = r;
        }
    }
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let thresholds: Vec<f64> = if uniq.len() <= n_thresholds {
        uniq
    } else {
        let u = uniq.len() - 1;
        (0..n_thresholds)
            .map(|i| uniq[((i * u) as f64 / (n_thresholds - 1) as f64).round() as usize])
            .collect()
    };

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sizes: Vec<f64> = mask.regions().iter().map(|r| r.len() as f64).collect();
    let n_regions = sizes.len() as f64;
    let mut fp = 0usize;
    let mut overlap_sum = 0.0;
    let mut next = 0;
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        while next < order.len() && scores[order[next]] >= t {
            let i = order[next];
            if labels[i] {
                if region_of[i] != usize::MAX {
                    overlap_sum += 1.0 / sizes[region_of[i]];
                }
            } else {
                fp += 1;
            }
            next += 1;
        }
        curve.push((fp as f64 / n_neg as f64, overlap_sum / n_regions));
    }
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(curve)
}

/// Unnormalized area under `curve` up to `fpr_limit`.
///
/// A segment crossing the limit keeps the mean of its two endpoint heights and
/// has its width clipped at the limit.
pub fn clipped_area(curve: &[(f64, f64)], fpr_limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_limit {
            break;
        }
        area += (x1.min(fpr_limit) - x0) * 0.5 * (y0 + y1);
    }
    area
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn p_pro(
    scores: &[f64],
    mask: &RegionMask,
    fpr_limit: f64,
    n_thresholds: usize,
) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fpr_limit must be in (0, 1], got {fpr_limit}"
        )));
    }
    let curve = pro_curve(scores, mask, n_thresholds)?;
    Ok((clipped_area(&curve, fpr_limit) / fpr_limit).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auroc(&[2.0, 3.0, 0.0, 1.0], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.0, 1.0, 2.0, 3.0], &l).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 1.0, 1.0, 1.0], &l).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.gen_range(2..200);
            // Coarse scores so ties occur.
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            l[0] = true;
            l[1] = false;
            assert!((auroc(&s, &l).unwrap() - brute_auroc(&s, &l)).abs() < 1e-9);
        }
    }

    #[test]
    fn auroc_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let l: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let a = auroc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v + 1.0f64).exp()).collect();
        assert_eq!(a, auroc(&t, &l).unwrap());
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((a + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    fn flood_oracle(labels: &[bool], rows: usize, cols: usize) -> Vec<Vec<usize>> {
        // Recursive-style fill with an explicit stack, visiting in scan order.
        let mut id = vec![usize::MAX; labels.len()];
        let mut regions: Vec<Vec<usize>> = Vec::new();
        for s in 0..labels.len() {
            if !labels[s] || id[s] != usize::MAX {
                continue;
            }
            let r = regions.len();
            regions.push(Vec::new());
            let mut stack = vec![s];
            id[s] = r;
            while let Some(u) = stack.pop() {
                regions[r].push(u);
                let (ur, uc) = (u / cols, u % cols);
                for nr in ur.saturating_sub(1)..=(ur + 1).min(rows - 1) {
                    for nc in uc.saturating_sub(1)..=(uc + 1).min(cols - 1) {
                        let v = nr * cols + nc;
                        if labels[v] && id[v] == usize::MAX {
                            id[v] = r;
                            stack.push(v);
                        }
                    }
                }
            }
            regions[r].sort_unstable();
        }
        regions
    }

    #[test]
    fn grid_components_examples() {
        #[rustfmt::skip]
        let m = [
            1, 1, 0, 0, 0,
            0, 1, 0, 0, 1,
            0, 0, 0, 1, 1,
        ];
        let labels: Vec<bool> = m.iter().map(|&v| v == 1).collect();
        let r = grid_components(&labels, 3, 5).unwrap();
        assert_eq!(r, vec![vec![0, 1, 6], vec![9, 13, 14]]);
        assert!(grid_components(&[false; 6], 2, 3).unwrap().is_empty());
        // Diagonal contact joins regions under 8-connectivity.
        let d = [true, false, false, true];
        assert_eq!(grid_components(&d, 2, 2).unwrap().len(), 1);
    }

    #[test]
    fn grid_components_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (rows, cols) = (rng.gen_range(1..30), rng.gen_range(1..30));
            let labels: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.35)).collect();
            assert_eq!(
                grid_components(&labels, rows, cols).unwrap(),
                flood_oracle(&labels, rows, cols)
            );
        }
    }

    #[test]
    fn point_components_two_clusters() {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push([i as f64 * 0.1, 0.0, 0.0]);
        }
        for i in 0..5 {
            pts.push([10.0 + i as f64 * 0.1, 0.0, 0.0]);
        }
        pts.push([5.0, 0.0, 0.0]);
        let mut labels = vec![true; 10];
        labels.push(false);
        for conn in [PointConnectivity::Mutual, PointConnectivity::Union] {
            let r = point_components(&pts, &labels, 2, conn).unwrap();
            assert_eq!(r, vec![(0..5).collect::<Vec<_>>(), (5..10).collect()]);
        }
    }

    fn full_sweep_oracle(scores: &[f64], mask: &RegionMask, limit: f64) -> f64 {
        let labels = mask.labels();
        let n_neg = labels.iter().filter(|&&l| !l).count() as f64;
        let mut uniq = scores.to_vec();
        uniq.sort_by(|a, b| a.total_cmp(b));
        uniq.dedup();
        let mut curve = vec![(0.0, 0.0)];
        for &t in &uniq {
            let fpr = (0..scores.len())
                .filter(|&i| !labels[i] && scores[i] >= t)
                .count() as f64
                / n_neg;
            let pro = mask
                .regions()
                .iter()
                .map(|r| r.iter().filter(|&&i| scores[i] >= t).count() as f64 / r.len() as f64)
                .sum::<f64>()
                / mask.regions().len() as f64;
            curve.push((fpr, pro));
        }
        curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        clipped_area(&curve, limit) / limit
    }

    fn two_blob_mask(rows: usize, cols: usize) -> RegionMask {
        let mut labels = vec![false; rows * cols];
        for r in 2..6 {
            for c in 2..7 {
                labels[r * cols + c] = true;
            }
        }
        for r in rows - 5..rows - 2 {
            for c in cols - 4..cols - 1 {
                labels[r * cols + c] = true;
            }
        }
        RegionMask::from_grid(labels, rows, cols).unwrap()
    }

    #[test]
    fn p_pro_perfect_and_constant() {
        let mask = two_blob_mask(20, 20);
        let perfect: Vec<f64> = mask.labels().iter().map(|&l| l as u8 as f64).collect();
        for limit in [0.05, 0.3, 1.0] {
            assert!((p_pro(&perfect, &mask, limit, 200).unwrap() - 1.0).abs() < 1e-12);
        }
        let constant = vec![0.4; 400];
        assert!((p_pro(&constant, &mask, 0.3, 200).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn p_pro_undefined_cases() {
        let none = RegionMask::from_grid(vec![false; 4], 2, 2).unwrap();
        assert!(matches!(
            p_pro(&[0.0; 4], &none, 0.3, 200),
            Err(Error::UndefinedMetric(_))
        ));
        let all = RegionMask::from_grid(vec![true; 4], 2, 2).unwrap();
        assert!(matches!(
            p_pro(&[0.0; 4], &all, 0.3, 200),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn p_pro_matches_full_sweep() {
        let mask = two_blob_mask(40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let scores: Vec<f64> = mask
                .labels()
                .iter()
                .map(|&l| rng.gen::<f64>() + if l { 0.5 } else { 0.0 })
                .collect();
            let fast = p_pro(&scores, &mask, 0.3, 200).unwrap();
            let full = full_sweep_oracle(&scores, &mask, 0.3);
            assert!((fast - full).abs() < 0.005, "{fast} vs {full}");
            let exact = p_pro(&scores, &mask, 0.3, usize::MAX).unwrap();
            assert!((exact - full).abs() < 1e-12);
        }
    }

    #[test]
    fn pro_area_monotone_in_limit() {
        let mask = two_blob_mask(30, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..900).map(|_| rng.gen()).collect();
        let curve = pro_curve(&scores, &mask, 200).unwrap();
        let mut prev = 0.0;
        for i in 1..=20 {
            let a = clipped_area(&curve, i as f64 / 20.0);
            assert!(a >= prev);
            prev = a;
        }
    }
}
