//! End-to-end experiment runner: features, scoring, metrics and reports.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{FeatureMatrix, PointCloud};
use crate::detect::{bank_build, bank_score, concat_features, AnomalyResult, MemoryBank};
use crate::error::{Error, Result};
use crate::feat2d::Extractor;
use crate::fpfh::fpfh_downsampled;
use crate::graph_net::{build_graph, normalize_adjacency, GraphNet, Head, NormAdjacency};
use crate::harness::config::{FeatureMode, PipelineConfig, Scorer};
use crate::harness::synth::{Sample, Split};
use crate::metrics::{auroc, p_pro};
use crate::multiview::{
    fuse_views, make_views, render_depth, sample_point_features, DepthImage, ViewPose,
    OCCLUSION_PITCHES,
};
use crate::preprocess::remove_background;

/// Foreground cloud and per-point features of one sample.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    pub id: String,
    /// Entries in the input cloud.
    pub n_entries: usize,
    /// Input index of every foreground point.
    pub kept: Vec<usize>,
    pub foreground: PointCloud,
    pub f3d: Option<FeatureMatrix>,
    pub f2d: Option<FeatureMatrix>,
}

/// Poses and depth images of the foreground cloud.
pub fn render_views(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
) -> Result<Vec<(ViewPose, DepthImage)>> {
    let poses = make_views(cloud, cfg.n_views, cfg.view_radius_scale, cfg.image_size)?;
    poses
        .into_iter()
        .map(|p| Ok((p.clone(), render_depth(cloud, &p)?)))
        .collect()
}

/// Multi-view 2D features sampled back onto the points and fused.
pub fn multiview_features(
    id: &str,
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    extractor: &Extractor,
) -> Result<FeatureMatrix> {
    let views = render_views(cloud, cfg)?;
    let images: Vec<DepthImage> = views.iter().map(|(_, im)| im.clone()).collect();
    let fields = extractor.extract_views(id, &images)?;
    let samples = views
        .iter()
        .zip(&fields)
        .map(|((pose, im), field)| {
            sample_point_features(
                cloud,
                pose,
                field,
                im,
                OCCLUSION_PITCHES * pose.pixel_pitch(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_views(&samples)
}

pub fn sample_features(
    sample: &Sample,
    cfg: &PipelineConfig,
    extractor: &Extractor,
) -> Result<SampleFeatures> {
    let id = sample.id();
    let removal = remove_background(&sample.cloud, &cfg.preprocess)
        .map_err(|e| e.in_stage("preprocess", &id))?;
    let fg = removal.cloud;
    let f3d = if cfg.feature_mode.uses_3d() {
        Some(fpfh_downsampled(&fg, &cfg.fpfh).map_err(|e| e.in_stage("fpfh", &id))?)
    } else {
        None
    };
    let f2d = if cfg.feature_mode.uses_2d() {
        Some(
            multiview_features(&id, &fg, cfg, extractor)
                .map_err(|e| e.in_stage("multiview", &id))?,
        )
    } else {
        None
    };
    Ok(SampleFeatures {
        n_entries: sample.cloud.len(),
        kept: removal.kept,
        foreground: fg,
        f3d,
        f2d,
        id,
    })
}

/// Per-block divisors that give each feature block unit mean row norm on
/// the training rows. Blocks that are all zero keep a divisor of 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockScale {
    pub s3d: f64,
    pub s2d: f64,
}

fn mean_row_norm<'a>(mats: impl Iterator<Item = &'a FeatureMatrix>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for m in mats {
        for r in m.rows() {
            sum += r.iter().map(|v| v * v).sum::<f64>().sqrt();
            n += 1;
        }
    }
    if n == 0 || sum == 0.0 {
        1.0
    } else {
        sum / n as f64
    }
}

impl BlockScale {
    pub fn fit(train: &[&SampleFeatures]) -> Self {
        Self {
            s3d: mean_row_norm(train.iter().filter_map(|s| s.f3d.as_ref())),
            s2d: mean_row_norm(train.iter().filter_map(|s| s.f2d.as_ref())),
        }
    }

    /// Scaled and concatenated final features.
    pub fn apply(&self, s: &SampleFeatures) -> Result<FeatureMatrix> {
        let scaled = |m: &FeatureMatrix, by: f64| {
            let mut m = m.clone();
            m.data_mut().iter_mut().for_each(|v| *v /= by);
            m
        };
        match (&s.f3d, &s.f2d) {
            (Some(a), Some(b)) => concat_features(&scaled(a, self.s3d), &scaled(b, self.s2d)),
            (Some(a), None) => Ok(scaled(a, self.s3d)),
            (None, Some(b)) => Ok(scaled(b, self.s2d)),
            (None, None) => Err(Error::InvalidArgument("no feature blocks computed".into())),
        }
    }
}

/// Per-class trained scorer.
enum ClassScorer {
    Bank(MemoryBank),
    Mlp(GraphNet),
}

fn adjacency(s: &SampleFeatures, cfg: &PipelineConfig) -> Result<NormAdjacency> {
    let g = build_graph(&s.foreground, cfg.graph.k, cfg.graph.self_loops)?;
    normalize_adjacency(&g)
}

/// One-class proxy for the MLP scorer: nominal nodes target 0, nodes of a
/// seeded neighborhood whose features were perturbed target 1.
fn train_mlp_scorer(
    train: &[(&SampleFeatures, FeatureMatrix)],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<GraphNet> {
    let d = train
        .first()
        .map(|(_, f)| f.n_cols())
        .ok_or(Error::EmptyBank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(train.len());
    for (s, f) in train {
        let adj = adjacency(s, cfg).map_err(|e| e.in_stage("graph", &s.id))?;
        let n = f.n_rows();
        let mut x = f.clone();
        let mut target = vec![0.0; n];
        let centre = rng.gen_range(0..n);
        let mut patch = vec![centre];
        for (j, _) in adj.row(centre) {
            patch.push(j);
        }
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if patch.contains(&(i / d)) {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        for &i in &patch {
            target[i] = 1.0;
        }
        tasks.push((x, adj, target));
    }
    let mut net = GraphNet::random(d, cfg.graph.hidden, cfg.graph.layers, Head::PerNode, seed)?;
    let lr = cfg.graph.learning_rate;
    for _ in 0..cfg.graph.train_iters {
        for (x, adj, target) in &tasks {
            let out = net.forward(x, adj)?;
            let n = out.len() as f64;
            let g: Vec<f64> = out.iter().zip(target).map(|(o, t)| (o - t) / n).collect();
            let grads = net.backward(&g)?;
            net.for_each_param_mut(&grads, |w, dw| *w -= lr * dw);
        }
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    /// `None` when the test split lacks nominal or defective samples.
    pub i_roc: Option<f64>,
    /// Mean over defective samples with a mask.
    pub p_pro: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_defective: usize,
    pub n_masked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub feature_mode: &'static str,
    pub scorer: &'static str,
    pub n_views: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub mean_i_roc: Option<f64>,
    pub mean_p_pro: Option<f64>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    /// Test-sample results in dataset order.
    pub results: Vec<AnomalyResult>,
}

/// Lifts foreground scores to every input entry; the rest get the sample's
/// lowest foreground score.
fn lift_scores(s: &SampleFeatures, fg: &[f64]) -> Vec<f64> {
    let floor = fg.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = vec![floor; s.n_entries];
    for (&i, &v) in s.kept.iter().zip(fg) {
        out[i] = v;
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs the full pipeline over `samples` (training and test, any classes).
pub fn run_pipeline(cfg: &PipelineConfig, samples: &[Sample]) -> Result<PipelineOutput> {
    cfg.validate()?;
    let extractor = Extractor::from_config(&cfg.extractor)?;
    let feats: Vec<SampleFeatures> = samples
        .par_iter()
        .map(|s| sample_features(s, cfg, &extractor))
        .collect::<Result<_>>()?;

    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        classes.entry(s.class.as_str()).or_default().push(i);
    }

    let mut per_class = BTreeMap::new();
    let mut results = Vec::new();
    for (ci, (class, idx)) in classes.iter().enumerate() {
        let (train, test): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| samples[i].split == Split::Train);
        let train_feats: Vec<&SampleFeatures> = train.iter().map(|&i| &feats[i]).collect();
        let scale = BlockScale::fit(&train_feats);
        let finals = |ids: &[usize]| -> Result<Vec<FeatureMatrix>> {
            ids.par_iter().map(|&i| scale.apply(&feats[i])).collect()
        };
        let train_final = finals(&train)?;
        let class_seed = cfg.seed.wrapping_add(ci as u64);
        let scorer = match cfg.scorer {
            Scorer::Bank => {
                let nominal: Vec<(String, FeatureMatrix)> = train
                    .iter()
                    .zip(train_final)
                    .map(|(&i, f)| (feats[i].id.clone(), f))
                    .collect();
                ClassScorer::Bank(
                    bank_build(&nominal, cfg.bank_subsample, class_seed)
                        .map_err(|e| e.in_stage("memory bank", *class))?,
                )
            }
            Scorer::Mlp => {
                let pairs: Vec<(&SampleFeatures, FeatureMatrix)> =
                    train.iter().map(|&i| &feats[i]).zip(train_final).collect();
                ClassScorer::Mlp(
                    train_mlp_scorer(&pairs, cfg, class_seed)
                        .map_err(|e| e.in_stage("mlp scorer", *class))?,
                )
            }
        };

        let test_final = finals(&test)?;
        let class_results: Vec<AnomalyResult> = test
            .par_iter()
            .zip(test_final.par_iter())
            .map(|(&i, f)| {
                let s = &feats[i];
                let fg = match &scorer {
                    ClassScorer::Bank(bank) => bank_score(f, bank),
                    ClassScorer::Mlp(net) => {
                        adjacency(s, cfg).and_then(|adj| net.evaluate(f, &adj))
                    }
                }
                .map_err(|e| e.in_stage("scoring", &s.id))?;
                AnomalyResult::from_raw(s.id.clone(), lift_scores(s, &fg), cfg.tau)
                    .map_err(|e| e.in_stage("detection", &s.id))
            })
            .collect::<Result<_>>()?;

        let labels: Vec<bool> = test.iter().map(|&i| samples[i].is_defective()).collect();
        let image_scores: Vec<f64> = class_results.iter().map(|r| r.image_score).collect();
        let i_roc = match auroc(&image_scores, &labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e.in_stage("evaluation", *class)),
        };
        let mut pros = Vec::new();
        for (&i, r) in test.iter().zip(&class_results) {
            let s = &samples[i];
            if let (true, Some(mask)) = (s.is_defective(), &s.mask) {
                if mask.regions().is_empty() {
                    continue;
                }
                pros.push(
                    p_pro(&r.raw_scores, mask, cfg.fpr_limit, cfg.n_thresholds)
                        .map_err(|e| e.in_stage("evaluation", s.id()))?,
                );
            }
        }
        per_class.insert(
            class.to_string(),
            ClassMetrics {
                i_roc,
                p_pro: mean(&pros),
                n_train: train.len(),
                n_test: test.len(),
                n_defective: labels.iter().filter(|&&l| l).count(),
                n_masked: pros.len(),
            },
        );
        results.extend(class_results);
    }

    let i_rocs: Vec<f64> = per_class.values().filter_map(|m| m.i_roc).collect();
    let p_pros: Vec<f64> = per_class.values().filter_map(|m| m.p_pro).collect();
    Ok(PipelineOutput {
        report: Report {
            feature_mode: cfg.feature_mode.name(),
            scorer: cfg.scorer.name(),
            n_views: cfg.n_views,
            per_class,
            mean_i_roc: mean(&i_rocs),
            mean_p_pro: mean(&p_pros),
        },
        results,
    })
}

/// Axis of an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    NViews,
    FeatureMode,
}

/// View counts of the n_views sweep.
pub const N_VIEWS_SWEEP: [usize; 10] = [1, 3, 6, 9, 12, 15, 18, 21, 24, 27];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis_value: String,
    pub i_roc: Option<f64>,
    pub p_pro: Option<f64>,
}

/// One pipeline run per axis value with the shared seed.
pub fn run_ablation(
    cfg: &PipelineConfig,
    samples: &[Sample],
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, PipelineConfig)> = match axis {
        AblationAxis::NViews => N_VIEWS_SWEEP
            .iter()
            .map(|&n| {
                (
                    n.to_string(),
                    PipelineConfig {
                        n_views: n,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::FeatureMode => FeatureMode::ALL
            .iter()
            .map(|&m| {
                (
                    m.name().to_string(),
                    PipelineConfig {
                        feature_mode: m,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
    };
    variants
        .into_iter()
        .map(|(v, c)| {
            let out = run_pipeline(&c, samples)?;
            Ok(AblationRow {
                axis_value: v,
                i_roc: out.report.mean_i_roc,
                p_pro: out.report.mean_p_pro,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis_value,i_roc,p_pro\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            r.axis_value,
            fmt_opt(r.i_roc),
            fmt_opt(r.p_pro)
        ));
    }
    s
}
