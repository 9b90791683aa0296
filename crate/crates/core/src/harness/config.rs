//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, keys are dotted (`fpfh.bins`).
//! Unknown keys and malformed values are configuration errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::feat2d::{Extractor2DConfig, ExtractorKind};
use crate::fpfh::FpfhConfig;
use crate::harness::synth::SuiteSpec;
use crate::harness::train::TrainConfig;
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    F3d,
    F2d,
    Fused,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::F3d, FeatureMode::F2d, FeatureMode::Fused];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::F3d => "f3d",
            FeatureMode::F2d => "f2d",
            FeatureMode::Fused => "fused",
        }
    }

    pub fn uses_3d(self) -> bool {
        self != FeatureMode::F2d
    }

    pub fn uses_2d(self) -> bool {
        self != FeatureMode::F3d
    }
}

impl FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f3d" => Ok(FeatureMode::F3d),
            "f2d" => Ok(FeatureMode::F2d),
            "fused" => Ok(FeatureMode::Fused),
            _ => Err(format!("expected f3d, f2d or fused, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Bank,
    Mlp,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Bank => "bank",
            Scorer::Mlp => "mlp",
        }
    }
}

impl FromStr for Scorer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bank" => Ok(Scorer::Bank),
            "mlp" => Ok(Scorer::Mlp),
            _ => Err(format!("expected bank or mlp, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub layers: usize,
    pub hidden: usize,
    pub self_loops: bool,
    /// Gradient steps for the MLP scorer's one-class proxy objective.
    pub train_iters: usize,
    pub learning_rate: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 8,
            layers: 2,
            hidden: 64,
            self_loops: false,
            train_iters: 100,
            learning_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub fpfh: FpfhConfig,
    pub n_views: usize,
    /// (H, W) of rendered depth images.
    pub image_size: (usize, usize),
    /// Eye distance as a multiple of the object's bounding radius.
    pub view_radius_scale: f64,
    pub extractor: Extractor2DConfig,
    pub graph: GraphConfig,
    pub scorer: Scorer,
    pub bank_subsample: f64,
    pub tau: f64,
    pub feature_mode: FeatureMode,
    pub fpr_limit: f64,
    pub n_thresholds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            fpfh: FpfhConfig {
                viewpoint: [0.0, 0.0, 1.0],
                ..FpfhConfig::default()
            },
            n_views: 12,
            image_size: (224, 224),
            view_radius_scale: 3.0,
            extractor: Extractor2DConfig::default(),
            graph: GraphConfig::default(),
            scorer: Scorer::Bank,
            bank_subsample: 1.0,
            tau: 0.5,
            feature_mode: FeatureMode::Fused,
            fpr_limit: crate::metrics::DEFAULT_FPR_LIMIT,
            n_thresholds: crate::metrics::DEFAULT_THRESHOLDS,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.preprocess.validate().map_err(cfg)?;
        self.fpfh.validate().map_err(cfg)?;
        self.extractor.validate()?;
        if self.n_views == 0 {
            return Err(Error::Config("n_views must be at least 1".into()));
        }
        let (h, w) = self.image_size;
        if self.extractor.kind == ExtractorKind::BuiltinPyramid {
            let stride = 1usize << self.extractor.levels;
            if h < stride || w < stride {
                return Err(Error::Config(format!(
                    "image size {h}x{w} is smaller than the extractor stride {stride}"
                )));
            }
        }
        if !(self.view_radius_scale > 1.0) {
            return Err(Error::Config("view_radius_scale must exceed 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("tau must be in [0, 1]".into()));
        }
        if !(self.bank_subsample > 0.0 && self.bank_subsample <= 1.0) {
            return Err(Error::Config("bank_subsample must be in (0, 1]".into()));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) || self.n_thresholds < 2 {
            return Err(Error::Config("bad P-PRO settings".into()));
        }
        if self.graph.k == 0 || self.graph.hidden == 0 {
            return Err(Error::Config(
                "graph k and hidden width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub occupancies: Vec<f64>,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![32, 64],
            occupancies: vec![0.01, 0.05, 0.1],
            kernel: 3,
            c_in: 4,
            c_out: 4,
            repeats: 5,
        }
    }
}

/// Everything a CLI run can be configured with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub suite: SuiteSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

struct Entries {
    path: PathBuf,
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if map
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key}",
                    path.display(),
                    n + 1
                )));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            map,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = v.parse().map_err(|e: T::Err| {
                Error::Config(format!("{}:{line}: {key}: {e}", self.path.display()))
            })?;
        }
        Ok(())
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        slot: &mut T,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<()> {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = parse(&v).map_err(|e| {
                Error::Config(format!("{}:{line}: {key}: {e}", self.path.display()))
            })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.map.into_iter().next() {
            return Err(Error::Config(format!(
                "{}:{line}: unknown key {k}",
                self.path.display()
            )));
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let v: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [h, w] => Ok((h, w)),
        _ => Err(format!("expected HxW, got {s:?}")),
    }
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = parse_list(s)?;
    v.try_into()
        .map_err(|_| format!("expected x,y,z, got {s:?}"))
}

fn parse_opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|e: std::num::ParseFloatError| e.to_string())
    }
}

fn parse_kind(s: &str) -> std::result::Result<ExtractorKind, String> {
    match s {
        "builtin" => Ok(ExtractorKind::BuiltinPyramid),
        "external" => Ok(ExtractorKind::ExternalFile),
        _ => Err(format!("expected builtin or external, got {s:?}")),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut e = Entries::parse(text, path)?;
        let mut c = RunConfig::default();
        let p = &mut c.pipeline;
        e.take("seed", &mut p.seed)?;
        e.take("n_views", &mut p.n_views)?;
        e.take_with("image_size", &mut p.image_size, parse_size)?;
        e.take("view_radius_scale", &mut p.view_radius_scale)?;
        e.take("tau", &mut p.tau)?;
        e.take("feature_mode", &mut p.feature_mode)?;
        e.take("scorer", &mut p.scorer)?;
        e.take("bank_subsample", &mut p.bank_subsample)?;
        e.take("fpr_limit", &mut p.fpr_limit)?;
        e.take("n_thresholds", &mut p.n_thresholds)?;

        let pp = &mut p.preprocess;
        e.take("preprocess.strip_width", &mut pp.strip_width_px)?;
        e.take("preprocess.ransac_iters", &mut pp.ransac_iters)?;
        e.take("preprocess.ransac_eps", &mut pp.ransac_eps)?;
        e.take("preprocess.dbscan_eps", &mut pp.dbscan_eps)?;
        e.take("preprocess.dbscan_min_pts", &mut pp.dbscan_min_pts)?;

        let f = &mut p.fpfh;
        e.take("fpfh.normal_radius", &mut f.normal_radius)?;
        e.take("fpfh.feature_radius", &mut f.feature_radius)?;
        e.take("fpfh.bins", &mut f.bins_per_angle)?;
        e.take_with("fpfh.viewpoint", &mut f.viewpoint, parse_point)?;
        e.take_with("fpfh.leaf_size", &mut f.leaf_size, parse_opt_f64)?;

        let x = &mut p.extractor;
        e.take_with("extractor.kind", &mut x.kind, parse_kind)?;
        e.take("extractor.channels", &mut x.channels)?;
        e.take("extractor.levels", &mut x.levels)?;
        e.take("extractor.seed", &mut x.seed)?;
        e.take_with("extractor.path", &mut x.path, |s| {
            Ok(Some(PathBuf::from(s)))
        })?;

        let g = &mut p.graph;
        e.take("graph.k", &mut g.k)?;
        e.take("graph.layers", &mut g.layers)?;
        e.take("graph.hidden", &mut g.hidden)?;
        e.take("graph.self_loops", &mut g.self_loops)?;
        e.take("graph.train_iters", &mut g.train_iters)?;
        e.take("graph.learning_rate", &mut g.learning_rate)?;

        let s = &mut c.suite;
        e.take("synth.classes", &mut s.classes)?;
        e.take("synth.shape", &mut s.shape)?;
        e.take("synth.train_good", &mut s.train_good)?;
        e.take("synth.test_good", &mut s.test_good)?;
        e.take("synth.test_defect", &mut s.test_defect)?;
        e.take("synth.raster", &mut s.raster)?;
        e.take("synth.noise_sigma", &mut s.noise_sigma)?;
        e.take("synth.depth_sigmas", &mut s.depth_sigmas)?;
        e.take("synth.anomaly_radius", &mut s.anomaly_radius)?;
        e.take("synth.seed", &mut s.seed)?;

        let t = &mut c.train;
        e.take("train.task", &mut t.task)?;
        e.take("train.iters", &mut t.iters)?;
        e.take("train.learning_rate", &mut t.learning_rate)?;
        e.take_with("train.lambdas", &mut t.lambdas, parse_list)?;
        e.take("train.linear", &mut t.linear)?;
        e.take("train.seed", &mut t.seed)?;

        let b = &mut c.bench;
        e.take_with("bench.sizes", &mut b.sizes, parse_list)?;
        e.take_with("bench.occupancies", &mut b.occupancies, parse_list)?;
        e.take("bench.kernel", &mut b.kernel)?;
        e.take("bench.c_in", &mut b.c_in)?;
        e.take("bench.c_out", &mut b.c_out)?;
        e.take("bench.repeats", &mut b.repeats)?;

        e.finish()?;
        c.pipeline.validate()?;
        c.suite.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// Canonical text form; parsing it back yields the same configuration.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("seed", p.seed.to_string());
        put("n_views", p.n_views.to_string());
        put(
            "image_size",
            format!("{}x{}", p.image_size.0, p.image_size.1),
        );
        put("view_radius_scale", p.view_radius_scale.to_string());
        put("tau", p.tau.to_string());
        put("feature_mode", p.feature_mode.name().into());
        put("scorer", p.scorer.name().into());
        put("bank_subsample", p.bank_subsample.to_string());
        put("fpr_limit", p.fpr_limit.to_string());
        put("n_thresholds", p.n_thresholds.to_string());
        let pp = &p.preprocess;
        put("preprocess.strip_width", pp.strip_width_px.to_string());
        put("preprocess.ransac_iters", pp.ransac_iters.to_string());
        put("preprocess.ransac_eps", pp.ransac_eps.to_string());
        put("preprocess.dbscan_eps", pp.dbscan_eps.to_string());
        put("preprocess.dbscan_min_pts", pp.dbscan_min_pts.to_string());
        let f = &p.fpfh;
        put("fpfh.normal_radius", f.normal_radius.to_string());
        put("fpfh.feature_radius", f.feature_radius.to_string());
        put("fpfh.bins", f.bins_per_angle.to_string());
        put(
            "fpfh.viewpoint",
            format!("{},{},{}", f.viewpoint[0], f.viewpoint[1], f.viewpoint[2]),
        );
        put(
            "fpfh.leaf_size",
            f.leaf_size.map_or("none".into(), |v| v.to_string()),
        );
        let x = &p.extractor;
        put(
            "extractor.kind",
            match x.kind {
                ExtractorKind::BuiltinPyramid => "builtin".into(),
                ExtractorKind::ExternalFile => "external".into(),
            },
        );
        put("extractor.channels", x.channels.to_string());
        put("extractor.levels", x.levels.to_string());
        put("extractor.seed", x.seed.to_string());
        if let Some(path) = &x.path {
            put("extractor.path", path.display().to_string());
        }
        let g = &p.graph;
        put("graph.k", g.k.to_string());
        put("graph.layers", g.layers.to_string());
        put("graph.hidden", g.hidden.to_string());
        put("graph.self_loops", g.self_loops.to_string());
        put("graph.train_iters", g.train_iters.to_string());
        put("graph.learning_rate", g.learning_rate.to_string());
        let su = &self.suite;
        put("synth.classes", su.classes.to_string());
        put("synth.shape", su.shape.name().into());
        put("synth.train_good", su.train_good.to_string());
        put("synth.test_good", su.test_good.to_string());
        put("synth.test_defect", su.test_defect.to_string());
        put("synth.raster", su.raster.to_string());
        put("synth.noise_sigma", su.noise_sigma.to_string());
        put("synth.depth_sigmas", su.depth_sigmas.to_string());
        put("synth.anomaly_radius", su.anomaly_radius.to_string());
        put("synth.seed", su.seed.to_string());
        let t = &self.train;
        put("train.task", t.task.name().into());
        put("train.iters", t.iters.to_string());
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.lambdas", join(&t.lambdas));
        put("train.linear", t.linear.to_string());
        put("train.seed", t.seed.to_string());
        let b = &self.bench;
        put("bench.sizes", join(&b.sizes));
        put("bench.occupancies", join(&b.occupancies));
        put("bench.kernel", b.kernel.to_string());
        put("bench.c_in", b.c_in.to_string());
        put("bench.c_out", b.c_out.to_string());
        put("bench.repeats", b.repeats.to_string());
        s
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
