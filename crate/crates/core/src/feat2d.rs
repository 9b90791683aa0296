//! 2D feature extraction from depth images.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::multiview::DepthImage;

/// Row-major `[y][x][c]` feature field of size `h × w × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureField {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn from_vec(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::Shape(format!(
                "{h}x{w}x{d} field needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.d;
        &self.data[o..o + self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtractorKind {
    #[default]
    BuiltinPyramid,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor2DConfig {
    pub kind: ExtractorKind,
    pub channels: usize,
    pub levels: usize,
    pub seed: u64,
    /// Directory holding `<sample_id>.vgf` files for the external kind.
    pub path: Option<PathBuf>,
}

impl Default for Extractor2DConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::BuiltinPyramid,
            channels: 64,
            levels: 3,
            seed: 0,
            path: None,
        }
    }
}

impl Extractor2DConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExtractorKind::BuiltinPyramid => {
                if self.channels == 0 || self.levels == 0 {
                    return Err(Error::Config(
                        "builtin extractor needs positive channels and levels".into(),
                    ));
                }
            }
            ExtractorKind::ExternalFile => {
                if self.path.is_none() {
                    return Err(Error::Config("external extractor needs a path".into()));
                }
            }
        }
        Ok(())
    }
}

/// Depth scaled to [0, 1] over finite pixels, empty pixels set to 0.
pub fn normalize_depth(image: &DepthImage) -> FeatureField {
    let finite = image.depth().iter().copied().filter(|d| d.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| {
        (a.min(d), b.max(d))
    });
    let span = hi - lo;
    let data = image
        .depth()
        .iter()
        .map(|&d| {
            if !d.is_finite() {
                0.0
            } else if span > 0.0 {
                (d - lo) / span
            } else {
                // A flat image carries no relief; keep it distinguishable from empty.
                1.0
            }
        })
        .collect();
    FeatureField {
        h: image.height(),
        w: image.width(),
        d: 1,
        data,
    }
}

/// Same-size 3×3 cross-correlation with zero padding.
/// `weights` layout is `[co][ci][ky][kx]`.
pub fn conv3x3(input: &FeatureField, weights: &[f64], c_out: usize) -> Result<FeatureField> {
    let (h, w, c_in) = (input.h, input.w, input.d);
    if weights.len() != c_out * c_in * 9 {
        return Err(Error::Shape(format!(
            "3x3 kernel {c_in}->{c_out} needs {} weights, got {}",
            c_out * c_in * 9,
            weights.len()
        )));
    }
    let mut out = FeatureField::zeros(h, w, c_out);
    if h == 0 || w == 0 || c_out == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(w * c_out)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let o = &mut row[x * c_out..(x + 1) * c_out];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let px = input.at(sy as usize, sx as usize);
                        for (co, acc) in o.iter_mut().enumerate() {
                            let base = co * c_in * 9 + ky * 3 + kx;
                            for (ci, &v) in px.iter().enumerate() {
                                *acc += weights[base + ci * 9] * v;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

fn relu(f: &mut FeatureField) {
    for v in &mut f.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(f: &FeatureField) -> FeatureField {
    let (h, w, d) = (f.h / 2, f.w / 2, f.d);
    let mut out = FeatureField::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * d;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                for (c, &v) in f.at(2 * y + dy, 2 * x + dx).iter().enumerate() {
                    out.data[o + c] += 0.25 * v;
                }
            }
        }
    }
    out
}

/// Seeded random convolutional pyramid with fixed weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    channels: usize,
    stages: Vec<Vec<f64>>,
}

impl Pyramid {
    /// Weights drawn N(0, 1) and scaled by `1 / sqrt(9 · c_in)`.
    pub fn new(channels: usize, levels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..levels)
            .map(|l| {
                let c_in = if l == 0 { 1 } else { channels };
                let scale = 1.0 / ((9 * c_in) as f64).sqrt();
                (0..channels * c_in * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect()
            })
            .collect();
        Self { channels, stages }
    }

    /// Pyramid from explicit `[co][ci][ky][kx]` stage weights.
    pub fn from_weights(channels: usize, stages: Vec<Vec<f64>>) -> Result<Self> {
        for (l, s) in stages.iter().enumerate() {
            let c_in = if l == 0 { 1 } else { channels };
            if s.len() != channels * c_in * 9 {
                return Err(Error::Shape(format!("stage {l} has {} weights", s.len())));
            }
        }
        Ok(Self { channels, stages })
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    /// Runs the stages on a one-channel field.
    pub fn apply(&self, input: &FeatureField) -> Result<FeatureField> {
        let mut x = input.clone();
        for s in &self.stages {
            x = conv3x3(&x, s, self.channels)?;
            relu(&mut x);
            x = avg_pool2(&x);
        }
        Ok(x)
    }

    pub fn extract(&self, image: &DepthImage) -> Result<FeatureField> {
        if image.height() < self.stride() || image.width() < self.stride() {
            return Err(Error::DegenerateInput(format!(
                "{}x{} image is smaller than the pyramid stride {}",
                image.height(),
                image.width(),
                self.stride()
            )));
        }
        self.apply(&normalize_depth(image))
    }
}

/// Feature source for rendered views.
#[derive(Debug, Clone)]
pub enum Extractor {
    Builtin(Pyramid),
    /// Fields are read from `<dir>/<sample_id>.vgf`.
    External {
        dir: PathBuf,
    },
}

impl Extractor {
    pub fn from_config(cfg: &Extractor2DConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ExtractorKind::BuiltinPyramid => {
                Extractor::Builtin(Pyramid::new(cfg.channels, cfg.levels, cfg.seed))
            }
            ExtractorKind::ExternalFile => Extractor::External {
                dir: cfg.path.clone().expect("validated"),
            },
        })
    }

    /// Feature fields for all views of one sample, in view order.
    pub fn extract_views(
        &self,
        sample_id: &str,
        images: &[DepthImage],
    ) -> Result<Vec<FeatureField>> {
        match self {
            Extractor::Builtin(p) => images.par_iter().map(|im| p.extract(im)).collect(),
            Extractor::External { dir } => {
                let path = dir.join(format!("{sample_id}.vgf"));
                let fields = load_external(&path, images.len())?;
                for (f, im) in fields.iter().zip(images) {
                    check_alignment(f, im.height(), im.width()).map_err(|e| Error::Load {
                        path: path.clone(),
                        msg: e.to_string(),
                    })?;
                }
                Ok(fields)
            }
        }
    }
}

fn load_external(path: &Path, n_views: usize) -> Result<Vec<FeatureField>> {
    let fields = crate::io::read_vgf1(path)?;
    if fields.len() < n_views {
        return Err(Error::Load {
            path: path.to_path_buf(),
            msg: format!(
                "file has {} views, pipeline renders {n_views}",
                fields.len()
            ),
        });
    }
    Ok(fields.into_iter().take(n_views).collect())
}

/// Feature field dimensions must divide the image dimensions.
pub fn check_alignment(field: &FeatureField, h: usize, w: usize) -> Result<()> {
    if field.h == 0 || field.w == 0 || !h.is_multiple_of(field.h) || !w.is_multiple_of(field.w) {
        return Err(Error::Shape(format!(
            "{}x{} feature field does not tile a {h}x{w} image",
            field.h, field.w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn depth_image(h: usize, w: usize, depth: Vec<f64>) -> DepthImage {
        let index = depth
            .iter()
            .enumerate()
            .map(|(i, d)| if d.is_finite() { i as i64 } else { -1 })
            .collect();
        DepthImage::from_parts(h, w, depth, index).unwrap()
    }

    #[test]
    fn empty_image_gives_zero_field() {
        let p = Pyramid::new(8, 3, 1);
        let im = depth_image(16, 16, vec![f64::INFINITY; 256]);
        let f = p.extract(&im).unwrap();
        assert_eq!((f.h(), f.w(), f.d()), (2, 2, 8));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.5..1.5)).collect();
        let im = depth_image(64, 64, d);
        let a = Pyramid::new(8, 3, 42).extract(&im).unwrap();
        let b = Pyramid::new(8, 3, 42).extract(&im).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Pyramid::new(8, 3, 43).extract(&im).unwrap());
    }

    #[test]
    fn ramp_matches_hand_convolution() {
        // Ramp 0..15 over a 4x4 image, normalized to k/15.
        let im = depth_image(4, 4, (0..16).map(|k| k as f64).collect());
        let kernel = vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0];
        let pre = conv3x3(&normalize_depth(&im), &kernel, 1).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let right = if x < 3 { (y * 4 + x + 1) as f64 } else { 0.0 };
                let e = ((y * 4 + x) as f64 + 2.0 * right) / 15.0;
                assert!((pre.at(y, x)[0] - e).abs() < 1e-12);
            }
        }
        let p = Pyramid::from_weights(1, vec![kernel]).unwrap();
        let f = p.extract(&im).unwrap();
        let e00 = (pre.at(0, 0)[0] + pre.at(0, 1)[0] + pre.at(1, 0)[0] + pre.at(1, 1)[0]) / 4.0;
        assert!((f.at(0, 0)[0] - e00).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, ci, co) = (7, 5, 3, 2);
        let input =
            FeatureField::from_vec(h, w, ci, (0..h * w * ci).map(|_| rng.gen()).collect()).unwrap();
        let wts: Vec<f64> = (0..co * ci * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv3x3(&input, &wts, co).unwrap();
        for y in 0..h as isize {
            for x in 0..w as isize {
                for o in 0..co {
                    let mut e = 0.0;
                    for i in 0..ci {
                        for dy in -1..=1isize {
                            for dx in -1..=1isize {
                                let (sy, sx) = (y + dy, x + dx);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    e += wts[o * ci * 9 + i * 9 + ((dy + 1) * 3 + dx + 1) as usize]
                                        * input.at(sy as usize, sx as usize)[i];
                                }
                            }
                        }
                    }
                    assert!((out.at(y as usize, x as usize)[o] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn positive_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Pyramid::new(6, 2, 5);
        let x = FeatureField::from_vec(16, 16, 1, (0..256).map(|_| rng.gen()).collect()).unwrap();
        let alpha = 2.5;
        let scaled =
            FeatureField::from_vec(16, 16, 1, x.data().iter().map(|v| v * alpha).collect())
                .unwrap();
        let a = p.apply(&x).unwrap();
        let b = p.apply(&scaled).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((alpha * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = Extractor2DConfig::default();
        assert!(c.validate().is_ok());
        c.kind = ExtractorKind::ExternalFile;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn external_shape_mismatch_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureField::zeros(3, 3, 2);
        crate::io::write_vgf1(&dir.path().join("s.vgf"), &[f]).unwrap();
        let ex = Extractor::External {
            dir: dir.path().to_path_buf(),
        };
        let im = depth_image(8, 8, vec![1.0; 64]);
        assert!(matches!(
            ex.extract_views("s", std::slice::from_ref(&im)),
            Err(Error::Load { .. })
        ));
        assert!(matches!(
            ex.extract_views("missing", &[im]),
            Err(Error::Io { .. })
        ));
    }
}
