//! Synthetic desk-scale scenes: one object on the plane z = 0, captured by a
//! top-down orthographic raster, with an optional geometric anomaly and exact
//! point-level labels.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::RegionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Plane,
    Sphere,
    Box,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Sphere => "sphere",
            Shape::Box => "box",
        }
    }
}

impl FromStr for Shape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plane" => Ok(Shape::Plane),
            "sphere" => Ok(Shape::Sphere),
            "box" => Ok(Shape::Box),
            _ => Err(format!("expected plane, sphere or box, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    Bump,
    Dent,
    Hole,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Bump => "bump",
            AnomalyKind::Dent => "dent",
            AnomalyKind::Hole => "hole",
        }
    }
}

/// Rim of a hole that counts as anomalous, as a multiple of its radius.
pub const HOLE_RIM: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Footprint radius in meters.
    pub radius: f64,
    /// Peak displacement along z in meters (ignored for holes).
    pub depth: f64,
}

impl AnomalySpec {
    fn extent(&self) -> f64 {
        match self.kind {
            AnomalyKind::Hole => HOLE_RIM * self.radius,
            _ => self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub base_shape: Shape,
    /// Raster entries; the grid is the smallest square holding this many.
    pub n_points: usize,
    pub anomaly: Option<AnomalySpec>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Half-width of the square field of view in meters.
    pub half_extent: f64,
    /// Object radius (sphere) or half-size (box, plane) in meters.
    pub object_size: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_shape: Shape::Sphere,
            n_points: 48 * 48,
            anomaly: None,
            noise_sigma: 0.001,
            seed: 0,
            half_extent: 0.2,
            object_size: 0.12,
        }
    }
}

impl SyntheticSpec {
    pub fn side(&self) -> usize {
        (self.n_points as f64).sqrt().ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.side() < 2 {
            return Err(Error::InvalidSpec("need at least a 2x2 raster".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !(self.object_size > 0.0 && self.object_size < self.half_extent) {
            return Err(Error::InvalidSpec(
                "object must be positive and fit inside the field of view".into(),
            ));
        }
        if let Some(a) = &self.anomaly {
            if !(a.radius >= 0.0 && a.depth >= 0.0 && a.radius.is_finite() && a.depth.is_finite()) {
                return Err(Error::InvalidSpec(
                    "anomaly size must be finite and >= 0".into(),
                ));
            }
            if a.extent() >= self.object_size {
                return Err(Error::InvalidSpec(format!(
                    "anomaly extent {} does not fit on an object of size {}",
                    a.extent(),
                    self.object_size
                )));
            }
        }
        Ok(())
    }
}

struct Scene {
    shape: Shape,
    size: f64,
    center: [f64; 2],
}

impl Scene {
    /// Object height at (x, y), or `None` on the bare ground plane.
    fn height(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let s = self.size;
        match self.shape {
            Shape::Sphere => {
                let r2 = dx * dx + dy * dy;
                (r2 < s * s).then(|| 0.3 * s + (s * s - r2).sqrt())
            }
            Shape::Box => (dx.abs() < s && dy.abs() < s).then_some(0.6 * s),
            Shape::Plane => (dx.abs() < s && dy.abs() < s).then_some(0.4 * s + 0.2 * dx),
        }
    }
}

/// Organized cloud plus ground-truth labels on the same grid.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(PointCloud, RegionMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side();
    let l = spec.half_extent;
    let jitter = 0.05 * spec.object_size;
    let scene = Scene {
        shape: spec.base_shape,
        size: spec.object_size,
        center: [
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
        ],
    };
    // Anomaly center: uniform over the part of the object top it fits on.
    let anomaly = spec.anomaly.filter(|a| a.radius > 0.0).map(|a| {
        let reach = spec.object_size - a.extent();
        let (rho, phi) = (
            reach * rng.gen::<f64>().sqrt() * 0.7,
            rng.gen_range(0.0..2.0 * PI),
        );
        let c = [
            scene.center[0] + rho * phi.cos(),
            scene.center[1] + rho * phi.sin(),
        ];
        (a, c)
    });
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

    let n = side * side;
    let mut points = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let pitch = 2.0 * l / side as f64;
    for r in 0..side {
        for c in 0..side {
            let x = -l + (c as f64 + 0.5) * pitch;
            let y = l - (r as f64 + 0.5) * pitch;
            let mut z = 0.0;
            let mut ok = true;
            let mut label = false;
            if let Some(h) = scene.height(x, y) {
                z = h;
                if let Some((a, ac)) = &anomaly {
                    let d = ((x - ac[0]).powi(2) + (y - ac[1]).powi(2)).sqrt();
                    let profile = 0.5 * (1.0 + (PI * d / a.radius).cos());
                    match a.kind {
                        AnomalyKind::Bump if d < a.radius => {
                            z += a.depth * profile;
                            label = a.depth > 0.0;
                        }
                        AnomalyKind::Dent if d < a.radius => {
                            z -= a.depth * profile;
                            label = a.depth > 0.0;
                        }
                        AnomalyKind::Hole if d < a.radius => ok = false,
                        AnomalyKind::Hole if d < HOLE_RIM * a.radius => label = true,
                        _ => {}
                    }
                }
            }
            let eps: f64 = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let p: Point3 = if ok { [x, y, z + eps] } else { [f64::NAN; 3] };
            points.push(p);
            valid.push(ok);
            labels.push(label);
        }
    }
    let cloud = PointCloud::organized(points, side, side, valid)?;
    let mask = RegionMask::from_grid(labels, side, side)?;
    Ok((cloud, mask))
}

/// Layout of a synthetic dataset suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub classes: usize,
    pub shape: Shape,
    pub train_good: usize,
    pub test_good: usize,
    /// Defective test samples per class, alternating bump and dent.
    pub test_defect: usize,
    /// Raster side length.
    pub raster: usize,
    pub noise_sigma: f64,
    /// Anomaly depth as a multiple of `noise_sigma`.
    pub depth_sigmas: f64,
    pub anomaly_radius: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            classes: 1,
            shape: Shape::Sphere,
            train_good: 10,
            test_good: 20,
            test_defect: 20,
            raster: 64,
            noise_sigma: 0.001,
            depth_sigmas: 5.0,
            anomaly_radius: 0.035,
            seed: 0,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_good == 0 {
            return Err(Error::Config(
                "synthetic suite needs at least one class and one training sample".into(),
            ));
        }
        if self.raster < 2 {
            return Err(Error::Config("synth.raster must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.depth_sigmas >= 0.0 && self.anomaly_radius >= 0.0) {
            return Err(Error::Config("synthetic sizes must be >= 0".into()));
        }
        Ok(())
    }

    fn sample_spec(&self, seed: u64, anomaly: Option<AnomalySpec>) -> SyntheticSpec {
        SyntheticSpec {
            base_shape: self.shape,
            n_points: self.raster * self.raster,
            anomaly,
            noise_sigma: self.noise_sigma,
            seed,
            ..SyntheticSpec::default()
        }
    }
}

/// Whether a sample belongs to training or test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

/// One dataset entry. `defect` is `None` for nominal samples.
#[derive(Debug, Clone)]
pub struct Sample {
    pub class: String,
    pub split: Split,
    pub defect: Option<String>,
    pub name: String,
    pub cloud: PointCloud,
    pub mask: Option<RegionMask>,
}

impl Sample {
    /// Stable identifier, unique within a dataset.
    pub fn id(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let group = self.defect.as_deref().unwrap_or("good");
        format!("{}/{split}/{group}/{}", self.class, self.name)
    }

    pub fn is_defective(&self) -> bool {
        self.defect.is_some()
    }
}

/// Builds the whole suite in memory. Sample seeds derive from the suite seed.
pub fn generate_suite(spec: &SuiteSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    let mut next = 0u64;
    let mut seed = || {
        next += 1;
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(next)
    };
    for k in 0..spec.classes {
        let class = format!("{}{k}", spec.shape.name());
        for i in 0..spec.train_good {
            let (cloud, _) = generate_synthetic(&spec.sample_spec(seed(), None))?;
            out.push(Sample {
                class: class.clone(),
                split: Split::Train,
                defect: None,
                name: format!("{i:03}"),
                cloud,
                mask: None,
            });
        }
        for i in 0..spec.test_good {
            let (cloud, mask) = generate_synthetic(&spec.sample_spec(seed(), None))?;
            out.push(Sample {
                class: class.clone(),
                split: Split::Test,
                defect: None,
                name: format!("{i:03}"),
                cloud,
                mask: Some(mask),
            });
        }
        for i in 0..spec.test_defect {
            let kind = if i % 2 == 0 {
                AnomalyKind::Bump
            } else {
                AnomalyKind::Dent
            };
            let a = AnomalySpec {
                kind,
                radius: spec.anomaly_radius,
                depth: spec.depth_sigmas * spec.noise_sigma,
            };
            let (cloud, mask) = generate_synthetic(&spec.sample_spec(seed(), Some(a)))?;
            out.push(Sample {
                class: class.clone(),
                split: Split::Test,
                defect: Some(kind.name().into()),
                name: format!("{i:03}"),
                cloud,
                mask: Some(mask),
            });
        }
    }
    Ok(out)
}
