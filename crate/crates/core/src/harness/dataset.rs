//! Dataset ingestion and export.
//!
//! Layout per class: `train/good/*`, `test/good/*`, `test/<defect>/*`, and
//! `ground_truth/<defect>/<name>.pgm` masks (0 = good, nonzero = anomalous).
//! Several classes may sit side by side under the root; a root that itself
//! holds `train/` is treated as a single class named after the directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::harness::synth::{Sample, Split};
use crate::io::Pgm;
use crate::metrics::RegionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    XyzGrid,
    PlyAscii,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::XyzGrid => "xyz",
            Format::PlyAscii => "ply",
        }
    }
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "xyz-grid" => Ok(Format::XyzGrid),
            "ply-ascii" => Ok(Format::PlyAscii),
            _ => Err(format!("expected xyz-grid or ply-ascii, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Sorted by class, split, defect group, then name.
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_xyz(fields: &[&str], path: &Path, line: usize) -> Result<Point3> {
    let mut p = [0.0; 3];
    for (k, slot) in p.iter_mut().enumerate() {
        let s = fields
            .get(k)
            .ok_or_else(|| parse_err(path, line, "expected three coordinates"))?;
        *slot = s
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad coordinate {s:?}")))?;
    }
    Ok(p)
}

/// Text grid: header `W H`, then W·H rows `x y z` in row-major order.
/// Non-finite coordinates mark invalid entries.
pub fn decode_xyz_grid(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, hl, format!("bad header {header:?}")))?;
    let [w, h] = dims[..] else {
        return Err(parse_err(
            path,
            hl,
            format!("header must be `W H`, got {header:?}"),
        ));
    };
    let mut points = Vec::with_capacity(w * h);
    for (n, l) in lines.by_ref().take(w * h) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, n, format!("expected `x y z`, got {l:?}")));
        }
        points.push(parse_xyz(&fields, path, n)?);
    }
    if points.len() != w * h {
        return Err(parse_err(
            path,
            hl,
            format!("header promises {} rows, found {}", w * h, points.len()),
        ));
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(path, n, "trailing rows after the grid"));
    }
    let valid = points.iter().map(|p| crate::cloud::is_finite(*p)).collect();
    PointCloud::organized(points, h, w, valid)
}

pub fn encode_xyz_grid(cloud: &PointCloud) -> Result<String> {
    let (h, w) = cloud.grid_shape().ok_or(Error::RequiresOrganized)?;
    let mut s = format!("{w} {h}\n");
    for i in 0..cloud.len() {
        let p = if cloud.is_valid(i) {
            cloud.point(i)
        } else {
            [f64::NAN; 3]
        };
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("string write");
    }
    Ok(s)
}

/// ASCII PLY with `x y z` vertex properties. A `comment grid W H` line makes
/// the cloud organized.
pub fn decode_ply_ascii(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut n_vertex = None;
    let mut grid = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut end = 0;
    for (n, l) in lines.by_ref() {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(parse_err(path, n, "only ascii PLY is supported")),
            ["comment", "grid", w, h] => {
                let w = w
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, n, "bad grid width"))?;
                let h = h
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, n, "bad grid height"))?;
                grid = Some((w, h));
            }
            ["comment", ..] | [] => {}
            ["element", "vertex", c] => {
                n_vertex = Some(
                    c.parse::<usize>()
                        .map_err(|_| parse_err(path, n, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                end = n;
                break;
            }
            _ => return Err(parse_err(path, n, format!("unexpected header line {l:?}"))),
        }
    }
    if end == 0 {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let count = n_vertex.ok_or_else(|| parse_err(path, end, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(path, end, format!("missing property {name}")))
    };
    let cols = [col("x")?, col("y")?, col("z")?];
    let mut points = Vec::with_capacity(count);
    for (n, l) in lines.take(count) {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < props.len() {
            return Err(parse_err(
                path,
                n,
                format!("expected {} values", props.len()),
            ));
        }
        points.push(parse_xyz(&[f[cols[0]], f[cols[1]], f[cols[2]]], path, n)?);
    }
    if points.len() != count {
        return Err(parse_err(
            path,
            end,
            format!("header promises {count} vertices, found {}", points.len()),
        ));
    }
    match grid {
        Some((w, h)) => {
            let valid = points.iter().map(|p| crate::cloud::is_finite(*p)).collect();
            PointCloud::organized(points, h, w, valid)
                .map_err(|e| parse_err(path, end, e.to_string()))
        }
        None => Ok(PointCloud::new(points)),
    }
}

pub fn encode_ply_ascii(cloud: &PointCloud) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    if let Some((h, w)) = cloud.grid_shape() {
        writeln!(s, "comment grid {w} {h}").expect("string write");
    }
    writeln!(s, "element vertex {}", cloud.len()).expect("string write");
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for i in 0..cloud.len() {
        let p = if cloud.is_valid(i) {
            cloud.point(i)
        } else {
            [f64::NAN; 3]
        };
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("string write");
    }
    s
}

pub fn read_cloud(path: &Path, format: Format) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::XyzGrid => decode_xyz_grid(&text, path),
        Format::PlyAscii => decode_ply_ascii(&text, path),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: Format) -> Result<()> {
    let text = match format {
        Format::XyzGrid => encode_xyz_grid(cloud)?,
        Format::PlyAscii => encode_ply_ascii(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path, cloud: &PointCloud) -> Result<RegionMask> {
    let pgm = Pgm::read(path)?;
    let (rows, cols) = cloud.grid_shape().ok_or(Error::RequiresOrganized)?;
    if (pgm.height, pgm.width) != (rows, cols) {
        return Err(Error::Load {
            path: path.to_path_buf(),
            msg: format!(
                "mask is {}x{} but the cloud grid is {cols}x{rows}",
                pgm.width, pgm.height
            ),
        });
    }
    let labels = pgm.pixels.iter().map(|&v| v > 0).collect();
    RegionMask::from_grid(labels, rows, cols)
}

pub fn mask_to_pgm(mask: &RegionMask, rows: usize, cols: usize) -> Pgm {
    Pgm {
        width: cols,
        height: rows,
        maxval: 255,
        pixels: mask
            .labels()
            .iter()
            .map(|&l| if l { 255 } else { 0 })
            .collect(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_group(
    dir: &Path,
    class: &str,
    split: Split,
    defect: Option<&str>,
    gt: Option<&Path>,
    format: Format,
    out: &mut Dataset,
) -> Result<()> {
    for path in sorted_entries(dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some(format.extension()) {
            continue;
        }
        let cloud = read_cloud(&path, format)?;
        let name = file_stem(&path);
        let mut mask = None;
        if let (Some(defect), Some(gt)) = (defect, gt) {
            let mpath = gt.join(defect).join(format!("{name}.pgm"));
            if mpath.is_file() {
                mask = Some(read_mask(&mpath, &cloud)?);
            } else {
                let msg = format!("no mask for {}; sample excluded from P-PRO", path.display());
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
        }
        out.samples.push(Sample {
            class: class.to_string(),
            split,
            defect: defect.map(str::to_string),
            name,
            cloud,
            mask,
        });
    }
    Ok(())
}

fn load_class(dir: &Path, class: &str, format: Format, out: &mut Dataset) -> Result<()> {
    let train = dir.join("train").join("good");
    if train.is_dir() {
        load_group(&train, class, Split::Train, None, None, format, out)?;
    }
    let test = dir.join("test");
    if test.is_dir() {
        let gt = dir.join("ground_truth");
        for group in subdirs(&test)? {
            let name = dir_name(&group);
            let defect = (name != "good").then_some(name.as_str());
            load_group(&group, class, Split::Test, defect, Some(&gt), format, out)?;
        }
    }
    Ok(())
}

pub fn load_dataset(root: &Path, format: Format) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            msg: "dataset root is not a directory".into(),
        });
    }
    let mut out = Dataset::default();
    if root.join("train").is_dir() || root.join("test").is_dir() {
        load_class(root, &dir_name(root), format, &mut out)?;
    } else {
        for class in subdirs(root)? {
            load_class(&class, &dir_name(&class), format, &mut out)?;
        }
    }
    out.samples.sort_by(|a, b| {
        (&a.class, a.split, a.defect.is_some(), &a.defect, &a.name).cmp(&(
            &b.class,
            b.split,
            b.defect.is_some(),
            &b.defect,
            &b.name,
        ))
    });
    Ok(out)
}

/// Writes samples in the layout [`load_dataset`] reads.
pub fn write_dataset(root: &Path, samples: &[Sample], format: Format) -> Result<()> {
    for s in samples {
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let group = s.defect.as_deref().unwrap_or("good");
        let dir = root.join(&s.class).join(split).join(group);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_cloud(
            &dir.join(format!("{}.{}", s.name, format.extension())),
            &s.cloud,
            format,
        )?;
        if let (Some(defect), Some(mask)) = (&s.defect, &s.mask) {
            let (rows, cols) = s.cloud.grid_shape().ok_or(Error::RequiresOrganized)?;
            let gdir = root.join(&s.class).join("ground_truth").join(defect);
            fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
            mask_to_pgm(mask, rows, cols).write(&gdir.join(format!("{}.pgm", s.name)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_grid_with_nan_row() {
        let text = "2 2\n0 0 0\n1 0 0\nnan nan nan\n1 1 0\n";
        let c = decode_xyz_grid(text, Path::new("g.xyz")).unwrap();
        assert_eq!(c.grid_shape(), Some((2, 2)));
        assert_eq!(c.num_valid(), 3);
        assert!(!c.is_valid(2));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let cases = [
            ("2 x\n", 1),
            ("1 2\n0 0 0\n0 0\n", 3),
            ("1 2\n0 0 0\n0 zero 0\n", 3),
            ("1 2\n0 0 0\n", 1),
            ("1 1\n0 0 0\n1 1 1\n", 3),
        ];
        for (text, want) in cases {
            match decode_xyz_grid(text, Path::new("g.xyz")) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn ply_round_trip_keeps_grid() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 2.0, 3.0],
            [f64::NAN; 3],
            [0.5, 0.25, -1.0],
        ];
        let c = PointCloud::organized(pts, 2, 2, vec![true; 4]).unwrap();
        let back = decode_ply_ascii(&encode_ply_ascii(&c), Path::new("c.ply")).unwrap();
        assert_eq!(back.grid_shape(), Some((2, 2)));
        assert_eq!(back.num_valid(), 3);
        assert_eq!(back.point(3), [0.5, 0.25, -1.0]);

        let free = PointCloud::new(vec![[1.0, 1.0, 1.0]]);
        let back = decode_ply_ascii(&encode_ply_ascii(&free), Path::new("c.ply")).unwrap();
        assert_eq!(back, free);
    }

    #[test]
    fn ply_extra_properties_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float nx\nproperty float x\n\
                    property float y\nproperty float z\nend_header\n9 1 2 3\n";
        let c = decode_ply_ascii(text, Path::new("c.ply")).unwrap();
        assert_eq!(c.point(0), [1.0, 2.0, 3.0]);
    }
}
