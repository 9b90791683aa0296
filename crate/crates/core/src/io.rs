//! Binary containers and PGM images.
//!
//! VGF1 feature file: magic `VGF1`, then `n_views, H', W', d` as little-endian
//! u32, then `n_views` row-major `[y][x][c]` f32 fields.
//!
//! VGK1 parameter file: magic `VGK1`, u32 layer count, then per layer a u32
//! rank, `rank` u32 dims, `prod(dims)` f32 weights, a u32 bias length and that
//! many f32 biases. All little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feat2d::FeatureField;

const VGF_MAGIC: &[u8; 4] = b"VGF1";
const VGK_MAGIC: &[u8; 4] = b"VGK1";

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| load_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| load_err(self.path, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(load_err(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes views that all share one shape.
pub fn encode_vgf1(views: &[FeatureField]) -> Result<Vec<u8>> {
    let (h, w, d) = views.first().map_or((0, 0, 0), |f| (f.h(), f.w(), f.d()));
    if views.iter().any(|f| (f.h(), f.w(), f.d()) != (h, w, d)) {
        return Err(Error::Shape(
            "all views in a VGF1 file must share a shape".into(),
        ));
    }
    let mut out = Vec::with_capacity(20 + views.len() * h * w * d * 4);
    out.extend_from_slice(VGF_MAGIC);
    for v in [views.len(), h, w, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in views {
        for &x in f.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vgf1(bytes: &[u8], path: &Path) -> Result<Vec<FeatureField>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != VGF_MAGIC {
        return Err(load_err(path, "bad magic, expected VGF1"));
    }
    let n = r.u32()? as usize;
    let (h, w, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut views = Vec::with_capacity(n);
    for _ in 0..n {
        let data: Vec<f64> = r.f32s(h * w * d)?.into_iter().map(f64::from).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(load_err(path, "non-finite feature value"));
        }
        views.push(FeatureField::from_vec(h, w, d, data)?);
    }
    r.finish()?;
    Ok(views)
}

pub fn write_vgf1(path: &Path, views: &[FeatureField]) -> Result<()> {
    write_file(path, &encode_vgf1(views)?)
}

pub fn read_vgf1(path: &Path) -> Result<Vec<FeatureField>> {
    decode_vgf1(&read_file(path)?, path)
}

/// One parameter tensor with its bias, as stored in a VGK1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn encode_vgk1(layers: &[ParamTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(VGK_MAGIC);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        if l.dims.iter().product::<usize>() != l.weights.len() {
            return Err(Error::Shape(format!(
                "dims {:?} do not match {} weights",
                l.dims,
                l.weights.len()
            )));
        }
        out.extend_from_slice(&(l.dims.len() as u32).to_le_bytes());
        for &d in &l.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &l.weights {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.extend_from_slice(&(l.bias.len() as u32).to_le_bytes());
        for &x in &l.bias {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vgk1(bytes: &[u8], path: &Path) -> Result<Vec<ParamTensor>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != VGK_MAGIC {
        return Err(load_err(path, "bad magic, expected VGK1"));
    }
    let n = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n {
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let size = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| load_err(path, "tensor size overflow"))?;
        let weights = r.f32s(size)?.into_iter().map(f64::from).collect();
        let nb = r.u32()? as usize;
        let bias = r.f32s(nb)?.into_iter().map(f64::from).collect();
        layers.push(ParamTensor {
            dims,
            weights,
            bias,
        });
    }
    r.finish()?;
    Ok(layers)
}

pub fn write_vgk1(path: &Path, layers: &[ParamTensor]) -> Result<()> {
    write_file(path, &encode_vgk1(layers)?)
}

pub fn read_vgk1(path: &Path) -> Result<Vec<ParamTensor>> {
    decode_vgk1(&read_file(path)?, path)
}

/// Grayscale image with `maxval` up to 65535.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write!(out, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval).expect("vec write");
        for &p in &self.pixels {
            if self.maxval < 256 {
                out.push(p as u8);
            } else {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }

    /// Parses binary (P5) or ASCII (P2) PGM.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(load_err(path, "unexpected end of PGM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |s: String| -> Result<usize> {
            s.parse()
                .map_err(|_| load_err(path, format!("bad PGM number {s:?}")))
        };
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(load_err(path, format!("bad PGM maxval {maxval}")));
        }
        let n = width * height;
        let pixels = match magic.as_str() {
            "P5" => {
                let body = &bytes[(pos + 1).min(bytes.len())..];
                let bpp = if maxval < 256 { 1 } else { 2 };
                if body.len() < n * bpp {
                    return Err(load_err(path, "truncated PGM raster"));
                }
                if bpp == 1 {
                    body[..n].iter().map(|&b| b as u16).collect()
                } else {
                    body[..2 * n]
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]))
                        .collect()
                }
            }
            "P2" => (0..n)
                .map(|_| token().and_then(num).map(|v| v as u16))
                .collect::<Result<Vec<_>>>()?,
            other => return Err(load_err(path, format!("unsupported PGM magic {other:?}"))),
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}
