//! File formats: binary DtN and volume containers, planar slices as CSV grids
//! and PNG images.
//!
//! All binary numbers are little endian.
//!
//! DtN container: `CGODTNM1`, degree `u32`, kind `u8`, Sobolev index `f64`,
//! node count `u32`, then the node matrix column-major as `(re, im)` pairs.
//!
//! Volume container: `CGOVOL01`, dims `3 × u32`, spacing `3 × f64`,
//! origin `3 × f64`, complex flag `u8`, then values with the last axis fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::dtn::{DtnKind, DtnMatrix, DATA_SOBOLEV_INDEX};
use crate::error::{CgoError, Result};
use crate::scattering::{ScatteringGrid, VolumeGrid};
use crate::sigma::SigmaField;

const DTN_MAGIC: &[u8; 8] = b"CGODTNM1";
const VOLUME_MAGIC: &[u8; 8] = b"CGOVOL01";

fn fmt_err(what: &'static str) -> impl Fn(std::io::Error) -> CgoError {
    move |e| CgoError::Format {
        what,
        reason: e.to_string(),
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CgoError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CgoError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CgoError::io(path, e))
}

pub fn write_dtn(q: &DtnMatrix, mut out: impl Write) -> std::io::Result<()> {
    let n = q.entries.nrows();
    out.write_all(DTN_MAGIC)?;
    out.write_all(&(q.degree as u32).to_le_bytes())?;
    out.write_all(&[q.kind.code()])?;
    out.write_all(&DATA_SOBOLEV_INDEX.to_le_bytes())?;
    out.write_all(&(n as u32).to_le_bytes())?;
    for v in q.entries.iter() {
        out.write_all(&v.re.to_le_bytes())?;
        out.write_all(&v.im.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_dtn(mut input: impl Read) -> Result<DtnMatrix> {
    let e = fmt_err("DtN file");
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(&e)?;
    if &magic != DTN_MAGIC {
        return Err(CgoError::Format {
            what: "DtN file",
            reason: "bad magic".into(),
        });
    }
    let degree = read_u32(&mut input).map_err(&e)? as usize;
    let kind = DtnKind::from_code(read_u8(&mut input).map_err(&e)?).ok_or_else(|| CgoError::Format {
        what: "DtN file",
        reason: "unknown matrix kind".into(),
    })?;
    let _s = read_f64(&mut input).map_err(&e)?;
    let n = read_u32(&mut input).map_err(&e)? as usize;
    if n != 2 * (degree + 1) * (degree + 1) {
        return Err(CgoError::Format {
            what: "DtN file",
            reason: format!("{n} nodes do not match degree {degree}"),
        });
    }
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        let re = read_f64(&mut input).map_err(&e)?;
        let im = read_f64(&mut input).map_err(&e)?;
        data.push(Complex64::new(re, im));
    }
    DtnMatrix::new(degree, kind, DMatrix::from_vec(n, n, data))
}

pub fn save_dtn(q: &DtnMatrix, path: &Path) -> Result<()> {
    write_dtn(q, create(path)?).map_err(|e| CgoError::io(path, e))
}

pub fn load_dtn(path: &Path) -> Result<DtnMatrix> {
    read_dtn(open(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Values on a uniform box lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: VolumeData,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]
    }

    /// Real part at a lattice index.
    pub fn real_at(&self, i: [usize; 3]) -> f64 {
        let k = self.index(i);
        match &self.data {
            VolumeData::Real(v) => v[k],
            VolumeData::Complex(v) => v[k].re,
        }
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.coordinate(axis, self.dims[axis] - 1)
    }

    pub fn from_scattering(t: &ScatteringGrid) -> Self {
        let h = t.spacing();
        Self {
            dims: [t.k; 3],
            spacing: [h; 3],
            origin: [-t.m; 3],
            data: VolumeData::Complex(t.values.clone()),
        }
    }

    pub fn from_potential(q: &VolumeGrid) -> Self {
        let h = q.spacing();
        Self {
            dims: [q.k; 3],
            spacing: [h; 3],
            origin: [-q.x_max; 3],
            data: VolumeData::Complex(q.values.clone()),
        }
    }

    /// `γ` on the full mesh lattice, 1 outside the unknowns.
    pub fn from_conductivity(field: &SigmaField) -> Self {
        let g = &field.grid;
        let h = g.spacing();
        Self {
            dims: [g.side(); 3],
            spacing: [h; 3],
            origin: [-1.0; 3],
            data: VolumeData::Real(field.gamma_lattice()),
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(VOLUME_MAGIC)?;
        for d in self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.spacing.iter().chain(&self.origin) {
            out.write_all(&v.to_le_bytes())?;
        }
        match &self.data {
            VolumeData::Real(v) => {
                out.write_all(&[0])?;
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            VolumeData::Complex(v) => {
                out.write_all(&[1])?;
                for x in v {
                    out.write_all(&x.re.to_le_bytes())?;
                    out.write_all(&x.im.to_le_bytes())?;
                }
            }
        }
        out.flush()
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let e = fmt_err("volume file");
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(&e)?;
        if &magic != VOLUME_MAGIC {
            return Err(CgoError::Format {
                what: "volume file",
                reason: "bad magic".into(),
            });
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = read_u32(&mut input).map_err(&e)? as usize;
        }
        if dims.iter().any(|d| *d < 2) {
            return Err(CgoError::Format {
                what: "volume file",
                reason: format!("dimensions {dims:?} too small"),
            });
        }
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for v in spacing.iter_mut().chain(origin.iter_mut()) {
            *v = read_f64(&mut input).map_err(&e)?;
        }
        let n: usize = dims.iter().product();
        let data = match read_u8(&mut input).map_err(&e)? {
            0 => VolumeData::Real((0..n).map(|_| read_f64(&mut input)).collect::<std::io::Result<_>>().map_err(&e)?),
            1 => VolumeData::Complex(
                (0..n)
                    .map(|_| Ok(Complex64::new(read_f64(&mut input)?, read_f64(&mut input)?)))
                    .collect::<std::io::Result<_>>()
                    .map_err(&e)?,
            ),
            f => {
                return Err(CgoError::Format {
                    what: "volume file",
                    reason: format!("unknown value flag {f}"),
                })
            }
        };
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(create(path)?).map_err(|e| CgoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(open(path)?)
    }

    /// Real part on the plane `x_axis = value`, at the lattice nodes of the
    /// other two axes, linear in the normal direction.
    pub fn slice(&self, plane: Plane) -> Result<Slice> {
        let a = plane.axis;
        let lo = self.origin[a];
        let hi = self.upper(a);
        let tol = 1e-12 * (hi - lo).abs().max(1.0);
        if !(plane.value >= lo - tol && plane.value <= hi + tol) {
            return Err(CgoError::Range(format!(
                "plane {plane} outside the volume extent [{lo}, {hi}]"
            )));
        }
        let s = ((plane.value - lo) / self.spacing[a]).clamp(0.0, (self.dims[a] - 1) as f64);
        let i0 = (s.floor() as usize).min(self.dims[a] - 2);
        let f = s - i0 as f64;
        let (u, v) = plane.in_plane_axes();
        let mut values = Vec::with_capacity(self.dims[u] * self.dims[v]);
        for iu in 0..self.dims[u] {
            for iv in 0..self.dims[v] {
                let mut idx = [0usize; 3];
                idx[u] = iu;
                idx[v] = iv;
                idx[a] = i0;
                let lo_v = self.real_at(idx);
                idx[a] = i0 + 1;
                let hi_v = self.real_at(idx);
                values.push(if f == 0.0 { lo_v } else { (1.0 - f) * lo_v + f * hi_v });
            }
        }
        Ok(Slice {
            plane,
            u: (0..self.dims[u]).map(|i| self.coordinate(u, i)).collect(),
            v: (0..self.dims[v]).map(|i| self.coordinate(v, i)).collect(),
            values,
        })
    }
}

/// The plane `x_{axis+1} = value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub axis: usize,
    pub value: f64,
}

impl Plane {
    pub fn new(axis: usize, value: f64) -> Result<Self> {
        if axis > 2 || !value.is_finite() {
            return Err(CgoError::param(format!("invalid plane x{}={value}", axis + 1)));
        }
        Ok(Self { axis, value })
    }

    fn in_plane_axes(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// File-name friendly label such as `x3_0` or `x2_m0.6`.
    pub fn label(&self) -> String {
        let v = format!("{}", self.value).replace('-', "m");
        format!("x{}_{v}", self.axis + 1)
    }
}

impl std::fmt::Display for Plane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x{}={}", self.axis + 1, self.value)
    }
}

impl std::str::FromStr for Plane {
    type Err = CgoError;

    /// Accepts `x3=0`, `x2=-0.6`, or `z=0`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || CgoError::param(format!("cannot parse plane `{s}`; expected e.g. x3=0"));
        let (name, value) = s.split_once('=').ok_or_else(bad)?;
        let axis = match name.trim() {
            "x1" | "x" => 0,
            "x2" | "y" => 1,
            "x3" | "z" => 2,
            _ => return Err(bad()),
        };
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        Plane::new(axis, value)
    }
}

/// Values on a planar grid; row `i` is `u[i]`, column `j` is `v[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub plane: Plane,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub values: Vec<f64>,
}

impl Slice {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.v.len() + j]
    }

    /// First row holds the `v` coordinates after a corner cell naming the
    /// plane; each following row starts with its `u` coordinate.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.plane.to_string());
        for v in &self.v {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        for (i, u) in self.u.iter().enumerate() {
            out.push_str(&u.to_string());
            for j in 0..self.v.len() {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |r: &str| CgoError::Format {
            what: "slice CSV",
            reason: r.to_string(),
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut cells = header.split(',');
        let plane: Plane = cells.next().ok_or_else(|| bad("missing plane"))?.parse()?;
        let num = |c: &str| c.trim().parse::<f64>().map_err(|_| bad(&format!("not a number: `{c}`")));
        let v = cells.map(num).collect::<Result<Vec<_>>>()?;
        let mut u = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let row = line.split(',').map(num).collect::<Result<Vec<_>>>()?;
            if row.len() != v.len() + 1 {
                return Err(bad("ragged row"));
            }
            u.push(row[0]);
            values.extend_from_slice(&row[1..]);
        }
        Ok(Self { plane, u, v, values })
    }

    /// Grayscale image, `u` to the right and `v` upwards, scaled to the slice
    /// range and enlarged by pixel repetition.
    pub fn to_image(&self, scale: u32) -> image::GrayImage {
        let (nu, nv) = (self.u.len() as u32, self.v.len() as u32);
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let s = scale.max(1);
        image::GrayImage::from_fn(nu * s, nv * s, |x, y| {
            let i = (x / s) as usize;
            let j = (nv - 1 - y / s) as usize;
            let t = ((self.get(i, j) - lo) / span).clamp(0.0, 1.0);
            image::Luma([(t * 255.0).round() as u8])
        })
    }
}

/// Writes `<stem>_<plane>.csv` and `.png` into `dir` for each plane; returns
/// the written paths.
pub fn export_slices(volume: &Volume, planes: &[Plane], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CgoError::io(dir, e))?;
    let mut written = Vec::new();
    for p in planes {
        let slice = volume.slice(*p)?;
        // labels may contain a decimal point, so no with_extension here
        let base = format!("{stem}_{}", p.label());
        let csv = dir.join(format!("{base}.csv"));
        std::fs::write(&csv, slice.to_csv()).map_err(|e| CgoError::io(&csv, e))?;
        let png = dir.join(format!("{base}.png"));
        let scale = (256 / slice.u.len().max(1) as u32).max(1);
        slice.to_image(scale).save(&png).map_err(|e| CgoError::Format {
            what: "PNG image",
            reason: e.to_string(),
        })?;
        written.push(csv);
        written.push(png);
    }
    Ok(written)
}
