//! Grid data model and the MIV container format.
//!
//! Every grid is stored row-major with Z outermost, so voxel `(z, y, x)`
//! lives at `(z * Y + y) * X + x`. Z is the short-axis stack direction.
//!
//! The MIV container is `b"MIV1\n"`, one JSON header line
//! (`{"shape":[Z,Y,X],"spacing":[dz,dy,dx],"dtype":"f32"|"u8"}`) terminated
//! by `\n`, then exactly `Z*Y*X` little-endian elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes in the label scheme.
pub const NUM_LABELS: usize = 5;

pub const BACKGROUND: u8 = 0;
pub const LV_CAVITY: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const INFARCTION: u8 = 3;
pub const NO_REFLOW: u8 = 4;

pub const MIV_MAGIC: &[u8; 5] = b"MIV1\n";

/// Millimeters per voxel along (Z, Y, X).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Spacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Spacing {
    /// The common grid every case is resampled onto before inference.
    pub const TARGET: Spacing = Spacing {
        dz: 10.0,
        dy: 1.458,
        dx: 1.458,
    };

    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dz) && ok(dy) && ok(dx) {
            Ok(Spacing { dz, dy, dx })
        } else {
            Err(Error::Spacing { dz, dy, dx })
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dz, self.dy, self.dx]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Spacing::new(self.dz * factor, self.dy * factor, self.dx * factor)
    }
}

impl TryFrom<[f64; 3]> for Spacing {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Spacing::new(v[0], v[1], v[2])
    }
}

impl From<Spacing> for [f64; 3] {
    fn from(s: Spacing) -> Self {
        s.as_array()
    }
}

/// Physical volume of one voxel in mm³.
pub fn voxel_volume(spacing: Spacing) -> f64 {
    spacing.dz * spacing.dy * spacing.dx
}

/// Element types a [`Grid`] may hold.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    fn validate(data: &[Self]) -> Result<()>;
}

impl Voxel for f32 {
    fn validate(data: &[f32]) -> Result<()> {
        match data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("intensity at voxel {i}"))),
            None => Ok(()),
        }
    }
}

impl Voxel for u8 {
    fn validate(data: &[u8]) -> Result<()> {
        match data.iter().position(|&v| v as usize >= NUM_LABELS) {
            Some(index) => Err(Error::LabelRange {
                value: data[index],
                index,
            }),
            None => Ok(()),
        }
    }
}

impl Voxel for bool {
    fn validate(_: &[bool]) -> Result<()> {
        Ok(())
    }
}

/// A 3D grid with physical spacing. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: [usize; 3],
    data: Vec<T>,
    spacing: Spacing,
}

/// Scalar image volume.
pub type Volume = Grid<f32>;
/// Integer label map over the 5-class scheme.
pub type LabelMap = Grid<u8>;
/// Binary foreground mask.
pub type Mask = Grid<bool>;

impl<T: Voxel> Grid<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>, spacing: Spacing) -> Result<Self> {
        let n = shape_len(shape)?;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        T::validate(&data)?;
        Ok(Grid {
            shape,
            data,
            spacing,
        })
    }

    pub fn filled(shape: [usize; 3], value: T, spacing: Spacing) -> Result<Self> {
        let n = shape_len(shape)?;
        Grid::new(shape, vec![value; n], spacing)
    }

    /// Builds a grid by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        shape: [usize; 3],
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape_len(shape)?);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Grid::new(shape, data, spacing)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    /// One Z slice as a row-major `Y*X` slice.
    pub fn slice(&self, z: usize) -> &[T] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Same grid with a different spacing.
    pub fn with_spacing(&self, spacing: Spacing) -> Self {
        Grid {
            shape: self.shape,
            data: self.data.clone(),
            spacing,
        }
    }

    /// Elementwise map to another voxel type, shape and spacing kept.
    pub fn map<U: Voxel>(&self, f: impl FnMut(&T) -> U) -> Result<Grid<U>> {
        Grid::new(self.shape, self.data.iter().map(f).collect(), self.spacing)
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

impl Grid<u8> {
    /// Number of voxels whose label is in `selected`.
    pub fn count_labels(&self, selected: &[u8]) -> usize {
        self.data.iter().filter(|v| selected.contains(v)).count()
    }
}

fn shape_len(shape: [usize; 3]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

/// Binary mask of voxels whose label is in `selected`.
pub fn label_mask(labels: &LabelMap, selected: &[u8]) -> Mask {
    Grid {
        shape: labels.shape,
        data: labels.data.iter().map(|v| selected.contains(v)).collect(),
        spacing: labels.spacing,
    }
}

/// Per-class probabilities, class axis outermost: `(C, Z, Y, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    shape: [usize; 3],
    data: Vec<f32>,
    spacing: Spacing,
}

/// Allowed deviation of a voxel's class probabilities from summing to one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

impl ProbMap {
    pub fn new(classes: usize, shape: [usize; 3], data: Vec<f32>, spacing: Spacing) -> Result<Self> {
        let voxels = shape_len(shape)?;
        if classes < 2 || data.len() != classes * voxels {
            return Err(Error::Shape(format!(
                "probability data length {} does not match {} classes x {:?}",
                data.len(),
                classes,
                shape
            )));
        }
        if let Some(i) = data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "probability {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        for v in 0..voxels {
            let s: f64 = (0..classes).map(|c| data[c * voxels + v] as f64).sum();
            if (s - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "probabilities at voxel {v} sum to {s}"
                )));
            }
        }
        Ok(ProbMap {
            classes,
            shape,
            data,
            spacing,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Probability plane of one class.
    pub fn channel(&self, class: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[class * v..(class + 1) * v]
    }

    pub fn prob(&self, class: usize, voxel: usize) -> f32 {
        self.data[class * self.voxels() + voxel]
    }

    /// Per-voxel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let v = self.voxels();
        let data = (0..v)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * v + i] > self.data[best * v + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Grid {
            shape: self.shape,
            data,
            spacing: self.spacing,
        }
    }
}

/// Inclusive voxel bounding box `lo..=hi` per axis (Z, Y, X).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], shape: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lo[a] > hi[a] || hi[a] >= shape[a] {
                return Err(Error::Shape(format!(
                    "box {lo:?}..={hi:?} does not fit shape {shape:?}"
                )));
            }
        }
        Ok(BBox { lo, hi })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        BBox {
            lo: [0; 3],
            hi: [
                shape[0].saturating_sub(1),
                shape[1].saturating_sub(1),
                shape[2].saturating_sub(1),
            ],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&z)
            && (self.lo[1]..=self.hi[1]).contains(&y)
            && (self.lo[2]..=self.hi[2]).contains(&x)
    }

    pub fn fits(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < shape[a])
    }
}

// ---------------------------------------------------------------------------
// MIV container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Serialize, Deserialize)]
struct MivHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
}

/// Voxel types with an MIV encoding.
pub trait MivElement: Voxel {
    const DTYPE: Dtype;
    const SIZE: usize;
    fn extend_le(data: &[Self], out: &mut Vec<u8>);
    fn decode_le(bytes: &[u8]) -> Vec<Self>;
}

impl MivElement for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const SIZE: usize = 4;

    fn extend_le(data: &[f32], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn decode_le(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl MivElement for u8 {
    const DTYPE: Dtype = Dtype::U8;
    const SIZE: usize = 1;

    fn extend_le(data: &[u8], out: &mut Vec<u8>) {
        out.extend_from_slice(data);
    }

    fn decode_le(bytes: &[u8]) -> Vec<u8> {
        bytes.to_vec()
    }
}

/// A decoded MIV file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyGrid {
    Volume(Volume),
    Labels(LabelMap),
}

impl AnyGrid {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            AnyGrid::Volume(v) => Ok(v),
            AnyGrid::Labels(_) => Err(Error::Header("expected dtype f32, found u8".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            AnyGrid::Labels(l) => Ok(l),
            AnyGrid::Volume(_) => Err(Error::Header("expected dtype u8, found f32".into())),
        }
    }
}

/// Encodes a grid as MIV bytes.
pub fn encode_miv<T: MivElement>(grid: &Grid<T>) -> Vec<u8> {
    let header = MivHeader {
        shape: grid.shape,
        spacing: grid.spacing.as_array(),
        dtype: T::DTYPE,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MIV_MAGIC.len() + json.len() + 1 + grid.len() * T::SIZE);
    out.extend_from_slice(MIV_MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    T::extend_le(&grid.data, &mut out);
    out
}

/// Decodes MIV bytes.
pub fn decode_miv(bytes: &[u8]) -> Result<AnyGrid> {
    let rest = bytes
        .strip_prefix(MIV_MAGIC.as_slice())
        .ok_or_else(|| Error::Header("missing MIV1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("unterminated header line".into()))?;
    let header: MivHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Header(format!("header JSON: {e}")))?;
    let spacing = Spacing::try_from(header.spacing)
        .map_err(|e| Error::Header(e.to_string()))?;
    let payload = &rest[nl + 1..];
    let n = shape_len(header.shape)?;
    match header.dtype {
        Dtype::F32 => decode_payload::<f32>(header.shape, spacing, n, payload).map(AnyGrid::Volume),
        Dtype::U8 => decode_payload::<u8>(header.shape, spacing, n, payload).map(AnyGrid::Labels),
    }
}

fn decode_payload<T: MivElement>(
    shape: [usize; 3],
    spacing: Spacing,
    n: usize,
    payload: &[u8],
) -> Result<Grid<T>> {
    let expected = n
        .checked_mul(T::SIZE)
        .ok_or_else(|| Error::Header("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    Grid::new(shape, T::decode_le(payload), spacing)
}

pub fn read_miv(path: impl AsRef<Path>) -> Result<AnyGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_miv(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_miv<T: MivElement>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_miv(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    read_miv(path)?.into_volume().map_err(|e| e.in_file(path))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    read_miv(path)?.into_labels().map_err(|e| e.in_file(path))
}
