//! Volumetric containers shared by every stage of the pipeline.
//!
//! Samples are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 4x4 voxel-to-world matrix, row major.
pub type Affine = [[f64; 4]; 4];

/// Sampling grid: dimensions, voxel spacing in mm and optional orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Option<Affine>,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            affine: None,
        })
    }

    pub fn with_affine(mut self, affine: Option<Affine>) -> Self {
        self.affine = affine;
        self
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Dimensions equal and spacing equal to 1e-6 relative. Orientation is
    /// not compared.
    pub fn matches(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()))
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Visit the in-bounds neighbours of voxel `i` (6- or 26-connectivity).
    pub fn for_each_neighbor(&self, i: usize, connectivity: Connectivity, mut f: impl FnMut(usize)) {
        let [x, y, z] = self.coords(i);
        let [nx, ny, nz] = self.dims;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if manhattan == 0 {
                        continue;
                    }
                    if connectivity == Connectivity::Six && manhattan != 1 {
                        continue;
                    }
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 {
                        continue;
                    }
                    let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                    if xx >= nx || yy >= ny || zz >= nz {
                        continue;
                    }
                    f(self.index(xx, yy, zz));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        match value {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::param(
                "connectivity",
                format!("must be 6 or 26, got {other}"),
            )),
        }
    }
}

/// Scalar image on a grid. Samples are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite sample at linear index {i}"
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Volume {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        let n = grid.len();
        Volume::new(grid, vec![value; n])
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.grid.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Label image on a grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid,
    data: Vec<u32>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "mask length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Mask {
            grid,
            data: vec![0; n],
        }
    }

    /// Converts a volume whose samples are non-negative integers.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if s < 0.0 || s.fract() != 0.0 || s > u32::MAX as f64 {
                    Err(Error::InvalidVolume(format!(
                        "mask sample {s} at linear index {i} is not a non-negative integer"
                    )))
                } else {
                    Ok(s as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(v.grid().clone(), data)
    }

    /// Every nonzero sample becomes 1.
    pub fn binarized(&self) -> Mask {
        Mask {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&l| u32::from(l != 0)).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&l| l as f64).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

/// In-brain tissue classes and their fixed mask label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueLabel {
    Wm,
    Gm,
    Csf,
    Lesion,
}

impl TissueLabel {
    pub const ALL: [TissueLabel; 4] = [
        TissueLabel::Wm,
        TissueLabel::Gm,
        TissueLabel::Csf,
        TissueLabel::Lesion,
    ];

    /// Mask value: WM=1, GM=2, CSF=3, Lesion=4.
    pub const fn value(self) -> u32 {
        match self {
            TissueLabel::Wm => 1,
            TissueLabel::Gm => 2,
            TissueLabel::Csf => 3,
            TissueLabel::Lesion => 4,
        }
    }

    pub fn from_value(v: u32) -> Option<TissueLabel> {
        match v {
            1 => Some(TissueLabel::Wm),
            2 => Some(TissueLabel::Gm),
            3 => Some(TissueLabel::Csf),
            4 => Some(TissueLabel::Lesion),
            _ => None,
        }
    }

    pub const fn index(self) -> usize {
        self.value() as usize - 1
    }

    pub const fn name(self) -> &'static str {
        match self {
            TissueLabel::Wm => "wm",
            TissueLabel::Gm => "gm",
            TissueLabel::Csf => "csf",
            TissueLabel::Lesion => "lesion",
        }
    }
}

impl std::fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TissueLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wm" => Ok(TissueLabel::Wm),
            "gm" => Ok(TissueLabel::Gm),
            "csf" => Ok(TissueLabel::Csf),
            "lesion" => Ok(TissueLabel::Lesion),
            other => Err(Error::param("tissue", format!("unknown tissue `{other}`"))),
        }
    }
}
