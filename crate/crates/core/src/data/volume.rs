use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether voxel values are raw Hounsfield units or already windowed to [0, 255].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intensity {
    Hounsfield,
    Normalized,
}

/// A 3D scalar grid stored z-major: index (z, y, x) at `(z * h + y) * w + x`.
///
/// Voxel `i` along an axis covers the continuous interval [i, i + 1); its
/// center maps to world position `origin + i * spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// (depth, height, width) = (z, y, x) extents.
    pub extents: [usize; 3],
    /// (dz, dy, dx) in mm.
    pub spacing: [f64; 3],
    /// World position (z, y, x) in mm of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub intensity: Intensity,
    pub data: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let v = Volume {
            extents,
            spacing,
            origin: [0.0; 3],
            intensity: Intensity::Hounsfield,
            data,
            mask: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], value: f64) -> Self {
        Volume {
            extents,
            spacing,
            origin: [0.0; 3],
            intensity: Intensity::Hounsfield,
            data: vec![value; extents.iter().product()],
            mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.extents.iter().product();
        if self.data.len() != n {
            return Err(Error::data(format!(
                "volume {:?} needs {n} voxels, has {}",
                self.extents,
                self.data.len()
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::data(format!("volume spacing {:?} must be positive", self.spacing)));
        }
        if let Some(m) = &self.mask {
            if m.len() != n {
                return Err(Error::data(format!("mask has {} voxels, volume has {n}", m.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// World (x, y, z) in mm to continuous voxel coordinates (x, y, z).
    pub fn world_to_voxel(&self, mm: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            // world axis k (x, y, z) is volume axis 2 - k
            let a = 2 - k;
            out[k] = (mm[k] - self.origin[a]) / self.spacing[a] + 0.5;
        }
        out
    }

    /// Continuous voxel coordinates (x, y, z) to world (x, y, z) in mm.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let a = 2 - k;
            out[k] = self.origin[a] + (v[k] - 0.5) * self.spacing[a];
        }
        out
    }
}

/// One annotated finding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    /// World (x, y, z) in mm.
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    /// Number of readers marking it (0..=4).
    pub agreement: u8,
    /// False for findings marked irrelevant.
    pub relevant: bool,
}

impl Nodule {
    /// Counted for training and sensitivity: relevant and marked by at least
    /// three readers. Everything else is excused during evaluation.
    pub fn is_target(&self) -> bool {
        self.relevant && self.agreement >= 3
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_mm > 0.0 && self.diameter_mm.is_finite()) {
            return Err(Error::data(format!("nodule diameter {} must be positive", self.diameter_mm)));
        }
        if self.agreement > 4 {
            return Err(Error::data(format!("agreement {} exceeds 4", self.agreement)));
        }
        if self.center_mm.iter().any(|c| !c.is_finite()) {
            return Err(Error::data("nodule center must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanAnnotation {
    pub scan_id: String,
    pub nodules: Vec<Nodule>,
}

impl ScanAnnotation {
    pub fn new(scan_id: impl Into<String>) -> Self {
        ScanAnnotation {
            scan_id: scan_id.into(),
            nodules: Vec::new(),
        }
    }

    pub fn targets(&self) -> impl Iterator<Item = &Nodule> {
        self.nodules.iter().filter(|n| n.is_target())
    }
}
