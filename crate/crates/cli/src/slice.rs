//! Axial slices as binary PGM with detection outlines burned in.

use std::path::Path;

use pianet_core::data::{DetectionRecord, Intensity, Nodule, Volume};
use pianet_core::{Error, Result};

pub const DETECTION_GRAY: u8 = 255;
pub const TRUTH_GRAY: u8 = 0;

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    fn put(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    /// Square outline with corners (x0, y0) and (x1, y1), inclusive.
    /// Dashed outlines skip every other pair of pixels.
    pub fn outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: u8, dashed: bool) {
        let on = |k: i64| !dashed || (k / 2) % 2 == 0;
        let (w, h) = (self.width as i64, self.height as i64);
        for x in x0.max(0)..=x1.min(w - 1) {
            if on(x - x0) {
                self.put(x, y0, v);
                self.put(x, y1, v);
            }
        }
        for y in y0.max(0)..=y1.min(h - 1) {
            if on(y - y0) {
                self.put(x0, y, v);
                self.put(x1, y, v);
            }
        }
    }

    pub fn crop_zoom(&self, cx: i64, cy: i64, half: i64, zoom: usize) -> Image {
        let side = (2 * half) as usize;
        let mut out = Image {
            width: side * zoom,
            height: side * zoom,
            pixels: vec![0; side * side * zoom * zoom],
        };
        for oy in 0..out.height {
            for ox in 0..out.width {
                let x = cx - half + (ox / zoom) as i64;
                let y = cy - half + (oy / zoom) as i64;
                if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    out.pixels[oy * out.width + ox] = self.pixels[y as usize * self.width + x as usize];
                }
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Gray levels: normalized volumes as stored, Hounsfield volumes windowed to
/// [hu_min, hu_max].
pub fn axial(v: &Volume, z: usize, hu_window: (f64, f64)) -> Result<Image> {
    if z >= v.extents[0] {
        return Err(Error::config(format!("slice {z} outside depth {}", v.extents[0])));
    }
    let [_, h, w] = v.extents;
    let gray = |x: f64| match v.intensity {
        Intensity::Normalized => x,
        Intensity::Hounsfield => (x - hu_window.0) / (hu_window.1 - hu_window.0) * 255.0,
    };
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            pixels.push(gray(v.get(z, y, x)).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Voxel-space square (x0, y0, x1, y1) of a world-space cube on slice `z`,
/// if the cube intersects it.
pub fn footprint(v: &Volume, center_mm: [f64; 3], side_mm: f64, z: usize) -> Option<(i64, i64, i64, i64)> {
    let c = v.world_to_voxel(center_mm);
    let half = [0, 1, 2].map(|a| side_mm / 2.0 / v.spacing[2 - a]);
    if ((z as f64 + 0.5) - c[2]).abs() > half[2] {
        return None;
    }
    Some((
        (c[0] - half[0]).floor() as i64,
        (c[1] - half[1]).floor() as i64,
        ((c[0] + half[0]).ceil() as i64 - 1).max((c[0] - half[0]).floor() as i64),
        ((c[1] + half[1]).ceil() as i64 - 1).max((c[1] - half[1]).floor() as i64),
    ))
}

pub fn draw(img: &mut Image, v: &Volume, z: usize, dets: &[DetectionRecord], truth: &[Nodule]) {
    for n in truth {
        if let Some((x0, y0, x1, y1)) = footprint(v, n.center_mm, n.diameter_mm, z) {
            img.outline(x0, y0, x1, y1, TRUTH_GRAY, true);
        }
    }
    for d in dets {
        if let Some((x0, y0, x1, y1)) = footprint(v, [d.x_mm, d.y_mm, d.z_mm], d.r_mm, z) {
            img.outline(x0, y0, x1, y1, DETECTION_GRAY, false);
        }
    }
}
