//! MetaImage, flat binary volume files and the annotation / detection CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{Intensity, Nodule, ScanAnnotation, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    /// 16-bit signed integers, typically Hounsfield units.
    Short,
    /// 8-bit unsigned, typically a normalized volume or a mask.
    UChar,
    Double,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::UChar => 1,
            ElementType::Double => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_SHORT" => Some(ElementType::Short),
            "MET_UCHAR" => Some(ElementType::UChar),
            "MET_DOUBLE" => Some(ElementType::Double),
            _ => None,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode(values: &[f64], ty: ElementType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * ty.size());
    for &v in values {
        match ty {
            ElementType::Short => out.extend_from_slice(&(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes()),
            ElementType::UChar => out.push(v.round().clamp(0.0, 255.0) as u8),
            ElementType::Double => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], ty: ElementType, msb: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(bytes.len() / ty.size());
    for c in bytes.chunks_exact(ty.size()) {
        let v = match ty {
            ElementType::Short => {
                let b = [c[0], c[1]];
                (if msb { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            }
            ElementType::UChar => c[0] as f64,
            ElementType::Double => {
                let b: [u8; 8] = c.try_into().expect("chunk of 8");
                if msb {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            }
        };
        out.push(v);
    }
    out
}

fn fmt_triplet(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

/// Writes `<path>` (header) and a sibling `.raw` payload.
pub fn write_metaimage(path: &Path, values: &[f64], volume: &Volume, ty: ElementType) -> Result<()> {
    let raw = path.with_extension("raw");
    let raw_name = raw.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::config("bad MetaImage path"))?;
    let [d, h, w] = volume.extents;
    let [oz, oy, ox] = volume.origin;
    let [sz, sy, sx] = volume.spacing;
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {}\nElementSpacing = {}\nDimSize = {w} {h} {d}\nElementType = {}\nElementDataFile = {raw_name}\n",
        fmt_triplet([ox, oy, oz]),
        fmt_triplet([sx, sy, sz]),
        ty.tag()
    );
    write_bytes(path, header.as_bytes())?;
    write_bytes(&raw, &encode(values, ty))
}

/// Writes the volume data; see [`write_metaimage`].
pub fn write_volume_mhd(path: &Path, volume: &Volume, ty: ElementType) -> Result<()> {
    write_metaimage(path, &volume.data, volume, ty)
}

/// Writes the lung mask as a 0/1 MET_UCHAR image.
pub fn write_mask_mhd(path: &Path, volume: &Volume) -> Result<()> {
    let mask = volume
        .mask
        .as_ref()
        .ok_or_else(|| Error::config("volume has no lung mask to write"))?;
    let values: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
    write_metaimage(path, &values, volume, ElementType::UChar)
}

/// Reads a 3D MetaImage. MET_UCHAR images are taken as already normalized.
pub fn read_metaimage(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let name = path.display().to_string();
    let mut keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut offset = 0usize;
    let mut local_start = None;
    for (lineno, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_len = line.len() + 1;
        let text = std::str::from_utf8(line)
            .map_err(|_| Error::parse(&name, format!("line {}", lineno + 1), "header is not UTF-8"))?
            .trim();
        offset += line_len;
        if text.is_empty() {
            continue;
        }
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::parse(&name, format!("line {}", lineno + 1), format!("expected `key = value`, got `{text}`")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let done = k == "ElementDataFile";
        keys.insert(k, (lineno + 1, v.clone()));
        if done {
            if v == "LOCAL" {
                local_start = Some(offset.min(bytes.len()));
            }
            break;
        }
    }
    let get = |k: &str| -> Result<(usize, &str)> {
        keys.get(k)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::parse(&name, "header", format!("missing key {k}")))
    };
    let nums = |k: &str| -> Result<Vec<f64>> {
        let (l, v) = get(k)?;
        v.split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(&name, format!("line {l}"), format!("{k} has a non-numeric entry: `{v}`")))
    };
    let (l, nd) = get("NDims")?;
    if nd != "3" {
        return Err(Error::parse(&name, format!("line {l}"), format!("NDims {nd} unsupported, need 3")));
    }
    if let Ok((l, c)) = get("CompressedData") {
        if c.eq_ignore_ascii_case("true") {
            return Err(Error::parse(&name, format!("line {l}"), "compressed payloads are unsupported"));
        }
    }
    let msb = ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"]
        .iter()
        .any(|k| keys.get(*k).is_some_and(|(_, v)| v.eq_ignore_ascii_case("true")));
    let dims = nums("DimSize")?;
    if dims.len() != 3 || dims.iter().any(|d| *d < 1.0 || d.fract() != 0.0) {
        return Err(Error::parse(&name, format!("line {}", get("DimSize")?.0), "DimSize needs three positive integers"));
    }
    let spacing = if keys.contains_key("ElementSpacing") { nums("ElementSpacing")? } else { vec![1.0; 3] };
    let offset_mm = match ["Offset", "Position", "Origin"].iter().find(|k| keys.contains_key(**k)) {
        Some(k) => nums(k)?,
        None => vec![0.0; 3],
    };
    if spacing.len() != 3 || offset_mm.len() != 3 {
        return Err(Error::parse(&name, "header", "ElementSpacing and Offset need three entries"));
    }
    let (l, ty) = get("ElementType")?;
    let ty = ElementType::parse(ty)
        .ok_or_else(|| Error::parse(&name, format!("line {l}"), format!("unknown element type {ty}")))?;
    let (_, file) = get("ElementDataFile")?;
    let (w, h, d) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let expected = w * h * d * ty.size();
    let (payload, source): (Vec<u8>, String) = match local_start {
        Some(start) => (bytes[start..].to_vec(), name.clone()),
        None => {
            let raw: PathBuf = path.parent().unwrap_or(Path::new(".")).join(file);
            (read_bytes(&raw)?, raw.display().to_string())
        }
    };
    if payload.len() < expected {
        return Err(Error::parse(
            source,
            format!("byte {}", payload.len()),
            format!("payload truncated: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let data = decode(&payload[..expected], ty, msb);
    let v = Volume {
        extents: [d, h, w],
        spacing: [spacing[2], spacing[1], spacing[0]],
        origin: [offset_mm[2], offset_mm[1], offset_mm[0]],
        intensity: if ty == ElementType::UChar { Intensity::Normalized } else { Intensity::Hounsfield },
        data,
        mask: None,
    };
    v.validate()?;
    Ok(v)
}

/// Reads a scan and, when given, its lung mask (any nonzero voxel is lung).
pub fn read_scan(image: &Path, mask: Option<&Path>) -> Result<Volume> {
    let mut v = read_metaimage(image)?;
    if let Some(m) = mask {
        let mv = read_metaimage(m)?;
        if mv.extents != v.extents {
            return Err(Error::data(format!(
                "mask {} has extents {:?}, image has {:?}",
                m.display(),
                mv.extents,
                v.extents
            )));
        }
        v.mask = Some(mv.data.iter().map(|&x| x != 0.0).collect());
    }
    Ok(v)
}

const VOLUME_MAGIC: &[u8; 8] = b"PIAVOL01";

/// Lossless single-file volume format: magic, extents (3 x u64), spacing,
/// origin (3 x f64 each), intensity flag, mask flag, f64 payload, mask bytes.
/// All little-endian.
pub fn write_volume_bin(path: &Path, v: &Volume) -> Result<()> {
    v.validate()?;
    let mut out = Vec::with_capacity(8 + 74 + v.len() * 9);
    out.extend_from_slice(VOLUME_MAGIC);
    for e in v.extents {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for x in v.spacing.iter().chain(&v.origin) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.push(matches!(v.intensity, Intensity::Normalized) as u8);
    out.push(v.mask.is_some() as u8);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(m) = &v.mask {
        out.extend(m.iter().map(|&b| b as u8));
    }
    write_bytes(path, &out)
}

pub fn read_volume_bin(path: &Path) -> Result<Volume> {
    let b = read_bytes(path)?;
    let name = path.display().to_string();
    let header = 8 + 24 + 48 + 2;
    if b.len() < header || &b[..8] != VOLUME_MAGIC {
        return Err(Error::parse(&name, "byte 0", "not a PIAVOL01 volume file"));
    }
    let u = |i: usize| u64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let f = |i: usize| f64::from_le_bytes(b[32 + 8 * i..40 + 8 * i].try_into().unwrap());
    let extents = [u(0), u(1), u(2)];
    let n = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::parse(&name, "byte 8", "extents overflow"))?;
    let intensity = match b[80] {
        0 => Intensity::Hounsfield,
        1 => Intensity::Normalized,
        x => return Err(Error::parse(&name, "byte 80", format!("bad intensity flag {x}"))),
    };
    let has_mask = match b[81] {
        0 => false,
        1 => true,
        x => return Err(Error::parse(&name, "byte 81", format!("bad mask flag {x}"))),
    };
    let expected = header + 8 * n + if has_mask { n } else { 0 };
    if b.len() != expected {
        return Err(Error::parse(
            &name,
            format!("byte {}", b.len()),
            format!("expected {expected} bytes, found {}", b.len()),
        ));
    }
    let data: Vec<f64> = b[header..header + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = has_mask.then(|| b[header + 8 * n..].iter().map(|&x| x != 0).collect());
    let v = Volume {
        extents,
        spacing: [f(0), f(1), f(2)],
        origin: [f(3), f(4), f(5)],
        intensity,
        data,
        mask,
    };
    v.validate()?;
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    scan_id: String,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
    diameter_mm: f64,
    agreement: u8,
    relevant: String,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn csv_position(name: &str, e: &csv::Error) -> Error {
    let pos = e
        .position()
        .map(|p| format!("line {} byte {}", p.line(), p.byte()))
        .unwrap_or_else(|| "unknown position".into());
    Error::parse(name, pos, e.to_string())
}

/// Reads annotations grouped per scan id.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, ScanAnnotation>> {
    let name = path.display().to_string();
    let bytes = read_bytes(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| csv_position(&name, &e))?.clone();
    let want = ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "agreement", "relevant"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::parse(&name, "line 1", format!("header must be {}", want.join(","))));
    }
    let mut out: BTreeMap<String, ScanAnnotation> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_position(&name, &e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: AnnotationRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(&name, format!("line {line}"), e.to_string()))?;
        let relevant = parse_flag(&row.relevant)
            .ok_or_else(|| Error::parse(&name, format!("line {line}"), format!("relevant must be 0/1/true/false, got `{}`", row.relevant)))?;
        let nodule = Nodule {
            center_mm: [row.x_mm, row.y_mm, row.z_mm],
            diameter_mm: row.diameter_mm,
            agreement: row.agreement,
            relevant,
        };
        nodule
            .validate()
            .map_err(|e| Error::parse(&name, format!("line {line}"), e.to_string()))?;
        out.entry(row.scan_id.clone())
            .or_insert_with(|| ScanAnnotation::new(row.scan_id))
            .nodules
            .push(nodule);
    }
    Ok(out)
}

pub fn write_annotations<'a>(path: &Path, annotations: impl IntoIterator<Item = &'a ScanAnnotation>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "agreement", "relevant"])
        .map_err(|e| Error::data(e.to_string()))?;
    for a in annotations {
        for n in &a.nodules {
            w.write_record([
                a.scan_id.clone(),
                n.center_mm[0].to_string(),
                n.center_mm[1].to_string(),
                n.center_mm[2].to_string(),
                n.diameter_mm.to_string(),
                n.agreement.to_string(),
                (n.relevant as u8).to_string(),
            ])
            .map_err(|e| Error::data(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_bytes(path, &bytes)
}

/// One scan-level detection in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scan_id: String,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    pub r_mm: f64,
    pub score: f64,
}

pub fn write_detections(path: &Path, rows: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scan_id", "x_mm", "y_mm", "z_mm", "r_mm", "score"])
        .map_err(|e| Error::data(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.scan_id.clone(),
            r.x_mm.to_string(),
            r.y_mm.to_string(),
            r.z_mm.to_string(),
            r.r_mm.to_string(),
            r.score.to_string(),
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let name = path.display().to_string();
    let bytes = read_bytes(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| csv_position(&name, &e))?.clone();
    let want = ["scan_id", "x_mm", "y_mm", "z_mm", "r_mm", "score"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::parse(&name, "line 1", format!("header must be {}", want.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_position(&name, &e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: DetectionRecord = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(&name, format!("line {line}"), e.to_string()))?;
        if !(row.r_mm > 0.0) || !(0.0..=1.0).contains(&row.score) {
            return Err(Error::parse(&name, format!("line {line}"), "r_mm must be positive and score in [0, 1]"));
        }
        out.push(row);
    }
    Ok(out)
}

/// Writes text through a buffered handle, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
