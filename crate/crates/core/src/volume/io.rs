use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Metadata half of the native two-file volume format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    pub byte_order: String,
    /// Always `"x-fastest"`.
    #[serde(default = "default_order")]
    pub order: String,
    /// Raw voxel file, relative to the metadata file's directory.
    pub data_file: String,
}

fn default_order() -> String {
    "x-fastest".to_string()
}

/// Write `vol` as `<meta_path>` (JSON) plus a sibling raw little-endian f32 file.
pub fn write_volume(meta_path: &Path, vol: &Volume) -> Result<()> {
    let raw_name = raw_name_for(meta_path);
    let meta = VolumeMeta {
        dims: vol.dims(),
        spacing: vol.spacing(),
        origin: vol.origin(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        order: default_order(),
        data_file: raw_name.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(meta_path, json + "\n").map_err(|e| Error::io(meta_path, e))?;
    let raw_path = sibling(meta_path, &raw_name);
    let bytes: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

fn raw_name_for(meta_path: &Path) -> String {
    let stem = meta_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    format!("{stem}.raw")
}

fn sibling(meta_path: &Path, name: &str) -> PathBuf {
    meta_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

/// Read a volume. `.mhd` / `.mha` go through the MetaImage reader, anything
/// else is treated as native JSON metadata.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mhd") | Some("mha") => read_metaimage(path),
        _ => read_native(path),
    }
}

fn read_native(meta_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if meta.dtype != "float32" {
        return Err(format_err(
            meta_path,
            0,
            format!("unsupported dtype {}", meta.dtype),
        ));
    }
    if meta.order != "x-fastest" {
        return Err(format_err(
            meta_path,
            0,
            format!("unsupported voxel order {}", meta.order),
        ));
    }
    let big = match meta.byte_order.as_str() {
        "little" => false,
        "big" => true,
        other => {
            return Err(format_err(
                meta_path,
                0,
                format!("unknown byte_order {other}"),
            ))
        }
    };
    let raw_path = sibling(meta_path, &meta.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let data = decode(&bytes, ElementType::F32, big, &raw_path)?;
    Volume::new(meta.dims, meta.spacing, meta.origin, data)
}

fn format_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

#[derive(Debug, Clone, Copy)]
enum ElementType {
    U8,
    I8,
    U16,
    I16,
    I32,
    F32,
    F64,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => Self::U8,
            "MET_CHAR" => Self::I8,
            "MET_USHORT" => Self::U16,
            "MET_SHORT" => Self::I16,
            "MET_INT" => Self::I32,
            "MET_FLOAT" => Self::F32,
            "MET_DOUBLE" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::U16 | Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

fn decode(bytes: &[u8], ty: ElementType, big_endian: bool, path: &Path) -> Result<Vec<f32>> {
    let size = ty.size();
    if !bytes.len().is_multiple_of(size) {
        return Err(format_err(
            path,
            0,
            format!("byte count {} not a multiple of {size}", bytes.len()),
        ));
    }
    let out = bytes
        .chunks_exact(size)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..size].copy_from_slice(c);
            if big_endian {
                b[..size].reverse();
            }
            match ty {
                ElementType::U8 => b[0] as f32,
                ElementType::I8 => b[0] as i8 as f32,
                ElementType::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
                ElementType::I16 => i16::from_le_bytes([b[0], b[1]]) as f32,
                ElementType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
                ElementType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                ElementType::F64 => f64::from_le_bytes(b) as f32,
            }
        })
        .collect();
    Ok(out)
}

/// MetaImage (`.mhd` header + raw, or single-file `.mha`) reader.
///
/// Only uncompressed 3D scalar data with an axis-aligned direction matrix is
/// accepted.
pub fn read_metaimage(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut ty = None;
    let mut big = false;
    let mut data_file = None;
    let mut header_end = bytes.len();
    let mut pos = 0;
    let mut line_no = 0;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |e| pos + e);
        let line = String::from_utf8_lossy(&bytes[pos..end]).trim().to_string();
        line_no += 1;
        pos = end + 1;
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format_err(
                path,
                line_no,
                format!("expected `key = value`, got {line:?}"),
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        let floats = || -> Result<Vec<f64>> {
            value
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| format_err(path, line_no, format!("{key}: {e}")))
                })
                .collect()
        };
        match key {
            "NDims" if value != "3" => {
                return Err(format_err(
                    path,
                    line_no,
                    format!("only 3D volumes supported, NDims = {value}"),
                ))
            }
            "DimSize" => {
                let v = floats()?;
                if v.len() != 3 {
                    return Err(format_err(path, line_no, "DimSize needs 3 entries".into()));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "ElementSpacing" | "ElementSize" => {
                let v = floats()?;
                if v.len() == 3 {
                    spacing = [v[0], v[1], v[2]];
                }
            }
            "Offset" | "Origin" | "Position" => {
                let v = floats()?;
                if v.len() == 3 {
                    origin = [v[0], v[1], v[2]];
                }
            }
            "TransformMatrix" | "Rotation" | "Orientation" => {
                let v = floats()?;
                let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
                if v.len() == 9 && v.iter().zip(identity).any(|(a, b)| (a - b).abs() > 1e-6) {
                    return Err(format_err(
                        path,
                        line_no,
                        "non-identity direction matrix".into(),
                    ));
                }
            }
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(format_err(
                    path,
                    line_no,
                    "compressed data not supported".into(),
                ))
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                big = value.eq_ignore_ascii_case("true")
            }
            "ElementNumberOfChannels" if value != "1" => {
                return Err(format_err(
                    path,
                    line_no,
                    "multi-channel data not supported".into(),
                ))
            }
            "ElementType" => {
                ty = Some(ElementType::parse(value).ok_or_else(|| {
                    format_err(path, line_no, format!("unsupported ElementType {value}"))
                })?)
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                header_end = pos.min(bytes.len());
                break;
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| format_err(path, 0, "missing DimSize".into()))?;
    let ty = ty.ok_or_else(|| format_err(path, 0, "missing ElementType".into()))?;
    let data_file =
        data_file.ok_or_else(|| format_err(path, 0, "missing ElementDataFile".into()))?;
    let n: usize = dims.iter().product();
    let data = if data_file == "LOCAL" {
        let body = &bytes[header_end..];
        if body.len() < n * ty.size() {
            return Err(format_err(path, line_no, "truncated LOCAL data".into()));
        }
        decode(&body[body.len() - n * ty.size()..], ty, big, path)?
    } else {
        let raw = sibling(path, &data_file);
        let raw_bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        decode(&raw_bytes, ty, big, &raw)?
    };
    Volume::new(dims, spacing, origin, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([3, 4, 5], [0.5, 1.0, 2.5], [1.0, -2.0, 3.5], |i, j, k| {
            (i as f32) - 2.0 * j as f32 + 0.25 * k as f32
        })
        .unwrap();
        let meta = dir.path().join("scan.json");
        write_volume(&meta, &v).unwrap();
        assert!(dir.path().join("scan.raw").exists());
        let text = std::fs::read_to_string(&meta).unwrap();
        assert!(text.contains("\"byte_order\": \"little\""));
        assert_eq!(read_volume(&meta).unwrap(), v);
    }

    #[test]
    fn raw_is_little_endian_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let v =
            Volume::from_fn([2, 2, 1], [1.0; 3], [0.0; 3], |i, j, _| (i + 10 * j) as f32).unwrap();
        let meta = dir.path().join("v.json");
        write_volume(&meta, &v).unwrap();
        let raw = std::fs::read(dir.path().join("v.raw")).unwrap();
        let vals: Vec<f32> = raw
            .chunks(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(vals, vec![0.0, 1.0, 10.0, 11.0]);
    }

    #[test]
    fn metaimage_short_header() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = "ObjectType = Image\nNDims = 3\nDimSize = 2 1 2\nElementSpacing = 0.7 0.7 2.5\n\
                   Offset = -10 -20 5\nTransformMatrix = 1 0 0 0 1 0 0 0 1\nElementType = MET_SHORT\n\
                   ElementByteOrderMSB = False\nElementDataFile = ct.raw\n";
        std::fs::write(dir.path().join("ct.mhd"), hdr).unwrap();
        let raw: Vec<u8> = [-1000i16, 40, 300, -5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        std::fs::write(dir.path().join("ct.raw"), raw).unwrap();
        let v = read_volume(&dir.path().join("ct.mhd")).unwrap();
        assert_eq!(v.dims(), [2, 1, 2]);
        assert_eq!(v.spacing(), [0.7, 0.7, 2.5]);
        assert_eq!(v.origin(), [-10.0, -20.0, 5.0]);
        assert_eq!(v.data(), &[-1000.0, 40.0, 300.0, -5.0]);
    }

    #[test]
    fn metaimage_local_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes =
            b"NDims = 3\nDimSize = 1 1 2\nElementType = MET_FLOAT\nElementDataFile = LOCAL\n"
                .to_vec();
        bytes.extend(1.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let p = dir.path().join("x.mha");
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn metaimage_rejects_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = "NDims = 3\nDimSize = 1 1 1\nTransformMatrix = 0 1 0 1 0 0 0 0 1\nElementType = MET_FLOAT\nElementDataFile = a.raw\n";
        let p = dir.path().join("a.mhd");
        std::fs::write(&p, hdr).unwrap();
        let err = read_volume(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
