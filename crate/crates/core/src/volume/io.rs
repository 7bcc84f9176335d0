//! Raw little-endian voxel files with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Volume, VolumeError};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeDtype {
    I16,
    F32,
}

/// Sidecar describing a raw voxel file (x-fastest, little-endian).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: VolumeDtype,
    pub byte_order: String,
    /// Raw file name, relative to the sidecar.
    pub data_file: String,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Volume {
    /// Writes `<stem>.json` and `<stem>.raw` next to each other and returns the sidecar path.
    pub fn save(&self, dir: &Path, stem: &str, dtype: VolumeDtype) -> Result<PathBuf, VolumeError> {
        fs::create_dir_all(dir)?;
        let raw_name = format!("{stem}.raw");
        let bytes: Vec<u8> = match dtype {
            VolumeDtype::I16 => self
                .values()
                .iter()
                .flat_map(|&v| (v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes())
                .collect(),
            VolumeDtype::F32 => self.values().iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        fs::write(dir.join(&raw_name), bytes)?;
        let o = self.origin();
        let header = VolumeHeader {
            schema_version: SCHEMA_VERSION,
            dims: self.dims(),
            spacing: self.spacing(),
            origin: [o.x, o.y, o.z],
            dtype,
            byte_order: "LE".into(),
            data_file: raw_name,
        };
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&header).map_err(|e| VolumeError::Format(e.to_string()))?,
        )?;
        Ok(json_path)
    }

    pub fn load(sidecar: &Path) -> Result<Volume, VolumeError> {
        let header: VolumeHeader = serde_json::from_slice(&fs::read(sidecar)?)
            .map_err(|e| VolumeError::Format(format!("{}: {e}", sidecar.display())))?;
        if header.byte_order != "LE" {
            return Err(VolumeError::Format(format!(
                "unsupported byte order {}",
                header.byte_order
            )));
        }
        let raw_path = sidecar
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data_file);
        let bytes = fs::read(raw_path)?;
        let n = header.dims.iter().product::<usize>();
        let values: Vec<f32> = match header.dtype {
            VolumeDtype::I16 => {
                if bytes.len() != 2 * n {
                    return Err(VolumeError::Format(format!("expected {} bytes, got {}", 2 * n, bytes.len())));
                }
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                    .collect()
            }
            VolumeDtype::F32 => {
                if bytes.len() != 4 * n {
                    return Err(VolumeError::Format(format!("expected {} bytes, got {}", 4 * n, bytes.len())));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            }
        };
        Volume::new(header.dims, header.spacing, Vector3::from(header.origin), values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let vals = (0..8 * 9 * 10).map(|i| (i as f32) * 1.5 - 300.0).collect();
        Volume::centered([8, 9, 10], [1.0, 1.25, 2.0], vals).unwrap()
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp();
        let p = v.save(dir.path(), "ct", VolumeDtype::F32).unwrap();
        assert_eq!(Volume::load(&p).unwrap(), v);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"byte_order\": \"LE\""));
        assert_eq!(fs::metadata(dir.path().join("ct.raw")).unwrap().len(), 4 * 720);
    }

    #[test]
    fn i16_round_trip_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp();
        let p = v.save(dir.path(), "ct16", VolumeDtype::I16).unwrap();
        let back = Volume::load(&p).unwrap();
        for (a, b) in v.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5);
        }
        // first voxel is -300 HU, x-fastest little-endian
        let raw = fs::read(dir.path().join("ct16.raw")).unwrap();
        assert_eq!(i16::from_le_bytes([raw[0], raw[1]]), -300);
        // -298.5 rounds half away from zero
        assert_eq!(i16::from_le_bytes([raw[2], raw[3]]), -299);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ramp().save(dir.path(), "bad", VolumeDtype::F32).unwrap();
        fs::write(dir.path().join("bad.raw"), [0u8; 10]).unwrap();
        assert!(matches!(Volume::load(&p), Err(VolumeError::Format(_))));
    }
}
