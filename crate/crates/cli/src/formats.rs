//! Point-cloud and label file formats.
//!
//! Clouds: whitespace-separated XYZ text (one point per line) or the
//! binary container `PCF1` (magic, little-endian u32 count, f64 triplets).
//! Labels: text, one integer per line, aligned with the cloud's points.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use pointkey_core::geometry::{PointCloud, Vec3};
use pointkey_core::metrics::SemanticLabels;

use crate::error::{CliError, Result};

pub const PCF_MAGIC: &[u8; 4] = b"PCF1";

/// Parses whitespace XYZ text; errors carry the 1-based line number.
pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points: Vec<Vec3> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CliError::Data(format!(
                "{origin}:{}: expected 3 coordinates, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| {
                CliError::Data(format!("{origin}:{}: bad number '{f}': {e}", lineno + 1))
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points)
        .map_err(|e| CliError::Data(format!("{origin}: {e}")))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_xyz(&text, &path.display().to_string())
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the binary `PCF1` container.
pub fn read_pcf(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    decode_pcf(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn decode_pcf(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() < 8 || &bytes[..4] != PCF_MAGIC {
        return Err("not a PCF1 file".into());
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + count * 24;
    if bytes.len() != expected {
        return Err(format!(
            "truncated: {} bytes for {count} points (expected {expected})",
            bytes.len()
        ));
    }
    let mut points = Vec::with_capacity(count);
    let mut cursor = &bytes[8..];
    for _ in 0..count {
        let mut p = [0.0; 3];
        for slot in p.iter_mut() {
            let mut buf = [0u8; 8];
            cursor.read_exact(&mut buf).map_err(|e| e.to_string())?;
            *slot = f64::from_le_bytes(buf);
        }
        points.push(p);
    }
    PointCloud::new(points).map_err(|e| e.to_string())
}

pub fn write_pcf(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + cloud.n() * 24);
    bytes.extend_from_slice(PCF_MAGIC);
    bytes.extend_from_slice(&(cloud.n() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a cloud by extension: `.pcf` binary, anything else XYZ text.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pcf") => read_pcf(path),
        _ => read_xyz(path),
    }
}

pub fn read_labels(path: &Path, n_points: usize) -> Result<SemanticLabels> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        labels.push(trimmed.parse::<u32>().map_err(|e| {
            CliError::Data(format!(
                "{}:{}: bad label '{trimmed}': {e}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    if labels.len() != n_points {
        return Err(CliError::Data(format!(
            "{}: {} labels for {} points",
            path.display(),
            labels.len(),
            n_points
        )));
    }
    SemanticLabels::new(labels).map_err(|e| CliError::Data(e.to_string()))
}

pub fn write_labels(path: &Path, labels: &SemanticLabels) -> Result<()> {
    let mut out = String::new();
    for l in labels.labels() {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_roundtrip_and_errors() {
        let cloud = parse_xyz("0 0 0\n1.5 -2 3e-2\n", "test").unwrap();
        assert_eq!(cloud.n(), 2);
        assert_eq!(cloud.points()[1], [1.5, -2.0, 0.03]);

        let err = parse_xyz("0 0 0\n1 2\n", "f").unwrap_err();
        assert!(err.to_string().contains("f:2"), "{err}");

        let err = parse_xyz("0 0 zebra\n", "f").unwrap_err();
        assert!(err.to_string().contains("f:1"), "{err}");
    }

    #[test]
    fn pcf_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pcf");
        let cloud = PointCloud::new(vec![
            [0.1, -0.25, 1.0 / 3.0],
            [f64::MIN_POSITIVE, 1e300, -0.0],
        ])
        .unwrap();
        write_pcf(&path, &cloud).unwrap();
        let back = read_pcf(&path).unwrap();
        assert_eq!(cloud, back);

        // corrupt magic
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_pcf(&path).is_err());
    }

    #[test]
    fn labels_roundtrip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.labels");
        let labels = SemanticLabels::new(vec![0, 1, 2, 1]).unwrap();
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path, 4).unwrap(), labels);
        assert!(read_labels(&path, 5).is_err());
    }
}
