//! Point-cloud file formats.
//!
//! * CSV: one `x,y,z` line per point; a non-numeric first line is treated as a header.
//! * Binary: little-endian `u64` point count followed by `count` triples of `f64`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::IoError;
use crate::geometry::{PointCloud, Vec3};

pub fn read_csv<R: Read>(reader: R, frame: &str) -> Result<PointCloud, IoError> {
    let mut points = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == 3 => {
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(IoError::Parse {
                        line: idx + 1,
                        msg: "non-finite coordinate".into(),
                    });
                }
                points.push(Vec3::new(v[0], v[1], v[2]));
            }
            Ok(v) => {
                return Err(IoError::Parse {
                    line: idx + 1,
                    msg: format!("expected 3 fields, found {}", v.len()),
                })
            }
            // header line
            Err(_) if idx == 0 && points.is_empty() => continue,
            Err(e) => {
                return Err(IoError::Parse {
                    line: idx + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(PointCloud::new(frame, points))
}

pub fn write_csv<W: Write>(mut writer: W, pc: &PointCloud) -> Result<(), IoError> {
    writeln!(writer, "x,y,z")?;
    for p in &pc.points {
        writeln!(writer, "{},{},{}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut reader: R, frame: &str) -> Result<PointCloud, IoError> {
    let mut header = [0u8; 8];
    reader.read_exact(&mut header)?;
    let count = u64::from_le_bytes(header);
    let mut points = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut buf = [0u8; 24];
    for i in 0..count {
        if let Err(e) = reader.read_exact(&mut buf) {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                return Err(IoError::Truncated {
                    expected: count,
                    found: i,
                });
            }
            return Err(e.into());
        }
        let c = |k: usize| f64::from_le_bytes(buf[k * 8..k * 8 + 8].try_into().unwrap());
        points.push(Vec3::new(c(0), c(1), c(2)));
    }
    Ok(PointCloud::new(frame, points))
}

pub fn write_binary<W: Write>(mut writer: W, pc: &PointCloud) -> Result<(), IoError> {
    writer.write_all(&(pc.points.len() as u64).to_le_bytes())?;
    for p in &pc.points {
        for c in [p.x, p.y, p.z] {
            writer.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Picks the format from the extension: `.bin` is binary, anything else CSV.
pub fn load(path: &Path, frame: &str) -> Result<PointCloud, IoError> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        read_binary(BufReader::new(file), frame)
    } else {
        read_csv(file, frame)
    }
}

pub fn save(path: &Path, pc: &PointCloud) -> Result<(), IoError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e == "bin") {
        write_binary(file, pc)
    } else {
        write_csv(file, pc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_with_and_without_header() {
        let with = "x,y,z\n1,2,3\n4.5,-1e-3,0\n";
        let without = "1,2,3\n4.5,-1e-3,0\n";
        let a = read_csv(with.as_bytes(), "camera").unwrap();
        let b = read_csv(without.as_bytes(), "camera").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points[1], Vec3::new(4.5, -1e-3, 0.0));
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(matches!(
            read_csv("1,2,3\n1,2\n".as_bytes(), "c"),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("1,2,3\nnan,0,0\n".as_bytes(), "c"),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(read_csv("x,y,z\n".as_bytes(), "c").unwrap().is_empty());
    }

    #[test]
    fn binary_layout_is_count_prefixed_le() {
        let pc = PointCloud::new("c", vec![Vec3::new(1.0, 2.0, 3.0)]);
        let mut buf = Vec::new();
        write_binary(&mut buf, &pc).unwrap();
        assert_eq!(buf.len(), 8 + 24);
        assert_eq!(&buf[..8], &1u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1.0f64.to_le_bytes());
        assert!(matches!(
            read_binary(&buf[..20], "c"),
            Err(IoError::Truncated { expected: 1, found: 0 })
        ));
    }

    proptest! {
        #[test]
        fn formats_round_trip(pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 0..50)) {
            let pc = PointCloud::new("c", pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect());
            let mut bin = Vec::new();
            write_binary(&mut bin, &pc).unwrap();
            prop_assert_eq!(read_binary(&bin[..], "c").unwrap(), pc.clone());
            let mut csv = Vec::new();
            write_csv(&mut csv, &pc).unwrap();
            prop_assert_eq!(read_csv(&csv[..], "c").unwrap(), pc);
        }
    }
}
