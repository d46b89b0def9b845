//! Reader and writer for the subset of NRRD used by the navigation system:
//! 3D, attached raw little-endian payload, `short` or `float` voxels.
//!
//! Geometry is written as `space directions` (direction columns scaled by
//! spacing) plus `space origin`. The writer also stores the exact spacing and
//! direction as key/value pairs so that a round trip is bit-exact even for
//! oblique directions; other readers ignore them.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::scalar::{Mat3, Vec3};
use crate::volume::{Modality, ScalarType, Volume, VolumeError};

const MAGIC_PREFIX: &str = "NRRD000";
const KV_SPACING: &str = "petnav_spacings";
const KV_DIRECTION: &str = "petnav_direction";
const KV_MODALITY: &str = "modality";

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path)?;
    parse_nrrd(&bytes)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let bytes = encode_nrrd(vol);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

fn fmt_vec(v: &Vec3<f64>) -> String {
    format!("({},{},{})", v[0], v[1], v[2])
}

pub fn encode_nrrd(vol: &Volume) -> Vec<u8> {
    let dims = vol.dims();
    let sp = vol.spacing();
    let dir = vol.direction();
    let type_name = match vol.scalar_type() {
        ScalarType::Int16 => "short",
        ScalarType::Float32 => "float",
    };
    let cols: Vec<String> = (0..3).map(|a| fmt_vec(&(dir.column(a) * sp[a]))).collect();
    let mut h = String::new();
    h.push_str("NRRD0004\n");
    h.push_str("# written by petnav\n");
    h.push_str(&format!("type: {type_name}\n"));
    h.push_str("dimension: 3\n");
    h.push_str("space dimension: 3\n");
    h.push_str(&format!("sizes: {} {} {}\n", dims[0], dims[1], dims[2]));
    h.push_str(&format!("space directions: {}\n", cols.join(" ")));
    h.push_str("kinds: domain domain domain\n");
    h.push_str("endian: little\n");
    h.push_str("encoding: raw\n");
    h.push_str(&format!("space origin: {}\n", fmt_vec(&vol.origin())));
    h.push_str(&format!("{KV_MODALITY}:={}\n", vol.modality().as_str()));
    h.push_str(&format!("{KV_SPACING}:={} {} {}\n", sp[0], sp[1], sp[2]));
    let d: Vec<String> = dir.transpose().iter().map(|v| v.to_string()).collect();
    h.push_str(&format!("{KV_DIRECTION}:={}\n", d.join(" ")));
    h.push('\n');

    let mut out = h.into_bytes();
    out.reserve(vol.len() * vol.scalar_type().byte_size());
    match vol.scalar_type() {
        ScalarType::Int16 => vol.data().iter().for_each(|&v| out.extend_from_slice(&(v as i16).to_le_bytes())),
        ScalarType::Float32 => vol.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

fn parse_err(msg: impl Into<String>) -> VolumeError {
    VolumeError::Parse(msg.into())
}

fn parse_f64s(s: &str) -> Result<Vec<f64>, VolumeError> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number '{t}'"))))
        .collect()
}

/// Parses `(a,b,c)` groups; `none` entries are rejected.
fn parse_vectors(s: &str) -> Result<Vec<Vec3<f64>>, VolumeError> {
    let mut out = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if !rest.starts_with('(') {
            return Err(parse_err(format!("expected '(' in vector list '{s}'")));
        }
        let end = rest.find(')').ok_or_else(|| parse_err("unterminated vector"))?;
        let parts: Vec<f64> = rest[1..end]
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| parse_err(format!("bad vector component '{t}'"))))
            .collect::<Result<_, _>>()?;
        if parts.len() != 3 {
            return Err(parse_err("vectors must have 3 components"));
        }
        out.push(Vec3::new(parts[0], parts[1], parts[2]));
        rest = rest[end + 1..].trim_start();
    }
    Ok(out)
}

pub fn parse_nrrd(bytes: &[u8]) -> Result<Volume, VolumeError> {
    // header ends at the first blank line
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("header not terminated by a blank line"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| parse_err("header is not UTF-8"))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        pos += nl + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line.to_string());
    }
    let payload = &bytes[pos..];

    let magic = lines.first().ok_or_else(|| parse_err("empty header"))?;
    if !magic.starts_with(MAGIC_PREFIX) {
        return Err(parse_err(format!("bad magic '{magic}'")));
    }

    let mut scalar_type = None;
    let mut dimension = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut spacings: Option<Vec<f64>> = None;
    let mut directions: Option<Vec<Vec3<f64>>> = None;
    let mut origin: Option<Vec3<f64>> = None;
    let mut encoding = None;
    let mut endian = None;
    let mut modality = Modality::Ct;
    let mut kv_spacing: Option<Vec<f64>> = None;
    let mut kv_direction: Option<Vec<f64>> = None;

    for line in &lines[1..] {
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(":=") {
            match k.trim() {
                KV_MODALITY => {
                    modality = Modality::parse(v).ok_or_else(|| parse_err(format!("unknown modality '{v}'")))?
                }
                KV_SPACING => kv_spacing = Some(parse_f64s(v)?),
                KV_DIRECTION => kv_direction = Some(parse_f64s(v)?),
                _ => {}
            }
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| parse_err(format!("malformed header line '{line}'")))?;
        let v = v.trim();
        match k.trim() {
            "type" => {
                scalar_type = Some(match v {
                    "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => ScalarType::Int16,
                    "float" => ScalarType::Float32,
                    other => return Err(VolumeError::Unsupported(format!("scalar type '{other}'"))),
                })
            }
            "dimension" => dimension = Some(v.parse::<usize>().map_err(|_| parse_err("bad dimension"))?),
            "sizes" => {
                sizes = Some(
                    v.split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|_| parse_err(format!("bad size '{t}'"))))
                        .collect::<Result<_, _>>()?,
                )
            }
            "spacings" => spacings = Some(parse_f64s(v)?),
            "space directions" => directions = Some(parse_vectors(v)?),
            "space origin" => {
                let o = parse_vectors(v)?;
                if o.len() != 1 {
                    return Err(parse_err("space origin must be a single vector"));
                }
                origin = Some(o[0]);
            }
            "encoding" => encoding = Some(v.to_string()),
            "endian" => endian = Some(v.to_string()),
            "space" | "space dimension" | "kinds" | "content" | "space units" | "units" | "centerings" | "labels" => {}
            "data file" | "datafile" => return Err(VolumeError::Unsupported("detached data files".into())),
            other => return Err(parse_err(format!("unknown field '{other}'"))),
        }
    }

    let scalar_type = scalar_type.ok_or_else(|| parse_err("missing 'type'"))?;
    if dimension != Some(3) {
        return Err(parse_err(format!("dimension must be 3, got {dimension:?}")));
    }
    let sizes = sizes.ok_or_else(|| parse_err("missing 'sizes'"))?;
    if sizes.len() != 3 {
        return Err(parse_err("'sizes' must have 3 entries"));
    }
    let dims = [sizes[0], sizes[1], sizes[2]];
    match encoding.as_deref() {
        Some("raw") => {}
        Some(other) => return Err(VolumeError::Unsupported(format!("encoding '{other}'"))),
        None => return Err(parse_err("missing 'encoding'")),
    }
    if scalar_type.byte_size() > 1 {
        match endian.as_deref() {
            Some("little") | None => {}
            Some(other) => return Err(VolumeError::Unsupported(format!("endian '{other}'"))),
        }
    }

    let (spacing, direction) = match (directions, spacings) {
        (Some(cols), None) => {
            if cols.len() != 3 {
                return Err(parse_err("'space directions' must have 3 vectors"));
            }
            let sp = Vec3::new(cols[0].norm(), cols[1].norm(), cols[2].norm());
            let dir = Mat3::from_columns(&[cols[0] / sp[0], cols[1] / sp[1], cols[2] / sp[2]]);
            exact_geometry(sp, dir, kv_spacing.as_deref(), kv_direction.as_deref())
        }
        (None, Some(s)) => {
            if s.len() != 3 {
                return Err(parse_err("'spacings' must have 3 entries"));
            }
            (Vec3::new(s[0], s[1], s[2]), Mat3::identity())
        }
        (Some(_), Some(_)) => return Err(parse_err("both 'spacings' and 'space directions' given")),
        (None, None) => return Err(parse_err("missing spacing ('spacings' or 'space directions')")),
    };
    let origin = origin.unwrap_or_else(Vec3::zeros);

    let n: usize = dims.iter().product();
    let expected = n * scalar_type.byte_size();
    if payload.len() != expected {
        return Err(VolumeError::DimensionMismatch { expected, actual: payload.len() });
    }
    let data: Vec<f64> = match scalar_type {
        ScalarType::Int16 => payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        ScalarType::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    Volume::new(dims, spacing, origin, direction, data, modality, scalar_type)
}

/// Prefers the exact key/value geometry when it agrees with `space directions`.
fn exact_geometry(sp: Vec3<f64>, dir: Mat3<f64>, kv_sp: Option<&[f64]>, kv_dir: Option<&[f64]>) -> (Vec3<f64>, Mat3<f64>) {
    if let (Some(s), Some(d)) = (kv_sp, kv_dir) {
        if s.len() == 3 && d.len() == 9 {
            let s = Vec3::new(s[0], s[1], s[2]);
            let d = Mat3::from_row_slice(d);
            let agrees = (0..3).all(|a| ((d.column(a) * s[a]) - dir.column(a) * sp[a]).norm() <= 1e-9 * (1.0 + sp[a]));
            if agrees {
                return (s, d);
            }
        }
    }
    (sp, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::axis_angle;

    fn tiny() -> Volume {
        Volume::new([2, 2, 2], Vec3::repeat(1.0), Vec3::zeros(), Mat3::identity(), (0..8).map(|v| v as f64).collect(), Modality::Ct, ScalarType::Int16).unwrap()
    }

    #[test]
    fn readback_of_tiny_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.nrrd");
        save_volume(&tiny(), &path).unwrap();
        let v = load_volume(&path).unwrap();
        assert_eq!(v.data()[7], 7.0);
        assert_eq!(v, tiny());
    }

    #[test]
    fn hand_written_header_with_spacings() {
        let mut bytes = b"NRRD0004\ntype: short\ndimension: 3\nsizes: 512 512 127\nspacings: 1.5 1.5 2.0\nencoding: raw\nendian: little\n\n".to_vec();
        bytes.resize(bytes.len() + 512 * 512 * 127 * 2, 0);
        let v = parse_nrrd(&bytes).unwrap();
        assert_eq!(v.dims(), [512, 512, 127]);
        assert_eq!(v.spacing(), Vec3::new(1.5, 1.5, 2.0));
        assert_eq!(v.direction(), Mat3::identity());
        assert_eq!(v.origin(), Vec3::zeros());
    }

    #[test]
    fn payload_shorter_than_header() {
        let mut bytes = b"NRRD0004\ntype: short\ndimension: 3\nsizes: 2 2 2\nspacings: 1 1 1\nencoding: raw\n\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(14));
        assert!(matches!(parse_nrrd(&bytes), Err(VolumeError::DimensionMismatch { expected: 16, actual: 14 })));
    }

    #[test]
    fn malformed_and_unsupported() {
        assert!(matches!(parse_nrrd(b"P6\n\n"), Err(VolumeError::Parse(_))));
        assert!(matches!(parse_nrrd(b"NRRD0004\ntype: short\n"), Err(VolumeError::Parse(_))));
        let gz = b"NRRD0004\ntype: short\ndimension: 3\nsizes: 1 1 1\nspacings: 1 1 1\nencoding: gzip\n\n\0\0";
        assert!(matches!(parse_nrrd(gz), Err(VolumeError::Unsupported(_))));
        let dbl = b"NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\nspacings: 1 1 1\nencoding: raw\n\n";
        assert!(matches!(parse_nrrd(dbl), Err(VolumeError::Unsupported(_))));
        let four_d = b"NRRD0004\ntype: short\ndimension: 4\nsizes: 1 1 1 1\nencoding: raw\n\n\0\0";
        assert!(matches!(parse_nrrd(four_d), Err(VolumeError::Parse(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_volume(&tiny(), "/nonexistent-dir/sub/v.nrrd").unwrap_err();
        assert!(matches!(err, VolumeError::Io(_)));
    }

    #[test]
    fn oblique_direction_round_trips_exactly() {
        let dir = axis_angle(&Vec3::new(0.3, -0.7, 1.1), 0.9);
        let v = Volume::new([3, 2, 2], Vec3::new(0.98, 0.98, 1.0), Vec3::new(-12.25, 3.5, 0.125), dir, (0..12).map(|x| x as f64 * 0.5).collect(), Modality::InterventionalCt, ScalarType::Float32).unwrap();
        let back = parse_nrrd(&encode_nrrd(&v)).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn foreign_space_directions_without_exact_keys() {
        let mut bytes = b"NRRD0004\ntype: float\ndimension: 3\nspace: left-posterior-superior\nsizes: 1 1 2\nspace directions: (0,2,0) (-2,0,0) (0,0,3)\nspace origin: (1,2,3)\nencoding: raw\nendian: little\n\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&2.5f32.to_le_bytes());
        let v = parse_nrrd(&bytes).unwrap();
        assert_eq!(v.spacing(), Vec3::new(2.0, 2.0, 3.0));
        assert_eq!(v.index_to_world(&Vec3::new(1.0, 0.0, 0.0)), Vec3::new(1.0, 4.0, 3.0));
        assert_eq!(v.data(), &[1.5, 2.5]);
    }
}
