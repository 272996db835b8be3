//! Binary little-endian PLY in the standard 3DGS vertex layout.
//!
//! Written field order:
//! `x y z nx ny nz f_dc_0..2 [f_rest_*] opacity scale_0..2 rot_0..3`,
//! all float32. Normals are written as zeros and ignored on load. Parameters
//! are quantized to f32 on save; loading yields exactly those f32 values, so
//! load → save round trips are byte-identical.
//!
//! The standard layout has no per-vertex origin field, so marker flags live in
//! a JSON sidecar (`<stem>.flags.json`) holding half-open index ranges.

use super::{sh_rest_len, Gaussian, GaussianCloud, Origin};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// What to do with non-finite values encountered on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonFinitePolicy {
    Error,
    Warn,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FlagsSidecar {
    version: u32,
    marker_ranges: Vec<(usize, usize)>,
}

fn sidecar_path(ply_path: &Path) -> PathBuf {
    ply_path.with_extension("flags.json")
}

/// Save a cloud to `path` (plus a flags sidecar when markers are present).
pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gaussian {i} has non-finite parameters; refusing to save"
            )));
        }
    }
    let rest_len = sh_rest_len(cloud.sh_degree);
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);

    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..rest_len {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    for name in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    for g in &cloud.gaussians {
        for v in &g.position {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        for _ in 0..3 {
            w.write_f32::<LittleEndian>(0.0)?; // normals
        }
        for v in &g.sh_dc {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        for v in &g.sh_rest {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        w.write_f32::<LittleEndian>(g.opacity_logit as f32)?;
        for v in &g.log_scale {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        for v in &g.rotation {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    w.flush()?;

    let ranges = cloud.marker_ranges();
    let sidecar = sidecar_path(path);
    if ranges.is_empty() {
        // Stale sidecars would mislabel a re-saved cloud.
        if sidecar.exists() {
            std::fs::remove_file(&sidecar)?;
        }
    } else {
        let json = serde_json::to_string_pretty(&FlagsSidecar {
            version: 1,
            marker_ranges: ranges,
        })?;
        std::fs::write(&sidecar, json)?;
    }
    Ok(())
}

/// Load a cloud, erroring on non-finite values.
pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    load_ply_with(path, NonFinitePolicy::Error)
}

/// Load a cloud with an explicit non-finite-value policy.
pub fn load_ply_with(path: &Path, policy: NonFinitePolicy) -> Result<GaussianCloud> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let (names, count) = parse_header(&mut r)?;
    let index_of = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("missing required property `{name}`")))
    };

    let ix = index_of("x")?;
    let iy = index_of("y")?;
    let iz = index_of("z")?;
    let idc = [index_of("f_dc_0")?, index_of("f_dc_1")?, index_of("f_dc_2")?];
    let iop = index_of("opacity")?;
    let isc = [index_of("scale_0")?, index_of("scale_1")?, index_of("scale_2")?];
    let irot = [
        index_of("rot_0")?,
        index_of("rot_1")?,
        index_of("rot_2")?,
        index_of("rot_3")?,
    ];
    let rest_count = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    let sh_degree = match rest_count {
        0 => 0u8,
        9 => 1,
        24 => 2,
        45 => 3,
        n => {
            return Err(Error::Format(format!(
                "unsupported f_rest property count {n} (expected 0, 9, 24 or 45)"
            )))
        }
    };
    let mut irest = Vec::with_capacity(rest_count);
    for i in 0..rest_count {
        irest.push(index_of(&format!("f_rest_{i}"))?);
    }

    let stride = names.len();
    let mut row = vec![0f32; stride];
    let mut gaussians = Vec::with_capacity(count);
    let mut warned = false;
    for vi in 0..count {
        for slot in row.iter_mut() {
            *slot = r.read_f32::<LittleEndian>().map_err(|_| {
                Error::Format(format!("truncated vertex data at vertex {vi}"))
            })?;
        }
        let g = Gaussian {
            position: Vector3::new(row[ix] as f64, row[iy] as f64, row[iz] as f64),
            rotation: [
                row[irot[0]] as f64,
                row[irot[1]] as f64,
                row[irot[2]] as f64,
                row[irot[3]] as f64,
            ],
            log_scale: Vector3::new(row[isc[0]] as f64, row[isc[1]] as f64, row[isc[2]] as f64),
            sh_dc: Vector3::new(row[idc[0]] as f64, row[idc[1]] as f64, row[idc[2]] as f64),
            sh_rest: irest.iter().map(|&i| row[i] as f64).collect(),
            opacity_logit: row[iop] as f64,
        };
        if !g.is_finite() {
            match policy {
                NonFinitePolicy::Error => {
                    return Err(Error::Validation(format!(
                        "vertex {vi} has non-finite parameters"
                    )))
                }
                NonFinitePolicy::Warn => {
                    if !warned {
                        eprintln!("warning: {} has non-finite vertices (first at {vi})", path.display());
                        warned = true;
                    }
                }
            }
        }
        gaussians.push(g);
    }

    let mut cloud = GaussianCloud {
        origin: vec![Origin::Original; gaussians.len()],
        gaussians,
        sh_degree,
    };

    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let flags: FlagsSidecar = serde_json::from_str(&text)?;
        for (s, e) in flags.marker_ranges {
            if e > cloud.len() || s > e {
                return Err(Error::Format(format!(
                    "sidecar range {s}..{e} out of bounds for {} vertices",
                    cloud.len()
                )));
            }
            for o in &mut cloud.origin[s..e] {
                *o = Origin::Marker;
            }
        }
    }
    Ok(cloud)
}

fn parse_header<R: Read>(r: &mut R) -> Result<(Vec<String>, usize)> {
    let mut line = Vec::new();
    let mut read_line = |r: &mut R| -> Result<String> {
        line.clear();
        loop {
            let mut b = [0u8; 1];
            let n = r.read(&mut b)?;
            if n == 0 {
                return Err(Error::Format("unexpected end of header".into()));
            }
            if b[0] == b'\n' {
                break;
            }
            line.push(b[0]);
            if line.len() > 4096 {
                return Err(Error::Format("header line too long".into()));
            }
        }
        Ok(String::from_utf8_lossy(&line).trim_end_matches('\r').to_string())
    };

    if read_line(r)? != "ply" {
        return Err(Error::Format("not a PLY file (missing `ply` magic)".into()));
    }
    let mut names = Vec::new();
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    loop {
        let l = read_line(r)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["format", fmt, "1.0"] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!(
                        "unsupported PLY format `{fmt}` (need binary_little_endian)"
                    )));
                }
            }
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| {
                    Error::Format(format!("bad vertex count `{n}`"))
                })?);
                in_vertex = true;
            }
            ["element", other, _] => {
                return Err(Error::Format(format!("unsupported element `{other}`")));
            }
            ["property", ty, name] if in_vertex => {
                if *ty != "float" {
                    return Err(Error::Format(format!(
                        "property `{name}` has unsupported type `{ty}` (need float)"
                    )));
                }
                names.push(name.to_string());
            }
            _ => {
                return Err(Error::Format(format!("unrecognized header line `{l}`")));
            }
        }
    }
    let count = count.ok_or_else(|| Error::Format("missing `element vertex` line".into()))?;
    Ok((names, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gscloud::param_hash;

    fn f32_exact(v: f64) -> f64 {
        v as f32 as f64
    }

    fn sample_cloud() -> GaussianCloud {
        let g0 = Gaussian {
            position: Vector3::new(f32_exact(0.125), f32_exact(-1.5), f32_exact(2.25)),
            rotation: [f32_exact(0.5), f32_exact(0.5), f32_exact(-0.5), f32_exact(0.5)],
            log_scale: Vector3::new(f32_exact(-1.25), f32_exact(-0.5), f32_exact(0.75)),
            sh_dc: Vector3::new(f32_exact(0.1), f32_exact(0.2), f32_exact(0.3)),
            sh_rest: Vec::new(),
            opacity_logit: f32_exact(1.5),
        };
        let mut g1 = g0.clone();
        g1.position.x = f32_exact(7.0);
        let mut cloud = GaussianCloud::new(vec![g0, g1], 0).unwrap();
        cloud.origin[1] = Origin::Marker;
        cloud
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = sample_cloud();
        save_ply(&cloud, &path).unwrap();
        let loaded = load_ply(&path).unwrap();
        assert_eq!(param_hash(&loaded), param_hash(&cloud));
        assert_eq!(loaded.origin, cloud.origin);
        // Load → save again: file bytes identical.
        let path2 = dir.path().join("cloud2.ply");
        save_ply(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn missing_opacity_property_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let header = "ply\nformat binary_little_endian 1.0\nelement vertex 0\n\
                      property float x\nproperty float y\nproperty float z\n\
                      property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n\
                      property float scale_0\nproperty float scale_1\nproperty float scale_2\n\
                      property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n\
                      end_header\n";
        std::fs::write(&path, header).unwrap();
        match load_ply(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("opacity"), "message: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn nan_position_fails_validation_unless_warn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ply");
        let mut cloud = sample_cloud();
        cloud.origin[1] = Origin::Original;
        save_ply(&cloud, &path).unwrap();
        // Corrupt the first float of the payload with a NaN bit pattern.
        let mut bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        bytes[header_end..header_end + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();

        assert!(matches!(load_ply(&path), Err(Error::Validation(_))));
        let loaded = load_ply_with(&path, NonFinitePolicy::Warn).unwrap();
        assert!(loaded.gaussians[0].position.x.is_nan());
    }

    #[test]
    fn save_rejects_non_finite_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cloud = sample_cloud();
        cloud.gaussians[0].opacity_logit = f64::NAN;
        assert!(save_ply(&cloud, &dir.path().join("x.ply")).is_err());
    }
}
