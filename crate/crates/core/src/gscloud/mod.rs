//! Data model for 3D Gaussians and bit-exact serialization in the de-facto
//! 3DGS point-cloud layout.
//!
//! Parameters are stored in their unconstrained optimizer forms: log-scale,
//! pre-sigmoid opacity, raw (lazily normalized) quaternion. The PLY layout
//! stores the same raw forms as float32, so a load → save round trip is
//! byte-identical.

mod ply;

pub use ply::{load_ply, load_ply_with, save_ply, NonFinitePolicy};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Logistic squash used for opacity.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`], with clamping away from the asymptotes.
pub fn logit(a: f64) -> f64 {
    let a = a.clamp(1e-9, 1.0 - 1e-9);
    (a / (1.0 - a)).ln()
}

/// Whether a Gaussian belongs to the source model or is an embedded marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    Original,
    Marker,
}

/// One anisotropic 3D Gaussian.
///
/// `rotation` is a raw `[w, x, y, z]` quaternion (file order `rot_0..rot_3`);
/// it is normalized on demand when a covariance is built. `sh_rest` holds the
/// higher-order SH coefficients in file order: channel-major, i.e. all
/// `(degree+1)^2 - 1` coefficients of R, then G, then B.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub sh_dc: Vector3<f64>,
    pub sh_rest: Vec<f64>,
    pub opacity_logit: f64,
}

impl Gaussian {
    /// Isotropic helper used by toy scenes and tests.
    pub fn isotropic(position: Vector3<f64>, sigma: f64, rgb_dc: Vector3<f64>, alpha: f64) -> Self {
        Gaussian {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(sigma.ln()),
            sh_dc: rgb_dc,
            sh_rest: Vec::new(),
            opacity_logit: logit(alpha),
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.sh_dc.iter().all(|v| v.is_finite())
            && self.sh_rest.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }
}

/// Number of `f_rest` coefficients for a given SH degree (all channels).
pub fn sh_rest_len(degree: u8) -> usize {
    let per_channel = (degree as usize + 1) * (degree as usize + 1) - 1;
    3 * per_channel
}

/// A set of Gaussians sharing one SH degree, with per-Gaussian origin flags.
///
/// Clouds are plain values: safe for concurrent reads, mutated only by
/// building a replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub origin: Vec<Origin>,
    pub sh_degree: u8,
}

impl GaussianCloud {
    /// Build a cloud of all-ORIGINAL Gaussians, validating SH layout.
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8) -> Result<Self> {
        if sh_degree > 3 {
            return Err(Error::InvalidParameter(format!(
                "sh_degree {sh_degree} exceeds the supported maximum of 3"
            )));
        }
        let want = sh_rest_len(sh_degree);
        for (i, g) in gaussians.iter().enumerate() {
            if g.sh_rest.len() != want {
                return Err(Error::Mismatch(format!(
                    "gaussian {i} has {} f_rest coefficients, expected {want} for degree {sh_degree}",
                    g.sh_rest.len()
                )));
            }
        }
        let origin = vec![Origin::Original; gaussians.len()];
        Ok(GaussianCloud {
            gaussians,
            origin,
            sh_degree,
        })
    }

    /// Same as [`GaussianCloud::new`] but flags every Gaussian as a marker.
    pub fn new_markers(gaussians: Vec<Gaussian>, sh_degree: u8) -> Result<Self> {
        let mut cloud = Self::new(gaussians, sh_degree)?;
        cloud.origin.fill(Origin::Marker);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Extract the subset carrying the given origin flag.
    pub fn filter_origin(&self, which: Origin) -> GaussianCloud {
        let mut gaussians = Vec::new();
        for (g, &o) in self.gaussians.iter().zip(&self.origin) {
            if o == which {
                gaussians.push(g.clone());
            }
        }
        GaussianCloud {
            origin: vec![which; gaussians.len()],
            gaussians,
            sh_degree: self.sh_degree,
        }
    }

    /// Indices flagged MARKER, as half-open ranges for the sidecar file.
    pub fn marker_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::new();
        let mut start = None;
        for (i, &o) in self.origin.iter().enumerate() {
            match (o, start) {
                (Origin::Marker, None) => start = Some(i),
                (Origin::Original, Some(s)) => {
                    ranges.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            ranges.push((s, self.origin.len()));
        }
        ranges
    }

    /// Axis-aligned bounding box diagonal of the positions (0 for ≤1 point).
    pub fn bbox_diagonal(&self) -> f64 {
        if self.gaussians.len() < 2 {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.position);
            hi = hi.sup(&g.position);
        }
        (hi - lo).norm()
    }
}

/// FNV-1a over the exact bit patterns of every parameter. Used to assert the
/// frozen-original contract.
pub fn param_hash(cloud: &GaussianCloud) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for g in &cloud.gaussians {
        g.position.iter().for_each(|&v| eat(v));
        g.rotation.iter().for_each(|&v| eat(v));
        g.log_scale.iter().for_each(|&v| eat(v));
        g.sh_dc.iter().for_each(|&v| eat(v));
        g.sh_rest.iter().for_each(|&v| eat(v));
        eat(g.opacity_logit);
    }
    h
}

/// Normalize a raw quaternion, returning the unit quaternion and the input norm.
pub fn normalize_quat(q: &[f64; 4]) -> Result<([f64; 4], f64)> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "quaternion has non-finite components".into(),
        ));
    }
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n <= 0.0 {
        return Err(Error::InvalidParameter("zero-norm quaternion".into()));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// ∂R/∂w, ∂R/∂x, ∂R/∂y, ∂R/∂z for a unit quaternion (derivatives taken in the
/// normalized coordinates; chain through [`normalize_quat`] separately).
pub fn rotation_matrix_derivs(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Σ = R · diag(exp(2·log_scale)) · Rᵀ for the (normalized) quaternion.
///
/// The result is explicitly symmetrized so downstream eigen-decompositions
/// see symmetry to machine precision.
pub fn build_covariance(q: &[f64; 4], log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if log_scale.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "log_scale has non-finite components".into(),
        ));
    }
    let (qn, _) = normalize_quat(q)?;
    let r = rotation_matrix(&qn);
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * d * r.transpose();
    Ok(0.5 * (sigma + sigma.transpose()))
}

/// Concatenate original and marker clouds; originals keep their bits.
pub fn union(original: &GaussianCloud, markers: &GaussianCloud) -> Result<GaussianCloud> {
    if original.sh_degree != markers.sh_degree {
        return Err(Error::Mismatch(format!(
            "sh_degree mismatch: original {} vs markers {}",
            original.sh_degree, markers.sh_degree
        )));
    }
    let mut gaussians = original.gaussians.clone();
    gaussians.extend(markers.gaussians.iter().cloned());
    let mut origin = vec![Origin::Original; original.len()];
    origin.extend(std::iter::repeat(Origin::Marker).take(markers.len()));
    Ok(GaussianCloud {
        gaussians,
        origin,
        sh_degree: original.sh_degree,
    })
}
