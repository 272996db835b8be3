//! Real spherical-harmonic color basis up to degree 3, with derivatives.
//!
//! Coefficient layout follows the 3DGS file convention: `sh_rest` is
//! channel-major (all higher-order coefficients of R, then G, then B).

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions beyond DC for a degree.
pub fn basis_rest_count(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1) - 1
}

/// Evaluate the non-DC basis functions at a unit direction.
pub fn basis_rest(degree: u8, dir: &Vector3<f64>) -> Vec<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = Vec::with_capacity(basis_rest_count(degree));
    if degree >= 1 {
        b.push(-SH_C1 * y);
        b.push(SH_C1 * z);
        b.push(-SH_C1 * x);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(SH_C2[0] * x * y);
        b.push(SH_C2[1] * y * z);
        b.push(SH_C2[2] * (2.0 * zz - xx - yy));
        b.push(SH_C2[3] * x * z);
        b.push(SH_C2[4] * (xx - yy));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(SH_C3[0] * y * (3.0 * xx - yy));
        b.push(SH_C3[1] * x * y * z);
        b.push(SH_C3[2] * y * (4.0 * zz - xx - yy));
        b.push(SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
        b.push(SH_C3[4] * x * (4.0 * zz - xx - yy));
        b.push(SH_C3[5] * z * (xx - yy));
        b.push(SH_C3[6] * x * (xx - 3.0 * yy));
    }
    b
}

/// ∂basis/∂dir for each non-DC basis function.
pub fn basis_rest_derivs(degree: u8, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut d = Vec::with_capacity(basis_rest_count(degree));
    if degree >= 1 {
        d.push(Vector3::new(0.0, -SH_C1, 0.0));
        d.push(Vector3::new(0.0, 0.0, SH_C1));
        d.push(Vector3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        d.push(SH_C2[0] * Vector3::new(y, x, 0.0));
        d.push(SH_C2[1] * Vector3::new(0.0, z, y));
        d.push(SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z));
        d.push(SH_C2[3] * Vector3::new(z, 0.0, x));
        d.push(SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        d.push(SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0));
        d.push(SH_C3[1] * Vector3::new(y * z, x * z, x * y));
        d.push(SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z));
        d.push(SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy));
        d.push(SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z));
        d.push(SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy));
        d.push(SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0));
    }
    d
}

/// Color before the [0,1] clamp.
pub fn color_raw(
    sh_dc: &Vector3<f64>,
    sh_rest: &[f64],
    degree: u8,
    view_dir: &Vector3<f64>,
) -> [f64; 3] {
    let mut c = [
        0.5 + SH_C0 * sh_dc.x,
        0.5 + SH_C0 * sh_dc.y,
        0.5 + SH_C0 * sh_dc.z,
    ];
    if degree > 0 {
        let basis = basis_rest(degree, view_dir);
        let per = basis.len();
        for ch in 0..3 {
            for (k, b) in basis.iter().enumerate() {
                c[ch] += b * sh_rest[ch * per + k];
            }
        }
    }
    c
}

/// Color clamped into [0,1] at evaluation, per channel.
pub fn sh_to_color(
    sh_dc: &Vector3<f64>,
    sh_rest: &[f64],
    degree: u8,
    view_dir: &Vector3<f64>,
) -> [f64; 3] {
    let raw = color_raw(sh_dc, sh_rest, degree, view_dir);
    [
        raw[0].clamp(0.0, 1.0),
        raw[1].clamp(0.0, 1.0),
        raw[2].clamp(0.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dc_offset_gives_mid_gray() {
        let c = sh_to_color(&Vector3::zeros(), &[], 0, &Vector3::z());
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn dc_saturates_red_channel() {
        // 0.5 / SH_C0 ≈ 1.77245: raw red = 1.0 exactly, clamps stay inert.
        let c = sh_to_color(&Vector3::new(1.77245, 0.0, 0.0), &[], 0, &Vector3::z());
        assert!((c[0] - 1.0).abs() < 1e-4, "red = {}", c[0]);
        assert_eq!(c[1], 0.5);
    }

    #[test]
    fn degree0_ignores_view_direction() {
        let dc = Vector3::new(0.3, -0.2, 0.9);
        let a = sh_to_color(&dc, &[], 0, &Vector3::z());
        let b = sh_to_color(&dc, &[], 0, &Vector3::new(0.6, -0.64, 0.48).normalize());
        assert_eq!(a, b);
    }

    #[test]
    fn basis_derivs_match_finite_differences() {
        let dir = Vector3::new(0.3, -0.5, 0.81).normalize();
        for degree in 1..=3u8 {
            let derivs = basis_rest_derivs(degree, &dir);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = dir;
                dp[axis] += h;
                let mut dm = dir;
                dm[axis] -= h;
                let bp = basis_rest(degree, &dp);
                let bm = basis_rest(degree, &dm);
                for (k, d) in derivs.iter().enumerate() {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert_relative_eq!(d[axis], fd, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }
}
