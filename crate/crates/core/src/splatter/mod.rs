//! Differentiable pinhole-camera Gaussian splatting renderer.
//!
//! Per-pixel exact evaluation (no tile binning): desk-scale images make
//! O(pixels × overlapping splats) acceptable and keep the gradient path
//! simple enough to verify against finite differences.

mod grads;
mod image;
mod sh;

pub use self::image::Image;
pub use grads::{render_squared_grads, render_with_grads, CloudGrads};
pub use sh::{basis_rest, basis_rest_count, basis_rest_derivs, color_raw, sh_to_color, SH_C0};

use crate::error::{Error, Result};
use crate::gscloud::{
    build_covariance, normalize_quat, rotation_matrix, Gaussian, GaussianCloud,
};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Splats closer than this camera-z are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass floor added to the diagonal of every projected covariance (px²).
pub const LOW_PASS_FLOOR: f64 = 0.3;
/// Per-splat opacity ceiling during compositing.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Opacities below this contribute nothing.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Footprint radius multiplier used for culling and bounding boxes.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Camera frame: x right, y down, z forward. A world point maps to
/// `t = rotation · p + translation`, then to pixel `(fx·tx/tz + cx, fy·ty/tz + cy)`.
/// Pixels are sampled at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera at `eye` looking toward `target`, `up` as the world up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl From<CameraJson> for Camera {
    fn from(j: CameraJson) -> Self {
        Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            rotation: Matrix3::new(
                j.rotation[0][0],
                j.rotation[0][1],
                j.rotation[0][2],
                j.rotation[1][0],
                j.rotation[1][1],
                j.rotation[1][2],
                j.rotation[2][0],
                j.rotation[2][1],
                j.rotation[2][2],
            ),
            translation: Vector3::new(j.translation[0], j.translation[1], j.translation[2]),
        }
    }
}

/// Write a camera set as a JSON array (row-major rotation).
pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let arr: Vec<CameraJson> = cameras.iter().map(CameraJson::from).collect();
    let json = serde_json::to_string_pretty(&arr)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    let arr: Vec<CameraJson> = serde_json::from_str(&text)?;
    for (i, c) in arr.iter().enumerate() {
        if c.fx <= 0.0 || c.fy <= 0.0 || c.width == 0 || c.height == 0 {
            return Err(Error::Validation(format!(
                "camera {i} has non-positive intrinsics or size"
            )));
        }
    }
    Ok(arr.into_iter().map(Camera::from).collect())
}

/// A Gaussian projected into one view.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Projected covariance including the low-pass floor.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha_base: f64,
}

/// Projected splat plus everything the backward pass reuses.
pub(crate) struct PreparedSplat {
    pub splat: Splat2D,
    pub gaussian_index: usize,
    pub inv_cov: Matrix2<f64>,
    /// Inclusive pixel bounds x0, x1, y0, y1 of the evaluation footprint
    /// (the radius where opacity falls below [`ALPHA_CUTOFF`]); `None` when
    /// no pixel can exceed the cutoff.
    pub bbox: Option<[usize; 4]>,
    pub t_cam: Vector3<f64>,
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
    pub color_raw: [f64; 3],
}

pub(crate) fn projection_jacobian(fx: f64, fy: f64, t: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z = t.z;
    nalgebra::Matrix2x3::new(
        fx / z,
        0.0,
        -fx * t.x / (z * z),
        0.0,
        fy / z,
        -fy * t.y / (z * z),
    )
}

pub(crate) fn prepare_splat(
    g: &Gaussian,
    index: usize,
    sh_degree: u8,
    cam: &Camera,
) -> Option<PreparedSplat> {
    let t = cam.world_to_cam(&g.position);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let sigma = build_covariance(&g.rotation, &g.log_scale).ok()?;
    let j = projection_jacobian(cam.fx, cam.fy, &t);
    let jw = j * cam.rotation;
    let mut cov2d = jw * sigma * jw.transpose();
    cov2d[(0, 0)] += LOW_PASS_FLOOR;
    cov2d[(1, 1)] += LOW_PASS_FLOOR;
    // Symmetrize against rounding.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;

    let mean2d = Vector2::new(
        cam.fx * t.x / t.z + cam.cx,
        cam.fy * t.y / t.z + cam.cy,
    );

    // 3σ footprint culling against the pixel grid.
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let disc = (0.25 * (cov2d[(0, 0)] - cov2d[(1, 1)]).powi(2) + off * off).sqrt();
    let sigma_max = (mid + disc).max(0.0).sqrt();
    let cull_radius = FOOTPRINT_SIGMA * sigma_max;
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d.x + cull_radius < 0.0
        || mean2d.x - cull_radius > w - 1.0
        || mean2d.y + cull_radius < 0.0
        || mean2d.y - cull_radius > h - 1.0
    {
        return None;
    }

    // Evaluation bbox extends to the exact cutoff radius so a drifting
    // footprint never truncates an above-cutoff pixel (which would make
    // gradients discontinuous in the footprint size).
    let alpha_base = g.alpha();
    let ratio = alpha_base.min(ALPHA_CLAMP) / ALPHA_CUTOFF;
    let bbox = if ratio > 1.0 {
        let eval_radius = sigma_max * (2.0 * ratio.ln()).sqrt();
        let x0 = (mean2d.x - eval_radius).ceil().max(0.0) as usize;
        let x1 = (mean2d.x + eval_radius).floor().min(w - 1.0) as usize;
        let y0 = (mean2d.y - eval_radius).ceil().max(0.0) as usize;
        let y1 = (mean2d.y + eval_radius).floor().min(h - 1.0) as usize;
        if mean2d.x + eval_radius < 0.0
            || mean2d.x - eval_radius > w - 1.0
            || mean2d.y + eval_radius < 0.0
            || mean2d.y - eval_radius > h - 1.0
            || x0 > x1
            || y0 > y1
        {
            None
        } else {
            Some([x0, x1, y0, y1])
        }
    } else {
        None
    };

    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let inv_cov = Matrix2::new(
        cov2d[(1, 1)] / det,
        -off / det,
        -off / det,
        cov2d[(0, 0)] / det,
    );

    let to_g = g.position - cam.position();
    let view_dist = to_g.norm();
    let view_dir = if view_dist > 0.0 { to_g / view_dist } else { Vector3::z() };
    let color_raw = color_raw(&g.sh_dc, &g.sh_rest, sh_degree, &view_dir);
    let color = [
        color_raw[0].clamp(0.0, 1.0),
        color_raw[1].clamp(0.0, 1.0),
        color_raw[2].clamp(0.0, 1.0),
    ];

    Some(PreparedSplat {
        splat: Splat2D {
            mean2d,
            cov2d,
            depth: t.z,
            color,
            alpha_base,
        },
        gaussian_index: index,
        inv_cov,
        bbox,
        t_cam: t,
        view_dir,
        view_dist,
        color_raw,
    })
}

/// Project one Gaussian into a view; `None` means culled.
pub fn project(g: &Gaussian, sh_degree: u8, cam: &Camera) -> Option<Splat2D> {
    prepare_splat(g, 0, sh_degree, cam).map(|p| p.splat)
}

#[inline]
fn alpha_from(inv_cov: &Matrix2<f64>, mean2d: &Vector2<f64>, alpha_base: f64, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - mean2d;
    let q = inv_cov[(0, 0)] * d.x * d.x
        + 2.0 * inv_cov[(0, 1)] * d.x * d.y
        + inv_cov[(1, 1)] * d.y * d.y;
    let a = alpha_base * (-0.5 * q).exp();
    let a = a.min(ALPHA_CLAMP);
    if a < ALPHA_CUTOFF {
        0.0
    } else {
        a
    }
}

/// Opacity of a splat at a pixel.
pub fn alpha_at(s: &Splat2D, pixel: &Vector2<f64>) -> f64 {
    let det = s.cov2d[(0, 0)] * s.cov2d[(1, 1)] - s.cov2d[(0, 1)] * s.cov2d[(1, 0)];
    let inv = Matrix2::new(
        s.cov2d[(1, 1)] / det,
        -s.cov2d[(0, 1)] / det,
        -s.cov2d[(1, 0)] / det,
        s.cov2d[(0, 0)] / det,
    );
    alpha_from(&inv, &s.mean2d, s.alpha_base, pixel)
}

/// Front-to-back alpha compositing of depth-ascending splats at one pixel.
pub fn composite(splats: &[Splat2D], pixel: &Vector2<f64>, background: [f64; 3]) -> [f64; 3] {
    debug_assert!(
        splats.windows(2).all(|w| w[0].depth <= w[1].depth),
        "composite requires depth-ascending splats"
    );
    let mut color = [0.0f64; 3];
    let mut transmittance = 1.0f64;
    for s in splats {
        let a = alpha_at(s, pixel);
        if a <= 0.0 {
            continue;
        }
        for ch in 0..3 {
            color[ch] += s.color[ch] * a * transmittance;
        }
        transmittance *= 1.0 - a;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += transmittance * background[ch];
    }
    color
}

/// Sorted splats plus per-row buckets; shared by forward and backward passes.
/// Row entries carry the splat index and its inclusive x-range.
pub(crate) struct Prepared {
    pub splats: Vec<PreparedSplat>,
    pub rows: Vec<Vec<(u32, u32, u32)>>,
}

pub(crate) fn prepare(cloud: &GaussianCloud, cam: &Camera) -> Prepared {
    let mut splats: Vec<PreparedSplat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| prepare_splat(g, i, cloud.sh_degree, cam))
        .filter(|s| s.bbox.is_some())
        .collect();
    // Depth sort; index tie-break keeps ordering deterministic.
    splats.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    let mut rows = vec![Vec::new(); cam.height];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox.expect("filtered above");
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push((si as u32, x0 as u32, x1 as u32));
        }
    }
    Prepared { splats, rows }
}

/// Render the cloud against a constant background. Pure and deterministic:
/// identical inputs produce bit-identical images.
pub fn render(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Image {
    let prep = prepare(cloud, cam);
    let mut img = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        let row = &prep.rows[y];
        for x in 0..cam.width {
            let pixel = Vector2::new(x as f64, y as f64);
            let mut color = [0.0f64; 3];
            let mut transmittance = 1.0f64;
            for &(si, x0, x1) in row {
                if (x as u32) < x0 || (x as u32) > x1 {
                    continue;
                }
                let s = &prep.splats[si as usize];
                let a = alpha_from(&s.inv_cov, &s.splat.mean2d, s.splat.alpha_base, &pixel);
                if a <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    color[ch] += s.splat.color[ch] * a * transmittance;
                }
                transmittance *= 1.0 - a;
                if transmittance < TRANSMITTANCE_EPS {
                    break;
                }
            }
            for ch in 0..3 {
                color[ch] += transmittance * background[ch];
            }
            img.set(x, y, color);
        }
    }
    img
}
