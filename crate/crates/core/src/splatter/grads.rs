//! Reverse-mode gradients of rendered pixels with respect to every Gaussian
//! parameter, plus the squared-per-pixel-gradient accumulation used for
//! Fisher information.
//!
//! Both passes share the forward walk. Per pixel and contributing splat the
//! opacity gradient factors through a 6-vector
//! `(∂α/∂mean2d, ∂α/∂Σ': 3 symmetric entries, ∂α/∂alpha_base)`;
//! a per-splat constant matrix then chains that vector to the raw parameters
//! (position, quaternion, log-scale, opacity logit). Color gradients chain
//! through the SH basis and, for degree > 0, the view direction.

use super::{
    basis_rest, basis_rest_derivs, prepare, projection_jacobian, Camera, Image, PreparedSplat,
    ALPHA_CLAMP, SH_C0, TRANSMITTANCE_EPS,
};
use crate::gscloud::{
    normalize_quat, rotation_matrix, rotation_matrix_derivs, Gaussian, GaussianCloud,
};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

/// Per-Gaussian gradient (or squared-gradient) buffers, one entry per
/// Gaussian in cloud order.
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub sh_dc: Vec<Vector3<f64>>,
    pub sh_rest: Vec<Vec<f64>>,
    pub opacity_logit: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let rest = crate::gscloud::sh_rest_len(cloud.sh_degree);
        CloudGrads {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            sh_dc: vec![Vector3::zeros(); n],
            sh_rest: vec![vec![0.0; rest]; n],
            opacity_logit: vec![0.0; n],
        }
    }

    /// Elementwise sum, used to accumulate over views.
    pub fn add_assign(&mut self, other: &CloudGrads) {
        for i in 0..self.position.len() {
            self.position[i] += other.position[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
            self.log_scale[i] += other.log_scale[i];
            self.sh_dc[i] += other.sh_dc[i];
            for k in 0..self.sh_rest[i].len() {
                self.sh_rest[i][k] += other.sh_rest[i][k];
            }
            self.opacity_logit[i] += other.opacity_logit[i];
        }
    }
}

/// Constant per-splat chain from the 6-vector opacity gradient and the color
/// gradient to raw parameters.
struct SplatChain {
    /// Rows: μ(3), q raw(4), log_scale(3), opacity_logit(1).
    k: [[f64; 6]; 11],
    /// d color_raw[ch] / d μ[j] via the view direction (degree > 0 only).
    e: [[f64; 3]; 3],
    /// 1 where the raw color is strictly inside (0,1), else 0.
    mask: [f64; 3],
    basis: Vec<f64>,
}

fn sym3(m: &Matrix2<f64>) -> [f64; 3] {
    [m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]]
}

fn build_chain(g: &Gaussian, ps: &PreparedSplat, sh_degree: u8, cam: &Camera) -> SplatChain {
    let (qh, qnorm) = normalize_quat(&g.rotation).expect("finite quaternion (checked at projection)");
    let r = rotation_matrix(&qh);
    let dr = rotation_matrix_derivs(&qh);
    let d_diag = g.log_scale.map(|s| (2.0 * s).exp());
    let d = Matrix3::from_diagonal(&d_diag);
    let sigma = {
        let s = r * d * r.transpose();
        0.5 * (s + s.transpose())
    };
    let w = &cam.rotation;
    let t = &ps.t_cam;
    let j = projection_jacobian(cam.fx, cam.fy, t);
    let jw = j * w;
    let m_cam = w * sigma * w.transpose();

    let mut k = [[0.0; 6]; 11];

    // μ rows: mean2d path (cols 0,1) ...
    for jcol in 0..3 {
        k[jcol][0] = jw[(0, jcol)];
        k[jcol][1] = jw[(1, jcol)];
    }
    // ... plus covariance-through-Jacobian path (cols 2..5).
    let z = t.z;
    let mut dj = [nalgebra::Matrix2x3::<f64>::zeros(); 3];
    dj[0][(0, 2)] = -cam.fx / (z * z);
    dj[1][(1, 2)] = -cam.fy / (z * z);
    dj[2][(0, 0)] = -cam.fx / (z * z);
    dj[2][(0, 2)] = 2.0 * cam.fx * t.x / (z * z * z);
    dj[2][(1, 1)] = -cam.fy / (z * z);
    dj[2][(1, 2)] = 2.0 * cam.fy * t.y / (z * z * z);
    let mut dcov_dt = [[0.0; 3]; 3];
    for i in 0..3 {
        let a = dj[i] * m_cam * j.transpose();
        let s = a + a.transpose();
        dcov_dt[i] = sym3(&s);
    }
    for jcol in 0..3 {
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += dcov_dt[i][c] * w[(i, jcol)];
            }
            k[jcol][2 + c] = acc;
        }
    }

    // Quaternion rows, first in normalized coordinates.
    let mut qhat_rows = [[0.0; 3]; 4];
    for (kq, drk) in dr.iter().enumerate() {
        let b = drk * d * r.transpose();
        let dsigma = b + b.transpose();
        let proj = jw * dsigma * jw.transpose();
        qhat_rows[kq] = sym3(&proj);
    }
    // Chain through normalization: dq̂_k/dq_l = (δ_kl − q̂_k q̂_l)/‖q‖.
    for l in 0..4 {
        for c in 0..3 {
            let mut acc = 0.0;
            for (kq, row) in qhat_rows.iter().enumerate() {
                let n_kl = ((kq == l) as u8 as f64 - qh[kq] * qh[l]) / qnorm;
                acc += row[c] * n_kl;
            }
            k[3 + l][2 + c] = acc;
        }
    }

    // Log-scale rows.
    for jcol in 0..3 {
        let col = r.column(jcol);
        let outer = 2.0 * d_diag[jcol] * col * col.transpose();
        let proj = jw * outer * jw.transpose();
        let s = sym3(&proj);
        for c in 0..3 {
            k[7 + jcol][2 + c] = s[c];
        }
    }

    // Opacity logit row.
    let a = ps.splat.alpha_base;
    k[10][5] = a * (1.0 - a);

    // Color clamp mask and view-direction path.
    let mut mask = [0.0; 3];
    for ch in 0..3 {
        if ps.color_raw[ch] > 0.0 && ps.color_raw[ch] < 1.0 {
            mask[ch] = 1.0;
        }
    }
    let basis = basis_rest(sh_degree, &ps.view_dir);
    let mut e = [[0.0; 3]; 3];
    if sh_degree > 0 {
        let derivs = basis_rest_derivs(sh_degree, &ps.view_dir);
        let per = basis.len();
        let dir = ps.view_dir;
        let m_dir = (Matrix3::identity() - dir * dir.transpose()) / ps.view_dist;
        for ch in 0..3 {
            let mut v = Vector3::zeros();
            for (kb, db) in derivs.iter().enumerate() {
                v += g.sh_rest[ch * per + kb] * db;
            }
            let echain = m_dir * v;
            for jrow in 0..3 {
                e[jrow][ch] = echain[jrow];
            }
        }
    }

    SplatChain { k, e, mask, basis }
}

struct Contribution {
    splat: u32,
    alpha: f64,
    trans_before: f64,
    /// exp(−q/2), zeroed when the opacity clamp was active.
    gauss: f64,
    ad: Vector2<f64>,
}

/// Walk one pixel, replicating the forward compositing exactly.
fn gather_contributions(
    prep_splats: &[PreparedSplat],
    row: &[(u32, u32, u32)],
    x: usize,
    pixel: &Vector2<f64>,
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let mut transmittance = 1.0f64;
    for &(si, x0, x1) in row {
        if (x as u32) < x0 || (x as u32) > x1 {
            continue;
        }
        let s = &prep_splats[si as usize];
        let d = pixel - s.splat.mean2d;
        let q = s.inv_cov[(0, 0)] * d.x * d.x
            + 2.0 * s.inv_cov[(0, 1)] * d.x * d.y
            + s.inv_cov[(1, 1)] * d.y * d.y;
        let gauss = (-0.5 * q).exp();
        let a_pre = s.splat.alpha_base * gauss;
        let clamped = a_pre > ALPHA_CLAMP;
        let a = a_pre.min(ALPHA_CLAMP);
        if a < super::ALPHA_CUTOFF {
            continue;
        }
        out.push(Contribution {
            splat: si,
            alpha: a,
            trans_before: transmittance,
            gauss: if clamped { 0.0 } else { gauss },
            ad: s.inv_cov * d,
        });
        transmittance *= 1.0 - a;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    transmittance
}

/// Render and accumulate dL/dθ for every Gaussian parameter, given dL/dI.
///
/// `d_image` must have the camera's dimensions; its entries are the upstream
/// gradient of the scalar loss with respect to each output channel.
pub fn render_with_grads(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    d_image: &Image,
) -> (Image, CloudGrads) {
    assert_eq!(d_image.width, cam.width);
    assert_eq!(d_image.height, cam.height);
    let prep = prepare(cloud, cam);
    let mut img = Image::new(cam.width, cam.height);
    // Per splat: dmean2d(2), dcov sym(3), d alpha_base(1), d color(3).
    let mut acc = vec![[0.0f64; 9]; prep.splats.len()];
    let mut contribs: Vec<Contribution> = Vec::new();

    for y in 0..cam.height {
        let row = &prep.rows[y];
        for x in 0..cam.width {
            let pixel = Vector2::new(x as f64, y as f64);
            let t_final = gather_contributions(&prep.splats, row, x, &pixel, &mut contribs);

            let mut color = [0.0f64; 3];
            for c in &contribs {
                let s = &prep.splats[c.splat as usize];
                for ch in 0..3 {
                    color[ch] += s.splat.color[ch] * c.alpha * c.trans_before;
                }
            }
            for ch in 0..3 {
                color[ch] += t_final * background[ch];
            }
            img.set(x, y, color);

            let di = d_image.get(x, y);
            if di == [0.0, 0.0, 0.0] {
                continue;
            }
            // Suffix S[ch] = Σ_{j>i} c_j α_j T_j + bg·T_final.
            let mut suffix = [
                background[0] * t_final,
                background[1] * t_final,
                background[2] * t_final,
            ];
            for c in contribs.iter().rev() {
                let s = &prep.splats[c.splat as usize];
                let at = c.alpha * c.trans_before;
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    let w_ch = s.splat.color[ch] * c.trans_before - suffix[ch] / (1.0 - c.alpha);
                    d_alpha += di[ch] * w_ch;
                }
                let a = &mut acc[c.splat as usize];
                a[0] += d_alpha * c.alpha * c.ad.x;
                a[1] += d_alpha * c.alpha * c.ad.y;
                a[2] += d_alpha * 0.5 * c.alpha * c.ad.x * c.ad.x;
                a[3] += d_alpha * c.alpha * c.ad.x * c.ad.y;
                a[4] += d_alpha * 0.5 * c.alpha * c.ad.y * c.ad.y;
                a[5] += d_alpha * c.gauss;
                for ch in 0..3 {
                    a[6 + ch] += di[ch] * at;
                    suffix[ch] += s.splat.color[ch] * at;
                }
            }
        }
    }

    let mut grads = CloudGrads::zeros(cloud);
    for (s, a) in prep.splats.iter().zip(&acc) {
        if a.iter().all(|&v| v == 0.0) {
            continue;
        }
        let gi = s.gaussian_index;
        let g = &cloud.gaussians[gi];
        let chain = build_chain(g, s, cloud.sh_degree, cam);
        let v6 = [a[0], a[1], a[2], a[3], a[4], a[5]];
        let mut theta = [0.0f64; 11];
        for (row, out) in chain.k.iter().zip(theta.iter_mut()) {
            *out = row.iter().zip(&v6).map(|(r, v)| r * v).sum();
        }
        for jrow in 0..3 {
            let color_path: f64 = (0..3)
                .map(|ch| a[6 + ch] * chain.mask[ch] * chain.e[jrow][ch])
                .sum();
            grads.position[gi][jrow] += theta[jrow] + color_path;
        }
        for kq in 0..4 {
            grads.rotation[gi][kq] += theta[3 + kq];
        }
        for jrow in 0..3 {
            grads.log_scale[gi][jrow] += theta[7 + jrow];
        }
        grads.opacity_logit[gi] += theta[10];
        let per = chain.basis.len();
        for ch in 0..3 {
            let d_raw = a[6 + ch] * chain.mask[ch];
            grads.sh_dc[gi][ch] += d_raw * SH_C0;
            for kb in 0..per {
                grads.sh_rest[gi][ch * per + kb] += d_raw * chain.basis[kb];
            }
        }
    }
    (img, grads)
}

/// Accumulate Σ over pixels and channels of (∂I_pc/∂θ)² for every parameter.
///
/// This is the diagonal Fisher information of the view under a unit RGB
/// covariance; entries are nonnegative and exactly zero for culled Gaussians.
pub fn render_squared_grads(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> CloudGrads {
    let prep = prepare(cloud, cam);
    let chains: Vec<SplatChain> = prep
        .splats
        .iter()
        .map(|s| build_chain(&cloud.gaussians[s.gaussian_index], s, cloud.sh_degree, cam))
        .collect();
    // Per splat: μ²(3), q²(4), ls²(3), op²(1), Σ(αT)²(1).
    let mut acc = vec![[0.0f64; 12]; prep.splats.len()];
    let mut contribs: Vec<Contribution> = Vec::new();

    for y in 0..cam.height {
        let row = &prep.rows[y];
        for x in 0..cam.width {
            let pixel = Vector2::new(x as f64, y as f64);
            let t_final = gather_contributions(&prep.splats, row, x, &pixel, &mut contribs);
            if contribs.is_empty() {
                continue;
            }
            let mut suffix = [
                background[0] * t_final,
                background[1] * t_final,
                background[2] * t_final,
            ];
            for c in contribs.iter().rev() {
                let si = c.splat as usize;
                let s = &prep.splats[si];
                let chain = &chains[si];
                let at = c.alpha * c.trans_before;
                let mut w = [0.0f64; 3];
                let mut sw = 0.0;
                for ch in 0..3 {
                    w[ch] = s.splat.color[ch] * c.trans_before - suffix[ch] / (1.0 - c.alpha);
                    sw += w[ch] * w[ch];
                    suffix[ch] += s.splat.color[ch] * at;
                }
                let v6 = [
                    c.alpha * c.ad.x,
                    c.alpha * c.ad.y,
                    0.5 * c.alpha * c.ad.x * c.ad.x,
                    c.alpha * c.ad.x * c.ad.y,
                    0.5 * c.alpha * c.ad.y * c.ad.y,
                    c.gauss,
                ];
                let a = &mut acc[si];
                for jrow in 0..3 {
                    let u: f64 = chain.k[jrow].iter().zip(&v6).map(|(r, v)| r * v).sum();
                    let mut sq = 0.0;
                    for ch in 0..3 {
                        let gpc = w[ch] * u + at * chain.mask[ch] * chain.e[jrow][ch];
                        sq += gpc * gpc;
                    }
                    a[jrow] += sq;
                }
                for krow in 3..11 {
                    let u: f64 = chain.k[krow].iter().zip(&v6).map(|(r, v)| r * v).sum();
                    a[krow] += sw * u * u;
                }
                a[11] += at * at;
            }
        }
    }

    let mut grads = CloudGrads::zeros(cloud);
    for ((s, a), chain) in prep.splats.iter().zip(&acc).zip(&chains) {
        let gi = s.gaussian_index;
        for jrow in 0..3 {
            grads.position[gi][jrow] += a[jrow];
        }
        for kq in 0..4 {
            grads.rotation[gi][kq] += a[3 + kq];
        }
        for jrow in 0..3 {
            grads.log_scale[gi][jrow] += a[7 + jrow];
        }
        grads.opacity_logit[gi] += a[10];
        let sat2 = a[11];
        let per = chain.basis.len();
        for ch in 0..3 {
            grads.sh_dc[gi][ch] += sat2 * chain.mask[ch] * SH_C0 * SH_C0;
            for kb in 0..per {
                grads.sh_rest[gi][ch * per + kb] +=
                    sat2 * chain.mask[ch] * chain.basis[kb] * chain.basis[kb];
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splatter::render;
    use rand::Rng;

    /// Scene in general position: separated depths, mid-range colors and
    /// opacities, footprints inside the image.
    pub(crate) fn fd_test_scene(n: usize, seed: u64) -> (GaussianCloud, Camera) {
        let mut rng = crate::rng::rng_for(seed, "fd-scene");
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|i| {
                let mut g = Gaussian {
                    position: Vector3::new(
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.25..0.25),
                        1.6 + 0.31 * i as f64,
                    ),
                    rotation: [
                        1.0 + rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ],
                    log_scale: Vector3::new(
                        rng.gen_range(-2.4..-1.7),
                        rng.gen_range(-2.4..-1.7),
                        rng.gen_range(-2.4..-1.7),
                    ),
                    sh_dc: Vector3::new(
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.8..0.8),
                    ),
                    sh_rest: vec![0.0; crate::gscloud::sh_rest_len(1)],
                    opacity_logit: rng.gen_range(-0.6..0.9),
                };
                for v in &mut g.sh_rest {
                    *v = rng.gen_range(-0.12..0.12);
                }
                g
            })
            .collect();
        let cloud = GaussianCloud::new(gaussians, 1).unwrap();
        let cam = Camera {
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 4.0,
            width: 8,
            height: 8,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        };
        (cloud, cam)
    }

    fn mean_intensity(img: &Image) -> f64 {
        img.data.iter().sum::<f64>() / img.data.len() as f64
    }

    /// Apply f to each scalar parameter slot of the cloud.
    pub(crate) fn for_each_param<F: FnMut(&str, usize, &mut dyn FnMut(&mut GaussianCloud) -> &mut f64)>(
        cloud: &GaussianCloud,
        mut f: F,
    ) {
        let rest = crate::gscloud::sh_rest_len(cloud.sh_degree);
        for gi in 0..cloud.len() {
            for j in 0..3 {
                f("position", gi, &mut |c| &mut c.gaussians[gi].position[j]);
            }
            for j in 0..4 {
                f("rotation", gi, &mut |c| &mut c.gaussians[gi].rotation[j]);
            }
            for j in 0..3 {
                f("log_scale", gi, &mut |c| &mut c.gaussians[gi].log_scale[j]);
            }
            for j in 0..3 {
                f("sh_dc", gi, &mut |c| &mut c.gaussians[gi].sh_dc[j]);
            }
            for j in 0..rest {
                f("sh_rest", gi, &mut |c| &mut c.gaussians[gi].sh_rest[j]);
            }
            f("opacity", gi, &mut |c| &mut c.gaussians[gi].opacity_logit);
        }
    }

    fn flat_grads(g: &CloudGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for gi in 0..g.position.len() {
            out.extend(g.position[gi].iter());
            out.extend(g.rotation[gi].iter());
            out.extend(g.log_scale[gi].iter());
            out.extend(g.sh_dc[gi].iter());
            out.extend(g.sh_rest[gi].iter());
            out.push(g.opacity_logit[gi]);
        }
        out
    }

    #[test]
    fn backward_matches_central_differences() {
        let (cloud, cam) = fd_test_scene(3, 11);
        let bg = [1.0, 1.0, 1.0];
        let npix = (cam.width * cam.height * 3) as f64;
        let d_image = Image::filled(cam.width, cam.height, [1.0 / npix; 3]);
        let (_, grads) = render_with_grads(&cloud, &cam, bg, &d_image);
        let analytic = flat_grads(&grads);

        let h = 1e-3;
        let mut idx = 0usize;
        let mut worst: f64 = 0.0;
        for_each_param(&cloud, |_name, _gi, access| {
            let mut cp = cloud.clone();
            *access(&mut cp) += h;
            let lp = mean_intensity(&render(&cp, &cam, bg));
            let mut cm = cloud.clone();
            *access(&mut cm) -= h;
            let lm = mean_intensity(&render(&cm, &cam, bg));
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            if a.abs() > 1e-6 {
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                worst = worst.max(rel);
            }
            idx += 1;
        });
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn squared_grads_match_per_pixel_finite_differences() {
        let (cloud, cam) = fd_test_scene(2, 23);
        let bg = [1.0, 1.0, 1.0];
        let fisher = render_squared_grads(&cloud, &cam, bg);
        let analytic = flat_grads(&fisher);

        let h = 1e-4;
        let mut idx = 0usize;
        let mut worst: f64 = 0.0;
        for_each_param(&cloud, |_name, _gi, access| {
            let mut cp = cloud.clone();
            *access(&mut cp) += h;
            let ip = render(&cp, &cam, bg);
            let mut cm = cloud.clone();
            *access(&mut cm) -= h;
            let im = render(&cm, &cam, bg);
            let fd_sq: f64 = ip
                .data
                .iter()
                .zip(&im.data)
                .map(|(p, m)| {
                    let g = (p - m) / (2.0 * h);
                    g * g
                })
                .sum();
            let a = analytic[idx];
            if a.abs() > 1e-8 {
                let rel = (a - fd_sq).abs() / a.abs().max(fd_sq);
                worst = worst.max(rel);
            }
            idx += 1;
        });
        assert!(worst < 1e-2, "worst relative error {worst}");
    }

    #[test]
    fn grads_of_offscreen_gaussian_are_zero() {
        let (mut cloud, cam) = fd_test_scene(2, 5);
        cloud.gaussians[1].position = Vector3::new(50.0, 0.0, 2.0);
        let d_image = Image::filled(cam.width, cam.height, [1.0; 3]);
        let (_, grads) = render_with_grads(&cloud, &cam, [0.0; 3], &d_image);
        assert_eq!(grads.position[1], Vector3::zeros());
        assert_eq!(grads.opacity_logit[1], 0.0);
        let fisher = render_squared_grads(&cloud, &cam, [0.0; 3]);
        assert_eq!(fisher.position[1], Vector3::zeros());
        assert_eq!(fisher.sh_dc[1], Vector3::zeros());
    }
}
