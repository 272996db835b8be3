//! Marker creation and phase-1 embedding: densify high-uncertainty Gaussians
//! into marker Gaussians, then optimize only the markers so a frozen image
//! decoder reads the message from renders while renders stay close to the
//! originals.

use crate::error::{Error, Result};
use crate::gscloud::{
    build_covariance, normalize_quat, param_hash, rotation_matrix, union, Gaussian, GaussianCloud,
};
use crate::metrics::bit_accuracy;
use crate::nn::{exp_decay_lr, Adam};
use crate::rng::rng_for;
use crate::splatter::{render, render_with_grads, Camera, Image};
use crate::wm2d::{message_loss, Decoder2d, Message, SoftBits};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which marker parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizeMask {
    pub position: bool,
    pub rotation: bool,
    pub scale: bool,
    pub color: bool,
    pub opacity: bool,
}

impl Default for OptimizeMask {
    fn default() -> Self {
        OptimizeMask {
            position: true,
            rotation: true,
            scale: true,
            color: true,
            opacity: true,
        }
    }
}

/// Phase-1 configuration. λ weights follow the 2D watermarking loss
/// (message 10.0, photometric 1.0); the optimizer is Adam with an
/// exponential learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub lambda_msg: f64,
    pub lambda_rec: f64,
    pub steps: usize,
    pub lr: f64,
    /// Final/initial lr ratio of the exponential schedule.
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub views_per_step: usize,
    pub optimize: OptimizeMask,
    /// Apply the 2D distortion layer between render and decoder during
    /// embedding (extension; robustness normally comes from the decoder's
    /// pretraining).
    pub distortion_in_loop: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            lambda_msg: 10.0,
            lambda_rec: 1.0,
            steps: 1000,
            lr: 1e-4,
            lr_gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            views_per_step: 1,
            optimize: OptimizeMask::default(),
            distortion_in_loop: false,
        }
    }
}

/// Densify the selected Gaussians into markers: position resampled from the
/// parent's own 3D Gaussian, every other parameter cloned.
pub fn densify(cloud: &GaussianCloud, indices: &[usize], seed: u64) -> Result<GaussianCloud> {
    for &i in indices {
        if i >= cloud.len() {
            return Err(Error::InvalidParameter(format!(
                "densify index {i} out of bounds for {} Gaussians",
                cloud.len()
            )));
        }
    }
    if indices.is_empty() {
        eprintln!("warning: densify called with no indices; returning an empty marker cloud");
    }
    let mut rng = rng_for(seed, "densify");
    let mut markers = Vec::with_capacity(indices.len());
    for &i in indices {
        let parent = &cloud.gaussians[i];
        let (q, _) = normalize_quat(&parent.rotation)?;
        let r = rotation_matrix(&q);
        let s = parent.scale();
        // A·z with A = R·diag(s) satisfies AAᵀ = Σ, so μ̃ ~ N(μ, Σ).
        let z = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let offset = r * Vector3::new(s.x * z.x, s.y * z.y, s.z * z.z);
        let mut g = parent.clone();
        g.position += offset;
        markers.push(g);
    }
    GaussianCloud::new_markers(markers, cloud.sh_degree)
}

/// Optional opacity attenuation of freshly densified markers (experiments
/// only; the default pipeline clones the parent opacity).
pub fn attenuate_opacity(markers: &mut GaussianCloud, factor: f64) {
    use crate::gscloud::{logit, sigmoid};
    for g in &mut markers.gaussians {
        g.opacity_logit = logit(sigmoid(g.opacity_logit) * factor);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedStepLog {
    pub step: usize,
    pub msg_loss: f64,
    pub rec_loss: f64,
    pub bit_acc: f64,
    pub psnr: f64,
}

pub struct EmbedOutput {
    /// Optimized markers (originals are never touched).
    pub markers: GaussianCloud,
    pub log: Vec<EmbedStepLog>,
}

// Flat marker parameter layout per Gaussian:
// position(3), rotation(4), log_scale(3), sh_dc(3), sh_rest(R), opacity(1).
fn params_per_marker(sh_rest: usize) -> usize {
    14 + sh_rest
}

fn flatten_markers(markers: &GaussianCloud) -> Vec<f64> {
    let rest = crate::gscloud::sh_rest_len(markers.sh_degree);
    let mut v = Vec::with_capacity(markers.len() * params_per_marker(rest));
    for g in &markers.gaussians {
        v.extend_from_slice(g.position.as_slice());
        v.extend_from_slice(&g.rotation);
        v.extend_from_slice(g.log_scale.as_slice());
        v.extend_from_slice(g.sh_dc.as_slice());
        v.extend_from_slice(&g.sh_rest);
        v.push(g.opacity_logit);
    }
    v
}

fn unflatten_markers(template: &GaussianCloud, params: &[f64]) -> GaussianCloud {
    let rest = crate::gscloud::sh_rest_len(template.sh_degree);
    let per = params_per_marker(rest);
    let mut out = template.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        let p = &params[i * per..(i + 1) * per];
        g.position = Vector3::new(p[0], p[1], p[2]);
        g.rotation = [p[3], p[4], p[5], p[6]];
        g.log_scale = Vector3::new(p[7], p[8], p[9]);
        g.sh_dc = Vector3::new(p[10], p[11], p[12]);
        g.sh_rest.copy_from_slice(&p[13..13 + rest]);
        g.opacity_logit = p[13 + rest];
    }
    out
}

/// Optimize marker parameters against a frozen 2D decoder.
///
/// Loss per step (one random training view by default):
/// λ_msg · BCE(decode(I_w), M) + λ_rec · mean‖I_w − I_o‖², where I_o are the
/// pre-rendered original views. Only markers move; the originals' hash is
/// asserted unchanged.
#[allow(clippy::too_many_arguments)]
pub fn embed(
    original: &GaussianCloud,
    markers: &GaussianCloud,
    decoder: &Decoder2d,
    message: &Message,
    cams: &[Camera],
    originals_rendered: &[Image],
    background: [f64; 3],
    cfg: &EmbedConfig,
) -> Result<EmbedOutput> {
    if cams.is_empty() {
        return Err(Error::Empty("camera set for embedding".into()));
    }
    if cams.len() != originals_rendered.len() {
        return Err(Error::Mismatch(format!(
            "{} cameras but {} pre-rendered originals",
            cams.len(),
            originals_rendered.len()
        )));
    }
    if original.sh_degree != markers.sh_degree {
        return Err(Error::Mismatch("sh_degree mismatch".into()));
    }
    if cfg.steps == 0 || cfg.views_per_step == 0 {
        return Err(Error::InvalidParameter(
            "steps and views_per_step must be ≥ 1".into(),
        ));
    }

    let original_hash = param_hash(original);
    let rest = crate::gscloud::sh_rest_len(markers.sh_degree);
    let per = params_per_marker(rest);
    let mut params = flatten_markers(markers);
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, params.len());
    let mut rng = rng_for(cfg.seed, "embed");
    let mut log = Vec::with_capacity(cfg.steps);
    let mut current = markers.clone();

    for step in 0..cfg.steps {
        opt.lr = exp_decay_lr(cfg.lr, cfg.lr_gamma, step, cfg.steps);
        let mut grads = vec![0.0f64; params.len()];
        let mut msg_loss_sum = 0.0;
        let mut rec_loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut psnr_sum = 0.0;

        let merged = union(original, &current)?;
        for _ in 0..cfg.views_per_step {
            let vi = rng.gen_range(0..cams.len());
            let cam = &cams[vi];
            let i_o = &originals_rendered[vi];
            let i_w = render(&merged, cam, background);

            // Message path, optionally through a random train-mode distortion.
            let (dec_input, dctx) = if cfg.distortion_in_loop {
                let pool = crate::wm2d::default_train_distortions();
                let spec = pool[rng.gen_range(0..pool.len())];
                let dseed = rng.gen::<u64>();
                let (img, ctx) = crate::wm2d::distort2d_train(&i_w, &spec, dseed)?;
                (img, Some(ctx))
            } else {
                (i_w.clone(), None)
            };
            let (logits, ctx) = decoder.forward_ctx(&dec_input);
            let soft = SoftBits::from_logits(&logits);
            let l_msg = message_loss(&soft, message);
            let mut d_logits = crate::wm2d::message_loss_dlogits(&soft, message);
            for v in &mut d_logits {
                *v *= cfg.lambda_msg / cfg.views_per_step as f64;
            }
            let d_dec_input = decoder.backward(&ctx, &d_logits, None);
            let mut d_image = match &dctx {
                Some(c) => c.backward(&d_dec_input),
                None => d_dec_input,
            };

            // Photometric path.
            let n = i_w.data.len() as f64;
            let mut l_rec = 0.0;
            for (dv, (wv, ov)) in d_image.data.iter_mut().zip(i_w.data.iter().zip(&i_o.data)) {
                let diff = wv - ov;
                l_rec += diff * diff;
                *dv += cfg.lambda_rec / cfg.views_per_step as f64 * 2.0 * diff / n;
            }
            l_rec /= n;

            if !l_msg.is_finite() || !l_rec.is_finite() {
                return Err(Error::Diverged(format!(
                    "embedding loss non-finite at step {step} (msg {l_msg}, rec {l_rec})"
                )));
            }

            let (_, cloud_grads) = render_with_grads(&merged, cam, background, &d_image);

            // Only marker gradients are ever applied; original-parameter
            // gradients are computed and dropped here.
            let base = original.len();
            for mi in 0..current.len() {
                let gi = base + mi;
                let g = &mut grads[mi * per..(mi + 1) * per];
                if cfg.optimize.position {
                    for j in 0..3 {
                        g[j] += cloud_grads.position[gi][j];
                    }
                }
                if cfg.optimize.rotation {
                    for j in 0..4 {
                        g[3 + j] += cloud_grads.rotation[gi][j];
                    }
                }
                if cfg.optimize.scale {
                    for j in 0..3 {
                        g[7 + j] += cloud_grads.log_scale[gi][j];
                    }
                }
                if cfg.optimize.color {
                    for j in 0..3 {
                        g[10 + j] += cloud_grads.sh_dc[gi][j];
                    }
                    for j in 0..rest {
                        g[13 + j] += cloud_grads.sh_rest[gi][j];
                    }
                }
                if cfg.optimize.opacity {
                    g[13 + rest] += cloud_grads.opacity_logit[gi];
                }
            }

            msg_loss_sum += l_msg;
            rec_loss_sum += l_rec;
            acc_sum += bit_accuracy(&soft, message);
            psnr_sum += crate::metrics::psnr(&i_w, i_o)?;
        }

        if !current.is_empty() {
            opt.step(&mut params, &grads);
            current = unflatten_markers(&current, &params);
        }
        let vps = cfg.views_per_step as f64;
        log.push(EmbedStepLog {
            step,
            msg_loss: msg_loss_sum / vps,
            rec_loss: rec_loss_sum / vps,
            bit_acc: acc_sum / vps,
            psnr: psnr_sum / vps,
        });
    }

    assert_eq!(
        param_hash(original),
        original_hash,
        "frozen-original contract violated"
    );
    Ok(EmbedOutput {
        markers: current,
        log,
    })
}

/// Convenience: render the watermarked union for evaluation.
pub fn render_watermarked(
    original: &GaussianCloud,
    markers: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
) -> Result<Image> {
    Ok(render(&union(original, markers)?, cam, background))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gscloud::Origin;

    fn toy_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = rng_for(seed, "mcloud");
        let gaussians = (0..n)
            .map(|_| {
                Gaussian::isotropic(
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(1.5..3.0),
                    ),
                    rng.gen_range(0.05..0.2),
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    rng.gen_range(0.3..0.8),
                )
            })
            .collect();
        GaussianCloud::new(gaussians, 0).unwrap()
    }

    #[test]
    fn densify_clones_everything_but_position() {
        let cloud = toy_cloud(10, 1);
        let markers = densify(&cloud, &[3, 7], 5).unwrap();
        assert_eq!(markers.len(), 2);
        assert!(markers.origin.iter().all(|&o| o == Origin::Marker));
        for (m, &pi) in markers.gaussians.iter().zip(&[3usize, 7]) {
            let p = &cloud.gaussians[pi];
            assert_eq!(m.rotation, p.rotation);
            assert_eq!(m.log_scale, p.log_scale);
            assert_eq!(m.sh_dc, p.sh_dc);
            assert_eq!(m.opacity_logit, p.opacity_logit);
            assert_ne!(m.position, p.position);
        }
        // Deterministic per seed.
        let again = densify(&cloud, &[3, 7], 5).unwrap();
        assert_eq!(param_hash(&again), param_hash(&markers));
    }

    #[test]
    fn densify_degenerate_scale_keeps_parent_position() {
        let mut cloud = toy_cloud(3, 2);
        cloud.gaussians[1].log_scale = Vector3::repeat(-40.0);
        let markers = densify(&cloud, &[1], 9).unwrap();
        let d = (markers.gaussians[0].position - cloud.gaussians[1].position).norm();
        assert!(d < 1e-15, "offset {d}");
    }

    #[test]
    fn densify_sample_mean_matches_parent() {
        // Statistical oracle: mean of N samples within 3σ/√N per axis.
        let cloud = toy_cloud(1, 3);
        let sigma = cloud.gaussians[0].scale().x;
        let n = 10_000usize;
        let mut mean = Vector3::zeros();
        for seed in 0..n {
            let m = densify(&cloud, &[0], seed as u64).unwrap();
            mean += m.gaussians[0].position;
        }
        mean /= n as f64;
        let tol = 3.0 * sigma / (n as f64).sqrt();
        let d = mean - cloud.gaussians[0].position;
        for axis in 0..3 {
            assert!(d[axis].abs() < tol, "axis {axis}: {} vs tol {tol}", d[axis]);
        }
    }

    #[test]
    fn densify_rejects_bad_indices_and_warns_on_empty() {
        let cloud = toy_cloud(4, 4);
        assert!(densify(&cloud, &[9], 0).is_err());
        let empty = densify(&cloud, &[], 0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn densified_positions_follow_parent_covariance() {
        // Anisotropic parent: sample spread per axis tracks exp(log_scale).
        let mut cloud = toy_cloud(1, 5);
        cloud.gaussians[0].log_scale = Vector3::new(-1.0, -3.0, -2.0);
        let n = 4000;
        let mut sq = Vector3::zeros();
        for seed in 0..n {
            let m = densify(&cloud, &[0], 10_000 + seed as u64).unwrap();
            let d = m.gaussians[0].position - cloud.gaussians[0].position;
            sq += d.component_mul(&d);
        }
        sq /= n as f64;
        let sigma = build_covariance(&cloud.gaussians[0].rotation, &cloud.gaussians[0].log_scale)
            .unwrap();
        for axis in 0..3 {
            let expect = sigma[(axis, axis)];
            let rel = (sq[axis] - expect).abs() / expect;
            assert!(rel < 0.15, "axis {axis}: var {} vs {expect}", sq[axis]);
        }
    }

    #[test]
    fn embed_with_empty_markers_is_a_no_op_loop() {
        let original = toy_cloud(20, 6);
        let markers = GaussianCloud::new_markers(Vec::new(), 0).unwrap();
        let mut rng = rng_for(7, "dec");
        let decoder = Decoder2d::new(16, &mut rng);
        let cam = Camera::look_at(
            Vector3::new(0.0, -0.2, 0.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::z(),
            16.0,
            16.0,
            16,
            16,
        );
        let i_o = render(&original, &cam, [1.0; 3]);
        let msg = Message::from_hex("a5a5a5a5a5a5").unwrap();
        let cfg = EmbedConfig {
            steps: 5,
            ..Default::default()
        };
        let out = embed(
            &original,
            &markers,
            &decoder,
            &msg,
            &[cam],
            &[i_o],
            [1.0; 3],
            &cfg,
        )
        .unwrap();
        assert!(out.markers.is_empty());
        // Constant loss across steps (nothing changes).
        let first = out.log.first().unwrap();
        for l in &out.log {
            assert_eq!(l.msg_loss, first.msg_loss);
            assert_eq!(l.rec_loss, first.rec_loss);
        }
    }

    #[test]
    fn already_satisfied_bits_start_below_ln2() {
        let original = toy_cloud(30, 8);
        let mut rng = rng_for(9, "dec2");
        let decoder = Decoder2d::new(16, &mut rng);
        let cam = Camera::look_at(
            Vector3::new(0.3, -0.4, 0.1),
            Vector3::new(0.0, 0.0, 2.2),
            Vector3::z(),
            16.0,
            16.0,
            16,
            16,
        );
        let i_o = render(&original, &cam, [1.0; 3]);
        let soft = crate::wm2d::decode2d(&decoder, &i_o);
        let msg = soft.hard();
        // Per-bit BCE on already-satisfied bits is below ln 2.
        for (p, b) in soft.probs.iter().zip(&msg.bits) {
            let bce = if *b == 1 { -p.ln() } else { -(1.0 - p).ln() };
            assert!(bce < std::f64::consts::LN_2 + 1e-12);
        }
        assert!(message_loss(&soft, &msg) < std::f64::consts::LN_2);
    }
}
