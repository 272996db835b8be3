//! Desk-scale scene supply: procedural ground-truth Gaussian scenes with a
//! camera ring, and a minimal photometric fitter that stands in for a
//! pretrained model. The fitter keeps a fixed Gaussian count (no
//! densify/prune) so downstream uncertainty bookkeeping stays index-stable.

use crate::error::{Error, Result};
use crate::gscloud::{load_ply, logit, save_ply, Gaussian, GaussianCloud};
use crate::nn::{exp_decay_lr, Adam};
use crate::rng::rng_for;
use crate::splatter::{
    load_cameras, render, render_with_grads, save_cameras, Camera, Image, SH_C0,
};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default white background for toy scenes.
pub const TOY_BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub gt_cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub target_images: Vec<Image>,
    pub background: [f64; 3],
}

/// Map a target color in [0,1] to the DC coefficient that renders it.
fn dc_for_color(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

/// Procedural scene: a colored sphere shell plus interior clutter, cameras
/// on a ring looking at the origin, targets rendered from the ground truth.
/// Deterministic per seed.
pub fn make_toy_scene(seed: u64, n_gaussians: usize, n_views: usize, resolution: usize) -> ToyScene {
    assert!(n_gaussians >= 10, "need at least 10 Gaussians");
    assert!(n_views >= 4, "need at least 4 views");
    let mut rng = rng_for(seed, "toy-scene");

    let mut gaussians = Vec::with_capacity(n_gaussians);
    let n_shell = n_gaussians * 3 / 5;
    for i in 0..n_gaussians {
        let position = if i < n_shell {
            // Fibonacci-ish shell with jitter.
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            };
            dir * rng.gen_range(0.92..1.05)
        } else {
            loop {
                let v = Vector3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                );
                if v.norm() <= 0.8 {
                    break v;
                }
            }
        };
        // Smooth color field over the sphere plus noise keeps targets
        // non-constant from every view.
        let base = [
            0.5 + 0.35 * (2.1 * position.x + 0.7).sin(),
            0.5 + 0.35 * (2.3 * position.y - 0.4).sin(),
            0.5 + 0.35 * (1.9 * position.z + 1.3).sin(),
        ];
        let color = Vector3::new(
            dc_for_color((base[0] + rng.gen_range(-0.08..0.08)).clamp(0.08, 0.92)),
            dc_for_color((base[1] + rng.gen_range(-0.08..0.08)).clamp(0.08, 0.92)),
            dc_for_color((base[2] + rng.gen_range(-0.08..0.08)).clamp(0.08, 0.92)),
        );
        let sigma = rng.gen_range(0.05..0.14);
        let mut g = Gaussian::isotropic(position, sigma, color, rng.gen_range(0.35..0.9));
        // Mild anisotropy and a random orientation.
        g.log_scale += Vector3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        g.rotation = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if g.rotation.iter().map(|v| v * v).sum::<f64>() < 1e-2 {
            g.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        gaussians.push(g);
    }
    let gt_cloud = GaussianCloud::new(gaussians, 0).expect("valid toy cloud");

    let f = resolution as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let cameras: Vec<Camera> = (0..n_views)
        .map(|i| {
            let angle = phase + std::f64::consts::TAU * i as f64 / n_views as f64;
            let eye = Vector3::new(2.6 * angle.cos(), 2.6 * angle.sin(), 1.0);
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), f, f, resolution, resolution)
        })
        .collect();

    let target_images = cameras
        .iter()
        .map(|cam| render(&gt_cloud, cam, TOY_BACKGROUND))
        .collect();

    ToyScene {
        gt_cloud,
        cameras,
        target_images,
        background: TOY_BACKGROUND,
    }
}

/// Per-group learning rates for the fitter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_gamma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr_position: 4e-3,
            lr_rotation: 4e-3,
            lr_scale: 8e-3,
            lr_color: 2.5e-2,
            lr_opacity: 2.5e-2,
            lr_gamma: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitStepLog {
    pub step: usize,
    pub loss: f64,
}

pub struct FitOutput {
    pub cloud: GaussianCloud,
    pub per_view_psnr: Vec<f64>,
    pub log: Vec<FitStepLog>,
}

/// Fit a fixed-count random-init cloud to target images by photometric
/// squared error through the renderer gradients. One random view per step.
pub fn fit_cloud(
    targets: &[Image],
    cameras: &[Camera],
    n_init: usize,
    steps: usize,
    seed: u64,
    background: [f64; 3],
) -> Result<FitOutput> {
    fit_cloud_with(targets, cameras, n_init, steps, seed, background, &FitConfig::default())
}

#[allow(clippy::too_many_arguments)]
pub fn fit_cloud_with(
    targets: &[Image],
    cameras: &[Camera],
    n_init: usize,
    steps: usize,
    seed: u64,
    background: [f64; 3],
    cfg: &FitConfig,
) -> Result<FitOutput> {
    if targets.is_empty() || cameras.is_empty() {
        return Err(Error::Empty("targets/cameras for fitting".into()));
    }
    if targets.len() != cameras.len() {
        return Err(Error::Mismatch(format!(
            "{} targets but {} cameras",
            targets.len(),
            cameras.len()
        )));
    }
    for (t, c) in targets.iter().zip(cameras) {
        if t.width != c.width || t.height != c.height {
            return Err(Error::Mismatch("target/camera resolution mismatch".into()));
        }
    }

    let mut rng = rng_for(seed, "fit-init");
    let gaussians: Vec<Gaussian> = (0..n_init)
        .map(|_| {
            let position = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(-1.1..1.1),
                );
                if v.norm() <= 1.1 {
                    break v;
                }
            };
            let mut g = Gaussian::isotropic(position, rng.gen_range(0.08..0.16), Vector3::zeros(), 0.15);
            g.opacity_logit = logit(rng.gen_range(0.08..0.2));
            g
        })
        .collect();
    let mut cloud = GaussianCloud::new(gaussians, 0)?;

    // One Adam per parameter group, over all Gaussians.
    let n = cloud.len();
    let mut opt_pos = Adam::new(cfg.lr_position, 0.9, 0.999, 1e-8, 3 * n);
    let mut opt_rot = Adam::new(cfg.lr_rotation, 0.9, 0.999, 1e-8, 4 * n);
    let mut opt_scale = Adam::new(cfg.lr_scale, 0.9, 0.999, 1e-8, 3 * n);
    let mut opt_color = Adam::new(cfg.lr_color, 0.9, 0.999, 1e-8, 3 * n);
    let mut opt_op = Adam::new(cfg.lr_opacity, 0.9, 0.999, 1e-8, n);

    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let decay = |lr0: f64| exp_decay_lr(lr0, cfg.lr_gamma, step, steps);
        opt_pos.lr = decay(cfg.lr_position);
        opt_rot.lr = decay(cfg.lr_rotation);
        opt_scale.lr = decay(cfg.lr_scale);
        opt_color.lr = decay(cfg.lr_color);
        opt_op.lr = decay(cfg.lr_opacity);

        let vi = rng.gen_range(0..cameras.len());
        let cam = &cameras[vi];
        let target = &targets[vi];
        let npix = target.data.len() as f64;

        let i_cur = render(&cloud, cam, background);
        let mut d_image = Image::new(cam.width, cam.height);
        let mut loss = 0.0;
        for ((dv, cv), tv) in d_image.data.iter_mut().zip(&i_cur.data).zip(&target.data) {
            let diff = cv - tv;
            loss += diff * diff;
            *dv = 2.0 * diff / npix;
        }
        loss /= npix;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("fit loss non-finite at step {step}")));
        }
        log.push(FitStepLog { step, loss });

        let (_, grads) = render_with_grads(&cloud, cam, background, &d_image);
        let mut g_pos = vec![0.0; 3 * n];
        let mut g_rot = vec![0.0; 4 * n];
        let mut g_scale = vec![0.0; 3 * n];
        let mut g_color = vec![0.0; 3 * n];
        let mut g_op = vec![0.0; n];
        for i in 0..n {
            for j in 0..3 {
                g_pos[3 * i + j] = grads.position[i][j];
                g_scale[3 * i + j] = grads.log_scale[i][j];
                g_color[3 * i + j] = grads.sh_dc[i][j];
            }
            for j in 0..4 {
                g_rot[4 * i + j] = grads.rotation[i][j];
            }
            g_op[i] = grads.opacity_logit[i];
        }
        let mut p_pos = vec![0.0; 3 * n];
        let mut p_rot = vec![0.0; 4 * n];
        let mut p_scale = vec![0.0; 3 * n];
        let mut p_color = vec![0.0; 3 * n];
        let mut p_op = vec![0.0; n];
        for (i, g) in cloud.gaussians.iter().enumerate() {
            for j in 0..3 {
                p_pos[3 * i + j] = g.position[j];
                p_scale[3 * i + j] = g.log_scale[j];
                p_color[3 * i + j] = g.sh_dc[j];
            }
            for j in 0..4 {
                p_rot[4 * i + j] = g.rotation[j];
            }
            p_op[i] = g.opacity_logit;
        }
        opt_pos.step(&mut p_pos, &g_pos);
        opt_rot.step(&mut p_rot, &g_rot);
        opt_scale.step(&mut p_scale, &g_scale);
        opt_color.step(&mut p_color, &g_color);
        opt_op.step(&mut p_op, &g_op);
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            for j in 0..3 {
                g.position[j] = p_pos[3 * i + j];
                // Guard against exp overflow far from the data.
                g.log_scale[j] = p_scale[3 * i + j].clamp(-20.0, 3.0);
                g.sh_dc[j] = p_color[3 * i + j];
            }
            for j in 0..4 {
                g.rotation[j] = p_rot[4 * i + j];
            }
            g.opacity_logit = p_op[i].clamp(-12.0, 12.0);
        }
    }

    let per_view_psnr = targets
        .iter()
        .zip(cameras)
        .map(|(t, c)| crate::metrics::psnr(&render(&cloud, c, background), t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(FitOutput {
        cloud,
        per_view_psnr,
        log,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    background: [f64; 3],
    n_views: usize,
}

/// Scene bundle directory: cameras JSON, target PNGs, ground-truth PLY.
pub fn save_scene(dir: &Path, scene: &ToyScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_cameras(&dir.join("cameras.json"), &scene.cameras)?;
    save_ply(&scene.gt_cloud, &dir.join("gt.ply"))?;
    let tdir = dir.join("targets");
    std::fs::create_dir_all(&tdir)?;
    for (i, img) in scene.target_images.iter().enumerate() {
        img.save_png(&tdir.join(format!("view_{i:03}.png")))?;
    }
    let meta = SceneMeta {
        background: scene.background,
        n_views: scene.cameras.len(),
    };
    std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a scene bundle. Targets come back 8-bit quantized (they were PNGs).
pub fn load_scene(dir: &Path) -> Result<ToyScene> {
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
    let cameras = load_cameras(&dir.join("cameras.json"))?;
    let gt_cloud = load_ply(&dir.join("gt.ply"))?;
    let mut target_images = Vec::with_capacity(meta.n_views);
    for i in 0..meta.n_views {
        let path = dir.join("targets").join(format!("view_{i:03}.png"));
        if !path.exists() {
            return Err(Error::Format(format!(
                "scene bundle missing target image {}",
                path.display()
            )));
        }
        target_images.push(Image::load_png(&path)?);
    }
    Ok(ToyScene {
        gt_cloud,
        cameras,
        target_images,
        background: meta.background,
    })
}
