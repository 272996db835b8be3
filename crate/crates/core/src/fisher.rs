//! Laplace-approximation uncertainty for Gaussian clouds.
//!
//! With unit RGB covariance the Hessian of the image likelihood reduces to
//! the squared rendering Jacobian, so the diagonal Fisher information of a
//! view is the per-parameter sum of squared per-pixel gradients. Summing over
//! views (Fisher information is additive) and over parameter groups yields a
//! scalar uncertainty per Gaussian.

use crate::error::{Error, Result};
use crate::gscloud::{sh_rest_len, GaussianCloud};
use crate::rng::rng_for;
use crate::splatter::{render_squared_grads, render_with_grads, Camera, CloudGrads, Image};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-Gaussian, per-parameter-group diagonal Fisher entries; all ≥ 0 and
/// additive over disjoint view sets.
#[derive(Debug, Clone)]
pub struct ParamFisher {
    pub entries: CloudGrads,
}

impl ParamFisher {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        ParamFisher {
            entries: CloudGrads::zeros(cloud),
        }
    }

    pub fn add_assign(&mut self, other: &ParamFisher) {
        self.entries.add_assign(&other.entries);
    }

    /// Sum of entries for one Gaussian within each group
    /// (position, rotation, log-scale, SH, opacity).
    pub fn group_sums(&self, i: usize) -> [f64; 5] {
        let e = &self.entries;
        [
            e.position[i].iter().sum(),
            e.rotation[i].iter().sum(),
            e.log_scale[i].iter().sum(),
            e.sh_dc[i].iter().sum::<f64>() + e.sh_rest[i].iter().sum::<f64>(),
            e.opacity_logit[i],
        ]
    }
}

/// Exact per-view diagonal Fisher: Σ over pixels and channels of squared
/// gradients of the rendered image w.r.t. every parameter.
pub fn per_view_fisher(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> ParamFisher {
    ParamFisher {
        entries: render_squared_grads(cloud, cam, background),
    }
}

/// Hutchinson-style stochastic estimate of the per-view Fisher diagonal.
///
/// Each probe backpropagates a Rademacher-weighted image; the mean of squared
/// probe gradients is an unbiased estimate of the squared-gradient sum.
/// Approximate — intended for scenes too large for the exact pass.
pub fn per_view_fisher_stochastic(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    probes: usize,
    seed: u64,
) -> ParamFisher {
    assert!(probes > 0, "need at least one probe");
    let mut rng = rng_for(seed, "fisher-probes");
    let mut acc = CloudGrads::zeros(cloud);
    let rest = sh_rest_len(cloud.sh_degree);
    for _ in 0..probes {
        let mut w = Image::new(cam.width, cam.height);
        for v in &mut w.data {
            *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let (_, g) = render_with_grads(cloud, cam, background, &w);
        for i in 0..cloud.len() {
            for j in 0..3 {
                acc.position[i][j] += g.position[i][j] * g.position[i][j];
                acc.log_scale[i][j] += g.log_scale[i][j] * g.log_scale[i][j];
                acc.sh_dc[i][j] += g.sh_dc[i][j] * g.sh_dc[i][j];
            }
            for j in 0..4 {
                acc.rotation[i][j] += g.rotation[i][j] * g.rotation[i][j];
            }
            for j in 0..rest {
                acc.sh_rest[i][j] += g.sh_rest[i][j] * g.sh_rest[i][j];
            }
            acc.opacity_logit[i] += g.opacity_logit[i] * g.opacity_logit[i];
        }
    }
    let scale = 1.0 / probes as f64;
    for i in 0..cloud.len() {
        acc.position[i] *= scale;
        acc.log_scale[i] *= scale;
        acc.sh_dc[i] *= scale;
        for j in 0..4 {
            acc.rotation[i][j] *= scale;
        }
        for v in &mut acc.sh_rest[i] {
            *v *= scale;
        }
        acc.opacity_logit[i] *= scale;
    }
    ParamFisher { entries: acc }
}

/// Options for reducing per-parameter Fisher entries to scalar uncertainty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FisherOptions {
    /// Divide each group's contribution by its parameter count before the
    /// group sum. Compensates the scale mismatch between groups; raw mode
    /// (paper-literal) is available for parity experiments.
    pub normalize_groups: bool,
}

impl Default for FisherOptions {
    fn default() -> Self {
        FisherOptions {
            normalize_groups: true,
        }
    }
}

/// Per-Gaussian scalar uncertainty with its default threshold (the mean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub u: Vec<f64>,
    /// Mean uncertainty; the default selection threshold.
    pub tau: f64,
}

/// Sum group-reduced Fisher entries over all views of the training set.
pub fn total_uncertainty(
    cloud: &GaussianCloud,
    cams: &[Camera],
    background: [f64; 3],
    opts: FisherOptions,
) -> Result<UncertaintyMap> {
    if cams.is_empty() {
        return Err(Error::Empty("view set for uncertainty".into()));
    }
    let mut total = ParamFisher::zeros(cloud);
    for cam in cams {
        total.add_assign(&per_view_fisher(cloud, cam, background));
    }
    Ok(reduce_to_uncertainty(cloud, &total, opts))
}

/// Group-sum reduction of an accumulated [`ParamFisher`].
pub fn reduce_to_uncertainty(
    cloud: &GaussianCloud,
    fisher: &ParamFisher,
    opts: FisherOptions,
) -> UncertaintyMap {
    let sh_count = (3 + sh_rest_len(cloud.sh_degree)) as f64;
    let counts = [3.0, 4.0, 3.0, sh_count, 1.0];
    let mut u = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let sums = fisher.group_sums(i);
        let mut ui = 0.0;
        for (s, c) in sums.iter().zip(&counts) {
            ui += if opts.normalize_groups { s / c } else { *s };
        }
        u.push(ui);
    }
    let tau = mean(&u);
    UncertaintyMap { u, tau }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// τ_unc = multiplier · mean(u).
pub fn threshold(map: &UncertaintyMap, multiplier: f64) -> f64 {
    assert!(multiplier > 0.0, "threshold multiplier must be positive");
    multiplier * mean(&map.u)
}

/// Indices with uncertainty strictly above τ, in ascending order.
pub fn select_high(map: &UncertaintyMap, tau: f64) -> Vec<usize> {
    map.u
        .iter()
        .enumerate()
        .filter(|(_, &u)| u > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Diagnostic rendering: per-pixel sum of α-weighted uncertainty of the
/// contributing splats, normalized to [0,1].
pub fn uncertainty_heatmap(
    cloud: &GaussianCloud,
    cam: &Camera,
    map: &UncertaintyMap,
) -> Image {
    use crate::splatter::{alpha_at, project};
    let mut splats = Vec::new();
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if let Some(s) = project(g, cloud.sh_degree, cam) {
            splats.push((s, map.u[i]));
        }
    }
    let mut img = Image::new(cam.width, cam.height);
    let mut max_val: f64 = 0.0;
    let mut vals = vec![0.0f64; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let pixel = nalgebra::Vector2::new(x as f64, y as f64);
            let mut acc = 0.0;
            for (s, u) in &splats {
                acc += alpha_at(s, &pixel) * u;
            }
            vals[y * cam.width + x] = acc;
            max_val = max_val.max(acc);
        }
    }
    if max_val > 0.0 {
        for (i, v) in vals.iter().enumerate() {
            let t = v / max_val;
            img.data[i * 3] = t;
            img.data[i * 3 + 1] = t;
            img.data[i * 3 + 2] = t;
        }
    }
    img
}

#[derive(Serialize, Deserialize)]
struct UncertaintyJson {
    tau: f64,
    u: Vec<f64>,
}

pub fn save_uncertainty_json(path: &Path, map: &UncertaintyMap) -> Result<()> {
    let json = serde_json::to_string_pretty(&UncertaintyJson {
        tau: map.tau,
        u: map.u.clone(),
    })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_uncertainty_json(path: &Path) -> Result<UncertaintyMap> {
    let text = std::fs::read_to_string(path)?;
    let j: UncertaintyJson = serde_json::from_str(&text)?;
    Ok(UncertaintyMap { u: j.u, tau: j.tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gscloud::Gaussian;
    use nalgebra::{Matrix3, Vector3};

    fn scene() -> (GaussianCloud, Vec<Camera>) {
        let gaussians = vec![
            Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.15, Vector3::new(0.5, -0.3, 0.2), 0.7),
            Gaussian::isotropic(Vector3::new(0.3, -0.2, 2.5), 0.2, Vector3::new(-0.4, 0.6, 0.1), 0.5),
            Gaussian::isotropic(Vector3::new(-0.25, 0.2, 3.0), 0.18, Vector3::new(0.1, 0.2, -0.5), 0.6),
        ];
        let cloud = GaussianCloud::new(gaussians, 0).unwrap();
        let cams = vec![
            Camera {
                fx: 12.0,
                fy: 12.0,
                cx: 5.0,
                cy: 5.0,
                width: 10,
                height: 10,
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
            },
            Camera::look_at(
                Vector3::new(1.5, 1.0, 0.5),
                Vector3::new(0.0, 0.0, 2.5),
                Vector3::z(),
                12.0,
                12.0,
                10,
                10,
            ),
        ];
        (cloud, cams)
    }

    #[test]
    fn entries_are_nonnegative() {
        let (cloud, cams) = scene();
        let f = per_view_fisher(&cloud, &cams[0], [1.0; 3]);
        for i in 0..cloud.len() {
            for s in f.group_sums(i) {
                assert!(s >= 0.0);
            }
        }
    }

    #[test]
    fn culled_gaussian_has_zero_entries() {
        let (mut cloud, cams) = scene();
        cloud.gaussians[2].position = Vector3::new(0.0, 0.0, -5.0);
        let f = per_view_fisher(&cloud, &cams[0], [1.0; 3]);
        assert_eq!(f.group_sums(2), [0.0; 5]);
        let map = total_uncertainty(&cloud, &cams[..1], [1.0; 3], FisherOptions::default()).unwrap();
        assert_eq!(map.u[2], 0.0);
    }

    #[test]
    fn additive_over_view_partition() {
        let (cloud, cams) = scene();
        let opts = FisherOptions::default();
        let both = total_uncertainty(&cloud, &cams, [1.0; 3], opts).unwrap();
        let a = total_uncertainty(&cloud, &cams[..1], [1.0; 3], opts).unwrap();
        let b = total_uncertainty(&cloud, &cams[1..], [1.0; 3], opts).unwrap();
        for i in 0..cloud.len() {
            // Sums of nonnegative per-view terms: exact equality.
            assert_eq!(both.u[i], a.u[i] + b.u[i]);
        }
    }

    #[test]
    fn empty_view_set_errors() {
        let (cloud, _) = scene();
        assert!(total_uncertainty(&cloud, &[], [1.0; 3], FisherOptions::default()).is_err());
    }

    #[test]
    fn threshold_is_scaled_mean_and_selection_strict() {
        let map = UncertaintyMap {
            u: vec![1.0, 2.0, 3.0, 6.0],
            tau: 3.0,
        };
        assert_eq!(threshold(&map, 1.0), 3.0);
        // Strict inequality: the mean itself is not selected.
        assert_eq!(select_high(&map, 3.0), vec![3]);
        assert_eq!(select_high(&map, 6.0), Vec::<usize>::new());
        assert_eq!(select_high(&map, 0.0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn all_equal_uncertainty_is_all_or_nothing() {
        let map = UncertaintyMap {
            u: vec![2.5; 8],
            tau: 2.5,
        };
        assert_eq!(threshold(&map, 0.9), 2.25);
        assert_eq!(select_high(&map, 2.25).len(), 8);
        assert_eq!(select_high(&map, threshold(&map, 1.0)).len(), 0);
    }

    #[test]
    fn selection_is_monotone_in_tau() {
        let (cloud, cams) = scene();
        let map = total_uncertainty(&cloud, &cams, [1.0; 3], FisherOptions::default()).unwrap();
        let taus = [0.0, 0.5 * map.tau, map.tau, 2.0 * map.tau];
        let mut prev = select_high(&map, taus[0]);
        for t in &taus[1..] {
            let cur = select_high(&map, *t);
            assert!(cur.iter().all(|i| prev.contains(i)));
            prev = cur;
        }
    }

    #[test]
    fn stochastic_estimator_tracks_exact_fisher() {
        let (cloud, cams) = scene();
        let exact = per_view_fisher(&cloud, &cams[0], [1.0; 3]);
        let approx = per_view_fisher_stochastic(&cloud, &cams[0], [1.0; 3], 64, 7);
        // Unbiased estimate: group sums should agree within sampling noise.
        for i in 0..cloud.len() {
            let e = exact.group_sums(i);
            let a = approx.group_sums(i);
            for (ev, av) in e.iter().zip(&a) {
                if *ev > 1e-6 {
                    let rel = (ev - av).abs() / ev;
                    assert!(rel < 0.6, "group rel err {rel} ({ev} vs {av})");
                }
            }
        }
    }

    #[test]
    fn heatmap_is_normalized_and_nonuniform() {
        let (cloud, cams) = scene();
        let map = total_uncertainty(&cloud, &cams, [1.0; 3], FisherOptions::default()).unwrap();
        let hm = uncertainty_heatmap(&cloud, &cams[0], &map);
        assert!(hm.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(hm.std() > 1e-6);
    }
}
