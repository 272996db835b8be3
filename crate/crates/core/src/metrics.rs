//! Quality and fidelity metrics for images and Gaussian geometry.

use crate::error::{Error, Result};
use crate::gscloud::{GaussianCloud, Origin};
use crate::splatter::Image;
use crate::wm2d::{Message, SoftBits};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// PSNR and SNR values are capped here so identical inputs stay finite.
pub const DB_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB on the [0,1] range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Mismatch(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse <= 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(DB_CAP))
}

fn luma(img: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.width * img.height);
    for px in img.data.chunks_exact(3) {
        out.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
    }
    out
}

/// Windowed SSIM on grayscale: 11×11 Gaussian window (σ = 1.5),
/// C₁ = 0.01², C₂ = 0.03², mean over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Mismatch(format!(
            "ssim shape mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    const WIN: usize = 11;
    if a.width < WIN || a.height < WIN {
        return Err(Error::Mismatch(format!(
            "ssim needs at least {WIN}x{WIN} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    // Normalized 11×11 Gaussian kernel, σ = 1.5.
    let mut kernel = [0.0f64; WIN * WIN];
    let sigma = 1.5f64;
    let mut ksum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let dy = (i / WIN) as f64 - 5.0;
        let dx = (i % WIN) as f64 - 5.0;
        *k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        ksum += *k;
    }
    for k in &mut kernel {
        *k /= ksum;
    }

    let ga = luma(a);
    let gb = luma(b);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..WIN {
                for kx in 0..WIN {
                    let kw = kernel[ky * WIN + kx];
                    let va = ga[(y0 + ky) * w + x0 + kx];
                    let vb = gb[(y0 + ky) * w + x0 + kx];
                    mu_a += kw * va;
                    mu_b += kw * vb;
                    aa += kw * va * va;
                    bb += kw * vb * vb;
                    ab += kw * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of hard bits (p ≥ 0.5 → 1) matching the message.
pub fn bit_accuracy(p: &SoftBits, m: &Message) -> f64 {
    let mut matches = 0usize;
    for (prob, bit) in p.probs.iter().zip(m.bits.iter()) {
        let hard = if *prob >= 0.5 { 1u8 } else { 0u8 };
        if hard == *bit {
            matches += 1;
        }
    }
    matches as f64 / m.bits.len() as f64
}

/// Geometry fidelity between a source cloud and a watermarked cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryDiff {
    /// Mean of absolute per-coordinate position differences.
    pub l1diff: f64,
    /// 10·log₁₀(Σ‖μ‖² / Σ‖Δμ‖²), capped at [`DB_CAP`].
    pub snr_geom: f64,
    /// True when nearest-neighbor matching was used (unflagged cloud).
    pub approximate: bool,
}

/// Compare positions of the ORIGINAL subset against the source cloud.
///
/// Primary mode applies when the watermarked cloud carries marker flags: the
/// ORIGINAL subset must match the source cardinality and is compared
/// index-aligned (exactly zero difference under the frozen-original
/// contract). Unflagged clouds fall back to nearest-neighbor matching and are
/// labeled approximate.
pub fn geometry_diff(original: &GaussianCloud, watermarked: &GaussianCloud) -> Result<GeometryDiff> {
    let flagged = watermarked.origin.iter().any(|&o| o == Origin::Marker);
    let (pairs, approximate): (Vec<(usize, usize)>, bool) = if flagged {
        let orig_idx: Vec<usize> = watermarked
            .origin
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == Origin::Original)
            .map(|(i, _)| i)
            .collect();
        if orig_idx.len() != original.len() {
            return Err(Error::Mismatch(format!(
                "ORIGINAL subset has {} Gaussians but source cloud has {}",
                orig_idx.len(),
                original.len()
            )));
        }
        (orig_idx.into_iter().enumerate().collect(), false)
    } else {
        if watermarked.is_empty() {
            return Err(Error::Empty("watermarked cloud".into()));
        }
        let mut pairs = Vec::with_capacity(original.len());
        for (i, g) in original.gaussians.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, h) in watermarked.gaussians.iter().enumerate() {
                let d = (g.position - h.position).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            pairs.push((i, best));
        }
        (pairs, true)
    };

    let mut abs_sum = 0.0;
    let mut ref_energy = 0.0;
    let mut diff_energy = 0.0;
    for &(i, j) in &pairs {
        let a = &original.gaussians[i].position;
        let b = &watermarked.gaussians[j].position;
        let d = a - b;
        abs_sum += d.x.abs() + d.y.abs() + d.z.abs();
        ref_energy += a.norm_squared();
        diff_energy += d.norm_squared();
    }
    let coords = (3 * pairs.len()).max(1) as f64;
    let l1diff = abs_sum / coords;
    let snr_geom = if diff_energy <= 0.0 {
        DB_CAP
    } else {
        (10.0 * (ref_energy / diff_energy).log10()).min(DB_CAP)
    };
    Ok(GeometryDiff {
        l1diff,
        snr_geom,
        approximate,
    })
}

/// Evaluation report mirroring the robustness-table structure: reconstruction
/// metrics, geometry difference, and per-distortion bit accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Convention note for the geometry reduction, recorded in the header.
    pub l1diff_convention: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bit_accuracy_2d_clean: f64,
    pub bit_accuracy_3d_clean: f64,
    pub l1diff: f64,
    pub snr_geom: f64,
    pub geometry_approximate: bool,
    /// 2D decoder accuracy on distorted renders, keyed by distortion name.
    pub bits_2d: BTreeMap<String, f64>,
    /// 3D decoder accuracy on distorted point samples.
    pub bits_3d: BTreeMap<String, f64>,
    /// 2D decoder accuracy on renders taken after a 3D attack.
    pub bits_2d_after_3d_attack: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("psnr,{}\n", self.psnr));
        out.push_str(&format!("ssim,{}\n", self.ssim));
        out.push_str(&format!("bit_accuracy_2d_clean,{}\n", self.bit_accuracy_2d_clean));
        out.push_str(&format!("bit_accuracy_3d_clean,{}\n", self.bit_accuracy_3d_clean));
        out.push_str(&format!("l1diff,{}\n", self.l1diff));
        out.push_str(&format!("snr_geom,{}\n", self.snr_geom));
        for (k, v) in &self.bits_2d {
            out.push_str(&format!("bits_2d.{k},{v}\n"));
        }
        for (k, v) in &self.bits_3d {
            out.push_str(&format!("bits_3d.{k},{v}\n"));
        }
        for (k, v) in &self.bits_2d_after_3d_attack {
            out.push_str(&format!("bits_2d_after_3d_attack.{k},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gscloud::Gaussian;
    use nalgebra::Vector3;
    use rand::Rng;

    fn img_with(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, [f(x, y, 0), f(x, y, 1), f(x, y, 2)]);
            }
        }
        img
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = img_with(8, 8, |x, y, c| (x + y + c) as f64 / 20.0);
        assert_eq!(psnr(&a, &a).unwrap(), DB_CAP);
    }

    #[test]
    fn psnr_analytic_values() {
        let a = img_with(8, 8, |_, _, _| 0.5);
        // Uniform offset 0.1 → MSE 0.01 → 20 dB.
        let b = img_with(8, 8, |_, _, _| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        // Offset 0.01 → MSE 1e-4 → 40 dB.
        let c = img_with(8, 8, |_, _, _| 0.51);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_decreases_with_noise() {
        let a = img_with(16, 16, |x, y, _| ((x * 7 + y * 3) % 11) as f64 / 11.0);
        let mut rng = crate::rng::rng_for(3, "psnr");
        let mut noisy = |scale: f64| {
            let mut b = a.clone();
            for v in &mut b.data {
                *v = (*v + rng.gen_range(-scale..scale)).clamp(0.0, 1.0);
            }
            b
        };
        let b1 = noisy(0.02);
        let b2 = noisy(0.2);
        assert_eq!(psnr(&a, &b1).unwrap(), psnr(&b1, &a).unwrap());
        assert!(psnr(&a, &b1).unwrap() > psnr(&a, &b2).unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = img_with(16, 16, |x, y, _| ((x * 5 + y) % 9) as f64 / 9.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_matches_closed_form() {
        // μa=0, μb=1, zero variances: SSIM = C1·C2 / ((1+C1)·C2) = C1/(1+C1) ≈ 1e-4.
        let a = img_with(16, 16, |_, _, _| 0.0);
        let b = img_with(16, 16, |_, _, _| 1.0);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1e-3, "ssim = {s}");
        assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = img_with(16, 16, |x, y, _| ((x + 2 * y) % 7) as f64 / 7.0);
        let b = img_with(16, 16, |x, y, _| ((3 * x + y) % 5) as f64 / 5.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bit_accuracy_extremes_and_tie_rule() {
        let m = Message::from_bit_fn(|i| (i % 2) as u8);
        let p_match = SoftBits::from_fn(|i| if i % 2 == 1 { 0.9 } else { 0.1 });
        assert_eq!(bit_accuracy(&p_match, &m), 1.0);
        let p_inv = SoftBits::from_fn(|i| if i % 2 == 1 { 0.1 } else { 0.9 });
        assert_eq!(bit_accuracy(&p_inv, &m), 0.0);
        // p = 0.5 everywhere decodes to all ones: accuracy = fraction of 1s.
        let p_tie = SoftBits::from_fn(|_| 0.5);
        assert_eq!(bit_accuracy(&p_tie, &m), 0.5);
    }

    #[test]
    fn bit_accuracy_complement_property() {
        let mut rng = crate::rng::rng_for(9, "bits");
        for _ in 0..20 {
            let m = Message::random(&mut rng);
            let p = SoftBits::from_fn(|_| rng.gen_range(0.0..1.0));
            // Tie-free with probability 1.
            let inv = SoftBits::from_fn(|i| 1.0 - p.probs[i]);
            let total = bit_accuracy(&p, &m) + bit_accuracy(&inv, &m);
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    fn cloud_at(positions: &[[f64; 3]]) -> GaussianCloud {
        let gaussians = positions
            .iter()
            .map(|p| Gaussian::isotropic(Vector3::new(p[0], p[1], p[2]), 0.1, Vector3::zeros(), 0.5))
            .collect();
        GaussianCloud::new(gaussians, 0).unwrap()
    }

    #[test]
    fn geometry_diff_frozen_originals_is_exact_zero() {
        let original = cloud_at(&[[0.0, 0.0, 1.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let markers = {
            let mut c = cloud_at(&[[0.1, 0.1, 1.1]]);
            c.origin[0] = Origin::Marker;
            c
        };
        let merged = crate::gscloud::union(&original, &markers).unwrap();
        let d = geometry_diff(&original, &merged).unwrap();
        assert_eq!(d.l1diff, 0.0);
        assert_eq!(d.snr_geom, DB_CAP);
        assert!(!d.approximate);
    }

    #[test]
    fn geometry_diff_single_coordinate_perturbation() {
        let positions: Vec<[f64; 3]> = (0..100).map(|i| [i as f64 * 0.1, 0.0, 1.0]).collect();
        let original = cloud_at(&positions);
        let mut perturbed = original.clone();
        perturbed.gaussians[17].position.x += 0.001;
        // Flag one marker so primary mode compares the aligned subset... the
        // perturbation sits in the ORIGINAL subset and must be visible.
        let mut with_marker = perturbed.clone();
        with_marker.gaussians.push(original.gaussians[0].clone());
        with_marker.origin.push(Origin::Marker);
        let d = geometry_diff(&original, &with_marker).unwrap();
        // Mean over 300 coordinates of one 0.001 difference.
        assert!((d.l1diff - 0.001 / 300.0).abs() < 1e-15, "l1diff {}", d.l1diff);
        assert!(d.snr_geom < DB_CAP);
    }

    #[test]
    fn geometry_diff_cardinality_mismatch_errors() {
        let original = cloud_at(&[[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]);
        let mut wm = cloud_at(&[[0.0, 0.0, 1.0]]);
        wm.origin.push(Origin::Marker);
        wm.gaussians.push(wm.gaussians[0].clone());
        // ORIGINAL subset has 1 entry, source has 2.
        assert!(geometry_diff(&original, &wm).is_err());
    }

    #[test]
    fn geometry_diff_unflagged_uses_nearest_neighbor() {
        let original = cloud_at(&[[0.0, 0.0, 1.0], [5.0, 0.0, 1.0]]);
        // Same points, permuted, no flags.
        let wm = cloud_at(&[[5.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        let d = geometry_diff(&original, &wm).unwrap();
        assert!(d.approximate);
        assert_eq!(d.l1diff, 0.0);
    }
}
