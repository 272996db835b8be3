//! 2D distortion layer: evaluation-mode attacks and the differentiable
//! training-mode counterparts.
//!
//! JPEG uses a real codec in evaluation mode and a blockwise-DCT
//! approximation with a cubic soft-round in training mode. The geometric
//! distortions (scale, blur, crop, rotate) are linear resampling operators;
//! training mode reuses the same tap maps and backpropagates through their
//! transpose.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::splatter::Image;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Blur σ = ξ · min(H, W) / this constant.
pub const BLUR_SIGMA_DIVISOR: f64 = 30.0;

/// One 2D distortion. `Rotate.max_angle` draws a uniform angle in
/// [−max, max] per call (the training layer uses random rotations; rotation
/// is not part of the 2D evaluation suite).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistortionSpec2D {
    None,
    Noise { nu: f64 },
    Jpeg { quality: u8 },
    Scale { s: f64 },
    Blur { xi: f64 },
    Crop { fraction: f64 },
    Rotate { max_angle: f64 },
}

impl DistortionSpec2D {
    pub fn name(&self) -> String {
        match self {
            DistortionSpec2D::None => "none".into(),
            DistortionSpec2D::Noise { nu } => format!("noise_{nu}"),
            DistortionSpec2D::Jpeg { quality } => format!("jpeg_{quality}"),
            DistortionSpec2D::Scale { s } => format!("scale_{s}"),
            DistortionSpec2D::Blur { xi } => format!("blur_{xi}"),
            DistortionSpec2D::Crop { fraction } => format!("crop_{fraction}"),
            DistortionSpec2D::Rotate { max_angle } => format!("rotate_{max_angle}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DistortionSpec2D::None => true,
            DistortionSpec2D::Noise { nu } => *nu >= 0.0 && nu.is_finite(),
            DistortionSpec2D::Jpeg { quality } => (1..=100).contains(quality),
            DistortionSpec2D::Scale { s } => *s > 0.0 && *s <= 1.0,
            DistortionSpec2D::Blur { xi } => *xi >= 0.0 && xi.is_finite(),
            DistortionSpec2D::Crop { fraction } => *fraction > 0.0 && *fraction <= 1.0,
            DistortionSpec2D::Rotate { max_angle } => max_angle.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "distortion parameter out of range: {self:?}"
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Linear resampling operators as explicit tap maps.

struct LinearOp {
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
    /// `per_out` (index, weight) taps per output pixel, row-major.
    taps: Vec<(u32, f64)>,
    per_out: usize,
}

impl LinearOp {
    fn apply(&self, img: &Image) -> Image {
        assert_eq!((img.width, img.height), (self.in_w, self.in_h));
        let mut out = Image::new(self.out_w, self.out_h);
        for pi in 0..self.out_w * self.out_h {
            let mut acc = [0.0f64; 3];
            for t in &self.taps[pi * self.per_out..(pi + 1) * self.per_out] {
                let src = t.0 as usize * 3;
                acc[0] += t.1 * img.data[src];
                acc[1] += t.1 * img.data[src + 1];
                acc[2] += t.1 * img.data[src + 2];
            }
            out.data[pi * 3..pi * 3 + 3].copy_from_slice(&acc);
        }
        out
    }

    /// Transpose: scatter output-side gradients back to input pixels.
    fn transpose(&self, d_out: &Image) -> Image {
        assert_eq!((d_out.width, d_out.height), (self.out_w, self.out_h));
        let mut d_in = Image::new(self.in_w, self.in_h);
        for pi in 0..self.out_w * self.out_h {
            let g = &d_out.data[pi * 3..pi * 3 + 3];
            for t in &self.taps[pi * self.per_out..(pi + 1) * self.per_out] {
                let src = t.0 as usize * 3;
                d_in.data[src] += t.1 * g[0];
                d_in.data[src + 1] += t.1 * g[1];
                d_in.data[src + 2] += t.1 * g[2];
            }
        }
        d_in
    }
}

fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Bilinear resize with center-aligned sampling and clamped taps.
fn resize_op(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> LinearOp {
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let mut taps = Vec::with_capacity(out_w * out_h * 4);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            taps.push(((y0 * in_w + x0) as u32, (1.0 - wy) * (1.0 - wx)));
            taps.push(((y0 * in_w + x1) as u32, (1.0 - wy) * wx));
            taps.push(((y1 * in_w + x0) as u32, wy * (1.0 - wx)));
            taps.push(((y1 * in_w + x1) as u32, wy * wx));
        }
    }
    LinearOp {
        in_w,
        in_h,
        out_w,
        out_h,
        taps,
        per_out: 4,
    }
}

/// Rotation about the image center with reflection padding, bilinear taps.
fn rotate_op(w: usize, h: usize, angle: f64) -> LinearOp {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut taps = Vec::with_capacity(w * h * 4);
    for oy in 0..h {
        for ox in 0..w {
            // Inverse-rotate the output pixel into source coordinates.
            let dx = ox as f64 - cx;
            let dy = oy as f64 - cy;
            let sxf = cos * dx + sin * dy + cx;
            let syf = -sin * dx + cos * dy + cy;
            let x0 = sxf.floor() as i64;
            let y0 = syf.floor() as i64;
            let wx = sxf - x0 as f64;
            let wy = syf - y0 as f64;
            for (iy, wyv) in [(y0, 1.0 - wy), (y0 + 1, wy)] {
                for (ix, wxv) in [(x0, 1.0 - wx), (x0 + 1, wx)] {
                    let rx = reflect_index(ix, w);
                    let ry = reflect_index(iy, h);
                    taps.push(((ry * w + rx) as u32, wyv * wxv));
                }
            }
        }
    }
    LinearOp {
        in_w: w,
        in_h: h,
        out_w: w,
        out_h: h,
        taps,
        per_out: 4,
    }
}

/// Separable Gaussian blur as two tap passes with replicate boundaries.
fn blur_ops(w: usize, h: usize, sigma: f64) -> Option<(LinearOp, LinearOp)> {
    if sigma <= 0.0 {
        return None;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let klen = kernel.len();

    let mut htaps = Vec::with_capacity(w * h * klen);
    for y in 0..h {
        for x in 0..w {
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                htaps.push(((y * w + sx) as u32, *kv));
            }
        }
    }
    let mut vtaps = Vec::with_capacity(w * h * klen);
    for y in 0..h {
        for x in 0..w {
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                vtaps.push(((sy * w + x) as u32, *kv));
            }
        }
    }
    Some((
        LinearOp {
            in_w: w,
            in_h: h,
            out_w: w,
            out_h: h,
            taps: htaps,
            per_out: klen,
        },
        LinearOp {
            in_w: w,
            in_h: h,
            out_w: w,
            out_h: h,
            taps: vtaps,
            per_out: klen,
        },
    ))
}

/// Crop window (x0, y0, cw, ch) for an area fraction, seeded placement.
fn crop_window(w: usize, h: usize, fraction: f64, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let side = fraction.sqrt();
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let x0 = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    let y0 = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    (x0, y0, cw, ch)
}

fn crop_extract_op(w: usize, h: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> LinearOp {
    let mut taps = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        for x in 0..cw {
            taps.push((((y0 + y) * w + x0 + x) as u32, 1.0));
        }
    }
    LinearOp {
        in_w: w,
        in_h: h,
        out_w: cw,
        out_h: ch,
        taps,
        per_out: 1,
    }
}

// ---------------------------------------------------------------------------
// JPEG: real codec (evaluation) and differentiable approximation (training).

const LUMA_TABLE: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69,
    56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104,
    113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];
const CHROMA_TABLE: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99,
    99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

fn scaled_table(base: &[i32; 64], quality: u8) -> [f64; 64] {
    let q = quality as i32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// Orthonormal DCT-II basis, C[k][n].
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

fn rgb_to_ycbcr(px: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = px;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 0.5,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 0.5,
    ]
}

fn ycbcr_to_rgb(px: [f64; 3]) -> [f64; 3] {
    let [y, cb, cr] = [px[0], px[1] - 0.5, px[2] - 0.5];
    [
        y + 1.402 * cr,
        y - 0.344_136 * cb - 0.714_136 * cr,
        y + 1.772 * cb,
    ]
}

/// Transpose of the RGB→YCbCr linear map (gradients flow backwards through
/// the color transform).
fn d_rgb_from_d_ycbcr(d: [f64; 3]) -> [f64; 3] {
    [
        0.299 * d[0] - 0.168_736 * d[1] + 0.5 * d[2],
        0.587 * d[0] - 0.331_264 * d[1] - 0.418_688 * d[2],
        0.114 * d[0] + 0.5 * d[1] - 0.081_312 * d[2],
    ]
}

/// Context for the training-mode JPEG backward pass.
pub(crate) struct JpegCtx {
    width: usize,
    height: usize,
    /// x − round(x) for every quantized coefficient, block-major.
    frac: Vec<f64>,
    /// 1 where the final [0,1] clamp was inactive.
    clamp_mask: Vec<f64>,
}

fn block_starts(n: usize) -> Vec<usize> {
    (0..n / 8).map(|i| i * 8).collect()
}

/// Differentiable JPEG approximation: blockwise DCT, quantization-table
/// division, cubic soft-round, inverse chain. No chroma subsampling.
/// Dimensions must be multiples of 8 (disjoint blocks keep the backward an
/// exact transpose).
pub(crate) fn jpeg_diff_forward(img: &Image, quality: u8) -> (Image, JpegCtx) {
    assert!(
        img.width % 8 == 0 && img.height % 8 == 0 && img.width > 0 && img.height > 0,
        "differentiable JPEG needs multiple-of-8 dimensions, got {}x{}",
        img.width,
        img.height
    );
    let luma = scaled_table(&LUMA_TABLE, quality);
    let chroma = scaled_table(&CHROMA_TABLE, quality);
    let c = dct_matrix();

    // To YCbCr planes in the [0,255] domain, centered at 0.
    let npix = img.width * img.height;
    let mut planes = vec![0.0f64; 3 * npix];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        let ycc = rgb_to_ycbcr([px[0], px[1], px[2]]);
        for ch in 0..3 {
            planes[ch * npix + i] = ycc[ch] * 255.0 - 128.0;
        }
    }

    let xs = block_starts(img.width);
    let ys = block_starts(img.height);
    let mut frac = Vec::with_capacity(3 * xs.len() * ys.len() * 64);
    let mut out_planes = planes.clone();
    for ch in 0..3 {
        let table = if ch == 0 { &luma } else { &chroma };
        for &by in &ys {
            for &bx in &xs {
                // Load the block.
                let mut blk = [[0.0f64; 8]; 8];
                for (r, row) in blk.iter_mut().enumerate() {
                    for (cc, v) in row.iter_mut().enumerate() {
                        *v = planes[ch * npix + (by + r) * img.width + bx + cc];
                    }
                }
                // DCT: C · blk · Cᵀ.
                let mut tmp = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for n in 0..8 {
                        let mut s = 0.0;
                        for m in 0..8 {
                            s += c[k][m] * blk[m][n];
                        }
                        tmp[k][n] = s;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for l in 0..8 {
                        let mut s = 0.0;
                        for n in 0..8 {
                            s += tmp[k][n] * c[l][n];
                        }
                        coef[k][l] = s;
                    }
                }
                // Quantize with cubic soft-round, then de-quantize.
                for k in 0..8 {
                    for l in 0..8 {
                        let q = table[k * 8 + l];
                        let x = coef[k][l] / q;
                        let r = x.round();
                        let t = x - r;
                        frac.push(t);
                        coef[k][l] = (r + t * t * t) * q;
                    }
                }
                // IDCT: Cᵀ · coef · C.
                for n in 0..8 {
                    for l in 0..8 {
                        let mut s = 0.0;
                        for k in 0..8 {
                            s += c[k][n] * coef[k][l];
                        }
                        tmp[n][l] = s;
                    }
                }
                for n in 0..8 {
                    for m in 0..8 {
                        let mut s = 0.0;
                        for l in 0..8 {
                            s += tmp[n][l] * c[l][m];
                        }
                        blk[n][m] = s;
                    }
                }
                for (r, row) in blk.iter().enumerate() {
                    for (cc, v) in row.iter().enumerate() {
                        out_planes[ch * npix + (by + r) * img.width + bx + cc] = *v;
                    }
                }
            }
        }
    }

    let mut out = Image::new(img.width, img.height);
    let mut clamp_mask = vec![1.0f64; npix * 3];
    for i in 0..npix {
        let ycc = [
            (out_planes[i] + 128.0) / 255.0,
            (out_planes[npix + i] + 128.0) / 255.0,
            (out_planes[2 * npix + i] + 128.0) / 255.0,
        ];
        let rgb = ycbcr_to_rgb(ycc);
        for ch in 0..3 {
            if !(0.0..=1.0).contains(&rgb[ch]) {
                clamp_mask[i * 3 + ch] = 0.0;
            }
            out.data[i * 3 + ch] = rgb[ch].clamp(0.0, 1.0);
        }
    }
    (
        out,
        JpegCtx {
            width: img.width,
            height: img.height,
            frac,
            clamp_mask,
        },
    )
}

pub(crate) fn jpeg_diff_backward(ctx: &JpegCtx, d_out: &Image) -> Image {
    let npix = ctx.width * ctx.height;
    let c = dct_matrix();
    // The forward maps plane = ycc·255−128 and back, so the 255 factors
    // cancel in the gradient; only the clamp mask and the color-transform
    // transposes remain around the block chain.
    let mut d_planes = vec![0.0f64; 3 * npix];
    for i in 0..npix {
        let d_rgb = [
            d_out.data[i * 3] * ctx.clamp_mask[i * 3],
            d_out.data[i * 3 + 1] * ctx.clamp_mask[i * 3 + 1],
            d_out.data[i * 3 + 2] * ctx.clamp_mask[i * 3 + 2],
        ];
        // rgb = M⁻¹ ycc; d_ycc = (M⁻¹)ᵀ d_rgb. Inverse map coefficients:
        let d_ycc = [
            d_rgb[0] + d_rgb[1] + d_rgb[2],
            -0.344_136 * d_rgb[1] + 1.772 * d_rgb[2],
            1.402 * d_rgb[0] - 0.714_136 * d_rgb[1],
        ];
        for ch in 0..3 {
            d_planes[ch * npix + i] = d_ycc[ch];
        }
    }

    let xs = block_starts(ctx.width);
    let ys = block_starts(ctx.height);
    let mut d_in_planes = d_planes.clone();
    let mut fi = 0usize;
    for ch in 0..3 {
        for &by in &ys {
            for &bx in &xs {
                let mut blk = [[0.0f64; 8]; 8];
                for (r, row) in blk.iter_mut().enumerate() {
                    for (cc, v) in row.iter_mut().enumerate() {
                        *v = d_planes[ch * npix + (by + r) * ctx.width + bx + cc];
                    }
                }
                // Transpose of IDCT is the DCT (orthonormal basis).
                let mut tmp = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for n in 0..8 {
                        let mut s = 0.0;
                        for m in 0..8 {
                            s += c[k][m] * blk[m][n];
                        }
                        tmp[k][n] = s;
                    }
                }
                let mut dcoef = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for l in 0..8 {
                        let mut s = 0.0;
                        for n in 0..8 {
                            s += tmp[k][n] * c[l][n];
                        }
                        dcoef[k][l] = s;
                    }
                }
                // Soft-round derivative: d/dx (round + t³)·q / q = 3t².
                for row in dcoef.iter_mut() {
                    for v in row.iter_mut() {
                        let t = ctx.frac[fi];
                        fi += 1;
                        *v *= 3.0 * t * t;
                    }
                }
                // Transpose of DCT is the IDCT.
                for n in 0..8 {
                    for l in 0..8 {
                        let mut s = 0.0;
                        for k in 0..8 {
                            s += c[k][n] * dcoef[k][l];
                        }
                        tmp[n][l] = s;
                    }
                }
                for n in 0..8 {
                    for m in 0..8 {
                        let mut s = 0.0;
                        for l in 0..8 {
                            s += tmp[n][l] * c[l][m];
                        }
                        blk[n][m] = s;
                    }
                }
                for (r, row) in blk.iter().enumerate() {
                    for (cc, v) in row.iter().enumerate() {
                        d_in_planes[ch * npix + (by + r) * ctx.width + bx + cc] = *v;
                    }
                }
            }
        }
    }

    let mut d_in = Image::new(ctx.width, ctx.height);
    for i in 0..npix {
        let d_ycc = [
            d_in_planes[i],
            d_in_planes[npix + i],
            d_in_planes[2 * npix + i],
        ];
        let d_rgb = d_rgb_from_d_ycbcr(d_ycc);
        for ch in 0..3 {
            d_in.data[i * 3 + ch] = d_rgb[ch];
        }
    }
    d_in
}

fn jpeg_real(img: &Image, quality: u8) -> Result<Image> {
    let mut bytes = Vec::with_capacity(img.data.len());
    for v in &img.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode(
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Format(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory(&buf)
        .map_err(|e| Error::Format(format!("jpeg decode failed: {e}")))?
        .to_rgb8();
    let data = decoded.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image {
        width: img.width,
        height: img.height,
        data,
    })
}

// ---------------------------------------------------------------------------
// Public entry points.

/// Apply a distortion with evaluation semantics (real JPEG codec).
pub fn distort2d(img: &Image, spec: &DistortionSpec2D, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = rng_for(seed, "distort2d");
    match spec {
        DistortionSpec2D::None => Ok(img.clone()),
        DistortionSpec2D::Noise { nu } => {
            if *nu == 0.0 {
                return Ok(img.clone());
            }
            let normal = Normal::new(0.0, *nu).unwrap();
            let mut out = img.clone();
            for v in &mut out.data {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        DistortionSpec2D::Jpeg { quality } => jpeg_real(img, *quality),
        DistortionSpec2D::Scale { s } => {
            let dw = ((img.width as f64 * s).round() as usize).max(1);
            let dh = ((img.height as f64 * s).round() as usize).max(1);
            let down = resize_op(img.width, img.height, dw, dh).apply(img);
            Ok(resize_op(dw, dh, img.width, img.height).apply(&down))
        }
        DistortionSpec2D::Blur { xi } => {
            let sigma = xi * img.width.min(img.height) as f64 / BLUR_SIGMA_DIVISOR;
            match blur_ops(img.width, img.height, sigma) {
                None => Ok(img.clone()),
                Some((hop, vop)) => Ok(vop.apply(&hop.apply(img))),
            }
        }
        DistortionSpec2D::Crop { fraction } => {
            let (x0, y0, cw, ch) = crop_window(img.width, img.height, *fraction, &mut rng);
            let cropped = crop_extract_op(img.width, img.height, x0, y0, cw, ch).apply(img);
            Ok(resize_op(cw, ch, img.width, img.height).apply(&cropped))
        }
        DistortionSpec2D::Rotate { max_angle } => {
            let angle = if *max_angle == 0.0 {
                0.0
            } else {
                rng.gen_range(-max_angle.abs()..=max_angle.abs())
            };
            Ok(rotate_op(img.width, img.height, angle).apply(img))
        }
    }
}

/// Differentiable training-mode distortion with a backward closure.
pub(crate) enum TrainDistortion {
    Identity,
    /// Clamp mask from additive noise.
    Masked(Vec<f64>),
    Linear(Vec<LinearOp>),
    Jpeg(JpegCtx),
}

pub(crate) fn distort2d_train(
    img: &Image,
    spec: &DistortionSpec2D,
    seed: u64,
) -> Result<(Image, TrainDistortion)> {
    spec.validate()?;
    let mut rng = rng_for(seed, "distort2d");
    match spec {
        DistortionSpec2D::None => Ok((img.clone(), TrainDistortion::Identity)),
        DistortionSpec2D::Noise { nu } => {
            if *nu == 0.0 {
                return Ok((img.clone(), TrainDistortion::Identity));
            }
            let normal = Normal::new(0.0, *nu).unwrap();
            let mut out = img.clone();
            let mut mask = vec![1.0f64; out.data.len()];
            for (v, m) in out.data.iter_mut().zip(&mut mask) {
                let sum = *v + normal.sample(&mut rng);
                if !(0.0..=1.0).contains(&sum) {
                    *m = 0.0;
                }
                *v = sum.clamp(0.0, 1.0);
            }
            Ok((out, TrainDistortion::Masked(mask)))
        }
        DistortionSpec2D::Jpeg { quality } => {
            let (out, ctx) = jpeg_diff_forward(img, *quality);
            Ok((out, TrainDistortion::Jpeg(ctx)))
        }
        DistortionSpec2D::Scale { s } => {
            let dw = ((img.width as f64 * s).round() as usize).max(1);
            let dh = ((img.height as f64 * s).round() as usize).max(1);
            let ops = vec![
                resize_op(img.width, img.height, dw, dh),
                resize_op(dw, dh, img.width, img.height),
            ];
            let out = ops[1].apply(&ops[0].apply(img));
            Ok((out, TrainDistortion::Linear(ops)))
        }
        DistortionSpec2D::Blur { xi } => {
            let sigma = xi * img.width.min(img.height) as f64 / BLUR_SIGMA_DIVISOR;
            match blur_ops(img.width, img.height, sigma) {
                None => Ok((img.clone(), TrainDistortion::Identity)),
                Some((hop, vop)) => {
                    let out = vop.apply(&hop.apply(img));
                    Ok((out, TrainDistortion::Linear(vec![hop, vop])))
                }
            }
        }
        DistortionSpec2D::Crop { fraction } => {
            let (x0, y0, cw, ch) = crop_window(img.width, img.height, *fraction, &mut rng);
            let ops = vec![
                crop_extract_op(img.width, img.height, x0, y0, cw, ch),
                resize_op(cw, ch, img.width, img.height),
            ];
            let out = ops[1].apply(&ops[0].apply(img));
            Ok((out, TrainDistortion::Linear(ops)))
        }
        DistortionSpec2D::Rotate { max_angle } => {
            let angle = if *max_angle == 0.0 {
                0.0
            } else {
                rng.gen_range(-max_angle.abs()..=max_angle.abs())
            };
            let op = rotate_op(img.width, img.height, angle);
            let out = op.apply(img);
            Ok((out, TrainDistortion::Linear(vec![op])))
        }
    }
}

impl TrainDistortion {
    pub(crate) fn backward(&self, d_out: &Image) -> Image {
        match self {
            TrainDistortion::Identity => d_out.clone(),
            TrainDistortion::Masked(mask) => {
                let mut d = d_out.clone();
                for (v, m) in d.data.iter_mut().zip(mask) {
                    *v *= m;
                }
                d
            }
            TrainDistortion::Linear(ops) => {
                let mut d = d_out.clone();
                for op in ops.iter().rev() {
                    d = op.transpose(&d);
                }
                d
            }
            TrainDistortion::Jpeg(ctx) => jpeg_diff_backward(ctx, d_out),
        }
    }
}

/// Shared helper for the codecs: differentiable bilinear resize.
pub(crate) fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Image {
    resize_op(img.width, img.height, out_w, out_h).apply(img)
}

pub(crate) fn resize_bilinear_backward(
    d_out: &Image,
    in_w: usize,
    in_h: usize,
) -> Image {
    resize_op(in_w, in_h, d_out.width, d_out.height).transpose(d_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn test_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(
                    x,
                    y,
                    [
                        0.5 + 0.4 * ((x as f64) * 0.3).sin(),
                        0.5 + 0.3 * ((y as f64) * 0.5).cos(),
                        ((x + y) % 7) as f64 / 7.0,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn none_is_bit_exact_identity() {
        let img = test_image(16, 16);
        let out = distort2d(&img, &DistortionSpec2D::None, 5).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = test_image(16, 16);
        let out = distort2d(&img, &DistortionSpec2D::Noise { nu: 0.0 }, 5).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn real_jpeg_on_flat_gray_is_near_lossless() {
        // Constant image: only DC coefficients, which survive Q=50.
        let img = Image::filled(32, 32, [0.5, 0.5, 0.5]);
        let out = distort2d(&img, &DistortionSpec2D::Jpeg { quality: 50 }, 0).unwrap();
        assert!(psnr(&img, &out).unwrap() >= 40.0);
    }

    #[test]
    fn invalid_parameters_error() {
        let img = test_image(16, 16);
        assert!(distort2d(&img, &DistortionSpec2D::Jpeg { quality: 0 }, 0).is_err());
        assert!(distort2d(&img, &DistortionSpec2D::Scale { s: 0.0 }, 0).is_err());
        assert!(distort2d(&img, &DistortionSpec2D::Noise { nu: -1.0 }, 0).is_err());
        assert!(distort2d(&img, &DistortionSpec2D::Crop { fraction: 1.5 }, 0).is_err());
    }

    #[test]
    fn distortions_are_seed_deterministic() {
        let img = test_image(24, 24);
        for spec in [
            DistortionSpec2D::Noise { nu: 0.1 },
            DistortionSpec2D::Crop { fraction: 0.5 },
            DistortionSpec2D::Rotate { max_angle: 0.3 },
        ] {
            let a = distort2d(&img, &spec, 42).unwrap();
            let b = distort2d(&img, &spec, 42).unwrap();
            assert_eq!(a.data, b.data, "{spec:?}");
            let c = distort2d(&img, &spec, 43).unwrap();
            assert_ne!(a.data, c.data, "{spec:?}");
        }
    }

    #[test]
    fn scale_roundtrip_is_lowpass_not_destructive() {
        let img = test_image(32, 32);
        let out = distort2d(&img, &DistortionSpec2D::Scale { s: 0.5 }, 0).unwrap();
        assert_eq!(out.width, 32);
        let p = psnr(&img, &out).unwrap();
        assert!(p > 15.0 && p < crate::metrics::DB_CAP, "psnr {p}");
    }

    #[test]
    fn tiny_blur_barely_changes_image() {
        // ξ = 0.1 on 32px → σ ≈ 0.107 px.
        let img = test_image(32, 32);
        let out = distort2d(&img, &DistortionSpec2D::Blur { xi: 0.1 }, 0).unwrap();
        assert!(psnr(&img, &out).unwrap() > 30.0);
    }

    #[test]
    fn rotation_preserves_mean_roughly() {
        let img = test_image(32, 32);
        let out = distort2d(&img, &DistortionSpec2D::Rotate { max_angle: 0.4 }, 3).unwrap();
        assert!((img.mean() - out.mean()).abs() < 0.05);
    }

    fn fd_backward_check(spec: DistortionSpec2D, tol: f64) {
        let img = test_image(16, 16);
        let seed = 9;
        let (out, ctx) = distort2d_train(&img, &spec, seed).unwrap();
        // Scalar loss: weighted sum of the distorted image.
        let weight = |i: usize| ((i % 11) as f64 - 5.0) * 0.1;
        let loss = |o: &Image| o.data.iter().enumerate().map(|(i, v)| weight(i) * v).sum::<f64>();
        let _ = loss(&out);
        let mut d_out = Image::new(out.width, out.height);
        for (i, v) in d_out.data.iter_mut().enumerate() {
            *v = weight(i);
        }
        let d_in = ctx.backward(&d_out);
        let h = 1e-5;
        for i in (0..img.data.len()).step_by(37) {
            let mut p = img.clone();
            p.data[i] += h;
            let (op, _) = distort2d_train(&p, &spec, seed).unwrap();
            let mut m = img.clone();
            m.data[i] -= h;
            let (om, _) = distort2d_train(&m, &spec, seed).unwrap();
            let fd = (loss(&op) - loss(&om)) / (2.0 * h);
            let a = d_in.data[i];
            assert!(
                (a - fd).abs() <= tol * a.abs().max(fd.abs()).max(1.0),
                "{spec:?} param {i}: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn train_mode_backwards_match_finite_differences() {
        fd_backward_check(DistortionSpec2D::Scale { s: 0.5 }, 1e-6);
        fd_backward_check(DistortionSpec2D::Blur { xi: 1.0 }, 1e-6);
        fd_backward_check(DistortionSpec2D::Crop { fraction: 0.6 }, 1e-6);
        fd_backward_check(DistortionSpec2D::Rotate { max_angle: 0.5 }, 1e-6);
        fd_backward_check(DistortionSpec2D::Jpeg { quality: 50 }, 1e-4);
    }

    #[test]
    fn diff_jpeg_tracks_real_jpeg() {
        let img = test_image(32, 32);
        let (diff, _) = jpeg_diff_forward(&img, 50);
        let real = jpeg_real(&img, 50).unwrap();
        // Both should be moderate-quality reconstructions of the source.
        assert!(psnr(&img, &diff).unwrap() > 22.0);
        assert!(psnr(&img, &real).unwrap() > 22.0);
        assert!(psnr(&diff, &real).unwrap() > 20.0);
    }
}
