//! Minimal neural-network building blocks for the message codecs.
//!
//! Everything is f64 with hand-written backward passes; layers own their
//! weights and return gradients per call, and each parameter block gets its
//! own Adam state. Sized for desk-scale inputs, verified against finite
//! differences in tests.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Channel-major (C, H, W) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// 3×3 convolution, zero padding 1, configurable stride.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// `[out_c][in_c][3][3]` flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * 9) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = (0..out_c * in_c * 9).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_c,
            out_c,
            stride,
            weight,
            bias: vec![0.0; out_c],
        }
    }

    /// All-zero weights; used for residual heads that must start at identity.
    pub fn zeroed(in_c: usize, out_c: usize, stride: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            stride,
            weight: vec![0.0; out_c * in_c * 9],
            bias: vec![0.0; out_c],
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / self.stride + 1, (w + 2 - 3) / self.stride + 1)
    }

    #[inline]
    fn w_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_c + ic) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut y = Tensor3::zeros(self.out_c, oh, ow);
        for oc in 0..self.out_c {
            let yplane = &mut y.data[oc * oh * ow..(oc + 1) * oh * ow];
            for v in yplane.iter_mut() {
                *v = self.bias[oc];
            }
            for ic in 0..self.in_c {
                let xplane = x.plane(ic);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w_at(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * self.stride + ky;
                            if iy == 0 || iy > x.h {
                                continue;
                            }
                            let iy = iy - 1;
                            let xrow = &xplane[iy * x.w..(iy + 1) * x.w];
                            let yrow = &mut yplane[oy * ow..(oy + 1) * ow];
                            for (ox, yv) in yrow.iter_mut().enumerate() {
                                let ix = ox * self.stride + kx;
                                if ix == 0 || ix > x.w {
                                    continue;
                                }
                                *yv += wv * xrow[ix - 1];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(&self, x: &Tensor3, dy: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
        let (oh, ow) = self.out_hw(x.h, x.w);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_c, oh, ow));
        let mut dx = Tensor3::zeros(x.c, x.h, x.w);
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_c];
        for oc in 0..self.out_c {
            let dyplane = dy.plane(oc);
            db[oc] += dyplane.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let xplane = x.plane(ic);
                let dxplane = &mut dx.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w_at(oc, ic, ky, kx);
                        let mut dwv = 0.0;
                        for oy in 0..oh {
                            let iy = oy * self.stride + ky;
                            if iy == 0 || iy > x.h {
                                continue;
                            }
                            let iy = iy - 1;
                            let dyrow = &dyplane[oy * ow..(oy + 1) * ow];
                            for (ox, dyv) in dyrow.iter().enumerate() {
                                let ix = ox * self.stride + kx;
                                if ix == 0 || ix > x.w {
                                    continue;
                                }
                                let ix = ix - 1;
                                dwv += dyv * xplane[iy * x.w + ix];
                                dxplane[iy * x.w + ix] += wv * dyv;
                            }
                        }
                        dw[((oc * self.in_c + ic) * 3 + ky) * 3 + kx] += dwv;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim][in_dim]` flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim);
        let mut y = self.bias.clone();
        for (o, yv) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yv += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; self.in_dim];
        let mut dw = vec![0.0; self.weight.len()];
        for (o, dyv) in dy.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dx[i] += row[i] * dyv;
                drow[i] += x[i] * dyv;
            }
        }
        (dx, dw, dy.to_vec())
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given the pre-activation input.
pub fn leaky_relu_backward(pre: &[f64], dy: &mut [f64]) {
    for (p, d) in pre.iter().zip(dy) {
        if *p < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
}

/// Per-channel mean over spatial dims.
pub fn global_avg_pool(x: &Tensor3) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    (0..x.c).map(|c| x.plane(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(x: &Tensor3, dy: &[f64]) -> Tensor3 {
    let mut dx = Tensor3::zeros(x.c, x.h, x.w);
    let n = (x.h * x.w) as f64;
    for c in 0..x.c {
        let g = dy[c] / n;
        for v in &mut dx.data[c * x.h * x.w..(c + 1) * x.h * x.w] {
            *v = g;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adam state for one parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// lr(t) = lr₀ · γ^(t/steps): two-decade exponential decay by default.
pub fn exp_decay_lr(lr0: f64, gamma: f64, step: usize, total_steps: usize) -> f64 {
    lr0 * gamma.powf(step as f64 / total_steps.max(1) as f64)
}

/// One named parameter block of a serialized network.
#[derive(serde::Serialize, serde::Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct WeightsHeader {
    version: u32,
    kind: String,
    blocks: Vec<BlockHeader>,
}

const WEIGHTS_MAGIC: u32 = 0x4753_4d57; // "GSMW"

/// Flat binary weights with a JSON header (layer names and shapes).
pub fn save_weights(path: &Path, kind: &str, blocks: &[(&str, Vec<usize>, &[f64])]) -> Result<()> {
    let header = WeightsHeader {
        version: 1,
        kind: kind.to_string(),
        blocks: blocks
            .iter()
            .map(|(name, shape, data)| {
                assert_eq!(shape.iter().product::<usize>(), data.len());
                BlockHeader {
                    name: name.to_string(),
                    shape: shape.clone(),
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_u32::<LittleEndian>(WEIGHTS_MAGIC)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for (_, _, data) in blocks {
        for v in *data {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load weights, checking the expected network kind.
pub fn load_weights(path: &Path, kind: &str) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    if r.read_u32::<LittleEndian>()? != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a weights file (bad magic)",
            path.display()
        )));
    }
    let json_len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; json_len];
    std::io::Read::read_exact(&mut r, &mut json)?;
    let header: WeightsHeader = serde_json::from_slice(&json)?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "weights kind mismatch: file holds `{}`, expected `{kind}`",
            header.kind
        )));
    }
    let mut out = Vec::with_capacity(header.blocks.len());
    for b in header.blocks {
        let len: usize = b.shape.iter().product();
        let mut data = vec![0.0f64; len];
        for v in &mut data {
            *v = r.read_f64::<LittleEndian>().map_err(|_| {
                Error::Format(format!("truncated weights block `{}`", b.name))
            })?;
        }
        out.push((b.name, b.shape, data));
    }
    Ok(out)
}

/// Fetch a named block, checking its shape.
pub fn take_block(
    blocks: &[(String, Vec<usize>, Vec<f64>)],
    name: &str,
    shape: &[usize],
) -> Result<Vec<f64>> {
    for (n, s, d) in blocks {
        if n == name {
            if s != shape {
                return Err(Error::Format(format!(
                    "block `{name}` has shape {s:?}, expected {shape:?}"
                )));
            }
            return Ok(d.clone());
        }
    }
    Err(Error::Format(format!("missing weights block `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn fd_check(analytic: &[f64], mut eval: impl FnMut(usize, f64) -> f64, n: usize, tol: f64) {
        let h = 1e-5;
        for i in 0..n {
            let fp = eval(i, h);
            let fm = eval(i, -h);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((a - fd).abs() / denom) < tol,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_for(1, "conv-test");
        for stride in [1usize, 2] {
            let conv = Conv2d::new(2, 3, stride, &mut rng);
            let mut x = Tensor3::zeros(2, 5, 6);
            for v in &mut x.data {
                *v = rng.gen_range(-1.0..1.0);
            }
            let y = conv.forward(&x);
            // Loss = weighted sum of outputs.
            let mut dy = y.clone();
            for (i, v) in dy.data.iter_mut().enumerate() {
                *v = ((i % 5) as f64 - 2.0) * 0.3;
            }
            let loss = |y: &Tensor3| -> f64 {
                y.data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| ((i % 5) as f64 - 2.0) * 0.3 * v)
                    .sum()
            };
            let (dx, dw, db) = conv.backward(&x, &dy);

            fd_check(
                &dx.data,
                |i, h| {
                    let mut xp = x.clone();
                    xp.data[i] += h;
                    loss(&conv.forward(&xp))
                },
                x.data.len(),
                1e-5,
            );
            fd_check(
                &dw,
                |i, h| {
                    let mut cp = conv.clone();
                    cp.weight[i] += h;
                    loss(&cp.forward(&x))
                },
                dw.len(),
                1e-5,
            );
            fd_check(
                &db,
                |i, h| {
                    let mut cp = conv.clone();
                    cp.bias[i] += h;
                    loss(&cp.forward(&x))
                },
                db.len(),
                1e-5,
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = rng_for(2, "lin-test");
        let lin = Linear::new(7, 4, &mut rng);
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..4).map(|i| 0.5 - i as f64 * 0.2).collect();
        let loss =
            |y: &[f64]| -> f64 { y.iter().enumerate().map(|(i, v)| (0.5 - i as f64 * 0.2) * v).sum() };
        let (dx, dw, _db) = lin.backward(&x, &dy);
        fd_check(
            &dx,
            |i, h| {
                let mut xp = x.clone();
                xp[i] += h;
                loss(&lin.forward(&xp))
            },
            7,
            1e-6,
        );
        fd_check(
            &dw,
            |i, h| {
                let mut lp = lin.clone();
                lp.weight[i] += h;
                loss(&lp.forward(&x))
            },
            dw.len(),
            1e-6,
        );
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![3.0, -2.0];
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8, 2);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            opt.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2), "{params:?}");
    }

    #[test]
    fn exp_decay_spans_two_decades() {
        assert!((exp_decay_lr(1e-3, 0.1, 0, 100) - 1e-3).abs() < 1e-18);
        assert!((exp_decay_lr(1e-3, 0.1, 100, 100) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let b = vec![0.5; 4];
        save_weights(
            &path,
            "decoder2d",
            &[("conv1", vec![3, 4], &a), ("bias", vec![4], &b)],
        )
        .unwrap();
        let blocks = load_weights(&path, "decoder2d").unwrap();
        assert_eq!(take_block(&blocks, "conv1", &[3, 4]).unwrap(), a);
        assert_eq!(take_block(&blocks, "bias", &[4]).unwrap(), b);
        assert!(load_weights(&path, "decoder3d").is_err());
        assert!(take_block(&blocks, "missing", &[1]).is_err());
    }
}
