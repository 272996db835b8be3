//! Shared-weight per-point MLP with symmetric max pooling — the backbone of
//! both the 3D message decoder and the discriminator. Max pooling makes the
//! output exactly permutation-invariant; gradients route to the argmax
//! points only, so the backward pass touches at most `hidden` points.

use super::PointSample;
use crate::error::Result;
use crate::nn::{
    leaky_relu, leaky_relu_backward, load_weights, save_weights, sigmoid, take_block, Linear,
};
use crate::wm2d::{SoftBits, MESSAGE_BITS};
use rand::Rng;
use std::path::Path;

pub const DECODER3D_KIND: &str = "decoder3d";
pub const DISCRIMINATOR3D_KIND: &str = "discriminator3d";

const H1: usize = 64;
const H2: usize = 128;
const H3: usize = 256;
const HEAD_HIDDEN: usize = 128;

#[derive(Debug, Clone)]
pub struct PointNet {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub mlp3: Linear,
    pub head1: Linear,
    pub head2: Linear,
}

pub struct PointNetCtx {
    inputs: Vec<f64>, // k × in_dim
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pre3: Vec<f64>,
    act3: Vec<f64>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PointNetGrads {
    pub mlp1_w: Vec<f64>,
    pub mlp1_b: Vec<f64>,
    pub mlp2_w: Vec<f64>,
    pub mlp2_b: Vec<f64>,
    pub mlp3_w: Vec<f64>,
    pub mlp3_b: Vec<f64>,
    pub head1_w: Vec<f64>,
    pub head1_b: Vec<f64>,
    pub head2_w: Vec<f64>,
    pub head2_b: Vec<f64>,
}

impl PointNet {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        PointNet {
            in_dim,
            out_dim,
            mlp1: Linear::new(in_dim, H1, rng),
            mlp2: Linear::new(H1, H2, rng),
            mlp3: Linear::new(H2, H3, rng),
            head1: Linear::new(H3, HEAD_HIDDEN, rng),
            head2: Linear::new(HEAD_HIDDEN, out_dim, rng),
        }
    }

    pub fn zero_grads(&self) -> PointNetGrads {
        PointNetGrads {
            mlp1_w: vec![0.0; self.mlp1.weight.len()],
            mlp1_b: vec![0.0; self.mlp1.bias.len()],
            mlp2_w: vec![0.0; self.mlp2.weight.len()],
            mlp2_b: vec![0.0; self.mlp2.bias.len()],
            mlp3_w: vec![0.0; self.mlp3.weight.len()],
            mlp3_b: vec![0.0; self.mlp3.bias.len()],
            head1_w: vec![0.0; self.head1.weight.len()],
            head1_b: vec![0.0; self.head1.bias.len()],
            head2_w: vec![0.0; self.head2.weight.len()],
            head2_b: vec![0.0; self.head2.bias.len()],
        }
    }

    /// Per-point input row: normalized position then features.
    fn input_rows(&self, ps: &PointSample) -> (Vec<f64>, usize) {
        let k = ps.len();
        let fdim = ps.feat_dim;
        assert_eq!(self.in_dim, 3 + fdim, "feature layout mismatch");
        let mut rows = vec![0.0f64; k * (3 + fdim)];
        for i in 0..k {
            let row = &mut rows[i * (3 + fdim)..(i + 1) * (3 + fdim)];
            row[0] = ps.positions[i].x;
            row[1] = ps.positions[i].y;
            row[2] = ps.positions[i].z;
            row[3..].copy_from_slice(&ps.features[i * fdim..(i + 1) * fdim]);
        }
        (rows, k)
    }

    pub fn forward_ctx(&self, ps: &PointSample) -> (Vec<f64>, PointNetCtx) {
        let (inputs, k) = self.input_rows(ps);
        let mut pre1 = vec![0.0; k * H1];
        let mut act1 = vec![0.0; k * H1];
        let mut pre2 = vec![0.0; k * H2];
        let mut act2 = vec![0.0; k * H2];
        let mut pre3 = vec![0.0; k * H3];
        let mut act3 = vec![0.0; k * H3];
        for i in 0..k {
            let x = &inputs[i * self.in_dim..(i + 1) * self.in_dim];
            let p1 = self.mlp1.forward(x);
            let mut a1 = p1.clone();
            leaky_relu(&mut a1);
            let p2 = self.mlp2.forward(&a1);
            let mut a2 = p2.clone();
            leaky_relu(&mut a2);
            let p3 = self.mlp3.forward(&a2);
            let mut a3 = p3.clone();
            leaky_relu(&mut a3);
            pre1[i * H1..(i + 1) * H1].copy_from_slice(&p1);
            act1[i * H1..(i + 1) * H1].copy_from_slice(&a1);
            pre2[i * H2..(i + 1) * H2].copy_from_slice(&p2);
            act2[i * H2..(i + 1) * H2].copy_from_slice(&a2);
            pre3[i * H3..(i + 1) * H3].copy_from_slice(&p3);
            act3[i * H3..(i + 1) * H3].copy_from_slice(&a3);
        }
        // Deterministic max pool: first index wins ties.
        let mut pooled = vec![f64::NEG_INFINITY; H3];
        let mut argmax = vec![0usize; H3];
        for i in 0..k {
            for d in 0..H3 {
                let v = act3[i * H3 + d];
                if v > pooled[d] {
                    pooled[d] = v;
                    argmax[d] = i;
                }
            }
        }
        let hpre = self.head1.forward(&pooled);
        let mut hact = hpre.clone();
        leaky_relu(&mut hact);
        let logits = self.head2.forward(&hact);
        (
            logits,
            PointNetCtx {
                inputs,
                pre1,
                act1,
                pre2,
                act2,
                pre3,
                act3,
                argmax,
                pooled,
                hpre,
                hact,
            },
        )
    }

    /// Accumulate weight gradients; input gradients are not needed (point
    /// sets are frozen in phase 2).
    pub fn backward(&self, ctx: &PointNetCtx, d_logits: &[f64], grads: &mut PointNetGrads) {
        let (d_hact, dw, db) = self.head2.backward(&ctx.hact, d_logits);
        add(&mut grads.head2_w, &dw);
        add(&mut grads.head2_b, &db);
        let mut d_hpre = d_hact;
        leaky_relu_backward(&ctx.hpre, &mut d_hpre);
        let (d_pooled, dw, db) = self.head1.backward(&ctx.pooled, &d_hpre);
        add(&mut grads.head1_w, &dw);
        add(&mut grads.head1_b, &db);

        // Route pooled gradients to argmax points.
        let mut d_act3: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
        for d in 0..H3 {
            if d_pooled[d] != 0.0 {
                d_act3
                    .entry(ctx.argmax[d])
                    .or_insert_with(|| vec![0.0; H3])[d] += d_pooled[d];
            }
        }
        for (i, mut d3) in d_act3 {
            leaky_relu_backward(&ctx.pre3[i * H3..(i + 1) * H3], &mut d3);
            let (mut d2, dw, db) = self
                .mlp3
                .backward(&ctx.act2[i * H2..(i + 1) * H2], &d3);
            add(&mut grads.mlp3_w, &dw);
            add(&mut grads.mlp3_b, &db);
            leaky_relu_backward(&ctx.pre2[i * H2..(i + 1) * H2], &mut d2);
            let (mut d1, dw, db) = self
                .mlp2
                .backward(&ctx.act1[i * H1..(i + 1) * H1], &d2);
            add(&mut grads.mlp2_w, &dw);
            add(&mut grads.mlp2_b, &db);
            leaky_relu_backward(&ctx.pre1[i * H1..(i + 1) * H1], &mut d1);
            let (_, dw, db) = self
                .mlp1
                .backward(&ctx.inputs[i * self.in_dim..(i + 1) * self.in_dim], &d1);
            add(&mut grads.mlp1_w, &dw);
            add(&mut grads.mlp1_b, &db);
        }
    }

    pub fn save(&self, path: &Path, kind: &str) -> Result<()> {
        let meta = [self.in_dim as f64, self.out_dim as f64];
        save_weights(
            path,
            kind,
            &[
                ("meta", vec![2], &meta),
                ("mlp1_w", vec![self.mlp1.weight.len()], &self.mlp1.weight),
                ("mlp1_b", vec![self.mlp1.bias.len()], &self.mlp1.bias),
                ("mlp2_w", vec![self.mlp2.weight.len()], &self.mlp2.weight),
                ("mlp2_b", vec![self.mlp2.bias.len()], &self.mlp2.bias),
                ("mlp3_w", vec![self.mlp3.weight.len()], &self.mlp3.weight),
                ("mlp3_b", vec![self.mlp3.bias.len()], &self.mlp3.bias),
                ("head1_w", vec![self.head1.weight.len()], &self.head1.weight),
                ("head1_b", vec![self.head1.bias.len()], &self.head1.bias),
                ("head2_w", vec![self.head2.weight.len()], &self.head2.weight),
                ("head2_b", vec![self.head2.bias.len()], &self.head2.bias),
            ],
        )
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let blocks = load_weights(path, kind)?;
        let meta = take_block(&blocks, "meta", &[2])?;
        let (in_dim, out_dim) = (meta[0] as usize, meta[1] as usize);
        let mut net = PointNet {
            in_dim,
            out_dim,
            mlp1: zero_linear(in_dim, H1),
            mlp2: zero_linear(H1, H2),
            mlp3: zero_linear(H2, H3),
            head1: zero_linear(H3, HEAD_HIDDEN),
            head2: zero_linear(HEAD_HIDDEN, out_dim),
        };
        net.mlp1.weight = take_block(&blocks, "mlp1_w", &[net.mlp1.weight.len()])?;
        net.mlp1.bias = take_block(&blocks, "mlp1_b", &[net.mlp1.bias.len()])?;
        net.mlp2.weight = take_block(&blocks, "mlp2_w", &[net.mlp2.weight.len()])?;
        net.mlp2.bias = take_block(&blocks, "mlp2_b", &[net.mlp2.bias.len()])?;
        net.mlp3.weight = take_block(&blocks, "mlp3_w", &[net.mlp3.weight.len()])?;
        net.mlp3.bias = take_block(&blocks, "mlp3_b", &[net.mlp3.bias.len()])?;
        net.head1.weight = take_block(&blocks, "head1_w", &[net.head1.weight.len()])?;
        net.head1.bias = take_block(&blocks, "head1_b", &[net.head1.bias.len()])?;
        net.head2.weight = take_block(&blocks, "head2_w", &[net.head2.weight.len()])?;
        net.head2.bias = take_block(&blocks, "head2_b", &[net.head2.bias.len()])?;
        Ok(net)
    }
}

fn zero_linear(i: usize, o: usize) -> Linear {
    Linear {
        in_dim: i,
        out_dim: o,
        weight: vec![0.0; i * o],
        bias: vec![0.0; o],
    }
}

fn add(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// 3D message decoder D_ψ.
#[derive(Debug, Clone)]
pub struct Decoder3d {
    pub net: PointNet,
}

impl Decoder3d {
    pub fn new<R: Rng>(in_dim: usize, rng: &mut R) -> Self {
        Decoder3d {
            net: PointNet::new(in_dim, MESSAGE_BITS, rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(path, DECODER3D_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Decoder3d {
            net: PointNet::load(path, DECODER3D_KIND)?,
        })
    }
}

/// Point-set discriminator D_ξ.
#[derive(Debug, Clone)]
pub struct Discriminator3d {
    pub net: PointNet,
}

impl Discriminator3d {
    pub fn new<R: Rng>(in_dim: usize, rng: &mut R) -> Self {
        Discriminator3d {
            net: PointNet::new(in_dim, 1, rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(path, DISCRIMINATOR3D_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Discriminator3d {
            net: PointNet::load(path, DISCRIMINATOR3D_KIND)?,
        })
    }
}

/// Decode soft bits from a (normalized) point sample.
pub fn decode3d(decoder: &Decoder3d, ps: &PointSample) -> SoftBits {
    let (logits, _) = decoder.net.forward_ctx(ps);
    SoftBits::from_logits(&logits)
}

/// Probability that the sample comes from the watermarked cloud.
pub fn discriminate(disc: &Discriminator3d, ps: &PointSample) -> f64 {
    let (logits, _) = disc.net.forward_ctx(ps);
    sigmoid(logits[0])
}
