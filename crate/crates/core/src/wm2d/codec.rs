//! Convolutional message codec: an encoder that writes a message-conditioned
//! residual onto a cover image (pretraining only) and a decoder that reads
//! soft bits back out of an image.
//!
//! The decoder resizes its input to a fixed training resolution, maps values
//! to [−1, 1], runs four conv blocks into a global average pool and a linear
//! head. The encoder projects the message to a few broadcast planes,
//! concatenates them with the cover, and emits a residual through a
//! zero-initialized output conv so training starts at the identity.

use super::distort::{resize_bilinear, resize_bilinear_backward};
use super::{Message, SoftBits, MESSAGE_BITS};
use crate::error::Result;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, load_weights,
    save_weights, sigmoid, take_block, Conv2d, Linear, Tensor3,
};
use crate::splatter::Image;
use rand::Rng;
use std::path::Path;

pub const DECODER2D_KIND: &str = "decoder2d";
pub const ENCODER2D_KIND: &str = "encoder2d";

fn image_to_tensor_pm1(img: &Image) -> Tensor3 {
    let mut t = Tensor3::zeros(3, img.height, img.width);
    let npix = img.width * img.height;
    for i in 0..npix {
        for ch in 0..3 {
            t.data[ch * npix + i] = 2.0 * img.data[i * 3 + ch] - 1.0;
        }
    }
    t
}

/// 48-bit image decoder D_χ.
#[derive(Debug, Clone)]
pub struct Decoder2d {
    pub resolution: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub head: Linear,
}

/// Intermediate activations kept for the backward pass.
pub struct Decoder2dCtx {
    input_w: usize,
    input_h: usize,
    resized: Image,
    x0: Tensor3,
    pre: [Tensor3; 4],
    act: [Tensor3; 4],
    pooled: Vec<f64>,
}

/// Weight gradients mirroring [`Decoder2d`]'s blocks.
#[derive(Debug, Clone)]
pub struct Decoder2dGrads {
    pub conv_w: [Vec<f64>; 4],
    pub conv_b: [Vec<f64>; 4],
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Decoder2d {
    pub fn new<R: Rng>(resolution: usize, rng: &mut R) -> Self {
        let (c1, c2, c3) = (16, 32, 48);
        Decoder2d {
            resolution,
            conv1: Conv2d::new(3, c1, 1, rng),
            conv2: Conv2d::new(c1, c2, 2, rng),
            conv3: Conv2d::new(c2, c3, 2, rng),
            conv4: Conv2d::new(c3, c3, 2, rng),
            head: Linear::new(c3, MESSAGE_BITS, rng),
        }
    }

    pub fn zero_grads(&self) -> Decoder2dGrads {
        Decoder2dGrads {
            conv_w: [
                vec![0.0; self.conv1.weight.len()],
                vec![0.0; self.conv2.weight.len()],
                vec![0.0; self.conv3.weight.len()],
                vec![0.0; self.conv4.weight.len()],
            ],
            conv_b: [
                vec![0.0; self.conv1.bias.len()],
                vec![0.0; self.conv2.bias.len()],
                vec![0.0; self.conv3.bias.len()],
                vec![0.0; self.conv4.bias.len()],
            ],
            head_w: vec![0.0; self.head.weight.len()],
            head_b: vec![0.0; self.head.bias.len()],
        }
    }

    /// Forward pass returning raw logits and everything needed to go back.
    pub fn forward_ctx(&self, img: &Image) -> (Vec<f64>, Decoder2dCtx) {
        let resized = if img.width == self.resolution && img.height == self.resolution {
            img.clone()
        } else {
            resize_bilinear(img, self.resolution, self.resolution)
        };
        let x0 = image_to_tensor_pm1(&resized);
        let convs = [&self.conv1, &self.conv2, &self.conv3, &self.conv4];
        let mut pre: Vec<Tensor3> = Vec::with_capacity(4);
        let mut act: Vec<Tensor3> = Vec::with_capacity(4);
        let mut cur = &x0;
        for conv in convs {
            let p = conv.forward(cur);
            let mut a = p.clone();
            leaky_relu(&mut a.data);
            pre.push(p);
            act.push(a);
            cur = act.last().unwrap();
        }
        let pooled = global_avg_pool(&act[3]);
        let logits = self.head.forward(&pooled);
        let ctx = Decoder2dCtx {
            input_w: img.width,
            input_h: img.height,
            resized,
            x0,
            pre: pre.try_into().ok().unwrap(),
            act: act.try_into().ok().unwrap(),
            pooled,
        };
        (logits, ctx)
    }

    /// Backpropagate logit gradients to the input image; optionally
    /// accumulate weight gradients (skipped when the decoder is frozen).
    pub fn backward(
        &self,
        ctx: &Decoder2dCtx,
        d_logits: &[f64],
        mut grads: Option<&mut Decoder2dGrads>,
    ) -> Image {
        let (d_pooled, dw_head, db_head) = self.head.backward(&ctx.pooled, d_logits);
        if let Some(g) = grads.as_deref_mut() {
            for (a, b) in g.head_w.iter_mut().zip(&dw_head) {
                *a += b;
            }
            for (a, b) in g.head_b.iter_mut().zip(&db_head) {
                *a += b;
            }
        }
        let mut d_cur = global_avg_pool_backward(&ctx.act[3], &d_pooled);
        let convs = [&self.conv1, &self.conv2, &self.conv3, &self.conv4];
        for li in (0..4).rev() {
            leaky_relu_backward(&ctx.pre[li].data, &mut d_cur.data);
            let input = if li == 0 { &ctx.x0 } else { &ctx.act[li - 1] };
            let (dx, dw, db) = convs[li].backward(input, &d_cur);
            if let Some(g) = grads.as_deref_mut() {
                for (a, b) in g.conv_w[li].iter_mut().zip(&dw) {
                    *a += b;
                }
                for (a, b) in g.conv_b[li].iter_mut().zip(&db) {
                    *a += b;
                }
            }
            d_cur = dx;
        }
        // x0 = 2·v − 1.
        let npix = ctx.resized.width * ctx.resized.height;
        let mut d_resized = Image::new(ctx.resized.width, ctx.resized.height);
        for i in 0..npix {
            for ch in 0..3 {
                d_resized.data[i * 3 + ch] = 2.0 * d_cur.data[ch * npix + i];
            }
        }
        if ctx.input_w == self.resolution && ctx.input_h == self.resolution {
            d_resized
        } else {
            resize_bilinear_backward(&d_resized, ctx.input_w, ctx.input_h)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = [
            self.resolution as f64,
            self.conv1.out_c as f64,
            self.conv2.out_c as f64,
            self.conv3.out_c as f64,
        ];
        save_weights(
            path,
            DECODER2D_KIND,
            &[
                ("meta", vec![4], &meta),
                ("conv1_w", vec![self.conv1.weight.len()], &self.conv1.weight),
                ("conv1_b", vec![self.conv1.bias.len()], &self.conv1.bias),
                ("conv2_w", vec![self.conv2.weight.len()], &self.conv2.weight),
                ("conv2_b", vec![self.conv2.bias.len()], &self.conv2.bias),
                ("conv3_w", vec![self.conv3.weight.len()], &self.conv3.weight),
                ("conv3_b", vec![self.conv3.bias.len()], &self.conv3.bias),
                ("conv4_w", vec![self.conv4.weight.len()], &self.conv4.weight),
                ("conv4_b", vec![self.conv4.bias.len()], &self.conv4.bias),
                ("head_w", vec![self.head.weight.len()], &self.head.weight),
                ("head_b", vec![self.head.bias.len()], &self.head.bias),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blocks = load_weights(path, DECODER2D_KIND)?;
        let meta = take_block(&blocks, "meta", &[4])?;
        let resolution = meta[0] as usize;
        let (c1, c2, c3) = (meta[1] as usize, meta[2] as usize, meta[3] as usize);
        let mut d = Decoder2d {
            resolution,
            conv1: Conv2d::zeroed(3, c1, 1),
            conv2: Conv2d::zeroed(c1, c2, 2),
            conv3: Conv2d::zeroed(c2, c3, 2),
            conv4: Conv2d::zeroed(c3, c3, 2),
            head: Linear {
                in_dim: c3,
                out_dim: MESSAGE_BITS,
                weight: vec![0.0; c3 * MESSAGE_BITS],
                bias: vec![0.0; MESSAGE_BITS],
            },
        };
        d.conv1.weight = take_block(&blocks, "conv1_w", &[d.conv1.weight.len()])?;
        d.conv1.bias = take_block(&blocks, "conv1_b", &[d.conv1.bias.len()])?;
        d.conv2.weight = take_block(&blocks, "conv2_w", &[d.conv2.weight.len()])?;
        d.conv2.bias = take_block(&blocks, "conv2_b", &[d.conv2.bias.len()])?;
        d.conv3.weight = take_block(&blocks, "conv3_w", &[d.conv3.weight.len()])?;
        d.conv3.bias = take_block(&blocks, "conv3_b", &[d.conv3.bias.len()])?;
        d.conv4.weight = take_block(&blocks, "conv4_w", &[d.conv4.weight.len()])?;
        d.conv4.bias = take_block(&blocks, "conv4_b", &[d.conv4.bias.len()])?;
        d.head.weight = take_block(&blocks, "head_w", &[d.head.weight.len()])?;
        d.head.bias = take_block(&blocks, "head_b", &[d.head.bias.len()])?;
        Ok(d)
    }
}

/// Decode soft bits from an image (deterministic, differentiable).
pub fn decode2d(decoder: &Decoder2d, img: &Image) -> SoftBits {
    let (logits, _) = decoder.forward_ctx(img);
    SoftBits::from_logits(&logits)
}

/// Residual encoder used only during pretraining.
#[derive(Debug, Clone)]
pub struct Encoder2d {
    pub msg_proj: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

pub struct Encoder2dCtx {
    msg_in: Vec<f64>,
    x_in: Tensor3,
    pre1: Tensor3,
    act1: Tensor3,
    pre2: Tensor3,
    act2: Tensor3,
    clamp_mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder2dGrads {
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub conv_w: [Vec<f64>; 3],
    pub conv_b: [Vec<f64>; 3],
}

const MSG_PLANES: usize = 8;

impl Encoder2d {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let c = 16;
        Encoder2d {
            msg_proj: Linear::new(MESSAGE_BITS, MSG_PLANES, rng),
            conv1: Conv2d::new(3 + MSG_PLANES, c, 1, rng),
            conv2: Conv2d::new(c, c, 1, rng),
            // Zero output head: the initial residual is exactly zero.
            conv3: Conv2d::zeroed(c, 3, 1),
        }
    }

    pub fn zero_grads(&self) -> Encoder2dGrads {
        Encoder2dGrads {
            proj_w: vec![0.0; self.msg_proj.weight.len()],
            proj_b: vec![0.0; self.msg_proj.bias.len()],
            conv_w: [
                vec![0.0; self.conv1.weight.len()],
                vec![0.0; self.conv2.weight.len()],
                vec![0.0; self.conv3.weight.len()],
            ],
            conv_b: [
                vec![0.0; self.conv1.bias.len()],
                vec![0.0; self.conv2.bias.len()],
                vec![0.0; self.conv3.bias.len()],
            ],
        }
    }

    pub fn forward_ctx(&self, cover: &Image, msg: &Message) -> (Image, Encoder2dCtx) {
        let (w, h) = (cover.width, cover.height);
        let npix = w * h;
        let msg_in: Vec<f64> = msg.bits.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
        let proj = self.msg_proj.forward(&msg_in);
        let mut x_in = Tensor3::zeros(3 + MSG_PLANES, h, w);
        for i in 0..npix {
            for ch in 0..3 {
                x_in.data[ch * npix + i] = 2.0 * cover.data[i * 3 + ch] - 1.0;
            }
        }
        for (p, pv) in proj.iter().enumerate() {
            let plane = &mut x_in.data[(3 + p) * npix..(4 + p) * npix];
            for v in plane.iter_mut() {
                *v = *pv;
            }
        }
        let pre1 = self.conv1.forward(&x_in);
        let mut act1 = pre1.clone();
        leaky_relu(&mut act1.data);
        let pre2 = self.conv2.forward(&act1);
        let mut act2 = pre2.clone();
        leaky_relu(&mut act2.data);
        let residual = self.conv3.forward(&act2);

        let mut out = Image::new(w, h);
        let mut clamp_mask = vec![1.0f64; npix * 3];
        for i in 0..npix {
            for ch in 0..3 {
                let v = cover.data[i * 3 + ch] + residual.data[ch * npix + i];
                if !(0.0..=1.0).contains(&v) {
                    clamp_mask[i * 3 + ch] = 0.0;
                }
                out.data[i * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
        (
            out,
            Encoder2dCtx {
                msg_in,
                x_in,
                pre1,
                act1,
                pre2,
                act2,
                clamp_mask,
            },
        )
    }

    /// Accumulate weight gradients from dL/d(output image).
    pub fn backward(&self, ctx: &Encoder2dCtx, d_out: &Image, grads: &mut Encoder2dGrads) {
        let (w, h) = (d_out.width, d_out.height);
        let npix = w * h;
        let mut d_residual = Tensor3::zeros(3, h, w);
        for i in 0..npix {
            for ch in 0..3 {
                d_residual.data[ch * npix + i] = d_out.data[i * 3 + ch] * ctx.clamp_mask[i * 3 + ch];
            }
        }
        let (mut d_act2, dw3, db3) = self.conv3.backward(&ctx.act2, &d_residual);
        for (a, b) in grads.conv_w[2].iter_mut().zip(&dw3) {
            *a += b;
        }
        for (a, b) in grads.conv_b[2].iter_mut().zip(&db3) {
            *a += b;
        }
        leaky_relu_backward(&ctx.pre2.data, &mut d_act2.data);
        let (mut d_act1, dw2, db2) = self.conv2.backward(&ctx.act1, &d_act2);
        for (a, b) in grads.conv_w[1].iter_mut().zip(&dw2) {
            *a += b;
        }
        for (a, b) in grads.conv_b[1].iter_mut().zip(&db2) {
            *a += b;
        }
        leaky_relu_backward(&ctx.pre1.data, &mut d_act1.data);
        let (d_x, dw1, db1) = self.conv1.backward(&ctx.x_in, &d_act1);
        for (a, b) in grads.conv_w[0].iter_mut().zip(&dw1) {
            *a += b;
        }
        for (a, b) in grads.conv_b[0].iter_mut().zip(&db1) {
            *a += b;
        }
        // Message planes are constant broadcasts: sum their gradient.
        let mut d_proj = vec![0.0f64; MSG_PLANES];
        for (p, dp) in d_proj.iter_mut().enumerate() {
            *dp = d_x.data[(3 + p) * npix..(4 + p) * npix].iter().sum();
        }
        let (_, dwp, dbp) = self.msg_proj.backward(&ctx.msg_in, &d_proj);
        for (a, b) in grads.proj_w.iter_mut().zip(&dwp) {
            *a += b;
        }
        for (a, b) in grads.proj_b.iter_mut().zip(&dbp) {
            *a += b;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = [MSG_PLANES as f64, self.conv1.out_c as f64];
        save_weights(
            path,
            ENCODER2D_KIND,
            &[
                ("meta", vec![2], &meta),
                ("proj_w", vec![self.msg_proj.weight.len()], &self.msg_proj.weight),
                ("proj_b", vec![self.msg_proj.bias.len()], &self.msg_proj.bias),
                ("conv1_w", vec![self.conv1.weight.len()], &self.conv1.weight),
                ("conv1_b", vec![self.conv1.bias.len()], &self.conv1.bias),
                ("conv2_w", vec![self.conv2.weight.len()], &self.conv2.weight),
                ("conv2_b", vec![self.conv2.bias.len()], &self.conv2.bias),
                ("conv3_w", vec![self.conv3.weight.len()], &self.conv3.weight),
                ("conv3_b", vec![self.conv3.bias.len()], &self.conv3.bias),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blocks = load_weights(path, ENCODER2D_KIND)?;
        let meta = take_block(&blocks, "meta", &[2])?;
        let c = meta[1] as usize;
        let mut e = Encoder2d {
            msg_proj: Linear {
                in_dim: MESSAGE_BITS,
                out_dim: MSG_PLANES,
                weight: vec![0.0; MESSAGE_BITS * MSG_PLANES],
                bias: vec![0.0; MSG_PLANES],
            },
            conv1: Conv2d::zeroed(3 + MSG_PLANES, c, 1),
            conv2: Conv2d::zeroed(c, c, 1),
            conv3: Conv2d::zeroed(c, 3, 1),
        };
        e.msg_proj.weight = take_block(&blocks, "proj_w", &[e.msg_proj.weight.len()])?;
        e.msg_proj.bias = take_block(&blocks, "proj_b", &[e.msg_proj.bias.len()])?;
        e.conv1.weight = take_block(&blocks, "conv1_w", &[e.conv1.weight.len()])?;
        e.conv1.bias = take_block(&blocks, "conv1_b", &[e.conv1.bias.len()])?;
        e.conv2.weight = take_block(&blocks, "conv2_w", &[e.conv2.weight.len()])?;
        e.conv2.bias = take_block(&blocks, "conv2_b", &[e.conv2.bias.len()])?;
        e.conv3.weight = take_block(&blocks, "conv3_w", &[e.conv3.weight.len()])?;
        e.conv3.bias = take_block(&blocks, "conv3_b", &[e.conv3.bias.len()])?;
        Ok(e)
    }
}

/// Watermark a cover image: clamp(cover + residual).
pub fn encode2d(encoder: &Encoder2d, cover: &Image, msg: &Message) -> Image {
    encoder.forward_ctx(cover, msg).0
}

impl SoftBits {
    pub fn from_logits(logits: &[f64]) -> SoftBits {
        assert_eq!(logits.len(), MESSAGE_BITS);
        let mut probs = [0.0; MESSAGE_BITS];
        for (p, l) in probs.iter_mut().zip(logits) {
            *p = sigmoid(*l);
        }
        SoftBits { probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rng_for(seed, "img");
        let mut img = Image::new(w, h);
        for v in &mut img.data {
            *v = rng.gen_range(0.05..0.95);
        }
        img
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = rng_for(1, "dec");
        let dec = Decoder2d::new(16, &mut rng);
        let img = noise_image(16, 16, 2);
        let a = decode2d(&dec, &img);
        let b = decode2d(&dec, &img);
        assert_eq!(a.probs, b.probs);
        assert!(a.probs.iter().all(|p| (0.0..1.0).contains(p)));
    }

    #[test]
    fn zero_initialized_encoder_is_identity() {
        let mut rng = rng_for(3, "enc");
        let enc = Encoder2d::new(&mut rng);
        let img = noise_image(12, 12, 4);
        let msg = Message::random(&mut rng);
        let out = encode2d(&enc, &img, &msg);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn different_messages_give_different_residuals_after_init_breaks() {
        let mut rng = rng_for(5, "enc2");
        let mut enc = Encoder2d::new(&mut rng);
        // Give the zeroed output conv some weights so messages matter.
        for v in &mut enc.conv3.weight {
            *v = rng.gen_range(-0.05..0.05);
        }
        let img = noise_image(12, 12, 6);
        let m1 = Message::random(&mut rng);
        let mut m2 = m1.clone();
        m2.bits[0] ^= 1;
        m2.bits[17] ^= 1;
        let o1 = encode2d(&enc, &img, &m1);
        let o2 = encode2d(&enc, &img, &m2);
        let l2: f64 = o1
            .data
            .iter()
            .zip(&o2.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn decoder_image_gradient_matches_finite_differences() {
        let mut rng = rng_for(7, "dec-fd");
        let dec = Decoder2d::new(8, &mut rng);
        // Input at a different size exercises the resize path too.
        let img = noise_image(10, 10, 8);
        let (logits, ctx) = dec.forward_ctx(&img);
        let weights: Vec<f64> = (0..MESSAGE_BITS).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let loss_of = |l: &[f64]| -> f64 { l.iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let _ = loss_of(&logits);
        let d_img = dec.backward(&ctx, &weights, None);
        let h = 1e-5;
        for i in (0..img.data.len()).step_by(23) {
            let mut p = img.clone();
            p.data[i] += h;
            let mut m = img.clone();
            m.data[i] -= h;
            let fd = (loss_of(&dec.forward_ctx(&p).0) - loss_of(&dec.forward_ctx(&m).0)) / (2.0 * h);
            let a = d_img.data[i];
            assert!(
                (a - fd).abs() < 1e-5 * a.abs().max(fd.abs()).max(1.0),
                "pixel {i}: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn decoder_weight_gradients_match_finite_differences() {
        let mut rng = rng_for(9, "dec-wfd");
        let dec = Decoder2d::new(8, &mut rng);
        let img = noise_image(8, 8, 10);
        let weights: Vec<f64> = (0..MESSAGE_BITS).map(|i| (i as f64 * 0.37).sin() * 0.2).collect();
        let loss_of = |d: &Decoder2d| -> f64 {
            d.forward_ctx(&img).0.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, ctx) = dec.forward_ctx(&img);
        let mut grads = dec.zero_grads();
        dec.backward(&ctx, &weights, Some(&mut grads));
        let h = 1e-5;
        // Spot-check one weight per block.
        let checks: [(&dyn Fn(&mut Decoder2d) -> &mut f64, f64); 3] = [
            (&|d: &mut Decoder2d| &mut d.conv1.weight[5], grads.conv_w[0][5]),
            (&|d: &mut Decoder2d| &mut d.conv4.weight[17], grads.conv_w[3][17]),
            (&|d: &mut Decoder2d| &mut d.head.weight[33], grads.head_w[33]),
        ];
        for (access, analytic) in checks {
            let mut dp = dec.clone();
            *access(&mut dp) += h;
            let mut dm = dec.clone();
            *access(&mut dm) -= h;
            let fd = (loss_of(&dp) - loss_of(&dm)) / (2.0 * h);
            assert!(
                (analytic - fd).abs() < 1e-5 * analytic.abs().max(fd.abs()).max(1.0),
                "{analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn encoder_weight_gradients_match_finite_differences() {
        let mut rng = rng_for(11, "enc-fd");
        let mut enc = Encoder2d::new(&mut rng);
        for v in &mut enc.conv3.weight {
            *v = rng.gen_range(-0.1..0.1);
        }
        let img = noise_image(8, 8, 12);
        let msg = Message::random(&mut rng);
        let wsum = |o: &Image| -> f64 {
            o.data.iter().enumerate().map(|(i, v)| ((i % 5) as f64 - 2.0) * 0.1 * v).sum()
        };
        let (out, ctx) = enc.forward_ctx(&img, &msg);
        let mut d_out = Image::new(out.width, out.height);
        for (i, v) in d_out.data.iter_mut().enumerate() {
            *v = ((i % 5) as f64 - 2.0) * 0.1;
        }
        let mut grads = enc.zero_grads();
        enc.backward(&ctx, &d_out, &mut grads);
        let h = 1e-5;
        let checks: [(&dyn Fn(&mut Encoder2d) -> &mut f64, f64); 3] = [
            (&|e: &mut Encoder2d| &mut e.conv1.weight[11], grads.conv_w[0][11]),
            (&|e: &mut Encoder2d| &mut e.conv3.weight[7], grads.conv_w[2][7]),
            (&|e: &mut Encoder2d| &mut e.msg_proj.weight[20], grads.proj_w[20]),
        ];
        for (access, analytic) in checks {
            let mut ep = enc.clone();
            *access(&mut ep) += h;
            let mut em = enc.clone();
            *access(&mut em) -= h;
            let fd = (wsum(&ep.forward_ctx(&img, &msg).0) - wsum(&em.forward_ctx(&img, &msg).0))
                / (2.0 * h);
            assert!(
                (analytic - fd).abs() < 1e-5 * analytic.abs().max(fd.abs()).max(1.0),
                "{analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn weights_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_for(13, "io");
        let dec = Decoder2d::new(16, &mut rng);
        let dpath = dir.path().join("dec.bin");
        dec.save(&dpath).unwrap();
        let dec2 = Decoder2d::load(&dpath).unwrap();
        let img = noise_image(16, 16, 14);
        assert_eq!(decode2d(&dec, &img).probs, decode2d(&dec2, &img).probs);

        let enc = Encoder2d::new(&mut rng);
        let epath = dir.path().join("enc.bin");
        enc.save(&epath).unwrap();
        let enc2 = Encoder2d::load(&epath).unwrap();
        let msg = Message::random(&mut rng);
        assert_eq!(
            encode2d(&enc, &img, &msg).data,
            encode2d(&enc2, &img, &msg).data
        );
        // Kind mismatch is refused.
        assert!(Decoder2d::load(&epath).is_err());
    }
}
