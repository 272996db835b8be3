//! Phase-2 machinery: point sampling from Gaussian clouds, 3D distortions,
//! input normalization, and training of the point-set message decoder and
//! discriminator on a frozen watermarked cloud.

mod pointnet;

pub use pointnet::{
    decode3d, discriminate, Decoder3d, Discriminator3d, PointNet, PointNetGrads, DECODER3D_KIND,
    DISCRIMINATOR3D_KIND,
};

use crate::error::{Error, Result};
use crate::gscloud::{normalize_quat, param_hash, sigmoid, GaussianCloud};
use crate::metrics::bit_accuracy;
use crate::nn::Adam;
use crate::rng::rng_for;
use crate::wm2d::{message_loss, Message, SoftBits, BCE_CLAMP};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which Gaussian parameters ride along as per-point features.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub opacity: bool,
    pub scale: bool,
    pub rotation: bool,
    pub color: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            opacity: true,
            scale: true,
            rotation: true,
            color: true,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        (self.opacity as usize)
            + 3 * (self.scale as usize)
            + 4 * (self.rotation as usize)
            + 3 * (self.color as usize)
    }

    /// Input dimension of a decoder fed by these features.
    pub fn point_dim(&self) -> usize {
        3 + self.dim()
    }
}

/// A subset of Gaussians as a point set with per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub positions: Vec<Vector3<f64>>,
    /// `len() × feat_dim` feature rows (beyond position).
    pub features: Vec<f64>,
    pub feat_dim: usize,
}

impl PointSample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Uniform without-replacement sample of min(k, |cloud|) Gaussians.
///
/// Features use stable encodings: α = sigmoid(opacity_logit), raw log-scale,
/// the normalized sign-canonicalized quaternion (w ≥ 0), and the DC color.
pub fn sample_points(
    cloud: &GaussianCloud,
    k: usize,
    seed: u64,
    spec: &FeatureSpec,
) -> Result<PointSample> {
    if cloud.is_empty() {
        return Err(Error::Empty("cloud for point sampling".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be ≥ 1".into()));
    }
    let k = k.min(cloud.len());
    let mut rng = rng_for(seed, "sample-points");
    let picked = rand::seq::index::sample(&mut rng, cloud.len(), k);
    let fdim = spec.dim();
    let mut positions = Vec::with_capacity(k);
    let mut features = Vec::with_capacity(k * fdim);
    for idx in picked.iter() {
        let g = &cloud.gaussians[idx];
        positions.push(g.position);
        if spec.opacity {
            features.push(sigmoid(g.opacity_logit));
        }
        if spec.scale {
            features.extend_from_slice(g.log_scale.as_slice());
        }
        if spec.rotation {
            let (mut q, _) = normalize_quat(&g.rotation)?;
            if q[0] < 0.0 {
                for v in &mut q {
                    *v = -*v;
                }
            }
            features.extend_from_slice(&q);
        }
        if spec.color {
            features.extend_from_slice(g.sh_dc.as_slice());
        }
    }
    Ok(PointSample {
        positions,
        features,
        feat_dim: fdim,
    })
}

/// One 3D distortion applied to a point sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistortionSpec3D {
    None,
    /// i.i.d. Gaussian position noise, scene units.
    Noise { sigma: f64 },
    /// One global offset, each component uniform in [0, box_i].
    Translate { translate_box: [f64; 3] },
    /// One global rotation: uniform random axis, angle uniform in
    /// [−r_max, r_max], about the sample centroid.
    Rotate { r_max: f64 },
    /// Remove the fraction of points nearest a random sample point
    /// (a ball sized to contain that fraction).
    Cropout { cr: f64 },
}

impl DistortionSpec3D {
    pub fn name(&self) -> String {
        match self {
            DistortionSpec3D::None => "none".into(),
            DistortionSpec3D::Noise { sigma } => format!("noise_{sigma}"),
            DistortionSpec3D::Translate { .. } => "translate".into(),
            DistortionSpec3D::Rotate { r_max } => format!("rotate_{r_max}"),
            DistortionSpec3D::Cropout { cr } => format!("cropout_{cr}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DistortionSpec3D::None => true,
            DistortionSpec3D::Noise { sigma } => *sigma >= 0.0 && sigma.is_finite(),
            DistortionSpec3D::Translate { translate_box } => {
                translate_box.iter().all(|v| v.is_finite() && *v >= 0.0)
            }
            DistortionSpec3D::Rotate { r_max } => r_max.is_finite(),
            DistortionSpec3D::Cropout { cr } => (0.0..1.0).contains(cr),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "3D distortion parameter out of range: {self:?}"
            )))
        }
    }
}

fn random_unit_axis<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vector3::new(
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn axis_angle_matrix(axis: &Vector3<f64>, angle: f64) -> nalgebra::Matrix3<f64> {
    let (s, c) = (angle.sin(), angle.cos());
    let k = nalgebra::Matrix3::new(
        0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
    );
    nalgebra::Matrix3::identity() + s * k + (1.0 - c) * k * k
}

/// Apply one distortion. Features are untouched except CROPOUT row removal.
pub fn distort3d(ps: &PointSample, spec: &DistortionSpec3D, seed: u64) -> Result<PointSample> {
    spec.validate()?;
    let mut rng = rng_for(seed, "distort3d");
    let mut out = ps.clone();
    match spec {
        DistortionSpec3D::None => {}
        DistortionSpec3D::Noise { sigma } => {
            if *sigma > 0.0 {
                let normal = Normal::new(0.0, *sigma).unwrap();
                for p in &mut out.positions {
                    p.x += normal.sample(&mut rng);
                    p.y += normal.sample(&mut rng);
                    p.z += normal.sample(&mut rng);
                }
            }
        }
        DistortionSpec3D::Translate { translate_box } => {
            let t = Vector3::new(
                rng.gen_range(0.0..=translate_box[0].max(f64::MIN_POSITIVE)),
                rng.gen_range(0.0..=translate_box[1].max(f64::MIN_POSITIVE)),
                rng.gen_range(0.0..=translate_box[2].max(f64::MIN_POSITIVE)),
            );
            for p in &mut out.positions {
                *p += t;
            }
        }
        DistortionSpec3D::Rotate { r_max } => {
            let axis = random_unit_axis(&mut rng);
            let angle = if *r_max == 0.0 {
                0.0
            } else {
                rng.gen_range(-r_max.abs()..=r_max.abs())
            };
            let r = axis_angle_matrix(&axis, angle);
            let centroid =
                out.positions.iter().sum::<Vector3<f64>>() / out.positions.len().max(1) as f64;
            for p in &mut out.positions {
                *p = centroid + r * (*p - centroid);
            }
        }
        DistortionSpec3D::Cropout { cr } => {
            let k = out.positions.len();
            let remove = ((cr * k as f64).round() as usize).min(k);
            if k - remove == 0 {
                return Err(Error::Empty("cropout removed every point".into()));
            }
            if remove > 0 {
                let center = out.positions[rng.gen_range(0..k)];
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| {
                    let da = (out.positions[a] - center).norm_squared();
                    let db = (out.positions[b] - center).norm_squared();
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                let mut keep = vec![true; k];
                for &i in order.iter().take(remove) {
                    keep[i] = false;
                }
                let fdim = out.feat_dim;
                let mut positions = Vec::with_capacity(k - remove);
                let mut features = Vec::with_capacity((k - remove) * fdim);
                for i in 0..k {
                    if keep[i] {
                        positions.push(out.positions[i]);
                        features.extend_from_slice(&out.features[i * fdim..(i + 1) * fdim]);
                    }
                }
                out.positions = positions;
                out.features = features;
            }
        }
    }
    Ok(out)
}

/// Center on the centroid and scale by the max distance to it. Exact
/// translation invariance; coincident points fall back to scale 1.
pub fn normalize_points(ps: &PointSample) -> Result<PointSample> {
    if ps.is_empty() {
        return Err(Error::Empty("point sample to normalize".into()));
    }
    let centroid = ps.positions.iter().sum::<Vector3<f64>>() / ps.len() as f64;
    let mut max_r: f64 = 0.0;
    for p in &ps.positions {
        max_r = max_r.max((p - centroid).norm());
    }
    let scale = if max_r > 1e-12 { max_r } else { 1.0 };
    let mut out = ps.clone();
    for p in &mut out.positions {
        *p = (*p - centroid) / scale;
    }
    Ok(out)
}

/// Eq-style adversarial value: log(1 − D(T(P_o))) + log(D(T(P_w))), with
/// probabilities clamped. The discriminator ascends this; in this artifact
/// it is the only network trained against it (markers are frozen).
pub fn adv_loss(d_original: f64, d_watermarked: f64) -> f64 {
    let po = d_original.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pw = d_watermarked.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    (1.0 - po).ln() + pw.ln()
}

/// Phase-2 training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Train3DConfig {
    /// Message-loss weight λ₁'.
    pub lambda_msg: f64,
    /// Adversarial weight λ₂' (scales the discriminator objective).
    pub lambda_adv: f64,
    pub steps: usize,
    pub lr: f64,
    /// Final/initial lr ratio of the exponential schedule.
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Per-step sample size drawn uniformly from this inclusive range
    /// (clamped to the cloud size).
    pub k_min: usize,
    pub k_max: usize,
    pub features: FeatureSpec,
    /// Normalize samples before decoding (gives exact translate invariance).
    pub normalize: bool,
    /// Per-step training noise σ is drawn uniform in [0, noise_sigma_max].
    pub noise_sigma_max: f64,
    pub rotate_max: f64,
    pub cropout: f64,
    pub translate_box: [f64; 3],
    /// Log −λ₂'·adv inside the decoder loss column (parity mode). With
    /// frozen clouds the adversarial term carries no decoder gradient, so
    /// this only changes what is reported.
    pub decoder_adv: bool,
}

impl Default for Train3DConfig {
    fn default() -> Self {
        Train3DConfig {
            lambda_msg: 2.0,
            lambda_adv: 1.0,
            steps: 1500,
            lr: 1e-3,
            lr_gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            k_min: 512,
            k_max: 1024,
            features: FeatureSpec::default(),
            normalize: true,
            noise_sigma_max: 0.15,
            rotate_max: std::f64::consts::PI / 6.0,
            cropout: 0.1,
            translate_box: [1.0, 1.0, 1.0],
            decoder_adv: false,
        }
    }
}

impl Train3DConfig {
    /// Scale the scene-dependent distortion parameters from a bounding-box
    /// diagonal: translation box = 1× diagonal, training noise up to
    /// 5% of the diagonal.
    pub fn scaled_to_scene(mut self, diag: f64) -> Self {
        let d = if diag > 0.0 { diag } else { 1.0 };
        self.translate_box = [d, d, d];
        self.noise_sigma_max = 0.05 * d;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Train3dStepLog {
    pub step: usize,
    pub msg_loss: f64,
    pub adv_loss: f64,
    pub clean_acc: f64,
}

pub struct Train3dOutput {
    pub decoder: Decoder3d,
    pub discriminator: Discriminator3d,
    pub log: Vec<Train3dStepLog>,
}

struct NetOpt {
    opts: Vec<Adam>,
}

impl NetOpt {
    fn new(net: &PointNet, cfg: &Train3DConfig) -> Self {
        let lens = [
            net.mlp1.weight.len(),
            net.mlp1.bias.len(),
            net.mlp2.weight.len(),
            net.mlp2.bias.len(),
            net.mlp3.weight.len(),
            net.mlp3.bias.len(),
            net.head1.weight.len(),
            net.head1.bias.len(),
            net.head2.weight.len(),
            net.head2.bias.len(),
        ];
        NetOpt {
            opts: lens
                .iter()
                .map(|&l| Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, l))
                .collect(),
        }
    }

    fn step(&mut self, lr: f64, net: &mut PointNet, g: &PointNetGrads) {
        let blocks: [(&mut Vec<f64>, &Vec<f64>); 10] = [
            (&mut net.mlp1.weight, &g.mlp1_w),
            (&mut net.mlp1.bias, &g.mlp1_b),
            (&mut net.mlp2.weight, &g.mlp2_w),
            (&mut net.mlp2.bias, &g.mlp2_b),
            (&mut net.mlp3.weight, &g.mlp3_w),
            (&mut net.mlp3.bias, &g.mlp3_b),
            (&mut net.head1.weight, &g.head1_w),
            (&mut net.head1.bias, &g.head1_b),
            (&mut net.head2.weight, &g.head2_w),
            (&mut net.head2.bias, &g.head2_b),
        ];
        for (opt, (params, grads)) in self.opts.iter_mut().zip(blocks) {
            opt.lr = lr;
            opt.step(params, grads);
        }
    }
}

/// Train the 3D decoder and discriminator against a frozen watermarked
/// cloud, with a random 3D distortion per step (including the clean
/// channel). Alternating updates: the decoder minimizes λ₁'·BCE, the
/// discriminator ascends the adversarial objective. Neither cloud is
/// modified (asserted by parameter hashing).
pub fn train3d(
    watermarked: &GaussianCloud,
    original: &GaussianCloud,
    msg: &Message,
    cfg: &Train3DConfig,
) -> Result<Train3dOutput> {
    if watermarked.is_empty() || original.is_empty() {
        return Err(Error::Empty("cloud for 3D training".into()));
    }
    if cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(Error::InvalidParameter(format!(
            "bad k range {}..={}",
            cfg.k_min, cfg.k_max
        )));
    }
    let hash_w = param_hash(watermarked);
    let hash_o = param_hash(original);

    let mut rng = rng_for(cfg.seed, "train3d");
    let in_dim = cfg.features.point_dim();
    let mut decoder = Decoder3d::new(in_dim, &mut rng);
    let mut discriminator = Discriminator3d::new(in_dim, &mut rng);
    let mut dec_opt = NetOpt::new(&decoder.net, cfg);
    let mut disc_opt = NetOpt::new(&discriminator.net, cfg);

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = crate::nn::exp_decay_lr(cfg.lr, cfg.lr_gamma, step, cfg.steps);
        let k = rng.gen_range(cfg.k_min..=cfg.k_max);
        let sw_seed = rng.gen::<u64>();
        let so_seed = rng.gen::<u64>();
        let p_w = sample_points(watermarked, k, sw_seed, &cfg.features)?;
        let p_o = sample_points(original, k, so_seed, &cfg.features)?;

        // One random distortion kind per step; independent draws per cloud.
        let spec = match rng.gen_range(0..5u8) {
            0 => DistortionSpec3D::None,
            1 => DistortionSpec3D::Noise {
                sigma: rng.gen_range(0.0..=cfg.noise_sigma_max.max(f64::MIN_POSITIVE)),
            },
            2 => DistortionSpec3D::Translate {
                translate_box: cfg.translate_box,
            },
            3 => DistortionSpec3D::Rotate { r_max: cfg.rotate_max },
            _ => DistortionSpec3D::Cropout { cr: cfg.cropout },
        };
        let tw_seed = rng.gen::<u64>();
        let to_seed = rng.gen::<u64>();
        let t_w = distort3d(&p_w, &spec, tw_seed)?;
        let t_o = distort3d(&p_o, &spec, to_seed)?;
        let (dec_in, disc_in_w, disc_in_o, clean_in) = if cfg.normalize {
            (
                normalize_points(&t_w)?,
                normalize_points(&t_w)?,
                normalize_points(&t_o)?,
                normalize_points(&p_w)?,
            )
        } else {
            (t_w.clone(), t_w.clone(), t_o.clone(), p_w.clone())
        };

        // Decoder update: λ₁' · BCE.
        let (logits, dec_ctx) = decoder.net.forward_ctx(&dec_in);
        let soft = SoftBits::from_logits(&logits);
        let l_msg = message_loss(&soft, msg);
        if !l_msg.is_finite() {
            return Err(Error::Diverged(format!(
                "3D message loss non-finite at step {step}"
            )));
        }
        let mut d_logits = crate::wm2d::message_loss_dlogits(&soft, msg);
        for v in &mut d_logits {
            *v *= cfg.lambda_msg;
        }
        let mut dec_grads = decoder.net.zero_grads();
        decoder.net.backward(&dec_ctx, &d_logits, &mut dec_grads);
        dec_opt.step(lr, &mut decoder.net, &dec_grads);

        // Discriminator update: ascend log(1−D(T(P_o))) + log(D(T(P_w))).
        let (logit_o, ctx_o) = discriminator.net.forward_ctx(&disc_in_o);
        let (logit_w, ctx_w) = discriminator.net.forward_ctx(&disc_in_w);
        let s_o = crate::nn::sigmoid(logit_o[0]);
        let s_w = crate::nn::sigmoid(logit_w[0]);
        let l_adv = adv_loss(s_o, s_w);
        if !l_adv.is_finite() {
            return Err(Error::Diverged(format!(
                "adversarial loss non-finite at step {step}"
            )));
        }
        let mut disc_grads = discriminator.net.zero_grads();
        // d(−L)/dlogit_o = s_o ; d(−L)/dlogit_w = s_w − 1.
        discriminator
            .net
            .backward(&ctx_o, &[cfg.lambda_adv * s_o], &mut disc_grads);
        discriminator
            .net
            .backward(&ctx_w, &[cfg.lambda_adv * (s_w - 1.0)], &mut disc_grads);
        disc_opt.step(lr, &mut discriminator.net, &disc_grads);

        let clean_acc = bit_accuracy(&decode3d(&decoder, &clean_in), msg);
        let logged_msg_loss = if cfg.decoder_adv {
            cfg.lambda_msg * l_msg - cfg.lambda_adv * l_adv
        } else {
            cfg.lambda_msg * l_msg
        };
        log.push(Train3dStepLog {
            step,
            msg_loss: logged_msg_loss,
            adv_loss: l_adv,
            clean_acc,
        });
    }

    assert_eq!(param_hash(watermarked), hash_w, "watermarked cloud mutated");
    assert_eq!(param_hash(original), hash_o, "original cloud mutated");
    Ok(Train3dOutput {
        decoder,
        discriminator,
        log,
    })
}
