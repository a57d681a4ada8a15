//! Training-time augmentation: random in-plain rotation, in-plain and depth
//! scaling applied consistently to the image and the targets, and additive
//! Gaussian depth noise with probability 0.5 per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::anchor::{sample_bilinear_valid, unwarp_to_world, DepthImage};
use crate::loss::GroundTruth;
use crate::rngutil::normal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Max |in-plain rotation| about the crop center, degrees.
    pub rotation_deg: f32,
    /// In-plain scale range.
    pub scale: (f32, f32),
    /// Depth scale range (applied about θ).
    pub depth_scale: (f32, f32),
    /// Probability of adding Gaussian depth noise to a sample.
    pub noise_prob: f64,
    /// Noise standard deviation, mm.
    pub noise_sigma_mm: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 30.0,
            scale: (0.9, 1.1),
            depth_scale: (0.95, 1.05),
            noise_prob: 0.5,
            noise_sigma_mm: 5.0,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            depth_scale: (1.0, 1.0),
            noise_prob: 0.0,
            noise_sigma_mm: 0.0,
        }
    }
}

/// Concrete draw of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_rad: f32,
    pub scale: f32,
    pub depth_scale: f32,
    pub noise: bool,
    pub noise_sigma_mm: f32,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_rad: 0.0,
            scale: 1.0,
            depth_scale: 1.0,
            noise: false,
            noise_sigma_mm: 0.0,
            noise_seed: 0,
        }
    }

    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = cfg.rotation_deg.to_radians();
        let angle_rad = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        let scale =
            if cfg.scale.0 < cfg.scale.1 { rng.gen_range(cfg.scale.0..=cfg.scale.1) } else { cfg.scale.0 };
        let depth_scale = if cfg.depth_scale.0 < cfg.depth_scale.1 {
            rng.gen_range(cfg.depth_scale.0..=cfg.depth_scale.1)
        } else {
            cfg.depth_scale.0
        };
        let noise = cfg.noise_prob > 0.0 && rng.gen::<f64>() < cfg.noise_prob;
        AugmentParams {
            angle_rad,
            scale,
            depth_scale,
            noise,
            noise_sigma_mm: cfg.noise_sigma_mm,
            noise_seed: rng.gen(),
        }
    }
}

/// Rotation+scale about the crop center as a row-major 2×3 affine.
fn about_center(angle: f32, scale: f32, cx: f32, cy: f32) -> [f32; 6] {
    let (s, c) = angle.sin_cos();
    let (a, b) = (c * scale, -s * scale);
    let (cc, d) = (s * scale, c * scale);
    [a, b, cx - a * cx - b * cy, cc, d, cy - cc * cx - d * cy]
}

fn apply_affine(m: &[f32; 6], u: f32, v: f32) -> (f32, f32) {
    (m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5])
}

fn joints_in_bounds(gt: &GroundTruth, m: &[f32; 6], w: usize, h: usize) -> bool {
    gt.positions.iter().all(|p| {
        let (u, v) = apply_affine(m, p[0], p[1]);
        u >= 0.0 && v >= 0.0 && u <= w as f32 - 1.0 && v <= h as f32 - 1.0
    })
}

/// Samples augmentation parameters from `seed` and applies them.
pub fn augment(
    sample: &Sample,
    seed: u64,
    cfg: &AugmentConfig,
    cam: &crate::anchor::CameraIntrinsics,
) -> Sample {
    apply_augment(sample, AugmentParams::sample(seed, cfg), cam)
}

/// Applies a concrete augmentation. The crop transform's post-affine and
/// the world joints are updated so the sample stays self-consistent; when
/// the rotation / scale would push a joint out of the crop they are clamped
/// toward identity (logged).
pub fn apply_augment(
    sample: &Sample,
    params: AugmentParams,
    cam: &crate::anchor::CameraIntrinsics,
) -> Sample {
    let (w, h) = (sample.image.width, sample.image.height);
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);

    let mut angle = params.angle_rad;
    let mut scale = params.scale;
    let mut m = about_center(angle, scale, cx, cy);
    if !joints_in_bounds(&sample.gt, &m, w, h) {
        let mut clamped = false;
        for _ in 0..16 {
            angle *= 0.5;
            scale = 1.0 + (scale - 1.0) * 0.5;
            m = about_center(angle, scale, cx, cy);
            clamped = true;
            if joints_in_bounds(&sample.gt, &m, w, h) {
                break;
            }
        }
        if !joints_in_bounds(&sample.gt, &m, w, h) {
            angle = 0.0;
            scale = 1.0;
            m = about_center(angle, scale, cx, cy);
        }
        if clamped {
            log::warn!(
                "augment: rotation/scale clamped to ({:.3} rad, {:.3}) to keep joints in bounds",
                angle,
                scale
            );
        }
    }

    let identity_warp = angle == 0.0 && scale == 1.0;
    let sd = params.depth_scale;
    let theta = sample.transform.theta;

    if identity_warp && sd == 1.0 && !params.noise {
        return sample.clone();
    }

    let mut image = if identity_warp {
        sample.image.clone()
    } else {
        // resample through the inverse warp
        let inv = about_center(-angle, 1.0 / scale, cx, cy);
        let mut data = vec![0.0f32; w * h];
        for oy in 0..h {
            for ox in 0..w {
                let (su, sv) = apply_affine(&inv, ox as f32, oy as f32);
                data[oy * w + ox] = sample_bilinear_valid(&sample.image, su, sv);
            }
        }
        DepthImage::new(w, h, data)
    };

    if sd != 1.0 {
        for v in image.data.iter_mut() {
            if *v != 0.0 {
                *v = theta + sd * (*v - theta);
            }
        }
    }

    if params.noise && params.noise_sigma_mm > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        for v in image.data.iter_mut() {
            if *v != 0.0 {
                *v = (*v + normal(&mut rng) * params.noise_sigma_mm).max(1.0);
            }
        }
    }

    let mut transform = sample.transform;
    if !identity_warp {
        transform.compose_post(m);
    }

    let positions: Vec<[f32; 2]> = sample
        .gt
        .positions
        .iter()
        .map(|p| {
            let (u, v) = apply_affine(&m, p[0], p[1]);
            [u, v]
        })
        .collect();
    let depths: Vec<f32> = sample.gt.depths.iter().map(|&d| sd * d).collect();

    // Recompute world joints from the augmented geometry so the recorded
    // transform stays consistent with the targets.
    let world_joints: Vec<[f32; 3]> = positions
        .iter()
        .zip(sample.world_joints.iter())
        .map(|(p, orig)| {
            let z = theta + sd * (orig[2] - theta);
            unwarp_to_world((p[0], p[1]), z, &transform, cam)
                .expect("augment transform is invertible")
        })
        .collect();

    Sample {
        image,
        gt: GroundTruth { positions, depths },
        transform,
        world_joints,
        seed: sample.seed,
    }
}
