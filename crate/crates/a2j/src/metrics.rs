//! Evaluation metrics: mean 3D error, percentage-of-success-frame curve,
//! PDJ, and mAP under the 10-cm rule.

use serde::{Deserialize, Serialize};

use crate::error::{A2jError, Result};

pub const PDJ_FRACTIONS: [f32; 4] = [0.05, 0.10, 0.15, 0.20];
pub const MAP_THRESHOLD_MM: f32 = 100.0;

fn check_matched<T, U>(preds: &[Vec<T>], gts: &[Vec<U>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(A2jError::Shape(format!(
            "frame count mismatch: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(A2jError::Shape(format!(
                "joint count mismatch: {} vs {}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

fn dist3(a: [f32; 3], b: [f32; 3]) -> f32 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Mean over frames and joints of the Euclidean world-space distance, mm.
pub fn mean_3d_error(preds: &[Vec<[f32; 3]>], gts: &[Vec<[f32; 3]>]) -> Result<f32> {
    check_matched(preds, gts)?;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for (pj, gj) in p.iter().zip(g) {
            acc += dist3(*pj, *gj) as f64;
            n += 1;
        }
    }
    Ok((acc / n.max(1) as f64) as f32)
}

/// A frame succeeds at threshold t iff its worst-joint 3D error is below t.
/// Returns (threshold, fraction of succeeding frames) pairs.
pub fn success_frame_curve(
    preds: &[Vec<[f32; 3]>],
    gts: &[Vec<[f32; 3]>],
    thresholds: &[f32],
) -> Result<Vec<(f32, f32)>> {
    check_matched(preds, gts)?;
    if thresholds.is_empty() {
        return Err(A2jError::Config("success curve needs at least one threshold".into()));
    }
    let worst: Vec<f32> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.iter().zip(g).map(|(pj, gj)| dist3(*pj, *gj)).fold(0.0f32, f32::max)
        })
        .collect();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let ok = worst.iter().filter(|&&w| w < t).count();
            (t, ok as f32 / worst.len().max(1) as f32)
        })
        .collect())
}

/// In-plain bounding-box diagonal of one frame's ground-truth joints,
/// the default PDJ normalizer.
pub fn bbox_diagonal(gt: &[[f32; 2]]) -> f32 {
    let mut min = [f32::INFINITY; 2];
    let mut max = [f32::NEG_INFINITY; 2];
    for p in gt {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    let (w, h) = (max[0] - min[0], max[1] - min[1]);
    (w * w + h * h).sqrt()
}

/// Percent of Detected Joints: fraction of joints whose in-plain error is
/// below `fraction` × the per-frame normalizer.
pub fn pdj(
    preds: &[Vec<[f32; 2]>],
    gts: &[Vec<[f32; 2]>],
    fraction: f32,
    normalizers_px: &[f32],
) -> Result<f32> {
    check_matched(preds, gts)?;
    if normalizers_px.len() != preds.len() {
        return Err(A2jError::Shape("one normalizer per frame required".into()));
    }
    if normalizers_px.iter().any(|&n| n <= 0.0) {
        return Err(A2jError::Config("PDJ normalizer must be positive".into()));
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for ((p, g), &norm) in preds.iter().zip(gts).zip(normalizers_px) {
        for (pj, gj) in p.iter().zip(g) {
            let d = ((pj[0] - gj[0]).powi(2) + (pj[1] - gj[1]).powi(2)).sqrt();
            if d < fraction * norm {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(hit as f32 / total.max(1) as f32)
}

/// mAP with the 10-cm rule: per joint, the fraction of frames with 3D error
/// under 100 mm; the mean AP averages over joints.
pub fn map_10cm(preds: &[Vec<[f32; 3]>], gts: &[Vec<[f32; 3]>]) -> Result<(Vec<f32>, f32)> {
    check_matched(preds, gts)?;
    let frames = preds.len();
    if frames == 0 {
        return Err(A2jError::Config("mAP needs at least one frame".into()));
    }
    let k = preds[0].len();
    let mut per_joint = vec![0.0f32; k];
    for (p, g) in preds.iter().zip(gts) {
        for j in 0..k {
            if dist3(p[j], g[j]) < MAP_THRESHOLD_MM {
                per_joint[j] += 1.0;
            }
        }
    }
    for v in per_joint.iter_mut() {
        *v /= frames as f32;
    }
    let mean = per_joint.iter().sum::<f32>() / k.max(1) as f32;
    Ok((per_joint, mean))
}

/// All four metric families over one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_3d_error_mm: f32,
    /// (threshold mm, fraction of success frames), nondecreasing.
    pub success_curve: Vec<(f32, f32)>,
    /// (fraction, PDJ) at the standard fractions.
    pub pdj: Vec<(f32, f32)>,
    pub map_per_joint: Vec<f32>,
    pub map_mean: f32,
}

impl MetricReport {
    pub fn compute(
        preds_world: &[Vec<[f32; 3]>],
        gts_world: &[Vec<[f32; 3]>],
        preds_px: &[Vec<[f32; 2]>],
        gts_px: &[Vec<[f32; 2]>],
        thresholds_mm: &[f32],
    ) -> Result<Self> {
        let normalizers: Vec<f32> = gts_px.iter().map(|g| bbox_diagonal(g)).collect();
        let (map_per_joint, map_mean) = map_10cm(preds_world, gts_world)?;
        Ok(MetricReport {
            mean_3d_error_mm: mean_3d_error(preds_world, gts_world)?,
            success_curve: success_frame_curve(preds_world, gts_world, thresholds_mm)?,
            pdj: PDJ_FRACTIONS
                .iter()
                .map(|&f| Ok((f, pdj(preds_px, gts_px, f, &normalizers)?)))
                .collect::<Result<_>>()?,
            map_per_joint,
            map_mean,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,key,value\n");
        s.push_str(&format!("mean_3d_error_mm,,{}\n", self.mean_3d_error_mm));
        for (t, f) in &self.success_curve {
            s.push_str(&format!("success_frame,{t},{f}\n"));
        }
        for (frac, v) in &self.pdj {
            s.push_str(&format!("pdj,{frac},{v}\n"));
        }
        for (j, v) in self.map_per_joint.iter().enumerate() {
            s.push_str(&format!("map_10cm_joint,{j},{v}\n"));
        }
        s.push_str(&format!("map_10cm_mean,,{}\n", self.map_mean));
        s
    }
}
