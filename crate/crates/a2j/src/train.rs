//! Training loop (Adam with decoupled weight decay, stepwise learning-rate
//! schedule, per-epoch checkpoints) and batched evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, TensorId};
use crate::error::{A2jError, Result};
use crate::loss::{
    batch_targets, joint_position_loss, surrounding_loss, total_loss, LossConfig,
};
use crate::metrics::MetricReport;
use crate::model::{
    aggregate_ids, forward, forward_global, pose_estimate, A2JConfig,
};
use crate::rngutil::item_seed;
use crate::synth::{augment, AugmentConfig, Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub epochs: usize,
    /// Learning rate multiplies by `lr_decay_factor` every this many epochs.
    pub lr_decay_interval: usize,
    pub lr_decay_factor: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.00035,
            weight_decay: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            lr_decay_interval: 10,
            lr_decay_factor: 0.1,
            batch_size: 16,
            seed: 0,
            loss: LossConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(A2jError::Config("learning rate, batch size and epochs must be positive".into()));
        }
        if self.lr_decay_interval == 0 || self.lr_decay_interval > self.epochs {
            return Err(A2jError::Config(
                "lr decay interval must be in 1..=epochs".into(),
            ));
        }
        Ok(())
    }

    /// Stepwise schedule: decays by `lr_decay_factor` at every interval
    /// boundary (epoch is 0-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f32 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_interval) as i32)
    }
}

/// One loss-log row, serialized as CSV `step,loss,loss1,loss2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f32,
    pub loss1: f32,
    pub loss2: f32,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,loss1,loss2\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.loss1, r.loss2);
    }
    s
}

/// Adam with decoupled weight decay. Decay skips parameters flagged
/// `decay = false` (norm gains/biases, conv/fc biases).
pub struct AdamW {
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { m: HashMap::new(), v: HashMap::new(), t: 0 }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, Vec<f32>>,
        lr: f32,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name);
            if !p.trainable {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + cfg.epsilon) + decay * p.data[i]);
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// Stacks samples into the network input tensor [N,1,H,W]: transformed
/// depth divided by the configured scale, invalid pixels kept at 0.
pub fn batch_input(samples: &[&Sample], model_cfg: &A2JConfig) -> Tensor {
    let n = samples.len();
    let (w, h) = (model_cfg.input_w, model_cfg.input_h);
    let mut data = Vec::with_capacity(n * w * h);
    for s in samples {
        assert_eq!((s.image.width, s.image.height), (w, h), "sample size != model input size");
        let (mu, theta) = (s.transform.mu, s.transform.theta);
        data.extend(s.image.data.iter().map(|&z| {
            if z == 0.0 {
                0.0
            } else {
                mu * (z - theta) / model_cfg.input_depth_scale
            }
        }));
    }
    Tensor::new(vec![n, 1, h, w], data)
}

fn gather_grads(graph: &Graph, leaves: &[(String, TensorId)]) -> HashMap<String, Vec<f32>> {
    leaves
        .iter()
        .filter_map(|(name, id)| graph.grad(*id).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

/// Builds the global-baseline loss: smooth-L1 on the FC pose output against
/// the same targets (no surrounding loss).
fn global_loss(
    graph: &mut Graph,
    pose: TensorId,
    targets: &crate::loss::BatchTargets,
    cfg: &LossConfig,
) -> TensorId {
    let shape = graph.value(pose).shape().to_vec();
    let (k, a) = (shape[1], shape[0]);
    let _ = a;
    let mut pos_table = Vec::with_capacity(k * 2);
    let mut dep_table = Vec::with_capacity(k);
    for j in 0..k {
        pos_table.push((j * 3) as u32);
        pos_table.push((j * 3 + 1) as u32);
        dep_table.push((j * 3 + 2) as u32);
    }
    let pos = graph.select(pose, std::sync::Arc::new(pos_table), vec![k, 2]);
    let dep = graph.select(pose, std::sync::Arc::new(dep_table), vec![k]);
    let rpos = graph.sub(pos, targets.positions);
    let lp = graph.smooth_l1(rpos, cfg.tau_in_plane);
    let lp2 = graph.reduce_sum(lp, 2);
    let lp1 = graph.reduce_sum(lp2, 1);
    let lpos = graph.reduce_mean(lp1, 0);
    let lpos = graph.mul_scalar(lpos, cfg.alpha);
    let rdep = graph.sub(dep, targets.depths);
    let ld = graph.smooth_l1(rdep, cfg.tau_depth);
    let ld1 = graph.reduce_sum(ld, 1);
    let ldep = graph.reduce_mean(ld1, 0);
    graph.add(lpos, ldep)
}

pub struct TrainResult {
    pub store: ParamStore,
    pub loss_log: Vec<LossRow>,
}

/// Trains a model on `dataset`. With `out` set, writes `loss_log.csv` and a
/// checkpoint per epoch (`checkpoint/`, overwritten, so the last good epoch
/// survives a NaN abort).
pub fn train(
    dataset: &Dataset,
    model_cfg: &A2JConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(A2jError::Config("empty training dataset".into()));
    }
    if dataset.meta.joints != model_cfg.joints {
        return Err(A2jError::Config(format!(
            "dataset K={} but model K={}",
            dataset.meta.joints, model_cfg.joints
        )));
    }
    let grid = model_cfg.grid()?;
    let global = model_cfg.ablation.global_regression_baseline;
    let mut store = crate::model::init_params(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new();
    let mut loss_log = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 0xC0FFEE));
    let mut step: u64 = 0;
    let cam = dataset.meta.intrinsics;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    match &cfg.augment {
                        Some(a) => {
                            let seed =
                                item_seed(cfg.seed ^ (epoch as u64) << 32, i as u64);
                            augment(s, seed, a, &cam)
                        }
                        None => s.clone(),
                    }
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let images = batch_input(&refs, model_cfg);
            let gts: Vec<&crate::loss::GroundTruth> = augmented.iter().map(|s| &s.gt).collect();

            let mut graph = Graph::new();
            let targets = batch_targets(&mut graph, &gts);
            let (loss_id, l1_val, l2_val, leaves) = if global {
                let fwd = forward_global(&mut graph, &mut store, images, model_cfg, true)?;
                let l1 = global_loss(&mut graph, fwd.pose, &targets, &cfg.loss);
                let loss = graph.mul_scalar(l1, cfg.loss.lambda);
                (loss, graph.value(l1).item(), 0.0, fwd.leaves)
            } else {
                let fwd = forward(&mut graph, &mut store, images, model_cfg, &grid, true)?;
                let l1 = joint_position_loss(&mut graph, &fwd.out, &grid, &targets, &cfg.loss);
                let l2 = cfg.loss.surrounding_loss_enabled.then(|| {
                    surrounding_loss(&mut graph, fwd.out.responses, &grid, &targets, &cfg.loss)
                });
                let loss = total_loss(&mut graph, l1, l2, &cfg.loss);
                (
                    loss,
                    graph.value(l1).item(),
                    l2.map(|id| graph.value(id).item()).unwrap_or(0.0),
                    fwd.leaves,
                )
            };
            let loss_val = graph.value(loss_id).item();
            if !loss_val.is_finite() {
                if let Some(dir) = out {
                    fs::write(
                        dir.join("nan_abort.txt"),
                        format!("NaN loss at step {step} (epoch {epoch}); last-good checkpoint retained\n"),
                    )?;
                    fs::write(dir.join("loss_log.csv"), loss_log_csv(&loss_log))?;
                }
                return Err(A2jError::Numerical(format!("NaN loss at step {step}")));
            }
            graph.backward(loss_id)?;
            let grads = gather_grads(&graph, &leaves);
            opt.step(&mut store, &grads, lr, cfg);
            step += 1;
            loss_log.push(LossRow { step, loss: loss_val, loss1: l1_val, loss2: l2_val });
        }
        if let Some(dir) = out {
            store.save(&dir.join("checkpoint"))?;
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("loss_log.csv"), loss_log_csv(&loss_log))?;
        store.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainResult { store, loss_log })
}

/// Per-frame predictions from one evaluation pass.
pub struct EvalOutput {
    pub report: MetricReport,
    /// World-space joints per frame, mm.
    pub preds_world: Vec<Vec<[f32; 3]>>,
    /// Crop-space joints per frame, px.
    pub preds_px: Vec<Vec<[f32; 2]>>,
    /// Transformed depth per frame.
    pub preds_depth_t: Vec<Vec<f32>>,
}

/// Runs the model over the whole dataset in inference mode and scores it.
pub fn evaluate(
    dataset: &Dataset,
    store: &mut ParamStore,
    model_cfg: &A2JConfig,
    batch_size: usize,
) -> Result<EvalOutput> {
    let grid = model_cfg.grid()?;
    let cam = dataset.meta.intrinsics;
    let global = model_cfg.ablation.global_regression_baseline;
    let mut preds_world = Vec::with_capacity(dataset.len());
    let mut preds_px = Vec::with_capacity(dataset.len());
    let mut preds_depth_t = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = batch_input(&refs, model_cfg);
        let mut graph = Graph::new();
        let (shat, dhat) = if global {
            let fwd = forward_global(&mut graph, store, images, model_cfg, false)?;
            let shape = graph.value(fwd.pose).shape().to_vec();
            let k = shape[1];
            let mut pos_table = Vec::new();
            let mut dep_table = Vec::new();
            for j in 0..k {
                pos_table.push((j * 3) as u32);
                pos_table.push((j * 3 + 1) as u32);
                dep_table.push((j * 3 + 2) as u32);
            }
            (
                graph.select(fwd.pose, std::sync::Arc::new(pos_table), vec![k, 2]),
                graph.select(fwd.pose, std::sync::Arc::new(dep_table), vec![k]),
            )
        } else {
            let fwd = forward(&mut graph, store, images, model_cfg, &grid, false)?;
            aggregate_ids(&mut graph, &fwd.out, &grid)
        };
        graph.finite_ok()?;
        let k = model_cfg.joints;
        let s = graph.value(shat).data();
        let d = graph.value(dhat).data();
        for (bi, sample) in chunk.iter().enumerate() {
            let uv: Vec<[f32; 2]> =
                (0..k).map(|j| [s[(bi * k + j) * 2], s[(bi * k + j) * 2 + 1]]).collect();
            let dep: Vec<f32> = (0..k).map(|j| d[bi * k + j]).collect();
            let pose = pose_estimate(&uv, &dep, &sample.transform, &cam)?;
            preds_world.push(pose.joints.iter().map(|j| j.world).collect());
            preds_px.push(uv);
            preds_depth_t.push(dep);
        }
    }
    let gts_world: Vec<Vec<[f32; 3]>> =
        dataset.samples.iter().map(|s| s.world_joints.clone()).collect();
    let gts_px: Vec<Vec<[f32; 2]>> =
        dataset.samples.iter().map(|s| s.gt.positions.clone()).collect();
    let thresholds: Vec<f32> = (1..=20).map(|i| i as f32 * 10.0).collect();
    let report =
        MetricReport::compute(&preds_world, &gts_world, &preds_px, &gts_px, &thresholds)?;
    Ok(EvalOutput { report, preds_world, preds_px, preds_depth_t })
}
