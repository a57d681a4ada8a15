//! The A2J network: a strided-conv common trunk reaching 16× downsampling,
//! a dilation-2 regression trunk, and three prediction branches (in-plain
//! offsets, depth, anchor proposal). Branch output maps are rebound through
//! the anchor grid's cell map into per-anchor tensors, and a softmax over
//! anchors turns per-anchor predictions into joint estimates.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{unwarp_to_world, AnchorGrid, CameraIntrinsics, CropTransform, DOWNSAMPLE};
use crate::autodiff::{ConvSpec, Graph, Param, ParamStore, Tensor, TensorId};
use crate::error::{A2jError, Result};

pub const NORM_MOMENTUM: f32 = 0.1;
pub const NORM_EPS: f32 = 1e-5;
/// Default informative-anchor weight threshold.
pub const INFORMATIVE_THRESHOLD: f32 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop the anchor proposal branch; aggregation uses uniform weights.
    pub no_proposal_branch: bool,
    /// Predict offsets and depth from a single 16·K·3-channel branch.
    pub merged_offset_depth_branch: bool,
    /// Replace A2J with backbone + global average pool + FC regression.
    pub global_regression_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2JConfig {
    /// Joint count K.
    pub joints: usize,
    pub input_w: usize,
    pub input_h: usize,
    /// Anchor stride S_t in pixels.
    pub anchor_stride: usize,
    /// Common-trunk channel widths; each block downsamples 2×.
    pub backbone_channels: Vec<usize>,
    pub regression_channels: usize,
    pub regression_layers: usize,
    /// Width of the 4 intermediate convs in each branch.
    pub branch_channels: usize,
    /// Kernel side of each branch's output conv.
    pub output_kernel: usize,
    /// Network input = transformed depth / this scale.
    pub input_depth_scale: f32,
    pub ablation: AblationFlags,
}

impl Default for A2JConfig {
    fn default() -> Self {
        A2JConfig {
            joints: 14,
            input_w: 176,
            input_h: 176,
            anchor_stride: 4,
            backbone_channels: vec![16, 32, 64, 64],
            regression_channels: 64,
            regression_layers: 2,
            branch_channels: 32,
            output_kernel: 1,
            input_depth_scale: 300.0,
            ablation: AblationFlags::default(),
        }
    }
}

impl A2JConfig {
    /// Small configuration for fast tests and gradient checking.
    pub fn tiny(joints: usize, size: usize) -> Self {
        A2JConfig {
            joints,
            input_w: size,
            input_h: size,
            backbone_channels: vec![4, 4, 6, 6],
            regression_channels: 6,
            regression_layers: 1,
            branch_channels: 4,
            ..A2JConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(A2jError::Config("joint count must be >= 1".into()));
        }
        if self.input_w % DOWNSAMPLE != 0 || self.input_h % DOWNSAMPLE != 0 {
            return Err(A2jError::Config(format!(
                "input {}x{} must be divisible by {DOWNSAMPLE}",
                self.input_w, self.input_h
            )));
        }
        if self.input_w % self.anchor_stride != 0 || self.input_h % self.anchor_stride != 0 {
            return Err(A2jError::Config("input size must be divisible by anchor stride".into()));
        }
        if self.backbone_channels.len() != 4 {
            return Err(A2jError::Config("backbone needs exactly 4 strided blocks (16x)".into()));
        }
        if self.output_kernel % 2 == 0 {
            return Err(A2jError::Config("output kernel side must be odd".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<AnchorGrid> {
        crate::anchor::build_anchor_grid(self.input_w, self.input_h, self.anchor_stride)
    }

    pub fn anchors_per_cell(&self) -> usize {
        let q = DOWNSAMPLE / self.anchor_stride;
        q * q
    }

    /// Output channel counts (offsets, depth, responses) of the branches.
    pub fn branch_output_channels(&self) -> (usize, usize, usize) {
        let per = self.anchors_per_cell() * self.joints;
        (per * 2, per, per)
    }
}

/// Per-anchor network predictions as graph nodes, shapes
/// offsets [N,A,K,2], depths [N,A,K], responses [N,A,K].
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutputIds {
    pub offsets: TensorId,
    pub depths: TensorId,
    pub responses: TensorId,
}

/// Materialized per-anchor predictions for one sample.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// [A, K, 2] in-plain offsets, crop pixels.
    pub offsets: Tensor,
    /// [A, K] transformed-depth estimates.
    pub depths: Tensor,
    /// [A, K] unnormalized response logits.
    pub responses: Tensor,
}

/// One estimated joint.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JointEstimate {
    /// In-plain position, crop pixels.
    pub uv: [f32; 2],
    /// Transformed depth units.
    pub depth_t: f32,
    /// World coordinates, millimeters.
    pub world: [f32; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub joints: Vec<JointEstimate>,
}

/// Result of a forward pass: output ids plus the graph leaf of every
/// parameter, for gradient extraction.
pub struct Forward {
    pub out: NetworkOutputIds,
    pub leaves: Vec<(String, TensorId)>,
}

pub struct GlobalForward {
    /// [N, K, 3] — (u, v, transformed depth) per joint.
    pub pose: TensorId,
    pub leaves: Vec<(String, TensorId)>,
}

// ── parameter initialization ────────────────────────────────────────

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self) -> f32 {
        crate::rngutil::normal(&mut self.rng)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool, bias: bool) {
        let n = cout * cin * k * k;
        let data = if zero {
            vec![0.0; n]
        } else {
            let std = (2.0 / (cin * k * k) as f32).sqrt();
            (0..n).map(|_| self.normal() * std).collect()
        };
        self.store.insert(&format!("{name}.weight"), Param::new(vec![cout, cin, k, k], data));
        if bias {
            self.store
                .insert(&format!("{name}.bias"), Param::new(vec![cout], vec![0.0; cout]).no_decay());
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(&format!("{name}.gain"), Param::new(vec![c], vec![1.0; c]).no_decay());
        self.store.insert(&format!("{name}.bias"), Param::new(vec![c], vec![0.0; c]).no_decay());
        self.store.insert(&format!("{name}.rmean"), Param::new(vec![c], vec![0.0; c]).frozen());
        self.store.insert(&format!("{name}.rvar"), Param::new(vec![c], vec![1.0; c]).frozen());
    }

    fn block(&mut self, name: &str, cout: usize, cin: usize) {
        self.conv(name, cout, cin, 3, false, false);
        self.norm(&format!("{name}.norm"), cout);
    }
}

/// Builds the parameter store for `cfg`. He-style init from a seeded
/// generator; branch output convs start at zero so aggregation begins at
/// the uniform-weight anchor centroid.
pub fn init_params(cfg: &A2JConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::new() };
    let mut cin = 1;
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        init.block(&format!("common.{i}"), c, cin);
        cin = c;
    }
    let common_out = cin;
    for i in 0..cfg.regression_layers {
        init.block(&format!("reg.{i}"), cfg.regression_channels, cin);
        cin = cfg.regression_channels;
    }
    let reg_out = cin;
    let (off_c, dep_c, prop_c) = cfg.branch_output_channels();
    let branch = |init: &mut Init, name: &str, cin: usize, out_c: usize| {
        let mut c = cin;
        for i in 0..4 {
            init.block(&format!("{name}.{i}"), cfg.branch_channels, c);
            c = cfg.branch_channels;
        }
        init.conv(&format!("{name}.out"), out_c, c, cfg.output_kernel, true, true);
    };
    if cfg.ablation.global_regression_baseline {
        let m = cfg.joints * 3;
        let std = (2.0 / reg_out as f32).sqrt();
        let data: Vec<f32> = (0..reg_out * m).map(|_| init.normal() * std).collect();
        init.store.insert("fc.weight", Param::new(vec![reg_out, m], data));
        init.store.insert("fc.bias", Param::new(vec![m], vec![0.0; m]).no_decay());
        return Ok(init.store);
    }
    if cfg.ablation.merged_offset_depth_branch {
        branch(&mut init, "offset_depth", reg_out, off_c + dep_c);
    } else {
        branch(&mut init, "offset", reg_out, off_c);
        branch(&mut init, "depth", reg_out, dep_c);
    }
    if !cfg.ablation.no_proposal_branch {
        branch(&mut init, "prop", common_out, prop_c);
    }
    Ok(init.store)
}

// ── forward pass ────────────────────────────────────────────────────

struct Ctx<'a> {
    graph: &'a mut Graph,
    store: &'a mut ParamStore,
    leaves: Vec<(String, TensorId)>,
    training: bool,
}

impl Ctx<'_> {
    fn leaf(&mut self, name: &str) -> TensorId {
        let p = self.store.get(name);
        let id = self
            .graph
            .leaf(Tensor::new(p.shape.clone(), p.data.clone()), p.trainable);
        self.leaves.push((name.to_string(), id));
        id
    }

    /// conv (no bias) + channel norm + relu
    fn block(&mut self, name: &str, x: TensorId, stride: usize, dilation: usize) -> TensorId {
        let w = self.leaf(&format!("{name}.weight"));
        let spec = ConvSpec::new(stride, dilation, dilation); // 3x3: padding = dilation
        let y = self.graph.conv2d(x, w, None, spec);
        let gain = self.leaf(&format!("{name}.norm.gain"));
        let bias = self.leaf(&format!("{name}.norm.bias"));
        let mut rmean = std::mem::take(&mut self.store.get_mut(&format!("{name}.norm.rmean")).data);
        let mut rvar = std::mem::take(&mut self.store.get_mut(&format!("{name}.norm.rvar")).data);
        let y = self.graph.channel_norm(
            y,
            gain,
            bias,
            &mut rmean,
            &mut rvar,
            NORM_MOMENTUM,
            NORM_EPS,
            self.training,
        );
        self.store.get_mut(&format!("{name}.norm.rmean")).data = rmean;
        self.store.get_mut(&format!("{name}.norm.rvar")).data = rvar;
        self.graph.relu(y)
    }

    fn trunk(&mut self, images: TensorId, cfg: &A2JConfig) -> (TensorId, TensorId) {
        let mut x = images;
        for i in 0..cfg.backbone_channels.len() {
            x = self.block(&format!("common.{i}"), x, 2, 1);
        }
        let common = x;
        let mut r = x;
        for i in 0..cfg.regression_layers {
            r = self.block(&format!("reg.{i}"), r, 1, 2);
        }
        (common, r)
    }

    fn branch(&mut self, name: &str, x: TensorId, cfg: &A2JConfig) -> TensorId {
        let mut y = x;
        for i in 0..4 {
            y = self.block(&format!("{name}.{i}"), y, 1, 1);
        }
        let w = self.leaf(&format!("{name}.out.weight"));
        let b = self.leaf(&format!("{name}.out.bias"));
        self.graph.conv2d(y, w, Some(b), ConvSpec::same(cfg.output_kernel))
    }
}

/// Gather table from a branch output map [C=per_cell·K·c, ch, cw] to the
/// per-anchor layout [A, K, comps-of-interest]. Within a cell, channel
/// blocks are laid out one anchor slot at a time, row-major over the 4×4
/// sub-grid: channel (slot·K + j)·c + comp.
fn gather_table(
    grid: &AnchorGrid,
    joints: usize,
    channels_per_joint: usize,
    comps: std::ops::Range<usize>,
) -> Arc<Vec<u32>> {
    let cells = grid.cells_w * grid.cells_h;
    let per_cell = grid.anchors_per_cell();
    let a_total = grid.num_anchors();
    let ncomp = comps.len();
    let mut table = vec![0u32; a_total * joints * ncomp];
    for cell in 0..cells {
        for (slot, &a) in grid.cell_map[cell].iter().enumerate() {
            for j in 0..joints {
                for (ci, comp) in comps.clone().enumerate() {
                    let channel = (slot * joints + j) * channels_per_joint + comp;
                    let src = channel * cells + cell;
                    table[(a * joints + j) * ncomp + ci] = src as u32;
                }
            }
        }
    }
    debug_assert!(per_cell * joints * channels_per_joint * cells >= a_total * joints * ncomp);
    Arc::new(table)
}

/// Full A2J forward pass over a batch of depth crops [N,1,H,W] already in
/// network input units.
pub fn forward(
    graph: &mut Graph,
    store: &mut ParamStore,
    images: Tensor,
    cfg: &A2JConfig,
    grid: &AnchorGrid,
    training: bool,
) -> Result<Forward> {
    cfg.validate()?;
    assert_eq!(
        images.shape()[1..],
        [1, cfg.input_h, cfg.input_w],
        "forward: image batch does not match config size"
    );
    let n = images.shape()[0];
    let k = cfg.joints;
    let a_total = grid.num_anchors();
    let images = graph.constant(images);
    let mut ctx = Ctx { graph, store, leaves: Vec::new(), training };
    let (common, reg) = ctx.trunk(images, cfg);

    let (offsets, depths) = if cfg.ablation.merged_offset_depth_branch {
        let map = ctx.branch("offset_depth", reg, cfg);
        let t_off = gather_table(grid, k, 3, 0..2);
        let t_dep = gather_table(grid, k, 3, 2..3);
        let offsets = ctx.graph.select(map, t_off, vec![a_total, k, 2]);
        let d = ctx.graph.select(map, t_dep, vec![a_total, k, 1]);
        let depths = ctx.graph.reshape(d, vec![n, a_total, k]);
        (offsets, depths)
    } else {
        let off_map = ctx.branch("offset", reg, cfg);
        let dep_map = ctx.branch("depth", reg, cfg);
        let t_off = gather_table(grid, k, 2, 0..2);
        let t_dep = gather_table(grid, k, 1, 0..1);
        let offsets = ctx.graph.select(off_map, t_off, vec![a_total, k, 2]);
        let d = ctx.graph.select(dep_map, t_dep, vec![a_total, k, 1]);
        let depths = ctx.graph.reshape(d, vec![n, a_total, k]);
        (offsets, depths)
    };

    let responses = if cfg.ablation.no_proposal_branch {
        ctx.graph.constant(Tensor::zeros(vec![n, a_total, k]))
    } else {
        let prop_map = ctx.branch("prop", common, cfg);
        let t_prop = gather_table(grid, k, 1, 0..1);
        let r = ctx.graph.select(prop_map, t_prop, vec![a_total, k, 1]);
        ctx.graph.reshape(r, vec![n, a_total, k])
    };

    let leaves = ctx.leaves;
    graph.finite_ok()?;
    Ok(Forward { out: NetworkOutputIds { offsets, depths, responses }, leaves })
}

/// Global-regression baseline: backbone, global average pool, one FC layer
/// producing K×3 (u, v, transformed depth) per joint.
pub fn forward_global(
    graph: &mut Graph,
    store: &mut ParamStore,
    images: Tensor,
    cfg: &A2JConfig,
    training: bool,
) -> Result<GlobalForward> {
    cfg.validate()?;
    let n = images.shape()[0];
    let k = cfg.joints;
    let images = graph.constant(images);
    let mut ctx = Ctx { graph, store, leaves: Vec::new(), training };
    let (_, reg) = ctx.trunk(images, cfg);
    let p1 = ctx.graph.reduce_mean(reg, 3);
    let pooled = ctx.graph.reduce_mean(p1, 2);
    let w = ctx.leaf("fc.weight");
    let b = ctx.leaf("fc.bias");
    let out = ctx.graph.linear(pooled, w, b);
    let pose = ctx.graph.reshape(out, vec![n, k, 3]);
    let leaves = ctx.leaves;
    graph.finite_ok()?;
    Ok(GlobalForward { pose, leaves })
}

/// Builds a constant [N,A,K,2] tensor of anchor positions tiled over batch
/// and joints.
pub fn anchor_position_tile(graph: &mut Graph, grid: &AnchorGrid, n: usize, k: usize) -> TensorId {
    let a = grid.num_anchors();
    let mut data = Vec::with_capacity(n * a * k * 2);
    for _ in 0..n {
        for pos in &grid.positions {
            for _ in 0..k {
                data.push(pos[0]);
                data.push(pos[1]);
            }
        }
    }
    graph.constant(Tensor::new(vec![n, a, k, 2], data))
}

/// Softmax-weighted aggregation of per-anchor predictions (differentiable):
/// Ŝ_j = Σ_a P̃_j(a)(S(a) + O_j(a)), D̂_j = Σ_a P̃_j(a) D_j(a).
/// Returns ([N,K,2] in-plain estimates, [N,K] depth estimates).
pub fn aggregate_ids(
    graph: &mut Graph,
    out: &NetworkOutputIds,
    grid: &AnchorGrid,
) -> (TensorId, TensorId) {
    let shape = graph.value(out.offsets).shape().to_vec();
    let (n, k) = (shape[0], shape[2]);
    let weights = graph.softmax(out.responses, 1);
    let wd = graph.mul(weights, out.depths);
    let dhat = graph.reduce_sum(wd, 1);
    let tile = anchor_position_tile(graph, grid, n, k);
    let spos = graph.add(tile, out.offsets);
    let w2 = graph.expand_last(weights, 2);
    let weighted = graph.mul(w2, spos);
    let shat = graph.reduce_sum(weighted, 1);
    (shat, dhat)
}

/// Runs aggregation on materialized single-sample outputs.
pub fn aggregate(out: &NetworkOutput, grid: &AnchorGrid) -> (Vec<[f32; 2]>, Vec<f32>) {
    let a = grid.num_anchors();
    let k = out.depths.shape()[1];
    let mut graph = Graph::new();
    let ids = NetworkOutputIds {
        offsets: graph.constant(batched(&out.offsets)),
        depths: graph.constant(batched(&out.depths)),
        responses: graph.constant(batched(&out.responses)),
    };
    assert_eq!(out.offsets.shape(), [a, k, 2], "aggregate: offsets shape");
    let (shat, dhat) = aggregate_ids(&mut graph, &ids, grid);
    let s = graph.value(shat).data();
    let d = graph.value(dhat).data();
    let uv = (0..k).map(|j| [s[j * 2], s[j * 2 + 1]]).collect();
    (uv, d.to_vec())
}

fn batched(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec())
}

/// Normalized anchor weights P̃_j(a) for one joint.
pub fn anchor_weights(out: &NetworkOutput, joint: usize) -> Result<Vec<f32>> {
    let (a, k) = (out.responses.shape()[0], out.responses.shape()[1]);
    if joint >= k {
        return Err(A2jError::Config(format!("joint index {joint} out of range (K={k})")));
    }
    let r = out.responses.data();
    let max = (0..a).map(|i| r[i * k + joint]).fold(f32::NEG_INFINITY, f32::max);
    let mut w: Vec<f64> = (0..a).map(|i| ((r[i * k + joint] - max) as f64).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Ok(w.into_iter().map(|v| v as f32).collect())
}

/// Anchors whose normalized weight exceeds `threshold` for `joint`.
pub fn informative_anchors(
    out: &NetworkOutput,
    joint: usize,
    threshold: f32,
) -> Result<Vec<usize>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(A2jError::Config(format!(
            "informative-anchor threshold must be in (0,1), got {threshold}"
        )));
    }
    let w = anchor_weights(out, joint)?;
    Ok(w.iter()
        .enumerate()
        .filter_map(|(i, &wi)| (wi > threshold).then_some(i))
        .collect())
}

/// Assembles a world-space pose from aggregated crop-space estimates.
pub fn pose_estimate(
    uv: &[[f32; 2]],
    depth_t: &[f32],
    transform: &CropTransform,
    cam: &CameraIntrinsics,
) -> Result<PoseEstimate> {
    let mut joints = Vec::with_capacity(uv.len());
    for (p, &d) in uv.iter().zip(depth_t) {
        let z = crate::anchor::depth_target_inverse(d, transform.mu, transform.theta)?;
        let world = unwarp_to_world((p[0], p[1]), z, transform, cam)?;
        joints.push(JointEstimate { uv: *p, depth_t: d, world });
    }
    Ok(PoseEstimate { joints })
}

/// Copies one sample's outputs out of a forward-pass graph.
pub fn extract_sample(graph: &Graph, out: &NetworkOutputIds, idx: usize) -> NetworkOutput {
    let off = graph.value(out.offsets);
    let dep = graph.value(out.depths);
    let res = graph.value(out.responses);
    let (a, k) = (off.shape()[1], off.shape()[2]);
    let slice = |t: &Tensor, len: usize| t.data()[idx * len..(idx + 1) * len].to_vec();
    NetworkOutput {
        offsets: Tensor::new(vec![a, k, 2], slice(off, a * k * 2)),
        depths: Tensor::new(vec![a, k], slice(dep, a * k)),
        responses: Tensor::new(vec![a, k], slice(res, a * k)),
    }
}
