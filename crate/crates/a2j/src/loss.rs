//! Joint position loss, informative-anchor surrounding loss, and their
//! weighted total. Residuals are formed on the aggregated estimates (the
//! weighted sum sits inside the smooth-L1), smooth-L1 is applied per
//! coordinate, losses sum over joints and average over the batch.

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorGrid;
use crate::autodiff::{Graph, Tensor, TensorId};
use crate::model::{aggregate_ids, anchor_position_tile, NetworkOutputIds};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Balance between the in-plain and depth terms of loss1.
    pub alpha: f32,
    /// Smooth-L1 threshold τ1 for in-plain residuals.
    pub tau_in_plane: f32,
    /// Smooth-L1 threshold τ2 for depth residuals.
    pub tau_depth: f32,
    /// Total-loss weight λ on loss1.
    pub lambda: f32,
    pub surrounding_loss_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            tau_in_plane: 1.0,
            tau_depth: 3.0,
            lambda: 3.0,
            surrounding_loss_enabled: true,
        }
    }
}

/// Per-sample regression targets: in-plain positions in crop pixels and
/// transformed depth, one entry per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub positions: Vec<[f32; 2]>,
    pub depths: Vec<f32>,
}

impl GroundTruth {
    pub fn joints(&self) -> usize {
        self.positions.len()
    }
}

/// Ground-truth tensors for a batch, as graph constants.
#[derive(Clone, Copy, Debug)]
pub struct BatchTargets {
    /// [N, K, 2]
    pub positions: TensorId,
    /// [N, K]
    pub depths: TensorId,
}

pub fn batch_targets(graph: &mut Graph, gts: &[&GroundTruth]) -> BatchTargets {
    let n = gts.len();
    let k = gts[0].joints();
    let mut pos = Vec::with_capacity(n * k * 2);
    let mut dep = Vec::with_capacity(n * k);
    for gt in gts {
        assert_eq!(gt.joints(), k, "batch_targets: inconsistent joint counts");
        for p in &gt.positions {
            pos.extend_from_slice(p);
        }
        dep.extend_from_slice(&gt.depths);
    }
    BatchTargets {
        positions: graph.constant(Tensor::new(vec![n, k, 2], pos)),
        depths: graph.constant(Tensor::new(vec![n, k], dep)),
    }
}

/// Smooth-L1-like penalty: x²/(2τ) for |x| < τ, else |x| − τ/2.
/// Even, monotone in |x| and C¹ everywhere, including at |x| = τ.
pub fn smooth_l1_tau(x: f32, tau: f32) -> f32 {
    debug_assert!(tau > 0.0);
    let a = x.abs();
    if a < tau {
        x * x / (2.0 * tau)
    } else {
        a - tau / 2.0
    }
}

/// Sum over all non-batch axes, then mean over the batch → scalar node.
fn sum_joints_mean_batch(graph: &mut Graph, mut t: TensorId) -> TensorId {
    while graph.value(t).shape().len() > 1 {
        t = graph.reduce_sum(t, 1);
    }
    graph.reduce_mean(t, 0)
}

/// loss1 (Eq. 4 structure): α·L_τ1 on the aggregated in-plain residual plus
/// L_τ2 on the aggregated depth residual, per coordinate, summed over
/// joints, averaged over the batch.
pub fn joint_position_loss(
    graph: &mut Graph,
    out: &NetworkOutputIds,
    grid: &AnchorGrid,
    targets: &BatchTargets,
    cfg: &LossConfig,
) -> TensorId {
    let (shat, dhat) = aggregate_ids(graph, out, grid);
    let rpos = graph.sub(shat, targets.positions);
    let lpos = graph.smooth_l1(rpos, cfg.tau_in_plane);
    let lpos = sum_joints_mean_batch(graph, lpos);
    let lpos = graph.mul_scalar(lpos, cfg.alpha);
    let rdep = graph.sub(dhat, targets.depths);
    let ldep = graph.smooth_l1(rdep, cfg.tau_depth);
    let ldep = sum_joints_mean_batch(graph, ldep);
    graph.add(lpos, ldep)
}

/// loss2 (Eq. 6): L_τ1 on the displacement between the weight-centroid of
/// anchor positions and the in-plain target, encouraging informative
/// anchors that surround the joint.
pub fn surrounding_loss(
    graph: &mut Graph,
    responses: TensorId,
    grid: &AnchorGrid,
    targets: &BatchTargets,
    cfg: &LossConfig,
) -> TensorId {
    let shape = graph.value(responses).shape().to_vec();
    let (n, k) = (shape[0], shape[2]);
    let weights = graph.softmax(responses, 1);
    let w2 = graph.expand_last(weights, 2);
    let tile = anchor_position_tile(graph, grid, n, k);
    let weighted = graph.mul(w2, tile);
    let centroid = graph.reduce_sum(weighted, 1);
    let r = graph.sub(centroid, targets.positions);
    let l = graph.smooth_l1(r, cfg.tau_in_plane);
    sum_joints_mean_batch(graph, l)
}

/// Total loss (Eq. 7): λ·loss1 + loss2, or λ·loss1 with the surrounding
/// loss disabled.
pub fn total_loss(
    graph: &mut Graph,
    loss1: TensorId,
    loss2: Option<TensorId>,
    cfg: &LossConfig,
) -> TensorId {
    let scaled = graph.mul_scalar(loss1, cfg.lambda);
    match loss2 {
        Some(l2) if cfg.surrounding_loss_enabled => graph.add(scaled, l2),
        _ => scaled,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::anchor::build_anchor_grid;
    use crate::autodiff::fd_check_multi;

    #[test]
    fn smooth_l1_matches_the_paper_constants() {
        assert_eq!(smooth_l1_tau(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1_tau(2.0, 1.0), 1.5);
        // both branches meet at the knee: 9/6 and 3 - 1.5
        assert_eq!(smooth_l1_tau(3.0, 3.0), 1.5);
        let below = smooth_l1_tau(3.0 - 1e-4, 3.0);
        let above = smooth_l1_tau(3.0 + 1e-4, 3.0);
        assert!((below - 1.5).abs() < 1e-4 && (above - 1.5).abs() < 1e-4);
    }

    #[test]
    fn smooth_l1_is_even_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut prev = 0.0f32;
        for i in 0..200 {
            let x = i as f32 * 0.05;
            let v = smooth_l1_tau(x, 1.0);
            assert_eq!(v, smooth_l1_tau(-x, 1.0));
            assert!(v >= prev);
            prev = v;
        }
        let tau = rng.gen_range(0.5f32..4.0);
        // one-sided slopes at the knee are both 1
        let d_in = (smooth_l1_tau(tau, tau) - smooth_l1_tau(tau - 1e-3, tau)) / 1e-3;
        let d_out = (smooth_l1_tau(tau + 1e-3, tau) - smooth_l1_tau(tau, tau)) / 1e-3;
        assert!((d_in - 1.0).abs() < 1e-2 && (d_out - 1.0).abs() < 1e-2);
    }

    /// One sample, one joint, a one-hot response on `star`, configurable
    /// offset and depth at that anchor.
    fn one_hot_case(
        graph: &mut Graph,
        grid: &crate::anchor::AnchorGrid,
        star: usize,
        offset: [f32; 2],
        depth: f32,
    ) -> NetworkOutputIds {
        let a = grid.num_anchors();
        let mut res = vec![0.0f32; a];
        res[star] = 1000.0;
        let mut off = vec![0.0f32; a * 2];
        off[star * 2] = offset[0];
        off[star * 2 + 1] = offset[1];
        NetworkOutputIds {
            offsets: graph.constant(Tensor::new(vec![1, a, 1, 2], off)),
            depths: graph.constant(Tensor::new(vec![1, a, 1], vec![depth; a])),
            responses: graph.constant(Tensor::new(vec![1, a, 1], res)),
        }
    }

    #[test]
    fn joint_position_loss_hand_evaluates_on_a_one_hot_weight() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let cfg = LossConfig::default();
        let star = 5;
        let mut g = Graph::new();
        // aggregated in-plain estimate = S(a*) + (0.5, 0); depth residual 0
        let out = one_hot_case(&mut g, &grid, star, [0.5, 0.0], 12.0);
        let gt = GroundTruth { positions: vec![grid.positions[star]], depths: vec![12.0] };
        let targets = batch_targets(&mut g, &[&gt]);
        let l1 = joint_position_loss(&mut g, &out, &grid, &targets, &cfg);
        assert!((g.value(l1).item() - 0.0625).abs() < 1e-5);
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let out = one_hot_case(&mut g, &grid, 3, [0.0, 0.0], -4.0);
        let gt = GroundTruth { positions: vec![grid.positions[3]], depths: vec![-4.0] };
        let targets = batch_targets(&mut g, &[&gt]);
        let l1 = joint_position_loss(&mut g, &out, &grid, &targets, &cfg);
        assert!(g.value(l1).item().abs() < 1e-6);
    }

    #[test]
    fn alpha_scales_only_the_in_plane_term() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let gt = GroundTruth { positions: vec![[7.0, 9.0]], depths: vec![2.0] };
        let eval = |alpha: f32| {
            let mut g = Graph::new();
            let out = one_hot_case(&mut g, &grid, 8, [0.7, -0.4], 2.9);
            let targets = batch_targets(&mut g, &[&gt]);
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let l1 = joint_position_loss(&mut g, &out, &grid, &targets, &cfg);
            g.value(l1).item()
        };
        let (l_half, l_one, l_two) = (eval(0.5), eval(1.0), eval(2.0));
        let in_plane = l_one - l_half; // 0.5 * in-plane term
        assert!((l_two - (l_half + 3.0 * in_plane)).abs() < 1e-5);
        // doubling alpha doubles the in-plane part
        let depth_term = l_half - in_plane;
        assert!(((l_one - depth_term) - 2.0 * (l_half - depth_term)).abs() < 1e-5);
    }

    #[test]
    fn surrounding_loss_hand_evaluates_on_a_one_hot_weight() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let cfg = LossConfig::default();
        let star = 6;
        let mut g = Graph::new();
        let out = one_hot_case(&mut g, &grid, star, [0.0, 0.0], 0.0);
        // anchor sits 2 px right of the target: L_1(2) = 1.5 on u, 0 on v
        let target = [grid.positions[star][0] - 2.0, grid.positions[star][1]];
        let gt = GroundTruth { positions: vec![target], depths: vec![0.0] };
        let targets = batch_targets(&mut g, &[&gt]);
        let l2 = surrounding_loss(&mut g, out.responses, &grid, &targets, &cfg);
        assert!((g.value(l2).item() - 1.5).abs() < 1e-5);
    }

    #[test]
    fn symmetric_anchor_pair_zeroes_the_surrounding_loss() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let a = grid.num_anchors();
        let cfg = LossConfig::default();
        // anchors 5 and 6 sit at (6,6) and (10,6); target at their midpoint
        let mut res = vec![-1e9f32; a];
        res[5] = 3.0;
        res[6] = 3.0;
        let mut g = Graph::new();
        let responses = g.constant(Tensor::new(vec![1, a, 1], res));
        let mid = [
            (grid.positions[5][0] + grid.positions[6][0]) / 2.0,
            (grid.positions[5][1] + grid.positions[6][1]) / 2.0,
        ];
        let gt = GroundTruth { positions: vec![mid], depths: vec![0.0] };
        let targets = batch_targets(&mut g, &[&gt]);
        let l2 = surrounding_loss(&mut g, responses, &grid, &targets, &cfg);
        assert!(g.value(l2).item().abs() < 1e-6);
    }

    #[test]
    fn surrounding_loss_is_translation_invariant() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let a = grid.num_anchors();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let res: Vec<f32> = (0..a).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let target = [rng.gen_range(2.0f32..14.0), rng.gen_range(2.0f32..14.0)];
        let eval = |grid: &crate::anchor::AnchorGrid, target: [f32; 2]| {
            let mut g = Graph::new();
            let responses = g.constant(Tensor::new(vec![1, a, 1], res.clone()));
            let gt = GroundTruth { positions: vec![target], depths: vec![0.0] };
            let targets = batch_targets(&mut g, &[&gt]);
            let l2 = surrounding_loss(&mut g, responses, &grid, &targets, &cfg);
            g.value(l2).item()
        };
        let base = eval(&grid, target);
        let shift = [13.5f32, -4.25];
        let mut moved = grid.clone();
        for p in moved.positions.iter_mut() {
            p[0] += shift[0];
            p[1] += shift[1];
        }
        let moved_val = eval(&moved, [target[0] + shift[0], target[1] + shift[1]]);
        assert!((base - moved_val).abs() < 1e-4 * base.abs().max(1.0));
    }

    #[test]
    fn loss1_inherits_softmax_shift_invariance() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let a = grid.num_anchors();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let off: Vec<f32> = (0..a * 2).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let dep: Vec<f32> = (0..a).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        let res: Vec<f32> = (0..a).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let gt = GroundTruth { positions: vec![[8.3, 7.1]], depths: vec![1.4] };
        let eval = |shift: f32| {
            let mut g = Graph::new();
            let out = NetworkOutputIds {
                offsets: g.constant(Tensor::new(vec![1, a, 1, 2], off.clone())),
                depths: g.constant(Tensor::new(vec![1, a, 1], dep.clone())),
                responses: g.constant(Tensor::new(
                    vec![1, a, 1],
                    res.iter().map(|&r| r + shift).collect(),
                )),
            };
            let targets = batch_targets(&mut g, &[&gt]);
            let l1 = joint_position_loss(&mut g, &out, &grid, &targets, &cfg);
            g.value(l1).item()
        };
        let (a0, a1) = (eval(0.0), eval(5.5));
        assert!((a0 - a1).abs() < 1e-5 * a0.abs().max(1.0));
    }

    #[test]
    fn total_loss_weighs_with_lambda() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let l1 = g.constant(Tensor::new(vec![], vec![1.0]));
        let l2 = g.constant(Tensor::new(vec![], vec![0.5]));
        let t = total_loss(&mut g, l1, Some(l2), &cfg);
        assert_eq!(g.value(t).item(), 3.5);

        let off = LossConfig { surrounding_loss_enabled: false, ..cfg };
        let mut g = Graph::new();
        let l1 = g.constant(Tensor::new(vec![], vec![1.0]));
        let l2 = g.constant(Tensor::new(vec![], vec![0.5]));
        let t = total_loss(&mut g, l1, Some(l2), &off);
        assert_eq!(g.value(t).item(), 3.0);
    }

    #[test]
    fn total_loss_gradient_wrt_responses_matches_finite_differences() {
        let grid = build_anchor_grid(16, 16, 4).unwrap();
        let a = grid.num_anchors();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let off: Vec<f32> = (0..a * 2).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let dep: Vec<f32> = (0..a).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let res = Tensor::new(vec![1, a, 1], (0..a).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
        let gt = GroundTruth { positions: vec![[8.4, 6.9]], depths: vec![0.8] };
        let worst = fd_check_multi(
            &[res],
            |g, ids| {
                let out = NetworkOutputIds {
                    offsets: g.constant(Tensor::new(vec![1, a, 1, 2], off.clone())),
                    depths: g.constant(Tensor::new(vec![1, a, 1], dep.clone())),
                    responses: ids[0],
                };
                let targets = batch_targets(g, &[&gt]);
                let l1 = joint_position_loss(g, &out, &grid, &targets, &cfg);
                let l2 = surrounding_loss(g, out.responses, &grid, &targets, &cfg);
                total_loss(g, l1, Some(l2), &cfg)
            },
            1e-2,
            0.05,
        );
        assert!(worst < 2e-3, "max rel error {worst}");
    }
}
