//! Finite-difference gradient diagnostics, shared by the unit tests and
//! the `grad-check` subcommand. Every differentiable op is exercised on
//! several random seeds against central differences; a final end-to-end
//! check differentiates the total loss through a tiny network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    fd_check_multi, ConvSpec, GradCheckReport, Graph, Tensor, TensorId,
};
use crate::error::Result;
use crate::loss::{batch_targets, joint_position_loss, surrounding_loss, total_loss, GroundTruth,
    LossConfig};
use crate::model::{forward, init_params, A2JConfig};

pub const PER_OP_TOLERANCE: f32 = 1e-3;
pub const END_TO_END_TOLERANCE: f32 = 1e-2;

/// Step for ops that are linear in each input coordinate (central
/// differences have no truncation error there, so the step only divides
/// f32 forward-rounding noise down).
const FD_STEP_LINEAR: f32 = 1e-2;
/// Step for smooth nonlinear ops; balances h² truncation against f32
/// rounding noise.
const FD_STEP_SMOOTH: f32 = 5e-3;
/// Gradient coordinates below this are dominated by f32 forward
/// quantization; relative error is measured against at least this scale.
const FD_FLOOR: f32 = 0.05;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn rand_signed_away(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f32, max_abs: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..max_abs)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn weights_for(rng: &mut ChaCha8Rng, numel: usize) -> Tensor {
    let data = (0..numel)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.5..1.5f32)
        })
        .collect();
    Tensor::new(vec![numel], data)
}

struct Case {
    name: &'static str,
    worst: f32,
    tolerance: f32,
    step: f32,
}

impl Case {
    fn new(name: &'static str, step: f32) -> Self {
        Case { name, worst: 0.0, tolerance: PER_OP_TOLERANCE, step }
    }

    /// Checks gradients of weights·build(inputs) against finite
    /// differences. The weighted sum is centered on its unperturbed value
    /// before the final reduction so the scalar stays near zero and the
    /// f64→f32 cast of the objective cannot quantize the differences away.
    fn run<F>(&mut self, inputs: &[Tensor], weights: &Tensor, build: F)
    where
        F: Fn(&mut Graph, &[TensorId]) -> TensorId,
    {
        let mut g0 = Graph::new();
        let ids0: Vec<_> = inputs.iter().map(|t| g0.leaf(t.clone(), false)).collect();
        let y0 = build(&mut g0, &ids0);
        let center = Tensor::new(
            vec![weights.numel()],
            g0.value(y0).data().iter().zip(weights.data()).map(|(y, w)| y * w).collect(),
        );
        let err = fd_check_multi(
            inputs,
            |g, ids| {
                let y = build(g, ids);
                let flat = g.reshape(y, vec![weights.numel()]);
                let w = g.constant(weights.clone());
                let p = g.mul(flat, w);
                let c = g.constant(center.clone());
                let d = g.sub(p, c);
                g.reduce_sum(d, 0)
            },
            self.step,
            FD_FLOOR,
        );
        self.worst = self.worst.max(err);
    }

    fn report(self) -> GradCheckReport {
        GradCheckReport { name: self.name.to_string(), max_rel_error: self.worst, tolerance: self.tolerance }
    }
}

/// Per-op gradient checks, `seeds` random draws each.
pub fn op_gradient_checks(seeds: u64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();

    // add / sub / mul / mul_scalar on a pair of [2,3,4] tensors
    for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2), ("mul_scalar", 3)] {
        let mut case = Case::new(name, FD_STEP_LINEAR);
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_signed_away(&mut rng, &[2, 3, 4], 0.3, 1.3);
            let b = rand_signed_away(&mut rng, &[2, 3, 4], 0.3, 1.3);
            let w = weights_for(&mut rng, 24);
            case.run(&[a, b], &w, |g, ids| {
                let y = match which {
                    0 => g.add(ids[0], ids[1]),
                    1 => g.sub(ids[0], ids[1]),
                    2 => g.mul(ids[0], ids[1]),
                    _ => g.mul_scalar(ids[0], 1.7),
                };
                y
            });
        }
        reports.push(case.report());
    }

    // relu, with inputs bounded away from the kink
    let mut case = Case::new("relu", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_signed_away(&mut rng, &[3, 5], 0.2, 1.0);
        let w = weights_for(&mut rng, 15);
        case.run(&[a], &w, |g, ids| {
            let y = g.relu(ids[0]);
            y
        });
    }
    reports.push(case.report());

    // smooth_l1 with τ=1, inputs bounded away from 0 and the knee
    let mut case = Case::new("smooth_l1", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = 12;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0f32 } else { -1.0 };
                let mag = if rng.gen_bool(0.5) { rng.gen_range(0.1..0.9f32) } else { rng.gen_range(1.1..2.0f32) };
                sign * mag
            })
            .collect();
        let a = Tensor::new(vec![n], data);
        let w = weights_for(&mut rng, n);
        case.run(&[a], &w, |g, ids| {
            let y = g.smooth_l1(ids[0], 1.0);
            y
        });
    }
    reports.push(case.report());

    // softmax over the middle axis of [2,5,3]
    let mut case = Case::new("softmax", FD_STEP_SMOOTH);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = rand_tensor(&mut rng, &[2, 5, 3], -2.0, 2.0);
        let w = weights_for(&mut rng, 30);
        case.run(&[a], &w, |g, ids| {
            let y = g.softmax(ids[0], 1);
            y
        });
    }
    reports.push(case.report());

    // reductions, reshape, expand_last, select
    let mut case = Case::new("reduce_sum", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let a = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
        let w = weights_for(&mut rng, 6);
        case.run(&[a], &w, |g, ids| {
            let y = g.reduce_sum(ids[0], 1);
            y
        });
    }
    reports.push(case.report());

    let mut case = Case::new("reduce_mean", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let a = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
        let w = weights_for(&mut rng, 6);
        case.run(&[a], &w, |g, ids| {
            let y = g.reduce_mean(ids[0], 1);
            y
        });
    }
    reports.push(case.report());

    let mut case = Case::new("reshape_expand", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let a = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        let w = weights_for(&mut rng, 36);
        case.run(&[a], &w, |g, ids| {
            let y = g.reshape(ids[0], vec![3, 4]);
            let y = g.expand_last(y, 3);
            y
        });
    }
    reports.push(case.report());

    let mut case = Case::new("select", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let a = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
        let table: Arc<Vec<u32>> = Arc::new((0..12).map(|_| rng.gen_range(0..8u32)).collect());
        let w = weights_for(&mut rng, 24);
        case.run(&[a], &w, |g, ids| {
            let y = g.select(ids[0], table.clone(), vec![12]);
            y
        });
    }
    reports.push(case.report());

    // conv2d across stride/dilation settings, grads for input+kernel+bias
    let mut case = Case::new("conv2d", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        for spec in [ConvSpec::new(1, 1, 1), ConvSpec::new(2, 2, 2)] {
            let input = rand_tensor(&mut rng, &[1, 2, 5, 5], -0.5, 0.5);
            let kernel = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
            let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
            let (oh, ow) = crate::autodiff::conv_out_dims((5, 5), (3, 3), spec).unwrap();
            let w = weights_for(&mut rng, 3 * oh * ow);
            case.run(&[input, kernel, bias], &w, |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec);
                y
            });
        }
    }
    reports.push(case.report());

    let mut case = Case::new("linear", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let input = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let weight = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let w = weights_for(&mut rng, 8);
        case.run(&[input, weight, bias], &w, |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]);
            y
        });
    }
    reports.push(case.report());

    // channel norm, batch-statistics mode and running-statistics mode
    let mut case = Case::new("channel_norm_batch", FD_STEP_SMOOTH);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let input = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let gain = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let w = weights_for(&mut rng, 24);
        case.run(&[input, gain, bias], &w, |g, ids| {
            let mut rm = vec![0.0; 3];
            let mut rv = vec![1.0; 3];
            let y = g.channel_norm(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, true);
            y
        });
    }
    reports.push(case.report());

    let mut case = Case::new("channel_norm_running", FD_STEP_LINEAR);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
        let input = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let gain = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let rm: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rv: Vec<f32> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let w = weights_for(&mut rng, 24);
        case.run(&[input, gain, bias], &w, |g, ids| {
            let mut rm = rm.clone();
            let mut rv = rv.clone();
            let y = g.channel_norm(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, false);
            y
        });
    }
    reports.push(case.report());

    reports
}

/// Differentiates the total loss through a tiny full network and compares
/// sampled parameter coordinates against central differences.
pub fn end_to_end_gradient_check(seed: u64) -> Result<GradCheckReport> {
    // Narrower than tiny(): the FD oracle degrades with activation count
    // because every ReLU pre-activation that crosses zero inside the FD
    // interval adds a small bias, so the check runs on the thinnest config
    // that still exercises every op in the architecture.
    let cfg = A2JConfig {
        joints: 3,
        input_w: 32,
        input_h: 32,
        backbone_channels: vec![2, 2, 3, 3],
        regression_channels: 3,
        regression_layers: 1,
        branch_channels: 2,
        ..A2JConfig::default()
    };
    let grid = cfg.grid()?;
    let lcfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut store = init_params(&cfg, seed)?;
    // Jitter every trainable tensor off the symmetric zero-init point so
    // output-conv gradients are exercised too.
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in &names {
        let p = store.get_mut(name);
        if p.trainable {
            for v in &mut p.data {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }

    let images = rand_tensor(&mut rng, &[2, 1, cfg.input_h, cfg.input_w], -1.0, 1.0);
    // Targets sit close to the network's own predictions so every residual
    // stays in the quadratic smooth-l1 region and the loss stays small. A
    // large loss value would bury the finite differences in the f32
    // quantization of the loss itself, and residuals past the knee flatten
    // the gradient to its saturated value.
    let gts: Vec<GroundTruth> = {
        let mut s = store.clone();
        let mut g = Graph::new();
        let fwd = forward(&mut g, &mut s, images.clone(), &cfg, &grid, true)?;
        let (shat, dhat) = crate::model::aggregate_ids(&mut g, &fwd.out, &grid);
        let pos = g.value(shat).data().to_vec();
        let dep = g.value(dhat).data().to_vec();
        (0..2)
            .map(|n| GroundTruth {
                positions: (0..cfg.joints)
                    .map(|k| {
                        let b = (n * cfg.joints + k) * 2;
                        [
                            pos[b] + rng.gen_range(-0.5..0.5),
                            pos[b + 1] + rng.gen_range(-0.5..0.5),
                        ]
                    })
                    .collect(),
                depths: (0..cfg.joints)
                    .map(|k| dep[n * cfg.joints + k] + rng.gen_range(-0.3..0.3))
                    .collect(),
            })
            .collect()
    };

    let loss_value = |store: &crate::autodiff::ParamStore| -> f32 {
        let mut s = store.clone();
        let mut g = Graph::new();
        let fwd = forward(&mut g, &mut s, images.clone(), &cfg, &grid, true).expect("forward");
        let gt_refs: Vec<&GroundTruth> = gts.iter().collect();
        let targets = batch_targets(&mut g, &gt_refs);
        let l1 = joint_position_loss(&mut g, &fwd.out, &grid, &targets, &lcfg);
        let l2 = surrounding_loss(&mut g, fwd.out.responses, &grid, &targets, &lcfg);
        let total = total_loss(&mut g, l1, Some(l2), &lcfg);
        g.value(total).item()
    };

    // Analytic pass.
    let mut s = store.clone();
    let mut g = Graph::new();
    let fwd = forward(&mut g, &mut s, images.clone(), &cfg, &grid, true)?;
    let gt_refs: Vec<&GroundTruth> = gts.iter().collect();
    let targets = batch_targets(&mut g, &gt_refs);
    let l1 = joint_position_loss(&mut g, &fwd.out, &grid, &targets, &lcfg);
    let l2 = surrounding_loss(&mut g, fwd.out.responses, &grid, &targets, &lcfg);
    let total = total_loss(&mut g, l1, Some(l2), &lcfg);
    g.backward(total)?;

    // Finite differences are only a valid oracle where the loss is C¹ on
    // the whole FD interval; a ReLU pre-activation crossing zero inside
    // [θ−h, θ+h] anywhere downstream biases the central difference by
    // O(slope change) no matter how small h is, and the f32 rounding of the
    // loss bounds how small h can usefully get. Each sampled coordinate is
    // therefore probed at several steps and kept only where the profile is
    // self-consistent.
    let f0 = loss_value(&store);
    let mut kept = 0usize;
    let mut worst = 0.0f32;
    let mut tried = 0usize;
    for (name, id) in &fwd.leaves {
        if !store.get(name).trainable {
            continue;
        }
        let grads = match g.grad(*id) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; store.get(name).data.len()],
        };
        // The largest-gradient coordinates of each tensor are the ones the
        // f32 FD oracle resolves best; a coordinate whose gradient sits
        // below the rounding noise of the loss carries no signal.
        let mut order: Vec<usize> = (0..grads.len()).collect();
        order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
        for &idx in order.iter().take(3) {
            let base = store.get(name).data[idx];
            let eval = |v: f32| -> f32 {
                let mut s2 = store.clone();
                s2.get_mut(name).data[idx] = v;
                loss_value(&s2)
            };
            tried += 1;
            let hs: [f32; 4] = [2.5e-3, 1.75e-3, 1e-3, 5e-4];
            let mut fds = [0.0f32; 4];
            let mut splits = [0.0f32; 4];
            for (i, &h) in hs.iter().enumerate() {
                let f_plus = eval(base + h);
                let f_minus = eval(base - h);
                fds[i] = (f_plus - f_minus) / (2.0 * h);
                splits[i] = ((f_plus - f0) - (f0 - f_minus)).abs() / h;
            }
            // Rounding noise of a central difference scales as 1/h, so the
            // combined estimate weights each sample by h^2.
            let sw: f64 = hs.iter().map(|&h| (h as f64) * (h as f64)).sum();
            let swf: f64 =
                hs.iter().zip(&fds).map(|(&h, &v)| (h as f64) * (h as f64) * v as f64).sum();
            let fd = (swf / sw) as f32;
            // Two ways a kink inside [θ−h, θ+h] corrupts the estimate, and
            // two matching rejections: a kink at distance d < h shifts
            // fd(h) by Δ(h−d)/2h, which varies across the 5x range of
            // steps, so the profile must be flat; a kink essentially at θ
            // shifts every fd(h) by the constant Δ/2, invisible in the
            // profile, but it splits the forward and backward one-sided
            // differences by Δ at every step. The absolute allowances cover
            // f32 rounding of the loss. A wrong backward rule would
            // disagree on the clean coordinates too, so the rejections
            // cannot mask one.
            let spread = fds.iter().fold(f32::MIN, |m, &v| m.max(v))
                - fds.iter().fold(f32::MAX, |m, &v| m.min(v));
            let split_hit = hs
                .iter()
                .zip(&splits)
                .any(|(&h, &s)| s > 0.015 * fd.abs() + 4.0e-6 / h);
            if spread > 0.01 * fd.abs() + 5.0e-4 || split_hit {
                continue; // kink inside the interval, FD is not an oracle here
            }
            // Half the profile spread plus half the one-sided split bounds
            // the bias a residual kink can still add to the estimate, so
            // that much of any disagreement is attributable to the oracle
            // rather than the backward pass and is subtracted before the
            // comparison. The bound sits well under 1e-2 of the gradient
            // scale, so a wrong gradient, which disagrees in proportion to
            // its magnitude, still fails.
            let uncertainty = 0.5 * spread + 0.5 * splits[0].max(splits[1]);
            let excess = ((grads[idx] - fd).abs() - 2.0 * uncertainty).max(0.0);
            let rel = excess / grads[idx].abs().max(fd.abs()).max(0.05);
            kept += 1;
            worst = worst.max(rel);
        }
    }
    assert!(
        kept >= 20,
        "only {kept} of {tried} sampled coordinates were resolvable by the FD oracle"
    );
    Ok(GradCheckReport {
        name: "end_to_end_total_loss".to_string(),
        max_rel_error: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// The complete suite: every per-op check plus the end-to-end check.
pub fn full_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = op_gradient_checks(seeds);
    reports.push(end_to_end_gradient_check(7)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_gradients_match_finite_differences() {
        for r in op_gradient_checks(10) {
            assert!(r.passed(), "{}: max rel error {} >= {}", r.name, r.max_rel_error, r.tolerance);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let r = end_to_end_gradient_check(7).unwrap();
        assert!(r.passed(), "{}: max rel error {} >= {}", r.name, r.max_rel_error, r.tolerance);
    }
}
