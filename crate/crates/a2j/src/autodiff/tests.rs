use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

// ── convolution ─────────────────────────────────────────────────────

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::new(vec![1, 1, 4, 5], rand_vec(&mut rng, 20, -2.0, 2.0));
    let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
    let mut g = Graph::new();
    let i = g.constant(input.clone());
    let k = g.constant(kernel);
    let y = g.conv2d(i, k, None, ConvSpec::new(1, 0, 1));
    assert_eq!(g.value(y).shape(), input.shape());
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv_ones_kernel_sums_window() {
    let input = Tensor::full(vec![1, 1, 4, 4], 1.0);
    let kernel = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let mut g = Graph::new();
    let i = g.constant(input);
    let k = g.constant(kernel);
    let y = g.conv2d(i, k, None, ConvSpec::new(1, 0, 1));
    assert_eq!(g.value(y).shape(), [1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), [9.0, 9.0, 9.0, 9.0]);
}

#[test]
fn conv_dilation_two_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Tensor::new(vec![1, 1, 8, 8], rand_vec(&mut rng, 64, -1.0, 1.0));
    let kernel = Tensor::new(vec![1, 1, 3, 3], rand_vec(&mut rng, 9, -1.0, 1.0));
    let spec = ConvSpec::new(1, 2, 2);
    let oracle = conv2d_reference(&input, &kernel, spec).unwrap();
    let mut g = Graph::new();
    let i = g.constant(input);
    let k = g.constant(kernel);
    let y = g.conv2d(i, k, None, spec);
    assert_eq!(g.value(y).shape(), oracle.shape());
    assert_close(g.value(y).data(), oracle.data(), 1e-5);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let input = Tensor::zeros(vec![1, 2, 4, 4]);
    let kernel = Tensor::zeros(vec![1, 3, 3, 3]);
    let err = conv2d_reference(&input, &kernel, ConvSpec::new(1, 1, 1)).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn conv_rejects_non_positive_output() {
    let err = conv_out_dims((2, 2), (5, 5), ConvSpec::new(1, 0, 1)).unwrap_err();
    assert!(err.to_string().contains("non-positive"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn conv_fast_path_matches_oracle(
        seed in 0u64..1000,
        n in 1usize..3,
        cin in 1usize..3,
        cout in 1usize..3,
        h in 5usize..9,
        w in 5usize..9,
        stride in 1usize..3,
        padding in 0usize..3,
        dilation in 1usize..3,
    ) {
        let spec = ConvSpec::new(stride, padding, dilation);
        prop_assume!(conv_out_dims((h, w), (3, 3), spec).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::new(vec![n, cin, h, w], rand_vec(&mut rng, n * cin * h * w, -1.0, 1.0));
        let kernel = Tensor::new(vec![cout, cin, 3, 3], rand_vec(&mut rng, cout * cin * 9, -1.0, 1.0));
        let oracle = conv2d_reference(&input, &kernel, spec).unwrap();
        let mut g = Graph::new();
        let i = g.constant(input);
        let k = g.constant(kernel);
        let y = g.conv2d(i, k, None, spec);
        prop_assert_eq!(g.value(y).shape(), oracle.shape());
        for (a, b) in g.value(y).data().iter().zip(oracle.data()) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![5], 0.3));
    let y = g.softmax(x, 0);
    assert_close(g.value(y).data(), &[0.2; 5], 1e-6);
}

#[test]
fn softmax_analytic_two_entry() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 2.0f32.ln()]));
    let y = g.softmax(x, 0);
    assert_close(g.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-6);
}

#[test]
fn softmax_large_logits_no_overflow() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]));
    let y = g.softmax(x, 0);
    let out = g.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-6 && out[1] < 1e-6);
    g.finite_ok().unwrap();
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_permutation_equivariant(
        xs in proptest::collection::vec(-20.0f32..20.0, 2..12),
        seed in 0u64..1000,
    ) {
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n], xs.clone()));
        let y = g.softmax(x, 0);
        let out = g.value(y).data().to_vec();
        let sum: f32 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);

        // permute input, softmax, un-permute == original softmax
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f32> = perm.iter().map(|&i| xs[i]).collect();
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::new(vec![n], permuted));
        let y2 = g2.softmax(x2, 0);
        let out2 = g2.value(y2).data();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((out2[j] - out[i]).abs() <= 1e-6);
        }
    }
}

// ── backward basics ─────────────────────────────────────────────────

#[test]
fn backward_of_square_is_two_x() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), [6.0]);
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_rejects_consumed_graph() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.0), true);
    let y = g.mul(x, x);
    g.backward(y).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn gradients_are_linear_in_the_objective() {
    // f = a·g + h on a shared parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = Tensor::new(vec![4], rand_vec(&mut rng, 4, -1.0, 1.0));
    let c1 = Tensor::new(vec![4], rand_vec(&mut rng, 4, -1.0, 1.0));
    let c2 = Tensor::new(vec![4], rand_vec(&mut rng, 4, -1.0, 1.0));
    let a = 2.5f32;

    let grad_of = |mode: u8| -> Vec<f32> {
        let mut g = Graph::new();
        let t = g.leaf(theta.clone(), true);
        let k1 = g.constant(c1.clone());
        let k2 = g.constant(c2.clone());
        let p1 = g.mul(t, k1); // g(θ)
        let sg = g.reduce_sum(p1, 0);
        let p2 = g.mul(t, k2); // h(θ)
        let sh = g.reduce_sum(p2, 0);
        let out = match mode {
            0 => sg,
            1 => sh,
            _ => {
                let scaled = g.mul_scalar(sg, a);
                g.add(scaled, sh)
            }
        };
        g.backward(out).unwrap();
        g.grad(t).unwrap().to_vec()
    };

    let gg = grad_of(0);
    let gh = grad_of(1);
    let gf = grad_of(2);
    let combined: Vec<f32> = gg.iter().zip(&gh).map(|(x, y)| a * x + y).collect();
    assert_close(&gf, &combined, 1e-6);
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), [0.0, 2.0]);
}

#[test]
fn reduce_sum_backward_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let y = g.reduce_sum(x, 0);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), [1.0; 6]);
}

#[test]
fn gradient_fan_out_accumulates() {
    // y = sum(x) + sum(x) → grad 2 everywhere
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, -1.0, 0.5]), true);
    let s1 = g.reduce_sum(x, 0);
    let s2 = g.reduce_sum(x, 0);
    let y = g.add(s1, s2);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), [2.0; 3]);
}

// ── channel norm ────────────────────────────────────────────────────

#[test]
fn channel_norm_batch_statistics_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, c, h, w) = (3, 4, 5, 5);
    let input = Tensor::new(vec![n, c, h, w], rand_vec(&mut rng, n * c * h * w, -3.0, 3.0));
    let mut g = Graph::new();
    let x = g.constant(input);
    let gain = g.constant(Tensor::full(vec![c], 1.0));
    let bias = g.constant(Tensor::zeros(vec![c]));
    let mut rm = vec![0.0; c];
    let mut rv = vec![1.0; c];
    let y = g.channel_norm(x, gain, bias, &mut rm, &mut rv, 0.1, 1e-5, true);
    let out = g.value(y).data();
    let m = (n * h * w) as f64;
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for &v in &out[base..base + h * w] {
                sum += v as f64;
                sumsq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / m;
        let var = sumsq / m - mean * mean;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
    }
}

#[test]
fn channel_norm_running_stats_update_with_momentum() {
    let (n, c, h, w) = (2, 1, 2, 2);
    // channel values: batch mean 1.0, population variance 0.25 exactly
    let input = Tensor::new(vec![n, c, h, w], vec![0.5, 0.5, 1.5, 1.5, 0.5, 0.5, 1.5, 1.5]);
    let mut g = Graph::new();
    let x = g.constant(input);
    let gain = g.constant(Tensor::full(vec![c], 1.0));
    let bias = g.constant(Tensor::zeros(vec![c]));
    let mut rm = vec![0.0; c];
    let mut rv = vec![1.0; c];
    g.channel_norm(x, gain, bias, &mut rm, &mut rv, 0.1, 1e-5, true);
    assert!((rm[0] - 0.1).abs() < 1e-6, "running mean {}", rm[0]);
    assert!((rv[0] - (0.9 + 0.1 * 0.25)).abs() < 1e-6, "running var {}", rv[0]);
}

#[test]
fn channel_norm_batch_of_one_uses_running_stats() {
    let input = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]);
    let mut g = Graph::new();
    let x = g.constant(input);
    let gain = g.constant(Tensor::full(vec![1], 1.0));
    let bias = g.constant(Tensor::zeros(vec![1]));
    let mut rm = vec![1.0];
    let mut rv = vec![4.0];
    let y = g.channel_norm(x, gain, bias, &mut rm, &mut rv, 0.1, 0.0, true);
    // (x − 1)/2 with the stored statistics, which must not change
    assert_close(g.value(y).data(), &[1.0, 2.0], 1e-6);
    assert_eq!(rm, vec![1.0]);
    assert_eq!(rv, vec![4.0]);
}

// ── nonfinite tracking and determinism ──────────────────────────────

#[test]
fn nonfinite_values_flag_the_graph() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![1.0, f32::NAN]));
    assert!(g.finite_ok().is_err());
    let _ = x;
}

#[test]
fn forward_is_deterministic() {
    let run = || -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::new(vec![1, 2, 6, 6], rand_vec(&mut rng, 72, -1.0, 1.0));
        let kernel = Tensor::new(vec![3, 2, 3, 3], rand_vec(&mut rng, 54, -1.0, 1.0));
        let mut g = Graph::new();
        let i = g.constant(input);
        let k = g.constant(kernel);
        let y = g.conv2d(i, k, None, ConvSpec::new(1, 1, 1));
        let s = g.softmax(y, 1);
        g.value(s).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "identical runs must be bitwise identical");
}

// ── select / expand bookkeeping ─────────────────────────────────────

#[test]
fn select_gathers_per_batch_slice() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let table = Arc::new(vec![2u32, 0, 2]);
    let y = g.select(x, table, vec![3]);
    assert_eq!(g.value(y).data(), [3.0, 1.0, 3.0, 6.0, 4.0, 6.0]);
}

#[test]
fn expand_last_repeats_elements() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
    let y = g.expand_last(x, 3);
    assert_eq!(g.value(y).shape(), [2, 3]);
    assert_eq!(g.value(y).data(), [1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
}

// ── checkpoint format ───────────────────────────────────────────────

fn sample_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("conv.weight", Param::new(vec![2, 3, 3, 3], rand_vec(&mut rng, 54, -1.0, 1.0)));
    store.insert("norm.gain", Param::new(vec![2], rand_vec(&mut rng, 2, 0.5, 1.5)).no_decay());
    store.insert("norm.rmean", Param::new(vec![2], rand_vec(&mut rng, 2, -1.0, 1.0)).frozen());
    store
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let store = sample_store(21);
    store.save(dir.path()).unwrap();
    let loaded = ParamStore::load(dir.path()).unwrap();
    let names: Vec<_> = store.names().collect();
    let loaded_names: Vec<_> = loaded.names().collect();
    assert_eq!(names, loaded_names);
    for name in names {
        let (a, b) = (store.get(name), loaded.get(name));
        assert_eq!(a.shape, b.shape);
        let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{name} not bit-exact");
    }
}

#[test]
fn truncated_blob_is_a_corruption_error() {
    let dir = tempfile::tempdir().unwrap();
    sample_store(22).save(dir.path()).unwrap();
    let blob = std::fs::read(dir.path().join("params.bin")).unwrap();
    std::fs::write(dir.path().join("params.bin"), &blob[..blob.len() - 8]).unwrap();
    let err = ParamStore::load(dir.path()).unwrap_err();
    assert!(matches!(err, crate::A2jError::Corrupt(_)), "{err}");
}

#[test]
fn bad_manifest_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    sample_store(23).save(dir.path()).unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "something-else v9 1\n").unwrap();
    let err = ParamStore::load(dir.path()).unwrap_err();
    assert!(matches!(err, crate::A2jError::Corrupt(_)), "{err}");
}

#[test]
fn load_values_rejects_mismatched_names() {
    let dir = tempfile::tempdir().unwrap();
    sample_store(24).save(dir.path()).unwrap();
    let mut other = ParamStore::new();
    other.insert("different", Param::new(vec![1], vec![0.0]));
    let err = other.load_values(dir.path()).unwrap_err();
    assert!(matches!(err, crate::A2jError::Corrupt(_)), "{err}");
}
