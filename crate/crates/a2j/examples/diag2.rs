fn main() {
    let gen = a2j::synth::GenConfig {
        joints: 14, crop_w: 48, crop_h: 48,
        render_w: 192, render_h: 192,
        intrinsics: a2j::anchor::CameraIntrinsics { fx: 160.0, fy: 160.0, cx: 96.0, cy: 96.0 },
        max_turn_deg: 45.0, bone_radius: (8.0, 20.0),
        ..Default::default()
    };
    let train_ds = a2j::synth::generate_dataset(0xA110, 4000, &gen).unwrap();
    let test_ds = a2j::synth::generate_dataset(0x7E57_0000, 500, &gen).unwrap();
    let k = 14usize;
    // mean world pose over the train set, per joint index
    let mut mean = vec![[0f64; 3]; k];
    for s in &train_ds.samples {
        for (j, g) in s.world_joints.iter().enumerate() {
            for c in 0..3 { mean[j][c] += g[c] as f64 / train_ds.samples.len() as f64; }
        }
    }
    let (mut e, mut n) = (0f64, 0usize);
    for s in &test_ds.samples {
        for (j, g) in s.world_joints.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (mean[j][c] - g[c] as f64).powi(2)).sum();
            e += d.sqrt(); n += 1;
        }
    }
    println!("mean-pose predictor: {:.2} mm", e / n as f64);
    // per-joint spread (std of world position)
    for j in [0, 6, 13] {
        let mut var = 0f64;
        for s in &train_ds.samples {
            for c in 0..3 { var += (s.world_joints[j][c] as f64 - mean[j][c]).powi(2); }
        }
        println!("joint {j}: rms spread {:.1} mm", (var / train_ds.samples.len() as f64).sqrt());
    }
    // trained model per-joint error
    let model = a2j::model::A2JConfig {
        joints: 14, input_w: 48, input_h: 48,
        backbone_channels: vec![8, 16, 16, 16],
        regression_channels: 16, regression_layers: 1, branch_channels: 8,
        ..Default::default()
    };
    let tcfg = a2j::train::TrainConfig {
        learning_rate: 7e-4, epochs: 15, lr_decay_interval: 10, ..Default::default()
    };
    let mut r = a2j::train::train(&train_ds, &model, &tcfg, None).unwrap();
    let ev = a2j::train::evaluate(&test_ds, &mut r.store, &model, 16).unwrap();
    let mut pj = vec![0f64; k];
    for (p, s) in ev.preds_world.iter().zip(test_ds.samples.iter()) {
        for j in 0..k {
            let d: f64 = (0..3).map(|c| (p[j][c] as f64 - s.world_joints[j][c] as f64).powi(2)).sum();
            pj[j] += d.sqrt() / test_ds.samples.len() as f64;
        }
    }
    println!("model mean {:.2} mm; per joint:", ev.report.mean_3d_error_mm);
    for j in 0..k { println!("  joint {j}: {:.1} mm", pj[j]); }
}
