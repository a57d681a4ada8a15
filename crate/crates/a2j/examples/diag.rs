fn main() {
    let gen = a2j::synth::GenConfig { joints: 14, crop_w: 48, crop_h: 48, ..Default::default() };
    let train_ds = a2j::synth::generate_dataset(0xA110, 4000, &gen).unwrap();
    let test_ds = a2j::synth::generate_dataset(0x7E57_0000, 500, &gen).unwrap();
    let model = a2j::model::A2JConfig {
        joints: 14, input_w: 48, input_h: 48,
        backbone_channels: vec![8, 16, 16, 16],
        regression_channels: 16, regression_layers: 1, branch_channels: 8,
        ..Default::default()
    };
    let tcfg = a2j::train::TrainConfig {
        learning_rate: 7e-4, epochs: 15, lr_decay_interval: 10,
        ..Default::default()
    };
    let mut r = a2j::train::train(&train_ds, &model, &tcfg, None).unwrap();
    for (name, ds, cap) in [("train", &train_ds, 500usize), ("test", &test_ds, 500)] {
        let sub = a2j::synth::Dataset { samples: ds.samples[..cap].to_vec(), ..ds.clone() };
        let e = a2j::train::evaluate(&sub, &mut r.store, &model, 16).unwrap();
        let (mut e3d, mut enear, mut n) = (0f64, 0f64, 0usize);
        for (p, s) in e.preds_world.iter().zip(sub.samples.iter()) {
            for (j, pj) in p.iter().enumerate() {
                let d = |g: &[f32; 3]| {
                    let (dx, dy, dz) = (pj[0]-g[0], pj[1]-g[1], pj[2]-g[2]);
                    ((dx*dx + dy*dy + dz*dz) as f64).sqrt()
                };
                e3d += d(&s.world_joints[j]);
                enear += s.world_joints.iter().map(|g| d(g)).fold(f64::MAX, f64::min);
                n += 1;
            }
        }
        println!("{name}: mean 3d {:.2} mm, nearest-any-joint {:.2} mm", e3d / n as f64, enear / n as f64);
    }
}
