use a2j::model::{anchor_weights, extract_sample, forward};
fn main() {
    let gen = a2j::synth::GenConfig {
        joints: 14, crop_w: 48, crop_h: 48,
        max_turn_deg: 45.0, mu: 0.1,
        ..Default::default()
    };
    let train_ds = a2j::synth::generate_dataset(0xA110, 4000, &gen).unwrap();
    let test_ds = a2j::synth::generate_dataset(0x7E57_0000, 100, &gen).unwrap();
    let model = a2j::model::A2JConfig {
        joints: 14, input_w: 48, input_h: 48,
        backbone_channels: vec![8, 16, 16, 16],
        regression_channels: 16, regression_layers: 1, branch_channels: 8,
        input_depth_scale: 10.0,
        ..Default::default()
    };
    let tcfg = a2j::train::TrainConfig {
        learning_rate: 3e-3, epochs: 15, lr_decay_interval: 10,
        ..Default::default()
    };
    let mut r = a2j::train::train(&train_ds, &model, &tcfg, None).unwrap();
    let grid = model.grid().unwrap();
    // weight concentration and offset magnitudes on 20 test samples
    let (mut maxw, mut top8, mut off_informative, mut n) = (0f64, 0f64, 0f64, 0usize);
    for s in test_ds.samples.iter().take(20) {
        let mut g = a2j::autodiff::Graph::new();
        let input = a2j::train::batch_input(&[s], &model);
        let fwd = forward(&mut g, &mut r.store, input, &model, &grid, false).unwrap();
        let out = extract_sample(&g, &fwd.out, 0);
        for j in 0..14 {
            let mut w = anchor_weights(&out, j).unwrap();
            w.sort_by(|a, b| b.total_cmp(a));
            maxw += w[0] as f64;
            top8 += w.iter().take(8).map(|v| *v as f64).sum::<f64>();
            // offset magnitude at the heaviest anchor
            let wfull = anchor_weights(&out, j).unwrap();
            let best = (0..wfull.len()).max_by(|a, b| wfull[*a].total_cmp(&wfull[*b])).unwrap();
            let o = &out.offsets.data()[(best * 14 + j) * 2..(best * 14 + j) * 2 + 2];
            off_informative += ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt();
            n += 1;
        }
    }
    println!("mean max weight {:.4} (uniform = {:.4}), top-8 mass {:.3}, |offset| at best anchor {:.2} px",
        maxw / n as f64, 1.0 / grid.num_anchors() as f64, top8 / n as f64, off_informative / n as f64);
}
