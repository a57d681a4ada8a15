use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let size: usize = args[3].parse().unwrap();
    let widths: Vec<usize> = args[4].split(',').map(|s| s.parse().unwrap()).collect();
    let render: usize = args[5].parse().unwrap();
    let fx: f32 = args[6].parse().unwrap();
    let crop_mm: f32 = args[7].parse().unwrap();
    let turn: f32 = args[8].parse().unwrap();
    let rmin: f32 = args[9].parse().unwrap();
    let rmax: f32 = args[10].parse().unwrap();
    let mu: f32 = args[11].parse().unwrap();
    let dscale: f32 = args[12].parse().unwrap();
    let batch: usize = args.get(13).map(|v| v.parse().unwrap()).unwrap_or(16);
    let blmin: f32 = args.get(14).map(|v| v.parse().unwrap()).unwrap_or(30.0);
    let blmax: f32 = args.get(15).map(|v| v.parse().unwrap()).unwrap_or(60.0);
    let gen = a2j::synth::GenConfig {
        joints: 14, crop_w: size, crop_h: size,
        render_w: render, render_h: render,
        intrinsics: a2j::anchor::CameraIntrinsics {
            fx, fy: fx, cx: render as f32 / 2.0, cy: render as f32 / 2.0,
        },
        crop_extent_mm: crop_mm,
        max_turn_deg: turn,
        bone_radius: (rmin, rmax),
        bone_length: (blmin, blmax),
        mu,
        ..Default::default()
    };
    let t0 = Instant::now();
    let train_ds = a2j::synth::generate_dataset(0xA110, 4000, &gen).unwrap();
    let test_ds = a2j::synth::generate_dataset(0x7E57_0000, 500, &gen).unwrap();
    // clipping check: fraction of gt joints outside the crop
    let mut clipped = 0usize;
    let mut total = 0usize;
    for s in train_ds.samples.iter() {
        for p in &s.gt.positions {
            total += 1;
            if p[0] < 0.0 || p[1] < 0.0 || p[0] > size as f32 - 1.0 || p[1] > size as f32 - 1.0 {
                clipped += 1;
            }
        }
    }
    println!("  gen {:.1}s, clipped {:.3}%", t0.elapsed().as_secs_f64(), 100.0 * clipped as f64 / total as f64);
    let model = a2j::model::A2JConfig {
        joints: 14, input_w: size, input_h: size,
        backbone_channels: widths.clone(),
        regression_channels: 16, regression_layers: 1, branch_channels: 8,
        input_depth_scale: dscale,
        ..Default::default()
    };
    let tcfg = a2j::train::TrainConfig {
        learning_rate: lr, epochs, lr_decay_interval: 10, batch_size: batch,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut r = a2j::train::train(&train_ds, &model, &tcfg, None).unwrap();
    let e = a2j::train::evaluate(&test_ds, &mut r.store, &model, 16).unwrap();
    let (mut exy, mut ez, mut n) = (0f64, 0f64, 0usize);
    for (p, s) in e.preds_world.iter().zip(test_ds.samples.iter()) {
        for (pj, gj) in p.iter().zip(s.world_joints.iter()) {
            let dx = (pj[0] - gj[0]) as f64;
            let dy = (pj[1] - gj[1]) as f64;
            let dz = (pj[2] - gj[2]) as f64;
            exy += (dx * dx + dy * dy).sqrt();
            ez += dz.abs();
            n += 1;
        }
    }
    println!("lr={lr} ep={epochs} size={size} w={widths:?} render={render} fx={fx} crop_mm={crop_mm} turn={turn} r=({rmin},{rmax}) mu={mu} ds={dscale} b={batch} bl=({blmin},{blmax}): mean {:.2} mm (xy {:.2}, |z| {:.2}), map {:.3}, {:.1}s",
        e.report.mean_3d_error_mm, exy / n as f64, ez / n as f64, e.report.map_mean, t0.elapsed().as_secs_f64());
}
