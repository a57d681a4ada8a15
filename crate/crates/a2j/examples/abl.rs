use a2j::model::{A2JConfig, AblationFlags};
use a2j::synth::GenConfig;
use a2j::train::TrainConfig;

fn gen_cfg() -> GenConfig {
    GenConfig {
        joints: 14, crop_w: 48, crop_h: 48,
        crop_extent_mm: 320.0,
        bone_length: (20.0, 40.0), bone_radius: (6.0, 14.0),
        mu: 0.1,
        ..Default::default()
    }
}

fn model_cfg() -> A2JConfig {
    A2JConfig {
        joints: 14, input_w: 48, input_h: 48,
        backbone_channels: vec![8, 16, 16, 16],
        regression_channels: 16, regression_layers: 1, branch_channels: 8,
        input_depth_scale: 10.0,
        ..Default::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args[1].parse().unwrap();
    let seeds: u64 = args[2].parse().unwrap();
    let gen = gen_cfg();
    let test_gen = GenConfig { max_turn_deg: 70.0, ..gen.clone() };
    let test_ds = a2j::synth::generate_dataset(0x7E57_0000, 500, &test_gen).unwrap();
    for seed in 0..seeds {
        let train_ds = a2j::synth::generate_dataset(0xA110 + seed, 4000, &gen).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 3e-3, epochs, lr_decay_interval: 10, seed,
            ..Default::default()
        };
        for variant in ["full", "no-surround", "no-proposal", "global-reg"] {
            let mut m = model_cfg();
            let mut t = tcfg.clone();
            match variant {
                "no-surround" => t.loss.surrounding_loss_enabled = false,
                "no-proposal" => m.ablation = AblationFlags { no_proposal_branch: true, ..Default::default() },
                "global-reg" => m.ablation = AblationFlags { global_regression_baseline: true, ..Default::default() },
                _ => {}
            }
            let t0 = std::time::Instant::now();
            let mut r = a2j::train::train(&train_ds, &m, &t, None).unwrap();
            let e = a2j::train::evaluate(&test_ds, &mut r.store, &m, 16).unwrap();
            println!("seed {seed} {variant}: {:.2} mm, map {:.3}, {:.0}s",
                e.report.mean_3d_error_mm, e.report.map_mean, t0.elapsed().as_secs_f64());
        }
    }
}
