//! Command-line front end: data generation, training, evaluation,
//! inference, anchor inspection, gradient checking and the ablation grid.
//! Every run writes a reproducibility record (config, seeds, version) into
//! its output directory.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data or IO error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use a2j::diagnostics;
use a2j::error::{A2jError, Result};
use a2j::model::{
    aggregate, anchor_weights, extract_sample, forward, informative_anchors, init_params,
    A2JConfig, INFORMATIVE_THRESHOLD,
};
use a2j::synth::{generate_dataset, generate_sample, read_dataset, write_dataset, Dataset};
use a2j::train::{batch_input, evaluate, train, TrainConfig};

#[derive(Parser)]
#[command(name = "a2j", version, about = "Anchor-to-joint pose estimation on depth images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Write per-frame crop-space and world-space poses.
    Infer(EvalArgs),
    /// Dump anchor positions, weights and informative sets for one sample.
    InspectAnchors(InspectArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Train the full model and its ablations, and tabulate test metrics.
    Ablate(AblateArgs),
}

/// Optional TOML file with `[model]`, `[train]` and `[gen]` sections; every
/// field has a default, so partial files work.
#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: A2JConfig,
    train: TrainConfig,
    gen: a2j::synth::GenConfig,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoProposal,
    NoSurround,
    MergedBranch,
    GlobalReg,
}

impl Ablation {
    fn apply(self, model: &mut A2JConfig, train_cfg: &mut TrainConfig) {
        match self {
            Ablation::NoProposal => model.ablation.no_proposal_branch = true,
            Ablation::NoSurround => train_cfg.loss.surrounding_loss_enabled = false,
            Ablation::MergedBranch => model.ablation.merged_offset_depth_branch = true,
            Ablation::GlobalReg => model.ablation.global_regression_baseline = true,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; the dataset is a pure function of (seed, config).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the training seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory (manifest.txt + params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset to take the input frame from; generates a synthetic frame
    /// from --seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frame index within --data.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint to load; a fresh zero-head initialization when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Informative-anchor weight threshold.
    #[arg(long, default_value_t = INFORMATIVE_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed count for the per-op checks.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training-set size per run.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Test-set size per run (disjoint geometry seeds).
    #[arg(long, default_value_t = 200)]
    test_samples: usize,
    /// Number of seeds per configuration.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(argv: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("info"),
    )
    .try_init();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                A2jError::Config(_) => 1,
                A2jError::Numerical(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => do_train(a, argv),
        Command::Eval(a) => do_eval(a, argv, false),
        Command::Infer(a) => do_eval(a, argv, true),
        Command::InspectAnchors(a) => inspect_anchors(a, argv),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate(a, argv),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| A2jError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Config + seeds + version + argv, so any run can be reproduced from its
/// output directory alone.
fn write_run_record(out: &Path, argv: &[String], cfg: &FileConfig, extra: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rec = String::new();
    let _ = writeln!(rec, "a2j {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(rec, "argv: {}", argv.join(" "));
    if !extra.is_empty() {
        let _ = writeln!(rec, "{extra}");
    }
    let _ = writeln!(rec);
    let toml = toml::to_string_pretty(cfg)
        .map_err(|e| A2jError::Config(format!("config serialization failed: {e}")))?;
    rec.push_str(&toml);
    fs::write(out.join("run_record.txt"), rec)?;
    Ok(())
}

/// The model's input geometry and joint count must follow the dataset.
fn adapt_model(model: &mut A2JConfig, ds: &Dataset) {
    if (model.input_w, model.input_h, model.joints)
        != (ds.meta.crop_w, ds.meta.crop_h, ds.meta.joints)
    {
        log::info!(
            "adapting model to dataset: {}x{} K={}",
            ds.meta.crop_w,
            ds.meta.crop_h,
            ds.meta.joints
        );
        model.input_w = ds.meta.crop_w;
        model.input_h = ds.meta.crop_h;
        model.joints = ds.meta.joints;
    }
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ds = generate_dataset(a.seed, a.samples, &cfg.gen)?;
    write_dataset(&ds, &a.out)?;
    write_run_record(&a.out, argv, &cfg, &format!("seed: {}\nsamples: {}", a.seed, a.samples))?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn do_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let ds = read_dataset(&a.data)?;
    adapt_model(&mut cfg.model, &ds);
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(ab) = a.ablation {
        ab.apply(&mut cfg.model, &mut cfg.train);
    }
    write_run_record(&a.out, argv, &cfg, &format!("train seed: {}", cfg.train.seed))?;
    let result = train(&ds, &cfg.model, &cfg.train, Some(&a.out))?;
    let last = result.loss_log.last().map(|r| r.loss).unwrap_or(f32::NAN);
    log::info!("finished {} steps, final loss {last}", result.loss_log.len());
    Ok(())
}

fn do_eval(a: EvalArgs, argv: &[String], infer: bool) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let ds = read_dataset(&a.data)?;
    adapt_model(&mut cfg.model, &ds);
    if let Some(ab) = a.ablation {
        ab.apply(&mut cfg.model, &mut cfg.train);
    }
    let mut store = init_params(&cfg.model, 0)?;
    store.load_values(&a.checkpoint)?;
    let out = evaluate(&ds, &mut store, &cfg.model, cfg.train.batch_size)?;
    write_run_record(&a.out, argv, &cfg, "")?;
    if infer {
        let mut csv = String::from(
            "frame,joint,crop_u,crop_v,depth_t,world_x_mm,world_y_mm,world_z_mm\n",
        );
        for (f, (px, world)) in out.preds_px.iter().zip(&out.preds_world).enumerate() {
            for (j, (p, w)) in px.iter().zip(world).enumerate() {
                let d = out.preds_depth_t[f][j];
                let _ = writeln!(csv, "{f},{j},{},{},{d},{},{},{}", p[0], p[1], w[0], w[1], w[2]);
            }
        }
        fs::write(a.out.join("poses.csv"), csv)?;
        log::info!("wrote poses for {} frames", out.preds_px.len());
    } else {
        fs::write(a.out.join("metrics.csv"), out.report.to_csv())?;
        log::info!(
            "mean 3D error {:.2} mm, mAP@10cm {:.3}",
            out.report.mean_3d_error_mm,
            out.report.map_mean
        );
    }
    Ok(())
}

fn inspect_anchors(a: InspectArgs, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if !(0.0 < a.threshold && a.threshold < 1.0) {
        return Err(A2jError::Config("--threshold must be in (0,1)".into()));
    }
    let sample = match &a.data {
        Some(dir) => {
            let ds = read_dataset(dir)?;
            adapt_model(&mut cfg.model, &ds);
            ds.samples
                .get(a.index)
                .cloned()
                .ok_or_else(|| {
                    A2jError::Config(format!("--index {} out of range ({} frames)", a.index, ds.len()))
                })?
        }
        None => {
            cfg.gen.crop_w = cfg.model.input_w;
            cfg.gen.crop_h = cfg.model.input_h;
            cfg.gen.joints = cfg.model.joints;
            generate_sample(a.seed, &cfg.gen)?
        }
    };
    if let Some(ab) = a.ablation {
        ab.apply(&mut cfg.model, &mut cfg.train);
    }
    let mut store = init_params(&cfg.model, a.seed)?;
    if let Some(ckpt) = &a.checkpoint {
        store.load_values(ckpt)?;
    }
    let grid = cfg.model.grid()?;
    let images = batch_input(&[&sample], &cfg.model);
    let mut graph = a2j::autodiff::Graph::new();
    let fwd = forward(&mut graph, &mut store, images, &cfg.model, &grid, false)?;
    let out = extract_sample(&graph, &fwd.out, 0);
    let (uv, _) = aggregate(&out, &grid);

    write_run_record(&a.out, argv, &cfg, &format!("seed: {}\nthreshold: {}", a.seed, a.threshold))?;
    let mut csv =
        String::from("joint,anchor,u,v,weight,offset_u,offset_v,depth_t,informative\n");
    let k = cfg.model.joints;
    let off = out.offsets.data();
    let dep = out.depths.data();
    for j in 0..k {
        let weights = anchor_weights(&out, j)?;
        let info = informative_anchors(&out, j, a.threshold)?;
        for (i, pos) in grid.positions.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{j},{i},{},{},{},{},{},{},{}",
                pos[0],
                pos[1],
                weights[i],
                off[(i * k + j) * 2],
                off[(i * k + j) * 2 + 1],
                dep[i * k + j],
                info.binary_search(&i).is_ok() as u8
            );
        }
        log::info!("joint {j}: {} informative anchors", info.len());
    }
    fs::write(a.out.join("anchors.csv"), csv)?;
    fs::write(a.out.join("anchors.svg"), anchors_svg(&cfg.model, &grid, &out, &uv, a.threshold)?)?;
    Ok(())
}

/// Scatter plot: one panel per joint, anchors as circles with area scaled
/// by weight, informative anchors and the joint estimate highlighted.
fn anchors_svg(
    cfg: &A2JConfig,
    grid: &a2j::anchor::AnchorGrid,
    out: &a2j::model::NetworkOutput,
    estimates: &[[f32; 2]],
    threshold: f32,
) -> Result<String> {
    let k = cfg.joints;
    let cols = (k as f32).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (pw, ph) = (cfg.input_w + 20, cfg.input_h + 20);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        cols * pw,
        rows * ph
    );
    for j in 0..k {
        let weights = anchor_weights(out, j)?;
        let (ox, oy) = ((j % cols) * pw + 10, (j / cols) * ph + 10);
        let _ = writeln!(
            svg,
            "  <g transform=\"translate({ox},{oy})\"><rect width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            cfg.input_w, cfg.input_h
        );
        for (i, pos) in grid.positions.iter().enumerate() {
            let informative = weights[i] > threshold;
            let r = (weights[i].sqrt() * 12.0).max(0.4);
            let color = if informative { "#d62728" } else { "#1f77b4" };
            let _ = writeln!(
                svg,
                "    <circle cx=\"{}\" cy=\"{}\" r=\"{r:.2}\" fill=\"{color}\" fill-opacity=\"0.6\"/>",
                pos[0], pos[1]
            );
        }
        let e = estimates[j];
        let _ = writeln!(
            svg,
            "    <path d=\"M {} {} l 4 4 m -8 0 l 8 -8 m -8 8 l 8 0\" stroke=\"#2ca02c\" fill=\"none\"/></g>",
            e[0] - 4.0,
            e[1] - 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let reports = diagnostics::full_suite(a.seeds)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{}: max rel error {:.3e} (tolerance {:.0e}) {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(A2jError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn ablate(a: AblateArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(&a.config)?;
    fs::create_dir_all(&a.out)?;
    write_run_record(&a.out, argv, &cfg, &format!("seeds: {}", a.seeds))?;
    let variants: [(Option<Ablation>, &str); 5] = [
        (None, "full"),
        (Some(Ablation::NoSurround), "no-surround"),
        (Some(Ablation::NoProposal), "no-proposal"),
        (Some(Ablation::MergedBranch), "merged-branch"),
        (Some(Ablation::GlobalReg), "global-reg"),
    ];
    let mut csv = String::from("variant,seed,mean_3d_error_mm,map_10cm\n");
    println!("{:<14} {:>5} {:>16} {:>9}", "variant", "seed", "mean_3d_err_mm", "map_10cm");
    for seed in 0..a.seeds {
        // disjoint geometry: train and test use unrelated master seeds
        let train_ds = generate_dataset(0xA110 + seed, a.samples, &cfg.gen)?;
        let test_ds = generate_dataset(0x7E57_0000 + seed, a.test_samples, &cfg.gen)?;
        for (ablation, name) in variants {
            let mut model = cfg.model.clone();
            let mut tcfg = cfg.train.clone();
            adapt_model(&mut model, &train_ds);
            tcfg.seed = seed;
            if let Some(ab) = ablation {
                ab.apply(&mut model, &mut tcfg);
            }
            let mut result = train(&train_ds, &model, &tcfg, None)?;
            let eval = evaluate(&test_ds, &mut result.store, &model, tcfg.batch_size)?;
            let _ = writeln!(
                csv,
                "{name},{seed},{},{}",
                eval.report.mean_3d_error_mm, eval.report.map_mean
            );
            println!(
                "{name:<14} {seed:>5} {:>16.2} {:>9.3}",
                eval.report.mean_3d_error_mm, eval.report.map_mean
            );
        }
    }
    fs::write(a.out.join("summary.csv"), csv)?;
    Ok(())
}
