use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use agsfcos_core::config::{ModelConfig, PrecisionCfg, RegLossKind};
use agsfcos_core::data::{generate_synthetic, load_coco_annotations, write_coco_results, SynthSpec};
use agsfcos_core::eval::EvalSummary;
use agsfcos_core::gradcheck::gradcheck_params;
use agsfcos_core::model::Model;
use agsfcos_core::sepc::mac_count;
use agsfcos_core::tensor::Tensor;
use agsfcos_core::train::{configure_threads, train, TrainSession};
use agsfcos_core::ParamStore;

#[derive(Parser)]
#[command(name = "agsfcos", about = "Anchor-free shape detector", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Model/run configuration JSON; defaults are used when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Checkpoint directory to load or resume from.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory containing annotations.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write COCO-style results.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Report multiply-accumulate counts of the pyramid head.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a deterministic synthetic shape dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train the four model variants and tabulate their scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ModelConfig> {
    let cfg = match &common.config {
        Some(p) => ModelConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ModelConfig::default(),
    };
    Ok(cfg)
}

fn print_summary(s: &EvalSummary) {
    println!("AP      {:.4}", s.ap);
    println!("AP50    {:.4}", s.ap50);
    println!("AP75    {:.4}", s.ap75);
    println!("AP_s    {:.4}", s.ap_small);
    println!("AP_m    {:.4}", s.ap_medium);
    println!("AP_l    {:.4}", s.ap_large);
    println!("AR100   {:.4}", s.ar100);
}

fn run_train(common: &Common, data: &PathBuf) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dataset = load_coco_annotations(&data.join("annotations.json"))?;
    if dataset.num_classes() != cfg.num_classes {
        bail!(
            "dataset has {} classes, config expects {}",
            dataset.num_classes(),
            cfg.num_classes
        );
    }
    let mut session = match &common.checkpoint {
        Some(ck) => TrainSession::resume(&cfg, ck)?,
        None => TrainSession::new(&cfg, common.seed)?,
    };
    let report = train(&mut session, &dataset, &common.out)?;
    println!(
        "trained {} steps, final loss {:.4}, AP50 {:.4}",
        report.steps, report.final_loss, report.final_ap50
    );
    Ok(())
}

fn run_eval(common: &Common, data: &PathBuf) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let ck = common
        .checkpoint
        .as_ref()
        .context("eval requires --checkpoint")?;
    let dataset = load_coco_annotations(&data.join("annotations.json"))?;
    let model = Model::new(&cfg)?;
    let store = ParamStore::load(&ck.join("params"))?;
    model.init_params(0)?.check_compatible(&store)?;
    let images = model.collect_eval_images(&store, &dataset)?;
    let summary = agsfcos_core::eval::evaluate(&images, cfg.num_classes)?;
    print_summary(&summary);
    std::fs::create_dir_all(&common.out)?;
    let per_image: Vec<_> = images.iter().map(|i| (i.id, i.dets.clone())).collect();
    write_coco_results(&common.out.join("results.json"), &per_image, &dataset.categories)?;
    println!("results written to {}", common.out.join("results.json").display());
    Ok(())
}

fn run_gradcheck(common: &Common) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if cfg.precision == PrecisionCfg::F32 {
        eprintln!("warning: finite differences are unreliable in f32; skipping");
        return Ok(());
    }
    // shrink to a size where perturbing every parameter is fast
    cfg.image_size = 32;
    cfg.stem_width = 2;
    cfg.backbone_widths = [2, 4, 4];
    cfg.blocks_per_stage = 1;
    cfg.gc_ratio = 2;
    cfg.fpn_width = 2;
    cfg.head_depth = 1;
    let model = Model::new(&cfg)?;
    let store = model.init_params(common.seed)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(common.seed ^ 0xABCD);
    let img = Tensor::new(
        vec![1, 3, 32, 32],
        (0..3 * 32 * 32)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect(),
    )?;
    let err = gradcheck_params(
        |t, s| {
            let x = t.leaf(img.clone(), false);
            let out = model.forward(t, s, x)?;
            let mut total = t.scalar(0.0);
            for l in 0..3 {
                let c = t.sigmoid(out.cls_logits[l])?;
                let sc = t.sum(c)?;
                let sd = t.sum(out.distances[l])?;
                total = t.add(total, sc)?;
                total = t.add(total, sd)?;
            }
            Ok(total)
        },
        &store,
        1e-5,
    )?;
    println!("max relative gradient error: {:.3e}", err);
    if err > 1e-5 {
        bail!("gradient check failed: {} > 1e-5", err);
    }
    println!("gradient check passed");
    Ok(())
}

fn run_flops(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let base = cfg.image_size / cfg.strides[0];
    let r = mac_count(base, base, 3, cfg.fpn_width, 3)?;
    println!("pyramid conv MACs:   {}", r.pconv_macs);
    println!("ordinary conv MACs:  {}", r.ordinary_macs);
    println!("ratio:               {:.4}", r.ratio);
    Ok(())
}

fn run_synth(common: &Common, count: usize) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let spec = SynthSpec {
        num_images: count,
        image_size: cfg.image_size,
        seed: common.seed,
        max_shapes: 3,
    };
    let idx = generate_synthetic(&spec, &common.out)?;
    let boxes: usize = idx.records.iter().map(|r| r.boxes.len()).sum();
    println!(
        "wrote {} images, {} boxes to {}",
        idx.records.len(),
        boxes,
        common.out.display()
    );
    Ok(())
}

fn run_ablate(common: &Common, data: &PathBuf) -> anyhow::Result<()> {
    let base = load_config(common)?;
    let dataset = load_coco_annotations(&data.join("annotations.json"))?;
    let variants: [(&str, Box<dyn Fn(&mut ModelConfig)>); 4] = [
        ("baseline (giou; plain tower)", Box::new(|c: &mut ModelConfig| {
            c.reg_loss = RegLossKind::Giou;
            c.gc_enabled = false;
            c.use_sepc = false;
        })),
        ("+ciou", Box::new(|c: &mut ModelConfig| {
            c.reg_loss = RegLossKind::Ciou;
            c.gc_enabled = false;
            c.use_sepc = false;
        })),
        ("+ciou +gc", Box::new(|c: &mut ModelConfig| {
            c.reg_loss = RegLossKind::Ciou;
            c.gc_enabled = true;
            c.use_sepc = false;
        })),
        ("+ciou +gc +sepc", Box::new(|c: &mut ModelConfig| {
            c.reg_loss = RegLossKind::Ciou;
            c.gc_enabled = true;
            c.use_sepc = true;
        })),
    ];
    std::fs::create_dir_all(&common.out)?;
    let mut rows = Vec::new();
    for (i, (name, tweak)) in variants.iter().enumerate() {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let mut session = TrainSession::new(&cfg, common.seed)?;
        let out = common.out.join(format!("variant{}", i));
        let report = train(&mut session, &dataset, &out)?;
        let s = session.model.evaluate_dataset(&session.store, &dataset)?;
        println!("{}: AP50 {:.4}", name, s.ap50);
        rows.push((name.to_string(), report.final_loss, s));
    }
    let mut md = String::from("| variant | final loss | AP | AP50 | AP75 |\n|---|---|---|---|---|\n");
    let mut csv = String::from("variant,final_loss,ap,ap50,ap75\n");
    for (name, loss, s) in &rows {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            name, loss, s.ap, s.ap50, s.ap75
        ));
        csv.push_str(&format!("{},{},{},{},{}\n", name, loss, s.ap, s.ap50, s.ap75));
    }
    std::fs::write(common.out.join("ablation.md"), &md)?;
    std::fs::write(common.out.join("ablation.csv"), &csv)?;
    print!("{}", md);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let threads = std::env::var("AGSFCOS_THREADS").ok();
    configure_threads(threads.as_deref())?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { common, data } => run_train(common, data),
        Command::Eval { common, data } => run_eval(common, data),
        Command::Gradcheck { common } => run_gradcheck(common),
        Command::Flops { common } => run_flops(common),
        Command::Synth { common, count } => run_synth(common, *count),
        Command::Ablate { common, data } => run_ablate(common, data),
    }
}
