use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fixmatchseg::augment::{apply_strong, apply_weak, sample_geom_params, sample_photo_params};
use fixmatchseg::data::io::{read_image, write_image, write_mask};
use fixmatchseg::data::{list_stems, load_dataset, semi_supervised_pools, write_corpus, DatasetSpec, Pools, SplitPlan};
use fixmatchseg::export::predict_export;
use fixmatchseg::rng::{self, tag};
use fixmatchseg::sweep::{run_sweep, SweepSpec};
use fixmatchseg::trainer::{self, FitOptions, TrainData, TrainMode, LAST_CHECKPOINT};
use fixmatchseg::{evaluate, fit, Checkpoint, LabeledSample, TrainConfig, UnlabeledSample};

#[derive(Parser)]
#[command(version, about = "Semi-supervised segmentation with confidence-gated pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes corpus in the dataset layout.
    Synth(SynthArgs),
    /// Train a supervised baseline or FixMatchSeg.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Write predicted masks for a directory of images.
    Predict(PredictArgs),
    /// Run a labeled-count / mu / tau sweep.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 96)]
    hw: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Exact train,val,test sizes; default is a 60/20/20 split.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 320x320, the reference configuration.
    Reference,
    /// 96x96 with a small network, sized for a CPU.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML training config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    /// Unlabeled images per labeled image in a batch.
    #[arg(long)]
    mu: Option<usize>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of the unsupervised loss.
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl ConfigArgs {
    /// Config with overrides applied. Without a config file the class count
    /// follows the dataset.
    fn resolve(&self, dataset: Option<&DatasetSpec>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => {
                let mut c = match self.preset {
                    Preset::Reference => TrainConfig::default(),
                    Preset::Desk => TrainConfig::desk(),
                };
                if let Some(d) = dataset {
                    c.num_classes = d.num_classes;
                }
                c
            }
        };
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.lambda_u {
            cfg.lambda_u = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        Ok(cfg.validated()?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Receives the config snapshot, history, checkpoints and test report.
    #[arg(long)]
    run_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Fixmatchseg)]
    mode: ModeArg,
    /// Keep this many train images labeled; the whole train split becomes
    /// the unlabeled pool. Default: every train image stays labeled.
    #[arg(long)]
    labeled_count: Option<usize>,
    /// Continue from `<run-dir>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Write this many (original, weak, strong) triplets to `<run-dir>/aug`
    /// before training.
    #[arg(long, default_value_t = 0)]
    dump_aug: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Fixmatchseg,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::Fixmatchseg => TrainMode::FixMatchSeg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Report path; default `report_<split>.json` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the latest instead of the best-validation parameters.
    #[arg(long)]
    last: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input images.
    #[arg(long)]
    images: PathBuf,
    /// Receives one `<stem>.png` class-index mask per image.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "png")]
    extension: String,
    #[arg(long)]
    last: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML with labeled_counts, mus, taus, seeds.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let samples = fixmatchseg::data::make_synthetic_corpus(a.n, (a.hw, a.hw), a.classes, a.seed, a.noise)?;
    let split = match a.counts.as_deref() {
        Some(&[train, val, test]) => SplitPlan::Counts { train, val, test },
        Some(other) => bail!("--counts takes train,val,test; got {} values", other.len()),
        None => SplitPlan::default(),
    };
    write_corpus(&a.out, &samples, a.classes, split)?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn open_dataset(root: &Path, cfg_args: &ConfigArgs) -> anyhow::Result<(TrainConfig, Pools)> {
    let mut spec = DatasetSpec::open(root, 0)?;
    let cfg = if spec.num_classes == 0 {
        if cfg_args.config.is_none() {
            bail!("{} has no dataset.toml; add one or pass --config", root.display());
        }
        let cfg = cfg_args.resolve(None)?;
        spec.num_classes = cfg.num_classes;
        cfg
    } else {
        cfg_args.resolve(Some(&spec))?
    };
    let pools = load_dataset(&spec, &cfg)?;
    info!(
        "dataset {}: {} train, {} val, {} test, {} extra unlabeled",
        root.display(),
        pools.train.len(),
        pools.val.len(),
        pools.test.len(),
        pools.unlabeled.len()
    );
    Ok((cfg, pools))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (cfg, pools) = open_dataset(&a.data, &a.cfg)?;
    let mode = TrainMode::from(a.mode);
    let (labeled, unlabeled) = match a.labeled_count {
        Some(n) => semi_supervised_pools(&pools.train, n, &pools.unlabeled, cfg.seed),
        None => (pools.train.clone(), pools.unlabeled.clone()),
    };
    if labeled.is_empty() {
        bail!("no labeled training images");
    }
    std::fs::create_dir_all(&a.run_dir)?;
    if a.dump_aug > 0 {
        dump_augmentations(&labeled[..a.dump_aug.min(labeled.len())], &cfg, &a.run_dir.join("aug"))?;
    }
    let resume = if a.resume {
        Some(Checkpoint::load(&a.run_dir.join(LAST_CHECKPOINT))?)
    } else {
        None
    };
    let model = trainer::init_model(&cfg, labeled[0].image.channels())?;
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &pools.val,
    };
    let opts = FitOptions {
        run_dir: Some(a.run_dir.clone()),
        resume,
        ..Default::default()
    };
    let result = fit(model, &data, &cfg, mode, opts)?;
    info!(
        "stopped after {} epochs ({:?}); best epoch {:?}",
        result.history.len(),
        result.stop_reason,
        result.best_epoch()
    );
    if !pools.test.is_empty() {
        let report = evaluate(&result.best_model()?, &pools.test, &cfg)?;
        let path = a.run_dir.join("report_test.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        info!("test mean Dice {:.4}, report in {}", report.mean_dice, path.display());
    }
    Ok(())
}

/// Original, weak and strong views with the weak mask, as PNGs.
fn dump_augmentations(samples: &[LabeledSample], cfg: &TrainConfig, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let geom = sample_geom_params(cfg, &mut rng::stream(cfg.seed, &[tag::WEAK_AUG, 0, 0, i as u64]));
        let (weak, weak_mask) = apply_weak(&s.image, Some(&s.mask), &geom)?;
        let photo = sample_photo_params(cfg, &mut rng::stream(cfg.seed, &[tag::STRONG_AUG, 0, 0, i as u64]));
        let strong = apply_strong(&weak, &photo);
        write_image(&dir.join(format!("{}_original.png", s.id)), &s.image)?;
        write_image(&dir.join(format!("{}_weak.png", s.id)), &weak)?;
        write_image(&dir.join(format!("{}_strong.png", s.id)), &strong)?;
        write_mask(&dir.join(format!("{}_weak_mask.png", s.id)), &weak_mask.expect("mask was given"))?;
    }
    info!("wrote {} augmentation triplets to {}", samples.len(), dir.display());
    Ok(())
}

fn load_model(path: &Path, last: bool) -> anyhow::Result<(Checkpoint, fixmatchseg::Model)> {
    let ck = Checkpoint::load(path)?;
    let model = if last { ck.model()? } else { ck.best_model()? };
    Ok((ck, model))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (ck, model) = load_model(&a.checkpoint, a.last)?;
    let cfg = ck.config().clone();
    let spec = DatasetSpec::open(&a.data, cfg.num_classes)?;
    let pools = load_dataset(&spec, &cfg)?;
    let (name, set) = match a.split {
        SplitArg::Train => ("train", &pools.train),
        SplitArg::Val => ("val", &pools.val),
        SplitArg::Test => ("test", &pools.test),
    };
    let report = evaluate(&model, set, &cfg)?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{name}.json"))
    });
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    let bg = if report.mean_includes_background { "including" } else { "excluding" };
    println!("{name}: {} images, mean Dice {:.4} ({bg} background)", report.num_images, report.mean_dice);
    for (c, d) in report.per_class_dice.iter().enumerate() {
        println!("  class {c}: {d:.4}");
    }
    println!("  loss: {:.4}", report.loss);
    Ok(())
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let (_, model) = load_model(&a.checkpoint, a.last)?;
    let spec = model.spec().clone();
    let images = list_stems(&a.images, &a.extension)?
        .into_iter()
        .map(|id| {
            let path = a.images.join(format!("{id}.{}", a.extension));
            let image = read_image(&path, spec.input_channels, Some(spec.input_hw))?;
            Ok(UnlabeledSample { id, image })
        })
        .collect::<fixmatchseg::Result<Vec<_>>>()?;
    if images.is_empty() {
        bail!("no .{} images in {}", a.extension, a.images.display());
    }
    let written = predict_export(&model, &images, &a.out)?;
    info!("wrote {} masks to {}", written.len(), a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let spec = SweepSpec::load(&a.spec)?;
    let (cfg, pools) = open_dataset(&a.data, &a.cfg)?;
    let table = run_sweep(&spec, &cfg, &pools, Some(&a.run_dir));
    table.save(&a.run_dir)?;
    print!("{}", table.to_text());
    Ok(())
}
