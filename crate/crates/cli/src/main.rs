use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use patchrot::config::{read_pairs, RunConfig};
use patchrot::datasets::{DatasetSource, LabeledDataset, Split};
use patchrot::imaging::{write_ppm, Image};
use patchrot::models::{
    gradcam, gradcam_downstream, gradcam_pair, overlay, upsample, AnyModel, Encoder, EncoderSpec,
};
use patchrot::pretext::{items_for_image, PretextBatch, Placement};
use patchrot::tensor::{read_checkpoint, write_checkpoint};
use patchrot::training::{
    evaluate, evaluate_pretext, export_embeddings, finetune, linear_eval, pretrain_ssl, EpochMetrics, Phase,
    RunMetrics,
};
use patchrot::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "patchrot", version, about = "Patch-rotation self-supervised pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write pretext samples as PPM files plus a manifest.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier head on a frozen encoder.
    LinearEval(DownstreamArgs),
    /// Train encoder and classifier head together.
    Finetune(DownstreamArgs),
    /// Accuracy of a saved model: classification accuracy for downstream
    /// checkpoints, pretext accuracy for pretext checkpoints.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Heatmap and overlay PPMs for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Index of the source image.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class whose evidence is mapped; for pretext models this also picks
        /// which transform is applied to the image.
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// CSV of `label,z0..z63` rows, one per image.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct DataArgs {
    /// `cifar:<file>`, `ppm:<dir>` or `synthetic:<n>[:<size>]`.
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Seed for synthetic datasets, independent of the training seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct DownstreamArgs {
    /// Pretrained checkpoint; a freshly initialized encoder is used if absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled training set.
    #[arg(long)]
    train: String,
    /// Labeled test set.
    #[arg(long)]
    test: String,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

/// Flags that override config-file values.
#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ratio: Option<f64>,
    /// rotnet, patch-rotnet or patch-relnet.
    #[arg(long)]
    variant: Option<String>,
    /// resnet8 or resnet32.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Also write per-epoch wall times to this CSV.
    #[arg(long)]
    timing: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, phase: Phase) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        set("seed", self.seed.map(|v| v.to_string()));
        set("ratio", self.ratio.map(|v| v.to_string()));
        set("variant", self.variant.clone());
        set("encoder", self.encoder.clone());
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("lr", self.lr.map(|v| v.to_string()));
        RunConfig::resolve(phase, &pairs)
    }
}

fn load(source: &str, split: SplitArg, seed: u64, limit: Option<usize>) -> Result<LabeledDataset> {
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = source.parse::<DatasetSource>()?.load(split, seed)?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

impl DataArgs {
    fn load(&self) -> Result<LabeledDataset> {
        load(&self.data, self.split, self.data_seed, self.limit)
    }
}

fn print_header(command: &str, cfg: &RunConfig, extra: &[(&str, String)]) {
    println!("# patchrot {command}");
    for (k, v) in extra {
        println!("# {k}: {v}");
    }
    print!("{}", cfg.to_text());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_epoch(total: usize) -> impl FnMut(&EpochMetrics) {
    move |m| {
        eprintln!(
            "epoch {}/{total}  loss {:.4}  accuracy {:.4}  ({:.1}s)",
            m.epoch + 1,
            m.loss,
            m.accuracy,
            m.seconds
        )
    }
}

fn write_metrics(out: &Path, metrics: &RunMetrics, timing: Option<&Path>) -> Result<()> {
    write_text(&out.join(format!("metrics_{}.csv", metrics.phase)), &metrics.to_csv())?;
    if let Some(t) = timing {
        write_text(t, &metrics.timing_csv())?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<AnyModel> {
    AnyModel::from_checkpoint(&read_checkpoint(path)?)
}

fn placement_fields(p: Option<Placement>) -> String {
    match p {
        Some(p) => format!("{},{},{},{}", p.top, p.left, p.height, p.width),
        None => ",,,".to_string(),
    }
}

fn generate(data: &DataArgs, out: &Path, common: &Common) -> Result<()> {
    let cfg = common.resolve(Phase::Ssl)?;
    print_header("generate", &cfg, &[("data", data.data.clone())]);
    let ds = data.load()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    create_dir(out)?;
    let mut manifest = String::from("entry,image,pair_image,label,variant,top,left,height,width\n");
    let mut entry = 0;
    for (i, img) in ds.images.iter().enumerate() {
        match items_for_image(img, i, 0, cfg.variant, &cfg.pretext)? {
            PretextBatch::Samples(samples) => {
                for s in samples {
                    let name = format!("{entry:06}.ppm");
                    write_ppm(&s.image, out.join(&name))?;
                    manifest.push_str(&format!(
                        "{entry},{name},,{},{},{}\n",
                        s.label,
                        cfg.variant,
                        placement_fields(s.placement)
                    ));
                    entry += 1;
                }
            }
            PretextBatch::Pairs(pairs) => {
                for p in pairs {
                    let (a, b) = (format!("{entry:06}a.ppm"), format!("{entry:06}b.ppm"));
                    write_ppm(&p.image_a, out.join(&a))?;
                    write_ppm(&p.image_b, out.join(&b))?;
                    manifest.push_str(&format!(
                        "{entry},{a},{b},{},{},{}\n",
                        p.label,
                        cfg.variant,
                        placement_fields(Some(p.placement))
                    ));
                    entry += 1;
                }
            }
        }
    }
    write_text(&out.join("manifest.csv"), &manifest)?;
    println!("entries={entry}");
    Ok(())
}

fn pretrain(data: &DataArgs, out: &Path, common: &Common) -> Result<()> {
    let cfg = common.resolve(Phase::Ssl)?;
    print_header("pretrain", &cfg, &[("data", data.data.clone())]);
    let ds = data.load()?;
    let channels = ds.images.first().ok_or(Error::EmptyDataset)?.channels();
    create_dir(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let result = pretrain_ssl(
        &ds.images,
        cfg.variant,
        EncoderSpec::new(cfg.encoder, channels),
        &cfg.pretext,
        &cfg.train,
        Some(out),
        log_epoch(cfg.train.epochs),
    )?;
    write_metrics(out, &result.metrics, common.timing.as_deref())?;
    if let Some(last) = result.metrics.last() {
        println!("final_loss={}", last.loss);
        println!("final_accuracy={}", last.accuracy);
    }
    println!("best_epoch={}", result.best_epoch);
    Ok(())
}

fn downstream(args: &DownstreamArgs, phase: Phase) -> Result<()> {
    let cfg = args.common.resolve(phase)?;
    let source = args
        .checkpoint
        .as_ref()
        .map_or("random init".to_string(), |p| p.display().to_string());
    print_header(
        phase.name(),
        &cfg,
        &[("encoder weights", source), ("train", args.train.clone()), ("test", args.test.clone())],
    );
    let train = load(&args.train, SplitArg::Train, args.data_seed, None)?;
    let test = load(&args.test, SplitArg::Test, args.data_seed, None)?;
    let channels = train.images.first().ok_or(Error::EmptyDataset)?.channels();
    let encoder = match &args.checkpoint {
        Some(p) => load_model(p)?.into_encoder(),
        None => Encoder::new(EncoderSpec::new(cfg.encoder, channels), cfg.seed)?,
    };
    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &cfg.to_text())?;
    let log = log_epoch(cfg.train.epochs);
    let (model, metrics) = match phase {
        Phase::Finetune => finetune(encoder, &train, &test, &cfg.train, log)?,
        _ => linear_eval(&encoder, &train, &test, &cfg.train, log)?,
    };
    write_checkpoint(&model.to_checkpoint(), args.out.join("model.ckpt"))?;
    write_metrics(&args.out, &metrics, args.common.timing.as_deref())?;
    if let Some(acc) = metrics.test_accuracy {
        println!("test_accuracy={acc}");
    }
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, data: &DataArgs, common: &Common) -> Result<()> {
    let cfg = common.resolve(Phase::Ssl)?;
    print_header(
        "evaluate",
        &cfg,
        &[("checkpoint", checkpoint.display().to_string()), ("data", data.data.clone())],
    );
    let ds = data.load()?;
    match load_model(checkpoint)? {
        AnyModel::Downstream(m) => println!("accuracy={}", evaluate(&m, &ds)?),
        AnyModel::Pretext(m) => {
            if ds.is_empty() {
                return Err(Error::EmptyTestSet);
            }
            let variant = m.kind().variant();
            let (loss, acc) = evaluate_pretext(&m, &ds.images, variant, &cfg.pretext, 0)?;
            println!("pretext_variant={variant}");
            println!("pretext_loss={loss}");
            println!("accuracy={acc}");
        }
    }
    Ok(())
}

fn gradcam_cmd(
    checkpoint: &Path,
    data: &DataArgs,
    index: usize,
    class: usize,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let cfg = common.resolve(Phase::Ssl)?;
    print_header(
        "gradcam",
        &cfg,
        &[("checkpoint", checkpoint.display().to_string()), ("data", data.data.clone())],
    );
    let ds = data.load()?;
    let source = ds.images.get(index).ok_or_else(|| {
        Error::Config(format!("image index {index} out of range for {} images", ds.len()))
    })?;
    let (input, heat): (Image, Image) = match load_model(checkpoint)? {
        AnyModel::Downstream(m) => (source.clone(), gradcam_downstream(&m, source, class)?),
        AnyModel::Pretext(m) => {
            let classes = m.kind().num_classes();
            if class >= classes {
                return Err(Error::InvalidClass { class, classes });
            }
            match items_for_image(source, index, 0, m.kind().variant(), &cfg.pretext)? {
                PretextBatch::Samples(s) => {
                    let s = &s[class];
                    if let Some(p) = s.placement {
                        println!("placement={}", placement_fields(Some(p)));
                    }
                    (s.image.clone(), gradcam(&m, &s.image, class)?)
                }
                PretextBatch::Pairs(p) => {
                    let p = &p[class];
                    println!("placement={}", placement_fields(Some(p.placement)));
                    (p.image_b.clone(), gradcam_pair(&m, &p.image_a, &p.image_b, class)?)
                }
            }
        }
    };
    create_dir(out)?;
    write_ppm(&input, out.join("input.ppm"))?;
    write_ppm(&upsample(&heat, input.height(), input.width())?, out.join("heatmap.ppm"))?;
    write_ppm(&overlay(&input, &heat)?, out.join("overlay.ppm"))?;
    Ok(())
}

fn export_cmd(checkpoint: &Path, data: &DataArgs, out: &Path, common: &Common) -> Result<()> {
    let cfg = common.resolve(Phase::Ssl)?;
    print_header(
        "export-embeddings",
        &cfg,
        &[("checkpoint", checkpoint.display().to_string()), ("data", data.data.clone())],
    );
    let ds = data.load()?;
    let model = load_model(checkpoint)?;
    export_embeddings(model.encoder(), &ds, out)?;
    println!("rows={}", ds.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { data, out, common } => generate(data, out, common),
        Command::Pretrain { data, out, common } => pretrain(data, out, common),
        Command::LinearEval(args) => downstream(args, Phase::LinearEval),
        Command::Finetune(args) => downstream(args, Phase::Finetune),
        Command::Evaluate {
            checkpoint,
            data,
            common,
        } => evaluate_cmd(checkpoint, data, common),
        Command::Gradcam {
            checkpoint,
            data,
            index,
            class,
            out,
            common,
        } => gradcam_cmd(checkpoint, data, *index, *class, out, common),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            common,
        } => export_cmd(checkpoint, data, out, common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error ({}): {e}", class.name());
            ExitCode::from(match class {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
