use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use capsnet_core::augment::{augment_to_writer, augmented_count, AugmentConfig};
use capsnet_core::checkpoint::{Checkpoint, Precision};
use capsnet_core::dataset::{
    class_name, list_images, load_binary, load_image, load_image_directory, read_header, save_binary, save_png,
    synthesize_toy_dataset, DirectoryOptions, IMAGE_SIZE,
};
use capsnet_core::evaluation::evaluate;
use capsnet_core::gradcheck::{run_suite, GradCheckConfig};
use capsnet_core::optim::OptimizerKind;
use capsnet_core::training::{MetricsWriter, TrainConfig, TrainEvent, Trainer};
use capsnet_core::{CapsNetConfig, InitScheme, LossConfig, Network, ReconSign, Split, Tensor};

use crate::args::*;

/// Failure that should exit with the runtime code but a specific kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

/// Uses the given seed or draws one and reports it so the run can be replayed.
fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed={s}");
        s
    })
}

fn write_manifest(out: &Path, json: &str) -> Result<PathBuf> {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    let path = PathBuf::from(name);
    fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn convert(a: &ConvertArgs) -> Result<()> {
    let opts = DirectoryOptions {
        split: split_of(a.split),
        channels: a.channels,
        resize: a.resize == ResizeArg::Bilinear,
    };
    let data = load_image_directory(&a.input, &opts)?;
    save_binary(&data, &a.out)?;
    let json = data.manifest(&a.input).to_json();
    let manifest = write_manifest(&a.out, &json)?;
    println!("count={} split={} manifest={}", data.len(), data.split(), manifest.display());
    Ok(())
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let cfg = AugmentConfig {
        brightness_range: (a.brightness_min, a.brightness_max),
        contrast_range: (a.contrast_min, a.contrast_max),
        rotation_deg: a.rotation,
        shear: a.shear,
        width_shift_frac: a.width_shift,
        height_shift_frac: a.height_shift,
        horizontal_flip: !a.no_flip,
        replication_factor: a.factor,
        seed: 0,
    };
    cfg.validate()?;
    if a.count_only {
        let header = read_header(&mut BufReader::new(File::open(&a.input)?))?;
        println!("count={}", augmented_count(header.count, &cfg));
        return Ok(());
    }
    let cfg = AugmentConfig {
        seed: seed_or_entropy(a.seed),
        ..cfg
    };
    let out = a.out.as_ref().expect("clap requires --out");
    let data = load_binary(&a.input)?;
    let (count, _) = augment_to_writer(&data, &cfg, BufWriter::new(File::create(out)?))?;
    let written = load_binary(out)?;
    let json = written.manifest(&a.input).to_json();
    let manifest = write_manifest(out, &json)?;
    println!("count={count} manifest={}", manifest.display());
    Ok(())
}

fn loss_config(a: &TrainArgs) -> LossConfig {
    LossConfig {
        m_plus: a.m_plus,
        m_minus: a.m_minus,
        lambda_margin: a.lambda_margin,
        lambda_recon: a.lambda_recon,
        recon_sign: match a.recon_sign {
            ReconSignArg::Add => ReconSign::Add,
            ReconSignArg::Subtract => ReconSign::Subtract,
        },
    }
}

fn fresh_network(a: &ArchArgs, channels: usize, routing_iters: usize, seed: u64) -> Result<Network> {
    let config = CapsNetConfig {
        input_height: IMAGE_SIZE,
        input_width: IMAGE_SIZE,
        channels,
        conv1_kernel: a.conv1_kernel,
        conv1_filters: a.conv1_filters,
        conv2_kernel: a.conv2_kernel,
        conv2_filters: a.conv2_filters,
        conv2_stride: a.conv2_stride,
        primary_dim: a.primary_dim,
        num_classes: a.num_classes,
        class_dim: a.class_dim,
        routing_iters,
        dropout_rate: a.dropout,
    };
    let init = InitScheme::Default {
        transform_std: a.transform_std,
    };
    Ok(Network::new(config, a.hidden_widths(), init, seed)?)
}

/// Drops metrics lines written after `step`, so a resumed run appends to
/// exactly the prefix it is continuing.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let file = File::open(path).with_context(|| format!("opening metrics {}", path.display()))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line_step = if let Some(rest) = line.strip_prefix("# epoch=") {
            rest.split_whitespace()
                .find_map(|kv| kv.strip_prefix("steps="))
                .and_then(|v| v.parse::<u64>().ok())
        } else {
            line.split(',').next().and_then(|v| v.parse::<u64>().ok())
        };
        match line_step {
            Some(s) if s > step => break,
            _ => kept.push(line),
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = load_binary(&a.data)?;
    if data.split() != Split::Train {
        bail!(Failure {
            kind: "dataset",
            message: format!("{} is a {} split; training needs a train split", a.data.display(), data.split()),
        });
    }
    let resumed = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let seed = match (&resumed, a.seed) {
        (_, Some(s)) => s,
        (Some(Checkpoint { train: Some(t), .. }), None) => t.seed,
        _ => seed_or_entropy(None),
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        routing_iters: Some(a.routing_iters),
        seed,
        loss: loss_config(a),
        checkpoint_every: a.checkpoint_every,
        clip_norm: a.clip_norm,
        max_steps: a.max_steps,
        augment: a.augment_factor.map(|f| AugmentConfig {
            replication_factor: f,
            seed,
            ..AugmentConfig::default()
        }),
    };
    let precision = match a.precision {
        PrecisionArg::F64 => Precision::F64,
        PrecisionArg::F32 => Precision::F32,
    };
    fs::create_dir_all(&a.checkpoint_dir)
        .with_context(|| format!("creating {}", a.checkpoint_dir.display()))?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| a.checkpoint_dir.join("metrics.csv"));

    let (mut trainer, mut metrics) = match resumed {
        Some(ckpt) => {
            let record = ckpt.train.context("checkpoint carries no training state; it cannot be resumed")?;
            let optimizer = ckpt.optimizer.context("checkpoint carries no optimizer state")?;
            if record.batch_size != cfg.batch_size {
                bail!(Failure {
                    kind: "config",
                    message: format!(
                        "checkpoint was trained with batch size {}, run asks for {}",
                        record.batch_size, cfg.batch_size
                    ),
                });
            }
            let step = record.state.step;
            let trainer = Trainer::resume(ckpt.network, optimizer, record.state, cfg)?;
            let metrics = if metrics_path.exists() {
                truncate_metrics(&metrics_path, step)?;
                MetricsWriter::append(BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?))
            } else {
                MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?
            };
            eprintln!("resuming at step {step}");
            (trainer, metrics)
        }
        None => {
            let network = fresh_network(&a.arch, data.channels(), a.routing_iters, seed)?;
            let metrics = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?;
            (Trainer::new(network, cfg)?, metrics)
        }
    };

    let dir = a.checkpoint_dir.clone();
    let run = trainer.run(&data, |event| {
        match event {
            TrainEvent::Step(m) => metrics.step(m)?,
            TrainEvent::Epoch(e) => {
                metrics.epoch(e)?;
                eprintln!(
                    "epoch {} step {} train_accuracy {:.4} ({:.1}s)",
                    e.epoch, e.steps, e.train_accuracy, e.wall_seconds
                );
            }
            TrainEvent::Checkpoint(t) => {
                let path = dir.join(format!("step-{:08}.ckpt", t.state.step));
                Checkpoint::from_trainer(t).save(&path, precision)?;
            }
        }
        Ok(())
    });
    metrics.into_inner().flush()?;
    let history = run?;
    let final_path = a.checkpoint_dir.join("final.ckpt");
    Checkpoint::from_trainer(&trainer).save(&final_path, precision)?;
    if let Some(last) = history.steps.last() {
        println!(
            "steps={} final_loss={} margin_loss={} recon_loss={}",
            last.step, last.final_loss, last.margin_loss, last.recon_loss
        );
    }
    println!("checkpoint={}", final_path.display());
    println!("metrics={}", metrics_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_binary(&a.data)?;
    if data.split() != Split::Test {
        eprintln!("warning: evaluating on a {} split", data.split());
    }
    let report = evaluate(&ckpt.network, &data, a.batch_size)?;
    if let Some(out) = &a.out {
        fs::write(out, report.render_text()).with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(path) = &a.confusion {
        fs::write(path, report.confusion_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "images={} correct={} misclassifications={} accuracy={} ccr={:.2}",
        report.total, report.correct, report.misclassifications, report.accuracy, report.ccr_percent
    );
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = &ckpt.network;
    let channels = net.config().channels;
    let (files, show_file) = match (&a.image, &a.dir) {
        (Some(img), _) => (vec![img.clone()], false),
        (None, Some(dir)) => (list_images(dir)?, true),
        (None, None) => unreachable!("clap enforces one source"),
    };
    if files.is_empty() {
        bail!(Failure {
            kind: "dataset",
            message: "no .ppm or .png images to classify".into(),
        });
    }
    if let Some(dir) = &a.reconstruct {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for path in files {
        let pixels = load_image(&path, channels, a.resize == ResizeArg::Bilinear)?;
        let x = Tensor::new(
            &[1, IMAGE_SIZE, IMAGE_SIZE, channels],
            pixels.iter().map(|&v| f64::from(v)).collect(),
        )?;
        let fwd = net.infer(&x)?;
        let k = fwd.predictions_argmax()[0];
        let length = fwd.lengths.data()[k];
        let prefix = if show_file { format!("file={} ", path.display()) } else { String::new() };
        println!("{prefix}class={k} name={} length={length}", class_name(k));
        if let Some(dir) = &a.reconstruct {
            let recon = net.reconstruct(&fwd)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let out = dir.join(format!("{stem}.recon.png"));
            let img: Vec<f32> = recon.data().iter().map(|&v| v as f32).collect();
            save_png(&out, &img, channels)?;
        }
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        seed: seed_or_entropy(a.seed),
        ..GradCheckConfig::default()
    };
    let suite = run_suite(a.full, &cfg)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for entry in &suite {
        for b in &entry.result.blocks {
            println!(
                "{} {} checked={} skipped={} max_rel={:e} max_abs={:e} worst={} {}",
                entry.name,
                b.name,
                b.checked,
                b.skipped,
                b.max_rel_error,
                b.max_abs_error,
                b.worst_index,
                if b.passed { "PASS" } else { "FAIL" }
            );
            worst = worst.max(b.max_rel_error);
            if !b.passed {
                failed.push(format!("{}/{}", entry.name, b.name));
            }
        }
    }
    println!("max_rel={worst:e} tolerance={:e}", cfg.tolerance);
    if !failed.is_empty() {
        bail!(Failure {
            kind: "gradcheck",
            message: format!("{} block(s) failed: {}", failed.len(), failed.join(", ")),
        });
    }
    println!("gradcheck: pass");
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let seed = seed_or_entropy(a.seed);
    let data = synthesize_toy_dataset(a.classes, a.per_class, seed)?.with_split(split_of(a.split));
    save_binary(&data, &a.out)?;
    let json = data.manifest(format!("synth:classes={},per_class={},seed={seed}", a.classes, a.per_class)).to_json();
    let manifest = write_manifest(&a.out, &json)?;
    println!("count={} split={} manifest={}", data.len(), data.split(), manifest.display());
    Ok(())
}
