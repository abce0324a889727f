use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fossilnet::arch::{Arch, ArchScale, NetDescriptor};
use fossilnet::data::{
    generate_shapes, load_manifest, rebalance, split_counts, stratified_split, Partition,
    SplitAssignment,
};
use fossilnet::eval::{
    read_features_csv, tsne_embed, write_confusion_csv, write_embedding_csv, write_feature_maps,
    write_features_csv, write_metrics_csv, TsneConfig,
};
use fossilnet::optim::{analytic_gradients, check_against, GradCheckOptions};
use fossilnet::precision::{self, Precision, PRECISION_ENV};
use fossilnet::rng::{seeded_random, Distribution, SeededRng};
use fossilnet::train::{
    checkpoint_features, evaluate_checkpoint, predict_topk, run_experiment_suite, run_training,
    ExperimentConfig,
};
use fossilnet::transfer::load_checkpoint;
use fossilnet::Result;

#[derive(Parser)]
#[command(
    name = "fossilnet",
    version,
    about = "Train and evaluate fossil image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a stratified train/validation/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep at most this many records per class before splitting.
        #[arg(long)]
        rebalance_cap: Option<usize>,
    },
    /// Run one experiment from a JSON config.
    Train {
        config: PathBuf,
        /// Overrides the environment; fp32 when neither is set.
        #[arg(long)]
        precision: Option<String>,
    },
    /// Score a checkpoint on one partition and write metrics and confusion matrices.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: Partition,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Rank the trained classes for each image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, default_value_t = 3)]
        k: usize,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Export pooled activations of a node for one partition as CSV.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: Partition,
        /// Defaults to the architecture's feature node.
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Write one PGM per channel of a node's activation on a single image.
    FeatureMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        node: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a feature CSV in 2-D with t-SNE.
    Tsne {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest whose class names label the output.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run a JSON list of experiment configs and tabulate the results.
    Suite {
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        precision: Option<String>,
    },
    /// Compare backpropagated and finite-difference gradients of a small build.
    Gradcheck {
        #[arg(long)]
        arch: Arch,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0.0625)]
        width: f64,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Elements checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_param: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic four-class shapes dataset.
    Shapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Training defaults to single precision unless the environment or a flag
/// says otherwise.
fn training_precision(flag: Option<&str>) -> Result<()> {
    let chosen = match flag {
        Some(s) => Some(
            Precision::parse(s)
                .ok_or_else(|| fossilnet::Error::Argument(format!("unknown precision `{s}`")))?,
        ),
        None if std::env::var_os(PRECISION_ENV).is_none() => Some(Precision::Fp32),
        None => None,
    };
    if let Some(p) = chosen {
        precision::set(p);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split {
            manifest,
            out,
            seed,
            rebalance_cap,
        } => {
            let mut m = load_manifest(&manifest)?;
            if let Some(cap) = rebalance_cap {
                m = rebalance(&m, cap, seed)?;
            }
            let split = stratified_split(&m, seed)?;
            split.write_csv(&m, &out)?;
            println!("class\ttrain\tvalidation\ttest\ttotal");
            let mut totals = [0; 3];
            for (name, c) in m.classes.iter().zip(split.class_counts(&m)) {
                println!(
                    "{name}\t{}\t{}\t{}\t{}",
                    c[0],
                    c[1],
                    c[2],
                    c.iter().sum::<usize>()
                );
                for k in 0..3 {
                    totals[k] += c[k];
                }
            }
            println!(
                "total\t{}\t{}\t{}\t{}",
                totals[0],
                totals[1],
                totals[2],
                totals.iter().sum::<usize>()
            );
        }
        Command::Train { config, precision } => {
            training_precision(precision.as_deref())?;
            let cfg = ExperimentConfig::load(&config)?;
            let r = run_training(&cfg)?;
            let s = r.summary;
            println!("epochs run: {} (best {})", r.curves.len(), r.best_epoch);
            println!(
                "max train acc: {:.4}  min train loss: {:.4}",
                s.max_train_acc, s.min_train_loss
            );
            println!(
                "max val acc: {:.4}  min val loss: {:.4}",
                s.max_val_acc, s.min_val_loss
            );
            println!(
                "max test top-1: {}  top-3: {}",
                fmt_opt(s.max_top1_test),
                fmt_opt(s.max_top3_test)
            );
            println!("best checkpoint: {}", r.best_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            partition,
            out,
            batch_size,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let m = load_manifest(&manifest)?;
            let s = SplitAssignment::read_csv(&m, &split)?;
            let e = evaluate_checkpoint(&ckpt, &m, &s, partition, batch_size)?;
            std::fs::create_dir_all(&out).map_err(|err| fossilnet::Error::Io {
                path: out.clone(),
                source: err,
            })?;
            let p = partition.as_str();
            write_confusion_csv(
                &e.confusion,
                out.join(format!("{p}_confusion.csv")),
                out.join(format!("{p}_confusion_normalized.csv")),
            )?;
            write_metrics_csv(&e.report, out.join(format!("{p}_metrics.csv")))?;
            println!("loss: {:.4}", e.loss);
            println!("accuracy: {:.4}", e.report.accuracy);
            println!(
                "top-1: {}  top-3: {}",
                fmt_opt(e.report.top1),
                fmt_opt(e.report.top3)
            );
            if let Some(r) = e.report.macro_recall {
                println!("recall (population std): {}", r.display());
            }
        }
        Command::Predict {
            checkpoint,
            k,
            images,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            for p in predict_topk(&ckpt, &images, k)? {
                match p.outcome {
                    Ok(ranked) => {
                        let cells: Vec<String> = ranked
                            .iter()
                            .map(|(c, prob)| format!("{c}:{prob:.4}"))
                            .collect();
                        println!("{}\t{}", p.path.display(), cells.join("\t"));
                    }
                    Err(e) => println!("{}\terror: {e}", p.path.display()),
                }
            }
        }
        Command::Features {
            checkpoint,
            manifest,
            split,
            partition,
            node,
            out,
            batch_size,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let m = load_manifest(&manifest)?;
            let s = SplitAssignment::read_csv(&m, &split)?;
            let (features, labels) =
                checkpoint_features(&ckpt, &m, &s, partition, node.as_deref(), batch_size)?;
            write_features_csv(&features, &labels, &out)?;
            println!(
                "{} x {} features written",
                features.shape()[0],
                features.shape()[1]
            );
        }
        Command::FeatureMaps {
            checkpoint,
            image,
            node,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let net = ckpt.build_network()?;
            let img = fossilnet::data::read_image(&image)?;
            let side = net.input_shape()[1];
            let x = fossilnet::augment::resize_bilinear(
                &fossilnet::augment::grayscale_to_rgb(&img)?,
                side,
                side,
            )?;
            let act = net.node_output(&x.reshape(&[1, 3, side, side])?, &node)?;
            let shape = act.shape()[1..].to_vec();
            let paths = write_feature_maps(&act.reshape(&shape)?, &out, &node.replace('.', "_"))?;
            println!("{} maps written to {}", paths.len(), out.display());
        }
        Command::Tsne {
            features,
            out,
            perplexity,
            iterations,
            seed,
            manifest,
        } => {
            let (x, labels) = read_features_csv(&features)?;
            let cfg = TsneConfig {
                perplexity,
                iterations,
                seed,
                exaggeration_iters: TsneConfig::default().exaggeration_iters.min(iterations),
                ..TsneConfig::default()
            };
            let emb = tsne_embed(&x, &labels, &cfg)?;
            let names = manifest.map(load_manifest).transpose()?.map(|m| m.classes);
            write_embedding_csv(&emb, names.as_deref(), &out)?;
            println!(
                "KL after exaggeration: {:.4}  final KL: {:.4}",
                emb.kl_after_exaggeration, emb.final_kl
            );
        }
        Command::Suite {
            configs,
            out,
            precision,
        } => {
            training_precision(precision.as_deref())?;
            let list = ExperimentConfig::load_list(&configs)?;
            let rows = run_experiment_suite(&list, &out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} runs, {failed} failed; results in {}",
                rows.len(),
                out.display()
            );
        }
        Command::Gradcheck {
            arch,
            side,
            width,
            blocks,
            classes,
            batch,
            per_param,
            seed,
        } => {
            precision::set(Precision::Fp64);
            let scale = ArchScale::new(side, width, blocks)?;
            let mut rng = SeededRng::new(seed);
            let net = NetDescriptor::new(arch, scale, classes).build(&mut rng)?;
            let x = seeded_random(
                &mut rng,
                &[batch, 3, side, side],
                Distribution::Normal {
                    mean: 0.0,
                    std: 1.0,
                },
            )?;
            let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
            let opts = GradCheckOptions {
                max_per_param: Some(per_param),
                seed,
                ..GradCheckOptions::default()
            };
            let (_, analytic) = analytic_gradients(&net, &x, &labels, opts.seed)?;
            let r = check_against(&net, &x, &labels, &analytic, opts)?;
            println!("max relative error: {:.3e}", r.max_rel_error);
            println!("worst element: {}[{}]", r.param, r.index);
            println!(
                "checked {} elements, skipped {} at kinks",
                r.checked, r.skipped
            );
        }
        Command::Shapes {
            out,
            per_class,
            side,
            seed,
        } => {
            let m = generate_shapes(&out, per_class, side, seed)?;
            let (train, val, test) = split_counts(per_class);
            println!(
                "{} images in {} classes (per class split {train}/{val}/{test})",
                m.len(),
                m.classes.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
