use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use qgrace::config::{
    parse_float_list, parse_ratio_triple, seeded_rng, KeyValues, LossKind, RngStream, TrainConfig,
};
use qgrace::data::{
    inject_noise, parse_interactions_file, read_split_manifest, split_dataset,
    write_split_manifest,
};
use qgrace::encoder::{encoder_forward, normalize_adjacency, read_checkpoint, write_checkpoint, EncoderKind};
use qgrace::eval::{
    alpha_sweep, dump_interests, evaluate, noise_sweep, write_alpha_csv, write_interests_csv,
    write_metrics_csv, write_sweep_csv,
};
use qgrace::interest::{read_gen_checkpoint, write_gen_checkpoint};
use qgrace::matcher::{normal_train, qgrace_train};
use qgrace::{Error, Result};

/// Interest-graph conversion and weighted alignment/uniformity training for
/// implicit-feedback recommendation.
#[derive(Parser)]
#[command(name = "qgrace", version, about, subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file overriding the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction log, split it, and write a split manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Interaction log: one `user item` pair per line, `#` comments.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the manifest.
        #[arg(long)]
        out: PathBuf,
        /// train,validation,test ratios.
        #[arg(long, default_value = "0.7,0.1,0.2")]
        ratios: String,
        /// Optional noise ratio injected into the train split.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a model on a prepared split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Split manifest directory from `prepare`.
        #[arg(long)]
        split: PathBuf,
        /// Training method.
        #[arg(long, value_parser = ["normal", "qgrace"])]
        method: String,
        /// Objective for normal training.
        #[arg(long, value_parser = ["wau", "bpr"])]
        loss: Option<String>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split's test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: PathBuf,
        /// Embedding checkpoint from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Method label recorded in the metrics CSV.
        #[arg(long, default_value = "model")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robustness harness: inject noise at several ratios, train both
    /// methods, and report metric drops against the clean run.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.05,0.1,0.15,0.2")]
        ratios: String,
        /// Seeds per cell (the paper-style repeat count).
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value = "0.7,0.1,0.2")]
        split_ratios: String,
    },
    /// Sensitivity harness over the uniformity weight.
    AlphaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.2,0.5,1,2,5,10")]
        alphas: String,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value = "0.7,0.1,0.2")]
        split_ratios: String,
    },
    /// Dump generated interest weights for random user/item subsets.
    DumpInterests {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Generator checkpoint from `train --method qgrace`.
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_users: usize,
        #[arg(long, default_value_t = 1000)]
        num_items: usize,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        KeyValues::load(path)?.apply(&mut cfg)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare { common, data, out, ratios, noise } => {
            let cfg = load_config(&common)?;
            let ratios = parse_ratio_triple(&ratios)?;
            let ds = parse_interactions_file(&data)?;
            println!(
                "parsed {} users, {} items, {} interactions",
                ds.num_users(),
                ds.num_items(),
                ds.edges().len()
            );
            let mut split = split_dataset(&ds, ratios, cfg.seed)?;
            if noise > 0.0 {
                split = inject_noise(&split, noise, cfg.seed)?;
                println!("injected {} noise edges", split.noise_flags.len());
            }
            let trainless = split.users_without_train().len();
            if trainless > 0 {
                eprintln!("warning: {trainless} users have no train edges and will be skipped in evaluation");
            }
            create_out_dir(&out)?;
            write_split_manifest(&out, &ds, &split)?;
            println!(
                "wrote split to {} (train {}, validation {}, test {})",
                out.display(),
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
            Ok(())
        }
        Command::Train { common, split, method, loss, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(loss) = loss {
                cfg.loss = match loss.as_str() {
                    "wau" => LossKind::Wau,
                    "bpr" => LossKind::Bpr,
                    _ => unreachable!("validated by clap"),
                };
            }
            let (_, split_data) = read_split_manifest(&split)?;
            create_out_dir(&out)?;
            let started = std::time::Instant::now();
            let log = match method.as_str() {
                "qgrace" => {
                    let outcome = qgrace_train(&cfg, &split_data)?;
                    write_checkpoint(&out.join("model.ckpt"), &outcome.state)?;
                    write_gen_checkpoint(&out.join("gen.ckpt"), &outcome.gen)?;
                    outcome.log
                }
                "normal" => {
                    let outcome = normal_train(&cfg, &split_data)?;
                    write_checkpoint(&out.join("model.ckpt"), &outcome.state)?;
                    outcome.log
                }
                _ => unreachable!("validated by clap"),
            };
            let log_file = BufWriter::new(fs::File::create(out.join("train_log.csv"))?);
            log.write_csv(log_file)?;
            if let Some(last) = log.round_means.last() {
                println!(
                    "finished {} rounds in {:.1?}: mean D {:.4}, mean loss {:.4}",
                    last.round + 1,
                    started.elapsed(),
                    last.mean_d,
                    last.mean_loss_r
                );
            }
            println!("checkpoints and train_log.csv written to {}", out.display());
            Ok(())
        }
        Command::Evaluate { common, split, model, label, out } => {
            let cfg = load_config(&common)?;
            let (_, split_data) = read_split_manifest(&split)?;
            let state = read_checkpoint(&model)?;
            let report = evaluate(&state, &split_data, &cfg.eval_ks)?;
            create_out_dir(&out)?;
            let file = BufWriter::new(fs::File::create(out.join("metrics.csv"))?);
            write_metrics_csv(file, &label, &report, cfg.seed)?;
            for (pos, &k) in report.ks.iter().enumerate() {
                println!(
                    "{label}: recall@{k} {:.4}  ndcg@{k} {:.4}  ({} users)",
                    report.recall[pos], report.ndcg[pos], report.num_users_evaluated
                );
            }
            println!("metrics.csv written to {}", out.display());
            Ok(())
        }
        Command::NoiseSweep { common, data, out, ratios, seeds, split_ratios } => {
            let cfg = load_config(&common)?;
            let ratios = parse_float_list(&ratios)?;
            let split_ratios = parse_ratio_triple(&split_ratios)?;
            let ds = parse_interactions_file(&data)?;
            let entries = noise_sweep(&ds, &cfg, split_ratios, &ratios, seeds, |msg| {
                eprintln!("noise-sweep: {msg}")
            })?;
            create_out_dir(&out)?;
            let file = BufWriter::new(fs::File::create(out.join("noise_sweep.csv"))?);
            write_sweep_csv(file, &entries)?;
            println!("noise_sweep.csv written to {} ({} rows)", out.display(), entries.len());
            Ok(())
        }
        Command::AlphaSweep { common, data, out, alphas, seeds, split_ratios } => {
            let cfg = load_config(&common)?;
            let alphas = parse_float_list(&alphas)?;
            let split_ratios = parse_ratio_triple(&split_ratios)?;
            let ds = parse_interactions_file(&data)?;
            let entries = alpha_sweep(&ds, &cfg, split_ratios, &alphas, seeds, |msg| {
                eprintln!("alpha-sweep: {msg}")
            })?;
            create_out_dir(&out)?;
            let file = BufWriter::new(fs::File::create(out.join("alpha_sweep.csv"))?);
            write_alpha_csv(file, &entries)?;
            println!("alpha_sweep.csv written to {} ({} rows)", out.display(), entries.len());
            Ok(())
        }
        Command::DumpInterests { common, split, model, gen, out, num_users, num_items } => {
            let cfg = load_config(&common)?;
            let (_, split_data) = read_split_manifest(&split)?;
            let state = read_checkpoint(&model)?;
            let gen_params = read_gen_checkpoint(&gen)?;
            let adjacency = match state.kind {
                EncoderKind::LightGcn => Some(normalize_adjacency(&split_data)),
                EncoderKind::Gmf => None,
            };
            let z = encoder_forward(&state, adjacency.as_ref())?;

            let mut rng = seeded_rng(cfg.seed, RngStream::Subset);
            let mut users: Vec<u32> = (0..split_data.num_users as u32).collect();
            users.shuffle(&mut rng);
            users.truncate(num_users.min(split_data.num_users));
            users.sort_unstable();
            let mut items: Vec<u32> = (0..split_data.num_items as u32).collect();
            items.shuffle(&mut rng);
            items.truncate(num_items.min(split_data.num_items));
            items.sort_unstable();

            let rows = dump_interests(&gen_params, &z, &users, &items)?;
            create_out_dir(&out)?;
            let file = BufWriter::new(fs::File::create(out.join("interests.csv"))?);
            write_interests_csv(file, &rows)?;
            println!(
                "interests.csv written to {} ({} users x {} items)",
                out.display(),
                users.len(),
                items.len()
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        // Bad config keys/values are usage errors; everything else is a
        // runtime failure.
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
