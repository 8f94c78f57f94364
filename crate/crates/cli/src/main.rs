use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use team_detr::decoder::{decode, load_checkpoint};
use team_detr::harness::metrics::evaluate;
use team_detr::harness::train::{build_team, init_params, prepare_for, train_on, TRAIN_SPLIT, VAL_SPLIT};
use team_detr::harness::{ablate, generate_dataset, read_dataset, write_dataset, RunConfig};
use team_detr::{build_attention_mask, build_partition, team_match_with_groups};

#[derive(Parser)]
#[command(name = "team-detr", version, about = "Query-teamwork detection decoder on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write `train.jsonl` and `val.jsonl` into the output directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration. Without `--dataset` the scenes are generated from the seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding `train.jsonl` and `val.jsonl`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write `eval.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the five-setting ablation over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Match a model's final predictions against every scene of a dataset file
    /// and print one JSON result per line.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Untrained parameters from the seed are used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_nonempty(path: &Path) -> Result<Vec<team_detr::harness::Scene>> {
    let scenes = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if scenes.is_empty() {
        bail!("{} holds no scenes", path.display());
    }
    Ok(scenes)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&out)?;
            let tr = generate_dataset(&cfg.scene, cfg.seed, TRAIN_SPLIT, cfg.train_scenes)?;
            let va = generate_dataset(&cfg.scene, cfg.seed, VAL_SPLIT, cfg.val_scenes)?;
            write_dataset(&out.join("train.jsonl"), &tr)?;
            write_dataset(&out.join("val.jsonl"), &va)?;
            println!("wrote {} train and {} val scenes to {}", tr.len(), va.len(), out.display());
        }
        Command::Train { common, out, dataset } => {
            let cfg = load_config(&common)?;
            let (tr, va) = match dataset {
                Some(d) => (read_dataset(&d.join("train.jsonl"))?, read_nonempty(&d.join("val.jsonl"))?),
                None => team_detr::harness::train::generate_run_data(&cfg)?,
            };
            let report = train_on(&cfg, &tr, &va, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report.final_metrics)?);
        }
        Command::Eval { common, checkpoint, dataset, out } => {
            let cfg = load_config(&common)?;
            let (params, team) = load_checkpoint(&checkpoint)?;
            let scenes = prepare_for(&cfg, &read_nonempty(&dataset)?)?;
            let mask = build_attention_mask(team.group_sizes())?;
            let buckets = build_partition(&cfg.partition_bounds)?;
            let m = evaluate(&params, &scenes, &team, &mask, &buckets, &cfg.cost, cfg.eta)?;
            let text = serde_json::to_string_pretty(&m)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("eval.json"), &text)?;
            }
            println!("{text}");
        }
        Command::Ablate { common, out, seeds } => {
            let cfg = load_config(&common)?;
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let report = ablate(&cfg, &seeds, Some(&out))?;
            for r in &report.rows {
                println!(
                    "{}  ap {:.4}  scale_std {:.4}  center_frac {:.3}  ({})",
                    r.setting.name(),
                    r.ap_mean,
                    r.scale_std_mean,
                    r.center_within_eta_frac,
                    r.description
                );
            }
            println!("scale_std S3/S1 = {:.4}", report.scale_std_ratio_s3_s1);
        }
        Command::Match { common, dataset, checkpoint } => {
            let cfg = load_config(&common)?;
            let (params, team) = match checkpoint {
                Some(c) => load_checkpoint(&c)?,
                None => (init_params(&cfg)?, build_team(&cfg)?),
            };
            let raw = read_nonempty(&dataset)?;
            let scenes = prepare_for(&cfg, &raw)?;
            let mask = build_attention_mask(team.group_sizes())?;
            for (i, s) in scenes.iter().enumerate() {
                let out = decode(&s.features, &team, &params, &mask)?;
                let preds = out.last().map(|l| l.predictions()).unwrap_or_default();
                let m = team_match_with_groups(&team, &preds, &s.objects, &s.groups, &cfg.cost)?;
                println!("{}", serde_json::json!({ "scene": i, "seed": raw[i].seed, "match": m }));
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
