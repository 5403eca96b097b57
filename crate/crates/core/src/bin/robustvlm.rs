//! Command-line entry point: fine-tuning, evaluation, attack generation,
//! attention visualization, and hyperparameter sweeps. Every run writes its
//! artifacts under `<out-root>/<timestamp>-<confighash>/` together with the
//! fully resolved configuration.

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use robustvlm::archive::TensorArchive;
use robustvlm::attacks::{linf_distances, run_attack, LossKind};
use robustvlm::attention::{ground_truth_text_vectors, text_guided_attention};
use robustvlm::config::RunConfig;
use robustvlm::data::{load_dataset, load_manifest, synthetic_dataset, Dataset};
use robustvlm::evaluation::{
    robust_accuracy, robust_accuracy_from, strength_sweep, tradeoff_table, zero_shot_accuracy,
    DatasetEntry, EvalReport,
};
use robustvlm::model::{DualModelState, TextEmbeddings, VitEncoder};
use robustvlm::training::{finetune, train_clean, DistanceMetric};
use robustvlm::{Error, Result};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "robustvlm", version, about = "Adversarially robust dual-encoder fine-tuning with text-guided attention alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every subcommand: a config file plus flag overrides.
/// Flags win over the file.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (TOML, or a previously emitted resolved_config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory that run directories are created under.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
    /// Fine-tuning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// SGD weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Fine-tuning batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training / attack / report seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Attention refinement loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attention model constraint loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Attention map distance metric: l2, l1, or cosine.
    #[arg(long)]
    distance: Option<String>,
    /// Attack radius in pixel units (l-infinity).
    #[arg(long)]
    eps: Option<f64>,
    /// Attack step size in pixel units.
    #[arg(long)]
    step: Option<f64>,
    /// Attack iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Attack loss: ce or cw.
    #[arg(long)]
    loss: Option<String>,
    /// CW margin clamp.
    #[arg(long)]
    kappa: Option<f64>,
    /// Synthetic dataset size.
    #[arg(long)]
    data_n: Option<usize>,
    /// Dataset manifest path (overrides the synthetic generator).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Adversarially fine-tune an encoder with attention alignment losses.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of clean-pretraining one.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
    },
    /// Clean and robust zero-shot accuracy of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifests to evaluate (comma separated); defaults to the
        /// dataset in the config.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<PathBuf>,
        /// Craft attacks against this checkpoint instead (transfer attack).
        #[arg(long)]
        transfer_ckpt: Option<PathBuf>,
        /// Additional attack strengths to sweep (comma separated).
        #[arg(long, value_delimiter = ',')]
        sweep_eps: Vec<f64>,
        /// Report file name inside the run directory.
        #[arg(long, default_value = "report.json")]
        out: String,
    },
    /// Generate adversarial examples and perturbation statistics.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Archive name (inside the run directory) for the attacked images.
        #[arg(long, default_value = "attacked")]
        out: String,
    },
    /// Render text-guided attention heatmaps for clean and attacked images.
    AttnViz {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of samples to render.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Also write side-by-side clean/adversarial panels.
        #[arg(long)]
        panels: bool,
    },
    /// Fine-tune and evaluate over a grid of loss weights / learning rates /
    /// distance metrics, one report per grid cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Start every cell from this checkpoint instead of pretraining.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long = "alphas", value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long = "betas", value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long = "lrs", value_delimiter = ',')]
        lrs: Vec<f64>,
        #[arg(long = "distances", value_delimiter = ',')]
        distances: Vec<String>,
    },
}

enum CliError {
    Config(Error),
    Runtime(Error),
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            3
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Cmd) -> std::result::Result<(), CliError> {
    match cmd {
        Cmd::Finetune { common, init_ckpt } => {
            let cfg = resolve(&common).map_err(CliError::Config)?;
            cmd_finetune(&cfg, &common.out_root, init_ckpt.as_deref()).map_err(CliError::Runtime)
        }
        Cmd::Evaluate { common, ckpt, datasets, transfer_ckpt, sweep_eps, out } => {
            let cfg = resolve(&common).map_err(CliError::Config)?;
            cmd_evaluate(&cfg, &common.out_root, &ckpt, &datasets, transfer_ckpt.as_deref(), &sweep_eps, &out)
                .map_err(CliError::Runtime)
        }
        Cmd::Attack { common, ckpt, out } => {
            let cfg = resolve(&common).map_err(CliError::Config)?;
            cmd_attack(&cfg, &common.out_root, &ckpt, &out).map_err(CliError::Runtime)
        }
        Cmd::AttnViz { common, ckpt, n, panels } => {
            let cfg = resolve(&common).map_err(CliError::Config)?;
            cmd_attn_viz(&cfg, &common.out_root, &ckpt, n, panels).map_err(CliError::Runtime)
        }
        Cmd::Sweep { common, init_ckpt, alphas, betas, lrs, distances } => {
            let cfg = resolve(&common).map_err(CliError::Config)?;
            let distances = distances
                .iter()
                .map(|s| parse_distance(s))
                .collect::<Result<Vec<_>>>()
                .map_err(CliError::Config)?;
            cmd_sweep(&cfg, &common.out_root, init_ckpt.as_deref(), &alphas, &betas, &lrs, &distances)
                .map_err(CliError::Runtime)
        }
    }
}

fn parse_distance(s: &str) -> Result<DistanceMetric> {
    match s {
        "l2" => Ok(DistanceMetric::L2),
        "l1" => Ok(DistanceMetric::L1),
        "cosine" | "cos" => Ok(DistanceMetric::Cosine),
        other => Err(Error::InvalidConfig(format!("unknown distance metric: {other}"))),
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
        "cw" | "cw_margin" => Ok(LossKind::CwMargin),
        other => Err(Error::InvalidConfig(format!("unknown attack loss: {other}"))),
    }
}

/// Load the config file (or defaults) and apply flag overrides; flags win.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = common.momentum {
        cfg.train.momentum = v;
    }
    if let Some(v) = common.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = common.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = common.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = common.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = common.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = common.beta {
        cfg.loss.beta = v;
    }
    if let Some(s) = &common.distance {
        cfg.loss.distance = parse_distance(s)?;
    }
    if let Some(v) = common.eps {
        cfg.attack.eps = v;
    }
    if let Some(v) = common.step {
        cfg.attack.step = v;
    }
    if let Some(v) = common.iters {
        cfg.attack.iters = v;
    }
    if let Some(s) = &common.loss {
        cfg.attack.loss = parse_loss(s)?;
    }
    if let Some(v) = common.kappa {
        cfg.attack.kappa = v;
    }
    if let Some(v) = common.data_n {
        cfg.data.n = v;
    }
    if let Some(p) = &common.manifest {
        cfg.data.kind = "manifest".into();
        cfg.data.manifest = Some(p.to_string_lossy().into_owned());
    }
    // eps = 0 reads as "no attack" (robust = clean) in `evaluate`, so it is
    // excluded from the attack-parameter validation
    if cfg.attack.eps == 0.0 {
        let mut check = cfg.clone();
        check.attack.eps = 1.0 / 255.0;
        check.validate()?;
    } else {
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Create `<out-root>/<timestamp>-<confighash>/` and write the resolved
/// config into it.
fn make_run_dir(root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
    let hash = cfg.hash();
    let mut dir = root.join(format!("{secs}-{hash}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{secs}-{hash}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("resolved_config.json"), cfg.to_resolved_json())?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.kind.as_str() {
        "shapes" => synthetic_dataset("shapes", cfg.data.n, cfg.data.seed),
        "manifest" => {
            let p = cfg
                .data
                .manifest
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("data.kind = manifest requires data.manifest".into()))?;
            load_dataset(&load_manifest(Path::new(p))?)
        }
        other => Err(Error::InvalidConfig(format!("unknown data kind: {other}"))),
    }
}

fn text_for(cfg: &RunConfig, ds: &Dataset) -> Result<TextEmbeddings> {
    TextEmbeddings::synthetic(&ds.class_names, &cfg.data.template, cfg.model.embed_dim, cfg.data.text_seed)
}

/// Load the original encoder from a checkpoint or clean-pretrain one.
fn original_encoder(
    cfg: &RunConfig,
    ds: &Dataset,
    text: &TextEmbeddings,
    init_ckpt: Option<&Path>,
) -> Result<VitEncoder> {
    match init_ckpt {
        Some(p) => VitEncoder::load(p),
        None => {
            let mut enc = VitEncoder::init(cfg.model.vit_config(), cfg.model.init_seed);
            let pre = cfg.train.pretrain_config(cfg.attack.attack_config(cfg.train.seed));
            let losses = train_clean(&mut enc, text, cfg.temperature.0, ds, &pre)?;
            println!(
                "pretrained original encoder: {} epochs, final loss {:.4}",
                pre.epochs,
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(enc)
        }
    }
}

fn cmd_finetune(cfg: &RunConfig, out_root: &Path, init_ckpt: Option<&Path>) -> Result<()> {
    let dir = make_run_dir(out_root, cfg)?;
    let ds = load_data(cfg)?;
    let text = text_for(cfg, &ds)?;
    let original = original_encoder(cfg, &ds, &text, init_ckpt)?;
    original.save(&dir.join("original"))?;
    let mut state = DualModelState::new(original, text, cfg.temperature.0)?;
    let log = finetune(&mut state, &ds, &cfg.train_config(), &cfg.loss_weights(), Some(&dir.join("checkpoints")))?;
    std::fs::write(dir.join("training_log.jsonl"), log.to_jsonl())?;
    state.target.save(&dir.join("final"))?;
    if let Some(last) = log.epochs.last() {
        println!(
            "finetune done: clean {:.3} robust {:.3} (loss {:.4})",
            last.clean_acc, last.robust_acc, last.l_total
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    out_root: &Path,
    ckpt: &Path,
    manifests: &[PathBuf],
    transfer_ckpt: Option<&Path>,
    sweep_eps: &[f64],
    out: &str,
) -> Result<()> {
    let dir = make_run_dir(out_root, cfg)?;
    let enc = VitEncoder::load(ckpt)?;
    let transfer = transfer_ckpt.map(VitEncoder::load).transpose()?;
    let datasets: Vec<(String, Dataset)> = if manifests.is_empty() {
        vec![(cfg.data.kind.clone(), load_data(cfg)?)]
    } else {
        manifests
            .iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, load_dataset(&load_manifest(p)?)?))
            })
            .collect::<Result<_>>()?
    };
    let tau = cfg.temperature.0;
    let mut entries = Vec::new();
    for (id, ds) in &datasets {
        let text = text_for(cfg, ds)?;
        let clean = zero_shot_accuracy(&enc, ds, &text, tau)?;
        let attack = cfg.attack.attack_config(cfg.train.seed);
        let robust = if attack.epsilon == 0.0 {
            clean // zero radius leaves every image unchanged
        } else {
            match &transfer {
                Some(src) => robust_accuracy_from(src, &enc, ds, &text, tau, &attack)?,
                None => robust_accuracy(&enc, ds, &text, tau, &attack)?,
            }
        };
        entries.push(DatasetEntry { dataset_id: id.clone(), clean_acc: clean, robust_acc: robust, attack });
        if !sweep_eps.is_empty() {
            let sweep = strength_sweep(&enc, id, ds, &text, tau, &attack, sweep_eps, cfg.hash(), cfg.train.seed)?;
            entries.extend(sweep.entries);
        }
    }
    let report = EvalReport::from_entries(entries, cfg.hash(), cfg.train.seed);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(dir.join(out), &json)?;
    println!(
        "evaluated {} dataset entries: mean clean {:.3}, mean robust {:.3}",
        report.entries.len(),
        report.average_clean,
        report.average_robust
    );
    println!("report in {}", dir.join(out).display());
    Ok(())
}

fn cmd_attack(cfg: &RunConfig, out_root: &Path, ckpt: &Path, out: &str) -> Result<()> {
    let dir = make_run_dir(out_root, cfg)?;
    let enc = VitEncoder::load(ckpt)?;
    let ds = load_data(cfg)?;
    let text = text_for(cfg, &ds)?;
    let batch = ds.head_batch(ds.len())?;
    let attack = cfg.attack.attack_config(cfg.train.seed);
    let adv = run_attack(&enc, &batch, &text, cfg.temperature.0, &attack)?;

    let mut archive = TensorArchive::new();
    archive.insert("images", adv.pixels.clone().into_dyn());
    archive.insert(
        "labels",
        ndarray::Array1::from_iter(adv.labels.iter().map(|&l| l as f64)).into_dyn(),
    );
    archive.set_meta("attack", serde_json::to_value(&attack)?);
    archive.save(&dir.join(out))?;

    let dists = linf_distances(&batch, &adv);
    let stats = serde_json::json!({
        "samples": dists.len(),
        "eps": attack.epsilon,
        "max_linf": dists.iter().cloned().fold(0.0, f64::max),
        "mean_linf": dists.iter().sum::<f64>() / dists.len() as f64,
        "config_hash": cfg.hash(),
    });
    let mut json = serde_json::to_string_pretty(&stats)?;
    json.push('\n');
    std::fs::write(dir.join("attack_stats.json"), &json)?;
    println!("attacked {} images; archive in {}", dists.len(), dir.join(out).display());
    Ok(())
}

fn cmd_attn_viz(cfg: &RunConfig, out_root: &Path, ckpt: &Path, n: usize, panels: bool) -> Result<()> {
    let dir = make_run_dir(out_root, cfg)?;
    let enc = VitEncoder::load(ckpt)?;
    let ds = load_data(cfg)?;
    let text = text_for(cfg, &ds)?;
    let batch = ds.head_batch(n)?;
    let out_hw = ds.image_hw();
    let text_vecs = ground_truth_text_vectors(&batch, &text)?;
    let attack = cfg.attack.attack_config(cfg.train.seed);
    let adv = run_attack(&enc, &batch, &text, cfg.temperature.0, &attack)?;

    let clean_maps = {
        let e = robustvlm::model::encode_image(&enc, &batch)?;
        text_guided_attention(&e.patches, &text_vecs, out_hw)?
    };
    let adv_maps = {
        let e = robustvlm::model::encode_image(&enc, &adv)?;
        text_guided_attention(&e.patches, &text_vecs, out_hw)?
    };
    robustvlm::viz::save_heatmaps(&clean_maps, &dir, "clean")?;
    robustvlm::viz::save_heatmaps(&adv_maps, &dir, "adv")?;
    if panels {
        robustvlm::viz::save_panels(&clean_maps, &adv_maps, &dir)?;
    }
    for i in 0..batch.len() {
        robustvlm::data::save_png(batch.pixels.index_axis(Axis(0), i), &dir.join(format!("{i}_input.png")))?;
    }
    println!("wrote {} heatmap pairs to {}", batch.len(), dir.display());
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    out_root: &Path,
    init_ckpt: Option<&Path>,
    alphas: &[f64],
    betas: &[f64],
    lrs: &[f64],
    distances: &[DistanceMetric],
) -> Result<()> {
    let dir = make_run_dir(out_root, cfg)?;
    let ds = load_data(cfg)?;
    let text = text_for(cfg, &ds)?;
    // the original encoder does not depend on the swept values, so build it once
    let original = original_encoder(cfg, &ds, &text, init_ckpt)?;
    original.save(&dir.join("original"))?;

    let or_default = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let alphas = or_default(alphas, cfg.loss.alpha);
    let betas = or_default(betas, cfg.loss.beta);
    let lrs = or_default(lrs, cfg.train.lr);
    let distances = if distances.is_empty() { vec![cfg.loss.distance] } else { distances.to_vec() };

    let tau = cfg.temperature.0;
    let mut rows = Vec::new();
    for &alpha in &alphas {
        for &beta in &betas {
            for &lr in &lrs {
                for &distance in &distances {
                    let mut cell = cfg.clone();
                    cell.loss.alpha = alpha;
                    cell.loss.beta = beta;
                    cell.train.lr = lr;
                    cell.loss.distance = distance;
                    let id = format!("alpha{alpha}_beta{beta}_lr{lr}_{distance:?}").to_lowercase();
                    let cell_dir = dir.join(&id);
                    std::fs::create_dir_all(&cell_dir)?;
                    std::fs::write(cell_dir.join("resolved_config.json"), cell.to_resolved_json())?;

                    let mut state = DualModelState::new(original.clone(), text.clone(), tau)?;
                    let log = finetune(&mut state, &ds, &cell.train_config(), &cell.loss_weights(), None)?;
                    std::fs::write(cell_dir.join("training_log.jsonl"), log.to_jsonl())?;
                    state.target.save(&cell_dir.join("final"))?;

                    let attack = cell.attack.attack_config(cell.train.seed);
                    let clean = zero_shot_accuracy(&state.target, &ds, &text, tau)?;
                    let robust = robust_accuracy(&state.target, &ds, &text, tau, &attack)?;
                    let report = EvalReport::from_entries(
                        vec![DatasetEntry {
                            dataset_id: cfg.data.kind.clone(),
                            clean_acc: clean,
                            robust_acc: robust,
                            attack,
                        }],
                        cell.hash(),
                        cell.train.seed,
                    );
                    let mut json = serde_json::to_string_pretty(&report)?;
                    json.push('\n');
                    std::fs::write(cell_dir.join("report.json"), &json)?;
                    println!("{id}: clean {clean:.3} robust {robust:.3}");
                    rows.push((id, clean, robust));
                }
            }
        }
    }
    std::fs::write(dir.join("tradeoff.csv"), tradeoff_table(&rows))?;
    robustvlm::viz::save_tradeoff_scatter(&rows, &dir.join("tradeoff.png"))?;
    println!("{} cells; summary in {}", rows.len(), dir.display());
    Ok(())
}
