//! Command-line entry points: train, evaluate, export attention data, and
//! run ablation sweeps. Every command is deterministic under a fixed seed
//! and writes plain-text artifacts into the output directory.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slpt_core::cascade::{
    evaluate, final_stage_attention, train, CascadeModel,
};
use slpt_core::data::Dataset;
use slpt_core::metrics::{argmax_connections, attention_interaction_summary, count_params};
use slpt_core::model::encoding_similarity;
use slpt_core::nn::AdamState;
use slpt_core::tensor::Tensor;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "slpt", version, about = "Sparse local patch transformer for landmark regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs plus checkpoints.
    Train(RunArgs),
    /// Evaluate a checkpoint: NME/FR/AUC report, CED curve, per-stage table.
    Eval(RunArgs),
    /// Export mean attention matrices, encoding similarity, and argmax
    /// connection maps from a checkpoint.
    ExportAttention(RunArgs),
    /// Train/evaluate every setting along one ablation axis.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `synthetic` or a path to an annotation source.
    #[arg(long)]
    dataset: Option<String>,
    /// Annotation format for file datasets: pts68, wflw98-csv, cofw29.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long = "patch-k")]
    patch_k: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated epoch indices for learning-rate decay.
    #[arg(long)]
    milestones: Option<String>,
    /// Failure-rate / AUC threshold as an NME fraction (0.1 = 10%).
    #[arg(long)]
    threshold: Option<String>,
    /// Checkpoint path (eval / export-attention).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sweep axis: stages, patch-k, layers, blocks, encoding.
    #[arg(long)]
    axis: Option<String>,
    /// Landmark count for synthetic datasets.
    #[arg(long)]
    landmarks: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Input image side (synthetic datasets).
    #[arg(long)]
    input: Option<String>,
    /// Training augmentation on/off (1/0).
    #[arg(long)]
    augment: Option<String>,
    /// Feature levels: single or multi.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long = "synth-train")]
    synth_train: Option<String>,
    #[arg(long = "synth-test")]
    synth_test: Option<String>,
    /// Evaluate only samples carrying this attribute tag.
    #[arg(long)]
    tag: Option<String>,
    /// Run sweep settings on threads (outputs match sequential runs).
    #[arg(long, default_value_t = false)]
    parallel: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides: Vec<(&'static str, Option<String>)> = vec![
            ("seed", self.seed.clone()),
            ("dataset", self.dataset.clone()),
            ("format", self.format.clone()),
            ("stages", self.stages.clone()),
            ("layers", self.layers.clone()),
            ("patch_k", self.patch_k.clone()),
            ("heads", self.heads.clone()),
            ("dim", self.dim.clone()),
            ("epochs", self.epochs.clone()),
            ("lr", self.lr.clone()),
            ("milestones", self.milestones.clone()),
            ("threshold", self.threshold.clone()),
            ("landmarks", self.landmarks.clone()),
            ("batch", self.batch.clone()),
            ("input", self.input.clone()),
            ("augment", self.augment.clone()),
            ("levels", self.levels.clone()),
            ("synth_train", self.synth_train.clone()),
            ("synth_test", self.synth_test.clone()),
            ("tag", self.tag.clone()),
        ];
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("--out <dir> is required"))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::ExportAttention(args) => cmd_export_attention(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn matrix_text(matrix: &[f64], n: usize) -> String {
    let mut out = String::new();
    for row in matrix.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn train_one(cfg: &RunConfig, out_dir: &Path) -> Result<(CascadeModel, AdamState)> {
    let (train_set, _) = cfg.datasets()?;
    cfg.check_dataset(train_set.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let model = cfg.build_model(train_set.as_ref(), &mut rng)?;
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut optimizer = AdamState::new(&params);
    let flip_meta = train_set
        .flip_map()
        .map(|m| (m.to_vec(), train_set.interocular_indices()));
    let tc = cfg.train_config(flip_meta)?;

    let mut log = fs::File::create(out_dir.join("train.log"))
        .with_context(|| format!("creating {}", out_dir.join("train.log").display()))?;
    let mut best_loss = f64::INFINITY;
    let best_path = out_dir.join("best.ckpt");
    let mut train_err: Option<anyhow::Error> = None;
    {
        let on_epoch = |stats: &slpt_core::cascade::EpochStats| {
            if train_err.is_some() {
                return;
            }
            if let Err(e) = writeln!(log, "{}", stats.log_line()) {
                train_err = Some(e.into());
                return;
            }
            if stats.mean_loss < best_loss {
                best_loss = stats.mean_loss;
                // best checkpoints carry parameters only; final.ckpt keeps
                // the optimizer state for resuming
                if let Err(e) = model.save(&best_path, None) {
                    train_err = Some(anyhow!("{e}"));
                }
            }
        };
        train(&model, train_set.as_ref(), &tc, &mut optimizer, on_epoch)
            .map_err(|e| anyhow!("{e}"))?;
    }
    if let Some(e) = train_err {
        return Err(e);
    }
    model
        .save(&out_dir.join("final.ckpt"), Some(&optimizer))
        .map_err(|e| anyhow!("{e}"))?;
    Ok((model, optimizer))
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out_dir = args.out_dir()?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let (model, _) = train_one(&cfg, out_dir)?;
    let counts = count_params(&model.parameters());
    println!(
        "trained {} epochs on {}; parameters: {} ({})",
        cfg.str_val("epochs"),
        cfg.dataset_str(),
        counts.total,
        counts
            .by_module
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", "),
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn load_checkpoint_model(args: &RunArgs, cfg: &RunConfig) -> Result<CascadeModel> {
    let path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("--checkpoint <path> is required"))?;
    let (model, _) = CascadeModel::load(path).map_err(|e| anyhow!("{e}"))?;
    // any explicitly configured model dimension must match the checkpoint
    let stored = model.config_text();
    let mismatches: Vec<String> = cfg
        .explicit_model_expectations(&stored)?
        .into_iter()
        .filter(|(_, got, want)| got != want)
        .map(|(key, got, want)| format!("{key}: checkpoint {got}, requested {want}"))
        .collect();
    if !mismatches.is_empty() {
        bail!("checkpoint incompatible with configuration: {}", mismatches.join("; "));
    }
    Ok(model)
}

fn check_model_dataset(model: &CascadeModel, dataset: &dyn Dataset) -> Result<()> {
    if model.slpt_cfg.num_landmarks != dataset.num_landmarks() {
        bail!(
            "checkpoint expects {} landmarks, dataset has {}",
            model.slpt_cfg.num_landmarks,
            dataset.num_landmarks()
        );
    }
    if model.backbone_cfg.input_size != dataset.image_size() {
        bail!(
            "checkpoint expects {:?} inputs, dataset images are {:?}",
            model.backbone_cfg.input_size,
            dataset.image_size()
        );
    }
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out_dir = args.out_dir()?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let model = load_checkpoint_model(args, &cfg)?;
    let (_, mut eval_set) = cfg.datasets()?;
    let tag = cfg.str_val("tag");
    if !tag.is_empty() {
        eval_set = Box::new(
            slpt_core::data::TagFilteredDataset::new(eval_set, tag).map_err(|e| anyhow!("{e}"))?,
        );
    }
    check_model_dataset(&model, eval_set.as_ref())?;
    let report = evaluate(
        &model,
        eval_set.as_ref(),
        cfg.threshold_percent()?,
        cfg.usize_val("ced_samples")?,
    )
    .map_err(|e| anyhow!("{e}"))?;
    write_text(&out_dir.join("report.txt"), &report.to_kv_text())?;
    write_text(&out_dir.join("ced.txt"), &report.ced_text())?;
    write_text(&out_dir.join("stages.txt"), &report.stage_table())?;
    println!(
        "nme={:.4}% fr={:.4}% auc={:.4} over {} images",
        report.dataset_nme,
        report.failure_rate,
        report.auc,
        report.per_image_nme.len()
    );
    Ok(())
}

/// Images used for the attention export when the dataset is larger.
const ATTENTION_EXPORT_LIMIT: usize = 128;

fn cmd_export_attention(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out_dir = args.out_dir()?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let model = load_checkpoint_model(args, &cfg)?;
    let (_, eval_set) = cfg.datasets()?;
    check_model_dataset(&model, eval_set.as_ref())?;
    let records = final_stage_attention(&model, eval_set.as_ref(), ATTENTION_EXPORT_LIMIT)
        .map_err(|e| anyhow!("{e}"))?;
    let n = model.slpt_cfg.num_landmarks;

    let summary = attention_interaction_summary(&records).map_err(|e| anyhow!("{e}"))?;
    let mut written = 0;
    for (layer, mat) in summary.msa.iter().enumerate() {
        if let Some(m) = mat {
            write_text(&out_dir.join(format!("msa_layer{}.txt", layer + 1)), &matrix_text(m, n))?;
            written += 1;
        }
    }
    for (layer, mat) in summary.mca.iter().enumerate() {
        if let Some(m) = mat {
            write_text(&out_dir.join(format!("mca_layer{}.txt", layer + 1)), &matrix_text(m, n))?;
            written += 1;
        }
    }

    if let Some(p) = &model.slpt.structure_encodings {
        let sim = encoding_similarity(p).map_err(|e| anyhow!("{e}"))?;
        write_text(&out_dir.join("encoding_similarity.txt"), &matrix_text(&sim.to_vec(), n))?;
    }

    // per-image argmax connections from the first layer's cross-attention
    let mut connections = String::new();
    for (i, rec) in records.iter().enumerate() {
        let Some(first_mca) = rec.mca.first().and_then(|m| m.as_ref()) else {
            continue;
        };
        let mut mean = vec![0.0; n * n];
        for h in 0..rec.heads {
            for (a, v) in mean.iter_mut().zip(&first_mca[h * n * n..(h + 1) * n * n]) {
                *a += v / rec.heads as f64;
            }
        }
        let arrows: Vec<String> = argmax_connections(&mean, n)
            .iter()
            .map(|t| t.to_string())
            .collect();
        connections.push_str(&format!("image={i} {}\n", arrows.join(" ")));
    }
    if !connections.is_empty() {
        write_text(&out_dir.join("connections.txt"), &connections)?;
    }
    println!(
        "exported {written} mean attention matrices over {} images to {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}

struct SweepRow {
    label: Vec<(String, String)>,
    report: slpt_core::metrics::EvalReport,
}

fn sweep_settings(axis: &str) -> Result<Vec<Vec<(&'static str, String)>>> {
    Ok(match axis {
        "stages" => (1..=4).map(|s| vec![("stages", s.to_string())]).collect(),
        "patch-k" => [5, 7, 9].iter().map(|k| vec![("patch_k", k.to_string())]).collect(),
        "layers" => [2, 4, 6, 12].iter().map(|d| vec![("layers", d.to_string())]).collect(),
        "blocks" => vec![
            vec![("msa", "0".into()), ("mca", "0".into())],
            vec![("msa", "1".into()), ("mca", "0".into())],
            vec![("msa", "0".into()), ("mca", "1".into())],
            vec![("msa", "1".into()), ("mca", "1".into())],
        ],
        "encoding" => vec![
            vec![("encoding", "0".into())],
            vec![("encoding", "1".into())],
        ],
        other => bail!("unknown sweep axis '{other}' (stages, patch-k, layers, blocks, encoding)"),
    })
}

fn run_sweep_setting(cfg: &RunConfig, out_dir: &Path, tag: &str) -> Result<SweepRow> {
    let run_dir = out_dir.join(format!("run_{tag}"));
    fs::create_dir_all(&run_dir)?;
    write_text(&run_dir.join("config.txt"), &cfg.to_text())?;
    let (model, _) = train_one(cfg, &run_dir)?;
    let (_, eval_set) = cfg.datasets()?;
    let report = evaluate(
        &model,
        eval_set.as_ref(),
        cfg.threshold_percent()?,
        cfg.usize_val("ced_samples")?,
    )
    .map_err(|e| anyhow!("{e}"))?;
    Ok(SweepRow { label: Vec::new(), report })
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let base = args.resolve()?;
    let axis = args
        .axis
        .as_deref()
        .ok_or_else(|| anyhow!("--axis is required (stages, patch-k, layers, blocks, encoding)"))?;
    let out_dir = args.out_dir()?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config.txt"), &base.to_text())?;
    let settings = sweep_settings(axis)?;

    let jobs: Vec<(RunConfig, String, Vec<(String, String)>)> = settings
        .iter()
        .map(|setting| {
            let mut cfg = base.clone();
            let mut tag_parts = Vec::new();
            let mut label = Vec::new();
            for (k, v) in setting {
                cfg.set(k, v.clone());
                tag_parts.push(format!("{k}{v}"));
                label.push((k.to_string(), v.clone()));
            }
            (cfg, tag_parts.join("_"), label)
        })
        .collect();

    let mut rows: Vec<SweepRow> = if args.parallel {
        std::thread::scope(|scope| -> Result<Vec<SweepRow>> {
            let handles: Vec<_> = jobs
                .iter()
                .map(|(cfg, tag, _)| scope.spawn(move || run_sweep_setting(cfg, out_dir, tag)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| anyhow!("sweep worker panicked"))?)
                .collect()
        })?
    } else {
        jobs.iter()
            .map(|(cfg, tag, _)| run_sweep_setting(cfg, out_dir, tag))
            .collect::<Result<_>>()?
    };
    for (row, (_, _, label)) in rows.iter_mut().zip(&jobs) {
        row.label = label.clone();
    }

    // one row per setting; per-stage columns mirror the staged comparisons
    let max_stages = rows
        .iter()
        .map(|r| r.report.stage_nme.len())
        .max()
        .unwrap_or(0);
    let mut table = String::new();
    table.push_str("setting");
    for s in 1..=max_stages {
        table.push_str(&format!(" stage{s}_nme stage{s}_fr stage{s}_auc"));
    }
    table.push_str(" final_nme final_fr final_auc\n");
    for row in &rows {
        let label: Vec<String> = row.label.iter().map(|(k, v)| format!("{k}={v}")).collect();
        table.push_str(&label.join(","));
        for s in 0..max_stages {
            match row.report.stage_nme.get(s) {
                Some(nme) => table.push_str(&format!(
                    " {nme:.4} {:.4} {:.4}",
                    row.report.stage_fr[s], row.report.stage_auc[s]
                )),
                None => table.push_str(" - - -"),
            }
        }
        table.push_str(&format!(
            " {:.4} {:.4} {:.4}\n",
            row.report.dataset_nme, row.report.failure_rate, row.report.auc
        ));
    }
    let table_path = out_dir.join(format!("sweep_{axis}.txt"));
    write_text(&table_path, &table)?;
    print!("{table}");
    println!("table written to {}", table_path.display());
    Ok(())
}
