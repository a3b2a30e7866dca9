//! Implementations of the `csmae` subcommands. Each command resolves its
//! configuration (file, then `--set` overrides), writes a `config.resolved`
//! snapshot beside any artifacts it produces, and reports through the shared
//! error type so exit codes stay uniform.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use csmae_core::backbone::count_parameters;
use csmae_core::config::load_run_config;
use csmae_core::datasets::{self, generate_synthetic, split_images};
use csmae_core::retrieval::{
    evaluate_task_on_embeddings, extract_embeddings, format_report_table, load_embeddings,
    query_topk, save_embeddings,
};
use csmae_core::training::{self, TrainConfig, TrainState};
use csmae_core::{
    Checkpoint, Error, MultiModalPair, Result, RetrievalTask, RunConfig, Split,
};

use crate::ConfigArgs;

/// Fixed artifact names so downstream commands and reruns can find outputs.
const RESOLVED_NAME: &str = "config.resolved";
const EMBEDDINGS_NAME: &str = "embeddings.tsv";
const REPORT_NAME: &str = "report.txt";

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    load_run_config(args.config.as_deref(), &args.set)
}

/// Writes the fully-resolved configuration snapshot into `out`, creating the
/// directory if needed.
fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_NAME), cfg.resolved_toml()?)?;
    Ok(())
}

/// Loads the archive named by `data.manifest`, or generates the seeded
/// synthetic dataset when no manifest is configured.
fn dataset_pairs(cfg: &RunConfig) -> Result<Vec<MultiModalPair>> {
    match &cfg.data.manifest {
        Some(path) => Ok(datasets::load_dataset(path)?.0),
        None => generate_synthetic(
            cfg.data.n_pairs,
            cfg.model.image_side,
            cfg.data.n_classes,
            cfg.data.seed,
        ),
    }
}

/// `all` selects every pair; any other value must name a split.
fn parse_split_filter(raw: &str) -> Result<Option<Split>> {
    if raw.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    raw.parse::<Split>().map(Some)
}

pub fn synth_data(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    write_resolved(&cfg, out)?;
    let pairs = generate_synthetic(
        cfg.data.n_pairs,
        cfg.model.image_side,
        cfg.data.n_classes,
        cfg.data.seed,
    )?;
    let manifest = datasets::save_dataset(&pairs, out)?;
    println!(
        "wrote {} pairs ({} classes, seed {}) to {}",
        pairs.len(),
        cfg.data.n_classes,
        cfg.data.seed,
        manifest.display()
    );
    Ok(())
}

pub fn train(config: &ConfigArgs, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let tc = cfg.to_train_config()?;
    write_resolved(&cfg, out)?;
    let pairs = dataset_pairs(&cfg)?;
    let images = split_images(&pairs, Split::Train);
    let outcome = training::train(&tc, &images, out, resume)?;
    match &outcome.last {
        Some(rec) => println!(
            "trained to step {} (epoch {}), loss {:.6}, lr {:.6e}",
            rec.step, outcome.state.epoch, rec.breakdown.total, rec.lr
        ),
        None => println!(
            "checkpoint already at step {} (epoch {}); nothing to do",
            outcome.state.step, outcome.state.epoch
        ),
    }
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

pub fn embed(config: &ConfigArgs, checkpoint: &Path, split: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    write_resolved(&cfg, out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    // The checkpoint's own stored configuration defines the model; the run
    // configuration only supplies the dataset to embed.
    let stored: TrainConfig = toml::from_str(&ckpt.config_toml)
        .map_err(|e| Error::data(format!("checkpoint carries an unreadable configuration: {e}")))?;
    let state = TrainState::from_checkpoint(&ckpt, &stored)?;
    let mut pairs = dataset_pairs(&cfg)?;
    if let Some(wanted) = parse_split_filter(split)? {
        pairs.retain(|p| p.split == wanted);
        if pairs.is_empty() {
            return Err(Error::data(format!("split {wanted} holds no pairs")));
        }
    }
    let records = extract_embeddings(&state.model, &pairs)?;
    let path = out.join(EMBEDDINGS_NAME);
    save_embeddings(&path, &records)?;
    println!(
        "wrote {} embeddings ({} pairs, dim {}) to {}",
        records.len(),
        pairs.len(),
        state.model.feature_dim(),
        path.display()
    );
    Ok(())
}

pub fn retrieve(embeddings: &Path, query_id: &str, task: &str, k: usize) -> Result<()> {
    let task: RetrievalTask = task.parse()?;
    let records = load_embeddings(embeddings)?;
    let query = records
        .iter()
        .find(|r| r.image_id == query_id && r.modality == task.query_modality())
        .ok_or_else(|| {
            Error::data(format!(
                "no {} embedding for query id `{query_id}`",
                task.query_modality()
            ))
        })?;
    let index: Vec<_> =
        records.iter().filter(|r| r.modality == task.archive_modality()).cloned().collect();
    let mut exclude = BTreeSet::new();
    if task.is_uni_modal() {
        exclude.insert(query_id);
    }
    let ranked = query_topk(&index, &query.vector, k, &exclude)?;
    println!("task {task}: top {k} of {} candidates for query {query_id}", index.len());
    let width = ordinal(k).len();
    for (i, id) in ranked.iter().enumerate() {
        println!("{:>width$}  {id}", ordinal(i + 1));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    config: &ConfigArgs,
    embeddings: &Path,
    manifest: &Path,
    query_split: &str,
    archive_split: &str,
    k: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    write_resolved(&cfg, out)?;
    let records = load_embeddings(embeddings)?;
    let archive_manifest = datasets::ArchiveManifest::load(manifest)?;
    let mut labels: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    for rec in &archive_manifest.records {
        labels.insert(rec.id.clone(), rec.labels.clone());
        splits.insert(rec.id.clone(), rec.split);
    }
    for rec in &records {
        if !labels.contains_key(&rec.image_id) {
            return Err(Error::data(format!(
                "embedding id `{}` is not present in the manifest",
                rec.image_id
            )));
        }
    }
    let query_filter = parse_split_filter(query_split)?;
    let archive_filter = parse_split_filter(archive_split)?;
    let selected = |filter: Option<Split>| -> Vec<_> {
        records
            .iter()
            .filter(|r| filter.is_none_or(|s| splits[&r.image_id] == s))
            .cloned()
            .collect()
    };
    let queries = selected(query_filter);
    let archive = selected(archive_filter);
    let mut reports = Vec::with_capacity(RetrievalTask::ALL.len());
    for task in RetrievalTask::ALL {
        reports.push(evaluate_task_on_embeddings(&queries, &archive, &labels, &labels, task, k)?);
    }
    let table = format_report_table(&reports)?;
    let path = out.join(REPORT_NAME);
    fs::write(&path, &table)?;
    print!("{table}");
    println!("report written to {}", path.display());
    Ok(())
}

pub fn param_count(config: &ConfigArgs) -> Result<()> {
    let cfg = load_config(config)?;
    let model = cfg.model.to_model_config()?;
    let counts = count_parameters(&model)?;
    println!(
        "{} on {} (dim {}, depth {}, heads {}), patch {}, cross depth {}",
        model.variant,
        model.vit.name,
        model.vit.dim,
        model.vit.depth,
        model.vit.heads,
        model.patch_size,
        model.cross_depth
    );
    let rows = [
        ("patch_embeds", counts.patch_embeds),
        ("sensor_path", counts.sensor_path),
        ("cross_path", counts.cross_path),
        ("decoders", counts.decoders),
        ("heads", counts.heads),
        ("tokens_and_norms", counts.tokens_and_norms),
    ];
    for (name, value) in rows {
        println!("{name:<18}{value}");
    }
    let total = counts.total();
    println!("{:<18}{} ({:.2} M)", "total", total, total as f64 / 1e6);
    Ok(())
}

/// English ordinal for a 1-based rank: 1st, 2nd, 3rd, 4th, ..., 11th..13th.
fn ordinal(n: usize) -> String {
    let suffix = if (11..=13).contains(&(n % 100)) {
        "th"
    } else {
        match n % 10 {
            1 => "st",
            2 => "nd",
            3 => "rd",
            _ => "th",
        }
    };
    format!("{n}{suffix}")
}
