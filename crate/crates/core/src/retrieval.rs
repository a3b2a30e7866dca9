//! Sensor-agnostic image retrieval: exact cosine k-NN over extracted
//! features, multi-label F1 scoring, and the four query/archive task
//! combinations (same-sensor and cross-sensor in both directions).
//!
//! Retrieval is exhaustive and deterministic: candidates are ranked by
//! descending cosine similarity with ties broken by ascending image id, so
//! identical inputs always produce identical reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::aview1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{CsmaeModel, Modality};
use crate::datasets::MultiModalPair;
use crate::error::{Error, Result};
use crate::objectives::cosine_similarity;
use crate::rngutil::{derive_seed, SeedDomain};

/// One retrieval task: queries from the first modality, candidates from the
/// second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RetrievalTask {
    S1ToS1,
    S2ToS2,
    S1ToS2,
    S2ToS1,
}

impl RetrievalTask {
    /// All tasks, uni-modal first.
    pub const ALL: [RetrievalTask; 4] = [
        RetrievalTask::S1ToS1,
        RetrievalTask::S2ToS2,
        RetrievalTask::S1ToS2,
        RetrievalTask::S2ToS1,
    ];

    pub fn query_modality(self) -> Modality {
        match self {
            RetrievalTask::S1ToS1 | RetrievalTask::S1ToS2 => Modality::S1,
            RetrievalTask::S2ToS2 | RetrievalTask::S2ToS1 => Modality::S2,
        }
    }

    pub fn archive_modality(self) -> Modality {
        match self {
            RetrievalTask::S1ToS1 | RetrievalTask::S2ToS1 => Modality::S1,
            RetrievalTask::S2ToS2 | RetrievalTask::S1ToS2 => Modality::S2,
        }
    }

    /// Uni-modal tasks exclude the query's own record from its candidates;
    /// cross-modal tasks keep the geographically paired image as a legitimate
    /// candidate.
    pub fn is_uni_modal(self) -> bool {
        self.query_modality() == self.archive_modality()
    }

    /// Stable lowercase tag used in files and CLI arguments.
    pub fn key(self) -> &'static str {
        match self {
            RetrievalTask::S1ToS1 => "s1->s1",
            RetrievalTask::S2ToS2 => "s2->s2",
            RetrievalTask::S1ToS2 => "s1->s2",
            RetrievalTask::S2ToS1 => "s2->s1",
        }
    }
}

impl fmt::Display for RetrievalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.query_modality(), self.archive_modality())
    }
}

impl FromStr for RetrievalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1->s1" => Ok(RetrievalTask::S1ToS1),
            "s2->s2" => Ok(RetrievalTask::S2ToS2),
            "s1->s2" => Ok(RetrievalTask::S1ToS2),
            "s2->s1" => Ok(RetrievalTask::S2ToS1),
            other => Err(Error::config(format!(
                "unknown retrieval task `{other}` (expected s1->s1, s2->s2, s1->s2, or s2->s1)"
            ))),
        }
    }
}

/// One image's feature vector under one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Outcome of one query: the ids ranked first, and the query's mean top-k F1.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    pub retrieved: Vec<String>,
    pub f1: f64,
}

/// Evaluation of one task over a query set.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub task: RetrievalTask,
    pub k: usize,
    /// Mean over queries of the per-query top-k F1; always in `[0, 1]`.
    pub f1: f64,
    pub per_query: Vec<QueryResult>,
}

/// Ranks `index` by descending cosine similarity to `query`, ties broken by
/// ascending image id, and returns the first `k` ids. Records whose id is in
/// `exclude` never appear.
pub fn query_topk(
    index: &[EmbeddingRecord],
    query: &[f64],
    k: usize,
    exclude: &BTreeSet<&str>,
) -> Result<Vec<String>> {
    if query.iter().all(|&v| v == 0.0) {
        return Err(Error::data("zero-norm query vector"));
    }
    let mut scored: Vec<(&str, f64)> = Vec::with_capacity(index.len());
    for record in index {
        if exclude.contains(record.image_id.as_str()) {
            continue;
        }
        let sim = cosine_similarity(aview1(query), aview1(&record.vector))?;
        if !sim.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite similarity for candidate {}",
                record.image_id
            )));
        }
        scored.push((&record.image_id, sim));
    }
    if k > scored.len() {
        return Err(Error::data(format!(
            "k={k} exceeds the {} available candidates",
            scored.len()
        )));
    }
    scored.sort_by(|(id_a, sim_a), (id_b, sim_b)| {
        sim_b.total_cmp(sim_a).then_with(|| id_a.cmp(id_b))
    });
    Ok(scored[..k].iter().map(|(id, _)| id.to_string()).collect())
}

/// Mean top-k F1 of one query: per retrieved item, precision is the label
/// overlap over the item's labels and recall is the overlap over the query's
/// labels; an item with no overlap (or an empty label set) scores 0.
pub fn f1_at_k(query_labels: &BTreeSet<u32>, retrieved_labels: &[BTreeSet<u32>]) -> Result<f64> {
    if query_labels.is_empty() {
        return Err(Error::data("query has an empty label set"));
    }
    if retrieved_labels.is_empty() {
        return Err(Error::data("no retrieved label sets to score"));
    }
    let mut total = 0.0;
    for labels in retrieved_labels {
        if labels.is_empty() {
            continue;
        }
        let overlap = query_labels.intersection(labels).count() as f64;
        let precision = overlap / labels.len() as f64;
        let recall = overlap / query_labels.len() as f64;
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / retrieved_labels.len() as f64)
}

/// Extracts one embedding per modality per pair, in pair order (all modality-1
/// records first, then all modality-2 records).
pub fn extract_embeddings(
    model: &CsmaeModel,
    pairs: &[MultiModalPair],
) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::with_capacity(pairs.len() * 2);
    for m in Modality::BOTH {
        for pair in pairs {
            let image = match m {
                Modality::S1 => &pair.img1,
                Modality::S2 => &pair.img2,
            };
            let vector = model.extract_feature(image, m)?.to_vec();
            records.push(EmbeddingRecord { image_id: pair.id.clone(), modality: m, vector });
        }
    }
    Ok(records)
}

fn label_map(pairs: &[MultiModalPair]) -> BTreeMap<String, BTreeSet<u32>> {
    pairs.iter().map(|p| (p.id.clone(), p.labels.clone())).collect()
}

/// Evaluates one task over precomputed embeddings. `query_labels` and
/// `archive_labels` map image ids to their label sets.
pub fn evaluate_task_on_embeddings(
    queries: &[EmbeddingRecord],
    archive: &[EmbeddingRecord],
    query_labels: &BTreeMap<String, BTreeSet<u32>>,
    archive_labels: &BTreeMap<String, BTreeSet<u32>>,
    task: RetrievalTask,
    k: usize,
) -> Result<RetrievalReport> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let index: Vec<EmbeddingRecord> = archive
        .iter()
        .filter(|r| r.modality == task.archive_modality())
        .cloned()
        .collect();
    if index.len() < k {
        return Err(Error::data(format!(
            "task {task}: archive offers only {} candidates, need k={k}",
            index.len()
        )));
    }
    let task_queries: Vec<&EmbeddingRecord> =
        queries.iter().filter(|r| r.modality == task.query_modality()).collect();
    if task_queries.is_empty() {
        return Err(Error::data(format!("task {task}: no query embeddings")));
    }

    let mut per_query = Vec::with_capacity(task_queries.len());
    let mut f1_sum = 0.0;
    for query in task_queries {
        let mut exclude = BTreeSet::new();
        if task.is_uni_modal() {
            exclude.insert(query.image_id.as_str());
        }
        let retrieved = query_topk(&index, &query.vector, k, &exclude).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("task {task}: {msg}")),
            other => other,
        })?;
        let labels = query_labels.get(&query.image_id).ok_or_else(|| {
            Error::data(format!("no labels for query {}", query.image_id))
        })?;
        let retrieved_labels: Vec<BTreeSet<u32>> = retrieved
            .iter()
            .map(|id| {
                archive_labels
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::data(format!("no labels for archive image {id}")))
            })
            .collect::<Result<_>>()?;
        let f1 = f1_at_k(labels, &retrieved_labels)?;
        f1_sum += f1;
        per_query.push(QueryResult { query_id: query.image_id.clone(), retrieved, f1 });
    }
    Ok(RetrievalReport {
        task,
        k,
        f1: f1_sum / per_query.len() as f64,
        per_query,
    })
}

/// Extracts features for both sides and evaluates one task.
pub fn evaluate_task(
    model: &CsmaeModel,
    queries: &[MultiModalPair],
    archive: &[MultiModalPair],
    task: RetrievalTask,
    k: usize,
) -> Result<RetrievalReport> {
    let query_emb = extract_embeddings(model, queries)?;
    let archive_emb = extract_embeddings(model, archive)?;
    evaluate_task_on_embeddings(
        &query_emb,
        &archive_emb,
        &label_map(queries),
        &label_map(archive),
        task,
        k,
    )
}

/// Evaluates all four tasks, extracting each feature exactly once.
pub fn evaluate_all_tasks(
    model: &CsmaeModel,
    queries: &[MultiModalPair],
    archive: &[MultiModalPair],
    k: usize,
) -> Result<Vec<RetrievalReport>> {
    let query_emb = extract_embeddings(model, queries)?;
    let archive_emb = extract_embeddings(model, archive)?;
    let query_labels = label_map(queries);
    let archive_labels = label_map(archive);
    RetrievalTask::ALL
        .iter()
        .map(|&task| {
            evaluate_task_on_embeddings(
                &query_emb,
                &archive_emb,
                &query_labels,
                &archive_labels,
                task,
                k,
            )
        })
        .collect()
}

/// Mean F1 of ranking the archive uniformly at random (seeded), as a floor to
/// compare trained retrieval against. Queries and archive are `(id, labels)`
/// lists; `exclude_self` mirrors the uni-modal rule.
pub fn random_ranking_f1(
    queries: &[(String, BTreeSet<u32>)],
    archive: &[(String, BTreeSet<u32>)],
    k: usize,
    exclude_self: bool,
    seed: u64,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::data("no queries for the random-ranking baseline"));
    }
    let mut f1_sum = 0.0;
    for (qi, (query_id, query_labels)) in queries.iter().enumerate() {
        let mut candidates: Vec<&BTreeSet<u32>> = archive
            .iter()
            .filter(|(id, _)| !(exclude_self && id == query_id))
            .map(|(_, labels)| labels)
            .collect();
        if k > candidates.len() {
            return Err(Error::data(format!(
                "k={k} exceeds the {} available candidates",
                candidates.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Eval, qi as u64));
        candidates.shuffle(&mut rng);
        let retrieved: Vec<BTreeSet<u32>> = candidates[..k].iter().map(|&l| l.clone()).collect();
        f1_sum += f1_at_k(query_labels, &retrieved)?;
    }
    Ok(f1_sum / queries.len() as f64)
}

/// Writes embeddings as `image_id<TAB>modality<TAB>v1,v2,...,vd`, one record
/// per line, with full-precision decimal floats.
pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    validate_embeddings(records)?;
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp)?);
    for r in records {
        let values: Vec<String> = r.vector.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}\t{}\t{}", r.image_id, r.modality.key(), values.join(","))?;
    }
    out.flush()?;
    drop(out);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads an embeddings file written by [`save_embeddings`], enforcing unique
/// `(id, modality)` keys, a consistent dimension, and finite entries.
pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open embeddings {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "embeddings line {lineno}: expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(Error::data(format!("embeddings line {lineno}: empty image id")));
        }
        let modality = Modality::from_str(fields[1])
            .map_err(|e| Error::data(format!("embeddings line {lineno}: {e}")))?;
        let vector: Vec<f64> = fields[2]
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::data(format!("embeddings line {lineno}: bad value `{v}`"))
                })
            })
            .collect::<Result<_>>()?;
        records.push(EmbeddingRecord { image_id: fields[0].to_string(), modality, vector });
    }
    validate_embeddings(&records)?;
    Ok(records)
}

fn validate_embeddings(records: &[EmbeddingRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for r in records {
        if r.vector.is_empty() {
            return Err(Error::data(format!("embedding {} is empty", r.image_id)));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "embedding {} ({}) has a non-finite entry",
                r.image_id, r.modality
            )));
        }
        match dim {
            None => dim = Some(r.vector.len()),
            Some(d) if d != r.vector.len() => {
                return Err(Error::data(format!(
                    "embedding {} has dimension {}, expected {d}",
                    r.image_id,
                    r.vector.len()
                )));
            }
            Some(_) => {}
        }
        if !seen.insert((r.image_id.as_str(), r.modality)) {
            return Err(Error::data(format!(
                "duplicate embedding for ({}, {})",
                r.image_id, r.modality
            )));
        }
    }
    Ok(())
}

/// Renders the four task scores as a fixed-width table: uni-modal columns
/// first, then cross-modal, one F1 row. Expects exactly one report per task.
pub fn format_report_table(reports: &[RetrievalReport]) -> Result<String> {
    let mut by_task = BTreeMap::new();
    for r in reports {
        if by_task.insert(r.task, r).is_some() {
            return Err(Error::data(format!("duplicate report for task {}", r.task)));
        }
    }
    if by_task.len() != RetrievalTask::ALL.len() {
        return Err(Error::data(format!(
            "report table needs all {} tasks, got {}",
            RetrievalTask::ALL.len(),
            by_task.len()
        )));
    }
    let ks: BTreeSet<usize> = reports.iter().map(|r| r.k).collect();
    if ks.len() != 1 {
        return Err(Error::data("reports disagree on k"));
    }
    let k = *ks.first().expect("nonempty");
    let n_queries = reports[0].per_query.len();

    let mut table = String::new();
    table.push_str(&format!("retrieval F1@{k} over {n_queries} queries\n\n"));
    table.push_str(&format!("{:24}{}\n", "uni-modal", "cross-modal"));
    let header: Vec<String> = RetrievalTask::ALL.iter().map(|t| format!("{:<12}", t.key())).collect();
    table.push_str(&format!("{}\n", header.join("").trim_end()));
    let row: Vec<String> = RetrievalTask::ALL
        .iter()
        .map(|t| format!("{:<12.4}", by_task[t].f1))
        .collect();
    table.push_str(&format!("{}\n", row.join("").trim_end()));
    Ok(table)
}

#[cfg(test)]
mod tests;
