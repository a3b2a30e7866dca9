use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{DecoderSpec, ModelConfig, PerModality, Pooling, Variant, VitSpec};
use crate::datasets::Split;

fn rec(id: &str, m: Modality, v: &[f64]) -> EmbeddingRecord {
    EmbeddingRecord { image_id: id.to_string(), modality: m, vector: v.to_vec() }
}

fn labels(ids: &[u32]) -> BTreeSet<u32> {
    ids.iter().copied().collect()
}

fn no_exclude() -> BTreeSet<&'static str> {
    BTreeSet::new()
}

#[test]
fn task_tags_round_trip_and_classify() {
    for task in RetrievalTask::ALL {
        assert_eq!(RetrievalTask::from_str(task.key()).unwrap(), task);
        assert_eq!(task.to_string().to_lowercase(), task.key());
    }
    assert!(RetrievalTask::S1ToS1.is_uni_modal());
    assert!(RetrievalTask::S2ToS2.is_uni_modal());
    assert!(!RetrievalTask::S1ToS2.is_uni_modal());
    assert_eq!(RetrievalTask::S2ToS1.query_modality(), Modality::S2);
    assert_eq!(RetrievalTask::S2ToS1.archive_modality(), Modality::S1);
    assert!(RetrievalTask::from_str("s1=>s2").is_err());
}

#[test]
fn topk_ranks_by_descending_cosine() {
    let index = vec![
        rec("a", Modality::S1, &[1.0, 0.0]),
        rec("b", Modality::S1, &[0.0, 1.0]),
        rec("c", Modality::S1, &[-1.0, 0.0]),
    ];
    let got = query_topk(&index, &[1.0, 0.0], 2, &no_exclude()).unwrap();
    assert_eq!(got, vec!["a", "b"]);
}

#[test]
fn topk_is_invariant_to_positive_query_scaling() {
    let index = vec![
        rec("a", Modality::S1, &[0.3, 0.9, 0.1]),
        rec("b", Modality::S1, &[0.8, 0.2, 0.5]),
        rec("c", Modality::S1, &[0.1, 0.4, 0.7]),
        rec("d", Modality::S1, &[0.9, 0.9, 0.9]),
    ];
    let q = [0.2, 0.5, 0.4];
    let scaled: Vec<f64> = q.iter().map(|v| v * 7.5).collect();
    assert_eq!(
        query_topk(&index, &q, 4, &no_exclude()).unwrap(),
        query_topk(&index, &scaled, 4, &no_exclude()).unwrap()
    );
}

#[test]
fn topk_breaks_ties_by_ascending_id() {
    let index = vec![
        rec("delta", Modality::S1, &[2.0, 0.0]),
        rec("alpha", Modality::S1, &[1.0, 0.0]),
        rec("bravo", Modality::S1, &[3.0, 0.0]),
    ];
    // All three have cosine 1 with the query: order must be alphabetical.
    let got = query_topk(&index, &[5.0, 0.0], 3, &no_exclude()).unwrap();
    assert_eq!(got, vec!["alpha", "bravo", "delta"]);
}

#[test]
fn topk_honors_exclusions_and_validates_input() {
    let index = vec![
        rec("a", Modality::S1, &[1.0, 0.0]),
        rec("b", Modality::S1, &[0.9, 0.1]),
    ];
    let exclude: BTreeSet<&str> = ["a"].into();
    assert_eq!(query_topk(&index, &[1.0, 0.0], 1, &exclude).unwrap(), vec!["b"]);

    let err = query_topk(&index, &[1.0, 0.0], 3, &no_exclude()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "got: {err}");
    assert!(err.to_string().contains("k=3"));
    assert!(matches!(
        query_topk(&index, &[0.0, 0.0], 1, &no_exclude()),
        Err(Error::Data(_))
    ));
}

#[test]
fn f1_matches_worked_examples() {
    let q = labels(&[1, 2]);
    assert_eq!(f1_at_k(&q, &[labels(&[1, 2]), labels(&[1, 2])]).unwrap(), 1.0);
    assert_eq!(f1_at_k(&q, &[labels(&[3])]).unwrap(), 0.0);
    // One retrieved item with labels {1}: precision 1, recall 1/2, F1 2/3.
    let got = f1_at_k(&q, &[labels(&[1])]).unwrap();
    assert!((got - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn f1_scores_empty_retrieved_sets_as_zero() {
    let q = labels(&[1]);
    let got = f1_at_k(&q, &[labels(&[1]), BTreeSet::new()]).unwrap();
    assert!((got - 0.5).abs() < 1e-12);
}

#[test]
fn f1_rejects_empty_inputs() {
    assert!(matches!(
        f1_at_k(&BTreeSet::new(), &[labels(&[1])]),
        Err(Error::Data(_))
    ));
    assert!(matches!(f1_at_k(&labels(&[1]), &[]), Err(Error::Data(_))));
}

#[test]
fn f1_is_one_exactly_when_every_retrieved_set_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng| -> BTreeSet<u32> {
            let n = rng.random_range(1..=4);
            (0..n).map(|_| rng.random_range(0..5u32)).collect()
        };
        let q = draw(&mut rng);
        let retrieved: Vec<BTreeSet<u32>> =
            (0..rng.random_range(1..=6)).map(|_| draw(&mut rng)).collect();
        let f1 = f1_at_k(&q, &retrieved).unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&f1));
        let all_match = retrieved.iter().all(|r| *r == q);
        assert_eq!(f1 >= 1.0 - 1e-12, all_match, "q={q:?} retrieved={retrieved:?}");
    }
}

/// Brute-force per-query evaluation: independent cosine, selection sort with
/// explicit tie rule, direct F1 formula.
fn oracle_query(
    index: &[EmbeddingRecord],
    query: &[f64],
    exclude: Option<&str>,
    query_labels: &BTreeSet<u32>,
    archive_labels: &BTreeMap<String, BTreeSet<u32>>,
    k: usize,
) -> (Vec<String>, f64) {
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut remaining: Vec<&EmbeddingRecord> =
        index.iter().filter(|r| Some(r.image_id.as_str()) != exclude).collect();
    let mut ranked = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (si, sb) = (
                cosine(query, &remaining[i].vector),
                cosine(query, &remaining[best].vector),
            );
            if si > sb || (si == sb && remaining[i].image_id < remaining[best].image_id) {
                best = i;
            }
        }
        ranked.push(remaining.remove(best).image_id.clone());
    }
    let top: Vec<String> = ranked[..k].to_vec();
    let mut total = 0.0;
    for id in &top {
        let r = &archive_labels[id];
        let overlap = query_labels.intersection(r).count() as f64;
        let (p, rec) = (overlap / r.len() as f64, overlap / query_labels.len() as f64);
        if p + rec > 0.0 {
            total += 2.0 * p * rec / (p + rec);
        }
    }
    (top, total / k as f64)
}

#[test]
fn all_four_tasks_match_brute_force_on_a_toy_archive() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ids = ["x", "y", "z"];
    let all_labels = [labels(&[0, 1]), labels(&[1]), labels(&[2])];
    let mut embeddings = Vec::new();
    for m in Modality::BOTH {
        for id in ids {
            let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            embeddings.push(rec(id, m, &v));
        }
    }
    let label_map: BTreeMap<String, BTreeSet<u32>> = ids
        .iter()
        .zip(&all_labels)
        .map(|(id, l)| (id.to_string(), l.clone()))
        .collect();

    for task in RetrievalTask::ALL {
        let k = if task.is_uni_modal() { 2 } else { 3 };
        let report =
            evaluate_task_on_embeddings(&embeddings, &embeddings, &label_map, &label_map, task, k)
                .unwrap();
        assert_eq!(report.task, task);
        assert_eq!(report.per_query.len(), 3);
        let index: Vec<EmbeddingRecord> = embeddings
            .iter()
            .filter(|r| r.modality == task.archive_modality())
            .cloned()
            .collect();
        let mut f1_sum = 0.0;
        for (qi, query) in embeddings
            .iter()
            .filter(|r| r.modality == task.query_modality())
            .enumerate()
        {
            let exclude = task.is_uni_modal().then_some(query.image_id.as_str());
            let (want_ids, want_f1) = oracle_query(
                &index,
                &query.vector,
                exclude,
                &label_map[&query.image_id],
                &label_map,
                k,
            );
            assert_eq!(report.per_query[qi].retrieved, want_ids, "task {task} query {qi}");
            assert!((report.per_query[qi].f1 - want_f1).abs() < 1e-12);
            f1_sum += want_f1;
        }
        assert!((report.f1 - f1_sum / 3.0).abs() < 1e-12);
        assert!(report.per_query.iter().all(|q| q.retrieved.len() == k));
    }
}

fn random_embedding_set(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in Modality::BOTH {
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            out.push(rec(&format!("img_{i:02}"), m, &v));
        }
    }
    out
}

fn uniform_labels(n: usize, seed: u64) -> BTreeMap<String, BTreeSet<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let set: BTreeSet<u32> =
                (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..6u32)).collect();
            (format!("img_{i:02}"), set)
        })
        .collect()
}

#[test]
fn uni_modal_tasks_never_return_the_query_itself() {
    let embeddings = random_embedding_set(10, 5, 7);
    let label_map = uniform_labels(10, 8);
    for task in [RetrievalTask::S1ToS1, RetrievalTask::S2ToS2] {
        let report =
            evaluate_task_on_embeddings(&embeddings, &embeddings, &label_map, &label_map, task, 9)
                .unwrap();
        for q in &report.per_query {
            assert!(!q.retrieved.contains(&q.query_id));
            assert_eq!(q.retrieved.len(), 9);
        }
    }
}

#[test]
fn cross_modal_tasks_keep_the_paired_counterpart() {
    // Give both modalities of each pair the same distinctive vector: the
    // geographic counterpart is then the best cross-modal match and must be
    // ranked first, not excluded.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut embeddings = Vec::new();
    for i in 0..6 {
        let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.1).collect();
        for m in Modality::BOTH {
            embeddings.push(rec(&format!("img_{i:02}"), m, &v));
        }
    }
    let label_map = uniform_labels(6, 10);
    for task in [RetrievalTask::S1ToS2, RetrievalTask::S2ToS1] {
        let report =
            evaluate_task_on_embeddings(&embeddings, &embeddings, &label_map, &label_map, task, 1)
                .unwrap();
        for q in &report.per_query {
            assert_eq!(q.retrieved, vec![q.query_id.clone()], "task {task}");
        }
    }
}

#[test]
fn reports_are_invariant_to_per_vector_positive_rescaling() {
    let embeddings = random_embedding_set(8, 6, 13);
    let label_map = uniform_labels(8, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let scaled: Vec<EmbeddingRecord> = embeddings
        .iter()
        .map(|r| {
            let c = 0.01 + 100.0 * rng.random::<f64>();
            let mut out = r.clone();
            out.vector.iter_mut().for_each(|v| *v *= c);
            out
        })
        .collect();
    for task in RetrievalTask::ALL {
        let a = evaluate_task_on_embeddings(&embeddings, &embeddings, &label_map, &label_map, task, 5)
            .unwrap();
        let b = evaluate_task_on_embeddings(&scaled, &scaled, &label_map, &label_map, task, 5)
            .unwrap();
        assert_eq!(a.f1.to_bits(), b.f1.to_bits());
        for (qa, qb) in a.per_query.iter().zip(&b.per_query) {
            assert_eq!(qa.retrieved, qb.retrieved);
        }
    }
}

#[test]
fn full_archive_retrieval_sees_the_same_candidate_pool_across_tasks() {
    // With query ids disjoint from the archive, neither S1->S2 nor S2->S2
    // excludes anything, so retrieving k = |archive| returns the same id SET.
    let archive = random_embedding_set(7, 4, 20);
    let mut queries = random_embedding_set(3, 4, 21);
    for q in &mut queries {
        q.image_id = format!("query_{}", q.image_id);
    }
    let mut query_labels = BTreeMap::new();
    for (old, set) in uniform_labels(3, 22) {
        query_labels.insert(format!("query_{old}"), set);
    }
    let archive_labels = uniform_labels(7, 23);

    let a = evaluate_task_on_embeddings(
        &queries,
        &archive,
        &query_labels,
        &archive_labels,
        RetrievalTask::S1ToS2,
        7,
    )
    .unwrap();
    let b = evaluate_task_on_embeddings(
        &queries,
        &archive,
        &query_labels,
        &archive_labels,
        RetrievalTask::S2ToS2,
        7,
    )
    .unwrap();
    for (qa, qb) in a.per_query.iter().zip(&b.per_query) {
        let set_a: BTreeSet<&String> = qa.retrieved.iter().collect();
        let set_b: BTreeSet<&String> = qb.retrieved.iter().collect();
        assert_eq!(set_a, set_b);
    }
}

#[test]
fn label_indicator_embeddings_beat_the_random_baseline() {
    // Oracle features: the embedding IS the label indicator vector, identical
    // across modalities. Retrieval then ranks same-labeled images first, so
    // every task must score at least the seeded random ranking.
    let label_map = uniform_labels(12, 30);
    let mut embeddings = Vec::new();
    for m in Modality::BOTH {
        for (id, set) in &label_map {
            let mut v = vec![0.0; 6];
            for &l in set {
                v[l as usize] = 1.0;
            }
            embeddings.push(rec(id, m, &v));
        }
    }
    let labeled: Vec<(String, BTreeSet<u32>)> =
        label_map.iter().map(|(id, s)| (id.clone(), s.clone())).collect();
    for task in RetrievalTask::ALL {
        let report =
            evaluate_task_on_embeddings(&embeddings, &embeddings, &label_map, &label_map, task, 5)
                .unwrap();
        let baseline =
            random_ranking_f1(&labeled, &labeled, 5, task.is_uni_modal(), 333).unwrap();
        assert!(
            report.f1 >= baseline,
            "task {task}: oracle {} < random {baseline}",
            report.f1
        );
    }
}

#[test]
fn evaluation_errors_name_the_failing_constraint() {
    let embeddings = random_embedding_set(3, 4, 40);
    let label_map = uniform_labels(3, 41);
    // Uni-modal: 3 archive records minus self leaves 2 candidates < k=3.
    let err = evaluate_task_on_embeddings(
        &embeddings,
        &embeddings,
        &label_map,
        &label_map,
        RetrievalTask::S1ToS1,
        3,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)), "got: {err}");
    assert!(err.to_string().contains("k=3"), "got: {err}");

    // Cross-modal with k = archive size passes the same configuration.
    evaluate_task_on_embeddings(
        &embeddings,
        &embeddings,
        &label_map,
        &label_map,
        RetrievalTask::S1ToS2,
        3,
    )
    .unwrap();

    let no_queries: Vec<EmbeddingRecord> = embeddings
        .iter()
        .filter(|r| r.modality == Modality::S2)
        .cloned()
        .collect();
    let err = evaluate_task_on_embeddings(
        &no_queries,
        &embeddings,
        &label_map,
        &label_map,
        RetrievalTask::S1ToS1,
        1,
    )
    .unwrap_err();
    assert!(err.to_string().contains("no query embeddings"), "got: {err}");
}

#[test]
fn embeddings_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.tsv");
    let records = vec![
        rec("a", Modality::S1, &[0.1, -2.5e-17, std::f64::consts::PI]),
        rec("a", Modality::S2, &[1.0, 2.0, 3.0]),
        rec("b", Modality::S1, &[-0.0, f64::MIN_POSITIVE, 9.9]),
    ];
    save_embeddings(&path, &records).unwrap();
    let back = load_embeddings(&path).unwrap();
    assert_eq!(records.len(), back.len());
    for (want, got) in records.iter().zip(&back) {
        assert_eq!(want.image_id, got.image_id);
        assert_eq!(want.modality, got.modality);
        let want_bits: Vec<u64> = want.vector.iter().map(|v| v.to_bits()).collect();
        let got_bits: Vec<u64> = got.vector.iter().map(|v| v.to_bits()).collect();
        assert_eq!(want_bits, got_bits);
    }
}

#[test]
fn embeddings_io_rejects_invalid_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.tsv");

    let dup = vec![rec("a", Modality::S1, &[1.0]), rec("a", Modality::S1, &[2.0])];
    assert!(matches!(save_embeddings(&path, &dup), Err(Error::Data(_))));
    let ragged = vec![rec("a", Modality::S1, &[1.0]), rec("b", Modality::S1, &[1.0, 2.0])];
    assert!(matches!(save_embeddings(&path, &ragged), Err(Error::Data(_))));
    let nan = vec![rec("a", Modality::S1, &[f64::NAN])];
    assert!(matches!(save_embeddings(&path, &nan), Err(Error::Data(_))));
    let empty = vec![rec("a", Modality::S1, &[])];
    assert!(matches!(save_embeddings(&path, &empty), Err(Error::Data(_))));

    let check = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        let err = load_embeddings(&p).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{name}: got {err}");
    };
    check("fields.tsv", "a\ts1\n");
    check("modality.tsv", "a\ts3\t1.0\n");
    check("value.tsv", "a\ts1\t1.0,x\n");
    check("dup.tsv", "a\ts1\t1.0\na\ts1\t2.0\n");
    check("dim.tsv", "a\ts1\t1.0\nb\ts1\t1.0,2.0\n");
    assert!(matches!(
        load_embeddings(&dir.path().join("missing.tsv")),
        Err(Error::Data(_))
    ));
}

#[test]
fn report_table_has_a_stable_layout() {
    let make = |task: RetrievalTask, f1: f64| RetrievalReport {
        task,
        k: 10,
        f1,
        per_query: vec![QueryResult {
            query_id: "q".to_string(),
            retrieved: vec!["r".to_string(); 10],
            f1,
        }],
    };
    let reports = vec![
        make(RetrievalTask::S1ToS1, 0.7123),
        make(RetrievalTask::S2ToS2, 0.789),
        make(RetrievalTask::S1ToS2, 0.6012),
        make(RetrievalTask::S2ToS1, 0.5987),
    ];
    let table = format_report_table(&reports).unwrap();
    let expected = "retrieval F1@10 over 1 queries\n\n\
                    uni-modal               cross-modal\n\
                    s1->s1      s2->s2      s1->s2      s2->s1\n\
                    0.7123      0.7890      0.6012      0.5987\n";
    assert_eq!(table, expected);

    assert!(matches!(format_report_table(&reports[..3]), Err(Error::Data(_))));
    let mut doubled = reports.clone();
    doubled.push(make(RetrievalTask::S1ToS1, 0.5));
    assert!(matches!(format_report_table(&doubled), Err(Error::Data(_))));
}

fn tiny_model() -> CsmaeModel {
    let cfg = ModelConfig {
        variant: Variant::Sesd,
        vit: VitSpec { name: "tiny".into(), dim: 16, depth: 2, heads: 2 },
        cross_depth: 1,
        decoder: DecoderSpec { blocks: 1, dim: 8, heads: 2 },
        patch_size: 4,
        image_side: 8,
        channels: PerModality::new(2, 10),
        pooling: Pooling::Gap,
        per_modality_mask_token: false,
    };
    CsmaeModel::init(cfg, 3).unwrap()
}

fn synthetic_pairs(n: usize, seed: u64) -> Vec<MultiModalPair> {
    let side = tiny_model().config().image_side;
    crate::datasets::generate_synthetic(n, side, 3, seed).unwrap()
}

#[test]
fn model_embeddings_cover_both_modalities() {
    let model = tiny_model();
    let pairs = synthetic_pairs(4, 50);
    let records = extract_embeddings(&model, &pairs).unwrap();
    assert_eq!(records.len(), 8);
    let dim = model.feature_dim();
    for r in &records {
        assert_eq!(r.vector.len(), dim);
        assert!(r.vector.iter().all(|v| v.is_finite()));
    }
    let s1 = records.iter().filter(|r| r.modality == Modality::S1).count();
    assert_eq!(s1, 4);
}

#[test]
fn end_to_end_task_evaluation_with_a_model() {
    let model = tiny_model();
    let pairs = synthetic_pairs(6, 51);
    let reports = evaluate_all_tasks(&model, &pairs, &pairs, 2).unwrap();
    assert_eq!(reports.len(), 4);
    for (report, task) in reports.iter().zip(RetrievalTask::ALL) {
        assert_eq!(report.task, task);
        assert_eq!(report.per_query.len(), 6);
        assert!((0.0..=1.0).contains(&report.f1));
        assert!(report.per_query.iter().all(|q| q.retrieved.len() == 2));
    }

    let single = evaluate_task(&model, &pairs, &pairs, RetrievalTask::S1ToS2, 2).unwrap();
    assert_eq!(single.f1.to_bits(), reports[2].f1.to_bits());

    let err = evaluate_task(&model, &pairs, &pairs, RetrievalTask::S1ToS1, 6).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "got: {err}");
}

#[test]
fn random_baseline_is_seeded_and_bounded() {
    let labeled: Vec<(String, BTreeSet<u32>)> = uniform_labels(9, 60)
        .into_iter()
        .collect();
    let a = random_ranking_f1(&labeled, &labeled, 4, true, 1).unwrap();
    let b = random_ranking_f1(&labeled, &labeled, 4, true, 1).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!((0.0..=1.0).contains(&a));
    assert!(matches!(
        random_ranking_f1(&labeled, &labeled, 9, true, 1),
        Err(Error::Data(_))
    ));
    assert!(random_ranking_f1(&labeled, &labeled, 9, false, 1).is_ok());
}

#[test]
fn split_images_and_pairs_interoperate() {
    // Pairs restricted to one split keep working end to end.
    let model = tiny_model();
    let pairs = synthetic_pairs(12, 52);
    let train: Vec<MultiModalPair> =
        pairs.iter().filter(|p| p.split == Split::Train).cloned().collect();
    assert!(train.len() >= 3);
    let report = evaluate_task(&model, &train, &train, RetrievalTask::S2ToS1, 2).unwrap();
    assert_eq!(report.per_query.len(), train.len());
}
