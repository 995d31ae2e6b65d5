use std::sync::Arc;

use lara_core::engine::{
    replay_trace, run_oracle_session, run_sweep, write_trace, CollectionSource, ExperimentConfig, SweepOptions,
};
use lara_core::simulation::{generate_collection, SyntheticConfig};
use lara_core::strategies::{StrategyConfig, StrategyKind};
use lara_core::trec_io::{annotated_set, read_judgment_log, Manifest, PairKey};
use lara_core::Collection;

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        topics: 5,
        docs_per_topic: 40,
        systems: 6,
        max_grade: 2,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn collection_survives_the_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_collection(&small(3)).unwrap();
    let manifest = generated.write_to(dir.path()).unwrap();
    let loaded = Collection::load(&Manifest::load(&manifest).unwrap()).unwrap();
    let direct = generated.to_collection().unwrap();
    assert_eq!(loaded.fingerprint(), direct.fingerprint());
    assert_eq!(loaded.len(), 200);
    assert_eq!(loaded.max_grade, 2);
    assert_eq!(loaded.truth_grades(), direct.truth_grades());
    let key = loaded.pairs()[17].clone();
    let id = loaded.lookup(&key).unwrap();
    assert_eq!(loaded.grade_vector(id), direct.grade_vector(direct.lookup(&key).unwrap()));
    assert!(loaded.topic_text(&key.topic).is_some());
    assert!(loaded.doc_text(&key.doc).is_some());
}

#[test]
fn manifest_and_generator_sources_agree() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_collection(&small(4)).unwrap().write_to(dir.path()).unwrap();
    let run = |collection| {
        let cfg = ExperimentConfig {
            collection,
            methods: vec![StrategyConfig::new(StrategyKind::Lara), StrategyConfig::new(StrategyKind::Mtf)],
            budget_ratios: vec!["1/8".parse().unwrap(), "1/2".parse().unwrap()],
            seeds: vec![4],
            metric: None,
            ndcg_cutoff: 1000,
            output_dir: dir.path().join("out"),
        };
        run_sweep(&cfg, &SweepOptions::default()).unwrap().rows
    };
    assert_eq!(run(CollectionSource::Manifest(manifest)), run(CollectionSource::Synthetic(small(0))));
}

#[test]
fn written_trace_replays_through_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_collection(&small(5)).unwrap();
    let c = Arc::new(generated.to_collection().unwrap());
    let cfg = StrategyConfig::new(StrategyKind::Lara);
    let out = run_oracle_session(&c, &cfg, 30, 2, &generated.oracle()).unwrap();
    assert_eq!(out.trace.len(), 30);

    let path = dir.path().join("log.jsonl");
    write_trace(&out.trace, "s", &path).unwrap();
    let entries = read_judgment_log(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(entries.len(), 30);
    let judged = annotated_set(&entries);
    for t in &out.trace {
        assert_eq!(judged[&PairKey::new(&t.topic_id, &t.doc_id)], t.grade);
    }
    assert_eq!(replay_trace(&c, &cfg, 30, 2, &out.trace).unwrap(), out.labels);
    // Trace bytes are reproducible.
    let again = dir.path().join("again.jsonl");
    write_trace(&out.trace, "s", &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
