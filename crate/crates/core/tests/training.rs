use std::collections::BTreeSet;

use awe_core::checkpoint::Checkpoint;
use awe_core::corpus::{generate_synthetic_corpus, mine_pairs, SegmentStore, SyntheticCorpus};
use awe_core::encoder::EncoderConfig;
use awe_core::expt::{
    run_combination_table, run_crosslingual_matrix, run_experiment, Combination, ExperimentPlan,
};
use awe_core::train::{train_model, TrainConfig, TrainingData};
use awe_core::SyntheticFamilySpec;

fn corpus(seed: u64) -> SyntheticCorpus {
    generate_synthetic_corpus(&SyntheticFamilySpec {
        n_word_types: 20,
        instances_per_type: 10,
        n_speakers: 4,
        seed,
        ..SyntheticFamilySpec::default()
    })
    .unwrap()
}

fn setup(c: &SyntheticCorpus, train: &[&str]) -> (TrainingData, SegmentStore) {
    let per_language: Vec<_> = train
        .iter()
        .map(|l| {
            let segs: Vec<_> = c.segments.iter().filter(|s| s.language_id == *l).cloned().collect();
            mine_pairs(&segs, 300, true, 7).unwrap()
        })
        .collect();
    let data = TrainingData::from_pairs(&c.features, &per_language).unwrap();
    let dev_segs: Vec<_> = c.segments.iter().filter(|s| s.language_id == "B2").cloned().collect();
    (data, SegmentStore::build(&c.features, &dev_segs).unwrap())
}

fn enc() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 32,
        embed_dim: 16,
        n_layers: 1,
        ..EncoderConfig::default()
    }
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let c = corpus(1);
    let (data, dev) = setup(&c, &["A0", "A1"]);
    let cfg = TrainConfig {
        epochs: 5,
        lr: 3e-3,
        batch_pairs: 50,
        ..TrainConfig::default()
    };
    let out = train_model(&data, &dev, &enc(), &cfg).unwrap();
    assert_eq!(out.log.len(), 5);
    let loss: Vec<f64> = out.log.iter().map(|e| e.mean_loss).collect();
    for e in 1..3 {
        assert!(loss[e] <= loss[e - 1] * 1.05, "{loss:?}");
    }
    assert!(loss[2] < loss[0], "{loss:?}");
    let best = out.log.iter().map(|e| e.dev_ap).fold(f64::MIN, f64::max);
    assert_eq!(out.checkpoint.meta.dev_score, best);
    assert_eq!(out.log[out.best_epoch as usize - 1].dev_ap, best);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let c = corpus(2);
    let (data, dev) = setup(&c, &["A0"]);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_model(&data, &dev, &enc(), &cfg).unwrap().checkpoint;
    let b = train_model(&data, &dev, &enc(), &cfg).unwrap().checkpoint;
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes, b.to_bytes().unwrap());
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), a);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.awec");
    a.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), a);
    assert_eq!(a.meta.training_languages, vec!["A0".to_string()]);

    let other = train_model(&data, &dev, &enc(), &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(other.checkpoint.params, a.params);
}

#[test]
fn dev_language_in_training_is_rejected() {
    let c = corpus(3);
    let (data, _) = setup(&c, &["B2"]);
    let dev_segs: Vec<_> = c.segments.iter().filter(|s| s.language_id == "B2").cloned().collect();
    let dev = SegmentStore::build(&c.features, &dev_segs).unwrap();
    assert!(train_model(&data, &dev, &enc(), &TrainConfig::default()).is_err());
}

fn tiny_plan() -> ExperimentPlan {
    ExperimentPlan {
        train_languages: vec!["A1".into(), "B1".into()],
        eval_languages: vec!["A0".into()],
        dev_language: "C0".into(),
        pairs_per_language: 100,
        seeds: vec![1, 2],
        corpus: SyntheticFamilySpec {
            n_families: 3,
            languages_per_family: 2,
            n_word_types: 12,
            instances_per_type: 8,
            n_speakers: 4,
            ..SyntheticFamilySpec::default()
        },
        combinations: vec![Combination {
            languages: vec!["A1".into(), "B1".into()],
            subset: false,
        }],
        sequences: vec![vec!["B1".into(), "C1".into(), "A1".into()]],
        encoder: EncoderConfig {
            hidden_dim: 8,
            embed_dim: 4,
            n_layers: 1,
            ..EncoderConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_pairs: 50,
            ..TrainConfig::default()
        },
        ..ExperimentPlan::default()
    }
}

#[test]
fn full_subset_fraction_equals_the_unsubsetted_run() {
    let plain = tiny_plan();
    let subset = ExperimentPlan {
        subset_fraction: 1.0,
        combinations: vec![Combination {
            subset: true,
            ..plain.combinations[0].clone()
        }],
        ..tiny_plan()
    };
    let a = run_combination_table(&plain).unwrap();
    let b = run_combination_table(&subset).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    assert!(a.rows.iter().all(|r| r.train_set == "A1+B1"));
}

#[test]
fn result_tables_are_reproducible() {
    let plan = tiny_plan();
    let a = run_combination_table(&plan).unwrap().to_csv();
    assert_eq!(a, run_combination_table(&plan).unwrap().to_csv());
}

#[test]
fn matrix_of_two_languages_has_two_cells_per_seed() {
    let plan = ExperimentPlan {
        matrix_languages: vec!["A1".into(), "B1".into()],
        seeds: vec![5],
        ..tiny_plan()
    };
    let t = run_crosslingual_matrix(&plan).unwrap();
    let cells: BTreeSet<(String, String)> = t
        .rows
        .iter()
        .map(|r| (r.train_set.clone(), r.eval_language.clone()))
        .collect();
    let want: BTreeSet<(String, String)> = [("A1", "B1"), ("B1", "A1")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(cells, want);
    assert_eq!(t.rows.len(), 2);
}

#[test]
fn experiment_writes_one_checkpoint_per_distinct_model() {
    let plan = ExperimentPlan {
        seeds: vec![3],
        matrix_languages: vec!["A1".into(), "B1".into()],
        combinations: Vec::new(),
        ..tiny_plan()
    };
    let dir = tempfile::tempdir().unwrap();
    let table = run_experiment(&plan, dir.path()).unwrap();
    let seq_sets: BTreeSet<&str> = table
        .rows
        .iter()
        .filter(|r| r.train_set.contains('+') || r.train_set == "B1" && r.eval_language == "A0")
        .map(|r| r.train_set.as_str())
        .collect();
    assert_eq!(
        seq_sets,
        ["B1", "B1+C1", "B1+C1+A1"].into_iter().collect::<BTreeSet<_>>()
    );
    // Distinct models: A1 and B1 from the matrix, B1+C1 and B1+C1+A1 from
    // the sequence (its first step reuses B1).
    let checkpoints = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "awec"))
        .count();
    assert_eq!(checkpoints, 4);
    for f in ["results.csv", "heatmap.csv", "crosslingual.csv", "incremental.csv", "plan.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = ExperimentPlan::load(dir.path().join("plan.toml")).unwrap();
    assert_eq!(back, plan);
}
