//! Cross-module flows driven through real files: corpus generation to
//! disk and back, training interrupted by a checkpoint round-trip, and
//! pretrained-embedding injection. Module-level behavior is covered by
//! unit tests; these tests only assert what emerges from composing
//! modules across a serialization boundary.

use sgm_core::eval::pair_score_matrix;
use sgm_core::io::{load_checkpoint, load_corpus, load_matrix, save_checkpoint, save_corpus, save_matrix};
use sgm_core::model::{Mode, SgmModel};
use sgm_core::synth::{generate_synthetic, SynthSpec};
use sgm_core::tensor::Tensor;
use sgm_core::trainer::{train, train_with, TrainConfig};

fn corpus_paths(dir: &tempfile::TempDir) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.path().join("graphs.json"), dir.path().join("features.bin"))
}

fn small_cfg(d1: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 0.01,
        epochs: 3,
        seed: 5,
        d1,
        d2: 6,
        d_out: 8,
        ..TrainConfig::default()
    }
}

// ─── Corpus files ───────────────────────────────────────────────────────

#[test]
fn both_corpus_flavors_survive_a_file_round_trip_bitwise() {
    for relation_only in [false, true] {
        let spec = SynthSpec {
            relation_only,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(17, 6, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (graphs, feats) = corpus_paths(&dir);
        save_corpus(&corpus, &graphs, &feats).unwrap();
        let loaded = load_corpus(&graphs, &feats).unwrap();
        assert_eq!(corpus, loaded, "relation_only={relation_only}");

        // Saving the loaded corpus again reproduces both files exactly.
        let graphs2 = dir.path().join("graphs2.json");
        let feats2 = dir.path().join("features2.bin");
        save_corpus(&loaded, &graphs2, &feats2).unwrap();
        assert_eq!(
            std::fs::read(&graphs).unwrap(),
            std::fs::read(&graphs2).unwrap()
        );
        assert_eq!(
            std::fs::read(&feats).unwrap(),
            std::fs::read(&feats2).unwrap()
        );
    }
}

#[test]
fn a_loaded_corpus_trains_identically_to_the_in_memory_one() {
    let spec = SynthSpec::default();
    let corpus = generate_synthetic(23, 8, &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (graphs, feats) = corpus_paths(&dir);
    save_corpus(&corpus, &graphs, &feats).unwrap();
    let loaded = load_corpus(&graphs, &feats).unwrap();

    let cfg = small_cfg(spec.d1);
    let from_memory = train(&corpus, &cfg).unwrap();
    let from_disk = train(&loaded, &cfg).unwrap();
    assert_eq!(from_memory.last.model, from_disk.last.model);
    assert_eq!(from_memory.history, from_disk.history);
}

// ─── Checkpoint files ───────────────────────────────────────────────────

#[test]
fn resume_through_a_checkpoint_file_matches_an_uninterrupted_run() {
    let spec = SynthSpec::default();
    let corpus = generate_synthetic(29, 8, &spec).unwrap();
    let mut cfg = small_cfg(spec.d1);
    cfg.epochs = 4;

    let straight = train(&corpus, &cfg).unwrap();

    // First leg stops at epoch 2 and goes through the disk format.
    let mut half = cfg.clone();
    half.epochs = 2;
    let first_leg = train(&corpus, &half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("half.ckpt");
    save_checkpoint(&first_leg.last, &ckpt_path).unwrap();
    let reloaded = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(reloaded.epoch, 2);

    let resumed = train_with(&corpus, &cfg, Some(reloaded), 1, |_| {}).unwrap();
    assert_eq!(resumed.last.model, straight.last.model);
    assert_eq!(resumed.last.adam, straight.last.adam);
    assert_eq!(resumed.last.history, straight.last.history);

    // The serialized artifacts agree byte for byte as well.
    let a = dir.path().join("straight.ckpt");
    let b = dir.path().join("resumed.ckpt");
    save_checkpoint(&straight.last, &a).unwrap();
    save_checkpoint(&resumed.last, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn a_reloaded_checkpoint_scores_the_corpus_identically() {
    let spec = SynthSpec::default();
    let corpus = generate_synthetic(31, 6, &spec).unwrap();
    let cfg = small_cfg(spec.d1);
    let out = train(&corpus, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("best.ckpt");
    save_checkpoint(&out.best, &ckpt_path).unwrap();
    let reloaded = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(reloaded.model, out.best.model);

    let direct = pair_score_matrix(&out.best.model, &corpus, 1).unwrap();
    let via_file = pair_score_matrix(&reloaded.model, &corpus, 2).unwrap();
    assert_eq!(direct.shape, via_file.shape);
    for (a, b) in direct.values.iter().zip(&via_file.values) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

// ─── Pretrained embeddings ──────────────────────────────────────────────

#[test]
fn embedding_tables_load_from_matrix_files_into_the_model() {
    let spec = SynthSpec::default();
    let corpus = generate_synthetic(37, 4, &spec).unwrap();
    let cfg = small_cfg(spec.d1);
    let model_cfg = cfg.model_config(&corpus);
    let mut model = SgmModel::new(model_cfg.clone(), 0).unwrap();

    let dir = tempfile::tempdir().unwrap();

    // Label table: one row per object label then per relationship label.
    let label_rows = model_cfg.c_o + model_cfg.c_r;
    let labels = Tensor::new(
        vec![label_rows, model_cfg.d2],
        (0..label_rows * model_cfg.d2).map(|i| i as f64 / 100.0).collect(),
    );
    let labels_path = dir.path().join("labels.bin");
    save_matrix(&labels, &labels_path).unwrap();
    let labels_loaded = load_matrix(&labels_path).unwrap();
    model.load_label_embeddings(&labels_loaded).unwrap();

    // Word table: one row per vocabulary entry.
    let words = Tensor::new(
        vec![model_cfg.vocab_size, model_cfg.d2],
        (0..model_cfg.vocab_size * model_cfg.d2)
            .map(|i| -(i as f64) / 50.0)
            .collect(),
    );
    let words_path = dir.path().join("words.bin");
    save_matrix(&words, &words_path).unwrap();
    let words_loaded = load_matrix(&words_path).unwrap();
    model.load_word_embeddings(&words_loaded).unwrap();

    // The tables land transposed (the matrix file stores float32 rows, so
    // the loaded table is the comparison baseline): embedding matrices map
    // a one-hot label (column index) to the table row.
    let params: std::collections::BTreeMap<String, Tensor> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for col in 0..model_cfg.c_o {
        for r in 0..model_cfg.d2 {
            assert_eq!(params["vsg.w_o"].at(r, col), labels_loaded.at(col, r));
        }
    }
    for col in 0..model_cfg.c_r {
        for r in 0..model_cfg.d2 {
            assert_eq!(
                params["vsg.w_r"].at(r, col),
                labels_loaded.at(model_cfg.c_o + col, r)
            );
        }
    }
    for col in 0..model_cfg.vocab_size {
        for r in 0..model_cfg.d2 {
            assert_eq!(params["tsg.w_e"].at(r, col), words_loaded.at(col, r));
        }
    }

    // Wrong shapes are rejected up front.
    let bad = Tensor::new(vec![1, model_cfg.d2], vec![0.0; model_cfg.d2]);
    assert!(model.load_label_embeddings(&bad).is_err());
    assert!(model.load_word_embeddings(&bad).is_err());

    // The primed model still trains end to end in every ablation mode.
    for mode in [Mode::Oom, Mode::Sgm] {
        let mut mode_cfg = cfg.clone();
        mode_cfg.mode = mode;
        mode_cfg.epochs = 1;
        mode_cfg.batch_size = 2;
        train(&corpus, &mode_cfg).unwrap();
    }
}
