//! End-to-end: synthesize a corpus, write and reread it, train, persist,
//! evaluate, ablate and dump attention.

use sigattn::ablation::{ablate, AblationPlan, Regime};
use sigattn::checkpoint::Checkpoint;
use sigattn::datagen::{build_catalog, generate_corpus, read_corpus_dir, write_corpus_dir, Corpus, DomainCatalog, GenerationReport, RegimeSpec};
use sigattn::dump::dump_attention;
use sigattn::trainer::{encode_examples, evaluate, train, EnablementRandomizer, TrainConfig};

fn small(p: f64, seed: u64) -> (DomainCatalog, Corpus, RegimeSpec) {
    let catalog = build_catalog(12, 3).unwrap();
    let regime = RegimeSpec {
        inclusion_ratio: p,
        mean_enabled: 3.0,
        train: 300,
        dev: 60,
        test: 60,
        seed,
    };
    let corpus = generate_corpus(&catalog, &regime).unwrap();
    (catalog, corpus, regime)
}

fn quick(model: u8) -> TrainConfig {
    TrainConfig {
        model,
        epochs: 3,
        batch_size: 32,
        lr: 5e-3,
        d_emb: 8,
        d_hidden: 8,
        d_ff: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_directory_round_trips() {
    let (catalog, corpus, regime) = small(0.7, 5);
    let report = GenerationReport::measure(&catalog, &regime, &corpus);
    assert!(report.splits_disjoint);
    let dir = tempfile::tempdir().unwrap();
    write_corpus_dir(dir.path(), &catalog, &corpus, &report).unwrap();
    let (catalog2, corpus2) = read_corpus_dir(dir.path()).unwrap();
    assert_eq!(catalog2, catalog);
    assert_eq!(corpus2, corpus);
}

#[test]
fn trained_checkpoint_reloads_with_identical_predictions() {
    let (catalog, corpus, _) = small(0.9, 6);
    let outcome = train(&quick(6), &catalog, &corpus).unwrap();
    assert_eq!(outcome.report.epochs.len(), 3);
    assert!(outcome.report.snapshot_checksum_stable);
    // Distillation losses start at epoch 1 for model (6).
    assert!(outcome.report.epochs[0].beta == 0.0 && outcome.report.epochs[1].beta > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), outcome.checkpoint.to_bytes());

    let encoded = encode_examples(&corpus.test, &loaded.vocab).unwrap();
    let (a, ra) = evaluate(&outcome.model(), &encoded, &mut EnablementRandomizer::new(0.5)).unwrap();
    let (b, rb) = evaluate(&loaded.model(), &encoded, &mut EnablementRandomizer::new(0.5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn ablation_covers_every_requested_cell_and_renders() {
    let (catalog, unbiased, _) = small(0.7, 7);
    let (_, biased, _) = small(0.9, 8);
    let regimes = [
        Regime { name: "unbiased".into(), catalog: &catalog, corpus: &unbiased },
        Regime { name: "biased".into(), catalog: &catalog, corpus: &biased },
    ];
    let plan = AblationPlan {
        seeds: vec![1, 2],
        cells: vec![("unbiased".into(), 1), ("unbiased".into(), 2), ("biased".into(), 4)],
        base: TrainConfig { epochs: 1, ..quick(1) },
    };
    let mut seen = 0;
    let report = ablate(&regimes, &plan, |_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    for (regime, model) in &plan.cells {
        let cell = report.cell(regime, *model).unwrap();
        assert_eq!(cell.runs, 2);
    }
    let table = report.render();
    assert!(table.contains("unbiased") && table.contains("biased"));
}

#[test]
fn attention_dump_lists_weights_per_enabled_domain() {
    let (catalog, corpus, _) = small(0.7, 9);
    let weak = train(&TrainConfig { epochs: 1, lr: 1e-4, ..quick(1) }, &catalog, &corpus).unwrap();
    let strong = train(&TrainConfig { epochs: 6, ..quick(4) }, &catalog, &corpus).unwrap();
    let checkpoints = vec![("(1)".to_string(), weak.checkpoint), ("(4)".to_string(), strong.checkpoint)];
    let dump = dump_attention(&checkpoints, &catalog, &corpus.test, 3).unwrap();
    assert!(dump.rows.len() <= 3);
    assert_eq!(dump.notice.is_some(), dump.rows.is_empty());
    for row in &dump.rows {
        let ex = corpus.test.iter().find(|e| e.text == row.utterance).unwrap();
        assert_eq!(row.enabled.len(), ex.enabled.len());
        assert!(row.enabled.iter().all(|d| d.weights.len() == 2));
    }
    assert!(!dump.render().is_empty());
}
