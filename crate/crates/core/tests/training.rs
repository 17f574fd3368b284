use habnet::data::synthetic::{generate, SyntheticConfig};
use habnet::model::{ModelConfig, Task, Variant};
use habnet::trainer::{self, load_checkpoint, prepare, save_checkpoint, TrainConfig, TrainData};

fn harness(task: Task, epochs: usize, seed: u64) -> (ModelConfig, TrainConfig, Vec<habnet::data::Batch>, habnet::data::EmbeddingTable) {
    let corpus = generate(&SyntheticConfig::default());
    let model = ModelConfig::new(8, Variant::Full, task);
    let records = match task {
        Task::Decision => corpus.papers.clone(),
        Task::Rating => habnet::data::review_items(&corpus.papers),
    };
    let items = prepare(&records, &model, &corpus.embeddings.vocab);
    let cfg = TrainConfig {
        task,
        epochs,
        seed,
        ..TrainConfig::for_task(task)
    };
    (model, cfg, items, corpus.embeddings)
}

#[test]
fn training_loss_trends_down() {
    let (model, cfg, items, emb) = harness(Task::Decision, 40, 42);
    let data = TrainData {
        train: &items,
        validation: &items,
        embeddings: &emb,
    };
    let out = trainer::train(&data, &model, &cfg).unwrap();
    let losses: Vec<f64> = out.log.epochs.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 40);
    let window = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    for pair in losses.chunks(10).collect::<Vec<_>>().windows(2) {
        assert!(window(pair[1]) <= window(pair[0]), "{losses:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (model, cfg, items, emb) = harness(Task::Decision, 4, 5);
    let data = TrainData {
        train: &items,
        validation: &items,
        embeddings: &emb,
    };
    let out = trainer::train(&data, &model, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.params, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let before = trainer::evaluate(&model, &out.params, &emb, &items, &[]).unwrap();
    let after = trainer::evaluate(&model, &loaded, &emb, &items, &[]).unwrap();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_run() {
    let (model, cfg, items, emb) = harness(Task::Rating, 2, 9);
    let data = TrainData {
        train: &items,
        validation: &items,
        embeddings: &emb,
    };
    let a = trainer::train(&data, &model, &cfg).unwrap();
    let b = trainer::train(&data, &model, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    let c = trainer::train(&data, &model, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}
