use std::path::Path;

use deaan::config::Config;
use deaan::corpus::generate_corpus;
use deaan::pipeline::load_train_data;
use deaan::trainer::{self, Mode};

fn micro() -> Config {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")).unwrap();
    Config::from_toml_str(&text).unwrap()
}

#[test]
fn two_hundred_micro_steps_cut_the_total_loss() {
    let mut cfg = micro();
    cfg.train.mode = Mode::Deaan;
    cfg.train.max_steps = 200;
    cfg.train.epochs = 1000;
    cfg.train.checkpoint_every = 1000;
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    generate_corpus(&cfg.synth, &corpus).unwrap();
    let data = load_train_data(&corpus.join("source.tsv"), &corpus.join("target.tsv")).unwrap();
    let out = trainer::run(&cfg.model.base(), &cfg.train, &data, &dir.path().join("run")).unwrap();
    assert_eq!(out.steps, 200);
    let first = out.history[0].loss.total;
    let tail: Vec<f64> = out.history[190..].iter().map(|r| r.loss.total).collect();
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(first > 0.0);
    assert!(last <= 0.9 * first, "step 0 total {first}, mean of the last 10 steps {last}");
    assert!(out.store.all_finite());
    assert_eq!(std::fs::read_to_string(&out.log).unwrap().lines().count(), 200);
}
