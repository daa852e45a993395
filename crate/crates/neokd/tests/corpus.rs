//! The checked-in fuzz corpus seeds must stay valid inputs for their
//! parsers: each seed decodes successfully, and a mangled copy fails
//! without panicking.

use std::path::PathBuf;

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = corpus_dir(target);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
        out.push(std::fs::read(entry.unwrap().path()).unwrap());
    }
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn idx_image_seeds_parse_and_survive_mangling() {
    for seed in seeds("idx_images") {
        neokd::data::parse_idx_images(&seed, "seed").unwrap();
        let mut bad = seed.clone();
        bad[0] ^= 0xFF;
        assert!(neokd::data::parse_idx_images(&bad, "seed").is_err());
        let _ = neokd::data::parse_idx_images(&seed[..seed.len() / 2], "seed");
    }
}

#[test]
fn idx_label_seeds_parse() {
    for seed in seeds("idx_labels") {
        neokd::data::parse_idx_labels(&seed, "seed").unwrap();
        let mut bad = seed.clone();
        bad[3] ^= 0x01;
        assert!(neokd::data::parse_idx_labels(&bad, "seed").is_err());
    }
}

#[test]
fn checkpoint_seeds_parse() {
    for seed in seeds("checkpoint") {
        neokd::net::MultiExitNetwork::from_bytes(&seed, "seed").unwrap();
        let _ = neokd::net::MultiExitNetwork::from_bytes(&seed[..seed.len() - 1], "seed");
    }
}

#[test]
fn train_state_seeds_parse() {
    for seed in seeds("train_state") {
        neokd::train::TrainState::from_bytes(&seed, "seed").unwrap();
        let mut bad = seed.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xFF;
        let _ = neokd::train::TrainState::from_bytes(&bad, "seed");
    }
}

#[test]
fn config_seeds_parse() {
    for seed in seeds("config") {
        let text = std::str::from_utf8(&seed).unwrap();
        neokd::config::ExperimentConfig::parse_str(text).unwrap();
    }
}
