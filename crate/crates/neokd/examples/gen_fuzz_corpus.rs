//! Regenerate the checked-in fuzz corpus seeds:
//!
//! ```text
//! cargo run -p neokd --example gen_fuzz_corpus
//! ```
//!
//! Writes one or two small valid inputs per fuzz target under
//! `fuzz/corpus/<target>/`.

use std::path::PathBuf;

use neokd::config::preset;
use neokd::data::{encode_idx_images, encode_idx_labels};
use neokd::net::{MultiExitNetwork, NetworkSpec};
use neokd::train::TrainState;

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let corpus = root.join("fuzz/corpus");

    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = corpus.join(target);
        std::fs::create_dir_all(&dir).expect("corpus dir");
        let path = dir.join(name);
        std::fs::write(&path, bytes).expect("write seed");
        println!("wrote {} ({} bytes)", path.display(), bytes.len());
    };

    // Tiny valid IDX pair: two 2×2 images, two labels.
    let pixels: Vec<f32> = [0u8, 255, 128, 64, 255, 0, 32, 16]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    write("idx_images", "two_2x2", &encode_idx_images(&pixels, 2, 2, 2));
    write("idx_labels", "two_labels", &encode_idx_labels(&[9, 3]));

    // Tiny valid checkpoint and resume state.
    let spec = NetworkSpec {
        input_dim: 4,
        block_widths: vec![vec![3], vec![2]],
        classes: 3,
        init_seed: 1,
    };
    let net = MultiExitNetwork::init(&spec).expect("tiny net");
    write("checkpoint", "tiny_net", &net.to_bytes());
    let state = TrainState::fresh(net);
    write("train_state", "fresh_state", &state.to_bytes());

    // Valid config texts.
    write(
        "config",
        "synth_smoke",
        preset("synth-smoke").expect("preset").as_bytes(),
    );
    write(
        "config",
        "digits_desk",
        preset("digits-neokd-desk").expect("preset").as_bytes(),
    );
}
