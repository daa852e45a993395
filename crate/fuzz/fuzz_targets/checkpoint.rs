#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Model checkpoints are untrusted input: decoding must be panic-free
    // and bounded regardless of what the header claims.
    let _ = neokd::net::MultiExitNetwork::from_bytes(data, "fuzz");
});
