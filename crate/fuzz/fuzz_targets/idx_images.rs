#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Arbitrary bytes must parse or fail with a format error, never panic.
    let _ = neokd::data::parse_idx_images(data, "fuzz");
});
