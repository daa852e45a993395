#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = neokd::train::TrainState::from_bytes(data, "fuzz");
});
