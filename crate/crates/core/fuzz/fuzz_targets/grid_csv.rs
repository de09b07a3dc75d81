#![no_main]

use libfuzzer_sys::fuzz_target;
use molem::metrics::{grid_report, parse_grid};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(blocks) = parse_grid(text) {
        let _ = grid_report(&blocks);
    }
});
