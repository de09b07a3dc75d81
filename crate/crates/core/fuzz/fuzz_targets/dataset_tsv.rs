#![no_main]

use libfuzzer_sys::fuzz_target;
use molem::taskgen::parse_tsv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(samples) = parse_tsv(text) {
        let again: String = samples.iter().map(|s| format!("{}\t{}\n", s.prompt, s.target)).collect();
        assert_eq!(parse_tsv(&again).unwrap(), samples);
    }
});
