#![no_main]

use libfuzzer_sys::fuzz_target;
use molem::tokenizer::{TokenizerSpec, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<TokenizerSpec>(data) else { return };
    if let Ok(v) = Vocabulary::from_spec(&spec) {
        assert_eq!(Vocabulary::from_spec(&v.spec()).unwrap(), v);
        let text: String = v.spec().symbols.iter().skip(2).cloned().collect();
        if let Ok(ids) = v.encode(&text) {
            assert_eq!(v.decode(&ids), text);
        }
    }
});
