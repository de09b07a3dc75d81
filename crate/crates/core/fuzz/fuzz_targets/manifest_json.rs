#![no_main]

use libfuzzer_sys::fuzz_target;
use molem::pipeline::RunManifest;
use molem::stage::RegistryManifest;

// Both JSON documents of a run directory: the stage registry and the run manifest.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RegistryManifest::from_json(text) {
        assert_eq!(RegistryManifest::from_json(&m.to_json()).unwrap(), m);
    }
    if let Ok(m) = RunManifest::from_json(text) {
        let _ = m.to_json();
    }
});
