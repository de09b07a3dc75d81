#![no_main]

use libfuzzer_sys::fuzz_target;
use molem::numeric::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(again.entries.len(), ck.entries.len());
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&again.entries) {
            assert_eq!(n1, n2);
            assert!(t1.bits().eq(t2.bits()));
        }
    }
});
