#![no_main]

use domino_prune::model_io::blob::{decode_blob, encode_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The container decoder must never panic or over-allocate; accepted
    // stores must re-encode canonically and decode back to equality.
    if let Ok(store) = decode_blob(data) {
        let canonical = encode_blob(&store);
        let reparsed = decode_blob(&canonical).expect("canonical blob must decode");
        assert_eq!(store, reparsed);
    }
});
