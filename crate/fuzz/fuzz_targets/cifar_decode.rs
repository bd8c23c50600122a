#![no_main]

use domino_prune::model_io::cifar::decode_records;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, labels)) = decode_records(data, "fuzz") {
        assert_eq!(pixels.len(), labels.len() * 3072);
        assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
});
