#![no_main]

use domino_prune::model_io::manifest::{format_manifest, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // The parser must never panic; accepted manifests must round-trip
    // through the canonical formatter.
    if let Ok(manifest) = parse_manifest(text) {
        let canonical = format_manifest(&manifest);
        let reparsed = parse_manifest(&canonical).expect("canonical form must parse");
        assert_eq!(manifest, reparsed);
    }
});
