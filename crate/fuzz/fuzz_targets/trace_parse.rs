#![no_main]

use domino_prune::report::{parse_trace, write_trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Trace ingestion must never panic; accepted traces round-trip through
    // the writer.
    if let Ok(trace) = parse_trace(text) {
        let canonical = write_trace(&trace);
        let reparsed = parse_trace(&canonical).expect("canonical trace must parse");
        assert_eq!(trace, reparsed);
    }
});
