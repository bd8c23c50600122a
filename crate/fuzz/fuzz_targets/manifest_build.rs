#![no_main]

use domino_prune::graph::{build_graph, GraphOptions};
use domino_prune::model_io::manifest::parse_manifest;
use domino_prune::store::TensorStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Graph validation over arbitrary manifests must reject, not panic.
    // An empty store exercises every dangling-reference path.
    if let Ok(manifest) = parse_manifest(text) {
        let _ = build_graph(&manifest, TensorStore::new(), &GraphOptions::default());
    }
});
