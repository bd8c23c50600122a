//! Structured channel pruning for convolutional networks with
//! dataflow-aware saliency combination.
//!
//! The toolkit models a network as a dataflow graph, absorbs activation
//! layers into their producers, and computes — for any output channel — the
//! exact set of co-removed parameters (coparent channels, sibling input
//! slots, weight slices and registered biases) via channel-level
//! reachability over joins, splits and grouped convolutions. On top of that
//! it scores channels with combined saliency metrics (`domino-o`,
//! `domino-io`) and runs iterative no-retraining pruning campaigns with an
//! accuracy-based stop, tracing results to CSV.
//!
//! Typical flow:
//!
//! ```no_run
//! use domino_prune::prelude::*;
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let graph = load_model(
//!     "model.manifest".as_ref(),
//!     "model.blob".as_ref(),
//!     &GraphOptions::default(),
//! )?;
//! let (train, test) = synth_dataset(7, &SynthSpec::default())?;
//! let cfg = CampaignConfig::new(
//!     DominoConfig::new(Variant::DominoIO, MetricConfig::parse("l1-avg").unwrap()),
//!     1,
//! );
//! let trace = run_campaign(graph, &train, &test, &cfg)?;
//! println!("{}", write_trace(&trace));
//! # Ok(())
//! # }
//! ```

pub mod dependency;
pub mod domino;
pub mod engine;
pub mod fixtures;
pub mod graph;
pub mod model_io;
pub mod pruner;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod store;
pub mod tensor;
pub mod verify;

/// The commonly used surface in one import.
pub mod prelude {
    pub use crate::dependency::{
        oracle::oracle_prune_set, DependencyGraph, PruneSet, PrunedMask, SliceAxis, WeightSlice,
    };
    pub use crate::domino::{score_all, score_channel, DominoConfig, Variant};
    pub use crate::engine::{
        backward, evaluate_accuracy, forward,
        train::{train_sgd, TrainConfig},
        BatchResult,
    };
    pub use crate::graph::{
        absorb_activations, build_graph, ChannelRef, GraphOptions, GroupMapping, LayerId,
        NetworkGraph, Side,
    };
    pub use crate::model_io::{
        cifar::load_cifar10, load_model, save_model, synth::synth_dataset, DatasetHandle, Split,
        SynthSpec,
    };
    pub use crate::pruner::{
        never_prune_guard, run_campaign, weights_removed, CampaignConfig, PruneRecord, PruneState,
        PruneTrace,
    };
    pub use crate::report::{
        headline, improvements, parse_trace, summarize, write_improvement_csv, write_summary_csv,
        write_trace,
    };
    pub use crate::rng::Rng;
    pub use crate::saliency::{BaseMetric, MetricConfig, SaliencyVector};
    pub use crate::store::TensorStore;
    pub use crate::tensor::Tensor;
}
