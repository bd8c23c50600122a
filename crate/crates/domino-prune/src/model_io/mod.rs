//! Model and dataset I/O: manifest text format, binary tensor container,
//! CIFAR-10 loader and synthetic dataset generation.

pub mod blob;
pub mod cifar;
pub mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::{build_graph, GraphError, GraphOptions, NetworkGraph};
use crate::tensor::Tensor;

pub use synth::SynthSpec;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("blob checksum mismatch (truncated or corrupted)")]
    ChecksumMismatch,
    #[error("file `{file}` is not a whole number of {record} -byte records")]
    BadRecordSize { file: String, record: usize },
    #[error("missing file `{0}`")]
    MissingFile(PathBuf),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Which split a dataset handle holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An in-memory labeled image set, values in [0, 1].
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl DatasetHandle {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        split: Split,
        classes: usize,
    ) -> Result<DatasetHandle, ModelIoError> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 {
            return Err(ModelIoError::InvalidDataset(format!(
                "images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(ModelIoError::InvalidDataset(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelIoError::InvalidDataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(DatasetHandle {
            images,
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample element count (C*H*W).
    pub fn sample_elements(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    /// Keep only the first `n` samples.
    pub fn truncate(mut self, n: usize) -> DatasetHandle {
        let keep = n.min(self.len());
        let per = self.sample_elements();
        let shape = {
            let s = self.images.shape();
            vec![keep, s[1], s[2], s[3]]
        };
        let mut data = self.images.into_data();
        data.truncate(keep * per);
        self.labels.truncate(keep);
        self.images = Tensor::new(shape, data).expect("truncated to whole samples");
        self
    }

    /// Gather samples by index into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_elements();
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).unwrap();
        (batch, labels)
    }
}

/// Load a manifest + blob pair into a validated graph.
pub fn load_model(
    manifest_path: &Path,
    blob_path: &Path,
    options: &GraphOptions,
) -> Result<NetworkGraph, ModelIoError> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|_| ModelIoError::MissingFile(manifest_path.to_path_buf()))?;
    let manifest = manifest::parse_manifest(&text)?;
    let bytes =
        std::fs::read(blob_path).map_err(|_| ModelIoError::MissingFile(blob_path.to_path_buf()))?;
    let store = blob::decode_blob(&bytes)?;
    Ok(build_graph(&manifest, store, options)?)
}

/// Write a raw graph as canonical manifest + blob. `load_model` of the
/// result reproduces the graph exactly and re-saving is byte-identical.
pub fn save_model(
    graph: &NetworkGraph,
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<(), ModelIoError> {
    if graph.is_absorbed() {
        return Err(ModelIoError::InvalidDataset(
            "absorbed graphs cannot be saved; save the raw graph".into(),
        ));
    }
    let manifest = manifest::graph_to_manifest(graph);
    std::fs::write(manifest_path, manifest::format_manifest(&manifest))?;
    std::fs::write(blob_path, blob::encode_blob(graph.store()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncate_keeps_prefix() {
        let images = Tensor::new(vec![3, 1, 1, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let d = DatasetHandle::new(images, vec![0, 1, 0], Split::Train, 2).unwrap();
        let t = d.truncate(2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.images.data(), &[0.0, 0.1, 0.2, 0.3]);
        assert_eq!(t.labels, vec![0, 1]);
    }

    #[test]
    fn label_range_checked() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap();
        assert!(DatasetHandle::new(images, vec![5], Split::Test, 3).is_err());
    }
}

#[cfg(test)]
mod roundtrip_tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let graph = fixtures::resblock_toy(3);
        let m1 = dir.path().join("m1.manifest");
        let b1 = dir.path().join("m1.blob");
        save_model(&graph, &m1, &b1).unwrap();
        let loaded = load_model(&m1, &b1, &GraphOptions::default()).unwrap();
        assert_eq!(loaded, graph);
        let m2 = dir.path().join("m2.manifest");
        let b2 = dir.path().join("m2.blob");
        save_model(&loaded, &m2, &b2).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
    }

    #[test]
    fn zeroed_model_round_trips_with_zeros_intact() {
        let dir = tempfile::tempdir().unwrap();
        let mut graph = fixtures::linear_toy(5);
        // zero one output channel's row and bias, as pruning would
        let w = graph.store_mut().get_mut("conv1.w").unwrap();
        let row = 3 * 9;
        w.data_mut()[0..row].fill(0.0);
        graph.store_mut().zero_element("conv1.b", 0);
        let m = dir.path().join("z.manifest");
        let b = dir.path().join("z.blob");
        save_model(&graph, &m, &b).unwrap();
        let loaded = load_model(&m, &b, &GraphOptions::default()).unwrap();
        let w = loaded.store().get("conv1.w").unwrap();
        assert!(w.data()[0..row].iter().all(|&v| v == 0.0));
        assert_eq!(loaded.store().get("conv1.b").unwrap().data()[0], 0.0);
        assert_eq!(loaded, graph);
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let graph = fixtures::tiny_linear();
        let m = dir.path().join("t.manifest");
        let b = dir.path().join("t.blob");
        save_model(&graph, &m, &b).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_model(&m, &b, &GraphOptions::default()).unwrap_err();
        assert!(matches!(err, ModelIoError::ChecksumMismatch));
    }
}
