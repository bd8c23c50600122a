//! CIFAR-10 binary-version loader.
//!
//! Each record is 3073 bytes: one label byte followed by 3072 pixel bytes
//! (3 channel planes of 32x32, red first). Train split is the concatenation
//! of `data_batch_1.bin` .. `data_batch_5.bin`, test split is
//! `test_batch.bin`. Pixels are scaled by 1/255; decoding is explicitly
//! byte-order free (single bytes only).

use std::path::Path;

use crate::tensor::Tensor;

use super::{DatasetHandle, ModelIoError, Split};

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_BYTES: usize = 3072;
pub const CLASSES: usize = 10;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Decode one batch file worth of records.
pub fn decode_records(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<usize>), ModelIoError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(ModelIoError::BadRecordSize {
            file: file.to_string(),
            record: RECORD_BYTES,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("label byte {label} out of range in `{file}`"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_split(dir: &Path, files: &[&str], split: Split) -> Result<DatasetHandle, ModelIoError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let path = dir.join(file);
        let bytes =
            std::fs::read(&path).map_err(|_| ModelIoError::MissingFile(path.clone()))?;
        let (p, l) = decode_records(&bytes, file)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)
        .map_err(|e| ModelIoError::InvalidDataset(e.to_string()))?;
    DatasetHandle::new(images, labels, split, CLASSES)
}

/// Load the full train and test splits from a directory of batch files.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetHandle, DatasetHandle), ModelIoError> {
    let train = load_split(dir, &TRAIN_FILES, Split::Train)?;
    let test = load_split(dir, &[TEST_FILE], Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_records_decode_exactly() {
        let mut bytes = vec![0u8; 2 * RECORD_BYTES];
        bytes[0] = 7; // label of record 0
        bytes[1] = 255; // first red pixel of record 0
        bytes[2] = 51;
        bytes[RECORD_BYTES] = 2; // label of record 1
        bytes[RECORD_BYTES + 1] = 102;
        let (pixels, labels) = decode_records(&bytes, "t").unwrap();
        assert_eq!(labels, vec![7, 2]);
        assert_eq!(pixels.len(), 2 * IMAGE_BYTES);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels[1], 51.0 / 255.0);
        assert_eq!(pixels[IMAGE_BYTES], 102.0 / 255.0);
    }

    #[test]
    fn ragged_file_is_bad_record_size() {
        let bytes = vec![0u8; RECORD_BYTES + 1];
        assert!(matches!(
            decode_records(&bytes, "t"),
            Err(ModelIoError::BadRecordSize { .. })
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = vec![0u8; RECORD_BYTES];
        bytes[0] = 10;
        assert!(decode_records(&bytes, "t").is_err());
    }

    #[test]
    fn missing_dir_is_missing_file() {
        let err = load_cifar10(Path::new("/nonexistent-cifar")).unwrap_err();
        assert!(matches!(err, ModelIoError::MissingFile(_)));
    }
}
