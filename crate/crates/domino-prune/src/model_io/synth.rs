//! Synthetic image datasets: Gaussian class blobs.
//!
//! Each class gets a deterministic prototype image (a smooth bump at a
//! class-specific location with class-specific channel amplitudes); samples
//! are the prototype plus Gaussian pixel noise, clamped to [0, 1]. The same
//! seed always yields bit-identical data.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{DatasetHandle, ModelIoError, Split};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            channels: 3,
            height: 8,
            width: 8,
            train: 2000,
            test: 1000,
            noise: 0.18,
        }
    }
}

fn render_prototypes(rng: &mut Rng, spec: &SynthSpec) -> Vec<Vec<f32>> {
    let sigma = (spec.height.min(spec.width) as f64 / 4.0).max(1.0);
    (0..spec.classes)
        .map(|_| {
            let cy = rng.range_f64(0.2, 0.8) * spec.height as f64;
            let cx = rng.range_f64(0.2, 0.8) * spec.width as f64;
            let amps: Vec<f64> = (0..spec.channels)
                .map(|_| rng.range_f64(0.15, 0.8))
                .collect();
            let mut img = Vec::with_capacity(spec.channels * spec.height * spec.width);
            for amp in amps {
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img.push((amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32);
                    }
                }
            }
            img
        })
        .collect()
}

fn render_split(
    rng: &mut Rng,
    protos: &[Vec<f32>],
    spec: &SynthSpec,
    count: usize,
    split: Split,
) -> Result<DatasetHandle, ModelIoError> {
    let per = spec.channels * spec.height * spec.width;
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.classes;
        labels.push(class);
        for &p in &protos[class] {
            let v = p as f64 + spec.noise * rng.next_gaussian();
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::new(vec![count, spec.channels, spec.height, spec.width], data)
        .map_err(|e| ModelIoError::InvalidDataset(e.to_string()))?;
    DatasetHandle::new(images, labels, split, spec.classes)
}

/// Generate train and test splits. Deterministic in `seed`.
pub fn synth_dataset(
    seed: u64,
    spec: &SynthSpec,
) -> Result<(DatasetHandle, DatasetHandle), ModelIoError> {
    if spec.classes == 0 {
        return Err(ModelIoError::InvalidDataset("class count must be positive".into()));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(ModelIoError::InvalidDataset("image dims must be positive".into()));
    }
    if spec.train == 0 || spec.test == 0 {
        return Err(ModelIoError::InvalidDataset("split sizes must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let protos = render_prototypes(&mut rng, spec);
    let train = render_split(&mut rng, &protos, spec, spec.train, Split::Train)?;
    let test = render_split(&mut rng, &protos, spec, spec.test, Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let spec = SynthSpec {
            train: 16,
            test: 8,
            ..SynthSpec::default()
        };
        let (a_train, a_test) = synth_dataset(7, &spec).unwrap();
        let (b_train, b_test) = synth_dataset(7, &spec).unwrap();
        assert_eq!(a_train.images.data(), b_train.images.data());
        assert_eq!(a_test.images.data(), b_test.images.data());
        assert_eq!(a_train.labels, b_train.labels);
    }

    #[test]
    fn different_seed_differs() {
        let spec = SynthSpec {
            train: 16,
            test: 8,
            ..SynthSpec::default()
        };
        let (a, _) = synth_dataset(7, &spec).unwrap();
        let (b, _) = synth_dataset(8, &spec).unwrap();
        assert_ne!(a.images.data(), b.images.data());
    }

    #[test]
    fn zero_classes_is_error() {
        let spec = SynthSpec {
            classes: 0,
            ..SynthSpec::default()
        };
        assert!(synth_dataset(1, &spec).is_err());
    }

    #[test]
    fn values_in_unit_interval() {
        let spec = SynthSpec {
            train: 32,
            test: 8,
            ..SynthSpec::default()
        };
        let (train, _) = synth_dataset(3, &spec).unwrap();
        assert!(train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
