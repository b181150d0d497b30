//! Seeded, epoch-shuffled batch streaming.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::augment::{augment, AugmentationConfig};
use super::image_io::load_sample;
use super::{mix_seed, DatasetManifest, ManifestRecord, Split};

/// One decoded batch: images stacked NCHW plus labels, and the manifest
/// record indices the batch was drawn from.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub records: Vec<usize>,
}

/// Lazily decoding batch stream over one split. Epoch order is a seeded
/// permutation; the final partial batch is emitted. Geometric augmentation
/// applies only when `geometric` is set (the train split); the rescale
/// always applies.
pub struct BatchIter<'a, T> {
    manifest: &'a DatasetManifest,
    order: Vec<&'a ManifestRecord>,
    target: (usize, usize),
    batch_size: usize,
    config: &'a AugmentationConfig,
    geometric: bool,
    epoch_seed: u64,
    cursor: usize,
    _marker: std::marker::PhantomData<T>,
}

/// Open a batch stream over `split`. Every sample draws augmentation
/// parameters from its own RNG stream derived from `(epoch seed, record
/// index)`, so decode order cannot change results.
pub fn batch_iter<'a, T: Scalar>(
    manifest: &'a DatasetManifest,
    split: Split,
    target: (usize, usize),
    batch_size: usize,
    config: &'a AugmentationConfig,
    geometric: bool,
    epoch_seed: u64,
) -> Result<BatchIter<'a, T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    config.validate()?;
    let mut order = manifest.split(split);
    if order.is_empty() {
        return Err(Error::Manifest(format!("split {split} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        manifest,
        order,
        target,
        batch_size,
        config,
        geometric,
        epoch_seed,
        cursor: 0,
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar> BatchIter<'_, T> {
    /// Total number of batches this epoch.
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn load_one(&self, record: &ManifestRecord) -> Result<(Vec<T>, usize)> {
        let sample = load_sample::<T>(self.manifest, record, self.target, self.config.rescale)?;
        let sample = if self.geometric {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                self.config.seed ^ self.epoch_seed,
                record.source as u64,
            ));
            augment(&sample, self.config, &mut rng)
        } else {
            sample
        };
        Ok((sample.image.data().to_vec(), sample.class))
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.cursor..end];
        self.cursor = end;

        let n = chunk.len();
        let (h, w) = self.target;
        let mut data = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for record in chunk {
            match self.load_one(record) {
                Ok((pixels, class)) => {
                    data.extend(pixels);
                    labels.push(class);
                    records.push(record.source);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        let images = match Tensor::new(vec![n, 1, h, w], data) {
            Ok(t) => t,
            Err(e) => return Some(Err(e)),
        };
        Some(Ok(Batch { images, labels, records }))
    }
}
