//! In-memory training samples: prepared images or precomputed feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::capsnet::FeatureMap;
use crate::dataset::{DatasetManifest, Label};
use crate::imaging::{augment, AugmentSpec, PreprocConfig, RawImage};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    /// Already resized and equalized.
    Image(RawImage),
    Features(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub input: SampleInput,
}

impl Sample {
    /// Network input. Images are augmented when a spec and RNG seed are
    /// given; feature maps are used as stored.
    pub fn tensor(&self, preproc: &PreprocConfig, augmentation: Option<(&AugmentSpec, u64)>) -> Tensor {
        match &self.input {
            SampleInput::Features(t) => t.clone(),
            SampleInput::Image(img) => match augmentation {
                Some((spec, seed)) if spec.enabled => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    preproc.to_tensor(&augment(img, spec, &mut rng))
                }
                _ => preproc.to_tensor(img),
            },
        }
    }
}

fn entries<'a>(
    manifest: &'a DatasetManifest,
    ids: &[String],
) -> Result<Vec<&'a crate::dataset::ManifestEntry>, TrainError> {
    ids.iter()
        .map(|id| {
            manifest.get(id).ok_or_else(|| TrainError::Data(format!("id `{id}` is not in manifest {}", manifest.name)))
        })
        .collect()
}

/// Decodes and prepares the images behind `ids`, in order.
pub fn load_image_samples(
    manifest: &DatasetManifest,
    ids: &[String],
    preproc: &PreprocConfig,
) -> Result<Vec<Sample>, TrainError> {
    let entries = entries(manifest, ids)?;
    par::map(&entries, |_, e| -> Result<Sample, TrainError> {
        let img = RawImage::open(&e.path).map_err(|err| TrainError::Data(format!("image `{}`: {err}", e.id)))?;
        Ok(Sample {
            id: e.id.clone(),
            label: e.label,
            input: SampleInput::Image(preproc.prepare(&img)),
        })
    })
    .into_iter()
    .collect()
}

/// Looks up the feature record of every id, in order.
pub fn load_feature_samples(
    manifest: &DatasetManifest,
    ids: &[String],
    features: &FeatureMap,
) -> Result<Vec<Sample>, TrainError> {
    entries(manifest, ids)?
        .into_iter()
        .map(|e| {
            let t = features.get(&e.id).ok_or_else(|| TrainError::MissingFeature(e.id.clone()))?;
            Ok(Sample {
                id: e.id.clone(),
                label: e.label,
                input: SampleInput::Features(t.clone()),
            })
        })
        .collect()
}

/// Wraps already-prepared images.
pub fn image_samples(items: impl IntoIterator<Item = (String, Label, RawImage)>, preproc: &PreprocConfig) -> Vec<Sample> {
    items
        .into_iter()
        .map(|(id, label, img)| Sample {
            id,
            label,
            input: SampleInput::Image(preproc.prepare(&img)),
        })
        .collect()
}
