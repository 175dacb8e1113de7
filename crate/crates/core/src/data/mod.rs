//! Datasets: the synthetic blob task, on-disk annotation formats,
//! augmentation, and checkpoint persistence.

pub mod augment;
pub mod checkpoint;
pub mod formats;
pub mod synthetic;

use crate::cascade::MeanFace;
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::tensor::Tensor;

/// One annotated image.
pub struct Sample {
    /// `[3, H, W]`, values nominally in [0, 1].
    pub image: Tensor,
    /// Ground truth, input-image pixels.
    pub landmarks: LandmarkSet,
    /// Attribute tags (WFLW-style), possibly empty.
    pub tags: Vec<String>,
}

/// Source of samples plus the per-dataset conventions the trainer needs.
pub trait Dataset {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample(&self, index: usize) -> Result<Sample>;
    fn num_landmarks(&self) -> usize;
    fn image_size(&self) -> (usize, usize);
    /// Outer-eye-corner indices `(left, right)` for inter-ocular
    /// normalization.
    fn interocular_indices(&self) -> (usize, usize);
    /// Horizontal-flip index involution, when the layout defines one.
    fn flip_map(&self) -> Option<&[usize]>;
}

/// Samples held in memory (file-based datasets load into this).
pub struct InMemoryDataset {
    samples: Vec<Sample>,
    num_landmarks: usize,
    image_size: (usize, usize),
    interocular: (usize, usize),
    flip_map: Option<Vec<usize>>,
}

impl InMemoryDataset {
    pub fn new(
        samples: Vec<Sample>,
        num_landmarks: usize,
        image_size: (usize, usize),
        interocular: (usize, usize),
        flip_map: Option<Vec<usize>>,
    ) -> Result<InMemoryDataset> {
        for (i, s) in samples.iter().enumerate() {
            if s.landmarks.len() != num_landmarks {
                return Err(Error::Format(format!(
                    "sample {i} has {} landmarks, dataset declares {num_landmarks}",
                    s.landmarks.len()
                )));
            }
        }
        if interocular.0 >= num_landmarks || interocular.1 >= num_landmarks {
            return Err(Error::Input(format!(
                "inter-ocular indices {interocular:?} out of range for {num_landmarks} landmarks"
            )));
        }
        Ok(InMemoryDataset {
            samples,
            num_landmarks,
            image_size,
            interocular,
            flip_map,
        })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        let s = &self.samples[index];
        Ok(Sample {
            image: s.image.clone(),
            landmarks: s.landmarks.clone(),
            tags: s.tags.clone(),
        })
    }

    fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    fn interocular_indices(&self) -> (usize, usize) {
        self.interocular
    }

    fn flip_map(&self) -> Option<&[usize]> {
        self.flip_map.as_deref()
    }
}

/// A dataset with a fixed augmentation baked in: sample `i` is the inner
/// sample transformed with a stream seeded by `(seed, i)`, so the result is
/// still a pure function of the index.
pub struct AugmentedDataset<D: Dataset> {
    inner: D,
    cfg: augment::AugmentConfig,
    seed: u64,
}

impl<D: Dataset> AugmentedDataset<D> {
    pub fn new(inner: D, cfg: augment::AugmentConfig, seed: u64) -> Result<AugmentedDataset<D>> {
        cfg.validate()?;
        Ok(AugmentedDataset { inner, cfg, seed })
    }
}

impl<D: Dataset> Dataset for AugmentedDataset<D> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        augment::augment(&self.inner.sample(index)?, &self.cfg, &mut rng)
    }

    fn num_landmarks(&self) -> usize {
        self.inner.num_landmarks()
    }

    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size()
    }

    fn interocular_indices(&self) -> (usize, usize) {
        self.inner.interocular_indices()
    }

    fn flip_map(&self) -> Option<&[usize]> {
        self.inner.flip_map()
    }
}

impl Dataset for Box<dyn Dataset> {
    fn len(&self) -> usize {
        self.as_ref().len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.as_ref().sample(index)
    }

    fn num_landmarks(&self) -> usize {
        self.as_ref().num_landmarks()
    }

    fn image_size(&self) -> (usize, usize) {
        self.as_ref().image_size()
    }

    fn interocular_indices(&self) -> (usize, usize) {
        self.as_ref().interocular_indices()
    }

    fn flip_map(&self) -> Option<&[usize]> {
        self.as_ref().flip_map()
    }
}

/// The subset of a dataset whose samples carry a given attribute tag
/// (WFLW-style subset evaluation).
pub struct TagFilteredDataset<D: Dataset> {
    inner: D,
    indices: Vec<usize>,
}

impl<D: Dataset> TagFilteredDataset<D> {
    pub fn new(inner: D, tag: &str) -> Result<TagFilteredDataset<D>> {
        let mut indices = Vec::new();
        for i in 0..inner.len() {
            if inner.sample(i)?.tags.iter().any(|t| t == tag) {
                indices.push(i);
            }
        }
        if indices.is_empty() {
            return Err(Error::Input(format!("no samples carry the tag '{tag}'")));
        }
        Ok(TagFilteredDataset { inner, indices })
    }
}

impl<D: Dataset> Dataset for TagFilteredDataset<D> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.inner.sample(self.indices[index])
    }

    fn num_landmarks(&self) -> usize {
        self.inner.num_landmarks()
    }

    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size()
    }

    fn interocular_indices(&self) -> (usize, usize) {
        self.inner.interocular_indices()
    }

    fn flip_map(&self) -> Option<&[usize]> {
        self.inner.flip_map()
    }
}

/// Per-landmark arithmetic mean over the dataset, in normalized input
/// coordinates.
pub fn mean_face(dataset: &dyn Dataset) -> Result<MeanFace> {
    if dataset.is_empty() {
        return Err(Error::Input("mean face of an empty dataset".into()));
    }
    let n = dataset.num_landmarks();
    let (h, w) = dataset.image_size();
    let mut acc = vec![(0.0f64, 0.0f64); n];
    for i in 0..dataset.len() {
        let s = dataset.sample(i)?;
        if s.landmarks.len() != n {
            return Err(Error::Format(format!(
                "sample {i} has {} landmarks, dataset declares {n}",
                s.landmarks.len()
            )));
        }
        for (a, &(x, y)) in acc.iter_mut().zip(s.landmarks.points()) {
            a.0 += x;
            a.1 += y;
        }
    }
    let count = dataset.len() as f64;
    let normalized: Vec<(f64, f64)> = acc
        .into_iter()
        .map(|(x, y)| (x / count / w as f64, y / count / h as f64))
        .collect();
    MeanFace::new(normalized)
}

/// Ground truth as a constant `[N, 2]` tensor.
pub fn landmarks_tensor(landmarks: &LandmarkSet) -> Tensor {
    Tensor::from_vec(&[landmarks.len(), 2], landmarks.to_flat()).expect("flat landmark buffer")
}
