//! Synthetic landmark task: Gaussian blobs on a jittered ellipse ring.
//!
//! Every sample is a pure function of `(spec, index)` — the generator seeds
//! a fresh stream per index, so datasets need no storage and reproduce
//! bit-identically across processes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_landmarks: usize,
    /// (H, W)
    pub image_size: (usize, usize),
    /// Ellipse semi-axes in pixels.
    pub ellipse_radii: (f64, f64),
    /// Per-landmark angular offsets added to the uniform ring layout
    /// (empty means zeros, which keeps the layout mirror-symmetric).
    pub angular_offsets: Vec<f64>,
    /// Per-landmark blob spread; empty broadcasts `base_sigma`.
    pub blob_sigma: Vec<f64>,
    pub base_sigma: f64,
    /// Per-landmark blob brightness; empty broadcasts `base_intensity`.
    pub blob_intensity: Vec<f64>,
    pub base_intensity: f64,
    /// Std-dev of the per-landmark iid Gaussian jitter, pixels.
    pub landmark_jitter: f64,
    /// Uniform global translation range (+/- x, +/- y), pixels.
    pub translation_jitter: (f64, f64),
    /// Uniform global rotation range (+/- radians). Nonzero values bias the
    /// sample mean away from the canonical layout; defaults keep it zero.
    pub rotation_jitter: f64,
    /// Uniform global scale range (+/- fraction).
    pub scale_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_landmarks: usize, image_size: usize, seed: u64) -> SyntheticSpec {
        let s = image_size as f64;
        SyntheticSpec {
            num_landmarks,
            image_size: (image_size, image_size),
            ellipse_radii: (s * 0.3, s * 0.22),
            angular_offsets: Vec::new(),
            blob_sigma: Vec::new(),
            base_sigma: s / 40.0,
            blob_intensity: Vec::new(),
            base_intensity: 0.9,
            landmark_jitter: s / 45.0,
            translation_jitter: (s / 16.0, s / 16.0),
            rotation_jitter: 0.0,
            scale_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks == 0 {
            return Err(Error::Input("synthetic spec needs at least one landmark".into()));
        }
        for (name, list) in [
            ("angular offsets", &self.angular_offsets),
            ("blob sigmas", &self.blob_sigma),
            ("blob intensities", &self.blob_intensity),
        ] {
            if !list.is_empty() && list.len() != self.num_landmarks {
                return Err(Error::Input(format!(
                    "{} {name} for {} landmarks",
                    list.len(),
                    self.num_landmarks
                )));
            }
        }
        if self.base_sigma <= 0.0 || self.blob_sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Input("blob sigma must be positive".into()));
        }
        Ok(())
    }

    fn sigma(&self, k: usize) -> f64 {
        self.blob_sigma.get(k).copied().unwrap_or(self.base_sigma)
    }

    fn intensity(&self, k: usize) -> f64 {
        self.blob_intensity.get(k).copied().unwrap_or(self.base_intensity)
    }

    fn angle(&self, k: usize) -> f64 {
        let base = 2.0 * std::f64::consts::PI * k as f64 / self.num_landmarks as f64;
        base + self.angular_offsets.get(k).copied().unwrap_or(0.0)
    }

    /// Ring positions before any jitter; landmark 0 sits at the right
    /// extreme, landmark N/2 at the left.
    pub fn canonical_positions(&self) -> Vec<(f64, f64)> {
        let cx = self.image_size.1 as f64 / 2.0;
        let cy = self.image_size.0 as f64 / 2.0;
        (0..self.num_landmarks)
            .map(|k| {
                let a = self.angle(k);
                (cx + self.ellipse_radii.0 * a.cos(), cy + self.ellipse_radii.1 * a.sin())
            })
            .collect()
    }

    /// The designated outer-eye-corner pair: the leftmost and rightmost
    /// canonical ring points.
    pub fn interocular_indices(&self) -> (usize, usize) {
        (self.num_landmarks / 2, 0)
    }

    /// Mirror permutation of the ring: each landmark maps to the one whose
    /// canonical position is closest to its horizontal reflection. Indices
    /// without a mutual best match (odd rings, asymmetric offsets) stay
    /// fixed so the map is always an involution.
    pub fn flip_map(&self) -> Vec<usize> {
        let pts = self.canonical_positions();
        let cx = self.image_size.1 as f64 / 2.0;
        let mut map: Vec<usize> = (0..self.num_landmarks)
            .map(|k| {
                let mirrored = (2.0 * cx - pts[k].0, pts[k].1);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, p) in pts.iter().enumerate() {
                    let d = (p.0 - mirrored.0).powi(2) + (p.1 - mirrored.1).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect();
        for k in 0..map.len() {
            if map[map[k]] != k {
                map[k] = k;
            }
        }
        map
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn uniform(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..range)
    }
}

/// Render one sample. Ground truth is the blob centers.
pub fn generate_synthetic(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));

    let (h, w) = spec.image_size;
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let dx = uniform(&mut rng, spec.translation_jitter.0);
    let dy = uniform(&mut rng, spec.translation_jitter.1);
    let rot = uniform(&mut rng, spec.rotation_jitter);
    let scale = 1.0 + uniform(&mut rng, spec.scale_jitter);
    let (sin, cos) = rot.sin_cos();

    let canonical = spec.canonical_positions();
    let mut points = Vec::with_capacity(spec.num_landmarks);
    for p in &canonical {
        let ox = p.0 - cx;
        let oy = p.1 - cy;
        let rx = scale * (cos * ox - sin * oy);
        let ry = scale * (sin * ox + cos * oy);
        let jx = gaussian(&mut rng) * spec.landmark_jitter;
        let jy = gaussian(&mut rng) * spec.landmark_jitter;
        let x = (cx + rx + dx + jx).clamp(1.0, w as f64 - 1.0);
        let y = (cy + ry + dy + jy).clamp(1.0, h as f64 - 1.0);
        points.push((x, y));
    }

    let mut image = vec![0.0f64; 3 * h * w];
    for (k, &(px, py)) in points.iter().enumerate() {
        let sigma = spec.sigma(k);
        let sigma2 = 2.0 * sigma * sigma;
        let reach = (3.5 * sigma).ceil() as isize;
        let x0 = ((px as isize) - reach).max(0);
        let x1 = ((px as isize) + reach + 1).min(w as isize);
        let y0 = ((py as isize) - reach).max(0);
        let y1 = ((py as isize) + reach + 1).min(h as isize);
        for y in y0..y1 {
            for x in x0..x1 {
                let ddx = x as f64 + 0.5 - px;
                let ddy = y as f64 + 0.5 - py;
                let g = spec.intensity(k) * (-(ddx * ddx + ddy * ddy) / sigma2).exp();
                for c in 0..3 {
                    image[c * h * w + y as usize * w + x as usize] += g;
                }
            }
        }
    }

    Ok(Sample {
        image: Tensor::from_vec(&[3, h, w], image)?,
        landmarks: LandmarkSet::new(points)?,
        tags: Vec::new(),
    })
}

/// A slice of the infinite synthetic stream; disjoint `first_index` ranges
/// give disjoint train/test splits.
pub struct SyntheticDataset {
    spec: SyntheticSpec,
    first_index: u64,
    len: usize,
    flip_map: Vec<usize>,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticSpec, first_index: u64, len: usize) -> Result<SyntheticDataset> {
        spec.validate()?;
        let flip_map = spec.flip_map();
        Ok(SyntheticDataset { spec, first_index, len, flip_map })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.len
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        generate_synthetic(&self.spec, self.first_index + index as u64)
    }

    fn num_landmarks(&self) -> usize {
        self.spec.num_landmarks
    }

    fn image_size(&self) -> (usize, usize) {
        self.spec.image_size
    }

    fn interocular_indices(&self) -> (usize, usize) {
        self.spec.interocular_indices()
    }

    fn flip_map(&self) -> Option<&[usize]> {
        Some(&self.flip_map)
    }
}
