//! Small strided CNN producing the feature map(s) the patch transformer
//! crops from.
//!
//! The stem downsamples by 4 (two stride-2 convs plus one stride-1 conv);
//! three further stride-2 stages extend the pyramid to strides 8/16/32 in
//! multi-level mode. Convolutions pad by replication so border behavior
//! matches the crop sampler, and there is no normalization layer anywhere —
//! forward is a pure function of (image, parameters).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{crop_resize, rects_from_landmarks, LandmarkSet, PatchRect};
use crate::nn::ConvLayer;
use crate::tensor::{ops, Tensor};

/// Number of pyramid levels in multi-level mode.
pub const PYRAMID_LEVELS: usize = 4;
/// Output stride of the stem (and of the single-level feature map).
pub const BASE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Input image size (H, W).
    pub input_size: (usize, usize),
    /// Channels of the four stages (only the first is used single-level).
    pub stage_channels: [usize; PYRAMID_LEVELS],
    /// One stride-4 level when true, the 4-level pyramid when false.
    pub single_level: bool,
    /// Token embedding width the feature maps are reduced to.
    pub c_i: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Input("backbone input size must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.c_i == 0 {
            return Err(Error::Input("backbone channel counts must be positive".into()));
        }
        if !self.single_level && self.c_i % PYRAMID_LEVELS != 0 {
            return Err(Error::Input(format!(
                "multi-level mode needs C_I divisible by {PYRAMID_LEVELS}, got {}",
                self.c_i
            )));
        }
        Ok(())
    }
}

/// Feature maps with their image-to-feature scales, coarsest last.
pub struct FeaturePyramid {
    pub levels: Vec<(Tensor, f64)>,
}

impl FeaturePyramid {
    pub fn base_scale(&self) -> f64 {
        self.levels[0].1
    }
}

/// All backbone weights.
#[derive(Clone)]
pub struct BackboneParams {
    stem: Vec<ConvLayer>,
    downs: Vec<ConvLayer>,
    reducers: Vec<ConvLayer>,
    single_level: bool,
}

impl BackboneParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Result<BackboneParams> {
        cfg.validate()?;
        let c = cfg.stage_channels;
        let stem = vec![
            ConvLayer::new(rng, 3, c[0], 3, 2),
            ConvLayer::new(rng, c[0], c[0], 3, 2),
            ConvLayer::new(rng, c[0], c[0], 3, 1),
        ];
        if cfg.single_level {
            let reducers = vec![ConvLayer::new(rng, c[0], cfg.c_i, 1, 1)];
            Ok(BackboneParams { stem, downs: Vec::new(), reducers, single_level: true })
        } else {
            let downs = vec![
                ConvLayer::new(rng, c[0], c[1], 3, 2),
                ConvLayer::new(rng, c[1], c[2], 3, 2),
                ConvLayer::new(rng, c[2], c[3], 3, 2),
            ];
            let cr = cfg.c_i / PYRAMID_LEVELS;
            let reducers = (0..PYRAMID_LEVELS)
                .map(|k| ConvLayer::new(rng, c[k], cr, 1, 1))
                .collect();
            Ok(BackboneParams { stem, downs, reducers, single_level: false })
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.stem.iter().enumerate() {
            l.push_params(&format!("backbone.stem{i}"), &mut out);
        }
        for (i, l) in self.downs.iter().enumerate() {
            l.push_params(&format!("backbone.down{i}"), &mut out);
        }
        for (i, l) in self.reducers.iter().enumerate() {
            l.push_params(&format!("backbone.reduce{i}"), &mut out);
        }
        out
    }
}

/// Run the backbone on a `[3, H, W]` image.
pub fn forward_backbone(
    image: &Tensor,
    cfg: &BackboneConfig,
    params: &BackboneParams,
) -> Result<FeaturePyramid> {
    let (h, w) = cfg.input_size;
    if image.shape() != [3, h, w] {
        return Err(Error::Input(format!(
            "backbone expects a [3, {h}, {w}] image, got {:?}",
            image.shape()
        )));
    }
    if params.single_level != cfg.single_level {
        return Err(Error::Contract(
            "backbone params were built for the other level mode".into(),
        ));
    }
    let mut x = image.clone();
    for conv in &params.stem {
        x = ops::relu(&conv.forward(&x)?);
    }
    if cfg.single_level {
        let reduced = params.reducers[0].forward(&x)?;
        return Ok(FeaturePyramid { levels: vec![(reduced, BASE_STRIDE as f64)] });
    }
    let mut stages = vec![x];
    for conv in &params.downs {
        let next = ops::relu(&conv.forward(stages.last().expect("non-empty"))?);
        stages.push(next);
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    for (k, stage) in stages.iter().enumerate() {
        let reduced = params.reducers[k].forward(stage)?;
        levels.push((reduced, (BASE_STRIDE << k) as f64));
    }
    Ok(FeaturePyramid { levels })
}

/// Patches for one cascade stage: per-landmark features plus the rects (at
/// the finest level) that map local predictions back to image pixels.
pub struct StagePatches {
    /// `[N, C_I, K, K]`
    pub features: Tensor,
    pub rects: Vec<PatchRect>,
    pub feature_to_image_scale: f64,
}

/// Crop per-landmark patches sized `stage_patch_size` (in input-image
/// pixels) from every pyramid level, resize each to `K x K`, and concatenate
/// on channels. Works for the single-level pyramid (one crop) and the
/// 4-level pyramid (`C_I/4` channels from each level).
pub fn extract_patches(
    pyramid: &FeaturePyramid,
    landmarks: &LandmarkSet,
    stage_patch_size: (f64, f64),
    k: usize,
) -> Result<StagePatches> {
    if pyramid.levels.is_empty() {
        return Err(Error::Contract("empty feature pyramid".into()));
    }
    let n = landmarks.len();
    let mut per_level_rects = Vec::with_capacity(pyramid.levels.len());
    for (_, scale) in &pyramid.levels {
        let size_f = (stage_patch_size.0 / scale, stage_patch_size.1 / scale);
        per_level_rects.push(rects_from_landmarks(landmarks, size_f, *scale)?);
    }
    let mut per_landmark = Vec::with_capacity(n);
    for i in 0..n {
        let mut pieces = Vec::with_capacity(pyramid.levels.len());
        for (lvl, (map, _)) in pyramid.levels.iter().enumerate() {
            pieces.push(crop_resize(map, &per_level_rects[lvl][i], k)?);
        }
        let patch = if pieces.len() == 1 {
            pieces.pop().expect("one piece")
        } else {
            ops::concat(&pieces, 0)?
        };
        per_landmark.push(patch);
    }
    Ok(StagePatches {
        features: ops::stack0(&per_landmark)?,
        rects: per_level_rects.swap_remove(0),
        feature_to_image_scale: pyramid.base_scale(),
    })
}

/// The 4-level concatenation path; errors unless the pyramid has exactly
/// four levels.
pub fn multi_level_patch_features(
    pyramid: &FeaturePyramid,
    landmarks: &LandmarkSet,
    stage_patch_size: (f64, f64),
    k: usize,
) -> Result<Tensor> {
    if pyramid.levels.len() != PYRAMID_LEVELS {
        return Err(Error::Contract(format!(
            "multi-level patch features need {PYRAMID_LEVELS} levels, got {}",
            pyramid.levels.len()
        )));
    }
    Ok(extract_patches(pyramid, landmarks, stage_patch_size, k)?.features)
}
