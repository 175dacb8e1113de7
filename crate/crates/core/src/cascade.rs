//! Coarse-to-fine cascade: the pyramidal patch schedule, staging, the
//! deep-supervised loss, training, and evaluation.
//!
//! One backbone pass per image; the same transformer weights run once per
//! stage over patches centered on the previous stage's predictions (the mean
//! face for stage 1), with the patch size halved each stage. Landmarks used
//! for cropping are detached — gradient reaches earlier stages only through
//! the shared feature map values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{forward_backbone, BackboneConfig, BackboneParams};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::checkpoint::{self, CheckpointData, OptimizerBlob};
use crate::data::{landmarks_tensor, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{local_to_global_rows, LandmarkSet, PatchRect};
use crate::metrics::{self, EvalReport};
use crate::model::{slpt_forward, AttentionRecord, SlptConfig, SlptParams};
use crate::nn::{adam_step, Activation, AdamState};
use crate::tensor::{backward, ops, Tensor};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Initial landmarks in normalized input coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFace {
    normalized: Vec<(f64, f64)>,
}

impl MeanFace {
    pub fn new(normalized: Vec<(f64, f64)>) -> Result<MeanFace> {
        for (i, p) in normalized.iter().enumerate() {
            if !p.0.is_finite() || !p.1.is_finite() {
                return Err(Error::Input(format!("mean-face point {i} is not finite")));
            }
        }
        Ok(MeanFace { normalized })
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn normalized_points(&self) -> &[(f64, f64)] {
        &self.normalized
    }

    /// Scale into pixels of an `(H, W)` input.
    pub fn to_landmarks(&self, input_size: (usize, usize)) -> LandmarkSet {
        let (h, w) = input_size;
        LandmarkSet::new(
            self.normalized
                .iter()
                .map(|&(x, y)| (x * w as f64, y * h as f64))
                .collect(),
        )
        .expect("finite by construction")
    }
}

/// How the loss (and NME) normalizes point distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossNormalizer {
    /// Distance between the two named landmarks of the ground truth.
    InterOcular { left: usize, right: usize },
    /// Fixed distance (degenerate layouts).
    Constant(f64),
}

impl LossNormalizer {
    pub fn distance(&self, gt: &LandmarkSet) -> Result<f64> {
        match *self {
            LossNormalizer::InterOcular { left, right } => inter_ocular_distance(gt, left, right),
            LossNormalizer::Constant(d) => Ok(d),
        }
    }
}

/// Euclidean distance between two named landmarks. A degenerate (zero)
/// result is returned as-is; the loss rejects it.
pub fn inter_ocular_distance(gt: &LandmarkSet, left: usize, right: usize) -> Result<f64> {
    if left >= gt.len() || right >= gt.len() {
        return Err(Error::Input(format!(
            "eye-corner indices ({left}, {right}) out of range for {} landmarks",
            gt.len()
        )));
    }
    if left == right {
        return Err(Error::Input(format!("eye-corner indices must differ, both are {left}")));
    }
    let a = gt.get(left);
    let b = gt.get(right);
    Ok(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub num_stages: usize,
    /// (H, W) of the input image.
    pub input_size: (usize, usize),
    /// Stage-1 patch size as a fraction of the feature-map extent.
    pub initial_patch_fraction: f64,
    /// Per-stage shrink factor.
    pub halving_factor: f64,
    /// Patch sizes never fall below this many feature pixels.
    pub min_patch_feature_px: usize,
    pub normalizer: LossNormalizer,
}

impl CascadeConfig {
    pub fn new(num_stages: usize, input_size: (usize, usize), normalizer: LossNormalizer) -> Self {
        CascadeConfig {
            num_stages,
            input_size,
            initial_patch_fraction: 0.25,
            halving_factor: 0.5,
            min_patch_feature_px: 2,
            normalizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Input("cascade needs at least one stage".into()));
        }
        if !(self.initial_patch_fraction > 0.0 && self.initial_patch_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "initial patch fraction {} outside (0, 1]",
                self.initial_patch_fraction
            )));
        }
        if !(self.halving_factor > 0.0 && self.halving_factor < 1.0) {
            return Err(Error::Input(format!(
                "halving factor {} outside (0, 1)",
                self.halving_factor
            )));
        }
        if self.min_patch_feature_px == 0 {
            return Err(Error::Input("minimum patch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage patch sizes in base-level feature pixels: a quarter of the
/// feature extent, halved per stage, floored to whole pixels with a minimum.
pub fn patch_schedule(cfg: &CascadeConfig, feature_extent: (usize, usize)) -> Vec<(f64, f64)> {
    let min = cfg.min_patch_feature_px as f64;
    let first = (
        (feature_extent.0 as f64 * cfg.initial_patch_fraction).floor().max(min),
        (feature_extent.1 as f64 * cfg.initial_patch_fraction).floor().max(min),
    );
    let mut sizes = Vec::with_capacity(cfg.num_stages);
    let mut cur = first;
    for _ in 0..cfg.num_stages {
        sizes.push(cur);
        cur = (
            (cur.0 * cfg.halving_factor).floor().max(min),
            (cur.1 * cfg.halving_factor).floor().max(min),
        );
    }
    sizes
}

/// Everything one stage produced.
pub struct StageOutput {
    /// Deep-supervised predictions in image pixels, one `[N, 2]` tensor per
    /// layer; the last is the stage estimate.
    pub layer_globals: Vec<Tensor>,
    /// Supporting patches at the finest pyramid level.
    pub rects: Vec<PatchRect>,
    pub patch_size_image_px: (f64, f64),
    pub attention: AttentionRecord,
    /// Landmarks the patches were centered on (stage s-1 estimate).
    pub crop_centers: LandmarkSet,
}

pub struct StageTrace {
    pub stages: Vec<StageOutput>,
}

impl StageTrace {
    /// Stage estimate (final layer) as plain landmarks.
    pub fn stage_landmarks(&self, stage: usize) -> LandmarkSet {
        let t = self.stages[stage].layer_globals.last().expect("layers >= 1");
        LandmarkSet::from_flat(&t.to_vec()).expect("finite forward output")
    }

    pub fn final_landmarks(&self) -> LandmarkSet {
        self.stage_landmarks(self.stages.len() - 1)
    }
}

/// The full trainable system: backbone + transformer + cascade schedule +
/// mean face.
pub struct CascadeModel {
    pub backbone_cfg: BackboneConfig,
    pub backbone: BackboneParams,
    pub slpt_cfg: SlptConfig,
    pub slpt: SlptParams,
    pub cascade_cfg: CascadeConfig,
    pub mean_face: MeanFace,
}

impl CascadeModel {
    pub fn init(
        rng: &mut ChaCha8Rng,
        backbone_cfg: BackboneConfig,
        slpt_cfg: SlptConfig,
        cascade_cfg: CascadeConfig,
        mean_face: MeanFace,
    ) -> Result<CascadeModel> {
        backbone_cfg.validate()?;
        slpt_cfg.validate()?;
        cascade_cfg.validate()?;
        if backbone_cfg.c_i != slpt_cfg.model_dim {
            return Err(Error::Contract(format!(
                "backbone C_I {} does not match model dim {}",
                backbone_cfg.c_i, slpt_cfg.model_dim
            )));
        }
        if backbone_cfg.input_size != cascade_cfg.input_size {
            return Err(Error::Contract(format!(
                "backbone input {:?} does not match cascade input {:?}",
                backbone_cfg.input_size, cascade_cfg.input_size
            )));
        }
        if mean_face.len() != slpt_cfg.num_landmarks {
            return Err(Error::Contract(format!(
                "mean face has {} points for {} landmarks",
                mean_face.len(),
                slpt_cfg.num_landmarks
            )));
        }
        if let LossNormalizer::InterOcular { left, right } = cascade_cfg.normalizer {
            if left >= slpt_cfg.num_landmarks || right >= slpt_cfg.num_landmarks || left == right {
                return Err(Error::Contract(format!(
                    "bad inter-ocular indices ({left}, {right}) for {} landmarks",
                    slpt_cfg.num_landmarks
                )));
            }
        }
        let backbone = BackboneParams::init(rng, &backbone_cfg)?;
        let slpt = SlptParams::init(rng, &slpt_cfg)?;
        Ok(CascadeModel {
            backbone_cfg,
            backbone,
            slpt_cfg,
            slpt,
            cascade_cfg,
            mean_face,
        })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.backbone.parameters();
        out.extend(self.slpt.parameters());
        out
    }

    pub fn forward(&self, image: &Tensor) -> Result<StageTrace> {
        run_cascade(image, &self.mean_face, self)
    }

    /// Stable key=value description of every configuration field; stored in
    /// checkpoints and compared on load.
    pub fn config_text(&self) -> String {
        let b = &self.backbone_cfg;
        let s = &self.slpt_cfg;
        let c = &self.cascade_cfg;
        let normalizer = match c.normalizer {
            LossNormalizer::InterOcular { left, right } => format!("interocular:{left}:{right}"),
            LossNormalizer::Constant(d) => format!("constant:{d}"),
        };
        format!(
            "input_h={}\ninput_w={}\nbackbone_channels={},{},{},{}\nsingle_level={}\n\
             num_landmarks={}\nmodel_dim={}\nheads={}\nlayers={}\npatch_k={}\nmlp_hidden={}\n\
             activation={}\nuse_msa={}\nuse_mca={}\nuse_encoding={}\n\
             stages={}\npatch_fraction={}\nhalving={}\nmin_patch={}\nnormalizer={}\n",
            b.input_size.0,
            b.input_size.1,
            b.stage_channels[0],
            b.stage_channels[1],
            b.stage_channels[2],
            b.stage_channels[3],
            b.single_level as u8,
            s.num_landmarks,
            s.model_dim,
            s.heads,
            s.layers,
            s.patch_k,
            s.mlp_hidden,
            s.activation.name(),
            s.use_msa as u8,
            s.use_mca as u8,
            s.use_structure_encoding as u8,
            c.num_stages,
            c.initial_patch_fraction,
            c.halving_factor,
            c.min_patch_feature_px,
            normalizer,
        )
    }

    pub fn save(&self, path: &std::path::Path, optimizer: Option<&AdamState>) -> Result<()> {
        let params = self.parameters();
        let data = CheckpointData {
            config: self.config_text(),
            mean_face: self.mean_face.normalized.clone(),
            params: params
                .iter()
                .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.to_vec()))
                .collect(),
            optimizer: optimizer.map(|o| {
                let (m, v, step) = o.slots();
                OptimizerBlob {
                    step,
                    first_moments: m.to_vec(),
                    second_moments: v.to_vec(),
                }
            }),
        };
        checkpoint::save_checkpoint(path, &data)
    }

    pub fn load(path: &std::path::Path) -> Result<(CascadeModel, Option<AdamState>)> {
        let data = checkpoint::load_checkpoint(path)?;
        let (backbone_cfg, slpt_cfg, cascade_cfg) = parse_model_config(&data.config)?;
        let mean_face = MeanFace::new(data.mean_face.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = CascadeModel::init(&mut rng, backbone_cfg, slpt_cfg, cascade_cfg, mean_face)?;
        let params = model.parameters();
        if params.len() != data.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} parameters, model built from its config has {}",
                data.params.len(),
                params.len()
            )));
        }
        for ((name, tensor), (saved_name, saved_shape, saved_values)) in
            params.iter().zip(&data.params)
        {
            if name != saved_name || tensor.shape() != saved_shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter mismatch: model expects {name} {:?}, checkpoint has {saved_name} {saved_shape:?}",
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(saved_values);
        }
        let optimizer = data.optimizer.map(|o| AdamState::restore(o.first_moments, o.second_moments, o.step));
        // keep the model's own field in sync with what we just loaded
        model.mean_face = MeanFace::new(data.mean_face)?;
        Ok((model, optimizer))
    }
}

fn parse_kv(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                return None;
            }
            l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Compare two config texts; errors name every differing key with both
/// values.
pub fn check_config_compatible(stored: &str, expected: &str) -> Result<()> {
    let a = parse_kv(stored);
    let b = parse_kv(expected);
    let mut diffs = Vec::new();
    for (k, want) in &b {
        match a.get(k) {
            Some(got) if got == want => {}
            Some(got) => diffs.push(format!("{k}: checkpoint {got}, expected {want}")),
            None => diffs.push(format!("{k}: missing from checkpoint, expected {want}")),
        }
    }
    for k in a.keys() {
        if !b.contains_key(k) {
            diffs.push(format!("{k}: present in checkpoint only"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(diffs.join("; ")))
    }
}

fn parse_model_config(text: &str) -> Result<(BackboneConfig, SlptConfig, CascadeConfig)> {
    let kv = parse_kv(text);
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint config missing key '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Incompatible(format!("bad value for '{k}'")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Incompatible(format!("bad value for '{k}'")))
    };
    let channels_raw = get("backbone_channels")?;
    let channels: Vec<usize> = channels_raw
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Incompatible("bad value for 'backbone_channels'".into()))?;
    if channels.len() != 4 {
        return Err(Error::Incompatible(format!(
            "backbone_channels needs 4 entries, got {}",
            channels.len()
        )));
    }
    let backbone_cfg = BackboneConfig {
        input_size: (parse_usize("input_h")?, parse_usize("input_w")?),
        stage_channels: [channels[0], channels[1], channels[2], channels[3]],
        single_level: get("single_level")? == "1",
        c_i: parse_usize("model_dim")?,
    };
    let slpt_cfg = SlptConfig {
        num_landmarks: parse_usize("num_landmarks")?,
        model_dim: parse_usize("model_dim")?,
        heads: parse_usize("heads")?,
        layers: parse_usize("layers")?,
        patch_k: parse_usize("patch_k")?,
        mlp_hidden: parse_usize("mlp_hidden")?,
        activation: Activation::parse(get("activation")?)?,
        use_msa: get("use_msa")? == "1",
        use_mca: get("use_mca")? == "1",
        use_structure_encoding: get("use_encoding")? == "1",
    };
    let normalizer_raw = get("normalizer")?;
    let normalizer = if let Some(rest) = normalizer_raw.strip_prefix("interocular:") {
        let mut it = rest.split(':');
        let left = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Incompatible("bad normalizer".into()))?;
        let right = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Incompatible("bad normalizer".into()))?;
        LossNormalizer::InterOcular { left, right }
    } else if let Some(rest) = normalizer_raw.strip_prefix("constant:") {
        LossNormalizer::Constant(
            rest.parse()
                .map_err(|_| Error::Incompatible("bad normalizer".into()))?,
        )
    } else {
        return Err(Error::Incompatible(format!("bad normalizer '{normalizer_raw}'")));
    };
    let cascade_cfg = CascadeConfig {
        num_stages: parse_usize("stages")?,
        input_size: (parse_usize("input_h")?, parse_usize("input_w")?),
        initial_patch_fraction: parse_f64("patch_fraction")?,
        halving_factor: parse_f64("halving")?,
        min_patch_feature_px: parse_usize("min_patch")?,
        normalizer,
    };
    Ok((backbone_cfg, slpt_cfg, cascade_cfg))
}

/// Algorithm: one backbone pass, then the same transformer over
/// progressively smaller patches centered on the previous estimate.
pub fn run_cascade(image: &Tensor, init: &MeanFace, model: &CascadeModel) -> Result<StageTrace> {
    run_cascade_impl(image, init, model, None)
}

/// Cascade pass with every stage's crop centers pinned to the given
/// landmarks instead of the previous stage's output. Crop coordinates carry
/// no gradient, so a finite-difference oracle must hold them fixed to match
/// the analytic gradient; this entry point exists for that.
pub fn run_cascade_frozen_centers(
    image: &Tensor,
    centers: &[LandmarkSet],
    model: &CascadeModel,
) -> Result<StageTrace> {
    if centers.len() != model.cascade_cfg.num_stages {
        return Err(Error::Contract(format!(
            "{} frozen centers for {} stages",
            centers.len(),
            model.cascade_cfg.num_stages
        )));
    }
    run_cascade_impl(image, &model.mean_face, model, Some(centers))
}

fn run_cascade_impl(
    image: &Tensor,
    init: &MeanFace,
    model: &CascadeModel,
    frozen_centers: Option<&[LandmarkSet]>,
) -> Result<StageTrace> {
    let pyramid = forward_backbone(image, &model.backbone_cfg, &model.backbone)?;
    let base = &pyramid.levels[0].0;
    let feature_extent = (base.shape()[1], base.shape()[2]);
    let schedule = patch_schedule(&model.cascade_cfg, feature_extent);
    let base_scale = pyramid.base_scale();

    let mut current = init.to_landmarks(model.cascade_cfg.input_size);
    let mut stages = Vec::with_capacity(model.cascade_cfg.num_stages);
    for (stage_idx, size_f) in schedule.into_iter().enumerate() {
        if let Some(centers) = frozen_centers {
            current = centers[stage_idx].clone();
        }
        let size_img = (size_f.1 * base_scale, size_f.0 * base_scale); // (w, h)
        let patches = crate::backbone::extract_patches(
            &pyramid,
            &current,
            size_img,
            model.slpt_cfg.patch_k,
        )?;
        let out = slpt_forward(&patches.features, &model.slpt, &model.slpt_cfg)?;
        let layer_globals: Vec<Tensor> = out
            .layer_locals
            .iter()
            .map(|t| local_to_global_rows(t, &patches.rects, patches.feature_to_image_scale))
            .collect::<Result<_>>()?;
        let next = LandmarkSet::from_flat(&layer_globals.last().expect("layers >= 1").to_vec())?;
        stages.push(StageOutput {
            layer_globals,
            rects: patches.rects,
            patch_size_image_px: size_img,
            attention: out.attention,
            crop_centers: current,
        });
        current = next;
    }
    Ok(StageTrace { stages })
}

/// Deep-supervised normalized L2 loss: the mean over stages, layers, and
/// landmarks of the point distance divided by `d`.
pub fn cascade_loss(trace: &StageTrace, gt: &LandmarkSet, d: f64) -> Result<Tensor> {
    if !(d > 0.0) {
        return Err(Error::Input(format!(
            "loss normalization distance must be positive, got {d}"
        )));
    }
    let gt_t = landmarks_tensor(gt);
    let mut acc: Option<Tensor> = None;
    let mut terms = 0usize;
    for stage in &trace.stages {
        for pred in &stage.layer_globals {
            if pred.shape() != gt_t.shape() {
                return Err(Error::Input(format!(
                    "prediction shape {:?} does not match ground truth {:?}",
                    pred.shape(),
                    gt_t.shape()
                )));
            }
            let diff = ops::sub(pred, &gt_t)?;
            let sq = ops::mul(&diff, &diff)?;
            let dist = ops::sqrt(&ops::sum_last_axis(&sq));
            let total = ops::sum_all(&dist);
            acc = Some(match acc {
                Some(a) => ops::add(&a, &total)?,
                None => total,
            });
            terms += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::Contract("empty stage trace".into()))?;
    let denom = (terms * gt.len()) as f64 * d;
    Ok(ops::scale(&acc, 1.0 / denom))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) at which the learning rate multiplies by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Per-stage NME (percent) of the stage estimates over the epoch's
    /// (augmented) training samples.
    pub stage_nme: Vec<f64>,
}

impl EpochStats {
    /// Stable machine-parseable record: `epoch=  loss=  stage1_nme= ...`.
    pub fn log_line(&self) -> String {
        let mut line = format!("epoch={} loss={}", self.epoch, metrics::fmt(self.mean_loss));
        for (i, v) in self.stage_nme.iter().enumerate() {
            line.push_str(&format!(" stage{}_nme={}", i + 1, metrics::fmt(*v)));
        }
        line
    }
}

/// One pass over the dataset: shuffle, then per batch zero-grad, forward
/// cascade, loss, backward, Adam step. Aborts on a non-finite loss, naming
/// the batch.
pub fn train_epoch(
    model: &CascadeModel,
    dataset: &dyn Dataset,
    cfg: &TrainConfig,
    optimizer: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Input("training on an empty dataset".into()));
    }
    let named = model.parameters();
    let params: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let lr = cfg.lr_at_epoch(epoch);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let stages = model.cascade_cfg.num_stages;
    let mut loss_sum = 0.0;
    let mut nme_sum = vec![0.0; stages];
    let mut seen = 0usize;

    for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        for p in &params {
            p.zero_grad();
        }
        let mut batch_loss: Option<Tensor> = None;
        for &idx in batch {
            let sample = dataset.sample(idx)?;
            let sample = match &cfg.augment {
                Some(a) => augment(&sample, a, &mut rng)?,
                None => sample,
            };
            let d = model.cascade_cfg.normalizer.distance(&sample.landmarks)?;
            let trace = model.forward(&sample.image)?;
            let loss = cascade_loss(&trace, &sample.landmarks, d)?;
            loss_sum += loss.item();
            for s in 0..stages {
                nme_sum[s] += metrics::nme(&trace.stage_landmarks(s), &sample.landmarks, d)?;
            }
            seen += 1;
            batch_loss = Some(match batch_loss {
                Some(acc) => ops::add(&acc, &loss)?,
                None => loss,
            });
        }
        let batch_loss = ops::scale(&batch_loss.expect("non-empty batch"), 1.0 / batch.len() as f64);
        if !batch_loss.item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in epoch {epoch} batch {batch_idx} (samples {batch:?})"
            )));
        }
        backward(&batch_loss)?;
        adam_step(&params, optimizer, lr, ADAM_BETAS, ADAM_EPS)?;
    }

    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / seen as f64,
        stage_nme: nme_sum.iter().map(|v| v / seen as f64).collect(),
    })
}

/// Multi-epoch driver with step decay; calls `on_epoch` after each epoch.
pub fn train(
    model: &CascadeModel,
    dataset: &dyn Dataset,
    cfg: &TrainConfig,
    optimizer: &mut AdamState,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let s = train_epoch(model, dataset, cfg, optimizer, epoch)?;
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Run the model over a dataset (no augmentation) and assemble the metric
/// report. `threshold` is in NME percent.
pub fn evaluate(
    model: &CascadeModel,
    dataset: &dyn Dataset,
    threshold: f64,
    ced_samples: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluating on an empty dataset".into()));
    }
    let stages = model.cascade_cfg.num_stages;
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::with_capacity(dataset.len()); stages];
    for i in 0..dataset.len() {
        let sample = dataset.sample(i)?;
        let d = model.cascade_cfg.normalizer.distance(&sample.landmarks)?;
        let trace = model.forward(&sample.image)?;
        for s in 0..stages {
            per_stage[s].push(metrics::nme(&trace.stage_landmarks(s), &sample.landmarks, d)?);
        }
    }
    let final_nmes = per_stage.last().expect("stages >= 1").clone();
    let (auc, ced) = metrics::auc_ced(&final_nmes, threshold, ced_samples)?;
    let mut stage_nme = Vec::with_capacity(stages);
    let mut stage_fr = Vec::with_capacity(stages);
    let mut stage_auc = Vec::with_capacity(stages);
    for nmes in &per_stage {
        stage_nme.push(nmes.iter().sum::<f64>() / nmes.len() as f64);
        stage_fr.push(metrics::failure_rate(nmes, threshold)?);
        stage_auc.push(metrics::auc_ced(nmes, threshold, ced_samples)?.0);
    }
    Ok(EvalReport {
        dataset_nme: final_nmes.iter().sum::<f64>() / final_nmes.len() as f64,
        failure_rate: metrics::failure_rate(&final_nmes, threshold)?,
        auc,
        threshold,
        ced,
        per_image_nme: final_nmes,
        stage_nme,
        stage_fr,
        stage_auc,
    })
}

/// Final-stage attention records over (up to `limit`) dataset images, for
/// the mean-interaction export.
pub fn final_stage_attention(
    model: &CascadeModel,
    dataset: &dyn Dataset,
    limit: usize,
) -> Result<Vec<AttentionRecord>> {
    let count = dataset.len().min(limit);
    if count == 0 {
        return Err(Error::Input("attention export needs at least one image".into()));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let sample = dataset.sample(i)?;
        let trace = model.forward(&sample.image)?;
        records.push(trace.stages.last().expect("stages >= 1").attention.clone());
    }
    Ok(records)
}
