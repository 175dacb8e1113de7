//! Run configuration: defaults, flat key=value config files, and flag
//! overrides, resolved into the model/dataset/training objects.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand_chacha::ChaCha8Rng;
use slpt_core::backbone::BackboneConfig;
use slpt_core::cascade::{CascadeConfig, CascadeModel, LossNormalizer, MeanFace, TrainConfig};
use slpt_core::data::augment::AugmentConfig;
use slpt_core::data::formats::{load_annotations, AnnotationFormat};
use slpt_core::data::synthetic::{SyntheticDataset, SyntheticSpec};
use slpt_core::data::{mean_face, Dataset};
use slpt_core::model::SlptConfig;
use slpt_core::nn::Activation;

/// Keys that change the trained model shape; explicit values are checked
/// against checkpoints on eval/export.
const MODEL_KEYS: [&str; 12] = [
    "landmarks",
    "dim",
    "heads",
    "layers",
    "patch_k",
    "mlp_hidden",
    "activation",
    "levels",
    "backbone_channels",
    "stages",
    "input",
    "encoding",
];

fn defaults() -> BTreeMap<String, String> {
    let pairs = [
        ("activation", "relu"),
        ("augment", "1"),
        ("backbone_channels", "24,32,48,64"),
        ("batch", "16"),
        ("ced_samples", "100"),
        ("dataset", "synthetic"),
        ("dim", "256"),
        ("encoding", "1"),
        ("epochs", "140"),
        ("format", ""),
        ("heads", "8"),
        ("input", "256"),
        ("landmarks", "98"),
        ("layers", "6"),
        ("levels", "single"),
        ("lr", "0.001"),
        ("lr_decay", "0.1"),
        ("mca", "1"),
        ("milestones", "120,140"),
        ("min_patch", "2"),
        ("mlp_hidden", ""),
        ("msa", "1"),
        ("patch_fraction", "0.25"),
        ("patch_k", "7"),
        ("seed", "0"),
        ("stages", "3"),
        ("synth_seed", "4242"),
        ("synth_test", "500"),
        ("tag", ""),
        ("synth_train", "2000"),
        ("threshold", "0.1"),
    ];
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    pub fn resolve(
        config_file: Option<&Path>,
        overrides: &[(&'static str, Option<String>)],
    ) -> Result<RunConfig> {
        let mut values = defaults();
        let mut explicit = BTreeSet::new();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{} line {}: expected key=value", path.display(), lineno + 1)
                })?;
                let k = k.trim();
                if !values.contains_key(k) {
                    bail!("{} line {}: unknown key '{k}'", path.display(), lineno + 1);
                }
                values.insert(k.to_string(), v.trim().to_string());
                explicit.insert(k.to_string());
            }
        }
        for (key, value) in overrides {
            if let Some(v) = value {
                if !values.contains_key(*key) {
                    bail!("unknown option '{key}'");
                }
                values.insert(key.to_string(), v.clone());
                explicit.insert(key.to_string());
            }
        }
        let cfg = RunConfig { values, explicit };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        // build everything once so bad values fail before any work
        let _ = self.slpt_config()?;
        let _ = self.backbone_config()?;
        let _ = self.train_config(None)?;
        if self.dataset_str() != "synthetic" && self.str_val("format").is_empty() {
            bail!("file datasets need --format (pts68, wflw98-csv, or cofw29)");
        }
        let t = self.f64_val("threshold")?;
        if !(t > 0.0) {
            bail!("threshold must be positive, got {t}");
        }
        Ok(())
    }

    pub fn str_val(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn usize_val(&self, key: &str) -> Result<usize> {
        self.str_val(key)
            .parse()
            .with_context(|| format!("bad value for '{key}': '{}'", self.str_val(key)))
    }

    pub fn u64_val(&self, key: &str) -> Result<u64> {
        self.str_val(key)
            .parse()
            .with_context(|| format!("bad value for '{key}': '{}'", self.str_val(key)))
    }

    pub fn f64_val(&self, key: &str) -> Result<f64> {
        self.str_val(key)
            .parse()
            .with_context(|| format!("bad value for '{key}': '{}'", self.str_val(key)))
    }

    pub fn flag_val(&self, key: &str) -> Result<bool> {
        match self.str_val(key) {
            "1" | "true" | "on" => Ok(true),
            "0" | "false" | "off" => Ok(false),
            other => bail!("bad value for '{key}': '{other}' (use 0 or 1)"),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
        self.explicit.insert(key.to_string());
    }

    /// Stable echo of the resolved configuration; feeding it back through
    /// `--config` reproduces the run.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn dataset_str(&self) -> &str {
        self.str_val("dataset")
    }

    pub fn seed(&self) -> u64 {
        self.u64_val("seed").unwrap_or(0)
    }

    pub fn threshold_percent(&self) -> Result<f64> {
        Ok(self.f64_val("threshold")? * 100.0)
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.str_val(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("bad value in '{key}': '{s}'"))
            })
            .collect()
    }

    pub fn slpt_config(&self) -> Result<SlptConfig> {
        let dim = self.usize_val("dim")?;
        let mlp_hidden = match self.str_val("mlp_hidden") {
            "" => 4 * dim,
            other => other
                .parse()
                .with_context(|| format!("bad value for 'mlp_hidden': '{other}'"))?,
        };
        let cfg = SlptConfig {
            num_landmarks: self.usize_val("landmarks")?,
            model_dim: dim,
            heads: self.usize_val("heads")?,
            layers: self.usize_val("layers")?,
            patch_k: self.usize_val("patch_k")?,
            mlp_hidden,
            activation: Activation::parse(self.str_val("activation"))
                .map_err(|e| anyhow!("{e}"))?,
            use_msa: self.flag_val("msa")?,
            use_mca: self.flag_val("mca")?,
            use_structure_encoding: self.flag_val("encoding")?,
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let input = self.usize_val("input")?;
        let channels = self.usize_list("backbone_channels")?;
        if channels.len() != 4 {
            bail!("backbone_channels needs 4 comma-separated values");
        }
        let single_level = match self.str_val("levels") {
            "single" => true,
            "multi" => false,
            other => bail!("levels must be 'single' or 'multi', got '{other}'"),
        };
        let cfg = BackboneConfig {
            input_size: (input, input),
            stage_channels: [channels[0], channels[1], channels[2], channels[3]],
            single_level,
            c_i: self.usize_val("dim")?,
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    pub fn train_config(&self, flip_meta: Option<(Vec<usize>, (usize, usize))>) -> Result<TrainConfig> {
        let augment = if self.flag_val("augment")? {
            let (map, eyes) = match flip_meta {
                Some((m, e)) => (Some(m), Some(e)),
                None => (None, None),
            };
            let mut cfg = AugmentConfig::standard(map, eyes);
            if cfg.flip_map.is_none() {
                cfg.flip_prob = 0.0;
            }
            Some(cfg)
        } else {
            None
        };
        Ok(TrainConfig {
            epochs: self.usize_val("epochs")?,
            batch_size: self.usize_val("batch")?.max(1),
            lr: self.f64_val("lr")?,
            milestones: self.usize_list("milestones")?,
            lr_decay: self.f64_val("lr_decay")?,
            seed: self.seed(),
            augment,
        })
    }

    /// Train and evaluation datasets. Synthetic runs use disjoint sample
    /// streams; file datasets serve both roles.
    pub fn datasets(&self) -> Result<(Box<dyn Dataset>, Box<dyn Dataset>)> {
        if self.dataset_str() == "synthetic" {
            let input = self.usize_val("input")?;
            let mut spec = SyntheticSpec::new(self.usize_val("landmarks")?, input, 0);
            spec.seed = self.u64_val("synth_seed")?;
            let train_len = self.usize_val("synth_train")?;
            let test_len = self.usize_val("synth_test")?;
            let train = SyntheticDataset::new(spec.clone(), 0, train_len)
                .map_err(|e| anyhow!("{e}"))?;
            let test = SyntheticDataset::new(spec, 1_000_000, test_len)
                .map_err(|e| anyhow!("{e}"))?;
            Ok((Box::new(train), Box::new(test)))
        } else {
            let format = AnnotationFormat::parse(self.str_val("format"))
                .map_err(|e| anyhow!("{e}"))?;
            let path = Path::new(self.dataset_str());
            let train = load_annotations(path, format).map_err(|e| anyhow!("{e}"))?;
            let test = load_annotations(path, format).map_err(|e| anyhow!("{e}"))?;
            Ok((Box::new(train), Box::new(test)))
        }
    }

    /// Validate that the dataset matches the configured model dimensions.
    pub fn check_dataset(&self, dataset: &dyn Dataset) -> Result<()> {
        let n = self.usize_val("landmarks")?;
        if self.dataset_str() != "synthetic"
            && self.is_explicit("landmarks")
            && dataset.num_landmarks() != n
        {
            bail!(
                "dataset has {} landmarks, config says {n}",
                dataset.num_landmarks()
            );
        }
        let input = self.usize_val("input")?;
        if dataset.image_size() != (input, input) {
            bail!(
                "dataset images are {:?}, config input is {input}x{input}",
                dataset.image_size()
            );
        }
        Ok(())
    }

    /// Effective landmark count: file formats fix it, synthetic follows the
    /// config.
    pub fn effective_landmarks(&self, dataset: &dyn Dataset) -> usize {
        dataset.num_landmarks()
    }

    pub fn build_model(&self, train_set: &dyn Dataset, rng: &mut ChaCha8Rng) -> Result<CascadeModel> {
        let n = self.effective_landmarks(train_set);
        let mut slpt_cfg = self.slpt_config()?;
        slpt_cfg.num_landmarks = n;
        let backbone_cfg = self.backbone_config()?;
        let (left, right) = train_set.interocular_indices();
        let mut cascade_cfg = CascadeConfig::new(
            self.usize_val("stages")?,
            backbone_cfg.input_size,
            LossNormalizer::InterOcular { left, right },
        );
        cascade_cfg.initial_patch_fraction = self.f64_val("patch_fraction")?;
        cascade_cfg.min_patch_feature_px = self.usize_val("min_patch")?;
        let mf: MeanFace = mean_face(train_set).map_err(|e| anyhow!("{e}"))?;
        CascadeModel::init(rng, backbone_cfg, slpt_cfg, cascade_cfg, mf).map_err(|e| anyhow!("{e}"))
    }

    /// Model config keys the user pinned explicitly, as `key=value` text
    /// lines mapped onto the checkpoint's config vocabulary.
    pub fn explicit_model_expectations(&self, stored: &str) -> Result<Vec<(String, String, String)>> {
        let stored_kv: BTreeMap<&str, &str> = stored
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let mut out = Vec::new();
        let mut push = |stored_key: &str, expected: String| {
            if let Some(got) = stored_kv.get(stored_key) {
                out.push((stored_key.to_string(), got.to_string(), expected));
            }
        };
        for key in MODEL_KEYS {
            if !self.is_explicit(key) {
                continue;
            }
            match key {
                "landmarks" => push("num_landmarks", self.str_val(key).to_string()),
                "dim" => push("model_dim", self.str_val(key).to_string()),
                "heads" => push("heads", self.str_val(key).to_string()),
                "layers" => push("layers", self.str_val(key).to_string()),
                "patch_k" => push("patch_k", self.str_val(key).to_string()),
                "mlp_hidden" if !self.str_val(key).is_empty() => {
                    push("mlp_hidden", self.str_val(key).to_string())
                }
                "activation" => push("activation", self.str_val(key).to_string()),
                "levels" => push(
                    "single_level",
                    if self.str_val(key) == "single" { "1" } else { "0" }.to_string(),
                ),
                "backbone_channels" => push(
                    "backbone_channels",
                    self.usize_list(key)?
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                "stages" => push("stages", self.str_val(key).to_string()),
                "input" => {
                    push("input_h", self.str_val(key).to_string());
                    push("input_w", self.str_val(key).to_string());
                }
                "encoding" => push("use_encoding", self.str_val(key).to_string()),
                _ => {}
            }
        }
        Ok(out)
    }
}
