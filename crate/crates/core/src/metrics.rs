//! Evaluation metrics, attention-interaction summaries, and the attention
//! cost/parameter accounting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::model::AttentionRecord;
use crate::tensor::Tensor;

/// Normalized mean error in percent: mean point distance over `d`, x100.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, d: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} landmarks, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if !(d > 0.0) {
        return Err(Error::Input(format!("normalization distance must be positive, got {d}")));
    }
    let n = pred.len() as f64;
    let total: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
        .sum();
    Ok(total / (n * d) * 100.0)
}

/// Percentage of images whose NME exceeds the threshold (strict; ties count
/// as success). Both arguments in percent.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    if nmes.is_empty() {
        return Err(Error::Input("failure rate of an empty NME list".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Input(format!("threshold must be positive, got {threshold}")));
    }
    let failures = nmes.iter().filter(|&&v| v > threshold).count();
    Ok(100.0 * failures as f64 / nmes.len() as f64)
}

/// Area under the cumulative error distribution from 0 to `threshold`,
/// normalized so a perfect model scores 1, plus a `samples`-point CED curve.
///
/// The CED is the exact step function `x -> fraction(NME <= x)`; its integral
/// reduces to `sum(max(0, threshold - nme)) / (n * threshold)`.
pub fn auc_ced(nmes: &[f64], threshold: f64, samples: usize) -> Result<(f64, Vec<(f64, f64)>)> {
    if nmes.is_empty() {
        return Err(Error::Input("AUC of an empty NME list".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Input(format!("threshold must be positive, got {threshold}")));
    }
    if samples < 2 {
        return Err(Error::Input(format!("CED needs at least 2 samples, got {samples}")));
    }
    let n = nmes.len() as f64;
    let auc = nmes
        .iter()
        .map(|&v| (threshold - v).max(0.0))
        .sum::<f64>()
        / (n * threshold);
    let mut sorted = nmes.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let ced = (0..samples)
        .map(|k| {
            let x = threshold * k as f64 / (samples - 1) as f64;
            let below = sorted.partition_point(|&v| v <= x);
            (x, below as f64 / n)
        })
        .collect();
    Ok((auc, ced))
}

/// Per-layer mean attention matrices over images and heads.
pub struct AttentionSummary {
    pub num_landmarks: usize,
    /// One `N*N` row-major matrix per layer, `None` where the block was
    /// disabled.
    pub msa: Vec<Option<Vec<f64>>>,
    pub mca: Vec<Option<Vec<f64>>>,
}

/// Average final-stage attention over images and heads, per layer and block
/// type. Rows stay stochastic (means of row-stochastic matrices).
pub fn attention_interaction_summary(records: &[AttentionRecord]) -> Result<AttentionSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("attention summary of an empty record list".into()))?;
    let n = first.num_landmarks;
    let heads = first.heads;
    let layers = first.msa.len();
    for r in records {
        if r.num_landmarks != n || r.heads != heads || r.msa.len() != layers {
            return Err(Error::Contract(
                "attention records disagree on layer/head/landmark counts".into(),
            ));
        }
    }
    let average = |pick: &dyn Fn(&AttentionRecord) -> &Vec<Option<Vec<f64>>>| -> Result<Vec<Option<Vec<f64>>>> {
        (0..layers)
            .map(|l| {
                let present = pick(first)[l].is_some();
                if records.iter().any(|r| pick(r)[l].is_some() != present) {
                    return Err(Error::Contract(format!(
                        "layer {l} attention present in some records and absent in others"
                    )));
                }
                if !present {
                    return Ok(None);
                }
                let mut acc = vec![0.0; n * n];
                for r in records {
                    let mats = pick(r)[l].as_ref().expect("checked present");
                    for h in 0..heads {
                        for (a, v) in acc.iter_mut().zip(&mats[h * n * n..(h + 1) * n * n]) {
                            *a += v;
                        }
                    }
                }
                let scale = 1.0 / (records.len() * heads) as f64;
                for a in &mut acc {
                    *a *= scale;
                }
                Ok(Some(acc))
            })
            .collect()
    };
    Ok(AttentionSummary {
        num_landmarks: n,
        msa: average(&|r| &r.msa)?,
        mca: average(&|r| &r.mca)?,
    })
}

/// Per-row argmax of an `N x N` attention matrix: landmark i connects to the
/// landmark it attends to most.
pub fn argmax_connections(matrix: &[f64], n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &matrix[i * n..(i + 1) * n];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inputs of the attention cost formulas.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    /// N, landmarks (sparse token count).
    pub num_landmarks: u64,
    /// H, heads.
    pub heads: u64,
    /// C_h, per-head width.
    pub head_dim: u64,
    /// Full-map token count `W_I*H_I / (P_w*P_h)`.
    pub full_tokens: u64,
}

/// Sparse-token cross-attention MACs: `4*H*N*C_h^2 + 2*H*N^2*C_h`.
pub fn omega_sparse(m: &CostModel) -> u64 {
    let CostModel { num_landmarks: n, heads: h, head_dim: c, .. } = *m;
    4 * h * n * c * c + 2 * h * n * n * c
}

/// Full-feature-map cross-attention MACs:
/// `(2N + 2M) * H * C_h^2 + 2*N*H*M*C_h` with `M` the full token count.
pub fn omega_full(m: &CostModel) -> u64 {
    let CostModel { num_landmarks: n, heads: h, head_dim: c, full_tokens: t } = *m;
    (2 * n + 2 * t) * h * c * c + 2 * n * h * t * c
}

/// Learnable scalar counts, total and by top-level module prefix.
pub struct ParamCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

/// Count learnable scalars from named parameters (names like
/// `backbone.stem0.weight`; the first dot-segment is the module).
pub fn count_params(named: &[(String, Tensor)]) -> ParamCount {
    let mut by_module: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (name, t) in named {
        let module = name.split('.').next().unwrap_or("").to_string();
        *by_module.entry(module).or_insert(0) += t.numel();
        total += t.numel();
    }
    ParamCount { total, by_module }
}

/// Full evaluation of one model on one dataset.
pub struct EvalReport {
    /// Final-stage per-image NME, percent.
    pub per_image_nme: Vec<f64>,
    pub dataset_nme: f64,
    /// FR at `threshold`, percent of images.
    pub failure_rate: f64,
    /// AUC of the CED up to `threshold`, in [0, 1].
    pub auc: f64,
    /// Threshold in NME percent (0.1 inter-ocular = 10.0).
    pub threshold: f64,
    pub ced: Vec<(f64, f64)>,
    /// Per-stage metrics, index 0 = first cascade stage.
    pub stage_nme: Vec<f64>,
    pub stage_fr: Vec<f64>,
    pub stage_auc: Vec<f64>,
}

impl EvalReport {
    /// Flat key=value serialization (stable order).
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("images={}\n", self.per_image_nme.len()));
        out.push_str(&format!("threshold_percent={}\n", fmt(self.threshold)));
        out.push_str(&format!("nme_percent={}\n", fmt(self.dataset_nme)));
        out.push_str(&format!("fr_percent={}\n", fmt(self.failure_rate)));
        out.push_str(&format!("auc={}\n", fmt(self.auc)));
        for (i, ((nme, fr), auc)) in self
            .stage_nme
            .iter()
            .zip(&self.stage_fr)
            .zip(&self.stage_auc)
            .enumerate()
        {
            out.push_str(&format!(
                "stage{}_nme_percent={}\nstage{}_fr_percent={}\nstage{}_auc={}\n",
                i + 1,
                fmt(*nme),
                i + 1,
                fmt(*fr),
                i + 1,
                fmt(*auc)
            ));
        }
        out
    }

    /// Two-column `x fraction` text of the CED curve.
    pub fn ced_text(&self) -> String {
        let mut out = String::new();
        for (x, y) in &self.ced {
            out.push_str(&format!("{} {}\n", fmt(*x), fmt(*y)));
        }
        out
    }

    /// Per-stage `NME FR AUC` table.
    pub fn stage_table(&self) -> String {
        let mut out = String::from("stage nme_percent fr_percent auc\n");
        for (i, ((nme, fr), auc)) in self
            .stage_nme
            .iter()
            .zip(&self.stage_fr)
            .zip(&self.stage_auc)
            .enumerate()
        {
            out.push_str(&format!("{} {} {} {}\n", i + 1, fmt(*nme), fmt(*fr), fmt(*auc)));
        }
        out
    }
}

pub(crate) fn fmt(v: f64) -> String {
    // fixed notation, trimmed; enough digits to re-read exactly in practice
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    let s = s.trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}
