//! Shared test helpers: the central-difference gradient oracle, straight-line
//! attention oracles, and brute-force metric references.

#![allow(dead_code)] // each integration test binary uses a subset

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slpt_core::model::AttentionWeights;
use slpt_core::tensor::Tensor;

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of `f` with respect to every coordinate of
/// `param`, perturbing the tensor's storage in place.
pub fn finite_difference(f: &mut dyn FnMut() -> f64, param: &Tensor, step: f64) -> Vec<f64> {
    let n = param.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let original = param.data()[i];
        param.data_mut()[i] = original + step;
        let plus = f();
        param.data_mut()[i] = original - step;
        let minus = f();
        param.data_mut()[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest violation of `|a - n| <= max(abs_floor, rel_tol * max(|a|, |n|))`,
/// as a ratio to its allowance (<= 1 means pass).
pub fn worst_violation(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let allow = abs_floor.max(rel_tol * a.abs().max(n.abs()));
        worst = worst.max((a - n).abs() / allow);
    }
    worst
}

pub fn assert_grad_close(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_floor: f64,
    context: &str,
) {
    let worst = worst_violation(analytic, numeric, rel_tol, abs_floor);
    assert!(
        worst <= 1.0,
        "{context}: worst gradient violation {worst:.3}x the allowance (rel {rel_tol}, floor {abs_floor})"
    );
}

// ---------------------------------------------------------------------------
// straight-line attention oracle
// ---------------------------------------------------------------------------

pub struct RawWeights {
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub wp: Vec<Vec<f64>>,
}

fn mat_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn slice_cols(x: &[f64], n: usize, c: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        out[i * width..(i + 1) * width].copy_from_slice(&x[i * c + start..i * c + start + width]);
    }
    out
}

/// Dense evaluation of one attention block: per head h,
/// `A_h = softmax((Q_src_h W^q_h)(K_src_h W^k_h)^T / sqrt(C_h))`,
/// `out = concat_h(A_h V_src_h W^v_h W^p_h)`.
pub fn oracle_attention(
    query_src: &[f64],
    key_src: &[f64],
    value_src: &[f64],
    w: &RawWeights,
    n: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ch = c / heads;
    let mut out = vec![0.0; n * c];
    let mut attn = vec![0.0; heads * n * n];
    for h in 0..heads {
        let qs = slice_cols(query_src, n, c, h * ch, ch);
        let ks = slice_cols(key_src, n, c, h * ch, ch);
        let vs = slice_cols(value_src, n, c, h * ch, ch);
        // x · W^T with W stored out-major, matching the linear layer
        let wt = |w: &[f64]| {
            let mut t = vec![0.0; ch * ch];
            for i in 0..ch {
                for j in 0..ch {
                    t[i * ch + j] = w[j * ch + i];
                }
            }
            t
        };
        let q = mat_naive(&qs, &wt(&w.wq[h]), n, ch, ch);
        let k = mat_naive(&ks, &wt(&w.wk[h]), n, ch, ch);
        let v = mat_naive(&vs, &wt(&w.wv[h]), n, ch, ch);
        let scale = 1.0 / (ch as f64).sqrt();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for p in 0..ch {
                    dot += q[i * ch + p] * k[j * ch + p];
                }
                a[i * n + j] = dot * scale;
            }
        }
        for row in a.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        attn[h * n * n..(h + 1) * n * n].copy_from_slice(&a);
        let agg = mat_naive(&a, &v, n, n, ch);
        let head_out = mat_naive(&agg, &wt(&w.wp[h]), n, ch, ch);
        for i in 0..n {
            out[i * c + h * ch..i * c + (h + 1) * ch]
                .copy_from_slice(&head_out[i * ch..(i + 1) * ch]);
        }
    }
    (out, attn)
}

pub fn random_weights(
    rng: &mut ChaCha8Rng,
    heads: usize,
    ch: usize,
) -> (AttentionWeights, RawWeights) {
    let mut mk = |_: usize| -> (Tensor, Vec<f64>) {
        let data: Vec<f64> = (0..ch * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (Tensor::param(&[ch, ch], data.clone()).unwrap(), data)
    };
    let mut wq = Vec::new();
    let mut wk = Vec::new();
    let mut wv = Vec::new();
    let mut wp = Vec::new();
    let mut rq = Vec::new();
    let mut rk = Vec::new();
    let mut rv = Vec::new();
    let mut rp = Vec::new();
    for h in 0..heads {
        let (t, r) = mk(h);
        wq.push(t);
        rq.push(r);
        let (t, r) = mk(h);
        wk.push(t);
        rk.push(r);
        let (t, r) = mk(h);
        wv.push(t);
        rv.push(r);
        let (t, r) = mk(h);
        wp.push(t);
        rp.push(r);
    }
    (
        AttentionWeights { wq, wk, wv, wp },
        RawWeights { wq: rq, wk: rk, wv: rv, wp: rp },
    )
}

pub fn rand_mat(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Tensor, Vec<f64>) {
    let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
    (Tensor::from_vec(&[n, c], data.clone()).unwrap(), data)
}

pub fn add_vecs(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, ctx: &str) {
    assert_eq!(got.len(), want.len(), "{ctx}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "{ctx}[{i}]: {g} vs {w}");
    }
}

// ---------------------------------------------------------------------------
// brute-force metric references
// ---------------------------------------------------------------------------

pub fn brute_force_nme(pred: &[(f64, f64)], gt: &[(f64, f64)], d: f64) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        acc += (p.0 - g.0).hypot(p.1 - g.1) / d;
    }
    acc / pred.len() as f64 * 100.0
}

pub fn brute_force_fr(nmes: &[f64], t: f64) -> f64 {
    let mut fails = 0;
    for &v in nmes {
        if v > t {
            fails += 1;
        }
    }
    fails as f64 / nmes.len() as f64 * 100.0
}

/// Exact integral of the CED step function via explicit breakpoint sweep.
pub fn brute_force_auc(nmes: &[f64], t: f64) -> f64 {
    let mut breaks: Vec<f64> = nmes.iter().cloned().filter(|&v| v > 0.0 && v < t).collect();
    breaks.push(0.0);
    breaks.push(t);
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup();
    let n = nmes.len() as f64;
    let mut area = 0.0;
    for w in breaks.windows(2) {
        let ced_here = nmes.iter().filter(|&&v| v <= w[0]).count() as f64 / n;
        area += (w[1] - w[0]) * ced_here;
    }
    area / t
}
