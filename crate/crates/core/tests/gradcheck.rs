//! Finite-difference gradient checks: every differentiable op on random
//! small shapes, then the attention blocks and the crop sampler.
//!
//! Central differences, step 1e-5, relative tolerance 1e-4 with a 1e-7
//! absolute floor.

mod common;

use common::{assert_grad_close, finite_difference};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slpt_core::geometry::{crop_resize, PatchRect};
use slpt_core::model::{mca_block, msa_block, AttentionWeights, SlptConfig, SlptParams};
use slpt_core::tensor::{backward, ops, Tensor};

const STEP: f64 = 1e-5;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::param(shape, data).unwrap()
}

/// Check d(f)/d(param) for every param, where `f` rebuilds the graph.
fn check(params: &[&Tensor], mut f: impl FnMut() -> Tensor, context: &str) {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap()).collect();
    for (i, p) in params.iter().enumerate() {
        let numeric = finite_difference(&mut || f().item(), p, STEP);
        assert_grad_close(&analytic[i], &numeric, REL, FLOOR, &format!("{context} param {i}"));
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_param(&mut rng, &[3, 4]);
    let b = rand_param(&mut rng, &[4, 2]);
    check(&[&a, &b], || ops::sum_all(&ops::matmul(&a, &b).unwrap()), "matmul");

    // ones • B^T structure: grad of sum(A·B) wrt A equals ones · B^T
    let ones_bt: Vec<f64> = {
        let bd = b.to_vec();
        let mut g = vec![0.0; 12];
        for r in 0..3 {
            for k in 0..4 {
                g[r * 4 + k] = (0..2).map(|c| bd[k * 2 + c]).sum();
            }
        }
        g
    };
    a.zero_grad();
    b.zero_grad();
    let loss = ops::sum_all(&ops::matmul(&a, &b).unwrap());
    backward(&loss).unwrap();
    assert_grad_close(&a.grad().unwrap(), &ones_bt, 1e-6, 1e-12, "matmul closed form");
}

#[test]
fn batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_param(&mut rng, &[2, 3, 4]);
    let b = rand_param(&mut rng, &[4, 3]);
    check(&[&a, &b], || ops::sum_all(&ops::matmul(&a, &b).unwrap()), "batched matmul");
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_param(&mut rng, &[5, 3]);
    let w = rand_param(&mut rng, &[4, 3]);
    let bias = rand_param(&mut rng, &[4]);
    check(
        &[&x, &w, &bias],
        || ops::sum_all(&ops::sigmoid(&ops::linear(&x, &w, Some(&bias)).unwrap())),
        "linear+sigmoid",
    );
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_param(&mut rng, &[4, 6]);
    let w = Tensor::from_vec(&[24], (0..24).map(|i| ((i * 7 % 11) as f64) * 0.3 - 1.0).collect())
        .unwrap();
    check(
        &[&x],
        || {
            // weighted sum so the gradient is not the trivial zero of a row sum
            let s = ops::softmax_rows(&x).unwrap();
            let flat = ops::reshape(&s, &[24]).unwrap();
            ops::sum_all(&ops::mul(&flat, &w).unwrap())
        },
        "softmax_rows",
    );
}

#[test]
fn layernorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_param(&mut rng, &[3, 8]);
    let gamma = rand_param(&mut rng, &[8]);
    let beta = rand_param(&mut rng, &[8]);
    let w = Tensor::from_vec(&[24], (0..24).map(|i| (i as f64 * 0.17).sin()).collect()).unwrap();
    check(
        &[&x, &gamma, &beta],
        || {
            let y = ops::layernorm(&x, &gamma, &beta, 1e-5).unwrap();
            let flat = ops::reshape(&y, &[24]).unwrap();
            ops::sum_all(&ops::mul(&flat, &w).unwrap())
        },
        "layernorm",
    );
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // keep points away from the relu kink
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::param(&[12], data).unwrap();
    check(&[&x], || ops::sum_all(&ops::relu(&x)), "relu");
    check(&[&x], || ops::sum_all(&ops::gelu(&x)), "gelu");
    check(&[&x], || ops::sum_all(&ops::sigmoid(&x)), "sigmoid");
    let positive = Tensor::param(&[6], (1..=6).map(|i| i as f64 * 0.37).collect()).unwrap();
    check(&[&positive], || ops::sum_all(&ops::sqrt(&positive)), "sqrt");
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_param(&mut rng, &[4, 6]);
    check(
        &[&x],
        || {
            let left = ops::narrow(&x, 1, 0, 3).unwrap();
            let right = ops::narrow(&x, 1, 3, 3).unwrap();
            let swapped = ops::concat(&[right, left], 1).unwrap();
            let rows: Vec<Tensor> = (0..4).map(|i| ops::narrow(&swapped, 0, i, 1).unwrap()).collect();
            let stacked = ops::stack0(&rows).unwrap();
            let sq = ops::mul(&stacked, &stacked).unwrap();
            ops::mean_all(&ops::sum_last_axis(&ops::reshape(&sq, &[8, 3]).unwrap()))
        },
        "narrow/concat/stack/reshape",
    );
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_param(&mut rng, &[2, 6, 6]);
    let w = rand_param(&mut rng, &[3, 2, 3, 3]);
    let b = rand_param(&mut rng, &[3]);
    for stride in [1, 2] {
        check(
            &[&x, &w, &b],
            || ops::sum_all(&ops::relu(&ops::conv2d(&x, &w, Some(&b), stride).unwrap())),
            &format!("conv2d stride {stride}"),
        );
    }
}

#[test]
fn crop_resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fm = rand_param(&mut rng, &[2, 5, 5]);
    // interior, boundary-straddling, and fully-outside rects
    let rects = [
        PatchRect { left_top: (1.2, 0.7), size: (2.0, 2.5) },
        PatchRect { left_top: (-1.0, 3.0), size: (3.0, 3.0) },
        PatchRect { left_top: (7.0, 7.0), size: (2.0, 2.0) },
    ];
    for (i, rect) in rects.iter().enumerate() {
        check(
            &[&fm],
            || {
                let patch = crop_resize(&fm, rect, 3).unwrap();
                let sq = ops::mul(&patch, &patch).unwrap();
                ops::sum_all(&sq)
            },
            &format!("crop_resize rect {i}"),
        );
    }
}

#[test]
fn attention_value_aggregation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_param(&mut rng, &[4, 4]);
    let v = rand_param(&mut rng, &[4, 3]);
    check(
        &[&a, &v],
        || ops::sum_all(&ops::sigmoid(&ops::attn_values(&a, &v).unwrap())),
        "attn_values",
    );
}

#[test]
fn attention_block_gradients() {
    let cfg = SlptConfig::new(4, 8, 2, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = SlptParams::init(&mut rng, &cfg).unwrap();
    let (_, msa_w) = params.layers[0].msa.as_ref().unwrap();
    let (_, mca_w) = params.layers[0].mca.as_ref().unwrap();
    let t = rand_param(&mut rng, &[4, 8]);
    let q = rand_param(&mut rng, &[4, 8]);
    let r = rand_param(&mut rng, &[4, 8]);
    let p = rand_param(&mut rng, &[4, 8]);

    let weight_list = |w: &AttentionWeights| {
        let mut out = Vec::new();
        out.extend(w.wq.iter().cloned());
        out.extend(w.wk.iter().cloned());
        out.extend(w.wv.iter().cloned());
        out.extend(w.wp.iter().cloned());
        out
    };

    let mut targets: Vec<Tensor> = vec![t.clone(), q.clone()];
    targets.extend(weight_list(msa_w));
    let refs: Vec<&Tensor> = targets.iter().collect();
    check(
        &refs,
        || ops::sum_all(&ops::sigmoid(&msa_block(&t, &q, msa_w, cfg.heads).unwrap().0)),
        "msa_block",
    );

    let mut targets: Vec<Tensor> = vec![t.clone(), q.clone(), r.clone(), p.clone()];
    targets.extend(weight_list(mca_w));
    let refs: Vec<&Tensor> = targets.iter().collect();
    check(
        &refs,
        || {
            ops::sum_all(
                &ops::sigmoid(&mca_block(&t, &q, &r, Some(&p), mca_w, cfg.heads).unwrap().0),
            )
        },
        "mca_block",
    );
}

#[test]
fn slpt_forward_full_parameter_gradients() {
    // every transformer parameter against finite differences on a tiny config
    let mut cfg = SlptConfig::new(4, 8, 2, 2, 3);
    cfg.mlp_hidden = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = SlptParams::init(&mut rng, &cfg).unwrap();
    let feats = rand_param(&mut rng, &[4, 8, 3, 3]);
    let weights: Vec<f64> = (0..4 * 2 * 2).map(|i| ((i * 13 % 7) as f64) * 0.2 - 0.5).collect();

    let f = || {
        let out = slpt_core::model::slpt_forward(&feats, &params, &cfg).unwrap();
        let mut acc: Option<Tensor> = None;
        for (l, t) in out.layer_locals.iter().enumerate() {
            let w = Tensor::from_vec(&[8], weights[l * 8..(l + 1) * 8].to_vec()).unwrap();
            let flat = ops::reshape(t, &[8]).unwrap();
            let term = ops::sum_all(&ops::mul(&flat, &w).unwrap());
            acc = Some(match acc {
                Some(a) => ops::add(&a, &term).unwrap(),
                None => term,
            });
        }
        acc.unwrap()
    };

    let loss = f();
    backward(&loss).unwrap();
    let named = params.parameters();
    for (name, p) in &named {
        let analytic = p.grad().unwrap();
        let numeric = finite_difference(&mut || f().item(), p, STEP);
        assert_grad_close(&analytic, &numeric, REL, FLOOR, name);
    }
    // the patch features participate too
    let analytic = feats.grad().unwrap();
    let numeric = finite_difference(&mut || f().item(), &feats, STEP);
    assert_grad_close(&analytic, &numeric, REL, FLOOR, "patch features");
}
