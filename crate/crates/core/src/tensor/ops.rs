//! Differentiable tensor operations.
//!
//! Shape-checked entry points return `Result`; the small always-valid
//! helpers (`scale`, `relu`, ...) are total. Backward closures capture their
//! parent tensors plus whatever forward buffers they need, never the output
//! (the graph stays a DAG).

use super::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            store.accumulate(&pa, g);
            store.accumulate(&pb, g);
        }),
    ))
}

/// Elementwise difference a - b.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("sub", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            store.accumulate(&pa, g);
            if let Some(buf) = store.buf_mut(&pb) {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                }
            }
        }),
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&pa) {
                for ((o, gv), bv) in buf.iter_mut().zip(g).zip(pb.data().iter()) {
                    *o += gv * bv;
                }
            }
            if let Some(buf) = store.buf_mut(&pb) {
                for ((o, gv), av) in buf.iter_mut().zip(g).zip(pa.data().iter()) {
                    *o += gv * av;
                }
            }
        }),
    ))
}

/// x * c for a constant c.
pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }
        }),
    )
}

/// x ⊙ mul + add with constant (non-tensor) coefficients; used for fixed
/// affine maps such as patch-local to image coordinates.
pub fn affine_const(x: &Tensor, mul: &[f64], add: &[f64]) -> Result<Tensor> {
    if mul.len() != x.numel() || add.len() != x.numel() {
        return Err(Error::Contract(format!(
            "affine_const coefficient length {}/{} does not match tensor numel {}",
            mul.len(),
            add.len(),
            x.numel()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(mul.iter())
        .zip(add.iter())
        .map(|((v, m), a)| v * m + a)
        .collect();
    let px = x.clone();
    let mulc = mul.to_vec();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((o, gv), m) in buf.iter_mut().zip(g).zip(mulc.iter()) {
                    *o += gv * m;
                }
            }
        }),
    ))
}

fn leading_and_mat(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch = shape[..shape.len() - 2].iter().product();
    Some((batch, m, n))
}

/// Matrix product over the trailing two axes. Leading axes must match
/// exactly, or one operand may be a plain matrix shared across the other's
/// batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, ka) = leading_and_mat(a.shape()).ok_or_else(|| shape_err("matmul", a.shape(), b.shape()))?;
    let (bb, kb, n) = leading_and_mat(b.shape()).ok_or_else(|| shape_err("matmul", a.shape(), b.shape()))?;
    if ka != kb {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let a_lead = &a.shape()[..a.shape().len() - 2];
    let b_lead = &b.shape()[..b.shape().len() - 2];
    if !(a_lead == b_lead || a_lead.is_empty() || b_lead.is_empty()) {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let batch = ba.max(bb);
    let k = ka;
    let mut out_shape: Vec<usize> = if a_lead.is_empty() { b_lead.to_vec() } else { a_lead.to_vec() };
    out_shape.push(m);
    out_shape.push(n);

    let mut data = vec![0.0; batch * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..batch {
            let asl = if ba == 1 { &ad[..] } else { &ad[i * m * k..(i + 1) * m * k] };
            let bsl = if bb == 1 { &bd[..] } else { &bd[i * k * n..(i + 1) * k * n] };
            matmul_nn_acc(asl, bsl, &mut data[i * m * n..(i + 1) * m * n], m, k, n);
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&pa) {
                let bd = pb.data();
                for i in 0..batch {
                    let gsl = &g[i * m * n..(i + 1) * m * n];
                    let bsl = if bb == 1 { &bd[..] } else { &bd[i * k * n..(i + 1) * k * n] };
                    let osl = if ba == 1 { &mut buf[..] } else { &mut buf[i * m * k..(i + 1) * m * k] };
                    // dA += g · B^T
                    matmul_nt_acc(gsl, bsl, osl, m, n, k);
                }
            }
            if let Some(buf) = store.buf_mut(&pb) {
                let ad = pa.data();
                for i in 0..batch {
                    let gsl = &g[i * m * n..(i + 1) * m * n];
                    let asl = if ba == 1 { &ad[..] } else { &ad[i * m * k..(i + 1) * m * k] };
                    let osl = if bb == 1 { &mut buf[..] } else { &mut buf[i * k * n..(i + 1) * k * n] };
                    // dB += A^T · g
                    matmul_tn_acc(asl, gsl, osl, k, m, n);
                }
            }
        }),
    ))
}

/// x · w^T (+ bias), with `w` stored out-major as `[out, in]`. Leading axes
/// of `x` are treated as rows.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(shape_err("linear", x.shape(), w.shape()));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let xs = x.shape();
    if xs.is_empty() || xs[xs.len() - 1] != in_dim {
        return Err(shape_err("linear", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(shape_err("linear", w.shape(), b.shape()));
        }
    }
    let rows = x.numel() / in_dim;
    let mut data = vec![0.0; rows * out_dim];
    matmul_nt_acc(&x.data(), &w.data(), &mut data, rows, in_dim, out_dim);
    if let Some(b) = bias {
        let bd = b.data();
        for r in 0..rows {
            for (o, bv) in data[r * out_dim..(r + 1) * out_dim].iter_mut().zip(bd.iter()) {
                *o += bv;
            }
        }
    }
    let mut out_shape = xs[..xs.len() - 1].to_vec();
    out_shape.push(out_dim);

    let px = x.clone();
    let pw = w.clone();
    let pbias = bias.cloned();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        parents,
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                // dX += g · W
                matmul_nn_acc(g, &pw.data(), buf, rows, out_dim, in_dim);
            }
            if let Some(buf) = store.buf_mut(&pw) {
                // dW += g^T · x
                matmul_tn_acc(g, &px.data(), buf, out_dim, rows, in_dim);
            }
            if let Some(b) = &pbias {
                if let Some(buf) = store.buf_mut(b) {
                    for r in 0..rows {
                        for (o, gv) in buf.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                            *o += gv;
                        }
                    }
                }
            }
        }),
    ))
}

/// Sum in a value-canonical order, so the result does not depend on how the
/// inputs were arranged. Keeps reductions over the token axis exactly
/// permutation-invariant.
pub(crate) fn canonical_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Row-stabilized softmax over the last axis. Errors on non-finite input.
/// The denominator is summed in canonical order (see [`canonical_sum`]).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() || shape[shape.len() - 1] == 0 {
        return Err(Error::Input(format!(
            "softmax_rows needs a non-empty last axis, got {shape:?}"
        )));
    }
    let cols = shape[shape.len() - 1];
    let xd = x.data();
    if xd.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax_rows input is not finite".into()));
    }
    let mut data = vec![0.0; xd.len()];
    let mut scratch = Vec::with_capacity(cols);
    for (row_out, row_in) in data.chunks_mut(cols).zip(xd.chunks(cols)) {
        let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (o, v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
        }
        scratch.clear();
        scratch.extend_from_slice(row_out);
        let sum = canonical_sum(&mut scratch);
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    drop(xd);
    let y = data.clone();
    let px = x.clone();
    Ok(Tensor::from_op(
        shape.to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((orow, grow), yrow) in
                    buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }),
    ))
}

/// Layer normalization over the last axis followed by the `gamma`/`beta`
/// affine. Uses the biased variance.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(shape_err("layernorm", shape, gamma.shape()));
    }
    let cols = shape[shape.len() - 1];
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(shape_err("layernorm", shape, gamma.shape()));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let rows = xd.len() / cols;
    let mut data = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &xd[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let h = (xr[c] - mean) * istd;
            xhat[r * cols + c] = h;
            data[r * cols + c] = gd[c] * h + bd[c];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        shape.to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, store| {
            let gd = pg.to_vec(); // gamma is tiny; clone avoids borrow clashes below
            if let Some(buf) = store.buf_mut(&pb) {
                for grow in g.chunks(cols) {
                    for (o, gv) in buf.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
            }
            if let Some(buf) = store.buf_mut(&pg) {
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((o, gv), hv) in buf.iter_mut().zip(grow).zip(hrow) {
                        *o += gv * hv;
                    }
                }
            }
            if let Some(buf) = store.buf_mut(&px) {
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    let orow = &mut buf[r * cols..(r + 1) * cols];
                    let istd = inv_std[r];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = grow[c] * gd[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = grow[c] * gd[c];
                        orow[c] += istd * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
            }
        }),
    ))
}

/// Attention aggregation `a · v` for `a: [N, M]` row weights over `v: [M, C]`
/// values. Equivalent to `matmul`, but each output entry is summed in
/// canonical order so permuting the token axis permutes outputs exactly.
pub fn attn_values(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || v.shape().len() != 2 || a.shape()[1] != v.shape()[0] {
        return Err(shape_err("attn_values", a.shape(), v.shape()));
    }
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let c = v.shape()[1];
    super::count_macs((n * m * c) as u64);
    let ad = a.data();
    let vd = v.data();
    let mut data = vec![0.0; n * c];
    let mut scratch = Vec::with_capacity(m);
    for i in 0..n {
        let arow = &ad[i * m..(i + 1) * m];
        for ch in 0..c {
            scratch.clear();
            scratch.extend(arow.iter().enumerate().map(|(j, &aj)| aj * vd[j * c + ch]));
            data[i * c + ch] = canonical_sum(&mut scratch);
        }
    }
    drop(ad);
    drop(vd);
    let (pa, pv) = (a.clone(), v.clone());
    Ok(Tensor::from_op(
        vec![n, c],
        data,
        vec![a.clone(), v.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&pa) {
                // dA += g · V^T
                matmul_nt_acc(g, &pv.data(), buf, n, c, m);
            }
            if let Some(buf) = store.buf_mut(&pv) {
                // dV += A^T · g
                matmul_tn_acc(&pa.data(), g, buf, m, n, c);
            }
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((o, gv), xv) in buf.iter_mut().zip(g).zip(px.data().iter()) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation; the backward differentiates the same
/// approximation so gradient checks agree.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        })
        .collect();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((o, gv), &xv) in buf.iter_mut().zip(g).zip(px.data().iter()) {
                    let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    let d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    *o += gv * d;
                }
            }
        }),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let y = data.clone();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y.iter()) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
        }),
    )
}

/// Elementwise square root; the subgradient at 0 is taken as 0 so exact hits
/// do not poison the pass.
pub fn sqrt(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.sqrt()).collect();
    let y = data.clone();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y.iter()) {
                    if *yv > 0.0 {
                        *o += gv * 0.5 / yv;
                    }
                }
            }
        }),
    )
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let px = x.clone();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
        }),
    )
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    let total: f64 = x.data().iter().sum();
    let px = x.clone();
    Tensor::from_op(
        vec![1],
        vec![total / n],
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                let gv = g[0] / n;
                for o in buf.iter_mut() {
                    *o += gv;
                }
            }
        }),
    )
}

/// Sum over the last axis; `[..., k] -> [...]` (scalar input stays `[1]`).
pub fn sum_last_axis(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let cols = *shape.last().expect("sum_last_axis on rank-0 tensor");
    let out_shape: Vec<usize> = if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    };
    let data: Vec<f64> = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
    let px = x.clone();
    Tensor::from_op(
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for (orow, gv) in buf.chunks_mut(cols).zip(g) {
                    for o in orow.iter_mut() {
                        *o += gv;
                    }
                }
            }
        }),
    )
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::Contract(format!(
            "narrow axis {axis} range {start}..{} out of bounds for {shape:?}",
            start + len
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let xd = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        data.extend_from_slice(&xd[base..base + len * inner]);
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&px) {
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    let gbase = o * len * inner;
                    for (ov, gv) in buf[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[gbase..gbase + len * inner])
                    {
                        *ov += gv;
                    }
                }
            }
        }),
    ))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Input("concat of an empty tensor list".into()))?;
    let base_shape = first.shape().to_vec();
    if axis >= base_shape.len() {
        return Err(Error::Contract(format!(
            "concat axis {axis} out of bounds for {base_shape:?}"
        )));
    }
    let mut axis_total = 0;
    for t in xs {
        if t.shape().len() != base_shape.len() {
            return Err(shape_err("concat", &base_shape, t.shape()));
        }
        for (d, (a, b)) in base_shape.iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err("concat", &base_shape, t.shape()));
            }
        }
        axis_total += t.shape()[axis];
    }
    let outer: usize = base_shape[..axis].iter().product();
    let inner: usize = base_shape[axis + 1..].iter().product();
    let mut out_shape = base_shape.clone();
    out_shape[axis] = axis_total;
    let mut data = vec![0.0; outer * axis_total * inner];
    let mut offset = 0;
    for t in xs {
        let alen = t.shape()[axis];
        let td = t.data();
        for o in 0..outer {
            let dst = (o * axis_total + offset) * inner;
            let src = o * alen * inner;
            data[dst..dst + alen * inner].copy_from_slice(&td[src..src + alen * inner]);
        }
        offset += alen;
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let pxs: Vec<Tensor> = xs.to_vec();
    Ok(Tensor::from_op(
        out_shape,
        data,
        parents,
        Box::new(move |g, store| {
            let mut offset = 0;
            for t in &pxs {
                let alen = t.shape()[axis];
                if let Some(buf) = store.buf_mut(t) {
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * alen * inner;
                        for (ov, gv) in buf[dst..dst + alen * inner]
                            .iter_mut()
                            .zip(&g[src..src + alen * inner])
                        {
                            *ov += gv;
                        }
                    }
                }
                offset += alen;
            }
        }),
    ))
}

/// Stack same-shape tensors along a new leading axis.
pub fn stack0(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Input("stack of an empty tensor list".into()))?;
    let item_shape = first.shape().to_vec();
    let item_len = first.numel();
    let mut data = Vec::with_capacity(xs.len() * item_len);
    for t in xs {
        if t.shape() != item_shape {
            return Err(shape_err("stack0", &item_shape, t.shape()));
        }
        data.extend_from_slice(&t.data());
    }
    let mut out_shape = vec![xs.len()];
    out_shape.extend_from_slice(&item_shape);
    let pxs: Vec<Tensor> = xs.to_vec();
    Ok(Tensor::from_op(
        out_shape,
        data,
        xs.to_vec(),
        Box::new(move |g, store| {
            for (i, t) in pxs.iter().enumerate() {
                store.accumulate(t, &g[i * item_len..(i + 1) * item_len]);
            }
        }),
    ))
}

/// Same data, new shape (must preserve the element count).
pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    if new_shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err("reshape", x.shape(), new_shape));
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        new_shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(move |g, store| {
            store.accumulate(&px, g);
        }),
    ))
}

/// 2-D convolution on a single `[C_in, H, W]` image with replicated borders
/// (pad = kernel/2) and the given stride. Implemented as im2col + matmul so
/// the MAC counter sees it.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    if x.shape().len() != 3 || w.shape().len() != 4 || stride == 0 {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc_in != c_in {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    }
    if h == 0 || wd == 0 {
        return Err(Error::Input("conv2d on an empty feature map".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err("conv2d", w.shape(), b.shape()));
        }
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (wd + 2 * pw - kw) / stride + 1;
    let patch = ho * wo;
    let ksize = kh * kw;

    // Clamped source index per (kernel tap, output position); shared by all
    // channels and reused for the backward scatter.
    let mut spatial_idx = vec![0u32; ksize * patch];
    for dy in 0..kh {
        for dx in 0..kw {
            let r = dy * kw + dx;
            for oy in 0..ho {
                let iy = (oy * stride + dy) as isize - ph as isize;
                let iy = iy.clamp(0, h as isize - 1) as usize;
                for ox in 0..wo {
                    let ix = (ox * stride + dx) as isize - pw as isize;
                    let ix = ix.clamp(0, wd as isize - 1) as usize;
                    spatial_idx[r * patch + oy * wo + ox] = (iy * wd + ix) as u32;
                }
            }
        }
    }

    let xd = x.data();
    let mut cols = Vec::with_capacity(c_in * ksize * patch);
    for c in 0..c_in {
        let plane = &xd[c * h * wd..(c + 1) * h * wd];
        cols.extend(spatial_idx.iter().map(|&si| plane[si as usize]));
    }
    drop(xd);

    let mut data = vec![0.0; c_out * patch];
    matmul_nn_acc(&w.data(), &cols, &mut data, c_out, c_in * ksize, patch);
    if let Some(b) = bias {
        let bd = b.data();
        for co in 0..c_out {
            for o in data[co * patch..(co + 1) * patch].iter_mut() {
                *o += bd[co];
            }
        }
    }

    let (px, pw_t) = (x.clone(), w.clone());
    let pbias = bias.cloned();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![c_out, ho, wo],
        data,
        parents,
        Box::new(move |g, store| {
            if let Some(b) = &pbias {
                if let Some(buf) = store.buf_mut(b) {
                    for (co, o) in buf.iter_mut().enumerate() {
                        *o += g[co * patch..(co + 1) * patch].iter().sum::<f64>();
                    }
                }
            }
            if let Some(buf) = store.buf_mut(&pw_t) {
                // dW += g · cols^T
                matmul_nt_acc(g, &cols, buf, c_out, patch, c_in * ksize);
            }
            if let Some(buf) = store.buf_mut(&px) {
                let mut dcols = vec![0.0; c_in * ksize * patch];
                // dcols = W^T · g
                matmul_tn_acc(&pw_t.data(), g, &mut dcols, c_in * ksize, c_out, patch);
                for c in 0..c_in {
                    let plane = &mut buf[c * h * wd..(c + 1) * h * wd];
                    let src = &dcols[c * ksize * patch..(c + 1) * ksize * patch];
                    for (&gv, &si) in src.iter().zip(spatial_idx.iter()) {
                        plane[si as usize] += gv;
                    }
                }
            }
        }),
    ))
}
