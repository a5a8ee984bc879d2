//! Cross-branch attention: the SR branch's queries attend over its own
//! keys/values concatenated with the cached LR and reference keys/values.
//! Reference keys are scaled by `kscale` before the softmax, which modulates
//! the attention weight of every reference value; absent sources are excluded
//! from the concatenation entirely.

use crate::linalg::{matmul, matmul_transb, Mat, Real};

/// Copy columns `[c0, c0+width)` into a fresh matrix.
pub(crate) fn col_slice<T: Real>(m: &Mat<T>, c0: usize, width: usize) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[c0..c0 + width]);
    }
    out
}

/// Add `src` into columns `[c0, c0+src.cols)` of `dst`.
pub(crate) fn col_add<T: Real>(dst: &mut Mat<T>, c0: usize, src: &Mat<T>) {
    for r in 0..src.rows {
        let drow = &mut dst.row_mut(r)[c0..c0 + src.cols];
        for (d, &s) in drow.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

/// Stack matrices vertically (all must share the column count).
pub(crate) fn rows_concat<T: Real>(parts: &[&Mat<T>]) -> Mat<T> {
    let cols = parts[0].cols;
    let rows = parts.iter().map(|p| p.rows).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        assert_eq!(p.cols, cols);
        out.data[r * cols..(r + p.rows) * cols].copy_from_slice(&p.data);
        r += p.rows;
    }
    out
}

pub(crate) fn softmax_rows_inplace<T: Real>(m: &mut Mat<T>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-head scaled dot-product attention over pre-concatenated keys/values.
/// Returns the merged head outputs and, when requested, the per-head
/// probability matrices for the backward pass.
pub(crate) fn attention_core<T: Real>(
    q: &Mat<T>,
    kcat: &Mat<T>,
    vcat: &Mat<T>,
    heads: usize,
    record_probs: bool,
) -> (Mat<T>, Option<Vec<Mat<T>>>) {
    let dim = q.cols;
    assert_eq!(kcat.cols, dim);
    assert_eq!(vcat.cols, dim);
    assert_eq!(kcat.rows, vcat.rows);
    assert_eq!(dim % heads, 0);
    let dk = dim / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());

    let mut merged = Mat::zeros(q.rows, dim);
    let mut probs = record_probs.then(|| Vec::with_capacity(heads));
    for h in 0..heads {
        let qh = col_slice(q, h * dk, dk);
        let kh = col_slice(kcat, h * dk, dk);
        let vh = col_slice(vcat, h * dk, dk);
        let mut logits = matmul_transb(&qh, &kh);
        for v in logits.data.iter_mut() {
            *v *= scale;
        }
        softmax_rows_inplace(&mut logits);
        let oh = matmul(&logits, &vh);
        col_add(&mut merged, h * dk, &oh);
        if let Some(ps) = probs.as_mut() {
            ps.push(logits);
        }
    }
    (merged, probs)
}

/// Attention over `[K_sr, K_lr, kscale·K_ref]` / `[V_sr, V_lr, V_ref]`.
///
/// Absent caches are excluded from the concatenation, which is the exact
/// mechanism by which the model degenerates into a SISR (or unconditional)
/// model. Note `kscale = 0` zeroes the reference *logits*, leaving a uniform
/// share of attention on reference values rather than removing them.
pub fn patch_ref_attention<T: Real>(
    q_sr: &Mat<T>,
    k_sr: &Mat<T>,
    v_sr: &Mat<T>,
    lr_kv: Option<(&Mat<T>, &Mat<T>)>,
    ref_kv: Option<(&Mat<T>, &Mat<T>)>,
    kscale: f64,
    heads: usize,
) -> Mat<T> {
    patch_ref_attention_with_probs(q_sr, k_sr, v_sr, lr_kv, ref_kv, kscale, heads).0
}

/// As [`patch_ref_attention`], also returning the per-head attention
/// probability matrices (rows are softmax distributions over the
/// concatenated key set), for verification and diagnostics.
pub fn patch_ref_attention_with_probs<T: Real>(
    q_sr: &Mat<T>,
    k_sr: &Mat<T>,
    v_sr: &Mat<T>,
    lr_kv: Option<(&Mat<T>, &Mat<T>)>,
    ref_kv: Option<(&Mat<T>, &Mat<T>)>,
    kscale: f64,
    heads: usize,
) -> (Mat<T>, Vec<Mat<T>>) {
    let mut k_parts: Vec<&Mat<T>> = vec![k_sr];
    let mut v_parts: Vec<&Mat<T>> = vec![v_sr];
    if let Some((k, v)) = lr_kv {
        k_parts.push(k);
        v_parts.push(v);
    }
    let scaled_ref_k = ref_kv.map(|(k, _)| {
        let mut s = k.clone();
        let ks = T::of(kscale);
        for v in s.data.iter_mut() {
            *v *= ks;
        }
        s
    });
    if let Some((_, v)) = ref_kv {
        k_parts.push(scaled_ref_k.as_ref().expect("scaled ref keys"));
        v_parts.push(v);
    }
    let kcat = rows_concat(&k_parts);
    let vcat = rows_concat(&v_parts);
    let (out, probs) = attention_core(q_sr, &kcat, &vcat, heads, true);
    (out, probs.expect("probs recorded"))
}
