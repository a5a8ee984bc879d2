//! Hand-written backward passes through the branch transformers.
//!
//! The SR backward consumes the gradient on the predicted velocity and
//! produces (optionally) SR parameter gradients plus per-layer gradients on
//! the cached LR/reference keys and values. A conditioning-branch backward
//! then injects those cross gradients at each layer's key/value projections
//! and propagates down to that branch's parameters. Verified against central
//! finite differences by `train::grad_check`.

use crate::flowmodel::attention::{col_add, col_slice};
use crate::flowmodel::forward::{gelu_prime, BranchTrace, LayerTrace};
use crate::flowmodel::{BranchWeights, LayerWeights, ModelConfig};
use crate::linalg::{matmul, matmul_transa, matmul_transa_acc, matmul_transb, Mat, Real};

/// Per-layer gradients on a branch's cached keys/values. Layers where the
/// cache was not consumed hold `None`.
pub struct CrossGrads<T> {
    pub dk: Vec<Option<Mat<T>>>,
    pub dv: Vec<Option<Mat<T>>>,
}

impl<T: Real> CrossGrads<T> {
    pub fn empty(layers: usize) -> Self {
        CrossGrads {
            dk: (0..layers).map(|_| None).collect(),
            dv: (0..layers).map(|_| None).collect(),
        }
    }

    pub fn any(&self) -> bool {
        self.dk.iter().any(|d| d.is_some())
    }
}

fn colsum<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::ZERO; m.cols];
    for r in 0..m.rows {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn add_assign_vec<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn rows_slice<T: Real>(m: &Mat<T>, r0: usize, count: usize) -> Mat<T> {
    Mat {
        rows: count,
        cols: m.cols,
        data: m.data[r0 * m.cols..(r0 + count) * m.cols].to_vec(),
    }
}

/// LayerNorm backward. `dy` is the gradient on the LN output; returns the
/// gradient on the LN input and accumulates dgamma/dbeta when given.
fn ln_backward<T: Real>(
    dy: &Mat<T>,
    n_hat: &Mat<T>,
    invstd: &[T],
    gamma: &[T],
    mut param_grads: Option<(&mut [T], &mut [T])>,
) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let nr = n_hat.row(r);
        if let Some((dg, db)) = param_grads.as_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * nr[j];
                db[j] += dyr[j];
            }
        }
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        let mut dnh = vec![T::ZERO; d];
        for j in 0..d {
            let v = dyr[j] * gamma[j];
            dnh[j] = v;
            m1 += v;
            m2 += v * nr[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let is = invstd[r];
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = is * (dnh[j] - m1 - nr[j] * m2);
        }
    }
    dx
}

struct LayerCrossOut<T> {
    lr: Option<(Mat<T>, Mat<T>)>,
    reference: Option<(Mat<T>, Mat<T>)>,
}

/// Backward through one layer. On entry `dh` holds the gradient on the layer
/// output; on return it holds the gradient on the layer input. Injected
/// `extra_dk`/`extra_dv` are added to the self key/value gradients (the
/// cross-branch cache path into conditioning branches).
#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Real>(
    dh: &mut Mat<T>,
    lt: &LayerTrace<T>,
    lw: &LayerWeights<T>,
    heads: usize,
    kscale: f64,
    mut grads: Option<&mut LayerWeights<T>>,
    extra_dk: Option<&Mat<T>>,
    extra_dv: Option<&Mat<T>>,
) -> LayerCrossOut<T> {
    let dim = dh.cols;
    let dk_width = dim / heads;
    let scale = T::of(1.0 / (dk_width as f64).sqrt());

    // FFN: h_out = x2 + gelu(n2·wf1 + bf1)·wf2 + bf2
    let d_f = &*dh;
    if let Some(g) = grads.as_mut() {
        matmul_transa_acc(&lt.ff_act, d_f, &mut g.wf2);
        add_assign_vec(&mut g.bf2, &colsum(d_f));
    }
    let d_act = matmul_transb(d_f, &lw.wf2);
    let mut d_pre = d_act;
    for (dp, &p) in d_pre.data.iter_mut().zip(lt.ff_pre.data.iter()) {
        *dp *= gelu_prime(p);
    }
    if let Some(g) = grads.as_mut() {
        matmul_transa_acc(&lt.n2, &d_pre, &mut g.wf1);
        add_assign_vec(&mut g.bf1, &colsum(&d_pre));
    }
    let d_n2 = matmul_transb(&d_pre, &lw.wf1);
    let d_x2_ln = ln_backward(
        &d_n2,
        &lt.n2_hat,
        &lt.inv2,
        &lw.ln2_g,
        grads
            .as_mut()
            .map(|g| (g.ln2_g.as_mut_slice(), g.ln2_b.as_mut_slice())),
    );
    // Residual: d_x2 = dh (skip) + LN path.
    let mut d_x2 = dh.clone();
    for (a, &b) in d_x2.data.iter_mut().zip(d_x2_ln.data.iter()) {
        *a += b;
    }

    // Attention: x2 = x + merged·wo
    if let Some(g) = grads.as_mut() {
        matmul_transa_acc(&lt.merged, &d_x2, &mut g.wo);
    }
    let d_merged = matmul_transb(&d_x2, &lw.wo);

    let t_all = lt.kcat.rows;
    let mut d_q = Mat::zeros(lt.q.rows, dim);
    let mut d_kcat = Mat::zeros(t_all, dim);
    let mut d_vcat = Mat::zeros(t_all, dim);
    for h in 0..heads {
        let c0 = h * dk_width;
        let d_oh = col_slice(&d_merged, c0, dk_width);
        let p = &lt.probs[h];
        let vh = col_slice(&lt.vcat, c0, dk_width);
        let kh = col_slice(&lt.kcat, c0, dk_width);
        let qh = col_slice(&lt.q, c0, dk_width);

        let d_p = matmul_transb(&d_oh, &vh);
        let d_vh = matmul_transa(p, &d_oh);
        // Softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P)), then kernel scale.
        let mut d_s = Mat::zeros(p.rows, p.cols);
        for r in 0..p.rows {
            let pr = p.row(r);
            let dpr = d_p.row(r);
            let mut dot = T::ZERO;
            for j in 0..p.cols {
                dot += pr[j] * dpr[j];
            }
            let dsr = d_s.row_mut(r);
            for j in 0..p.cols {
                dsr[j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        let d_qh = matmul(&d_s, &kh);
        let d_kh = matmul_transa(&d_s, &qh);
        col_add(&mut d_q, c0, &d_qh);
        col_add(&mut d_kcat, c0, &d_kh);
        col_add(&mut d_vcat, c0, &d_vh);
    }

    let (t_self, t_lr, t_ref) = lt.seg;
    let mut d_k_self = rows_slice(&d_kcat, 0, t_self);
    let mut d_v_self = rows_slice(&d_vcat, 0, t_self);
    if let Some(extra) = extra_dk {
        for (a, &b) in d_k_self.data.iter_mut().zip(extra.data.iter()) {
            *a += b;
        }
    }
    if let Some(extra) = extra_dv {
        for (a, &b) in d_v_self.data.iter_mut().zip(extra.data.iter()) {
            *a += b;
        }
    }
    let cross_lr = (t_lr > 0).then(|| {
        (
            rows_slice(&d_kcat, t_self, t_lr),
            rows_slice(&d_vcat, t_self, t_lr),
        )
    });
    let cross_ref = (t_ref > 0).then(|| {
        // kcat held kscale·K_ref, so the cache gradient picks up kscale.
        let mut dk = rows_slice(&d_kcat, t_self + t_lr, t_ref);
        let ks = T::of(kscale);
        for v in dk.data.iter_mut() {
            *v *= ks;
        }
        (dk, rows_slice(&d_vcat, t_self + t_lr, t_ref))
    });

    if let Some(g) = grads.as_mut() {
        matmul_transa_acc(&lt.n1, &d_q, &mut g.wq);
        matmul_transa_acc(&lt.n1, &d_k_self, &mut g.wk);
        matmul_transa_acc(&lt.n1, &d_v_self, &mut g.wv);
    }
    let mut d_n1 = matmul_transb(&d_q, &lw.wq);
    let d_n1_k = matmul_transb(&d_k_self, &lw.wk);
    let d_n1_v = matmul_transb(&d_v_self, &lw.wv);
    for ((a, &b), &c) in d_n1
        .data
        .iter_mut()
        .zip(d_n1_k.data.iter())
        .zip(d_n1_v.data.iter())
    {
        *a += b + c;
    }
    let d_x_ln = ln_backward(
        &d_n1,
        &lt.n1_hat,
        &lt.inv1,
        &lw.ln1_g,
        grads
            .as_mut()
            .map(|g| (g.ln1_g.as_mut_slice(), g.ln1_b.as_mut_slice())),
    );
    // d_x = d_x2 (attention skip) + LN1 path; becomes dh for the layer below.
    for (a, &b) in d_x2.data.iter_mut().zip(d_x_ln.data.iter()) {
        *a += b;
    }
    *dh = d_x2;
    LayerCrossOut {
        lr: cross_lr,
        reference: cross_ref,
    }
}

/// Gradient of the embedding stage: `h0 = z·embed + 1⊗(t_feat·time_proj) + pos`.
fn embed_backward<T: Real>(d_h0: &Mat<T>, trace: &BranchTrace<T>, grads: &mut BranchWeights<T>) {
    matmul_transa_acc(&trace.z, d_h0, &mut grads.embed);
    let d_temb = colsum(d_h0);
    for (i, &f) in trace.t_feat.iter().enumerate() {
        let row = grads.time_proj.row_mut(i);
        for (j, &d) in d_temb.iter().enumerate() {
            row[j] += f * d;
        }
    }
}

/// Backward through the SR branch given the gradient on the predicted
/// velocity. Returns SR parameter gradients (when requested) and per-layer
/// gradients on the LR and reference caches.
pub fn backward_sr<T: Real>(
    d_out: &Mat<T>,
    trace: &BranchTrace<T>,
    w: &BranchWeights<T>,
    cfg: &ModelConfig,
    want_param_grads: bool,
) -> (Option<BranchWeights<T>>, CrossGrads<T>, CrossGrads<T>) {
    let mut grads = want_param_grads.then(|| BranchWeights::<T>::zeros(cfg));
    let nf = trace.nf.as_ref().expect("SR trace has velocity head");
    let nf_hat = trace.nf_hat.as_ref().expect("nf_hat");
    let invf = trace.invf.as_ref().expect("invf");

    if let Some(g) = grads.as_mut() {
        matmul_transa_acc(nf, d_out, &mut g.unembed);
        add_assign_vec(&mut g.unembed_b, &colsum(d_out));
    }
    let d_nf = matmul_transb(d_out, &w.unembed);
    let mut dh = ln_backward(
        &d_nf,
        nf_hat,
        invf,
        &w.lnf_g,
        grads
            .as_mut()
            .map(|g| (g.lnf_g.as_mut_slice(), g.lnf_b.as_mut_slice())),
    );

    let mut lr_grads = CrossGrads::empty(cfg.layers);
    let mut ref_grads = CrossGrads::empty(cfg.layers);
    for l in (0..cfg.layers).rev() {
        let layer_grad = grads.as_mut().map(|g| &mut g.layers[l]);
        let cross = layer_backward(
            &mut dh,
            &trace.layers[l],
            &w.layers[l],
            cfg.heads,
            cfg.kscale,
            layer_grad,
            None,
            None,
        );
        if let Some((dk, dv)) = cross.lr {
            lr_grads.dk[l] = Some(dk);
            lr_grads.dv[l] = Some(dv);
        }
        if let Some((dk, dv)) = cross.reference {
            ref_grads.dk[l] = Some(dk);
            ref_grads.dv[l] = Some(dv);
        }
    }
    if let Some(g) = grads.as_mut() {
        embed_backward(&dh, trace, g);
    }
    (grads, lr_grads, ref_grads)
}

/// Backward through a conditioning branch whose only connection to the loss
/// is its per-layer cached keys/values, whose gradients arrive in `inj`.
pub fn backward_cached_branch<T: Real>(
    trace: &BranchTrace<T>,
    w: &BranchWeights<T>,
    cfg: &ModelConfig,
    inj: &CrossGrads<T>,
) -> BranchWeights<T> {
    let mut grads = BranchWeights::<T>::zeros(cfg);
    let tokens = trace.z.rows;
    let mut dh = Mat::zeros(tokens, cfg.dim);
    for l in (0..cfg.layers).rev() {
        layer_backward(
            &mut dh,
            &trace.layers[l],
            &w.layers[l],
            cfg.heads,
            cfg.kscale,
            Some(&mut grads.layers[l]),
            inj.dk[l].as_ref(),
            inj.dv[l].as_ref(),
        );
    }
    embed_backward(&dh, trace, &mut grads);
    grads
}
