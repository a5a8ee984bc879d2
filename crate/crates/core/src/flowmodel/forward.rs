//! Branch forward passes: pre-LayerNorm transformer blocks with sinusoidal
//! time embedding added to every token and fixed 2-D sin/cos position
//! encodings. The LR and reference branches run once on clean latents and
//! cache per-layer key/value projections; the SR branch attends over those
//! caches through the concatenated-key attention.

use crate::flowmodel::attention::{attention_core, rows_concat};
use crate::flowmodel::{BranchWeights, LatentGrid, LayerWeights, ModelConfig};
use crate::linalg::{matmul, matmul_acc, Mat, Real};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Sinusoidal features of the scalar time value. The scale is chosen so the
/// fastest component completes a handful of cycles over t in [0, 1]: the
/// features must vary smoothly between neighboring sampler steps or the
/// network cannot generalize across time.
const TIME_SCALE: f64 = 25.0;

pub(crate) fn time_features<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; dim];
    let s = t * TIME_SCALE;
    for k in 0..half {
        let omega = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[2 * k] = T::of((s * omega).sin());
        out[2 * k + 1] = T::of((s * omega).cos());
    }
    out
}

/// Fixed 2-D sin/cos position encoding over the token grid: half the
/// channels encode the row, half the column.
pub(crate) fn position_encoding<T: Real>(grid_w: usize, grid_h: usize, dim: usize) -> Mat<T> {
    assert_eq!(dim % 4, 0);
    let quarter = dim / 4;
    let mut out = Mat::zeros(grid_w * grid_h, dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = out.row_mut(r * grid_w + c);
            for k in 0..quarter {
                let omega = (-(10000f64.ln()) * k as f64 / quarter as f64).exp();
                row[4 * k] = T::of((r as f64 * omega).sin());
                row[4 * k + 1] = T::of((r as f64 * omega).cos());
                row[4 * k + 2] = T::of((c as f64 * omega).sin());
                row[4 * k + 3] = T::of((c as f64 * omega).cos());
            }
        }
    }
    out
}

/// LayerNorm forward. Returns the output plus the normalized values and
/// inverse standard deviations needed by the backward pass.
pub(crate) fn ln_forward<T: Real>(
    x: &Mat<T>,
    g: &[T],
    b: &[T],
) -> (Mat<T>, Mat<T>, Vec<T>) {
    let d = x.cols;
    let inv_d = T::of(1.0 / d as f64);
    let mut out = Mat::zeros(x.rows, d);
    let mut n_hat = Mat::zeros(x.rows, d);
    let mut invstd = vec![T::ZERO; x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let is = T::ONE / (var + T::of(LN_EPS)).sqrt();
        invstd[r] = is;
        let (orow, nrow) = (out.row_mut(r), r);
        for j in 0..d {
            let nh = (row[j] - mean) * is;
            orow[j] = g[j] * nh + b[j];
            n_hat.data[nrow * d + j] = nh;
        }
    }
    (out, n_hat, invstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

#[inline]
pub(crate) fn gelu_prime<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = T::ONE - th * th;
    half * (T::ONE + th) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

/// Per-layer key and value token matrices from one pass of a conditioning
/// branch.
#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    pub keys: Vec<Mat<T>>,
    pub values: Vec<Mat<T>>,
}

impl<T: Real> BranchCache<T> {
    pub fn depth(&self) -> usize {
        self.keys.len()
    }

    pub fn token_count(&self) -> usize {
        self.keys.first().map(|k| k.rows).unwrap_or(0)
    }
}

/// Activations recorded by one layer, sufficient for its backward pass.
pub(crate) struct LayerTrace<T> {
    pub n1: Mat<T>,
    pub n1_hat: Mat<T>,
    pub inv1: Vec<T>,
    pub q: Mat<T>,
    pub kcat: Mat<T>,
    pub vcat: Mat<T>,
    pub probs: Vec<Mat<T>>,
    pub merged: Mat<T>,
    pub n2: Mat<T>,
    pub n2_hat: Mat<T>,
    pub inv2: Vec<T>,
    pub ff_pre: Mat<T>,
    pub ff_act: Mat<T>,
    /// Token counts of the (self, lr, ref) segments of `kcat`.
    pub seg: (usize, usize, usize),
}

/// Full forward record of one branch pass.
pub struct BranchTrace<T> {
    pub(crate) z: Mat<T>,
    pub(crate) t_feat: Vec<T>,
    pub(crate) layers: Vec<LayerTrace<T>>,
    pub(crate) nf_hat: Option<Mat<T>>,
    pub(crate) nf: Option<Mat<T>>,
    pub(crate) invf: Option<Vec<T>>,
}

pub(crate) struct CrossKv<'a, T> {
    pub lr: Option<(&'a Mat<T>, &'a Mat<T>)>,
    pub reference: Option<(&'a Mat<T>, &'a Mat<T>)>,
    pub kscale: f64,
}

impl<'a, T> CrossKv<'a, T> {
    fn none() -> Self {
        CrossKv {
            lr: None,
            reference: None,
            kscale: 1.0,
        }
    }
}

struct LayerOut<T> {
    h: Mat<T>,
    k_self: Mat<T>,
    v_self: Mat<T>,
    trace: Option<LayerTrace<T>>,
}

fn layer_forward<T: Real>(
    h: &Mat<T>,
    lw: &LayerWeights<T>,
    heads: usize,
    cross: &CrossKv<'_, T>,
    record: bool,
) -> LayerOut<T> {
    let (n1, n1_hat, inv1) = ln_forward(h, &lw.ln1_g, &lw.ln1_b);
    let q = matmul(&n1, &lw.wq);
    let k = matmul(&n1, &lw.wk);
    let v = matmul(&n1, &lw.wv);

    let mut seg = (k.rows, 0usize, 0usize);
    let scaled_ref_k = cross.reference.map(|(kr, _)| {
        let ks = T::of(cross.kscale);
        let mut s = kr.clone();
        for val in s.data.iter_mut() {
            *val *= ks;
        }
        s
    });
    let mut k_parts: Vec<&Mat<T>> = vec![&k];
    let mut v_parts: Vec<&Mat<T>> = vec![&v];
    if let Some((kl, vl)) = cross.lr {
        seg.1 = kl.rows;
        k_parts.push(kl);
        v_parts.push(vl);
    }
    if let Some((_, vr)) = cross.reference {
        let kr = scaled_ref_k.as_ref().expect("scaled ref keys");
        seg.2 = kr.rows;
        k_parts.push(kr);
        v_parts.push(vr);
    }
    let kcat = rows_concat(&k_parts);
    let vcat = rows_concat(&v_parts);

    let (merged, probs) = attention_core(&q, &kcat, &vcat, heads, record);
    let attn = matmul(&merged, &lw.wo);
    let mut x2 = h.clone();
    for (a, &b) in x2.data.iter_mut().zip(attn.data.iter()) {
        *a += b;
    }

    let (n2, n2_hat, inv2) = ln_forward(&x2, &lw.ln2_g, &lw.ln2_b);
    let mut ff_pre = matmul(&n2, &lw.wf1);
    for r in 0..ff_pre.rows {
        for (p, &bias) in ff_pre.row_mut(r).iter_mut().zip(lw.bf1.iter()) {
            *p += bias;
        }
    }
    let mut ff_act = ff_pre.clone();
    for val in ff_act.data.iter_mut() {
        *val = gelu(*val);
    }
    let mut h_out = x2.clone();
    matmul_acc(&ff_act, &lw.wf2, &mut h_out);
    for r in 0..h_out.rows {
        for (o, &bias) in h_out.row_mut(r).iter_mut().zip(lw.bf2.iter()) {
            *o += bias;
        }
    }

    let trace = record.then(|| LayerTrace {
        n1,
        n1_hat,
        inv1,
        q,
        kcat,
        vcat,
        probs: probs.expect("probs recorded"),
        merged,
        n2,
        n2_hat,
        inv2,
        ff_pre,
        ff_act,
        seg,
    });
    LayerOut {
        h: h_out,
        k_self: k,
        v_self: v,
        trace,
    }
}

fn embed_tokens<T: Real>(
    z: &LatentGrid<T>,
    w: &BranchWeights<T>,
    t: f64,
) -> (Mat<T>, Vec<T>) {
    let dim = w.embed.cols;
    let t_feat = time_features::<T>(t, dim);
    let mut h = matmul(&z.tokens, &w.embed);
    // temb = t_feat · time_proj, broadcast to every token.
    let feat = Mat::from_vec(1, dim, t_feat.clone());
    let temb = matmul(&feat, &w.time_proj);
    let pos = position_encoding::<T>(z.grid_w, z.grid_h, dim);
    for r in 0..h.rows {
        let hrow = h.row_mut(r);
        let prow = pos.row(r);
        for j in 0..dim {
            hrow[j] += temb.data[j] + prow[j];
        }
    }
    (h, t_feat)
}

fn branch_forward_inner<T: Real>(
    z: &LatentGrid<T>,
    w: &BranchWeights<T>,
    cfg: &ModelConfig,
    t: f64,
    lr_cache: Option<&BranchCache<T>>,
    ref_cache: Option<&BranchCache<T>>,
    velocity_head: bool,
    record: bool,
) -> (Option<Mat<T>>, BranchCache<T>, Option<BranchTrace<T>>) {
    debug_assert_eq!(w.layers.len(), cfg.layers);
    let (mut h, t_feat) = embed_tokens(z, w, t);
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    let mut traces = record.then(Vec::new);
    for (l, lw) in w.layers.iter().enumerate() {
        let cross = CrossKv {
            lr: lr_cache.map(|c| (&c.keys[l], &c.values[l])),
            reference: ref_cache
                .filter(|_| l < cfg.ref_layers)
                .map(|c| (&c.keys[l], &c.values[l])),
            kscale: cfg.kscale,
        };
        let out = layer_forward(&h, lw, cfg.heads, &cross, record);
        h = out.h;
        keys.push(out.k_self);
        values.push(out.v_self);
        if let Some(ts) = traces.as_mut() {
            ts.push(out.trace.expect("layer trace recorded"));
        }
    }
    let mut nf_rec = None;
    let out = if velocity_head {
        let (nf, nf_hat, invf) = ln_forward(&h, &w.lnf_g, &w.lnf_b);
        let mut o = matmul(&nf, &w.unembed);
        for r in 0..o.rows {
            for (v, &b) in o.row_mut(r).iter_mut().zip(w.unembed_b.iter()) {
                *v += b;
            }
        }
        nf_rec = Some((nf, nf_hat, invf));
        Some(o)
    } else {
        None
    };
    let trace = traces.map(|layers| {
        let (nf, nf_hat, invf) = match nf_rec {
            Some((a, b, c)) => (Some(a), Some(b), Some(c)),
            None => (None, None, None),
        };
        BranchTrace {
            z: z.tokens.clone(),
            t_feat,
            layers,
            nf_hat,
            nf,
            invf,
        }
    });
    (out, BranchCache { keys, values }, trace)
}

/// One self-attention pass of a conditioning branch on clean latents,
/// recording each layer's key/value projections.
pub fn branch_forward_cache<T: Real>(
    z: &LatentGrid<T>,
    w: &BranchWeights<T>,
    cfg: &ModelConfig,
    t: f64,
) -> BranchCache<T> {
    branch_forward_inner(z, w, cfg, t, None, None, false, false).1
}

/// As [`branch_forward_cache`], additionally recording activations for the
/// backward pass.
pub fn branch_forward_cache_traced<T: Real>(
    z: &LatentGrid<T>,
    w: &BranchWeights<T>,
    cfg: &ModelConfig,
    t: f64,
) -> (BranchCache<T>, BranchTrace<T>) {
    let (_, cache, trace) = branch_forward_inner(z, w, cfg, t, None, None, false, true);
    (cache, trace.expect("trace recorded"))
}

/// Predicted velocity field over tokens. Reference keys/values are injected
/// only in the first `cfg.ref_layers` layers; an absent cache is excluded
/// from the attention concatenation entirely, so the pass is bit-identical
/// to the SISR forward when the reference is absent or `ref_layers` is 0.
pub fn velocity_forward<T: Real>(
    z_t: &LatentGrid<T>,
    t: f64,
    lr_cache: Option<&BranchCache<T>>,
    ref_cache: Option<&BranchCache<T>>,
    sr: &BranchWeights<T>,
    cfg: &ModelConfig,
) -> LatentGrid<T> {
    let (out, _, _) = branch_forward_inner(z_t, sr, cfg, t, lr_cache, ref_cache, true, false);
    LatentGrid {
        grid_w: z_t.grid_w,
        grid_h: z_t.grid_h,
        tokens: out.expect("velocity head"),
    }
}

/// As [`velocity_forward`], recording activations for the backward pass.
pub fn velocity_forward_traced<T: Real>(
    z_t: &LatentGrid<T>,
    t: f64,
    lr_cache: Option<&BranchCache<T>>,
    ref_cache: Option<&BranchCache<T>>,
    sr: &BranchWeights<T>,
    cfg: &ModelConfig,
) -> (LatentGrid<T>, BranchTrace<T>) {
    let (out, _, trace) = branch_forward_inner(z_t, sr, cfg, t, lr_cache, ref_cache, true, true);
    (
        LatentGrid {
            grid_w: z_t.grid_w,
            grid_h: z_t.grid_h,
            tokens: out.expect("velocity head"),
        },
        trace.expect("trace recorded"),
    )
}

#[allow(unused)]
pub(crate) fn cross_none<T>() -> CrossKv<'static, T> {
    CrossKv::none()
}

/// Per-layer attention statistics of a traced SR forward pass:
/// `[self_mass, lr_mass, ref_mass, same_position_lr_weight]`, averaged over
/// heads and query tokens. Diagnostic surface for probes and examples.
pub fn attention_mass_diagnostic<T: Real>(
    z_t: &LatentGrid<T>,
    t: f64,
    lr_cache: Option<&BranchCache<T>>,
    ref_cache: Option<&BranchCache<T>>,
    sr: &BranchWeights<T>,
    cfg: &ModelConfig,
) -> Vec<[f64; 4]> {
    let (_, trace) = velocity_forward_traced(z_t, t, lr_cache, ref_cache, sr, cfg);
    trace
        .layers
        .iter()
        .map(|lt| {
            let (t_self, t_lr, _) = lt.seg;
            let mut mass = [0f64; 3];
            let mut same_pos = 0f64;
            let mut n = 0f64;
            for p in &lt.probs {
                for r in 0..p.rows {
                    let row = p.row(r);
                    for (j, &w) in row.iter().enumerate() {
                        let seg = if j < t_self {
                            0
                        } else if j < t_self + t_lr {
                            1
                        } else {
                            2
                        };
                        mass[seg] += w.to_f64();
                    }
                    if t_lr > 0 {
                        same_pos += row[t_self + r].to_f64();
                    }
                    n += 1.0;
                }
            }
            [mass[0] / n, mass[1] / n, mass[2] / n, same_pos / n]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::{noise_latent, patchify};
    use crate::image::ImageBuffer;

    fn mini_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            patch: 2,
            channels: 3,
            dim: 16,
            heads: 2,
            layers: 2,
            ref_layers: 2,
            kscale: 1.0,
            sample_steps: 4,
        }
    }

    #[test]
    fn zero_weights_give_zero_caches() {
        let cfg = mini_cfg();
        let w = BranchWeights::<f64>::zeros(&cfg);
        let z = noise_latent::<f64>(2, 2, cfg.dim, 3);
        let cache = branch_forward_cache(&z, &w, &cfg, 0.0);
        assert_eq!(cache.depth(), cfg.layers);
        for (k, v) in cache.keys.iter().zip(&cache.values) {
            assert!(k.data.iter().all(|&x| x == 0.0));
            assert!(v.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cache_is_deterministic() {
        let cfg = mini_cfg();
        let w = BranchWeights::<f64>::init(&cfg, 9);
        let z = noise_latent::<f64>(2, 2, cfg.dim, 4);
        let a = branch_forward_cache(&z, &w, &cfg, 0.0);
        let b = branch_forward_cache(&z, &w, &cfg, 0.0);
        for l in 0..cfg.layers {
            assert_eq!(a.keys[l].data, b.keys[l].data);
            assert_eq!(a.values[l].data, b.values[l].data);
        }
    }

    #[test]
    fn absent_ref_equals_ref_layers_zero() {
        let mut cfg = mini_cfg();
        let sr = BranchWeights::<f64>::init(&cfg, 1);
        let lr_w = BranchWeights::<f64>::init(&cfg, 2);
        let ref_w = BranchWeights::<f64>::init(&cfg, 3);
        let img = ImageBuffer::from_fn(4, 4, 3, |x, y, c| ((x + 2 * y + c) % 5) as f32 / 5.0);
        let z = patchify::<f64>(&img, &cfg).unwrap();
        let z_t = noise_latent::<f64>(2, 2, cfg.dim, 7);
        let lr_cache = branch_forward_cache(&z, &lr_w, &cfg, 0.0);
        let ref_cache = branch_forward_cache(&z, &ref_w, &cfg, 0.0);

        let without = velocity_forward(&z_t, 0.5, Some(&lr_cache), None, &sr, &cfg);
        cfg.ref_layers = 0;
        let with_zero_depth =
            velocity_forward(&z_t, 0.5, Some(&lr_cache), Some(&ref_cache), &sr, &cfg);
        assert_eq!(without.tokens.data, with_zero_depth.tokens.data);
    }

    #[test]
    fn velocity_is_finite_on_random_inputs() {
        let cfg = mini_cfg();
        let sr = BranchWeights::<f64>::init(&cfg, 21);
        let lr_w = BranchWeights::<f64>::init(&cfg, 22);
        for seed in 0..5 {
            let z = noise_latent::<f64>(2, 2, cfg.dim, seed);
            let z_t = noise_latent::<f64>(2, 2, cfg.dim, seed + 100);
            let cache = branch_forward_cache(&z, &lr_w, &cfg, 0.0);
            let v = velocity_forward(&z_t, 0.3, Some(&cache), None, &sr, &cfg);
            assert!(v.all_finite(), "seed {seed}");
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = gelu_prime(x);
            assert!((fd - an).abs() < 1e-8, "x {x}: {an} vs {fd}");
        }
    }

    #[test]
    fn time_features_distinguish_times() {
        let a = time_features::<f64>(0.1, 16);
        let b = time_features::<f64>(0.9, 16);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
    }
}
