//! Pixel-level reference matching: estimate a dense correspondence between the
//! bicubic-upscaled LR image and the reference at a reduced working
//! resolution, upscale the field, warp the reference into LR alignment, and
//! composite by certainty.
//!
//! The matcher is a brute-force zero-normalized cross-correlation patch search
//! on a strided grid, densified by bilinear interpolation of the match
//! *offsets* (never absolute coordinates, so an identity match stays identity
//! out to the borders). ZNCC is invariant to per-view gain and offset, which
//! is what makes photometrically shifted reference views matchable.
//!
//! Everything in this module is deterministic: no randomness anywhere, and
//! every grid node is computed independently of parallel schedule.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::degrade::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::{resize_bicubic, warp_bilinear, ImageBuffer};

/// Per-pixel mapping from the LR-aligned plane into the reference image plus
/// a certainty score in `[0, 1]`.
///
/// `map_x`/`map_y` index the frame of size `ref_width`×`ref_height`. Until
/// [`upscale_field`] runs, that frame is the working resolution and
/// `orig_ref_*` remembers the true reference dimensions for the rescale.
#[derive(Debug, Clone)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    pub map_x: Vec<f32>,
    pub map_y: Vec<f32>,
    pub certainty: Vec<f32>,
    pub ref_width: usize,
    pub ref_height: usize,
    pub orig_ref_width: usize,
    pub orig_ref_height: usize,
}

impl CorrespondenceField {
    /// Identity mapping with unit certainty; frame equals domain.
    pub fn identity(width: usize, height: usize) -> Self {
        let mut map_x = vec![0f32; width * height];
        let mut map_y = vec![0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                map_x[y * width + x] = x as f32;
                map_y[y * width + x] = y as f32;
            }
        }
        CorrespondenceField {
            width,
            height,
            map_x,
            map_y,
            certainty: vec![1.0; width * height],
            ref_width: width,
            ref_height: height,
            orig_ref_width: width,
            orig_ref_height: height,
        }
    }

    /// Build from a closure `(u, v) -> (x, y, certainty)` mapping into a
    /// `ref_w`×`ref_h` frame.
    pub fn from_fn(
        width: usize,
        height: usize,
        ref_w: usize,
        ref_h: usize,
        mut f: impl FnMut(usize, usize) -> (f32, f32, f32),
    ) -> Self {
        let mut map_x = vec![0f32; width * height];
        let mut map_y = vec![0f32; width * height];
        let mut certainty = vec![0f32; width * height];
        for v in 0..height {
            for u in 0..width {
                let (x, y, c) = f(u, v);
                map_x[v * width + u] = x;
                map_y[v * width + u] = y;
                certainty[v * width + u] = c;
            }
        }
        CorrespondenceField {
            width,
            height,
            map_x,
            map_y,
            certainty,
            ref_width: ref_w,
            ref_height: ref_h,
            orig_ref_width: ref_w,
            orig_ref_height: ref_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.map_x.len() != n || self.map_y.len() != n || self.certainty.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "field arrays must have {n} entries"
            )));
        }
        if self.certainty.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidArgument("certainty outside [0,1]".into()));
        }
        if self
            .map_x
            .iter()
            .chain(self.map_y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite mapping".into()));
        }
        Ok(())
    }

    /// Certainty as a grayscale image, for heat-map export.
    pub fn certainty_image(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.certainty.clone(),
        }
    }

    const MAGIC: &'static [u8; 8] = b"RSRFLD1\0";

    /// Binary sidecar: magic, dims, mapping floats, certainty floats.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(16 + self.map_x.len() * 12);
        out.extend_from_slice(Self::MAGIC);
        for v in [
            self.width,
            self.height,
            self.ref_width,
            self.ref_height,
            self.orig_ref_width,
            self.orig_ref_height,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for arr in [&self.map_x, &self.map_y, &self.certainty] {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        if bytes.len() < 32 || &bytes[..8] != Self::MAGIC {
            return Err(Error::MalformedHeader("field sidecar magic".into()));
        }
        let mut dims = [0usize; 6];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 8 + i * 4;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let [width, height, ref_width, ref_height, orig_ref_width, orig_ref_height] = dims;
        let n = width * height;
        let need = 32 + n * 12;
        if bytes.len() < need {
            return Err(Error::Truncated(format!(
                "field sidecar: need {need} bytes, have {}",
                bytes.len()
            )));
        }
        let read_f32s = |offset: usize| -> Vec<f32> {
            (0..n)
                .map(|i| {
                    let o = offset + i * 4;
                    f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
                })
                .collect()
        };
        let field = CorrespondenceField {
            width,
            height,
            map_x: read_f32s(32),
            map_y: read_f32s(32 + n * 4),
            certainty: read_f32s(32 + n * 8),
            ref_width,
            ref_height,
            orig_ref_width,
            orig_ref_height,
        };
        field.validate()?;
        Ok(field)
    }
}

#[derive(Debug, Clone)]
pub struct MatchConfig {
    /// Both images are stretched to this square size before matching.
    pub working_size: usize,
    /// Odd correlation window size.
    pub patch: usize,
    /// Search radius around each grid point, in working-resolution pixels.
    pub search_radius: usize,
    /// Certainties below this are zeroed.
    pub certainty_floor: f32,
    /// Match-grid stride at working resolution.
    pub stride: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            working_size: 560,
            patch: 9,
            search_radius: 140,
            certainty_floor: 0.3,
            stride: 2,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_size < self.patch {
            return Err(Error::InvalidConfig("working_size < patch".into()));
        }
        if self.patch % 2 == 0 {
            return Err(Error::InvalidConfig("patch must be odd".into()));
        }
        if self.search_radius < 1 {
            return Err(Error::InvalidConfig("search_radius must be >= 1".into()));
        }
        if self.stride < 1 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.certainty_floor) {
            return Err(Error::InvalidConfig("certainty_floor outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Coarse search lattice step; the best lattice hit is refined exhaustively.
const LATTICE_STEP: isize = 4;
const REFINE_RADIUS: isize = 4;
/// Windows with summed squared deviation below this are featureless; their
/// normalization is dominated by summed-area-table roundoff and must not
/// produce a score.
const MIN_NORM2: f64 = 1e-7;
/// Peak-over-runner-up z-score treated as fully unambiguous.
const FULL_CONFIDENCE_Z: f64 = 4.0;
/// Mean-level difference between matched patches tolerated without penalty
/// (covers the expected photometric shift between views), and the additional
/// difference at which confidence reaches zero.
const LEVEL_TOLERANCE: f64 = 0.05;
const LEVEL_SCALE: f64 = 0.15;
/// Common blur applied to both working images before correlation.
const PREMATCH_SIGMA: f64 = 1.0;

/// Summed-area tables for O(1) window statistics.
struct Integrals {
    n: usize,
    sum: Vec<f64>,
    sum2: Vec<f64>,
}

impl Integrals {
    fn build(img: &ImageBuffer) -> Self {
        let (w, h) = (img.width, img.height);
        let n = w + 1;
        let mut sum = vec![0f64; (w + 1) * (h + 1)];
        let mut sum2 = vec![0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut rs = 0f64;
            let mut rs2 = 0f64;
            for x in 0..w {
                let v = img.data[y * w + x] as f64;
                rs += v;
                rs2 += v * v;
                sum[(y + 1) * n + x + 1] = sum[y * n + x + 1] + rs;
                sum2[(y + 1) * n + x + 1] = sum2[y * n + x + 1] + rs2;
            }
        }
        Integrals { n, sum, sum2 }
    }

    /// Window `[x0, x0+w) x [y0, y0+h)` sum and sum of squares.
    #[inline]
    fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> (f64, f64) {
        let n = self.n;
        let (x1, y1) = (x0 + w, y0 + h);
        let s = self.sum[y1 * n + x1] - self.sum[y0 * n + x1] - self.sum[y1 * n + x0]
            + self.sum[y0 * n + x0];
        let s2 = self.sum2[y1 * n + x1] - self.sum2[y0 * n + x1] - self.sum2[y1 * n + x0]
            + self.sum2[y0 * n + x0];
        (s, s2)
    }
}

struct GridNode {
    dx: f32,
    dy: f32,
    certainty: f32,
}

/// ZNCC of a demeaned template against the window centered at `(cx, cy)`.
#[inline]
fn zncc_at(
    tpl: &[f64],
    tpl_norm2: f64,
    gray_ref: &ImageBuffer,
    ints: &Integrals,
    cx: usize,
    cy: usize,
    patch: usize,
) -> f64 {
    let half = patch / 2;
    let (x0, y0) = (cx - half, cy - half);
    let (ws, ws2) = ints.window(x0, y0, patch, patch);
    let npx = (patch * patch) as f64;
    let wnorm2 = ws2 - ws * ws / npx;
    if wnorm2 < MIN_NORM2 {
        return -2.0;
    }
    let mut cross = 0f64;
    let w = gray_ref.width;
    for py in 0..patch {
        let row = &gray_ref.data[(y0 + py) * w + x0..(y0 + py) * w + x0 + patch];
        let trow = &tpl[py * patch..(py + 1) * patch];
        let mut s0 = 0f64;
        let mut s1 = 0f64;
        for i in (0..patch.saturating_sub(1)).step_by(2) {
            s0 += trow[i] * row[i] as f64;
            s1 += trow[i + 1] * row[i + 1] as f64;
        }
        if patch % 2 == 1 {
            s0 += trow[patch - 1] * row[patch - 1] as f64;
        }
        cross += s0 + s1;
    }
    cross / (tpl_norm2 * wnorm2).sqrt()
}

fn match_node(
    gray_lr: &ImageBuffer,
    gray_ref: &ImageBuffer,
    ints: &Integrals,
    nx: usize,
    ny: usize,
    cfg: &MatchConfig,
) -> GridNode {
    let ws = cfg.working_size;
    let patch = cfg.patch;
    let half = patch / 2;

    // Demeaned template from the LR-aligned image.
    let mut tpl = vec![0f64; patch * patch];
    let mut mean = 0f64;
    for py in 0..patch {
        for px in 0..patch {
            let v = gray_lr.data[(ny - half + py) * ws + nx - half + px] as f64;
            tpl[py * patch + px] = v;
            mean += v;
        }
    }
    mean /= (patch * patch) as f64;
    let mut tpl_norm2 = 0f64;
    for v in tpl.iter_mut() {
        *v -= mean;
        tpl_norm2 += *v * *v;
    }
    if tpl_norm2 < MIN_NORM2 {
        // Featureless template: keep the identity position with no confidence.
        return GridNode {
            dx: 0.0,
            dy: 0.0,
            certainty: 0.0,
        };
    }

    let r = cfg.search_radius as isize;
    let lat = -(r / LATTICE_STEP) * LATTICE_STEP;
    let lo = half as isize;
    let hi = (ws - 1 - half) as isize;

    // Seed with the zero offset so exact ties on repetitive content keep the
    // identity match, then scan the coarse lattice (which revisits it).
    let zero_score = zncc_at(&tpl, tpl_norm2, gray_ref, ints, nx, ny, patch);
    let mut coarse: Vec<(f64, isize, isize)> = Vec::with_capacity(((2 * r / LATTICE_STEP + 1) * (2 * r / LATTICE_STEP + 1)) as usize);
    let mut best = (zero_score, 0isize, 0isize);
    let mut dy = lat;
    while dy <= r {
        let cy = ny as isize + dy;
        if cy >= lo && cy <= hi {
            let mut dx = lat;
            while dx <= r {
                let cx = nx as isize + dx;
                if cx >= lo && cx <= hi {
                    let s = zncc_at(&tpl, tpl_norm2, gray_ref, ints, cx as usize, cy as usize, patch);
                    coarse.push((s, dx, dy));
                    if s > best.0 {
                        best = (s, dx, dy);
                    }
                }
                dx += LATTICE_STEP;
            }
        }
        dy += LATTICE_STEP;
    }

    // Ambiguity reference: best lattice score well away from the winner.
    // The exclusion zone must exceed the correlation peak's own shoulder,
    // which scales with the smoothing of the working-resolution content.
    let excl = (patch as isize).max(r / 3);
    let mut second_far = -1.0f64;
    for &(s, dx, dy) in &coarse {
        if (dx - best.1).abs().max((dy - best.2).abs()) > excl && s > second_far {
            second_far = s;
        }
    }

    // Exhaustive refinement around the lattice winner.
    for dy in (best.2 - REFINE_RADIUS)..=(best.2 + REFINE_RADIUS) {
        let cy = ny as isize + dy;
        if cy < lo || cy > hi || dy.abs() > r {
            continue;
        }
        for dx in (best.1 - REFINE_RADIUS)..=(best.1 + REFINE_RADIUS) {
            let cx = nx as isize + dx;
            if cx < lo || cx > hi || dx.abs() > r {
                continue;
            }
            let s = zncc_at(&tpl, tpl_norm2, gray_ref, ints, cx as usize, cy as usize, patch);
            if s > best.0 {
                best = (s, dx, dy);
            }
        }
    }

    // Minimum-displacement prior: when the zero offset is statistically
    // indistinguishable from the winner (within a few multiples of the
    // correlation sampling noise), keep the identity match. Pre-aligned
    // content then never acquires spurious sub-noise displacements, while
    // genuine displacements beat the zero offset by far more than the band.
    if best.1 != 0 || best.2 != 0 {
        let s = best.0.clamp(0.0, 1.0);
        let noise_band = 4.0 * (1.0 - s * s).max(1e-4) / (patch as f64);
        if zero_score >= best.0 - noise_band {
            best = (zero_score, 0, 0);
        }
    }

    // Raw best ZNCC discounted by ambiguity. Pure-noise inputs produce
    // best-of-search scores near 0.5 solely from selection bias, with the
    // far runner-up at nearly the same level, so the margin over the best
    // spatially distant candidate is compared against the sampling noise of
    // a correlation estimate at the peak's level: sigma ≈ (1 - r²)/√N.
    let score = best.0.clamp(0.0, 1.0);
    let sigma = (1.0 - (score * score).min(1.0)).max(1e-4) / (patch as f64);
    let z = (best.0 - second_far) / sigma;
    let selectivity = (z / FULL_CONFIDENCE_Z).clamp(0.0, 1.0);

    // ZNCC is invariant to per-patch gain and offset, so a pattern-alike
    // window at a very different brightness still scores highly. Views are
    // only expected to differ by a small photometric shift; matches whose
    // mean levels disagree beyond that are discounted.
    let level_penalty = {
        let (cx, cy) = ((nx as isize + best.1) as usize, (ny as isize + best.2) as usize);
        let (wsum, _) = ints.window(cx - half, cy - half, patch, patch);
        let win_mean = wsum / (patch * patch) as f64;
        let delta = (mean - win_mean).abs();
        (1.0 - (delta - LEVEL_TOLERANCE).max(0.0) / LEVEL_SCALE).clamp(0.0, 1.0)
    };
    let mut certainty = (score * selectivity * level_penalty) as f32;
    if certainty < cfg.certainty_floor {
        certainty = 0.0;
    }
    GridNode {
        dx: best.1 as f32,
        dy: best.2 as f32,
        certainty,
    }
}

/// How far a node's offset may deviate from its neighborhood median before
/// it is treated as an isolated false peak, in working-resolution pixels.
const CONSISTENCY_TOLERANCE: f32 = 2.5;

fn median_of(mut vals: Vec<f32>) -> f32 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    vals[vals.len() / 2]
}

/// Spatial consistency pass over the match grid: a correspondence field is
/// locally smooth, so a node whose offset jumps away from the median of its
/// 5×5 neighborhood is an isolated false peak (a look-alike inside the
/// search area that a per-patch score cannot flag). Such nodes take their
/// neighborhood's median offset and certainty.
fn consistency_filter(rows: &[Vec<GridNode>], gx: usize, gy: usize) -> Vec<Vec<GridNode>> {
    (0..gy)
        .into_par_iter()
        .map(|y| {
            (0..gx)
                .map(|x| {
                    let y0 = y.saturating_sub(2);
                    let y1 = (y + 2).min(gy - 1);
                    let x0 = x.saturating_sub(2);
                    let x1 = (x + 2).min(gx - 1);
                    let mut dxs = Vec::with_capacity(25);
                    let mut dys = Vec::with_capacity(25);
                    let mut certs = Vec::with_capacity(25);
                    for ny in y0..=y1 {
                        for nx in x0..=x1 {
                            let n = &rows[ny][nx];
                            dxs.push(n.dx);
                            dys.push(n.dy);
                            certs.push(n.certainty);
                        }
                    }
                    let medx = median_of(dxs);
                    let medy = median_of(dys);
                    let node = &rows[y][x];
                    if (node.dx - medx).abs() > CONSISTENCY_TOLERANCE
                        || (node.dy - medy).abs() > CONSISTENCY_TOLERANCE
                    {
                        GridNode {
                            dx: medx,
                            dy: medy,
                            certainty: median_of(certs),
                        }
                    } else {
                        GridNode {
                            dx: node.dx,
                            dy: node.dy,
                            certainty: node.certainty,
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Dense coarse correspondence at working resolution.
///
/// Both images are stretched to `working_size`²; each stride-grid patch of the
/// LR-aligned image is searched in the reference within `search_radius`; the
/// strided result is densified by bilinear interpolation of offsets and
/// certainty. The returned field maps working-resolution coordinates and
/// carries the original reference dimensions for [`upscale_field`].
pub fn coarse_match(
    lr_up: &ImageBuffer,
    reference: &ImageBuffer,
    cfg: &MatchConfig,
) -> Result<CorrespondenceField> {
    cfg.validate()?;
    if lr_up.width == 0 || lr_up.height == 0 || reference.width == 0 || reference.height == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let ws = cfg.working_size;
    // A mild common blur narrows the sharpness gap between the upscaled LR
    // image and the reference, so correlation compares like with like.
    let gray_lr = gaussian_blur(&resize_bicubic(lr_up, ws, ws)?.to_luma(), PREMATCH_SIGMA);
    let gray_ref = gaussian_blur(&resize_bicubic(reference, ws, ws)?.to_luma(), PREMATCH_SIGMA);
    let ints = Integrals::build(&gray_ref);

    let half = cfg.patch / 2;
    let grid_count = |len: usize| (len - 2 * half - 1) / cfg.stride + 1;
    let (gx, gy) = (grid_count(ws), grid_count(ws));

    let raw_rows: Vec<Vec<GridNode>> = (0..gy)
        .into_par_iter()
        .map(|gyi| {
            let ny = half + gyi * cfg.stride;
            (0..gx)
                .map(|gxi| {
                    let nx = half + gxi * cfg.stride;
                    match_node(&gray_lr, &gray_ref, &ints, nx, ny, cfg)
                })
                .collect()
        })
        .collect();
    let rows = consistency_filter(&raw_rows, gx, gy);

    // Densify node offsets and certainty to the full working grid.
    let node_pos = |gi: usize| (half + gi * cfg.stride) as f64;
    let mut field = CorrespondenceField {
        width: ws,
        height: ws,
        map_x: vec![0f32; ws * ws],
        map_y: vec![0f32; ws * ws],
        certainty: vec![0f32; ws * ws],
        ref_width: ws,
        ref_height: ws,
        orig_ref_width: reference.width,
        orig_ref_height: reference.height,
    };
    for y in 0..ws {
        let gf = ((y as f64 - node_pos(0)) / cfg.stride as f64).clamp(0.0, (gy - 1) as f64);
        let g0 = gf.floor() as usize;
        let g1 = (g0 + 1).min(gy - 1);
        let fy = gf - g0 as f64;
        for x in 0..ws {
            let hf = ((x as f64 - node_pos(0)) / cfg.stride as f64).clamp(0.0, (gx - 1) as f64);
            let h0 = hf.floor() as usize;
            let h1 = (h0 + 1).min(gx - 1);
            let fx = hf - h0 as f64;
            let lerp = |f: &dyn Fn(&GridNode) -> f32| -> f64 {
                let v00 = f(&rows[g0][h0]) as f64;
                let v10 = f(&rows[g0][h1]) as f64;
                let v01 = f(&rows[g1][h0]) as f64;
                let v11 = f(&rows[g1][h1]) as f64;
                let top = v00 + fx * (v10 - v00);
                let bot = v01 + fx * (v11 - v01);
                top + fy * (bot - top)
            };
            let i = y * ws + x;
            field.map_x[i] = (x as f64 + lerp(&|n| n.dx)) as f32;
            field.map_y[i] = (y as f64 + lerp(&|n| n.dy)) as f32;
            field.certainty[i] = lerp(&|n| n.certainty).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(field)
}

/// Resample the field to `(out_w, out_h)` and rescale mapping coordinates
/// from the working frame to the original reference frame. Offsets (mapping
/// minus position) are interpolated, certainty is interpolated and
/// re-clamped to `[0, 1]`.
pub fn upscale_field(
    field: &CorrespondenceField,
    out_w: usize,
    out_h: usize,
) -> Result<CorrespondenceField> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("zero target dimension".into()));
    }
    field.validate()?;
    let sx = field.width as f64 / out_w as f64;
    let sy = field.height as f64 / out_h as f64;
    let rx = field.orig_ref_width as f64 / field.ref_width as f64;
    let ry = field.orig_ref_height as f64 / field.ref_height as f64;

    let sample = |arr: &[f32], x: f64, y: f64| -> f64 {
        let xf = x.clamp(0.0, (field.width - 1) as f64);
        let yf = y.clamp(0.0, (field.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(field.width - 1);
        let y1 = (y0 + 1).min(field.height - 1);
        let fx = xf - x0 as f64;
        let fy = yf - y0 as f64;
        let v00 = arr[y0 * field.width + x0] as f64;
        let v10 = arr[y0 * field.width + x1] as f64;
        let v01 = arr[y1 * field.width + x0] as f64;
        let v11 = arr[y1 * field.width + x1] as f64;
        let top = v00 + fx * (v10 - v00);
        let bot = v01 + fx * (v11 - v01);
        top + fy * (bot - top)
    };

    let mut out = CorrespondenceField {
        width: out_w,
        height: out_h,
        map_x: vec![0f32; out_w * out_h],
        map_y: vec![0f32; out_w * out_h],
        certainty: vec![0f32; out_w * out_h],
        ref_width: field.orig_ref_width,
        ref_height: field.orig_ref_height,
        orig_ref_width: field.orig_ref_width,
        orig_ref_height: field.orig_ref_height,
    };
    for oy in 0..out_h {
        let py = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let px = (ox as f64 + 0.5) * sx - 0.5;
            // Interpolate the offset, add the sample position back, then
            // rescale into the original reference frame.
            let off_x = sample(&field.map_x, px, py) - px.clamp(0.0, (field.width - 1) as f64);
            let off_y = sample(&field.map_y, px, py) - py.clamp(0.0, (field.height - 1) as f64);
            let mx = px + off_x;
            let my = py + off_y;
            let i = oy * out_w + ox;
            out.map_x[i] = ((mx + 0.5) * rx - 0.5) as f32;
            out.map_y[i] = ((my + 0.5) * ry - 0.5) as f32;
            out.certainty[i] = sample(&field.certainty, px, py).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// `certainty ⊙ warped_reference + (1 - certainty) ⊙ mask`, per pixel per
/// channel. The mask may be single-channel (broadcast) or match the
/// reference's channel count.
pub fn compose_reference(
    reference: &ImageBuffer,
    field: &CorrespondenceField,
    mask: &ImageBuffer,
) -> Result<ImageBuffer> {
    if mask.width != field.width || mask.height != field.height {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs field domain {}x{}",
            mask.width, mask.height, field.width, field.height
        )));
    }
    if mask.channels != reference.channels && mask.channels != 1 {
        return Err(Error::DimensionMismatch(
            "mask channels must match reference or be 1".into(),
        ));
    }
    let warped = warp_bilinear(reference, field)?;
    let mut out = ImageBuffer::new(field.width, field.height, reference.channels);
    for i in 0..field.width * field.height {
        let c = field.certainty[i];
        for ch in 0..reference.channels {
            let m = if mask.channels == 1 {
                mask.data[i]
            } else {
                mask.data[i * mask.channels + ch]
            };
            let w = warped.data[i * reference.channels + ch];
            out.data[i * reference.channels + ch] = c * w + (1.0 - c) * m;
        }
    }
    Ok(out)
}

/// Full strategy: coarse match at working resolution, upscale the field to
/// the LR-aligned plane, warp and composite. `lr_up` must already be the
/// bicubic-upscaled LR image at target resolution.
pub fn align_reference(
    lr_up: &ImageBuffer,
    reference: &ImageBuffer,
    mask: &ImageBuffer,
    cfg: &MatchConfig,
) -> Result<(ImageBuffer, CorrespondenceField)> {
    let coarse = coarse_match(lr_up, reference, cfg)?;
    let full = upscale_field(&coarse, lr_up.width, lr_up.height)?;
    let aligned = compose_reference(reference, &full, mask)?;
    Ok((aligned, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Smooth, non-stationary analytic test texture: enveloped gratings plus
    /// blobs, squashed so values never clip into flat regions.
    fn texture(x: f64, y: f64) -> f32 {
        let tau = std::f64::consts::TAU;
        let mut v = 0.0008 * x + 0.0005 * y - 0.15;
        let comps = [
            (0.050, 0.35, 0.25, 0.11, 0.006, 0.3),
            (0.085, -0.62, 0.91, 0.07, 0.009, 2.1),
            (0.130, 1.05, -0.40, 0.05, 0.011, 4.0),
            (0.020, 0.10, 0.95, 0.13, 0.005, 1.2),
        ];
        for &(f, cx, cy, amp, ef, ep) in &comps {
            let env = 0.55 + 0.45 * (tau * ef * (0.8 * x + 0.6 * y) + ep).sin();
            v += amp * env * (tau * f * (cx * x + cy * y) + 0.7).sin();
        }
        for &(bx, by, sigma, amp) in &[
            (60.0, 70.0, 28.0, 0.14),
            (170.0, 150.0, 36.0, -0.12),
            (110.0, 200.0, 22.0, 0.10),
        ] {
            let dx = x - bx;
            let dy = y - by;
            v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
        (0.5 + 0.4 * (v / 0.45).tanh()) as f32
    }

    fn textured_image(w: usize, h: usize, shift_x: f64) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |x, y, _| texture(x as f64 - shift_x, y as f64))
    }

    fn small_cfg() -> MatchConfig {
        MatchConfig {
            working_size: 240,
            patch: 9,
            search_radius: 60,
            certainty_floor: 0.3,
            stride: 2,
        }
    }

    #[test]
    fn self_match_is_identity_with_high_certainty() {
        let cfg = small_cfg();
        let img = textured_image(cfg.working_size, cfg.working_size, 0.0);
        let field = coarse_match(&img, &img, &cfg).unwrap();
        let n = field.width * field.height;
        let mut max_err = 0f32;
        for i in 0..n {
            let (x, y) = ((i % field.width) as f32, (i / field.width) as f32);
            max_err = max_err
                .max((field.map_x[i] - x).abs())
                .max((field.map_y[i] - y).abs());
        }
        assert!(max_err <= 0.5, "max identity error {max_err}");
        let mean_c: f32 = field.certainty.iter().sum::<f32>() / n as f32;
        assert!(mean_c >= 0.99, "mean certainty {mean_c}");
    }

    #[test]
    fn translation_is_recovered_in_the_interior() {
        let cfg = small_cfg();
        let ws = cfg.working_size;
        let lr = textured_image(ws, ws, 0.0);
        // reference shifted so the match target is (u + 12, v)
        let reference = textured_image(ws, ws, 12.0);
        let field = coarse_match(&lr, &reference, &cfg).unwrap();
        let margin = cfg.search_radius;
        let mut max_err = 0f32;
        for v in margin..ws - margin {
            for u in margin..ws - margin {
                let i = v * ws + u;
                let ex = (field.map_x[i] - (u as f32 + 12.0)).abs();
                let ey = (field.map_y[i] - v as f32).abs();
                max_err = max_err.max(ex).max(ey);
            }
        }
        assert!(max_err <= 1.0, "interior translation error {max_err}");
    }

    #[test]
    fn unrelated_noise_has_near_zero_certainty() {
        let cfg = small_cfg();
        let ws = cfg.working_size;
        let mut ra = RngState::new(11, 0);
        let mut rb = RngState::new(12, 0);
        let a = ImageBuffer::from_fn(ws, ws, 1, |_, _, _| ra.uniform() as f32);
        let b = ImageBuffer::from_fn(ws, ws, 1, |_, _, _| rb.uniform() as f32);
        let field = coarse_match(&a, &b, &cfg).unwrap();
        let mean_c: f32 =
            field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32;
        assert!(mean_c <= 0.1, "mean certainty on noise {mean_c}");
    }

    #[test]
    fn upscale_same_size_rescales_coordinates() {
        let f = CorrespondenceField::from_fn(10, 10, 20, 20, |u, v| {
            (u as f32 * 2.0, v as f32 * 2.0, 0.7)
        });
        // The frame is 20x20, already the original size: ratio 1.
        let up = upscale_field(&f, 10, 10).unwrap();
        for i in 0..100 {
            assert!((up.map_x[i] - f.map_x[i]).abs() < 1e-4);
            assert!((up.map_y[i] - f.map_y[i]).abs() < 1e-4);
            assert!((up.certainty[i] - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn upscale_identity_field_stays_identity_after_rescale() {
        let mut f = CorrespondenceField::identity(56, 56);
        // Mapping frame is the 56-working grid; the original reference is 224.
        f.orig_ref_width = 224;
        f.orig_ref_height = 224;
        let up = upscale_field(&f, 224, 224).unwrap();
        let mut max_err = 0f32;
        for y in 0..224 {
            for x in 0..224 {
                let i = y * 224 + x;
                max_err = max_err
                    .max((up.map_x[i] - x as f32).abs())
                    .max((up.map_y[i] - y as f32).abs());
            }
        }
        assert!(max_err <= 0.5, "identity rescale error {max_err}");
    }

    #[test]
    fn upscale_constant_certainty_preserved() {
        let mut f = CorrespondenceField::identity(16, 16);
        f.certainty.iter_mut().for_each(|c| *c = 0.7);
        let up = upscale_field(&f, 40, 40).unwrap();
        for &c in &up.certainty {
            assert!((c - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_extremes_select_one_side() {
        let reference = ImageBuffer::from_fn(8, 8, 3, |x, y, c| ((x + y + c) % 5) as f32 / 5.0);
        let mask = ImageBuffer::constant(8, 8, 3, 1.0);
        let mut field = CorrespondenceField::identity(8, 8);

        field.certainty.iter_mut().for_each(|c| *c = 1.0);
        let out = compose_reference(&reference, &field, &mask).unwrap();
        assert_eq!(out.data, reference.data);

        field.certainty.iter_mut().for_each(|c| *c = 0.0);
        let out = compose_reference(&reference, &field, &mask).unwrap();
        assert_eq!(out.data, mask.data);
    }

    #[test]
    fn compose_half_certainty_is_midpoint() {
        let reference = ImageBuffer::constant(4, 4, 1, 0.0);
        let mask = ImageBuffer::constant(4, 4, 1, 1.0);
        let mut field = CorrespondenceField::identity(4, 4);
        field.certainty.iter_mut().for_each(|c| *c = 0.5);
        let out = compose_reference(&reference, &field, &mask).unwrap();
        for &v in &out.data {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn field_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.field");
        let f = CorrespondenceField::from_fn(6, 4, 12, 8, |u, v| {
            (u as f32 * 1.5 + 0.25, v as f32 * 2.0 - 0.5, 0.4)
        });
        f.save(&path).unwrap();
        let g = CorrespondenceField::load(&path).unwrap();
        assert_eq!(f.map_x, g.map_x);
        assert_eq!(f.map_y, g.map_y);
        assert_eq!(f.certainty, g.certainty);
        assert_eq!(g.ref_width, 12);
        assert_eq!(g.orig_ref_height, 8);
    }

    #[test]
    fn align_does_not_hurt_a_prealigned_pair() {
        // Self-reference with mild degradation: the reference is a blurred
        // view of the HR behind the (blurred + slightly noisy) query, the
        // mask is a sharper SISR stand-in. Alignment of an already aligned
        // pair must not reduce PSNR.
        let cfg = small_cfg();
        let ws = cfg.working_size;
        let hr = textured_image(ws, ws, 0.0);
        let reference = crate::degrade::gaussian_blur(&hr, 0.8);
        let mut lr_up = crate::degrade::gaussian_blur(&hr, 1.4);
        let mut noise = RngState::new(5, 1);
        for v in lr_up.data.iter_mut() {
            *v = (*v + 0.003 * noise.normal_f32()).clamp(0.0, 1.0);
        }
        let mask = crate::degrade::gaussian_blur(&hr, 0.5);
        let (aligned, field) = align_reference(&lr_up, &reference, &mask, &cfg).unwrap();
        let before = crate::metrics::psnr(&reference, &hr).unwrap();
        let after = crate::metrics::psnr(&aligned, &hr).unwrap();
        assert!(
            after >= before,
            "alignment hurt a pre-aligned pair: {after:.2} < {before:.2}"
        );
        let mean_c: f32 =
            field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32;
        assert!(mean_c > 0.7, "mean certainty {mean_c}");
    }

    #[test]
    fn unrelated_reference_yields_mask() {
        let cfg = small_cfg();
        let ws = cfg.working_size;
        let lr_up = textured_image(ws, ws, 0.0);
        let mut rb = RngState::new(77, 0);
        let reference = ImageBuffer::from_fn(ws, ws, 1, |_, _, _| rb.uniform() as f32);
        let mask = ImageBuffer::constant(ws, ws, 1, 1.0);
        let (aligned, field) = align_reference(&lr_up, &reference, &mask, &cfg).unwrap();
        let mean_c: f32 =
            field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32;
        assert!(mean_c <= 0.1, "mean certainty {mean_c}");
        // Output dominated by the (white) mask.
        let mean_v: f32 = aligned.data.iter().sum::<f32>() / aligned.data.len() as f32;
        assert!(mean_v >= 0.85, "mean output {mean_v}");
    }
}
