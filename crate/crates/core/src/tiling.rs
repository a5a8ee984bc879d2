//! Sliding-window tiling for large-image inference and blended stitching of
//! per-tile outputs, plus the ablation tile-lookup modes.
//!
//! Stitching uses separable raised-cosine feathering over the overlap band
//! with per-pixel renormalization, accumulated in a fixed order so results
//! are independent of how the tiles themselves were computed.

use crate::error::{Error, Result};
use crate::image::{resize_bicubic, ImageBuffer, Rect};
use crate::matching::CorrespondenceField;

#[derive(Debug, Clone)]
pub struct TilePlan {
    pub image_w: usize,
    pub image_h: usize,
    pub tile: usize,
    pub step: usize,
    pub rects: Vec<Rect>,
}

/// Start offsets along one axis: `{0, step, 2·step, …}` with the final start
/// clamped to `dim - tile`; duplicates removed.
fn axis_starts(dim: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let last = dim - tile;
    let mut s = 0;
    loop {
        if s >= last {
            starts.push(last);
            break;
        }
        starts.push(s);
        s += step;
    }
    starts.dedup();
    starts
}

pub fn plan_tiles(w: usize, h: usize, tile: usize, step: usize) -> Result<TilePlan> {
    if tile < 1 || step < 1 || step > tile {
        return Err(Error::InvalidArgument(format!(
            "bad tile geometry: tile {tile}, step {step}"
        )));
    }
    if w < tile || h < tile {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} smaller than tile {tile}; pad first"
        )));
    }
    let xs = axis_starts(w, tile, step);
    let ys = axis_starts(h, tile, step);
    let mut rects = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            rects.push(Rect::new(x0, y0, tile, tile));
        }
    }
    Ok(TilePlan {
        image_w: w,
        image_h: h,
        tile,
        step,
        rects,
    })
}

/// Separable tile weight map: raised-cosine ramps of width `tile - step`
/// at each tile edge, strictly positive everywhere.
#[derive(Debug, Clone)]
pub struct BlendWeights {
    pub tile: usize,
    profile: Vec<f64>,
}

impl BlendWeights {
    pub fn new(tile: usize, step: usize) -> Self {
        let band = tile - step;
        let ramp = |d: usize| -> f64 {
            if band == 0 || d >= band {
                1.0
            } else {
                0.5 * (1.0 - ((d as f64 + 0.5) * std::f64::consts::PI / band as f64).cos())
            }
        };
        let profile = (0..tile).map(|u| ramp(u) * ramp(tile - 1 - u)).collect();
        BlendWeights { tile, profile }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.profile[x] * self.profile[y]
    }
}

/// Weighted accumulation and renormalization of per-tile outputs back to the
/// full image: `out(p) = Σ w_i(p)·tile_i(p) / Σ w_i(p)`.
pub fn blend_stitch(plan: &TilePlan, tiles: &[ImageBuffer]) -> Result<ImageBuffer> {
    if tiles.len() != plan.rects.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tiles for {} rects",
            tiles.len(),
            plan.rects.len()
        )));
    }
    let channels = tiles.first().map(|t| t.channels).unwrap_or(1);
    for t in tiles {
        if t.width != plan.tile || t.height != plan.tile || t.channels != channels {
            return Err(Error::DimensionMismatch(format!(
                "tile {}x{}x{} does not match plan tile {}",
                t.width, t.height, t.channels, plan.tile
            )));
        }
    }
    let weights = BlendWeights::new(plan.tile, plan.step);
    let (w, h) = (plan.image_w, plan.image_h);
    let mut num = vec![0f64; w * h * channels];
    let mut den = vec![0f64; w * h];
    for (rect, tile) in plan.rects.iter().zip(tiles) {
        for ty in 0..plan.tile {
            let oy = rect.y0 + ty;
            for tx in 0..plan.tile {
                let ox = rect.x0 + tx;
                let wgt = weights.at(tx, ty);
                den[oy * w + ox] += wgt;
                for c in 0..channels {
                    num[(oy * w + ox) * channels + c] +=
                        wgt * tile.get(tx, ty, c) as f64;
                }
            }
        }
    }
    let mut out = ImageBuffer::new(w, h, channels);
    for i in 0..w * h {
        debug_assert!(den[i] > 0.0, "coverage hole at pixel {i}");
        for c in 0..channels {
            out.data[i * channels + c] = (num[i * channels + c] / den[i]) as f32;
        }
    }
    Ok(out)
}

/// How the reference tile for an LR-plane rect is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileRefMode {
    /// Crop of the matched-and-warped reference (full method).
    Aligned,
    /// Bounding box of the matched region, resized without warping.
    RegionResize,
    /// Relative position of the LR tile scaled into the raw reference.
    Relative,
}

#[derive(Debug, Clone)]
pub struct TileRef {
    pub image: ImageBuffer,
    /// Set when a degenerate mapped region forced a fallback to relative mode.
    pub fell_back: bool,
}

fn relative_tile(rect: Rect, lr_w: usize, lr_h: usize, raw_ref: &ImageBuffer) -> Result<ImageBuffer> {
    let sx = raw_ref.width as f64 / lr_w as f64;
    let sy = raw_ref.height as f64 / lr_h as f64;
    let x0 = ((rect.x0 as f64 * sx).round() as usize).min(raw_ref.width - 1);
    let y0 = ((rect.y0 as f64 * sy).round() as usize).min(raw_ref.height - 1);
    let w = (((rect.w as f64) * sx).round() as usize).clamp(1, raw_ref.width - x0);
    let h = (((rect.h as f64) * sy).round() as usize).clamp(1, raw_ref.height - y0);
    let crop = raw_ref.crop(Rect::new(x0, y0, w, h))?;
    resize_bicubic(&crop, rect.w, rect.h)
}

/// Produce the reference tile for one LR-plane rect.
///
/// The field's domain must be the LR-aligned plane; in `Relative` mode only
/// its dimensions are consulted, so a placeholder identity field is fine.
pub fn tile_reference(
    rect: Rect,
    mode: TileRefMode,
    aligned_ref: &ImageBuffer,
    raw_ref: &ImageBuffer,
    field: &CorrespondenceField,
) -> Result<TileRef> {
    rect.check_inside(field.width, field.height)?;
    match mode {
        TileRefMode::Aligned => Ok(TileRef {
            image: aligned_ref.crop(rect)?,
            fell_back: false,
        }),
        TileRefMode::Relative => Ok(TileRef {
            image: relative_tile(rect, field.width, field.height, raw_ref)?,
            fell_back: false,
        }),
        TileRefMode::RegionResize => {
            // Bounding box of confident mapped positions over the rect.
            let mut min_x = f32::INFINITY;
            let mut min_y = f32::INFINITY;
            let mut max_x = f32::NEG_INFINITY;
            let mut max_y = f32::NEG_INFINITY;
            for v in rect.y0..rect.y0 + rect.h {
                for u in rect.x0..rect.x0 + rect.w {
                    let i = v * field.width + u;
                    if field.certainty[i] <= 0.0 {
                        continue;
                    }
                    min_x = min_x.min(field.map_x[i]);
                    max_x = max_x.max(field.map_x[i]);
                    min_y = min_y.min(field.map_y[i]);
                    max_y = max_y.max(field.map_y[i]);
                }
            }
            let degenerate = !min_x.is_finite()
                || (max_x - min_x) < 2.0
                || (max_y - min_y) < 2.0;
            if degenerate {
                return Ok(TileRef {
                    image: relative_tile(rect, field.width, field.height, raw_ref)?,
                    fell_back: true,
                });
            }
            let x0 = (min_x.floor().max(0.0) as usize).min(raw_ref.width - 1);
            let y0 = (min_y.floor().max(0.0) as usize).min(raw_ref.height - 1);
            let x1 = (max_x.ceil() as usize + 1).clamp(x0 + 1, raw_ref.width);
            let y1 = (max_y.ceil() as usize + 1).clamp(y0 + 1, raw_ref.height);
            let crop = raw_ref.crop(Rect::new(x0, y0, x1 - x0, y1 - y0))?;
            Ok(TileRef {
                image: resize_bicubic(&crop, rect.w, rect.h)?,
                fell_back: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_plan() {
        let plan = plan_tiles(1024, 1024, 1024, 256).unwrap();
        assert_eq!(plan.rects.len(), 1);
        assert_eq!(plan.rects[0], Rect::new(0, 0, 1024, 1024));
    }

    #[test]
    fn start_set_enumeration() {
        // 2048x1536 with tile 1024 step 256: 5 x-starts, 3 y-starts.
        let plan = plan_tiles(2048, 1536, 1024, 256).unwrap();
        assert_eq!(plan.rects.len(), 15);
        let xs: Vec<usize> = plan.rects[..5].iter().map(|r| r.x0).collect();
        assert_eq!(xs, vec![0, 256, 512, 768, 1024]);
        let ys: Vec<usize> = plan.rects.iter().step_by(5).map(|r| r.y0).collect();
        assert_eq!(ys, vec![0, 256, 512]);
    }

    #[test]
    fn final_start_clamps() {
        let plan = plan_tiles(1025, 1024, 1024, 256).unwrap();
        let xs: Vec<usize> = plan.rects.iter().map(|r| r.x0).collect();
        assert_eq!(xs, vec![0, 1]);
    }

    #[test]
    fn too_small_image_errors() {
        assert!(plan_tiles(512, 1024, 1024, 256).is_err());
    }

    #[test]
    fn coverage_for_assorted_geometries() {
        for (w, h, tile, step) in [
            (64usize, 64usize, 16usize, 16usize),
            (65, 70, 16, 5),
            (100, 40, 32, 7),
            (33, 33, 32, 1),
        ] {
            let plan = plan_tiles(w, h, tile, step).unwrap();
            let mut covered = vec![0u32; w * h];
            for r in &plan.rects {
                for y in r.y0..r.y0 + r.h {
                    for x in r.x0..r.x0 + r.w {
                        covered[y * w + x] += 1;
                    }
                }
            }
            assert!(
                covered.iter().all(|&c| c >= 1),
                "coverage hole for {w}x{h} tile {tile} step {step}"
            );
        }
    }

    #[test]
    fn constant_tiles_stitch_to_constant() {
        let plan = plan_tiles(80, 48, 16, 8).unwrap();
        let tiles: Vec<ImageBuffer> = plan
            .rects
            .iter()
            .map(|_| ImageBuffer::constant(16, 16, 3, 0.613))
            .collect();
        let out = blend_stitch(&plan, &tiles).unwrap();
        for &v in &out.data {
            assert!((v - 0.613).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_restitch_roundtrip() {
        let src = ImageBuffer::from_fn(96, 64, 3, |x, y, c| {
            ((x * 7 + y * 13 + c * 31) % 101) as f32 / 101.0
        });
        let plan = plan_tiles(96, 64, 32, 12).unwrap();
        let tiles: Vec<ImageBuffer> = plan
            .rects
            .iter()
            .map(|&r| src.crop(r).unwrap())
            .collect();
        let out = blend_stitch(&plan, &tiles).unwrap();
        let max_dev = src
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_dev <= 1.0 / 255.0, "max deviation {max_dev}");
    }

    #[test]
    fn overlap_band_center_is_midpoint() {
        // Two horizontally overlapping tiles, odd band width: the band-center
        // pixel gets equal weights, so the stitched value is (a+b)/2.
        let (tile, step) = (16usize, 9usize);
        let plan = plan_tiles(tile + step, tile, tile, step).unwrap();
        assert_eq!(plan.rects.len(), 2);
        let a = ImageBuffer::constant(tile, tile, 1, 0.2);
        let b = ImageBuffer::constant(tile, tile, 1, 0.8);
        let out = blend_stitch(&plan, &[a, b]).unwrap();
        let band = tile - step; // 7
        let center_x = step + (band - 1) / 2;
        let v = out.get(center_x, tile / 2, 0);
        assert!((v - 0.5).abs() < 1e-6, "band center {v}");
    }

    #[test]
    fn tile_count_mismatch_errors() {
        let plan = plan_tiles(32, 32, 16, 8).unwrap();
        assert!(blend_stitch(&plan, &[]).is_err());
    }

    #[test]
    fn aligned_mode_is_plain_crop() {
        let img = ImageBuffer::from_fn(64, 64, 1, |x, y, _| ((x + y) % 9) as f32 / 9.0);
        let field = CorrespondenceField::identity(64, 64);
        let rect = Rect::new(8, 16, 32, 32);
        let tr = tile_reference(rect, TileRefMode::Aligned, &img, &img, &field).unwrap();
        assert_eq!(tr.image.data, img.crop(rect).unwrap().data);
        assert!(!tr.fell_back);
    }

    #[test]
    fn relative_mode_scales_rect() {
        // Reference exactly 2x the LR plane: rect (0,0,32,32) reads (0,0,64,64).
        let raw = ImageBuffer::from_fn(128, 128, 1, |x, y, _| ((x / 8 + y / 8) % 2) as f32);
        let field = CorrespondenceField::identity(64, 64);
        let rect = Rect::new(0, 0, 32, 32);
        let tr = tile_reference(rect, TileRefMode::Relative, &raw, &raw, &field).unwrap();
        let expect = resize_bicubic(&raw.crop(Rect::new(0, 0, 64, 64)).unwrap(), 32, 32).unwrap();
        assert_eq!(tr.image.data, expect.data);
    }

    #[test]
    fn region_resize_translation_matches_aligned() {
        // Smooth image; field is a pure +8px horizontal translation.
        let raw = ImageBuffer::from_fn(96, 96, 1, |x, y, _| {
            0.5 + 0.25 * ((x as f32) * 0.08).sin() + 0.2 * ((y as f32) * 0.06).cos()
        });
        let mut field = CorrespondenceField::identity(64, 64);
        field.ref_width = 96;
        field.ref_height = 96;
        field.orig_ref_width = 96;
        field.orig_ref_height = 96;
        for v in field.map_x.iter_mut() {
            *v += 8.0;
        }
        let aligned = crate::image::warp_bilinear(&raw, &field).unwrap();
        let rect = Rect::new(16, 16, 32, 32);
        let a = tile_reference(rect, TileRefMode::Aligned, &aligned, &raw, &field).unwrap();
        let r = tile_reference(rect, TileRefMode::RegionResize, &aligned, &raw, &field).unwrap();
        assert!(!r.fell_back);
        let max_dev = a
            .image
            .data
            .iter()
            .zip(&r.image.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0f32, f32::max);
        assert!(max_dev <= 2.0 / 255.0, "max deviation {max_dev}");
    }

    #[test]
    fn region_resize_degenerate_falls_back() {
        let raw = ImageBuffer::constant(64, 64, 1, 0.5);
        let mut field = CorrespondenceField::identity(64, 64);
        field.certainty.iter_mut().for_each(|c| *c = 0.0);
        let rect = Rect::new(0, 0, 16, 16);
        let tr = tile_reference(rect, TileRefMode::RegionResize, &raw, &raw, &field).unwrap();
        assert!(tr.fell_back);
        assert_eq!(tr.image.width, 16);
    }
}
