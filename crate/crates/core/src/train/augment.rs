//! Training-time augmentation: joint flip and crop for a sample's images,
//! photometric jitter and a small perspective warp for the reference only
//! (alignment-robustness training).

use crate::datagen::{homography_field, Homography};
use crate::error::Result;
use crate::image::{warp_bilinear, ImageBuffer, Rect};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub color_jitter: bool,
    pub homography: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip: true,
            crop: true,
            color_jitter: true,
            homography: true,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            flip: false,
            crop: false,
            color_jitter: false,
            homography: false,
        }
    }
}

fn hflip(img: &ImageBuffer) -> ImageBuffer {
    ImageBuffer::from_fn(img.width, img.height, img.channels, |x, y, c| {
        img.get(img.width - 1 - x, y, c)
    })
}

/// Per-channel gain in [0.9, 1.1] and offset in [-0.05, 0.05].
fn color_jitter(img: &ImageBuffer, rng: &mut RngState) -> ImageBuffer {
    let mut gains = [1.0f32; 3];
    let mut offs = [0.0f32; 3];
    for c in 0..img.channels {
        gains[c] = rng.uniform_range(0.9, 1.1) as f32;
        offs[c] = rng.uniform_range(-0.05, 0.05) as f32;
    }
    let mut out = img.clone();
    for i in 0..img.width * img.height {
        for c in 0..img.channels {
            let v = out.data[i * img.channels + c];
            out.data[i * img.channels + c] = (gains[c] * v + offs[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Small random perspective warp: corners perturbed by up to 3% of the side.
fn small_homography_warp(img: &ImageBuffer, rng: &mut RngState) -> Result<ImageBuffer> {
    let c = (img.width.min(img.height) - 1) as f64;
    let jitter = 0.03 * c;
    let src = [
        (0.0, 0.0),
        ((img.width - 1) as f64, 0.0),
        ((img.width - 1) as f64, (img.height - 1) as f64),
        (0.0, (img.height - 1) as f64),
    ];
    let mut dst = src;
    for p in dst.iter_mut() {
        p.0 += rng.uniform_range(-jitter, jitter);
        p.1 += rng.uniform_range(-jitter, jitter);
    }
    let hom = Homography::from_correspondences(&src, &dst)
        .unwrap_or_else(Homography::identity);
    apply_homography(img, &hom)
}

/// Resample `img` through a homography over its own plane.
pub fn apply_homography(img: &ImageBuffer, hom: &Homography) -> Result<ImageBuffer> {
    let field = homography_field(hom, img.width, img.height, img.width, img.height);
    warp_bilinear(img, &field)
}

/// Joint augmentation of a training sample. Flip and crop are applied
/// identically to every image; color jitter and the perspective warp touch
/// only the reference. Draw order is fixed, so a given `rng` yields the same
/// transform regardless of which images are present.
pub fn augment_sample(
    hr: &ImageBuffer,
    lr_up: Option<&ImageBuffer>,
    reference: Option<&ImageBuffer>,
    flags: &AugmentFlags,
    crop_size: usize,
    rng: &mut RngState,
) -> Result<(ImageBuffer, Option<ImageBuffer>, Option<ImageBuffer>)> {
    let mut imgs: Vec<ImageBuffer> = Vec::with_capacity(3);
    imgs.push(hr.clone());
    if let Some(l) = lr_up {
        imgs.push(l.clone());
    }
    if let Some(r) = reference {
        imgs.push(r.clone());
    }

    if flags.flip && rng.uniform() < 0.5 {
        for img in imgs.iter_mut() {
            *img = hflip(img);
        }
    }
    if imgs[0].width > crop_size || imgs[0].height > crop_size {
        let (x0, y0) = if flags.crop {
            (
                rng.uniform_int((imgs[0].width - crop_size + 1) as u64) as usize,
                rng.uniform_int((imgs[0].height - crop_size + 1) as u64) as usize,
            )
        } else {
            (
                (imgs[0].width - crop_size) / 2,
                (imgs[0].height - crop_size) / 2,
            )
        };
        for img in imgs.iter_mut() {
            *img = img.crop(Rect::new(x0, y0, crop_size, crop_size))?;
        }
    }

    let ref_idx = reference.map(|_| imgs.len() - 1);
    if let Some(ri) = ref_idx {
        if flags.color_jitter {
            imgs[ri] = color_jitter(&imgs[ri], rng);
        }
        if flags.homography {
            imgs[ri] = small_homography_warp(&imgs[ri], rng)?;
        }
    }

    let mut it = imgs.into_iter();
    let hr_out = it.next().expect("hr present");
    let lr_out = lr_up.map(|_| it.next().expect("lr present"));
    let ref_out = reference.map(|_| it.next().expect("ref present"));
    Ok((hr_out, lr_out, ref_out))
}

/// Paired augmentation of (hr, reference), the shape used by stage-2 batches.
pub fn augment(
    hr: &ImageBuffer,
    reference: &ImageBuffer,
    flags: &AugmentFlags,
    crop_size: usize,
    rng: &mut RngState,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let (h, _, r) = augment_sample(hr, None, Some(reference), flags, crop_size, rng)?;
    Ok((h, r.expect("reference present")))
}
