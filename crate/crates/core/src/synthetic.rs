//! Procedural ten-class shape corpus used when no image tree is supplied.
//!
//! Class identity is carried only by geometry (disk, square, stripes, ...);
//! colours, placement, scale and pixel noise are random per image.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::partition::{Corpus, LabeledImage};
use crate::raster::Image;
use crate::seed;

pub const MAX_CLASSES: usize = 10;

const SHAPES: [&str; MAX_CLASSES] = [
    "disk", "square", "triangle", "ring", "hstripes", "vstripes", "diagonal", "checker", "plus", "cross",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn class_names(classes: usize) -> Vec<String> {
    SHAPES[..classes].iter().enumerate().map(|(i, s)| format!("{i:02}_{s}")).collect()
}

fn luminance(c: &[f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn in_shape(class: usize, dx: f32, dy: f32, r: f32, period: f32, phase: f32, x: f32, y: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let band = |v: f32| ((v + phase) / period).rem_euclid(2.0) < 1.0;
    match class {
        0 => d < r,
        1 => dx.abs().max(dy.abs()) < r * 0.85,
        2 => dy > -r && dy < r && dx.abs() < (dy + r) * 0.5,
        3 => d < r && d > r * 0.55,
        4 => band(y),
        5 => band(x),
        6 => band((x + y) * std::f32::consts::FRAC_1_SQRT_2),
        7 => band(x) ^ band(y),
        8 => (dx.abs() < r * 0.3 && dy.abs() < r) || (dy.abs() < r * 0.3 && dx.abs() < r),
        _ => (dx.abs() - dy.abs()).abs() < r * 0.3 && dx.abs().max(dy.abs()) < r,
    }
}

/// Renders one image of `class`.
pub fn render<R: Rng>(class: usize, size: usize, rng: &mut R) -> Image {
    let s = size as f32;
    let bg: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let mut fg: [f32; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    if (luminance(&fg) - luminance(&bg)).abs() < 0.25 {
        fg = [1.0 - bg[0], 1.0 - bg[1], 1.0 - bg[2]];
        if (luminance(&fg) - luminance(&bg)).abs() < 0.25 {
            let shift = if luminance(&bg) > 0.5 { -0.45 } else { 0.45 };
            fg = [bg[0] + shift, bg[1] + shift, bg[2] + shift].map(|v| v.clamp(0.0, 1.0));
        }
    }
    let cx = s * rng.random_range(0.35..0.65);
    let cy = s * rng.random_range(0.35..0.65);
    let r = s * rng.random_range(0.2..0.35);
    let period = s * rng.random_range(0.12..0.25);
    let phase = rng.random_range(0.0..2.0 * period);
    let grad: [f32; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let noise = Normal::new(0.0f32, 0.05).expect("valid std");
    let mut img = Image::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let m = in_shape(class, xf - cx, yf - cy, r, period, phase, xf, yf);
            let shade = grad[0] * (xf / s - 0.5) + grad[1] * (yf / s - 0.5);
            for c in 0..3 {
                let base = if m { fg[c] } else { bg[c] + shade };
                img.set(c, y, x, (base + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Generates `per_class` images for each class, class-major order.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.classes < 2 || spec.classes > MAX_CLASSES {
        return Err(Error::Invalid(format!("synthetic corpus supports 2..={MAX_CLASSES} classes")));
    }
    crate::partition::check_side(spec.size)?;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for i in 0..spec.per_class {
            let mut rng = seed::derived_rng(spec.seed, "synthetic", (class * spec.per_class + i) as u64);
            images.push(LabeledImage { image: render(class, spec.size, &mut rng), label: class });
        }
    }
    Ok(Corpus { class_names: class_names(spec.classes), images })
}

/// Writes a corpus as a class-per-directory PNG tree.
pub fn write_png_tree(corpus: &Corpus, root: &Path) -> Result<()> {
    for (i, item) in corpus.images.iter().enumerate() {
        let dir = root.join(&corpus.class_names[item.label]);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let img = &item.image;
        let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *px = image::Rgb([0, 1, 2].map(|c| (img.at(c, y, x) * 255.0).round() as u8));
        }
        let path = dir.join(format!("{i:06}.png"));
        buf.save(&path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
