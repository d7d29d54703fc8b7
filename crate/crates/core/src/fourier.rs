//! Amplitude-spectrum perturbation.
//!
//! The forward transform uses the `e^{-j2π(uy/H + vx/W)}` kernel and the
//! spectrum is stored in polar form `F = A · e^{-jP}`, i.e. the stored phase
//! is the negated argument of the complex coefficient.

use std::f64::consts::PI;

use log::warn;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coreset::CoreSet;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seed;

/// Per-channel polar spectrum, each plane `H×W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefSource {
    OtherImage,
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub lambda: f64,
    pub ref_source: RefSource,
    pub seed: u64,
    /// Draw the reference from the same class when possible.
    pub same_class_ref: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { lambda: 0.8, ref_source: RefSource::OtherImage, seed: 0, same_class_ref: false }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Output of [`ifft2`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inverse {
    /// Real part clipped to `[0, 1]`.
    pub image: Image,
    /// Real part before clipping.
    pub unclipped: Vec<f64>,
    /// Largest magnitude of the discarded imaginary part.
    pub imag_residual: f64,
}

/// In-place iterative radix-2 FFT. `inverse` flips the kernel sign and
/// scales by `1/n`.
pub fn fft_in_place(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = data[start + k];
                let b = data[start + k + len / 2] * w;
                data[start + k] = a + b;
                data[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// 2-D transform of one `h×w` plane, rows then columns.
pub fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in plane.chunks_mut(w) {
        fft_in_place(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        fft_in_place(&mut col, inverse);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

fn check_sides(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Invalid(format!("{h}x{w} image: FFT sides must be powers of two")));
    }
    Ok(())
}

/// Polar phase in `(-π, π]` for the `A·e^{-jP}` convention.
fn polar_phase(c: Complex64) -> f64 {
    let p = -c.arg();
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

pub fn fft2(image: &Image) -> Result<Spectrum> {
    let (c, h, w) = image.shape();
    check_sides(h, w)?;
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft2 input".into()));
    }
    let mut amplitude = Vec::with_capacity(c * h * w);
    let mut phase = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut plane: Vec<Complex64> = image.plane(ch).iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        fft2_plane(&mut plane, h, w, false);
        for v in plane {
            amplitude.push(v.norm());
            phase.push(polar_phase(v));
        }
    }
    Ok(Spectrum { channels: c, height: h, width: w, amplitude, phase })
}

/// Inverse transform of `A·e^{-jP}`; keeps the real part and clips it.
pub fn ifft2(spec: &Spectrum) -> Inverse {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let n = h * w;
    let mut unclipped = Vec::with_capacity(c * n);
    let mut imag_residual = 0.0f64;
    for ch in 0..c {
        let mut plane: Vec<Complex64> = (0..n)
            .map(|i| {
                let (a, p) = (spec.amplitude[ch * n + i], spec.phase[ch * n + i]);
                Complex64::new(a * p.cos(), -a * p.sin())
            })
            .collect();
        fft2_plane(&mut plane, h, w, true);
        for v in plane {
            unclipped.push(v.re);
            imag_residual = imag_residual.max(v.im.abs());
        }
    }
    let data = unclipped.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Inverse { image: Image { channels: c, height: h, width: w, data }, unclipped, imag_residual }
}

/// `A ← (1-λ)·A + λ·A_ref`, phase untouched.
pub fn perturb_amplitude(spec: &Spectrum, ref_amp: &[f64], lambda: f64) -> Result<Spectrum> {
    if ref_amp.len() != spec.amplitude.len() {
        return Err(Error::Shape(format!(
            "reference amplitude has {} bins, spectrum has {}",
            ref_amp.len(),
            spec.amplitude.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = spec.clone();
    for (a, &r) in out.amplitude.iter_mut().zip(ref_amp) {
        *a = (1.0 - lambda) * *a + lambda * r;
    }
    Ok(out)
}

/// Full chain for one image: transform, mix amplitudes, invert, clip.
pub fn perturb_image(x: &Image, reference: &Image, lambda: f64) -> Result<Image> {
    if x.shape() != reference.shape() {
        return Err(Error::Shape(format!("reference {:?} vs image {:?}", reference.shape(), x.shape())));
    }
    let spec = fft2(x)?;
    let ref_spec = fft2(reference)?;
    Ok(ifft2(&perturb_amplitude(&spec, &ref_spec.amplitude, lambda)?).image)
}

fn uniform_noise<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> Image {
    let (c, h, w) = shape;
    Image { channels: c, height: h, width: w, data: (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect() }
}

/// Perturbs every core-set patch; output `j` pairs with `coreset.patches[j]`.
pub fn fourier_perturb(coreset: &CoreSet, cfg: &PerturbConfig) -> Result<Vec<Image>> {
    cfg.validate()?;
    if coreset.patches.is_empty() {
        return Err(Error::Invalid("cannot perturb an empty core-set".into()));
    }
    let mut source = cfg.ref_source;
    if source == RefSource::OtherImage && coreset.patches.len() < 2 {
        warn!("single-patch core-set: falling back to a uniform-noise reference");
        source = RefSource::UniformNoise;
    }
    let spectra: Vec<Spectrum> = coreset.patches.iter().map(|p| fft2(&p.pixels)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(coreset.patches.len());
    for (j, patch) in coreset.patches.iter().enumerate() {
        let mut rng = seed::derived_rng(cfg.seed, "fourier-ref", j as u64);
        let ref_amp = match source {
            RefSource::UniformNoise => fft2(&uniform_noise(patch.pixels.shape(), &mut rng))?.amplitude,
            RefSource::OtherImage => {
                let differs = |k: usize| k != j && coreset.patches[k].source_index != patch.source_index;
                let mut pool: Vec<usize> = (0..coreset.patches.len())
                    .filter(|&k| differs(k) && (!cfg.same_class_ref || coreset.patches[k].label == patch.label))
                    .collect();
                if pool.is_empty() {
                    pool = (0..coreset.patches.len()).filter(|&k| differs(k)).collect();
                }
                if pool.is_empty() {
                    pool = (0..coreset.patches.len()).filter(|&k| k != j).collect();
                }
                spectra[pool[rng.random_range(0..pool.len())]].amplitude.clone()
            }
        };
        out.push(ifft2(&perturb_amplitude(&spectra[j], &ref_amp, cfg.lambda)?).image);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::coreset::Patch;
    use proptest::prelude::*;

    /// Direct O(N²) DFT of one plane.
    fn naive_dft(x: &[f64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
        naive_dft_complex(&x.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>(), h, w, inverse)
    }

    fn naive_dft_complex(x: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let ang = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        acc += x[y * w + xx] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[u * w + v] = if inverse { acc / (h * w) as f64 } else { acc };
            }
        }
        out
    }

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seed::rng(seed);
        Image { channels: c, height: h, width: w, data: (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect() }
    }

    #[test]
    fn constant_image_is_pure_dc() {
        let img = Image::filled(1, 8, 4, 0.5);
        let s = fft2(&img).unwrap();
        assert!((s.amplitude[0] - 0.5 * 32.0).abs() < 1e-12);
        assert_eq!(s.phase[0], 0.0);
        assert!(s.amplitude[1..].iter().all(|&a| a < 1e-12));
    }

    #[test]
    fn forward_and_inverse_match_direct_dft_up_to_8x8() {
        for (h, w) in [(2, 2), (4, 4), (8, 8), (2, 8), (4, 2)] {
            let img = random_image(1, h, w, (h * 10 + w) as u64);
            let s = fft2(&img).unwrap();
            let x: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
            let oracle = naive_dft(&x, h, w, false);
            for i in 0..h * w {
                assert!((s.amplitude[i] - oracle[i].norm()).abs() < 1e-6);
                let polar = Complex64::from_polar(s.amplitude[i], -s.phase[i]);
                assert!((polar - oracle[i]).norm() < 1e-6);
                assert!(s.phase[i] > -PI && s.phase[i] <= PI);
            }
            // inverse of an arbitrary spectrum, before clipping
            let mut rng = seed::rng(3);
            let spec = Spectrum {
                channels: 1,
                height: h,
                width: w,
                amplitude: (0..h * w).map(|_| rng.random_range(0.0..3.0)).collect(),
                phase: (0..h * w).map(|_| rng.random_range(-PI..PI)).collect(),
            };
            let coeffs: Vec<Complex64> =
                spec.amplitude.iter().zip(&spec.phase).map(|(&a, &p)| Complex64::from_polar(a, -p)).collect();
            let want = naive_dft_complex(&coeffs, h, w, true);
            let inv = ifft2(&spec);
            for i in 0..h * w {
                assert!((inv.unclipped[i] - want[i].re).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn round_trip_restores_image() {
        let img = random_image(3, 32, 32, 1);
        let inv = ifft2(&fft2(&img).unwrap());
        let err = inv.image.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5);
        assert!(inv.imag_residual < 1e-9);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft2(&Image::zeros(1, 6, 8)).is_err());
    }

    #[test]
    fn amplitude_endpoints_and_midpoint() {
        let a = fft2(&random_image(1, 4, 4, 5)).unwrap();
        let b = fft2(&random_image(1, 4, 4, 6)).unwrap();
        assert_eq!(perturb_amplitude(&a, &b.amplitude, 0.0).unwrap(), a);
        let one = perturb_amplitude(&a, &b.amplitude, 1.0).unwrap();
        assert_eq!(one.amplitude, b.amplitude);
        assert_eq!(one.phase, a.phase);
        let half = perturb_amplitude(&a, &b.amplitude, 0.5).unwrap();
        for i in 0..16 {
            assert!((half.amplitude[i] - (a.amplitude[i] + b.amplitude[i]) / 2.0).abs() < 1e-12);
        }
        assert!(perturb_amplitude(&a, &b.amplitude[..4], 0.5).is_err());
        assert!(perturb_amplitude(&a, &b.amplitude, 1.5).is_err());
    }

    fn coreset_of(images: Vec<Image>) -> CoreSet {
        let patches = images
            .into_iter()
            .enumerate()
            .map(|(i, pixels)| Patch { pixels, source_index: i, label: 0, score: 0.0 })
            .collect();
        CoreSet { patches, ipc: 1, covered_classes: [0].into_iter().collect() }
    }

    #[test]
    fn perturbation_identity_at_zero_and_clipped_range() {
        let cs = coreset_of((0..4).map(|i| random_image(3, 16, 16, 40 + i)).collect());
        let same = fourier_perturb(&cs, &PerturbConfig { lambda: 0.0, ..Default::default() }).unwrap();
        for (p, o) in cs.patches.iter().zip(&same) {
            let err = p.pixels.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err <= 1e-5);
        }
        let noisy = fourier_perturb(
            &cs,
            &PerturbConfig { lambda: 0.8, ref_source: RefSource::UniformNoise, ..Default::default() },
        )
        .unwrap();
        assert!(noisy.iter().all(|i| i.is_unit_range()));
    }

    #[test]
    fn self_reference_at_full_lambda_is_identity() {
        let img = random_image(3, 16, 16, 8);
        let out = perturb_image(&img, &img, 1.0).unwrap();
        let err = out.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1e-5);
    }

    #[test]
    fn single_patch_falls_back_to_noise() {
        let cs = coreset_of(vec![random_image(3, 16, 16, 9)]);
        let out = fourier_perturb(&cs, &PerturbConfig { lambda: 0.5, ..Default::default() }).unwrap();
        assert_eq!(out.len(), 1);
        assert!(fourier_perturb(&coreset_of(vec![]), &PerturbConfig::default()).is_err());
    }

    #[test]
    fn phase_is_preserved_on_significant_bins() {
        // Smooth, mid-range images so the clip rarely bites.
        let mk = |s: u64| {
            let mut img = random_image(1, 16, 16, s);
            img.data.iter_mut().for_each(|v| *v = 0.4 + 0.2 * *v);
            img
        };
        let x = mk(1);
        let r = mk(2);
        let lambda = 0.8;
        let spec = fft2(&x).unwrap();
        let mixed = perturb_amplitude(&spec, &fft2(&r).unwrap().amplitude, lambda).unwrap();
        let inv = ifft2(&mixed);
        assert!(inv.unclipped.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = fft2(&inv.image).unwrap();
        for i in 0..256 {
            if mixed.amplitude[i] > 1e-6 && back.amplitude[i] > 1e-3 {
                let mut d = (back.phase[i] - spec.phase[i]).abs();
                d = d.min(2.0 * PI - d);
                assert!(d < 1e-3, "bin {i}: {} vs {}", back.phase[i], spec.phase[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn amplitude_mix_is_affine_in_lambda(l1 in 0.0f64..1.0, l2 in 0.0f64..1.0, t in 0.0f64..1.0, s in 0u64..1000) {
            let a = fft2(&random_image(1, 4, 4, s)).unwrap();
            let b = fft2(&random_image(1, 4, 4, s + 1)).unwrap();
            let lm = t * l1 + (1.0 - t) * l2;
            let p1 = perturb_amplitude(&a, &b.amplitude, l1).unwrap();
            let p2 = perturb_amplitude(&a, &b.amplitude, l2).unwrap();
            let pm = perturb_amplitude(&a, &b.amplitude, lm).unwrap();
            for i in 0..16 {
                let lin = t * p1.amplitude[i] + (1.0 - t) * p2.amplitude[i];
                prop_assert!((pm.amplitude[i] - lin).abs() < 1e-9);
            }
        }
    }
}
