//! Training-time augmentation. Steps run in a fixed order, each behind its
//! own coin flip:
//! affine → padded resized crop → cutout → brightness → saturation →
//! contrast → grayscale → blur (box or Gaussian) → low resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Closed interval a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, name: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::config(format!(
                "{name}: range [{}, {}] must be finite and ordered",
                self.lo, self.hi
            )));
        }
        if self.lo < min || self.hi > max {
            return Err(Error::config(format!(
                "{name}: range [{}, {}] must lie within [{min}, {max}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Enable flags, probabilities and parameter ranges for every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub affine_p: f64,
    pub affine_scale: Range,
    /// Degrees.
    pub affine_rotation: Range,
    /// Fraction of the image side.
    pub affine_translate: Range,
    pub crop_p: f64,
    /// Fraction of the image area kept by the crop window.
    pub crop_area: Range,
    pub crop_aspect: Range,
    /// Zero border around the image the window may reach into, as a fraction of the side.
    pub crop_pad: f64,
    pub cutout_p: f64,
    pub cutout_holes: Range,
    /// Hole side as a fraction of the image side.
    pub cutout_size: Range,
    pub brightness_p: f64,
    pub brightness: Range,
    pub saturation_p: f64,
    pub saturation: Range,
    pub contrast_p: f64,
    pub contrast: Range,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: Range,
    pub lowres_p: f64,
    pub lowres_factor: Range,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            affine_p: 0.1,
            affine_scale: Range::new(0.9, 1.1),
            affine_rotation: Range::new(-10.0, 10.0),
            affine_translate: Range::new(-0.1, 0.1),
            crop_p: 0.1,
            crop_area: Range::new(0.8, 1.0),
            crop_aspect: Range::new(0.75, 1.0 / 0.75),
            crop_pad: 0.1,
            cutout_p: 0.1,
            cutout_holes: Range::new(1.0, 3.0),
            cutout_size: Range::new(0.1, 0.3),
            brightness_p: 0.1,
            brightness: Range::new(0.8, 1.2),
            saturation_p: 0.1,
            saturation: Range::new(0.8, 1.2),
            contrast_p: 0.1,
            contrast: Range::new(0.8, 1.2),
            grayscale_p: 0.1,
            blur_p: 0.1,
            blur_sigma: Range::new(0.5, 1.5),
            lowres_p: 0.1,
            lowres_factor: Range::new(2.0, 4.0),
        }
    }
}

impl AugmentSpec {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        Self {
            affine_p: 0.0,
            crop_p: 0.0,
            cutout_p: 0.0,
            brightness_p: 0.0,
            saturation_p: 0.0,
            contrast_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            lowres_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("affine_p", self.affine_p),
            ("crop_p", self.crop_p),
            ("cutout_p", self.cutout_p),
            ("brightness_p", self.brightness_p),
            ("saturation_p", self.saturation_p),
            ("contrast_p", self.contrast_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("lowres_p", self.lowres_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        let big = f64::MAX;
        self.affine_scale
            .check("affine_scale", f64::MIN_POSITIVE, big)?;
        self.affine_rotation
            .check("affine_rotation", -180.0, 180.0)?;
        self.affine_translate.check("affine_translate", -1.0, 1.0)?;
        self.crop_area.check("crop_area", f64::MIN_POSITIVE, 1.0)?;
        self.crop_aspect
            .check("crop_aspect", f64::MIN_POSITIVE, big)?;
        self.cutout_holes.check("cutout_holes", 0.0, 64.0)?;
        self.cutout_size.check("cutout_size", 0.0, 1.0)?;
        self.brightness.check("brightness", 0.0, big)?;
        self.saturation.check("saturation", 0.0, big)?;
        self.contrast.check("contrast", 0.0, big)?;
        self.blur_sigma.check("blur_sigma", 0.0, 16.0)?;
        self.lowres_factor.check("lowres_factor", 1.0, 64.0)?;
        if !(0.0..=1.0).contains(&self.crop_pad) {
            return Err(Error::config(format!(
                "crop_pad = {} must lie in [0, 1]",
                self.crop_pad
            )));
        }
        Ok(())
    }
}

/// Float working copy, `[H, W, C]`.
#[derive(Clone)]
struct Buf {
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f32>,
}

impl Buf {
    fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.v[(y * self.w + x) * self.c + ch]
    }

    /// Bilinear lookup at continuous pixel coordinates (centers on integers).
    /// Outside neighbours read as zero, or as the nearest edge when `clamp`.
    fn bilinear(&self, y: f64, x: f64, ch: usize, clamp: bool) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let tap = |yy: f64, xx: f64| -> f32 {
            if clamp {
                let yy = yy.clamp(0.0, (self.h - 1) as f64) as usize;
                let xx = xx.clamp(0.0, (self.w - 1) as f64) as usize;
                self.at(yy, xx, ch)
            } else if yy < 0.0 || xx < 0.0 || yy >= self.h as f64 || xx >= self.w as f64 {
                0.0
            } else {
                self.at(yy as usize, xx as usize, ch)
            }
        };
        let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1.0) * fx;
        let bottom = tap(y0 + 1.0, x0) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Fills an `h × w` image by sampling source coordinates from `map`.
    fn resample(
        &self,
        h: usize,
        w: usize,
        clamp: bool,
        map: impl Fn(f64, f64) -> (f64, f64),
    ) -> Buf {
        let mut v = Vec::with_capacity(h * w * self.c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y as f64, x as f64);
                for ch in 0..self.c {
                    v.push(self.bilinear(sy, sx, ch, clamp));
                }
            }
        }
        Buf { h, w, c: self.c, v }
    }

    fn clamp_levels(&mut self) {
        for v in &mut self.v {
            *v = v.clamp(0.0, 255.0);
        }
    }

    fn luma(&self, i: usize) -> f32 {
        let p = &self.v[i * 3..i * 3 + 3];
        LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
    }

    /// Separable convolution with edge replication.
    fn convolve(&self, kernel: &[f32]) -> Buf {
        let r = (kernel.len() / 2) as isize;
        let mut tmp = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = 0.0;
                    for (k, &wt) in kernel.iter().enumerate() {
                        let xx = (x as isize + k as isize - r).clamp(0, self.w as isize - 1);
                        acc += wt * self.at(y, xx as usize, ch);
                    }
                    tmp.v[(y * self.w + x) * self.c + ch] = acc;
                }
            }
        }
        let mut out = tmp.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = 0.0;
                    for (k, &wt) in kernel.iter().enumerate() {
                        let yy = (y as isize + k as isize - r).clamp(0, self.h as isize - 1);
                        acc += wt * tmp.at(yy as usize, x, ch);
                    }
                    out.v[(y * self.w + x) * self.c + ch] = acc;
                }
            }
        }
        out
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Gaussian blur with edge replication; `sigma <= 0` is the identity.
pub(crate) fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    to_image(&from_image(image).convolve(&gaussian_kernel(sigma)))
}

/// Bilinear downscale by `factor` then bilinear upscale back.
pub(crate) fn low_resolution(image: &Image, factor: f64) -> Image {
    to_image(&downscale_upscale(&from_image(image), factor))
}

fn downscale_upscale(buf: &Buf, factor: f64) -> Buf {
    let factor = factor.max(1.0);
    let sh = ((buf.h as f64 / factor).round() as usize).max(1);
    let sw = ((buf.w as f64 / factor).round() as usize).max(1);
    let (ry, rx) = (buf.h as f64 / sh as f64, buf.w as f64 / sw as f64);
    let small = buf.resample(sh, sw, true, |y, x| {
        ((y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5)
    });
    small.resample(buf.h, buf.w, true, |y, x| {
        ((y + 0.5) / ry - 0.5, (x + 0.5) / rx - 0.5)
    })
}

fn from_image(image: &Image) -> Buf {
    Buf {
        h: image.height(),
        w: image.width(),
        c: image.channels(),
        v: image.data().iter().map(|&b| b as f32).collect(),
    }
}

fn to_image(buf: &Buf) -> Image {
    let data = buf
        .v
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(buf.h, buf.w, buf.c, data).expect("buffer geometry is valid")
}

fn coin(rng: &mut ChaCha8Rng, p: f64) -> bool {
    let u: f64 = rng.random();
    u < p
}

/// Applies the augmentation chain, deterministic in `(image, spec, seed)`.
pub fn augment(image: &Image, spec: &AugmentSpec, seed: u64) -> Image {
    if !spec.enabled {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = from_image(image);
    let (h, w) = (buf.h as f64, buf.w as f64);

    if coin(&mut rng, spec.affine_p) {
        let scale = spec.affine_scale.sample(&mut rng).max(1e-3);
        let angle = spec.affine_rotation.sample(&mut rng).to_radians();
        let ty = spec.affine_translate.sample(&mut rng) * h;
        let tx = spec.affine_translate.sample(&mut rng) * w;
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
        buf = buf.resample(buf.h, buf.w, false, |y, x| {
            let (dy, dx) = ((y - cy - ty) / scale, (x - cx - tx) / scale);
            (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
        });
    }

    if coin(&mut rng, spec.crop_p) {
        let area = spec.crop_area.sample(&mut rng).clamp(1e-3, 1.0);
        let (alo, ahi) = (
            spec.crop_aspect.lo.max(1e-3).ln(),
            spec.crop_aspect.hi.max(1e-3).ln(),
        );
        let aspect = Range::new(alo, ahi.max(alo)).sample(&mut rng).exp();
        let ch = (h * (area / aspect).sqrt()).max(1.0);
        let cw = (w * (area * aspect).sqrt()).max(1.0);
        let (py, px) = (spec.crop_pad * h, spec.crop_pad * w);
        let y0 = Range::new(-py, (h + py - ch).max(-py)).sample(&mut rng);
        let x0 = Range::new(-px, (w + px - cw).max(-px)).sample(&mut rng);
        let (ry, rx) = (ch / h, cw / w);
        buf = buf.resample(buf.h, buf.w, false, |y, x| {
            (y0 + (y + 0.5) * ry - 0.5, x0 + (x + 0.5) * rx - 0.5)
        });
    }

    if coin(&mut rng, spec.cutout_p) {
        let holes = spec.cutout_holes.sample(&mut rng).round().max(0.0) as usize;
        for _ in 0..holes {
            let side = spec.cutout_size.sample(&mut rng).clamp(0.0, 1.0);
            let (hh, hw) = ((side * h).round() as usize, (side * w).round() as usize);
            let cy = rng.random_range(0..buf.h);
            let cx = rng.random_range(0..buf.w);
            let (y0, x0) = (cy.saturating_sub(hh / 2), cx.saturating_sub(hw / 2));
            for y in y0..(y0 + hh).min(buf.h) {
                for x in x0..(x0 + hw).min(buf.w) {
                    let i = (y * buf.w + x) * buf.c;
                    buf.v[i..i + buf.c].fill(0.0);
                }
            }
        }
    }

    if coin(&mut rng, spec.brightness_p) {
        let f = spec.brightness.sample(&mut rng).max(0.0) as f32;
        buf.v.iter_mut().for_each(|v| *v *= f);
        buf.clamp_levels();
    }

    if coin(&mut rng, spec.saturation_p) {
        let f = spec.saturation.sample(&mut rng).max(0.0) as f32;
        if buf.c == 3 {
            for i in 0..buf.h * buf.w {
                let g = buf.luma(i);
                buf.v[i * 3..i * 3 + 3]
                    .iter_mut()
                    .for_each(|v| *v = g + f * (*v - g));
            }
            buf.clamp_levels();
        }
    }

    if coin(&mut rng, spec.contrast_p) {
        let f = spec.contrast.sample(&mut rng).max(0.0) as f32;
        let n = buf.h * buf.w;
        let mean = if buf.c == 3 {
            (0..n).map(|i| buf.luma(i) as f64).sum::<f64>() / n as f64
        } else {
            buf.v.iter().map(|&v| v as f64).sum::<f64>() / n as f64
        } as f32;
        buf.v.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
        buf.clamp_levels();
    }

    if coin(&mut rng, spec.grayscale_p) && buf.c == 3 {
        for i in 0..buf.h * buf.w {
            let g = buf.luma(i).round();
            buf.v[i * 3..i * 3 + 3].fill(g);
        }
    }

    if coin(&mut rng, spec.blur_p) {
        let box_filter = rng.random_bool(0.5);
        let sigma = spec.blur_sigma.sample(&mut rng).max(0.0);
        if box_filter {
            let k = 2 * sigma.round().max(1.0) as usize + 1;
            buf = buf.convolve(&vec![1.0 / k as f32; k]);
        } else if sigma > 0.0 {
            buf = buf.convolve(&gaussian_kernel(sigma));
        }
    }

    if coin(&mut rng, spec.lowres_p) {
        let factor = spec.lowres_factor.sample(&mut rng);
        buf = downscale_upscale(&buf, factor);
    }

    to_image(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Image {
        let data = (0..8 * 8 * 3).map(|i| ((i * 37) % 256) as u8).collect();
        Image::new(8, 8, 3, data).unwrap()
    }

    fn only(f: impl FnOnce(&mut AugmentSpec)) -> AugmentSpec {
        let mut s = AugmentSpec::none();
        f(&mut s);
        s
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = sample_image();
        for seed in 0..10 {
            assert_eq!(augment(&img, &AugmentSpec::none(), seed), img);
        }
    }

    #[test]
    fn grayscale_uses_rounded_luma() {
        let img = sample_image();
        let out = augment(&img, &only(|s| s.grayscale_p = 1.0), 3);
        for (src, dst) in img.data().chunks(3).zip(out.data().chunks(3)) {
            let l = 0.299 * src[0] as f64 + 0.587 * src[1] as f64 + 0.114 * src[2] as f64;
            assert_eq!(dst[0], dst[1]);
            assert_eq!(dst[1], dst[2]);
            assert!(
                (dst[0] as f64 - l).abs() <= 0.5 + 1e-4,
                "{src:?} -> {dst:?}"
            );
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let img = sample_image();
        let spec = only(|s| {
            s.affine_p = 1.0;
            s.crop_p = 1.0;
            s.cutout_p = 1.0;
            s.blur_p = 1.0;
            s.lowres_p = 1.0;
        });
        assert_eq!(augment(&img, &spec, 42), augment(&img, &spec, 42));
        assert_ne!(augment(&img, &spec, 42), augment(&img, &spec, 43));
    }

    #[test]
    fn cutout_only_zeroes() {
        let img = Image::filled(10, 10, 3, 200).unwrap();
        let out = augment(&img, &only(|s| s.cutout_p = 1.0), 1);
        assert!(out.data().iter().all(|&v| v == 0 || v == 200));
        assert!(out.data().contains(&0));
    }

    #[test]
    fn identity_affine_preserves_image() {
        let img = sample_image();
        let spec = only(|s| {
            s.affine_p = 1.0;
            s.affine_scale = Range::new(1.0, 1.0);
            s.affine_rotation = Range::new(0.0, 0.0);
            s.affine_translate = Range::new(0.0, 0.0);
        });
        assert_eq!(augment(&img, &spec, 9), img);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(6, 6, 1, 77).unwrap();
        let spec = only(|s| {
            s.blur_p = 1.0;
            s.lowres_p = 1.0;
        });
        for seed in 0..8 {
            assert_eq!(augment(&img, &spec, seed), img);
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        assert!(only(|s| s.blur_p = 1.5).validate().is_err());
        assert!(only(|s| s.contrast = Range::new(1.2, 0.8))
            .validate()
            .is_err());
    }
}
