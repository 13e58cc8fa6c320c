//! Procedural identity dataset with controllable degradation.
//!
//! Each identity owns a prototype made of a few random-phase 2-D sinusoids
//! per channel. Samples add a faint low-frequency jitter, then degrade with
//! severity δ: Gaussian blur, a downscale/upscale round trip and additive
//! noise, all growing with δ.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{gaussian_blur, low_resolution};
use super::manifest::{Manifest, ManifestEntry, Split};
use super::ppm::write_ppm_file;
use super::Image;
use crate::error::{Error, Result};
use crate::model::derive_seed;

const PROTOTYPE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationDist {
    Uniform { lo: f64, hi: f64 },
    Fixed(f64),
}

impl DegradationDist {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DegradationDist::Uniform { lo, hi } if hi > lo => rng.random_range(lo..=hi),
            DegradationDist::Uniform { lo, .. } => lo,
            DegradationDist::Fixed(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub per_identity: usize,
    pub size: usize,
    pub degradation: DegradationDist,
    pub seed: u64,
    /// Sinusoids per channel in a prototype.
    pub components: usize,
    /// Peak amplitude, in 8-bit levels, of the per-sample jitter.
    pub jitter: f64,
    /// Blur σ at δ = 1, as a fraction of the image side.
    pub max_blur: f64,
    /// Downscale factor at δ = 1.
    pub max_downscale: f64,
    /// Peak noise amplitude in levels at δ = 1.
    pub max_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 10,
            per_identity: 20,
            size: 16,
            degradation: DegradationDist::Uniform { lo: 0.0, hi: 1.0 },
            seed: 0,
            components: 4,
            jitter: 80.0,
            max_blur: 0.3,
            max_downscale: 8.0,
            max_noise: 3.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::config("need ≥ 2 identities"));
        }
        if self.per_identity < 2 {
            return Err(Error::config("need ≥ 2 images per identity"));
        }
        if self.size < 2 {
            return Err(Error::config("image size must be at least 2"));
        }
        if self.components == 0 {
            return Err(Error::config("prototype needs at least one component"));
        }
        let ok = match self.degradation {
            DegradationDist::Uniform { lo, hi } => 0.0 <= lo && lo <= hi && hi <= 1.0,
            DegradationDist::Fixed(d) => (0.0..=1.0).contains(&d),
        };
        if !ok {
            return Err(Error::config("degradation must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Identity prototype as `[H, W, 3]` levels in [0, 255].
    pub fn prototype(&self, identity: usize) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PROTOTYPE_STREAM, identity as u64));
        let s = self.size;
        let mut out = vec![0.0; s * s * 3];
        for c in 0..3 {
            let waves: Vec<[f64; 4]> = (0..self.components)
                .map(|_| {
                    [
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(0.0..TAU),
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            let mut chan: Vec<f64> = (0..s * s)
                .map(|i| {
                    let (y, x) = ((i / s) as f64 / s as f64, (i % s) as f64 / s as f64);
                    waves
                        .iter()
                        .map(|[fy, fx, ph, a]| a * (TAU * (fy * y + fx * x) + ph).sin())
                        .sum()
                })
                .collect();
            let lo = chan.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = chan.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            chan.iter_mut().for_each(|v| *v = (*v - lo) / span * 255.0);
            for (i, v) in chan.into_iter().enumerate() {
                out[i * 3 + c] = v;
            }
        }
        out
    }

    /// Renders sample `index` of `identity`, returning the image and its δ.
    pub fn sample(&self, identity: usize, index: usize, prototype: &[f64]) -> (Image, f64) {
        let key = (identity * self.per_identity + index) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, SAMPLE_STREAM, key));
        let delta = self.degradation.sample(&mut rng).clamp(0.0, 1.0);
        let s = self.size;
        let (fy, fx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let phase = rng.random_range(0.0..TAU);
        let amp = rng.random_range(-self.jitter..=self.jitter);
        let clean: Vec<u8> = prototype
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let px = i / 3;
                let (y, x) = ((px / s) as f64 / s as f64, (px % s) as f64 / s as f64);
                let j = amp * (TAU * (fy * y + fx * x) + phase).sin();
                (p + j).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        let mut img = Image::new(s, s, 3, clean).expect("synthetic geometry");
        if delta > 0.0 {
            // Noise goes in first so the blur and resampling smooth it; added
            // last it would raise high-frequency energy at large δ.
            let amp = delta * self.max_noise;
            let noisy = img
                .data()
                .iter()
                .map(|&v| {
                    (v as f64 + rng.random_range(-amp..=amp))
                        .round()
                        .clamp(0.0, 255.0) as u8
                })
                .collect();
            img = Image::new(s, s, 3, noisy).expect("synthetic geometry");
            img = low_resolution(&img, 1.0 + delta * (self.max_downscale - 1.0));
            img = gaussian_blur(&img, delta * self.max_blur * s as f64);
        }
        (img, delta)
    }
}

/// Writes `images/{identity}_{index}.ppm` under `out_dir` plus
/// `manifest.csv`, returning the manifest.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(spec.identities * spec.per_identity);
    for k in 0..spec.identities {
        let proto = spec.prototype(k);
        for i in 0..spec.per_identity {
            let (img, delta) = spec.sample(k, i, &proto);
            let rel = format!("images/{k:04}_{i:04}.ppm");
            write_ppm_file(&out_dir.join(&rel), &img)?;
            entries.push(ManifestEntry {
                path: rel,
                identity: k,
                degradation: Some(delta),
            });
        }
    }
    let manifest = Manifest::new(entries, Split::Train, out_dir.to_path_buf())?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Mean absolute 4-neighbour Laplacian over interior pixels and channels.
pub fn laplacian_energy(image: &Image) -> f64 {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let v = |yy: usize, xx: usize| image.get(yy, xx, ch) as f64;
                total +=
                    (v(y - 1, x) + v(y + 1, x) + v(y, x - 1) + v(y, x + 1) - 4.0 * v(y, x)).abs();
            }
        }
    }
    total / ((h - 2) * (w - 2) * c) as f64
}
