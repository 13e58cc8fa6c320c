//! Image ingestion, augmentation, the synthetic identity generator and batch
//! loading.

mod augment;
mod manifest;
mod ppm;
mod synth;

pub use augment::{augment, AugmentSpec, Range};
pub use manifest::{load_batch, load_record, Batch, Manifest, ManifestEntry, Sampler, Split};
pub use ppm::{parse_ppm, read_ppm, write_ppm, write_ppm_file};
pub use synth::{laplacian_energy, synth_generate, DegradationDist, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit image stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::contract(format!(
                "image must be nonempty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Replicates a gray image into three channels; color images pass through.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }
}

/// One decoded sample with its label and, for synthetic data, its severity.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Image,
    pub identity: usize,
    pub degradation: Option<f64>,
    pub source_path: String,
}

/// Maps 8-bit values to [−1, 1] via `v / 127.5 − 1`, shaped `[H, W, C]`.
pub fn normalize<T: Scalar>(image: &Image) -> Tensor<T> {
    let data = image
        .data
        .iter()
        .map(|&v| T::cst(v as f64 / 127.5 - 1.0))
        .collect();
    Tensor::new(vec![image.height, image.width, image.channels], data)
        .expect("image extents are nonzero")
}

/// Inverse of [`normalize`], rounding to the nearest level and clamping.
pub fn denormalize<T: Scalar>(tensor: &Tensor<T>) -> Result<Image> {
    let &[h, w, c] = tensor.shape() else {
        return Err(Error::contract(format!(
            "expected [H, W, C] tensor, got {:?}",
            tensor.shape()
        )));
    };
    let data = tensor
        .data()
        .iter()
        .map(|v| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(h, w, c, data)
}
