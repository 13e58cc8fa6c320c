//! Batch inference over a manifest: face embeddings and quality scores.

use rayon::prelude::*;

use crate::data::{load_record, normalize, Manifest};
use crate::error::Result;
use crate::heads::sample_forward;
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tape};

/// Outputs for one manifest entry. `id` is the entry's manifest path.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub id: String,
    pub embedding: Vec<f64>,
    pub quality: f64,
}

/// Forward pass for a single normalized image.
pub fn infer_image<T: Scalar>(
    params: &ModelParams<T>,
    image: &crate::tensor::Tensor<T>,
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = sample_forward(&mut tape, image, &vars, &params.config, true)?;
    let embedding = tape
        .value(out.embedding)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let quality = tape
        .value(out.qhat.expect("quality requested"))
        .item()
        .as_f64();
    Ok((embedding, quality))
}

/// Runs every entry through the model. Results follow manifest order
/// regardless of how the work is scheduled.
pub fn infer_manifest<T: Scalar>(
    params: &ModelParams<T>,
    manifest: &Manifest,
) -> Result<Vec<Inference>> {
    let channels = params.config.vit.channels;
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let record = load_record(manifest, i)?;
            let pixels = if channels == 3 {
                record.pixels.to_rgb()
            } else {
                record.pixels
            };
            let (embedding, quality) = infer_image(params, &normalize::<T>(&pixels))?;
            Ok(Inference {
                id: manifest.entries()[i].path.clone(),
                embedding,
                quality,
            })
        })
        .collect()
}
