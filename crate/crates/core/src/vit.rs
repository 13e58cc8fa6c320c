//! Vision Transformer backbone with an optional learnable quality token.
//!
//! The assembled input sequence is `[q₀ + p₀; e₁ + p₁; …; e_N + p_N]` for the
//! token variant and `[e₁ + p₁; …; e_N + p_N]` for the embedding variant. Each
//! encoder layer is pre-norm: `u = z + MSA(LN(z))`, `out = u + FFN(LN(u))`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Where the predicted quality is regressed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dedicated quality token prepended to the patch tokens ("T").
    QualityToken,
    /// No extra token; quality is regressed from the face embedding ("C").
    Embedding,
}

impl Variant {
    pub fn has_quality_token(self) -> bool {
        matches!(self, Variant::QualityToken)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::QualityToken => "T",
            Variant::Embedding => "C",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" => Ok(Variant::QualityToken),
            "C" | "c" => Ok(Variant::Embedding),
            other => Err(Error::config(format!(
                "variant must be T or C, got {other:?}"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    /// ViT-Small at 112×112 with 16-pixel patches.
    fn default() -> Self {
        Self {
            height: 112,
            width: 112,
            channels: 3,
            patch: 16,
            dim: 384,
            heads: 6,
            layers: 12,
            ffn_width: 1536,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// The small configuration used for gradient checks and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            patch: 8,
            dim: 16,
            heads: 2,
            layers: 2,
            ffn_width: 64,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "patch size {} must divide image size {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Flattened patch length, P·P·C.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Sequence length for a variant: N+1 with the quality token, N without.
    pub fn seq_len(&self, variant: Variant) -> usize {
        self.num_patches() + usize::from(variant.has_quality_token())
    }
}

/// Splits an H×W×C image into N row-major patches of P·P·C values each.
///
/// Row k holds the patch at grid position (k / (W/P), k % (W/P)); within a
/// patch, pixels are scanned row-major with channels interleaved.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let expected = [cfg.height, cfg.width, cfg.channels];
    if image.shape() != expected {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let (gh, gw) = cfg.grid();
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.width);
    let px = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let start = ((gy * p + dy) * w + gx * p) * c;
                out.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, cfg.patch_len()], out)
}

/// Weights of one encoder layer. Attention projections are fused D×D
/// matrices whose column blocks are the per-head projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
}

pub(crate) const LAYER_FIELDS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln2.gain",
    "ln2.bias",
    "ffn.w_in",
    "ffn.b_in",
    "ffn.w_out",
    "ffn.b_out",
];

impl<T: Scalar> LayerParams<T> {
    pub(crate) fn fields(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
        ]
    }
}

/// Learnable backbone weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    /// (P·P·C)×D projection producing the patch embeddings e_i.
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    /// Positional rows p₀…p_N (token variant) or p₁…p_N (embedding variant).
    pub positions: Tensor<T>,
    /// q₀, present only for the token variant.
    pub quality_token: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
}

/// Tape handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_in: Var,
    pub ffn_in_bias: Var,
    pub ffn_out: Var,
    pub ffn_out_bias: Var,
}

impl LayerVars {
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        Self {
            ln1_gain: v[0],
            ln1_bias: v[1],
            w_q: v[2],
            w_k: v[3],
            w_v: v[4],
            w_o: v[5],
            ln2_gain: v[6],
            ln2_bias: v[7],
            ffn_in: v[8],
            ffn_in_bias: v[9],
            ffn_out: v[10],
            ffn_out_bias: v[11],
        }
    }
}

/// Tape handles for the backbone.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub positions: Var,
    pub quality_token: Option<Var>,
    pub layers: Vec<LayerVars>,
}

/// Output of one encoder layer, with the per-head attention matrices.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Output of [`backbone_forward`].
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// z₀⁽ᴸ⁾ as a 1×D row (token variant only).
    pub quality_state: Option<Var>,
    /// N×D patch states z₁⁽ᴸ⁾…z_N⁽ᴸ⁾.
    pub patch_states: Var,
    /// Attention matrices indexed `[layer][head]`, each S×S.
    pub attention: Vec<Vec<Var>>,
}

/// Builds the input token sequence from flattened patches.
pub fn embed_and_assemble<T: Scalar>(
    tape: &mut Tape<T>,
    patches: Var,
    vars: &BackboneVars,
    cfg: &ViTConfig,
    variant: Variant,
) -> Result<Var> {
    let n = cfg.num_patches();
    let projected = tape.matmul(patches, vars.patch_weight)?;
    let embedded = tape.add_row_bias(projected, vars.patch_bias)?;
    if tape.value(embedded).rows() != n {
        return Err(Error::Dimension {
            op: "embed_and_assemble",
            lhs: tape.shape(patches).to_vec(),
            rhs: vec![n, cfg.patch_len()],
        });
    }
    match (variant, vars.quality_token) {
        (Variant::QualityToken, Some(q0)) => {
            let p0 = tape.slice_rows(vars.positions, 0, 1)?;
            let rest = tape.slice_rows(vars.positions, 1, n + 1)?;
            let patch_tokens = tape.add(embedded, rest)?;
            let q_row = tape.add(q0, p0)?;
            tape.concat_rows(&[q_row, patch_tokens])
        }
        (Variant::Embedding, None) => tape.add(embedded, vars.positions),
        (v, _) => Err(Error::contract(format!(
            "backbone parameters do not match variant {v}"
        ))),
    }
}

/// Multi-head self-attention over every token of the sequence.
///
/// Per head: αᵢⱼ = softmaxⱼ(qᵢ·kⱼ / √d_h), z̃ᵢ = Σⱼ αᵢⱼ vⱼ; heads are
/// concatenated and projected by W_O.
pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    layer: &LayerVars,
    heads: usize,
) -> Result<LayerOutput> {
    let dim = tape.value(seq).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{heads} heads do not divide dim {dim}"
        )));
    }
    let dh = dim / heads;
    let q = tape.matmul(seq, layer.w_q)?;
    let k = tape.matmul(seq, layer.w_k)?;
    let v = tape.matmul(seq, layer.w_v)?;
    let inv_sqrt = T::one() / T::cst(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, inv_sqrt);
        let alpha = tape.softmax_lastdim(scaled);
        outs.push(tape.matmul(alpha, vh)?);
        attention.push(alpha);
    }
    let merged = tape.concat_cols(&outs)?;
    let tokens = tape.matmul(merged, layer.w_o)?;
    Ok(LayerOutput { tokens, attention })
}

/// Pre-norm encoder layer with a GELU feed-forward block.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    layer: &LayerVars,
    cfg: &ViTConfig,
) -> Result<LayerOutput> {
    let eps = T::cst(cfg.ln_eps);
    let normed = tape.layer_norm(seq, layer.ln1_gain, layer.ln1_bias, eps)?;
    let attn = mhsa(tape, normed, layer, cfg.heads)?;
    let u = tape.add(seq, attn.tokens)?;
    let normed = tape.layer_norm(u, layer.ln2_gain, layer.ln2_bias, eps)?;
    let hidden = tape.matmul(normed, layer.ffn_in)?;
    let hidden = tape.add_row_bias(hidden, layer.ffn_in_bias)?;
    let hidden = tape.gelu(hidden);
    let ffn = tape.matmul(hidden, layer.ffn_out)?;
    let ffn = tape.add_row_bias(ffn, layer.ffn_out_bias)?;
    let tokens = tape.add(u, ffn)?;
    Ok(LayerOutput {
        tokens,
        attention: attn.attention,
    })
}

/// Runs every encoder layer over an assembled sequence and splits the result
/// into the quality lane and the patch lanes.
pub fn encode_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    vars: &BackboneVars,
    cfg: &ViTConfig,
    variant: Variant,
) -> Result<BackboneOutput> {
    let expected = cfg.seq_len(variant);
    let mut tokens = seq;
    let mut attention = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let out = encoder_layer(tape, tokens, layer, cfg)?;
        tokens = out.tokens;
        debug_assert_eq!(tape.value(tokens).rows(), expected);
        attention.push(out.attention);
    }
    let (quality_state, patch_states) = if variant.has_quality_token() {
        let q = tape.slice_rows(tokens, 0, 1)?;
        let p = tape.slice_rows(tokens, 1, expected)?;
        (Some(q), p)
    } else {
        (None, tokens)
    };
    Ok(BackboneOutput {
        quality_state,
        patch_states,
        attention,
    })
}

/// patchify → embed_and_assemble → L encoder layers.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    vars: &BackboneVars,
    cfg: &ViTConfig,
    variant: Variant,
) -> Result<BackboneOutput> {
    let patches = patchify(image, cfg)?;
    let patches = tape.constant(patches);
    let seq = embed_and_assemble(tape, patches, vars, cfg, variant)?;
    encode_sequence(tape, seq, vars, cfg, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let mut cfg = ViTConfig::default();
        assert_eq!(cfg.num_patches(), 49);
        assert_eq!(cfg.patch_len(), 768);
        cfg.patch = 8;
        assert_eq!(cfg.num_patches(), 196);
        cfg.patch = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::toy();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unit_patches_of_single_channel_image() {
        let cfg = ViTConfig {
            height: 2,
            width: 2,
            channels: 1,
            patch: 1,
            dim: 2,
            heads: 1,
            layers: 0,
            ffn_width: 2,
            ln_eps: 1e-6,
        };
        let img = Tensor::<f64>::from_f64(vec![2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patches_are_row_major_with_interleaved_channels() {
        let cfg = ViTConfig {
            height: 2,
            width: 4,
            channels: 2,
            patch: 2,
            dim: 2,
            heads: 1,
            layers: 0,
            ffn_width: 2,
            ln_eps: 1e-6,
        };
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let img = Tensor::new(vec![2, 4, 2], data).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // pixel (y, x) channel c sits at (y*4 + x)*2 + c
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(p.row(1), &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_wrong_shape() {
        let img = Tensor::<f32>::zeros(&[16, 8, 3]);
        assert!(matches!(
            patchify(&img, &ViTConfig::toy()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("T".parse::<Variant>().unwrap(), Variant::QualityToken);
        assert_eq!("C".parse::<Variant>().unwrap(), Variant::Embedding);
        assert!("X".parse::<Variant>().is_err());
        assert_eq!(Variant::Embedding.to_string(), "C");
    }
}
