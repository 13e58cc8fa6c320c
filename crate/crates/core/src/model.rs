//! Full parameter set (backbone plus heads), initialization and binding onto a
//! tape.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};
use crate::vit::{
    BackboneParams, BackboneVars, LayerParams, LayerVars, Variant, ViTConfig, LAYER_FIELDS,
};

/// Named gradients, keyed like [`ModelParams::named`].
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

const INIT_STD: f64 = 0.02;

/// How the N patch states are reduced before the FR projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrPool {
    /// Flatten row-major to N·D, then one affine map.
    Flatten,
    /// Mean over patches, then an affine map from D.
    Mean,
}

impl fmt::Display for FrPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrPool::Flatten => "flatten",
            FrPool::Mean => "mean",
        })
    }
}

impl FromStr for FrPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "flatten" => Ok(FrPool::Flatten),
            "mean" => Ok(FrPool::Mean),
            other => Err(Error::config(format!(
                "fr_pool must be flatten or mean, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub variant: Variant,
    /// Face embedding width E.
    pub embed_dim: usize,
    /// Number of training identities K.
    pub num_classes: usize,
    pub fr_pool: FrPool,
    /// When false, p₀ stays at its zero initialization.
    pub pos0_trainable: bool,
}

impl ModelConfig {
    pub fn new(vit: ViTConfig, variant: Variant, num_classes: usize) -> Self {
        let embed_dim = vit.dim;
        Self {
            vit,
            variant,
            embed_dim,
            num_classes,
            fr_pool: FrPool::Flatten,
            pos0_trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 identities, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn fr_in_dim(&self) -> usize {
        match self.fr_pool {
            FrPool::Flatten => self.vit.num_patches() * self.vit.dim,
            FrPool::Mean => self.vit.dim,
        }
    }

    fn reg_in_dim(&self) -> usize {
        match self.variant {
            Variant::QualityToken => self.vit.dim,
            Variant::Embedding => self.embed_dim,
        }
    }
}

/// FR projection, quality regression and class-center weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub fr_weight: Tensor<T>,
    pub fr_bias: Tensor<T>,
    pub reg_weight: Tensor<T>,
    pub reg_bias: Tensor<T>,
    /// K×E margin-softmax weights; rows are normalized when used.
    pub centers: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<T>,
    pub heads: HeadParams<T>,
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub fr_weight: Var,
    pub fr_bias: Var,
    pub reg_weight: Var,
    pub reg_bias: Var,
    pub centers: Var,
    named: Vec<(String, Var)>,
}

fn truncated_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::cst(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

/// Gaussian directions scaled to unit length.
fn unit_rows<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| T::cst(v / norm)));
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches count")
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal (σ = 0.02) projections, positional rows and q₀; zero
    /// biases; unit layer-norm gains; p₀ = 0; unit-norm class centers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = &config.vit;
        let (d, f) = (v.dim, v.ffn_width);
        let token = config.variant.has_quality_token();

        let patch_weight = truncated_normal(&mut rng, &[v.patch_len(), d]);
        let mut positions = truncated_normal::<T>(&mut rng, &[v.seq_len(config.variant), d]);
        if token {
            positions.data_mut()[..d].fill(T::zero());
        }
        let quality_token = token.then(|| truncated_normal(&mut rng, &[1, d]));
        let layers = (0..v.layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: truncated_normal(&mut rng, &[d, d]),
                w_k: truncated_normal(&mut rng, &[d, d]),
                w_v: truncated_normal(&mut rng, &[d, d]),
                w_o: truncated_normal(&mut rng, &[d, d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_in: truncated_normal(&mut rng, &[d, f]),
                ffn_in_bias: Tensor::zeros(&[f]),
                ffn_out: truncated_normal(&mut rng, &[f, d]),
                ffn_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let e = config.embed_dim;
        let heads = HeadParams {
            fr_weight: truncated_normal(&mut rng, &[config.fr_in_dim(), e]),
            fr_bias: Tensor::zeros(&[e]),
            reg_weight: truncated_normal(&mut rng, &[config.reg_in_dim(), 1]),
            reg_bias: Tensor::zeros(&[1]),
            centers: unit_rows(&mut rng, config.num_classes, e),
        };
        Ok(Self {
            backbone: BackboneParams {
                patch_weight,
                patch_bias: Tensor::zeros(&[d]),
                positions,
                quality_token,
                layers,
            },
            heads,
            config,
        })
    }

    /// Every learnable tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let b = &self.backbone;
        let mut out = vec![
            ("patch_embed.weight".to_string(), &b.patch_weight),
            ("patch_embed.bias".to_string(), &b.patch_bias),
            ("pos_embed".to_string(), &b.positions),
        ];
        if let Some(q) = &b.quality_token {
            out.push(("quality_token".to_string(), q));
        }
        for (i, layer) in b.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        let h = &self.heads;
        out.extend([
            ("fr_head.weight".to_string(), &h.fr_weight),
            ("fr_head.bias".to_string(), &h.fr_bias),
            ("reg_head.weight".to_string(), &h.reg_weight),
            ("reg_head.bias".to_string(), &h.reg_bias),
            ("class_centers".to_string(), &h.centers),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let b = &mut self.backbone;
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut b.patch_weight),
            ("patch_embed.bias".to_string(), &mut b.patch_bias),
            ("pos_embed".to_string(), &mut b.positions),
        ];
        if let Some(q) = &mut b.quality_token {
            out.push(("quality_token".to_string(), q));
        }
        for (i, layer) in b.layers.iter_mut().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        let h = &mut self.heads;
        out.extend([
            ("fr_head.weight".to_string(), &mut h.fr_weight),
            ("fr_head.bias".to_string(), &mut h.fr_bias),
            ("reg_head.weight".to_string(), &mut h.reg_weight),
            ("reg_head.bias".to_string(), &mut h.reg_bias),
            ("class_centers".to_string(), &mut h.centers),
        ]);
        out
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let named: Vec<(String, Var)> = self
            .named()
            .into_iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name, v)
            })
            .collect();
        let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
        let token = self.backbone.quality_token.is_some();
        let head = 3 + usize::from(token);
        let layers = vars[head..]
            .chunks(LAYER_FIELDS.len())
            .take(self.backbone.layers.len())
            .map(LayerVars::from_slice)
            .collect();
        let h = &vars[vars.len() - 5..];
        ModelVars {
            backbone: BackboneVars {
                patch_weight: vars[0],
                patch_bias: vars[1],
                positions: vars[2],
                quality_token: token.then(|| vars[3]),
                layers,
            },
            fr_weight: h[0],
            fr_bias: h[1],
            reg_weight: h[2],
            reg_bias: h[3],
            centers: h[4],
            named,
        }
    }

    /// Flattened copy of every parameter in [`named`](Self::named) order.
    pub fn flatten(&self) -> Vec<T> {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_elements() {
            return Err(Error::Dimension {
                op: "set_flat",
                lhs: vec![flat.len()],
                rhs: vec![self.num_elements()],
            });
        }
        let mut offset = 0;
        for (_, t) in self.named_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let layers = self
            .backbone
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_gain: l.ln1_gain.cast(),
                ln1_bias: l.ln1_bias.cast(),
                w_q: l.w_q.cast(),
                w_k: l.w_k.cast(),
                w_v: l.w_v.cast(),
                w_o: l.w_o.cast(),
                ln2_gain: l.ln2_gain.cast(),
                ln2_bias: l.ln2_bias.cast(),
                ffn_in: l.ffn_in.cast(),
                ffn_in_bias: l.ffn_in_bias.cast(),
                ffn_out: l.ffn_out.cast(),
                ffn_out_bias: l.ffn_out_bias.cast(),
            })
            .collect();
        let b = &self.backbone;
        let h = &self.heads;
        ModelParams {
            config: self.config.clone(),
            backbone: BackboneParams {
                patch_weight: b.patch_weight.cast(),
                patch_bias: b.patch_bias.cast(),
                positions: b.positions.cast(),
                quality_token: b.quality_token.as_ref().map(Tensor::cast),
                layers,
            },
            heads: HeadParams {
                fr_weight: h.fr_weight.cast(),
                fr_bias: h.fr_bias.cast(),
                reg_weight: h.reg_weight.cast(),
                reg_bias: h.reg_bias.cast(),
                centers: h.centers.cast(),
            },
        }
    }

    /// Rebuilds a parameter set from named tensors, checking every name and shape.
    pub fn from_named(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        for (name, slot) in params.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }
}

impl ModelVars {
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }

    /// Collects the gradient of every bound parameter reachable from the loss.
    ///
    /// With `pos0_trainable` off, the p₀ row of the positional gradient is zeroed.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &Gradients<T>,
        pos0_trainable: bool,
    ) -> ParamGrads<T> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.named {
            if let Some(g) = grads.get(*v) {
                let mut g = g.clone();
                if name == "pos_embed" && !pos0_trainable && self.backbone.quality_token.is_some() {
                    let d = g.cols();
                    g.data_mut()[..d].fill(T::zero());
                }
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Deterministic per-purpose seed derivation.
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.random()
}
