//! Output branches and the joint objective `L = L_FR + λ·L_FIQ`.
//!
//! The FR branch projects the patch states to a face embedding scored by a
//! CosFace margin softmax against normalized class centers. The quality
//! branch regresses q̂ from z₀⁽ᴸ⁾ (token variant) or from the face embedding
//! (embedding variant), trained with Smooth-L1 towards the detached
//! classifiability target `CCS / (NNCCS + 1 + ε)`.

use crate::error::{Error, Result};
use crate::model::{FrPool, ModelConfig, ModelVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::vit::{backbone_forward, Variant};

/// Norm floor below which an embedding or center counts as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// CosFace logit scale s.
    pub scale: f64,
    /// CosFace cosine margin m.
    pub margin: f64,
    /// Weight λ of the quality regression loss.
    pub lambda: f64,
    /// Smooth-L1 transition point β.
    pub beta: f64,
    /// Guard ε in the classifiability target denominator.
    pub eps: f64,
    /// Drop the quality branch entirely (FR-only objective).
    pub fr_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.35,
            lambda: 10.0,
            beta: 1.0,
            eps: 1e-4,
            fr_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config("scale s must be positive"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config("margin m must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be non-negative"));
        }
        if !(self.beta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("beta and eps must be positive"));
        }
        Ok(())
    }
}

/// One training example: a normalized H×W×C image and its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: usize,
}

/// Projects the patch states (N×D) to a 1×E face embedding.
pub fn fr_embed<T: Scalar>(
    tape: &mut Tape<T>,
    patch_states: Var,
    weight: Var,
    bias: Var,
    pool: FrPool,
) -> Result<Var> {
    let pooled = match pool {
        FrPool::Flatten => {
            let n = tape.value(patch_states).numel();
            tape.reshape(patch_states, vec![1, n])?
        }
        FrPool::Mean => tape.mean_rows(patch_states)?,
    };
    let projected = tape.matmul(pooled, weight)?;
    tape.add_row_bias(projected, bias)
}

/// Affine regression head producing one scalar per input row.
pub fn regress_quality<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let out = tape.matmul(input, weight)?;
    tape.add_row_bias(out, bias)
}

/// CosFace loss and the B×K cosine matrix it was computed from.
#[derive(Clone, Copy, Debug)]
pub struct CosFaceOutput {
    pub loss: Var,
    pub cosines: Var,
}

/// Mean CosFace cross-entropy with logits `s·(cos θ − m·onehot)`.
pub fn cosface_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    centers: Var,
    scale: f64,
    margin: f64,
) -> Result<CosFaceOutput> {
    let k = tape.value(centers).rows();
    let b = tape.value(embeddings).rows();
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "cosface_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let eps = T::cst(NORM_EPS);
    let emb = tape.l2_normalize_rows(embeddings, eps)?;
    let ctr = tape.l2_normalize_rows(centers, eps)?;
    let ctr_t = tape.transpose(ctr)?;
    let cosines = tape.matmul(emb, ctr_t)?;
    let mut margins = Tensor::zeros(&[b, k]);
    for (r, &l) in labels.iter().enumerate() {
        margins.data_mut()[r * k + l] = T::cst(margin);
    }
    let margins = tape.constant(margins);
    let shifted = tape.sub(cosines, margins)?;
    let logits = tape.scale(shifted, T::cst(scale));
    let loss = tape.cross_entropy(logits, labels)?;
    Ok(CosFaceOutput { loss, cosines })
}

/// Classifiability target from one row of sample-to-center cosines.
pub fn crfiq_from_cosines<T: Scalar>(cosines: &[T], label: usize, eps: f64) -> Result<T> {
    if cosines.len() < 2 {
        return Err(Error::config(
            "classifiability target needs at least 2 classes",
        ));
    }
    let ccs = *cosines
        .get(label)
        .ok_or_else(|| Error::contract(format!("label {label} out of range")))?;
    let nnccs = cosines
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &c)| c)
        .fold(T::neg_infinity(), T::max);
    Ok(ccs / (nnccs + T::one() + T::cst(eps)))
}

/// `CCS / (NNCCS + 1 + ε)` for one embedding against K class centers.
///
/// Computed from plain values, so it never carries gradient.
pub fn crfiq_target<T: Scalar>(
    embedding: &[T],
    label: usize,
    centers: &Tensor<T>,
    eps: f64,
) -> Result<T> {
    if centers.rows() < 2 {
        return Err(Error::config(
            "classifiability target needs at least 2 classes",
        ));
    }
    if centers.cols() != embedding.len() {
        return Err(Error::Dimension {
            op: "crfiq_target",
            lhs: vec![embedding.len()],
            rhs: centers.shape().to_vec(),
        });
    }
    let cosines = (0..centers.rows())
        .map(|k| cosine(embedding, centers.row(k)))
        .collect::<Result<Vec<_>>>()?;
    crfiq_from_cosines(&cosines, label, eps)
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let na = a.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let nb = b.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let floor = T::cst(NORM_EPS);
    if na < floor || nb < floor {
        return Err(Error::Degenerate {
            op: "cosine",
            norm: na.min(nb).as_f64(),
            eps: NORM_EPS,
        });
    }
    Ok(dot / (na * nb))
}

/// Scalar Smooth-L1: `0.5x²/β` for |x| < β, else `|x| − 0.5β`, with x = q̂ − target.
pub fn smooth_l1(prediction: f64, target: f64, beta: f64) -> f64 {
    let x = prediction - target;
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

/// Graph handles and detached values from one [`total_loss`] evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: Var,
    pub l_fr: Var,
    /// Absent when the objective is FR-only.
    pub l_fiq: Option<Var>,
    pub qhat: Vec<T>,
    pub target: Vec<T>,
    /// B×E face embeddings.
    pub embeddings: Var,
    /// Quality-branch predictions as a B×1 node, when built.
    pub qhat_var: Option<Var>,
}

/// Per-sample forward pass: face embedding row and quality prediction.
#[derive(Clone, Copy, Debug)]
pub struct SampleForward {
    pub embedding: Var,
    pub qhat: Option<Var>,
}

/// Runs the backbone and both heads for one image.
pub fn sample_forward<T: Scalar>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    with_quality: bool,
) -> Result<SampleForward> {
    let out = backbone_forward(tape, image, &vars.backbone, &config.vit, config.variant)?;
    let embedding = fr_embed(
        tape,
        out.patch_states,
        vars.fr_weight,
        vars.fr_bias,
        config.fr_pool,
    )?;
    let qhat = if with_quality {
        let input = match config.variant {
            Variant::QualityToken => out
                .quality_state
                .ok_or_else(|| Error::contract("token variant produced no quality state"))?,
            Variant::Embedding => embedding,
        };
        Some(regress_quality(
            tape,
            input,
            vars.reg_weight,
            vars.reg_bias,
        )?)
    } else {
        None
    };
    Ok(SampleForward { embedding, qhat })
}

/// Joint objective over a batch.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &[Sample<T>],
    vars: &ModelVars,
    config: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    total_loss_with_targets(tape, batch, vars, config, loss_cfg, None)
}

/// [`total_loss`] with the regression targets optionally pinned to given
/// values instead of being derived from the current cosines. Finite
/// differences of the detached objective need the pinned form.
pub fn total_loss_with_targets<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &[Sample<T>],
    vars: &ModelVars,
    config: &ModelConfig,
    loss_cfg: &LossConfig,
    pinned_targets: Option<&[T]>,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::contract("total_loss needs a nonempty batch"));
    }
    let with_quality = !loss_cfg.fr_only;
    let mut emb_rows = Vec::with_capacity(batch.len());
    let mut q_rows = Vec::with_capacity(batch.len());
    for sample in batch {
        let f = sample_forward(tape, &sample.image, vars, config, with_quality)?;
        emb_rows.push(f.embedding);
        q_rows.extend(f.qhat);
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let embeddings = tape.concat_rows(&emb_rows)?;
    let cos = cosface_loss(
        tape,
        embeddings,
        &labels,
        vars.centers,
        loss_cfg.scale,
        loss_cfg.margin,
    )?;
    let l_fr = cos.loss;

    if !with_quality {
        return Ok(LossOutput {
            loss: l_fr,
            l_fr,
            l_fiq: None,
            qhat: Vec::new(),
            target: Vec::new(),
            embeddings,
            qhat_var: None,
        });
    }

    let target = match pinned_targets {
        Some(t) if t.len() == batch.len() => t.to_vec(),
        Some(t) => {
            return Err(Error::Dimension {
                op: "total_loss",
                lhs: vec![batch.len()],
                rhs: vec![t.len()],
            })
        }
        None => {
            let cos_values = tape.value(cos.cosines);
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| crfiq_from_cosines(cos_values.row(r), l, loss_cfg.eps))
                .collect::<Result<Vec<T>>>()?
        }
    };
    let qhat_var = tape.concat_rows(&q_rows)?;
    let qhat = tape.value(qhat_var).data().to_vec();
    let l_fiq = tape.smooth_l1(qhat_var, &target, T::cst(loss_cfg.beta))?;
    let weighted = tape.scale(l_fiq, T::cst(loss_cfg.lambda));
    let loss = tape.add(l_fr, weighted)?;
    Ok(LossOutput {
        loss,
        l_fr,
        l_fiq: Some(l_fiq),
        qhat,
        target,
        embeddings,
        qhat_var: Some(qhat_var),
    })
}
