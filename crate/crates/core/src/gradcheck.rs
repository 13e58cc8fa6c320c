//! Finite-difference verification of the full model gradient at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{total_loss, total_loss_with_targets, LossConfig, Sample};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{finite_diff_check_with, GradCheckReport, Stencil, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct ModelCheckOptions {
    pub batch: usize,
    pub seed: u64,
    /// Base finite-difference step, scaled by max(1, |θ|). With the
    /// extrapolated stencil the two differences use `step` and `step / 2`.
    pub step: f64,
    pub stencil: Stencil,
    /// Corrupts one analytic gradient coordinate (negative control).
    pub inject_fault: bool,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            batch: 10,
            seed: 1,
            step: 5e-4,
            stencil: Stencil::Extrapolated,
            inject_fault: false,
        }
    }
}

/// Uniform [−1, 1] images with labels cycling over the classes.
pub fn random_batch(config: &ModelConfig, size: usize, seed: u64) -> Vec<Sample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &config.vit;
    let shape = [v.height, v.width, v.channels];
    (0..size)
        .map(|i| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            Sample {
                image: Tensor::new(shape.to_vec(), data).expect("image shape"),
                label: i % config.num_classes,
            }
        })
        .collect()
}

/// Loss value, detached regression targets and the analytic gradient of the
/// total loss, flattened in parameter order.
pub fn analytic_gradient(
    params: &ModelParams<f64>,
    batch: &[Sample<f64>],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let out = total_loss(&mut tape, batch, &vars, &params.config, loss_cfg)?;
    let grads = tape.backward(out.loss)?;
    let named = vars.gradients(&grads, params.config.pos0_trainable);
    let mut flat = Vec::with_capacity(params.num_elements());
    for (name, t) in params.named() {
        match named.get(&name) {
            Some(g) => flat.extend_from_slice(g.data()),
            None if loss_cfg.fr_only && name.starts_with("reg_head") => {
                flat.extend(std::iter::repeat_n(0.0, t.numel()))
            }
            None => return Err(Error::contract(format!("no gradient reached {name}"))),
        }
    }
    Ok((tape.value(out.loss).item(), out.target, flat))
}

/// Loss value with the regression targets held at `targets` (the detached
/// objective whose gradient the tape computes).
pub fn loss_value(
    params: &ModelParams<f64>,
    batch: &[Sample<f64>],
    loss_cfg: &LossConfig,
    targets: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let pinned = (!loss_cfg.fr_only).then_some(targets);
    let out = total_loss_with_targets(&mut tape, batch, &vars, &params.config, loss_cfg, pinned)?;
    Ok(tape.value(out.loss).item())
}

/// Compares the analytic gradient of every parameter with central differences.
pub fn check_model_gradients(
    config: ModelConfig,
    loss_cfg: &LossConfig,
    opts: &ModelCheckOptions,
) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::init(config, opts.seed)?;
    let batch = random_batch(&params.config, opts.batch, opts.seed ^ 0x5eed);
    let (_, targets, mut analytic) = analytic_gradient(&params, &batch, loss_cfg)?;
    if opts.inject_fault {
        let i = analytic.len() / 2;
        analytic[i] = analytic[i] * 1.5 + 1e-3;
    }
    let theta = params.flatten();
    let mut probe = params.clone();
    let frozen_p0 = !params.config.pos0_trainable && params.backbone.quality_token.is_some();
    let p0_range = frozen_p0.then(|| {
        let offset: usize = params
            .named()
            .iter()
            .take_while(|(n, _)| n != "pos_embed")
            .map(|(_, t)| t.numel())
            .sum();
        offset..offset + params.config.vit.dim
    });
    let mut failure = None;
    let report = finite_diff_check_with(
        |flat| {
            let mut flat = flat.to_vec();
            if let Some(r) = &p0_range {
                flat[r.clone()].copy_from_slice(&theta[r.clone()]);
            }
            probe.set_flat(&flat).expect("same layout");
            match loss_value(&probe, &batch, loss_cfg, &targets) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        &analytic,
        opts.step,
        opts.stencil,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
