//! AdamW training loop, metrics log and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, clip_global_norm, AdamW, OptimState, Schedule};

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{load_batch, Manifest, Sampler};
use crate::error::{Error, Result};
use crate::heads::total_loss;
use crate::model::{ModelParams, ParamGrads};
use crate::tensor::Tape;

pub const METRICS_HEADER: [&str; 6] = ["step", "loss", "l_fr", "l_fiq", "lr", "mean_qhat"];

/// One line of the metrics log. `step` counts completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub l_fr: f64,
    pub l_fiq: Option<f64>,
    pub lr: f64,
    pub mean_qhat: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub metrics: Vec<MetricsRow>,
}

/// Names updated by the optimizer: everything except the regression head
/// when the objective is FR-only.
pub fn trainable_names<T: crate::tensor::Scalar>(
    params: &ModelParams<T>,
    fr_only: bool,
) -> Vec<String> {
    params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !(fr_only && n.starts_with("reg_head")))
        .collect()
}

/// Loss values and named gradients from one forward/backward pass.
pub struct StepOutput {
    pub loss: f64,
    pub l_fr: f64,
    pub l_fiq: Option<f64>,
    pub mean_qhat: Option<f64>,
    /// Empty when the loss is not finite.
    pub grads: ParamGrads<f32>,
}

pub fn loss_and_gradients(
    params: &ModelParams<f32>,
    batch: &[crate::heads::Sample<f32>],
    cfg: &RunConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let out = total_loss(&mut tape, batch, &vars, &params.config, &cfg.loss)?;
    let loss = tape.value(out.loss).item() as f64;
    let l_fr = tape.value(out.l_fr).item() as f64;
    let l_fiq = out.l_fiq.map(|v| tape.value(v).item() as f64);
    let mean_qhat = (!out.qhat.is_empty())
        .then(|| out.qhat.iter().map(|&q| q as f64).sum::<f64>() / out.qhat.len() as f64);
    let grads = if loss.is_finite() {
        let g = tape.backward(out.loss)?;
        vars.gradients(&g, params.config.pos0_trainable)
    } else {
        ParamGrads::new()
    };
    Ok(StepOutput {
        loss,
        l_fr,
        l_fiq,
        mean_qhat,
        grads,
    })
}

/// Trains from a fresh seeded initialization.
///
/// `on_checkpoint` runs every `checkpoint_every` steps and after the last
/// step. A non-finite loss aborts with [`Error::NonFinite`]; checkpoints
/// already handed out stay valid.
pub fn train(
    cfg: &RunConfig,
    manifest: &Manifest,
    mut on_checkpoint: impl FnMut(&Checkpoint<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::contract("training manifest is empty"));
    }
    let k = manifest.num_identities();
    if let Some(e) = manifest.entries().iter().find(|e| e.identity >= k) {
        return Err(Error::contract(format!(
            "identity {} of {} is outside 0..{k}; remap identities first",
            e.identity, e.path
        )));
    }
    let mut config = cfg.clone();
    config.classes = config.model_config(k).num_classes;
    if config.classes < k {
        return Err(Error::config(format!(
            "model.classes = {} but the manifest has {k} identities",
            config.classes
        )));
    }
    let model = config.model_config(k);
    let mut params = ModelParams::<f32>::init(model.clone(), cfg.seed)?;
    let trainable = trainable_names(&params, cfg.loss.fr_only);
    let mut optim = OptimState::new(&params, &trainable);
    let sampler = Sampler::Shuffled { seed: cfg.seed };
    let mut batches = sampler.batches(manifest.len(), cfg.batch);
    let mut metrics = Vec::with_capacity(cfg.schedule.total_steps as usize);
    let snapshot = |params: &ModelParams<f32>, optim: &OptimState<f32>, step: u64| Checkpoint {
        config: config.clone(),
        params: params.clone(),
        optim: optim.clone(),
        step,
        seed: cfg.seed,
    };

    for s in 0..cfg.schedule.total_steps {
        let batch = batches.next().expect("endless sampler");
        let samples =
            load_batch::<f32>(manifest, &batch, &cfg.augment, cfg.seed, model.vit.channels)?;
        let StepOutput {
            loss,
            l_fr,
            l_fiq,
            mean_qhat,
            mut grads,
        } = loss_and_gradients(&params, &samples, &config)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: s + 1 });
        }
        if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_norm);
        }
        let lr = cfg.schedule.lr_at(s);
        adamw_step(&mut params, &grads, &mut optim, &cfg.optim, lr)?;
        metrics.push(MetricsRow {
            step: s + 1,
            loss,
            l_fr,
            l_fiq,
            lr,
            mean_qhat,
        });
        let last = s + 1 == cfg.schedule.total_steps;
        if cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 && !last {
            on_checkpoint(&snapshot(&params, &optim, s + 1))?;
        }
    }
    let checkpoint = snapshot(&params, &optim, cfg.schedule.total_steps);
    on_checkpoint(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    w.write_record(METRICS_HEADER).map_err(fail)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.l_fr.to_string(),
            opt(r.l_fiq),
            r.lr.to_string(),
            opt(r.mean_qhat),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?).map_err(|e| Error::io(path, e))
}
