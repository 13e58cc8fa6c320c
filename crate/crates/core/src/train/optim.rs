//! AdamW with decoupled weight decay and a polynomial learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGrads};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "eps must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments for every name in `trainable`.
    pub fn new(params: &ModelParams<T>, trainable: &[String]) -> Self {
        let mut m = BTreeMap::new();
        for (name, t) in params.named() {
            if trainable.contains(&name) {
                m.insert(name, Tensor::zeros(t.shape()));
            }
        }
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update of every parameter tracked by `state`:
/// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimState<T>,
    hp: &AdamW,
    lr: f64,
) -> Result<()> {
    for name in state.m.keys() {
        if !grads.contains_key(name) {
            return Err(Error::contract(format!("missing gradient for {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::cst(hp.beta1), T::cst(hp.beta2));
    let (one_b1, one_b2) = (T::cst(1.0 - hp.beta1), T::cst(1.0 - hp.beta2));
    let (c1, c2) = (T::cst(c1), T::cst(c2));
    let eps = T::cst(hp.eps);
    let lr_t = T::cst(lr);
    let decay = T::cst(lr * hp.weight_decay);
    for (name, theta) in params.named_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(&name), state.v.get_mut(&name)) else {
            continue;
        };
        let g = &grads[&name];
        if g.shape() != theta.shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: theta.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let iter = theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data());
        for (((p, m), v), &g) in iter {
            *p = *p - decay * *p;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::cst(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

/// Linear warmup to `base_lr`, then `base_lr·(1 − progress)^power`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
    pub warmup_steps: u64,
}

impl Schedule {
    /// Power 1 with 5% warmup.
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            total_steps,
            power: 1.0,
            warmup_steps: total_steps / 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total steps must be positive"));
        }
        if !(self.power > 0.0) {
            return Err(Error::config("schedule power must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup must be shorter than the run"));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("learning rate must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let (w, total) = (self.warmup_steps, self.total_steps);
        if step >= total {
            return 0.0;
        }
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        let progress = (step - w) as f64 / (total - w) as f64;
        self.base_lr * (1.0 - progress).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vit::{Variant, ViTConfig};

    fn toy() -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig::new(ViTConfig::toy(), Variant::QualityToken, 3),
            1,
        )
        .unwrap()
    }

    fn grads_like(p: &ModelParams<f64>, value: f64) -> ParamGrads<f64> {
        p.named()
            .into_iter()
            .map(|(n, t)| (n, Tensor::full(t.shape(), value)))
            .collect()
    }

    fn all_names(p: &ModelParams<f64>) -> Vec<String> {
        p.named().into_iter().map(|(n, _)| n).collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = toy();
        let before = p.flatten();
        let mut st = OptimState::new(&p, &all_names(&p));
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let g = grads_like(&p, 1.0);
        adamw_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            assert!((a - b - 1e-3).abs() < 1e-9);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = toy();
        let before = p.flatten();
        let mut st = OptimState::new(&p, &all_names(&p));
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..3 {
            let g = grads_like(&p, 0.0);
            adamw_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        }
        assert_eq!(before, p.flatten());
    }

    #[test]
    fn decay_alone_shrinks() {
        let mut p = toy();
        let before = p.flatten();
        let mut st = OptimState::new(&p, &all_names(&p));
        let hp = AdamW::default();
        let g = grads_like(&p, 0.0);
        adamw_step(&mut p, &g, &mut st, &hp, 1e-2).unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            assert!((a * (1.0 - 1e-2 * 0.05) - b).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = toy();
        let mut st = OptimState::new(&p, &all_names(&p));
        let mut g = grads_like(&p, 0.0);
        g.remove("class_centers");
        let err = adamw_step(&mut p, &g, &mut st, &AdamW::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("class_centers"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let p = toy();
        let mut g = grads_like(&p, 1.0);
        let before = clip_global_norm(&mut g, 2.0);
        assert!((before - (p.num_elements() as f64).sqrt()).abs() < 1e-9);
        let after = clip_global_norm(&mut g, f64::INFINITY);
        assert!((after - 2.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule {
            base_lr: 1e-3,
            total_steps: 100,
            power: 1.0,
            warmup_steps: 0,
        };
        assert_eq!(s.lr_at(100), 0.0);
        assert_eq!(s.lr_at(250), 0.0);
        assert!((s.lr_at(50) - 5e-4).abs() < 1e-18);
        let w = Schedule {
            warmup_steps: 10,
            ..s.clone()
        };
        assert!((w.lr_at(5) - 5e-4).abs() < 1e-18);
        assert_eq!(w.lr_at(10), 1e-3);
        assert_eq!(Schedule::new(1e-3, 1000).warmup_steps, 50);
    }
}
