//! Worked-example fixtures run by the `selftest` command.

use crate::config::RunConfig;
use crate::data::{normalize, parse_ppm, write_ppm, Image};
use crate::error::Result;
use crate::eval::{
    auc, cosine_similarity, edc_compute, fmr_threshold, fnmr_at, pauc, Comparison, ComparisonSet,
    EdcCurve,
};
use crate::heads::{crfiq_from_cosines, smooth_l1};
use crate::tensor::{Tape, Tensor};
use crate::train::Schedule;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()).expect("row"));
    let s = tape.softmax_lastdim(v);
    tape.value(s).data().to_vec()
}

type Fixture = (&'static str, fn() -> Result<bool>);

fn checks() -> Vec<Fixture> {
    vec![
        ("matmul 1x2 by 2x1", || {
            let mut t = Tape::<f64>::new();
            let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0])?);
            let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0])?);
            let c = t.matmul(a, b)?;
            Ok(t.value(c).item() == 11.0)
        }),
        ("softmax examples", || {
            let eq = softmax(&[1000.0, 1000.0]) == [0.5, 0.5];
            let r = softmax(&[0.0, 3f64.ln()]);
            Ok(eq && close(r[0], 0.25, 1e-12) && close(r[1], 0.75, 1e-12))
        }),
        ("layer norm of [1, 3]", || {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0])?);
            let g = t.constant(Tensor::ones(&[2]));
            let b = t.constant(Tensor::zeros(&[2]));
            let y = t.layer_norm(x, g, b, 1e-12)?;
            let d = t.value(y).data();
            Ok(close(d[0], -1.0, 1e-9) && close(d[1], 1.0, 1e-9))
        }),
        ("l2 normalize 3-4-5", || {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0])?);
            let y = t.l2_normalize_rows(x, 1e-12)?;
            let d = t.value(y).data();
            Ok(close(d[0], 0.6, 1e-15) && close(d[1], 0.8, 1e-15))
        }),
        ("gradient of sum(p*p)", || {
            let mut t = Tape::<f64>::new();
            let p = t.param(Tensor::vector(vec![1.0, 2.0]));
            let sq = t.mul(p, p)?;
            let l = t.sum(sq);
            let g = t.backward(l)?;
            Ok(g.get(p).map(|g| g.data() == [2.0, 4.0]).unwrap_or(false))
        }),
        ("classifiability target 0.8 / 1.3001", || {
            let v: f64 = crfiq_from_cosines(&[0.8, 0.3, -0.2], 0, 1e-4)?;
            Ok(close(v, 0.8 / 1.3001, 1e-12) && close(v, 0.61534, 1e-5))
        }),
        ("smooth l1 branches", || {
            Ok(smooth_l1(0.5, 0.0, 1.0) == 0.125
                && smooth_l1(2.0, 0.0, 1.0) == 1.5
                && smooth_l1(1.0, 0.0, 1.0) == 0.5)
        }),
        ("ppm minimal red pixel", || {
            let img = parse_ppm(b"P6\n1 1\n255\n\xff\x00\x00")?;
            let back = parse_ppm(&write_ppm(&img))?;
            Ok(img.data() == [255, 0, 0] && back == img)
        }),
        ("normalize endpoints", || {
            let img = Image::new(1, 3, 1, vec![0, 255, 128])?;
            let t = normalize::<f64>(&img);
            Ok(t.data()[0] == -1.0
                && t.data()[1] == 1.0
                && close(t.data()[2], 128.0 / 127.5 - 1.0, 1e-15))
        }),
        ("schedule endpoints", || {
            let s = Schedule {
                base_lr: 1e-3,
                total_steps: 100,
                power: 1.0,
                warmup_steps: 10,
            };
            Ok(s.lr_at(100) == 0.0 && close(s.lr_at(5), 5e-4, 1e-18))
        }),
        ("config round trip", || {
            let c = RunConfig::toy();
            Ok(RunConfig::parse(&c.to_text())?.to_text() == c.to_text())
        }),
        ("cosine and fnmr examples", || {
            let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0])?;
            Ok(close(c, std::f64::consts::FRAC_1_SQRT_2, 1e-15)
                && fnmr_at(&[0.1, 0.9], 0.5)? == 0.5)
        }),
        ("fmr threshold examples", || {
            let imp = [0.1, 0.2, 0.3, 0.4];
            let a = fmr_threshold(&imp, 0.25)?;
            let b = fmr_threshold(&imp, 0.5)?;
            let c = fmr_threshold(&imp, 0.1)?;
            Ok(a.tau == 0.4
                && b.tau == 0.3
                && c.unsaturated
                && c.tau > 0.4
                && c.achieved_fmr == 0.0)
        }),
        ("edc start equals global fnmr", || {
            let cmp = |s: f64, q: f64| Comparison {
                similarity: s,
                quality: q,
            };
            let set = ComparisonSet {
                genuine: vec![cmp(0.2, 0.1), cmp(0.9, 0.5)],
                impostor: vec![cmp(0.1, 0.3), cmp(0.3, 0.2)],
            };
            let c = edc_compute(&set, 0.5, &[0.0, 0.25])?;
            Ok(c.fnmr == [0.5, 0.0])
        }),
        ("area examples", || {
            let flat = EdcCurve {
                tau: 0.0,
                grid: vec![0.0, 0.5, 1.0],
                fnmr: vec![0.2, 0.2, 0.2],
                retained_genuine: vec![1; 3],
                retained_impostor: vec![1; 3],
                flagged: vec![false; 3],
            };
            let line = EdcCurve {
                fnmr: vec![0.4, 0.2, 0.0],
                ..flat.clone()
            };
            Ok(close(pauc(&flat)?, 0.06, 1e-15) && close(auc(&line, 1.0)?, 0.2, 1e-15))
        }),
    ]
}

/// Runs every fixture; an error counts as a failure.
pub fn run() -> Vec<Check> {
    checks()
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(passed) => Check {
                name,
                passed,
                detail: String::new(),
            },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
