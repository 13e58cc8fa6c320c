// Matrix code below reads best with explicit indices.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitfiqa::gradcheck::random_batch;
use vitfiqa::heads::{total_loss, LossConfig};
use vitfiqa::model::{ModelConfig, ModelParams};
use vitfiqa::tensor::{finite_diff_check, Tape, Tensor, Var};
use vitfiqa::vit::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, dim: usize, ffn: usize) -> LayerParams<f64> {
    LayerParams {
        ln1_gain: random_tensor(rng, &[dim], 0.5).map(|v| 1.0 + v),
        ln1_bias: random_tensor(rng, &[dim], 0.1),
        w_q: random_tensor(rng, &[dim, dim], 0.5),
        w_k: random_tensor(rng, &[dim, dim], 0.5),
        w_v: random_tensor(rng, &[dim, dim], 0.5),
        w_o: random_tensor(rng, &[dim, dim], 0.5),
        ln2_gain: random_tensor(rng, &[dim], 0.5).map(|v| 1.0 + v),
        ln2_bias: random_tensor(rng, &[dim], 0.1),
        ffn_in: random_tensor(rng, &[dim, ffn], 0.5),
        ffn_in_bias: random_tensor(rng, &[ffn], 0.1),
        ffn_out: random_tensor(rng, &[ffn, dim], 0.5),
        ffn_out_bias: random_tensor(rng, &[dim], 0.1),
    }
}

fn bind_layer(tape: &mut Tape<f64>, p: &LayerParams<f64>) -> LayerVars {
    LayerVars {
        ln1_gain: tape.param(p.ln1_gain.clone()),
        ln1_bias: tape.param(p.ln1_bias.clone()),
        w_q: tape.param(p.w_q.clone()),
        w_k: tape.param(p.w_k.clone()),
        w_v: tape.param(p.w_v.clone()),
        w_o: tape.param(p.w_o.clone()),
        ln2_gain: tape.param(p.ln2_gain.clone()),
        ln2_bias: tape.param(p.ln2_bias.clone()),
        ffn_in: tape.param(p.ffn_in.clone()),
        ffn_in_bias: tape.param(p.ffn_in_bias.clone()),
        ffn_out: tape.param(p.ffn_out.clone()),
        ffn_out_bias: tape.param(p.ffn_out_bias.clone()),
    }
}

fn toy_params(variant: Variant, seed: u64) -> ModelParams<f64> {
    let mut p =
        ModelParams::<f64>::init(ModelConfig::new(ViTConfig::toy(), variant, 5), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    p.set_flat(&flat).unwrap();
    p
}

/// Plain nested-loop attention used as the reference.
fn naive_attention(
    z: &Tensor<f64>,
    l: &LayerParams<f64>,
    heads: usize,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let (n, d) = (z.rows(), z.cols());
    let dh = d / heads;
    let proj = |w: &Tensor<f64>, i: usize, c: usize| {
        (0..d).map(|k| z.row(i)[k] * w.row(k)[c]).sum::<f64>()
    };
    let mut alphas = vec![vec![vec![0.0; n]; n]; heads];
    let mut merged = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| proj(&l.w_q, i, h * dh + c) * proj(&l.w_k, j, h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..n {
                alphas[h][i][j] = exps[j] / total;
                for c in 0..dh {
                    merged[i][h * dh + c] += alphas[h][i][j] * proj(&l.w_v, j, h * dh + c);
                }
            }
        }
    }
    (alphas, merged)
}

#[test]
fn patch_grid_sizes() {
    let mut cfg = ViTConfig::default();
    assert_eq!((cfg.num_patches(), cfg.patch_len()), (49, 768));
    cfg.patch = 8;
    assert_eq!(cfg.num_patches(), 196);
}

#[test]
fn assembled_sequence_lengths_and_token_row() {
    let cfg = ViTConfig {
        height: 4,
        width: 4,
        patch: 2,
        ..ViTConfig::toy()
    };
    for variant in [Variant::QualityToken, Variant::Embedding] {
        let p = ModelParams::<f64>::init(ModelConfig::new(cfg.clone(), variant, 3), 1).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let patches = tape.constant(Tensor::zeros(&[4, cfg.patch_len()]));
        let seq = embed_and_assemble(&mut tape, patches, &vars.backbone, &cfg, variant).unwrap();
        assert_eq!(tape.value(seq).rows(), cfg.seq_len(variant));
        if variant == Variant::QualityToken {
            assert_eq!(tape.value(seq).rows(), 5);
            // p0 starts at zero, so row 0 is q0 + p0 = q0.
            let q0 = p.backbone.quality_token.as_ref().unwrap();
            assert_eq!(tape.value(seq).row(0), q0.data());
        } else {
            assert_eq!(tape.value(seq).rows(), 4);
        }
    }
}

#[test]
fn zero_inputs_leave_patch_lanes_zero() {
    let cfg = ViTConfig::toy();
    let mut p = toy_params(Variant::QualityToken, 2);
    p.backbone.patch_bias = Tensor::zeros(&[cfg.dim]);
    p.backbone.positions = Tensor::zeros(&[cfg.num_patches() + 1, cfg.dim]);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let patches = tape.constant(Tensor::zeros(&[cfg.num_patches(), cfg.patch_len()]));
    let seq = embed_and_assemble(
        &mut tape,
        patches,
        &vars.backbone,
        &cfg,
        Variant::QualityToken,
    )
    .unwrap();
    let z = tape.value(seq);
    assert_eq!(z.row(0), p.backbone.quality_token.as_ref().unwrap().data());
    assert!((1..z.rows()).all(|r| z.row(r).iter().all(|&v| v == 0.0)));
}

#[test]
fn single_token_attention_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = random_layer(&mut rng, 4, 8);
    let z = random_tensor(&mut rng, &[1, 4], 1.0);
    let mut tape = Tape::new();
    let lv = bind_layer(&mut tape, &l);
    let seq = tape.constant(z.clone());
    let out = mhsa(&mut tape, seq, &lv, 2).unwrap();
    for a in &out.attention {
        assert_eq!(tape.value(*a).data(), [1.0]);
    }
    // v0 · W_O by hand.
    let v: Vec<f64> = (0..4)
        .map(|c| (0..4).map(|k| z.data()[k] * l.w_v.row(k)[c]).sum())
        .collect();
    for c in 0..4 {
        let want: f64 = (0..4).map(|k| v[k] * l.w_o.row(k)[c]).sum();
        assert!((tape.value(out.tokens).data()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn identical_keys_split_attention_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut l = random_layer(&mut rng, 4, 8);
    l.w_k = Tensor::zeros(&[4, 4]);
    let mut tape = Tape::new();
    let lv = bind_layer(&mut tape, &l);
    let seq = tape.constant(random_tensor(&mut rng, &[2, 4], 1.0));
    let out = mhsa(&mut tape, seq, &lv, 2).unwrap();
    for a in &out.attention {
        assert_eq!(tape.value(*a).row(0), [0.5, 0.5]);
    }
}

#[test]
fn attention_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut l = random_layer(&mut rng, 6, 8);
    // Identity W_O exposes the merged head outputs.
    l.w_o = Tensor::new(
        vec![6, 6],
        (0..36)
            .map(|i| if i % 7 == 0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let z = random_tensor(&mut rng, &[5, 6], 2.0);
    let (alphas, merged) = naive_attention(&z, &l, 3);
    let mut tape = Tape::new();
    let lv = bind_layer(&mut tape, &l);
    let seq = tape.constant(z.clone());
    let out = mhsa(&mut tape, seq, &lv, 3).unwrap();
    for (h, a) in out.attention.iter().enumerate() {
        let a = tape.value(*a);
        for i in 0..5 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!((a.row(i)[j] - alphas[h][i][j]).abs() < 1e-12);
            }
        }
    }
    // Row 0 lies in the convex hull of the value rows, coordinate by coordinate.
    let values: Vec<Vec<f64>> = (0..5)
        .map(|j| {
            (0..6)
                .map(|c| (0..6).map(|k| z.row(j)[k] * l.w_v.row(k)[c]).sum())
                .collect()
        })
        .collect();
    let tokens = tape.value(out.tokens);
    for c in 0..6 {
        let lo = values.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
        let hi = values
            .iter()
            .map(|v| v[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let got = tokens.row(0)[c];
        assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        for i in 0..5 {
            assert!((tokens.row(i)[c] - merged[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_output_projections_make_layers_identity() {
    let cfg = ViTConfig::toy();
    let mut p = toy_params(Variant::QualityToken, 6);
    for layer in &mut p.backbone.layers {
        layer.w_o = Tensor::zeros(&[cfg.dim, cfg.dim]);
        layer.ffn_out = Tensor::zeros(&[cfg.ffn_width, cfg.dim]);
        layer.ffn_out_bias = Tensor::zeros(&[cfg.dim]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = random_tensor(&mut rng, &[16, 16, 3], 1.0);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let patches = tape.constant(patchify(&image, &cfg).unwrap());
    let seq = embed_and_assemble(
        &mut tape,
        patches,
        &vars.backbone,
        &cfg,
        Variant::QualityToken,
    )
    .unwrap();
    let z0 = tape.value(seq).clone();
    let out = encode_sequence(&mut tape, seq, &vars.backbone, &cfg, Variant::QualityToken).unwrap();
    assert_eq!(tape.value(out.quality_state.unwrap()).data(), z0.row(0));
    assert_eq!(tape.value(out.patch_states).data(), &z0.data()[cfg.dim..]);
}

#[test]
fn stacked_layers_compose() {
    let cfg = ViTConfig::toy();
    let p = toy_params(Variant::Embedding, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = random_tensor(&mut rng, &[16, 16, 3], 1.0);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let out =
        backbone_forward(&mut tape, &image, &vars.backbone, &cfg, Variant::Embedding).unwrap();
    let patches = tape.constant(patchify(&image, &cfg).unwrap());
    let mut seq =
        embed_and_assemble(&mut tape, patches, &vars.backbone, &cfg, Variant::Embedding).unwrap();
    for layer in &vars.backbone.layers {
        seq = encoder_layer(&mut tape, seq, layer, &cfg).unwrap().tokens;
    }
    assert_eq!(tape.value(seq), tape.value(out.patch_states));
}

#[test]
fn encoder_layer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ViTConfig::toy();
    let l = random_layer(&mut rng, cfg.dim, cfg.ffn_width);
    let z = random_tensor(&mut rng, &[5, cfg.dim], 1.0);
    let weights = random_tensor(&mut rng, &[5, cfg.dim], 1.0);
    // Scalar objective sum(w ⊙ layer(z)) as a function of the input sequence.
    let eval = |input: &[f64], want_grad: bool| {
        let mut tape = Tape::new();
        let lv = bind_layer(&mut tape, &l);
        let seq = tape.param(Tensor::new(vec![5, cfg.dim], input.to_vec()).unwrap());
        let out = encoder_layer(&mut tape, seq, &lv, &cfg).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out.tokens, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grad = want_grad.then(|| {
            tape.backward(loss)
                .unwrap()
                .get(seq)
                .unwrap()
                .data()
                .to_vec()
        });
        (value, grad)
    };
    let analytic = eval(z.data(), true).1.unwrap();
    let report = finite_diff_check(|x| eval(x, false).0, z.data(), &analytic, 1e-5);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn no_layers_returns_assembled_token() {
    let cfg = ViTConfig {
        layers: 0,
        ..ViTConfig::toy()
    };
    let mut p =
        ModelParams::<f64>::init(ModelConfig::new(cfg.clone(), Variant::QualityToken, 3), 9)
            .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    p.backbone.positions = random_tensor(&mut rng, &[cfg.num_patches() + 1, cfg.dim], 1.0);
    let image = random_tensor(&mut rng, &[16, 16, 3], 1.0);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let out = backbone_forward(
        &mut tape,
        &image,
        &vars.backbone,
        &cfg,
        Variant::QualityToken,
    )
    .unwrap();
    let q0 = p.backbone.quality_token.as_ref().unwrap().data();
    let want: Vec<f64> = q0
        .iter()
        .zip(p.backbone.positions.row(0))
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(tape.value(out.quality_state.unwrap()).data(), want);
}

#[test]
fn toy_output_shapes() {
    let cfg = ViTConfig::toy();
    for variant in [Variant::QualityToken, Variant::Embedding] {
        let p = ModelParams::<f64>::init(ModelConfig::new(cfg.clone(), variant, 3), 1).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let image = Tensor::zeros(&[16, 16, 3]);
        let out = backbone_forward(&mut tape, &image, &vars.backbone, &cfg, variant).unwrap();
        assert_eq!(tape.shape(out.patch_states), [4, 16]);
        match out.quality_state {
            Some(q) => assert_eq!(tape.value(q).numel(), 16),
            None => assert_eq!(variant, Variant::Embedding),
        }
        assert_eq!(out.attention.len(), 2);
        for layer in &out.attention {
            for a in layer {
                assert_eq!(tape.shape(*a), [cfg.seq_len(variant); 2]);
            }
        }
    }
}

#[test]
fn quality_token_receives_gradient() {
    let config = ModelConfig::new(ViTConfig::toy(), Variant::QualityToken, 5);
    let p = ModelParams::<f64>::init(config.clone(), 10).unwrap();
    let batch = random_batch(&config, 4, 10);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, true);
    let out = total_loss(&mut tape, &batch, &vars, &config, &LossConfig::default()).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let q0: Var = vars.backbone.quality_token.unwrap();
    assert!(grads.get(q0).unwrap().norm() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn token_lane_ignores_patch_order(seed in 0u64..10_000, swaps in proptest::collection::vec((0usize..4, 0usize..4), 1..6)) {
        let cfg = ViTConfig::toy();
        let p = toy_params(Variant::QualityToken, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_tensor(&mut rng, &[16, 16, 3], 1.0);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let patches = tape.constant(patchify(&image, &cfg).unwrap());
        let seq = embed_and_assemble(&mut tape, patches, &vars.backbone, &cfg, Variant::QualityToken).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|r| tape.value(seq).row(r).to_vec()).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        for (a, b) in swaps {
            perm.swap(a, b);
        }
        let mut permuted = vec![rows[0].clone()];
        permuted.extend(perm.iter().map(|&j| rows[j + 1].clone()));
        let base = encode_sequence(&mut tape, seq, &vars.backbone, &cfg, Variant::QualityToken).unwrap();
        let other_seq = tape.constant(Tensor::from_rows(&permuted).unwrap());
        let other = encode_sequence(&mut tape, other_seq, &vars.backbone, &cfg, Variant::QualityToken).unwrap();
        let (qa, qb) = (tape.value(base.quality_state.unwrap()), tape.value(other.quality_state.unwrap()));
        for (a, b) in qa.data().iter().zip(qb.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let (pa, pb) = (tape.value(base.patch_states), tape.value(other.patch_states));
        for (i, &j) in perm.iter().enumerate() {
            for (a, b) in pb.row(i).iter().zip(pa.row(j)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
        for layer in &other.attention {
            prop_assert_eq!(tape.value(layer[0]).rows(), 5);
            for a in layer {
                let a = tape.value(*a);
                for r in 0..a.rows() {
                    prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
