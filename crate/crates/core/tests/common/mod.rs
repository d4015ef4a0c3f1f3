//! Helpers shared by the integration tests.
#![allow(dead_code)]

use autometa::gradcheck::{grad_check, GradCheckReport};
use autometa::layers::{forward, BnStats, LayerKind, Mode};
use autometa::network::{compile_network, NetworkSpec};
use autometa::tape::{Tape, Var};
use autometa::{CellSpec, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALL_LAYER_KINDS: [LayerKind; 13] = [
    LayerKind::Conv3x3,
    LayerKind::FactorizedConv5x5,
    LayerKind::Identity,
    LayerKind::AvgPool3x3,
    LayerKind::MaxPool3x3,
    LayerKind::Conv1x1,
    LayerKind::BatchNorm,
    LayerKind::ReLU,
    LayerKind::Linear,
    LayerKind::GlobalAvgPool,
    LayerKind::Concat,
    LayerKind::Add,
    LayerKind::AvgPool2x2,
];

pub const TOL: f64 = 1e-4;

pub fn named(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

/// Values bounded away from zero so a ±1e-3 step never crosses a relu kink.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.01 apart, so no max-pool window has a near tie.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Finite-difference check of one layer kind on random inputs.
pub fn check_layer(kind: LayerKind, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w, f) = (2, 3, 5, 4, 4);
    let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
    let mut inputs = vec![named("x", x.clone())];
    let mut mode = Mode::Train;
    match kind {
        LayerKind::Conv3x3 => {
            inputs.push(named("w", Tensor::randn(&[f, c, 3, 3], 0.5, &mut rng)));
            inputs.push(named("b", Tensor::randn(&[f], 0.5, &mut rng)));
        }
        LayerKind::Conv1x1 => {
            inputs.push(named("w", Tensor::randn(&[f, c, 1, 1], 0.5, &mut rng)));
            inputs.push(named("b", Tensor::randn(&[f], 0.5, &mut rng)));
        }
        LayerKind::FactorizedConv5x5 => {
            inputs.push(named("w15", Tensor::randn(&[f, c, 1, 5], 0.5, &mut rng)));
            inputs.push(named("w51", Tensor::randn(&[f, f, 5, 1], 0.5, &mut rng)));
        }
        LayerKind::BatchNorm => {
            inputs[0] = named("x", Tensor::randn(&[8, c, 3, 3], 1.0, &mut rng));
            inputs.push(named("gamma", Tensor::randn(&[c], 1.0, &mut rng)));
            inputs.push(named("beta", Tensor::randn(&[c], 1.0, &mut rng)));
        }
        LayerKind::ReLU => inputs[0] = named("x", away_from_zero(&[n, c, h, w], &mut rng)),
        LayerKind::MaxPool3x3 => inputs[0] = named("x", distinct(&[n, c, h, w], &mut rng)),
        LayerKind::Linear => {
            inputs[0] = named("x", Tensor::randn(&[n, 6], 1.0, &mut rng));
            inputs.push(named("w", Tensor::randn(&[f, 6], 0.5, &mut rng)));
            inputs.push(named("b", Tensor::randn(&[f], 0.5, &mut rng)));
        }
        LayerKind::Concat | LayerKind::Add => {
            inputs.push(named("y", Tensor::randn(&[n, c, h, w], 1.0, &mut rng)));
        }
        _ => {}
    }
    if kind == LayerKind::BatchNorm && seed % 2 == 1 {
        mode = Mode::EvalRunning;
    }
    let channels = inputs[0].1.dim(1);
    let running = BnStats {
        mean: Tensor::randn(&[channels], 0.5, &mut rng),
        var: Tensor::full(&[channels], 1.7),
    };
    grad_check(
        &inputs,
        |tape: &mut Tape, vars: &[Var]| {
            let (ins, ps): (Vec<Var>, Vec<Var>) = match kind {
                LayerKind::Concat | LayerKind::Add => (vars.to_vec(), vec![]),
                _ => (vec![vars[0]], vars[1..].to_vec()),
            };
            let mut stats = running.clone();
            forward(tape, kind, &ins, &ps, mode, Some(&mut stats))
        },
        TOL,
        seed,
    )
    .unwrap()
}

/// Checks every parameter of a compiled network with `F = 4`.
pub fn check_cell(cell: &CellSpec, seed: u64) -> GradCheckReport {
    let spec = NetworkSpec::new(cell.clone(), 4, 3);
    let (net, state) = compile_network(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = Tensor::randn(&[4, 1, 6, 6], 1.0, &mut rng);
    let inputs: Vec<(String, Tensor)> = state
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("p{i}"), p.clone()))
        .collect();
    grad_check(
        &inputs,
        |tape, vars| {
            let mut bn = state.bn.clone();
            net.forward_with(tape, vars, &mut bn, x.clone(), Mode::Train)
        },
        1e-3,
        seed,
    )
    .unwrap()
}
