//! Compiling a cell into a full classifier.
//!
//! The macro-architecture is a Conv3x3+BN stem, `n_stages` stages of
//! `unroll + 1` cells each with 2×2 average-pool downsampling (and filter
//! multiplication by the feature scale rate) between stages, then
//! ReLU → global average pool → linear head.
//!
//! Inside a cell every branch is `ReLU → op → BatchNorm`, where pools and the
//! identity are preceded by a 1×1 convolution whenever the branch input has a
//! different channel count than the stage. The outputs of blocks that no other
//! block reads are concatenated and projected back to the stage width by a 1×1
//! convolution followed by batch norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{BlockOp, CellSpec};
use crate::error::{Error, Result};
use crate::layers::{self, BnStats, LayerKind, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub cell: CellSpec,
    /// Filters in the stem and first stage.
    pub filters: usize,
    /// Each stage holds `unroll + 1` cells.
    pub unroll: usize,
    /// Filter multiplier applied at each stage transition.
    pub feature_scale_rate: usize,
    #[serde(default = "two")]
    pub n_stages: usize,
    pub n_classes: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
}

impl NetworkSpec {
    pub fn new(cell: CellSpec, filters: usize, n_classes: usize) -> Self {
        NetworkSpec {
            cell,
            filters,
            unroll: 0,
            feature_scale_rate: 2,
            n_stages: 2,
            n_classes,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.cell.is_empty() {
            return bad("cell has no blocks");
        }
        if self.filters == 0 {
            return bad("filters must be >= 1");
        }
        if !(1..=2).contains(&self.feature_scale_rate) {
            return bad("feature_scale_rate must be 1 or 2");
        }
        if self.n_stages == 0 || self.n_classes == 0 || self.in_channels == 0 {
            return bad("n_stages, n_classes and in_channels must be >= 1");
        }
        Ok(())
    }
}

/// Learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<Tensor>,
    pub bn: Vec<BnStats>,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
            && self
                .bn
                .iter()
                .all(|s| s.mean.all_finite() && s.var.all_finite())
    }
}

#[derive(Debug, Clone)]
struct Step {
    kind: LayerKind,
    inputs: Vec<usize>,
    params: Vec<usize>,
    bn: Option<usize>,
}

/// A compiled network: an ordered plan of layer applications. Slot 0 holds the
/// input batch and step `i` writes slot `i + 1`.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    steps: Vec<Step>,
    param_shapes: Vec<Vec<usize>>,
    param_kinds: Vec<LayerKind>,
    bn_channels: Vec<usize>,
    head: (usize, usize),
}

struct Builder {
    steps: Vec<Step>,
    param_shapes: Vec<Vec<usize>>,
    param_kinds: Vec<LayerKind>,
    bn_channels: Vec<usize>,
    channels: Vec<usize>,
}

impl Builder {
    fn push(&mut self, kind: LayerKind, inputs: Vec<usize>, shapes: Vec<Vec<usize>>, bn: Option<usize>, out_ch: usize) -> usize {
        let params = (0..shapes.len()).map(|i| self.param_shapes.len() + i).collect();
        self.param_kinds.extend(std::iter::repeat_n(kind, shapes.len()));
        self.param_shapes.extend(shapes);
        self.steps.push(Step {
            kind,
            inputs,
            params,
            bn,
        });
        self.channels.push(out_ch);
        self.channels.len() - 1
    }

    fn unary(&mut self, kind: LayerKind, x: usize) -> usize {
        let c = self.channels[x];
        self.push(kind, vec![x], vec![], None, c)
    }

    fn conv(&mut self, kind: LayerKind, x: usize, out: usize) -> usize {
        let c = self.channels[x];
        let shapes = match kind {
            LayerKind::Conv3x3 => vec![vec![out, c, 3, 3]],
            LayerKind::Conv1x1 => vec![vec![out, c, 1, 1]],
            LayerKind::FactorizedConv5x5 => vec![vec![out, c, 1, 5], vec![out, out, 5, 1]],
            other => unreachable!("{other:?} is not a convolution"),
        };
        self.push(kind, vec![x], shapes, None, out)
    }

    fn bn(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        let idx = self.bn_channels.len();
        self.bn_channels.push(c);
        self.push(LayerKind::BatchNorm, vec![x], vec![vec![c], vec![c]], Some(idx), c)
    }

    fn branch(&mut self, x: usize, op: BlockOp, width: usize) -> usize {
        let r = self.unary(LayerKind::ReLU, x);
        let y = match op {
            BlockOp::Conv3x3 | BlockOp::FactorizedConv5x5 => self.conv(op.layer_kind(), r, width),
            BlockOp::Identity | BlockOp::AvgPool3x3 | BlockOp::MaxPool3x3 => {
                let r = if self.channels[r] != width {
                    self.conv(LayerKind::Conv1x1, r, width)
                } else {
                    r
                };
                self.unary(op.layer_kind(), r)
            }
        };
        self.bn(y)
    }

    fn cell(&mut self, cell: &CellSpec, prev: usize, prev_prev: usize, width: usize) -> usize {
        let mut sources = vec![prev, prev_prev];
        for block in cell.blocks() {
            let l = self.branch(sources[block.left.input.0], block.left.op, width);
            let r = self.branch(sources[block.right.input.0], block.right.op, width);
            let sum = self.push(LayerKind::Add, vec![l, r], vec![], None, width);
            sources.push(sum);
        }
        let outs: Vec<usize> = cell.output_blocks().iter().map(|j| sources[2 + j]).collect();
        let cat = self.push(LayerKind::Concat, outs.clone(), vec![], None, width * outs.len());
        let proj = self.conv(LayerKind::Conv1x1, cat, width);
        self.bn(proj)
    }
}

/// Builds the network plan for `spec`.
pub fn compile(spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        steps: Vec::new(),
        param_shapes: Vec::new(),
        param_kinds: Vec::new(),
        bn_channels: Vec::new(),
        channels: vec![spec.in_channels],
    };
    let stem = b.conv(LayerKind::Conv3x3, 0, spec.filters);
    let stem = b.bn(stem);
    let (mut prev, mut prev_prev) = (stem, stem);
    let mut width = spec.filters;
    for stage in 0..spec.n_stages {
        if stage > 0 {
            let same = prev == prev_prev;
            prev = b.unary(LayerKind::AvgPool2x2, prev);
            prev_prev = if same {
                prev
            } else {
                b.unary(LayerKind::AvgPool2x2, prev_prev)
            };
            width *= spec.feature_scale_rate;
        }
        for _ in 0..=spec.unroll {
            let out = b.cell(&spec.cell, prev, prev_prev, width);
            prev_prev = prev;
            prev = out;
        }
    }
    let r = b.unary(LayerKind::ReLU, prev);
    let pooled = b.unary(LayerKind::GlobalAvgPool, r);
    let head = b.push(
        LayerKind::Linear,
        vec![pooled],
        vec![vec![spec.n_classes, width], vec![spec.n_classes]],
        None,
        spec.n_classes,
    );
    let head_params = &b.steps[head - 1].params;
    let head = (head_params[0], head_params[1]);
    Ok(Network {
        spec: spec.clone(),
        steps: b.steps,
        param_shapes: b.param_shapes,
        param_kinds: b.param_kinds,
        bn_channels: b.bn_channels,
        head,
    })
}

/// Compiles `spec` and draws its initial parameters from `seed`.
pub fn compile_network(spec: &NetworkSpec, seed: u64) -> Result<(Network, ModelState)> {
    let net = compile(spec)?;
    let state = net.init(seed);
    Ok((net, state))
}

/// Output of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    /// Learnable scalar count; batch-norm running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.param_shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Scalars held by convolution kernels only.
    pub fn conv_param_count(&self) -> usize {
        self.param_shapes
            .iter()
            .zip(&self.param_kinds)
            .filter(|(_, k)| {
                matches!(
                    k,
                    LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::FactorizedConv5x5
                )
            })
            .map(|(s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }

    /// He-normal kernels, unit BN scale, zero shifts and biases.
    pub fn init(&self, seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .param_shapes
            .iter()
            .zip(&self.param_kinds)
            .map(|(shape, kind)| match (kind, shape.len()) {
                (LayerKind::BatchNorm, _) => Tensor::zeros(shape),
                (_, 1) => Tensor::zeros(shape),
                _ => {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
            })
            .collect::<Vec<_>>();
        // gamma is the first of each BN pair
        let mut params = params;
        for step in self.steps.iter().filter(|s| s.kind == LayerKind::BatchNorm) {
            params[step.params[0]] = Tensor::ones(&self.param_shapes[step.params[0]]);
        }
        ModelState {
            params,
            bn: self.bn_channels.iter().map(|&c| BnStats::new(c)).collect(),
        }
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.params.len() != self.param_shapes.len() || state.bn.len() != self.bn_channels.len() {
            return Err(Error::Shape(format!(
                "state has {} params / {} bn layers, network needs {} / {}",
                state.params.len(),
                state.bn.len(),
                self.param_shapes.len(),
                self.bn_channels.len()
            )));
        }
        for (p, s) in state.params.iter().zip(&self.param_shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::Shape(format!("parameter {:?} vs {s:?}", p.shape())));
            }
        }
        Ok(())
    }

    /// Runs the plan on `x[n, in_channels, h, w]`. In [`Mode::Train`] the
    /// running statistics in `state.bn` are updated.
    pub fn forward(&self, tape: &mut Tape, state: &mut ModelState, x: Tensor, mode: Mode) -> Result<Forward> {
        self.check_state(state)?;
        let params: Vec<Var> = state.params.iter().map(|p| tape.param(p.clone())).collect();
        let logits = self.forward_with(tape, &params, &mut state.bn, x, mode)?;
        Ok(Forward { logits, params })
    }

    /// Like [`Network::forward`], with parameters already on the tape.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        bn: &mut [BnStats],
        x: Tensor,
        mode: Mode,
    ) -> Result<Var> {
        if params.len() != self.param_shapes.len() || bn.len() != self.bn_channels.len() {
            return Err(Error::Shape(format!(
                "{} params / {} bn layers given, network needs {} / {}",
                params.len(),
                bn.len(),
                self.param_shapes.len(),
                self.bn_channels.len()
            )));
        }
        match *x.shape() {
            [_, c, _, _] if c == self.spec.in_channels => {}
            ref s => {
                return Err(Error::Shape(format!(
                    "network input must be [n, {}, h, w], got {s:?}",
                    self.spec.in_channels
                )))
            }
        }
        let mut slots = Vec::with_capacity(self.steps.len() + 1);
        slots.push(tape.constant(x));
        for step in &self.steps {
            let inputs: Vec<Var> = step.inputs.iter().map(|&i| slots[i]).collect();
            let ps: Vec<Var> = step.params.iter().map(|&i| params[i]).collect();
            let stats = step.bn.map(|i| &mut bn[i]);
            let out = layers::forward(tape, step.kind, &inputs, &ps, mode, stats)?;
            slots.push(out);
        }
        Ok(*slots.last().expect("plan is never empty"))
    }

    pub fn logits(&self, state: &mut ModelState, x: Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, state, x, mode)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Argmax class per example.
    pub fn predict(&self, state: &mut ModelState, x: Tensor, mode: Mode) -> Result<Vec<usize>> {
        let logits = self.logits(state, x, mode)?;
        Ok(argmax_rows(&logits))
    }

    /// Mean cross-entropy and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        state: &mut ModelState,
        x: Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, state, x, mode)?;
        let loss = tape.softmax_xent(f.logits, labels)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, f.params.iter().map(|&p| grads.take(p)).collect()))
    }

    /// Reorders the classifier's class rows: new class `i` takes the weights
    /// of old class `perm[i]`.
    pub fn permute_classes(&self, state: &mut ModelState, perm: &[usize]) -> Result<()> {
        let n = self.spec.n_classes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("{perm:?} is not a permutation of {n} classes")));
        }
        let (w, b) = self.head;
        let width = state.params[w].dim(1);
        let old_w = state.params[w].clone();
        let old_b = state.params[b].clone();
        for (i, &p) in perm.iter().enumerate() {
            state.params[w].data_mut()[i * width..(i + 1) * width]
                .copy_from_slice(&old_w.data()[p * width..(p + 1) * width]);
            state.params[b].data_mut()[i] = old_b.data()[p];
        }
        Ok(())
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.dim(1);
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
