//! LSTM accuracy predictor over tokenized cells.
//!
//! A cell becomes four tokens per block, `[left_in, left_op, right_in,
//! right_op]`. Input tokens embed as themselves and op tokens after the
//! `max_blocks + 1` possible inputs, so one vocabulary serves every cell size
//! up to `max_blocks`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::CellSpec;
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
pub const HIDDEN: usize = 100;
pub const LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_EPOCHS: usize = 200;
pub const MAX_MINIBATCH: usize = 32;

/// Raw tokens of a cell: input references as-is, ops as their index.
pub fn encode_cell(cell: &CellSpec) -> Vec<usize> {
    cell.canonicalize()
        .blocks()
        .iter()
        .flat_map(|b| b.branches())
        .flat_map(|br| [br.input.0, br.op.index()])
        .collect()
}

/// Learnable weights. Every matrix is stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateWeights {
    pub max_blocks: usize,
    /// `[vocab, EMBED_DIM]`
    pub embedding: Vec<f64>,
    /// `[EMBED_DIM, 4·HIDDEN]`, gate order input, forget, cell, output
    pub w_input: Vec<f64>,
    /// `[HIDDEN, 4·HIDDEN]`
    pub w_hidden: Vec<f64>,
    /// `[4·HIDDEN]`
    pub bias: Vec<f64>,
    /// `[1, HIDDEN]`
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    max_blocks: usize,
    params: Vec<Tensor>,
}

fn vocab(max_blocks: usize) -> usize {
    max_blocks + 1 + 5
}

impl Surrogate {
    /// Fresh weights for cells of up to `max_blocks` blocks.
    pub fn new(max_blocks: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "surrogate-init", 0);
        let mut uniform = |shape: &[usize], scale: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect())
                .expect("sizes match")
        };
        let v = vocab(max_blocks);
        let embedding = uniform(&[v, EMBED_DIM], 1.0);
        let w_input = uniform(&[EMBED_DIM, 4 * HIDDEN], 1.0 / (EMBED_DIM as f64).sqrt());
        let w_hidden = uniform(&[HIDDEN, 4 * HIDDEN], 1.0 / (HIDDEN as f64).sqrt());
        let mut bias = Tensor::zeros(&[4 * HIDDEN]);
        bias.data_mut()[HIDDEN..2 * HIDDEN].fill(1.0);
        let w_out = uniform(&[1, HIDDEN], 1.0 / (HIDDEN as f64).sqrt());
        let b_out = Tensor::zeros(&[1]);
        Surrogate {
            max_blocks,
            params: vec![embedding, w_input, w_hidden, bias, w_out, b_out],
        }
    }

    pub fn max_blocks(&self) -> usize {
        self.max_blocks
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn token_ids(&self, cell: &CellSpec) -> Result<Vec<usize>> {
        if cell.len() > self.max_blocks || cell.is_empty() {
            return Err(Error::InvalidCell(format!(
                "{} blocks for a predictor sized for 1..={}",
                cell.len(),
                self.max_blocks
            )));
        }
        let n_inputs = self.max_blocks + 1;
        Ok(encode_cell(cell)
            .into_iter()
            .enumerate()
            .map(|(i, t)| if i % 2 == 0 { t } else { n_inputs + t })
            .collect())
    }

    /// Predictions `[batch, 1]` for equal-length token sequences.
    fn forward(tape: &mut Tape, p: &[Var], seqs: &[Vec<usize>]) -> Result<Var> {
        let batch = seqs.len();
        let len = seqs[0].len();
        let mut h = tape.constant(Tensor::zeros(&[batch, HIDDEN]));
        let mut c = tape.constant(Tensor::zeros(&[batch, HIDDEN]));
        for t in 0..len {
            let ids: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
            let x = tape.embedding(p[0], &ids)?;
            let zx = tape.matmul(x, p[1])?;
            let zh = tape.matmul(h, p[2])?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_bias(z, p[3])?;
            let gate = |tape: &mut Tape, k: usize| tape.slice_cols(z, k * HIDDEN, HIDDEN);
            let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
            let i = tape.sigmoid(i)?;
            let f = tape.sigmoid(f)?;
            let g = tape.tanh(g)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
        }
        let y = tape.linear(h, p[4], p[5])?;
        tape.sigmoid(y)
    }

    fn predict_ids(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let y = Self::forward(&mut tape, &p, seqs)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Predicted accuracy in (0, 1) for each cell, in input order.
    pub fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>> {
        let ids = cells.iter().map(|c| self.token_ids(c)).collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; cells.len()];
        for rows in buckets(&ids).values() {
            let seqs: Vec<Vec<usize>> = rows.iter().map(|&r| ids[r].clone()).collect();
            for chunk in rows.chunks(MAX_MINIBATCH).zip(seqs.chunks(MAX_MINIBATCH)) {
                for (&r, y) in chunk.0.iter().zip(self.predict_ids(chunk.1)?) {
                    out[r] = y;
                }
            }
        }
        Ok(out)
    }

    fn mse(&self, ids: &[Vec<usize>], targets: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for rows in buckets(ids).values() {
            let seqs: Vec<Vec<usize>> = rows.iter().map(|&r| ids[r].clone()).collect();
            for (y, &r) in self.predict_ids(&seqs)?.iter().zip(rows) {
                total += (y - targets[r]).powi(2);
            }
        }
        Ok(total / ids.len() as f64)
    }

    /// Trains fresh weights on `history` for `epochs` passes of Adam
    /// (lr 0.01) on mean squared error. Minibatches hold at most 32 cells of
    /// equal length; their order is shuffled from `seed`.
    pub fn fit(max_blocks: usize, history: &[(CellSpec, f64)], epochs: usize, seed: u64) -> Result<(Self, FitReport)> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if let Some((c, s)) = history.iter().find(|(_, s)| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config(format!("score {s} of {c} outside [0, 1]")));
        }
        let mut model = Surrogate::new(max_blocks, seed);
        let ids = history.iter().map(|(c, _)| model.token_ids(c)).collect::<Result<Vec<_>>>()?;
        let targets: Vec<f64> = history.iter().map(|(_, s)| *s).collect();
        let initial_loss = model.mse(&ids, &targets)?;
        let mut opt = OptimState::adam(LEARNING_RATE);
        let mut r = rng::stream(seed, "surrogate-batches", 0);
        let groups = buckets(&ids);
        for _ in 0..epochs {
            let mut batches: Vec<Vec<usize>> = Vec::new();
            for rows in groups.values() {
                let mut rows = rows.clone();
                rows.shuffle(&mut r);
                batches.extend(rows.chunks(MAX_MINIBATCH).map(<[usize]>::to_vec));
            }
            batches.shuffle(&mut r);
            for rows in batches {
                let seqs: Vec<Vec<usize>> = rows.iter().map(|&i| ids[i].clone()).collect();
                let y: Vec<f64> = rows.iter().map(|&i| targets[i]).collect();
                let mut tape = Tape::new();
                let p: Vec<Var> = model.params.iter().map(|t| tape.param(t.clone())).collect();
                let pred = Self::forward(&mut tape, &p, &seqs)?;
                let loss = tape.mse(pred, &y)?;
                let mut grads = tape.backward(loss)?;
                let g: Vec<Tensor> = p.iter().map(|&v| grads.take(v)).collect();
                opt.step(&mut model.params, &g)?;
            }
        }
        let final_loss = model.mse(&ids, &targets)?;
        Ok((
            model,
            FitReport {
                initial_loss,
                final_loss,
                epochs,
            },
        ))
    }

    pub fn weights(&self) -> SurrogateWeights {
        let flat = |i: usize| self.params[i].data().to_vec();
        SurrogateWeights {
            max_blocks: self.max_blocks,
            embedding: flat(0),
            w_input: flat(1),
            w_hidden: flat(2),
            bias: flat(3),
            w_out: flat(4),
            b_out: flat(5),
        }
    }

    pub fn from_weights(w: &SurrogateWeights) -> Result<Self> {
        let shapes = [
            vec![vocab(w.max_blocks), EMBED_DIM],
            vec![EMBED_DIM, 4 * HIDDEN],
            vec![HIDDEN, 4 * HIDDEN],
            vec![4 * HIDDEN],
            vec![1, HIDDEN],
            vec![1],
        ];
        let data = [&w.embedding, &w.w_input, &w.w_hidden, &w.bias, &w.w_out, &w.b_out];
        let params = shapes
            .into_iter()
            .zip(data)
            .map(|(s, d)| Tensor::new(s, d.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Surrogate {
            max_blocks: w.max_blocks,
            params,
        })
    }
}

/// Row indices grouped by sequence length.
fn buckets(ids: &[Vec<usize>]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ids.iter().enumerate() {
        out.entry(s.len()).or_default().push(i);
    }
    out
}
