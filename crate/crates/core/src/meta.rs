//! Reptile: inner-loop adaptation on a task's support set, an outer update
//! that moves the meta-parameters toward the adapted ones, and episodic
//! evaluation with or without transduction.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, ClassDataset, Episode, LabeledBatch};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::{ModelState, Network};
use crate::optim::{OptimKind, OptimState};
use crate::rng::{self, StreamRng};
use crate::stats::mean_ci95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterSchedule {
    Constant,
    /// `ε_t = ε_0 · (1 − t / T)`
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_iterations: usize,
    pub inner_batch: usize,
    pub inner_lr: f64,
    pub inner_optimizer: OptimKind,
    pub meta_batch: usize,
    pub outer_step: f64,
    pub outer_schedule: OuterSchedule,
    pub outer_iterations: usize,
    pub transduction: bool,
    pub eval_inner_iterations: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Support images per class in meta-training tasks. Defaults to `k_shot`.
    pub train_shots: Option<usize>,
    pub query_per_class: usize,
    /// Outer iterations between trace evaluations, 0 for none.
    pub eval_interval: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_iterations: 8,
            inner_batch: 10,
            inner_lr: 0.001,
            inner_optimizer: OptimKind::Adam,
            meta_batch: 5,
            outer_step: 1.0,
            outer_schedule: OuterSchedule::Linear,
            outer_iterations: 1000,
            transduction: false,
            eval_inner_iterations: 8,
            n_way: 5,
            k_shot: 1,
            train_shots: None,
            query_per_class: 15,
            eval_interval: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("inner_batch", self.inner_batch),
            ("meta_batch", self.meta_batch),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("train_shots", self.train_shots()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.outer_step > 0.0 && self.outer_step <= 1.0) {
            return Err(Error::Config(format!("outer_step {} not in (0, 1]", self.outer_step)));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return Err(Error::Config(format!("inner_lr {} must be positive", self.inner_lr)));
        }
        Ok(())
    }

    pub fn train_shots(&self) -> usize {
        self.train_shots.unwrap_or(self.k_shot)
    }

    /// Outer step size at iteration `t`.
    pub fn outer_step_at(&self, t: usize) -> f64 {
        match self.outer_schedule {
            OuterSchedule::Constant => self.outer_step,
            OuterSchedule::Linear => {
                self.outer_step * (1.0 - t as f64 / self.outer_iterations.max(1) as f64)
            }
        }
    }
}

/// Adapts a copy of `theta` to `support` with `iterations` optimizer steps.
/// Each step uses the whole support set when it fits in `inner_batch`,
/// otherwise `inner_batch` images drawn with replacement. Batch norm runs in
/// training mode, so the copy's running statistics move too.
pub fn inner_adapt<R: Rng + ?Sized>(
    net: &Network,
    theta: &ModelState,
    support: &LabeledBatch,
    cfg: &MetaConfig,
    iterations: usize,
    rng: &mut R,
) -> Result<ModelState> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut phi = theta.clone();
    let mut opt = OptimState::new(cfg.inner_optimizer, cfg.inner_lr);
    let n = support.len();
    for _ in 0..iterations {
        let (loss_input, labels) = if n <= cfg.inner_batch {
            (support.images.clone(), support.labels.clone())
        } else {
            let rows: Vec<usize> = (0..cfg.inner_batch).map(|_| rng.gen_range(0..n)).collect();
            let b = support.select(&rows);
            (b.images, b.labels)
        };
        let (_, grads) = net.loss_and_grads(&mut phi, loss_input, &labels, Mode::Train)?;
        opt.step(&mut phi.params, &grads)?;
    }
    Ok(phi)
}

/// One meta-training task and the seed of its inner-loop sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub episode: Episode,
    pub seed: u64,
}

impl MetaTask {
    pub fn sample(dataset: &ClassDataset, cfg: &MetaConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "task", 0);
        let episode = sample_episode(dataset, cfg.n_way, cfg.train_shots(), 0, &mut r)?;
        Ok(MetaTask { episode, seed })
    }

    fn rng(&self) -> StreamRng {
        rng::stream(self.seed, "inner", 0)
    }
}

fn scaled_delta(theta: &[f64], phis: &[&[f64]], eps: f64, out: &mut [f64]) {
    let m = phis.len() as f64;
    for (i, (o, &t)) in out.iter_mut().zip(theta).enumerate() {
        let mut acc = 0.0;
        for p in phis {
            acc += p[i] - t;
        }
        *o = t + eps * (acc / m);
    }
}

/// `θ + ε · mean_j(φ_j − θ)` over parameters and running statistics.
pub fn interpolate(theta: &ModelState, phis: &[ModelState], eps: f64) -> ModelState {
    let mut next = theta.clone();
    for (i, p) in next.params.iter_mut().enumerate() {
        let views: Vec<&[f64]> = phis.iter().map(|s| s.params[i].data()).collect();
        scaled_delta(theta.params[i].data(), &views, eps, p.data_mut());
    }
    for (i, s) in next.bn.iter_mut().enumerate() {
        let means: Vec<&[f64]> = phis.iter().map(|p| p.bn[i].mean.data()).collect();
        scaled_delta(theta.bn[i].mean.data(), &means, eps, s.mean.data_mut());
        let vars: Vec<&[f64]> = phis.iter().map(|p| p.bn[i].var.data()).collect();
        scaled_delta(theta.bn[i].var.data(), &vars, eps, s.var.data_mut());
    }
    next
}

/// Adapts to every task (in parallel) and moves `theta` toward the mean of
/// the adapted states with step `eps`.
pub fn reptile_outer_step(
    net: &Network,
    theta: &ModelState,
    tasks: &[MetaTask],
    cfg: &MetaConfig,
    eps: f64,
) -> Result<ModelState> {
    if tasks.is_empty() {
        return Err(Error::Config("meta batch is empty".into()));
    }
    let phis = tasks
        .par_iter()
        .map(|t| inner_adapt(net, theta, &t.episode.support, cfg, cfg.inner_iterations, &mut t.rng()))
        .collect::<Result<Vec<_>>>()?;
    Ok(interpolate(theta, &phis, eps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub meta_test_acc: f64,
    pub ci95: f64,
    pub wall_seconds: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "outer_iter,meta_test_acc,ci95,wall_seconds";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.outer_iter, self.meta_test_acc, self.ci95, self.wall_seconds
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TraceRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trace: Vec<TraceRow>,
}

/// Runs `cfg.outer_iterations` Reptile steps on tasks drawn from `train`.
/// When `cfg.eval_interval > 0`, `trace_episodes` are evaluated every
/// interval and after the last step.
pub fn reptile_train(
    net: &Network,
    init: ModelState,
    train: &ClassDataset,
    trace_episodes: &[Episode],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut theta = init;
    let mut trace = Vec::new();
    let total = cfg.outer_iterations;
    for t in 0..total {
        let tasks = (0..cfg.meta_batch)
            .map(|j| MetaTask::sample(train, cfg, rng::stream_seed(seed, "meta-task", (t * cfg.meta_batch + j) as u64)))
            .collect::<Result<Vec<_>>>()?;
        theta = reptile_outer_step(net, &theta, &tasks, cfg, cfg.outer_step_at(t))?;
        let done = t + 1;
        let due = cfg.eval_interval > 0 && (done % cfg.eval_interval == 0 || done == total);
        if due && !trace_episodes.is_empty() {
            let (acc, ci) = evaluate_meta(net, &theta, trace_episodes, cfg, seed)?;
            trace.push(TraceRow {
                outer_iter: done,
                meta_test_acc: acc,
                ci95: ci,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainOutcome { state: theta, trace })
}

/// `count` evaluation episodes from held-out classes, reproducible from
/// `seed`.
pub fn sample_eval_episodes(dataset: &ClassDataset, cfg: &MetaConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "eval-episode", i as u64);
            sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.query_per_class, &mut r)
        })
        .collect()
}

/// Query accuracy of one episode after adapting a copy of `theta`.
pub fn episode_accuracy(net: &Network, theta: &ModelState, episode: &Episode, cfg: &MetaConfig, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "eval-inner", 0);
    let mut phi = inner_adapt(net, theta, &episode.support, cfg, cfg.eval_inner_iterations, &mut r)?;
    let mode = if cfg.transduction {
        Mode::EvalTransduction
    } else {
        Mode::EvalRunning
    };
    let predicted = net.predict(&mut phi, episode.query.images.clone(), mode)?;
    let correct = predicted
        .iter()
        .zip(&episode.query.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / episode.query.len().max(1) as f64)
}

/// Per-episode accuracies, evaluated in parallel.
pub fn evaluate_episodes(
    net: &Network,
    theta: &ModelState,
    episodes: &[Episode],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes.is_empty() {
        return Err(Error::NoEpisodes);
    }
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| episode_accuracy(net, theta, ep, cfg, rng::stream_seed(seed, "eval", i as u64)))
        .collect()
}

/// Mean query accuracy and its 95% confidence half-width. `theta` is never
/// modified: every episode adapts its own copy.
pub fn evaluate_meta(
    net: &Network,
    theta: &ModelState,
    episodes: &[Episode],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    Ok(mean_ci95(&evaluate_episodes(net, theta, episodes, cfg, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_reaches_zero() {
        let cfg = MetaConfig {
            outer_iterations: 4,
            outer_step: 0.8,
            ..MetaConfig::default()
        };
        assert_eq!(cfg.outer_step_at(0), 0.8);
        assert!((cfg.outer_step_at(2) - 0.4).abs() < 1e-15);
        assert_eq!(cfg.outer_step_at(4), 0.0);
        let constant = MetaConfig {
            outer_schedule: OuterSchedule::Constant,
            ..cfg
        };
        assert_eq!(constant.outer_step_at(3), 0.8);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let ok = MetaConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            MetaConfig { outer_step: 0.0, ..ok.clone() },
            MetaConfig { outer_step: 1.5, ..ok.clone() },
            MetaConfig { meta_batch: 0, ..ok.clone() },
            MetaConfig { inner_batch: 0, ..ok.clone() },
            MetaConfig { inner_lr: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn trace_rows_render() {
        let row = TraceRow {
            outer_iter: 10,
            meta_test_acc: 0.5,
            ci95: 0.01,
            wall_seconds: 1.23456,
        };
        assert_eq!(trace_csv(&[row]), "outer_iter,meta_test_acc,ci95,wall_seconds\n10,0.5,0.01,1.235\n");
    }
}
