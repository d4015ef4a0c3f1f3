//! Progressive cell search: exhaustive scoring of one-block cells, then
//! surrogate-ranked beam expansion one block at a time, with checkpoints
//! between stages and a final retraining of the winner.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{cell_depth, enumerate_expansions, CellSpec};
use crate::data::{Episode, FewShotSuite};
use crate::error::{Error, Result};
use crate::meta::{evaluate_meta, reptile_train, sample_eval_episodes, MetaConfig, TraceRow};
use crate::network::{compile_network, ModelState, NetworkSpec};
use crate::rng;
use crate::surrogate::{Surrogate, SurrogateWeights, DEFAULT_EPOCHS};

pub const STATE_VERSION: u32 = 1;

/// Reads only the `version` field so older files fail with a clear error
/// instead of a schema mismatch.
fn check_version(text: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = serde_json::from_str(text)?;
    if v.version != STATE_VERSION {
        return Err(Error::VersionMismatch {
            found: v.version,
            expected: STATE_VERSION,
        });
    }
    Ok(())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_blocks: usize,
    pub beam: usize,
    pub filters: usize,
    pub unroll: usize,
    pub feature_scale_rate: usize,
    pub n_stages: usize,
    /// Meta-learning settings used to score each candidate.
    pub meta: MetaConfig,
    pub eval_episodes: usize,
    pub global_seed: u64,
    pub workers: usize,
    pub surrogate_epochs: usize,
    /// Outer iterations of the final retraining.
    pub final_outer_iterations: usize,
    pub final_eval_episodes: usize,
    /// Outer iterations between trace rows of the final retraining.
    pub final_trace_interval: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_blocks: 5,
            beam: 5,
            filters: 4,
            unroll: 0,
            feature_scale_rate: 2,
            n_stages: 2,
            meta: MetaConfig::default(),
            eval_episodes: 50,
            global_seed: 0,
            workers: 1,
            surrogate_epochs: DEFAULT_EPOCHS,
            final_outer_iterations: 2000,
            final_eval_episodes: 200,
            final_trace_interval: 100,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_blocks", self.max_blocks),
            ("beam", self.beam),
            ("eval_episodes", self.eval_episodes),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        self.meta.validate()?;
        self.network_spec(CellSpec::from_json(r#"[[0,"id",0,"id"]]"#)?).validate()
    }

    pub fn network_spec(&self, cell: CellSpec) -> NetworkSpec {
        NetworkSpec {
            cell,
            filters: self.filters,
            unroll: self.unroll,
            feature_scale_rate: self.feature_scale_rate,
            n_stages: self.n_stages,
            n_classes: self.meta.n_way,
            in_channels: 1,
        }
    }
}

/// Scores one cell. Implementations must be deterministic in `(cell, seed)`.
pub trait CandidateScorer: Sync {
    fn score(&self, cell: &CellSpec, seed: u64) -> Result<f64>;
}

/// Predicts scores of untrained cells from the history so far.
pub trait Ranker {
    fn fit(&mut self, history: &[ScoredCell], seed: u64) -> Result<()>;
    fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>>;
    /// Serializable weights, if the ranker has any.
    fn weights(&self) -> Option<SurrogateWeights> {
        None
    }
    /// Restores weights saved by [`Ranker::weights`].
    fn restore(&mut self, _weights: &SurrogateWeights) -> Result<()> {
        Ok(())
    }
}

/// The LSTM predictor, retrained from scratch on every fit.
#[derive(Debug, Clone)]
pub struct LstmRanker {
    pub max_blocks: usize,
    pub epochs: usize,
    model: Option<Surrogate>,
}

impl LstmRanker {
    pub fn new(max_blocks: usize, epochs: usize) -> Self {
        LstmRanker {
            max_blocks,
            epochs,
            model: None,
        }
    }
}

impl Ranker for LstmRanker {
    fn fit(&mut self, history: &[ScoredCell], seed: u64) -> Result<()> {
        let pairs: Vec<(CellSpec, f64)> = history.iter().map(|s| (s.cell.clone(), s.score)).collect();
        self.model = Some(Surrogate::fit(self.max_blocks, &pairs, self.epochs, seed)?.0);
        Ok(())
    }

    fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>> {
        match &self.model {
            Some(m) => m.predict(cells),
            None => Err(Error::EmptyHistory),
        }
    }

    fn weights(&self) -> Option<SurrogateWeights> {
        self.model.as_ref().map(Surrogate::weights)
    }

    fn restore(&mut self, weights: &SurrogateWeights) -> Result<()> {
        self.model = Some(Surrogate::from_weights(weights)?);
        Ok(())
    }
}

/// Trains a candidate with Reptile and scores it by meta-test accuracy on a
/// fixed set of episodes shared by all candidates.
pub struct MetaScorer<'a> {
    suite: &'a FewShotSuite,
    config: &'a SearchConfig,
    episodes: Vec<Episode>,
}

impl<'a> MetaScorer<'a> {
    pub fn new(suite: &'a FewShotSuite, config: &'a SearchConfig) -> Result<Self> {
        let episodes = sample_eval_episodes(
            &suite.meta_test,
            &config.meta,
            config.eval_episodes,
            rng::stream_seed(config.global_seed, "search-eval", 0),
        )?;
        Ok(MetaScorer {
            suite,
            config,
            episodes,
        })
    }
}

impl CandidateScorer for MetaScorer<'_> {
    fn score(&self, cell: &CellSpec, seed: u64) -> Result<f64> {
        let (net, init) = compile_network(&self.config.network_spec(cell.clone()), seed)?;
        let trained = reptile_train(&net, init, &self.suite.meta_train, &[], &self.config.meta, seed)?;
        let (acc, _) = evaluate_meta(&net, &trained.state, &self.episodes, &self.config.meta, seed)?;
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCell {
    pub cell: CellSpec,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: usize,
    pub cell: CellSpec,
    pub error: String,
}

/// One candidate chosen for training at a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cell: CellSpec,
    /// Surrogate prediction, absent at stage 1.
    pub predicted: Option<f64>,
    /// Observed score, absent if training failed.
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Distinct cells available at this stage before selection.
    pub expansions: usize,
    pub trained: Vec<Candidate>,
    pub beam: Vec<ScoredCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngLineage {
    pub global_seed: u64,
    pub next_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub version: u32,
    pub config: SearchConfig,
    /// Number of completed stages, which is also the block count of the beam.
    pub stage: usize,
    pub beam: Vec<ScoredCell>,
    pub history: Vec<ScoredCell>,
    pub failures: Vec<Failure>,
    pub stages: Vec<StageRecord>,
    pub surrogate: Option<SurrogateWeights>,
    pub rng: RngLineage,
}

fn by_score_then_key(a: &(f64, String), b: &(f64, String)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Indices of the `k` highest scores, ties broken by ascending key.
fn top_k(scores: &[f64], keys: &[String], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| by_score_then_key(&(scores[i], keys[i].clone()), &(scores[j], keys[j].clone())));
    order.truncate(k);
    order
}

impl SearchState {
    pub fn new(config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let global_seed = config.global_seed;
        Ok(SearchState {
            version: STATE_VERSION,
            config,
            stage: 0,
            beam: Vec::new(),
            history: Vec::new(),
            failures: Vec::new(),
            stages: Vec::new(),
            surrogate: None,
            rng: RngLineage {
                global_seed,
                next_stage: 1,
            },
        })
    }

    pub fn is_complete(&self) -> bool {
        self.stage >= self.config.max_blocks
    }

    /// Highest observed score in the beam, ties broken by key.
    pub fn best(&self) -> Option<&ScoredCell> {
        let scores: Vec<f64> = self.beam.iter().map(|s| s.score).collect();
        let keys: Vec<String> = self.beam.iter().map(|s| s.cell.key()).collect();
        top_k(&scores, &keys, 1).first().map(|&i| &self.beam[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text)?;
        Ok(serde_json::from_str(text)?)
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Runs the next stage: pick candidates, score them, refit the ranker and
    /// update the beam.
    pub fn run_stage(&mut self, scorer: &dyn CandidateScorer, ranker: &mut dyn Ranker) -> Result<()> {
        if self.is_complete() {
            return Ok(());
        }
        let b = self.stage + 1;
        let max_blocks = self.config.max_blocks;
        let mut pool: BTreeMap<String, CellSpec> = BTreeMap::new();
        if b == 1 {
            for c in enumerate_expansions(&CellSpec::empty(), 0, max_blocks)? {
                pool.insert(c.key(), c);
            }
        } else {
            if let Some(w) = &self.surrogate {
                ranker.restore(w)?;
            }
            for parent in &self.beam {
                for c in enumerate_expansions(&parent.cell, b - 1, max_blocks)? {
                    pool.insert(c.key(), c);
                }
            }
        }
        let expansions = pool.len();
        let (keys, cells): (Vec<String>, Vec<CellSpec>) = pool.into_iter().unzip();
        let (chosen, predicted): (Vec<CellSpec>, Vec<Option<f64>>) = if b == 1 {
            (cells, vec![None; expansions])
        } else {
            let pred = ranker.predict(&cells)?;
            let mut picked: Vec<usize> = top_k(&pred, &keys, self.config.beam);
            picked.sort_by(|&i, &j| keys[i].cmp(&keys[j]));
            picked.iter().map(|&i| (cells[i].clone(), Some(pred[i]))).unzip()
        };

        let seed = self.config.global_seed;
        let results = score_all(&chosen, scorer, seed, self.config.workers)?;
        let mut trained = Vec::with_capacity(chosen.len());
        let mut scored = Vec::new();
        for ((cell, pred), result) in chosen.into_iter().zip(predicted).zip(results) {
            let observed = match result {
                Ok(s) if (0.0..=1.0).contains(&s) => Some(s),
                Ok(s) => {
                    self.failures.push(Failure {
                        stage: b,
                        cell: cell.clone(),
                        error: format!("score {s} outside [0, 1]"),
                    });
                    None
                }
                Err(e) => {
                    self.failures.push(Failure {
                        stage: b,
                        cell: cell.clone(),
                        error: e.to_string(),
                    });
                    None
                }
            };
            if let Some(score) = observed {
                scored.push(ScoredCell {
                    cell: cell.clone(),
                    score,
                });
            }
            trained.push(Candidate {
                cell,
                predicted: pred,
                observed,
            });
        }
        self.history.extend(scored.iter().cloned());
        if !self.history.is_empty() {
            ranker.fit(&self.history, rng::stream_seed(seed, "surrogate", b as u64))?;
            self.surrogate = ranker.weights();
        }
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let skeys: Vec<String> = scored.iter().map(|s| s.cell.key()).collect();
        self.beam = top_k(&scores, &skeys, self.config.beam)
            .into_iter()
            .map(|i| scored[i].clone())
            .collect();
        if self.beam.is_empty() {
            return Err(Error::InsufficientData(format!("every candidate failed at stage {b}")));
        }
        self.stages.push(StageRecord {
            stage: b,
            expansions,
            trained,
            beam: self.beam.clone(),
        });
        self.stage = b;
        self.rng.next_stage = b + 1;
        Ok(())
    }

    /// Runs the remaining stages, calling `after_stage` once each completes.
    pub fn run(
        &mut self,
        scorer: &dyn CandidateScorer,
        ranker: &mut dyn Ranker,
        mut after_stage: impl FnMut(&SearchState) -> Result<()>,
    ) -> Result<()> {
        while !self.is_complete() {
            self.run_stage(scorer, ranker)?;
            after_stage(self)?;
        }
        Ok(())
    }

    /// Mean cell depth of the beam after each stage.
    pub fn mean_depth_per_stage(&self) -> Vec<(usize, f64)> {
        self.stages
            .iter()
            .map(|s| {
                let total: usize = s.beam.iter().map(|c| cell_depth(&c.cell)).sum();
                (s.stage, total as f64 / s.beam.len().max(1) as f64)
            })
            .collect()
    }
}

/// Scores every cell on a pool of `workers` threads. Each cell trains with
/// the seed derived from its key, so the result does not depend on
/// scheduling; results come back in input order.
pub fn score_all(
    cells: &[CellSpec],
    scorer: &dyn CandidateScorer,
    global_seed: u64,
    workers: usize,
) -> Result<Vec<Result<f64>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|c| scorer.score(c, rng::candidate_seed(global_seed, &c.key())))
            .collect()
    }))
}

/// Full search from scratch with the default scorer and predictor.
pub fn run_pnas_search(
    suite: &FewShotSuite,
    config: SearchConfig,
    after_stage: impl FnMut(&SearchState) -> Result<()>,
) -> Result<(CellSpec, SearchState)> {
    let mut state = SearchState::new(config)?;
    resume_search(suite, &mut state, after_stage)?;
    let best = state.best().expect("a completed search has a beam").cell.clone();
    Ok((best, state))
}

/// Continues a search from a checkpointed state.
pub fn resume_search(
    suite: &FewShotSuite,
    state: &mut SearchState,
    after_stage: impl FnMut(&SearchState) -> Result<()>,
) -> Result<()> {
    let config = state.config.clone();
    let scorer = MetaScorer::new(suite, &config)?;
    let mut ranker = LstmRanker::new(config.max_blocks, config.surrogate_epochs);
    state.run(&scorer, &mut ranker, after_stage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalReport {
    pub cell: CellSpec,
    pub cell_depth: usize,
    pub param_count: usize,
    pub seed: u64,
    pub outer_iterations: usize,
    pub eval_episodes: usize,
    pub accuracy: f64,
    pub ci95: f64,
    pub accuracy_transduction: f64,
    pub ci95_transduction: f64,
}

#[derive(Debug, Clone)]
pub struct FinalOutcome {
    pub report: FinalReport,
    pub state: ModelState,
    pub spec: NetworkSpec,
    pub trace: Vec<TraceRow>,
}

/// Retrains `cell` with the final budget and a seed unrelated to any search
/// candidate, then evaluates with and without transduction on the same
/// episodes.
pub fn final_train(cell: &CellSpec, config: &SearchConfig, suite: &FewShotSuite) -> Result<FinalOutcome> {
    let seed = rng::stream_seed(config.global_seed, "final", 0);
    let meta = MetaConfig {
        outer_iterations: config.final_outer_iterations,
        eval_interval: config.final_trace_interval,
        ..config.meta.clone()
    };
    train_and_evaluate(cell, config, &meta, config.final_eval_episodes, suite, seed)
}

/// Trains `cell` from `seed` and evaluates it both ways.
pub fn train_and_evaluate(
    cell: &CellSpec,
    config: &SearchConfig,
    meta: &MetaConfig,
    eval_episodes: usize,
    suite: &FewShotSuite,
    seed: u64,
) -> Result<FinalOutcome> {
    let spec = config.network_spec(cell.clone());
    let (net, init) = compile_network(&spec, seed)?;
    let episodes = sample_eval_episodes(&suite.meta_test, meta, eval_episodes, rng::stream_seed(seed, "final-eval", 0))?;
    let trace_episodes = &episodes[..episodes.len().min(50)];
    let trained = reptile_train(&net, init, &suite.meta_train, trace_episodes, meta, seed)?;
    let plain = MetaConfig {
        transduction: false,
        ..meta.clone()
    };
    let trans = MetaConfig {
        transduction: true,
        ..meta.clone()
    };
    let (accuracy, ci95) = evaluate_meta(&net, &trained.state, &episodes, &plain, seed)?;
    let (accuracy_transduction, ci95_transduction) = evaluate_meta(&net, &trained.state, &episodes, &trans, seed)?;
    Ok(FinalOutcome {
        report: FinalReport {
            cell: cell.clone(),
            cell_depth: cell_depth(cell),
            param_count: net.param_count(),
            seed,
            outer_iterations: meta.outer_iterations,
            eval_episodes,
            accuracy,
            ci95,
            accuracy_transduction,
            ci95_transduction,
        },
        state: trained.state,
        spec,
        trace: trained.trace,
    })
}

/// A trained network with everything needed to evaluate it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub version: u32,
    pub spec: NetworkSpec,
    pub meta: MetaConfig,
    pub seed: u64,
    pub state: ModelState,
}

impl SavedModel {
    pub fn new(spec: NetworkSpec, meta: MetaConfig, seed: u64, state: ModelState) -> Self {
        SavedModel {
            version: STATE_VERSION,
            spec,
            meta,
            seed,
            state,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        check_version(&text)?;
        let model: SavedModel = serde_json::from_str(&text)?;
        let (net, _) = compile_network(&model.spec, 0)?;
        let shapes_match = net.param_shapes().len() == model.state.params.len()
            && net
                .param_shapes()
                .iter()
                .zip(&model.state.params)
                .all(|(s, p)| s.as_slice() == p.shape());
        if !shapes_match {
            return Err(Error::Config("saved parameters do not match the network spec".into()));
        }
        Ok(model)
    }
}
