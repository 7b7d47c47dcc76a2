//! Multi-round active learning loops for the pool and streaming regimes.
//!
//! Each round the engine hands the current candidates (every record whose
//! tuple is still hidden in the pool regime, or the round's stream batch in
//! the streaming regime) to a [`Strategy`], checks every proposed record
//! against that candidate set, pays the oracle, retrains, and evaluates.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{pool_round, AcquisitionOptions, RoundOutcome, RoundState};
use crate::baselines::{claim, coreset_round, random_round, uncertainty_ranking, Pick, CANONICAL_MODALITY};
use crate::embedding::{EmbeddingBatch, EvalCounter, RecordId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, margin_case_study, MarginCaseStudy, MetricsSnapshot};
use crate::model::{train, ModelConfig, TrainConfig, TrainingPairs, TwoTowerModel};
use crate::world::{
    generate_sibling, generate_world, load_world, AnnotationSet, GeneratedWorld, StreamPartition, UnalignedPool,
    WorldSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Pool,
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ours,
    Random,
    Coreset,
    Uncertainty,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Ours => "ours",
            StrategyKind::Random => "random",
            StrategyKind::Coreset => "coreset",
            StrategyKind::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Random,
    /// Towers pre-trained on every pair of a sibling world that shares the
    /// modality projections but not the items.
    PretrainedSurrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSource {
    Spec(WorldSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub regime: Regime,
    pub strategy: StrategyKind,
    /// Run label in outputs; defaults to the strategy name.
    #[serde(default)]
    pub label: Option<String>,
    /// Number of rounds `T`.
    pub rounds: usize,
    /// Pairs annotated per round `B`.
    pub budget: usize,
    /// Coreset size `B_C`.
    pub coreset_size: usize,
    pub world: WorldSource,
    /// Derive the world seed from each run seed.
    #[serde(default)]
    pub vary_world_with_seed: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub init: InitKind,
    /// Training used for the surrogate initialization.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub acquisition: AcquisitionOptions,
    /// Continue training from the previous round's model.
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Explicit stream batch sizes; balanced when absent.
    #[serde(default)]
    pub stream_sizes: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.strategy.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        if self.coreset_size < self.budget {
            return bad(format!(
                "coreset_size {} must be >= budget {}",
                self.coreset_size, self.budget
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        if let WorldSource::Spec(spec) = &self.world {
            spec.validate()?;
            self.check_world_size(spec.pool_size(), spec.num_modalities())?;
        }
        if let Some(sizes) = &self.stream_sizes {
            if sizes.len() != self.rounds {
                return bad(format!(
                    "{} stream sizes given for {} rounds",
                    sizes.len(),
                    self.rounds
                ));
            }
        }
        Ok(())
    }

    fn check_world_size(&self, pool: usize, modalities: usize) -> Result<()> {
        if self.budget * self.rounds > pool {
            return Err(Error::InvalidConfig(format!(
                "total budget {}x{} exceeds the pool of {pool}",
                self.rounds, self.budget
            )));
        }
        if let ModalityRuleCheck::Bad(k) = ModalityRuleCheck::of(&self.acquisition, modalities) {
            return Err(Error::InvalidConfig(format!("fixed modality {k} does not exist")));
        }
        if self.regime == Regime::Streaming {
            if self.rounds > pool {
                return Err(Error::InvalidConfig("more stream batches than pool items".into()));
            }
            if let Some(sizes) = &self.stream_sizes {
                if sizes.iter().sum::<usize>() != pool {
                    return Err(Error::InvalidConfig(format!("stream sizes must sum to {pool}")));
                }
            }
        }
        Ok(())
    }
}

enum ModalityRuleCheck {
    Ok,
    Bad(usize),
}

impl ModalityRuleCheck {
    fn of(options: &AcquisitionOptions, m: usize) -> Self {
        match options.modality_rule {
            crate::acquisition::ModalityRule::Fixed(k) if k >= m => Self::Bad(k),
            _ => Self::Ok,
        }
    }
}

/// Everything a strategy may look at in one round. The oracle is absent.
pub struct RoundContext<'a> {
    pub round: usize,
    /// Sorted candidate ids per modality.
    pub candidates: &'a [Vec<RecordId>],
    pub annotations: &'a AnnotationSet,
    pub pool: &'a UnalignedPool,
    pub model: &'a TwoTowerModel,
    pub budget: usize,
    pub coreset_size: usize,
    pub options: &'a AcquisitionOptions,
    pub counter: &'a EvalCounter,
}

impl RoundContext<'_> {
    /// Model embeddings of the candidates and of the annotated records.
    pub fn round_state(&self) -> Result<RoundState> {
        let m = self.pool.num_modalities();
        let mut unaligned = Vec::with_capacity(m);
        let mut annotated = Vec::with_capacity(m);
        for k in 0..m {
            unaligned.push(self.model.encode_records(self.pool, k, &self.candidates[k])?);
            let ids = self.annotations.records(k);
            annotated.push(if ids.is_empty() {
                EmbeddingBatch::empty(self.model.out_dim())
            } else {
                self.model.encode_records(self.pool, k, &ids)?
            });
        }
        Ok(RoundState {
            round: self.round,
            unaligned,
            annotated,
            budget: self.budget,
            coreset_size: self.coreset_size,
        })
    }
}

/// A ranked proposal; the engine claims from the front until `B` tuples
/// are revealed.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ranking: Vec<Pick>,
    pub outcome: Option<RoundOutcome>,
}

pub trait Strategy {
    fn select(&mut self, ctx: &RoundContext<'_>, rng: &mut ChaCha8Rng) -> Result<Selection>;
}

pub struct Ours;
pub struct RandomPairs;
pub struct CoresetOnly;
pub struct UncertaintyOnly;

fn picks_of(outcome: &RoundOutcome) -> Vec<Pick> {
    outcome
        .selected
        .iter()
        .map(|&s| Pick::from_scored(outcome.modality, s))
        .collect()
}

impl Strategy for Ours {
    fn select(&mut self, ctx: &RoundContext<'_>, rng: &mut ChaCha8Rng) -> Result<Selection> {
        let outcome = pool_round(&ctx.round_state()?, ctx.options, ctx.counter, rng)?;
        Ok(Selection {
            ranking: picks_of(&outcome),
            outcome: Some(outcome),
        })
    }
}

impl Strategy for RandomPairs {
    fn select(&mut self, ctx: &RoundContext<'_>, rng: &mut ChaCha8Rng) -> Result<Selection> {
        Ok(Selection {
            ranking: random_round(&ctx.candidates[CANONICAL_MODALITY], ctx.budget, rng),
            outcome: None,
        })
    }
}

impl Strategy for CoresetOnly {
    fn select(&mut self, ctx: &RoundContext<'_>, rng: &mut ChaCha8Rng) -> Result<Selection> {
        let outcome = coreset_round(&ctx.round_state()?, ctx.options, ctx.counter, rng)?;
        Ok(Selection {
            ranking: picks_of(&outcome),
            outcome: Some(outcome),
        })
    }
}

impl Strategy for UncertaintyOnly {
    fn select(&mut self, ctx: &RoundContext<'_>, _rng: &mut ChaCha8Rng) -> Result<Selection> {
        let m = ctx.pool.num_modalities();
        let unaligned = (0..m)
            .map(|k| ctx.model.encode_records(ctx.pool, k, &ctx.candidates[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Selection {
            ranking: uncertainty_ranking(&unaligned, ctx.options.normalize_similarity, ctx.counter)?,
            outcome: None,
        })
    }
}

pub fn strategy_for(kind: StrategyKind) -> Box<dyn Strategy> {
    match kind {
        StrategyKind::Ours => Box::new(Ours),
        StrategyKind::Random => Box::new(RandomPairs),
        StrategyKind::Coreset => Box::new(CoresetOnly),
        StrategyKind::Uncertainty => Box::new(UncertaintyOnly),
    }
}

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub seed: u64,
    pub strategy: String,
    pub round: usize,
    /// Candidates offered per modality.
    pub candidates: Vec<usize>,
    pub modality: Option<usize>,
    /// Coverage per modality; `null` while nothing is annotated.
    pub coverages: Vec<Option<f64>>,
    pub coreset: Vec<RecordId>,
    pub coreset_short: bool,
    pub selected: Vec<Pick>,
    pub dist_evals: u64,
    pub sim_evals: u64,
    pub annotated: usize,
    pub exhausted: bool,
    pub fallback: bool,
    pub trained: bool,
    pub loss: Option<f64>,
    pub metrics: MetricsSnapshot,
    /// Margins of correct versus incorrect pseudo-matches over the records
    /// still unaligned after this round.
    pub case_study: Option<MarginCaseStudy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub strategy: String,
    pub initial: MetricsSnapshot,
    pub rounds: Vec<RoundRecord>,
    /// The run stopped before `T` rounds.
    pub truncated: bool,
    pub stream: Option<StreamPartition>,
    #[serde(skip)]
    pub model: Option<TwoTowerModel>,
}

impl SeedRun {
    pub fn final_metrics(&self) -> MetricsSnapshot {
        self.rounds.last().map_or(self.initial, |r| r.metrics)
    }

    /// Metrics rows, starting with the untrained round 0.
    pub fn metrics(&self) -> impl Iterator<Item = MetricsSnapshot> + '_ {
        std::iter::once(self.initial).chain(self.rounds.iter().map(|r| r.metrics))
    }

    pub fn any_exhausted(&self) -> bool {
        self.truncated || self.rounds.iter().any(|r| r.exhausted)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    pub fn any_exhausted(&self) -> bool {
        self.runs.iter().any(SeedRun::any_exhausted)
    }
}

/// SplitMix64 finalizer, used to derive independent per-purpose seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_WORLD: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_STRATEGY: u64 = 3;
const TAG_STREAM: u64 = 4;
const TAG_TRAIN: u64 = 5;
const TAG_SIBLING: u64 = 6;

/// The world a given run seed uses.
pub fn world_for_seed(config: &ExperimentConfig, seed: u64) -> Result<GeneratedWorld> {
    let world = match &config.world {
        WorldSource::Spec(spec) => {
            let mut spec = spec.clone();
            if config.vary_world_with_seed {
                spec.seed = mix_seed(spec.seed, mix_seed(seed, TAG_WORLD));
            }
            generate_world(&spec)?
        }
        WorldSource::Path(dir) => load_world(dir)?,
    };
    config.check_world_size(world.pool.len(), world.pool.num_modalities())?;
    Ok(world)
}

/// The round-0 model for a run seed.
pub fn initial_model(config: &ExperimentConfig, world: &GeneratedWorld, seed: u64) -> Result<TwoTowerModel> {
    let raw = world.pool.raw_dims();
    let model = TwoTowerModel::random(&raw, &config.model, mix_seed(seed, TAG_INIT))?;
    match config.init {
        InitKind::Random => Ok(model),
        InitKind::PretrainedSurrogate => {
            let sibling = generate_sibling(&world.spec, mix_seed(world.spec.seed, mix_seed(seed, TAG_SIBLING)))?;
            let mut oracle = sibling.oracle.clone();
            let mut all = AnnotationSet::new(sibling.pool.num_modalities(), sibling.pool.len());
            for r in 0..sibling.pool.len() {
                all.insert(oracle.annotate(0, r)?)?;
            }
            let pairs = TrainingPairs::from_annotations(&sibling.pool, &all)?;
            let mut tc = config.pretrain.clone().unwrap_or_else(|| config.train.clone());
            tc.seed = mix_seed(tc.seed, mix_seed(seed, TAG_SIBLING));
            Ok(train(&model, &pairs, &tc)?.model)
        }
    }
}

/// Runs every seed of `config` (concurrently, one thread per seed).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let runs = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let world = world_for_seed(config, seed)?;
                    run_seed(config, &world, seed, strategy_for(config.strategy).as_mut())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
    })
}

pub fn run_pool(config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.regime != Regime::Pool {
        return Err(Error::InvalidConfig("run_pool needs regime = pool".into()));
    }
    run_experiment(config)
}

pub fn run_streaming(config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.regime != Regime::Streaming {
        return Err(Error::InvalidConfig("run_streaming needs regime = streaming".into()));
    }
    run_experiment(config)
}

/// One seed of one configuration with an explicit strategy.
pub fn run_seed(
    config: &ExperimentConfig,
    world: &GeneratedWorld,
    seed: u64,
    strategy: &mut dyn Strategy,
) -> Result<SeedRun> {
    config.validate()?;
    config.check_world_size(world.pool.len(), world.pool.num_modalities())?;
    let m = world.pool.num_modalities();
    let n = world.pool.len();
    let view = world.oracle.view();
    let mut oracle = world.oracle.clone();
    let mut annotations = AnnotationSet::new(m, n);
    let counter = EvalCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_STRATEGY));
    let label = config.label();

    let stream = match config.regime {
        Regime::Pool => None,
        Regime::Streaming => {
            let s = mix_seed(seed, TAG_STREAM);
            Some(match &config.stream_sizes {
                Some(sizes) => oracle.partition_stream_sizes(sizes, s)?,
                None => oracle.partition_stream(config.rounds, s)?,
            })
        }
    };

    let init = initial_model(config, world, seed)?;
    let mut model = init.clone();
    let initial = evaluate(&model, &world.pool, &world.test, &view, 0, 0)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut truncated = false;

    for t in 1..=config.rounds {
        let candidates: Vec<Vec<RecordId>> = (0..m)
            .map(|k| {
                let offered: Vec<RecordId> = match &stream {
                    None => (0..n).collect(),
                    Some(p) => p.batch(t - 1)[k].clone(),
                };
                offered.into_iter().filter(|&r| !annotations.contains(k, r)).collect()
            })
            .collect();
        if candidates.iter().any(Vec::is_empty) {
            log::warn!("seed {seed}: no candidates left at round {t}; stopping");
            truncated = true;
            break;
        }

        let start = counter.snapshot();
        let selection = {
            let ctx = RoundContext {
                round: t,
                candidates: &candidates,
                annotations: &annotations,
                pool: &world.pool,
                model: &model,
                budget: config.budget,
                coreset_size: config.coreset_size,
                options: &config.acquisition,
                counter: &counter,
            };
            strategy.select(&ctx, &mut rng)?
        };
        for p in &selection.ranking {
            let inside = candidates.get(p.modality).is_some_and(|c| c.binary_search(&p.id).is_ok());
            if !inside {
                return Err(Error::OutsideCandidates {
                    round: t,
                    modality: p.modality,
                    id: p.id,
                });
            }
        }
        let counts = counter.snapshot().since(start);
        let before = annotations.len();
        let claimed = claim(&selection.ranking, config.budget, &mut oracle, &mut annotations)?;
        debug_assert_eq!(annotations.len(), before + claimed.picks.len());
        let exhausted = claimed.picks.len() < config.budget
            || selection.outcome.as_ref().is_some_and(|o| o.exhausted);
        if exhausted {
            log::warn!(
                "seed {seed} round {t}: claimed {} of {} pairs",
                claimed.picks.len(),
                config.budget
            );
        }

        let (trained, loss) = if annotations.len() >= 2 {
            let pairs = TrainingPairs::from_annotations(&world.pool, &annotations)?;
            let mut tc = config.train.clone();
            tc.seed = mix_seed(mix_seed(tc.seed, mix_seed(seed, TAG_TRAIN)), t as u64);
            let base = if config.warm_start { &model } else { &init };
            let out = train(base, &pairs, &tc)?;
            model = out.model;
            (true, out.loss_history.last().copied())
        } else {
            log::info!("seed {seed} round {t}: fewer than 2 annotated pairs, training skipped");
            (false, None)
        };

        let metrics = evaluate(&model, &world.pool, &world.test, &view, t, oracle.cost_spent())?;
        let remaining: Vec<Vec<RecordId>> = (0..2)
            .map(|k| (0..n).filter(|&r| !annotations.contains(k, r)).collect())
            .collect();
        let case_study = if remaining.iter().all(|r| r.len() >= 2) {
            Some(margin_case_study(&model, &world.pool, &view, &remaining[0], &remaining[1])?)
        } else {
            None
        };
        let outcome = selection.outcome;
        rounds.push(RoundRecord {
            seed,
            strategy: label.clone(),
            round: t,
            candidates: candidates.iter().map(Vec::len).collect(),
            modality: outcome.as_ref().map(|o| o.modality),
            coverages: outcome
                .as_ref()
                .map(|o| o.coverages.iter().map(|&c| c.is_finite().then_some(c)).collect())
                .unwrap_or_default(),
            coreset: outcome.as_ref().map(|o| o.coreset.ids.clone()).unwrap_or_default(),
            coreset_short: outcome.as_ref().is_some_and(|o| o.coreset.short),
            selected: claimed.picks,
            dist_evals: counts.dist_evals,
            sim_evals: counts.sim_evals,
            annotated: annotations.len(),
            exhausted,
            fallback: outcome.as_ref().is_some_and(|o| o.fallback),
            trained,
            loss,
            metrics,
            case_study,
        });
        if exhausted && config.regime == Regime::Pool {
            truncated = t < config.rounds;
            break;
        }
    }

    Ok(SeedRun {
        seed,
        strategy: label,
        initial,
        rounds,
        truncated,
        stream,
        model: Some(model),
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    seed: u64,
    strategy: &'a str,
    round: usize,
    cost: usize,
    r1_i2t: f64,
    r1_t2i: f64,
    match_acc: f64,
    dist_evals: u64,
    sim_evals: u64,
}

/// Appends the `metrics.csv` rows of `runs` to `w`.
pub fn write_metrics<W: std::io::Write>(w: &mut csv::Writer<W>, runs: &[SeedRun]) -> Result<()> {
    for run in runs {
        let evals = std::iter::once((0, 0)).chain(run.rounds.iter().map(|r| (r.dist_evals, r.sim_evals)));
        for (m, (dist_evals, sim_evals)) in run.metrics().zip(evals) {
            w.serialize(MetricsRow {
                seed: run.seed,
                strategy: &run.strategy,
                round: m.round,
                cost: m.cost,
                r1_i2t: m.r1_i2t,
                r1_t2i: m.r1_t2i,
                match_acc: m.match_acc,
                dist_evals,
                sim_evals,
            })?;
        }
    }
    Ok(())
}

/// Writes `rounds.jsonl`, `metrics.csv`, `result.json` and one model
/// checkpoint per seed into `dir`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("rounds.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for run in &result.runs {
        for r in &run.rounds {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    f.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    write_metrics(&mut w, &result.runs)?;
    w.flush().map_err(|e| Error::io(&path, e))?;

    for run in &result.runs {
        if let Some(model) = &run.model {
            model.save(&dir.join(format!("model_seed{}.json", run.seed)))?;
        }
    }

    let path = dir.join("result.json");
    let text = serde_json::to_string_pretty(result)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::world::tests::spec;

    pub(crate) fn config(strategy: StrategyKind, regime: Regime) -> ExperimentConfig {
        ExperimentConfig {
            regime,
            strategy,
            label: None,
            rounds: 4,
            budget: 5,
            coreset_size: 10,
            world: WorldSource::Spec(spec(90, 3)),
            vary_world_with_seed: false,
            model: ModelConfig {
                out_dim: 4,
                depth: 0,
                hidden_dim: 0,
                init_temperature: 10.0,
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 0.1,
                weight_decay: 0.0,
                seed: 0,
                learn_temperature: true,
            },
            init: InitKind::Random,
            pretrain: None,
            seeds: vec![1, 2],
            acquisition: AcquisitionOptions::default(),
            warm_start: true,
            stream_sizes: None,
        }
    }

    #[test]
    fn budget_is_conserved_and_annotations_grow() {
        for kind in [
            StrategyKind::Ours,
            StrategyKind::Random,
            StrategyKind::Coreset,
            StrategyKind::Uncertainty,
        ] {
            let res = run_experiment(&config(kind, Regime::Pool)).unwrap();
            for run in &res.runs {
                assert_eq!(run.rounds.len(), 4);
                let mut total = 0;
                for r in &run.rounds {
                    assert_eq!(r.selected.len(), 5, "{kind:?}");
                    total += r.selected.len();
                    assert_eq!(r.annotated, total);
                    assert_eq!(r.metrics.cost, total);
                }
                assert!(!run.any_exhausted());
            }
        }
    }

    #[test]
    fn identical_configs_give_identical_results() {
        let cfg = config(StrategyKind::Ours, Regime::Pool);
        let a = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_budget_in_one_round_equals_passive_training() {
        let mut cfg = config(StrategyKind::Random, Regime::Pool);
        cfg.rounds = 1;
        cfg.budget = 81;
        cfg.coreset_size = 81;
        cfg.seeds = vec![4];
        let run = &run_experiment(&cfg).unwrap().runs[0];
        assert_eq!(run.rounds[0].annotated, 81);

        // skyline: every pool pair, trained once from the same start
        let world = world_for_seed(&cfg, 4).unwrap();
        let mut oracle = world.oracle.clone();
        let mut all = AnnotationSet::new(2, world.pool.len());
        for p in &run.rounds[0].selected {
            all.insert(oracle.annotate(p.modality, p.id).unwrap()).unwrap();
        }
        let pairs = TrainingPairs::from_annotations(&world.pool, &all).unwrap();
        let mut tc = cfg.train.clone();
        tc.seed = mix_seed(mix_seed(tc.seed, mix_seed(4, TAG_TRAIN)), 1);
        let model = train(&initial_model(&cfg, &world, 4).unwrap(), &pairs, &tc).unwrap().model;
        let acc = crate::eval::match_accuracy(&model, &world.pool, &world.oracle.view(), 0, 1).unwrap();
        assert_eq!(run.rounds[0].metrics.match_acc, acc);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = config(StrategyKind::Ours, Regime::Pool);
        cfg.coreset_size = 2;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = config(StrategyKind::Ours, Regime::Pool);
        cfg.budget = 30;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = config(StrategyKind::Ours, Regime::Pool);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn streaming_selects_only_from_the_current_batch() {
        let cfg = config(StrategyKind::Ours, Regime::Streaming);
        let res = run_streaming(&cfg).unwrap();
        for run in &res.runs {
            let stream = run.stream.as_ref().unwrap();
            let mut seen = std::collections::HashSet::new();
            for r in &run.rounds {
                let batch = stream.batch(r.round - 1);
                for p in &r.selected {
                    assert!(batch[p.modality].contains(&p.id));
                    assert!(seen.insert((p.modality, p.id)));
                }
            }
        }
        assert!(run_pool(&cfg).is_err());
    }

    /// Proposes its first round's records again in every later round.
    struct Revisit {
        first: Vec<Pick>,
    }

    impl Strategy for Revisit {
        fn select(&mut self, ctx: &RoundContext<'_>, _rng: &mut ChaCha8Rng) -> Result<Selection> {
            if self.first.is_empty() {
                self.first = ctx.candidates[0][..ctx.budget]
                    .iter()
                    .map(|&id| Pick {
                        modality: 0,
                        id,
                        margin: None,
                    })
                    .collect();
            }
            Ok(Selection {
                ranking: self.first.clone(),
                outcome: None,
            })
        }
    }

    #[test]
    fn revisiting_strategy_is_rejected() {
        for regime in [Regime::Streaming, Regime::Pool] {
            let cfg = config(StrategyKind::Ours, regime);
            let world = world_for_seed(&cfg, 1).unwrap();
            let err = run_seed(&cfg, &world, 1, &mut Revisit { first: Vec::new() }).unwrap_err();
            assert!(matches!(err, Error::OutsideCandidates { round: 2, .. }), "{err}");
        }
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(StrategyKind::Ours, Regime::Pool);
        cfg.seeds = vec![7];
        let res = run_experiment(&cfg).unwrap();
        write_outputs(dir.path(), &res).unwrap();
        let jsonl = fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 4);
        // the first round has nothing annotated, so coverages are null
        assert!(jsonl.lines().next().unwrap().contains("\"coverages\":[null,null]"));
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "seed,strategy,round,cost,r1_i2t,r1_t2i,match_acc,dist_evals,sim_evals"
        );
        assert_eq!(csv.lines().count(), 6);
        assert!(TwoTowerModel::load(&dir.path().join("model_seed7.json")).is_ok());
    }

    #[test]
    fn surrogate_init_beats_random_init() {
        let mut cfg = config(StrategyKind::Ours, Regime::Pool);
        cfg.pretrain = Some(TrainConfig {
            epochs: 100,
            learning_rate: 0.05,
            ..cfg.train.clone()
        });
        let world = world_for_seed(&cfg, 1).unwrap();
        let view = world.oracle.view();
        let random = initial_model(&cfg, &world, 1).unwrap();
        cfg.init = InitKind::PretrainedSurrogate;
        let pre = initial_model(&cfg, &world, 1).unwrap();
        let acc = |m: &TwoTowerModel| crate::eval::match_accuracy(m, &world.pool, &view, 0, 1).unwrap();
        assert!(acc(&pre) > acc(&random));
    }
}
