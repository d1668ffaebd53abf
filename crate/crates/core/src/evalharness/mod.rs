//! Multi-seed evaluation: generate clarifications, keep instances that have
//! clarifications at every requested level, select under each restriction
//! and aggregate accuracy across seeds.

mod cache;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::cache::{CacheKey, CacheLookup, CachedBackend, DiskCache};
pub use self::report::{AggregateRow, EvalReport, NameBindingRow, SeedRow};

use crate::datasets::{load_dataset_with, DatasetError, LoadOptions};
use crate::lm_backend::{
    Backend, BackendError, HttpBackend, HttpConfig, LoggedBackend, RequestLog, ScoreMode,
    StubBackend, StubTable,
};
use crate::selection::{score_all, select, QaInstance, Restriction, ScoreMatrix, SelectionError, SelectionResult};
use crate::selftalk::{generate_clarifications, ClarificationSet, SelfTalkConfig};
use crate::taxonomy::{DatasetKind, PrefixRegistry, PrefixTemplate, RegistryError, TaxonomyLevel};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("seed {0} is listed more than once")]
    DuplicateSeed(u64),
    #[error("at least one level restriction is required")]
    NoLevels,
    #[error("restriction {0} is listed more than once")]
    DuplicateLevel(Restriction),
    #[error("{0}")]
    Params(BackendError),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("a data path is required")]
    NoDataPath,
    #[error("HTTP backend needs an endpoint and a model")]
    IncompleteHttp,
    #[error("no {dataset} prefix template has level {level}")]
    LevelWithoutTemplates {
        dataset: DatasetKind,
        level: TaxonomyLevel,
    },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("duplicate instance id `{0}`")]
    DuplicateInstanceId(String),
    #[error("cannot open cache directory {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("aborted during seed {seed} after {completed_seeds} completed seed(s): {source}")]
    Aborted {
        seed: u64,
        completed_seeds: usize,
        #[source]
        source: BackendError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Stub {
        #[serde(default = "default_stub_seed")]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<PathBuf>,
    },
    Http(HttpConfig),
}

fn default_stub_seed() -> u64 {
    7
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Stub {
            seed: default_stub_seed(),
            table: None,
        }
    }
}

/// Everything one evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_path: PathBuf,
    pub levels: Vec<Restriction>,
    pub seeds: Vec<u64>,
    pub backend: BackendConfig,
    pub selftalk: SelfTalkConfig,
    pub score_mode: ScoreMode,
    pub cache_dir: Option<PathBuf>,
    pub max_instances: Option<usize>,
    pub prefix_registry: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub skip_bad_lines: bool,
    pub workers: usize,
}

impl RunConfig {
    /// Defaults for `dataset`: the choice baseline plus every level up to
    /// the dataset's own, three seeds, the stub backend.
    pub fn new(dataset: DatasetKind, data_path: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            data_path: data_path.into(),
            levels: default_levels(dataset),
            seeds: DEFAULT_SEEDS.to_vec(),
            backend: BackendConfig::default(),
            selftalk: SelfTalkConfig::default(),
            score_mode: ScoreMode::Normalized,
            cache_dir: None,
            max_instances: None,
            prefix_registry: None,
            report_out: None,
            skip_bad_lines: false,
            workers: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::NoSeeds);
        }
        let mut seen = BTreeSet::new();
        for seed in &self.seeds {
            if !seen.insert(seed) {
                return Err(ConfigError::DuplicateSeed(*seed));
            }
        }
        if self.levels.is_empty() {
            return Err(ConfigError::NoLevels);
        }
        let mut seen = BTreeSet::new();
        for level in &self.levels {
            if !seen.insert(level) {
                return Err(ConfigError::DuplicateLevel(*level));
            }
        }
        self.selftalk
            .question_params
            .validate()
            .map_err(ConfigError::Params)?;
        self.selftalk
            .answer_params
            .validate()
            .map_err(ConfigError::Params)?;
        if self.workers == 0 {
            return Err(ConfigError::NoWorkers);
        }
        if self.data_path.as_os_str().is_empty() {
            return Err(ConfigError::NoDataPath);
        }
        if let BackendConfig::Http(http) = &self.backend {
            if http.endpoint.is_empty() || http.model.is_empty() {
                return Err(ConfigError::IncompleteHttp);
            }
        }
        Ok(())
    }

    /// The restriction carrying proximal context, if it was requested.
    pub fn proximal_restriction(&self) -> Option<Restriction> {
        let level = self.dataset.proximal_level().ok()?;
        self.levels
            .iter()
            .copied()
            .find(|r| *r == Restriction::Level(level))
    }

    /// Fails when a requested level has no template in `registry`, since
    /// every instance would then be invalid.
    pub fn check_registry(&self, registry: &[PrefixTemplate]) -> Result<(), ConfigError> {
        for level in required_levels(&self.levels) {
            if !registry.iter().any(|t| t.level == level) {
                return Err(ConfigError::LevelWithoutTemplates {
                    dataset: self.dataset,
                    level,
                });
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<Vec<PrefixTemplate>, RegistryError> {
        Ok(match &self.prefix_registry {
            Some(path) => PrefixRegistry::load(path)?.prefixes_for(self.dataset),
            None => PrefixRegistry::bundled().prefixes_for(self.dataset),
        })
    }

    pub fn load_instances(&self) -> Result<Vec<QaInstance>, HarnessError> {
        let loaded = load_dataset_with(
            &self.data_path,
            self.dataset,
            LoadOptions {
                skip_bad_lines: self.skip_bad_lines,
            },
        )?;
        if !loaded.skipped_lines.is_empty() {
            tracing::warn!("skipped {} malformed line(s)", loaded.skipped_lines.len());
        }
        let mut instances = loaded.instances;
        if let Some(cap) = self.max_instances {
            instances.truncate(cap);
        }
        let mut ids = BTreeSet::new();
        for instance in &instances {
            if !ids.insert(instance.id.as_str()) {
                return Err(HarnessError::DuplicateInstanceId(instance.id.clone()));
            }
        }
        Ok(instances)
    }
}

pub fn default_levels(dataset: DatasetKind) -> Vec<Restriction> {
    std::iter::once(Restriction::ChoiceBaseline)
        .chain(
            TaxonomyLevel::ALL
                .into_iter()
                .filter(|l| *l <= dataset.dataset_level())
                .map(Restriction::Level),
        )
        .collect()
}

/// Backend stack for a run: the configured model, a request log around it,
/// and the disk cache (if any) in front.
pub struct BackendStack {
    pub backend: Arc<dyn Backend>,
    pub log: Arc<RequestLog>,
}

pub fn build_backend(config: &RunConfig) -> Result<BackendStack, HarnessError> {
    let log = Arc::new(RequestLog::new());
    let base: Box<dyn Backend> = match &config.backend {
        BackendConfig::Stub { seed, table: None } => Box::new(StubBackend::hashed(*seed)),
        BackendConfig::Stub {
            table: Some(path), ..
        } => Box::new(StubBackend::table(StubTable::load(path)?)),
        BackendConfig::Http(http) => Box::new(HttpBackend::new(http.clone())?),
    };
    let logged = LoggedBackend::new(base, log.clone());
    let backend: Arc<dyn Backend> = match &config.cache_dir {
        Some(dir) => {
            let cache = DiskCache::open(dir).map_err(|source| HarnessError::Cache {
                path: dir.display().to_string(),
                source,
            })?;
            Arc::new(CachedBackend::new(logged, cache))
        }
        None => Arc::new(logged),
    };
    Ok(BackendStack { backend, log })
}

/// Taxonomy levels every valid instance must cover.
pub fn required_levels(restrictions: &[Restriction]) -> BTreeSet<TaxonomyLevel> {
    restrictions.iter().filter_map(|r| r.level()).collect()
}

/// Instances whose clarification set has at least one clarification at
/// every requested level. The choice baseline only needs a non-empty set.
pub fn filter_valid<'a>(
    instances: &'a [QaInstance],
    sets: &BTreeMap<String, ClarificationSet>,
    levels: &[Restriction],
) -> Vec<&'a QaInstance> {
    let required = required_levels(levels);
    instances
        .iter()
        .filter(|instance| {
            sets.get(&instance.id).is_some_and(|set| {
                !set.is_empty() && required.iter().all(|level| set.has_level(*level))
            })
        })
        .collect()
}

/// Clarifications, scores and selections for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceOutcome {
    pub instance_id: String,
    pub gold_index: usize,
    pub matrix: ScoreMatrix,
    pub selections: Vec<(Restriction, Option<SelectionResult>)>,
}

pub fn score_and_select(
    instance: &QaInstance,
    set: &ClarificationSet,
    backend: &dyn Backend,
    config: &RunConfig,
) -> Result<InstanceOutcome, SelectionError> {
    let matrix = score_all(instance, set, backend, config.score_mode)?;
    let selections = config
        .levels
        .iter()
        .map(|r| (*r, select(&matrix, *r)))
        .collect();
    Ok(InstanceOutcome {
        instance_id: instance.id.clone(),
        gold_index: instance.gold_index,
        matrix,
        selections,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Clarification sets for every instance under one seed, keyed by id.
pub fn generate_all(
    instances: &[QaInstance],
    registry: &[PrefixTemplate],
    backend: &dyn Backend,
    config: &RunConfig,
    seed: u64,
) -> Result<BTreeMap<String, ClarificationSet>, HarnessError> {
    let sets = pool(config.workers)?.install(|| {
        instances
            .par_iter()
            .map(|instance| {
                generate_clarifications(backend, instance, registry, seed, &config.selftalk)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(sets.into_iter().map(|s| (s.instance_id.clone(), s)).collect())
}

/// Runs every seed over `instances` and aggregates the results.
pub fn evaluate_instances(
    config: &RunConfig,
    instances: &[QaInstance],
    registry: &[PrefixTemplate],
    backend: &dyn Backend,
) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    config.check_registry(registry)?;
    let workers = pool(config.workers)?;
    let mut seed_rows = Vec::new();
    let mut name_rows = Vec::new();

    for (completed, &seed) in config.seeds.iter().enumerate() {
        let abort = |source: BackendError| HarnessError::Aborted {
            seed,
            completed_seeds: completed,
            source,
        };
        let sets = match generate_all(instances, registry, backend, config, seed) {
            Ok(sets) => sets,
            Err(HarnessError::Backend(err)) => return Err(abort(err)),
            Err(other) => return Err(other),
        };
        name_rows.push(NameBindingRow {
            seed,
            instances_affected: sets.values().filter(|s| !s.skipped_templates.is_empty()).count(),
            templates_skipped: sets.values().map(|s| s.skipped_templates.len()).sum(),
        });

        let valid = filter_valid(instances, &sets, &config.levels);
        let outcomes = workers
            .install(|| {
                valid
                    .par_iter()
                    .map(|instance| score_and_select(instance, &sets[&instance.id], backend, config))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map_err(|err| match err {
                SelectionError::Backend(source) => abort(source),
                other => abort(BackendError::Protocol(other.to_string())),
            })?;

        for restriction in &config.levels {
            let correct = outcomes
                .iter()
                .filter(|outcome| {
                    outcome
                        .selections
                        .iter()
                        .find(|(r, _)| r == restriction)
                        .and_then(|(_, s)| s.as_ref())
                        .is_some_and(|s| s.chosen_option == outcome.gold_index)
                })
                .count();
            seed_rows.push(SeedRow::new(config.dataset, *restriction, seed, correct, valid.len()));
        }
    }

    Ok(EvalReport::build(config, instances.len(), seed_rows, name_rows))
}

/// Loads the dataset and registry named by `config` and evaluates them with
/// `backend`.
pub fn evaluate(config: &RunConfig, backend: &dyn Backend) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    let instances = config.load_instances()?;
    let registry = config.registry()?;
    evaluate_instances(config, &instances, &registry, backend)
}

/// Clarifications, matrix and per-restriction selections for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub instance: QaInstance,
    pub seed: u64,
    pub clarifications: ClarificationSet,
    pub outcome: Option<InstanceOutcome>,
}

pub fn inspect_instance(
    config: &RunConfig,
    instance: &QaInstance,
    registry: &[PrefixTemplate],
    backend: &dyn Backend,
    seed: u64,
) -> Result<Inspection, HarnessError> {
    let clarifications =
        generate_clarifications(backend, instance, registry, seed, &config.selftalk)?;
    let outcome = if clarifications.is_empty() {
        None
    } else {
        Some(
            score_and_select(instance, &clarifications, backend, config).map_err(|e| match e {
                SelectionError::Backend(b) => HarnessError::Backend(b),
                other => HarnessError::Backend(BackendError::Protocol(other.to_string())),
            })?,
        )
    };
    Ok(Inspection {
        instance: instance.clone(),
        seed,
        clarifications,
        outcome,
    })
}
