//! Turning an abstract request into a concrete DAG, with optional reuse of
//! cached nodes and splicing of cached replacements.

mod explain;
mod model;
mod oracle;
mod search;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::BuildCache;
use crate::hash::DagHash;
use crate::repo::{CanSplice, Repo};
use crate::spec::{satisfies, AbstractSpec, ConcreteNode, ConcreteSpec};

pub use explain::{explain, explain_json};
pub use model::{Assignment, ChildAction, Choice};
pub use oracle::{oracle_solve, OracleLimits};

/// Costs compared lexicographically in field order; lower is better.
///
/// Version and variant preferences on nodes that must be built rank above the
/// build count, so a solve never drops a default variant or picks an old
/// version just to avoid a build. The same preferences summed over every node
/// rank below it, choosing among reusable candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Objective {
    pub built_version_penalty: usize,
    pub built_default_deviation: usize,
    pub builds: usize,
    pub version_penalty: usize,
    pub default_deviation: usize,
    pub splice_count: usize,
}

impl Objective {
    /// The cost one node contributes.
    pub(crate) fn node(built: bool, version_penalty: usize, default_deviation: usize) -> Objective {
        Objective {
            built_version_penalty: if built { version_penalty } else { 0 },
            built_default_deviation: if built { default_deviation } else { 0 },
            builds: built as usize,
            version_penalty,
            default_deviation,
            splice_count: 0,
        }
    }

    /// Componentwise minimum, a lower bound on both.
    pub(crate) fn floor(&self, other: &Objective) -> Objective {
        Objective {
            built_version_penalty: self.built_version_penalty.min(other.built_version_penalty),
            built_default_deviation: self.built_default_deviation.min(other.built_default_deviation),
            builds: self.builds.min(other.builds),
            version_penalty: self.version_penalty.min(other.version_penalty),
            default_deviation: self.default_deviation.min(other.default_deviation),
            splice_count: self.splice_count.min(other.splice_count),
        }
    }

    pub(crate) fn add(&mut self, other: &Objective) {
        self.built_version_penalty += other.built_version_penalty;
        self.built_default_deviation += other.built_default_deviation;
        self.builds += other.builds;
        self.version_penalty += other.version_penalty;
        self.default_deviation += other.default_deviation;
        self.splice_count += other.splice_count;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub target: String,
}

impl Default for Platform {
    fn default() -> Self {
        Platform {
            os: "centos8".into(),
            target: "skylake".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub reuse_enabled: bool,
    pub splice_enabled: bool,
    /// Caps the options tried per package. `None` keeps the search complete.
    pub max_candidates_per_node: Option<usize>,
    pub deterministic_seed: u64,
    /// Used when the request root names no os or target.
    pub platform: Platform,
    /// Per virtual, providers to prefer in order; the rest follow alphabetically.
    pub provider_preferences: BTreeMap<String, Vec<String>>,
    pub exclude: BTreeSet<String>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            reuse_enabled: true,
            splice_enabled: false,
            max_candidates_per_node: None,
            deterministic_seed: 0,
            platform: Platform::default(),
            provider_preferences: BTreeMap::new(),
            exclude: BTreeSet::new(),
        }
    }
}

impl SolveOptions {
    pub fn with_splicing() -> Self {
        SolveOptions {
            splice_enabled: true,
            ..Self::default()
        }
    }

    pub fn without_reuse() -> Self {
        SolveOptions {
            reuse_enabled: false,
            ..Self::default()
        }
    }
}

/// One cached child of a reused node swapped for a cached replacement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpliceDecision {
    pub parent_hash: DagHash,
    pub replaced_name: String,
    pub replaced_hash: DagHash,
    pub replacement_hash: DagHash,
    /// The replacement came along with its own cached dependencies unchanged.
    pub transitive: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub decisions: u64,
    pub backtracks: u64,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub spec: ConcreteSpec,
    /// Hashes of nodes taken from the cache, spliced ones included.
    pub reused: BTreeSet<DagHash>,
    /// Hashes of reused nodes whose dependencies were rewired.
    pub spliced: BTreeSet<DagHash>,
    /// Names of packages that must be built from source.
    pub to_build: BTreeSet<String>,
    pub splices: Vec<SpliceDecision>,
    pub objective: Objective,
    pub provider_penalty: usize,
    pub stats: SolveStats,
}

impl SolveResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("results serialize")
    }

    /// Everything but timing, for determinism checks.
    pub fn same_outcome(&self, other: &SolveResult) -> bool {
        self.spec == other.spec
            && self.reused == other.reused
            && self.spliced == other.spliced
            && self.to_build == other.to_build
            && self.splices == other.splices
            && self.objective == other.objective
            && self.provider_penalty == other.provider_penalty
            && self.stats.decisions == other.stats.decisions
            && self.stats.backtracks == other.stats.backtracks
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolveError {
    #[error("unsatisfiable request:\n  {}", core.join("\n  "))]
    Unsatisfiable { core: Vec<String> },
    #[error("unknown package {0}")]
    UnknownPackage(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),
}

/// Resolve `request` against `repo`, reusing from `cache` as the options allow.
pub fn concretize(
    request: &AbstractSpec,
    repo: &Repo,
    cache: &BuildCache,
    opts: &SolveOptions,
) -> Result<SolveResult, SolveError> {
    let start = Stopwatch::start();
    let pool = cache.reusable_pool();
    let universe = model::Universe::new(request, repo, pool, opts)?;
    let mut result = search::solve(&universe)?;
    result.stats.wall_time = start.elapsed();
    Ok(result)
}

// wasm32-unknown-unknown has no clock; solves there report zero time.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }
    #[cfg(not(target_arch = "wasm32"))]
    fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
    #[cfg(target_arch = "wasm32")]
    fn start() -> Self {
        Stopwatch()
    }
    #[cfg(target_arch = "wasm32")]
    fn elapsed(&self) -> Duration {
        Duration::ZERO
    }
}

/// Every cached node that some `can_splice` directive allows to stand in for
/// `node`, with the directive that permits it.
pub fn splice_candidates<'a>(node: &ConcreteNode, repo: &'a Repo, cache: &BuildCache) -> Vec<(DagHash, &'a CanSplice)> {
    let pool = cache.reusable_pool();
    let mut out = Vec::new();
    for (def, directive) in repo.splices_targeting(&node.name) {
        if !satisfies(&**node, &directive.target) {
            continue;
        }
        for h in pool.nodes_named(&def.name) {
            if *h == node.hash {
                continue;
            }
            let attrs = &pool.store.get(h).expect("indexed nodes exist").attrs;
            if directive.when.as_ref().is_none_or(|w| satisfies(attrs, w)) {
                out.push((h.clone(), directive));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
