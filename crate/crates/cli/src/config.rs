//! Settings resolution: command-line flags, then `SPLICEKIT_*` environment
//! variables (both handled by clap), then the TOML config file, then
//! defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use splicekit::concretize::{Platform, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSolver {
    pub reuse: Option<bool>,
    pub splice: Option<bool>,
    pub max_candidates: Option<usize>,
    pub seed: Option<u64>,
    pub os: Option<String>,
    pub target: Option<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub providers: BTreeMap<String, Vec<String>>,
}

/// Contents of a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub repo: Option<PathBuf>,
    #[serde(default)]
    pub cache: Vec<PathBuf>,
    pub tree: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(default)]
    pub solver: FileSolver,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        let anchor = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        cfg.repo = cfg.repo.map(anchor);
        cfg.tree = cfg.tree.map(anchor);
        cfg.cache = cfg.cache.into_iter().map(anchor).collect();
        Ok(cfg)
    }
}

/// Solver flags as given on the command line; `None` means not given.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct SolverFlags {
    /// Reuse cached builds (the default).
    #[arg(long, overrides_with = "no_reuse")]
    pub reuse: bool,
    /// Build everything from source.
    #[arg(long)]
    pub no_reuse: bool,
    /// Let the solver splice cached replacements into cached builds.
    #[arg(long, overrides_with = "no_splice")]
    pub splice: bool,
    /// Never splice (the default).
    #[arg(long)]
    pub no_splice: bool,
    /// Try at most this many options per package. Makes the search incomplete.
    #[arg(long, value_name = "N")]
    pub max_candidates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Package that must not appear in the solution. Repeatable.
    #[arg(long, value_name = "PKG")]
    pub exclude: Vec<String>,
}

fn flag(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

pub fn solve_options(flags: &SolverFlags, file: &FileSolver) -> Result<SolveOptions, String> {
    let defaults = SolveOptions::default();
    let reuse = flag(flags.reuse, flags.no_reuse).or(file.reuse).unwrap_or(defaults.reuse_enabled);
    let splice = flag(flags.splice, flags.no_splice).or(file.splice).unwrap_or(defaults.splice_enabled);
    if splice && !reuse {
        return Err("--splice needs reuse; drop --no-reuse".into());
    }
    let max = flags.max_candidates.or(file.max_candidates);
    if max == Some(0) {
        return Err("--max-candidates must be at least 1".into());
    }
    let exclude: BTreeSet<String> = if flags.exclude.is_empty() {
        file.exclude.iter().cloned().collect()
    } else {
        flags.exclude.iter().cloned().collect()
    };
    Ok(SolveOptions {
        reuse_enabled: reuse,
        splice_enabled: splice,
        max_candidates_per_node: max,
        deterministic_seed: flags.seed.or(file.seed).unwrap_or(defaults.deterministic_seed),
        platform: Platform {
            os: file.os.clone().unwrap_or(defaults.platform.os),
            target: file.target.clone().unwrap_or(defaults.platform.target),
        },
        provider_preferences: file.providers.clone(),
        exclude,
    })
}
