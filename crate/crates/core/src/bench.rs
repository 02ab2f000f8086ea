//! Synthetic repositories and caches, and a harness that times solves over
//! them and writes CSV.
//!
//! The MPI stack is a layered set of applications and libraries over a
//! virtual `mpi`, provided by `mpich@3.4.3` and by `R` interchangeable
//! `mpiabi-NNN` replicas that each declare they can stand in for mpich.
//! Everything is cached built against mpich, so a request for an app on a
//! replica is answerable only by splicing.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::BuildCache;
use crate::concretize::{concretize, SolveOptions, SolveResult};
use crate::fixtures::build_into;
use crate::parser::parse_spec;
use crate::repo::{PackageDef, Repo};
use crate::spec::AbstractSpec;

pub const MPICH: &str = "mpich@3.4.3";

/// Name of the `i`th replica provider.
pub fn replica_name(i: usize) -> String {
    format!("mpiabi-{i:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackParams {
    /// Application packages, `app-00` and up. Each depends on `mpi`.
    pub apps: usize,
    /// Shared libraries under the apps; every other one also needs `mpi`.
    pub libs: usize,
    /// Chance that an app depends on a given library.
    pub dep_density: f64,
    /// Boolean variants per app and library.
    pub variants: usize,
    /// Number of `mpiabi` replicas.
    pub replicas: usize,
    /// Unrelated cached packages added so the cache holds about this many
    /// entries. Zero adds none.
    pub cache_size: usize,
    pub seed: u64,
}

impl Default for StackParams {
    fn default() -> Self {
        StackParams {
            apps: 8,
            libs: 4,
            dep_density: 0.4,
            variants: 1,
            replicas: 1,
            cache_size: 60,
            seed: 7,
        }
    }
}

fn pkg(doc: Value) -> PackageDef {
    PackageDef::from_json(&doc.to_string()).expect("generated packages are valid")
}

fn bool_variants(n: usize) -> Vec<Value> {
    (0..n).map(|i| json!({"name": format!("opt{i}"), "default": i % 2 == 0})).collect()
}

/// The repository alone, without building anything.
pub fn mpi_stack_repo(p: &StackParams) -> Repo {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut defs = Vec::new();
    defs.push(pkg(json!({
        "name": "mpich",
        "versions": ["3.4.3", "3.3.2"],
        "variants": [{"name": "pmi", "default": "pmix", "values": ["pmix", "slurm"]}],
        "provides": [{"virtual": "mpi"}]
    })));
    for i in 0..p.replicas {
        defs.push(pkg(json!({
            "name": replica_name(i),
            "versions": ["2.3.7"],
            "provides": [{"virtual": "mpi"}],
            "can_splice": [{"target": MPICH, "when": "@2.3.7"}]
        })));
    }
    defs.push(pkg(json!({"name": "python", "versions": ["3.11.4", "3.10.8"]})));
    defs.push(pkg(json!({
        "name": "py-shroud",
        "versions": ["0.12.2", "0.12.1"],
        "depends_on": [{"spec": "python"}]
    })));
    for i in 0..p.libs {
        let mut deps = vec![json!({"spec": "zlib"})];
        if i % 2 == 0 {
            deps.push(json!({"spec": "mpi"}));
        }
        defs.push(pkg(json!({
            "name": format!("lib-{i:02}"),
            "versions": ["1.2.0", "1.1.0"],
            "variants": bool_variants(p.variants),
            "depends_on": deps
        })));
    }
    defs.push(pkg(json!({"name": "zlib", "versions": ["1.3.1", "1.2.13"]})));
    for i in 0..p.apps {
        let mut deps = vec![json!({"spec": "mpi"})];
        for l in 0..p.libs {
            if rng.gen_bool(p.dep_density.clamp(0.0, 1.0)) {
                deps.push(json!({"spec": format!("lib-{l:02}")}));
            }
        }
        defs.push(pkg(json!({
            "name": format!("app-{i:02}"),
            "versions": ["2.0.0", "1.0.0"],
            "variants": bool_variants(p.variants),
            "depends_on": deps
        })));
    }
    Repo::new(defs).expect("generated repo is valid")
}

/// The MPI stack repository plus a cache holding every app built against
/// mpich, py-shroud, every replica, and padding.
pub fn generate_mpi_stack(p: &StackParams) -> (Repo, BuildCache) {
    let base = mpi_stack_repo(p);
    let mut cache = BuildCache::in_memory();
    for i in 0..p.apps {
        build_into(&base, &mut cache, &format!("app-{i:02} ^{MPICH}"));
    }
    build_into(&base, &mut cache, "py-shroud");
    for i in 0..p.replicas {
        build_into(&base, &mut cache, &replica_name(i));
    }
    // Padding packages live in a separate repo so they never enter a solve's
    // domain, only the cache.
    let mut pad = 0;
    let mut pad_defs = Vec::new();
    let mut pad_requests = Vec::new();
    while cache.len() + pad_requests.len() < p.cache_size {
        let name = format!("pad-{pad:03}");
        pad_defs.push(pkg(json!({"name": name, "versions": ["1.0"]})));
        pad_requests.push(name);
        pad += 1;
    }
    if !pad_defs.is_empty() {
        let pad_repo = Repo::new(pad_defs).expect("padding repo is valid");
        for r in &pad_requests {
            build_into(&pad_repo, &mut cache, r);
        }
    }
    (base, cache)
}

/// One benchmark configuration: a stack shape swept over replica counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchScenario {
    pub id: String,
    pub stack: StackParams,
    /// Replica counts to sweep; overrides `stack.replicas`.
    pub replicas: Vec<usize>,
    /// Requests to solve. `{replica}` stands for the first replica's name;
    /// such requests are skipped when there are no replicas.
    pub requests: Vec<String>,
    /// Solve with splicing off, on, or both.
    pub splice: Vec<bool>,
    pub repetitions: usize,
}

impl Default for BenchScenario {
    fn default() -> Self {
        BenchScenario {
            id: "mpi-stack".into(),
            stack: StackParams::default(),
            replicas: vec![1, 10, 100],
            requests: vec!["app-00 ^{replica}".into(), "app-01 ^{replica}".into(), "py-shroud".into()],
            splice: vec![false, true],
            repetitions: 10,
        }
    }
}

impl BenchScenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.repetitions == 0 {
            return Err("repetitions must be at least 1".into());
        }
        if self.requests.is_empty() || self.splice.is_empty() || self.replicas.is_empty() {
            return Err("requests, splice and replicas must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.stack.dep_density) {
            return Err("dep_density must lie in [0, 1]".into());
        }
        for r in &self.requests {
            parse_spec(&r.replace("{replica}", "mpiabi-000")).map_err(|e| format!("request {r:?}: {e}"))?;
        }
        Ok(())
    }
}

/// One timed solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub request: String,
    pub splice: bool,
    pub replicas: usize,
    pub repetition: usize,
    /// `ok`, `skipped`, or the solver error kind.
    pub status: String,
    pub wall_ms: f64,
    pub builds: Option<usize>,
    pub splice_count: Option<usize>,
    /// Objective fields joined with `/`.
    pub objective: String,
    pub decisions: u64,
    pub backtracks: u64,
}

fn error_kind(e: &crate::concretize::SolveError) -> &'static str {
    use crate::concretize::SolveError::*;
    match e {
        Unsatisfiable { .. } => "unsatisfiable",
        UnknownPackage(_) => "unknown-package",
        InvalidRequest(_) => "invalid-request",
        InvalidOptions(_) => "invalid-options",
        InstanceTooLarge(_) => "too-large",
    }
}

fn row_of(base: BenchRow, r: &Result<SolveResult, crate::concretize::SolveError>) -> BenchRow {
    match r {
        Ok(res) => {
            let o = &res.objective;
            BenchRow {
                status: "ok".into(),
                wall_ms: res.stats.wall_time.as_secs_f64() * 1e3,
                builds: Some(o.builds),
                splice_count: Some(o.splice_count),
                objective: format!(
                    "{}/{}/{}/{}/{}/{}",
                    o.built_version_penalty, o.built_default_deviation, o.builds, o.version_penalty, o.default_deviation, o.splice_count
                ),
                decisions: res.stats.decisions,
                backtracks: res.stats.backtracks,
                ..base
            }
        }
        Err(e) => BenchRow {
            status: error_kind(e).into(),
            ..base
        },
    }
}

/// Solve every request in every configuration, `repetitions` times each.
/// Rows come out ordered by replica count, request, splice flag, repetition.
pub fn run_scenario(s: &BenchScenario) -> Result<Vec<BenchRow>, String> {
    s.validate()?;
    let mut rows = Vec::new();
    for &r in &s.replicas {
        let params = StackParams {
            replicas: r,
            ..s.stack.clone()
        };
        let (repo, cache) = generate_mpi_stack(&params);
        for template in &s.requests {
            let request = template.replace("{replica}", &replica_name(0));
            let parsed: Option<AbstractSpec> = if template.contains("{replica}") && r == 0 {
                None
            } else {
                Some(parse_spec(&request).map_err(|e| e.to_string())?)
            };
            for &splice in &s.splice {
                let opts = SolveOptions {
                    splice_enabled: splice,
                    deterministic_seed: params.seed,
                    ..SolveOptions::default()
                };
                for rep in 0..s.repetitions {
                    let base = BenchRow {
                        scenario: s.id.clone(),
                        request: request.clone(),
                        splice,
                        replicas: r,
                        repetition: rep,
                        status: "skipped".into(),
                        wall_ms: 0.0,
                        builds: None,
                        splice_count: None,
                        objective: String::new(),
                        decisions: 0,
                        backtracks: 0,
                    };
                    rows.push(match &parsed {
                        None => base,
                        Some(req) => row_of(base, &concretize(req, &repo, &cache, &opts)),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Mean and standard deviation of the wall time for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub scenario: String,
    pub request: String,
    pub splice: bool,
    pub replicas: usize,
    pub status: String,
    pub runs: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub builds: Option<usize>,
    pub splice_count: Option<usize>,
}

pub fn summarize(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut groups: BTreeMap<(usize, String, bool), Vec<&BenchRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for row in rows {
        let key = (row.replicas, row.request.clone(), row.splice);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.wall_ms).sum::<f64>() / n;
            let var = g.iter().map(|r| (r.wall_ms - mean).powi(2)).sum::<f64>() / n;
            let first = g[0];
            BenchSummary {
                scenario: first.scenario.clone(),
                request: first.request.clone(),
                splice: first.splice,
                replicas: first.replicas,
                status: first.status.clone(),
                runs: g.len(),
                mean_ms: mean,
                stddev_ms: var.sqrt(),
                builds: first.builds,
                splice_count: first.splice_count,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean solve time of `request` over `reps` runs.
pub fn mean_solve_time(repo: &Repo, cache: &BuildCache, request: &str, opts: &SolveOptions, reps: usize) -> Duration {
    let req = parse_spec(request).expect("benchmark requests parse");
    let mut total = Duration::ZERO;
    for _ in 0..reps.max(1) {
        let r = concretize(&req, repo, cache, opts).expect("benchmark requests solve");
        total += r.stats.wall_time;
    }
    total / reps.max(1) as u32
}

/// A small random instance: repository, cache, request and options, sized
/// for exhaustive search.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub repo: Repo,
    pub cache: BuildCache,
    pub request: String,
    pub opts: SolveOptions,
}

fn letter(i: usize) -> String {
    format!("p{}", (b'a' + i as u8) as char)
}

/// Packages `pa`, `pb`, ... where each depends only on later ones, with
/// conditional and constrained dependencies, an optional virtual with two
/// providers, splice directives between versions and between providers, and
/// a cache built from a few random requests.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5usize);
    let versions: Vec<Vec<String>> = (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=3usize);
            (0..k).rev().map(|j| format!("1.{j}")).collect()
        })
        .collect();
    let nvars: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=2usize)).collect();
    let with_virtual = n >= 3 && rng.gen_bool(0.5);
    // The last two packages provide `vx` when the virtual is in play.
    let providers: Vec<usize> = if with_virtual { vec![n - 2, n - 1] } else { Vec::new() };
    let mut docs = Vec::new();
    for i in 0..n {
        let mut deps = Vec::new();
        for j in (i + 1)..n {
            if providers.contains(&j) || !rng.gen_bool(0.5) {
                continue;
            }
            let mut spec = letter(j);
            if rng.gen_bool(0.3) {
                spec.push_str(&format!("@{}", versions[j].choose(&mut rng).unwrap()));
            }
            if nvars[j] > 0 && rng.gen_bool(0.2) {
                spec.push_str(if rng.gen_bool(0.5) { " +v0" } else { " ~v0" });
            }
            let mut d = json!({"spec": spec});
            if rng.gen_bool(0.3) {
                let when = if nvars[i] > 0 && rng.gen_bool(0.5) {
                    "+v0".to_string()
                } else {
                    format!("@{}", versions[i].choose(&mut rng).unwrap())
                };
                d["when"] = json!(when);
            }
            deps.push(d);
        }
        if with_virtual && !providers.contains(&i) && (i == 0 || rng.gen_bool(0.4)) {
            deps.push(json!({"spec": "vx"}));
        }
        let mut doc = json!({
            "name": letter(i),
            "versions": versions[i],
            "variants": (0..nvars[i]).map(|v| json!({"name": format!("v{v}"), "default": rng.gen_bool(0.5)})).collect::<Vec<_>>(),
            "depends_on": deps,
        });
        if providers.contains(&i) {
            doc["provides"] = json!([{"virtual": "vx"}]);
        }
        let mut splices = Vec::new();
        for from in &versions[i] {
            for to in &versions[i] {
                if from != to && rng.gen_bool(0.7) {
                    splices.push(json!({"target": format!("{}@{from}", letter(i)), "when": format!("@{to}")}));
                }
            }
        }
        if providers.len() == 2 && providers[1] == i && rng.gen_bool(0.7) {
            splices.push(json!({"target": letter(providers[0])}));
        }
        doc["can_splice"] = json!(splices);
        docs.push(pkg(doc));
    }
    let repo = Repo::new(docs).expect("random repos are valid");

    let mut cache = BuildCache::in_memory();
    let random_request = |rng: &mut ChaCha8Rng| {
        let i = rng.gen_range(0..n);
        let mut s = letter(i);
        if rng.gen_bool(0.5) {
            s.push_str(&format!("@{}", versions[i].choose(rng).unwrap()));
        }
        if nvars[i] > 0 && rng.gen_bool(0.3) {
            s.push_str(if rng.gen_bool(0.5) { " +v0" } else { " ~v0" });
        }
        if with_virtual && !providers.contains(&i) && rng.gen_bool(0.4) {
            s.push_str(&format!(" ^{}", letter(*providers.choose(rng).unwrap())));
        }
        s
    };
    let mut roots = Vec::new();
    for _ in 0..rng.gen_range(0..=3usize) {
        let req = random_request(&mut rng);
        let parsed = parse_spec(&req).expect("generated requests parse");
        if let Ok(r) = concretize(&parsed, &repo, &cache, &SolveOptions::without_reuse()) {
            if cache.reusable_pool().len() + r.spec.nodes.len() <= 32 {
                crate::install::publish(&r.spec, &crate::install::InstallTree::new(crate::fixtures::BUILD_TREE), &mut cache)
                    .expect("publish into memory");
                roots.push(r.spec.root_node().name.clone());
            }
        }
    }
    for _ in 0..rng.gen_range(0..=2usize) {
        let j = rng.gen_range(1..n);
        let req = format!("{}@{}", letter(j), versions[j].choose(&mut rng).unwrap());
        let parsed = parse_spec(&req).expect("generated requests parse");
        if let Ok(r) = concretize(&parsed, &repo, &cache, &SolveOptions::without_reuse()) {
            if cache.reusable_pool().len() + r.spec.nodes.len() <= 32 {
                crate::install::publish(&r.spec, &crate::install::InstallTree::new(crate::fixtures::BUILD_TREE), &mut cache)
                    .expect("publish into memory");
            }
        }
    }
    // Usually ask for a cached root with one dependency pinned to
    // something other than what it was built with, which splicing may answer.
    let request = match roots.choose(&mut rng) {
        Some(root) if rng.gen_bool(0.7) => {
            let i = (0..n).find(|&i| letter(i) == *root).expect("root is a package");
            let pool = cache.reusable_pool();
            let below: Vec<String> = ((i + 1)..n)
                .filter(|j| !providers.contains(&i) || !providers.contains(j))
                .flat_map(|j| pool.nodes_named(&letter(j)).to_vec())
                .map(|h| {
                    let at = &pool.store.get(&h).expect("pool node").attrs;
                    format!("{}@{}", at.name, at.version)
                })
                .collect();
            match below.choose(&mut rng) {
                Some(dep) => format!("{root} ^{dep}"),
                None => root.clone(),
            }
        }
        _ => random_request(&mut rng),
    };
    let reuse = rng.gen_bool(0.8);
    let opts = SolveOptions {
        reuse_enabled: reuse,
        splice_enabled: reuse && rng.gen_bool(0.7),
        deterministic_seed: seed,
        ..SolveOptions::default()
    };
    RandomInstance {
        seed,
        repo,
        cache,
        request,
        opts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concretize::splice_candidates;

    #[test]
    fn stack_shape() {
        let p = StackParams {
            apps: 3,
            replicas: 1,
            cache_size: 0,
            ..StackParams::default()
        };
        let (repo, cache) = generate_mpi_stack(&p);
        assert_eq!(repo.packages().filter(|d| d.name.starts_with("app-")).count(), 3);
        assert!(repo.get("mpich").is_some());
        assert_eq!(repo.providers("mpi").len(), 2);
        assert!(cache.by_name("mpiabi-000").len() == 1);
        assert!(repo.warnings().is_empty());
    }

    #[test]
    fn hundred_replicas_hundred_candidates() {
        let p = StackParams {
            apps: 1,
            libs: 0,
            replicas: 100,
            cache_size: 0,
            ..StackParams::default()
        };
        let (repo, cache) = generate_mpi_stack(&p);
        let pool = cache.reusable_pool();
        let mpich = pool.nodes_named("mpich")[0].clone();
        let spec = pool.spec(&mpich).unwrap();
        assert_eq!(splice_candidates(spec.root_node(), &repo, &cache).len(), 100);
    }

    #[test]
    fn padding_reaches_cache_size() {
        let (_, cache) = generate_mpi_stack(&StackParams::default());
        assert!(cache.len() >= 60, "{}", cache.len());
    }

    #[test]
    fn no_replicas_means_skipped_rows() {
        let s = BenchScenario {
            replicas: vec![0],
            requests: vec!["app-00 ^{replica}".into(), "py-shroud".into()],
            repetitions: 2,
            stack: StackParams {
                apps: 2,
                cache_size: 0,
                ..StackParams::default()
            },
            ..BenchScenario::default()
        };
        let rows = run_scenario(&s).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows[..4].iter().all(|r| r.status == "skipped"));
        assert!(rows[4..].iter().all(|r| r.status == "ok" && r.builds == Some(0)));
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 4);
        let mut buf = Vec::new();
        write_csv(&summary, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("scenario,request,splice,replicas,status,runs,mean_ms"));
    }

    #[test]
    fn random_instances_are_deterministic() {
        for seed in 0..20 {
            let a = random_instance(seed);
            let b = random_instance(seed);
            assert_eq!(a.request, b.request);
            assert_eq!(a.cache.len(), b.cache.len());
            assert!(a.cache.reusable_pool().len() <= 32);
        }
    }

    #[test]
    fn bad_scenarios_rejected() {
        let s = BenchScenario {
            repetitions: 0,
            ..BenchScenario::default()
        };
        assert!(run_scenario(&s).is_err());
    }
}
