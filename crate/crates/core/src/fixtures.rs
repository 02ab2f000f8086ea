//! Small hand-written repositories and caches used by tests, the CLI
//! `fixture` command and the browser demo.
//!
//! `example` is a package with conditional dependencies on zlib and bzip2
//! and a virtual MPI dependency. `fig2` is the splice scenario: a cached
//! `t ^h ^z@1.0`, a cached `hprime ^s ^z@1.1`, and `hprime` declaring that it
//! can stand in for `h`.

use std::collections::BTreeMap;

use crate::cache::BuildCache;
use crate::concretize::{concretize, SolveOptions};
use crate::hash::DagHash;
use crate::install::{publish, InstallTree};
use crate::parser::parse_spec;
use crate::repo::{PackageDef, Repo};

/// Prefix root that cached artifacts were "built" under.
pub const BUILD_TREE: &str = "/opt/splicekit/build";

pub const EXAMPLE_PACKAGES: &[&str] = &[
    r#"{
  "name": "example",
  "versions": ["1.1.0", "1.0.0"],
  "variants": [{"name": "bzip", "default": true}],
  "depends_on": [
    {"spec": "bzip2", "when": "+bzip"},
    {"spec": "zlib@1.2", "when": "@1.0.0"},
    {"spec": "zlib@1.3", "when": "@1.1.0"},
    {"spec": "mpi"}
  ],
  "can_splice": [
    {"target": "example@1.0.0", "when": "@1.1.0"},
    {"target": "example-ng@2.3.2+compat", "when": "@1.1.0+bzip"}
  ]
}"#,
    r#"{
  "name": "bzip2",
  "versions": ["1.0.8"],
  "variants": [
    {"name": "debug", "default": false},
    {"name": "pic", "default": true},
    {"name": "shared", "default": true}
  ]
}"#,
    r#"{
  "name": "zlib",
  "versions": ["1.3.1", "1.2.11"],
  "variants": [
    {"name": "optimize", "default": true},
    {"name": "pic", "default": true},
    {"name": "shared", "default": true}
  ]
}"#,
    r#"{
  "name": "mpich",
  "versions": ["3.1"],
  "variants": [{"name": "pmi", "default": "pmix", "values": ["pmix", "slurm"]}],
  "provides": [{"virtual": "mpi"}]
}"#,
];

pub const FIG2_PACKAGES: &[&str] = &[
    r#"{
  "name": "t",
  "versions": ["1.0"],
  "depends_on": [{"spec": "hapi"}, {"spec": "z"}]
}"#,
    r#"{
  "name": "h",
  "versions": ["1.0"],
  "provides": [{"virtual": "hapi"}],
  "depends_on": [{"spec": "z"}]
}"#,
    r#"{
  "name": "hprime",
  "versions": ["1.0"],
  "provides": [{"virtual": "hapi"}],
  "depends_on": [{"spec": "s"}, {"spec": "z"}],
  "can_splice": [{"target": "h@1.0", "when": "@1.0"}]
}"#,
    r#"{
  "name": "s",
  "versions": ["1.0"]
}"#,
    r#"{
  "name": "z",
  "versions": ["1.1", "1.0"],
  "can_splice": [
    {"target": "z@1.0", "when": "@1.1"},
    {"target": "z@1.1", "when": "@1.0"}
  ]
}"#,
];

fn repo_of(docs: &[&str]) -> Repo {
    Repo::new(docs.iter().map(|d| PackageDef::from_json(d).expect("fixture packages are valid")))
        .expect("fixture repo is valid")
}

pub fn example_repo() -> Repo {
    repo_of(EXAMPLE_PACKAGES)
}

pub fn fig2_repo() -> Repo {
    repo_of(FIG2_PACKAGES)
}

/// Concretize `request` from source and publish every node to `cache`.
pub fn build_into(repo: &Repo, cache: &mut BuildCache, request: &str) -> DagHash {
    let req = parse_spec(request).expect("fixture request parses");
    let result = concretize(&req, repo, cache, &SolveOptions::without_reuse()).expect("fixture request solves");
    publish(&result.spec, &InstallTree::new(BUILD_TREE), cache).expect("fixture publish");
    result.spec.root
}

/// A repository, a cache, and requests worth solving against them.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub repo: Repo,
    pub cache: BuildCache,
    /// Named hashes of interesting cached nodes.
    pub nodes: BTreeMap<&'static str, DagHash>,
    pub requests: Vec<&'static str>,
}

/// The example package with an empty cache.
pub fn example() -> Fixture {
    Fixture {
        name: "example",
        repo: example_repo(),
        cache: BuildCache::in_memory(),
        nodes: BTreeMap::new(),
        requests: vec![
            "example@1.0.0",
            "example",
            "example~bzip",
            "example ^zlib@1.2",
            "example@1.0.0 ^zlib@1.3",
            "example ^mpich pmi=slurm",
            "mpi",
        ],
    }
}

/// The example package with zlib and bzip2 already cached.
pub fn example_partial() -> Fixture {
    let repo = example_repo();
    let mut cache = BuildCache::in_memory();
    let zlib = build_into(&repo, &mut cache, "zlib@1.2.11");
    let bzip2 = build_into(&repo, &mut cache, "bzip2");
    Fixture {
        name: "example-partial",
        repo,
        cache,
        nodes: BTreeMap::from([("zlib", zlib), ("bzip2", bzip2)]),
        requests: vec!["example@1.0.0", "example", "example@1.0.0 ~bzip"],
    }
}

/// The splice scenario with `t ^h ^z@1.0` and `hprime ^s ^z@1.1` cached.
pub fn fig2() -> Fixture {
    let repo = fig2_repo();
    let mut cache = BuildCache::in_memory();
    let t0 = build_into(&repo, &mut cache, "t ^h ^z@1.0");
    let hp0 = build_into(&repo, &mut cache, "hprime ^z@1.1");
    let pool = cache.reusable_pool();
    let find = |name: &str, version: &str| {
        pool.nodes_named(name)
            .iter()
            .find(|h| pool.store.get(h).unwrap().attrs.version.to_string() == version)
            .cloned()
            .expect("fixture node")
    };
    let nodes = BTreeMap::from([
        ("t", t0),
        ("hprime", hp0),
        ("h", find("h", "1.0")),
        ("s", find("s", "1.0")),
        ("z@1.0", find("z", "1.0")),
        ("z@1.1", find("z", "1.1")),
    ]);
    Fixture {
        name: "fig2",
        repo,
        cache,
        nodes,
        requests: vec!["t", "t ^hprime", "t ^hprime ^z@1.0", "t ^z@1.1", "hprime", "t ^h ^z@1.1"],
    }
}

/// Every fixture above.
pub fn suite() -> Vec<Fixture> {
    vec![example(), example_partial(), fig2()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let f = fig2();
        assert_eq!(f.cache.by_name("z").len(), 2);
        assert_eq!(f.cache.len(), 6);
        assert!(f.repo.warnings().is_empty());
        assert!(example().repo.warnings().is_empty());
    }
}
