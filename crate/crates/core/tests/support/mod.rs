//! Strategies and checks shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use splicekit::cache::{BuildCache, ReusablePool};
use splicekit::concretize::SolveResult;
use splicekit::install::{DEP_LEN, HASH_FIELD, HEADER_LEN, NAME_FIELD, PREFIX_FIELD};
use splicekit::splice::splice_as;
use splicekit::{AbstractSpec, ConcreteSpec, DagHash, DepKind, Dependency, NodeConstraints, VariantValue, Version, VersionConstraint};

pub fn arb_name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9]{0,5}(-[a-z0-9]{1,3})?"
}

fn arb_version() -> impl Strategy<Value = Version> {
    prop::collection::vec(0u64..1000, 1..4).prop_map(|c| Version::new(c).unwrap())
}

pub fn arb_version_constraint() -> impl Strategy<Value = VersionConstraint> {
    prop_oneof![
        arb_version().prop_map(VersionConstraint::exact),
        (prop::option::of(arb_version()), prop::option::of(arb_version()))
            .prop_filter_map("non-empty range", |(lo, hi)| VersionConstraint::new(lo, hi)),
    ]
}

fn arb_variants() -> impl Strategy<Value = BTreeMap<String, VariantValue>> {
    let key = "[a-z][a-z0-9_]{0,5}".prop_filter("reserved keys", |k| !matches!(k.as_str(), "os" | "target" | "arch"));
    let value = prop_oneof![
        prop::bool::ANY.prop_map(VariantValue::Bool),
        "[a-z0-9][a-z0-9._:/-]{0,6}".prop_map(VariantValue::Str),
    ];
    prop::collection::btree_map(key, value, 0..4)
}

pub fn arb_constraints(name: Option<String>) -> impl Strategy<Value = NodeConstraints> {
    let label = || prop::option::of("[a-z][a-z0-9_.]{0,6}");
    (prop::option::of(arb_version_constraint()), arb_variants(), label(), label()).prop_map(
        move |(version, variants, os, target)| NodeConstraints {
            name: name.clone(),
            version,
            variants,
            os,
            target,
        },
    )
}

pub fn arb_abstract_spec() -> impl Strategy<Value = AbstractSpec> {
    let root = prop::option::of(arb_name()).prop_flat_map(arb_constraints);
    let deps = prop::collection::btree_map(arb_name(), prop::bool::ANY, 0..4).prop_flat_map(|names| {
        names
            .into_iter()
            .map(|(n, build)| {
                arb_constraints(Some(n)).prop_map(move |constraints| Dependency {
                    constraints,
                    kind: if build { DepKind::Build } else { DepKind::LinkRun },
                })
            })
            .collect::<Vec<_>>()
    });
    (root, deps)
        .prop_filter("a package never depends on itself", |(r, deps)| {
            r.name.as_ref().is_none_or(|n| deps.iter().all(|d| d.constraints.name.as_ref() != Some(n)))
        })
        .prop_map(|(root, dependencies)| AbstractSpec { root, dependencies })
}

fn trimmed(field: &[u8]) -> &[u8] {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    &field[..end]
}

/// Compare an installed artifact with the artifact it was produced from.
/// Only prefix fields, and the name and hash of dependency records whose
/// hash is a key of `map`, may differ; a redirected record must then carry
/// the mapped hash. Returns a description of the first violation.
pub fn check_patch(src: &[u8], dst: &[u8], map: &BTreeMap<String, String>) -> Result<(), String> {
    if src.len() != dst.len() {
        return Err(format!("length changed from {} to {}", src.len(), dst.len()));
    }
    if src[..HEADER_LEN] != dst[..HEADER_LEN] {
        return Err("header bytes changed".into());
    }
    let mut off = HEADER_LEN + PREFIX_FIELD;
    while off < src.len() {
        let name = off..off + NAME_FIELD;
        let hash = off + NAME_FIELD..off + NAME_FIELD + HASH_FIELD;
        let old = String::from_utf8_lossy(trimmed(&src[hash.clone()])).into_owned();
        match map.get(&old) {
            Some(new) => {
                if trimmed(&dst[hash.clone()]) != new.as_bytes() {
                    return Err(format!("record for {old} not redirected to {new}"));
                }
            }
            None => {
                if src[name.clone()] != dst[name] || src[hash.clone()] != dst[hash] {
                    return Err(format!("unmapped record for {old} changed"));
                }
            }
        }
        off += DEP_LEN;
    }
    Ok(())
}

/// Rebuild a solve result from cached specs and its recorded splice
/// decisions: a cached parent has its own decisions applied, each with a
/// replacement rebuilt the same way first.
pub fn replay(result: &SolveResult, cache: &BuildCache) -> Result<ConcreteSpec, String> {
    let pool = cache.reusable_pool();
    fn rebuild(
        h: &DagHash,
        result: &SolveResult,
        pool: &ReusablePool,
        depth: usize,
    ) -> Result<ConcreteSpec, String> {
        if depth >= 32 {
            return Err("splice decisions form a cycle".into());
        }
        let mut cur = pool.spec(h).ok_or("cached spec missing")?;
        for d in result.splices.iter().filter(|d| d.parent_hash == *h) {
            let replacement = rebuild(&d.replacement_hash, result, pool, depth + 1)?;
            cur = splice_as(&cur, &d.replaced_name, &replacement, d.transitive).map_err(|e| e.to_string())?;
        }
        Ok(cur)
    }
    let root = result.spec.root_node();
    let start = root.build_spec_hash.clone().unwrap_or_else(|| root.hash.clone());
    rebuild(&start, result, &pool, 0)
}
