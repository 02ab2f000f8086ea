//! Splicing concrete specs.
//!
//! `splice(root, replacement, transitive)` swaps the link-run node named like
//! the replacement's root for the replacement. When the two graphs share
//! package names, a transitive splice keeps the replacement's copies and an
//! intransitive splice keeps the root's. Every node whose link-run children
//! change becomes a spliced node: it records the hash it was built as and
//! loses its build edges.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::hash::DagHash;
use crate::spec::{ConcreteSpec, EdgeKind, NodeAttrs, SpecError, SpecStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpliceError {
    #[error("no link-run node named {0} to splice into")]
    NoTarget(String),
    #[error("more than one node named {0} could be the splice target")]
    AmbiguousTarget(String),
    #[error("cannot splice into the root node {0}")]
    RootTarget(String),
    #[error("splicing {replacement} would make {ancestor} depend on itself")]
    WouldCycle { replacement: String, ancestor: String },
    #[error("spliced node {0} has no resolvable build spec")]
    MissingProvenance(DagHash),
    #[error("splice produced an invalid spec: {0}")]
    Invalid(#[from] SpecError),
}

/// A build-spec reference of one spliced node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenancePair {
    pub spliced_hash: DagHash,
    pub build_spec_hash: DagHash,
}

pub fn provenance(spec: &ConcreteSpec) -> Vec<ProvenancePair> {
    spec.spliced_nodes()
        .map(|n| ProvenancePair {
            spliced_hash: n.hash.clone(),
            build_spec_hash: n.build_spec_hash.clone().expect("spliced nodes carry a build spec"),
        })
        .collect()
}

/// Splice `replacement` into `root`, targeting the node with the
/// replacement's package name.
pub fn splice(root: &ConcreteSpec, replacement: &ConcreteSpec, transitive: bool) -> Result<ConcreteSpec, SpliceError> {
    let name = replacement.root_node().name.clone();
    splice_as(root, &name, replacement, transitive)
}

/// Splice `replacement` in place of the link-run node named `target_name`.
/// The names may differ, e.g. when one provider of a virtual replaces another.
pub fn splice_as(
    root: &ConcreteSpec,
    target_name: &str,
    replacement: &ConcreteSpec,
    transitive: bool,
) -> Result<ConcreteSpec, SpliceError> {
    let closure = root.link_run_closure(&root.root);
    let targets: Vec<&DagHash> = closure
        .iter()
        .filter(|h| root.nodes[*h].name == target_name)
        .collect();
    let target = match targets.as_slice() {
        [] => return Err(SpliceError::NoTarget(target_name.to_string())),
        [t] => (*t).clone(),
        _ => return Err(SpliceError::AmbiguousTarget(target_name.to_string())),
    };
    if target == root.root {
        return Err(SpliceError::RootTarget(target_name.to_string()));
    }

    let repl_closure = replacement.link_run_closure(&replacement.root);
    let repl_names: BTreeMap<&str, &DagHash> = repl_closure
        .iter()
        .map(|h| (replacement.nodes[h].name.as_str(), h))
        .collect();

    for anc in ancestors(root, &target) {
        let n = &root.nodes[&anc].name;
        if repl_names.contains_key(n.as_str()) {
            return Err(SpliceError::WouldCycle {
                replacement: replacement.root_node().name.clone(),
                ancestor: n.clone(),
            });
        }
    }

    // link-run nodes still reachable from the root once the target is cut out
    let mut remainder: BTreeMap<&str, &DagHash> = BTreeMap::new();
    let mut stack = vec![&root.root];
    let mut seen = BTreeSet::new();
    while let Some(h) = stack.pop() {
        if *h == target || !seen.insert(h) {
            continue;
        }
        remainder.insert(root.nodes[h].name.as_str(), h);
        stack.extend(root.link_children(h));
    }

    let mut store = SpecStore::new();
    store.absorb(root);
    store.absorb(replacement);

    let mut subst: BTreeMap<DagHash, DagHash> = BTreeMap::new();
    let new_repl_root = if transitive {
        for (name, h) in &remainder {
            if let Some(r) = repl_names.get(name) {
                subst.insert((*h).clone(), (*r).clone());
            }
        }
        replacement.root.clone()
    } else {
        let mut inner: BTreeMap<DagHash, DagHash> = BTreeMap::new();
        for h in &repl_closure {
            if *h == replacement.root {
                continue;
            }
            if let Some(r) = remainder.get(replacement.nodes[h].name.as_str()) {
                inner.insert(h.clone(), (*r).clone());
            }
        }
        rebuild(&mut store, &replacement.root, &inner, &mut BTreeMap::new())?
    };
    subst.insert(target, new_repl_root);
    let new_root = rebuild(&mut store, &root.root, &subst, &mut BTreeMap::new())?;
    let out = store.extract(&new_root)?;
    out.validate()?;
    Ok(out)
}

fn ancestors(spec: &ConcreteSpec, target: &DagHash) -> BTreeSet<DagHash> {
    let mut parents: BTreeMap<&DagHash, Vec<&DagHash>> = BTreeMap::new();
    for (p, c) in &spec.link_run_edges {
        parents.entry(c).or_default().push(p);
    }
    let mut out = BTreeSet::new();
    let mut stack = vec![target];
    while let Some(h) = stack.pop() {
        for p in parents.get(h).into_iter().flatten() {
            if out.insert((*p).clone()) {
                stack.push(p);
            }
        }
    }
    out
}

/// Rebuild the node `h` with link-run children substituted per `subst`.
/// Nodes whose children change become spliced nodes.
fn rebuild(
    store: &mut SpecStore,
    h: &DagHash,
    subst: &BTreeMap<DagHash, DagHash>,
    memo: &mut BTreeMap<DagHash, DagHash>,
) -> Result<DagHash, SpliceError> {
    if let Some(s) = subst.get(h) {
        return Ok(s.clone());
    }
    if let Some(m) = memo.get(h) {
        return Ok(m.clone());
    }
    let node = store.get(h).expect("absorbed").clone();
    let mut new_links = Vec::new();
    let mut changed = false;
    for c in node.children(EdgeKind::LinkRun) {
        let nc = rebuild(store, c, subst, memo)?;
        changed |= nc != *c;
        new_links.push(nc);
    }
    let out = if changed {
        Ok(store.insert(spliced_attrs(&node.attrs, h), new_links.into_iter().map(|c| (EdgeKind::LinkRun, c)).collect())?)
    } else {
        Ok(h.clone())
    };
    if let Ok(o) = &out {
        memo.insert(h.clone(), o.clone());
    }
    out
}

/// Attributes of `attrs` rebuilt as a spliced node whose build spec is
/// `original` (or the build spec it already had).
pub fn spliced_attrs(attrs: &NodeAttrs, original: &DagHash) -> NodeAttrs {
    NodeAttrs {
        build_spec_hash: Some(attrs.build_spec_hash.clone().unwrap_or_else(|| original.clone())),
        ..attrs.clone()
    }
}

/// Per spliced node: which link-run child of its build spec maps to which
/// child in the spliced DAG. Children are matched by package name; any left
/// over on both sides are paired in name order. Identity pairs are omitted.
pub fn rewiring_map(
    spliced: &ConcreteSpec,
    store: &SpecStore,
) -> Result<BTreeMap<DagHash, BTreeMap<DagHash, DagHash>>, SpliceError> {
    let mut out = BTreeMap::new();
    for node in spliced.spliced_nodes() {
        let bs = node.build_spec_hash.as_ref().expect("spliced");
        let built = store
            .get(bs)
            .ok_or_else(|| SpliceError::MissingProvenance(node.hash.clone()))?;
        let pairs = pair_children(
            built.children(EdgeKind::LinkRun).map(|h| (store_name(store, h), h.clone())).collect(),
            spliced
                .link_children(&node.hash)
                .map(|h| (spliced.nodes[h].name.clone(), h.clone()))
                .collect(),
        );
        let map: BTreeMap<DagHash, DagHash> = pairs.into_iter().filter(|(o, n)| o != n).collect();
        if !map.is_empty() {
            out.insert(node.hash.clone(), map);
        }
    }
    Ok(out)
}

fn store_name(store: &SpecStore, h: &DagHash) -> String {
    store.get(h).map(|n| n.attrs.name.clone()).unwrap_or_default()
}

/// Match `old` to `new` children by name, then pair leftovers in name order.
pub fn pair_children(old: Vec<(String, DagHash)>, new: Vec<(String, DagHash)>) -> Vec<(DagHash, DagHash)> {
    let new_by_name: BTreeMap<&str, &DagHash> = new.iter().map(|(n, h)| (n.as_str(), h)).collect();
    let old_names: BTreeSet<&str> = old.iter().map(|(n, _)| n.as_str()).collect();
    let mut pairs = Vec::new();
    let mut old_left: Vec<&(String, DagHash)> = Vec::new();
    for o in &old {
        match new_by_name.get(o.0.as_str()) {
            Some(n) => pairs.push((o.1.clone(), (*n).clone())),
            None => old_left.push(o),
        }
    }
    let mut new_left: Vec<&(String, DagHash)> = new.iter().filter(|(n, _)| !old_names.contains(n.as_str())).collect();
    old_left.sort();
    new_left.sort();
    for (o, n) in old_left.into_iter().zip(new_left) {
        pairs.push((o.1.clone(), n.1.clone()));
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::SpecBuilder;

    struct Fig2 {
        b: SpecBuilder,
        z10: DagHash,
        z11: DagHash,
        h: DagHash,
        s: DagHash,
        hp: DagHash,
        t: DagHash,
    }

    fn fig2() -> Fig2 {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z10 = b.node("z", "1.0", &[], &[], &[]);
        let z11 = b.node("z", "1.1", &[], &[], &[]);
        let h = b.node("h", "1.0", &[], &[&z10], &[]);
        let t = b.node("t", "1.0", &[], &[&h, &z10], &[]);
        let s = b.node("s", "1.0", &[], &[], &[]);
        let hp = b.node("h", "2.0", &[], &[&s, &z11], &[]);
        Fig2 { b, z10, z11, h, s, hp, t }
    }

    #[test]
    fn transitive_splice_matches_hand_built_dag() {
        let mut f = fig2();
        let out = splice(&f.b.spec(&f.t), &f.b.spec(&f.hp), true).unwrap();
        let mut tattrs = f.b.spec(&f.t).root_node().attrs.clone();
        tattrs.build_spec_hash = Some(f.t.clone());
        let expected = f.b.node_with(tattrs, &[&f.hp, &f.z11], &[]);
        assert_eq!(out.root, expected);
        assert_eq!(out.nodes.len(), 4);
        assert!(out.nodes.contains_key(&f.s));
        assert!(!out.nodes.contains_key(&f.h));
    }

    #[test]
    fn intransitive_splice_keeps_root_copies() {
        let mut f = fig2();
        let out = splice(&f.b.spec(&f.t), &f.b.spec(&f.hp), false).unwrap();
        let mut hattrs = f.b.spec(&f.hp).root_node().attrs.clone();
        hattrs.build_spec_hash = Some(f.hp.clone());
        let hp_star = f.b.node_with(hattrs, &[&f.s, &f.z10], &[]);
        let mut tattrs = f.b.spec(&f.t).root_node().attrs.clone();
        tattrs.build_spec_hash = Some(f.t.clone());
        let expected = f.b.node_with(tattrs, &[&hp_star, &f.z10], &[]);
        assert_eq!(out.root, expected);
    }

    #[test]
    fn no_op_splice_is_identity() {
        let f = fig2();
        let root = f.b.spec(&f.t);
        for transitive in [true, false] {
            let out = splice(&root, &f.b.spec(&f.h), transitive).unwrap();
            assert_eq!(out, root);
        }
    }

    #[test]
    fn errors() {
        let mut f = fig2();
        let root = f.b.spec(&f.t);
        let other = f.b.node("q", "1.0", &[], &[], &[]);
        assert_eq!(
            splice(&root, &f.b.spec(&other), true),
            Err(SpliceError::NoTarget("q".into()))
        );
        let t2 = f.b.node("t", "2.0", &[], &[], &[]);
        assert!(matches!(splice(&root, &f.b.spec(&t2), true), Err(SpliceError::RootTarget(_))));
        let bad = f.b.node("h", "3.0", &[], &[&t2], &[]);
        assert!(matches!(
            splice(&root, &f.b.spec(&bad), true),
            Err(SpliceError::WouldCycle { .. })
        ));
    }

    #[test]
    fn build_edges_dropped_on_spliced_nodes_only() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let cmake = b.node("cmake", "3.27", &[], &[], &[]);
        let z10 = b.node("z", "1.0", &[], &[], &[]);
        let z11 = b.node("z", "1.1", &[], &[], &[]);
        let lib = b.node("lib", "1.0", &[], &[], &[&cmake]);
        let t = b.node("t", "1.0", &[], &[&z10, &lib], &[&cmake]);
        let out = splice(&b.spec(&t), &b.spec(&z11), true).unwrap();
        assert_eq!(out.children(&out.root, EdgeKind::Build).count(), 0);
        // lib is untouched and keeps its build edge and hash
        assert!(out.nodes.contains_key(&lib));
        assert_eq!(out.children(&lib, EdgeKind::Build).count(), 1);
    }

    #[test]
    fn rewiring_map_for_transitive_splice() {
        let f = fig2();
        let out = splice(&f.b.spec(&f.t), &f.b.spec(&f.hp), true).unwrap();
        let map = rewiring_map(&out, &f.b.store).unwrap();
        assert_eq!(map.len(), 1);
        let t_map = &map[&out.root];
        assert_eq!(t_map[&f.h], f.hp);
        assert_eq!(t_map[&f.z10], f.z11);
        assert!(rewiring_map(&f.b.spec(&f.t), &f.b.store).unwrap().is_empty());
    }

    #[test]
    fn rewiring_map_needs_provenance() {
        let f = fig2();
        let out = splice(&f.b.spec(&f.t), &f.b.spec(&f.hp), true).unwrap();
        assert!(matches!(
            rewiring_map(&out, &SpecStore::new()),
            Err(SpliceError::MissingProvenance(_))
        ));
    }

    #[test]
    fn cross_name_leftovers_pair_in_order() {
        let a = DagHash::of_bytes(b"a");
        let b = DagHash::of_bytes(b"b");
        let c = DagHash::of_bytes(b"c");
        let d = DagHash::of_bytes(b"d");
        let pairs = pair_children(
            vec![("h".into(), a.clone()), ("z".into(), b.clone())],
            vec![("hprime".into(), c.clone()), ("z".into(), d.clone())],
        );
        assert_eq!(pairs, vec![(b, d), (a, c)]);
    }
}
