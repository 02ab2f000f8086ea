//! Spec model: node constraints, abstract requests, and hash-addressed
//! concrete DAGs.
//!
//! A concrete node's hash covers its attributes, its outgoing edges (kind plus
//! child hash) and its build-spec reference, so a hash names a whole subgraph.
//! [`SpecStore`] exploits that: it is a merkle store of nodes from which any
//! [`ConcreteSpec`] can be cut out by root hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hash::DagHash;
use crate::version::{Version, VersionConstraint};

/// Lowercase alphanumerics and dashes, starting with a letter or digit.
pub fn is_valid_name(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('-')
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Tokens allowed as string variant values and os/target labels.
pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| {
            b.is_ascii_graphic() && !matches!(b, b'@' | b'+' | b'~' | b'^' | b'%' | b'=' | b'"')
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantValue {
    Bool(bool),
    Str(String),
}

impl VariantValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            VariantValue::Bool(b) => Some(*b),
            VariantValue::Str(_) => None,
        }
    }
}

impl fmt::Display for VariantValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantValue::Bool(b) => write!(f, "{b}"),
            VariantValue::Str(s) => f.write_str(s),
        }
    }
}

/// Constraints on one node. A missing name makes the constraint anonymous,
/// which is how `when=` clauses are expressed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeConstraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<VersionConstraint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub variants: BTreeMap<String, VariantValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl NodeConstraints {
    pub fn named(name: impl Into<String>) -> Self {
        NodeConstraints {
            name: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn with_version(mut self, v: VersionConstraint) -> Self {
        self.version = Some(v);
        self
    }

    pub fn with_variant(mut self, key: impl Into<String>, value: VariantValue) -> Self {
        self.variants.insert(key.into(), value);
        self
    }

    /// True when nothing beyond (optionally) the name is constrained.
    pub fn is_unconstrained(&self) -> bool {
        self.version.is_none() && self.variants.is_empty() && self.os.is_none() && self.target.is_none()
    }

    /// The same constraints with the name dropped.
    pub fn anonymous(&self) -> NodeConstraints {
        NodeConstraints {
            name: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    #[serde(rename = "build")]
    Build,
    #[serde(rename = "link-run")]
    LinkRun,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Build => "build",
            EdgeKind::LinkRun => "link-run",
        }
    }
}

/// Edge kind requested for a dependency constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DepKind {
    #[serde(rename = "link-run")]
    LinkRun,
    #[serde(rename = "build")]
    Build,
    #[serde(rename = "any")]
    Any,
}

impl DepKind {
    pub fn admits(self, edge: EdgeKind) -> bool {
        match self {
            DepKind::Any => true,
            DepKind::LinkRun => edge == EdgeKind::LinkRun,
            DepKind::Build => edge == EdgeKind::Build,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dependency {
    pub constraints: NodeConstraints,
    pub kind: DepKind,
}

/// A partial request: constraints on the root plus constraints on named
/// dependencies anywhere below it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbstractSpec {
    pub root: NodeConstraints,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
}

impl AbstractSpec {
    pub fn dependency(&self, name: &str) -> Option<&Dependency> {
        self.dependencies
            .iter()
            .find(|d| d.constraints.name.as_deref() == Some(name))
    }
}

/// Anything that can be tested against a [`NodeConstraints`].
pub trait Candidate {
    fn candidate_name(&self) -> Option<&str>;
    /// Every version this candidate may take lies inside `c`.
    fn version_within(&self, c: &VersionConstraint) -> bool;
    fn variant(&self, key: &str) -> Option<&VariantValue>;
    fn candidate_os(&self) -> Option<&str>;
    fn candidate_target(&self) -> Option<&str>;
}

impl Candidate for NodeConstraints {
    fn candidate_name(&self) -> Option<&str> {
        self.name.as_deref()
    }
    fn version_within(&self, c: &VersionConstraint) -> bool {
        self.version.as_ref().is_some_and(|v| v.is_subset_of(c))
    }
    fn variant(&self, key: &str) -> Option<&VariantValue> {
        self.variants.get(key)
    }
    fn candidate_os(&self) -> Option<&str> {
        self.os.as_deref()
    }
    fn candidate_target(&self) -> Option<&str> {
        self.target.as_deref()
    }
}

impl Candidate for NodeAttrs {
    fn candidate_name(&self) -> Option<&str> {
        Some(&self.name)
    }
    fn version_within(&self, c: &VersionConstraint) -> bool {
        c.contains(&self.version)
    }
    fn variant(&self, key: &str) -> Option<&VariantValue> {
        self.variants.get(key)
    }
    fn candidate_os(&self) -> Option<&str> {
        Some(&self.os)
    }
    fn candidate_target(&self) -> Option<&str> {
        Some(&self.target)
    }
}

impl Candidate for ConcreteNode {
    fn candidate_name(&self) -> Option<&str> {
        self.attrs.candidate_name()
    }
    fn version_within(&self, c: &VersionConstraint) -> bool {
        self.attrs.version_within(c)
    }
    fn variant(&self, key: &str) -> Option<&VariantValue> {
        self.attrs.variant(key)
    }
    fn candidate_os(&self) -> Option<&str> {
        self.attrs.candidate_os()
    }
    fn candidate_target(&self) -> Option<&str> {
        self.attrs.candidate_target()
    }
}

/// Every field present in `constraint` is matched by `candidate`.
///
/// Names are compared literally; resolving a virtual name to a provider is
/// the caller's job.
pub fn satisfies<C: Candidate + ?Sized>(candidate: &C, constraint: &NodeConstraints) -> bool {
    if let Some(n) = &constraint.name {
        if candidate.candidate_name() != Some(n.as_str()) {
            return false;
        }
    }
    if let Some(v) = &constraint.version {
        if !candidate.version_within(v) {
            return false;
        }
    }
    if !constraint
        .variants
        .iter()
        .all(|(k, v)| candidate.variant(k) == Some(v))
    {
        return false;
    }
    if let Some(os) = &constraint.os {
        if candidate.candidate_os() != Some(os.as_str()) {
            return false;
        }
    }
    if let Some(t) = &constraint.target {
        if candidate.candidate_target() != Some(t.as_str()) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("conflicting {field}: {left} vs {right}")]
pub struct Conflict {
    pub field: String,
    pub left: String,
    pub right: String,
}

fn merge_label(
    field: &str,
    a: &Option<String>,
    b: &Option<String>,
) -> Result<Option<String>, Conflict> {
    match (a, b) {
        (Some(x), Some(y)) if x != y => Err(Conflict {
            field: field.to_string(),
            left: x.clone(),
            right: y.clone(),
        }),
        _ => Ok(a.clone().or_else(|| b.clone())),
    }
}

/// The conjunction of two constraints.
pub fn merge_constraints(a: &NodeConstraints, b: &NodeConstraints) -> Result<NodeConstraints, Conflict> {
    let name = merge_label("name", &a.name, &b.name)?;
    let version = match (&a.version, &b.version) {
        (Some(x), Some(y)) => Some(x.intersect(y).ok_or_else(|| Conflict {
            field: "version".into(),
            left: format!("@{x}"),
            right: format!("@{y}"),
        })?),
        (x, y) => x.clone().or_else(|| y.clone()),
    };
    let mut variants = a.variants.clone();
    for (k, v) in &b.variants {
        match variants.get(k) {
            Some(existing) if existing != v => {
                return Err(Conflict {
                    field: format!("variant {k}"),
                    left: existing.to_string(),
                    right: v.to_string(),
                })
            }
            _ => {
                variants.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(NodeConstraints {
        name,
        version,
        variants,
        os: merge_label("os", &a.os, &b.os)?,
        target: merge_label("target", &a.target, &b.target)?,
    })
}

/// Runtime attributes of a concrete node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeAttrs {
    pub name: String,
    pub version: Version,
    pub variants: BTreeMap<String, VariantValue>,
    pub os: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_spec_hash: Option<DagHash>,
}

impl NodeAttrs {
    /// Constraints that this node, and only nodes with its attributes, satisfy.
    pub fn as_constraints(&self) -> NodeConstraints {
        NodeConstraints {
            name: Some(self.name.clone()),
            version: Some(VersionConstraint::exact(self.version.clone())),
            variants: self.variants.clone(),
            os: Some(self.os.clone()),
            target: Some(self.target.clone()),
        }
    }

    pub fn is_spliced(&self) -> bool {
        self.build_spec_hash.is_some()
    }
}

/// The exact byte document a node hash is computed over.
pub fn node_document(attrs: &NodeAttrs, deps: &[(EdgeKind, DagHash)]) -> String {
    let mut deps: Vec<(EdgeKind, &DagHash)> = deps.iter().map(|(k, h)| (*k, h)).collect();
    deps.sort();
    deps.dedup();
    let mut doc = json!({
        "name": attrs.name,
        "version": attrs.version.to_string(),
        "variants": attrs.variants,
        "os": attrs.os,
        "target": attrs.target,
        "deps": deps.iter().map(|(k, h)| json!([k.as_str(), h.as_str()])).collect::<Vec<_>>(),
    });
    if let Some(b) = &attrs.build_spec_hash {
        doc["build_spec_hash"] = Value::String(b.to_string());
    }
    doc.to_string()
}

pub fn node_hash(attrs: &NodeAttrs, deps: &[(EdgeKind, DagHash)]) -> DagHash {
    DagHash::of_bytes(node_document(attrs, deps).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConcreteNode {
    #[serde(flatten)]
    pub attrs: NodeAttrs,
    pub hash: DagHash,
}

impl Deref for ConcreteNode {
    type Target = NodeAttrs;
    fn deref(&self) -> &NodeAttrs {
        &self.attrs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("cycle detected at node {0}")]
    CycleDetected(DagHash),
    #[error("edge {parent} -> {child} points outside the spec")]
    DanglingEdge { parent: DagHash, child: DagHash },
    #[error("root {0} is not a node of the spec")]
    MissingRoot(DagHash),
    #[error("node {0} is unreachable from the root")]
    Unreachable(DagHash),
    #[error("node {name} is stored under {stored} but hashes to {computed}")]
    HashMismatch {
        name: String,
        stored: DagHash,
        computed: DagHash,
    },
    #[error("package {name} appears more than once in the link-run graph")]
    DuplicateLinkRun { name: String },
    #[error("spliced node {0} still has build dependencies")]
    SplicedBuildEdge(DagHash),
    #[error("malformed spec document: {0}")]
    Document(String),
}

/// A store of concrete nodes keyed by hash. Children must be inserted before
/// their parents.
#[derive(Debug, Clone, Default)]
pub struct SpecStore {
    nodes: BTreeMap<DagHash, StoredNode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredNode {
    pub attrs: NodeAttrs,
    pub deps: Vec<(EdgeKind, DagHash)>,
}

impl StoredNode {
    pub fn children(&self, kind: EdgeKind) -> impl Iterator<Item = &DagHash> {
        self.deps.iter().filter(move |(k, _)| *k == kind).map(|(_, h)| h)
    }
}

impl SpecStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        attrs: NodeAttrs,
        deps: Vec<(EdgeKind, DagHash)>,
    ) -> Result<DagHash, SpecError> {
        let mut deps = deps;
        deps.sort();
        deps.dedup();
        let hash = node_hash(&attrs, &deps);
        for (_, child) in &deps {
            if !self.nodes.contains_key(child) {
                return Err(SpecError::DanglingEdge {
                    parent: hash,
                    child: child.clone(),
                });
            }
        }
        self.nodes
            .entry(hash.clone())
            .or_insert(StoredNode { attrs, deps });
        Ok(hash)
    }

    pub fn get(&self, hash: &DagHash) -> Option<&StoredNode> {
        self.nodes.get(hash)
    }

    pub fn contains(&self, hash: &DagHash) -> bool {
        self.nodes.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DagHash, &StoredNode)> {
        self.nodes.iter()
    }

    /// Add every node of `spec`. The spec should already be valid.
    pub fn absorb(&mut self, spec: &ConcreteSpec) {
        for (h, node) in &spec.nodes {
            self.nodes.entry(h.clone()).or_insert_with(|| StoredNode {
                attrs: node.attrs.clone(),
                deps: spec.deps_of(h),
            });
        }
    }

    /// Insert without checking that children are present; for overlays on
    /// top of another store.
    pub(crate) fn insert_unchecked(&mut self, attrs: NodeAttrs, mut deps: Vec<(EdgeKind, DagHash)>) -> DagHash {
        deps.sort();
        deps.dedup();
        let hash = node_hash(&attrs, &deps);
        self.nodes.entry(hash.clone()).or_insert(StoredNode { attrs, deps });
        hash
    }

    /// The subgraph reachable from `root` as a standalone spec.
    pub fn extract(&self, root: &DagHash) -> Result<ConcreteSpec, SpecError> {
        extract_layered(&[self], root)
    }
}

/// Cut a spec out of several stores, looked up in order.
pub fn extract_layered(stores: &[&SpecStore], root: &DagHash) -> Result<ConcreteSpec, SpecError> {
    let lookup = |h: &DagHash| stores.iter().find_map(|s| s.get(h));
    if lookup(root).is_none() {
        return Err(SpecError::MissingRoot(root.clone()));
    }
    let mut spec = ConcreteSpec {
        nodes: BTreeMap::new(),
        root: root.clone(),
        link_run_edges: BTreeSet::new(),
        build_edges: BTreeSet::new(),
    };
    let mut stack = vec![root.clone()];
    while let Some(h) = stack.pop() {
        if spec.nodes.contains_key(&h) {
            continue;
        }
        let stored = lookup(&h).ok_or_else(|| SpecError::MissingRoot(h.clone()))?;
        for (kind, child) in &stored.deps {
            let edge = (h.clone(), child.clone());
            match kind {
                EdgeKind::LinkRun => spec.link_run_edges.insert(edge),
                EdgeKind::Build => spec.build_edges.insert(edge),
            };
            stack.push(child.clone());
        }
        spec.nodes.insert(
            h.clone(),
            ConcreteNode {
                attrs: stored.attrs.clone(),
                hash: h,
            },
        );
    }
    Ok(spec)
}

/// A fully resolved DAG with separate link-run and build edge sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteSpec {
    pub nodes: BTreeMap<DagHash, ConcreteNode>,
    pub root: DagHash,
    pub link_run_edges: BTreeSet<(DagHash, DagHash)>,
    pub build_edges: BTreeSet<(DagHash, DagHash)>,
}

fn children_in<'a>(
    edges: &'a BTreeSet<(DagHash, DagHash)>,
    parent: &'a DagHash,
) -> impl Iterator<Item = &'a DagHash> + 'a {
    edges
        .range((parent.clone(), DagHash::min_bound())..)
        .take_while(move |(p, _)| p == parent)
        .map(|(_, c)| c)
}

impl ConcreteSpec {
    pub fn root_node(&self) -> &ConcreteNode {
        &self.nodes[&self.root]
    }

    pub fn node(&self, hash: &DagHash) -> Option<&ConcreteNode> {
        self.nodes.get(hash)
    }

    pub fn children<'a>(&'a self, hash: &'a DagHash, kind: EdgeKind) -> impl Iterator<Item = &'a DagHash> + 'a {
        let edges = match kind {
            EdgeKind::LinkRun => &self.link_run_edges,
            EdgeKind::Build => &self.build_edges,
        };
        children_in(edges, hash)
    }

    pub fn link_children<'a>(&'a self, hash: &'a DagHash) -> impl Iterator<Item = &'a DagHash> + 'a {
        self.children(hash, EdgeKind::LinkRun)
    }

    /// All outgoing edges of a node, sorted.
    pub fn deps_of(&self, hash: &DagHash) -> Vec<(EdgeKind, DagHash)> {
        let mut out: Vec<(EdgeKind, DagHash)> = self
            .children(hash, EdgeKind::Build)
            .map(|c| (EdgeKind::Build, c.clone()))
            .chain(self.link_children(hash).map(|c| (EdgeKind::LinkRun, c.clone())))
            .collect();
        out.sort();
        out
    }

    /// Nodes reachable from `from` through link-run edges, including `from`.
    pub fn link_run_closure(&self, from: &DagHash) -> BTreeSet<DagHash> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from.clone()];
        while let Some(h) = stack.pop() {
            if seen.insert(h.clone()) {
                stack.extend(self.link_children(&h).cloned());
            }
        }
        seen
    }

    /// The node named `name` in the root's link-run graph, if any.
    pub fn find_link_run(&self, name: &str) -> Option<&ConcreteNode> {
        self.link_run_closure(&self.root)
            .into_iter()
            .map(|h| &self.nodes[&h])
            .find(|n| n.name == name)
    }

    /// Nodes in children-before-parents order, ties broken by hash.
    pub fn topological_order(&self) -> Result<Vec<DagHash>, SpecError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Active,
            Done,
        }
        let mut marks: BTreeMap<&DagHash, Mark> = BTreeMap::new();
        let mut order = Vec::with_capacity(self.nodes.len());
        for start in self.nodes.keys() {
            if marks.contains_key(start) {
                continue;
            }
            // iterative DFS with an explicit child cursor
            let mut stack: Vec<(&DagHash, Vec<&DagHash>)> = Vec::new();
            marks.insert(start, Mark::Active);
            stack.push((start, self.sorted_children(start)));
            while let Some((node, pending)) = stack.last_mut() {
                if let Some(child) = pending.pop() {
                    if !self.nodes.contains_key(child) {
                        return Err(SpecError::DanglingEdge {
                            parent: (*node).clone(),
                            child: child.clone(),
                        });
                    }
                    match marks.get(child) {
                        Some(Mark::Active) => return Err(SpecError::CycleDetected(child.clone())),
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(child, Mark::Active);
                            let kids = self.sorted_children(child);
                            stack.push((child, kids));
                        }
                    }
                } else {
                    let node = *node;
                    marks.insert(node, Mark::Done);
                    order.push(node.clone());
                    stack.pop();
                }
            }
        }
        Ok(order)
    }

    fn sorted_children<'a>(&'a self, h: &'a DagHash) -> Vec<&'a DagHash> {
        let mut kids: Vec<&DagHash> = self
            .link_children(h)
            .chain(self.children(h, EdgeKind::Build))
            .collect();
        kids.sort();
        kids.dedup();
        kids.reverse();
        kids
    }

    /// Recompute the hash of `node` from its attributes and subgraph.
    pub fn dag_hash(&self, node: &DagHash) -> Result<DagHash, SpecError> {
        let order = self.topological_order()?;
        let computed = self.recompute_all(&order)?;
        computed
            .get(node)
            .cloned()
            .ok_or_else(|| SpecError::MissingRoot(node.clone()))
    }

    fn recompute_all(&self, order: &[DagHash]) -> Result<BTreeMap<DagHash, DagHash>, SpecError> {
        let mut computed: BTreeMap<DagHash, DagHash> = BTreeMap::new();
        for h in order {
            let deps: Vec<(EdgeKind, DagHash)> = self
                .deps_of(h)
                .into_iter()
                .map(|(k, c)| (k, computed[&c].clone()))
                .collect();
            computed.insert(h.clone(), node_hash(&self.nodes[h].attrs, &deps));
        }
        Ok(computed)
    }

    /// Check every structural invariant of a concrete spec.
    pub fn validate(&self) -> Result<(), SpecError> {
        if !self.nodes.contains_key(&self.root) {
            return Err(SpecError::MissingRoot(self.root.clone()));
        }
        for (p, c) in self.link_run_edges.iter().chain(self.build_edges.iter()) {
            if !self.nodes.contains_key(p) || !self.nodes.contains_key(c) {
                return Err(SpecError::DanglingEdge {
                    parent: p.clone(),
                    child: c.clone(),
                });
            }
        }
        let order = self.topological_order()?;
        let computed = self.recompute_all(&order)?;
        for (h, node) in &self.nodes {
            if node.hash != *h || computed[h] != *h {
                return Err(SpecError::HashMismatch {
                    name: node.name.clone(),
                    stored: h.clone(),
                    computed: computed[h].clone(),
                });
            }
            if node.is_spliced() && self.children(h, EdgeKind::Build).next().is_some() {
                return Err(SpecError::SplicedBuildEdge(h.clone()));
            }
        }
        let mut reached = BTreeSet::new();
        let mut stack = vec![&self.root];
        while let Some(h) = stack.pop() {
            if reached.insert(h) {
                stack.extend(self.link_children(h));
                stack.extend(self.children(h, EdgeKind::Build));
            }
        }
        if let Some(h) = self.nodes.keys().find(|h| !reached.contains(h)) {
            return Err(SpecError::Unreachable(h.clone()));
        }
        let mut names = BTreeSet::new();
        for h in self.link_run_closure(&self.root) {
            if !names.insert(self.nodes[&h].name.clone()) {
                return Err(SpecError::DuplicateLinkRun {
                    name: self.nodes[&h].name.clone(),
                });
            }
        }
        Ok(())
    }

    /// The part of this spec reachable from `hash`, rooted there.
    pub fn subspec(&self, hash: &DagHash) -> Result<ConcreteSpec, SpecError> {
        if !self.nodes.contains_key(hash) {
            return Err(SpecError::MissingRoot(hash.clone()));
        }
        let mut out = ConcreteSpec {
            nodes: BTreeMap::new(),
            root: hash.clone(),
            link_run_edges: BTreeSet::new(),
            build_edges: BTreeSet::new(),
        };
        let mut stack = vec![hash.clone()];
        while let Some(h) = stack.pop() {
            if out.nodes.contains_key(&h) {
                continue;
            }
            for (kind, c) in self.deps_of(&h) {
                let edge = (h.clone(), c.clone());
                match kind {
                    EdgeKind::LinkRun => out.link_run_edges.insert(edge),
                    EdgeKind::Build => out.build_edges.insert(edge),
                };
                stack.push(c);
            }
            let node = self.nodes.get(&h).ok_or_else(|| SpecError::MissingRoot(h.clone()))?;
            out.nodes.insert(h, node.clone());
        }
        Ok(out)
    }

    pub fn spliced_nodes(&self) -> impl Iterator<Item = &ConcreteNode> {
        self.nodes.values().filter(|n| n.is_spliced())
    }

    /// The canonical spec document: sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("concrete specs always serialize")
            .to_string()
    }

    /// Parse and validate a spec document.
    pub fn from_json(text: &str) -> Result<ConcreteSpec, SpecError> {
        let spec: ConcreteSpec =
            serde_json::from_str(text).map_err(|e| SpecError::Document(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Convenience for assembling concrete specs by hand, bottom-up.
#[derive(Debug, Clone)]
pub struct SpecBuilder {
    pub os: String,
    pub target: String,
    pub store: SpecStore,
}

impl SpecBuilder {
    pub fn new(os: &str, target: &str) -> Self {
        SpecBuilder {
            os: os.to_string(),
            target: target.to_string(),
            store: SpecStore::new(),
        }
    }

    /// Add a node; `variants` entries are `("name", value)`.
    pub fn node(
        &mut self,
        name: &str,
        version: &str,
        variants: &[(&str, VariantValue)],
        link: &[&DagHash],
        build: &[&DagHash],
    ) -> DagHash {
        let attrs = NodeAttrs {
            name: name.to_string(),
            version: version.parse().expect("builder versions are literals"),
            variants: variants
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            os: self.os.clone(),
            target: self.target.clone(),
            build_spec_hash: None,
        };
        self.node_with(attrs, link, build)
    }

    pub fn node_with(&mut self, attrs: NodeAttrs, link: &[&DagHash], build: &[&DagHash]) -> DagHash {
        let deps = link
            .iter()
            .map(|h| (EdgeKind::LinkRun, (*h).clone()))
            .chain(build.iter().map(|h| (EdgeKind::Build, (*h).clone())))
            .collect();
        self.store.insert(attrs, deps).expect("children added first")
    }

    pub fn spec(&self, root: &DagHash) -> ConcreteSpec {
        self.store.extract(root).expect("root was added")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vc(s: &str) -> VersionConstraint {
        s.parse().unwrap()
    }

    fn attrs(name: &str, version: &str) -> NodeAttrs {
        NodeAttrs {
            name: name.into(),
            version: version.parse().unwrap(),
            variants: BTreeMap::new(),
            os: "centos8".into(),
            target: "skylake".into(),
            build_spec_hash: None,
        }
    }

    #[test]
    fn satisfies_versions_and_variants() {
        let mut ex = attrs("example", "1.1.0");
        ex.variants.insert("bzip".into(), VariantValue::Bool(true));
        let when = NodeConstraints::default()
            .with_version(vc("1.1.0"))
            .with_variant("bzip", VariantValue::Bool(true));
        assert!(satisfies(&ex, &when));
        assert!(satisfies(&ex, &NodeConstraints::named("example")));

        let z = attrs("zlib", "1.2.11");
        assert!(satisfies(&z, &NodeConstraints::named("zlib").with_version(vc("1.2"))));
        assert!(!satisfies(&z, &NodeConstraints::named("zlib").with_version(vc("1.3"))));
    }

    #[test]
    fn satisfies_is_reflexive_on_concrete_nodes() {
        let mut n = attrs("hdf5", "1.14.5");
        n.variants.insert("api".into(), VariantValue::Str("default".into()));
        assert!(satisfies(&n, &n.as_constraints()));
    }

    #[test]
    fn merge_examples() {
        let a = NodeConstraints::default().with_version(vc("1.2"));
        let b = NodeConstraints::default().with_version(vc("1.2.11"));
        assert_eq!(merge_constraints(&a, &b).unwrap().version, Some(vc("1.2.11")));

        let on = NodeConstraints::default().with_variant("bzip", VariantValue::Bool(true));
        let off = NodeConstraints::default().with_variant("bzip", VariantValue::Bool(false));
        let err = merge_constraints(&on, &off).unwrap_err();
        assert_eq!(err.field, "variant bzip");
    }

    #[test]
    fn merged_range_matches_brute_force_membership() {
        let a = vc("1.0:1.5");
        let b = vc("1.3:2.0");
        let merged = merge_constraints(
            &NodeConstraints::default().with_version(a.clone()),
            &NodeConstraints::default().with_version(b.clone()),
        )
        .unwrap()
        .version
        .unwrap();
        assert_eq!(merged.to_string(), "1.3:1.5");
        for tenth in 0..=20u64 {
            let v = Version::new(vec![1 + tenth / 10, tenth % 10]).unwrap();
            assert_eq!(merged.contains(&v), a.contains(&v) && b.contains(&v), "{v}");
        }
    }

    fn two_level(order_swapped: bool) -> DagHash {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let (z, h) = if order_swapped {
            let h0 = b.node("h", "1.0", &[], &[], &[]);
            let z0 = b.node("z", "1.0", &[], &[], &[]);
            (z0, h0)
        } else {
            let z0 = b.node("z", "1.0", &[], &[], &[]);
            let h0 = b.node("h", "1.0", &[], &[], &[]);
            (z0, h0)
        };
        if order_swapped {
            b.node("t", "1.0", &[], &[&z, &h], &[])
        } else {
            b.node("t", "1.0", &[], &[&h, &z], &[])
        }
    }

    #[test]
    fn hash_ignores_insertion_order() {
        assert_eq!(two_level(false), two_level(true));
    }

    #[test]
    fn identical_single_nodes_hash_equal() {
        let a = node_hash(&attrs("zlib", "1.3.1"), &[]);
        let b = node_hash(&attrs("zlib", "1.3.1"), &[]);
        assert_eq!(a, b);
        assert_ne!(a, node_hash(&attrs("zlib", "1.3"), &[]));
    }

    #[test]
    fn build_spec_reference_changes_hash() {
        let plain = attrs("t", "1.0");
        let h0 = node_hash(&plain, &[]);
        let mut spliced = plain.clone();
        spliced.build_spec_hash = Some(h0.clone());
        assert_ne!(node_hash(&spliced, &[]), h0);
    }

    #[test]
    fn canonical_document_is_sorted_and_compact() {
        let doc = node_document(&attrs("z", "1.0"), &[]);
        assert_eq!(
            doc,
            r#"{"deps":[],"name":"z","os":"centos8","target":"skylake","variants":{},"version":"1.0"}"#
        );
    }

    #[test]
    fn validate_rejects_duplicate_link_run_names() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z0 = b.node("z", "1.0", &[], &[], &[]);
        let z1 = b.node("z", "1.1", &[], &[], &[]);
        let h = b.node("h", "1.0", &[], &[&z1], &[]);
        let t = b.node("t", "1.0", &[], &[&h, &z0], &[]);
        assert!(matches!(
            b.spec(&t).validate(),
            Err(SpecError::DuplicateLinkRun { .. })
        ));
    }

    #[test]
    fn validate_allows_other_versions_behind_build_edges() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z0 = b.node("z", "1.0", &[], &[], &[]);
        let z1 = b.node("z", "1.1", &[], &[], &[]);
        let cmake = b.node("cmake", "3.27", &[], &[&z1], &[]);
        let t = b.node("t", "1.0", &[], &[&z0], &[&cmake]);
        b.spec(&t).validate().unwrap();
    }

    #[test]
    fn validate_rejects_build_edges_on_spliced_nodes() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let cmake = b.node("cmake", "3.27", &[], &[], &[]);
        let orig = b.node("t", "1.0", &[], &[], &[]);
        let mut a = attrs("t", "1.0");
        a.build_spec_hash = Some(orig);
        let t = b.node_with(a, &[], &[&cmake]);
        assert!(matches!(
            b.spec(&t).validate(),
            Err(SpecError::SplicedBuildEdge(_))
        ));
    }

    #[test]
    fn validate_rejects_dangling_and_tampered() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z = b.node("z", "1.0", &[], &[], &[]);
        let t = b.node("t", "1.0", &[], &[&z], &[]);
        let mut spec = b.spec(&t);
        spec.validate().unwrap();

        let mut dangling = spec.clone();
        dangling.link_run_edges.insert((t.clone(), DagHash::of_bytes(b"nowhere")));
        assert!(matches!(dangling.validate(), Err(SpecError::DanglingEdge { .. })));

        spec.nodes.get_mut(&z).unwrap().attrs.version = "9.9".parse().unwrap();
        assert!(matches!(spec.validate(), Err(SpecError::HashMismatch { .. })));
    }

    #[test]
    fn dag_hash_detects_cycles() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z = b.node("z", "1.0", &[], &[], &[]);
        let t = b.node("t", "1.0", &[], &[&z], &[]);
        let mut spec = b.spec(&t);
        spec.link_run_edges.insert((z.clone(), t.clone()));
        assert!(matches!(spec.dag_hash(&t), Err(SpecError::CycleDetected(_))));
    }

    #[test]
    fn json_round_trip_preserves_hashes() {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z = b.node("z", "1.0", &[("pic", VariantValue::Bool(true))], &[], &[]);
        let cm = b.node("cmake", "3.27", &[], &[], &[]);
        let t = b.node("t", "1.0", &[("api", VariantValue::Str("v2".into()))], &[&z], &[&cm]);
        let spec = b.spec(&t);
        let text = spec.to_canonical_json();
        let back = ConcreteSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.dag_hash(&back.root).unwrap(), t);
        assert_eq!(back.to_canonical_json(), text);
    }

    fn arb_constraint() -> impl Strategy<Value = NodeConstraints> {
        let version = prop::option::of((0u64..3, 0u64..3, prop::bool::ANY, 0u64..3, 0u64..3).prop_filter_map(
            "non-empty range",
            |(a, b, range, c, d)| {
                if range {
                    VersionConstraint::new(
                        Some(Version::new(vec![a, b]).unwrap()),
                        Some(Version::new(vec![c, d]).unwrap()),
                    )
                    .map(Some)
                } else {
                    Some(Some(VersionConstraint::exact(Version::new(vec![a]).unwrap())))
                }
            },
        ))
        .prop_map(|v| v.flatten());
        let variants = prop::collection::btree_map(
            prop::sample::select(vec!["a", "b", "c"]),
            prop::bool::ANY.prop_map(VariantValue::Bool),
            0..3,
        );
        let os = prop::option::of(prop::sample::select(vec!["centos8", "rhel9"]));
        (version, variants, os).prop_map(|(version, variants, os)| NodeConstraints {
            name: None,
            version,
            variants: variants.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            os: os.map(str::to_string),
            target: None,
        })
    }

    fn arb_node() -> impl Strategy<Value = NodeAttrs> {
        (
            0u64..3,
            0u64..3,
            prop::option::of(0u64..3),
            prop::collection::btree_map(prop::sample::select(vec!["a", "b", "c"]), prop::bool::ANY, 3),
            prop::sample::select(vec!["centos8", "rhel9"]),
        )
            .prop_map(|(a, b, c, vars, os)| {
                let mut comps = vec![a, b];
                comps.extend(c);
                NodeAttrs {
                    name: "p".into(),
                    version: Version::new(comps).unwrap(),
                    variants: vars
                        .into_iter()
                        .map(|(k, v)| (k.to_string(), VariantValue::Bool(v)))
                        .collect(),
                    os: os.into(),
                    target: "skylake".into(),
                    build_spec_hash: None,
                }
            })
    }

    proptest! {
        #[test]
        fn merge_is_conjunction(c in arb_node(), a in arb_constraint(), b in arb_constraint()) {
            let both = satisfies(&c, &a) && satisfies(&c, &b);
            match merge_constraints(&a, &b) {
                Ok(m) => prop_assert_eq!(satisfies(&c, &m), both),
                Err(_) => prop_assert!(!both),
            }
        }

        #[test]
        fn satisfies_reflexive(c in arb_node()) {
            prop_assert!(satisfies(&c, &c.as_constraints()));
        }
    }
}
