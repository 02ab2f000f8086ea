//! Candidate solutions and the rules that decide whether one is valid. The
//! search and the exhaustive oracle both judge solutions through `evaluate`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{Objective, SolveError, SolveOptions, SpliceDecision};
use crate::cache::ReusablePool;
use crate::hash::DagHash;
use crate::repo::Repo;
use crate::spec::{
    extract_layered, satisfies, AbstractSpec, ConcreteSpec, EdgeKind, NodeAttrs, NodeConstraints, SpecStore,
    VariantValue,
};
use crate::splice::spliced_attrs;
use crate::version::Version;

/// What happens to one cached link-run child of a reused node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChildAction {
    /// The child stays the cached one.
    Keep,
    /// Swap in this cached node; needs a `can_splice` directive.
    Splice(DagHash),
    /// Swap in this cached node because an explicit replacement on the same
    /// parent brought it along.
    Implicit(DagHash),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Choice {
    Built {
        version: Version,
        variants: BTreeMap<String, VariantValue>,
    },
    Reused {
        hash: DagHash,
        /// Keyed by the cached child's name.
        actions: BTreeMap<String, ChildAction>,
    },
}

/// One choice per package present in the solution.
pub type Assignment = BTreeMap<String, Choice>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum RootRef {
    Package(String),
    Virtual(String),
}

/// Request, repository, pool and options, preprocessed once per solve.
pub(crate) struct Universe<'a> {
    pub repo: &'a Repo,
    pub pool: Arc<ReusablePool>,
    pub opts: &'a SolveOptions,
    pub root: RootRef,
    /// Root constraints without the name.
    pub root_constraints: NodeConstraints,
    /// Named request dependencies, packages or virtuals.
    pub request_deps: Vec<(String, NodeConstraints)>,
    pub os: String,
    pub target: String,
    domains: BTreeMap<(String, String), Vec<VariantValue>>,
}

impl<'a> Universe<'a> {
    pub fn new(
        request: &AbstractSpec,
        repo: &'a Repo,
        pool: Arc<ReusablePool>,
        opts: &'a SolveOptions,
    ) -> Result<Self, SolveError> {
        if opts.splice_enabled && !opts.reuse_enabled {
            return Err(SolveError::InvalidOptions("splicing requires reuse".into()));
        }
        if opts.max_candidates_per_node == Some(0) {
            return Err(SolveError::InvalidOptions("max_candidates_per_node must be positive".into()));
        }
        let root_name = match &request.root.name {
            Some(n) => n.clone(),
            None if repo.len() == 1 => repo.packages().next().expect("one package").name.clone(),
            None => return Err(SolveError::InvalidRequest("the request names no root package".into())),
        };
        let root_constraints = request.root.anonymous();
        let root = if repo.get(&root_name).is_some() {
            RootRef::Package(root_name)
        } else if repo.is_virtual(&root_name) {
            if !root_constraints.is_unconstrained() {
                return Err(SolveError::InvalidRequest(format!(
                    "virtual root {root_name} may not carry constraints"
                )));
            }
            RootRef::Virtual(root_name)
        } else {
            return Err(SolveError::UnknownPackage(root_name));
        };
        let mut request_deps = Vec::new();
        for dep in &request.dependencies {
            let name = dep.constraints.name.clone().expect("parsed dependencies are named");
            if repo.get(&name).is_none() {
                if !repo.is_virtual(&name) {
                    return Err(SolveError::UnknownPackage(name));
                }
                if !dep.constraints.anonymous().is_unconstrained() {
                    return Err(SolveError::InvalidRequest(format!(
                        "virtual dependency {name} may not carry constraints"
                    )));
                }
            }
            request_deps.push((name, dep.constraints.clone()));
        }
        let os = request.root.os.clone().unwrap_or_else(|| opts.platform.os.clone());
        let target = request.root.target.clone().unwrap_or_else(|| opts.platform.target.clone());

        // Free-form string variants may take their default or any value some
        // constraint asks for.
        let mut mentioned: BTreeMap<(String, String), Vec<VariantValue>> = BTreeMap::new();
        let mut mention = |pkg: &str, c: &NodeConstraints| {
            for (k, v) in &c.variants {
                mentioned.entry((pkg.to_string(), k.clone())).or_default().push(v.clone());
            }
        };
        if let RootRef::Package(r) = &root {
            mention(r, &root_constraints);
        }
        for (n, c) in &request_deps {
            mention(n, c);
        }
        for def in repo.packages() {
            for d in &def.depends_on {
                mention(d.name(), &d.spec);
            }
        }
        let mut domains = BTreeMap::new();
        for def in repo.packages() {
            for var in &def.variants {
                let mut dom = var.domain();
                if var.values.is_none() && matches!(var.default, VariantValue::Str(_)) {
                    let key = (def.name.clone(), var.name.clone());
                    for v in mentioned.get(&key).into_iter().flatten() {
                        if matches!(v, VariantValue::Str(_)) && !dom.contains(v) {
                            dom.push(v.clone());
                        }
                    }
                }
                domains.insert((def.name.clone(), var.name.clone()), dom);
            }
        }
        Ok(Universe {
            repo,
            pool,
            opts,
            root,
            root_constraints,
            request_deps,
            os,
            target,
            domains,
        })
    }

    pub fn domain(&self, pkg: &str, variant: &str) -> &[VariantValue] {
        self.domains
            .get(&(pkg.to_string(), variant.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn built_attrs(&self, name: &str, version: &Version, variants: &BTreeMap<String, VariantValue>) -> NodeAttrs {
        NodeAttrs {
            name: name.to_string(),
            version: version.clone(),
            variants: variants.clone(),
            os: self.os.clone(),
            target: self.target.clone(),
            build_spec_hash: None,
        }
    }

    pub fn attrs_of(&self, name: &str, choice: &Choice) -> Option<NodeAttrs> {
        match choice {
            Choice::Built { version, variants } => Some(self.built_attrs(name, version, variants)),
            Choice::Reused { hash, .. } => self.pool.store.get(hash).map(|n| n.attrs.clone()),
        }
    }

    pub fn pool_attrs(&self, h: &DagHash) -> &NodeAttrs {
        &self.pool.store.get(h).expect("pool hash").attrs
    }

    /// Cached link-run children of a pool node, keyed by name.
    pub fn cached_slots(&self, h: &DagHash) -> BTreeMap<String, DagHash> {
        let node = self.pool.store.get(h).expect("pool hash");
        node.children(EdgeKind::LinkRun)
            .map(|c| (self.pool_attrs(c).name.clone(), c.clone()))
            .collect()
    }

    /// Whether cached node `r` may replace cached child `c0`.
    pub fn splice_allowed(&self, r: &DagHash, c0: &DagHash) -> bool {
        let repl = self.pool_attrs(r);
        let old = self.pool_attrs(c0);
        let Some(def) = self.repo.get(&repl.name) else { return false };
        def.can_splice.iter().any(|d| {
            d.target_name() == old.name
                && satisfies(old, &d.target)
                && d.when.as_ref().is_none_or(|w| satisfies(repl, w))
        })
    }

    /// Link-run closure of a pool node, itself excluded.
    pub fn pool_closure(&self, r: &DagHash) -> BTreeSet<DagHash> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<DagHash> = self.pool.store.get(r).into_iter().flat_map(|n| n.children(EdgeKind::LinkRun).cloned()).collect();
        while let Some(h) = stack.pop() {
            if seen.insert(h.clone()) {
                if let Some(n) = self.pool.store.get(&h) {
                    stack.extend(n.children(EdgeKind::LinkRun).cloned());
                }
            }
        }
        seen
    }

    /// Position of provider `p` in the preference order for `virt`.
    pub fn provider_rank(&self, virt: &str, p: &str) -> usize {
        let prefs = self.opts.provider_preferences.get(virt);
        if let Some(i) = prefs.and_then(|l| l.iter().position(|x| x == p)) {
            return i;
        }
        let base = prefs.map_or(0, Vec::len);
        let rest = self
            .repo
            .providers(virt)
            .iter()
            .filter(|x| prefs.is_none_or(|l| !l.contains(x)));
        base + rest.take_while(|x| x.as_str() != p).count()
    }

    /// Providers of `virt` in preference order.
    pub fn providers_ordered(&self, virt: &str) -> Vec<String> {
        let mut ps: Vec<String> = self.repo.providers(virt).to_vec();
        ps.sort_by_key(|p| (self.provider_rank(virt, p), p.clone()));
        ps
    }

    /// Every built configuration of `name` that satisfies `filter`, newest
    /// versions first, then by distance from the default variants.
    pub fn built_options(&self, name: &str, filter: Option<&NodeConstraints>) -> Vec<(Version, BTreeMap<String, VariantValue>)> {
        let Some(def) = self.repo.get(name) else { return Vec::new() };
        if let Some(f) = filter {
            if f.os.as_ref().is_some_and(|o| *o != self.os) || f.target.as_ref().is_some_and(|t| *t != self.target) {
                return Vec::new();
            }
        }
        let mut combos: Vec<BTreeMap<String, VariantValue>> = vec![BTreeMap::new()];
        for var in &def.variants {
            let dom = self.domain(name, &var.name);
            let want = filter.and_then(|f| f.variants.get(&var.name));
            let mut next = Vec::new();
            for c in &combos {
                for v in dom {
                    if want.is_some_and(|w| w != v) {
                        continue;
                    }
                    let mut c2 = c.clone();
                    c2.insert(var.name.clone(), v.clone());
                    next.push(c2);
                }
            }
            combos = next;
        }
        if let Some(f) = filter {
            // a variant the package does not declare can never be satisfied
            if f.variants.keys().any(|k| def.variant_def(k).is_none()) {
                return Vec::new();
            }
        }
        combos.sort_by_key(|c| def.default_deviation(c));
        let mut out = Vec::new();
        for v in &def.versions {
            if filter.and_then(|f| f.version.as_ref()).is_some_and(|vc| !vc.contains(v)) {
                continue;
            }
            for c in &combos {
                out.push((v.clone(), c.clone()));
            }
        }
        out
    }
}

/// A valid solution with everything derived from it.
#[derive(Debug, Clone)]
pub(crate) struct Evaluated {
    pub spec: ConcreteSpec,
    pub objective: Objective,
    pub provider_penalty: usize,
    pub splices: Vec<SpliceDecision>,
    pub to_build: BTreeSet<String>,
    pub reused: BTreeSet<DagHash>,
    pub spliced: BTreeSet<DagHash>,
}

impl Evaluated {
    /// Full ordering key: objective, then provider preference, then root hash.
    pub fn key(&self) -> (Objective, usize, DagHash) {
        (self.objective, self.provider_penalty, self.spec.root.clone())
    }
}

/// Check every rule against `a` and build the resulting spec, or say why not.
pub(crate) fn evaluate(u: &Universe, a: &Assignment) -> Result<Evaluated, String> {
    let mut attrs: BTreeMap<String, NodeAttrs> = BTreeMap::new();
    for (name, choice) in a {
        let def = u.repo.get(name).ok_or_else(|| format!("{name} is not a package"))?;
        if u.opts.exclude.contains(name) {
            return Err(format!("{name} is excluded"));
        }
        let at = match choice {
            Choice::Built { version, variants } => {
                if !def.versions.contains(version) {
                    return Err(format!("{name} has no version {version}"));
                }
                let complete = variants.len() == def.variants.len()
                    && def
                        .variants
                        .iter()
                        .all(|d| variants.get(&d.name).is_some_and(|v| u.domain(name, &d.name).contains(v)));
                if !complete {
                    return Err(format!("{name} has an invalid variant assignment"));
                }
                u.built_attrs(name, version, variants)
            }
            Choice::Reused { hash, .. } => {
                if !u.opts.reuse_enabled {
                    return Err("reuse is disabled".into());
                }
                let node = u.pool.store.get(hash).ok_or_else(|| format!("{hash} is not cached"))?;
                if node.attrs.name != *name {
                    return Err(format!("cached {hash} is not {name}"));
                }
                node.attrs.clone()
            }
        };
        if at.os != u.os || at.target != u.target {
            return Err(format!("{name} is not on the solve platform"));
        }
        attrs.insert(name.clone(), at);
    }

    let mut provider_of: BTreeMap<String, String> = BTreeMap::new();
    for (name, at) in &attrs {
        let def = u.repo.get(name).expect("checked");
        for v in def.provided_virtuals(at) {
            if let Some(prev) = provider_of.insert(v.to_string(), name.clone()) {
                if prev != *name {
                    return Err(format!("{prev} and {name} both provide {v}"));
                }
            }
        }
    }

    let root = match &u.root {
        RootRef::Package(r) => r.clone(),
        RootRef::Virtual(v) => provider_of.get(v).cloned().ok_or_else(|| format!("nothing provides {v}"))?,
    };
    let root_attrs = attrs.get(&root).ok_or_else(|| format!("root {root} is absent"))?;
    if !satisfies(root_attrs, &u.root_constraints) {
        return Err(format!("root {root} does not satisfy the request"));
    }
    for (d, c) in &u.request_deps {
        if u.repo.get(d).is_some() {
            let at = attrs.get(d).ok_or_else(|| format!("requested {d} is absent"))?;
            if !satisfies(at, c) {
                return Err(format!("{d} does not satisfy the request"));
            }
        } else if !provider_of.contains_key(d) {
            return Err(format!("nothing provides requested {d}"));
        }
    }

    let mut edges: BTreeMap<&str, Vec<(EdgeKind, String)>> = BTreeMap::new();
    let mut objective = Objective::default();
    for (name, choice) in a {
        let def = u.repo.get(name).expect("checked");
        let at = &attrs[name];
        objective.add(&Objective::node(
            matches!(choice, Choice::Built { .. }),
            def.version_penalty(&at.version),
            def.default_deviation(&at.variants),
        ));
        let out = edges.entry(name.as_str()).or_default();
        match choice {
            Choice::Built { .. } => {
                for d in def.active_dependencies(at) {
                    let dn = d.name();
                    let target = if u.repo.get(dn).is_some() {
                        let t = attrs.get(dn).ok_or_else(|| format!("{name} needs {dn}, which is absent"))?;
                        if !satisfies(t, &d.spec) {
                            return Err(format!("{dn} does not satisfy {name}'s dependency {}", d.spec));
                        }
                        dn.to_string()
                    } else if let Some(p) = provider_of.get(dn) {
                        p.clone()
                    } else {
                        return Err(format!("{name} needs {dn}, which nothing provides"));
                    };
                    out.push((d.kind, target));
                }
            }
            Choice::Reused { hash, actions } => {
                let slots = u.cached_slots(hash);
                if actions.len() != slots.len() || !slots.keys().all(|k| actions.contains_key(k)) {
                    return Err(format!("{name} does not decide every cached child"));
                }
                let mut targets = BTreeSet::new();
                for (cn, act) in actions {
                    let c0 = &slots[cn];
                    let (tn, th) = match act {
                        ChildAction::Keep => (cn.clone(), c0.clone()),
                        ChildAction::Splice(r) => {
                            if !u.opts.splice_enabled {
                                return Err("splicing is disabled".into());
                            }
                            if r == c0 || !u.pool.store.contains(r) || !u.splice_allowed(r, c0) {
                                return Err(format!("{r:?} may not replace {cn} under {name}"));
                            }
                            objective.splice_count += 1;
                            (u.pool_attrs(r).name.clone(), r.clone())
                        }
                        ChildAction::Implicit(hx) => {
                            if !u.opts.splice_enabled {
                                return Err("splicing is disabled".into());
                            }
                            if hx == c0 || !u.pool.store.contains(hx) || u.pool_attrs(hx).name != *cn {
                                return Err(format!("{hx:?} is no implicit replacement for {cn}"));
                            }
                            let carried = actions.values().any(|x| match x {
                                ChildAction::Splice(r) => u.pool_closure(r).contains(hx),
                                _ => false,
                            });
                            if !carried {
                                return Err(format!("no replacement under {name} carries {hx:?}"));
                            }
                            (cn.clone(), hx.clone())
                        }
                    };
                    match a.get(&tn) {
                        Some(Choice::Reused { hash: h, .. }) if *h == th => {}
                        _ => return Err(format!("{name} needs cached {tn} {th:?}")),
                    }
                    if !targets.insert(tn.clone()) {
                        return Err(format!("{name} would link {tn} twice"));
                    }
                    out.push((EdgeKind::LinkRun, tn));
                }
            }
        }
    }

    // every present package must hang off the root
    let mut reached = BTreeSet::from([root.as_str()]);
    let mut stack = vec![root.as_str()];
    while let Some(n) = stack.pop() {
        for (_, c) in &edges[n] {
            if reached.insert(c.as_str()) {
                stack.push(c.as_str());
            }
        }
    }
    if reached.len() != a.len() {
        let stray = a.keys().find(|k| !reached.contains(k.as_str())).expect("some unreached");
        return Err(format!("{stray} is not reachable from {root}"));
    }

    let mut m = Materializer {
        u,
        a,
        attrs: &attrs,
        edges: &edges,
        finals: BTreeMap::new(),
        active: BTreeSet::new(),
        overlay: SpecStore::new(),
    };
    let root_hash = m.run(&root)?;
    let finals = m.finals;
    let spec = extract_layered(&[&m.overlay, &u.pool.store], &root_hash).map_err(|e| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;

    let mut splices = Vec::new();
    let mut spliced = BTreeSet::new();
    let mut built_hashes = BTreeSet::new();
    let mut to_build = BTreeSet::new();
    for (name, choice) in a {
        match choice {
            Choice::Built { .. } => {
                to_build.insert(name.clone());
                built_hashes.insert(finals[name].clone());
            }
            Choice::Reused { hash, actions } => {
                if finals[name] != *hash {
                    spliced.insert(finals[name].clone());
                }
                let slots = u.cached_slots(hash);
                for (cn, act) in actions {
                    if let ChildAction::Splice(r) = act {
                        let rn = &u.pool_attrs(r).name;
                        splices.push(SpliceDecision {
                            parent_hash: hash.clone(),
                            replaced_name: cn.clone(),
                            replaced_hash: slots[cn].clone(),
                            replacement_hash: r.clone(),
                            transitive: finals[rn] == *r,
                        });
                    }
                }
            }
        }
    }
    splices.sort();
    let reused = spec.nodes.keys().filter(|h| !built_hashes.contains(*h)).cloned().collect();
    let provider_penalty = provider_of.iter().map(|(v, p)| u.provider_rank(v, p)).sum();
    Ok(Evaluated {
        spec,
        objective,
        provider_penalty,
        splices,
        to_build,
        reused,
        spliced,
    })
}

struct Materializer<'u, 'a> {
    u: &'u Universe<'a>,
    a: &'u Assignment,
    attrs: &'u BTreeMap<String, NodeAttrs>,
    edges: &'u BTreeMap<&'u str, Vec<(EdgeKind, String)>>,
    finals: BTreeMap<String, DagHash>,
    active: BTreeSet<String>,
    overlay: SpecStore,
}

impl Materializer<'_, '_> {
    fn run(&mut self, name: &str) -> Result<DagHash, String> {
        if let Some(h) = self.finals.get(name) {
            return Ok(h.clone());
        }
        if !self.active.insert(name.to_string()) {
            return Err(format!("dependency cycle through {name}"));
        }
        let mut deps = Vec::new();
        for (kind, child) in &self.edges[name] {
            deps.push((*kind, self.run(child)?));
        }
        let h = match &self.a[name] {
            Choice::Built { .. } => self.overlay.insert_unchecked(self.attrs[name].clone(), deps),
            Choice::Reused { hash, .. } => {
                let mut old: Vec<DagHash> = self.u.cached_slots(hash).into_values().collect();
                let mut new: Vec<DagHash> = deps.iter().map(|(_, h)| h.clone()).collect();
                old.sort();
                new.sort();
                if old == new {
                    hash.clone()
                } else {
                    self.overlay.insert_unchecked(spliced_attrs(&self.attrs[name], hash), deps)
                }
            }
        };
        self.active.remove(name);
        self.finals.insert(name.to_string(), h.clone());
        Ok(h)
    }
}
