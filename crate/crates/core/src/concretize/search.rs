//! Depth-first branch and bound over package choices. Each branch decides
//! one package or one cached child; complete branches go through `evaluate`.

use std::collections::{BTreeMap, BTreeSet};

use super::model::{evaluate, ChildAction, Choice, Evaluated, RootRef, Universe};
use super::{Objective, SolveError, SolveResult, SolveStats};
use crate::hash::DagHash;
use crate::spec::{merge_constraints, satisfies, NodeAttrs, NodeConstraints};

#[derive(Debug, Clone)]
enum Task {
    Assign(String),
    Provider(String),
    Slot { parent: String, child: String },
    CheckImplicit(String),
}

#[derive(Debug, Clone, Default)]
struct State {
    assign: super::Assignment,
    attrs: BTreeMap<String, NodeAttrs>,
    merged: BTreeMap<String, NodeConstraints>,
    sources: BTreeMap<String, Vec<String>>,
    pins: BTreeMap<String, DagHash>,
    provided_by: BTreeMap<String, String>,
    wanted: BTreeMap<String, String>,
    slot_targets: BTreeMap<String, BTreeSet<String>>,
    tasks: Vec<Task>,
    cost: Objective,
    provider_penalty: usize,
    depth: usize,
}

type Failure = Vec<String>;

struct Solver<'u, 'a> {
    u: &'u Universe<'a>,
    best: Option<Evaluated>,
    stats: SolveStats,
    deepest: Option<(usize, Failure)>,
    implicit_memo: BTreeMap<DagHash, BTreeSet<DagHash>>,
}

pub(crate) fn solve(u: &Universe) -> Result<SolveResult, SolveError> {
    let mut solver = Solver {
        u,
        best: None,
        stats: SolveStats::default(),
        deepest: None,
        implicit_memo: BTreeMap::new(),
    };
    let mut st = State::default();
    let mut initial = Vec::new();
    match &u.root {
        RootRef::Package(r) => {
            let mut c = u.root_constraints.clone();
            c.name = Some(r.clone());
            let src = format!("request: {c}");
            if let Err(f) = solver.constrain(&mut st, r, &c, src) {
                return Err(SolveError::Unsatisfiable { core: f });
            }
            initial.push(Task::Assign(r.clone()));
        }
        RootRef::Virtual(v) => initial.push(Task::Provider(v.clone())),
    }
    // requested dependencies are decided first; they are usually the most
    // constrained and they fix which providers are present
    for (name, c) in &u.request_deps {
        if u.repo.get(name).is_some() {
            let src = format!("request: ^{c}");
            if let Err(f) = solver.constrain(&mut st, name, c, src) {
                return Err(SolveError::Unsatisfiable { core: f });
            }
            initial.push(Task::Assign(name.clone()));
        } else {
            initial.push(Task::Provider(name.clone()));
        }
    }
    st.tasks = initial;
    solver.explore(st);
    let stats = solver.stats;
    match solver.best {
        Some(ev) => Ok(SolveResult {
            spec: ev.spec,
            reused: ev.reused,
            spliced: ev.spliced,
            to_build: ev.to_build,
            splices: ev.splices,
            objective: ev.objective,
            provider_penalty: ev.provider_penalty,
            stats,
        }),
        None => Err(SolveError::Unsatisfiable {
            core: solver
                .deepest
                .map(|(_, f)| f)
                .unwrap_or_else(|| vec!["no candidate solutions".into()]),
        }),
    }
}

impl Solver<'_, '_> {
    fn fail(&mut self, depth: usize, why: Failure) {
        self.stats.backtracks += 1;
        if self.deepest.as_ref().is_none_or(|(d, _)| depth > *d) {
            self.deepest = Some((depth, why));
        }
    }

    fn explore(&mut self, mut st: State) {
        if self.bound_exceeded(&st) {
            self.stats.backtracks += 1;
            return;
        }
        let Some(task) = st.tasks.pop() else {
            self.leaf(st);
            return;
        };
        match task {
            Task::Assign(name) => self.assign(st, name),
            Task::Provider(v) => self.provider(st, v),
            Task::Slot { parent, child } => self.slot(st, parent, child),
            Task::CheckImplicit(parent) => {
                if let Err(f) = self.check_implicit(&st, &parent) {
                    self.fail(st.depth, f);
                } else {
                    self.explore(st);
                }
            }
        }
    }

    fn leaf(&mut self, st: State) {
        match evaluate(self.u, &st.assign) {
            Ok(ev) => {
                if self.best.as_ref().is_none_or(|b| ev.key() < b.key()) {
                    self.best = Some(ev);
                }
            }
            Err(why) => self.fail(st.depth, vec![why]),
        }
    }

    /// Lower bound on any completion of `st` against the incumbent. Packages
    /// already known to be needed contribute their cheapest option.
    fn bound_exceeded(&self, st: &State) -> bool {
        let Some(best) = &self.best else { return false };
        let mut lb = st.cost;
        let mut seen = BTreeSet::new();
        for t in &st.tasks {
            if let Task::Assign(n) = t {
                if !st.assign.contains_key(n) && seen.insert(n.as_str()) {
                    lb.add(&self.cheapest(st, n));
                }
            }
        }
        (lb, st.provider_penalty) > (best.objective, best.provider_penalty)
    }

    fn cheapest(&self, st: &State, name: &str) -> Objective {
        let u = self.u;
        let Some(def) = u.repo.get(name) else { return Objective::default() };
        let cost_of = |at: &NodeAttrs| Objective::node(false, def.version_penalty(&at.version), def.default_deviation(&at.variants));
        if let Some(p) = st.pins.get(name) {
            return cost_of(u.pool_attrs(p));
        }
        let merged = st.merged.get(name);
        let mut best: Option<Objective> = None;
        let mut take = |o: Objective| {
            best = Some(match best {
                None => o,
                Some(b) => b.floor(&o),
            });
        };
        if u.opts.reuse_enabled {
            for h in u.pool.nodes_named(name) {
                let at = u.pool_attrs(h);
                if merged.is_none_or(|m| satisfies(at, m)) {
                    take(cost_of(at));
                }
            }
        }
        if let Some((v, vars)) = u.built_options(name, merged).first() {
            take(Objective::node(true, def.version_penalty(v), def.default_deviation(vars)));
        }
        best.unwrap_or_default()
    }

    fn describe(&self, st: &State, name: &str) -> Vec<String> {
        st.sources.get(name).cloned().unwrap_or_default()
    }

    /// Add a constraint on `name`, checking it against what is already known.
    fn constrain(&self, st: &mut State, name: &str, c: &NodeConstraints, src: String) -> Result<(), Failure> {
        let mut why = self.describe(st, name);
        why.push(src.clone());
        let merged = match st.merged.get(name) {
            Some(m) => merge_constraints(m, c).map_err(|e| {
                why.push(format!("{name}: {e}"));
                why.clone()
            })?,
            None => c.clone(),
        };
        if let Some(at) = st.attrs.get(name) {
            if !satisfies(at, c) {
                why.push(format!("{name} is already {}@{}", at.name, at.version));
                return Err(why);
            }
        }
        if let Some(p) = st.pins.get(name) {
            if !satisfies(self.u.pool_attrs(p), c) {
                why.push(format!("{name} is pinned to cached {p:?}"));
                return Err(why);
            }
        }
        st.merged.insert(name.to_string(), merged);
        st.sources.entry(name.to_string()).or_default().push(src);
        Ok(())
    }

    /// Record the virtuals `name` provides with attributes `at`.
    fn claim_virtuals(&self, st: &mut State, name: &str, at: &NodeAttrs) -> Result<(), Failure> {
        let def = self.u.repo.get(name).ok_or_else(|| vec![format!("no package named {name}")])?;
        let provided: BTreeSet<&str> = def.provided_virtuals(at).collect();
        for v in &provided {
            if let Some(p) = st.provided_by.get(*v) {
                if p != name {
                    return Err(vec![format!("{p} and {name} would both provide {v}")]);
                }
                continue;
            }
            if let Some(p) = st.wanted.get(*v) {
                if p != name {
                    return Err(vec![format!("{v} is to be provided by {p}, not {name}")]);
                }
            }
            st.provided_by.insert(v.to_string(), name.to_string());
            st.provider_penalty += self.u.provider_rank(v, name);
        }
        for (v, p) in &st.wanted {
            if p == name && !provided.contains(v.as_str()) {
                return Err(vec![format!("{name}@{} does not provide {v}", at.version)]);
            }
        }
        Ok(())
    }

    fn assign(&mut self, st: State, name: String) {
        if st.assign.contains_key(&name) {
            return self.explore(st);
        }
        let u = self.u;
        if u.opts.exclude.contains(&name) {
            let mut why = self.describe(&st, &name);
            why.push(format!("{name} is excluded"));
            return self.fail(st.depth, why);
        }
        let Some(def) = u.repo.get(&name) else {
            return self.fail(st.depth, vec![format!("no package named {name}")]);
        };
        let merged = st.merged.get(&name);
        let mut options: Vec<Choice> = Vec::new();
        if let Some(pin) = st.pins.get(&name) {
            options.push(Choice::Reused {
                hash: pin.clone(),
                actions: BTreeMap::new(),
            });
        } else {
            if u.opts.reuse_enabled {
                let mut reusable: Vec<(usize, usize, &DagHash)> = u
                    .pool
                    .nodes_named(&name)
                    .iter()
                    .filter(|h| {
                        let at = u.pool_attrs(h);
                        at.os == u.os && at.target == u.target && merged.is_none_or(|m| satisfies(at, m))
                    })
                    .map(|h| {
                        let at = u.pool_attrs(h);
                        (def.version_penalty(&at.version), def.default_deviation(&at.variants), h)
                    })
                    .collect();
                reusable.sort();
                options.extend(reusable.into_iter().map(|(_, _, h)| Choice::Reused {
                    hash: h.clone(),
                    actions: BTreeMap::new(),
                }));
            }
            for (version, variants) in u.built_options(&name, merged) {
                options.push(Choice::Built { version, variants });
            }
        }
        if let Some(cap) = u.opts.max_candidates_per_node {
            options.truncate(cap);
        }
        if options.is_empty() {
            let mut why = self.describe(&st, &name);
            why.push(format!("no configuration of {name} satisfies every constraint"));
            return self.fail(st.depth, why);
        }
        for choice in options {
            self.stats.decisions += 1;
            let mut s = st.clone();
            s.depth += 1;
            match self.apply_assign(&mut s, &name, choice) {
                Ok(()) => self.explore(s),
                Err(why) => self.fail(s.depth, why),
            }
        }
    }

    fn apply_assign(&self, st: &mut State, name: &str, choice: Choice) -> Result<(), Failure> {
        let u = self.u;
        let def = u.repo.get(name).expect("checked by caller");
        let at = u.attrs_of(name, &choice).expect("options come from the pool or the repo");
        if let Some(m) = st.merged.get(name) {
            if !satisfies(&at, m) {
                let mut why = self.describe(st, name);
                why.push(format!("{name}@{} does not satisfy them", at.version));
                return Err(why);
            }
        }
        self.claim_virtuals(st, name, &at)?;
        st.cost.add(&Objective::node(
            matches!(choice, Choice::Built { .. }),
            def.version_penalty(&at.version),
            def.default_deviation(&at.variants),
        ));
        let mut pushed = Vec::new();
        match &choice {
            Choice::Built { .. } => {
                for d in def.active_dependencies(&at) {
                    let dn = d.name();
                    if u.repo.get(dn).is_some() {
                        let when = d.when.as_ref().map(|w| format!(" when {w}")).unwrap_or_default();
                        let src = format!("{name}@{}: depends_on {}{when}", at.version, d.spec);
                        self.constrain(st, dn, &d.spec, src)?;
                        pushed.push(Task::Assign(dn.to_string()));
                    } else if u.repo.is_virtual(dn) {
                        pushed.push(Task::Provider(dn.to_string()));
                    } else {
                        return Err(vec![format!("{name}@{} depends on unknown package {dn}", at.version)]);
                    }
                }
            }
            Choice::Reused { hash, .. } => {
                for child in u.cached_slots(hash).into_keys() {
                    pushed.push(Task::Slot {
                        parent: name.to_string(),
                        child,
                    });
                }
                pushed.push(Task::CheckImplicit(name.to_string()));
            }
        }
        st.attrs.insert(name.to_string(), at);
        st.assign.insert(name.to_string(), choice);
        // stack: the first pushed task runs first
        st.tasks.extend(pushed.into_iter().rev());
        Ok(())
    }

    fn provider(&mut self, st: State, v: String) {
        if st.provided_by.contains_key(&v) || st.wanted.contains_key(&v) {
            return self.explore(st);
        }
        let u = self.u;
        let mut any = false;
        for p in u.providers_ordered(&v) {
            if u.opts.exclude.contains(&p) || st.assign.contains_key(&p) {
                continue;
            }
            if let Some(pin) = st.pins.get(&p) {
                let def = u.repo.get(&p).expect("providers are packages");
                if !def.provided_virtuals(u.pool_attrs(pin)).any(|x| x == v) {
                    continue;
                }
            }
            any = true;
            self.stats.decisions += 1;
            let mut s = st.clone();
            s.depth += 1;
            s.wanted.insert(v.clone(), p.clone());
            s.tasks.push(Task::Assign(p));
            self.explore(s);
        }
        if !any {
            self.fail(st.depth, vec![format!("nothing can provide {v}")]);
        }
    }

    /// Cached nodes that some splice candidate on `parent` could bring along.
    fn implicit_pool(&mut self, parent: &DagHash) -> BTreeSet<DagHash> {
        if let Some(s) = self.implicit_memo.get(parent) {
            return s.clone();
        }
        let mut out = BTreeSet::new();
        for c0 in self.u.cached_slots(parent).values() {
            for r in self.splice_options(c0) {
                out.extend(self.u.pool_closure(&r));
            }
        }
        self.implicit_memo.insert(parent.clone(), out.clone());
        out
    }

    fn splice_options(&self, c0: &DagHash) -> Vec<DagHash> {
        let u = self.u;
        let cn = &u.pool_attrs(c0).name;
        let mut out = BTreeSet::new();
        for (def, _) in u.repo.splices_targeting(cn) {
            for r in u.pool.nodes_named(&def.name) {
                if r != c0 && u.splice_allowed(r, c0) {
                    out.insert(r.clone());
                }
            }
        }
        out.into_iter().collect()
    }

    fn slot(&mut self, st: State, parent: String, child: String) {
        let u = self.u;
        let Some(Choice::Reused { hash, .. }) = st.assign.get(&parent) else {
            unreachable!("slots belong to reused nodes")
        };
        let hash = hash.clone();
        let c0 = u.cached_slots(&hash)[&child].clone();
        let mut options = vec![(ChildAction::Keep, child.clone(), c0.clone())];
        if u.opts.splice_enabled {
            for r in self.splice_options(&c0) {
                let rn = u.pool_attrs(&r).name.clone();
                options.push((ChildAction::Splice(r.clone()), rn, r));
            }
            let carried = self.implicit_pool(&hash);
            for hx in u.pool.nodes_named(&child) {
                if *hx != c0 && carried.contains(hx) {
                    options.push((ChildAction::Implicit(hx.clone()), child.clone(), hx.clone()));
                }
            }
        }
        if let Some(cap) = u.opts.max_candidates_per_node {
            options.truncate(cap);
        }
        for (act, tn, th) in options {
            self.stats.decisions += 1;
            let mut s = st.clone();
            s.depth += 1;
            match self.apply_slot(&mut s, &parent, &child, act, &tn, &th) {
                Ok(()) => self.explore(s),
                Err(why) => self.fail(s.depth, why),
            }
        }
    }

    fn apply_slot(
        &self,
        st: &mut State,
        parent: &str,
        child: &str,
        act: ChildAction,
        tn: &str,
        th: &DagHash,
    ) -> Result<(), Failure> {
        let u = self.u;
        if u.opts.exclude.contains(tn) {
            return Err(vec![format!("{tn} is excluded")]);
        }
        if st.slot_targets.get(parent).is_some_and(|s| s.contains(tn)) {
            return Err(vec![format!("{parent} would link {tn} twice")]);
        }
        if let Some(p) = st.pins.get(tn) {
            if p != th {
                return Err(vec![format!("{tn} is already pinned to cached {p:?}")]);
            }
        }
        if let Some(ch) = st.assign.get(tn) {
            if !matches!(ch, Choice::Reused { hash, .. } if hash == th) {
                return Err(vec![format!("{tn} is already decided otherwise")]);
            }
        }
        let at = u.pool_attrs(th).clone();
        if at.os != u.os || at.target != u.target {
            return Err(vec![format!("cached {tn} {th:?} is for another platform")]);
        }
        if let Some(m) = st.merged.get(tn) {
            if !satisfies(&at, m) {
                let mut why = self.describe(st, tn);
                why.push(format!("cached {tn}@{} under {parent} does not satisfy them", at.version));
                return Err(why);
            }
        }
        if !st.assign.contains_key(tn) {
            self.claim_virtuals(st, tn, &at)?;
        }
        if matches!(act, ChildAction::Splice(_)) {
            st.cost.splice_count += 1;
        }
        st.pins.insert(tn.to_string(), th.clone());
        st.slot_targets.entry(parent.to_string()).or_default().insert(tn.to_string());
        if let Some(Choice::Reused { actions, .. }) = st.assign.get_mut(parent) {
            actions.insert(child.to_string(), act);
        }
        st.tasks.push(Task::Assign(tn.to_string()));
        Ok(())
    }

    fn check_implicit(&self, st: &State, parent: &str) -> Result<(), Failure> {
        let Some(Choice::Reused { actions, .. }) = st.assign.get(parent) else { return Ok(()) };
        for act in actions.values() {
            if let ChildAction::Implicit(hx) = act {
                let carried = actions.values().any(|x| match x {
                    ChildAction::Splice(r) => self.u.pool_closure(r).contains(hx),
                    _ => false,
                });
                if !carried {
                    return Err(vec![format!("no replacement under {parent} carries {hx:?}")]);
                }
            }
        }
        Ok(())
    }
}
