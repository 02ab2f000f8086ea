//! Exhaustive reference solver for small instances. It enumerates every
//! assignment reachable from the request, without bounds or propagation,
//! and keeps the least valid one.

use std::collections::BTreeMap;

use super::model::{evaluate, ChildAction, Choice, Evaluated, RootRef, Universe};
use super::{Assignment, SolveError, SolveOptions, SolveResult, SolveStats};
use crate::cache::BuildCache;
use crate::repo::Repo;
use crate::spec::AbstractSpec;

/// Size limits beyond which enumeration is refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub packages: usize,
    pub versions: usize,
    pub variants: usize,
    pub pool_nodes: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            packages: 8,
            versions: 4,
            variants: 3,
            pool_nodes: 32,
        }
    }
}

#[derive(Debug, Clone)]
enum Need {
    Package(String),
    Virtual(String),
}

struct Enumerator<'u, 'a> {
    u: &'u Universe<'a>,
    best: Option<Evaluated>,
    leaves: u64,
}

pub fn oracle_solve(
    request: &AbstractSpec,
    repo: &Repo,
    cache: &BuildCache,
    opts: &SolveOptions,
) -> Result<SolveResult, SolveError> {
    let limits = OracleLimits::default();
    if repo.len() > limits.packages {
        return Err(SolveError::InstanceTooLarge(format!("{} packages", repo.len())));
    }
    for def in repo.packages() {
        if def.versions.len() > limits.versions || def.variants.len() > limits.variants {
            return Err(SolveError::InstanceTooLarge(format!("package {}", def.name)));
        }
    }
    let pool = cache.reusable_pool();
    if pool.len() > limits.pool_nodes {
        return Err(SolveError::InstanceTooLarge(format!("{} cached nodes", pool.len())));
    }
    let u = Universe::new(request, repo, pool, opts)?;
    let mut todo = vec![match &u.root {
        RootRef::Package(r) => Need::Package(r.clone()),
        RootRef::Virtual(v) => Need::Virtual(v.clone()),
    }];
    for (name, _) in &u.request_deps {
        todo.push(if repo.get(name).is_some() {
            Need::Package(name.clone())
        } else {
            Need::Virtual(name.clone())
        });
    }
    let mut e = Enumerator {
        u: &u,
        best: None,
        leaves: 0,
    };
    e.go(Assignment::new(), todo);
    let stats = SolveStats {
        decisions: e.leaves,
        ..SolveStats::default()
    };
    match e.best {
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
            core: vec!["no valid assignment exists".into()],
        }),
    }
}

impl Enumerator<'_, '_> {
    fn go(&mut self, a: Assignment, mut todo: Vec<Need>) {
        let Some(need) = todo.pop() else {
            self.leaves += 1;
            if let Ok(ev) = evaluate(self.u, &a) {
                if self.best.as_ref().is_none_or(|b| ev.key() < b.key()) {
                    self.best = Some(ev);
                }
            }
            return;
        };
        match need {
            Need::Package(n) => {
                if a.contains_key(&n) {
                    return self.go(a, todo);
                }
                for choice in self.choices(&n) {
                    let mut next = todo.clone();
                    next.extend(self.needs_of(&n, &choice));
                    let mut a2 = a.clone();
                    a2.insert(n.clone(), choice);
                    self.go(a2, next);
                }
            }
            Need::Virtual(v) => {
                let present = a.iter().any(|(n, c)| {
                    let def = self.u.repo.get(n).expect("assigned names are packages");
                    let at = self.u.attrs_of(n, c).expect("valid choice");
                    let provides = def.provided_virtuals(&at).any(|x| x == v);
                    provides
                });
                if present {
                    return self.go(a, todo);
                }
                for p in self.u.repo.providers(&v) {
                    let mut next = todo.clone();
                    next.push(Need::Package(p.clone()));
                    self.go(a.clone(), next);
                }
            }
        }
    }

    fn needs_of(&self, name: &str, choice: &Choice) -> Vec<Need> {
        let u = self.u;
        match choice {
            Choice::Built { .. } => {
                let def = u.repo.get(name).expect("package");
                let at = u.attrs_of(name, choice).expect("valid choice");
                def.active_dependencies(&at)
                    .map(|d| {
                        if u.repo.is_virtual(d.name()) {
                            Need::Virtual(d.name().to_string())
                        } else {
                            Need::Package(d.name().to_string())
                        }
                    })
                    .collect()
            }
            Choice::Reused { actions, .. } => actions
                .iter()
                .map(|(cn, act)| match act {
                    ChildAction::Splice(r) => Need::Package(u.pool_attrs(r).name.clone()),
                    _ => Need::Package(cn.clone()),
                })
                .collect(),
        }
    }

    fn choices(&self, name: &str) -> Vec<Choice> {
        let u = self.u;
        if u.opts.exclude.contains(name) || u.repo.get(name).is_none() {
            return Vec::new();
        }
        let mut out: Vec<Choice> = u
            .built_options(name, None)
            .into_iter()
            .map(|(version, variants)| Choice::Built { version, variants })
            .collect();
        if !u.opts.reuse_enabled {
            return out;
        }
        for h in u.pool.nodes_named(name) {
            let slots = u.cached_slots(h);
            let mut tuples: Vec<BTreeMap<String, ChildAction>> = vec![BTreeMap::new()];
            for (cn, c0) in &slots {
                let mut acts = vec![ChildAction::Keep];
                if u.opts.splice_enabled {
                    for r in u.pool.store.iter().map(|(r, _)| r) {
                        if r != c0 && u.splice_allowed(r, c0) {
                            acts.push(ChildAction::Splice(r.clone()));
                        }
                    }
                    for hx in u.pool.nodes_named(cn) {
                        if hx != c0 {
                            acts.push(ChildAction::Implicit(hx.clone()));
                        }
                    }
                }
                tuples = tuples
                    .into_iter()
                    .flat_map(|t| {
                        acts.iter().map(move |x| {
                            let mut t2 = t.clone();
                            t2.insert(cn.clone(), x.clone());
                            t2
                        })
                    })
                    .collect();
            }
            out.extend(tuples.into_iter().map(|actions| Choice::Reused {
                hash: h.clone(),
                actions,
            }));
        }
        out
    }
}
