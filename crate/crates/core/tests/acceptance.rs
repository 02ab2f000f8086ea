//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splicekit::bench::{generate_mpi_stack, mean_solve_time, random_instance, replica_name, StackParams};
use splicekit::cache::BuildCache;
use splicekit::concretize::{concretize, oracle_solve, SolveOptions, SolveResult};
use splicekit::fixtures::{self, Fixture};
use splicekit::install::{install, verify, InstallAction, InstallReport, InstallTree};
use splicekit::repo::Repo;
use splicekit::splice::rewiring_map;
use splicekit::{format_spec, parse_spec, ConcreteSpec, DagHash, NodeAttrs, SpecBuilder, VariantValue};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn solve(repo: &Repo, cache: &BuildCache, req: &str, opts: &SolveOptions) -> Result<SolveResult, String> {
    let parsed = parse_spec(req).map_err(|e| format!("{req}: {e}"))?;
    concretize(&parsed, repo, cache, opts).map_err(|e| format!("{req}: {e}"))
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut compared = 0;
    let mut spliced = 0;
    let mut agree = |repo: &Repo, cache: &BuildCache, req: &str, opts: &SolveOptions, label: &str| -> Result<(), String> {
        let parsed = parse_spec(req).map_err(|e| e.to_string())?;
        match (concretize(&parsed, repo, cache, opts), oracle_solve(&parsed, repo, cache, opts)) {
            (Ok(a), Ok(b)) => {
                ensure(a.objective == b.objective, || format!("{label} {req}: {:?} vs {:?}", a.objective, b.objective))?;
                ensure(a.spec == b.spec, || format!("{label} {req}: tie-broken solutions differ"))?;
                compared += 1;
                spliced += usize::from(!a.splices.is_empty());
            }
            (Err(_), Err(_)) => compared += 1,
            (a, b) => return Err(format!("{label} {req}: solver ok={} oracle ok={}", a.is_ok(), b.is_ok())),
        }
        Ok(())
    };
    let mut random = 0;
    for seed in 0..2000 {
        let inst = random_instance(seed);
        agree(&inst.repo, &inst.cache, &inst.request, &inst.opts, &format!("seed {seed}"))?;
        random += 1;
    }
    for f in fixtures::suite() {
        for req in &f.requests {
            for opts in [SolveOptions::default(), SolveOptions::with_splicing(), SolveOptions::without_reuse()] {
                agree(&f.repo, &f.cache, req, &opts, f.name)?;
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{random} random instances plus fixtures, {compared} comparisons, {spliced} with splices, {:.1?}",
        start.elapsed()
    ))
}

fn mpi_splice_correctness() -> Check {
    let start = Instant::now();
    let mut solves = 0;
    for r in [1, 10] {
        let params = StackParams {
            replicas: r,
            ..StackParams::default()
        };
        let (repo, cache) = generate_mpi_stack(&params);
        let pool = cache.reusable_pool();
        for i in 0..params.apps {
            let req = format!("app-{i:02} ^{}", replica_name(i % r));
            let on = solve(&repo, &cache, &req, &SolveOptions::with_splicing())?;
            ensure(on.objective.builds == 0, || format!("R={r} {req}: {} builds with splicing", on.objective.builds))?;
            ensure(!on.splices.is_empty(), || format!("R={r} {req}: no splice"))?;
            for d in &on.splices {
                let replaced = &pool.store.get(&d.replaced_hash).ok_or("replaced node not cached")?.attrs;
                ensure(replaced.name == "mpich" && replaced.version.to_string() == "3.4.3", || {
                    format!("R={r} {req}: replaced {}@{}", replaced.name, replaced.version)
                })?;
            }
            ensure(on.spec.nodes.values().all(|n| n.name != "mpich"), || format!("R={r} {req}: mpich left in DAG"))?;
            let off = solve(&repo, &cache, &req, &SolveOptions::default())?;
            ensure(off.objective.builds >= 1, || format!("R={r} {req}: no build without splicing"))?;
            solves += 2;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("{solves} solves over R in {{1, 10}}, {:.1?}", start.elapsed()))
}

struct Fig2Expected {
    t0: DagHash,
    blue: ConcreteSpec,
    red: ConcreteSpec,
    nodes: BTreeMap<&'static str, DagHash>,
}

/// The splice scenario's DAGs assembled node by node.
fn fig2_by_hand() -> Fig2Expected {
    let mut b = SpecBuilder::new("centos8", "skylake");
    let z10 = b.node("z", "1.0", &[], &[], &[]);
    let z11 = b.node("z", "1.1", &[], &[], &[]);
    let s = b.node("s", "1.0", &[], &[], &[]);
    let h = b.node("h", "1.0", &[], &[&z10], &[]);
    let t0 = b.node("t", "1.0", &[], &[&h, &z10], &[]);
    let hp = b.node("hprime", "1.0", &[], &[&s, &z11], &[]);
    let attrs = |name: &str, build_spec: &DagHash| NodeAttrs {
        name: name.into(),
        version: "1.0".parse().unwrap(),
        variants: BTreeMap::new(),
        os: "centos8".into(),
        target: "skylake".into(),
        build_spec_hash: Some(build_spec.clone()),
    };
    let t_blue = b.node_with(attrs("t", &t0), &[&hp, &z11], &[]);
    let hp_red = b.node_with(attrs("hprime", &hp), &[&s, &z10], &[]);
    let t_red = b.node_with(attrs("t", &t0), &[&hp_red, &z10], &[]);
    Fig2Expected {
        t0: t0.clone(),
        blue: b.spec(&t_blue),
        red: b.spec(&t_red),
        nodes: BTreeMap::from([("t", t0), ("h", h), ("hprime", hp), ("z@1.0", z10), ("z@1.1", z11), ("s", s)]),
    }
}

fn install_checked(spec: &ConcreteSpec, cache: &BuildCache, label: &str) -> Result<(tempfile::TempDir, InstallReport), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tree = InstallTree::new(dir.path().join("opt"));
    let mut cache = cache.clone();
    let report = install(spec, &tree, &mut cache, false).map_err(|e| format!("{label}: {e}"))?;
    let v = verify(spec, &tree);
    ensure(v["ok"] == true, || format!("{label}: verify failed: {}", v["failures"]))?;
    Ok((dir, report))
}

fn fig2_end_to_end() -> Check {
    let start = Instant::now();
    let f = fixtures::fig2();
    let exp = fig2_by_hand();
    for (k, h) in &exp.nodes {
        ensure(f.nodes[k] == *h, || format!("cached {k} differs from the hand-built node"))?;
    }
    let blue = solve(&f.repo, &f.cache, "t ^hprime", &SolveOptions::with_splicing())?;
    ensure(blue.spec == exp.blue, || "transitive splice DAG differs from the hand-built one".into())?;
    let red = solve(&f.repo, &f.cache, "t ^hprime ^z@1.0", &SolveOptions::with_splicing())?;
    ensure(red.spec == exp.red, || "intransitive splice DAG differs from the hand-built one".into())?;

    let maps = rewiring_map(&blue.spec, &f.cache.reusable_pool().store).map_err(|e| e.to_string())?;
    let t_map = &maps[&blue.spec.root];
    let want = BTreeMap::from([
        (exp.nodes["h"].clone(), exp.nodes["hprime"].clone()),
        (exp.nodes["z@1.0"].clone(), exp.nodes["z@1.1"].clone()),
    ]);
    ensure(*t_map == want, || format!("rewiring map for t: {t_map:?}"))?;

    let mut rewired = 0;
    for (label, r) in [("transitive", &blue), ("intransitive", &red)] {
        let (_dir, report) = install_checked(&r.spec, &f.cache, label)?;
        rewired += report.count(InstallAction::Rewired);
        let again = support::replay(r, &f.cache)?;
        ensure(again.root == r.spec.root, || format!("{label}: replaying provenance gives another root hash"))?;
        ensure(r.spec.root_node().build_spec_hash.as_ref() == Some(&exp.t0), || format!("{label}: t lost its build spec"))?;
    }
    ensure(rewired == 3, || format!("expected 3 rewired artifacts, got {rewired}"))?;
    within(Duration::from_secs(5), start)?;
    Ok(format!("both DAGs match by hash, {rewired} rewired artifacts verified, provenance replays, {:.1?}", start.elapsed()))
}

fn mpi_fixture(replicas: usize, apps: usize) -> Fixture {
    let params = StackParams {
        apps,
        replicas,
        cache_size: 0,
        ..StackParams::default()
    };
    let (repo, cache) = generate_mpi_stack(&params);
    Fixture {
        name: "mpi-stack",
        repo,
        cache,
        nodes: BTreeMap::new(),
        requests: vec!["app-00", "app-01 ^mpiabi-001", "app-02 ^mpich@3.3.2", "py-shroud", "lib-00", "mpi"],
    }
}

fn feature_transparency() -> Check {
    let mut suite = fixtures::suite();
    suite.push(mpi_fixture(3, 4));
    let mut cases = Vec::new();
    for f in &suite {
        let repo = f.repo.without_splices();
        for req in &f.requests {
            let parsed = parse_spec(req).map_err(|e| e.to_string())?;
            let off = concretize(&parsed, &repo, &f.cache, &SolveOptions::default());
            let on = concretize(&parsed, &repo, &f.cache, &SolveOptions::with_splicing());
            match (&off, &on) {
                (Ok(a), Ok(b)) => {
                    ensure(a.spec == b.spec && a.objective == b.objective && a.reused == b.reused, || {
                        format!("{} {req}: results differ with splicing enabled", f.name)
                    })?;
                    ensure(b.splices.is_empty(), || format!("{} {req}: splice without directives", f.name))?;
                    cases.push((repo.clone(), f.cache.clone(), parsed));
                }
                (Err(a), Err(b)) => ensure(a == b, || format!("{} {req}: errors differ", f.name))?,
                _ => return Err(format!("{} {req}: only one configuration solved", f.name)),
            }
        }
    }
    let time = |opts: &SolveOptions| {
        let mut total = Duration::ZERO;
        for _ in 0..30 {
            for (repo, cache, req) in &cases {
                total += concretize(req, repo, cache, opts).expect("solved above").stats.wall_time;
            }
        }
        total
    };
    time(&SolveOptions::default());
    let off = time(&SolveOptions::default());
    let on = time(&SolveOptions::with_splicing());
    let ratio = on.as_secs_f64() / off.as_secs_f64();
    ensure((0.5..2.0).contains(&ratio), || format!("time ratio on/off {ratio:.2}"))?;
    Ok(format!("{} requests identical, time ratio on/off {ratio:.2}", cases.len()))
}

fn scaling() -> Check {
    let start = Instant::now();
    let opts = SolveOptions::with_splicing();
    let mut mpi = Vec::new();
    let mut plain = Vec::new();
    for r in [10, 100] {
        let params = StackParams {
            replicas: r,
            ..StackParams::default()
        };
        let (repo, cache) = generate_mpi_stack(&params);
        let reqs: Vec<String> = (0..params.apps)
            .map(|i| format!("app-{i:02} ^{}", replica_name(i * r / params.apps)))
            .collect();
        for req in &reqs {
            mean_solve_time(&repo, &cache, req, &opts, 1);
        }
        let total: Duration = reqs.iter().map(|q| mean_solve_time(&repo, &cache, q, &opts, 10)).sum();
        mpi.push(total / reqs.len() as u32);
        mean_solve_time(&repo, &cache, "py-shroud", &opts, 50);
        plain.push(mean_solve_time(&repo, &cache, "py-shroud", &opts, 500));
    }
    let mpi_ratio = mpi[1].as_secs_f64() / mpi[0].as_secs_f64();
    let plain_ratio = plain[1].as_secs_f64().max(plain[0].as_secs_f64()) / plain[1].as_secs_f64().min(plain[0].as_secs_f64());
    let detail = format!(
        "mpi mean {:.2?} at R=10, {:.2?} at R=100 (x{mpi_ratio:.2}); py-shroud {:.1?} vs {:.1?} (x{plain_ratio:.2})",
        mpi[0], mpi[1], plain[0], plain[1]
    );
    ensure(mpi_ratio <= 10.0, || detail.clone())?;
    ensure(plain_ratio <= 1.5, || detail.clone())?;
    within(Duration::from_secs(120), start)?;
    Ok(detail)
}

fn parser_properties() -> Check {
    let start = Instant::now();
    let config = Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = support::arb_abstract_spec();
    for i in 0..10_000 {
        let spec = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let text = format_spec(&spec);
        let back = parse_spec(&text).map_err(|e| format!("case {i} {text:?}: {e}"))?;
        ensure(back == spec, || format!("case {i} {text:?} does not round-trip"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let alphabet = b"abcz019@^%+~=:.- \t\n";
    let mut ok = 0;
    for i in 0..10_000 {
        let len = rng.gen_range(0..48);
        let bytes: Vec<u8> = (0..len)
            .map(|_| if rng.gen_bool(0.7) { alphabet[rng.gen_range(0..alphabet.len())] } else { rng.gen() })
            .collect();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let outcome = catch_unwind(|| parse_spec(&text)).map_err(|_| format!("fuzz case {i} panicked on {text:?}"))?;
        ok += usize::from(outcome.is_ok());
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("10000 round trips, 10000 fuzz inputs ({ok} parsed), {:.1?}", start.elapsed()))
}

fn rewiring_invariants() -> Check {
    let mut corpus: Vec<(String, ConcreteSpec, BuildCache)> = Vec::new();
    let f = fixtures::fig2();
    for req in ["t ^hprime", "t ^hprime ^z@1.0", "t ^z@1.1", "t"] {
        corpus.push((req.into(), solve(&f.repo, &f.cache, req, &SolveOptions::with_splicing())?.spec, f.cache.clone()));
    }
    let f = fixtures::example_partial();
    corpus.push(("example".into(), solve(&f.repo, &f.cache, "example@1.0.0", &SolveOptions::default())?.spec, f.cache.clone()));
    let m = mpi_fixture(2, 3);
    for req in ["app-00 ^mpiabi-000", "app-01 ^mpiabi-001", "app-02"] {
        corpus.push((req.into(), solve(&m.repo, &m.cache, req, &SolveOptions::with_splicing())?.spec, m.cache.clone()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (label, spec, cache) in &corpus {
        let (dir, report) = install_checked(spec, cache, label)?;
        let tree = InstallTree::new(dir.path().join("opt"));
        let maps = rewiring_map(spec, &cache.reusable_pool().store).map_err(|e| e.to_string())?;
        for n in &report.nodes {
            let node = &spec.nodes[&n.hash];
            let (source, map) = match n.action {
                InstallAction::Relocated => (n.hash.clone(), BTreeMap::new()),
                InstallAction::Rewired => {
                    let map: BTreeMap<String, String> = maps
                        .get(&n.hash)
                        .into_iter()
                        .flatten()
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .collect();
                    (node.build_spec_hash.clone().expect("rewired nodes are spliced"), map)
                }
                _ => continue,
            };
            let src = cache
                .artifact(&source)
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("{label}: no cached artifact for {}", node.name))?;
            let dst = std::fs::read(tree.prefix(node).join("artifact.bin")).map_err(|e| e.to_string())?;
            support::check_patch(&src, &dst, &map).map_err(|e| format!("{label} {}: {e}", node.name))?;
            *counts.entry(if n.action == InstallAction::Rewired { "rewired" } else { "relocated" }).or_default() += 1;
        }
    }
    ensure(counts.get("rewired").copied().unwrap_or(0) > 0 && counts.get("relocated").copied().unwrap_or(0) > 0, || {
        format!("corpus too thin: {counts:?}")
    })?;
    Ok(format!(
        "{} relocated and {} rewired artifacts over {} installs",
        counts["relocated"],
        counts["rewired"],
        corpus.len()
    ))
}

fn listing_reproduction() -> Check {
    let f = fixtures::example();
    let r = solve(&f.repo, &f.cache, "example@1.0.0", &SolveOptions::default())?;
    let root = r.spec.root_node();
    ensure(root.name == "example" && root.version.to_string() == "1.0.0", || format!("root {}@{}", root.name, root.version))?;
    ensure(root.variants.get("bzip") == Some(&VariantValue::Bool(true)), || "root is not +bzip".into())?;
    let children: BTreeSet<&str> = r.spec.link_children(&r.spec.root).map(|h| r.spec.nodes[h].name.as_str()).collect();
    ensure(children == BTreeSet::from(["bzip2", "mpich", "zlib"]), || format!("root children {children:?}"))?;
    let zlib = r.spec.find_link_run("zlib").ok_or("no zlib")?;
    ensure("1.2".parse::<splicekit::VersionConstraint>().unwrap().contains(&zlib.version), || {
        format!("zlib@{} outside @1.2", zlib.version)
    })?;
    let mpich = r.spec.find_link_run("mpich").ok_or("no mpi provider")?;
    ensure(f.repo.get("mpich").is_some_and(|d| d.may_provide("mpi")), || "mpich does not provide mpi".into())?;
    ensure(mpich.variants.get("pmi") == Some(&VariantValue::Str("pmix".into())), || "mpich pmi is not pmix".into())?;
    ensure(r.to_build.len() == r.spec.nodes.len(), || "not everything marked to build".into())?;
    let listing = splicekit::format_concrete(&r.spec);
    Ok(listing.lines().map(str::trim).collect::<Vec<_>>().join(" | "))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 splice correctness on the MPI stack", mpi_splice_correctness),
        ("3 splice scenario end to end", fig2_end_to_end),
        ("4 splicing is a transparent opt-in", feature_transparency),
        ("5 scaling in replica count", scaling),
        ("6 parser properties", parser_properties),
        ("7 relocation and rewiring byte invariants", rewiring_invariants),
        ("8 example listing reproduction", listing_reproduction),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
