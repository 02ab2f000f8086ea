use std::time::Instant;

use proptest::prelude::*;
use splicekit::bench::random_instance;
use splicekit::concretize::{concretize, oracle_solve, SolveOptions};
use splicekit::parse_spec;

#[test]
fn random_instances_match_oracle() {
    let start = Instant::now();
    let mut solved = 0;
    let mut unsat = 0;
    let mut spliced = 0;
    for seed in 0..3000 {
        let inst = random_instance(seed);
        let req = parse_spec(&inst.request).unwrap();
        let a = concretize(&req, &inst.repo, &inst.cache, &inst.opts);
        let b = oracle_solve(&req, &inst.repo, &inst.cache, &inst.opts);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.objective, b.objective, "seed {seed}: {}", inst.request);
                assert_eq!(a.spec, b.spec, "seed {seed}: {}", inst.request);
                assert_eq!(a.splices, b.splices, "seed {seed}");
                solved += 1;
                if !a.splices.is_empty() {
                    spliced += 1;
                }
            }
            (Err(_), Err(_)) => unsat += 1,
            (a, b) => panic!("seed {seed} {}: {a:?}\nvs\n{b:?}", inst.request),
        }
    }
    eprintln!("solved {solved}, unsat {unsat}, spliced {spliced}, {:?}", start.elapsed());
    assert!(solved >= 200);
    assert!(spliced >= 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn solver_is_optimal(seed in 10_000u64..1_000_000) {
        let inst = random_instance(seed);
        let req = parse_spec(&inst.request).unwrap();
        let a = concretize(&req, &inst.repo, &inst.cache, &inst.opts);
        let b = oracle_solve(&req, &inst.repo, &inst.cache, &inst.opts);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.objective, b.objective);
                prop_assert_eq!(a.spec.root, b.spec.root);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn splicing_is_transparent_without_directives(seed in 0u64..1_000_000) {
        let inst = random_instance(seed);
        let repo = inst.repo.without_splices();
        let req = parse_spec(&inst.request).unwrap();
        let off = concretize(&req, &repo, &inst.cache, &SolveOptions::default());
        let on = concretize(&req, &repo, &inst.cache, &SolveOptions::with_splicing());
        match (off, on) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.spec, &b.spec);
                prop_assert_eq!(a.objective, b.objective);
                prop_assert!(b.splices.is_empty());
            }
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn solves_are_deterministic(seed in 0u64..1_000_000) {
        let inst = random_instance(seed);
        let req = parse_spec(&inst.request).unwrap();
        let a = concretize(&req, &inst.repo, &inst.cache, &inst.opts);
        let b = concretize(&req, &inst.repo, &inst.cache, &inst.opts);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!(a.same_outcome(&b)),
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            _ => prop_assert!(false),
        }
    }

    #[test]
    fn results_validate_and_cover(seed in 0u64..1_000_000) {
        let inst = random_instance(seed);
        let req = parse_spec(&inst.request).unwrap();
        if let Ok(r) = concretize(&req, &inst.repo, &inst.cache, &inst.opts) {
            prop_assert!(r.spec.validate().is_ok());
            for (h, n) in &r.spec.nodes {
                let reused = r.reused.contains(h);
                let built = r.to_build.contains(&n.name);
                prop_assert!(reused != built, "{} reused={} built={}", n.name, reused, built);
                if reused && !r.spliced.contains(h) {
                    prop_assert!(inst.cache.reusable_pool().store.contains(h));
                }
            }
            prop_assert!(splicekit::satisfies(r.spec.root_node(), &req.root));
        }
    }
}
