//! WebAssembly bindings behind `www/index.html`. Every export takes and
//! returns plain strings; results are JSON objects with an `ok` flag.

use serde_json::{json, Value};
use splicekit::concretize::{concretize, explain, explain_json, SolveOptions};
use splicekit::fixtures::{self, Fixture};
use splicekit::splice::{provenance, rewiring_map, splice_as};
use splicekit::{format_concrete, format_spec, parse_spec, SpecStore};
use wasm_bindgen::prelude::*;

fn fixture(name: &str) -> Option<Fixture> {
    match name {
        "example" => Some(fixtures::example()),
        "example-partial" => Some(fixtures::example_partial()),
        "fig2" => Some(fixtures::fig2()),
        _ => None,
    }
}

fn fail(msg: impl ToString) -> String {
    json!({"ok": false, "error": msg.to_string()}).to_string()
}

/// Canonical text and AST of a spec, or the parse error with a caret line.
#[wasm_bindgen]
pub fn canonicalize(text: &str) -> String {
    match parse_spec(text) {
        Ok(spec) => json!({"ok": true, "canonical": format_spec(&spec), "ast": spec}).to_string(),
        Err(e) => fail(e.render(text)),
    }
}

/// Suggested requests for a fixture.
#[wasm_bindgen]
pub fn fixture_requests(name: &str) -> String {
    match fixture(name) {
        Some(f) => json!({"ok": true, "requests": f.requests, "cached": f.cache.len()}).to_string(),
        None => fail(format!("no fixture {name}")),
    }
}

/// Concretize `request` against a built-in fixture.
#[wasm_bindgen]
pub fn solve(fixture_name: &str, request: &str, reuse: bool, splice: bool) -> String {
    let Some(f) = fixture(fixture_name) else {
        return fail(format!("no fixture {fixture_name}"));
    };
    let req = match parse_spec(request) {
        Ok(r) => r,
        Err(e) => return fail(e.render(request)),
    };
    let opts = SolveOptions {
        reuse_enabled: reuse,
        splice_enabled: splice && reuse,
        ..SolveOptions::default()
    };
    match concretize(&req, &f.repo, &f.cache, &opts) {
        Ok(r) => json!({"ok": true, "text": explain(&r), "result": explain_json(&r)}).to_string(),
        Err(e) => fail(e),
    }
}

/// Splice the cached `hprime` build into the cached `t` build and show
/// the DAGs before and after, with the provenance and rewiring it implies.
#[wasm_bindgen]
pub fn splice_demo(transitive: bool) -> String {
    let f = fixtures::fig2();
    let get = |key: &str| f.cache.lookup(&f.nodes[key]).expect("fixture entry").spec.clone();
    let (root, replacement) = (get("t"), get("hprime"));
    let spliced = match splice_as(&root, "h", &replacement, transitive) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let mut store = SpecStore::new();
    store.absorb(&root);
    store.absorb(&replacement);
    let name = |h| {
        let n = store.get(h).map(|n| &n.attrs).or_else(|| spliced.node(h).map(|n| &n.attrs));
        n.map(|a| format!("{}@{}/{}", a.name, a.version, h.short())).unwrap_or_default()
    };
    let map = match rewiring_map(&spliced, &store) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let rewiring: Vec<Value> = map
        .iter()
        .map(|(node, pairs)| {
            json!({
                "node": name(node),
                "pairs": pairs.iter().map(|(o, n)| json!([name(o), name(n)])).collect::<Vec<_>>(),
            })
        })
        .collect();
    let prov: Vec<Value> = provenance(&spliced)
        .iter()
        .map(|p| json!({"spliced": name(&p.spliced_hash), "built_as": name(&p.build_spec_hash)}))
        .collect();
    json!({
        "ok": true,
        "root": format_concrete(&root),
        "replacement": format_concrete(&replacement),
        "spliced": format_concrete(&spliced),
        "provenance": prov,
        "rewiring": rewiring,
    })
    .to_string()
}
