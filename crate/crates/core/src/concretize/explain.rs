//! Human and machine readable accounts of a solve.

use serde_json::json;

use super::SolveResult;
use crate::parser::format_concrete_with;

/// A tree with one status marker per node, followed by the decisions.
pub fn explain(result: &SolveResult) -> String {
    let spec = &result.spec;
    let mut out = format_concrete_with(spec, |n| {
        let tag = if result.spliced.contains(&n.hash) {
            "[s]"
        } else if result.reused.contains(&n.hash) {
            "[^]"
        } else {
            "[+]"
        };
        format!("{tag} {}  ", n.hash.short())
    });
    out.push('\n');
    let label = |h: &crate::hash::DagHash| match spec.node(h) {
        Some(n) => format!("{}@{}/{}", n.name, n.version, h.short()),
        None => format!("/{}", h.short()),
    };
    if result.splices.is_empty() {
        out.push_str("splices: []\n");
    } else {
        out.push_str(&format!("splices: {}\n", result.splices.len()));
        for s in &result.splices {
            out.push_str(&format!(
                "  under {}: {}/{} -> {}{}\n",
                s.parent_hash.short(),
                s.replaced_name,
                s.replaced_hash.short(),
                label(&s.replacement_hash),
                if s.transitive { " (transitive)" } else { " (intransitive)" }
            ));
        }
    }
    let names: Vec<&str> = result.to_build.iter().map(String::as_str).collect();
    if names.is_empty() {
        out.push_str("to build: 0\n");
    } else {
        out.push_str(&format!("to build: {} ({})\n", names.len(), names.join(", ")));
    }
    out.push_str(&format!("reused: {}\n", result.reused.len()));
    let o = &result.objective;
    out.push_str(&format!(
        "objective: built_version_penalty={} built_default_deviation={} builds={} version_penalty={} default_deviation={} splices={}\n",
        o.built_version_penalty, o.built_default_deviation, o.builds, o.version_penalty, o.default_deviation, o.splice_count
    ));
    out
}

pub fn explain_json(result: &SolveResult) -> serde_json::Value {
    json!({
        "root": result.spec.root,
        "spec": result.spec,
        "reused": result.reused,
        "spliced": result.spliced,
        "to_build": result.to_build,
        "splices": result.splices,
        "objective": result.objective,
        "provider_penalty": result.provider_penalty,
        "stats": result.stats,
    })
}
