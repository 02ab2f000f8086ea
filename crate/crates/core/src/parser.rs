//! Command-line spec syntax.
//!
//! ```text
//! spec   := node (("^" | "%") node)*
//! node   := name? clause*
//! clause := "@" constraint | "+" ident | "~" ident | key "=" value
//! ```
//!
//! Clauses attach to the most recent node. The root name is optional;
//! dependency names are not.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::spec::{
    is_valid_name, is_valid_token, AbstractSpec, ConcreteNode, ConcreteSpec, DepKind, Dependency,
    EdgeKind, NodeConstraints, VariantValue,
};
use crate::version::VersionConstraint;

/// Platform label printed in `arch=` triples. Parsed triples may carry any
/// platform; only os and target are kept.
pub const PLATFORM: &str = "linux";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Version,
    Enable,
    Disable,
    KeyValue,
    LinkDep,
    BuildDep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecToken {
    pub kind: TokenKind,
    pub text: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
    pub expected: Vec<String>,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>, expected: &[&str]) -> Self {
        ParseError {
            offset,
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The input line with a caret under the offending byte.
    pub fn render(&self, input: &str) -> String {
        let line: String = input.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
        let col = input
            .char_indices()
            .take_while(|(i, _)| *i < self.offset)
            .count();
        let mut out = format!("error: {}\n  {}\n  {}^", self.message, line, " ".repeat(col));
        if !self.expected.is_empty() {
            out.push_str(&format!("\n  expected: {}", self.expected.join(", ")));
        }
        out
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.')
}

fn is_clause_end(b: u8) -> bool {
    b.is_ascii_whitespace() || matches!(b, b'^' | b'%' | b'@' | b'+' | b'~')
}

/// Split `text` into tokens.
pub fn tokenize(text: &str) -> Result<Vec<SpecToken>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let take_while = |mut j: usize, pred: &dyn Fn(u8) -> bool| {
        while j < bytes.len() && pred(bytes[j]) {
            j += 1;
        }
        j
    };
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let (kind, end) = match b {
            b'^' => (TokenKind::LinkDep, i + 1),
            b'%' => (TokenKind::BuildDep, i + 1),
            b'@' => {
                let end = take_while(i + 1, &|c| !is_clause_end(c));
                (TokenKind::Version, end)
            }
            b'+' | b'~' => {
                let end = take_while(i + 1, &is_word_byte);
                if end == i + 1 {
                    return Err(ParseError::new(
                        start,
                        format!("dangling '{}'", b as char),
                        &["variant name"],
                    ));
                }
                let kind = if b == b'+' { TokenKind::Enable } else { TokenKind::Disable };
                (kind, end)
            }
            _ if is_word_byte(b) => {
                let end = take_while(i, &is_word_byte);
                if end < bytes.len() && bytes[end] == b'=' {
                    let vend = take_while(end + 1, &|c| !c.is_ascii_whitespace() && !matches!(c, b'^' | b'%'));
                    (TokenKind::KeyValue, vend)
                } else {
                    (TokenKind::Name, end)
                }
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::new(
                    start,
                    format!("unexpected character {ch:?}"),
                    &["package name", "@", "+", "~", "^", "%", "key=value"],
                ));
            }
        };
        tokens.push(SpecToken {
            kind,
            text: text[start..end].to_string(),
            position: start,
        });
        i = end;
    }
    Ok(tokens)
}

struct NodeState {
    constraints: NodeConstraints,
    has_clause: bool,
    kind: DepKind,
}

impl NodeState {
    fn new(kind: DepKind) -> Self {
        NodeState {
            constraints: NodeConstraints::default(),
            has_clause: false,
            kind,
        }
    }
}

fn set_label(slot: &mut Option<String>, value: &str, key: &str, pos: usize) -> Result<(), ParseError> {
    if !is_valid_token(value) {
        return Err(ParseError::new(pos, format!("invalid {key} value {value:?}"), &[key]));
    }
    if slot.is_some() {
        return Err(ParseError::new(pos, format!("duplicate {key}"), &[]));
    }
    *slot = Some(value.to_string());
    Ok(())
}

fn set_variant(
    node: &mut NodeConstraints,
    key: &str,
    value: VariantValue,
    pos: usize,
) -> Result<(), ParseError> {
    if key.is_empty() || !key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-') {
        return Err(ParseError::new(pos, format!("invalid variant name {key:?}"), &["variant name"]));
    }
    if node.variants.insert(key.to_string(), value).is_some() {
        return Err(ParseError::new(pos, format!("duplicate variant {key}"), &[]));
    }
    Ok(())
}

fn apply_token(node: &mut NodeState, tok: &SpecToken) -> Result<(), ParseError> {
    let pos = tok.position;
    match tok.kind {
        TokenKind::Version => {
            if node.constraints.version.is_some() {
                return Err(ParseError::new(pos, "duplicate version clause", &[]));
            }
            let v: VersionConstraint = tok.text[1..].parse().map_err(|e| {
                ParseError::new(pos, format!("malformed version: {e}"), &["version", "version range"])
            })?;
            node.constraints.version = Some(v);
        }
        TokenKind::Enable => set_variant(&mut node.constraints, &tok.text[1..], VariantValue::Bool(true), pos)?,
        TokenKind::Disable => set_variant(&mut node.constraints, &tok.text[1..], VariantValue::Bool(false), pos)?,
        TokenKind::KeyValue => {
            let (key, value) = tok.text.split_once('=').expect("tokenizer guarantees '='");
            if value.is_empty() {
                return Err(ParseError::new(pos + key.len() + 1, format!("missing value for {key}"), &["value"]));
            }
            match key {
                "os" => set_label(&mut node.constraints.os, value, "os", pos)?,
                "target" => set_label(&mut node.constraints.target, value, "target", pos)?,
                "arch" => {
                    let parts: Vec<&str> = value.split('-').collect();
                    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                        return Err(ParseError::new(pos, format!("malformed arch {value:?}"), &["platform-os-target"]));
                    }
                    set_label(&mut node.constraints.os, parts[1], "os", pos)?;
                    set_label(&mut node.constraints.target, parts[2], "target", pos)?;
                }
                _ => {
                    if !is_valid_token(value) {
                        return Err(ParseError::new(pos, format!("invalid value {value:?} for {key}"), &["value"]));
                    }
                    set_variant(&mut node.constraints, key, VariantValue::Str(value.to_string()), pos)?;
                }
            }
        }
        TokenKind::Name | TokenKind::LinkDep | TokenKind::BuildDep => unreachable!("handled by caller"),
    }
    node.has_clause = true;
    Ok(())
}

/// Parse the spec syntax into an [`AbstractSpec`].
pub fn parse_spec(text: &str) -> Result<AbstractSpec, ParseError> {
    let tokens = tokenize(text)?;
    let mut nodes: Vec<NodeState> = vec![NodeState::new(DepKind::Any)];
    let mut seen_deps: BTreeSet<String> = BTreeSet::new();
    let mut iter = tokens.iter().peekable();
    while let Some(tok) = iter.next() {
        match tok.kind {
            TokenKind::LinkDep | TokenKind::BuildDep => {
                let sigil = &tok.text;
                let name_tok = match iter.next() {
                    Some(t) if t.kind == TokenKind::Name => t,
                    Some(t) => {
                        return Err(ParseError::new(
                            t.position,
                            format!("expected a package name after '{sigil}'"),
                            &["package name"],
                        ))
                    }
                    None => {
                        return Err(ParseError::new(
                            tok.position,
                            format!("dangling '{sigil}'"),
                            &["package name"],
                        ))
                    }
                };
                check_name(name_tok)?;
                if !seen_deps.insert(name_tok.text.clone()) {
                    return Err(ParseError::new(
                        name_tok.position,
                        format!("duplicate dependency {}", name_tok.text),
                        &[],
                    ));
                }
                let kind = if tok.kind == TokenKind::LinkDep { DepKind::LinkRun } else { DepKind::Build };
                let mut node = NodeState::new(kind);
                node.constraints.name = Some(name_tok.text.clone());
                nodes.push(node);
            }
            TokenKind::Name => {
                let depth = nodes.len();
                let current = nodes.last_mut().expect("root always present");
                if depth > 1 || current.constraints.name.is_some() || current.has_clause {
                    return Err(ParseError::new(
                        tok.position,
                        format!("unexpected name {:?}; introduce dependencies with '^' or '%'", tok.text),
                        &["@", "+", "~", "key=value", "^", "%"],
                    ));
                }
                check_name(tok)?;
                current.constraints.name = Some(tok.text.clone());
            }
            _ => apply_token(nodes.last_mut().expect("root always present"), tok)?,
        }
    }
    let mut nodes = nodes.into_iter();
    let root = nodes.next().expect("root always present").constraints;
    if let Some(name) = &root.name {
        if seen_deps.contains(name) {
            let pos = text.rfind(name.as_str()).unwrap_or(0);
            return Err(ParseError::new(pos, format!("{name} depends on itself"), &[]));
        }
    }
    Ok(AbstractSpec {
        root,
        dependencies: nodes
            .map(|n| Dependency {
                constraints: n.constraints,
                kind: n.kind,
            })
            .collect(),
    })
}

fn check_name(tok: &SpecToken) -> Result<(), ParseError> {
    if is_valid_name(&tok.text) {
        Ok(())
    } else {
        Err(ParseError::new(
            tok.position,
            format!("invalid package name {:?}", tok.text),
            &["lowercase name"],
        ))
    }
}

fn write_node(out: &mut String, c: &NodeConstraints) {
    if let Some(n) = &c.name {
        out.push_str(n);
    }
    if let Some(v) = &c.version {
        out.push('@');
        out.push_str(&v.to_string());
    }
    for (k, v) in &c.variants {
        if let VariantValue::Bool(b) = v {
            out.push(if *b { '+' } else { '~' });
            out.push_str(k);
        }
    }
    let mut extras: Vec<String> = c
        .variants
        .iter()
        .filter_map(|(k, v)| match v {
            VariantValue::Str(s) => Some(format!("{k}={s}")),
            VariantValue::Bool(_) => None,
        })
        .collect();
    if let Some(os) = &c.os {
        extras.push(format!("os={os}"));
    }
    if let Some(t) = &c.target {
        extras.push(format!("target={t}"));
    }
    for e in extras {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&e);
    }
}

/// Canonical single-line rendering of an abstract spec.
pub fn format_spec(spec: &AbstractSpec) -> String {
    let mut out = String::new();
    write_node(&mut out, &spec.root);
    for dep in &spec.dependencies {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push(if dep.kind == DepKind::Build { '%' } else { '^' });
        write_node(&mut out, &dep.constraints);
    }
    out
}

impl fmt::Display for AbstractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_spec(self))
    }
}

impl fmt::Display for NodeConstraints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_node(&mut out, self);
        f.write_str(&out)
    }
}

/// One line of a concrete listing, e.g. `zlib@1.2.11 +optimize+pic arch=linux-centos8-skylake`.
pub fn format_node(node: &ConcreteNode) -> String {
    let mut out = format!("{}@{}", node.name, node.version);
    let flags: String = node
        .variants
        .iter()
        .filter_map(|(k, v)| v.as_bool().map(|b| format!("{}{k}", if b { '+' } else { '~' })))
        .collect();
    if !flags.is_empty() {
        out.push(' ');
        out.push_str(&flags);
    }
    for (k, v) in &node.variants {
        if let VariantValue::Str(s) = v {
            out.push_str(&format!(" {k}={s}"));
        }
    }
    out.push_str(&format!(" arch={PLATFORM}-{}-{}", node.os, node.target));
    out
}

/// Indented tree rendering. Each node is printed once, at its first
/// occurrence; `^` marks link-run children and `%` build children.
pub fn format_concrete(spec: &ConcreteSpec) -> String {
    format_concrete_with(spec, |_| String::new())
}

/// Like [`format_concrete`], with a caller-supplied prefix per line.
pub fn format_concrete_with(spec: &ConcreteSpec, mut marker: impl FnMut(&ConcreteNode) -> String) -> String {
    let mut lines = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![(spec.root.clone(), 0usize, None::<EdgeKind>)];
    while let Some((h, depth, via)) = stack.pop() {
        if !seen.insert(h.clone()) {
            continue;
        }
        let node = &spec.nodes[&h];
        let sigil = match via {
            None => "",
            Some(EdgeKind::LinkRun) => "^",
            Some(EdgeKind::Build) => "%",
        };
        lines.push(format!("{}{}{}{}", marker(node), "    ".repeat(depth), sigil, format_node(node)));
        let mut kids: Vec<(EdgeKind, &ConcreteNode)> = spec
            .deps_of(&h)
            .into_iter()
            .map(|(k, c)| (k, &spec.nodes[&c]))
            .collect();
        // link-run before build, then by name
        kids.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.name.cmp(&b.1.name)));
        for (k, c) in kids.into_iter().rev() {
            stack.push((c.hash.clone(), depth + 1, Some(k)));
        }
    }
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_version() {
        let s = parse_spec("hdf5@1.14.5").unwrap();
        assert_eq!(s.root.name.as_deref(), Some("hdf5"));
        assert_eq!(s.root.version.as_ref().unwrap().to_string(), "1.14.5");
        assert!(s.dependencies.is_empty());
    }

    #[test]
    fn parses_link_run_dependency() {
        let s = parse_spec("hdf5 ^zlib").unwrap();
        assert_eq!(s.dependencies.len(), 1);
        assert_eq!(s.dependencies[0].kind, DepKind::LinkRun);
        assert_eq!(s.dependencies[0].constraints.name.as_deref(), Some("zlib"));
    }

    #[test]
    fn parses_listing_shape() {
        let s = parse_spec("example@1.0.0 +bzip ^mpich@3.1 pmi=pmix").unwrap();
        assert_eq!(s.root.variants["bzip"], VariantValue::Bool(true));
        let mpich = &s.dependencies[0].constraints;
        assert_eq!(mpich.name.as_deref(), Some("mpich"));
        assert_eq!(mpich.version.as_ref().unwrap().to_string(), "3.1");
        assert_eq!(mpich.variants["pmi"], VariantValue::Str("pmix".into()));
    }

    #[test]
    fn arch_triple_sets_os_and_target() {
        let s = parse_spec("zlib arch=linux-centos8-skylake").unwrap();
        assert_eq!(s.root.os.as_deref(), Some("centos8"));
        assert_eq!(s.root.target.as_deref(), Some("skylake"));
        let s = parse_spec("hdf5 target=icelake").unwrap();
        assert_eq!(s.root.target.as_deref(), Some("icelake"));
        assert!(parse_spec("zlib arch=centos8-skylake").is_err());
        assert!(parse_spec("zlib os=rhel9 arch=linux-centos8-skylake").is_err());
    }

    #[test]
    fn build_dependency_sigil() {
        let s = parse_spec("t %cmake@3.27").unwrap();
        assert_eq!(s.dependencies[0].kind, DepKind::Build);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(format_spec(&parse_spec("hdf5+cxx").unwrap()), "hdf5+cxx");
        assert_eq!(format_spec(&parse_spec("hdf5~mpi").unwrap()), "hdf5~mpi");
        assert_eq!(
            format_spec(&parse_spec("hdf5   ~mpi +cxx api=default ^ zlib@1.2").unwrap()),
            "hdf5+cxx~mpi api=default ^zlib@1.2"
        );
        assert_eq!(format_spec(&parse_spec("").unwrap()), "");
        assert_eq!(format_spec(&parse_spec("+bzip").unwrap()), "+bzip");
    }

    #[test]
    fn error_positions() {
        let e = parse_spec("@oops").unwrap_err();
        assert_eq!(e.offset, 0);
        assert!(e.message.contains("malformed version"));

        let e = parse_spec("hdf5 ^").unwrap_err();
        assert_eq!(e.offset, 5);
        assert_eq!(e.expected, vec!["package name"]);

        let e = parse_spec("hdf5@1.0@2.0").unwrap_err();
        assert_eq!(e.offset, 8);
        assert!(e.message.contains("duplicate version"));

        let e = parse_spec("hdf5 zlib").unwrap_err();
        assert_eq!(e.offset, 5);

        let e = parse_spec("t ^z ^z@1.0").unwrap_err();
        assert!(e.message.contains("duplicate dependency"));

        let e = parse_spec("hdf5 ^@1.0").unwrap_err();
        assert_eq!(e.offset, 6);

        assert!(parse_spec("hdf5+").is_err());
        assert!(parse_spec("hdf5+cxx~cxx").is_err());
        assert!(parse_spec("HDF5").is_err());
        assert!(parse_spec("t ^t").is_err());
    }

    #[test]
    fn caret_rendering() {
        let e = parse_spec("hdf5 ^").unwrap_err();
        let r = e.render("hdf5 ^");
        assert!(r.contains("\n       ^"), "{r}");
        assert!(r.contains("expected: package name"));
    }

    #[test]
    fn token_positions_increase() {
        let toks = tokenize("example@1.0.0 +bzip ^mpich@3.1 pmi=pmix %cmake").unwrap();
        assert!(toks.windows(2).all(|w| w[0].position < w[1].position));
        assert_eq!(toks.len(), 9);
    }
}
