//! Installing concrete specs into a prefix tree, and rewiring binaries of
//! spliced nodes.
//!
//! Artifacts are synthetic binaries with fixed-width fields, so prefixes can
//! be patched in place like paths embedded in real shared libraries:
//!
//! ```text
//! magic "SPLC1" | name[64] | version[32] | count[4] | self prefix[256]
//!   then per link-run dependency: name[64] | hash[64] | prefix[256]
//! ```
//!
//! Fields are NUL padded; `count` is ASCII decimal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::cache::{BuildCache, CacheError, EntrySource};
use crate::hash::DagHash;
use crate::spec::{ConcreteNode, ConcreteSpec, SpecError};
use crate::splice::{rewiring_map, SpliceError};

pub const MAGIC: &[u8; 5] = b"SPLC1";
pub const PREFIX_FIELD: usize = 256;
pub const NAME_FIELD: usize = 64;
pub const VERSION_FIELD: usize = 32;
pub const COUNT_FIELD: usize = 4;
pub const HASH_FIELD: usize = 64;
pub const HEADER_LEN: usize = MAGIC.len() + NAME_FIELD + VERSION_FIELD + COUNT_FIELD;
pub const DEP_LEN: usize = NAME_FIELD + HASH_FIELD + PREFIX_FIELD;

/// Byte length of an artifact with `n` dependencies.
pub fn artifact_len(n: usize) -> usize {
    HEADER_LEN + PREFIX_FIELD + n * DEP_LEN
}

#[derive(Debug, Error)]
pub enum InstallError {
    #[error("prefix {0} does not fit in {PREFIX_FIELD} bytes")]
    PrefixTooLong(String),
    #[error("dependency {name} ({hash}) is not installed or not in the spec")]
    MissingDependency { name: String, hash: DagHash },
    #[error("spliced node {0} has no cached build-spec artifact")]
    MissingProvenance(DagHash),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

impl From<SpliceError> for InstallError {
    fn from(e: SpliceError) -> Self {
        match e {
            SpliceError::MissingProvenance(h) => InstallError::MissingProvenance(h),
            other => InstallError::Malformed(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> InstallError {
    InstallError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactDep {
    pub name: String,
    pub hash: String,
    pub prefix: String,
}

/// A decoded artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub version: String,
    pub prefix: String,
    pub deps: Vec<ArtifactDep>,
}

fn put(out: &mut Vec<u8>, s: &str, width: usize) -> Result<(), InstallError> {
    if s.len() > width || s.as_bytes().contains(&0) {
        return Err(if width == PREFIX_FIELD {
            InstallError::PrefixTooLong(s.to_string())
        } else {
            InstallError::Malformed(format!("{s:?} does not fit in {width} bytes"))
        });
    }
    out.extend_from_slice(s.as_bytes());
    out.resize(out.len() + width - s.len(), 0);
    Ok(())
}

fn get(bytes: &[u8], at: &mut usize, width: usize) -> Result<String, InstallError> {
    let field = bytes
        .get(*at..*at + width)
        .ok_or_else(|| InstallError::Malformed("truncated".into()))?;
    *at += width;
    let end = field.iter().position(|&b| b == 0).unwrap_or(width);
    if field[end..].iter().any(|&b| b != 0) {
        return Err(InstallError::Malformed("garbage after padding".into()));
    }
    String::from_utf8(field[..end].to_vec()).map_err(|_| InstallError::Malformed("field is not UTF-8".into()))
}

impl Artifact {
    pub fn encode(&self) -> Result<Vec<u8>, InstallError> {
        if self.deps.len() > 9999 {
            return Err(InstallError::Malformed("too many dependencies".into()));
        }
        let mut out = Vec::with_capacity(artifact_len(self.deps.len()));
        out.extend_from_slice(MAGIC);
        put(&mut out, &self.name, NAME_FIELD)?;
        put(&mut out, &self.version, VERSION_FIELD)?;
        put(&mut out, &format!("{:04}", self.deps.len()), COUNT_FIELD)?;
        put(&mut out, &self.prefix, PREFIX_FIELD)?;
        for d in &self.deps {
            put(&mut out, &d.name, NAME_FIELD)?;
            put(&mut out, &d.hash, HASH_FIELD)?;
            put(&mut out, &d.prefix, PREFIX_FIELD)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Artifact, InstallError> {
        if !bytes.starts_with(MAGIC) {
            return Err(InstallError::Malformed("bad magic".into()));
        }
        let mut at = MAGIC.len();
        let name = get(bytes, &mut at, NAME_FIELD)?;
        let version = get(bytes, &mut at, VERSION_FIELD)?;
        let count: usize = get(bytes, &mut at, COUNT_FIELD)?
            .parse()
            .map_err(|_| InstallError::Malformed("bad dependency count".into()))?;
        if bytes.len() != artifact_len(count) {
            return Err(InstallError::Malformed(format!(
                "length {} does not match {count} dependencies",
                bytes.len()
            )));
        }
        let prefix = get(bytes, &mut at, PREFIX_FIELD)?;
        let mut deps = Vec::with_capacity(count);
        for _ in 0..count {
            deps.push(ArtifactDep {
                name: get(bytes, &mut at, NAME_FIELD)?,
                hash: get(bytes, &mut at, HASH_FIELD)?,
                prefix: get(bytes, &mut at, PREFIX_FIELD)?,
            });
        }
        Ok(Artifact {
            name,
            version,
            prefix,
            deps,
        })
    }
}

/// Where each node of a spec lives under one install root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallTree {
    root: PathBuf,
}

impl InstallTree {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        InstallTree { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prefix(&self, node: &ConcreteNode) -> PathBuf {
        self.root
            .join(format!("{}-{}-{}", node.name, node.version, node.hash.short()))
    }

    fn prefix_str(&self, node: &ConcreteNode) -> Result<String, InstallError> {
        let p = self.prefix(node).to_string_lossy().into_owned();
        if p.len() > PREFIX_FIELD {
            return Err(InstallError::PrefixTooLong(p));
        }
        Ok(p)
    }

    /// Whether `node` is installed here, judged by its recorded spec.
    pub fn is_installed(&self, node: &ConcreteNode) -> bool {
        let path = self.prefix(node).join("spec.json");
        fs::read_to_string(path)
            .ok()
            .and_then(|t| ConcreteSpec::from_json(&t).ok())
            .is_some_and(|s| s.root == node.hash)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstallAction {
    AlreadyInstalled,
    /// Built from source.
    Built,
    /// Copied from the cache with prefixes patched.
    Relocated,
    /// Copied from the build spec's artifact with dependencies rewired.
    Rewired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstalledNode {
    pub hash: DagHash,
    pub name: String,
    pub prefix: PathBuf,
    pub action: InstallAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstallReport {
    pub root: DagHash,
    pub nodes: Vec<InstalledNode>,
}

impl InstallReport {
    pub fn count(&self, action: InstallAction) -> usize {
        self.nodes.iter().filter(|n| n.action == action).count()
    }
}

/// Link-run children of `hash`, ordered by name.
fn link_deps<'a>(spec: &'a ConcreteSpec, hash: &DagHash) -> Vec<&'a ConcreteNode> {
    let mut v: Vec<&ConcreteNode> = spec.link_children(hash).map(|h| &spec.nodes[h]).collect();
    v.sort_by(|a, b| a.name.cmp(&b.name));
    v
}

/// The artifact a from-source build of `hash` would produce in `tree`.
pub fn build_artifact(spec: &ConcreteSpec, hash: &DagHash, tree: &InstallTree) -> Result<Artifact, InstallError> {
    let node = spec.node(hash).ok_or_else(|| SpecError::MissingRoot(hash.clone()))?;
    let mut deps = Vec::new();
    for child in link_deps(spec, hash) {
        deps.push(ArtifactDep {
            name: child.name.clone(),
            hash: child.hash.to_string(),
            prefix: tree.prefix_str(child)?,
        });
    }
    Ok(Artifact {
        name: node.name.clone(),
        version: node.version.to_string(),
        prefix: tree.prefix_str(node)?,
        deps,
    })
}

/// Install every node of `spec` into `tree`, children first. Built and
/// rewired nodes are pushed to `cache` when `push` is set.
pub fn install(
    spec: &ConcreteSpec,
    tree: &InstallTree,
    cache: &mut BuildCache,
    push: bool,
) -> Result<InstallReport, InstallError> {
    spec.validate()?;
    let order = spec.topological_order()?;
    let rewiring = if spec.spliced_nodes().next().is_some() {
        rewiring_map(spec, &cache.reusable_pool().store)?
    } else {
        BTreeMap::new()
    };
    let empty = BTreeMap::new();
    let mut nodes = Vec::new();
    for h in &order {
        let node = &spec.nodes[h];
        let prefix = tree.prefix(node);
        if tree.is_installed(node) {
            nodes.push(InstalledNode {
                hash: h.clone(),
                name: node.name.clone(),
                prefix,
                action: InstallAction::AlreadyInstalled,
            });
            continue;
        }
        let (artifact, action) = produce(spec, h, tree, cache, rewiring.get(h).unwrap_or(&empty))?;
        for d in &artifact.deps {
            let dh: DagHash = d
                .hash
                .parse()
                .map_err(|_| InstallError::Malformed(format!("bad dependency hash {:?}", d.hash)))?;
            let child = spec.node(&dh).ok_or_else(|| InstallError::MissingDependency {
                name: d.name.clone(),
                hash: dh.clone(),
            })?;
            if !tree.is_installed(child) {
                return Err(InstallError::MissingDependency {
                    name: d.name.clone(),
                    hash: dh,
                });
            }
        }
        let bytes = artifact.encode()?;
        fs::create_dir_all(&prefix).map_err(|e| io_err(&prefix, e))?;
        let art_path = prefix.join("artifact.bin");
        fs::write(&art_path, &bytes).map_err(|e| io_err(&art_path, e))?;
        let sub = spec.subspec(h)?;
        let spec_path = prefix.join("spec.json");
        fs::write(&spec_path, sub.to_canonical_json()).map_err(|e| io_err(&spec_path, e))?;
        if push && action != InstallAction::Relocated {
            let source = if action == InstallAction::Rewired {
                EntrySource::Rewired
            } else {
                EntrySource::Built
            };
            cache.push(&sub, Some(&bytes), source, Some(h))?;
        }
        log::debug!("{:?} {} at {}", action, node.name, prefix.display());
        nodes.push(InstalledNode {
            hash: h.clone(),
            name: node.name.clone(),
            prefix,
            action,
        });
    }
    Ok(InstallReport {
        root: spec.root.clone(),
        nodes,
    })
}

/// The artifact for node `h` in `tree`: rewired from its build spec,
/// relocated from the cache, or built from source, in that order.
fn produce(
    spec: &ConcreteSpec,
    h: &DagHash,
    tree: &InstallTree,
    cache: &BuildCache,
    map: &BTreeMap<DagHash, DagHash>,
) -> Result<(Artifact, InstallAction), InstallError> {
    let node = &spec.nodes[h];
    Ok(if let Some(bs) = &node.build_spec_hash {
        let bytes = cache
            .artifact(bs)?
            .ok_or_else(|| InstallError::MissingProvenance(h.clone()))?;
        (rewire(&Artifact::decode(&bytes)?, node, map, spec, tree)?, InstallAction::Rewired)
    } else if let Some(bytes) = cache.artifact(h)? {
        (relocate(&Artifact::decode(&bytes)?, node, spec, tree)?, InstallAction::Relocated)
    } else {
        (build_artifact(spec, h, tree)?, InstallAction::Built)
    })
}

/// Push every node of `spec` to `cache` with the artifact it would have
/// when installed in `tree`, without touching the filesystem. Returns how
/// many entries were new.
pub fn publish(spec: &ConcreteSpec, tree: &InstallTree, cache: &mut BuildCache) -> Result<usize, InstallError> {
    spec.validate()?;
    let mut added = 0;
    for h in spec.topological_order()? {
        let sub = spec.subspec(&h)?;
        if cache.artifact(&h)?.is_some() {
            continue;
        }
        let map = if spec.nodes[&h].is_spliced() {
            rewiring_map(&sub, &cache.reusable_pool().store)?.remove(&h).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        let (artifact, action) = produce(spec, &h, tree, cache, &map)?;
        let source = if action == InstallAction::Rewired {
            EntrySource::Rewired
        } else {
            EntrySource::Built
        };
        let out = cache.push(&sub, Some(&artifact.encode()?), source, Some(&h))?;
        added += usize::from(!out.already_present);
    }
    Ok(added)
}

fn relocate(
    cached: &Artifact,
    node: &ConcreteNode,
    spec: &ConcreteSpec,
    tree: &InstallTree,
) -> Result<Artifact, InstallError> {
    let mut out = cached.clone();
    out.prefix = tree.prefix_str(node)?;
    for d in &mut out.deps {
        let child = d
            .hash
            .parse::<DagHash>()
            .ok()
            .and_then(|h| spec.node(&h))
            .ok_or_else(|| InstallError::MissingDependency {
                name: d.name.clone(),
                hash: d.hash.parse().unwrap_or_else(|_| node.hash.clone()),
            })?;
        d.prefix = tree.prefix_str(child)?;
    }
    Ok(out)
}

/// Patch a build spec's artifact for the spliced `node`: each dependency
/// field is redirected along `map` (build-spec child to spliced child), and
/// every prefix is moved into `tree`.
pub fn rewire(
    built: &Artifact,
    node: &ConcreteNode,
    map: &BTreeMap<DagHash, DagHash>,
    spec: &ConcreteSpec,
    tree: &InstallTree,
) -> Result<Artifact, InstallError> {
    if built.name != node.name || built.version != node.version.to_string() {
        return Err(InstallError::Malformed(format!(
            "build-spec artifact is {}@{}, not {}@{}",
            built.name, built.version, node.name, node.version
        )));
    }
    let mut out = built.clone();
    out.prefix = tree.prefix_str(node)?;
    for d in &mut out.deps {
        let old: DagHash = d
            .hash
            .parse()
            .map_err(|_| InstallError::Malformed(format!("bad dependency hash {:?}", d.hash)))?;
        let new = map.get(&old).cloned().unwrap_or(old);
        let child = spec.node(&new).ok_or_else(|| InstallError::MissingDependency {
            name: d.name.clone(),
            hash: new.clone(),
        })?;
        d.name = child.name.clone();
        d.hash = new.to_string();
        d.prefix = tree.prefix_str(child)?;
    }
    Ok(out)
}

/// Check that every node of `spec` is installed in `tree` and that each
/// artifact references exactly its node's link-run children at their
/// prefixes. Returns a JSON report: an overall `ok` flag and one failure
/// entry per problem found.
pub fn verify(spec: &ConcreteSpec, tree: &InstallTree) -> serde_json::Value {
    let mut failures = Vec::new();
    for (h, node) in &spec.nodes {
        let mut fail = |problem: String| {
            failures.push(json!({ "hash": h, "name": node.name, "problem": problem }));
        };
        let prefix = tree.prefix(node);
        if !tree.is_installed(node) {
            fail("spec.json missing or for another hash".into());
        }
        let artifact = match fs::read(prefix.join("artifact.bin")) {
            Err(e) => {
                fail(format!("artifact unreadable: {e}"));
                continue;
            }
            Ok(bytes) => match Artifact::decode(&bytes) {
                Err(e) => {
                    fail(e.to_string());
                    continue;
                }
                Ok(a) => a,
            },
        };
        if artifact.name != node.name || artifact.version != node.version.to_string() {
            fail(format!("artifact is {}@{}", artifact.name, artifact.version));
        }
        if artifact.prefix != prefix.to_string_lossy() {
            fail(format!("self prefix is {}", artifact.prefix));
        }
        let mut expected: BTreeMap<&str, &ConcreteNode> =
            spec.link_children(h).map(|c| (spec.nodes[c].name.as_str(), &spec.nodes[c])).collect();
        for d in &artifact.deps {
            let Some(child) = expected.remove(d.name.as_str()) else {
                fail(format!("unexpected dependency field {}", d.name));
                continue;
            };
            if d.hash != child.hash.as_str() {
                fail(format!("dependency {} has stale hash {}", d.name, d.hash));
            } else if d.prefix != tree.prefix(child).to_string_lossy() {
                fail(format!("dependency {} points at {}", d.name, d.prefix));
            } else if !tree.is_installed(child) {
                fail(format!("dependency {} is not installed", d.name));
            }
        }
        for name in expected.keys() {
            fail(format!("no dependency field for {name}"));
        }
    }
    json!({ "root": spec.root, "ok": failures.is_empty(), "failures": failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{SpecBuilder, VariantValue};

    fn sample() -> (SpecBuilder, ConcreteSpec) {
        let mut b = SpecBuilder::new("centos8", "skylake");
        let z = b.node("zlib", "1.3.1", &[("pic", VariantValue::Bool(true))], &[], &[]);
        let c = b.node("cmake", "3.27", &[], &[], &[]);
        let a = b.node("app", "1.0", &[], &[&z], &[&c]);
        let spec = b.spec(&a);
        (b, spec)
    }

    #[test]
    fn artifact_round_trip_and_length() {
        let (_, spec) = sample();
        let tree = InstallTree::new("/opt/t");
        let a = build_artifact(&spec, &spec.root, &tree).unwrap();
        assert_eq!(a.deps.len(), 1);
        let bytes = a.encode().unwrap();
        assert_eq!(bytes.len(), 105 + 256 + 384);
        assert_eq!(Artifact::decode(&bytes).unwrap(), a);
    }

    #[test]
    fn long_prefix_is_rejected() {
        let (_, spec) = sample();
        let tree = InstallTree::new(format!("/{}", "x".repeat(300)));
        assert!(matches!(
            build_artifact(&spec, &spec.root, &tree),
            Err(InstallError::PrefixTooLong(_))
        ));
    }

    #[test]
    fn decode_rejects_truncation_and_bad_magic() {
        let (_, spec) = sample();
        let bytes = build_artifact(&spec, &spec.root, &InstallTree::new("/p"))
            .unwrap()
            .encode()
            .unwrap();
        assert!(Artifact::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Artifact::decode(&bad).is_err());
    }

    #[test]
    fn install_then_verify_then_reinstall() {
        let (_, spec) = sample();
        let dir = tempfile::tempdir().unwrap();
        let tree = InstallTree::new(dir.path());
        let mut cache = BuildCache::in_memory();
        let r = install(&spec, &tree, &mut cache, true).unwrap();
        assert_eq!(r.count(InstallAction::Built), 3);
        assert_eq!(verify(&spec, &tree)["ok"], true);
        let again = install(&spec, &tree, &mut cache, true).unwrap();
        assert_eq!(again.count(InstallAction::AlreadyInstalled), 3);
        // a second tree fed from the cache relocates instead of building
        let dir2 = tempfile::tempdir().unwrap();
        let tree2 = InstallTree::new(dir2.path());
        let r2 = install(&spec, &tree2, &mut cache, false).unwrap();
        assert_eq!(r2.count(InstallAction::Relocated), 3);
        assert_eq!(verify(&spec, &tree2)["ok"], true);
    }

    #[test]
    fn verify_flags_tampered_artifact() {
        let (_, spec) = sample();
        let dir = tempfile::tempdir().unwrap();
        let tree = InstallTree::new(dir.path());
        install(&spec, &tree, &mut BuildCache::in_memory(), false).unwrap();
        let root = &spec.nodes[&spec.root];
        let path = tree.prefix(root).join("artifact.bin");
        let mut a = Artifact::decode(&fs::read(&path).unwrap()).unwrap();
        a.deps[0].hash = "0".repeat(64);
        fs::write(&path, a.encode().unwrap()).unwrap();
        let report = verify(&spec, &tree);
        assert_eq!(report["ok"], false);
        let failures = report["failures"].as_array().unwrap();
        assert_eq!(failures.len(), 1);
        assert!(failures[0]["problem"].as_str().unwrap().contains("zlib"));
    }
}
