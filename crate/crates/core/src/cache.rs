//! Content-addressed build cache.
//!
//! A directory cache keeps `index.json` plus `artifacts/<hash>.bin`; the index
//! is rewritten whole (temp file, then rename) on every push. An in-memory
//! cache has the same interface and is used by tests, the bench harness and
//! the browser demo.
//!
//! The solver does not read entries directly. It reads [`BuildCache::solver_facts`],
//! a flat table of per-node attribute rows, and rebuilds a [`ReusablePool`] from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hash::DagHash;
use crate::spec::{ConcreteSpec, EdgeKind, NodeAttrs, SpecError, SpecStore, VariantValue};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("hash mismatch: expected {expected}, spec hashes to {actual}")]
    HashMismatch { expected: DagHash, actual: DagHash },
    #[error("invalid spec: {0}")]
    InvalidSpec(#[from] SpecError),
}

fn io_err(path: &Path, e: std::io::Error) -> CacheError {
    CacheError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntrySource {
    Built,
    Rewired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    /// Push sequence number; a logical clock keeps indexes reproducible.
    pub created_at: u64,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub root_hash: DagHash,
    pub spec: ConcreteSpec,
    pub has_artifact: bool,
    pub meta: EntryMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PushOutcome {
    pub hash: DagHash,
    pub already_present: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexDoc {
    format: u32,
    entries: Vec<CacheEntry>,
}

const INDEX_FORMAT: u32 = 1;

#[derive(Debug, Clone)]
enum Backing {
    Memory(BTreeMap<DagHash, Vec<u8>>),
    Dir(PathBuf),
}

/// One row of the solver's reusable-spec table: `(hash, attribute, args...)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub hash: DagHash,
    pub attr: String,
    pub args: Vec<Value>,
}

impl Fact {
    fn new(hash: &DagHash, attr: &str, args: Vec<Value>) -> Fact {
        Fact {
            hash: hash.clone(),
            attr: attr.to_string(),
            args,
        }
    }
}

#[derive(Debug)]
pub struct BuildCache {
    backing: Backing,
    by_hash: BTreeMap<DagHash, CacheEntry>,
    by_name: BTreeMap<String, Vec<DagHash>>,
    next_seq: u64,
    pool: OnceLock<Arc<ReusablePool>>,
}

impl Clone for BuildCache {
    fn clone(&self) -> Self {
        BuildCache {
            backing: self.backing.clone(),
            by_hash: self.by_hash.clone(),
            by_name: self.by_name.clone(),
            next_seq: self.next_seq,
            pool: OnceLock::new(),
        }
    }
}

impl Default for BuildCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl BuildCache {
    pub fn in_memory() -> Self {
        BuildCache {
            backing: Backing::Memory(BTreeMap::new()),
            by_hash: BTreeMap::new(),
            by_name: BTreeMap::new(),
            next_seq: 0,
            pool: OnceLock::new(),
        }
    }

    /// Open (or lazily create) a directory cache.
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        let mut cache = BuildCache {
            backing: Backing::Dir(dir.to_path_buf()),
            ..Self::in_memory()
        };
        let index = dir.join("index.json");
        if index.exists() {
            let text = fs::read_to_string(&index).map_err(|e| io_err(&index, e))?;
            let doc: IndexDoc =
                serde_json::from_str(&text).map_err(|e| CacheError::Corrupt(e.to_string()))?;
            if doc.format != INDEX_FORMAT {
                return Err(CacheError::Corrupt(format!("unknown index format {}", doc.format)));
            }
            for entry in doc.entries {
                entry.spec.validate()?;
                if entry.spec.root != entry.root_hash {
                    return Err(CacheError::Corrupt(format!("entry {} has a different root", entry.root_hash)));
                }
                cache.next_seq = cache.next_seq.max(entry.meta.created_at + 1);
                cache.insert_entry(entry);
            }
        }
        Ok(cache)
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backing {
            Backing::Dir(p) => Some(p),
            Backing::Memory(_) => None,
        }
    }

    fn insert_entry(&mut self, entry: CacheEntry) {
        let name = entry.spec.root_node().name.clone();
        let hashes = self.by_name.entry(name).or_default();
        if !hashes.contains(&entry.root_hash) {
            hashes.push(entry.root_hash.clone());
            hashes.sort();
        }
        self.by_hash.insert(entry.root_hash.clone(), entry);
        self.pool = OnceLock::new();
    }

    /// Store `spec` (and optionally its artifact). Pushing identical content
    /// again is a no-op reported as already present.
    pub fn push(
        &mut self,
        spec: &ConcreteSpec,
        artifact: Option<&[u8]>,
        source: EntrySource,
        expected: Option<&DagHash>,
    ) -> Result<PushOutcome, CacheError> {
        spec.validate()?;
        let hash = spec.root.clone();
        if let Some(e) = expected {
            if *e != hash {
                return Err(CacheError::HashMismatch {
                    expected: e.clone(),
                    actual: hash,
                });
            }
        }
        if let Some(existing) = self.by_hash.get(&hash) {
            if existing.has_artifact || artifact.is_none() {
                return Ok(PushOutcome {
                    hash,
                    already_present: true,
                });
            }
        }
        if let Some(bytes) = artifact {
            self.write_artifact(&hash, bytes)?;
        }
        let meta = match self.by_hash.get(&hash) {
            Some(e) => e.meta.clone(),
            None => {
                self.next_seq += 1;
                EntryMeta {
                    created_at: self.next_seq - 1,
                    source,
                }
            }
        };
        let already_present = self.by_hash.contains_key(&hash);
        self.insert_entry(CacheEntry {
            root_hash: hash.clone(),
            spec: spec.clone(),
            has_artifact: artifact.is_some(),
            meta,
        });
        self.persist()?;
        Ok(PushOutcome {
            hash,
            already_present,
        })
    }

    fn write_artifact(&mut self, hash: &DagHash, bytes: &[u8]) -> Result<(), CacheError> {
        match &mut self.backing {
            Backing::Memory(map) => {
                map.insert(hash.clone(), bytes.to_vec());
                Ok(())
            }
            Backing::Dir(dir) => {
                let adir = dir.join("artifacts");
                fs::create_dir_all(&adir).map_err(|e| io_err(&adir, e))?;
                let path = adir.join(format!("{hash}.bin"));
                atomic_write(&path, bytes)
            }
        }
    }

    fn persist(&self) -> Result<(), CacheError> {
        let Backing::Dir(dir) = &self.backing else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let doc = IndexDoc {
            format: INDEX_FORMAT,
            entries: self.by_hash.values().cloned().collect(),
        };
        let text = serde_json::to_string_pretty(&doc).expect("index serializes");
        atomic_write(&dir.join("index.json"), text.as_bytes())
    }

    pub fn lookup(&self, hash: &DagHash) -> Option<&CacheEntry> {
        self.by_hash.get(hash)
    }

    pub fn contains(&self, hash: &DagHash) -> bool {
        self.by_hash.contains_key(hash)
    }

    pub fn artifact(&self, hash: &DagHash) -> Result<Option<Vec<u8>>, CacheError> {
        if !self.by_hash.get(hash).is_some_and(|e| e.has_artifact) {
            return Ok(None);
        }
        match &self.backing {
            Backing::Memory(map) => Ok(map.get(hash).cloned()),
            Backing::Dir(dir) => {
                let path = dir.join("artifacts").join(format!("{hash}.bin"));
                fs::read(&path).map(Some).map_err(|e| io_err(&path, e))
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.by_hash.values()
    }

    /// Root hashes of entries whose root package is `name`.
    pub fn by_name(&self, name: &str) -> &[DagHash] {
        self.by_name.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }

    /// Copy every entry (and artifact) of `other` into this cache.
    pub fn merge_from(&mut self, other: &BuildCache) -> Result<(), CacheError> {
        for entry in other.entries() {
            let art = other.artifact(&entry.root_hash)?;
            self.push(&entry.spec, art.as_deref(), entry.meta.source, None)?;
        }
        Ok(())
    }

    /// Flatten every cached node into attribute rows, deduplicated and sorted.
    pub fn solver_facts(&self) -> Vec<Fact> {
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        for entry in self.by_hash.values() {
            for (h, node) in &entry.spec.nodes {
                if !seen.insert(h.clone()) {
                    continue;
                }
                node_facts(&entry.spec, h, &node.attrs, &mut rows);
            }
        }
        rows.sort_by_cached_key(|f| (f.hash.clone(), f.attr.clone(), Value::from(f.args.clone()).to_string()));
        rows
    }

    /// The reusable pool, rebuilt from [`Self::solver_facts`] once per snapshot.
    pub fn reusable_pool(&self) -> Arc<ReusablePool> {
        self.pool
            .get_or_init(|| {
                Arc::new(
                    ReusablePool::from_facts(&self.solver_facts())
                        .expect("facts from a validated cache are consistent"),
                )
            })
            .clone()
    }
}

fn node_facts(spec: &ConcreteSpec, h: &DagHash, a: &NodeAttrs, rows: &mut Vec<Fact>) {
    let name = Value::String(a.name.clone());
    rows.push(Fact::new(h, "installed_hash", vec![name.clone()]));
    rows.push(Fact::new(h, "version", vec![name.clone(), Value::String(a.version.to_string())]));
    for (k, v) in &a.variants {
        let value = match v {
            VariantValue::Bool(b) => Value::Bool(*b),
            VariantValue::Str(s) => Value::String(s.clone()),
        };
        rows.push(Fact::new(h, "variant", vec![name.clone(), Value::String(k.clone()), value]));
    }
    rows.push(Fact::new(h, "node_os", vec![name.clone(), Value::String(a.os.clone())]));
    rows.push(Fact::new(h, "node_target", vec![name.clone(), Value::String(a.target.clone())]));
    if let Some(b) = &a.build_spec_hash {
        rows.push(Fact::new(h, "build_spec", vec![name.clone(), Value::String(b.to_string())]));
    }
    for (kind, child) in spec.deps_of(h) {
        let cname = Value::String(spec.nodes[&child].name.clone());
        let kind = Value::String(kind.as_str().to_string());
        rows.push(Fact::new(h, "depends_on", vec![name.clone(), cname.clone(), kind.clone()]));
        rows.push(Fact::new(h, "hash", vec![cname, Value::String(child.to_string()), kind]));
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CacheError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Every cached node, keyed by hash, reconstructed from fact rows.
#[derive(Debug, Clone, Default)]
pub struct ReusablePool {
    pub store: SpecStore,
    by_name: BTreeMap<String, Vec<DagHash>>,
}

#[derive(Default)]
struct PartialRow {
    name: Option<String>,
    version: Option<String>,
    variants: BTreeMap<String, VariantValue>,
    os: Option<String>,
    target: Option<String>,
    build_spec: Option<DagHash>,
    deps: Vec<(EdgeKind, DagHash)>,
}

fn str_arg(f: &Fact, i: usize) -> Result<&str, CacheError> {
    f.args
        .get(i)
        .and_then(Value::as_str)
        .ok_or_else(|| CacheError::Corrupt(format!("fact {} on {} lacks argument {i}", f.attr, f.hash)))
}

impl ReusablePool {
    pub fn from_facts(facts: &[Fact]) -> Result<ReusablePool, CacheError> {
        let mut rows: BTreeMap<DagHash, PartialRow> = BTreeMap::new();
        for f in facts {
            let row = rows.entry(f.hash.clone()).or_default();
            match f.attr.as_str() {
                "installed_hash" => row.name = Some(str_arg(f, 0)?.to_string()),
                "version" => row.version = Some(str_arg(f, 1)?.to_string()),
                "variant" => {
                    let value = match f.args.get(2) {
                        Some(Value::Bool(b)) => VariantValue::Bool(*b),
                        Some(Value::String(s)) => VariantValue::Str(s.clone()),
                        _ => return Err(CacheError::Corrupt(format!("bad variant fact on {}", f.hash))),
                    };
                    row.variants.insert(str_arg(f, 1)?.to_string(), value);
                }
                "node_os" => row.os = Some(str_arg(f, 1)?.to_string()),
                "node_target" => row.target = Some(str_arg(f, 1)?.to_string()),
                "build_spec" => {
                    row.build_spec = Some(
                        str_arg(f, 1)?
                            .parse()
                            .map_err(|e| CacheError::Corrupt(format!("{e}")))?,
                    )
                }
                "hash" => {
                    let child: DagHash = str_arg(f, 1)?
                        .parse()
                        .map_err(|e| CacheError::Corrupt(format!("{e}")))?;
                    let kind = match str_arg(f, 2)? {
                        "link-run" => EdgeKind::LinkRun,
                        "build" => EdgeKind::Build,
                        other => return Err(CacheError::Corrupt(format!("unknown edge kind {other}"))),
                    };
                    row.deps.push((kind, child));
                }
                "depends_on" => {}
                other => return Err(CacheError::Corrupt(format!("unknown fact {other}"))),
            }
        }
        let mut pool = ReusablePool::default();
        let hashes: Vec<DagHash> = rows.keys().cloned().collect();
        for h in hashes {
            pool.insert_rec(&h, &mut rows, &mut BTreeSet::new())?;
        }
        for (h, node) in pool.store.iter() {
            pool.by_name.entry(node.attrs.name.clone()).or_default().push(h.clone());
        }
        Ok(pool)
    }

    fn insert_rec(
        &mut self,
        h: &DagHash,
        rows: &mut BTreeMap<DagHash, PartialRow>,
        active: &mut BTreeSet<DagHash>,
    ) -> Result<(), CacheError> {
        if self.store.contains(h) {
            return Ok(());
        }
        if !active.insert(h.clone()) {
            return Err(CacheError::Corrupt(format!("cycle through {h}")));
        }
        let deps = rows
            .get(h)
            .ok_or_else(|| CacheError::Corrupt(format!("dependency {h} has no facts")))?
            .deps
            .clone();
        for (_, child) in &deps {
            self.insert_rec(child, rows, active)?;
        }
        let row = rows.remove(h).expect("checked above");
        let missing = |what: &str| CacheError::Corrupt(format!("node {h} lacks {what}"));
        let attrs = NodeAttrs {
            name: row.name.ok_or_else(|| missing("a name"))?,
            version: row
                .version
                .ok_or_else(|| missing("a version"))?
                .parse()
                .map_err(|e| CacheError::Corrupt(format!("{e}")))?,
            variants: row.variants,
            os: row.os.ok_or_else(|| missing("an os"))?,
            target: row.target.ok_or_else(|| missing("a target"))?,
            build_spec_hash: row.build_spec,
        };
        let got = self.store.insert(attrs, deps)?;
        if got != *h {
            return Err(CacheError::Corrupt(format!("facts for {h} rebuild as {got}")));
        }
        active.remove(h);
        Ok(())
    }

    /// Cached nodes of package `name`, sorted by hash.
    pub fn nodes_named(&self, name: &str) -> &[DagHash] {
        self.by_name.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn spec(&self, h: &DagHash) -> Option<ConcreteSpec> {
        self.store.extract(h).ok()
    }
}
