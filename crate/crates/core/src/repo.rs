//! Package definitions and the repository that indexes them.
//!
//! Packages live one per file at `<repo>/packages/<name>.json`. Spec-valued
//! fields (`spec`, `when`, `target`) use the command-line spec syntax.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::parse_spec;
use crate::spec::{is_valid_name, satisfies, EdgeKind, NodeAttrs, NodeConstraints, VariantValue};
use crate::version::{cmp_newest_first, Version};

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed package document {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid package {package}: {message}")]
    Validation { package: String, message: String },
}

fn invalid(package: &str, message: impl Into<String>) -> RepoError {
    RepoError::Validation {
        package: package.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantDef {
    pub name: String,
    pub default: VariantValue,
    /// Allowed values for string variants; absent means any token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
}

impl VariantDef {
    pub fn allows(&self, v: &VariantValue) -> bool {
        match (&self.default, v) {
            (VariantValue::Bool(_), VariantValue::Bool(_)) => true,
            (VariantValue::Str(_), VariantValue::Str(s)) => {
                self.values.as_ref().is_none_or(|vals| vals.iter().any(|x| x == s))
            }
            _ => false,
        }
    }

    /// Every value this variant can take, default first. Free-form string
    /// variants only offer their default.
    pub fn domain(&self) -> Vec<VariantValue> {
        match &self.default {
            VariantValue::Bool(b) => vec![VariantValue::Bool(*b), VariantValue::Bool(!*b)],
            VariantValue::Str(d) => {
                let mut out = vec![self.default.clone()];
                for v in self.values.iter().flatten() {
                    if v != d {
                        out.push(VariantValue::Str(v.clone()));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependsOn {
    pub spec: NodeConstraints,
    pub when: Option<NodeConstraints>,
    pub kind: EdgeKind,
}

impl DependsOn {
    pub fn name(&self) -> &str {
        self.spec.name.as_deref().expect("validated dependency names")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provides {
    pub virtual_name: String,
    pub when: Option<NodeConstraints>,
}

/// `can_splice(target, when=...)`: a node of this package satisfying `when`
/// may stand in for an already-built node satisfying `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanSplice {
    pub target: NodeConstraints,
    pub when: Option<NodeConstraints>,
}

impl CanSplice {
    pub fn target_name(&self) -> &str {
        self.target.name.as_deref().expect("validated splice targets")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageDef {
    pub name: String,
    /// Newest first.
    pub versions: Vec<Version>,
    pub variants: Vec<VariantDef>,
    pub depends_on: Vec<DependsOn>,
    pub provides: Vec<Provides>,
    pub can_splice: Vec<CanSplice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DependsOnDoc {
    spec: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    when: Option<String>,
    #[serde(rename = "type", default = "default_edge")]
    kind: EdgeKind,
}

fn default_edge() -> EdgeKind {
    EdgeKind::LinkRun
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvidesDoc {
    #[serde(rename = "virtual")]
    virtual_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    when: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanSpliceDoc {
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    when: Option<String>,
}

/// On-disk shape of a package document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackageDoc {
    name: String,
    versions: Vec<String>,
    #[serde(default)]
    variants: Vec<VariantDef>,
    #[serde(default)]
    depends_on: Vec<DependsOnDoc>,
    #[serde(default)]
    provides: Vec<ProvidesDoc>,
    #[serde(default)]
    can_splice: Vec<CanSpliceDoc>,
}

fn parse_named(package: &str, what: &str, text: &str) -> Result<NodeConstraints, RepoError> {
    let spec = parse_spec(text).map_err(|e| invalid(package, format!("{what} {text:?}: {e}")))?;
    if !spec.dependencies.is_empty() {
        return Err(invalid(package, format!("{what} {text:?} may not carry dependencies")));
    }
    if spec.root.name.is_none() {
        return Err(invalid(package, format!("{what} {text:?} must name a package")));
    }
    Ok(spec.root)
}

fn parse_when(package: &str, text: &Option<String>) -> Result<Option<NodeConstraints>, RepoError> {
    let Some(text) = text else { return Ok(None) };
    let spec = parse_spec(text).map_err(|e| invalid(package, format!("when {text:?}: {e}")))?;
    if !spec.dependencies.is_empty() {
        return Err(invalid(package, format!("when {text:?} may only constrain the package itself")));
    }
    match spec.root.name.as_deref() {
        None => {}
        Some(n) if n == package => {}
        Some(n) => {
            return Err(invalid(package, format!("when {text:?} refers to another package {n}")));
        }
    }
    Ok(Some(spec.root.anonymous()))
}

fn render(c: &NodeConstraints) -> String {
    c.to_string()
}

impl PackageDef {
    /// Parse one package document.
    pub fn from_json(text: &str) -> Result<PackageDef, RepoError> {
        let doc: PackageDoc = serde_json::from_str(text).map_err(|e| RepoError::Format {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        PackageDef::from_doc(doc)
    }

    fn from_doc(doc: PackageDoc) -> Result<PackageDef, RepoError> {
        let name = doc.name;
        let mut versions = doc
            .versions
            .iter()
            .map(|v| v.parse::<Version>().map_err(|e| invalid(&name, format!("version {v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        versions.sort_by(cmp_newest_first);
        let mut depends_on = Vec::new();
        for d in &doc.depends_on {
            depends_on.push(DependsOn {
                spec: parse_named(&name, "dependency", &d.spec)?,
                when: parse_when(&name, &d.when)?,
                kind: d.kind,
            });
        }
        let mut provides = Vec::new();
        for p in &doc.provides {
            provides.push(Provides {
                virtual_name: p.virtual_name.clone(),
                when: parse_when(&name, &p.when)?,
            });
        }
        let mut can_splice = Vec::new();
        for c in &doc.can_splice {
            can_splice.push(CanSplice {
                target: parse_named(&name, "splice target", &c.target)?,
                when: parse_when(&name, &c.when)?,
            });
        }
        let def = PackageDef {
            name,
            versions,
            variants: doc.variants,
            depends_on,
            provides,
            can_splice,
        };
        def.validate()?;
        Ok(def)
    }

    /// The document form, suitable for writing back to disk.
    pub fn to_json(&self) -> String {
        let opt = |w: &Option<NodeConstraints>| w.as_ref().map(render);
        let doc = PackageDoc {
            name: self.name.clone(),
            versions: self.versions.iter().map(|v| v.to_string()).collect(),
            variants: self.variants.clone(),
            depends_on: self
                .depends_on
                .iter()
                .map(|d| DependsOnDoc {
                    spec: render(&d.spec),
                    when: opt(&d.when),
                    kind: d.kind,
                })
                .collect(),
            provides: self
                .provides
                .iter()
                .map(|p| ProvidesDoc {
                    virtual_name: p.virtual_name.clone(),
                    when: opt(&p.when),
                })
                .collect(),
            can_splice: self
                .can_splice
                .iter()
                .map(|c| CanSpliceDoc {
                    target: render(&c.target),
                    when: opt(&c.when),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("package documents serialize")
    }

    fn validate(&self) -> Result<(), RepoError> {
        let name = &self.name;
        if !is_valid_name(name) {
            return Err(invalid(name, "package names are lowercase alphanumerics and dashes"));
        }
        if self.versions.is_empty() {
            return Err(invalid(name, "at least one version is required"));
        }
        let unique: BTreeSet<&Version> = self.versions.iter().collect();
        if unique.len() != self.versions.len() {
            return Err(invalid(name, "duplicate version"));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(v.name.as_str()) {
                return Err(invalid(name, format!("duplicate variant {}", v.name)));
            }
            if !v.allows(&v.default) {
                return Err(invalid(name, format!("default of variant {} is not an allowed value", v.name)));
            }
        }
        let whens = self
            .depends_on
            .iter()
            .map(|d| &d.when)
            .chain(self.provides.iter().map(|p| &p.when))
            .chain(self.can_splice.iter().map(|c| &c.when));
        for when in whens.flatten() {
            for (k, value) in &when.variants {
                match self.variant_def(k) {
                    None => return Err(invalid(name, format!("when-clause references undeclared variant {k}"))),
                    Some(def) if !def.allows(value) => {
                        return Err(invalid(name, format!("when-clause gives variant {k} an invalid value {value}")))
                    }
                    _ => {}
                }
            }
        }
        for d in &self.depends_on {
            if d.name() == name {
                return Err(invalid(name, "a package cannot depend on itself"));
            }
        }
        for p in &self.provides {
            if !is_valid_name(&p.virtual_name) {
                return Err(invalid(name, format!("invalid virtual name {:?}", p.virtual_name)));
            }
        }
        Ok(())
    }

    pub fn variant_def(&self, name: &str) -> Option<&VariantDef> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn default_variants(&self) -> BTreeMap<String, VariantValue> {
        self.variants
            .iter()
            .map(|v| (v.name.clone(), v.default.clone()))
            .collect()
    }

    /// Index of `v` in the newest-first version list, or the list length.
    pub fn version_penalty(&self, v: &Version) -> usize {
        crate::version::recency_index(&self.versions, v)
    }

    /// Number of variants in `variants` that differ from their defaults.
    pub fn default_deviation(&self, variants: &BTreeMap<String, VariantValue>) -> usize {
        self.variants
            .iter()
            .filter(|d| variants.get(&d.name).is_some_and(|v| *v != d.default))
            .count()
    }

    /// True if `attrs` carries exactly this package's variants, each with an allowed value.
    pub fn variants_complete(&self, variants: &BTreeMap<String, VariantValue>) -> bool {
        variants.len() == self.variants.len()
            && self
                .variants
                .iter()
                .all(|d| variants.get(&d.name).is_some_and(|v| d.allows(v)))
    }
}

/// Truth value of a `when` clause against a partial assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Active,
    Inactive,
    Undetermined,
}

/// A node with only some attributes decided.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartialNode {
    pub version: Option<Version>,
    pub variants: BTreeMap<String, VariantValue>,
    pub os: Option<String>,
    pub target: Option<String>,
}

impl From<&NodeAttrs> for PartialNode {
    fn from(a: &NodeAttrs) -> Self {
        PartialNode {
            version: Some(a.version.clone()),
            variants: a.variants.clone(),
            os: Some(a.os.clone()),
            target: Some(a.target.clone()),
        }
    }
}

/// Evaluate a `when` clause. Fields that are constrained but not yet decided
/// make the result undetermined, unless another field already fails.
pub fn evaluate_when(when: Option<&NodeConstraints>, node: &PartialNode) -> Activation {
    let Some(when) = when else { return Activation::Active };
    // Some(true) holds, Some(false) fails, None not yet decided
    let mut checks: Vec<Option<bool>> = Vec::new();
    if let Some(c) = &when.version {
        checks.push(node.version.as_ref().map(|v| c.contains(v)));
    }
    for (k, want) in &when.variants {
        checks.push(node.variants.get(k).map(|have| have == want));
    }
    if let Some(o) = &when.os {
        checks.push(node.os.as_ref().map(|x| x == o));
    }
    if let Some(t) = &when.target {
        checks.push(node.target.as_ref().map(|x| x == t));
    }
    if checks.contains(&Some(false)) {
        Activation::Inactive
    } else if checks.contains(&None) {
        Activation::Undetermined
    } else {
        Activation::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive<'a> {
    DependsOn(&'a DependsOn),
    Provides(&'a Provides),
    CanSplice(&'a CanSplice),
}

/// Every directive of `def` with its activation under `node`.
pub fn active_directives<'a>(def: &'a PackageDef, node: &PartialNode) -> Vec<(Directive<'a>, Activation)> {
    let mut out = Vec::new();
    for d in &def.depends_on {
        out.push((Directive::DependsOn(d), evaluate_when(d.when.as_ref(), node)));
    }
    for p in &def.provides {
        out.push((Directive::Provides(p), evaluate_when(p.when.as_ref(), node)));
    }
    for c in &def.can_splice {
        out.push((Directive::CanSplice(c), evaluate_when(c.when.as_ref(), node)));
    }
    out
}

fn when_holds(when: Option<&NodeConstraints>, attrs: &NodeAttrs) -> bool {
    when.is_none_or(|w| satisfies(attrs, w))
}

impl PackageDef {
    /// Dependencies active for a fully decided node.
    pub fn active_dependencies<'a>(&'a self, attrs: &'a NodeAttrs) -> impl Iterator<Item = &'a DependsOn> + 'a {
        self.depends_on.iter().filter(move |d| when_holds(d.when.as_ref(), attrs))
    }

    /// Virtuals provided by a fully decided node.
    pub fn provided_virtuals<'a>(&'a self, attrs: &'a NodeAttrs) -> impl Iterator<Item = &'a str> + 'a {
        self.provides
            .iter()
            .filter(move |p| when_holds(p.when.as_ref(), attrs))
            .map(|p| p.virtual_name.as_str())
    }

    /// Whether some version/variant choice of this package could provide `virt`.
    pub fn may_provide(&self, virt: &str) -> bool {
        self.provides.iter().any(|p| p.virtual_name == virt)
    }
}

/// An immutable, validated set of packages.
#[derive(Debug, Clone, Default)]
pub struct Repo {
    packages: BTreeMap<String, PackageDef>,
    providers: BTreeMap<String, Vec<String>>,
    splice_index: BTreeMap<String, Vec<(String, usize)>>,
    warnings: Vec<String>,
}

impl Repo {
    pub fn new(defs: impl IntoIterator<Item = PackageDef>) -> Result<Repo, RepoError> {
        let mut packages = BTreeMap::new();
        for def in defs {
            def.validate()?;
            let name = def.name.clone();
            if packages.insert(name.clone(), def).is_some() {
                return Err(invalid(&name, "defined twice"));
            }
        }
        let mut providers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut splice_index: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
        for def in packages.values() {
            let virtuals: BTreeSet<&str> = def.provides.iter().map(|p| p.virtual_name.as_str()).collect();
            for v in virtuals {
                if packages.contains_key(v) {
                    return Err(invalid(&def.name, format!("virtual {v} collides with a package name")));
                }
                providers.entry(v.to_string()).or_default().push(def.name.clone());
            }
            for (i, c) in def.can_splice.iter().enumerate() {
                splice_index
                    .entry(c.target_name().to_string())
                    .or_default()
                    .push((def.name.clone(), i));
            }
        }
        let mut warnings = Vec::new();
        for def in packages.values() {
            for d in &def.depends_on {
                let n = d.name();
                if !packages.contains_key(n) && providers.contains_key(n) && !d.spec.anonymous().is_unconstrained() {
                    return Err(invalid(&def.name, format!("dependency on virtual {n} may not carry constraints")));
                }
                if !packages.contains_key(n) && !providers.contains_key(n) {
                    let w = format!("{} depends on {n}, which no package defines or provides", def.name);
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
        Ok(Repo {
            packages,
            providers,
            splice_index,
            warnings,
        })
    }

    pub fn get(&self, name: &str) -> Option<&PackageDef> {
        self.packages.get(name)
    }

    pub fn packages(&self) -> impl Iterator<Item = &PackageDef> {
        self.packages.values()
    }

    pub fn len(&self) -> usize {
        self.packages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }

    pub fn is_virtual(&self, name: &str) -> bool {
        !self.packages.contains_key(name) && self.providers.contains_key(name)
    }

    /// Packages that may provide `virt`, alphabetically.
    pub fn providers(&self, virt: &str) -> &[String] {
        self.providers.get(virt).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn virtuals(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    /// `(replacement package, directive)` pairs whose target names `target`.
    pub fn splices_targeting<'a>(&'a self, target: &str) -> impl Iterator<Item = (&'a PackageDef, &'a CanSplice)> + 'a {
        self.splice_index
            .get(target)
            .into_iter()
            .flatten()
            .map(|(pkg, i)| {
                let def = &self.packages[pkg];
                (def, &def.can_splice[*i])
            })
    }

    pub fn has_splices(&self) -> bool {
        !self.splice_index.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// The same repository with every `can_splice` directive removed.
    pub fn without_splices(&self) -> Repo {
        let defs = self.packages.values().cloned().map(|mut d| {
            d.can_splice.clear();
            d
        });
        Repo::new(defs).expect("removing directives keeps a repo valid")
    }

    /// Write every package to `<dir>/packages/<name>.json`.
    pub fn write(&self, dir: &Path) -> Result<(), RepoError> {
        let pkg_dir = dir.join("packages");
        let io = |path: &Path, e: std::io::Error| RepoError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        fs::create_dir_all(&pkg_dir).map_err(|e| io(&pkg_dir, e))?;
        for def in self.packages.values() {
            let path = pkg_dir.join(format!("{}.json", def.name));
            fs::write(&path, def.to_json() + "\n").map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Load every `packages/*.json` document under `dir`.
pub fn load_repo(dir: &Path) -> Result<Repo, RepoError> {
    if !dir.is_dir() {
        return Err(RepoError::Io {
            path: dir.to_path_buf(),
            message: "not a directory".into(),
        });
    }
    let pkg_dir = dir.join("packages");
    if !pkg_dir.exists() {
        return Repo::new([]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&pkg_dir)
        .map_err(|e| RepoError::Io {
            path: pkg_dir.clone(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut defs = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| RepoError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let def = PackageDef::from_json(&text).map_err(|e| match e {
            RepoError::Format { message, .. } => RepoError::Format {
                path: path.clone(),
                message,
            },
            other => other,
        })?;
        if path.file_stem().and_then(|s| s.to_str()) != Some(def.name.as_str()) {
            return Err(RepoError::Format {
                path,
                message: format!("file name does not match package name {}", def.name),
            });
        }
        defs.push(def);
    }
    Repo::new(defs)
}
