//! `splicekit`: parse specs, concretize with reuse and splicing, install
//! into a prefix tree, manage a build cache, and run benchmarks.
//!
//! Exit codes: 0 success; 1 the operation failed (unsatisfiable request,
//! failed verification, I/O or cache errors); 2 usage errors, including
//! malformed specs and invalid options.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use splicekit::bench::{run_scenario, summarize, write_csv, BenchScenario, StackParams};
use splicekit::cache::{BuildCache, EntrySource};
use splicekit::concretize::{concretize, explain, explain_json, SolveError, SolveOptions, SolveResult};
use splicekit::fixtures;
use splicekit::install::{install, publish, verify, InstallAction, InstallTree};
use splicekit::repo::{load_repo, Repo};
use splicekit::{format_spec, parse_spec, AbstractSpec};

use config::{solve_options, FileConfig, Format, SolverFlags};

#[derive(Parser, Debug)]
#[command(name = "splicekit", version, about = "Splice-aware package resolution, caching and installation")]
struct Cli {
    /// TOML config file. Flags and environment variables override it.
    #[arg(long, global = true, env = "SPLICEKIT_CONFIG")]
    config: Option<PathBuf>,
    /// Package repository directory (holding packages/*.json).
    #[arg(long, global = true, env = "SPLICEKIT_REPO")]
    repo: Option<PathBuf>,
    /// Build cache directory. Repeat for more; the first receives pushes.
    #[arg(long, global = true, env = "SPLICEKIT_CACHE", value_delimiter = ':')]
    cache: Vec<PathBuf>,
    /// Install tree root.
    #[arg(long, global = true, env = "SPLICEKIT_TREE")]
    tree: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a spec and print its canonical form.
    Spec { spec: String },
    /// Resolve a spec against the repository and cache.
    Concretize {
        spec: String,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Concretize, then install every node, rewiring spliced ones.
    Install {
        spec: String,
        #[command(flatten)]
        solver: SolverFlags,
        /// Do not push built and rewired nodes to the cache.
        #[arg(long)]
        no_push: bool,
    },
    /// Inspect or fill the build cache.
    Cache {
        #[command(subcommand)]
        action: CacheCommand,
    },
    /// Run a benchmark scenario and write CSV.
    Bench {
        /// Scenario file (TOML, or JSON by extension). Without it the
        /// default MPI-stack scenario runs.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Per-solve rows; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mean and standard deviation per configuration.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Print the default scenario as TOML and exit.
        #[arg(long)]
        print_default: bool,
    },
    /// Write a built-in repository and cache to disk.
    Fixture {
        #[arg(value_parser = ["example", "example-partial", "fig2", "mpi-stack"])]
        name: String,
        /// Directory to create `repo/` and `cache/` in.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CacheCommand {
    /// List cached entries as name@version /hash.
    List,
    /// Concretize a spec, build what is missing, and push it.
    Push {
        spec: String,
        #[command(flatten)]
        solver: SolverFlags,
    },
}

/// A failed command: message and exit code.
struct Failure(String, u8);

fn usage(msg: impl Into<String>) -> Failure {
    Failure(msg.into(), 2)
}

fn failed(msg: impl Into<String>) -> Failure {
    Failure(msg.into(), 1)
}

struct Ctx {
    file: FileConfig,
    repo: Option<PathBuf>,
    caches: Vec<PathBuf>,
    tree: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx, Failure> {
        let file = match &cli.config {
            Some(p) => FileConfig::load(p).map_err(usage)?,
            None => FileConfig::default(),
        };
        Ok(Ctx {
            repo: cli.repo.clone().or_else(|| file.repo.clone()),
            caches: if cli.cache.is_empty() { file.cache.clone() } else { cli.cache.clone() },
            tree: cli.tree.clone().or_else(|| file.tree.clone()),
            format: cli.format.or(file.format).unwrap_or_default(),
            file,
        })
    }

    fn repo(&self) -> Result<Repo, Failure> {
        let path = self.repo.as_ref().ok_or_else(|| usage("no repository: pass --repo or set SPLICEKIT_REPO"))?;
        load_repo(path).map_err(|e| failed(e.to_string()))
    }

    /// Every configured cache merged in order, for reading.
    fn cache_view(&self) -> Result<BuildCache, Failure> {
        let mut view = BuildCache::in_memory();
        for p in &self.caches {
            let c = BuildCache::open(p).map_err(|e| failed(e.to_string()))?;
            view.merge_from(&c).map_err(|e| failed(e.to_string()))?;
        }
        Ok(view)
    }

    fn primary_cache(&self) -> Result<BuildCache, Failure> {
        let p = self.caches.first().ok_or_else(|| usage("no cache: pass --cache or set SPLICEKIT_CACHE"))?;
        BuildCache::open(p).map_err(|e| failed(e.to_string()))
    }

    fn tree(&self) -> InstallTree {
        InstallTree::new(self.tree.clone().unwrap_or_else(|| PathBuf::from("splicekit-tree")))
    }

    fn options(&self, flags: &SolverFlags) -> Result<SolveOptions, Failure> {
        solve_options(flags, &self.file.solver).map_err(usage)
    }

    fn emit(&self, text: impl FnOnce() -> String, value: impl FnOnce() -> serde_json::Value) {
        let out = match self.format {
            Format::Text => text(),
            Format::Json => serde_json::to_string_pretty(&value()).expect("values serialize") + "\n",
        };
        // A closed pipe (`| head`) is not an error worth reporting.
        let _ = std::io::stdout().lock().write_all(out.as_bytes());
    }
}

fn parse(text: &str) -> Result<AbstractSpec, Failure> {
    parse_spec(text).map_err(|e| usage(e.render(text)))
}

fn solve(ctx: &Ctx, spec: &str, flags: &SolverFlags) -> Result<(Repo, BuildCache, SolveResult), Failure> {
    let req = parse(spec)?;
    let repo = ctx.repo()?;
    let cache = ctx.cache_view()?;
    let opts = ctx.options(flags)?;
    match concretize(&req, &repo, &cache, &opts) {
        Ok(r) => Ok((repo, cache, r)),
        Err(e @ SolveError::InvalidOptions(_)) => Err(usage(e.to_string())),
        Err(e) => Err(failed(e.to_string())),
    }
}

fn cmd_spec(ctx: &Ctx, text: &str) -> Result<(), Failure> {
    let spec = parse(text)?;
    ctx.emit(|| format!("{}\n", format_spec(&spec)), || json!(spec));
    Ok(())
}

fn cmd_concretize(ctx: &Ctx, spec: &str, flags: &SolverFlags) -> Result<(), Failure> {
    let (_, _, r) = solve(ctx, spec, flags)?;
    ctx.emit(|| explain(&r), || explain_json(&r));
    Ok(())
}

/// Copy nodes the install produced from the merged view into the primary cache.
fn push_back(ctx: &Ctx, result: &SolveResult, view: &BuildCache, produced: &[(splicekit::DagHash, InstallAction)]) -> Result<usize, Failure> {
    let mut primary = ctx.primary_cache()?;
    let mut added = 0;
    for (h, action) in produced {
        let source = if *action == InstallAction::Rewired { EntrySource::Rewired } else { EntrySource::Built };
        let sub = result.spec.subspec(h).map_err(|e| failed(e.to_string()))?;
        let art = view.artifact(h).map_err(|e| failed(e.to_string()))?;
        let out = primary.push(&sub, art.as_deref(), source, Some(h)).map_err(|e| failed(e.to_string()))?;
        added += usize::from(!out.already_present);
    }
    Ok(added)
}

fn cmd_install(ctx: &Ctx, spec: &str, flags: &SolverFlags, no_push: bool) -> Result<(), Failure> {
    let (_, mut view, r) = solve(ctx, spec, flags)?;
    let tree = ctx.tree();
    let report = install(&r.spec, &tree, &mut view, true).map_err(|e| failed(e.to_string()))?;
    let produced: Vec<_> = report
        .nodes
        .iter()
        .filter(|n| matches!(n.action, InstallAction::Built | InstallAction::Rewired))
        .map(|n| (n.hash.clone(), n.action))
        .collect();
    let pushed = if no_push || ctx.caches.is_empty() { 0 } else { push_back(ctx, &r, &view, &produced)? };
    let check = verify(&r.spec, &tree);
    ctx.emit(
        || {
            let mut out = String::new();
            for n in &report.nodes {
                let node = &r.spec.nodes[&n.hash];
                let label = match n.action {
                    InstallAction::AlreadyInstalled => "installed",
                    InstallAction::Built => "built",
                    InstallAction::Relocated => "reused",
                    InstallAction::Rewired => "rewired",
                };
                out.push_str(&format!("{label:<10} {}@{} /{}  {}\n", node.name, node.version, n.hash.short(), n.prefix.display()));
            }
            out.push_str(&format!("pushed: {pushed}\n"));
            match check["failures"].as_array() {
                Some(f) if !f.is_empty() => {
                    for x in f {
                        let field = |k: &str| x[k].as_str().unwrap_or_default().to_string();
                        out.push_str(&format!("verify failed: {} /{}: {}\n", field("name"), &field("hash")[..8.min(field("hash").len())], field("problem")));
                    }
                }
                _ => out.push_str("verify: ok\n"),
            }
            out
        },
        || json!({"install": report, "pushed": pushed, "verify": check}),
    );
    if check["ok"] == true {
        Ok(())
    } else {
        Err(failed("verification failed"))
    }
}

fn cmd_cache_list(ctx: &Ctx) -> Result<(), Failure> {
    if ctx.caches.is_empty() {
        return Err(usage("no cache: pass --cache or set SPLICEKIT_CACHE"));
    }
    let view = ctx.cache_view()?;
    let mut rows: Vec<(String, String, String)> = view
        .entries()
        .map(|e| {
            let n = e.spec.root_node();
            (n.name.clone(), n.version.to_string(), e.root_hash.to_string())
        })
        .collect();
    rows.sort();
    ctx.emit(
        || rows.iter().map(|(n, v, h)| format!("{n}@{v} /{}\n", &h[..8])).collect(),
        || json!(rows.iter().map(|(n, v, h)| json!({"name": n, "version": v, "hash": h})).collect::<Vec<_>>()),
    );
    Ok(())
}

fn cmd_cache_push(ctx: &Ctx, spec: &str, flags: &SolverFlags) -> Result<(), Failure> {
    let mut primary = ctx.primary_cache()?;
    let (_, mut view, r) = solve(ctx, spec, flags)?;
    let tree = InstallTree::new(ctx.tree.clone().unwrap_or_else(|| PathBuf::from(fixtures::BUILD_TREE)));
    publish(&r.spec, &tree, &mut view).map_err(|e| failed(e.to_string()))?;
    let mut added = 0;
    for h in r.spec.topological_order().map_err(|e| failed(e.to_string()))? {
        let sub = r.spec.subspec(&h).map_err(|e| failed(e.to_string()))?;
        let art = view.artifact(&h).map_err(|e| failed(e.to_string()))?;
        let source = view.lookup(&h).map(|e| e.meta.source).unwrap_or(EntrySource::Built);
        let out = primary.push(&sub, art.as_deref(), source, Some(&h)).map_err(|e| failed(e.to_string()))?;
        added += usize::from(!out.already_present);
    }
    let root = r.spec.root_node();
    ctx.emit(
        || {
            if added == 0 {
                format!("{}@{} /{} already present\n", root.name, root.version, root.hash.short())
            } else {
                format!("pushed {}@{} /{} ({added} new entries)\n", root.name, root.version, root.hash.short())
            }
        },
        || json!({"root": root.hash, "added": added, "already_present": added == 0}),
    );
    Ok(())
}

fn cmd_bench(scenario: Option<&PathBuf>, out: Option<&PathBuf>, summary: Option<&PathBuf>, print_default: bool) -> Result<(), Failure> {
    if print_default {
        print!("{}", toml::to_string(&BenchScenario::default()).expect("scenarios serialize"));
        return Ok(());
    }
    let s: BenchScenario = match scenario {
        None => BenchScenario::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| failed(format!("cannot read {}: {e}", p.display())))?;
            if p.extension().is_some_and(|x| x == "json") {
                serde_json::from_str(&text).map_err(|e| usage(format!("bad scenario: {e}")))?
            } else {
                toml::from_str(&text).map_err(|e| usage(format!("bad scenario: {e}")))?
            }
        }
    };
    s.validate().map_err(usage)?;
    let rows = run_scenario(&s).map_err(failed)?;
    let sink = |path: Option<&PathBuf>| -> Result<Box<dyn Write>, Failure> {
        match path {
            Some(p) => Ok(Box::new(fs::File::create(p).map_err(|e| failed(format!("cannot write {}: {e}", p.display())))?)),
            None => Ok(Box::new(std::io::stdout().lock())),
        }
    };
    write_csv(&rows, sink(out)?).map_err(|e| failed(e.to_string()))?;
    if let Some(p) = summary {
        write_csv(&summarize(&rows), sink(Some(p))?).map_err(|e| failed(e.to_string()))?;
    }
    Ok(())
}

fn cmd_fixture(name: &str, out: &std::path::Path) -> Result<(), Failure> {
    let f = match name {
        "example" => fixtures::example(),
        "example-partial" => fixtures::example_partial(),
        "fig2" => fixtures::fig2(),
        _ => {
            let (repo, cache) = splicekit::bench::generate_mpi_stack(&StackParams {
                replicas: 3,
                cache_size: 0,
                ..StackParams::default()
            });
            fixtures::Fixture {
                name: "mpi-stack",
                repo,
                cache,
                nodes: BTreeMap::new(),
                requests: vec!["app-00 ^mpiabi-000", "app-01", "py-shroud"],
            }
        }
    };
    let repo_dir = out.join("repo");
    f.repo.write(&repo_dir).map_err(|e| failed(e.to_string()))?;
    let mut cache = BuildCache::open(&out.join("cache")).map_err(|e| failed(e.to_string()))?;
    cache.merge_from(&f.cache).map_err(|e| failed(e.to_string()))?;
    println!("repo:  {}", repo_dir.display());
    println!("cache: {} ({} entries)", out.join("cache").display(), cache.len());
    for r in &f.requests {
        println!("try:   splicekit --repo {} --cache {} concretize --splice '{r}'", repo_dir.display(), out.join("cache").display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Spec { spec } => cmd_spec(&ctx, spec),
        Command::Concretize { spec, solver } => cmd_concretize(&ctx, spec, solver),
        Command::Install { spec, solver, no_push } => cmd_install(&ctx, spec, solver, *no_push),
        Command::Cache { action: CacheCommand::List } => cmd_cache_list(&ctx),
        Command::Cache {
            action: CacheCommand::Push { spec, solver },
        } => cmd_cache_push(&ctx, spec, solver),
        Command::Bench {
            scenario,
            out,
            summary,
            print_default,
        } => cmd_bench(scenario.as_ref(), out.as_ref(), summary.as_ref(), *print_default),
        Command::Fixture { name, out } => cmd_fixture(name, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg, code)) => {
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
