use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lnn_ilp::countries::{self, CountriesConfig, CountriesSplit, Task, World};
use lnn_ilp::gridworld::{self, Grid, GridConfig, GridRules};
use lnn_ilp::grounder::{NodeRule, Template, TemplateCheckpoint, TemplateModel, TemplateSpec};
use lnn_ilp::kbc::{self, GraphIndex, KnowledgeGraph, PathModel, PathTrainConfig};
use lnn_ilp::polytope::{build_constraints, ConnectiveKind};
use lnn_ilp::train::{FitReport, TrainConfig};
use lnn_ilp::{AlphaConfig, LeafCombiner, Registry};

/// Environment variable naming the root that relative dataset paths are
/// resolved against when they do not exist as given.
const DATA_ROOT_ENV: &str = "LNN_ILP_DATA";

#[derive(Debug, Parser)]
#[command(name = "lnn-ilp", version, about = "Rule learning with logical neural network operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss trace, rules and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Print the learned rules of a checkpoint.
    ExportRules(ExportArgs),
    /// Print the constraint system and generators of one connective.
    Polytope(PolytopeArgs),
    /// Build the S1, S2 and S3 splits from a country table.
    MakeCountries(MakeCountriesArgs),
    /// Generate training and test grids.
    MakeGrids(MakeGridsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    /// Grounded templates (Countries, gridworld).
    Template,
    /// Path-mixture scorer (knowledge base completion).
    Paths,
}

/// Options shared by `train` and readable from a TOML config file. Flags
/// override the file, the file overrides module defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunOptions {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Template JSON for template mode.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Maximum rule length in paths mode.
    #[arg(long)]
    rule_len: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Leaf combiner: lnn-pred or attention.
    #[arg(long)]
    combiner: Option<String>,
    /// Connective: lnn, product or lukasiewicz.
    #[arg(long)]
    connective: Option<String>,
    /// Negative sampler in paths mode.
    #[arg(long)]
    sampler: Option<String>,
    /// Countries task; inferred from the dataset directory name otherwise.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunOptions {
    fn or(self, o: RunOptions) -> RunOptions {
        RunOptions {
            dataset: self.dataset.or(o.dataset),
            mode: self.mode.or(o.mode),
            template: self.template.or(o.template),
            alpha: self.alpha.or(o.alpha),
            rule_len: self.rule_len.or(o.rule_len),
            step_size: self.step_size.or(o.step_size),
            margin: self.margin.or(o.margin),
            batch_size: self.batch_size.or(o.batch_size),
            epochs: self.epochs.or(o.epochs),
            seed: self.seed.or(o.seed),
            combiner: self.combiner.or(o.combiner),
            connective: self.connective.or(o.connective),
            sampler: self.sampler.or(o.sampler),
            task: self.task.or(o.task),
            out: self.out.or(o.out),
        }
    }

    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            step_size: self.step_size.unwrap_or(base.step_size),
            margin: self.margin.unwrap_or(base.margin),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
            alpha: self.alpha.unwrap_or(base.alpha),
            patience: base.patience,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with any of the run options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunOptions,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Generate this many gridworld test grids instead of reading test.json.
    #[arg(long)]
    test_grids: Option<usize>,
    #[arg(long, default_value_t = 12)]
    obstacles: usize,
    #[arg(long, default_value_t = 5)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path types listed per relation in paths mode.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args)]
struct PolytopeArgs {
    #[arg(long)]
    arity: usize,
    #[arg(long)]
    alpha: f64,
    /// H→V converter name.
    #[arg(long, default_value = "active-set")]
    enumerator: String,
}

#[derive(Debug, Args)]
struct MakeCountriesArgs {
    /// Country table (code, region, subregion, borders).
    #[arg(long)]
    world: PathBuf,
    /// Parent directory for countries_s1, countries_s2 and countries_s3.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MakeGridsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 5)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    train_obstacles: usize,
    #[arg(long, default_value_t = 12)]
    test_obstacles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Every trained model the CLI can save, tagged by kind.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Checkpoint {
    Paths {
        relations: Vec<String>,
        entities: usize,
        config: PathTrainConfig,
        model: PathModel,
    },
    Countries {
        task: String,
        model: TemplateCheckpoint,
    },
    Gridworld {
        models: Vec<TemplateCheckpoint>,
    },
}

#[derive(Debug)]
struct MissingDataset(PathBuf);

impl std::fmt::Display for MissingDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "dataset not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingDataset {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportRules(a) => export_rules(a),
        Command::Polytope(a) => polytope(a),
        Command::MakeCountries(a) => make_countries(a),
        Command::MakeGrids(a) => make_grids(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<MissingDataset>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Resolves `path` as given, then under the data root.
fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            let joined = PathBuf::from(root).join(path);
            if joined.is_dir() {
                return Ok(joined);
            }
        }
    }
    Err(MissingDataset(path.to_path_buf()).into())
}

enum Dataset {
    Kbc,
    Countries,
    Grid,
}

fn dataset_kind(dir: &Path, mode: Option<Mode>) -> Dataset {
    if dir.join("train.json").is_file() {
        return Dataset::Grid;
    }
    let named_countries = dir
        .file_name()
        .is_some_and(|n| n.to_string_lossy().to_ascii_lowercase().contains("countries"));
    match mode {
        Some(Mode::Template) => Dataset::Countries,
        Some(Mode::Paths) => Dataset::Kbc,
        None if named_countries => Dataset::Countries,
        None => Dataset::Kbc,
    }
}

fn task_for(dir: &Path, explicit: Option<&str>) -> Result<Task> {
    if let Some(t) = explicit {
        return t.parse().map_err(|e: String| anyhow!(e));
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().to_ascii_uppercase()).unwrap_or_default();
    Task::ALL
        .into_iter()
        .find(|t| name.ends_with(t.name()))
        .ok_or_else(|| anyhow!("cannot infer the Countries task from {}; pass --task", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_trace(path: &Path, report: &FitReport) -> Result<()> {
    report.save_csv(path)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunOptions::default(),
    };
    let opts = args.run.or(file);
    let dataset = opts.dataset.clone().ok_or_else(|| anyhow!("--dataset is required"))?;
    let dataset = resolve_dataset(&dataset)?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let registry = Registry::with_builtins();
    match dataset_kind(&dataset, opts.mode) {
        Dataset::Kbc => train_paths(&dataset, &out, &opts, &registry),
        Dataset::Countries => train_countries(&dataset, &out, &opts, &registry),
        Dataset::Grid => train_grid(&dataset, &out, &opts, &registry),
    }
}

fn load_kbc(dir: &Path) -> Result<KnowledgeGraph> {
    let kg = KnowledgeGraph::load_dir(dir).map_err(|e| match e {
        kbc::KbcError::MissingDataset(p) => anyhow::Error::new(MissingDataset(p)),
        e => e.into(),
    })?;
    Ok(kg.augment_inverses()?)
}

fn train_paths(dir: &Path, out: &Path, opts: &RunOptions, registry: &Registry) -> Result<()> {
    let kg = load_kbc(dir)?;
    let base = PathTrainConfig::default();
    let cfg = PathTrainConfig {
        train: opts.apply(&base.train),
        max_len: opts.rule_len.unwrap_or(base.max_len),
        ..base
    };
    let sampler = registry.sampler(opts.sampler.as_deref().unwrap_or("uniform"))?;
    let (model, report) = kbc::train_paths(&kg, &cfg, sampler)?;
    let index = GraphIndex::from_train(&kg);
    let metrics = kbc::evaluate_kbc(&model, &kg, &index, &kg.test, &dataset_name(dir));
    write_trace(&out.join("trace.csv"), &report)?;
    write_json(&out.join("report.json"), &metrics)?;
    let ckpt = Checkpoint::Paths {
        relations: (0..kg.num_relations() as u32).map(|r| kg.relation_name(r).to_string()).collect(),
        entities: kg.num_entities(),
        config: cfg,
        model,
    };
    fs::write(out.join("rules.txt"), render(&ckpt, 5)?)?;
    write_json(&out.join("checkpoint.json"), &ckpt)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_countries(dir: &Path) -> Result<CountriesSplit> {
    CountriesSplit::load_dir(dir).map_err(|e| match e {
        countries::CountriesError::MissingDataset(p) => MissingDataset(p.into()).into(),
        e => e.into(),
    })
}

fn template_for(opts: &RunOptions, default: TemplateSpec) -> Result<Template> {
    Ok(match &opts.template {
        Some(p) => Template::load(p)?,
        None => Template::from_spec(default)?,
    })
}

fn train_countries(dir: &Path, out: &Path, opts: &RunOptions, registry: &Registry) -> Result<()> {
    let split = load_countries(dir)?;
    let task = task_for(dir, opts.task.as_deref())?;
    let template = template_for(opts, task.template())?;
    let base = CountriesConfig::default();
    let cfg = CountriesConfig {
        train: opts.apply(&base.train),
        ..base
    };
    let combiner = registry.combiner(opts.combiner.as_deref().unwrap_or("lnn-pred"))?;
    let connective = registry.connective(opts.connective.as_deref().unwrap_or("lnn"))?;
    let run = countries::train_countries(&split, task, template, combiner, connective, &cfg)?;
    let report = serde_json::json!({
        "dataset": dataset_name(dir),
        "task": task.name(),
        "AUC-PR": run.test_auc,
        "valid_AUC-PR": run.valid_auc,
    });
    write_trace(&out.join("trace.csv"), &run.report)?;
    write_json(&out.join("report.json"), &report)?;
    let ckpt = Checkpoint::Countries {
        task: task.name().into(),
        model: run.model.checkpoint(),
    };
    fs::write(out.join("rules.txt"), render(&ckpt, 0)?)?;
    write_json(&out.join("checkpoint.json"), &ckpt)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn grid_combiner(registry: &Registry, name: &str) -> Result<Arc<dyn LeafCombiner>> {
    // Gridworld leaves see four true literals per cell; the registry's
    // default lnn-pred init would start them saturated.
    Ok(if name == "lnn-pred" {
        gridworld::grid_combiner()
    } else {
        registry.combiner(name)?
    })
}

fn train_grid(dir: &Path, out: &Path, opts: &RunOptions, registry: &Registry) -> Result<()> {
    let train: Vec<Grid> = read_json(&dir.join("train.json"))?;
    let test: Vec<Grid> = read_json(&dir.join("test.json"))?;
    let base = GridConfig::default();
    let cfg = GridConfig {
        train: opts.apply(&base.train),
        ..base
    };
    let combiner = grid_combiner(registry, opts.combiner.as_deref().unwrap_or("lnn-pred"))?;
    let connective = registry.connective(opts.connective.as_deref().unwrap_or("lnn"))?;
    let (rules, reports) = gridworld::train_rules(&train, combiner, connective, &cfg)?;
    for (d, r) in gridworld::DIRECTIONS.iter().zip(&reports) {
        write_trace(&out.join(format!("trace_{}.csv", d.action())), r)?;
    }
    let report = serde_json::json!({
        "dataset": dataset_name(dir),
        "train_grids": train.len(),
        "test_grids": test.len(),
        "mean_reward": gridworld::evaluate_policy(&rules, &test)?,
    });
    write_json(&out.join("report.json"), &report)?;
    let ckpt = Checkpoint::Gridworld {
        models: rules.models.iter().map(TemplateModel::checkpoint).collect(),
    };
    fs::write(out.join("rules.txt"), render(&ckpt, 0)?)?;
    write_json(&out.join("checkpoint.json"), &ckpt)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt: Checkpoint = read_json(&args.checkpoint)?;
    let registry = Registry::with_builtins();
    let dataset = args.dataset.as_deref().map(resolve_dataset).transpose()?;
    let need = || dataset.clone().ok_or_else(|| anyhow!("--dataset is required for this checkpoint"));
    let report = match &ckpt {
        Checkpoint::Paths {
            relations,
            entities,
            model,
            ..
        } => {
            let dir = need()?;
            let kg = load_kbc(&dir)?;
            let names: Vec<&str> = (0..kg.num_relations() as u32).map(|r| kg.relation_name(r)).collect();
            if names != relations.iter().map(String::as_str).collect::<Vec<_>>() || kg.num_entities() != *entities {
                bail!(
                    "checkpoint was trained on {} relations and {} entities; {} has {} relations and {} entities",
                    relations.len(),
                    entities,
                    dir.display(),
                    names.len(),
                    kg.num_entities()
                );
            }
            let index = GraphIndex::from_train(&kg);
            serde_json::to_value(kbc::evaluate_kbc(model, &kg, &index, &kg.test, &dataset_name(&dir)))?
        }
        Checkpoint::Countries { task, model } => {
            let dir = need()?;
            let split = load_countries(&dir)?;
            let model = TemplateModel::restore(model.clone(), &registry)?;
            let net = model.ground(&split.knowledge_base()?)?;
            serde_json::json!({
                "dataset": dataset_name(&dir),
                "task": task,
                "AUC-PR": countries::evaluate_auc(&model, &net, &split, &split.test)?,
                "valid_AUC-PR": countries::evaluate_auc(&model, &net, &split, &split.valid)?,
            })
        }
        Checkpoint::Gridworld { models } => {
            let rules = GridRules {
                models: models
                    .iter()
                    .map(|m| TemplateModel::restore(m.clone(), &registry))
                    .collect::<Result<_, _>>()?,
            };
            if rules.models.len() != 4 {
                bail!("gridworld checkpoint holds {} rules, expected 4", rules.models.len());
            }
            let grids: Vec<Grid> = match (args.test_grids, &dataset) {
                (Some(n), _) => gridworld::generate_grids(n, args.size, args.obstacles, args.seed)?,
                (None, Some(dir)) => read_json(&dir.join("test.json"))?,
                (None, None) => bail!("pass --dataset or --test-grids"),
            };
            serde_json::json!({
                "test_grids": grids.len(),
                "mean_reward": gridworld::evaluate_policy(&rules, &grids)?,
            })
        }
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn export_rules(args: ExportArgs) -> Result<()> {
    let ckpt: Checkpoint = read_json(&args.checkpoint)?;
    print!("{}", render(&ckpt, args.top)?);
    Ok(())
}

/// `NotFoo` predicates print as `¬Foo`.
fn display_predicate(name: &str) -> String {
    match name.strip_prefix("Not") {
        Some(rest) if rest.starts_with(char::is_uppercase) => format!("¬{rest}"),
        _ => name.to_string(),
    }
}

fn atom(name: &str, vars: &[String]) -> String {
    format!("{name}({})", vars.join(", "))
}

fn render_template(rules: &[NodeRule], out: &mut String) {
    let vars = |n: &str| rules.iter().find(|r| r.node == n).map(|r| r.vars.clone());
    for r in rules.iter().rev() {
        let beta = r.op.beta.map(|b| format!("β={b:.3}")).unwrap_or_default();
        let alpha = r.op.alpha.map(|a| format!("α={a}, ")).unwrap_or_default();
        let mut terms: Vec<(f64, String)> = r
            .op
            .weights
            .iter()
            .zip(&r.op.operand_names)
            .map(|(w, n)| {
                let label = match vars(n) {
                    Some(v) => atom(n, &v),
                    None => display_predicate(n),
                };
                (*w, label)
            })
            .collect();
        let internal = vars(r.op.operand_names.first().map_or("", String::as_str)).is_some();
        if !internal {
            terms.sort_by(|a, b| b.0.total_cmp(&a.0));
        }
        let body: Vec<String> = terms.iter().map(|(w, n)| format!("{w:.3}·{n}")).collect();
        let sep = if internal { " ∧ " } else { ", " };
        out.push_str(&format!(
            "{} ← {}[{alpha}{beta}] {}\n",
            atom(&r.node, &r.vars),
            r.op.kind,
            body.join(sep)
        ));
    }
}

fn render(ckpt: &Checkpoint, top: usize) -> Result<String> {
    let mut out = String::new();
    let registry = Registry::with_builtins();
    match ckpt {
        Checkpoint::Paths { relations, model, .. } => {
            for (r, name) in relations.iter().enumerate() {
                let rule = model.rule(r as u32);
                let mut paths: Vec<_> = rule
                    .active_keys()
                    .map(|k| (rule.weight(k), model.codec().decode(k)))
                    .filter(|(w, _)| *w > 0.0)
                    .collect();
                if paths.is_empty() {
                    continue;
                }
                paths.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                out.push_str(&format!("{name}(X, Y) ← [β={:.3}]\n", rule.beta()));
                for (w, p) in paths.into_iter().take(top) {
                    let chain: Vec<&str> = p.iter().map(|&q| relations[q as usize].as_str()).collect();
                    out.push_str(&format!("  {w:.3}  {}\n", chain.join(" ∘ ")));
                }
            }
        }
        Checkpoint::Countries { model, .. } => {
            let m = TemplateModel::restore(model.clone(), &registry)?;
            render_template(&m.rules()?, &mut out);
        }
        Checkpoint::Gridworld { models } => {
            for m in models {
                let m = TemplateModel::restore(m.clone(), &registry)?;
                render_template(&m.rules()?, &mut out);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn polytope(args: PolytopeArgs) -> Result<()> {
    let registry = Registry::with_builtins();
    let alpha = AlphaConfig::new(args.alpha)?;
    let poly = build_constraints(args.arity, alpha, ConnectiveKind::And)?;
    let vrep = registry.enumerator(&args.enumerator)?.enumerate(&poly)?;
    let report = serde_json::json!({
        "arity": args.arity,
        "alpha": args.alpha,
        "enumerator": args.enumerator,
        "constraints": poly,
        "generators": vrep,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn make_countries(args: MakeCountriesArgs) -> Result<()> {
    if !args.world.is_file() {
        return Err(MissingDataset(args.world).into());
    }
    let world = World::load(&args.world)?;
    for task in Task::ALL {
        let dir = args.out.join(format!("countries_{}", task.name().to_ascii_lowercase()));
        countries::make_split(&world, task, args.seed)?.save_dir(&dir)?;
        write_json(&dir.join("template.json"), &task.template())?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn make_grids(args: MakeGridsArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let train = gridworld::generate_grids(args.train, args.size, args.train_obstacles, args.seed)?;
    let test = gridworld::generate_grids(args.test, args.size, args.test_obstacles, args.seed.wrapping_add(1))?;
    write_json(&args.out.join("train.json"), &train)?;
    write_json(&args.out.join("test.json"), &test)?;
    println!("{}", args.out.display());
    Ok(())
}
