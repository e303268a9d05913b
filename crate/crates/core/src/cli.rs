//! Command-line front end: `attack`, `evaluate`, `analyze` and `generate`.
//!
//! Every command resolves its flags (and an optional flat `key = value`
//! config file, overridden by flags) into a [`RunConfig`], echoes it to the
//! output directory and is a pure function of that config and its inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{
    read_perturbations, replay, run_attack, subgraph_attack, write_perturbations, AttackConfig, AttackMethod,
    AttackResult,
};
use crate::constraints::ConstraintConfig;
use crate::error::{Error, Result};
use crate::eval::{
    attack_anatomy, evaluate_protocol, weight_transfer, Anatomy, AnatomyShares, EvalConfig, EvalMethod, WeightTransfer,
};
use crate::graph::{
    generate_sbm, load_dataset, make_split, read_split, save_dataset, write_edges, write_split, AttributedGraph,
    DataSplit, SbmSpec,
};
use crate::seed;
use crate::surrogate::InnerTrainConfig;
use crate::victim::VictimConfig;

#[derive(Parser, Debug)]
#[command(name = "metapoison", version, about = "Meta-gradient graph structure poisoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Poison one graph and write the perturbations and the poisoned graph.
    Attack(RunArgs),
    /// Run the full protocol: methods x budgets x splits x victim trainings.
    Evaluate(RunArgs),
    /// Summarize a perturbation list against its clean graph.
    Analyze(RunArgs),
    /// Write a synthetic SBM graph as edges/features/labels files.
    Generate(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Attack(_) => "attack",
            Command::Evaluate(_) => "evaluate",
            Command::Analyze(_) => "analyze",
            Command::Generate(_) => "generate",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Attack(a) | Command::Evaluate(a) | Command::Analyze(a) | Command::Generate(a) => a,
        }
    }
}

#[derive(Args, Debug, Default, Clone)]
#[command(args_override_self = true)]
pub struct RunArgs {
    /// Flat `key = value` file mirroring the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, requires_all = ["dataset_features", "dataset_labels"], conflicts_with = "sbm")]
    pub dataset_edges: Option<PathBuf>,
    #[arg(long)]
    pub dataset_features: Option<PathBuf>,
    #[arg(long)]
    pub dataset_labels: Option<PathBuf>,
    /// `n,k,p_in,p_out,noise[,feature_dim]`; the default is the built-in fixture.
    #[arg(long)]
    pub sbm: Option<String>,
    /// Labeled/unlabeled split file (`id<TAB>L|U`); otherwise drawn from the seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated; `clean` is accepted by `evaluate`.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub budget_frac: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub inner_momentum: Option<f64>,
    #[arg(long)]
    pub surrogate_hidden: Option<usize>,
    #[arg(long)]
    pub surrogate_single_matrix: bool,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dmin: Option<usize>,
    #[arg(long)]
    pub no_degree_check: bool,
    #[arg(long)]
    pub no_singleton_check: bool,
    #[arg(long)]
    pub subgraph_fraction: Option<f64>,
    #[arg(long)]
    pub with_feature_flips: bool,
    #[arg(long)]
    pub feature_cost: Option<f64>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long)]
    pub trainings: Option<usize>,
    #[arg(long)]
    pub victim_hidden: Option<usize>,
    #[arg(long)]
    pub victim_epochs: Option<usize>,
    #[arg(long)]
    pub victim_lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Early stopping on the training loss (off by default).
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub bootstrap_resamples: Option<usize>,
    /// Perturbation CSV for `analyze`.
    #[arg(long)]
    pub perturbations: Option<PathBuf>,
    /// Also report the clean/poisoned weight-transfer table in `analyze`.
    #[arg(long)]
    pub weight_transfer: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Files { edges: PathBuf, features: PathBuf, labels: PathBuf },
    Sbm(String),
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: Option<PathBuf>,
    pub methods: Vec<EvalMethod>,
    pub budgets: Vec<f64>,
    pub attack: AttackConfig,
    pub victim: VictimConfig,
    pub subgraph_fraction: Option<f64>,
    pub labeled_fraction: f64,
    pub splits: usize,
    pub trainings: usize,
    pub bootstrap_resamples: usize,
    pub perturbations: Option<PathBuf>,
    pub weight_transfer: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_args(args: &RunArgs) -> Result<Self> {
        let dataset = match (&args.dataset_edges, &args.dataset_features, &args.dataset_labels, &args.sbm) {
            (Some(e), Some(f), Some(l), None) => {
                DatasetSource::Files { edges: e.clone(), features: f.clone(), labels: l.clone() }
            }
            (None, None, None, Some(s)) => {
                SbmSpec::parse(s)?;
                DatasetSource::Sbm(s.clone())
            }
            (None, None, None, None) => DatasetSource::Sbm(sbm_text(&SbmSpec::fixture())),
            _ => return Err(Error::Config("give all three --dataset-* files or --sbm".into())),
        };
        let methods = match &args.method {
            Some(ms) => ms.iter().map(|m| m.trim().parse()).collect::<Result<Vec<EvalMethod>>>()?,
            None => vec![EvalMethod::Attack(AttackMethod::MetaSelf)],
        };
        let budgets = args.budget_frac.clone().unwrap_or_else(|| vec![0.05]);
        let defaults = AttackConfig::default();
        let inner_defaults = InnerTrainConfig::default();
        let seed = args.seed.unwrap_or(0);
        let attack = AttackConfig {
            method: methods
                .iter()
                .find_map(|m| match m {
                    EvalMethod::Attack(a) => Some(*a),
                    EvalMethod::Clean => None,
                })
                .unwrap_or(defaults.method),
            budget_fraction: budgets[0],
            lambda: args.lambda.unwrap_or(defaults.lambda),
            inner: InnerTrainConfig {
                steps: args.inner_steps.unwrap_or(inner_defaults.steps),
                lr: args.inner_lr.unwrap_or(inner_defaults.lr),
                momentum: args.inner_momentum.unwrap_or(inner_defaults.momentum),
                hidden: args.surrogate_hidden.unwrap_or(inner_defaults.hidden),
                single_matrix: args.surrogate_single_matrix,
            },
            constraints: ConstraintConfig {
                singleton_check: !args.no_singleton_check,
                degree_check: !args.no_degree_check,
                tau: args.tau.unwrap_or(defaults.constraints.tau),
                d_min: args.dmin.unwrap_or(defaults.constraints.d_min),
            },
            seed: seed::derive(seed, seed::tag::ATTACK, 0),
            feature_flips: args.with_feature_flips,
            feature_cost: args.feature_cost.unwrap_or(defaults.feature_cost),
        };
        let vd = VictimConfig::default();
        let victim = VictimConfig {
            hidden: args.victim_hidden.unwrap_or(vd.hidden),
            dropout: args.dropout.unwrap_or(vd.dropout),
            weight_decay: args.weight_decay.unwrap_or(vd.weight_decay),
            lr: args.victim_lr.unwrap_or(vd.lr),
            epochs: args.victim_epochs.unwrap_or(vd.epochs),
            patience: args.patience,
        };
        let ed = EvalConfig::default();
        let config = Self {
            dataset,
            split: args.split.clone(),
            methods,
            budgets,
            attack,
            victim,
            subgraph_fraction: args.subgraph_fraction,
            labeled_fraction: args.labeled_fraction.unwrap_or(ed.labeled_fraction),
            splits: args.splits.unwrap_or(ed.splits),
            trainings: args.trainings.unwrap_or(ed.trainings),
            bootstrap_resamples: args.bootstrap_resamples.unwrap_or(ed.bootstrap_resamples),
            perturbations: args.perturbations.clone(),
            weight_transfer: args.weight_transfer,
            seed,
            out: args.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        };
        config.eval_config().validate()?;
        Ok(config)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            methods: self.methods.clone(),
            budgets: self.budgets.clone(),
            splits: self.splits,
            trainings: self.trainings,
            labeled_fraction: self.labeled_fraction,
            attack: self.attack.clone(),
            victim: self.victim.clone(),
            subgraph_fraction: self.subgraph_fraction,
            bootstrap_resamples: self.bootstrap_resamples,
            seed: self.seed,
        }
    }

    /// Flat `key = value` text that re-creates this config via `--config`.
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        match &self.dataset {
            DatasetSource::Files { edges, features, labels } => {
                kv("dataset-edges", edges.display().to_string());
                kv("dataset-features", features.display().to_string());
                kv("dataset-labels", labels.display().to_string());
            }
            DatasetSource::Sbm(s) => kv("sbm", s.clone()),
        }
        if let Some(s) = &self.split {
            kv("split", s.display().to_string());
        }
        kv("method", self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        kv("budget-frac", self.budgets.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        let a = &self.attack;
        kv("lambda", a.lambda.to_string());
        kv("inner-steps", a.inner.steps.to_string());
        kv("inner-lr", a.inner.lr.to_string());
        kv("inner-momentum", a.inner.momentum.to_string());
        kv("surrogate-hidden", a.inner.hidden.to_string());
        kv("surrogate-single-matrix", a.inner.single_matrix.to_string());
        kv("tau", a.constraints.tau.to_string());
        kv("dmin", a.constraints.d_min.to_string());
        kv("no-degree-check", (!a.constraints.degree_check).to_string());
        kv("no-singleton-check", (!a.constraints.singleton_check).to_string());
        if let Some(f) = self.subgraph_fraction {
            kv("subgraph-fraction", f.to_string());
        }
        kv("with-feature-flips", a.feature_flips.to_string());
        kv("feature-cost", a.feature_cost.to_string());
        kv("labeled-fraction", self.labeled_fraction.to_string());
        kv("splits", self.splits.to_string());
        kv("trainings", self.trainings.to_string());
        let v = &self.victim;
        kv("victim-hidden", v.hidden.to_string());
        kv("victim-epochs", v.epochs.to_string());
        kv("victim-lr", v.lr.to_string());
        kv("dropout", v.dropout.to_string());
        kv("weight-decay", v.weight_decay.to_string());
        if let Some(p) = v.patience {
            kv("patience", p.to_string());
        }
        kv("bootstrap-resamples", self.bootstrap_resamples.to_string());
        if let Some(p) = &self.perturbations {
            kv("perturbations", p.display().to_string());
        }
        kv("weight-transfer", self.weight_transfer.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        out
    }
}

fn sbm_text(s: &SbmSpec) -> String {
    format!("{},{},{},{},{},{}", s.n, s.blocks, s.p_in, s.p_out, s.noise, s.feature_dim)
}

const SWITCHES: &[&str] =
    &["surrogate-single-matrix", "no-degree-check", "no-singleton-check", "with-feature-flips", "weight-transfer"];

/// Turns a flat config file into flag tokens.
pub fn config_file_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            return Err(Error::Parse { path: path.display().to_string(), line: i + 1, msg: "nested config".into() });
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: format!("{key} expects true or false"),
                    })
                }
            }
        } else {
            out.push(format!("--{key}"));
            out.push(value.to_string());
        }
    }
    Ok(out)
}

/// Parses argv, splicing the config file's entries in before the explicit
/// flags so that the flags win.
pub fn parse_args<I, S>(argv: I) -> std::result::Result<Cli, anyhow::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.command.args().config.clone() else {
        return Ok(first);
    };
    let pos = argv.iter().position(|a| a == first.command.name()).unwrap_or(1);
    let mut spliced = argv[..=pos].to_vec();
    spliced.extend(config_file_args(&path)?);
    spliced.extend(argv[pos + 1..].iter().cloned());
    Ok(Cli::try_parse_from(spliced)?)
}

pub fn load_graph(config: &RunConfig) -> Result<AttributedGraph> {
    match &config.dataset {
        DatasetSource::Files { edges, features, labels } => load_dataset(edges, features, labels),
        DatasetSource::Sbm(s) => generate_sbm(&SbmSpec::parse(s)?, seed::derive(config.seed, seed::tag::SBM, 0)),
    }
}

fn load_split(config: &RunConfig, graph: &AttributedGraph) -> Result<DataSplit> {
    match &config.split {
        Some(p) => read_split(graph, p),
        None => make_split(graph, config.labeled_fraction, config.eval_config().split_seed(0)),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(config: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write(&config.out.join("config.txt"), &format!("# {command}\n{}", config.to_flat()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct AttackSummary<'a> {
    method: AttackMethod,
    budget: usize,
    perturbations: usize,
    terminated_early: bool,
    clean_edges: usize,
    poisoned_edges: usize,
    config: &'a AttackConfig,
}

pub fn cmd_attack(config: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<AttackResult> {
    let [EvalMethod::Attack(method)] = config.methods[..] else {
        return Err(Error::Config("attack takes exactly one attack method".into()));
    };
    if config.budgets.len() != 1 {
        return Err(Error::Config("attack takes exactly one budget fraction".into()));
    }
    let graph = load_graph(config)?;
    let split = load_split(config, &graph)?;
    prepare_out(config, "attack")?;
    let attack = AttackConfig { method, ..config.attack.clone() };
    log(&format!(
        "attack {method}: {} nodes, {} edges, budget {}",
        graph.num_nodes(),
        graph.edge_count(),
        attack.budget(graph.edge_count())
    ));
    let result = match config.subgraph_fraction {
        Some(f) => subgraph_attack(&graph, &split, &attack, f)?,
        None => run_attack(&graph, &split, &attack)?,
    };
    if result.terminated_early {
        log(&format!("stopped early after {} of {} edits", result.perturbations.len(), result.budget));
    }
    let out = &config.out;
    write_perturbations(&result, &graph, &out.join("perturbations.csv"))?;
    write_edges(&result.poisoned, &out.join("poisoned_edges.txt"))?;
    write_split(&graph, &split, &out.join("split.txt"))?;
    let mut steps = String::from("step,kind,score,lambda_stat,attacker_loss,train_loss\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
    for s in &result.steps {
        writeln!(
            steps,
            "{},{},{:e},{},{},{}",
            s.step,
            s.kind.as_str(),
            s.score,
            opt(s.lambda_stat),
            opt(s.attacker_loss),
            opt(s.train_loss)
        )
        .unwrap();
    }
    write(&out.join("steps.csv"), &steps)?;
    let summary = AttackSummary {
        method,
        budget: result.budget,
        perturbations: result.perturbations.len(),
        terminated_early: result.terminated_early,
        clean_edges: graph.edge_count(),
        poisoned_edges: result.poisoned.edge_count(),
        config: &attack,
    };
    write(&out.join("attack.json"), &to_json(&summary))?;
    Ok(result)
}

pub fn cmd_evaluate(config: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<String> {
    let graph = load_graph(config)?;
    prepare_out(config, "evaluate")?;
    let report = evaluate_protocol(&graph, &config.eval_config(), log)?;
    write(&config.out.join("report.json"), &to_json(&report))?;
    write(&config.out.join("curves.csv"), &report.curves_csv())?;
    let table = report.summary_table();
    write(&config.out.join("summary.txt"), &table)?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeReport {
    pub anatomy: Anatomy,
    pub shares: AnatomyShares,
    pub plurality: Option<&'static str>,
    pub weight_transfer: Option<WeightTransfer>,
}

pub fn cmd_analyze(config: &RunConfig) -> Result<AnalyzeReport> {
    let path = config.perturbations.as_ref().ok_or_else(|| Error::Config("analyze needs --perturbations".into()))?;
    let graph = load_graph(config)?;
    let perturbations = read_perturbations(&graph, path)?;
    let poisoned = replay(&graph, &perturbations)?;
    let anatomy = attack_anatomy(&graph, &perturbations)?;
    let weight_transfer = if config.weight_transfer {
        let split = load_split(config, &graph)?;
        Some(weight_transfer(&graph, &poisoned, &split, &config.victim, config.trainings, config.seed)?)
    } else {
        None
    };
    let report = AnalyzeReport {
        shares: anatomy.shares(),
        plurality: (anatomy.total > 0).then(|| anatomy.plurality()),
        anatomy,
        weight_transfer,
    };
    prepare_out(config, "analyze")?;
    write(&config.out.join("anatomy.json"), &to_json(&report))?;
    Ok(report)
}

pub fn cmd_generate(config: &RunConfig) -> Result<AttributedGraph> {
    if !matches!(config.dataset, DatasetSource::Sbm(_)) {
        return Err(Error::Config("generate needs --sbm".into()));
    }
    let graph = load_graph(config)?;
    prepare_out(config, "generate")?;
    let out = &config.out;
    save_dataset(&graph, &out.join("edges.txt"), &out.join("features.txt"), &out.join("labels.txt"))?;
    let split = load_split(config, &graph)?;
    write_split(&graph, &split, &out.join("split.txt"))?;
    Ok(graph)
}

/// Dispatches a parsed command; returns what should go to stdout.
pub fn run(cli: &Cli, log: &mut dyn FnMut(&str)) -> Result<String> {
    let config = RunConfig::from_args(cli.command.args())?;
    match &cli.command {
        Command::Attack(_) => {
            let r = cmd_attack(&config, log)?;
            Ok(format!(
                "{} perturbations ({} budget) written to {}\n",
                r.perturbations.len(),
                r.budget,
                config.out.display()
            ))
        }
        Command::Evaluate(_) => cmd_evaluate(&config, log),
        Command::Analyze(_) => cmd_analyze(&config).map(|r| to_json(&r)),
        Command::Generate(_) => {
            let g = cmd_generate(&config)?;
            Ok(format!("{} nodes, {} edges written to {}\n", g.num_nodes(), g.edge_count(), config.out.display()))
        }
    }
}

/// One-line JSON error for stderr.
pub fn error_json(err: &anyhow::Error) -> String {
    let (kind, step) = match err.downcast_ref::<Error>() {
        Some(e) => (e.kind(), e.step()),
        None => ("usage", None),
    };
    serde_json::json!({ "error": kind, "step": step, "message": err.to_string() }).to_string()
}
