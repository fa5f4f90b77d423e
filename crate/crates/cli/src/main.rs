use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use moect::checkpoint::{file_hash, write_atomic};
use moect::corpus::{Corpus, LanguageSuite};
use moect::eval::{evaluate, forgetting_svg, run_ablation, AblationGrid, AblationResult};
use moect::par::{with_threads, Exec};
use moect::train::{apply_freeze, continual_train, make_mix, pretrain, FreezeStrategy, MixSpec, TrainConfig};
use moect::{Error, FusionMode, Model, ModelConfig, ParamCensus};

const SEED_ENV: &str = "MOCT_SEED";

#[derive(Parser)]
#[command(name = "moect", version, about = "Mixture-of-experts continual training on synthetic languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense base model on the original languages.
    Pretrain(PretrainArgs),
    /// Turn a dense checkpoint into a mixture-of-experts checkpoint.
    Upcycle(UpcycleArgs),
    /// Continually train a checkpoint under a freeze strategy and data mix.
    Ct(CtArgs),
    /// Held-out perplexity of a checkpoint on every language.
    Eval(EvalArgs),
    /// Run a grid of continual-training jobs from one dense base.
    Ablate(AblateArgs),
    /// Print a checkpoint's header and parameter census.
    Inspect(InspectArgs),
    /// Render forgetting and gain along one axis of an ablation result.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
}

impl TrainOverrides {
    /// Flags win over `MOCT_SEED`, which wins over the file.
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), Error> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        Ok(())
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct UpcycleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    experts: usize,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    fusion_weight: f64,
    #[arg(long, value_parser = parse_fusion_mode, default_value = "fixed")]
    fusion_mode: FusionMode,
    /// Seed for the router noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    router_std: Option<f64>,
}

#[derive(Args)]
struct CtArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Defaults to embedding_experts for MoE checkpoints and all for dense.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<FreezeStrategy>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dense base checkpoint shared by every grid point.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Concurrent jobs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Print the census as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// `results.json` written by `ablate`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "data_ratio")]
    axis: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<FreezeStrategy, String> {
    s.parse().map_err(|_| {
        let valid: Vec<&str> = FreezeStrategy::ALL.iter().map(|v| v.label()).collect();
        format!("unknown strategy {s:?}; valid: {}", valid.join(", "))
    })
}

fn parse_fusion_mode(s: &str) -> Result<FusionMode, String> {
    match s {
        "fixed" => Ok(FusionMode::Fixed),
        "learnable" => Ok(FusionMode::Learnable),
        _ => Err(format!("unknown fusion mode {s:?}; valid: fixed, learnable")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainConfig {
    #[serde(default)]
    out_dir: Option<PathBuf>,
    /// Language suite file, relative to the config; the built-in suite otherwise.
    #[serde(default)]
    suite: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixConfig {
    /// Token budget split evenly over the original languages.
    #[serde(default)]
    original: u64,
    /// Token budget split evenly over the new languages.
    #[serde(default)]
    new: u64,
    /// Explicit per-language budgets; replaces `original` and `new`.
    #[serde(default)]
    budgets: Option<BTreeMap<String, u64>>,
}

impl MixConfig {
    fn build(&self, corpus: &Corpus) -> Result<MixSpec, Error> {
        let mix = match &self.budgets {
            Some(b) => make_mix(b.clone())?,
            None => MixSpec::by_role(corpus, self.original, self.new)?,
        };
        mix.check(corpus)?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CtConfig {
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    suite: Option<PathBuf>,
    mix: MixConfig,
    train: TrainConfig,
}

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    config: serde_json::Value,
    seed: Option<u64>,
    input_hash: Option<String>,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_suite(path: Option<&Path>, base: Option<&Path>) -> Result<LanguageSuite, Error> {
    match path {
        None => Ok(LanguageSuite::default()),
        Some(p) => {
            let full = match base.and_then(Path::parent) {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.to_path_buf(),
            };
            read_toml::<LanguageSuite>(&full).and_then(|s| s.validate().map(|_| s))
        }
    }
}

fn out_dir(flag: &Option<PathBuf>, file: &Option<PathBuf>) -> Result<PathBuf, Error> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn census_table(model: &Model) -> String {
    let c: ParamCensus = model.census();
    let cfg = &model.config;
    let kind = if model.is_moe() { "moe" } else { "dense" };
    let rows = [
        ("kind", kind.to_string()),
        ("layers", cfg.n_layers.to_string()),
        ("hidden", cfg.hidden.to_string()),
        ("heads", cfg.n_heads.to_string()),
        ("experts", cfg.n_experts.to_string()),
        ("top_k", if model.is_moe() { cfg.top_k.to_string() } else { "-".into() }),
        ("params", c.total.to_string()),
        ("act_params", c.activated.to_string()),
        ("trainable", c.trainable.to_string()),
        ("frozen", c.frozen.to_string()),
        ("tensors", c.tensors.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k:<12}{v:>12}\n")).collect()
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<(), Error> {
    let mut cfg: PretrainConfig = read_toml(&a.config)?;
    a.overrides.apply(&mut cfg.train)?;
    let dir = out_dir(&a.out, &cfg.out_dir)?;
    let corpus = load_suite(cfg.suite.as_deref(), Some(&a.config))?.build()?;
    let mut model = Model::init_dense(&cfg.model, cfg.train.seed)?;
    let mix = MixSpec::by_role(&corpus, 1, 0)?;
    let log = pretrain(&mut model, &corpus, &mix, &cfg.train)?;
    let ckpt = dir.join("model.moct");
    let log_path = dir.join("log.csv");
    model.save(&ckpt)?;
    write_atomic(&log_path, log.to_csv()?.as_bytes())?;
    if let Some(e) = log.last_eval() {
        for (id, ppl) in &e.per_language_ppl {
            println!("{id:<10} ppl {ppl:>10.4}  floor {:>8.4}", e.floors[id]);
        }
    }
    RunManifest {
        command: "pretrain".into(),
        config_path: Some(a.config.clone()),
        config: json(&cfg),
        seed: Some(cfg.train.seed),
        input_hash: None,
        outputs: vec![ckpt, log_path],
    }
    .write(&dir.join("manifest.json"))
}

fn cmd_upcycle(a: &UpcycleArgs) -> Result<(), Error> {
    let dense = Model::load(&a.input)?;
    if dense.is_moe() {
        return Err(Error::Contract(format!("{} is already a mixture of experts", a.input.display())));
    }
    let mut model = match a.router_std {
        Some(std) => {
            let mut base = dense.clone();
            base.config.router_init_std = std;
            base.upcycle(a.experts, a.top_k, a.fusion_weight, a.seed)?
        }
        None => dense.upcycle(a.experts, a.top_k, a.fusion_weight, a.seed)?,
    };
    model.config.fusion_mode = a.fusion_mode;
    model.save(&a.out)?;
    print!("{}", census_table(&model));
    let manifest = a.out.with_extension("manifest.json");
    RunManifest {
        command: "upcycle".into(),
        config_path: None,
        config: json(&model.config),
        seed: Some(a.seed),
        input_hash: Some(file_hash(&a.input)?),
        outputs: vec![a.out.clone()],
    }
    .write(&manifest)
}

fn cmd_ct(a: &CtArgs) -> Result<(), Error> {
    let mut cfg: CtConfig = read_toml(&a.config)?;
    a.overrides.apply(&mut cfg.train)?;
    let dir = out_dir(&a.out, &cfg.out_dir)?;
    let corpus = load_suite(cfg.suite.as_deref(), Some(&a.config))?.build()?;
    let mix = cfg.mix.build(&corpus)?;
    let mut model = Model::load(&a.input)?;
    let strategy = a.strategy.unwrap_or(if model.is_moe() {
        FreezeStrategy::EmbeddingAndExperts
    } else {
        FreezeStrategy::All
    });
    let is_moe = model.is_moe();
    apply_freeze(&mut model.params, strategy, is_moe)?;
    let log = continual_train(&mut model, &corpus, &mix, &cfg.train)?;
    let ckpt = dir.join("model.moct");
    let log_path = dir.join("log.csv");
    let reports = dir.join("reports.json");
    model.save(&ckpt)?;
    write_atomic(&log_path, log.to_csv()?.as_bytes())?;
    let ends = serde_json::json!({ "before": log.first_eval(), "after": log.last_eval(), "audit": log.audit });
    write_atomic(&reports, serde_json::to_string_pretty(&ends)?.as_bytes())?;
    println!(
        "frozen-hash audit: {} tensors, {}",
        log.audit.before.len(),
        if log.audit.intact() { "unchanged" } else { "CHANGED" }
    );
    if let (Some(b), Some(e)) = (log.first_eval(), log.last_eval()) {
        for (id, ppl) in &e.per_language_ppl {
            println!("{id:<10} ppl {:>10.4} -> {ppl:>10.4}", b.per_language_ppl[id]);
        }
    }
    RunManifest {
        command: format!("ct --strategy {strategy}"),
        config_path: Some(a.config.clone()),
        config: json(&cfg),
        seed: Some(cfg.train.seed),
        input_hash: Some(file_hash(&a.input)?),
        outputs: vec![ckpt, log_path, reports],
    }
    .write(&dir.join("manifest.json"))
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Error> {
    let model = Model::load(&a.input)?;
    let corpus = load_suite(a.suite.as_deref(), None)?.build()?;
    let csv = evaluate(&model, &corpus, a.tokens)?.to_csv()?;
    match &a.out {
        Some(p) => write_atomic(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), Error> {
    let mut grid: AblationGrid = read_toml(&a.config)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        grid.seeds = vec![seed];
    }
    grid.validate()?;
    let base = Model::load(&a.base)?;
    let corpus = load_suite(a.suite.as_deref(), None)?.build()?;
    let exec = if a.jobs == 1 { Exec::Sequential } else { Exec::Parallel };
    let result = with_threads(a.jobs, || run_ablation(&grid, &base, &corpus, Some(&a.out), exec))?;
    let json_path = a.out.join("results.json");
    write_atomic(&json_path, serde_json::to_string_pretty(&result)?.as_bytes())?;
    let mut outputs = vec![a.out.join("results.csv"), a.out.join("trends.csv"), json_path];
    for axis in &grid.axes {
        let p = a.out.join(format!("{}.svg", axis.name()));
        write_atomic(&p, forgetting_svg(&result, axis.name())?.as_bytes())?;
        outputs.push(p);
    }
    print!("{}", result.trends_csv()?);
    RunManifest {
        command: "ablate".into(),
        config_path: Some(a.config.clone()),
        config: json(&grid),
        seed: None,
        input_hash: Some(file_hash(&a.base)?),
        outputs,
    }
    .write(&a.out.join("manifest.json"))
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), Error> {
    let model = Model::load(&a.input)?;
    if a.json {
        let out = serde_json::json!({ "header": serde_json::from_str::<serde_json::Value>(&model.header_json())?, "census": model.census() });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{}", model.header_json());
        print!("{}", census_table(&model));
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&a.results).map_err(|e| Error::Config(format!("cannot read {}: {e}", a.results.display())))?;
    let result: AblationResult = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&a.out, forgetting_svg(&result, &a.axis)?.as_bytes())
}

/// 2 config, 3 numeric failure, 4 checkpoint-kind mismatch.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Contract(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Upcycle(a) => cmd_upcycle(a),
        Command::Ct(a) => cmd_ct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
