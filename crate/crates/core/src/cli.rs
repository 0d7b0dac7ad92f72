//! Command-line front end.
//!
//! Run configuration is one JSON object whose keys may be flat and dotted
//! (`"train.lr": 5e-4`) or nested. Later sources win: defaults, `--config`,
//! `--set key=value` and `--section.key value` overrides, `GUIDER_SEED`,
//! then the dedicated flags.

mod selftest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::amsc::{run_amsc, HashProjector, ModalIndex, Partitions};
use crate::dataset::{
    load_interactions, read_split_dir, write_interactions, write_split_dir, InteractionFormat, Vocabulary,
    generate_synthetic, inject_noise, load_modal_features, split_per_user, write_gmf1, DataSplit, Modality,
    ModalFeatures, SplitRatios, SynthConfig,
};
use crate::eval::{append_metrics_jsonl, evaluate, score_distribution_report, EvalTarget, DEFAULT_KS};
use crate::models::{load_checkpoint, save_checkpoint, Model, NormalizedAdjacency, Recommender};
use crate::otkd::{CostMode, KdMode};
use crate::trainer::{ignore, run_pipeline, Mode, PipelineOutput, TrainConfig, TrainReport};

pub use selftest::{run_selftest, SelftestOptions, SelftestReport};

/// Exit code for a failed command.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for malformed arguments.
pub const EXIT_USAGE: i32 = 2;
/// Exit code when the self-test ran but some check failed.
pub const EXIT_CHECKS_FAILED: i32 = 3;

const SEED_ENV: &str = "GUIDER_SEED";
const CONFIG_SECTIONS: [&str; 4] = ["data", "train", "eval", "output"];

#[derive(Parser, Debug)]
#[command(name = "guider", version, about = "Denoising distillation for multi-modal recommenders")]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter such as `info` or `guider=debug`; RUST_LOG also works.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-cluster corpus with modal features.
    Synth(SynthArgs),
    /// Split an interaction file per user into train/valid/test.
    Split(SplitArgs),
    /// Add uniformly random interactions to a split's train part.
    InjectNoise(NoiseArgs),
    /// Train the teacher and/or student and evaluate on test.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Score distributions of clean vs injected pairs and noise detection.
    Diagnose(DiagnoseArgs),
    /// Numerical self-checks of the solver, gradients and calibration.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    per_user: Option<usize>,
    #[arg(long)]
    dim_text: Option<usize>,
    #[arg(long)]
    dim_vision: Option<usize>,
    #[arg(long)]
    modal_noise: Option<f64>,
    #[arg(long)]
    mismatch: Option<f64>,
    #[arg(long)]
    two_cluster_prob: Option<f64>,
    #[arg(long)]
    popularity_skew: Option<f64>,
    #[arg(long)]
    sibling_similarity: Option<f64>,
    #[arg(long)]
    sibling_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-user train:valid:test ratio.
    #[arg(long, default_value = "8:1:1")]
    ratios: String,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable: `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    kd: Option<KdMode>,
    #[arg(long)]
    cost: Option<CostMode>,
    /// Alternate teacher and student epochs.
    #[arg(long)]
    interleaved: bool,
    /// One ratio or a sweep such as `0.05/0.10/0.15/0.20`.
    #[arg(long)]
    noise_ratio: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split directory; otherwise `--interactions` or a synthetic corpus.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    vision: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    vision: Option<PathBuf>,
    /// Cutoffs, comma separated.
    #[arg(long, default_value = "5,20")]
    k: String,
    /// `test` or `valid`.
    #[arg(long, default_value = "test")]
    target: String,
    #[arg(long)]
    tag: Option<String>,
    /// Metrics JSONL file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Split directory carrying injected pairs.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    vision: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of clean train pairs scored for the histograms.
    #[arg(long, default_value_t = 1.0)]
    sample_frac: f64,
    #[arg(long, default_value_t = crate::amsc::DEFAULT_THRESHOLD)]
    s_thres: f64,
    #[arg(long, default_value_t = crate::amsc::DEFAULT_HASH_BITS)]
    hash_bits: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Sinkhorn stopping tolerance (a huge value makes the marginal check fail).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Use the scaling-vector iteration instead of the log domain.
    #[arg(long)]
    linear: bool,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where the interactions and features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub vision: Option<PathBuf>,
    /// Used when neither `split` nor `interactions` is set.
    pub synthetic: SynthConfig,
    pub ratios: SplitRatios,
    /// Empty means no injection; several values run a sweep.
    #[serde(deserialize_with = "one_or_many")]
    pub noise_ratio: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: None,
            interactions: None,
            text: None,
            vision: None,
            synthetic: SynthConfig::default(),
            ratios: SplitRatios::default(),
            noise_ratio: Vec::new(),
        }
    }
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: DEFAULT_KS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub mode: Mode,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/latest"),
            mode: Mode::Guider,
            checkpoints: true,
        }
    }
}

/// Everything `train` needs. `train.seed` is the root seed for every stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

/// Expands dotted keys into nested objects, merging into `into`.
fn insert_dotted(into: &mut Map<String, Value>, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = into;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            bail!("empty segment in config key `{key}`");
        }
        if parts.peek().is_none() {
            match value {
                Value::Object(new) => {
                    let child = node
                        .entry(part.to_string())
                        .or_insert_with(|| Value::Object(Map::new()));
                    if !child.is_object() {
                        *child = Value::Object(Map::new());
                    }
                    let Value::Object(old) = child else { unreachable!() };
                    for (k, v) in new {
                        insert_dotted(old, &k, v)?;
                    }
                }
                value => {
                    node.insert(part.to_string(), value);
                }
            }
            return Ok(());
        }
        let child = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = match child {
            Value::Object(m) => m,
            _ => bail!("config key `{key}` descends into a non-object at `{part}`"),
        };
    }
    Ok(())
}

fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Builds a config from a JSON document plus `key=value` overrides.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut tree = Map::new();
        if let Some(text) = file {
            let doc: Value = serde_json::from_str(text).context("config is not valid JSON")?;
            let Value::Object(obj) = doc else {
                bail!("config must be a JSON object");
            };
            for (k, v) in obj {
                insert_dotted(&mut tree, &k, v)?;
            }
        }
        for (k, v) in overrides {
            insert_dotted(&mut tree, k, override_value(v)).with_context(|| format!("override `{k}`"))?;
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(tree)).context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        for p in [&self.data.split, &self.data.interactions, &self.data.text, &self.data.vision]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        if self.data.split.is_some() && self.data.interactions.is_some() {
            bail!("set only one of data.split and data.interactions");
        }
        let external = self.data.split.is_some() || self.data.interactions.is_some();
        if external && (self.data.text.is_none() || self.data.vision.is_none()) {
            bail!("data.text and data.vision are required with external interactions");
        }
        for &r in &self.data.noise_ratio {
            if !(0.0..=0.5).contains(&r) {
                bail!("noise ratio {r} outside [0, 0.5]");
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("eval.ks must be positive cutoffs");
        }
        if !self.eval.ks.contains(&20) {
            bail!("eval.ks must include 20 (early stopping and reports use Recall@20)");
        }
        Ok(())
    }
}

/// Pulls `--section.key value` and `--section.key=value` out of `args`.
fn extract_dotted(args: Vec<OsString>) -> anyhow::Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut found = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| {
            s.split_once('.')
                .is_some_and(|(head, _)| CONFIG_SECTIONS.contains(&head))
        });
        match dotted {
            Some(flag) => {
                let flag = flag.to_string();
                match flag.split_once('=') {
                    Some((k, v)) => found.push((k.to_string(), v.to_string())),
                    None => {
                        let v = it
                            .next()
                            .with_context(|| format!("--{flag} needs a value"))?
                            .into_string()
                            .map_err(|_| anyhow::anyhow!("--{flag} value is not UTF-8"))?;
                        found.push((flag, v));
                    }
                }
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, found))
}

fn parse_set(raw: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = raw
        .split_once('=')
        .with_context(|| format!("--set expects KEY=VALUE, got `{raw}`"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

fn parse_ratio_list(raw: &str) -> anyhow::Result<Vec<f64>> {
    raw.split(['/', ','])
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad noise ratio `{s}`")))
        .collect()
}

fn parse_ks(raw: &str) -> anyhow::Result<Vec<usize>> {
    raw.split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad cutoff `{s}`")))
        .collect()
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?}"))?)),
        Err(_) => Ok(None),
    }
}

/// Explicit flag, then `GUIDER_SEED`, then `fallback`.
fn pick_seed(flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_features(text: &Path, vision: &Path, items: Option<&Vocabulary>) -> anyhow::Result<ModalFeatures> {
    let t = load_modal_features(text, Modality::Text)?;
    let v = load_modal_features(vision, Modality::Vision)?;
    let features = ModalFeatures::new(t, v)?;
    Ok(match items {
        Some(vocab) => features.align(vocab)?,
        None => features,
    })
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let (args, dotted) = match extract_dotted(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if !dotted.is_empty() && !matches!(cli.command, Command::Train(_)) {
        eprintln!("error: config overrides only apply to `train`");
        return EXIT_USAGE;
    }
    init_logging(cli.log.as_deref());
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(cli.command, dotted)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn init_logging(filter: Option<&str>) {
    let env = env_logger::Env::default().default_filter_or("warn");
    let mut builder = env_logger::Builder::from_env(env);
    if let Some(f) = filter {
        builder.parse_filters(f);
    }
    let _ = builder.try_init();
}

fn dispatch(command: Command, dotted: Vec<(String, String)>) -> anyhow::Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(&a).map(|_| 0),
        Command::Split(a) => cmd_split(&a).map(|_| 0),
        Command::InjectNoise(a) => cmd_inject_noise(&a).map(|_| 0),
        Command::Train(a) => cmd_train(a, dotted).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Diagnose(a) => cmd_diagnose(&a).map(|_| 0),
        Command::Selftest(a) => cmd_selftest(&a),
    }
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    seed: u64,
    config: &'a SynthConfig,
    item_clusters: &'a [usize],
    user_clusters: &'a [Vec<usize>],
    mismatched: &'a [bool],
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = SynthConfig::default();
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(
        users => n_users,
        items => n_items,
        clusters => n_clusters,
        per_user => interactions_per_user,
        dim_text => dim_text,
        dim_vision => dim_vision,
        modal_noise => modal_noise,
        mismatch => mismatch_ratio,
        two_cluster_prob => two_cluster_prob,
        popularity_skew => popularity_skew,
        sibling_similarity => sibling_similarity,
        sibling_prob => sibling_prob,
    );
    let seed = pick_seed(a.seed, 0)?;
    let corpus = generate_synthetic(&cfg, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_interactions(&a.out.join("interactions.tsv"), &corpus.dataset, None)?;
    write_gmf1(&a.out.join("text.gmf"), corpus.features.text.matrix())?;
    write_gmf1(&a.out.join("vision.gmf"), corpus.features.vision.matrix())?;
    write_json(
        &a.out.join("truth.json"),
        &GroundTruth {
            seed,
            config: &cfg,
            item_clusters: &corpus.item_clusters,
            user_clusters: &corpus.user_clusters,
            mismatched: &corpus.mismatched,
        },
    )?;
    log::info!(
        "wrote {} interactions over {} users and {} items to {}",
        corpus.dataset.len(),
        cfg.n_users,
        cfg.n_items,
        a.out.display()
    );
    Ok(())
}

fn parse_ratios(raw: &str) -> anyhow::Result<SplitRatios> {
    let parts: Vec<u32> = raw
        .split(':')
        .map(|s| s.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad ratios `{raw}`, expected e.g. 8:1:1"))?;
    match parts[..] {
        [train, valid, test] if train > 0 => Ok(SplitRatios { train, valid, test }),
        _ => bail!("bad ratios `{raw}`, expected three integers with train > 0"),
    }
}

fn cmd_split(a: &SplitArgs) -> anyhow::Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let seed = pick_seed(a.seed, 0)?;
    let loaded = load_interactions(&a.interactions, InteractionFormat::from_path(&a.interactions))?;
    if loaded.duplicates > 0 {
        log::warn!("dropped {} duplicate interactions", loaded.duplicates);
    }
    let split = split_per_user(&loaded.dataset, ratios, seed);
    write_split_dir(&a.out, &split, seed, &loaded.users, &loaded.items, None)?;
    Ok(())
}

fn cmd_inject_noise(a: &NoiseArgs) -> anyhow::Result<()> {
    let dir = read_split_dir(&a.split)?;
    if dir.noise.is_some() {
        bail!("{} already carries injected noise", a.split.display());
    }
    let seed = pick_seed(a.seed, dir.manifest.seed)?;
    let (noisy, report) = inject_noise(&dir.split, a.ratio, seed)?;
    write_split_dir(&a.out, &noisy, dir.manifest.seed, &dir.users, &dir.items, Some(&report))?;
    log::info!("injected {} pairs", report.injected_pairs.len());
    Ok(())
}

/// A loaded split with its features.
struct Prepared {
    split: DataSplit,
    features: ModalFeatures,
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let seed = cfg.train.seed;
    let d = &cfg.data;
    if let Some(dir) = &d.split {
        let sd = read_split_dir(dir)?;
        if sd.noise.is_some() && !d.noise_ratio.is_empty() {
            bail!("{} already carries injected noise; drop data.noise_ratio", dir.display());
        }
        let (text, vision) = (d.text.as_ref().expect("validated"), d.vision.as_ref().expect("validated"));
        let features = load_features(text, vision, Some(&sd.items))?;
        return Ok(Prepared { split: sd.split, features });
    }
    if let Some(path) = &d.interactions {
        let loaded = load_interactions(path, InteractionFormat::from_path(path))?;
        let (text, vision) = (d.text.as_ref().expect("validated"), d.vision.as_ref().expect("validated"));
        let features = load_features(text, vision, Some(&loaded.items))?;
        let split = split_per_user(&loaded.dataset, d.ratios, seed);
        return Ok(Prepared { split, features });
    }
    let corpus = generate_synthetic(&d.synthetic, seed)?;
    let split = split_per_user(&corpus.dataset, d.ratios, seed);
    Ok(Prepared {
        split,
        features: corpus.features,
    })
}

fn write_report(dir: &Path, name: &str, report: &TrainReport) -> anyhow::Result<()> {
    report.write_json(&dir.join(format!("{name}_report.json")))?;
    report.write_curve_csv(&dir.join(format!("{name}_curve.csv")))?;
    Ok(())
}

fn write_outputs(dir: &Path, cfg: &RunConfig, out: &PipelineOutput) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = cfg.train.seed;
    if let Some(t) = &out.teacher {
        if cfg.output.checkpoints {
            save_checkpoint(&dir.join("teacher.gmd"), &Model::Teacher(t.clone()), seed)?;
        }
    }
    if let Some(s) = &out.student {
        if cfg.output.checkpoints {
            save_checkpoint(&dir.join("student.gmd"), &Model::Student(s.clone()), seed)?;
        }
    }
    if let Some(r) = &out.teacher_report {
        write_report(dir, "teacher", r)?;
    }
    if let Some(r) = &out.student_report {
        write_report(dir, "student", r)?;
    }
    if let Some(p) = &out.partitions {
        p.write_jsonl(&dir.join("partitions.jsonl"))?;
    }
    if let Some(n) = &out.noise_detection {
        write_json(&dir.join("noise_detection.json"), n)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, dotted: Vec<(String, String)>) -> anyhow::Result<()> {
    let file = match &a.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut overrides = Vec::new();
    for raw in &a.set {
        overrides.push(parse_set(raw)?);
    }
    overrides.extend(dotted);
    let mut cfg = RunConfig::resolve(file.as_deref(), &overrides)?;
    if let Some(s) = env_seed()? {
        cfg.train.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.output.mode = m;
    }
    if let Some(k) = a.kd {
        cfg.train.kd = k;
    }
    if let Some(c) = a.cost {
        cfg.train.cost = c;
    }
    if a.interleaved {
        cfg.train.interleaved = true;
    }
    if let Some(r) = &a.noise_ratio {
        cfg.data.noise_ratio = parse_ratio_list(r)?;
    }
    if let Some(o) = a.out {
        cfg.output.dir = o;
    }
    macro_rules! path {
        ($($flag:ident),*) => { $(if a.$flag.is_some() { cfg.data.$flag = a.$flag.clone(); })* };
    }
    path!(split, interactions, text, vision);
    cfg.validate()?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    run_config(&cfg)
}

/// Runs `train` for a resolved configuration.
pub fn run_config(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = &cfg.output.dir;
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    write_json(&root.join("config.json"), cfg)?;
    let prepared = prepare(cfg)?;
    let mode = cfg.output.mode;
    let metrics_path = root.join(format!("metrics_{}.jsonl", mode.name()));
    if metrics_path.exists() {
        fs::remove_file(&metrics_path).with_context(|| format!("replacing {}", metrics_path.display()))?;
    }
    let ratios: Vec<Option<f64>> = if cfg.data.noise_ratio.is_empty() {
        vec![None]
    } else {
        cfg.data.noise_ratio.iter().copied().map(Some).collect()
    };
    let sweep = ratios.len() > 1;
    for ratio in ratios {
        let (split, dir, tag) = match ratio {
            Some(r) => {
                let (noisy, report) = inject_noise(&prepared.split, r, cfg.train.seed)?;
                let dir = if sweep { root.join(format!("noise-{r:.2}")) } else { root.clone() };
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write_json(&dir.join("noise.json"), &report)?;
                let tag = if sweep {
                    format!("{}@noise={r:.2}", mode.name())
                } else {
                    mode.name().to_string()
                };
                (noisy, dir, tag)
            }
            None => (prepared.split.clone(), root.clone(), mode.name().to_string()),
        };
        log::info!("training {tag}");
        let out = run_pipeline(&split, &prepared.features, &cfg.train, mode, &mut ignore)?;
        write_outputs(&dir, cfg, &out)?;
        let final_model: &dyn Recommender = match (&out.student, &out.teacher) {
            (Some(s), _) => s,
            (None, Some(t)) => t,
            (None, None) => bail!("pipeline produced no model"),
        };
        let rows = evaluate(final_model, Some(&prepared.features), &split, EvalTarget::Test, &cfg.eval.ks, &tag)?;
        append_metrics_jsonl(&metrics_path, &rows)?;
        for r in &rows {
            log::info!("{} recall@{} {:.4} ndcg@{} {:.4}", r.model, r.k, r.recall, r.k, r.ndcg);
        }
    }
    Ok(())
}

fn model_from_checkpoint(path: &Path, split: &DataSplit) -> anyhow::Result<Model> {
    let (mut model, header) = load_checkpoint(path)?;
    if header.n_users != split.n_users() || header.n_items != split.n_items() {
        bail!(
            "checkpoint {} is {}x{} but the split is {}x{}",
            path.display(),
            header.n_users,
            header.n_items,
            split.n_users(),
            split.n_items()
        );
    }
    if let Model::Teacher(t) = &mut model {
        if t.n_layers > 0 {
            t.attach_adjacency(NormalizedAdjacency::from_train(&split.train))?;
        }
    }
    Ok(model)
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ks = parse_ks(&a.k)?;
    let target = match a.target.as_str() {
        "test" => EvalTarget::Test,
        "valid" => EvalTarget::Valid,
        other => bail!("unknown target `{other}` (test, valid)"),
    };
    let sd = read_split_dir(&a.split)?;
    let model = model_from_checkpoint(&a.checkpoint, &sd.split)?;
    let features = match (&a.text, &a.vision) {
        (Some(t), Some(v)) => Some(load_features(t, v, Some(&sd.items))?),
        (None, None) => None,
        _ => bail!("pass both --text and --vision or neither"),
    };
    if matches!(model, Model::Student(_)) && features.is_none() {
        bail!("student checkpoints need --text and --vision");
    }
    let tag = a.tag.clone().unwrap_or_else(|| format!("{:?}", model.kind()).to_lowercase());
    let rows = evaluate(model.as_recommender(), features.as_ref(), &sd.split, target, &ks, &tag)?;
    match &a.out {
        Some(path) => {
            if path.exists() {
                fs::remove_file(path)?;
            }
            append_metrics_jsonl(path, &rows)?;
        }
        None => {
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DistributionSummary {
    model: String,
    auc: f64,
    clean_mean: f64,
    noisy_mean: f64,
    n_clean: usize,
    n_noisy: usize,
}

#[derive(Serialize)]
struct DiagnoseSummary {
    distributions: Vec<DistributionSummary>,
    /// Only reported; the teacher is expected, not required, to separate better.
    teacher_auc_exceeds_student: Option<bool>,
    noise_detection: crate::eval::NoiseDetection,
}

fn cmd_diagnose(a: &DiagnoseArgs) -> anyhow::Result<()> {
    let sd = read_split_dir(&a.split)?;
    if sd.split.train.n_injected() == 0 {
        bail!("{} has no injected pairs to diagnose", a.split.display());
    }
    let features = load_features(&a.text, &a.vision, Some(&sd.items))?;
    let seed = pick_seed(a.seed, sd.manifest.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let teacher = model_from_checkpoint(&a.teacher, &sd.split)?;
    if !matches!(teacher, Model::Teacher(_)) {
        bail!("{} is not a teacher checkpoint", a.teacher.display());
    }
    let proj = HashProjector::for_features(a.hash_bits, &features, seed)?;
    let index = ModalIndex::new(&features, &proj)?;
    let partitions: Partitions = run_amsc(teacher.as_recommender(), &sd.split.train, None, &index, a.s_thres)?;
    partitions.write_jsonl(&a.out.join("partitions.jsonl"))?;
    let detection = crate::eval::noise_detection_report(&partitions, &sd.split.train);

    let mut models = vec![("teacher", teacher)];
    if let Some(p) = &a.student {
        let student = model_from_checkpoint(p, &sd.split)?;
        if !matches!(student, Model::Student(_)) {
            bail!("{} is not a student checkpoint", p.display());
        }
        models.push(("student", student));
    }
    let mut distributions = Vec::new();
    for (name, model) in &models {
        let dist = score_distribution_report(model.as_recommender(), Some(&features), &sd.split.train, a.sample_frac, seed)?;
        dist.write_csv(&a.out.join(format!("scores_{name}.csv")))?;
        distributions.push(DistributionSummary {
            model: name.to_string(),
            auc: dist.auc,
            clean_mean: dist.clean_mean,
            noisy_mean: dist.noisy_mean,
            n_clean: dist.n_clean,
            n_noisy: dist.n_noisy,
        });
    }
    let teacher_auc_exceeds_student = match &distributions[..] {
        [t, s] => Some(t.auc > s.auc),
        _ => None,
    };
    write_json(
        &a.out.join("diagnose.json"),
        &DiagnoseSummary {
            distributions,
            teacher_auc_exceeds_student,
            noise_detection: detection,
        },
    )
}

fn cmd_selftest(a: &SelftestArgs) -> anyhow::Result<i32> {
    let mut opts = SelftestOptions {
        seed: pick_seed(a.seed, 0)?,
        ..SelftestOptions::default()
    };
    if let Some(t) = a.tol {
        opts.sinkhorn.tol = t;
    }
    if let Some(m) = a.max_iter {
        opts.sinkhorn.max_iter = m;
    }
    if a.linear {
        opts.sinkhorn.log_domain = false;
    }
    let report = run_selftest(&opts)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    let failed = report.failed();
    if failed.is_empty() {
        eprintln!("selftest: all {} checks passed", report.checks.len());
        Ok(0)
    } else {
        eprintln!("selftest: failed checks: {}", failed.join(", "));
        Ok(EXIT_CHECKS_FAILED)
    }
}
