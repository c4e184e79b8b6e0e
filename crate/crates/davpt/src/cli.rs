//! Command-line front end binding dataset generation, training,
//! evaluation, and the numeric verifiers into reproducible runs.
//!
//! Exit codes separate failure classes so scripts can react: `0` success,
//! `1` usage problems (bad flags, unreadable config, missing input files),
//! `2` runtime or numeric failures (corrupt files, divergence, a verifier
//! or gradient check outside tolerance).
//!
//! The `train` subcommand reads an optional line-based settings file of
//! `key = value` pairs with `#` comments. Precedence, lowest to highest:
//! built-in desk defaults, the file's `preset` key, remaining file keys in
//! order, command-line flags. Seeds resolve as flag, then config key, then
//! the `DAVPT_SEED` environment variable, then 0.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    export_attention, grad_check_suite, random_theorem_instance, sha256_hex, verify_theorem1,
    AttnTarget, GradScope, HeadSel, RunManifest, GRAD_TOL,
};
use crate::data::{generate, split, Dataset, SynthSpec};
use crate::mapping::{collect_class_representations, pad_prompts, update_mapping};
use crate::metric::{CompareSpace, MetricConfig};
use crate::train::{collect_cls_rows, evaluate, fit, TrainConfig};
use crate::vit::{init_prompts, ModelParams, Policy, PromptInit, ViTConfig};

/// Ratio band a halving of the perturbation scale must land in for the
/// attention-shift approximation to show first-order convergence.
pub const RATIO_BAND: (f64, f64) = (3.5, 4.5);

enum CliError {
    /// Misuse of the surface itself: exits 1.
    Usage(String),
    /// Failures while doing the work: exits 2.
    Runtime(String),
}

#[derive(Parser)]
#[command(
    name = "davpt",
    about = "Prompt-tuned ViT laboratory: synthetic data, metric-guided training, verifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification dataset file.
    GenData(GenDataArgs),
    /// Train a model and write run artifacts to a directory.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset or one of its splits.
    Eval(EvalArgs),
    /// Check the attention-shift approximation's convergence order.
    VerifyTheorem(VerifyTheoremArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Export one attention row as a CSV grid and a PGM image.
    ExportAttn(ExportAttnArgs),
    /// Recompute and print the class-to-prompt assignment.
    DumpMapping(DumpMappingArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Inter-class pattern distance, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    separability: f64,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 8.0)]
    noise_std: f64,
    /// Generator seed; falls back to DAVPT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Settings file of `key = value` lines applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; also settable as `data =` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// linear, vpt_deep, da_vpt, or da_vpt_plus.
    #[arg(long)]
    policy: Option<String>,
    /// Weight of the token-prompt loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the CLS-prompt loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Similarity margin of the metric losses.
    #[arg(long)]
    delta: Option<f64>,
    /// Temperature of the metric losses.
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated layer indices fed to the metric losses; an empty
    /// string means the final layer.
    #[arg(long)]
    guided_layers: Option<String>,
    /// Prompts per layer.
    #[arg(long)]
    prompts: Option<usize>,
    /// Run seed; falls back to the config key, DAVPT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Shuffle seed of the 80/10/10 split.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Run directory for report.csv, model.ckpt, mapping.txt, manifest.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// all, train, val, or test.
    #[arg(long, default_value = "all")]
    split: String,
    /// Shuffle seed of the 80/10/10 split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct VerifyTheoremArgs {
    /// Key and prompt dimension.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Number of keys per draw.
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Comma-separated decreasing perturbation scales.
    #[arg(long, default_value = "1e-2,5e-3,2.5e-3,1.25e-3")]
    scales: String,
    /// Number of random instances.
    #[arg(long, default_value_t = 20)]
    draws: u64,
    /// Draw seed; falls back to DAVPT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// all, tensor, metric, vit, or objective.
    #[arg(long, default_value = "all")]
    module: String,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample index within the dataset file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Layer whose attention to export.
    #[arg(long)]
    layer: usize,
    /// `mean` or a head index.
    #[arg(long, default_value = "mean")]
    head: String,
    /// `cls`, `prompt:K`, or `positive` (the prompt assigned to the
    /// sample's class; needs --mapping).
    #[arg(long, default_value = "cls")]
    target: String,
    /// mapping.txt from a training run, for `--target positive`.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpMappingArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Clustering seed; falls back to DAVPT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Optional output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run the CLI with `argv[0]` being the program name.
pub fn run(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not errors.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::VerifyTheorem(a) => verify_theorem_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::ExportAttn(a) => export_attn_cmd(a),
        Command::DumpMapping(a) => dump_mapping_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("DAVPT_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("DAVPT_SEED value {s:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("DAVPT_SEED: {e}"))),
    }
}

/// Flag beats config key beats environment beats 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    match flag.or(config) {
        Some(s) => Ok(s),
        None => Ok(env_seed()?.unwrap_or(0)),
    }
}

fn usage<T: Display>(e: T) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<T: Display>(e: T) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Read an input file named on the command line. A missing path is a
/// usage problem; whether the bytes make sense is the caller's to judge.
fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<(Dataset, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let ds = Dataset::from_bytes(&bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok((ds, bytes))
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams, Policy, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let (params, policy) = ModelParams::from_bytes(&bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok((params, policy, bytes))
}

fn gen_data_cmd(a: GenDataArgs) -> Result<u8, CliError> {
    let spec = SynthSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        image_size: a.image_size,
        channels: a.channels,
        separability: a.separability,
        noise_std: a.noise_std,
        seed: resolve_seed(a.seed, None)?,
    };
    let ds = generate(&spec).map_err(usage)?;
    let bytes = ds.to_bytes();
    write_file(&a.out, &bytes)?;
    println!(
        "wrote {} ({} samples, {} classes, sha256 {})",
        a.out.display(),
        ds.len(),
        ds.num_classes,
        sha256_hex(&bytes)
    );
    Ok(0)
}

/// Everything `train` resolves before touching the model.
struct TrainSettings {
    train: TrainConfig,
    model: ViTConfig,
    data: Option<PathBuf>,
    seed: Option<u64>,
    split_seed: u64,
    preset: String,
}

impl TrainSettings {
    fn desk() -> Self {
        TrainSettings {
            train: TrainConfig::desk_default(Policy::DaVpt),
            model: ViTConfig::desk_default(),
            data: None,
            seed: None,
            split_seed: 0,
            preset: "desk".into(),
        }
    }

    /// Full-scale reference settings: 100 epochs with a 10-epoch warmup,
    /// wide-margin soft-temperature metric, 20 prompts per layer.
    fn apply_paper_preset(&mut self) {
        self.train.epochs = 100;
        self.train.warmup_epochs = 10;
        self.train.batch_size = 32;
        self.train.base_lr = 1e-3;
        self.train.weight_decay = 0.01;
        self.train.metric = MetricConfig::paper();
        self.model.prompts_per_layer = 20;
        self.preset = "paper".into();
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("key `{key}`: cannot parse {value:?}")))
}

fn parse_policy(value: &str) -> Result<Policy, CliError> {
    Policy::parse(value).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown policy {value:?} (linear, vpt_deep, da_vpt, da_vpt_plus)"
        ))
    })
}

fn parse_layer_list(value: &str) -> Result<Vec<usize>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_num::<usize>("guided_layers", part.trim()))
        .collect()
}

fn apply_key(s: &mut TrainSettings, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "policy" => s.train.policy = parse_policy(value)?,
        "epochs" => s.train.epochs = parse_num(key, value)?,
        "warmup_epochs" => s.train.warmup_epochs = parse_num(key, value)?,
        "batch_size" => s.train.batch_size = parse_num(key, value)?,
        "base_lr" => s.train.base_lr = parse_num(key, value)?,
        "weight_decay" => s.train.weight_decay = parse_num(key, value)?,
        "decay_exempt_bias_and_prompts" => {
            s.train.decay_exempt_bias_and_prompts = parse_num(key, value)?
        }
        "beta" => s.train.beta = parse_num(key, value)?,
        "lambda" => s.train.lambda = parse_num(key, value)?,
        "grad_clip" => s.train.grad_clip = parse_num(key, value)?,
        "guided_layers" => s.train.guided_layers = parse_layer_list(value)?,
        "metric" => {
            s.train.metric = MetricConfig::preset(value).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown metric preset {value:?} (paper, proxy_anchor_classic)"
                ))
            })?
        }
        "delta" => s.train.metric.delta = parse_num(key, value)?,
        "tau" => s.train.metric.tau = parse_num(key, value)?,
        "compare_space" => {
            s.train.metric.compare_space = match value {
                "raw_prompts" => CompareSpace::RawPrompts,
                "query_projected" => CompareSpace::QueryProjected,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown compare_space {other:?} (raw_prompts, query_projected)"
                    )))
                }
            }
        }
        "saliency_top_k" => {
            s.train.metric.saliency_top_k = match value {
                "none" => None,
                n => Some(parse_num(key, n)?),
            }
        }
        "prompts" => s.model.prompts_per_layer = parse_num(key, value)?,
        "image_size" => s.model.image_size = parse_num(key, value)?,
        "patch_size" => s.model.patch_size = parse_num(key, value)?,
        "channels" => s.model.channels = parse_num(key, value)?,
        "embed_dim" => s.model.embed_dim = parse_num(key, value)?,
        "num_layers" => s.model.num_layers = parse_num(key, value)?,
        "num_heads" => s.model.num_heads = parse_num(key, value)?,
        "mlp_ratio" => s.model.mlp_ratio = parse_num(key, value)?,
        "prompt_init" => {
            s.model.prompt_init = match value {
                "trunc_normal" => PromptInit::TruncNormal,
                "data_mean" => PromptInit::DataMean,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown prompt_init {other:?} (trunc_normal, data_mean)"
                    )))
                }
            }
        }
        "seed" => s.seed = Some(parse_num(key, value)?),
        "split_seed" => s.split_seed = parse_num(key, value)?,
        "data" => s.data = Some(PathBuf::from(value)),
        other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

fn apply_config_file(s: &mut TrainSettings, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let mut pairs: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw[..raw.find('#').unwrap_or(raw.len())].trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{} line {}: expected `key = value`", path.display(), i + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    // The preset resets whole field groups, so it goes first no matter
    // where it sits in the file; every other key applies top to bottom.
    if let Some((_, v, line)) = pairs.iter().rev().find(|(k, _, _)| k == "preset") {
        match v.as_str() {
            "desk" => {}
            "paper" => s.apply_paper_preset(),
            other => {
                return Err(CliError::Usage(format!(
                    "{} line {line}: unknown preset {other:?} (desk, paper)",
                    path.display()
                )))
            }
        }
    }
    for (k, v, line) in &pairs {
        if k == "preset" {
            continue;
        }
        apply_key(s, k, v).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{} line {line}: {m}", path.display())),
            other => other,
        })?;
    }
    Ok(())
}

fn guided_layers_label(layers: &[usize]) -> String {
    if layers.is_empty() {
        "final".into()
    } else {
        layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn train_manifest(s: &TrainSettings, data_path: &Path, data_sha: &str, seed: u64) -> RunManifest {
    let mut m = RunManifest::new("train");
    m.push("preset", &s.preset);
    m.push("policy", s.train.policy.clone().name());
    m.push("data", data_path.display());
    m.push("data_sha256", data_sha);
    m.push("split_seed", s.split_seed);
    m.push("seed", seed);
    m.push("epochs", s.train.epochs);
    m.push("warmup_epochs", s.train.warmup_epochs);
    m.push("batch_size", s.train.batch_size);
    m.push("base_lr", s.train.base_lr);
    m.push("weight_decay", s.train.weight_decay);
    m.push("decay_exempt_bias_and_prompts", s.train.decay_exempt_bias_and_prompts);
    m.push("beta", s.train.beta);
    m.push("lambda", s.train.lambda);
    m.push("grad_clip", s.train.grad_clip);
    m.push("guided_layers", guided_layers_label(&s.train.guided_layers));
    m.push("metric_delta", s.train.metric.delta);
    m.push("metric_tau", s.train.metric.tau);
    m.push(
        "compare_space",
        match s.train.metric.compare_space {
            CompareSpace::RawPrompts => "raw_prompts",
            CompareSpace::QueryProjected => "query_projected",
        },
    );
    m.push(
        "saliency_top_k",
        match s.train.metric.saliency_top_k {
            None => "none".to_string(),
            Some(k) => k.to_string(),
        },
    );
    m.push("image_size", s.model.image_size);
    m.push("patch_size", s.model.patch_size);
    m.push("channels", s.model.channels);
    m.push("embed_dim", s.model.embed_dim);
    m.push("num_layers", s.model.num_layers);
    m.push("num_heads", s.model.num_heads);
    m.push("mlp_ratio", s.model.mlp_ratio);
    m.push("num_classes", s.model.num_classes);
    m.push("prompts_per_layer", s.model.prompts_per_layer);
    m.push(
        "prompt_init",
        match s.model.prompt_init {
            PromptInit::TruncNormal => "trunc_normal",
            PromptInit::DataMean => "data_mean",
        },
    );
    m.push("report", "report.csv");
    m.push("checkpoint", "model.ckpt");
    m.push("mapping", "mapping.txt");
    m
}

fn train_cmd(a: TrainArgs) -> Result<u8, CliError> {
    let mut s = TrainSettings::desk();
    if let Some(path) = &a.config {
        apply_config_file(&mut s, path)?;
    }
    if let Some(v) = &a.policy {
        s.train.policy = parse_policy(v)?;
    }
    if let Some(v) = a.beta {
        s.train.beta = v;
    }
    if let Some(v) = a.lambda {
        s.train.lambda = v;
    }
    if let Some(v) = a.delta {
        s.train.metric.delta = v;
    }
    if let Some(v) = a.tau {
        s.train.metric.tau = v;
    }
    if let Some(v) = &a.guided_layers {
        s.train.guided_layers = parse_layer_list(v)?;
    }
    if let Some(v) = a.prompts {
        s.model.prompts_per_layer = v;
    }
    if let Some(v) = a.split_seed {
        s.split_seed = v;
    }
    if let Some(v) = &a.data {
        s.data = Some(v.clone());
    }
    let seed = resolve_seed(a.seed, s.seed)?;
    s.train.seed = seed;

    let data_path = s.data.clone().ok_or_else(|| {
        CliError::Usage("no dataset: pass --data or set `data =` in the config".into())
    })?;
    let (ds, data_bytes) = load_dataset(&data_path)?;
    let (train_set, val_set, _test_set) = split(&ds, s.split_seed);
    s.model.num_classes = ds.num_classes as usize;
    s.model.validate().map_err(usage)?;

    let mut params = ModelParams::init(&s.model, seed).map_err(usage)?;
    if s.model.prompt_init == PromptInit::DataMean {
        init_prompts(&mut params, PromptInit::DataMean, Some(&train_set), seed).map_err(runtime)?;
    }
    let report = fit(&mut params, &train_set, &val_set, &s.train).map_err(runtime)?;

    let manifest = train_manifest(&s, &data_path, &sha256_hex(&data_bytes), seed);
    let hash = manifest.hash();
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", a.out.display())))?;
    write_file(&a.out.join("report.csv"), report.to_csv(&hash).as_bytes())?;
    params
        .save(s.train.policy.clone(), &a.out.join("model.ckpt"))
        .map_err(runtime)?;
    let mapping_text = match &report.mapping {
        Some(mp) => format!("# manifest: {hash}\n{}", mp.dump()),
        None => format!("# manifest: {hash}\n# guidance off, no mapping\n"),
    };
    write_file(&a.out.join("mapping.txt"), mapping_text.as_bytes())?;
    manifest.save(&a.out.join("manifest.txt")).map_err(runtime)?;

    println!(
        "trained {} epochs ({}), final val acc {:.4}",
        s.train.epochs,
        s.train.policy.name(),
        report.final_val_acc
    );
    println!("artifacts in {}", a.out.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<u8, CliError> {
    let (mut params, _policy, _bytes) = load_checkpoint(&a.ckpt)?;
    let (ds, _data_bytes) = load_dataset(&a.data)?;
    let subset = match a.split.as_str() {
        "all" => ds,
        "train" => split(&ds, a.split_seed).0,
        "val" => split(&ds, a.split_seed).1,
        "test" => split(&ds, a.split_seed).2,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split {other:?} (all, train, val, test)"
            )))
        }
    };
    let acc = evaluate(&mut params, &subset, a.batch_size).map_err(runtime)?;
    println!("accuracy {:.6} on {} samples ({})", acc, subset.len(), a.split);
    Ok(0)
}

fn parse_scales(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|part| parse_num::<f64>("scales", part.trim()))
        .collect()
}

fn verify_theorem_cmd(a: VerifyTheoremArgs) -> Result<u8, CliError> {
    let scales = parse_scales(&a.scales)?;
    let seed = resolve_seed(a.seed, None)?;
    if a.draws == 0 {
        return Err(CliError::Usage("need at least one draw".into()));
    }
    let (lo, hi) = RATIO_BAND;
    let mut all_in_band = true;
    for draw in 0..a.draws {
        let (keys, prompt, direction) = random_theorem_instance(a.dim, a.tokens, seed, draw);
        let target = draw as usize % a.tokens;
        let report =
            verify_theorem1(&keys, a.dim, &prompt, &direction, &scales, target).map_err(usage)?;
        if !report.regime_a.available {
            println!("draw {draw:02} target {target}: regime-a unavailable (keys span the space)");
            continue;
        }
        let ratios: Vec<String> =
            report.regime_a.error_ratios.iter().map(|r| format!("{r:.3}")).collect();
        let orders: Vec<String> = report
            .regime_b
            .residual_ratios
            .iter()
            .map(|r| format!("{:.3}", r.log2()))
            .collect();
        let in_band = report.regime_a.error_ratios.iter().all(|&r| (lo..=hi).contains(&r));
        all_in_band &= in_band;
        println!(
            "draw {draw:02} target {target}: regime-a ratios [{}] regime-b orders [{}]{}",
            ratios.join(", "),
            orders.join(", "),
            if in_band { "" } else { "  <- outside band" }
        );
    }
    if all_in_band {
        println!("regime-a halving ratios within [{lo}, {hi}] on all draws: ok");
        Ok(0)
    } else {
        println!("regime-a halving ratios outside [{lo}, {hi}]: FAIL");
        Ok(2)
    }
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<u8, CliError> {
    let scope = GradScope::parse(&a.module).map_err(usage)?;
    let results = grad_check_suite(scope).map_err(runtime)?;
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.pass) {
        println!("all {} checks within {GRAD_TOL:.0e}", results.len());
        Ok(0)
    } else {
        let failed = results.iter().filter(|r| !r.pass).count();
        println!("{failed} of {} checks FAILED", results.len());
        Ok(2)
    }
}

fn parse_head(text: &str) -> Result<HeadSel, CliError> {
    if text == "mean" {
        Ok(HeadSel::Mean)
    } else {
        Ok(HeadSel::Index(parse_num::<usize>("head", text)?))
    }
}

/// `positive` resolves through a training run's mapping.txt: the prompt
/// assigned to the sample's class anchors its metric loss, so its
/// attention row is the one the guidance shaped.
fn parse_target(
    text: &str,
    mapping: Option<&Path>,
    label: usize,
) -> Result<AttnTarget, CliError> {
    match text {
        "cls" => Ok(AttnTarget::Cls),
        "positive" => {
            let path = mapping.ok_or_else(|| {
                CliError::Usage("--target positive needs --mapping mapping.txt".into())
            })?;
            let text = read_input(path)?;
            let text = String::from_utf8_lossy(&text);
            for line in text.lines() {
                if line.starts_with('#') {
                    continue;
                }
                if let Some((class, prompt)) = line.split_once('\t') {
                    if class.trim() == label.to_string() {
                        return Ok(AttnTarget::Prompt(parse_num::<usize>("mapping", prompt.trim())?));
                    }
                }
            }
            Err(CliError::Runtime(format!(
                "{}: no mapping line for class {label}",
                path.display()
            )))
        }
        other => match other.strip_prefix("prompt:") {
            Some(k) => Ok(AttnTarget::Prompt(parse_num::<usize>("target", k)?)),
            None => Err(CliError::Usage(format!(
                "unknown target {other:?} (cls, prompt:K, positive)"
            ))),
        },
    }
}

fn export_attn_cmd(a: ExportAttnArgs) -> Result<u8, CliError> {
    let (mut params, _policy, ckpt_bytes) = load_checkpoint(&a.ckpt)?;
    let (ds, data_bytes) = load_dataset(&a.data)?;
    let config = params.config.clone();
    if a.index >= ds.len() {
        return Err(CliError::Usage(format!(
            "index {} out of range, dataset has {} samples",
            a.index,
            ds.len()
        )));
    }
    if a.layer >= config.num_layers {
        return Err(CliError::Usage(format!(
            "layer {} out of range, model has {} layers",
            a.layer, config.num_layers
        )));
    }
    let head = parse_head(&a.head)?;
    let (image, label) = ds.sample(a.index);
    let target = parse_target(&a.target, a.mapping.as_deref(), label)?;

    let mut manifest = RunManifest::new("export-attn");
    manifest.push("ckpt", a.ckpt.display());
    manifest.push("ckpt_sha256", sha256_hex(&ckpt_bytes));
    manifest.push("data", a.data.display());
    manifest.push("data_sha256", sha256_hex(&data_bytes));
    manifest.push("index", a.index);
    manifest.push("label", label);
    manifest.push("layer", a.layer);
    manifest.push("head", &a.head);
    let target_tag = match target {
        AttnTarget::Cls => "cls".to_string(),
        AttnTarget::Prompt(k) => format!("p{k}"),
    };
    manifest.push("target", &target_tag);
    let head_tag = match head {
        HeadSel::Mean => "mean".to_string(),
        HeadSel::Index(h) => format!("h{h}"),
    };
    let stem = format!("attn_l{}_{}_{}", a.layer, head_tag, target_tag);
    manifest.push("csv", format!("{stem}.csv"));
    manifest.push("pgm", format!("{stem}.pgm"));
    let hash = manifest.hash();

    let mut tape = crate::tensor::Tape::new();
    let trace = crate::vit::forward_model(&mut tape, &mut params, &[image], &[a.layer])
        .map_err(runtime)?;
    let export = export_attention(&trace, &config, 0, a.layer, head, target, &hash)
        .map_err(usage)?;

    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", a.out.display())))?;
    write_file(&a.out.join(format!("{stem}.csv")), export.csv.as_bytes())?;
    write_file(&a.out.join(format!("{stem}.pgm")), &export.pgm)?;
    manifest
        .save(&a.out.join(format!("{stem}.manifest.txt")))
        .map_err(runtime)?;
    println!(
        "wrote {stem}.csv, {stem}.pgm ({}x{} grid) in {}",
        export.side,
        export.side,
        a.out.display()
    );
    Ok(0)
}

fn dump_mapping_cmd(a: DumpMappingArgs) -> Result<u8, CliError> {
    let (mut params, _policy, ckpt_bytes) = load_checkpoint(&a.ckpt)?;
    let (ds, data_bytes) = load_dataset(&a.data)?;
    let config = params.config.clone();
    if config.prompts_per_layer == 0 {
        return Err(CliError::Usage("checkpoint has no prompts to map classes onto".into()));
    }
    if a.batch_size == 0 {
        return Err(CliError::Usage("batch_size must be >= 1".into()));
    }
    let seed = resolve_seed(a.seed, None)?;
    let (rows, labels) = collect_cls_rows(&mut params, &ds, a.batch_size).map_err(runtime)?;
    let num_classes = ds.num_classes as usize;
    let reps = collect_class_representations(&rows, config.embed_dim, &labels, num_classes)
        .map_err(runtime)?;
    let budget = pad_prompts(num_classes, config.prompts_per_layer);
    let assignment =
        update_mapping(&reps, config.embed_dim, budget.guided, None, seed).map_err(runtime)?;

    let mut manifest = RunManifest::new("dump-mapping");
    manifest.push("ckpt", a.ckpt.display());
    manifest.push("ckpt_sha256", sha256_hex(&ckpt_bytes));
    manifest.push("data", a.data.display());
    manifest.push("data_sha256", sha256_hex(&data_bytes));
    manifest.push("seed", seed);
    manifest.push("batch_size", a.batch_size);
    manifest.push("guided_prompts", budget.guided);
    let hash = manifest.hash();
    let text = format!("# manifest: {hash}\n{}", assignment.dump());

    match &a.out {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(0)
}
