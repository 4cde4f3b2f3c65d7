// SPDX-License-Identifier: MIT OR Apache-2.0

//! `guide` command-line front end.
//!
//! Every JSON output starts with a `header` recording the command, the full
//! argument list and the seed, so a run can be repeated exactly. CSV outputs
//! are bare tables.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use guide_core::calibration::{calibrate_delta_with, CalibrationOptions, LayerPolicy, TextTransform};
use guide_core::decoding::{decode, GenerationParams, GenerationRecord, InfluenceTracking, SamplingMode};
use guide_core::harness::{
    json_key_jaccard, read_samples_csv, run_auc_report, run_experiment, templates, ExperimentSpec, SampleGroups,
};
use guide_core::influence::{compute_map_multi, Variant};
use guide_core::model::{
    forward_traced, init_model, load_weights, load_weights_expecting, save_weights, BiasSpec, ModelConfig,
    TraceOptions, UpdateNorm, Weights,
};
use guide_core::tags::{parse_tags_with, DeltaConfig, TagOptions, TaggedPrompt};

#[derive(Debug, Parser)]
#[command(
    name = "guide",
    version,
    about = "Attention-bias steering and influence tracing on a small transformer"
)]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run seed (sampling; model initialisation for `init-model`).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model config as JSON.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Weight file; the model is initialised from the config when absent.
    #[arg(long, global = true, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Override an emphasis level's bias, e.g. `2=2.5`. Repeatable.
    #[arg(long = "delta-map", global = true, value_name = "LEVEL=VALUE")]
    delta_map: Vec<String>,
    /// Write output here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a continuation of a tagged prompt.
    Generate(GenerateArgs),
    /// Per-layer influence map of a span.
    Influence(InfluenceArgs),
    /// Estimate a bias from the log-influence gap of a rewritten span.
    Calibrate(CalibrateArgs),
    /// Run an experiment described by a JSON spec.
    Sweep(SweepArgs),
    /// ROC AUC and correlation per metric from score/label CSV files.
    Auc(AucArgs),
    /// Write freshly initialised weights.
    InitModel,
    /// Jaccard index between generated JSON keys and a schema's keys.
    Jaccard(JaccardArgs),
    /// Print a bundled prompt template with its slots filled.
    Template(TemplateArgs),
}

#[derive(Debug, Args)]
#[group(skip)]
struct PromptSource {
    /// Tagged prompt file.
    #[arg(long, value_name = "FILE", required_unless_present = "text", conflicts_with = "text")]
    prompt: Option<PathBuf>,
    /// Tagged prompt text.
    #[arg(long, value_name = "TEXT")]
    text: Option<String>,
    /// Keep tag markers in the model input.
    #[arg(long)]
    keep_markers: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Multinomial,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: PromptSource,
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    /// Ignore emphasis tags (unbiased baseline).
    #[arg(long)]
    no_bias: bool,
    /// Bias only rows of the prompt, not generated positions.
    #[arg(long)]
    bias_prompt_only: bool,
    /// Record the influence trajectory every N steps.
    #[arg(long, value_name = "N")]
    track_influence: Option<usize>,
    #[arg(long, default_value = "exact", value_parser = parse_variant)]
    variant: Variant,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UpdateNormArg {
    PostO,
    PreO,
}

#[derive(Debug, Args)]
struct InfluenceArgs {
    #[command(flatten)]
    source: PromptSource,
    #[arg(long, default_value = "exact", value_parser = parse_variant)]
    variant: Variant,
    /// Token range `start..end` to measure instead of the tagged spans.
    #[arg(long, value_parser = parse_range)]
    span: Option<Range<usize>>,
    /// Ignore emphasis tags in the forward pass.
    #[arg(long)]
    no_bias: bool,
    #[arg(long, value_enum, default_value_t = UpdateNormArg::PostO)]
    update_norm: UpdateNormArg,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    source: PromptSource,
    #[arg(long, default_value = "uppercase", value_parser = parse_transform)]
    transform: TextTransform,
    #[arg(long, default_value = "final", value_parser = parse_policy)]
    layer_policy: LayerPolicy,
    #[arg(long, default_value = "exact", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = guide_core::calibration::DEFAULT_DELTA_MAX)]
    delta_max: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Experiment spec (JSON).
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
}

#[derive(Debug, Args)]
struct AucArgs {
    /// CSV files with `metric,score,label` columns.
    #[arg(long = "input", value_name = "FILE", required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct JaccardArgs {
    /// File holding the generated text.
    #[arg(long, value_name = "FILE")]
    generated: PathBuf,
    /// JSON object whose keys are expected; the bundled story schema by default.
    #[arg(long, value_name = "FILE")]
    schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TemplateArgs {
    /// summarization_french, needle_haystack or json_generation.
    name: String,
    /// Fill a slot, `key=value` or `key=@file`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    values: Vec<String>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: guide_core::GuideError| e.to_string())
}

fn parse_transform(s: &str) -> Result<TextTransform, String> {
    s.parse().map_err(|e: guide_core::GuideError| e.to_string())
}

fn parse_policy(s: &str) -> Result<LayerPolicy, String> {
    s.parse().map_err(|e: guide_core::GuideError| e.to_string())
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or("expected start..end")?;
    let start = a.trim().parse().map_err(|_| format!("bad start in {s}"))?;
    let end = b.trim().parse().map_err(|_| format!("bad end in {s}"))?;
    Ok(start..end)
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

struct Output {
    json: Value,
    csv: Option<Vec<u8>>,
    /// `--out` was already used for another artifact.
    to_stdout: bool,
}

impl Output {
    fn new(json: Value, csv: Option<Vec<u8>>) -> Self {
        Self {
            json,
            csv,
            to_stdout: false,
        }
    }
}

fn execute(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    let g = &cli.global;
    let out = match &cli.command {
        Command::Generate(a) => generate(g, a)?,
        Command::Influence(a) => influence(g, a)?,
        Command::Calibrate(a) => calibrate(g, a)?,
        Command::Sweep(a) => sweep(g, a)?,
        Command::Auc(a) => auc(a)?,
        Command::InitModel => init(g)?,
        Command::Jaccard(a) => jaccard(a)?,
        Command::Template(a) => {
            return emit_text(g, &template(a)?);
        }
    };
    let bytes = match g.format {
        Format::Json => {
            let mut doc = serde_json::Map::new();
            doc.insert(
                "header".into(),
                json!({
                    "command": command_name(&cli.command),
                    "args": args,
                    "seed": g.seed,
                    "version": env!("CARGO_PKG_VERSION"),
                }),
            );
            match out.json {
                Value::Object(map) => doc.extend(map),
                other => {
                    doc.insert("result".into(), other);
                }
            }
            let mut s = serde_json::to_string_pretty(&Value::Object(doc))?;
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => match out.csv {
            Some(bytes) => bytes,
            None => bail!("{} has no CSV output", command_name(&cli.command)),
        },
    };
    let path = if out.to_stdout { None } else { g.out.as_deref() };
    write_output(path, &bytes)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Influence(_) => "influence",
        Command::Calibrate(_) => "calibrate",
        Command::Sweep(_) => "sweep",
        Command::Auc(_) => "auc",
        Command::InitModel => "init-model",
        Command::Jaccard(_) => "jaccard",
        Command::Template(_) => "template",
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn emit_text(g: &GlobalArgs, text: &str) -> anyhow::Result<()> {
    write_output(g.out.as_deref(), text.as_bytes())
}

fn model_config(g: &GlobalArgs) -> anyhow::Result<Option<ModelConfig>> {
    g.config
        .as_ref()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let config: ModelConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(config)
        })
        .transpose()
}

fn load_model(g: &GlobalArgs) -> anyhow::Result<Weights> {
    let config = model_config(g)?;
    let weights = match (&g.weights, config) {
        (Some(path), Some(config)) => load_weights_expecting(path, &config)?,
        (Some(path), None) => load_weights(path)?,
        (None, config) => init_model(&config.unwrap_or_default())?,
    };
    Ok(weights)
}

fn read_prompt(g: &GlobalArgs, source: &PromptSource) -> anyhow::Result<TaggedPrompt> {
    let raw = match (&source.prompt, &source.text) {
        (Some(path), _) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(text)) => text.clone(),
        (None, None) => bail!("no prompt given"),
    };
    let mut deltas = DeltaConfig::default();
    for spec in &g.delta_map {
        deltas.apply_override(spec)?;
    }
    let options = TagOptions {
        deltas,
        keep_markers: source.keep_markers,
    };
    Ok(parse_tags_with(&raw, &options)?)
}

/// Query spans if any, otherwise the emphasis spans.
fn measured_spans(prompt: &TaggedPrompt) -> anyhow::Result<Vec<Range<usize>>> {
    let spans: Vec<_> = if prompt.query_spans.is_empty() {
        prompt.emphasis_spans.iter().map(|s| s.token_range.clone()).collect()
    } else {
        prompt.query_spans.iter().map(|s| s.token_range.clone()).collect()
    };
    if spans.is_empty() {
        bail!("prompt has no tagged span to measure; tag one or pass --span");
    }
    Ok(spans)
}

fn generate(g: &GlobalArgs, a: &GenerateArgs) -> anyhow::Result<Output> {
    let weights = load_model(g)?;
    let prompt = read_prompt(g, &a.source)?;
    let params = GenerationParams {
        mode: match a.mode {
            ModeArg::Greedy => SamplingMode::Greedy,
            ModeArg::Multinomial => SamplingMode::Multinomial,
        },
        temperature: a.temperature,
        seed: g.seed,
        max_tokens: a.max_tokens,
        bias_prompt_only: a.bias_prompt_only,
        influence: a.track_influence.map(|stride| InfluenceTracking {
            stride,
            variant: a.variant,
        }),
        ..GenerationParams::default()
    };
    let record = decode(&weights, &prompt, &params, !a.no_bias)?;
    Ok(Output::new(
        json!({ "prompt": prompt.clean_text, "generation": record }),
        Some(generation_csv(&record)?),
    ))
}

fn generation_csv(record: &GenerationRecord) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "token", "probability", "influence"])?;
    for (i, (token, p)) in record.tokens.iter().zip(&record.probabilities).enumerate() {
        let infl = record
            .influence
            .as_ref()
            .and_then(|v| v.get(i).copied().flatten())
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([i.to_string(), token.to_string(), p.to_string(), infl])?;
    }
    Ok(w.into_inner()?)
}

fn influence(g: &GlobalArgs, a: &InfluenceArgs) -> anyhow::Result<Output> {
    let weights = load_model(g)?;
    let prompt = read_prompt(g, &a.source)?;
    let spans = match &a.span {
        Some(r) => vec![r.clone()],
        None => measured_spans(&prompt)?,
    };
    let bias = if a.no_bias {
        BiasSpec::none()
    } else {
        prompt.bias_spec()
    };
    let options = TraceOptions {
        per_head: false,
        update_norm: match a.update_norm {
            UpdateNormArg::PostO => UpdateNorm::PostO,
            UpdateNormArg::PreO => UpdateNorm::PreO,
        },
    };
    let (_, trace) = forward_traced(&weights, &prompt.tokens(), &bias, &options)?;
    let map = compute_map_multi(&trace, &spans, a.variant)?;
    let mut csv = Vec::new();
    map.write_csv(&mut csv)?;
    Ok(Output::new(json!({ "map": map.to_json_value() }), Some(csv)))
}

fn calibrate(g: &GlobalArgs, a: &CalibrateArgs) -> anyhow::Result<Output> {
    let weights = load_model(g)?;
    let prompt = read_prompt(g, &a.source)?;
    let options = CalibrationOptions {
        transform: a.transform,
        layer_policy: a.layer_policy,
        delta_max: a.delta_max,
        variant: a.variant,
    };
    let result = calibrate_delta_with(&weights, &prompt, &options)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(&result)?;
    Ok(Output::new(
        json!({ "transform": a.transform, "calibration": result }),
        Some(w.into_inner()?),
    ))
}

fn sweep(g: &GlobalArgs, a: &SweepArgs) -> anyhow::Result<Output> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec: ExperimentSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.spec.display()))?;
    if let Some(config) = model_config(g)? {
        spec.model = config;
    }
    // relative corpus and input paths resolve against the spec's directory
    let base = a.spec.parent().unwrap_or(Path::new("."));
    for p in spec.corpus.iter_mut().chain(spec.inputs.iter_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    let output = run_experiment(&spec)?;
    let mut csv = Vec::new();
    output.write_csv(&mut csv)?;
    Ok(Output::new(json!({ "spec": spec, "result": output }), Some(csv)))
}

fn auc(a: &AucArgs) -> anyhow::Result<Output> {
    let mut groups = SampleGroups::new();
    for path in &a.inputs {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        read_samples_csv(file, &mut groups).with_context(|| format!("reading {}", path.display()))?;
    }
    let report = run_auc_report(&groups)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    Ok(Output::new(serde_json::to_value(&report)?, Some(csv)))
}

fn init(g: &GlobalArgs) -> anyhow::Result<Output> {
    let Some(path) = &g.out else {
        bail!("init-model needs --out for the weight file");
    };
    let config = model_config(g)?.unwrap_or_default().with_seed(g.seed);
    let weights = init_model(&config)?;
    save_weights(&weights, path)?;
    Ok(Output {
        json: json!({
            "config": config,
            "parameters": weights.parameter_count(),
            "path": path,
        }),
        csv: None,
        to_stdout: true,
    })
}

fn jaccard(a: &JaccardArgs) -> anyhow::Result<Output> {
    let generated = fs::read_to_string(&a.generated).with_context(|| format!("reading {}", a.generated.display()))?;
    let schema = match &a.schema {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => templates::JSON_SCHEMA_KEYS.to_string(),
    };
    let score = json_key_jaccard(&generated, &schema)?;
    Ok(Output::new(
        json!({ "jaccard": score }),
        Some(format!("jaccard\n{score}\n").into_bytes()),
    ))
}

fn template(a: &TemplateArgs) -> anyhow::Result<String> {
    let Some(body) = templates::by_name(&a.name) else {
        bail!("unknown template {}", a.name);
    };
    let mut values = Vec::with_capacity(a.values.len());
    for spec in &a.values {
        let (key, value) = spec
            .split_once('=')
            .with_context(|| format!("expected key=value, got {spec}"))?;
        let value = match value.strip_prefix('@') {
            Some(path) => fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
            None => value.to_string(),
        };
        values.push((key.to_string(), value));
    }
    let pairs: Vec<(&str, &str)> = values.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    Ok(templates::fill(body, &pairs))
}
