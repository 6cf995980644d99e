// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Every command writes its reports plus a
//! `manifest.json` into `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attribution::{
    all_components, attribute_stats, dla_by_source_group_with, dla_with, logit_lens, write_stats_csv, ComponentId,
    LnFreeze,
};
use crate::dataset::{load_dataset, save_dataset, FactEntry, TokenGroup};
use crate::error::{Error, Result};
use crate::fixtures::{build_fixture, FixtureKind, FixtureSpec};
use crate::interventions::{
    activation_patch_entries, attention_knockout, direct_path_ablation, eval_metrics, write_loss_change_csv,
    KnockoutMode, KnockoutOptions, LossChangeRow,
};
use crate::model::{load_model, ModelBundle, ModelPaths};
use crate::numerics::{argmax, rank_of, Precision};
use crate::taxonomy::{
    classify_heads, detect_additivity, ov_probe, write_labels_json, write_probe_csv, ClassifyOptions,
};
use crate::trace::{traced_forward, traced_forward_with, SourceRecording, Trace};

pub const LOG_ENV: &str = "ADDITIVE_RECALL_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "additive-recall",
    version,
    about = "Trace, attribute and intervene on small decoder-only transformers",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Model directory, or path to its config.json.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Tensor manifest (defaults to weights.json next to the config).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Vocab file (defaults to vocab.txt next to the config).
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    /// JSONL dataset of fact entries.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-prompt parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Only use entries of this relation.
    #[arg(long, global = true)]
    relation: Option<String>,
    /// Round every kernel output through 32-bit floats.
    #[arg(long, global = true)]
    float32: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump a full activation trace and its attention pattern.
    Trace(PromptArgs),
    /// Logit-lens readout at END for every layer.
    Lens(PromptArgs),
    /// Direct logit attribution per component.
    Dla(DlaArgs),
    /// Label the top heads Subject / Relation / Mixed.
    Classify(ClassifyArgs),
    /// Read a head's OV circuit as a vocabulary probe.
    Probe(ProbeArgs),
    /// Attention knockout between token groups.
    Knockout(KnockoutArgs),
    /// Patch component outputs between prompts of the same relation.
    Patch(PatchArgs),
    /// Remove components' direct paths to the logits.
    EdgeAblate(EdgeArgs),
    /// Test the additive-motif conditions.
    Additivity(AdditivityArgs),
    /// Fixture assets.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Rank of the answer under the clean model, with a histogram.
    RankFilter(RankFilterArgs),
}

#[derive(Debug, Args)]
struct PromptArgs {
    /// Raw prompt text (instead of a dataset).
    #[arg(long)]
    prompt: Option<String>,
    /// Dataset entry to use when no prompt is given (all entries if omitted, where supported).
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Debug, Args)]
struct DlaArgs {
    /// Also split head DLA by source token group.
    #[arg(long)]
    by_source: bool,
    #[arg(long, default_value = "center-scale")]
    ln_style: String,
    /// Comma-separated components (e.g. L0H1,MLP2,embed,bias) or `all`.
    #[arg(long, default_value = "all")]
    components: String,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Heads to probe, comma-separated.
    #[arg(long)]
    components: String,
    #[arg(long)]
    prompt: Option<String>,
    /// Probe position (default: final subject token, or the last token of a raw prompt).
    #[arg(long)]
    position: Option<usize>,
    /// Minimum probability reported.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct KnockoutArgs {
    #[arg(long, default_value = "RELATION")]
    dest: String,
    #[arg(long, default_value = "SUBJECT")]
    src: String,
    /// Layer range `a..b` (all layers if omitted).
    #[arg(long)]
    layers: Option<String>,
    /// Zero cells after softmax without renormalizing.
    #[arg(long)]
    post_softmax: bool,
    /// Source group whose head DLA ranks are reported.
    #[arg(long, default_value = "RELATION")]
    attribute_group: String,
}

#[derive(Debug, Args)]
struct PatchArgs {
    #[arg(long)]
    components: String,
    /// `end` or `all`.
    #[arg(long, default_value = "end")]
    positions: String,
}

#[derive(Debug, Args)]
struct EdgeArgs {
    /// Comma-separated components or `all`.
    #[arg(long)]
    components: String,
}

#[derive(Debug, Args)]
struct AdditivityArgs {
    #[arg(long)]
    components: String,
    /// Components added to every sum but not themselves tested.
    #[arg(long, default_value = "")]
    context: String,
    /// Cosine similarity below which two components count as dissimilar.
    #[arg(long, default_value_t = crate::taxonomy::DEFAULT_SIMILARITY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Debug, Args)]
struct RankFilterArgs {
    /// Keep entries whose answer ranks at or below this.
    #[arg(long, default_value_t = 0)]
    max_rank: usize,
}

#[derive(Debug, Subcommand)]
enum FixtureAction {
    /// Write model, dataset and ground-truth files for fixtures.
    Emit {
        /// Fixture name or `all`.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        d_model: Option<usize>,
    },
}

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub model: Option<BTreeMap<&'static str, String>>,
    pub dataset: Option<String>,
    pub out: String,
    pub seed: u64,
    pub params: BTreeMap<String, Value>,
    pub outputs: Vec<String>,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| execute(&cli))
}

struct Ctx<'a> {
    common: &'a Common,
    command: &'static str,
    params: BTreeMap<String, Value>,
    outputs: Vec<String>,
    model_paths: Option<ModelPaths>,
}

impl<'a> Ctx<'a> {
    fn new(common: &'a Common, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        Ok(Ctx {
            common,
            command,
            params: BTreeMap::new(),
            outputs: Vec::new(),
            model_paths: None,
        })
    }

    fn param(&mut self, k: &str, v: impl Serialize) {
        self.params
            .insert(k.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn model(&mut self) -> Result<ModelBundle> {
        let arg = self
            .common
            .model
            .as_ref()
            .ok_or_else(|| Error::Invalid("--model is required for this command".into()))?;
        let paths = if arg.is_dir() {
            ModelPaths::in_dir(arg)
        } else {
            let dir = arg.parent().unwrap_or(Path::new("."));
            ModelPaths {
                config: arg.clone(),
                ..ModelPaths::in_dir(dir)
            }
        };
        let paths = ModelPaths {
            weights: self.common.weights.clone().unwrap_or(paths.weights),
            vocab: self.common.vocab.clone().unwrap_or(paths.vocab),
            config: paths.config,
        };
        log::info!("loading model from {}", paths.config.display());
        let mut model = load_model(&paths.config, &paths.weights, &paths.vocab)?;
        if self.common.float32 {
            model.config.precision = Precision::F32;
        }
        self.model_paths = Some(paths);
        Ok(model)
    }

    fn entries(&self, model: &ModelBundle) -> Result<Vec<FactEntry>> {
        let path = self
            .common
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Invalid("--dataset is required for this command".into()))?;
        let mut entries = load_dataset(path, &model.vocab)?;
        if let Some(rel) = &self.common.relation {
            entries.retain(|e| &e.relation_id == rel);
        }
        if entries.is_empty() {
            return Err(Error::Invalid("no dataset entries selected".into()));
        }
        log::info!("{} entries selected", entries.len());
        Ok(entries)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.common.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
    }

    fn finish(self) -> Result<()> {
        let c = self.common;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.to_string(),
            model: self.model_paths.map(|p| {
                BTreeMap::from([
                    ("config", p.config.display().to_string()),
                    ("weights", p.weights.display().to_string()),
                    ("vocab", p.vocab.display().to_string()),
                ])
            }),
            dataset: c.dataset.as_ref().map(|p| p.display().to_string()),
            out: c.out.display().to_string(),
            seed: c.seed,
            params: self.params,
            outputs: self.outputs,
        };
        let path = c.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn parse_components(spec: &str, model: &ModelBundle) -> Result<Vec<ComponentId>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(all_components(model));
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let c: ComponentId = part.parse()?;
        c.check(model)?;
        if out.contains(&c) {
            return Err(Error::DuplicateComponent(c.to_string()));
        }
        out.push(c);
    }
    Ok(out)
}

fn parse_groups(spec: &str) -> Result<Vec<TokenGroup>> {
    spec.split(',').map(|s| s.trim().parse()).collect()
}

fn parse_range(spec: &str) -> Result<Range<usize>> {
    let bad = || Error::Parse(format!("layer range `{spec}` is not of the form a..b"));
    let (a, b) = spec.split_once("..").ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok(a..b)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn rec<W: Write>(w: &mut csv::Writer<W>, fields: &[String]) -> Result<()> {
    w.write_record(fields).map_err(crate::trace::csv_err)
}

fn done<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("csv output", e))
}

fn tok(model: &ModelBundle, t: usize) -> String {
    model.vocab.token(t).unwrap_or("?").to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `(label, tokens, entry)` input of a prompt-level command.
type PromptInput = (String, Vec<usize>, Option<FactEntry>);

fn prompt_inputs(ctx: &mut Ctx, model: &ModelBundle, args: &PromptArgs) -> Result<Vec<PromptInput>> {
    if let Some(p) = &args.prompt {
        ctx.param("prompt", p);
        return Ok(vec![(p.clone(), model.vocab.tokenize(p)?, None)]);
    }
    let entries = ctx.entries(model)?;
    let pick: Vec<FactEntry> = match args.index {
        Some(i) => {
            ctx.param("index", i);
            vec![entries
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("entry {i} outside a dataset of {}", entries.len())))?]
        }
        None => entries,
    };
    Ok(pick
        .into_iter()
        .map(|e| (e.prompt.clone(), e.prompt_tokens.clone(), Some(e)))
        .collect())
}

fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Trace(args) => cmd_trace(Ctx::new(common, "trace")?, args),
        Command::Lens(args) => cmd_lens(Ctx::new(common, "lens")?, args),
        Command::Dla(args) => cmd_dla(Ctx::new(common, "dla")?, args),
        Command::Classify(args) => cmd_classify(Ctx::new(common, "classify")?, args),
        Command::Probe(args) => cmd_probe(Ctx::new(common, "probe")?, args),
        Command::Knockout(args) => cmd_knockout(Ctx::new(common, "knockout")?, args),
        Command::Patch(args) => cmd_patch(Ctx::new(common, "patch")?, args),
        Command::EdgeAblate(args) => cmd_edge(Ctx::new(common, "edge-ablate")?, args),
        Command::Additivity(args) => cmd_additivity(Ctx::new(common, "additivity")?, args),
        Command::Fixtures {
            action: FixtureAction::Emit { kind, d_model },
        } => cmd_fixtures(Ctx::new(common, "fixtures emit")?, kind, *d_model),
        Command::RankFilter(args) => cmd_rank_filter(Ctx::new(common, "rank-filter")?, args),
    }
}

fn cmd_trace(mut ctx: Ctx, args: &PromptArgs) -> Result<()> {
    let model = ctx.model()?;
    let index = args.index.unwrap_or(0);
    let args = PromptArgs {
        prompt: args.prompt.clone(),
        index: Some(index),
    };
    let (_, tokens, _) = prompt_inputs(&mut ctx, &model, &args)?.remove(0);
    let trace = traced_forward(&model, &tokens, None)?;
    let manifest = ctx.path("trace.json");
    ctx.outputs.push("trace.bin".into());
    trace.dump(&manifest)?;
    let w = ctx.create("attention.csv")?;
    trace.write_attention_csv(w)?;
    ctx.finish()
}

fn cmd_lens(mut ctx: Ctx, args: &PromptArgs) -> Result<()> {
    let model = ctx.model()?;
    let inputs = prompt_inputs(&mut ctx, &model, args)?;
    let rows: Vec<Vec<Vec<String>>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (_, tokens, entry))| {
            let trace = traced_forward_with(&model, tokens, None, SourceRecording::None)?;
            let end = trace.end_pos();
            (0..=model.n_layers())
                .map(|l| {
                    let logits = logit_lens(&model, &trace, l, end)?;
                    let top = argmax(&logits).unwrap_or(0);
                    let (a_tok, a_rank, a_logit) = match entry {
                        Some(e) => (
                            tok(&model, e.a_first_token),
                            rank_of(&logits, e.a_first_token)?.to_string(),
                            logits[e.a_first_token].to_string(),
                        ),
                        None => Default::default(),
                    };
                    Ok(vec![
                        i.to_string(),
                        l.to_string(),
                        tok(&model, top),
                        logits[top].to_string(),
                        a_tok,
                        a_rank,
                        a_logit,
                    ])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(ctx.create("lens.csv")?);
    rec(
        &mut w,
        &[
            "entry",
            "layer",
            "top_token",
            "top_logit",
            "attribute",
            "attribute_rank",
            "attribute_logit",
        ]
        .map(String::from),
    )?;
    for r in rows.iter().flatten() {
        rec(&mut w, r)?;
    }
    done(w)?;
    ctx.finish()
}

fn cmd_dla(mut ctx: Ctx, args: &DlaArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let style: LnFreeze = args.ln_style.parse()?;
    let comps = parse_components(&args.components, &model)?;
    ctx.param("ln_style", style);
    ctx.param("by_source", args.by_source);
    ctx.param("components", comps.iter().map(|c| c.to_string()).collect::<Vec<_>>());

    type Out = (Vec<Vec<String>>, Vec<(usize, crate::attribution::AttributeStats)>);
    let per_entry: Vec<Out> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<Out> {
            let trace = traced_forward_with(&model, &e.prompt_tokens, None, SourceRecording::Full)?;
            let end = e.end_pos();
            let mut tokens = vec![("a", e.a_first_token)];
            tokens.extend(e.r_first_tokens(&model.vocab)?.into_iter().map(|t| ("R", t)));
            tokens.extend(e.s_first_tokens(&model.vocab)?.into_iter().map(|t| ("S", t)));
            let mut rows = Vec::new();
            let mut stats = Vec::new();
            for &c in &comps {
                let total = dla_with(&model, &trace, c, end, style)?;
                let mut push = |group: &str, values: &[f64]| {
                    for &(role, t) in &tokens {
                        rows.push(vec![
                            i.to_string(),
                            c.to_string(),
                            group.to_string(),
                            role.to_string(),
                            tok(&model, t),
                            values[t].to_string(),
                        ]);
                    }
                };
                push("ALL", &total.values);
                if args.by_source && c.is_head() {
                    let split = dla_by_source_group_with(&model, &trace, c, end, &e.spans, style)?;
                    for (g, v) in &split.groups {
                        push(g.as_str(), &v.values);
                    }
                    push("EXTRA", &split.extra);
                }
                stats.push((i, attribute_stats(&model, &trace, e, c, args.by_source)?));
            }
            Ok((rows, stats))
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(ctx.create("dla.csv")?);
    rec(
        &mut w,
        &["entry", "component", "group", "role", "token", "dla"].map(String::from),
    )?;
    let mut all_stats = Vec::new();
    for (rows, stats) in per_entry {
        for r in &rows {
            rec(&mut w, r)?;
        }
        all_stats.extend(stats);
    }
    done(w)?;
    write_stats_csv(ctx.create("stats.csv")?, &all_stats)?;
    ctx.finish()
}

fn by_relation(entries: Vec<FactEntry>) -> BTreeMap<String, Vec<FactEntry>> {
    let mut out: BTreeMap<String, Vec<FactEntry>> = BTreeMap::new();
    for e in entries {
        out.entry(e.relation_id.clone()).or_default().push(e);
    }
    out
}

fn cmd_classify(mut ctx: Ctx, args: &ClassifyArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let opts = ClassifyOptions {
        top_k: args.top_k,
        ..Default::default()
    };
    ctx.param("top_k", args.top_k);
    for (rel, group) in by_relation(entries) {
        let labels = classify_heads(&model, &group, &opts)?;
        let mut w = ctx.create(&format!("labels_{rel}.json"))?;
        write_labels_json(&mut w, &rel, &labels)?;
        w.write_all(b"\n").map_err(|e| Error::io("labels json", e))?;
    }
    ctx.finish()
}

fn cmd_probe(mut ctx: Ctx, args: &ProbeArgs) -> Result<()> {
    let model = ctx.model()?;
    let heads = parse_components(&args.components, &model)?;
    if let Some(c) = heads.iter().find(|c| !c.is_head()) {
        return Err(Error::InvalidComponent(format!("{c} is not an attention head")));
    }
    ctx.param("threshold", args.threshold);
    ctx.param("position", args.position);
    let inputs = prompt_inputs(
        &mut ctx,
        &model,
        &PromptArgs {
            prompt: args.prompt.clone(),
            index: None,
        },
    )?;
    let mut rows = Vec::new();
    for (_, tokens, entry) in &inputs {
        let trace = traced_forward_with(&model, tokens, None, SourceRecording::None)?;
        let pos = match (args.position, entry) {
            (Some(p), _) => p,
            (None, Some(e)) if !e.spans.subject.is_empty() => e.spans.subject.end - 1,
            _ => tokens.len() - 1,
        };
        let label = tok(
            &model,
            *tokens
                .get(pos)
                .ok_or_else(|| Error::Invalid(format!("probe position {pos} outside the prompt")))?,
        );
        for &h in &heads {
            rows.push((label.clone(), h, ov_probe(&model, &trace, h, pos, args.threshold)?));
        }
    }
    write_probe_csv(ctx.create("probe.csv")?, &rows, &model)?;
    ctx.finish()
}

/// Rank of `a` in the summed head DLA from `group` at END.
fn group_rank(model: &ModelBundle, trace: &Trace, e: &FactEntry, group: TokenGroup) -> Result<usize> {
    let mut sum = vec![0.0; model.vocab_size()];
    for l in 0..model.n_layers() {
        for h in 0..model.n_heads() {
            let split = dla_by_source_group_with(
                model,
                trace,
                ComponentId::head(l, h),
                e.end_pos(),
                &e.spans,
                LnFreeze::default(),
            )?;
            crate::numerics::add_assign(&mut sum, &split.groups[&group].values);
        }
    }
    rank_of(&sum, e.a_first_token)
}

fn cmd_knockout(mut ctx: Ctx, args: &KnockoutArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let dest = parse_groups(&args.dest)?;
    let src = parse_groups(&args.src)?;
    let group: TokenGroup = args.attribute_group.parse()?;
    let opts = KnockoutOptions {
        layers: args.layers.as_deref().map(parse_range).transpose()?,
        mode: if args.post_softmax {
            KnockoutMode::PostSoftmaxZero
        } else {
            KnockoutMode::PreSoftmax
        },
    };
    ctx.param("dest", &dest);
    ctx.param("src", &src);
    ctx.param("layers", &args.layers);
    ctx.param("post_softmax", args.post_softmax);
    ctx.param("attribute_group", group);
    let rows: Vec<Vec<String>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let clean = traced_forward(&model, &e.prompt_tokens, None)?;
            let ko = attention_knockout(&model, &e.prompt_tokens, &e.spans, &dest, &src, &opts)?;
            let before = eval_metrics(&clean.logits, e, None, None)?;
            let after = eval_metrics(&ko.logits, e, None, Some(&before))?;
            Ok(vec![
                i.to_string(),
                e.subject.clone(),
                e.attribute.clone(),
                before.rank.to_string(),
                after.rank.to_string(),
                before.logprob.to_string(),
                after.logprob.to_string(),
                group_rank(&model, &clean, e, group)?.to_string(),
                group_rank(&model, &ko, e, group)?.to_string(),
            ])
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(ctx.create("knockout.csv")?);
    rec(
        &mut w,
        &[
            "entry",
            "subject",
            "attribute",
            "rank_before",
            "rank_after",
            "logprob_before",
            "logprob_after",
            "group_rank_before",
            "group_rank_after",
        ]
        .map(String::from),
    )?;
    for r in &rows {
        rec(&mut w, r)?;
    }
    done(w)?;
    ctx.finish()
}

fn cmd_patch(mut ctx: Ctx, args: &PatchArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let comps = parse_components(&args.components, &model)?;
    ctx.param("components", comps.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    ctx.param("positions", &args.positions);
    // Source: the next entry of the same relation with the same layout.
    let pairs: Vec<(usize, usize)> = (0..entries.len())
        .filter_map(|i| {
            let n = entries.len();
            (1..n)
                .map(|k| (i + k) % n)
                .find(|&j| entries[j].relation_id == entries[i].relation_id && entries[j].spans == entries[i].spans)
                .map(|j| (i, j))
        })
        .collect();
    let rows: Vec<Vec<String>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (t, s) = (&entries[i], &entries[j]);
            let positions: Vec<usize> = match args.positions.as_str() {
                "end" => vec![t.end_pos()],
                "all" => (0..t.prompt_tokens.len()).collect(),
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown patch positions `{other}` (end or all)"
                    )))
                }
            };
            let clean = traced_forward_with(&model, &t.prompt_tokens, None, SourceRecording::None)?;
            let patched = activation_patch_entries(&model, t, s, &comps, &positions)?;
            let before = eval_metrics(&clean.logits, t, None, None)?;
            let after = eval_metrics(&patched.logits, t, None, Some(&before))?;
            Ok(vec![
                i.to_string(),
                j.to_string(),
                t.subject.clone(),
                s.subject.clone(),
                before.logprob.to_string(),
                after.logprob.to_string(),
                (after.logprob - before.logprob).to_string(),
                before.rank.to_string(),
                after.rank.to_string(),
            ])
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(ctx.create("patch.csv")?);
    rec(
        &mut w,
        &[
            "target",
            "source",
            "target_subject",
            "source_subject",
            "logprob_before",
            "logprob_after",
            "logprob_change",
            "rank_before",
            "rank_after",
        ]
        .map(String::from),
    )?;
    for r in &rows {
        rec(&mut w, r)?;
    }
    done(w)?;
    ctx.finish()
}

fn cmd_edge(mut ctx: Ctx, args: &EdgeArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let comps = parse_components(&args.components, &model)?;
    ctx.param("components", comps.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    type Row = (String, f64, f64, Vec<String>);
    let rows: Vec<Row> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let trace = traced_forward_with(&model, &e.prompt_tokens, None, SourceRecording::Full)?;
            let ablated = direct_path_ablation(&model, &trace, &comps, None)?;
            let before = eval_metrics(&trace.logits, e, None, None)?;
            let after = eval_metrics(&ablated, e, None, Some(&before))?;
            let max_abs = ablated.row(e.end_pos()).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            Ok((
                e.relation_id.clone(),
                before.loss,
                after.loss,
                vec![
                    i.to_string(),
                    e.relation_id.clone(),
                    before.loss.to_string(),
                    after.loss.to_string(),
                    opt(after.percent_change),
                    before.rank.to_string(),
                    after.rank.to_string(),
                    max_abs.to_string(),
                ],
            ))
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(ctx.create("edge_ablate.csv")?);
    rec(
        &mut w,
        &[
            "entry",
            "relation",
            "baseline_loss",
            "loss_after",
            "percent_change",
            "rank_before",
            "rank_after",
            "max_abs_final_logit",
        ]
        .map(String::from),
    )?;
    let mut per_rel: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (rel, b, a, r) in &rows {
        rec(&mut w, r)?;
        let acc = per_rel.entry(rel.clone()).or_default();
        acc.0 += b;
        acc.1 += a;
        acc.2 += 1;
    }
    done(w)?;
    let summary: Vec<LossChangeRow> = per_rel
        .into_iter()
        .map(|(relation, (b, a, n))| {
            let (b, a) = (b / n as f64, a / n as f64);
            LossChangeRow {
                relation,
                baseline_loss: b,
                loss_after: a,
                percent_change: (b != 0.0).then(|| 100.0 * (a - b) / b),
            }
        })
        .collect();
    write_loss_change_csv(ctx.create("loss_change.csv")?, &summary)?;
    ctx.finish()
}

fn cmd_additivity(mut ctx: Ctx, args: &AdditivityArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    let comps = parse_components(&args.components, &model)?;
    let context = parse_components(&args.context, &model)?;
    ctx.param("components", comps.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    ctx.param("context", context.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    ctx.param("threshold", args.threshold);
    let selected: Vec<(usize, &FactEntry)> = match args.index {
        Some(i) => vec![(
            i,
            entries
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("entry {i} outside a dataset of {}", entries.len())))?,
        )],
        None => entries.iter().enumerate().collect(),
    };
    let reports: Vec<Value> = selected
        .par_iter()
        .map(|&(i, e)| {
            let trace = traced_forward_with(&model, &e.prompt_tokens, None, SourceRecording::None)?;
            let report = detect_additivity(&model, &trace, e, &comps, args.threshold, &context)?;
            Ok(json!({ "entry": i, "prompt": e.prompt, "attribute": e.attribute, "report": report }))
        })
        .collect::<Result<_>>()?;
    let mut w = ctx.create("additivity.json")?;
    serde_json::to_writer_pretty(&mut w, &reports)?;
    w.write_all(b"\n").map_err(|e| Error::io("additivity json", e))?;
    w.flush().map_err(|e| Error::io("additivity json", e))?;
    ctx.finish()
}

fn cmd_fixtures(mut ctx: Ctx, kind: &str, d_model: Option<usize>) -> Result<()> {
    let kinds: Vec<FixtureKind> = if kind.eq_ignore_ascii_case("all") {
        FixtureKind::ALL.to_vec()
    } else {
        kind.split(',').map(str::parse).collect::<Result<_>>()?
    };
    ctx.param("kinds", &kinds);
    ctx.param("d_model", d_model);
    for k in kinds {
        let fixture = build_fixture(&FixtureSpec {
            kind: k,
            seed: ctx.common.seed,
            d_model,
        })?;
        let dir = ctx.common.out.join(k.as_str());
        fixture.emit(&dir)?;
        for f in [
            "config.json",
            "weights.json",
            "weights.bin",
            "vocab.txt",
            "dataset.jsonl",
            "expected.csv",
            "truth.json",
        ] {
            ctx.outputs.push(format!("{}/{f}", k.as_str()));
        }
        log::info!("wrote {k} fixture to {}", dir.display());
    }
    ctx.finish()
}

fn cmd_rank_filter(mut ctx: Ctx, args: &RankFilterArgs) -> Result<()> {
    let model = ctx.model()?;
    let entries = ctx.entries(&model)?;
    ctx.param("max_rank", args.max_rank);
    let filtered = crate::dataset::filter_by_rank(&model, &entries, args.max_rank)?;
    filtered.write_histogram_csv(ctx.create("rank_histogram.csv")?)?;
    let kept = ctx.path("kept.jsonl");
    save_dataset(&kept, &filtered.kept)?;
    ctx.finish()
}
