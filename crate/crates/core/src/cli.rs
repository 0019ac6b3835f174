//! Command-line front end.
//!
//! Every subcommand writes a `run.json` next to its outputs holding the
//! parsed arguments; `mmprune replay <run.json>` re-executes it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_das, LayerScore};
use crate::diversity::{ImportanceMode, PairSampling};
use crate::error::Error;
use crate::eval::{
    attention_by_modality_over, reconstruction_report, rel_avg, sparsity_report_model, sparsity_report_plan,
    EvalMetrics, SparsityReport,
};
use crate::model::{load_checkpoint, read_sequences, save_checkpoint, write_sequences, TokenSequence, ToyModel};
use crate::pruner::{calibration_diversity, prune_model, Allocation, GroupKind, Method, PruneConfig};
use crate::selection::{AmiaParams, SelectionKind, SelectionLimits};
use crate::synth::{
    parse_modalities, NoiseConfig, ScenarioConfig, ScenarioModelConfig, WorldConfig,
};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments; nothing was run.
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Runtime(e) => (e.kind(), e.to_string()),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "mmprune", version, about = "Token-adaptive pruning for multimodal transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic model plus calibration and evaluation data.
    GenSynth(GenSynthArgs),
    /// Prune a model and write the masked checkpoint and a report.
    Prune(PruneArgs),
    /// Write diversity, attention, sparsity, and selection CSVs.
    Analyze(AnalyzeArgs),
    /// Run a method × sparsity grid and tabulate fidelity.
    Compare(CompareArgs),
    /// Re-run the command recorded in a `run.json`.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `custom` uses the flags below; `noisy-modality` uses the built-in
    /// adversarial setting and only honours --seed and the sample counts.
    #[arg(long, default_value = "custom")]
    pub scenario: String,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub n_blocks: usize,
    /// Comma-separated `name:tokens` list, in sequence order.
    #[arg(long, default_value = "visual:24,language:16")]
    pub modalities: String,
    #[arg(long, default_value_t = 128)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Replace this modality's calibration tokens by artifact noise.
    #[arg(long)]
    pub noise_modality: Option<String>,
    #[arg(long, default_value_t = 8.0)]
    pub noise_scale: f32,
    #[arg(long, default_value_t = 0.0)]
    pub relevance_gain: f32,
    /// Comma-separated block indices to collapse.
    #[arg(long, value_delimiter = ',')]
    pub redundant_blocks: Vec<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Pruning knobs shared by `prune`, `analyze`, and `compare`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneOpts {
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// `row` or `layer`.
    #[arg(long, default_value = "row")]
    pub group: String,
    /// `full`, `random`, `attention`, or `amia`; defaults to the method's.
    #[arg(long)]
    pub selection: Option<String>,
    /// `uniform`, `das`, `all-token-das`, `block-das`, or `owl`.
    #[arg(long)]
    pub allocation: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma_forward: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma_reverse: f64,
    #[arg(long, default_value_t = 0.1)]
    pub mmd_coef: f64,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub random_tokens: usize,
    #[arg(long, default_value_t = 5.0)]
    pub owl_m: f64,
    #[arg(long, default_value_t = 0.08)]
    pub owl_lambda: f64,
    /// Estimate diversity from this many random token pairs per term.
    #[arg(long)]
    pub pair_samples: Option<usize>,
    /// Use at most this many calibration sequences.
    #[arg(long, default_value_t = 128)]
    pub calib_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prune block by block on activations of the already-pruned prefix.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl PruneOpts {
    pub fn to_config(&self, method: Method, sparsity: f64) -> CliResult<PruneConfig> {
        check_sparsity(sparsity)?;
        if self.k == 0 {
            return Err(usage("--k must be at least 1"));
        }
        if !(self.gamma_forward > 0.0) || !(self.gamma_reverse > 0.0) {
            return Err(usage("kernel gammas must be positive"));
        }
        if !(self.mmd_coef > 0.0) {
            return Err(usage("--mmd-coef must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.owl_lambda >= 0.0) {
            return Err(usage("lambdas must be non-negative"));
        }
        if !(self.owl_m > 1.0) {
            return Err(usage("--owl-m must exceed 1"));
        }
        if self.calib_size == 0 {
            return Err(usage("--calib-size must be positive"));
        }
        if self.threads == Some(0) {
            return Err(usage("--threads must be positive"));
        }
        let group: GroupKind = self.group.parse().map_err(|e: Error| usage(e.to_string()))?;
        let selection = match &self.selection {
            None => None,
            Some(s) => Some(match s.parse::<SelectionKind>().map_err(|e| usage(e.to_string()))? {
                SelectionKind::Random { .. } => SelectionKind::Random { n: self.random_tokens },
                other => other,
            }),
        };
        let allocation = match &self.allocation {
            None => None,
            Some(a) => Some(a.parse::<Allocation>().map_err(|e| usage(e.to_string()))?),
        };
        let cfg = PruneConfig {
            method,
            sparsity,
            lambda: self.lambda,
            owl_m: self.owl_m,
            owl_lambda: self.owl_lambda,
            group,
            allocation,
            selection,
            amia: AmiaParams {
                k: self.k,
                gamma_forward: self.gamma_forward,
                gamma_reverse: self.gamma_reverse,
                mmd_coefficient: self.mmd_coef,
                limits: SelectionLimits {
                    min_count: self.min_tokens,
                    max_count: self.max_tokens,
                },
            },
            pair_sampling: match self.pair_samples {
                Some(pairs) => PairSampling::Sampled { pairs, seed: self.seed },
                None => PairSampling::Exhaustive,
            },
            seed: self.seed,
            sequential: self.sequential,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value = "tamp")]
    pub method: String,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; defaults to `<out>/report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: PruneOpts,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also run adaptive selection and write `selection.csv`.
    #[arg(long = "with-selection")]
    pub with_selection: bool,
    /// Diversity summary used for the plan: `modality` or `all-token`.
    #[arg(long, default_value = "modality")]
    pub mode: String,
    /// Target of the diversity-aware plan written to `plan.csv`.
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: PruneOpts,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "magnitude,wanda,owl,das,amia,tamp")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub sparsities: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: PruneOpts,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub run: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    tool: String,
    version: String,
    #[serde(flatten)]
    command: Command,
}

fn check_sparsity(p: f64) -> CliResult {
    if !(p > 0.0 && p < 1.0) {
        return Err(usage(format!("sparsity {p} must lie strictly between 0 and 1")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_text(path, &text)
}

fn write_run(out: &Path, command: &Command) -> CliResult {
    write_json(
        &out.join("run.json"),
        &RunRecord {
            tool: "mmprune".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.clone(),
        },
    )
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Runtime(Error::io(path, std::io::Error::other(e.to_string())))
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if !path.exists() {
        return Err(usage(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

fn load_inputs(model: &Path, calib: &Path, calib_size: usize) -> CliResult<(ToyModel, Vec<TokenSequence>)> {
    require_file(model, "model directory")?;
    require_file(calib, "calibration file")?;
    let model = load_checkpoint(model)?;
    let mut seqs = read_sequences(calib, Some(model.d_model()))?;
    seqs.truncate(calib_size);
    Ok((model, seqs))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    match threads {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| usage(format!("cannot start {n} threads: {e}")))?;
            pool.install(f)
        }
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> CliResult<ScenarioConfig> {
    let cfg = match args.scenario.as_str() {
        "noisy-modality" => {
            let mut c = ScenarioConfig::noisy_modality(args.seed);
            c.calib_samples = args.calib_samples;
            c.eval_samples = args.eval_samples;
            c
        }
        "custom" => {
            let modalities = parse_modalities(&args.modalities).map_err(|e| usage(e.to_string()))?;
            if args.d_model == 0 || args.n_heads == 0 || args.d_model % args.n_heads != 0 {
                return Err(usage("--d-model must be a positive multiple of --n-heads"));
            }
            if args.d_model < 2 || args.d_ff == 0 || args.n_blocks == 0 {
                return Err(usage("--d-model ≥ 2, --d-ff ≥ 1 and --n-blocks ≥ 1 are required"));
            }
            let mut model = ScenarioModelConfig::new(args.d_model, args.n_heads, args.d_ff, args.n_blocks, args.seed.wrapping_add(1));
            model.relevance_gain = args.relevance_gain;
            model.redundant_blocks = args.redundant_blocks.clone();
            if model.redundant_blocks.iter().any(|&b| b >= args.n_blocks) {
                return Err(usage("--redundant-blocks index out of range"));
            }
            let mut world = WorldConfig::new(args.d_model, modalities, args.seed);
            world.artifact_channels = world.artifact_channels.min(args.d_model - 1);
            let noise = match &args.noise_modality {
                Some(m) => {
                    if !world.modalities.iter().any(|s| s.name == *m) {
                        return Err(usage(format!("--noise-modality `{m}` is not among --modalities")));
                    }
                    let mut n = NoiseConfig::new(m.clone());
                    n.scale = args.noise_scale;
                    Some(n)
                }
                None => None,
            };
            ScenarioConfig {
                world,
                model,
                noise,
                calib_samples: args.calib_samples,
                eval_samples: args.eval_samples,
            }
        }
        other => return Err(usage(format!("unknown scenario `{other}`"))),
    };
    if cfg.calib_samples == 0 || cfg.eval_samples == 0 {
        return Err(usage("sample counts must be positive"));
    }
    let sc = with_threads(args.threads, || Ok(cfg.build()?))?;
    create_dir(&args.out)?;
    save_checkpoint(&sc.model, args.out.join("model"))?;
    write_sequences(args.out.join("calib.jsonl"), "calib.bin", &sc.calib)?;
    write_sequences(args.out.join("eval.jsonl"), "eval.bin", &sc.eval)?;
    write_json(&args.out.join("scenario.json"), &cfg)?;
    Ok(cfg)
}

pub fn cmd_prune(args: &PruneArgs) -> CliResult {
    let method: Method = args.method.parse().map_err(|e: Error| usage(e.to_string()))?;
    let cfg = args.opts.to_config(method, args.sparsity)?;
    let (model, calib) = load_inputs(&args.model, &args.calib, args.opts.calib_size)?;
    let (pruned, report) = with_threads(args.opts.threads, || Ok(prune_model(&model, &calib, &cfg)?))?;
    create_dir(&args.out)?;
    save_checkpoint(&pruned, args.out.join("model"))?;
    write_json(&args.out.join("plan.json"), &report.plan.ratio_map())?;
    let report_path = args.report.clone().unwrap_or_else(|| args.out.join("report.json"));
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&report_path, &report)?;
    Ok(())
}

fn sparsity_rows(r: &SparsityReport) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let kinds = r.by_kind.iter().map(|k| vec![k.kind.to_string(), f(k.mean)]).collect();
    let blocks = r
        .by_block
        .iter()
        .map(|b| vec![b.block.to_string(), f(b.mean), f(b.weighted)])
        .collect();
    (kinds, blocks)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult {
    let mode = match args.mode.as_str() {
        "modality" => ImportanceMode::ModalityAware,
        "all-token" => ImportanceMode::AllToken,
        other => return Err(usage(format!("unknown diversity mode `{other}`"))),
    };
    let cfg = args.opts.to_config(Method::Amia, args.sparsity)?;
    let (model, calib) = load_inputs(&args.model, &args.calib, args.opts.calib_size)?;
    create_dir(&args.out)?;
    with_threads(args.opts.threads, || {
        let stats = calibration_diversity(&model, &calib, mode, cfg.pair_sampling)?;

        let mut intra_names: Vec<String> = Vec::new();
        let mut inter_names: Vec<String> = Vec::new();
        for (_, s) in &stats {
            for t in &s.intra {
                if !intra_names.contains(&t.modality.name) {
                    intra_names.push(t.modality.name.clone());
                }
            }
            for t in &s.inter {
                let n = format!("{}|{}", t.a.name, t.b.name);
                if !inter_names.contains(&n) {
                    inter_names.push(n);
                }
            }
        }
        let mut header: Vec<String> = ["block", "kind", "importance", "all_token"].map(String::from).to_vec();
        header.extend(intra_names.iter().map(|n| format!("intra:{n}")));
        header.extend(inter_names.iter().map(|n| format!("inter:{n}")));
        let rows: Vec<Vec<String>> = stats
            .iter()
            .map(|(id, s)| {
                let mut r = vec![id.block.to_string(), id.kind.to_string(), f(s.importance)];
                r.push(s.all_token.map(f).unwrap_or_default());
                for n in &intra_names {
                    r.push(s.intra.iter().find(|t| t.modality.name == *n).map(|t| f(t.value)).unwrap_or_default());
                }
                for n in &inter_names {
                    r.push(
                        s.inter
                            .iter()
                            .find(|t| format!("{}|{}", t.a.name, t.b.name) == *n)
                            .map(|t| f(t.value))
                            .unwrap_or_default(),
                    );
                }
                r
            })
            .collect();
        write_csv(&args.out.join("diversity.csv"), &header, &rows)?;

        let scores: Vec<LayerScore> = stats
            .iter()
            .map(|(id, s)| LayerScore {
                layer: *id,
                param_count: model.layer(*id).param_count(),
                importance: s.importance,
            })
            .collect();
        let plan = allocate_das(&scores, args.sparsity, args.opts.lambda)?;
        let rows: Vec<Vec<String>> = plan
            .entries
            .iter()
            .map(|e| vec![e.layer.block.to_string(), e.layer.kind.to_string(), e.param_count.to_string(), f(e.ratio)])
            .collect();
        write_csv(
            &args.out.join("plan.csv"),
            &["block", "kind", "param_count", "ratio"].map(String::from),
            &rows,
        )?;
        let (kinds, blocks) = sparsity_rows(&sparsity_report_plan(&plan)?);
        write_csv(&args.out.join("plan_by_kind.csv"), &["kind", "mean_ratio"].map(String::from), &kinds)?;
        write_csv(
            &args.out.join("plan_by_block.csv"),
            &["block", "mean_ratio", "weighted_ratio"].map(String::from),
            &blocks,
        )?;

        let (kinds, blocks) = sparsity_rows(&sparsity_report_model(&model)?);
        write_csv(&args.out.join("sparsity_by_kind.csv"), &["kind", "mean_sparsity"].map(String::from), &kinds)?;
        write_csv(
            &args.out.join("sparsity_by_block.csv"),
            &["block", "mean_sparsity", "weighted_sparsity"].map(String::from),
            &blocks,
        )?;

        let att = attention_by_modality_over(&model, &calib)?;
        let rows: Vec<Vec<String>> = att
            .iter()
            .flat_map(|b| b.masses.iter().map(move |m| vec![b.block.to_string(), m.modality.clone(), f(m.value)]))
            .collect();
        write_csv(&args.out.join("attention.csv"), &["block", "modality", "mass"].map(String::from), &rows)?;

        if args.with_selection {
            let mut sel_cfg = cfg.clone();
            sel_cfg.allocation = Some(Allocation::Uniform);
            if sel_cfg.selection.is_none() {
                sel_cfg.selection = Some(SelectionKind::Amia);
            }
            let (_, report) = prune_model(&model, &calib, &sel_cfg)?;
            let mut names: Vec<String> = Vec::new();
            for l in &report.layers {
                for (n, _, _) in l.selection.iter().flat_map(|s| &s.per_modality) {
                    if !names.contains(n) {
                        names.push(n.clone());
                    }
                }
            }
            let mut header: Vec<String> = ["block", "kind", "samples", "tokens_total", "tokens_selected"]
                .map(String::from)
                .to_vec();
            header.extend(names.iter().map(|n| format!("selected:{n}")));
            header.extend(
                ["fallbacks", "stopped_threshold", "stopped_exhausted", "stopped_max_count", "threshold", "mean_final_mmd", "first_mmd_trace"]
                    .map(String::from),
            );
            let rows: Vec<Vec<String>> = report
                .layers
                .iter()
                .filter_map(|l| l.selection.as_ref().map(|s| (l.layer, s)))
                .map(|(id, s)| {
                    let mut r = vec![
                        id.block.to_string(),
                        id.kind.to_string(),
                        s.samples.to_string(),
                        s.tokens_total.to_string(),
                        s.tokens_selected.to_string(),
                    ];
                    for n in &names {
                        r.push(
                            s.per_modality
                                .iter()
                                .find(|(m, _, _)| m == n)
                                .map_or(0, |(_, _, sel)| *sel)
                                .to_string(),
                        );
                    }
                    r.extend([
                        s.fallbacks.to_string(),
                        s.stopped_threshold.to_string(),
                        s.stopped_exhausted.to_string(),
                        s.stopped_max_count.to_string(),
                        s.threshold.map(f).unwrap_or_default(),
                        s.mean_final_mmd.map(f).unwrap_or_default(),
                        s.first_trace.iter().map(|v| f(*v)).collect::<Vec<_>>().join(";"),
                    ]);
                    r
                })
                .collect();
            write_csv(&args.out.join("selection.csv"), &header, &rows)?;
        }
        Ok(())
    })
}

/// One cell of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub sparsity: f64,
    pub achieved: f64,
    pub rel_avg: f64,
    pub metrics: EvalMetrics,
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<Vec<CompareRow>> {
    if args.methods.is_empty() || args.sparsities.is_empty() {
        return Err(usage("--methods and --sparsities must be non-empty"));
    }
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| m.parse().map_err(|e: Error| usage(e.to_string())))
        .collect::<CliResult<_>>()?;
    let configs: Vec<PruneConfig> = methods
        .iter()
        .flat_map(|&m| args.sparsities.iter().map(move |&p| (m, p)))
        .map(|(m, p)| args.opts.to_config(m, p))
        .collect::<CliResult<_>>()?;
    require_file(&args.eval, "evaluation file")?;
    let (model, calib) = load_inputs(&args.model, &args.calib, args.opts.calib_size)?;
    let eval = read_sequences(&args.eval, Some(model.d_model()))?;
    let rows = with_threads(args.opts.threads, || {
        configs
            .iter()
            .map(|cfg| {
                let (pruned, report) = prune_model(&model, &calib, cfg)?;
                let metrics = reconstruction_report(&model, &pruned, &eval)?;
                Ok(CompareRow {
                    method: cfg.method.to_string(),
                    sparsity: cfg.sparsity,
                    achieved: report.achieved,
                    rel_avg: rel_avg(&metrics.task_scores())?,
                    metrics,
                })
            })
            .collect::<std::result::Result<Vec<_>, Error>>()
            .map_err(CliError::Runtime)
    })?;
    create_dir(&args.out)?;
    write_json(&args.out.join("compare.json"), &rows)?;

    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        for m in &r.metrics.final_cosine_by_modality {
            if !names.contains(&m.modality) {
                names.push(m.modality.clone());
            }
        }
    }
    let mut header: Vec<String> = ["method", "sparsity", "achieved", "final_error", "final_cosine", "mean_layer_error"]
        .map(String::from)
        .to_vec();
    header.extend(names.iter().map(|n| format!("cosine:{n}")));
    header.push("rel_avg".into());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.method.clone(),
                f(r.sparsity),
                f(r.achieved),
                f(r.metrics.final_error),
                f(r.metrics.final_cosine),
                f(r.metrics.mean_layer_error()),
            ];
            for n in &names {
                v.push(
                    r.metrics
                        .final_cosine_by_modality
                        .iter()
                        .find(|m| m.modality == *n)
                        .map(|m| f(m.value))
                        .unwrap_or_default(),
                );
            }
            v.push(f(r.rel_avg));
            v
        })
        .collect();
    write_csv(&args.out.join("compare.csv"), &header, &table)?;
    let sweep: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.method.clone(), f(r.sparsity), f(r.rel_avg), f(r.metrics.final_error)])
        .collect();
    write_csv(
        &args.out.join("sweep.csv"),
        &["method", "sparsity", "rel_avg", "final_error"].map(String::from),
        &sweep,
    )?;
    Ok(rows)
}

fn output_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::GenSynth(a) => Some(&a.out),
        Command::Prune(a) => Some(&a.out),
        Command::Analyze(a) => Some(&a.out),
        Command::Compare(a) => Some(&a.out),
        Command::Replay(_) => None,
    }
}

/// Executes one command and records it in `<out>/run.json`.
pub fn execute(command: &Command) -> CliResult {
    match command {
        Command::GenSynth(a) => cmd_gen_synth(a).map(drop),
        Command::Prune(a) => cmd_prune(a),
        Command::Analyze(a) => {
            check_sparsity(a.sparsity)?;
            cmd_analyze(a)
        }
        Command::Compare(a) => cmd_compare(a).map(drop),
        Command::Replay(a) => {
            require_file(&a.run, "run record")?;
            let text = fs::read_to_string(&a.run).map_err(|e| Error::io(&a.run, e))?;
            let rec: RunRecord =
                serde_json::from_str(&text).map_err(|e| CliError::Runtime(Error::format(&a.run, e.to_string())))?;
            if matches!(rec.command, Command::Replay(_)) {
                return Err(usage("a run record cannot replay another replay"));
            }
            return execute(&rec.command);
        }
    }?;
    if let Some(out) = output_dir(command) {
        write_run(out, command)?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code after printing any error record on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = usage(e.to_string().trim().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code());
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.exit_code())
        }
    }
}
