//! Experiment driver: synthesize a desk-scale world, tune prompts against
//! a frozen tiny MLM, evaluate bias and accuracy, and emit diagnostic
//! tables and comparison reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
//! writes a `manifest.json` (merged config, seeds, input hashes, outputs)
//! into its output directory.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mecod_core::analytics::{build_report, masked_query_plot_data, write_plot_data, BiasReport};
use mecod_core::backend::{train_tiny_mlm, MaskedLm, MlmTrainOptions, TinyMlm, TinyMlmConfig};
use mecod_core::data::{
    generate_synth_world, load_triples, FactTriple, Split, SynthWorldConfig, TripleFormat,
};
use mecod_core::diagnostics::{
    case_study, case_study_csv, case_study_markdown, mlm_candidates_at_prompt_positions,
    nearest_neighbors, slot_labels, word_table_csv, word_table_markdown,
};
use mecod_core::objectives::MecodConfig;
use mecod_core::templates::{load_template_file, prefix_template, ptuning_template, PromptTemplate};
use mecod_core::train::{
    evaluate_relation, load_prompt_checkpoint, read_dump, run_relation_jobs,
    save_prompt_checkpoint, undersample, write_dump, write_train_log, RelationJob, TrainConfig,
    TrainMode,
};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mecod", version, about = "Object-bias analysis and debiased prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact world and pretrain the tiny MLM on it.
    Synth(SynthArgs),
    /// Tune prompts for one or more relations against a frozen model.
    Train(TrainArgs),
    /// Evaluate prompt checkpoints into logit dumps and a bias report.
    Eval(EvalArgs),
    /// Nearest-neighbor / MLM-candidate / case-study tables for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Side-by-side comparison of several eval outputs plus plot data.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory for world files and the model checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_relations: usize,
    #[arg(long, default_value_t = 200)]
    n_subjects_per_relation: usize,
    #[arg(long, default_value_t = 10)]
    n_objects_per_relation: usize,
    #[arg(long, default_value_t = 1.5)]
    skew: f64,
    #[arg(long, default_value_t = 30)]
    vocab_extra: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    num_layers: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 24)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 150)]
    mlm_epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    mlm_lr: f64,
    #[arg(long, default_value_t = 16)]
    mlm_batch_size: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TemplateStyle {
    Ptuning,
    Prefix,
    Manual,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    Baseline,
    Mecod,
    #[value(name = "ablate_no_oe")]
    AblateNoOe,
    #[value(name = "ablate_no_boo")]
    AblateNoBoo,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Mecod => TrainMode::Mecod,
            ModeArg::AblateNoOe => TrainMode::AblateNoOe,
            ModeArg::AblateNoBoo => TrainMode::AblateNoBoo,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// World directory produced by `mecod synth`.
    #[arg(long)]
    world: PathBuf,
    /// Tiny-MLM checkpoint path.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated relation ids, or "all".
    #[arg(long, default_value = "all")]
    relations: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Baseline)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = TemplateStyle::Ptuning)]
    template_style: TemplateStyle,
    /// Tunable tokens per segment for the ptuning template shape.
    #[arg(long, default_value_t = 3)]
    t_per_segment: usize,
    /// Tunable prefix length for the prefix template shape.
    #[arg(long, default_value_t = 5)]
    prefix_len: usize,
    /// Rebalance the train split (two largest object groups shrunk to the
    /// third largest) before tuning.
    #[arg(long, default_value_t = false)]
    undersample: bool,
    /// Worker threads for per-relation jobs (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    // MecodConfig fields, 1:1.
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    gumbel_tau: Option<f64>,
    // TrainConfig fields, 1:1.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; its values override flags, which override
    /// defaults. The merged result lands in the manifest.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Partial override shape for `--config` files: any subset of the
/// MecodConfig / TrainConfig field names.
#[derive(Default, Deserialize)]
struct ConfigFile {
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    tau: Option<f64>,
    pool_size: Option<usize>,
    gumbel_tau: Option<f64>,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    mode: Option<String>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Directory of .mcpt prompt checkpoints.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Mask tokens standing in for the subject in the relation-level query.
    #[arg(long, default_value_t = 1)]
    mask_count: usize,
    /// Top-k for entropy and slope.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Serialize)]
struct DiagnoseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prompt checkpoint (.mcpt).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long)]
    object: String,
    /// Words per slot in the neighbor / candidate tables.
    #[arg(long, default_value_t = 9)]
    top_m: usize,
    /// Candidates per path in the case-study table.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Eval output directories to compare (first is the reference).
    #[arg(long, required = true, num_args = 1..)]
    evals: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (and --help/--version) exit 1 per contract,
            // except help/version which are success.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let world_config = SynthWorldConfig {
        n_relations: args.n_relations,
        n_subjects_per_relation: args.n_subjects_per_relation,
        n_objects_per_relation: args.n_objects_per_relation,
        skew: args.skew,
        vocab_extra: args.vocab_extra,
        seed: args.seed,
    };
    let world = generate_synth_world(&world_config)?;
    std::fs::create_dir_all(&args.out)?;
    world.write_dir(&args.out)?;

    let mlm_config = TinyMlmConfig {
        vocab_size: world.vocab.len(),
        hidden_dim: args.hidden_dim,
        num_layers: args.num_layers,
        num_heads: args.num_heads,
        max_seq_len: args.max_seq_len,
        seed: args.seed,
    };
    let opts = MlmTrainOptions {
        epochs: args.mlm_epochs,
        lr: args.mlm_lr,
        batch_size: args.mlm_batch_size,
        ..Default::default()
    };
    eprintln!(
        "pretraining tiny MLM: vocab={} sentences={}",
        world.vocab.len(),
        world.corpus.len()
    );
    let (model, report) = train_tiny_mlm(&world.corpus, world.vocab.clone(), &mlm_config, &opts)?;
    let model_path = args.out.join("model.tmlm");
    model.save(&model_path)?;
    eprintln!(
        "pretrained: final_loss={:.4} holdout_acc={:.3} (uniform {:.4})",
        report.final_loss, report.holdout_accuracy, report.uniform_baseline
    );

    let mut manifest = RunManifest::new(
        "synth",
        serde_json::json!({ "args": &args, "mlm_config": &mlm_config, "mlm_options": &opts,
                            "pretrain_report": &report }),
    )?;
    for f in ["triples.jsonl", "corpus.txt", "vocab.txt", "templates.json"] {
        manifest.hash_input(&args.out.join(f))?;
        manifest.record_output(&args.out.join(f));
    }
    manifest.record_output(&model_path);
    manifest.write(&args.out)?;
    Ok(())
}

struct WorldOnDisk {
    relations: BTreeMap<String, Vec<FactTriple>>,
    templates: BTreeMap<String, PromptTemplate>,
}

fn load_world(dir: &Path, model: &TinyMlm) -> Result<WorldOnDisk> {
    let (relations, report) = load_triples(&dir.join("triples.jsonl"), TripleFormat::Synth, model)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (rel, n) in &report.dropped_multi_token {
        eprintln!("warning: relation {rel}: dropped {n} multi-token objects");
    }
    let templates = load_template_file(&dir.join("templates.json"))?;
    Ok(WorldOnDisk {
        relations,
        templates,
    })
}

fn resolve_template(
    style: TemplateStyle,
    relation_id: &str,
    manual: &PromptTemplate,
    t_per_segment: usize,
    prefix_len: usize,
) -> Result<PromptTemplate> {
    Ok(match style {
        TemplateStyle::Ptuning => {
            ptuning_template(relation_id, (t_per_segment, t_per_segment, t_per_segment))?
        }
        TemplateStyle::Prefix => prefix_template(manual, prefix_len),
        TemplateStyle::Manual => manual.clone(),
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut mecod = MecodConfig::default();
    let mut train = TrainConfig {
        mode: args.mode.into(),
        ..Default::default()
    };
    // Flags over defaults.
    macro_rules! flag {
        ($target:expr, $field:ident) => {
            if let Some(v) = args.$field {
                $target.$field = v;
            }
        };
    }
    flag!(mecod, lambda1);
    flag!(mecod, lambda2);
    flag!(mecod, tau);
    flag!(mecod, pool_size);
    flag!(mecod, gumbel_tau);
    flag!(train, lr);
    flag!(train, epochs);
    flag!(train, batch_size);
    flag!(train, seed);
    // Config file over flags.
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: ConfigFile = serde_json::from_str(&text)?;
        macro_rules! over {
            ($target:expr, $field:ident) => {
                if let Some(v) = file.$field {
                    $target.$field = v;
                }
            };
        }
        over!(mecod, lambda1);
        over!(mecod, lambda2);
        over!(mecod, tau);
        over!(mecod, pool_size);
        over!(mecod, gumbel_tau);
        over!(train, lr);
        over!(train, epochs);
        over!(train, batch_size);
        over!(train, seed);
        if let Some(mode) = &file.mode {
            train.mode = mode.parse()?;
        }
    }

    let model = TinyMlm::load(&args.model)?;
    if !model.frozen() {
        bail!("model checkpoint is not frozen");
    }
    mecod.pool_size = mecod.effective_pool_size(model.handle().vocab_size);
    mecod.validate(model.handle().vocab_size)?;
    let world = load_world(&args.world, &model)?;

    let relation_ids: Vec<String> = if args.relations == "all" {
        world.relations.keys().cloned().collect()
    } else {
        args.relations.split(',').map(str::to_string).collect()
    };

    // Per-relation inputs: optional undersampling applies to the train
    // split only.
    let mut prepared: Vec<(String, Vec<FactTriple>, PromptTemplate)> = Vec::new();
    for rel in &relation_ids {
        let triples = world
            .relations
            .get(rel)
            .ok_or_else(|| anyhow!("relation {rel} not in world"))?;
        let manual = world
            .templates
            .get(rel)
            .ok_or_else(|| anyhow!("no template for relation {rel}"))?;
        let template = resolve_template(
            args.template_style,
            rel,
            manual,
            args.t_per_segment,
            args.prefix_len,
        )?;
        let triples = if args.undersample {
            let train_split: Vec<FactTriple> = triples
                .iter()
                .filter(|t| t.split == Split::Train)
                .cloned()
                .collect();
            let (balanced, outcome) = undersample(&train_split, train.seed);
            if outcome.warned {
                eprintln!("warning: relation {rel}: fewer than 3 object groups, not undersampled");
            }
            let mut merged = balanced;
            merged.extend(triples.iter().filter(|t| t.split != Split::Train).cloned());
            merged
        } else {
            triples.clone()
        };
        prepared.push((rel.clone(), triples, template));
    }

    let jobs: Vec<RelationJob> = prepared
        .iter()
        .map(|(_, triples, template)| RelationJob { triples, template })
        .collect();
    let run = || run_relation_jobs(&jobs, &model, &mecod, &train);
    let outcomes = if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()?
            .install(run)
    } else {
        run()
    };

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({ "args": &args, "mecod": &mecod, "train": &train }),
    )?;
    manifest.hash_input(&args.model)?;
    manifest.hash_input(&args.world.join("triples.jsonl"))?;
    manifest.hash_input(&args.world.join("templates.json"))?;

    let mut failures = Vec::new();
    for ((rel, _, template), outcome) in prepared.iter().zip(outcomes) {
        match outcome {
            Ok(out) => {
                let ckpt = args.out.join("prompts").join(format!("{rel}.mcpt"));
                save_prompt_checkpoint(
                    &ckpt,
                    rel,
                    template,
                    &out.prompt,
                    out.selector.as_ref(),
                )?;
                let log_path = args.out.join("logs").join(format!("{rel}.jsonl"));
                write_train_log(&log_path, &out.log)?;
                manifest.record_output(&ckpt);
                manifest.record_output(&log_path);
                eprintln!(
                    "relation {rel}: best dev P@1 {:.3} at epoch {}",
                    out.best_dev_p1, out.best_epoch
                );
            }
            Err(e) => {
                eprintln!("relation {rel}: FAILED: {e}");
                failures.push(rel.clone());
            }
        }
    }
    manifest.write(&args.out)?;
    if !failures.is_empty() {
        bail!("training failed for relations: {}", failures.join(", "));
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?}"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = TinyMlm::load(&args.model)?;
    let world = load_world(&args.world, &model)?;
    let split = parse_split(&args.split)?;

    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(&args.prompts)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mcpt"))
        .collect();
    ckpts.sort();
    if ckpts.is_empty() {
        bail!("no .mcpt checkpoints under {}", args.prompts.display());
    }

    let mut manifest = RunManifest::new("eval", serde_json::json!({ "args": &args }))?;
    manifest.hash_input(&args.model)?;
    manifest.hash_input(&args.world.join("triples.jsonl"))?;

    let mut evals = Vec::new();
    for ckpt in &ckpts {
        manifest.hash_input(ckpt)?;
        let (rel, template, prompt, selector) = load_prompt_checkpoint(ckpt)?;
        let triples = world
            .relations
            .get(&rel)
            .ok_or_else(|| anyhow!("relation {rel} not in world"))?;
        let eval = evaluate_relation(
            &prompt,
            selector.as_ref(),
            triples,
            split,
            &template,
            &model,
            args.mask_count,
        )?;
        let dump_path = args.out.join("dumps").join(format!("{rel}.mdmp"));
        write_dump(&dump_path, &eval)?;
        manifest.record_output(&dump_path);
        evals.push(eval);
    }

    let report = build_report(&evals, args.k)?;
    let csv_path = args.out.join("report.csv");
    let json_path = args.out.join("report.json");
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    manifest.record_output(&csv_path);
    manifest.record_output(&json_path);
    manifest.write(&args.out)?;
    eprintln!(
        "aggregate: P@1 {:.3} MRR {:.3} entropy {:.3} ({}% vs ln {})",
        report.aggregate.p_at_1,
        report.aggregate.mrr,
        report.aggregate.entropy,
        report.aggregate.entropy_pct_vs_max,
        args.k
    );
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let model = TinyMlm::load(&args.model)?;
    let (rel, template, prompt, _selector) = load_prompt_checkpoint(&args.checkpoint)?;
    let labels = slot_labels(&template);

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("diagnose", serde_json::json!({ "args": &args }))?;
    manifest.hash_input(&args.model)?;
    manifest.hash_input(&args.checkpoint)?;

    let neighbors = nearest_neighbors(&prompt, &model, args.top_m);
    let nn_md = args.out.join("neighbors.md");
    std::fs::write(
        &nn_md,
        word_table_markdown("Nearest words", &labels, &neighbors),
    )?;
    let nn_csv = args.out.join("neighbors.csv");
    word_table_csv(&nn_csv, &labels, &neighbors)?;

    let rendered = template.render(&args.subject, &model)?;
    let candidates = mlm_candidates_at_prompt_positions(&prompt, &rendered, &model, args.top_m)?;
    let cand_md = args.out.join("candidates.md");
    std::fs::write(
        &cand_md,
        word_table_markdown("MLM candidate words", &labels, &candidates),
    )?;
    let cand_csv = args.out.join("candidates.csv");
    word_table_csv(&cand_csv, &labels, &candidates)?;

    let triple = FactTriple {
        subject: args.subject.clone(),
        relation_id: rel,
        object: args.object.clone(),
        split: Split::Test,
    };
    let case = case_study(&triple, &prompt, &template, &model, args.top_k)?;
    let case_md = args.out.join("case.md");
    std::fs::write(&case_md, case_study_markdown(&case))?;
    let case_csv_path = args.out.join("case.csv");
    case_study_csv(&case_csv_path, &case)?;

    for p in [&nn_md, &nn_csv, &cand_md, &cand_csv, &case_md, &case_csv_path] {
        manifest.record_output(p);
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut methods: Vec<(String, BiasReport)> = Vec::new();
    let mut manifest = RunManifest::new("report", serde_json::json!({ "args": &args }))?;
    for dir in &args.evals {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join("report.json");
        manifest.hash_input(&path)?;
        let report: BiasReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        methods.push((name, report));
    }

    std::fs::create_dir_all(&args.out)?;
    let cmp_csv = args.out.join("comparison.csv");
    {
        let mut w = csv::WriterBuilder::new().from_path(&cmp_csv)?;
        w.write_record([
            "method",
            "p_at_1",
            "mrr",
            "entropy",
            "entropy_pct_vs_max",
            "delta_p_at_1",
            "delta_entropy_pct",
        ])?;
        let reference = methods[0].1.aggregate.clone();
        for (name, report) in &methods {
            let a = &report.aggregate;
            let delta_p1 = a.p_at_1 - reference.p_at_1;
            let delta_ent = if reference.entropy > 0.0 {
                (a.entropy / reference.entropy - 1.0) * 100.0
            } else {
                0.0
            };
            w.write_record([
                name.clone(),
                format!("{:.6}", a.p_at_1),
                format!("{:.6}", a.mrr),
                format!("{:.6}", a.entropy),
                a.entropy_pct_vs_max.to_string(),
                format!("{delta_p1:.6}"),
                format!("{delta_ent:.2}"),
            ])?;
        }
        w.flush()?;
    }
    manifest.record_output(&cmp_csv);

    let md_path = args.out.join("comparison.md");
    {
        let mut md = String::from("| Method | P@1 | MRR | Entropy | vs max |\n|---|---|---|---|---|\n");
        for (name, report) in &methods {
            let a = &report.aggregate;
            md.push_str(&format!(
                "| {name} | {:.3} | {:.3} | {:.3} | {}% |\n",
                a.p_at_1, a.mrr, a.entropy, a.entropy_pct_vs_max
            ));
        }
        std::fs::write(&md_path, md)?;
    }
    manifest.record_output(&md_path);

    // Plot data: top-k (rank, logit) pairs of each relation's masked query.
    for (name, dir) in methods.iter().map(|(n, _)| n).zip(&args.evals) {
        let dumps = dir.join("dumps");
        if !dumps.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dumps)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mdmp"))
            .collect();
        paths.sort();
        for dump_path in paths {
            let eval = read_dump(&dump_path)?;
            let rows = masked_query_plot_data(&eval.masked_query, args.k);
            let plot_path = args
                .out
                .join(format!("plot_{}_{}.csv", name, eval.relation_id));
            write_plot_data(&plot_path, &rows)?;
            manifest.record_output(&plot_path);
        }
    }
    manifest.write(&args.out)?;
    Ok(())
}
