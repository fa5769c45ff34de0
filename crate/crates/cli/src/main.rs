//! Command-line surface for the maskdiff engine.
//!
//! Subcommands: `make-data`, `train`, `sample`, `eval`, `ablate`,
//! `oracle-check`. All outputs land under `--out-dir`.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use maskdiff::checkpoint::{load_bundle, save_bundle};
use maskdiff::conversation::{
    apply_tag_policy, read_corpus, write_corpus, AttentionMaskKind, CorpusClass,
};
use maskdiff::harness::{
    evaluate, make_corpus, run_ablation, AblationSpec, EvalConfig, GridCaptionTask, TaskFamily,
};
use maskdiff::oracle;
use maskdiff::predictor::{ModelBundle, ModelConfig, TabularPredictor, VisionStub};
use maskdiff::sampler::{generate, ChatState, RemaskStrategy, SamplerConfig};
use maskdiff::trainer::{metrics_to_csv, train_stage, GroupRates, TrainConfig, TrainStage};
use maskdiff::vocab::Vocab;
use maskdiff::rng;

#[derive(Parser)]
#[command(name = "maskdiff", about = "Masked diffusion dialogue engine")]
struct Cli {
    /// Optional TOML config overriding per-command defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for all named randomness streams.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for checkpoints, metrics, reports, and traces.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttnArg {
    Causal,
    DialogueCausal,
    None,
}

impl From<AttnArg> for AttentionMaskKind {
    fn from(a: AttnArg) -> Self {
        match a {
            AttnArg::Causal => AttentionMaskKind::Causal,
            AttnArg::DialogueCausal => AttentionMaskKind::DialogueCausal,
            AttnArg::None => AttentionMaskKind::NoMask,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RemaskArg {
    Random,
    LowConfidence,
}

impl From<RemaskArg> for RemaskStrategy {
    fn from(r: RemaskArg) -> Self {
        match r {
            RemaskArg::Random => RemaskStrategy::Random,
            RemaskArg::LowConfidence => RemaskStrategy::LowConfidence,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Caption,
    CountQa,
    CaptionThenCount,
}

impl From<FamilyArg> for TaskFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Caption => TaskFamily::Caption,
            FamilyArg::CountQa => TaskFamily::CountQa,
            FamilyArg::CaptionThenCount => TaskFamily::CaptionThenCount,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Align,
    Instruct,
    Reasoning,
    Balanced,
}

impl From<StageArg> for TrainStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Align => TrainStage::Align,
            StageArg::Instruct => TrainStage::Instruct,
            StageArg::Reasoning => TrainStage::Reasoning,
            StageArg::Balanced => TrainStage::Balanced,
        }
    }
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, default_value_t = 2)]
    grid_height: usize,
    #[arg(long, default_value_t = 2)]
    grid_width: usize,
    #[arg(long, default_value_t = 3)]
    colors: usize,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    /// Serialize the grid into the prompt instead of image features.
    #[arg(long)]
    text_only: bool,
    #[arg(long, value_enum, default_value_t = FamilyArg::Caption)]
    family: FamilyArg,
}

impl TaskArgs {
    fn task(&self) -> GridCaptionTask {
        GridCaptionTask {
            height: self.grid_height,
            width: self.grid_width,
            n_colors: self.colors,
            n_shapes: self.shapes,
            with_image: !self.text_only,
            family: self.family.into(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/eval corpus pair as JSONL.
    MakeData {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 5000)]
        train_size: usize,
        #[arg(long, default_value_t = 500)]
        eval_size: usize,
        /// Apply the think-tag policy to the generated corpora.
        #[arg(long)]
        apply_tags: bool,
        /// Basename for the output files (<name>.train.jsonl, <name>.eval.jsonl).
        #[arg(long, default_value = "corpus")]
        name: String,
    },
    /// Train one stage and write a checkpoint plus metrics CSV.
    Train {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Resume from an existing checkpoint instead of fresh init.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::Instruct)]
        stage: StageArg,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = AttnArg::None)]
        attn: AttnArg,
        #[arg(long, default_value_t = 0.0)]
        lr_vision: f64,
        #[arg(long, default_value_t = 0.08)]
        lr_language: f64,
        #[arg(long, default_value_t = 0.08)]
        lr_projector: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: String,
    },
    /// Sample a response for one example of a corpus file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL corpus holding the conditioning examples.
        #[arg(long)]
        input: PathBuf,
        /// Example index within the corpus.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Turn to answer (earlier turns become clean context).
        #[arg(long, default_value_t = 0)]
        turn: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 13)]
        gen_length: usize,
        #[arg(long, value_enum, default_value_t = RemaskArg::LowConfidence)]
        remask: RemaskArg,
        #[arg(long, value_enum, default_value_t = AttnArg::None)]
        attn: AttnArg,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Optional semi-autoregressive block size.
        #[arg(long)]
        block_size: Option<usize>,
        /// Trace CSV path (under out-dir).
        #[arg(long, default_value = "trace.csv")]
        trace: String,
    },
    /// Evaluate a checkpoint over an eval corpus; writes eval JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = usize::MAX)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = RemaskArg::LowConfidence)]
        remask: RemaskArg,
        #[arg(long, value_enum, default_value_t = AttnArg::None)]
        attn: AttnArg,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value = "eval.json")]
        report: String,
    },
    /// Train one model per attention/remasking cell and emit the table.
    Ablate {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Attention kinds to ablate (repeatable).
        #[arg(long = "attn-cell", value_enum)]
        attn_cells: Vec<AttnArg>,
        /// Remasking strategies to ablate (repeatable).
        #[arg(long = "remask-cell", value_enum)]
        remask_cells: Vec<RemaskArg>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value = "ablation.csv")]
        table: String,
    },
    /// Run an oracle suite and emit a pass/fail report with max deviations.
    OracleCheck {
        #[arg(long, value_parser = ["forward", "bound", "reverse"])]
        suite: String,
        #[arg(long, default_value = "oracle_report.csv")]
        report: String,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating out dir {:?}", cli.out_dir))?;
    match &cli.command {
        Command::MakeData {
            task,
            train_size,
            eval_size,
            apply_tags,
            name,
        } => cmd_make_data(&cli, task, *train_size, *eval_size, *apply_tags, name),
        Command::Train { .. } => cmd_train(&cli),
        Command::Sample { .. } => cmd_sample(&cli),
        Command::Eval { .. } => cmd_eval(&cli),
        Command::Ablate { .. } => cmd_ablate(&cli),
        Command::OracleCheck { suite, report } => cmd_oracle_check(&cli, suite, report),
    }
}

/// TOML overrides: any subset of the train knobs.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    batch_size: Option<usize>,
    steps: Option<usize>,
    epsilon: Option<f64>,
    momentum: Option<f64>,
    lr_vision: Option<f64>,
    lr_language: Option<f64>,
    lr_projector: Option<f64>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {p:?}"))?;
            Ok(toml::from_str(&text)?)
        }
    }
}

fn model_config_for(task: &GridCaptionTask) -> Result<ModelConfig> {
    let vocab = task.vocab()?;
    let stub = VisionStub {
        n_cell_values: task.n_cell_values(),
        max_height: task.height,
        max_width: task.width,
    };
    Ok(ModelConfig::tiny(vocab, stub))
}

fn cmd_make_data(
    cli: &Cli,
    task_args: &TaskArgs,
    train_size: usize,
    eval_size: usize,
    apply_tags: bool,
    name: &str,
) -> Result<()> {
    let task = task_args.task();
    let vocab = task.vocab()?;
    let mut split = make_corpus(&task, train_size, eval_size, cli.seed)?;
    if apply_tags {
        let class = match task.family {
            TaskFamily::CountQa => CorpusClass::Reasoning,
            _ => CorpusClass::Direct,
        };
        let mut train_rng = rng::stream(cli.seed, "tags/train");
        split.train = apply_tag_policy(split.train, class, &vocab, &mut train_rng)?;
        let mut eval_rng = rng::stream(cli.seed, "tags/eval");
        split.eval = apply_tag_policy(split.eval, class, &vocab, &mut eval_rng)?;
    }
    let train_path = cli.out_dir.join(format!("{name}.train.jsonl"));
    let eval_path = cli.out_dir.join(format!("{name}.eval.jsonl"));
    write_corpus(&train_path, &split.train)?;
    write_corpus(&eval_path, &split.eval)?;
    println!(
        "wrote {} train examples to {train_path:?} and {} eval examples to {eval_path:?}",
        split.train.len(),
        split.eval.len()
    );
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let Command::Train {
        task,
        corpus,
        init_ckpt,
        stage,
        batch_size,
        steps,
        epsilon,
        attn,
        lr_vision,
        lr_language,
        lr_projector,
        momentum,
        ckpt,
    } = &cli.command
    else {
        unreachable!()
    };
    let file_cfg = load_file_config(&cli.config)?;
    let task = task.task();
    let vocab = task.vocab()?;
    let examples = read_corpus(corpus)?;
    let bundle = match init_ckpt {
        Some(p) => load_bundle(p)?,
        None => {
            let mut init_rng = rng::stream(cli.seed, "init");
            ModelBundle::init(model_config_for(&task)?, &mut init_rng)?
        }
    };
    let cfg = TrainConfig {
        stage: (*stage).into(),
        rates: GroupRates {
            vision: file_cfg.lr_vision.unwrap_or(*lr_vision),
            language: file_cfg.lr_language.unwrap_or(*lr_language),
            projector: file_cfg.lr_projector.unwrap_or(*lr_projector),
        },
        momentum: file_cfg.momentum.unwrap_or(*momentum),
        batch_size: file_cfg.batch_size.unwrap_or(*batch_size),
        steps: file_cfg.steps.unwrap_or(*steps),
        seed: cli.seed,
        epsilon: file_cfg.epsilon.unwrap_or(*epsilon),
        attention: (*attn).into(),
        log_every: 10,
    };
    let (trained, metrics) = train_stage(&cfg, bundle, &examples, &vocab)?;
    let ckpt_path = cli.out_dir.join(ckpt);
    save_bundle(&ckpt_path, &trained)?;
    fs::write(cli.out_dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    let last = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.4}, checkpoint {ckpt_path:?}", cfg.steps);
    Ok(())
}

fn cmd_sample(cli: &Cli) -> Result<()> {
    let Command::Sample {
        ckpt,
        input,
        index,
        turn,
        steps,
        gen_length,
        remask,
        attn,
        temperature,
        block_size,
        trace,
    } = &cli.command
    else {
        unreachable!()
    };
    let bundle = load_bundle(ckpt)?;
    let examples = read_corpus(input)?;
    let example = examples
        .get(*index)
        .with_context(|| format!("corpus has {} examples, index {index}", examples.len()))?;
    let state = ChatState::from_example_turn(example, *turn)?;
    let cfg = SamplerConfig {
        gen_length: *gen_length,
        steps: *steps,
        strategy: (*remask).into(),
        attention: (*attn).into(),
        temperature: *temperature,
        seed: cli.seed,
        block_size: *block_size,
    };
    let vocab = bundle.cfg.vocab;
    let (response, trace_data) = generate(&bundle, &state, &vocab, &cfg)?;
    let trace_path = cli.out_dir.join(trace);
    fs::write(&trace_path, trace_data.to_csv())?;
    println!(
        "response: {:?}\ntrace written to {trace_path:?}",
        response
    );
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Result<()> {
    let Command::Eval {
        ckpt,
        corpus,
        steps,
        remask,
        attn,
        temperature,
        report,
    } = &cli.command
    else {
        unreachable!()
    };
    let bundle = load_bundle(ckpt)?;
    let examples = read_corpus(corpus)?;
    let vocab = bundle.cfg.vocab;
    let cfg = EvalConfig {
        sampler: SamplerConfig {
            gen_length: 1, // overridden per turn
            steps: *steps,
            strategy: (*remask).into(),
            attention: (*attn).into(),
            temperature: *temperature,
            seed: cli.seed,
            block_size: None,
        },
        bound_draws: 4,
        bound_epsilon: 1e-3,
        seed: cli.seed,
    };
    let report_data = evaluate(&bundle, &examples, &vocab, &cfg)?;
    let path = cli.out_dir.join(report);
    fs::write(&path, serde_json::to_string_pretty(&report_data)?)?;
    println!(
        "exact_match {:.4}, token_accuracy {:.4}, mean_bound {:.4} -> {path:?}",
        report_data.exact_match, report_data.token_accuracy, report_data.mean_bound
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli) -> Result<()> {
    let Command::Ablate {
        task,
        train_corpus,
        eval_corpus,
        attn_cells,
        remask_cells,
        batch_size,
        steps,
        table,
    } = &cli.command
    else {
        unreachable!()
    };
    let task = task.task();
    let vocab = task.vocab()?;
    let train = read_corpus(train_corpus)?;
    let eval = read_corpus(eval_corpus)?;
    let spec = AblationSpec {
        attention_kinds: attn_cells.iter().map(|&a| a.into()).collect(),
        strategies: remask_cells.iter().map(|&r| r.into()).collect(),
    };
    let train_cfg = TrainConfig {
        stage: TrainStage::Instruct,
        rates: GroupRates {
            vision: 0.0,
            language: 0.08,
            projector: 0.08,
        },
        momentum: 0.9,
        batch_size: *batch_size,
        steps: *steps,
        seed: cli.seed,
        epsilon: 0.05,
        attention: AttentionMaskKind::NoMask,
        log_every: 50,
    };
    let eval_cfg = EvalConfig {
        sampler: SamplerConfig {
            gen_length: 1,
            steps: usize::MAX,
            strategy: RemaskStrategy::LowConfidence,
            attention: AttentionMaskKind::NoMask,
            temperature: 0.0,
            seed: cli.seed,
            block_size: None,
        },
        bound_draws: 4,
        bound_epsilon: 1e-3,
        seed: cli.seed,
    };
    let table_data = run_ablation(
        &spec,
        model_config_for(&task)?,
        &train_cfg,
        &eval_cfg,
        &train,
        &eval,
        &vocab,
    )?;
    let path = cli.out_dir.join(table);
    fs::write(&path, table_data.to_csv())?;
    println!("{}", table_data.to_csv());
    println!("ablation table written to {path:?}");
    Ok(())
}

fn cmd_oracle_check(cli: &Cli, suite: &str, report: &str) -> Result<()> {
    let mut rows = vec!["suite,check,max_deviation,status".to_string()];
    let mut all_ok = true;
    let mut push = |suite: &str, check: &str, dev: f64, tol: f64| {
        let ok = dev <= tol;
        rows.push(format!(
            "{suite},{check},{dev:.3e},{}",
            if ok { "pass" } else { "FAIL" }
        ));
        ok
    };
    match suite {
        "forward" => {
            // Pattern table sums to 1 and marginals equal t, for a grid of t.
            let mut max_sum_dev: f64 = 0.0;
            let mut max_marg_dev: f64 = 0.0;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let dist = oracle::enumerate_forward(4, t)?;
                max_sum_dev = max_sum_dev.max((dist.total() - 1.0).abs());
                for pos in 0..4 {
                    max_marg_dev = max_marg_dev.max((dist.marginal(pos) - t).abs());
                }
            }
            all_ok &= push("forward", "pattern_mass", max_sum_dev, 1e-12);
            all_ok &= push("forward", "marginal_equals_t", max_marg_dev, 1e-12);
        }
        "bound" => {
            // N=1 cancellation and the hand-computed uniform N=2 bound.
            let vocab = Vocab::new(2)?;
            let ex = one_token_example(1);
            let p = 0.7;
            let predictor = TabularPredictor::new(1, 2, vec![1.0 - p, p])?;
            let bound =
                oracle::exact_bound(&ex, &predictor, AttentionMaskKind::NoMask)?;
            all_ok &= push(
                "bound",
                "n1_equals_minus_log_p",
                (bound - -(p.ln())).abs(),
                1e-12,
            );
            let uniform = TabularPredictor::uniform(2, 2)?;
            let ex2 = two_token_example(&vocab);
            let bound2 = oracle::exact_bound(&ex2, &uniform, AttentionMaskKind::NoMask)?;
            all_ok &= push(
                "bound",
                "uniform_n2_equals_2log2",
                (bound2 - 2.0 * (2.0f64).ln()).abs(),
                1e-12,
            );
        }
        "reverse" => {
            let mut rng = rng::stream(cli.seed, "oracle-check");
            let predictor = TabularPredictor::random(2, 2, &mut rng)?;
            let dist = oracle::enumerate_reverse(
                &predictor,
                2,
                2,
                2,
                RemaskStrategy::Random,
                1.0,
            )?;
            let mass: f64 = dist.values().sum();
            all_ok &= push("reverse", "distribution_mass", (mass - 1.0).abs(), 1e-12);
        }
        other => bail!("unknown suite {other}"),
    }
    let path = cli.out_dir.join(report);
    fs::write(&path, rows.join("\n") + "\n")?;
    println!("{}", rows.join("\n"));
    if !all_ok {
        bail!("oracle check failed");
    }
    Ok(())
}

fn one_token_example(tok: u32) -> maskdiff::conversation::ConversationExample {
    maskdiff::conversation::ConversationExample {
        image: None,
        turns: vec![maskdiff::conversation::Turn {
            prompt: vec![0],
            response: vec![tok],
        }],
        class: CorpusClass::Direct,
    }
}

fn two_token_example(_vocab: &Vocab) -> maskdiff::conversation::ConversationExample {
    maskdiff::conversation::ConversationExample {
        image: None,
        turns: vec![maskdiff::conversation::Turn {
            prompt: vec![0],
            response: vec![0, 1],
        }],
        class: CorpusClass::Direct,
    }
}
