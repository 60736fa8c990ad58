use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use echopix::analysis::{emit_analysis, AllocationPoint, AnalysisInput, RopeCurveSpec};
use echopix::bench::{bench, bench_stream, BenchOptions, BenchRecord, BenchShape};
use echopix::config::RunConfig;
use echopix::io::{load_checkpoint, save_checkpoint, write_manifest, Corpus};
use echopix::model::{EchoModel, Path};
use echopix::stream::{Scene, Task};
use echopix::train::{eval_scenes, evaluate, train, train_on_corpus, LogRow};

#[derive(Parser)]
#[command(name = "echopix", version, about = "Cross-modal token sieve experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Token budget p in (0, 1].
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// cross_modal_bidirectional or intra_modal_bidirectional.
    #[arg(long, global = true)]
    mask_mode: Option<String>,
    /// combined or separate.
    #[arg(long, global = true)]
    pool_mode: Option<String>,
    /// Frequency partition `t,h,w` or `t,h,w,t`.
    #[arg(long, global = true)]
    rope_partition: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene corpus.
    GenData {
        #[arg(long, default_value = "salient_recall")]
        task: Task,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
    },
    /// Train and write a checkpoint plus the metrics log.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint stem (without `.bin` / `.manifest`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "salient_recall")]
        task: Task,
        /// sieve, full or intra_modal.
        #[arg(long, default_value = "sieve")]
        path: Path,
    },
    /// Forward-pass benchmark over budgets at L = 4096.
    Bench {
        /// Comma-separated budgets for the sieve.
        #[arg(long, default_value = "0.1,0.2,0.5")]
        budgets: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 256)]
        row_block: usize,
    },
    /// Relative kernel g(delta) per frequency band.
    AnalyzeRope {
        #[arg(long, default_value_t = 10000.0)]
        theta_base: f64,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 500)]
        delta_max: usize,
        #[arg(long, default_value_t = 18)]
        high: usize,
        #[arg(long, default_value_t = 10)]
        low: usize,
    },
    /// Kept/dropped map of one evaluation scene.
    EmitSelection {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "salient_recall")]
        task: Task,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData { .. } => "gen-data",
            Cmd::Train => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Bench { .. } => "bench",
            Cmd::AnalyzeRope { .. } => "analyze-rope",
            Cmd::EmitSelection { .. } => "emit-selection",
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let overrides = [
        ("budget_p", c.budget.map(|b| b.to_string())),
        ("mask_mode", c.mask_mode.clone()),
        ("pool_mode", c.pool_mode.clone()),
        ("rope_partition", c.rope_partition.clone()),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<EchoModel> {
    let mut model = EchoModel::new(cfg.model.clone(), cfg.seed)?;
    if let Some(stem) = checkpoint {
        load_checkpoint(&mut model.params, stem)
            .with_context(|| format!("incompatible checkpoint {}", stem.display()))?;
    }
    Ok(model)
}

fn eval_set(cfg: &RunConfig, task: Task) -> Result<Vec<Scene>> {
    match &cfg.eval_corpus {
        Some(dir) => {
            let c = Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            if c.template != cfg.train.template || c.task != task {
                bail!("corpus {} does not match the configuration", dir.display());
            }
            Ok(c.scenes)
        }
        None => Ok(eval_scenes(&cfg.train.template, task, cfg.eval_seed, cfg.eval_scenes)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut extra: Vec<(&str, String)> = Vec::new();
    match &cli.cmd {
        Cmd::GenData { task, scenes } => {
            let c = Corpus::generate(&cfg.train.template, *task, cfg.train.corpus_seed, *scenes)?;
            c.save(&out)?;
            extra.push(("task", task.to_string()));
            extra.push(("scenes", scenes.to_string()));
        }
        Cmd::Train => {
            let mut model = EchoModel::new(cfg.model.clone(), cfg.seed)?;
            let mut log = String::from(LogRow::HEADER);
            log.push('\n');
            let mut on_log = |r: &LogRow| {
                eprintln!("{}", r.csv());
                log.push_str(&r.csv());
                log.push('\n');
            };
            match &cfg.train_corpus {
                Some(dir) => {
                    let c = Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
                    train_on_corpus(&mut model, &cfg.train, &c, &mut on_log)
                        .context("corpus/config mismatch or training failure")?;
                }
                None => {
                    train(&mut model, &cfg.train, &mut on_log)?;
                }
            }
            save_checkpoint(&model.params, &out.join("model"))?;
            fs::write(out.join("train_log.csv"), log)?;
            fs::write(out.join("config.txt"), cfg.render())?;
        }
        Cmd::Eval { checkpoint, task, path } => {
            let model = load_model(&cfg, checkpoint)?;
            let scenes = eval_set(&cfg, *task)?;
            let m = evaluate(&model, &scenes, *path)?;
            let mut csv = String::from(
                "index,task,label,prediction,correct,p_true,planted_recall,oracle_recall,kept_video,kept_audio,k\n",
            );
            for r in &m.scenes {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.index,
                    r.task,
                    r.label,
                    r.prediction,
                    u8::from(r.correct),
                    r.p_true,
                    r.planted_recall,
                    r.oracle_recall,
                    r.kept_video,
                    r.kept_audio,
                    r.k
                ));
            }
            fs::write(out.join("eval_scenes.csv"), csv)?;
            fs::write(
                out.join("eval_summary.csv"),
                format!(
                    "path,task,n,accuracy,planted_recall,oracle_recall\n{path},{task},{},{},{},{}\n",
                    m.n, m.accuracy, m.planted_recall, m.oracle_recall
                ),
            )?;
            let points: Vec<AllocationPoint> = scenes
                .iter()
                .zip(&m.scenes)
                .map(|(s, r)| AllocationPoint {
                    density_video: s.spec.density_video,
                    density_audio: s.spec.density_audio,
                    kept_video: r.kept_video,
                    kept_audio: r.kept_audio,
                })
                .collect();
            emit_analysis("allocation_hist", &AnalysisInput::AllocationHist(&points), &out)?;
            println!(
                "accuracy={:.4} planted_recall={:.4} oracle_recall={:.4} n={}",
                m.accuracy, m.planted_recall, m.oracle_recall, m.n
            );
            extra.push(("checkpoint", checkpoint.as_ref().map_or("none".into(), |c| c.display().to_string())));
            extra.push(("task", task.to_string()));
            extra.push(("path", path.to_string()));
        }
        Cmd::Bench {
            budgets,
            trials,
            warmups,
            row_block,
        } => {
            let budgets: Vec<f64> = budgets
                .split(',')
                .map(|b| b.trim().parse().with_context(|| format!("bad budget `{b}`")))
                .collect::<Result<_>>()?;
            let model = EchoModel::new(cfg.model.clone(), cfg.seed)?;
            let shape = BenchShape::l4096(cfg.model.n_text);
            let stream = bench_stream(&shape, cfg.model.d_model, cfg.seed)?;
            let task = cfg.model.tasks[0];
            let opts = BenchOptions {
                warmups: *warmups,
                trials: *trials,
                row_block: *row_block,
            };
            let recs = bench(&model, &stream, task, &budgets, &opts)?;
            let mut csv = String::from(BenchRecord::HEADER);
            csv.push('\n');
            for r in &recs {
                println!("{}", r.csv());
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            fs::write(out.join("bench.csv"), csv)?;
            extra.push(("budgets", format!("{budgets:?}")));
            extra.push(("trials", trials.to_string()));
            extra.push(("warmups", warmups.to_string()));
            extra.push(("row_block", row_block.to_string()));
        }
        Cmd::AnalyzeRope {
            theta_base,
            head_dim,
            delta_max,
            high,
            low,
        } => {
            let spec = RopeCurveSpec {
                theta_base: *theta_base,
                head_dim: *head_dim,
                high: *high,
                low: *low,
                delta_max: *delta_max,
            };
            emit_analysis("rope_curves", &AnalysisInput::RopeCurves(&spec), &out)?;
            extra.push(("rope_curves", format!("{spec:?}")));
        }
        Cmd::EmitSelection { checkpoint, task, scene } => {
            let model = load_model(&cfg, checkpoint)?;
            let scenes = eval_set(&cfg, *task)?;
            let sc = scenes
                .get(*scene)
                .with_context(|| format!("scene {scene} out of range for {} scenes", scenes.len()))?;
            let scores = model.scores(&sc.stream, *task)?;
            let sel = echopix::sieve::select_topk(
                &scores,
                &EchoModel::pool_modalities(&sc.stream),
                cfg.model.budget_p,
                cfg.model.pool_mode,
            )?;
            emit_analysis(
                "selection_map",
                &AnalysisInput::SelectionMap {
                    layout: &sc.stream.layout,
                    gates: &sel.gates,
                },
                &out,
            )?;
            extra.push(("checkpoint", checkpoint.as_ref().map_or("none".into(), |c| c.display().to_string())));
            extra.push(("scene", scene.to_string()));
        }
    }
    write_manifest(&out, cli.cmd.name(), &cfg.render(), cfg.seed, &extra)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
