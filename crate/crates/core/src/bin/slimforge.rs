use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slimforge::accounting::cost;
use slimforge::autodiff::Session;
use slimforge::branch_prune::{fixed_prune_branches, reinitialize_branches};
use slimforge::detection::{evaluate_map, DetectorHead};
use slimforge::graph::{build_resnet50_v1d, build_toy_backbone, ModelGraph};
use slimforge::harness::{
    branch_scope, classification_data, detection_data, detector_head, load_graph, load_params, log_csv, report,
    run_pipeline, save_graph, save_params, stage_seed, train_detector, Metrics, PipelineConfig, Teacher, TrainSchedule,
    GRAPH_FILE, LOG_FILE, METRICS_FILE, PARAMS_FILE,
};
use slimforge::params::ParamStore;
use slimforge::residual_matching::{apply_plan, disable_matching, unify_all};
use slimforge::slimming::{evaluate_accuracy, train_slim, PruningPlan, Schedule};
use slimforge::{Error, Result};

#[derive(Parser)]
#[command(name = "slimforge", version, about = "Structured channel pruning for CNN graphs")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; omitted keys use the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the defaults.
    #[arg(long)]
    desk: bool,
}

impl ConfigArgs {
    fn load(&self, seed: u64) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.desk) {
            (Some(p), _) => PipelineConfig::load(p)?,
            (None, true) => PipelineConfig::desk(),
            (None, false) => PipelineConfig::default(),
        };
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and FLOPS accounting as CSV.
    Cost {
        /// Graph JSON, or `resnet50-v1d` / `toy` for a built-in template.
        graph: String,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy backbone with the γ sparsity penalty.
    SlimTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `slim_a` (step) or `slim_b` (cosine).
        #[arg(long)]
        schedule: Option<String>,
        /// Also write the accuracy-vs-removed-parameters sweep.
        #[arg(long)]
        curve: bool,
    },
    /// Global |γ| pruning plan.
    Plan {
        graph: PathBuf,
        params: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        rate: f64,
        /// Comma-separated BN ids excluded from ranking.
        #[arg(long, value_delimiter = ',')]
        protect: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove pruned channels from a graph and its parameters.
    Prune {
        graph: PathBuf,
        params: PathBuf,
        plan: PathBuf,
        /// Unify residual-group masks (default).
        #[arg(long = "match", overrides_with = "no_match")]
        do_match: bool,
        /// Keep residual-group outputs unpruned instead.
        #[arg(long = "no-match")]
        no_match: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-rate pruning of detection-branch layers, with fresh branch weights.
    BranchPrune {
        graph: PathBuf,
        #[arg(long)]
        rate: f64,
        /// Backbone parameters to carry over.
        #[arg(long)]
        params: Option<PathBuf>,
        /// `all` or `extras`.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on synthetic scenes.
    Train {
        graph: PathBuf,
        params: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector distilled from a trained teacher.
    DistillTrain {
        graph: PathBuf,
        params: PathBuf,
        #[arg(long)]
        teacher_graph: PathBuf,
        #[arg(long)]
        teacher_params: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: slim-train, plan, prune, branches, training, report.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison CSV over the variant runs in a directory.
    Report { dir: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Cost { .. } => "cost",
            Command::SlimTrain { .. } => "slim-train",
            Command::Plan { .. } => "plan",
            Command::Prune { .. } => "prune",
            Command::BranchPrune { .. } => "branch-prune",
            Command::Train { .. } => "train",
            Command::DistillTrain { .. } => "distill-train",
            Command::Pipeline { .. } => "pipeline",
            Command::Report { .. } => "report",
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn template(name: &str) -> Result<Option<ModelGraph>> {
    Ok(match name {
        "resnet50-v1d" | "resnet50" => Some(build_resnet50_v1d()),
        "toy" => Some(build_toy_backbone(8, 2)?),
        _ => None,
    })
}

fn schedule(cfg: &PipelineConfig, stage: u64) -> TrainSchedule {
    TrainSchedule {
        epochs: cfg.detector.run_epochs(),
        lr0: cfg.detector.lr0,
        milestones: cfg.detector.run_milestones(),
        decay: cfg.detector.decay,
        batch_size: cfg.detector.batch_size,
        momentum: cfg.detector.momentum,
        weight_decay: cfg.detector.weight_decay,
        seed: stage_seed(cfg.seed, stage),
        match_threshold: cfg.branch.match_threshold,
    }
}

fn finish_detector(
    session: &mut Session,
    head: &DetectorHead,
    cfg: &PipelineConfig,
    out: &Path,
    variant: &str,
    log: String,
) -> Result<()> {
    let (_, eval) = detection_data(cfg);
    let accuracy = evaluate_map(session, head, &eval, cfg.detector.batch_size)?;
    let hw = (cfg.data.image_size, cfg.data.image_size);
    let c = cost(session.graph(), hw)?;
    save_graph(&out.join(GRAPH_FILE), session.graph())?;
    save_params(&out.join(PARAMS_FILE), session.params())?;
    write(&out.join(LOG_FILE), &log)?;
    Metrics {
        variant: variant.to_string(),
        seed: cfg.seed,
        input_size: hw,
        capacity_mb: c.capacity_mb,
        flops: c.total_flops,
        accuracy,
    }
    .save(&out.join(METRICS_FILE))?;
    println!(
        "mAP@0.5 {accuracy:.4}  capacity {:.4} MB  flops {}",
        c.capacity_mb, c.total_flops
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Cost { graph, input, out } => {
            let g = match template(&graph)? {
                Some(g) => g,
                None => load_graph(Path::new(&graph))?,
            };
            let csv = cost(&g, (input, input))?.to_csv();
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::SlimTrain {
            cfg,
            out,
            lambda,
            epochs,
            schedule,
            curve,
        } => {
            let mut cfg = cfg.load(seed)?;
            if let Some(l) = lambda {
                cfg.slim.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.slim.epoch_max = e;
            }
            if let Some(s) = schedule {
                cfg.slim.schedule = s.parse::<Schedule>()?;
            }
            cfg.slim.curve = curve;
            cfg.slim.seed = stage_seed(seed, 2);
            cfg.slim.input_hw = (cfg.data.image_size, cfg.data.image_size);
            let graph = build_toy_backbone(cfg.backbone.width, cfg.backbone.groups)?;
            let params = ParamStore::init_for_graph(&graph, &mut ChaCha8Rng::seed_from_u64(stage_seed(seed, 1)));
            let mut session = Session::new(graph, params)?;
            let (train, eval) = classification_data(&cfg);
            let outcome = train_slim(&mut session, &train, Some(&eval), &cfg.slim)?;
            let acc = evaluate_accuracy(&mut session, &eval, cfg.slim.batch_size)?;
            std::fs::create_dir_all(&out)?;
            save_graph(&out.join(GRAPH_FILE), session.graph())?;
            save_params(&out.join(PARAMS_FILE), session.params())?;
            let mut log = String::from("epoch,step,task_loss,total_loss,lr\n");
            for r in &outcome.log {
                log.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.epoch, r.step, r.task_loss, r.total_loss, r.lr
                ));
            }
            write(&out.join("slim_log.csv"), &log)?;
            if !outcome.curve.is_empty() {
                let mut text = String::from("target_rate,removed_params,accuracy\n");
                for p in &outcome.curve {
                    text.push_str(&format!("{},{},{}\n", p.target_rate, p.removed_params, p.accuracy));
                }
                write(&out.join("curve.csv"), &text)?;
            }
            let small = outcome.gammas.values().flatten().filter(|g| g.abs() < 0.01).count();
            let total: usize = outcome.gammas.values().map(Vec::len).sum();
            println!("accuracy {acc:.4}  |γ|<0.01: {small}/{total}");
        }
        Command::Plan {
            graph,
            params,
            rate,
            protect,
            out,
        } => {
            let g = load_graph(&graph)?;
            let p = load_params(&params)?;
            let gammas = slimforge::slimming::gamma_snapshot(&g, &p)?;
            let protected: BTreeSet<String> = protect.into_iter().collect();
            let plan = slimforge::slimming::global_prune_plan(&gammas, rate, &protected)?;
            write(&out, &plan.to_text())?;
            println!("threshold {}  achieved rate {:.4}", plan.threshold, plan.achieved_rate);
        }
        Command::Prune {
            graph,
            params,
            plan,
            no_match,
            out,
            ..
        } => {
            let g = load_graph(&graph)?;
            let p = load_params(&params)?;
            let plan = PruningPlan::from_text(&std::fs::read_to_string(&plan)?)?;
            let plan = if no_match {
                disable_matching(&plan, &g.residual_groups)
            } else {
                unify_all(&plan, &g.residual_groups)?
            };
            let pruned = apply_plan(&g, &p, &plan)?;
            std::fs::create_dir_all(&out)?;
            save_graph(&out.join(GRAPH_FILE), &pruned.graph)?;
            save_params(&out.join(PARAMS_FILE), &pruned.params)?;
            write(&out.join("remap.txt"), &pruned.remap_text(&g)?)?;
            let hw = (224, 224);
            let (before, after) = (cost(&g, hw)?, cost(&pruned.graph, hw)?);
            println!(
                "params {} -> {}  capacity {:.4} -> {:.4} MB",
                before.total_params, after.total_params, before.capacity_mb, after.capacity_mb
            );
        }
        Command::BranchPrune {
            graph,
            rate,
            params,
            scope,
            out,
        } => {
            let g = load_graph(&graph)?;
            let pruned = fixed_prune_branches(&g, rate, branch_scope(&scope)?)?;
            let base = match params {
                Some(p) => load_params(&p)?,
                None => ParamStore::init_for_graph(&pruned, &mut ChaCha8Rng::seed_from_u64(stage_seed(seed, 1))),
            };
            let fresh = reinitialize_branches(&base, &pruned, seed);
            std::fs::create_dir_all(&out)?;
            save_graph(&out.join(GRAPH_FILE), &pruned)?;
            save_params(&out.join(PARAMS_FILE), &fresh)?;
        }
        Command::Train {
            graph,
            params,
            cfg,
            out,
        } => {
            let cfg = cfg.load(seed)?;
            let g = load_graph(&graph)?;
            let head = detector_head(&g, &cfg)?;
            let mut session = Session::new(g, load_params(&params)?)?;
            let (scenes, _) = detection_data(&cfg);
            let log = train_detector(&mut session, &head, &scenes, &schedule(&cfg, 40), &cfg.kd, None)?;
            std::fs::create_dir_all(&out)?;
            finish_detector(&mut session, &head, &cfg, &out, "train", log_csv(&log))?;
        }
        Command::DistillTrain {
            graph,
            params,
            teacher_graph,
            teacher_params,
            cfg,
            out,
        } => {
            let cfg = cfg.load(seed)?;
            let g = load_graph(&graph)?;
            let head = detector_head(&g, &cfg)?;
            let mut session = Session::new(g, load_params(&params)?)?;
            let tg = load_graph(&teacher_graph)?;
            let teacher_head = detector_head(&tg, &cfg)?;
            let mut teacher = Session::new(tg, load_params(&teacher_params)?)?;
            let (scenes, _) = detection_data(&cfg);
            let kd = slimforge::distill::KdConfig {
                mu_step_epochs: cfg.detector.scaled(cfg.kd.mu_step_epochs).max(1),
                ..cfg.kd.clone()
            };
            let t = Teacher {
                session: &mut teacher,
                head: &teacher_head,
            };
            let log = train_detector(&mut session, &head, &scenes, &schedule(&cfg, 41), &kd, Some(t))?;
            std::fs::create_dir_all(&out)?;
            finish_detector(&mut session, &head, &cfg, &out, "distill", log_csv(&log))?;
        }
        Command::Pipeline { cfg, out } => {
            let cfg = cfg.load(seed)?;
            let outcome = run_pipeline(&cfg, &out)?;
            print!("{}", slimforge::harness::to_csv(&outcome.report));
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = match e {
                e @ Error::Stage { .. } => e,
                other => other.in_stage(name),
            };
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
