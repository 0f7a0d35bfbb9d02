use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifacts::{save_graph, save_params, Metrics, GRAPH_FILE, LOG_FILE, METRICS_FILE, PARAMS_FILE};
use super::config::{variant_dir, BranchConfig, PipelineConfig};
use super::report::{collect, to_csv, ReportRow, EXPECTED_FILE};
use super::train::{log_csv, train_detector, Teacher, TrainSchedule};
use crate::accounting::cost;
use crate::autodiff::Session;
use crate::branch_prune::{fixed_prune_branches, reinitialize_branches, BranchScope};
use crate::data::LabeledImages;
use crate::detection::{
    evaluate_map, generate_labeled, generate_scenes_with, DetectorHead, SceneConfig, SyntheticScene,
};
use crate::error::{Error, Result};
use crate::graph::{
    attach_detection_branches, attach_extras, build_toy_backbone, BranchSpec, ExtrasSpec, LayerKind, ModelGraph,
};
use crate::params::ParamStore;
use crate::residual_matching::{apply_plan, disable_matching, unify_all, PrunedModel};
use crate::slimming::{evaluate_accuracy, gamma_snapshot, global_prune_plan, train_slim, PruningPlan};

/// Three shape classes plus background.
pub const NUM_CLASSES: usize = 4;

/// Independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn scene_config(cfg: &PipelineConfig) -> SceneConfig {
    SceneConfig {
        max_objects: cfg.data.max_objects,
        ..SceneConfig::with_size(cfg.data.image_size)
    }
}

pub fn classification_data(cfg: &PipelineConfig) -> (LabeledImages, LabeledImages) {
    let sc = scene_config(cfg);
    (
        generate_labeled(cfg.data.classification_images, stage_seed(cfg.seed, 10), &sc),
        generate_labeled(cfg.data.classification_eval, stage_seed(cfg.seed, 11), &sc),
    )
}

pub fn detection_data(cfg: &PipelineConfig) -> (Vec<SyntheticScene>, Vec<SyntheticScene>) {
    let sc = scene_config(cfg);
    (
        generate_scenes_with(cfg.data.train_scenes, stage_seed(cfg.seed, 12), &sc),
        generate_scenes_with(cfg.data.eval_scenes, stage_seed(cfg.seed, 13), &sc),
    )
}

/// The node feeding the classifier's global pool.
pub fn feature_node(backbone: &ModelGraph) -> Result<String> {
    backbone
        .iter()
        .find(|n| n.kind == LayerKind::GlobalPool)
        .map(|n| n.inputs[0].clone())
        .ok_or_else(|| Error::invalid("backbone has no global pool to cut at"))
}

/// Cuts the classifier off `backbone`, appends extras and one branch per
/// feature map. With `resblock` each branch gets a ResBlock and 1×1 heads;
/// otherwise heads are 3×3 convs directly on the features.
pub fn build_detector(backbone: &ModelGraph, branch: &BranchConfig, resblock: bool) -> Result<ModelGraph> {
    let feature = feature_node(backbone)?;
    let trunk = backbone.retain_ancestors(&[&feature])?;
    let spec = ExtrasSpec {
        from: feature.clone(),
        stages: branch.extras.clone(),
    };
    let (graph, extras_out) = attach_extras(&trunk, &spec)?;
    let features: Vec<String> = std::iter::once(feature).chain(extras_out).collect();
    if features.len() != branch.anchor_sizes.len() {
        return Err(Error::invalid(format!(
            "{} feature maps but {} anchor size lists",
            features.len(),
            branch.anchor_sizes.len()
        )));
    }
    let specs: Vec<BranchSpec> = features
        .iter()
        .zip(&branch.anchor_sizes)
        .map(|(f, sizes)| {
            let s = BranchSpec::new(f.clone(), sizes.len(), NUM_CLASSES);
            if resblock {
                s.with_resblock(branch.resblock.0, branch.resblock.1)
            } else {
                s.with_head_kernel(3)
            }
        })
        .collect();
    attach_detection_branches(&graph, &specs)
}

pub fn detector_head(graph: &ModelGraph, cfg: &PipelineConfig) -> Result<DetectorHead> {
    let s = cfg.data.image_size;
    DetectorHead::from_graph(graph, (s, s), &cfg.branch.anchor_sizes)
}

/// Global |γ| plan over every batch norm, then unified (or, with matching
/// off, with residual-group outputs kept whole).
pub fn make_plan(
    graph: &ModelGraph,
    params: &ParamStore,
    rate: f64,
    matching: bool,
    protected: &[String],
) -> Result<PruningPlan> {
    let gammas = gamma_snapshot(graph, params)?;
    let protected: BTreeSet<String> = protected.iter().cloned().collect();
    let plan = global_prune_plan(&gammas, rate, &protected)?;
    if matching {
        unify_all(&plan, &graph.residual_groups)
    } else {
        Ok(disable_matching(&plan, &graph.residual_groups))
    }
}

pub fn branch_scope(name: &str) -> Result<BranchScope> {
    match name {
        "all" => Ok(BranchScope::All),
        "extras" => Ok(BranchScope::ExtrasOnly),
        other => Err(Error::invalid(format!("unknown branch scope `{other}`"))),
    }
}

/// Everything produced by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub plan: PruningPlan,
    pub backbone_accuracy: f64,
    pub pruned_backbone_accuracy: f64,
    pub teacher: Option<Metrics>,
    pub variants: Vec<Metrics>,
    pub report: Vec<ReportRow>,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(name))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

struct TrainedDetector {
    session: Session,
    head: DetectorHead,
    metrics: Metrics,
}

/// slim-train → plan → match+apply → attach branches → branch-prune →
/// teacher → students → report, writing every artifact under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    stage("config", || cfg.check())?;
    std::fs::create_dir_all(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join(EXPECTED_FILE), &(cfg.variants.join("\n") + "\n"))?;
    let hw = (cfg.data.image_size, cfg.data.image_size);

    // Backbone pretraining with the sparsity penalty.
    let (train_cls, eval_cls) = classification_data(cfg);
    let (backbone, backbone_accuracy) = stage("slim-train", || {
        let graph = build_toy_backbone(cfg.backbone.width, cfg.backbone.groups)?;
        let params = ParamStore::init_for_graph(&graph, &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1)));
        let mut session = Session::new(graph, params)?;
        let slim = crate::slimming::SlimConfig {
            seed: stage_seed(cfg.seed, 2),
            input_hw: hw,
            ..cfg.slim.clone()
        };
        let outcome = train_slim(&mut session, &train_cls, Some(&eval_cls), &slim)?;
        let acc = evaluate_accuracy(&mut session, &eval_cls, slim.batch_size)?;
        let dir = out.join("backbone");
        std::fs::create_dir_all(&dir)?;
        save_graph(&dir.join(GRAPH_FILE), session.graph())?;
        save_params(&dir.join(PARAMS_FILE), session.params())?;
        let mut log = String::from("epoch,step,task_loss,total_loss,lr\n");
        for r in &outcome.log {
            log.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.step, r.task_loss, r.total_loss, r.lr
            ));
        }
        write(&dir.join("slim_log.csv"), &log)?;
        if !outcome.curve.is_empty() {
            let mut curve = String::from("target_rate,removed_params,accuracy\n");
            for p in &outcome.curve {
                curve.push_str(&format!("{},{},{}\n", p.target_rate, p.removed_params, p.accuracy));
            }
            write(&dir.join("curve.csv"), &curve)?;
        }
        Ok((session.into_parts(), acc))
    })?;

    let plan = stage("plan", || {
        let plan = make_plan(
            &backbone.0,
            &backbone.1,
            cfg.prune.rate,
            cfg.prune.matching,
            &cfg.prune.protected,
        )?;
        write(&out.join("plan.txt"), &plan.to_text())?;
        Ok(plan)
    })?;

    let (pruned, pruned_backbone_accuracy): (PrunedModel, f64) = stage("prune", || {
        let pruned = apply_plan(&backbone.0, &backbone.1, &plan)?;
        let dir = out.join("pruned");
        std::fs::create_dir_all(&dir)?;
        save_graph(&dir.join(GRAPH_FILE), &pruned.graph)?;
        save_params(&dir.join(PARAMS_FILE), &pruned.params)?;
        write(&dir.join("remap.txt"), &pruned.remap_text(&backbone.0)?)?;
        let mut s = Session::new(pruned.graph.clone(), pruned.params.clone())?;
        let acc = evaluate_accuracy(&mut s, &eval_cls, cfg.slim.batch_size)?;
        Ok((pruned, acc))
    })?;

    let (train_scenes, eval_scenes) = detection_data(cfg);
    let epochs = cfg.detector.run_epochs();
    let schedule = |epochs: usize, stage_id: u64| TrainSchedule {
        epochs,
        lr0: cfg.detector.lr0,
        milestones: cfg
            .detector
            .run_milestones()
            .iter()
            .map(|&m| (m as f64 * epochs as f64 / cfg.detector.run_epochs() as f64).round() as usize)
            .collect(),
        decay: cfg.detector.decay,
        batch_size: cfg.detector.batch_size,
        momentum: cfg.detector.momentum,
        weight_decay: cfg.detector.weight_decay,
        seed: stage_seed(cfg.seed, stage_id),
        match_threshold: cfg.branch.match_threshold,
    };
    let kd = crate::distill::KdConfig {
        mu_step_epochs: cfg.detector.scaled(cfg.kd.mu_step_epochs).max(1),
        ..cfg.kd.clone()
    };
    let scope = branch_scope(&cfg.branch.scope)?;

    let train_variant = |name: &str,
                         backbone_graph: &ModelGraph,
                         backbone_params: &ParamStore,
                         resblock: bool,
                         rate: f64,
                         epochs: usize,
                         stage_id: u64,
                         teacher: Option<Teacher<'_>>|
     -> Result<TrainedDetector> {
        let dir = out.join(variant_dir(name));
        std::fs::create_dir_all(&dir)?;
        let full = build_detector(backbone_graph, &cfg.branch, resblock)?;
        let graph = fixed_prune_branches(&full, rate, scope)?;
        let params = reinitialize_branches(backbone_params, &graph, stage_seed(cfg.seed, stage_id));
        save_graph(&dir.join(GRAPH_FILE), &graph)?;
        let head = detector_head(&graph, cfg)?;
        let mut session = Session::new(graph, params)?;
        let kd_cfg = if teacher.is_some() { kd.clone() } else { cfg.kd.clone() };
        let log = train_detector(
            &mut session,
            &head,
            &train_scenes,
            &schedule(epochs, stage_id + 1),
            &kd_cfg,
            teacher,
        )?;
        write(&dir.join(LOG_FILE), &log_csv(&log))?;
        save_params(&dir.join(PARAMS_FILE), session.params())?;
        let accuracy = evaluate_map(&mut session, &head, &eval_scenes, cfg.detector.batch_size)?;
        let c = cost(session.graph(), hw)?;
        let metrics = Metrics {
            variant: name.to_string(),
            seed: cfg.seed,
            input_size: hw,
            capacity_mb: c.capacity_mb,
            flops: c.total_flops,
            accuracy,
        };
        metrics.save(&dir.join(METRICS_FILE))?;
        Ok(TrainedDetector { session, head, metrics })
    };

    let needs_teacher = cfg.variants.iter().any(|v| v.ends_with("KD"));
    let mut teacher = if needs_teacher {
        let teacher_epochs = ((epochs as f64) * cfg.detector.teacher_epoch_factor).round().max(1.0) as usize;
        Some(stage("teacher", || {
            train_variant("teacher", &backbone.0, &backbone.1, true, 0.0, teacher_epochs, 20, None)
        })?)
    } else {
        None
    };

    // Students share init and batch-order seeds so variant differences are
    // paired rather than confounded with seed noise.
    let mut variants = Vec::new();
    for name in &cfg.variants {
        let resblock = name.contains("+R");
        let t = match (name.ends_with("KD"), teacher.as_mut()) {
            (true, Some(t)) => Some(Teacher {
                session: &mut t.session,
                head: &t.head,
            }),
            _ => None,
        };
        let trained = stage(&format!("train {name}"), || {
            train_variant(
                name,
                &pruned.graph,
                &pruned.params,
                resblock,
                cfg.branch.rate,
                epochs,
                30,
                t,
            )
        })?;
        variants.push(trained.metrics);
    }

    let report = stage("report", || {
        let rows = collect(out)?;
        write(&out.join("report.csv"), &to_csv(&rows))?;
        Ok(rows)
    })?;
    Ok(PipelineOutcome {
        plan,
        backbone_accuracy,
        pruned_backbone_accuracy,
        teacher: teacher.map(|t| t.metrics),
        variants,
        report,
    })
}
