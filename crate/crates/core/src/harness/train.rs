use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Session, Tensor};
use crate::data::stack;
use crate::detection::{DetectorHead, SyntheticScene};
use crate::distill::{total_loss_var, KdConfig, LossReport, StudentOutputs, TeacherOutputs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub match_threshold: f64,
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.decay.powi(passed as i32)
    }
}

/// Frozen teacher detector queried in eval mode.
pub struct Teacher<'a> {
    pub session: &'a mut Session,
    pub head: &'a DetectorHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,step,hard,soft,loc,bounded,at,total,mu,lr";

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, p.hard, p.soft, p.loc, p.bounded, p.at, p.total, p.mu, r.lr
        );
    }
    out
}

/// Feature maps paired for attention transfer: the configured ids, or
/// every ResBlock output present in both graphs.
fn at_layers(kd: &KdConfig, student: &Session, teacher: &Session) -> Vec<String> {
    if !kd.at_layer_ids.is_empty() {
        return kd.at_layer_ids.clone();
    }
    student
        .graph()
        .iter()
        .filter(|n| n.id.starts_with("branch") && n.id.ends_with(".res.relu"))
        .filter(|n| teacher.graph().contains(&n.id))
        .map(|n| n.id.clone())
        .collect()
}

/// Multibox training of a detector, distilled from `teacher` when given.
pub fn train_detector(
    student: &mut Session,
    head: &DetectorHead,
    scenes: &[SyntheticScene],
    schedule: &TrainSchedule,
    kd: &KdConfig,
    mut teacher: Option<Teacher<'_>>,
) -> Result<Vec<TrainLogRow>> {
    kd.check()?;
    if let Some(t) = &teacher {
        if t.head.anchors() != head.anchors() || t.head.num_classes != head.num_classes {
            return Err(Error::invalid(
                "teacher and student heads disagree on anchors or classes",
            ));
        }
    }
    let layers = match &teacher {
        Some(t) => at_layers(kd, student, t.session),
        None => Vec::new(),
    };
    let inv_t = 1.0 / kd.temperature;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(schedule.batch_size.max(2)).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&SyntheticScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let targets = head.targets(&batch, schedule.match_threshold);
            if targets.n() == 0 {
                continue;
            }
            let x = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());

            let teacher_out = match teacher.as_mut() {
                Some(t) => {
                    t.session.set_mode(Mode::Eval);
                    let acts = t.session.forward(&x)?;
                    let tape = t.session.tape_mut()?;
                    let (logits, loc) = t.head.flatten(tape, &acts, chunk.len())?;
                    let scaled = tape.scale(logits, inv_t);
                    let probs = tape.softmax(scaled)?;
                    let maps = layers
                        .iter()
                        .map(|id| {
                            acts.get(id)
                                .map(|v| tape.value(*v).detached())
                                .ok_or_else(|| Error::invalid(format!("teacher has no layer `{id}`")))
                        })
                        .collect::<Result<Vec<Tensor>>>()?;
                    Some(TeacherOutputs {
                        probs: tape.value(probs).detached(),
                        loc: tape.value(loc).detached(),
                        maps,
                    })
                }
                None => None,
            };

            student.set_mode(Mode::Train);
            let acts = student.forward(&x)?;
            let maps = layers
                .iter()
                .map(|id| {
                    acts.get(id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("student has no layer `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let tape = student.tape_mut()?;
            let (logits, loc) = head.flatten(tape, &acts, chunk.len())?;
            let log_probs = tape.log_softmax(logits)?;
            let soft_log_probs = if kd.temperature == 1.0 {
                log_probs
            } else {
                let scaled = tape.scale(logits, inv_t);
                tape.log_softmax(scaled)?
            };
            let outputs = StudentOutputs {
                log_probs,
                soft_log_probs,
                loc,
                maps,
            };
            let (loss, report) = total_loss_var(tape, &outputs, teacher_out.as_ref(), &targets, kd, epoch)?;
            if !report.total.is_finite() {
                return Err(Error::State(format!("loss diverged at epoch {epoch}, step {step}")));
            }
            student.backward(loss)?;
            student.sgd_step(lr, schedule.momentum, schedule.weight_decay);
            log.push(TrainLogRow {
                epoch,
                step,
                report,
                lr,
            });
        }
    }
    student.set_mode(Mode::Eval);
    Ok(log)
}
