//! Distillation losses for a single-shot detector: hard/soft classification,
//! teacher-bounded box regression and attention transfer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mu0: f64,
    /// μ is multiplied by `mu_decay` every `mu_step_epochs` epochs.
    pub mu_step_epochs: usize,
    pub mu_decay: f64,
    pub nu: f64,
    pub margin: f64,
    pub omega_background: f64,
    pub omega_object: f64,
    pub temperature: f64,
    /// Feature maps paired for attention transfer; empty means one per
    /// detection branch at the ResBlock output.
    pub at_layer_ids: Vec<String>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            mu0: 0.9,
            mu_step_epochs: 60,
            mu_decay: 0.5,
            nu: 0.5,
            margin: 1.5,
            omega_background: 1.5,
            omega_object: 1.0,
            temperature: 1.0,
            at_layer_ids: Vec::new(),
        }
    }
}

impl KdConfig {
    pub fn check(&self) -> Result<()> {
        let factors = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("mu0", self.mu0),
            ("mu_decay", self.mu_decay),
            ("nu", self.nu),
            ("omega_background", self.omega_background),
            ("omega_object", self.omega_object),
        ];
        for (name, v) in factors {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be > 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        Ok(())
    }

    pub fn mu_at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.mu_step_epochs.max(1);
        self.mu0 * self.mu_decay.powi(steps as i32)
    }

    /// Per-class weights with class 0 as background.
    pub fn omega(&self, num_classes: usize) -> Vec<f64> {
        (0..num_classes)
            .map(|c| {
                if c == 0 {
                    self.omega_background
                } else {
                    self.omega_object
                }
            })
            .collect()
    }
}

/// Per-anchor student/teacher outputs and matched targets. Probability and
/// regression tensors are `[anchors, classes]` and `[anchors, 4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    pub p_s: Tensor,
    pub p_t: Tensor,
    pub r_s: Tensor,
    pub r_t: Tensor,
    pub y_cls: Vec<usize>,
    pub y_loc: Tensor,
    pub positives: Vec<bool>,
}

impl DetectionBatch {
    pub fn new(
        p_s: Tensor,
        p_t: Tensor,
        r_s: Tensor,
        r_t: Tensor,
        y_cls: Vec<usize>,
        y_loc: Tensor,
        positives: Vec<bool>,
    ) -> Result<Self> {
        let a = y_cls.len();
        let k = p_s.shape().last().copied().unwrap_or(0);
        let checks = [
            ("p_s", p_s.shape() == [a, k]),
            ("p_t", p_t.shape() == [a, k]),
            ("r_s", r_s.shape() == [a, 4]),
            ("r_t", r_t.shape() == [a, 4]),
            ("y_loc", y_loc.shape() == [a, 4]),
            ("positives", positives.len() == a),
            ("y_cls", y_cls.iter().all(|&c| c < k)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::invalid(format!(
                    "detection batch: `{name}` disagrees on anchors/classes"
                )));
            }
        }
        Ok(Self {
            p_s,
            p_t,
            r_s,
            r_t,
            y_cls,
            y_loc,
            positives,
        })
    }

    pub fn anchors(&self) -> usize {
        self.y_cls.len()
    }

    pub fn num_classes(&self) -> usize {
        self.p_s.shape()[1]
    }

    /// Number of recalled positives.
    pub fn n(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }
}

/// Decomposed loss of one step. `hard`, `soft`, `loc` and `bounded` are
/// already divided by N.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub hard: f64,
    pub soft: f64,
    pub loc: f64,
    pub bounded: f64,
    pub at: f64,
    pub total: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub n: usize,
}

impl LossReport {
    pub fn hard_part(&self) -> f64 {
        (1.0 - self.mu) * self.hard
    }

    pub fn soft_part(&self) -> f64 {
        self.mu * self.soft
    }

    /// Smooth-L1 plus the ν-weighted bounded term.
    pub fn loc_part(&self) -> f64 {
        self.loc + self.nu * self.bounded
    }

    /// Recombines the parts the way the total was formed.
    pub fn recombine(&self) -> f64 {
        self.hard_part() + self.soft_part() + self.alpha * self.loc_part() + self.beta * self.at
    }
}

fn check_distribution(p: &Tensor, what: &str) -> Result<()> {
    let k = p.shape()[1];
    for (a, row) in p.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "{what} of anchor {a} is not a distribution (sums to {s})"
            )));
        }
    }
    Ok(())
}

/// Summed hard cross-entropy and ω-weighted soft cross-entropy, given the
/// student's log-probabilities. `log_ps_soft` is the tempered variant used
/// by the soft term (the same var at temperature 1).
pub fn cls_terms(
    tape: &mut Tape,
    log_ps: Var,
    log_ps_soft: Var,
    p_t: Option<&Tensor>,
    y_cls: &[usize],
    omega: &[f64],
) -> Result<(Var, Var)> {
    let shape = tape.value(log_ps).shape().to_vec();
    if shape.len() != 2 || shape[0] != y_cls.len() || shape[1] != omega.len() {
        return Err(Error::invalid("cls loss: log-probabilities must be [anchors, classes]"));
    }
    let k = shape[1];
    let mut hard_w = vec![0.0; y_cls.len() * k];
    for (a, &y) in y_cls.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("cls loss: label {y} out of range")));
        }
        hard_w[a * k + y] = -1.0;
    }
    let hard = tape.dot_const(log_ps, hard_w)?;
    let soft = match p_t {
        Some(p_t) => {
            if p_t.shape() != shape.as_slice() {
                return Err(Error::invalid("cls loss: teacher probabilities shape mismatch"));
            }
            let w = p_t.data().iter().enumerate().map(|(i, p)| -omega[i % k] * p).collect();
            tape.dot_const(log_ps_soft, w)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((hard, soft))
}

/// Summed smooth-L1 over positives and summed teacher-gated squared error.
/// The gate is evaluated on values and carries no gradient.
pub fn loc_terms(
    tape: &mut Tape,
    r_s: Var,
    r_t: Option<&Tensor>,
    y_loc: &Tensor,
    positives: &[bool],
    margin: f64,
) -> Result<(Var, Var)> {
    let a = positives.len();
    if tape.value(r_s).shape() != [a, 4] || y_loc.shape() != [a, 4] {
        return Err(Error::invalid("loc loss: regressions must be [anchors, 4]"));
    }
    if !positives.iter().any(|&p| p) {
        return Err(Error::invalid("loc loss needs at least one positive anchor"));
    }
    let target = tape.constant(y_loc.detached());
    let diff = tape.sub(r_s, target)?;
    let sl1 = tape.smooth_l1(diff);
    let pos_w: Vec<f64> = positives.iter().flat_map(|&p| [if p { 1.0 } else { 0.0 }; 4]).collect();
    let smooth = tape.dot_const(sl1, pos_w)?;
    let bounded = match r_t {
        Some(r_t) => {
            if r_t.shape() != [a, 4] {
                return Err(Error::invalid("loc loss: teacher regressions shape mismatch"));
            }
            let ds = tape.value(diff).data().to_vec();
            let mut gate_w = vec![0.0; a * 4];
            for i in 0..a {
                if !positives[i] {
                    continue;
                }
                let s2: f64 = ds[i * 4..i * 4 + 4].iter().map(|v| v * v).sum();
                let t2: f64 = (0..4)
                    .map(|j| (r_t.data()[i * 4 + j] - y_loc.data()[i * 4 + j]).powi(2))
                    .sum();
                if s2 + margin > t2 {
                    gate_w[i * 4..i * 4 + 4].fill(1.0);
                }
            }
            let sq = tape.square(diff);
            tape.dot_const(sq, gate_w)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((smooth, bounded))
}

/// Sum over pairs of the L2 distance between normalized spatial attention
/// maps, averaged over the batch. Maps are `[N, C, H, W]`; channel counts
/// may differ within a pair.
pub fn at_term(tape: &mut Tape, student: &[Var], teacher: &[Tensor]) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::invalid("attention transfer: unpaired feature maps"));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (i, (&s, t)) in student.iter().zip(teacher).enumerate() {
        let ss = tape.value(s).shape().to_vec();
        let ts = t.shape();
        if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[2..] != ts[2..] {
            return Err(Error::invalid(format!(
                "attention transfer pair {i}: spatial sizes differ ({ss:?} vs {ts:?})"
            )));
        }
        let (n, hw) = (ss[0], ss[2] * ss[3]);
        let sq = tape.square(s);
        let f = tape.sum_axis1(sq)?;
        let f = tape.reshape(f, vec![n, hw])?;
        let fs = tape.row_normalize(f, 1e-8);
        let ft = tape.constant(attention_map(t, 1e-8));
        let diff = tape.sub(fs, ft)?;
        let dist = tape.row_norm(diff);
        let sum = tape.sum(dist);
        let mean = tape.scale(sum, 1.0 / n as f64);
        total = tape.add(total, mean)?;
    }
    Ok(total)
}

/// `Σ_c A_c²` per sample, flattened and divided by `‖·‖₂ + eps`: `[N, H·W]`.
pub fn attention_map(t: &Tensor, eps: f64) -> Tensor {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let src = &t.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (o, v) in out[ni * hw..(ni + 1) * hw].iter_mut().zip(src) {
                *o += v * v;
            }
        }
    }
    for row in out.chunks_mut(hw) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm + eps);
    }
    Tensor::new(vec![n, hw], out).expect("attention shape")
}

/// Student quantities recorded on the tape.
#[derive(Debug, Clone)]
pub struct StudentOutputs {
    pub log_probs: Var,
    /// Tempered log-probabilities for the soft term.
    pub soft_log_probs: Var,
    pub loc: Var,
    pub maps: Vec<Var>,
}

/// Constant teacher quantities.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub probs: Tensor,
    pub loc: Tensor,
    pub maps: Vec<Tensor>,
}

/// Matched targets for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    pub y_cls: Vec<usize>,
    pub y_loc: Tensor,
    pub positives: Vec<bool>,
}

impl Targets {
    pub fn n(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }
}

/// Full objective on the tape. Without a teacher it is the plain multibox
/// loss (μ, ν and β contributions vanish).
pub fn total_loss_var(
    tape: &mut Tape,
    student: &StudentOutputs,
    teacher: Option<&TeacherOutputs>,
    targets: &Targets,
    config: &KdConfig,
    epoch: usize,
) -> Result<(Var, LossReport)> {
    config.check()?;
    let n = targets.n();
    if n == 0 {
        return Err(Error::invalid("loss needs at least one recalled positive"));
    }
    let k = tape.value(student.log_probs).shape().get(1).copied().unwrap_or(0);
    let omega = config.omega(k);
    let (mu, nu, beta) = match teacher {
        Some(_) => (config.mu_at(epoch), config.nu, config.beta),
        None => (0.0, 0.0, 0.0),
    };
    let (hard, soft) = cls_terms(
        tape,
        student.log_probs,
        student.soft_log_probs,
        teacher.map(|t| &t.probs),
        &targets.y_cls,
        &omega,
    )?;
    let (smooth, bounded) = loc_terms(
        tape,
        student.loc,
        teacher.map(|t| &t.loc),
        &targets.y_loc,
        &targets.positives,
        config.margin,
    )?;
    let at = match teacher {
        Some(t) if beta > 0.0 && !student.maps.is_empty() => at_term(tape, &student.maps, &t.maps)?,
        _ => tape.constant(Tensor::scalar(0.0)),
    };
    let inv_n = 1.0 / n as f64;
    let parts = [
        (hard, (1.0 - mu) * inv_n),
        (soft, mu * inv_n),
        (smooth, config.alpha * inv_n),
        (bounded, config.alpha * nu * inv_n),
        (at, beta),
    ];
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (v, w) in parts {
        if w != 0.0 {
            let s = tape.scale(v, w);
            total = tape.add(total, s)?;
        }
    }
    let report = LossReport {
        hard: tape.value(hard).item() * inv_n,
        soft: tape.value(soft).item() * inv_n,
        loc: tape.value(smooth).item() * inv_n,
        bounded: tape.value(bounded).item() * inv_n,
        at: tape.value(at).item(),
        total: tape.value(total).item(),
        mu,
        alpha: config.alpha,
        beta,
        nu,
        n,
    };
    Ok((total, report))
}

fn log_const(tape: &mut Tape, p: &Tensor) -> Var {
    let logs = p.data().iter().map(|v| v.ln()).collect();
    tape.constant(Tensor::new(p.shape().to_vec(), logs).expect("same shape"))
}

/// `Σ_anchors (1−μ)·CE(P_s, y) + μ·(−Σ_c ω_c·P_t,c·log P_s,c)`.
pub fn cls_loss(batch: &DetectionBatch, mu: f64, omega: &[f64]) -> Result<f64> {
    check_distribution(&batch.p_s, "student probabilities")?;
    check_distribution(&batch.p_t, "teacher probabilities")?;
    let mut tape = Tape::new();
    let lp = log_const(&mut tape, &batch.p_s);
    let (hard, soft) = cls_terms(&mut tape, lp, lp, Some(&batch.p_t), &batch.y_cls, omega)?;
    Ok((1.0 - mu) * tape.value(hard).item() + mu * tape.value(soft).item())
}

/// `Σ_positives smoothL1(R_s − y) + ν·L_b`, where L_b is the student's
/// squared error when it is not better than the teacher's by `margin`.
pub fn loc_loss(batch: &DetectionBatch, nu: f64, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let r_s = tape.constant(batch.r_s.detached());
    let (smooth, bounded) = loc_terms(&mut tape, r_s, Some(&batch.r_t), &batch.y_loc, &batch.positives, margin)?;
    Ok(tape.value(smooth).item() + nu * tape.value(bounded).item())
}

/// Attention-transfer loss between paired `[N, C, H, W]` maps.
pub fn at_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = student.iter().map(|t| tape.constant(t.detached())).collect();
    let v = at_term(&mut tape, &vars, teacher)?;
    Ok(tape.value(v).item())
}

/// Full distillation loss of a probability-level batch, decomposed.
pub fn total_loss(
    batch: &DetectionBatch,
    student_maps: &[Tensor],
    teacher_maps: &[Tensor],
    config: &KdConfig,
    epoch: usize,
) -> Result<(f64, LossReport)> {
    check_distribution(&batch.p_s, "student probabilities")?;
    check_distribution(&batch.p_t, "teacher probabilities")?;
    let mut tape = Tape::new();
    let lp = log_const(&mut tape, &batch.p_s);
    let loc = tape.constant(batch.r_s.detached());
    let maps = student_maps.iter().map(|t| tape.constant(t.detached())).collect();
    let student = StudentOutputs {
        log_probs: lp,
        soft_log_probs: lp,
        loc,
        maps,
    };
    let teacher = TeacherOutputs {
        probs: batch.p_t.detached(),
        loc: batch.r_t.detached(),
        maps: teacher_maps.iter().map(Tensor::detached).collect(),
    };
    let targets = Targets {
        y_cls: batch.y_cls.clone(),
        y_loc: batch.y_loc.detached(),
        positives: batch.positives.clone(),
    };
    let (v, report) = total_loss_var(&mut tape, &student, Some(&teacher), &targets, config, epoch)?;
    Ok((tape.value(v).item(), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn single(p_s: [f64; 2], p_t: [f64; 2], y: usize) -> DetectionBatch {
        DetectionBatch::new(
            t(&[1, 2], &p_s),
            t(&[1, 2], &p_t),
            Tensor::zeros(&[1, 4]),
            Tensor::zeros(&[1, 4]),
            vec![y],
            Tensor::zeros(&[1, 4]),
            vec![true],
        )
        .unwrap()
    }

    #[test]
    fn soft_loss_hand_value() {
        let b = single([0.5, 0.5], [0.5, 0.5], 1);
        let v = cls_loss(&b, 1.0, &[1.5, 1.0]).unwrap();
        assert!((v - 1.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.86643).abs() < 1e-5);
    }

    #[test]
    fn mu_zero_is_cross_entropy() {
        let b = single([0.2, 0.8], [0.6, 0.4], 1);
        let v = cls_loss(&b, 0.0, &[1.5, 1.0]).unwrap();
        assert!((v + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_probabilities_rejected() {
        let b = single([0.2, 0.7], [0.6, 0.4], 1);
        assert!(matches!(cls_loss(&b, 0.5, &[1.0, 1.0]), Err(Error::InvalidArgument(_))));
    }

    fn loc_batch(rs: [f64; 4], rt: [f64; 4]) -> DetectionBatch {
        DetectionBatch::new(
            t(&[1, 2], &[0.5, 0.5]),
            t(&[1, 2], &[0.5, 0.5]),
            t(&[1, 4], &rs),
            t(&[1, 4], &rt),
            vec![1],
            Tensor::zeros(&[1, 4]),
            vec![true],
        )
        .unwrap()
    }

    #[test]
    fn bounded_gate_closed() {
        // student exact, teacher squared error 2.0
        let b = loc_batch([0.0; 4], [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(loc_loss(&b, 1.0, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn bounded_gate_open() {
        // student squared error 1.0, teacher 0.5
        let s = 0.5f64.sqrt();
        let b = loc_batch([1.0, 0.0, 0.0, 0.0], [s, 0.0, 0.0, 0.0]);
        let smooth = 0.5;
        assert!((loc_loss(&b, 1.0, 1.5).unwrap() - (smooth + 1.0)).abs() < 1e-12);
        assert!((loc_loss(&b, 0.0, 1.5).unwrap() - smooth).abs() < 1e-12);
    }

    #[test]
    fn no_positives_rejected() {
        let mut b = loc_batch([0.0; 4], [0.0; 4]);
        b.positives = vec![false];
        assert!(matches!(loc_loss(&b, 0.5, 1.5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mu_schedule() {
        let c = KdConfig::default();
        assert_eq!(c.mu_at(0), 0.9);
        assert_eq!(c.mu_at(59), 0.9);
        assert_eq!(c.mu_at(60), 0.45);
        assert_eq!(c.mu_at(120), 0.225);
    }

    #[test]
    fn at_is_zero_for_identical_and_scaled_maps() {
        let a = t(&[1, 2, 2, 2], &[0.3, -1.0, 2.0, 0.5, 1.5, 0.2, -0.7, 0.0]);
        assert!(at_loss(&[a.clone()], &[a.clone()]).unwrap().abs() < 1e-12);
        let scaled = t(a.shape(), &a.data().iter().map(|v| v * 3.0).collect::<Vec<_>>());
        assert!(at_loss(&[scaled], &[a]).unwrap().abs() < 1e-7);
    }

    #[test]
    fn at_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 2, 3, 2]);
        assert!(at_loss(&[a], &[b]).is_err());
    }

    #[test]
    fn config_rejects_bad_margin() {
        let c = KdConfig {
            margin: 0.0,
            ..KdConfig::default()
        };
        assert!(c.check().is_err());
    }
}
