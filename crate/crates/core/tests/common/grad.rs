//! Finite-difference gradient cases for every tape op and distillation loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slimforge::autodiff::{BnStats, Tape, Tensor, Var};
use slimforge::distill::{
    at_term, cls_terms, loc_terms, total_loss_var, KdConfig, StudentOutputs, Targets, TeacherOutputs,
};
use slimforge::Result;

use super::{gradient_error, random_tensor, rng};

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Values bounded away from zero: |x| ∈ [0.1, 1].
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from the smooth-L1 kinks at ±1.
fn away_from_one(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = if r.gen_bool(0.5) {
                r.gen_range(0.05..0.9)
            } else {
                r.gen_range(1.1..2.0)
            };
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.2..2.0)).collect()).unwrap()
}

fn probs(r: &mut ChaCha8Rng, a: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(a * k);
    for _ in 0..a {
        let row: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![a, k], data).unwrap()
}

/// One random instance of the named case: inputs and the function under test.
pub fn case(name: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let t = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, 1.0);
    match name {
        "conv2d_3x3" => (
            vec![t(r, &[2, 2, 4, 4]), t(r, &[3, 2, 3, 3]), t(r, &[3])],
            Box::new(|tp, v| tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        "conv2d_1x1_stride2" => (
            vec![t(r, &[1, 3, 5, 5]), t(r, &[2, 3, 1, 1])],
            Box::new(|tp, v| tp.conv2d(v[0], v[1], None, 2, 0)),
        ),
        "batch_norm_batch" => (
            vec![t(r, &[3, 2, 2, 2]), t(r, &[2]), t(r, &[2])],
            Box::new(|tp, v| Ok(tp.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?.0)),
        ),
        "batch_norm_running" => {
            let mean: Vec<f64> = (0..2).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..2).map(|_| r.gen_range(0.5..2.0)).collect();
            (
                vec![t(r, &[2, 2, 3, 3]), t(r, &[2]), t(r, &[2])],
                Box::new(move |tp, v| {
                    Ok(tp
                        .batch_norm(
                            v[0],
                            v[1],
                            v[2],
                            BnStats::Running {
                                mean: &mean,
                                var: &var,
                                eps: 1e-5,
                            },
                        )?
                        .0)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(r, &[2, 3, 2, 2])],
            Box::new(|tp, v| Ok(tp.relu(v[0]))),
        ),
        "add" => (vec![t(r, &[2, 3]), t(r, &[2, 3])], Box::new(|tp, v| tp.add(v[0], v[1]))),
        "sub" => (vec![t(r, &[2, 3]), t(r, &[2, 3])], Box::new(|tp, v| tp.sub(v[0], v[1]))),
        "mul" => (vec![t(r, &[2, 3]), t(r, &[2, 3])], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        "scale" => {
            let c = r.gen_range(-2.0..2.0);
            (vec![t(r, &[4])], Box::new(move |tp, v| Ok(tp.scale(v[0], c))))
        }
        "mul_const" => {
            let c: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
            (
                vec![t(r, &[2, 3])],
                Box::new(move |tp, v| tp.mul_const(v[0], c.clone())),
            )
        }
        "add_const" => {
            let c: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
            (vec![t(r, &[2, 3])], Box::new(move |tp, v| tp.add_const(v[0], &c)))
        }
        "max_pool" => (vec![t(r, &[2, 2, 5, 5])], Box::new(|tp, v| tp.max_pool(v[0], 3, 2, 1))),
        "avg_pool" => (vec![t(r, &[2, 2, 5, 5])], Box::new(|tp, v| tp.avg_pool(v[0], 3, 2, 1))),
        "global_avg_pool" => (vec![t(r, &[2, 3, 3, 3])], Box::new(|tp, v| tp.global_avg_pool(v[0]))),
        "linear" => (
            vec![t(r, &[3, 4]), t(r, &[2, 4]), t(r, &[2])],
            Box::new(|tp, v| tp.linear(v[0], v[1], Some(v[2]))),
        ),
        "concat" => (
            vec![t(r, &[2, 1, 2, 2]), t(r, &[2, 3, 2, 2])],
            Box::new(|tp, v| tp.concat(&[v[0], v[1]])),
        ),
        "reshape" => (vec![t(r, &[2, 6])], Box::new(|tp, v| tp.reshape(v[0], vec![3, 4]))),
        "softmax" => (vec![t(r, &[3, 4])], Box::new(|tp, v| tp.softmax(v[0]))),
        "log_softmax" => (vec![t(r, &[3, 4])], Box::new(|tp, v| tp.log_softmax(v[0]))),
        "log" => (vec![positive(r, &[5])], Box::new(|tp, v| Ok(tp.log(v[0])))),
        "abs" => (vec![away_from_zero(r, &[5])], Box::new(|tp, v| Ok(tp.abs(v[0])))),
        "square" => (vec![t(r, &[5])], Box::new(|tp, v| Ok(tp.square(v[0])))),
        "smooth_l1" => (vec![away_from_one(r, &[8])], Box::new(|tp, v| Ok(tp.smooth_l1(v[0])))),
        "sum" => (vec![t(r, &[2, 3])], Box::new(|tp, v| Ok(tp.sum(v[0])))),
        "dot_const" => {
            let w: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
            (vec![t(r, &[6])], Box::new(move |tp, v| tp.dot_const(v[0], w.clone())))
        }
        "sum_axis1" => (vec![t(r, &[2, 3, 2, 2])], Box::new(|tp, v| tp.sum_axis1(v[0]))),
        "row_normalize" => (vec![t(r, &[3, 4])], Box::new(|tp, v| Ok(tp.row_normalize(v[0], 1e-8)))),
        "row_norm" => (
            vec![away_from_zero(r, &[3, 4])],
            Box::new(|tp, v| Ok(tp.row_norm(v[0]))),
        ),
        "gather" => {
            let index: Vec<(usize, usize)> = (0..5).map(|_| (r.gen_range(0..2), r.gen_range(0..4))).collect();
            (
                vec![t(r, &[4]), t(r, &[2, 2])],
                Box::new(move |tp, v| tp.gather(&[v[0], v[1]], index.clone(), vec![5])),
            )
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
            (
                vec![t(r, &[3, 4])],
                Box::new(move |tp, v| tp.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "kd_cls_hard" | "kd_cls_soft" => {
            let soft = name == "kd_cls_soft";
            let (a, k) = (4, 3);
            let p_t = probs(r, a, k);
            let y: Vec<usize> = (0..a).map(|_| r.gen_range(0..k)).collect();
            (
                vec![t(r, &[a, k])],
                Box::new(move |tp, v| {
                    let lp = tp.log_softmax(v[0])?;
                    let (hard, s) = cls_terms(tp, lp, lp, Some(&p_t), &y, &[1.5, 1.0, 1.0])?;
                    Ok(if soft { s } else { hard })
                }),
            )
        }
        "kd_loc_smooth" | "kd_loc_bounded" => {
            let bounded = name == "kd_loc_bounded";
            let a = 4;
            let y = t(r, &[a, 4]);
            let resid = away_from_one(r, &[a, 4]);
            let r_s: Vec<f64> = y.data().iter().zip(resid.data()).map(|(a, b)| a + b).collect();
            // teacher error either far smaller or far larger than the student's
            let r_t: Vec<f64> = y
                .data()
                .iter()
                .map(|v| v + if r.gen_bool(0.5) { 0.01 } else { 3.0 })
                .collect();
            let r_t = Tensor::new(vec![a, 4], r_t).unwrap();
            let pos: Vec<bool> = (0..a).map(|i| i == 0 || r.gen_bool(0.6)).collect();
            (
                vec![Tensor::new(vec![a, 4], r_s).unwrap()],
                Box::new(move |tp, v| {
                    let (s, b) = loc_terms(tp, v[0], Some(&r_t), &y, &pos, 1.5)?;
                    Ok(if bounded { b } else { s })
                }),
            )
        }
        "kd_attention" => {
            let teacher = vec![t(r, &[2, 5, 3, 3]), t(r, &[2, 2, 2, 2])];
            (
                vec![t(r, &[2, 3, 3, 3]), t(r, &[2, 4, 2, 2])],
                Box::new(move |tp, v| at_term(tp, &[v[0], v[1]], &teacher)),
            )
        }
        "kd_total" => {
            let (a, k) = (6, 3);
            let teacher = TeacherOutputs {
                probs: probs(r, a, k),
                loc: t(r, &[a, 4]),
                maps: vec![t(r, &[2, 3, 2, 2])],
            };
            let y_loc = t(r, &[a, 4]);
            let targets = Targets {
                y_cls: (0..a).map(|_| r.gen_range(0..k)).collect(),
                y_loc: y_loc.clone(),
                positives: (0..a).map(|i| i < 3).collect(),
            };
            let resid = away_from_one(r, &[a, 4]);
            let r_s: Vec<f64> = y_loc.data().iter().zip(resid.data()).map(|(a, b)| a + b).collect();
            let epoch = r.gen_range(0..150);
            (
                vec![
                    t(r, &[a, k]),
                    Tensor::new(vec![a, 4], r_s).unwrap(),
                    t(r, &[2, 2, 2, 2]),
                ],
                Box::new(move |tp, v| {
                    let lp = tp.log_softmax(v[0])?;
                    let student = StudentOutputs {
                        log_probs: lp,
                        soft_log_probs: lp,
                        loc: v[1],
                        maps: vec![v[2]],
                    };
                    Ok(total_loss_var(tp, &student, Some(&teacher), &targets, &KdConfig::default(), epoch)?.0)
                }),
            )
        }
        other => panic!("unknown case {other}"),
    }
}

pub const OPS: &[&str] = &[
    "conv2d_3x3",
    "conv2d_1x1_stride2",
    "batch_norm_batch",
    "batch_norm_running",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "add_const",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "linear",
    "concat",
    "reshape",
    "softmax",
    "log_softmax",
    "log",
    "abs",
    "square",
    "smooth_l1",
    "sum",
    "dot_const",
    "sum_axis1",
    "row_normalize",
    "row_norm",
    "gather",
    "softmax_cross_entropy",
];

pub const LOSSES: &[&str] = &[
    "kd_cls_hard",
    "kd_cls_soft",
    "kd_loc_smooth",
    "kd_loc_bounded",
    "kd_attention",
    "kd_total",
];

/// Worst relative error of `name` over `points` random instances.
pub fn worst_error(name: &str, points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..points)
        .map(|i| {
            let (inputs, f) = case(name, &mut r);
            gradient_error(&inputs, seed ^ i as u64, f.as_ref())
        })
        .fold(0.0, f64::max)
}
