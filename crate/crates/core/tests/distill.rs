mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slimforge::autodiff::Tensor;
use slimforge::distill::{at_loss, cls_loss, loc_loss, total_loss, DetectionBatch, KdConfig};

fn probs(r: &mut ChaCha8Rng, a: usize, k: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..a {
        let row: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![a, k], data).unwrap()
}

fn batch(r: &mut ChaCha8Rng, a: usize, k: usize) -> DetectionBatch {
    let mut positives: Vec<bool> = (0..a).map(|_| r.gen_bool(0.4)).collect();
    positives[0] = true;
    DetectionBatch::new(
        probs(r, a, k),
        probs(r, a, k),
        random_tensor(r, &[a, 4], 2.0),
        random_tensor(r, &[a, 4], 2.0),
        (0..a).map(|_| r.gen_range(0..k)).collect(),
        random_tensor(r, &[a, 4], 1.0),
        positives,
    )
    .unwrap()
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[i * w..(i + 1) * w]
}

/// Per-anchor loops straight from the loss definitions.
fn brute_cls(b: &DetectionBatch, mu: f64, omega: &[f64]) -> f64 {
    (0..b.anchors())
        .map(|a| {
            let ps = row(&b.p_s, a);
            let pt = row(&b.p_t, a);
            let hard = -ps[b.y_cls[a]].ln();
            let soft: f64 = (0..ps.len()).map(|c| -omega[c] * pt[c] * ps[c].ln()).sum();
            (1.0 - mu) * hard + mu * soft
        })
        .sum()
}

fn brute_loc(b: &DetectionBatch, nu: f64, margin: f64) -> (f64, f64) {
    let (mut smooth, mut bounded) = (0.0, 0.0);
    for a in (0..b.anchors()).filter(|&a| b.positives[a]) {
        let (rs, rt, y) = (row(&b.r_s, a), row(&b.r_t, a), row(&b.y_loc, a));
        for j in 0..4 {
            let d: f64 = rs[j] - y[j];
            smooth += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let s2: f64 = (0..4).map(|j| (rs[j] - y[j]).powi(2)).sum();
        let t2: f64 = (0..4).map(|j| (rt[j] - y[j]).powi(2)).sum();
        if s2 + margin > t2 {
            bounded += s2;
        }
    }
    (smooth, smooth + nu * bounded)
}

/// Attention distance computed element by element.
fn brute_at(s: &Tensor, t: &Tensor) -> f64 {
    let map = |x: &Tensor, n: usize| -> Vec<f64> {
        let sh = x.shape();
        let (c, hw) = (sh[1], sh[2] * sh[3]);
        let mut q = vec![0.0; hw];
        for ci in 0..c {
            for p in 0..hw {
                q[p] += x.data()[(n * c + ci) * hw + p].powi(2);
            }
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter().map(|v| v / (norm + 1e-8)).collect()
    };
    let n = s.shape()[0];
    (0..n)
        .map(|i| {
            let (a, b) = (map(s, i), map(t, i));
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn cls_matches_per_anchor_loops() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (a, k) = (r.gen_range(1..12), r.gen_range(2..6));
        let b = batch(&mut r, a, k);
        let mu = r.gen_range(0.0..1.0);
        let omega: Vec<f64> = (0..b.num_classes()).map(|_| r.gen_range(0.5..2.0)).collect();
        let want = brute_cls(&b, mu, &omega);
        assert!((cls_loss(&b, mu, &omega).unwrap() - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn mu_zero_is_plain_cross_entropy() {
    let mut r = rng(2);
    for _ in 0..50 {
        let b = batch(&mut r, 6, 4);
        let ce: f64 = (0..6).map(|a| -row(&b.p_s, a)[b.y_cls[a]].ln()).sum();
        assert!((cls_loss(&b, 0.0, &[1.5, 1.0, 1.0, 1.0]).unwrap() - ce).abs() < 1e-9);
    }
}

#[test]
fn loc_matches_per_anchor_loops() {
    let mut r = rng(3);
    for _ in 0..50 {
        let a = r.gen_range(1..12);
        let b = batch(&mut r, a, 3);
        let nu = r.gen_range(0.0..1.0);
        let (_, want) = brute_loc(&b, nu, 1.5);
        assert!((loc_loss(&b, nu, 1.5).unwrap() - want).abs() < 1e-9);
    }
}

fn one_anchor(rs: [f64; 4], rt: [f64; 4]) -> DetectionBatch {
    let half = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    DetectionBatch::new(
        half.clone(),
        half,
        Tensor::new(vec![1, 4], rs.to_vec()).unwrap(),
        Tensor::new(vec![1, 4], rt.to_vec()).unwrap(),
        vec![0],
        Tensor::zeros(&[1, 4]),
        vec![true],
    )
    .unwrap()
}

#[test]
fn bounded_gate_examples() {
    // student error 0, teacher squared error 2: gate closed
    let b = one_anchor([0.0; 4], [1.0, 1.0, 0.0, 0.0]);
    assert_eq!(loc_loss(&b, 1.0, 1.5).unwrap(), 0.0);
    // student squared error 1, teacher 0.5: gate open, L_b = 1
    let b = one_anchor([1.0, 0.0, 0.0, 0.0], [0.5f64.sqrt(), 0.0, 0.0, 0.0]);
    let smooth_only = loc_loss(&b, 0.0, 1.5).unwrap();
    assert_eq!(loc_loss(&b, 1.0, 1.5).unwrap() - smooth_only, 1.0);
}

#[test]
fn attention_matches_elementwise_computation() {
    let mut r = rng(4);
    for _ in 0..50 {
        let s = random_tensor(&mut r, &[2, 2, 2, 2], 1.0);
        let t = random_tensor(&mut r, &[2, 2, 2, 2], 1.0);
        assert!((at_loss(&[s.clone()], &[t.clone()]).unwrap() - brute_at(&s, &t)).abs() < 1e-12);
    }
    let s = random_tensor(&mut r, &[3, 2, 4, 3], 1.0);
    let t = random_tensor(&mut r, &[3, 7, 4, 3], 1.0);
    let pair = at_loss(&[s.clone(), s.clone()], &[t.clone(), t.clone()]).unwrap();
    assert!((pair - 2.0 * brute_at(&s, &t)).abs() < 1e-12);
}

#[test]
fn identical_maps_give_zero_attention_loss() {
    let mut r = rng(5);
    for _ in 0..20 {
        let s = random_tensor(&mut r, &[2, 3, 3, 3], 1.0);
        assert!(at_loss(&[s.clone()], &[s]).unwrap().abs() < 1e-12);
    }
}

#[test]
fn teacher_equal_to_student() {
    let mut r = rng(6);
    let omega = [1.5, 1.0, 1.0];
    for _ in 0..20 {
        let mut b = batch(&mut r, 5, 3);
        b.p_t = b.p_s.clone();
        b.r_t = b.r_s.clone();
        let entropy: f64 = (0..5)
            .map(|a| {
                let p = row(&b.p_s, a);
                (0..3).map(|c| -omega[c] * p[c] * p[c].ln()).sum::<f64>()
            })
            .sum();
        assert!((cls_loss(&b, 1.0, &omega).unwrap() - entropy).abs() < 1e-9);
        let s2: f64 = (0..5)
            .filter(|&a| b.positives[a])
            .map(|a| {
                (0..4)
                    .map(|j| (row(&b.r_s, a)[j] - row(&b.y_loc, a)[j]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let bounded = loc_loss(&b, 1.0, 1.5).unwrap() - loc_loss(&b, 0.0, 1.5).unwrap();
        assert!((bounded - s2).abs() < 1e-9);
    }
}

#[test]
fn zero_kd_weights_give_multibox() {
    let mut r = rng(7);
    let cfg = KdConfig {
        mu0: 0.0,
        nu: 0.0,
        beta: 0.0,
        ..KdConfig::default()
    };
    for _ in 0..20 {
        let b = batch(&mut r, 8, 3);
        let maps = [random_tensor(&mut r, &[1, 2, 2, 2], 1.0)];
        let other = [random_tensor(&mut r, &[1, 2, 2, 2], 1.0)];
        let (total, _) = total_loss(&b, &maps, &other, &cfg, 0).unwrap();
        let n = b.n() as f64;
        let ce = brute_cls(&b, 0.0, &[1.5, 1.0, 1.0]);
        let (smooth, _) = brute_loc(&b, 0.0, 1.5);
        assert!((total - (ce + smooth) / n).abs() < 1e-9);
    }
}

#[test]
fn report_recombines_to_total() {
    let mut r = rng(8);
    for epoch in [0, 30, 60, 119, 120, 200] {
        let b = batch(&mut r, 10, 4);
        let maps = [random_tensor(&mut r, &[2, 3, 2, 2], 1.0)];
        let tmaps = [random_tensor(&mut r, &[2, 5, 2, 2], 1.0)];
        let cfg = KdConfig {
            alpha: r.gen_range(0.5..2.0),
            beta: r.gen_range(0.0..2.0),
            ..KdConfig::default()
        };
        let (total, rep) = total_loss(&b, &maps, &tmaps, &cfg, epoch).unwrap();
        assert!((rep.recombine() - total).abs() < 1e-9);
        assert_eq!(rep.total, total);
        assert_eq!(rep.mu, cfg.mu_at(epoch));
        assert_eq!(rep.n, b.n());
        assert!((rep.at - brute_at(&maps[0], &tmaps[0])).abs() < 1e-12);
    }
}

#[test]
fn mu_halves_every_sixty_epochs() {
    let c = KdConfig::default();
    for (e, want) in [(0, 0.9), (60, 0.45), (120, 0.225), (179, 0.225)] {
        assert!((c.mu_at(e) - want).abs() < 1e-15);
    }
}

#[test]
fn malformed_batches_are_rejected() {
    let mut r = rng(9);
    let p = probs(&mut r, 3, 2);
    let z = Tensor::zeros(&[3, 4]);
    assert!(DetectionBatch::new(
        p.clone(),
        p.clone(),
        z.clone(),
        z.clone(),
        vec![0, 1],
        z.clone(),
        vec![true; 3]
    )
    .is_err());
    assert!(DetectionBatch::new(
        p.clone(),
        p.clone(),
        z.clone(),
        z.clone(),
        vec![0, 1, 2],
        z.clone(),
        vec![true; 3]
    )
    .is_err());
    let mut b = batch(&mut r, 3, 2);
    b.positives = vec![false; 3];
    assert!(loc_loss(&b, 0.5, 1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(seed in 0u64..100_000, mu in 0.0f64..1.0, nu in 0.0f64..1.0) {
        let mut r = rng(seed);
        let b = batch(&mut r, 6, 3);
        prop_assert!(cls_loss(&b, mu, &[1.5, 1.0, 1.0]).unwrap() >= 0.0);
        prop_assert!(loc_loss(&b, nu, 1.5).unwrap() >= 0.0);
        let s = random_tensor(&mut r, &[2, 2, 3, 3], 1.0);
        let t = random_tensor(&mut r, &[2, 4, 3, 3], 1.0);
        let at = at_loss(&[s], &[t]).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&at));
    }
}
