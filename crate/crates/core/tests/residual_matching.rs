mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use slimforge::accounting::cost;
use slimforge::graph::{build_toy_backbone, validate, ChannelMask, ResidualGroup};
use slimforge::residual_matching::{apply_plan, disable_matching, unify_all, unify_group_masks};
use slimforge::slimming::{gamma_snapshot, global_prune_plan, PruningPlan};
use slimforge::Error;

fn plan_of(masks: Vec<ChannelMask>) -> PruningPlan {
    PruningPlan {
        masks: masks.into_iter().map(|m| (m.layer_id.clone(), m)).collect(),
        threshold: 0.0,
        achieved_rate: 0.0,
        protected: BTreeSet::new(),
    }
}

#[test]
fn pruning_dead_channels_preserves_outputs() {
    let mut r = rng(11);
    for _ in 0..40 {
        let g = random_graph(&mut r);
        let d = preservation_diff(&g, &mut r);
        assert!(d < 1e-6, "max abs diff {d}");
    }
}

#[test]
fn all_ones_plan_is_identity() {
    let mut r = rng(5);
    for _ in 0..10 {
        let g = random_graph(&mut r);
        let p = random_params(&g, &mut r);
        let plan = PruningPlan::keep_all(&g).unwrap();
        let out = apply_plan(&g, &p, &plan).unwrap();
        assert_eq!(out.graph, g);
        assert_eq!(out.params, p);
    }
}

#[test]
fn toy_plan_reduces_cost() {
    let g = build_toy_backbone(8, 3).unwrap();
    let mut r = rng(2);
    let p = random_params(&g, &mut r);
    let plan = global_prune_plan(&gamma_snapshot(&g, &p).unwrap(), 0.4, &BTreeSet::new()).unwrap();
    let plan = unify_all(&plan, &g.residual_groups).unwrap();
    let pruned = apply_plan(&g, &p, &plan).unwrap();
    let (a, b) = (cost(&g, (32, 32)).unwrap(), cost(&pruned.graph, (32, 32)).unwrap());
    assert!(b.total_params < a.total_params);
    assert!(b.total_flops < a.total_flops);
    assert!(b.capacity_mb < a.capacity_mb);
}

#[test]
fn disabled_matching_never_shrinks_more() {
    let mut r = rng(8);
    for _ in 0..10 {
        let g = build_toy_backbone(r.gen_range_usize(4, 8), 2).unwrap();
        let p = random_params(&g, &mut r);
        let raw = global_prune_plan(&gamma_snapshot(&g, &p).unwrap(), 0.5, &BTreeSet::new()).unwrap();
        let matched = apply_plan(&g, &p, &unify_all(&raw, &g.residual_groups).unwrap()).unwrap();
        let unmatched = apply_plan(&g, &p, &disable_matching(&raw, &g.residual_groups)).unwrap();
        let hw = (32, 32);
        assert!(cost(&unmatched.graph, hw).unwrap().capacity_mb >= cost(&matched.graph, hw).unwrap().capacity_mb);
    }
}

#[test]
fn ununified_group_is_rejected() {
    let g = build_toy_backbone(8, 1).unwrap();
    let ch = g.channels().unwrap();
    let mut plan = PruningPlan::keep_all(&g).unwrap();
    let first = g.residual_groups[0].block_output_bn_ids[0].clone();
    plan.masks.get_mut(&first).unwrap().keep[0] = false;
    let p = random_params(&g, &mut rng(1));
    assert!(matches!(apply_plan(&g, &p, &plan), Err(Error::InvalidArgument(_))));
    assert!(ch[&first] > 1);
}

#[test]
fn plan_mismatch_is_rejected() {
    let g = build_toy_backbone(8, 1).unwrap();
    let p = random_params(&g, &mut rng(1));
    let mut plan = PruningPlan::keep_all(&g).unwrap();
    plan.masks.insert("nope".into(), ChannelMask::all_kept("nope", 3));
    assert!(apply_plan(&g, &p, &plan).is_err());

    let mut plan = PruningPlan::keep_all(&g).unwrap();
    plan.masks.get_mut("stem.bn1").unwrap().keep.push(true);
    assert!(apply_plan(&g, &p, &plan).is_err());

    let mut plan = PruningPlan::keep_all(&g).unwrap();
    plan.masks
        .get_mut("stem.bn1")
        .unwrap()
        .keep
        .iter_mut()
        .for_each(|k| *k = false);
    assert!(apply_plan(&g, &p, &plan).is_err());
}

#[test]
fn remap_lists_original_indices() {
    let g = build_toy_backbone(8, 1).unwrap();
    let p = random_params(&g, &mut rng(1));
    let mut plan = PruningPlan::keep_all(&g).unwrap();
    plan.masks.get_mut("stem.bn1").unwrap().keep[1] = false;
    let out = apply_plan(&g, &p, &plan).unwrap();
    assert_eq!(out.remap["stem.conv1"], vec![0, 2, 3]);
    assert_eq!(out.remap["stem.relu1"], vec![0, 2, 3]);
    let text = out.remap_text(&g).unwrap();
    assert!(text.contains("stem.bn1 0,2,3"));
    assert!(validate(&out.graph).is_empty());
}

fn mask_strategy(len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), len)
}

proptest! {
    #[test]
    fn unify_is_or_and_order_free(len in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let masks: Vec<Vec<bool>> = (0..4).map(|_| (0..len).map(|_| r.gen_bool_half()).collect()).collect();
        let ids = ["a", "b", "c", "d"];
        let group = ResidualGroup {
            group_index: 0,
            block_output_bn_ids: ids[..3].iter().map(|s| s.to_string()).collect(),
            downsample_bn_id: Some("d".into()),
        };
        let plan = plan_of(ids.iter().zip(&masks).map(|(id, m)| ChannelMask { layer_id: id.to_string(), keep: m.clone() }).collect());
        let u = unify_group_masks(&plan, &group).unwrap();
        for i in 0..len {
            prop_assert_eq!(u.keep[i], masks.iter().any(|m| m[i]));
        }
        let reversed = ResidualGroup {
            group_index: 0,
            block_output_bn_ids: vec!["d".into(), "c".into(), "b".into()],
            downsample_bn_id: Some("a".into()),
        };
        prop_assert_eq!(unify_group_masks(&plan, &reversed).unwrap().keep, u.keep);
    }

    #[test]
    fn unified_plan_members_agree(keep in mask_strategy(8)) {
        let g = build_toy_backbone(8, 1).unwrap();
        let mut plan = PruningPlan::keep_all(&g).unwrap();
        let member = g.residual_groups[0].block_output_bn_ids[0].clone();
        let n = plan.masks[&member].len();
        for (i, k) in keep.iter().enumerate().take(n) {
            plan.masks.get_mut(&member).unwrap().keep[i] = *k;
        }
        let u = unify_all(&plan, &g.residual_groups).unwrap();
        let first: Vec<bool> = u.masks[&member].keep.clone();
        for m in g.residual_groups[0].members() {
            prop_assert_eq!(&u.masks[m].keep, &first);
        }
    }
}

trait RngExt {
    fn gen_range_usize(&mut self, lo: usize, hi: usize) -> usize;
    fn gen_bool_half(&mut self) -> bool;
}

impl RngExt for rand_chacha::ChaCha8Rng {
    fn gen_range_usize(&mut self, lo: usize, hi: usize) -> usize {
        rand::Rng::gen_range(self, lo..=hi)
    }
    fn gen_bool_half(&mut self) -> bool {
        rand::Rng::gen_bool(self, 0.5)
    }
}
