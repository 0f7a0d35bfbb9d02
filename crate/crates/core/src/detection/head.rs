use std::collections::BTreeMap;

use super::geometry::{decode, iou_unchecked, match_anchors, AnchorGrid, BBox, GroundTruth};
use super::scenes::SyntheticScene;
use crate::autodiff::{Activations, Mode, Session, Tape, Tensor, Var};
use crate::data::stack;
use crate::distill::Targets;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;

/// The cls/loc pair of one detection branch and its anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBranch {
    pub cls_id: String,
    pub loc_id: String,
    pub grid: AnchorGrid,
}

/// Maps the per-branch conv outputs of a detector graph to per-anchor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorHead {
    pub branches: Vec<HeadBranch>,
    /// Including background.
    pub num_classes: usize,
}

impl DetectorHead {
    /// Finds `branch{i}.cls` / `branch{i}.loc` in index order and pairs
    /// branch `i` with `anchor_sizes[i]`.
    pub fn from_graph(graph: &ModelGraph, input_hw: (usize, usize), anchor_sizes: &[Vec<(f64, f64)>]) -> Result<Self> {
        let shapes = graph.shapes(input_hw)?;
        let mut branches = Vec::new();
        let mut num_classes = None;
        for (i, sizes) in anchor_sizes.iter().enumerate() {
            let cls_id = format!("branch{i}.cls");
            let loc_id = format!("branch{i}.loc");
            let (cls, loc) = match (shapes.get(&cls_id), shapes.get(&loc_id)) {
                (Some(c), Some(l)) => (c, l),
                _ => return Err(Error::invalid(format!("detector has no branch {i}"))),
            };
            let a = sizes.len();
            if a == 0 || cls.channels % a != 0 || loc.channels != 4 * a {
                return Err(Error::invalid(format!(
                    "branch {i}: {a} anchors per cell do not fit cls/loc widths {}/{}",
                    cls.channels, loc.channels
                )));
            }
            let k = cls.channels / a;
            if *num_classes.get_or_insert(k) != k {
                return Err(Error::invalid("branches disagree on the class count"));
            }
            branches.push(HeadBranch {
                cls_id,
                loc_id,
                grid: AnchorGrid::new(cls.height, cls.width, sizes.clone())?,
            });
        }
        if branches.is_empty() {
            return Err(Error::invalid("detector head needs at least one branch"));
        }
        Ok(Self {
            branches,
            num_classes: num_classes.unwrap_or(0),
        })
    }

    pub fn anchors(&self) -> Vec<BBox> {
        self.branches.iter().flat_map(|b| b.grid.boxes()).collect()
    }

    pub fn anchors_per_image(&self) -> usize {
        self.branches.iter().map(|b| b.grid.len()).sum()
    }

    /// Gathers `[n·anchors, classes]` logits and `[n·anchors, 4]` offsets,
    /// image-major then branch, cell and anchor.
    pub fn flatten(&self, tape: &mut Tape, acts: &Activations, n: usize) -> Result<(Var, Var)> {
        let mut cls_vars = Vec::new();
        let mut loc_vars = Vec::new();
        for b in &self.branches {
            for (id, dst) in [(&b.cls_id, &mut cls_vars), (&b.loc_id, &mut loc_vars)] {
                dst.push(
                    *acts
                        .get(id)
                        .ok_or_else(|| Error::State(format!("no activation for `{id}`")))?,
                );
            }
        }
        let k = self.num_classes;
        let total = self.anchors_per_image();
        let mut cls_idx = Vec::with_capacity(n * total * k);
        let mut loc_idx = Vec::with_capacity(n * total * 4);
        for i in 0..n {
            for (bi, b) in self.branches.iter().enumerate() {
                let (h, w, a) = (b.grid.height, b.grid.width, b.grid.per_cell());
                for y in 0..h {
                    for x in 0..w {
                        for ai in 0..a {
                            for c in 0..k {
                                cls_idx.push((bi, ((i * a * k + ai * k + c) * h + y) * w + x));
                            }
                            for c in 0..4 {
                                loc_idx.push((bi, ((i * a * 4 + ai * 4 + c) * h + y) * w + x));
                            }
                        }
                    }
                }
            }
        }
        let logits = tape.gather(&cls_vars, cls_idx, vec![n * total, k])?;
        let loc = tape.gather(&loc_vars, loc_idx, vec![n * total, 4])?;
        Ok((logits, loc))
    }

    /// Matched targets for a batch of scenes, in [`flatten`](Self::flatten) order.
    pub fn targets(&self, scenes: &[&SyntheticScene], threshold: f64) -> Targets {
        let anchors = self.anchors();
        let mut y_cls = Vec::new();
        let mut y_loc = Vec::new();
        let mut positives = Vec::new();
        for sc in scenes {
            let m = match_anchors(&anchors, &sc.objects, threshold);
            y_cls.extend(m.y_cls);
            y_loc.extend(m.y_loc.iter().flatten());
            positives.extend(m.positives);
        }
        let rows = positives.len();
        Targets {
            y_cls,
            y_loc: Tensor::new(vec![rows, 4], y_loc).expect("four offsets per anchor"),
            positives,
        }
    }
}

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Per-class greedy NMS over decoded anchors of one image.
pub fn postprocess(probs: &[f64], offsets: &[f64], anchors: &[BBox], num_classes: usize) -> Vec<Detection> {
    const MIN_SCORE: f64 = 0.01;
    const NMS_IOU: f64 = 0.45;
    const TOP_K: usize = 50;
    let boxes: Vec<BBox> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| decode(&offsets[i * 4..i * 4 + 4], a))
        .collect();
    let mut out = Vec::new();
    for c in 1..num_classes {
        let mut cand: Vec<(f64, usize)> = (0..anchors.len())
            .map(|i| (probs[i * num_classes + c], i))
            .filter(|&(p, i)| p >= MIN_SCORE && !boxes[i].is_degenerate())
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.truncate(TOP_K);
        let mut kept: Vec<Detection> = Vec::new();
        for (score, i) in cand {
            if kept.iter().all(|d| iou_unchecked(&d.bbox, &boxes[i]) < NMS_IOU) {
                kept.push(Detection {
                    bbox: boxes[i],
                    class: c,
                    score,
                });
            }
        }
        out.extend(kept);
    }
    out
}

/// Mean over object classes of all-point interpolated average precision at
/// the given IoU. Classes without ground truth are skipped.
pub fn mean_average_precision(detections: &[Vec<Detection>], truths: &[Vec<GroundTruth>], iou_threshold: f64) -> f64 {
    let mut per_class: BTreeMap<usize, (Vec<(f64, usize, BBox)>, usize)> = BTreeMap::new();
    for (img, gts) in truths.iter().enumerate() {
        for g in gts {
            per_class.entry(g.class).or_default().1 += 1;
        }
        for d in detections.get(img).into_iter().flatten() {
            per_class.entry(d.class).or_default().0.push((d.score, img, d.bbox));
        }
    }
    let mut aps = Vec::new();
    for (class, (mut dets, n_gt)) in per_class {
        if n_gt == 0 {
            continue;
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut used: BTreeMap<(usize, usize), bool> = BTreeMap::new();
        let mut tp = Vec::with_capacity(dets.len());
        for (_, img, bbox) in &dets {
            let mut best = (iou_threshold, None);
            for (gi, g) in truths[*img].iter().enumerate() {
                if g.class != class || used.contains_key(&(*img, gi)) {
                    continue;
                }
                let v = iou_unchecked(bbox, &g.bbox);
                if v >= best.0 {
                    best = (v, Some(gi));
                }
            }
            match best.1 {
                Some(gi) => {
                    used.insert((*img, gi), true);
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        aps.push(average_precision(&tp, n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Area under the monotone precision envelope of a ranked TP/FP list.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Eval-mode detection mAP@0.5 of a detector session over scenes.
pub fn evaluate_map(
    session: &mut Session,
    head: &DetectorHead,
    scenes: &[SyntheticScene],
    batch_size: usize,
) -> Result<f64> {
    let prev = session.mode();
    session.set_mode(Mode::Eval);
    let anchors = head.anchors();
    let a = anchors.len();
    let k = head.num_classes;
    let mut detections = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let acts = session.forward(&stack(&images))?;
        let tape = session.tape_mut()?;
        let (logits, loc) = head.flatten(tape, &acts, chunk.len())?;
        let probs = tape.softmax(logits)?;
        let probs = tape.value(probs).data().to_vec();
        let offsets = tape.value(loc).data().to_vec();
        for i in 0..chunk.len() {
            detections.push(postprocess(
                &probs[i * a * k..(i + 1) * a * k],
                &offsets[i * a * 4..(i + 1) * a * 4],
                &anchors,
                k,
            ));
        }
    }
    session.set_mode(prev);
    let truths: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.objects.clone()).collect();
    Ok(mean_average_precision(&detections, &truths, 0.5))
}
