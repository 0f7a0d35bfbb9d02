use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::invalid("iou of a degenerate box"));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// SSD offsets of `truth` relative to `anchor`:
/// (Δcx/w, Δcy/h, ln(w'/w), ln(h'/h)).
pub fn encode(truth: &BBox, anchor: &BBox) -> [f64; 4] {
    let (tx, ty) = truth.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (truth.width() / aw).ln(),
        (truth.height() / ah).ln(),
    ]
}

pub fn decode(offsets: &[f64], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        ax + offsets[0] * aw,
        ay + offsets[1] * ah,
        aw * offsets[2].exp(),
        ah * offsets[3].exp(),
    )
}

/// Anchors centred on each cell of an H×W grid; cell-major, size-minor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    /// (w, h) of each anchor per cell.
    pub sizes: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize, sizes: Vec<(f64, f64)>) -> Result<Self> {
        if height == 0 || width == 0 || sizes.is_empty() {
            return Err(Error::invalid("anchor grid needs cells and anchor sizes"));
        }
        if sizes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::invalid("anchor sizes must be positive"));
        }
        Ok(Self { height, width, sizes })
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boxes(&self) -> Vec<BBox> {
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let cx = (x as f64 + 0.5) / self.width as f64;
                let cy = (y as f64 + 0.5) / self.height as f64;
                for &(w, h) in &self.sizes {
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
        out
    }
}

/// A labelled ground-truth box. Class 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub y_cls: Vec<usize>,
    pub y_loc: Vec<[f64; 4]>,
    pub positives: Vec<bool>,
    pub n: usize,
}

/// Anchors whose best IoU reaches `threshold` take that truth's class and
/// offsets; each truth's best unclaimed anchor is forced positive; the rest
/// are background.
pub fn match_anchors(anchors: &[BBox], truths: &[GroundTruth], threshold: f64) -> Matching {
    let a = anchors.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; a];
    for (i, anchor) in anchors.iter().enumerate() {
        for (t, gt) in truths.iter().enumerate() {
            let v = iou_unchecked(anchor, &gt.bbox);
            if best[i].map_or(true, |(_, b)| v > b) {
                best[i] = Some((t, v));
            }
        }
    }
    let mut assigned: Vec<Option<usize>> = best
        .iter()
        .map(|b| b.and_then(|(t, v)| (v >= threshold).then_some(t)))
        .collect();
    let mut claimed = vec![false; a];
    for (t, gt) in truths.iter().enumerate() {
        // Skip anchors forced by an earlier truth so every truth keeps one.
        let forced = (0..a).filter(|&i| !claimed[i]).max_by(|&i, &j| {
            iou_unchecked(&anchors[i], &gt.bbox)
                .total_cmp(&iou_unchecked(&anchors[j], &gt.bbox))
                .then(j.cmp(&i))
        });
        if let Some(i) = forced {
            assigned[i] = Some(t);
            claimed[i] = true;
        }
    }
    let mut y_cls = vec![0; a];
    let mut y_loc = vec![[0.0; 4]; a];
    let mut positives = vec![false; a];
    for (i, slot) in assigned.iter().enumerate() {
        if let Some(t) = *slot {
            y_cls[i] = truths[t].class;
            y_loc[i] = encode(&truths[t].bbox, &anchors[i]);
            positives[i] = true;
        }
    }
    let n = positives.iter().filter(|&&p| p).count();
    Matching {
        y_cls,
        y_loc,
        positives,
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit).unwrap(), 1.0);
        assert_eq!(iou(&unit, &BBox::new(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        assert_eq!(iou(&unit, &BBox::new(0.5, 0.0, 1.0, 1.0)).unwrap(), 0.5);
        assert!(iou(&unit, &BBox::new(0.5, 0.5, 0.5, 1.0)).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = BBox::from_center(0.4, 0.6, 0.2, 0.3);
        let truth = BBox::new(0.1, 0.2, 0.55, 0.9);
        let back = decode(&encode(&truth, &anchor), &anchor);
        for (a, b) in [
            (back.x0, truth.x0),
            (back.y0, truth.y0),
            (back.x1, truth.x1),
            (back.y1, truth.y1),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_truths_all_background() {
        let grid = AnchorGrid::new(2, 2, vec![(0.5, 0.5)]).unwrap();
        let m = match_anchors(&grid.boxes(), &[], 0.5);
        assert_eq!(m.n, 0);
        assert!(m.y_cls.iter().all(|&c| c == 0));
    }

    #[test]
    fn exact_anchor_gets_zero_offsets() {
        let grid = AnchorGrid::new(2, 2, vec![(0.5, 0.5)]).unwrap();
        let boxes = grid.boxes();
        let gt = GroundTruth {
            bbox: boxes[3],
            class: 2,
        };
        let m = match_anchors(&boxes, &[gt], 0.5);
        assert!(m.positives[3]);
        assert_eq!(m.y_cls[3], 2);
        assert!(m.y_loc[3].iter().all(|v| v.abs() < 1e-15));
        assert_eq!(m.n, 1);
    }

    #[test]
    fn small_truth_is_forced() {
        let grid = AnchorGrid::new(2, 2, vec![(0.5, 0.5)]).unwrap();
        let gt = GroundTruth {
            bbox: BBox::new(0.05, 0.05, 0.1, 0.1),
            class: 1,
        };
        let m = match_anchors(&grid.boxes(), &[gt], 0.5);
        assert_eq!(m.n, 1);
        assert!(m.positives[0]);
    }
}
