//! Minimal single-shot detection plumbing: box geometry, anchor matching,
//! synthetic shape scenes and a head adapter over detector graphs.

mod geometry;
mod head;
mod scenes;

pub use geometry::{decode, encode, iou, match_anchors, AnchorGrid, BBox, GroundTruth, Matching};
pub use head::{evaluate_map, mean_average_precision, postprocess, Detection, DetectorHead, HeadBranch};
pub use scenes::{
    generate_labeled, generate_scenes, generate_scenes_with, load_scenes, save_scenes, SceneConfig, Shape,
    SyntheticScene,
};
