use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{BBox, GroundTruth};
use crate::autodiff::Tensor;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Object classes; the detection label is `index + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn label(self) -> usize {
        self as usize + 1
    }

    /// Whether normalized point (`u`, `v`) inside `b` is covered.
    fn covers(self, b: &BBox, u: f64, v: f64) -> bool {
        if u < b.x0 || u > b.x1 || v < b.y0 || v > b.y1 {
            return false;
        }
        let (cx, cy) = b.center();
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let dx = (u - cx) / (b.width() / 2.0);
                let dy = (v - cy) / (b.height() / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => (u - cx).abs() <= (v - b.y0) / b.height() * b.width() / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Upper bound of the uniform background noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 1,
            max_objects: 2,
            min_scale: 0.3,
            max_scale: 0.6,
            noise: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }
}

/// RGB image `[3, S, S]` with labelled boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

pub fn generate_scenes(count: usize, seed: u64) -> Vec<SyntheticScene> {
    generate_scenes_with(count, seed, &SceneConfig::default())
}

pub fn generate_scenes_with(count: usize, seed: u64, cfg: &SceneConfig) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(&mut rng, cfg, None)).collect()
}

fn scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig, only: Option<Shape>) -> SyntheticScene {
    let s = cfg.size;
    // Pixel values are kept fp32-exact so a cached scene reloads bit-identically.
    let mut data: Vec<f64> = (0..3 * s * s)
        .map(|_| (rng.gen::<f64>() * cfg.noise) as f32 as f64)
        .collect();
    let n = match only {
        Some(_) => 1,
        None => rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects)),
    };
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = only.unwrap_or_else(|| Shape::ALL[rng.gen_range(0..3)]);
        let side = rng.gen_range(cfg.min_scale..=cfg.max_scale);
        let x0 = rng.gen_range(0.0..=1.0 - side);
        let y0 = rng.gen_range(0.0..=1.0 - side);
        let bbox = BBox::new(x0, y0, x0 + side, y0 + side);
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5f32..1.0) as f64);
        for py in 0..s {
            for px in 0..s {
                let (u, v) = ((px as f64 + 0.5) / s as f64, (py as f64 + 0.5) / s as f64);
                if shape.covers(&bbox, u, v) {
                    for (c, col) in color.iter().enumerate() {
                        data[(c * s + py) * s + px] = *col;
                    }
                }
            }
        }
        objects.push(GroundTruth {
            bbox,
            class: shape.label(),
        });
    }
    SyntheticScene {
        image: Tensor::new(vec![3, s, s], data).expect("scene shape"),
        objects,
    }
}

/// Single-object images labelled by shape (0-based), balanced by class.
pub fn generate_labeled(count: usize, seed: u64, cfg: &SceneConfig) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let shape = Shape::ALL[i % 3];
        images.push(scene(&mut rng, cfg, Some(shape)).image);
        labels.push(shape as usize);
    }
    LabeledImages::new(images, labels).expect("consistent images")
}

/// Writes images to a parameter blob and boxes to a text index, one line
/// per scene: `<key> <class>:<x0>,<y0>,<x1>,<y1> ...`.
pub fn save_scenes(scenes: &[SyntheticScene], blob: &Path, index: &Path) -> Result<()> {
    let mut store = ParamStore::new();
    let mut text = String::new();
    for (i, sc) in scenes.iter().enumerate() {
        let key = format!("scene{i:06}");
        store.insert(&key, "image", sc.image.detached());
        let _ = write!(text, "{key}");
        for o in &sc.objects {
            let b = o.bbox;
            let _ = write!(text, " {}:{},{},{},{}", o.class, b.x0, b.y0, b.x1, b.y1);
        }
        text.push('\n');
    }
    store.write_blob(BufWriter::new(File::create(blob)?))?;
    std::fs::write(index, text)?;
    Ok(())
}

pub fn load_scenes(blob: &Path, index: &Path) -> Result<Vec<SyntheticScene>> {
    let store = ParamStore::read_blob(BufReader::new(File::open(blob)?))?;
    let text = std::fs::read_to_string(index)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty line");
        let image = store
            .get(key, "image")
            .ok_or_else(|| Error::parse(i + 1, "key", format!("no image stored for `{key}`")))?
            .detached();
        let mut objects = Vec::new();
        for obj in parts {
            let parsed = obj.split_once(':').and_then(|(c, b)| {
                let class = c.parse().ok()?;
                let v: Vec<f64> = b.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
                (v.len() == 4).then(|| GroundTruth {
                    bbox: BBox::new(v[0], v[1], v[2], v[3]),
                    class,
                })
            });
            objects.push(parsed.ok_or_else(|| Error::parse(i + 1, "object", format!("malformed `{obj}`")))?);
        }
        out.push(SyntheticScene { image, objects });
    }
    Ok(out)
}
