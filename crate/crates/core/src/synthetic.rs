//! Procedural scenes of flat-colored shapes with exact masks.
//!
//! These stand in for real photographs when running the data engine, the
//! trainer and the evaluator offline: every object has a known name, box and
//! pixel mask, and objects never overlap.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::DatasetManifest;
use crate::mask::{rle_encode, BinaryMask, BoundingBox};
use crate::sample::{ConceptFamily, ImageRecord, Provenance, Sample, Split};

pub const BACKGROUND: [u8; 3] = [40, 40, 40];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 200, 60]),
    ("blue", [40, 70, 230]),
    ("yellow", [240, 220, 30]),
    ("magenta", [220, 40, 220]),
    ("cyan", [40, 220, 220]),
    ("orange", [250, 140, 20]),
    ("white", [245, 245, 245]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
}

impl Shape {
    pub fn noun(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "circle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub color: &'static str,
    pub shape: Shape,
    pub bbox: BoundingBox,
    pub mask: BinaryMask,
}

impl SceneObject {
    /// e.g. `red square`
    pub fn name(&self) -> String {
        format!("{} {}", self.color, self.shape.noun())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image_id: String,
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub objects: usize,
    pub min_side: u32,
    pub max_side: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 96,
            height: 64,
            objects: 3,
            min_side: 14,
            max_side: 26,
        }
    }
}

/// Places up to `spec.objects` non-overlapping shapes with distinct colors.
pub fn generate_scene(image_id: &str, spec: &SceneSpec, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let mut image = RgbImage::from_pixel(w, h, Rgb(BACKGROUND));
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut palette: Vec<usize> = (0..COLORS.len()).collect();
    let max_side = spec.max_side.min(w.min(h));
    let min_side = spec.min_side.min(max_side).max(1);
    let mut attempts = 0;
    while objects.len() < spec.objects.min(COLORS.len()) && attempts < 500 {
        attempts += 1;
        let side = rng.gen_range(min_side..=max_side);
        let x0 = rng.gen_range(0..=w - side);
        let y0 = rng.gen_range(0..=h - side);
        let bbox = BoundingBox::new(x0, y0, x0 + side, y0 + side);
        // keep a one-pixel gap so flood fills never merge objects
        let clear = objects.iter().all(|o| {
            bbox.x_max < o.bbox.x_min
                || o.bbox.x_max < bbox.x_min
                || bbox.y_max < o.bbox.y_min
                || o.bbox.y_max < bbox.y_min
        });
        if !clear {
            continue;
        }
        let color_idx = palette.remove(rng.gen_range(0..palette.len()));
        let (color, rgb) = COLORS[color_idx];
        let shape = if rng.gen_bool(0.5) { Shape::Square } else { Shape::Disc };
        let mask = match shape {
            Shape::Square => BinaryMask::from_box(h as usize, w as usize, &bbox),
            Shape::Disc => {
                let r = side as f64 / 2.0;
                let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
                BinaryMask::from_fn(h as usize, w as usize, |y, x| {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    dx * dx + dy * dy <= r * r
                })
            }
        };
        for y in 0..h as usize {
            for x in 0..w as usize {
                if mask.get(y, x) {
                    image.put_pixel(x as u32, y as u32, Rgb(rgb));
                }
            }
        }
        let bbox = mask.bbox().unwrap_or(bbox);
        objects.push(SceneObject {
            color,
            shape,
            bbox,
            mask,
        });
    }
    SyntheticScene {
        image_id: image_id.to_string(),
        image,
        objects,
    }
}

/// Writes `n_images` scenes as PNGs under `dir` and returns a manifest with
/// one "segment the <color> <shape>" sample per object.
pub fn write_dataset(
    dir: &Path,
    n_images: usize,
    spec: &SceneSpec,
    seed: u64,
) -> std::io::Result<(DatasetManifest, Vec<SyntheticScene>)> {
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    let mut scenes = Vec::new();
    for i in 0..n_images {
        let image_id = format!("synth{i:04}");
        let scene = generate_scene(&image_id, spec, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let path = dir.join(format!("{image_id}.png"));
        scene
            .image
            .save(&path)
            .map_err(std::io::Error::other)?;
        let record = ImageRecord {
            image_id: image_id.clone(),
            uri: path.to_string_lossy().into_owned(),
            width: spec.width,
            height: spec.height,
        };
        for (k, obj) in scene.objects.iter().enumerate() {
            samples.push(Sample {
                sample_id: format!("{image_id}-{k}"),
                image: record.clone(),
                prompt: format!("segment the {}", obj.name()),
                mask: rle_encode(&obj.mask),
                concept: ConceptFamily::Entities,
                split: Split::Train,
                provenance: Provenance::SyntheticTest,
                is_negative: false,
            });
        }
        scenes.push(scene);
    }
    let manifest = DatasetManifest::new(samples).with_metadata("generator", "synthetic");
    Ok((manifest, scenes))
}
