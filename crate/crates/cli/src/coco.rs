//! Conversion of COCO instance annotations into a sample manifest.
//!
//! Polygons are rasterized by testing each pixel centre against the
//! even-odd rule; uncompressed and packed-string RLE are both accepted.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use convseg_core::{
    rle_decode, rle_encode, BinaryMask, ConceptFamily, DatasetManifest, ImageRecord, MaskRle, Provenance, Sample,
    Split,
};
use log::warn;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Segmentation,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [usize; 2], counts: RleCounts },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Raw(Vec<u64>),
    Packed(String),
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub split: Split,
    pub concept: ConceptFamily,
    pub include_crowd: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            split: Split::Train,
            concept: ConceptFamily::Entities,
            include_crowd: false,
        }
    }
}

/// Decodes the packed-string form of COCO RLE counts.
pub fn decode_packed_counts(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&b) = bytes.get(p) else {
                bail!("packed RLE ends mid-value");
            };
            if !(48..48 + 64).contains(&b) || k >= 13 {
                bail!("invalid packed RLE byte {b:#x} at {p}");
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| anyhow::anyhow!("negative run length {c}")))
        .collect()
}

/// Pixel centres inside any polygon under the even-odd rule; overlapping
/// polygons of one annotation are unioned.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(height, width);
    for poly in polygons.iter().filter(|p| p.len() >= 6) {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        for y in 0..height {
            let cy = y as f64 + 0.5;
            // x coordinates where edges cross this scanline
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy) != (y1 <= cy) {
                    xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks_exact(2) {
                let start = (span[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    mask.set(y, x, true);
                }
            }
        }
    }
    mask
}

fn annotation_mask(seg: &Segmentation, height: usize, width: usize) -> Result<BinaryMask> {
    match seg {
        Segmentation::Polygons(p) => Ok(rasterize_polygons(p, height, width)),
        Segmentation::Rle { size, counts } => {
            if *size != [height, width] {
                bail!("RLE size {size:?} does not match image {height}x{width}");
            }
            let counts = match counts {
                RleCounts::Raw(c) => c.clone(),
                RleCounts::Packed(s) => decode_packed_counts(s)?,
            };
            Ok(rle_decode(&MaskRle { size: *size, counts })?)
        }
    }
}

/// Converts a COCO instances file into samples prompted `the <category>`.
/// Image URIs are `images_dir/file_name`. Crowd regions and annotations
/// that rasterize to nothing are skipped with a warning.
pub fn convert_coco(annotations: &Path, images_dir: &Path, opts: &ConvertOptions) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(annotations).with_context(|| format!("reading {}", annotations.display()))?;
    let coco: CocoFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", annotations.display()))?;
    let images: HashMap<u64, &CocoImage> = coco.images.iter().map(|i| (i.id, i)).collect();
    let categories: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut anns: Vec<&CocoAnnotation> = coco.annotations.iter().collect();
    anns.sort_by_key(|a| a.id);
    let mut samples = Vec::new();
    for a in anns {
        if a.iscrowd != 0 && !opts.include_crowd {
            continue;
        }
        let image = images
            .get(&a.image_id)
            .with_context(|| format!("annotation {} refers to missing image {}", a.id, a.image_id))?;
        let name = categories
            .get(&a.category_id)
            .with_context(|| format!("annotation {} refers to missing category {}", a.id, a.category_id))?;
        let mask = annotation_mask(&a.segmentation, image.height as usize, image.width as usize)
            .with_context(|| format!("annotation {}", a.id))?;
        if mask.is_empty() {
            warn!("annotation {} has an empty mask; skipped", a.id);
            continue;
        }
        samples.push(Sample {
            sample_id: format!("coco-{}", a.id),
            image: ImageRecord {
                image_id: image.id.to_string(),
                uri: images_dir.join(&image.file_name).to_string_lossy().into_owned(),
                width: image.width,
                height: image.height,
            },
            prompt: format!("the {}", name.trim()),
            mask: rle_encode(&mask),
            concept: opts.concept,
            split: opts.split,
            provenance: Provenance::CocoInstances,
            is_negative: false,
        });
    }
    let manifest = DatasetManifest::new(samples).with_metadata("source", annotations.to_string_lossy());
    manifest.validate()?;
    Ok(manifest)
}
