//! Dataset handling: COCO-style annotation loading, binary P6 PPM images,
//! and a deterministic synthetic shape generator used for training and the
//! end-to-end checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::GroundTruthBox;
use crate::error::{Error, Result};
use crate::postprocess::Detection;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
    /// Contiguous class index -> original category id.
    pub categories: Vec<(u64, String)>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }
}

// COCO-style annotation JSON

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    /// [x, y, w, h]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Load a COCO-style annotation file. Category ids are remapped to
/// contiguous class indices in ascending id order; boxes come out in corner
/// form. Degenerate boxes and annotations pointing at unknown images or
/// categories are errors.
pub fn load_coco_annotations(path: &Path) -> Result<DatasetIndex> {
    let f = std::fs::File::open(path)?;
    let doc: CocoDoc = serde_json::from_reader(f)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut categories: Vec<(u64, String)> = doc.categories.iter().map(|c| (c.id, c.name.clone())).collect();
    categories.sort_by_key(|&(id, _)| id);
    let class_of: BTreeMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, &(id, _))| (id, i))
        .collect();
    if class_of.len() != doc.categories.len() {
        return Err(Error::Format("duplicate category id in annotations".into()));
    }

    let mut by_image: BTreeMap<u64, DatasetRecord> = BTreeMap::new();
    for im in &doc.images {
        if by_image.contains_key(&im.id) {
            return Err(Error::Format(format!("duplicate image id {}", im.id)));
        }
        by_image.insert(
            im.id,
            DatasetRecord {
                image_id: im.id,
                path: dir.join(&im.file_name),
                width: im.width,
                height: im.height,
                boxes: Vec::new(),
            },
        );
    }
    for a in &doc.annotations {
        let rec = by_image.get_mut(&a.image_id).ok_or_else(|| {
            Error::Format(format!("annotation {} references unknown image {}", a.id, a.image_id))
        })?;
        let class = *class_of.get(&a.category_id).ok_or_else(|| {
            Error::Format(format!("annotation {} references unknown category {}", a.id, a.category_id))
        })?;
        let [x, y, w, h] = a.bbox;
        let b = GroundTruthBox { x1: x, y1: y, x2: x + w, y2: y + h, class };
        b.validate(class_of.len())
            .map_err(|e| Error::Format(format!("annotation {}: {}", a.id, e)))?;
        rec.boxes.push(b);
    }
    Ok(DatasetIndex {
        records: by_image.into_values().collect(),
        categories,
    })
}

// binary P6 PPM

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape(format!(
            "ppm buffer {} bytes for {}x{}",
            rgb.len(),
            width,
            height
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
        }
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token(&raw)? != "P6" {
        return Err(Error::Format("not a binary P6 ppm".into()));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| Error::Format("bad ppm width".into()))?;
    let height: usize = token(&raw)?.parse().map_err(|_| Error::Format("bad ppm height".into()))?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| Error::Format("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported ppm maxval {}", maxval)));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if raw.len() < pos + need {
        return Err(Error::Format("ppm pixel data truncated".into()));
    }
    Ok((width, height, raw[pos..pos + need].to_vec()))
}

/// Load an image as a normalized [1,3,H,W] tensor. `.ppm` files are read as
/// P6 and normalized by the configured mean/std; `.ten` files are taken as
/// already-normalized tensors.
pub fn load_image(path: &Path, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ten") => {
            let t = Tensor::load(path)?;
            let sh = t.shape().to_vec();
            if sh.len() == 4 && sh[0] == 1 && sh[1] == 3 {
                Ok(t)
            } else if sh.len() == 3 && sh[0] == 3 {
                t.reshaped(vec![1, 3, sh[1], sh[2]])
            } else {
                Err(Error::Shape(format!("image tensor shape {:?}", sh)))
            }
        }
        Some("ppm") => {
            let (w, h, rgb) = read_ppm(path)?;
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let v = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                        data[(c * h + y) * w + x] = (v - mean[c]) / std[c];
                    }
                }
            }
            Tensor::new(vec![1, 3, h, w], data)
        }
        _ => Err(Error::Input(format!("unsupported image format: {}", path.display()))),
    }
}

// synthetic shapes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Per-class fill colors; the class index doubles as the shape kind.
const SHAPE_COLORS: [[u8; 3]; 3] = [[220, 60, 50], [60, 190, 80], [70, 90, 220]];

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub max_shapes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_images: 16,
            image_size: 256,
            seed: 0,
            max_shapes: 3,
        }
    }
}

fn draw_shape(
    rgb: &mut [u8],
    size: usize,
    kind: Shape,
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    color: [u8; 3],
) -> Option<GroundTruthBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / hw;
            let dy = (y as f64 + 0.5 - cy) / hh;
            let inside = match kind {
                Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                // upward triangle: apex at the top, base at the bottom
                Shape::Triangle => dy.abs() <= 1.0 && dx.abs() <= (dy + 1.0) / 2.0,
            };
            if inside {
                let p = (y * size + x) * 3;
                rgb[p..p + 3].copy_from_slice(&color);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    if x1 == usize::MAX {
        return None;
    }
    Some(GroundTruthBox {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: x2 as f64,
        y2: y2 as f64,
        class: match kind {
            Shape::Rectangle => 0,
            Shape::Ellipse => 1,
            Shape::Triangle => 2,
        },
    })
}

fn boxes_overlap(a: &GroundTruthBox, b: &GroundTruthBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Rasterize one synthetic image. Shape size classes cycle through the
/// small/medium/large area buckets so every bucket is populated across a
/// dataset. Returns the RGB buffer and tight pixel-aligned boxes.
pub fn generate_image(spec: &SynthSpec, index: usize) -> (Vec<u8>, Vec<GroundTruthBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x5EED_0000 + index as u64));
    let s = spec.image_size;
    let bg = rng.gen_range(15u8..60u8);
    let mut rgb = vec![bg; 3 * s * s];
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let n_shapes = rng.gen_range(1..=spec.max_shapes.max(1));
    for si in 0..n_shapes {
        let kind = match rng.gen_range(0..3) {
            0 => Shape::Rectangle,
            1 => Shape::Ellipse,
            _ => Shape::Triangle,
        };
        // half-extents by size class: small < 32x32, medium, large > 96x96
        let (lo, hi): (f64, f64) = match (index + si) % 3 {
            0 => (8.0, 14.0),
            1 => (20.0, 44.0),
            _ => (52.0, s as f64 * 0.45 - 2.0),
        };
        // small images cannot hold the larger size classes; shrink to fit
        let cap = s as f64 * 0.45 - 2.0;
        let lo = lo.min(cap - 1.0);
        let hi = hi.min(cap).max(lo + 1.0);
        for _attempt in 0..20 {
            let hw = rng.gen_range(lo..hi);
            let hh = rng.gen_range(lo..hi);
            let cx = rng.gen_range(hw + 1.0..s as f64 - hw - 1.0);
            let cy = rng.gen_range(hh + 1.0..s as f64 - hh - 1.0);
            let candidate = GroundTruthBox {
                x1: cx - hw,
                y1: cy - hh,
                x2: cx + hw,
                y2: cy + hh,
                class: 0,
            };
            if boxes.iter().any(|b| boxes_overlap(b, &candidate)) {
                continue;
            }
            let color = SHAPE_COLORS[match kind {
                Shape::Rectangle => 0,
                Shape::Ellipse => 1,
                Shape::Triangle => 2,
            }];
            if let Some(b) = draw_shape(&mut rgb, s, kind, cx, cy, hw, hh, color) {
                boxes.push(b);
            }
            break;
        }
    }
    (rgb, boxes)
}

/// Write a synthetic dataset: PPM images plus a COCO-style annotation file
/// at `<dir>/annotations.json`. Fully determined by the spec.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir)?;
    let mut doc = CocoDoc {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![
            CocoCategory { id: 1, name: "rectangle".into() },
            CocoCategory { id: 2, name: "ellipse".into() },
            CocoCategory { id: 3, name: "triangle".into() },
        ],
    };
    let mut ann_id = 1u64;
    for i in 0..spec.num_images {
        let (rgb, boxes) = generate_image(spec, i);
        let file_name = format!("img_{:05}.ppm", i);
        write_ppm(&dir.join(&file_name), spec.image_size, spec.image_size, &rgb)?;
        doc.images.push(CocoImage {
            id: i as u64,
            file_name,
            width: spec.image_size,
            height: spec.image_size,
        });
        for b in boxes {
            doc.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: i as u64,
                category_id: b.class as u64 + 1,
                bbox: [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1],
            });
            ann_id += 1;
        }
    }
    let f = std::fs::File::create(dir.join("annotations.json"))?;
    serde_json::to_writer_pretty(f, &doc)?;
    load_coco_annotations(&dir.join("annotations.json"))
}

/// Serialize detections as COCO results JSON (xywh boxes, original category
/// ids).
pub fn write_coco_results(
    path: &Path,
    per_image: &[(u64, Vec<Detection>)],
    categories: &[(u64, String)],
) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        image_id: u64,
        category_id: u64,
        bbox: [f64; 4],
        score: f64,
    }
    let mut rows = Vec::new();
    for (image_id, dets) in per_image {
        for d in dets {
            let category_id = categories
                .get(d.class)
                .map(|&(id, _)| id)
                .ok_or_else(|| Error::Input(format!("detection class {} out of range", d.class)))?;
            rows.push(Row {
                image_id: *image_id,
                category_id,
                bbox: [d.x1, d.y1, d.x2 - d.x1, d.y2 - d.y1],
                score: d.score,
            });
        }
    }
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, &rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|i| i as u8).collect();
        write_ppm(&p, 4, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn load_image_normalizes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        // single pixel (255, 0, 127)
        write_ppm(&p, 1, 1, &[255, 0, 127]).unwrap();
        let t = load_image(&p, &[0.5, 0.5, 0.5], &[0.25, 0.25, 0.25]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 1]);
        assert!((t.data()[0] - 2.0).abs() < 1e-12);
        assert!((t.data()[1] + 2.0).abs() < 1e-12);
        assert!((t.data()[2] - (127.0 / 255.0 - 0.5) / 0.25).abs() < 1e-9);
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SynthSpec { num_images: 4, image_size: 64, seed: 9, max_shapes: 2 };
        let (a, ba) = generate_image(&spec, 2);
        let (b, bb) = generate_image(&spec, 2);
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        let (c, _) = generate_image(&spec, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_boxes_are_tight_on_pixels() {
        let spec = SynthSpec { num_images: 1, image_size: 96, seed: 3, max_shapes: 3 };
        let (rgb, boxes) = generate_image(&spec, 0);
        assert!(!boxes.is_empty());
        for b in &boxes {
            let color = SHAPE_COLORS[b.class];
            let hit = |x: usize, y: usize| {
                let p = (y * 96 + x) * 3;
                rgb[p..p + 3] == color
            };
            let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
            // every border row/column of the box touches the shape; just
            // outside it nothing of this shape exists
            assert!((x1..x2).any(|x| hit(x, y1)) && (x1..x2).any(|x| hit(x, y2 - 1)));
            assert!((y1..y2).any(|y| hit(x1, y)) && (y1..y2).any(|y| hit(x2 - 1, y)));
            if x1 > 0 {
                assert!(!(y1..y2).any(|y| hit(x1 - 1, y)));
            }
            if x2 < 96 {
                assert!(!(y1..y2).any(|y| hit(x2, y)));
            }
        }
    }

    #[test]
    fn synthetic_dataset_roundtrips_through_coco_annotations() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec { num_images: 6, image_size: 64, seed: 1, max_shapes: 2 };
        let idx = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(idx.records.len(), 6);
        assert_eq!(idx.num_classes(), 3);
        for (rec, i) in idx.records.iter().zip(0..) {
            assert_eq!(rec.image_id, i);
            assert!(rec.path.exists());
            let (boxes_again, _) = (generate_image(&spec, i as usize).1, ());
            assert_eq!(rec.boxes.len(), boxes_again.len());
            for (a, b) in rec.boxes.iter().zip(&boxes_again) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn sizes_span_all_three_area_buckets() {
        let spec = SynthSpec { num_images: 12, image_size: 256, seed: 5, max_shapes: 3 };
        let mut got = [false; 3];
        for i in 0..spec.num_images {
            for b in generate_image(&spec, i).1 {
                let a = b.area();
                if a < 32.0 * 32.0 {
                    got[0] = true;
                } else if a <= 96.0 * 96.0 {
                    got[1] = true;
                } else {
                    got[2] = true;
                }
            }
        }
        assert_eq!(got, [true; 3], "missing an area bucket: {:?}", got);
    }

    #[test]
    fn dangling_annotation_references_are_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ann.json");
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.ppm", "width": 64, "height": 64}],
            "annotations": [{"id": 1, "image_id": 99, "category_id": 1, "bbox": [0, 0, 10, 10]}],
            "categories": [{"id": 1, "name": "thing"}]
        }"#;
        std::fs::write(&p, doc).unwrap();
        assert!(matches!(load_coco_annotations(&p), Err(Error::Format(_))));
    }

    #[test]
    fn degenerate_coco_boxes_are_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ann.json");
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.ppm", "width": 64, "height": 64}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [5, 5, 0, 10]}],
            "categories": [{"id": 1, "name": "thing"}]
        }"#;
        std::fs::write(&p, doc).unwrap();
        assert!(load_coco_annotations(&p).is_err());
    }

    #[test]
    fn category_ids_remap_to_contiguous_classes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ann.json");
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.ppm", "width": 64, "height": 64}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 77, "bbox": [0, 0, 10, 10]},
                            {"id": 2, "image_id": 1, "category_id": 3, "bbox": [20, 20, 10, 10]}],
            "categories": [{"id": 77, "name": "b"}, {"id": 3, "name": "a"}]
        }"#;
        std::fs::write(&p, doc).unwrap();
        let idx = load_coco_annotations(&p).unwrap();
        assert_eq!(idx.categories, vec![(3, "a".to_string()), (77, "b".to_string())]);
        assert_eq!(idx.records[0].boxes[0].class, 1); // category 77
        assert_eq!(idx.records[0].boxes[1].class, 0); // category 3
    }
}
