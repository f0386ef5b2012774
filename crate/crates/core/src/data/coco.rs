use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::generate::{generate_samples, DatasetSpec, Sample, SHAPE_NAMES};
use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, GroundTruthInstance};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Image entry with normalized, class-remapped ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDescriptor {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub gts: Vec<GroundTruthInstance>,
}

/// Contiguous class index assigned to a source category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub category_id: u64,
    pub class_id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub samples: Vec<SampleDescriptor>,
    pub categories: Vec<CategoryMapping>,
}

/// COCO representation of rendered samples; category ids start at 1.
pub fn to_coco(samples: &[Sample], num_classes: usize) -> CocoFile {
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    for s in samples {
        let (w, h) = (s.image.width() as f64, s.image.height() as f64);
        images.push(CocoImage {
            id: s.id,
            file_name: image_file_name(s.id),
            width: s.image.width(),
            height: s.image.height(),
        });
        for g in &s.gts {
            let [x0, y0, x1, y1] = g.bbox.corners();
            let bbox = [
                (x0 * w).round(),
                (y0 * h).round(),
                ((x1 - x0) * w).round(),
                ((y1 - y0) * h).round(),
            ];
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.id,
                category_id: g.class_id as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
        }
    }
    let categories = SHAPE_NAMES[..num_classes]
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect();
    CocoFile {
        images,
        annotations,
        categories,
    }
}

pub fn image_file_name(id: u64) -> String {
    format!("{id:06}.png")
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&image.to_rgb8())
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes
            .chunks(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    Ok(Image::from_rgb8(h, w, &rgb))
}

/// Summary of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub dir: PathBuf,
    pub annotation_file: PathBuf,
    pub num_images: usize,
    pub num_objects: usize,
}

/// Renders `spec` into `dir/images/*.png` plus `dir/annotations.json`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<GeneratedDataset> {
    let samples = generate_samples(spec)?;
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for s in &samples {
        write_png(&img_dir.join(image_file_name(s.id)), &s.image)?;
    }
    let coco = to_coco(&samples, spec.num_classes);
    let annotation_file = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&coco)?;
    fs::write(&annotation_file, text).map_err(|e| Error::io(&annotation_file, e))?;
    Ok(GeneratedDataset {
        dir: dir.to_path_buf(),
        annotation_file,
        num_images: samples.len(),
        num_objects: coco.annotations.len(),
    })
}

fn record_err(record: String, reason: impl Into<String>) -> Error {
    Error::Annotation {
        record,
        reason: reason.into(),
    }
}

fn parse_records<T: serde::de::DeserializeOwned>(root: &Value, key: &str) -> Result<Vec<T>> {
    let arr = root
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| record_err(key.to_string(), "missing or not an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            let name = match v.get("id") {
                Some(id) => format!("{key}[{i}] (id {id})"),
                None => format!("{key}[{i}]"),
            };
            serde_json::from_value(v.clone()).map_err(|e| record_err(name, e.to_string()))
        })
        .collect()
}

/// Parses COCO detection JSON text.
pub fn parse_annotations(text: &str) -> Result<Annotations> {
    let root: Value = serde_json::from_str(text)?;
    let images: Vec<CocoImage> = parse_records(&root, "images")?;
    let annotations: Vec<CocoAnnotation> = parse_records(&root, "annotations")?;
    let mut categories: Vec<CocoCategory> = parse_records(&root, "categories")?;
    categories.sort_by_key(|c| c.id);
    let mut class_of = BTreeMap::new();
    let mut mapping = Vec::with_capacity(categories.len());
    for c in &categories {
        if class_of.insert(c.id, mapping.len()).is_some() {
            return Err(record_err(format!("category {}", c.id), "duplicate category id"));
        }
        mapping.push(CategoryMapping {
            category_id: c.id,
            class_id: mapping.len(),
            name: c.name.clone(),
        });
    }
    let mut slot = BTreeMap::new();
    let mut samples: Vec<SampleDescriptor> = Vec::with_capacity(images.len());
    for im in images {
        if im.width == 0 || im.height == 0 {
            return Err(record_err(format!("image {}", im.id), "zero image size"));
        }
        if slot.insert(im.id, samples.len()).is_some() {
            return Err(record_err(format!("image {}", im.id), "duplicate image id"));
        }
        samples.push(SampleDescriptor {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            gts: Vec::new(),
        });
    }
    for a in annotations {
        let record = format!("annotation {}", a.id);
        let &s = slot
            .get(&a.image_id)
            .ok_or_else(|| record_err(record.clone(), format!("unknown image {}", a.image_id)))?;
        let &class_id = class_of
            .get(&a.category_id)
            .ok_or_else(|| record_err(record.clone(), format!("unknown category {}", a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(record_err(record, format!("non-positive box size {w}x{h}")));
        }
        let desc = &mut samples[s];
        let (iw, ih) = (desc.width as f64, desc.height as f64);
        let bbox = BoundingBox::new((x + w / 2.0) / iw, (y + h / 2.0) / ih, w / iw, h / ih)
            .map_err(|e| record_err(record, e.to_string()))?;
        desc.gts.push(GroundTruthInstance::new(class_id, bbox));
    }
    Ok(Annotations {
        samples,
        categories: mapping,
    })
}

pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// Loads annotations and every referenced image of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ann = load_annotations(&dir.join(ANNOTATION_FILE))?;
    ann.samples
        .into_iter()
        .map(|d| {
            let image = read_png(&dir.join(IMAGE_DIR).join(&d.file_name))?;
            if image.width() != d.width || image.height() != d.height {
                return Err(record_err(
                    format!("image {}", d.id),
                    "file size disagrees with annotation",
                ));
            }
            Ok(Sample {
                id: d.id,
                image,
                gts: d.gts,
            })
        })
        .collect()
}
