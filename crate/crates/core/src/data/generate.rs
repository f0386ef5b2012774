use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{iou_corners, BoundingBox, GroundTruthInstance};

/// Silhouettes in class-id order.
pub const SHAPE_NAMES: [&str; 3] = ["disk", "square", "triangle"];

/// Placement attempts before an object is dropped.
const MAX_PLACEMENT_TRIES: usize = 50;
/// Largest IoU allowed between two objects of one image.
const MAX_OVERLAP_IOU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub image_size: usize,
    /// Number of shape classes, at most [`SHAPE_NAMES`]`.len()`.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: 256,
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.1,
            max_size: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 {
            return err("image_size must be positive");
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return err("num_classes must be between 1 and 3");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err("object count range is empty");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return err("size range must satisfy 0 < min <= max <= 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise must be a nonnegative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub gts: Vec<GroundTruthInstance>,
}

impl Sample {
    /// Mirror image and boxes left to right.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.image.height(), self.image.width());
        let mut image = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                image.set_pixel(y, w - 1 - x, self.image.pixel(y, x));
            }
        }
        let gts = self
            .gts
            .iter()
            .map(|g| {
                let mut b = g.bbox;
                b.cx = 1.0 - b.cx;
                GroundTruthInstance::new(g.class_id, b)
            })
            .collect();
        Sample {
            id: self.id,
            image,
            gts,
        }
    }
}

/// Whether pixel center `(x + .5, y + .5)` lies inside a shape with
/// bounding square `[x0, x0 + s) x [y0, y0 + s)` in pixels.
fn covers(class_id: usize, x0: f64, y0: f64, s: f64, x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (u, v) = ((px - x0) / s, (py - y0) / s);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match class_id {
        0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        1 => true,
        // upright isosceles triangle, apex at top center
        _ => (u - 0.5).abs() <= 0.5 * v,
    }
}

fn render_sample(spec: &DatasetSpec, id: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let n = spec.image_size;
    let size = n as f64;
    let bg: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let mut image = Image::filled(n, n, bg);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.num_classes);
        let color: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
        for _ in 0..MAX_PLACEMENT_TRIES {
            let s = (rng.gen_range(spec.min_size..=spec.max_size) * size).round().max(2.0);
            let x0 = rng.gen_range(0.0..=(size - s)).floor();
            let y0 = rng.gen_range(0.0..=(size - s)).floor();
            let corners = [x0 / size, y0 / size, (x0 + s) / size, (y0 + s) / size];
            if placed.iter().any(|p| iou_corners(*p, corners) > MAX_OVERLAP_IOU) {
                continue;
            }
            let (mut xmin, mut ymin, mut xmax, mut ymax) = (n, n, 0, 0);
            let lo = x0 as usize;
            let hi = ((x0 + s) as usize).min(n);
            let top = y0 as usize;
            let bottom = ((y0 + s) as usize).min(n);
            for y in top..bottom {
                for x in lo..hi {
                    if covers(class_id, x0, y0, s, x, y) {
                        image.set_pixel(y, x, color);
                        xmin = xmin.min(x);
                        xmax = xmax.max(x);
                        ymin = ymin.min(y);
                        ymax = ymax.max(y);
                    }
                }
            }
            if xmin > xmax || ymin > ymax {
                break;
            }
            let tight = [
                xmin as f64 / size,
                ymin as f64 / size,
                (xmax + 1) as f64 / size,
                (ymax + 1) as f64 / size,
            ];
            let bbox = BoundingBox::from_corners(tight[0], tight[1], tight[2], tight[3])
                .expect("rendered shapes cover at least one pixel");
            placed.push(corners);
            gts.push(GroundTruthInstance::new(class_id, bbox));
            break;
        }
    }
    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).expect("validated noise level");
        for y in 0..n {
            for x in 0..n {
                let mut p = image.pixel(y, x);
                for c in &mut p {
                    *c += dist.sample(&mut rng);
                }
                image.set_pixel(y, x, p);
            }
        }
    }
    // quantize so in-memory samples equal their PNG round trip
    let image = Image::from_rgb8(n, n, &image.to_rgb8());
    Sample { id, image, gts }
}

/// Renders every image of `spec`; image `i` depends only on `(seed, i)`.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.num_images as u64).map(|id| render_sample(spec, id)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_fill_their_boxes_as_expected() {
        let spec = DatasetSpec {
            num_images: 60,
            min_objects: 1,
            max_objects: 1,
            min_size: 0.5,
            max_size: 0.5,
            noise: 0.0,
            ..DatasetSpec::default()
        };
        for s in generate_samples(&spec).unwrap() {
            let b = s.gts[0].bbox;
            let side = 0.5 * 64.0;
            assert!((b.w * 64.0 - side).abs() <= 1.0, "{b:?}");
            assert!((b.h * 64.0 - side).abs() <= 1.0, "{b:?}");
        }
    }

    #[test]
    fn flip_mirrors_boxes() {
        let spec = DatasetSpec {
            num_images: 1,
            ..DatasetSpec::default()
        };
        let s = &generate_samples(&spec).unwrap()[0];
        let f = s.hflip();
        assert_eq!(f.hflip().image, s.image);
        assert!((f.gts[0].bbox.cx + s.gts[0].bbox.cx - 1.0).abs() < 1e-12);
    }
}
