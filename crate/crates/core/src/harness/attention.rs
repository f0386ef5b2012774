use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autograd::Graph;
use crate::data::{write_png, Image, Sample};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::{build_multiscale_masks_with, GridShape, MembershipRule};

/// Encoder layers whose self-attention is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    Last,
    All,
    Index(usize),
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerSelector::Last),
            "all" => Ok(LayerSelector::All),
            _ => s
                .parse()
                .map(LayerSelector::Index)
                .map_err(|_| Error::LayerSelector(format!("`{s}` is not `last`, `all` or an index"))),
        }
    }
}

impl LayerSelector {
    fn layers(self, count: usize) -> Result<Vec<usize>> {
        match self {
            _ if count == 0 => Err(Error::LayerSelector("model has no encoder layers".into())),
            LayerSelector::Last => Ok(vec![count - 1]),
            LayerSelector::All => Ok((0..count).collect()),
            LayerSelector::Index(i) if i < count => Ok(vec![i]),
            LayerSelector::Index(i) => Err(Error::LayerSelector(format!(
                "layer {i} out of range for {count} encoder layers"
            ))),
        }
    }
}

/// Mean attention received by every memory cell of each image, averaged
/// over heads, queries and the selected layers. Each row sums to one.
pub fn received_attention(
    det: &Detector,
    images: &[&Image],
    selector: LayerSelector,
) -> Result<Vec<Vec<f64>>> {
    let layers = selector.layers(det.config.encoder_layers)?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::no_grad();
    let enc = det.encode_batch(&mut g, images)?;
    let p = det.config.tokens_per_image();
    let mut out = vec![vec![0.0; p]; images.len()];
    for &l in &layers {
        let (probs, layout, heads) = g
            .attention_probs(enc.attention[l])
            .expect("encoder attention nodes record probabilities");
        let offsets = layout.prob_offsets(heads);
        for (b, block) in layout.blocks.iter().enumerate() {
            let img = block.k_start / p;
            let scale = 1.0 / (heads * block.q_len * layers.len()) as f64;
            let mass = &mut out[img];
            let base = offsets[b];
            for i in 0..heads * block.q_len {
                let row = &probs[base + i * block.k_len..base + (i + 1) * block.k_len];
                for (m, v) in mass[block.k_start - img * p..].iter_mut().zip(row) {
                    *m += v * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of received attention that lands on cells covered by a
/// ground-truth box, averaged over `samples`.
pub fn attention_mass_in_boxes(
    det: &Detector,
    samples: &[Sample],
    selector: LayerSelector,
    rule: MembershipRule,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let shapes = det.config.level_shapes();
    let mut total = 0.0;
    for chunk in samples.chunks(16) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let mass = received_attention(det, &images, selector)?;
        for (s, m) in chunk.iter().zip(mass) {
            let mask = build_multiscale_masks_with(&s.gts, &shapes, rule);
            total += m
                .iter()
                .zip(&mask.location)
                .filter(|(_, &inside)| inside)
                .map(|(v, _)| v)
                .sum::<f64>();
        }
    }
    Ok(total / samples.len() as f64)
}

/// Blue (low) through cyan, green and yellow to red (high).
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |x: f64| x.clamp(0.0, 1.0);
    [
        ramp(4.0 * t - 2.0),
        ramp(2.0 - (4.0 * t - 2.0).abs()),
        ramp(2.0 - 4.0 * t),
    ]
}

/// Renders one level's cell values, min-max normalized, upscaled to
/// `height x width` with nearest-neighbour sampling.
pub fn render_heatmap(values: &[f64], shape: GridShape, height: usize, width: usize) -> Image {
    assert_eq!(values.len(), shape.cells(), "one value per cell");
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut img = Image::new(height, width);
    for y in 0..height {
        let r = y * shape.height / height;
        for x in 0..width {
            let c = x * shape.width / width;
            let v = values[r * shape.width + c];
            let t = if span > 1e-12 { (v - lo) / span } else { 0.0 };
            img.set_pixel(y, x, colormap(t));
        }
    }
    img
}

/// Heatmaps of every level for one image.
pub fn attention_heatmaps(det: &Detector, image: &Image, selector: LayerSelector) -> Result<Vec<Image>> {
    if image.height() != det.config.image_size || image.width() != det.config.image_size {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {}",
            image.height(),
            image.width(),
            det.config.image_size
        )));
    }
    let mass = received_attention(det, &[image], selector)?.remove(0);
    let mut start = 0;
    Ok(det
        .config
        .level_shapes()
        .into_iter()
        .map(|s| {
            let level = &mass[start..start + s.cells()];
            start += s.cells();
            render_heatmap(level, s, image.height(), image.width())
        })
        .collect())
}

/// Writes `{stem}_level{l}.png` per level into `dir`.
pub fn export_attention(
    det: &Detector,
    image: &Image,
    selector: LayerSelector,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    attention_heatmaps(det, image, selector)?
        .iter()
        .enumerate()
        .map(|(l, img)| {
            let path = dir.join(format!("{stem}_level{l}.png"));
            write_png(&path, img)?;
            Ok(path)
        })
        .collect()
}
