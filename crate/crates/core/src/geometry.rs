//! Box and grid geometry: coordinate conversion, location/scale masks over
//! flattened feature grids, and IoU/GIoU.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from normalized corners `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let [cx, cy, w, h] = box_convert([x0, y0, x1, y1], BoxForm::Corner, BoxForm::Center);
        Self::new(cx, cy, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || !(0.0..=1.0).contains(&self.cx)
            || !(0.0..=1.0).contains(&self.cy)
            || !(self.w > 0.0 && self.w <= 1.0)
            || !(self.h > 0.0 && self.h <= 1.0)
        {
            return Err(Error::DegenerateBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners `(x0, y0, x1, y1)` clipped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        let [x0, y0, x1, y1] = self.raw_corners();
        [
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        ]
    }

    fn raw_corners(&self) -> [f64; 4] {
        box_convert(self.to_array(), BoxForm::Center, BoxForm::Corner)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Ground-truth object: a class label plus its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

impl GroundTruthInstance {
    pub fn new(class_id: usize, bbox: BoundingBox) -> Self {
        GroundTruthInstance { class_id, bbox }
    }
}

/// Height and width (in cells) of one feature level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "grid shape must be positive, got {height}x{width}"
            )));
        }
        Ok(GridShape { height, width })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Total number of memory points over all levels.
pub fn total_cells(levels: &[GridShape]) -> usize {
    levels.iter().map(GridShape::cells).sum()
}

/// Converts a flat row-major index into `(row, col)`.
pub fn flat_to_grid(p: usize, shape: GridShape) -> Result<(usize, usize)> {
    if p >= shape.cells() {
        return Err(Error::OutOfBounds {
            index: p,
            len: shape.cells(),
        });
    }
    Ok((p / shape.width, p % shape.width))
}

/// How a grid cell is decided to lie inside a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipRule {
    /// The cell center lies inside the (closed) box.
    #[default]
    CellCenter,
    /// The cell rectangle overlaps the box with positive area.
    AnyOverlap,
}

/// Rows and columns of a grid covered by a box; membership is separable, so
/// the covered cells always form a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellSpan {
    row0: usize,
    row1: usize,
    col0: usize,
    col1: usize,
}

impl CellSpan {
    fn rows(&self) -> usize {
        self.row1 - self.row0
    }

    fn cols(&self) -> usize {
        self.col1 - self.col0
    }

    fn is_empty(&self) -> bool {
        self.rows() == 0 || self.cols() == 0
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }
}

fn covered_range(lo: f64, hi: f64, n: usize, rule: MembershipRule) -> (usize, usize) {
    let inside = |i: usize| {
        let a = i as f64 / n as f64;
        let b = (i + 1) as f64 / n as f64;
        match rule {
            MembershipRule::CellCenter => {
                let c = (i as f64 + 0.5) / n as f64;
                lo <= c && c <= hi
            }
            MembershipRule::AnyOverlap => a.max(lo) < b.min(hi),
        }
    };
    let first = (0..n).find(|&i| inside(i));
    match first {
        Some(start) => {
            let end = (start..n).find(|&i| !inside(i)).unwrap_or(n);
            (start, end)
        }
        None => (0, 0),
    }
}

fn cell_span(bbox: &BoundingBox, shape: GridShape, rule: MembershipRule) -> CellSpan {
    let [x0, y0, x1, y1] = bbox.corners();
    let (row0, row1) = covered_range(y0, y1, shape.height, rule);
    let (col0, col1) = covered_range(x0, x1, shape.width, rule);
    CellSpan {
        row0,
        row1,
        col0,
        col1,
    }
}

static EMPTY_SPAN_WARNED: AtomicBool = AtomicBool::new(false);

/// Binary foreground indicator per cell (row-major), using cell centers.
pub fn location_mask(gts: &[GroundTruthInstance], shape: GridShape) -> Vec<bool> {
    location_mask_with(gts, shape, MembershipRule::CellCenter)
}

pub fn location_mask_with(
    gts: &[GroundTruthInstance],
    shape: GridShape,
    rule: MembershipRule,
) -> Vec<bool> {
    let mut mask = vec![false; shape.cells()];
    for gt in gts {
        let span = cell_span(&gt.bbox, shape, rule);
        for r in span.row0..span.row1 {
            for c in span.col0..span.col1 {
                mask[r * shape.width + c] = true;
            }
        }
    }
    mask
}

/// Per-cell weights: `1/(H_k W_k)` inside the smallest covering box `k`
/// (counted in grid rows and columns), `1/N_bg` on background cells.
pub fn scale_mask(gts: &[GroundTruthInstance], shape: GridShape, mask: &[bool]) -> Vec<f64> {
    scale_mask_with(gts, shape, mask, MembershipRule::CellCenter)
}

pub fn scale_mask_with(
    gts: &[GroundTruthInstance],
    shape: GridShape,
    mask: &[bool],
    rule: MembershipRule,
) -> Vec<f64> {
    debug_assert_eq!(mask.len(), shape.cells());
    let spans: Vec<CellSpan> = gts
        .iter()
        .map(|gt| {
            let span = cell_span(&gt.bbox, shape, rule);
            if span.is_empty() {
                // small objects miss coarse levels all the time; warn once
                let level = if EMPTY_SPAN_WARNED.swap(true, Ordering::Relaxed) {
                    log::Level::Debug
                } else {
                    log::Level::Warn
                };
                log::log!(
                    level,
                    "box {:?} covers no cell of a {}x{} grid; it contributes nothing \
                     (further cases are logged at debug level)",
                    gt.bbox,
                    shape.height,
                    shape.width
                );
            }
            span
        })
        .collect();

    let n_bg = mask.iter().filter(|&&m| !m).count();
    let bg_weight = if n_bg > 0 { 1.0 / n_bg as f64 } else { 0.0 };

    let mut out = vec![0.0; shape.cells()];
    for (p, &fg) in mask.iter().enumerate() {
        let (r, c) = (p / shape.width, p % shape.width);
        if !fg {
            out[p] = bg_weight;
            continue;
        }
        // smallest covering box; ties broken by box area then index
        let best = spans
            .iter()
            .zip(gts)
            .filter(|(s, _)| s.contains(r, c))
            .min_by(|(sa, ga), (sb, gb)| {
                (sa.rows() * sa.cols())
                    .cmp(&(sb.rows() * sb.cols()))
                    .then(ga.bbox.area().total_cmp(&gb.bbox.area()))
            });
        out[p] = match best {
            Some((span, _)) => 1.0 / (span.rows().max(1) * span.cols().max(1)) as f64,
            None => bg_weight,
        };
    }
    out
}

/// Location mask `M` and scale mask `S` over the concatenation of all levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub location: Vec<bool>,
    pub scale: Vec<f64>,
    pub level_shapes: Vec<GridShape>,
}

impl MaskPair {
    pub fn len(&self) -> usize {
        self.location.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location.is_empty()
    }

    /// Masks with the location information switched off: every cell counts
    /// as foreground and each level is weighted uniformly (`1/(H_l W_l)`).
    pub fn uniform(level_shapes: &[GridShape]) -> MaskPair {
        let mut location = Vec::new();
        let mut scale = Vec::new();
        for shape in level_shapes {
            location.extend(std::iter::repeat(true).take(shape.cells()));
            scale.extend(std::iter::repeat(1.0 / shape.cells() as f64).take(shape.cells()));
        }
        MaskPair {
            location,
            scale,
            level_shapes: level_shapes.to_vec(),
        }
    }

    /// Per-point loss weight `alpha*M*S + beta*(1-M)*S`.
    pub fn point_weights(&self, alpha: f64, beta: f64) -> Vec<f64> {
        self.location
            .iter()
            .zip(&self.scale)
            .map(|(&m, &s)| if m { alpha * s } else { beta * s })
            .collect()
    }
}

/// Builds per-level masks from normalized boxes and concatenates them in
/// level order.
pub fn build_multiscale_masks(gts: &[GroundTruthInstance], level_shapes: &[GridShape]) -> MaskPair {
    build_multiscale_masks_with(gts, level_shapes, MembershipRule::CellCenter)
}

pub fn build_multiscale_masks_with(
    gts: &[GroundTruthInstance],
    level_shapes: &[GridShape],
    rule: MembershipRule,
) -> MaskPair {
    let mut location = Vec::with_capacity(total_cells(level_shapes));
    let mut scale = Vec::with_capacity(total_cells(level_shapes));
    for &shape in level_shapes {
        let m = location_mask_with(gts, shape, rule);
        let s = scale_mask_with(gts, shape, &m, rule);
        location.extend(m);
        scale.extend(s);
    }
    MaskPair {
        location,
        scale,
        level_shapes: level_shapes.to_vec(),
    }
}

/// Box parameterizations understood by [`box_convert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxForm {
    /// `(cx, cy, w, h)`
    Center,
    /// `(x0, y0, x1, y1)`
    Corner,
}

impl FromStr for BoxForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" | "cxcywh" => Ok(BoxForm::Center),
            "corner" | "xyxy" => Ok(BoxForm::Corner),
            other => Err(Error::InvalidBoxForm(other.to_string())),
        }
    }
}

impl fmt::Display for BoxForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxForm::Center => f.write_str("center"),
            BoxForm::Corner => f.write_str("corner"),
        }
    }
}

pub fn box_convert(b: [f64; 4], from: BoxForm, to: BoxForm) -> [f64; 4] {
    match (from, to) {
        (BoxForm::Center, BoxForm::Corner) => {
            let [cx, cy, w, h] = b;
            [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
        }
        (BoxForm::Corner, BoxForm::Center) => {
            let [x0, y0, x1, y1] = b;
            [0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0]
        }
        _ => b,
    }
}

/// [`box_convert`] with forms given by name.
pub fn box_convert_named(b: [f64; 4], from: &str, to: &str) -> Result<[f64; 4]> {
    Ok(box_convert(b, from.parse()?, to.parse()?))
}

/// IoU and GIoU of two boxes in corner form.
pub fn iou_giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<(f64, f64)> {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let (area_a, area_b) = (area(a), area(b));
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return Err(Error::DegenerateBox(format!("{a:?} / {b:?}")));
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let iou = inter / union;
    let enclosing = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok((iou, iou - (enclosing - union) / enclosing))
}

pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    iou_giou_corners(a, b).map(|(_, g)| g)
}

/// Generalized IoU of two boxes (unclipped extents).
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    giou_corners(a.raw_corners(), b.raw_corners())
}

/// Plain IoU of two boxes in corner form; 0 for degenerate input.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_giou_corners(a, b).map(|(i, _)| i).unwrap_or(0.0)
}
