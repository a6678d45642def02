//! Layout types: boxes, per-object masks and composed segmentation maps.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::{Image, ShapeKind, BACKGROUND};

/// Side length of predicted object masks.
pub const MASK_SIZE: usize = 64;
/// Smallest box side a clamped prediction may have.
pub const MIN_BOX_SIDE: f64 = 1.0 / 64.0;
/// Minimum soft-mask value for a pixel to be assigned to an object.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Normalised box with top-left origin; `(x0, y0)` is the min corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidValue(format!("invalid box {b:?}")))
        }
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |a: f64, b: f64| a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= 1.0;
        ok(self.x0, self.x1) && ok(self.y0, self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Whether `other` lies entirely within `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Orders corners per axis and enforces the minimum side, keeping the
    /// box inside the unit square. Non-finite coordinates become 0.5.
    pub fn from_corners_clamped(coords: [f64; 4]) -> Self {
        let c = coords.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 });
        let axis = |a: f64, b: f64| {
            let (mut lo, mut hi) = (a.min(b), a.max(b));
            if hi - lo < MIN_BOX_SIDE {
                let mid = 0.5 * (lo + hi);
                lo = (mid - 0.5 * MIN_BOX_SIDE).clamp(0.0, 1.0 - MIN_BOX_SIDE);
                hi = lo + MIN_BOX_SIDE;
            }
            (lo, hi)
        };
        let (x0, x1) = axis(c[0], c[2]);
        let (y0, y1) = axis(c[1], c[3]);
        Self { x0, y0, x1, y1 }
    }

    /// Box from raw network output: sigmoid, then [`Self::from_corners_clamped`].
    pub fn from_logits(raw: [f64; 4]) -> Self {
        Self::from_corners_clamped(raw.map(sigmoid))
    }

    /// Pixel rectangle `[r0, r1) x [c0, c1)` of pixels whose centres fall
    /// inside the box.
    pub fn pixel_span(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let span = |lo: f64, hi: f64, n: usize| {
            let a = ((lo * n as f64) - 0.5).ceil().max(0.0) as usize;
            let b = ((hi * n as f64) - 0.5).ceil().max(0.0) as usize;
            (a.min(n), b.min(n))
        };
        let (r0, r1) = span(self.y0, self.y1, height);
        let (c0, c1) = span(self.x0, self.x1, width);
        (r0, r1, c0, c1)
    }

    pub fn contains_pixel(&self, row: usize, col: usize, height: usize, width: usize) -> bool {
        let (r0, r1, c0, c1) = self.pixel_span(height, width);
        (r0..r1).contains(&row) && (c0..c1).contains(&col)
    }
}

/// Per-object soft mask on a `MASK_SIZE x MASK_SIZE` box-relative grid.
/// Predicted masks are strictly inside `(0, 1)`; ground-truth masks are
/// binary.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask(Array2<f64>);

impl ObjectMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.dim() != (MASK_SIZE, MASK_SIZE) {
            return Err(Error::Shape(format!(
                "mask must be {MASK_SIZE}x{MASK_SIZE}, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("mask values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn filled(value: f64) -> Self {
        Self(Array2::from_elem((MASK_SIZE, MASK_SIZE), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Integer class grid, 0 = background, otherwise vocabulary index + 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap(Array2<u32>);

impl SegMap {
    pub fn new(labels: Array2<u32>) -> Self {
        Self(labels)
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Label for vocabulary class `class`.
    pub fn label_of(class: usize) -> u32 {
        class as u32 + 1
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.0.iter().all(|&v| (v as usize) <= num_classes)
    }

    /// `[num_classes + 1, H, W]` one-hot view; channel 0 is background.
    pub fn one_hot(&self, num_classes: usize) -> Array3<f64> {
        let (h, w) = self.dim();
        let mut out = Array3::zeros((num_classes + 1, h, w));
        for ((i, j), &v) in self.0.indexed_iter() {
            out[[v as usize, i, j]] = 1.0;
        }
        out
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let (h, w) = self.dim();
        Self(Array2::from_shape_fn((height, width), |(i, j)| {
            self.0[[i * h / height, j * w / width]]
        }))
    }
}

/// Class colours; shape classes keep their dataset colours, other classes
/// get a deterministic colour from their index.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette(Vec<[f64; 3]>);

impl Palette {
    pub fn for_classes<S: AsRef<str>>(names: &[S]) -> Self {
        Self(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| match ShapeKind::from_name(n.as_ref()) {
                    Some(k) => k.color(),
                    None => {
                        let h = (i as f64 * 0.618_033_988_75).fract();
                        hsv_to_rgb(h, 0.7, 0.9)
                    }
                })
                .collect(),
        )
    }

    pub fn color(&self, label: u32) -> [f64; 3] {
        match label {
            0 => [BACKGROUND; 3],
            l => self.0.get(l as usize - 1).copied().unwrap_or([0.0; 3]),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Paints each label with its palette colour.
pub fn render_segmentation(seg: &SegMap, palette: &Palette) -> Image {
    let (h, w) = seg.dim();
    let mut img = Array3::zeros((3, h, w));
    for ((i, j), &l) in seg.labels().indexed_iter() {
        let c = palette.color(l);
        for k in 0..3 {
            img[[k, i, j]] = c[k];
        }
    }
    img
}

/// Bilinear resampling weights mapping mask rows (or columns) onto canvas
/// rows (or columns) covered by `[lo, hi)`; `[canvas, mask]`. Rows of
/// canvas pixels outside the box are zero. Samples clamp at the mask border.
pub fn warp_weights(lo: f64, hi: f64, canvas: usize, mask: usize) -> Array2<f64> {
    let mut out = Array2::zeros((canvas, mask));
    for i in 0..canvas {
        let p = (i as f64 + 0.5) / canvas as f64;
        if p < lo || p >= hi {
            continue;
        }
        let v = ((p - lo) / (hi - lo) * mask as f64 - 0.5).clamp(0.0, (mask - 1) as f64);
        let i0 = v.floor() as usize;
        let i1 = (i0 + 1).min(mask - 1);
        let frac = v - i0 as f64;
        out[[i, i0]] += 1.0 - frac;
        out[[i, i1]] += frac;
    }
    out
}

/// Mask warped into its box on an `height x width` canvas; zero outside.
pub fn warp_mask(mask: &ObjectMask, bbox: &BBox, height: usize, width: usize) -> Array2<f64> {
    let ay = warp_weights(bbox.y0, bbox.y1, height, MASK_SIZE);
    let ax = warp_weights(bbox.x0, bbox.x1, width, MASK_SIZE);
    ay.dot(mask.values()).dot(&ax.t())
}

/// Composes a label map: per pixel the object with the largest warped mask
/// value wins if that value exceeds [`MASK_THRESHOLD`]; ties go to the lower
/// object index.
pub fn compose_segmentation(
    boxes: &[BBox],
    masks: &[ObjectMask],
    classes: &[usize],
    height: usize,
    width: usize,
) -> Result<SegMap> {
    if boxes.is_empty() {
        return Err(Error::EmptyLayout);
    }
    if boxes.len() != masks.len() {
        return Err(Error::LengthMismatch(boxes.len(), masks.len()));
    }
    if boxes.len() != classes.len() {
        return Err(Error::LengthMismatch(boxes.len(), classes.len()));
    }
    if height < MASK_SIZE || width < MASK_SIZE {
        return Err(Error::Shape(format!(
            "canvas must be at least {MASK_SIZE}x{MASK_SIZE}, got {height}x{width}"
        )));
    }
    Ok(compose_any_size(boxes, masks, classes, height, width))
}

/// [`compose_segmentation`] without the minimum canvas size, for rendering
/// small guidance targets.
pub(crate) fn compose_any_size(
    boxes: &[BBox],
    masks: &[ObjectMask],
    classes: &[usize],
    height: usize,
    width: usize,
) -> SegMap {
    let mut best = Array2::<f64>::from_elem((height, width), MASK_THRESHOLD);
    let mut labels = Array2::<u32>::zeros((height, width));
    for ((b, m), &c) in boxes.iter().zip(masks).zip(classes) {
        let warped = warp_mask(m, b, height, width);
        let (r0, r1, c0, c1) = b.pixel_span(height, width);
        let region = warped.slice(s![r0..r1, c0..c1]);
        for ((i, j), &v) in region.indexed_iter() {
            let (i, j) = (i + r0, j + c0);
            if v > best[[i, j]] {
                best[[i, j]] = v;
                labels[[i, j]] = SegMap::label_of(c);
            }
        }
    }
    SegMap(labels)
}
