//! Shape primitives shared by the synthetic dataset, the toy embedder and
//! segmentation rendering.
//!
//! Images are channel-first `[3, H, W]` arrays with values in `[0, 1]`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Channel-first RGB image, `[3, H, W]`.
pub type Image = Array3<f64>;

/// Gray level used for empty canvas and for the background class.
pub const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.9, 0.1, 0.1],
            ShapeKind::Square => [0.1, 0.8, 0.1],
            ShapeKind::Triangle => [0.1, 0.2, 0.9],
            ShapeKind::Star => [0.95, 0.85, 0.1],
        }
    }

    /// Whether the box-relative point `(u, v)` in `[0,1]^2` lies inside the
    /// shape inscribed in its bounding box. `v` grows downwards.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            ShapeKind::Triangle => v <= 1.0 && v >= 2.0 * (u - 0.5).abs(),
            ShapeKind::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }

    /// Binary `size x size` mask sampled at cell centres of the unit box.
    pub fn mask(self, size: usize) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |(i, j)| {
            let u = (j as f64 + 0.5) / size as f64;
            let v = (i as f64 + 0.5) / size as f64;
            if self.contains(u, v) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn star_polygon() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (k, p) in pts.iter_mut().enumerate() {
        let radius = if k % 2 == 0 { 0.5 } else { 0.2 };
        let angle = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
        *p = (0.5 + radius * angle.cos(), 0.5 + radius * angle.sin());
    }
    pts
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Polygon rasterisation used by the annotation loader: even-odd rule at
/// pixel centres.
pub fn rasterize_polygon(poly: &[(f64, f64)], height: usize, width: usize) -> Array2<bool> {
    Array2::from_shape_fn((height, width), |(i, j)| {
        poly.len() >= 3 && point_in_polygon(j as f64 + 0.5, i as f64 + 0.5, poly)
    })
}

/// Uniform gray canvas.
pub fn blank_image(height: usize, width: usize) -> Image {
    Array3::from_elem((3, height, width), BACKGROUND)
}

/// Box-filter reduction by an integer factor.
pub fn downsample(image: &Image, factor: usize) -> Image {
    let (c, h, w) = image.dim();
    let factor = factor.max(1);
    let area = (factor * factor) as f64;
    Array3::from_shape_fn((c, h / factor, w / factor), |(k, i, j)| {
        let mut acc = 0.0;
        for di in 0..factor {
            for dj in 0..factor {
                acc += image[[k, i * factor + di, j * factor + dj]];
            }
        }
        acc / area
    })
}

/// `size x size` prototype patch for a class: the shape drawn once in every
/// cell of a `cells x cells` grid on the background colour.
pub fn prototype_patch(kind: ShapeKind, size: usize, cells: usize) -> Image {
    let cell = size as f64 / cells as f64;
    let color = kind.color();
    let mut img = blank_image(size, size);
    for i in 0..size {
        for j in 0..size {
            let cy = (i as f64 + 0.5) / cell;
            let cx = (j as f64 + 0.5) / cell;
            if kind.contains(cx.fract(), cy.fract()) {
                for c in 0..3 {
                    img[[c, i, j]] = color[c];
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_have_expected_fill() {
        let fill = |k: ShapeKind| k.mask(64).mean().unwrap();
        assert!((fill(ShapeKind::Square) - 1.0).abs() < 1e-12);
        assert!((fill(ShapeKind::Circle) - std::f64::consts::FRAC_PI_4).abs() < 0.01);
        assert!((fill(ShapeKind::Triangle) - 0.5).abs() < 0.02);
        let star = fill(ShapeKind::Star);
        assert!(star > 0.2 && star < 0.45, "{star}");
    }

    #[test]
    fn polygon_raster_square() {
        let sq = [(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)];
        let m = rasterize_polygon(&sq, 4, 4);
        assert_eq!(m.iter().filter(|&&b| b).count(), 4);
        assert!(m[[1, 1]] && m[[2, 2]] && !m[[0, 0]]);
    }

    #[test]
    fn names_round_trip() {
        for k in ShapeKind::ALL {
            assert_eq!(ShapeKind::from_name(k.name()), Some(k));
        }
    }
}
