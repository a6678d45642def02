//! Captioned image grids.
//!
//! Tiles are the images scaled up by an integer factor to at least
//! [`MIN_TILE`] pixels wide, laid out in `ceil(sqrt(n))` columns, each with
//! an 8x8 bitmap caption strip underneath. A caption that does not fit on
//! one line keeps its first characters and ends in `...`.

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::shapes::Image;

use super::io::image_to_rgb8;

pub const MIN_TILE: usize = 128;
pub const GLYPH: usize = 8;
pub const PAD: usize = 2;
pub const ELLIPSIS: &str = "...";

const STRIP: usize = GLYPH + 2 * PAD;
const INK: Rgb<u8> = Rgb([0, 0, 0]);
const CANVAS: Rgb<u8> = Rgb([255, 255, 255]);

/// `(rows, cols)` for `n` tiles.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let cols = (1..=n).find(|c| c * c >= n).unwrap_or(1);
    (n.div_ceil(cols), cols)
}

/// Caption as drawn in a tile `width` pixels wide.
pub fn fit_caption(caption: &str, width: usize) -> String {
    let max = (width.saturating_sub(2 * PAD)) / GLYPH;
    let chars: Vec<char> = caption.chars().collect();
    if chars.len() <= max {
        return caption.to_owned();
    }
    let keep = max.saturating_sub(ELLIPSIS.len());
    chars[..keep].iter().collect::<String>() + &ELLIPSIS[..max.min(ELLIPSIS.len())]
}

fn draw_text(canvas: &mut RgbImage, text: &str, x: usize, y: usize) {
    for (k, ch) in text.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS.get(ch).or_else(|| font8x8::BASIC_FONTS.get('?'));
        let Some(glyph) = glyph else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH {
                if bits >> col & 1 == 1 {
                    let px = (x + k * GLYPH + col) as u32;
                    let py = (y + row) as u32;
                    if px < canvas.width() && py < canvas.height() {
                        canvas.put_pixel(px, py, INK);
                    }
                }
            }
        }
    }
}

/// Tiles `images` (all the same size) with one caption each.
pub fn render_grid(images: &[Image], captions: &[String]) -> Result<RgbImage> {
    let first = images.first().ok_or(Error::EmptyInput("images"))?;
    if captions.len() != images.len() {
        return Err(Error::LengthMismatch(images.len(), captions.len()));
    }
    let (_, h, w) = first.dim();
    if images.iter().any(|im| im.dim() != first.dim()) {
        return Err(Error::Shape("grid images must share one size".into()));
    }
    let scale = MIN_TILE.div_ceil(w).max(1);
    let (tw, th) = (w * scale, h * scale);
    let (rows, cols) = grid_shape(images.len());
    let cell_h = th + STRIP;
    let mut canvas = RgbImage::from_pixel((cols * tw) as u32, (rows * cell_h) as u32, CANVAS);
    for (n, (img, caption)) in images.iter().zip(captions).enumerate() {
        let (r, c) = (n / cols, n % cols);
        let (x0, y0) = (c * tw, r * cell_h);
        let rgb = image_to_rgb8(img);
        for y in 0..th {
            for x in 0..tw {
                let p = *rgb.get_pixel((x / scale) as u32, (y / scale) as u32);
                canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, p);
            }
        }
        draw_text(&mut canvas, &fit_caption(caption, tw), x0 + PAD, y0 + th + PAD);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(6), (2, 3));
        assert_eq!(grid_shape(4), (2, 2));
        assert_eq!(grid_shape(5), (2, 3));
        let one = render_grid(&[Array3::from_elem((3, 32, 32), 0.5)], &["x".into()]).unwrap();
        assert_eq!(one.dimensions(), (128, 128 + STRIP as u32));
        let six: Vec<_> = (0..6).map(|_| Array3::from_elem((3, 32, 32), 0.5)).collect();
        let caps: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        assert_eq!(render_grid(&six, &caps).unwrap().dimensions(), (3 * 128, 2 * (128 + STRIP as u32)));
        assert!(render_grid(&[], &[]).is_err());
    }

    #[test]
    fn long_captions_are_truncated() {
        assert_eq!(fit_caption("short", 128), "short");
        let long = "a circle left of a star, a star above a square";
        let fitted = fit_caption(long, 128);
        assert_eq!(fitted.chars().count(), (128 - 2 * PAD) / GLYPH);
        assert!(fitted.ends_with(ELLIPSIS));
        assert!(long.starts_with(fitted.trim_end_matches(ELLIPSIS)));
    }

    #[test]
    fn caption_ink_lands_in_the_strip() {
        let g = render_grid(&[Array3::from_elem((3, 32, 32), 1.0)], &["MMMM".into()]).unwrap();
        let inked = g.enumerate_pixels().filter(|(_, _, p)| **p == INK).collect::<Vec<_>>();
        assert!(!inked.is_empty());
        assert!(inked.iter().all(|(_, y, _)| *y >= 128));
    }
}
