//! PNG and layout JSON artifacts.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::Vocab;
use crate::sg2seg::{BBox, ObjectMask, Palette, SegMap};
use crate::shapes::Image;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb8(image: &Image) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        image::Rgb([to_u8(image[[0, i, j]]), to_u8(image[[1, i, j]]), to_u8(image[[2, i, j]])])
    })
}

pub fn rgb8_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        f64::from(rgb.get_pixel(j as u32, i as u32)[c]) / 255.0
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn save_rgb_png(rgb: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `[3, H, W]` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_rgb_png(&image_to_rgb8(image), path)
}

pub fn load_image_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingImage(path.to_owned()));
    }
    Ok(rgb8_to_image(&image::open(path)?.to_rgb8()))
}

/// Mask probabilities as an 8-bit grayscale PNG.
pub fn save_mask_png(mask: &ObjectMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let v = mask.values();
    let (h, w) = v.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(v[[y as usize, x as usize]])]))
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<ObjectMask> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingImage(path.to_owned()));
    }
    let g = image::open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    ObjectMask::new(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        f64::from(g.get_pixel(j as u32, i as u32)[0]) / 255.0
    }))
}

/// Label map as a palette-indexed PNG; index `l` carries `palette.color(l)`.
pub fn save_seg_png(seg: &SegMap, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let (h, w) = seg.dim();
    let entries = palette.len() + 1;
    if entries > 256 {
        return Err(Error::Config(format!("{} classes do not fit an 8-bit palette", palette.len())));
    }
    let plte: Vec<u8> = (0..entries as u32).flat_map(|l| palette.color(l).map(to_u8)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(plte);
    let data: Vec<u8> = seg.labels().iter().map(|&l| l as u8).collect();
    let png_err = |e: png::EncodingError| Error::InvalidValue(format!("png encoding of {}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads the indices of a palette-indexed PNG written by [`save_seg_png`].
pub fn load_seg_png(path: impl AsRef<Path>) -> Result<SegMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: png::DecodingError| Error::schema(path.display().to_string(), e.to_string());
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::schema(path.display().to_string(), "expected an 8-bit indexed PNG"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(SegMap::new(Array2::from_shape_fn((h, w), |(i, j)| {
        u32::from(buf[i * info.line_size + j])
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub class: String,
    /// `[x0, y0, x1, y1]`, normalised, top-left origin.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Mask PNG path relative to the layout file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// On-disk layout: boxes, mask references and the composed segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub source: String,
    pub objects: Vec<LayoutObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<String>,
}

/// An in-memory layout with class indices into `vocab`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub masks: Option<Vec<ObjectMask>>,
    pub seg: Option<SegMap>,
}

/// Writes `layout.json` plus `masks/<i>.png` and `seg.png` into `dir`;
/// returns the JSON path.
pub fn write_layout(dir: impl AsRef<Path>, layout: &Layout, vocab: &Vocab, source: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let palette = Palette::for_classes(vocab.object_classes());
    let mut objects = Vec::with_capacity(layout.boxes.len());
    for (i, (&c, b)) in layout.classes.iter().zip(&layout.boxes).enumerate() {
        let class = vocab
            .object_name(c)
            .ok_or_else(|| Error::InvalidValue(format!("class index {c} not in vocab")))?
            .to_owned();
        let mask = match &layout.masks {
            Some(ms) => {
                let rel = format!("masks/{i}.png");
                save_mask_png(&ms[i], dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        objects.push(LayoutObject {
            class,
            bbox: b.as_array(),
            mask,
        });
    }
    let segmentation = match &layout.seg {
        Some(seg) => {
            save_seg_png(seg, &palette, dir.join("seg.png"))?;
            Some("seg.png".to_owned())
        }
        None => None,
    };
    let file = LayoutFile {
        source: source.to_owned(),
        objects,
        segmentation,
    };
    let path = dir.join("layout.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a layout written by [`write_layout`].
pub fn read_layout(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Layout> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LayoutFile = serde_json::from_str(&text).map_err(|e| Error::schema("$", e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut classes = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    for (i, o) in file.objects.iter().enumerate() {
        classes.push(vocab.object_index(&o.class).ok_or_else(|| Error::UnknownClass {
            name: o.class.clone(),
            list: "object classes",
        })?);
        let [x0, y0, x1, y1] = o.bbox;
        boxes.push(BBox::new(x0, y0, x1, y1).map_err(|e| Error::schema(format!("objects[{i}].box"), e.to_string()))?);
        if let Some(m) = &o.mask {
            masks.push(load_mask_png(base.join(m))?);
        }
    }
    let masks = if masks.len() == boxes.len() && !boxes.is_empty() {
        Some(masks)
    } else {
        None
    };
    let seg = match &file.segmentation {
        Some(s) => Some(load_seg_png(base.join(s))?),
        None => None,
    };
    Ok(Layout {
        classes,
        boxes,
        masks,
        seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::shapes_vocab;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 7), |(c, i, j)| ((c * 35 + i * 7 + j) % 256) as f64 / 255.0);
        save_image_png(&img, dir.path().join("a.png")).unwrap();
        let back = load_image_png(dir.path().join("a.png")).unwrap();
        assert!((back - &img).iter().all(|d| d.abs() < 1e-12));
        assert!(matches!(load_image_png(dir.path().join("none.png")), Err(Error::MissingImage(_))));

        let seg = SegMap::new(Array2::from_shape_fn((6, 9), |(i, j)| ((i + j) % 5) as u32));
        let palette = Palette::for_classes(shapes_vocab().object_classes());
        save_seg_png(&seg, &palette, dir.path().join("s.png")).unwrap();
        assert_eq!(load_seg_png(dir.path().join("s.png")).unwrap(), seg);
    }

    #[test]
    fn layout_round_trips() {
        let vocab = shapes_vocab();
        let layout = Layout {
            classes: vec![0, 3],
            boxes: vec![BBox::new(0.1, 0.2, 0.5, 0.6).unwrap(), BBox::new(0.5, 0.5, 0.9, 1.0).unwrap()],
            masks: Some(vec![ObjectMask::filled(1.0), ObjectMask::filled(0.0)]),
            seg: Some(SegMap::new(Array2::from_shape_fn((64, 64), |(i, _)| u32::from(i > 30)))),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = write_layout(dir.path(), &layout, &vocab, "ground_truth").unwrap();
        let back = read_layout(&path, &vocab).unwrap();
        assert_eq!(back.classes, layout.classes);
        assert_eq!(back.boxes, layout.boxes);
        assert_eq!(back.masks, layout.masks);
        assert_eq!(back.seg, layout.seg);
    }
}
