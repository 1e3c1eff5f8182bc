//! Image loading, grayscale conversion and rendering of label maps.
//!
//! Only 8-bit PNG (gray, gray+alpha, RGB, RGBA) and binary PGM (P5) are
//! accepted on input. Renders are always PNG.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Parameter(format!(
                "pixel buffer holds {} values, expected {}x{}={}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image with every pixel set to `value`.
    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel class labels in `1..=k`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Parameter(format!(
                "label buffer of {} entries does not match {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if labels.contains(&0) {
            return Err(Error::Parameter("labels are 1-based; found 0".into()));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Largest label present.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(1)
    }
}

/// Rec.709 luma, rounded half-up.
pub fn luma709(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.2126 * f64::from(r) + 0.7152 * f64::from(g) + 0.0722 * f64::from(b);
    (y + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decode PNG or P5 PGM bytes into a grayscale image.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let format = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P5") {
        ImageFormat::Pnm
    } else {
        return Err(Error::Format("expected PNG or binary PGM (P5)".into()));
    };
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luma709(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| luma709(p[0], p[1], p[2])).collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?}; only 8-bit gray or RGB are accepted",
                other.color()
            )))
        }
    };
    GrayImage::new(w, h, data)
}

/// Binary PGM (P5) bytes for `img`.
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            img.data(),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    png_bytes(img.data(), img.width(), img.height(), ExtendedColorType::L8)
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(img)?)
}

pub fn save_png_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_png_gray(img)?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn png_bytes(raw: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

/// Load a ground-truth label map. Distinct gray levels are ranked ascending
/// and become labels `1..=k`.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelImage> {
    let gray = load_gray(path)?;
    Ok(labels_from_gray_levels(&gray))
}

pub fn labels_from_gray_levels(gray: &GrayImage) -> LabelImage {
    let mut rank = [0u16; 256];
    let mut present = [false; 256];
    for &v in gray.data() {
        present[v as usize] = true;
    }
    let mut next = 0u16;
    for (v, p) in present.iter().enumerate() {
        if *p {
            next += 1;
            rank[v] = next;
        }
    }
    let labels = gray.data().iter().map(|&v| rank[v as usize]).collect();
    LabelImage {
        width: gray.width(),
        height: gray.height(),
        labels,
    }
}

/// Class-to-color mapping; entry `i` colors label `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette(pub Vec<[u8; 3]>);

const DEFAULT_COLORS: [[u8; 3]; 16] = [
    [255, 0, 0],
    [0, 255, 255],
    [128, 255, 0],
    [128, 0, 255],
    [255, 191, 0],
    [0, 64, 255],
    [0, 255, 64],
    [255, 0, 191],
    [178, 67, 0],
    [0, 112, 178],
    [22, 178, 0],
    [156, 0, 178],
    [156, 178, 0],
    [22, 0, 178],
    [0, 178, 112],
    [178, 0, 67],
];

impl Default for Palette {
    /// Sixteen hues ordered so that any prefix is spread around the color wheel.
    fn default() -> Self {
        Palette(DEFAULT_COLORS.to_vec())
    }
}

impl Palette {
    pub fn color(&self, label: u16) -> Option<[u8; 3]> {
        (label as usize)
            .checked_sub(1)
            .and_then(|i| self.0.get(i))
            .copied()
    }
}

/// Render a label map as RGB PNG bytes.
pub fn render_labels(labels: &LabelImage, palette: &Palette) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(labels.labels().len() * 3);
    for &l in labels.labels() {
        let c = palette.color(l).ok_or_else(|| {
            Error::Configuration(format!(
                "palette has {} colors but label {l} is present",
                palette.0.len()
            ))
        })?;
        raw.extend_from_slice(&c);
    }
    png_bytes(
        &raw,
        labels.width(),
        labels.height(),
        ExtendedColorType::Rgb8,
    )
}

/// Grayscale image with superpixel boundaries painted in red, as PNG bytes.
/// A pixel is a boundary pixel when its right or lower neighbor has a
/// different id.
pub fn render_boundaries(img: &GrayImage, assignment: &[usize]) -> Result<Vec<u8>> {
    let (w, h) = (img.width(), img.height());
    if assignment.len() != w * h {
        return Err(Error::Parameter(
            "assignment does not match image size".into(),
        ));
    }
    let mut raw = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let edge = (x + 1 < w && assignment[p + 1] != assignment[p])
                || (y + 1 < h && assignment[p + w] != assignment[p]);
            if edge {
                raw.extend_from_slice(&[255, 0, 0]);
            } else {
                let v = img.data()[p];
                raw.extend_from_slice(&[v, v, v]);
            }
        }
    }
    png_bytes(&raw, w, h, ExtendedColorType::Rgb8)
}

/// 16-bit binary PGM holding one superpixel id per pixel.
pub fn encode_id_map_pgm16(width: usize, height: usize, assignment: &[usize]) -> Result<Vec<u8>> {
    if assignment.len() != width * height {
        return Err(Error::Parameter(
            "assignment does not match image size".into(),
        ));
    }
    let mut raw = Vec::with_capacity(assignment.len() * 2);
    for &id in assignment {
        let id = u16::try_from(id)
            .map_err(|_| Error::Parameter(format!("superpixel id {id} exceeds 16 bits")))?;
        raw.extend_from_slice(&id.to_be_bytes());
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.extend_from_slice(&raw);
    Ok(out)
}
