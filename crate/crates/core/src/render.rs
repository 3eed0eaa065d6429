//! Deterministic text-to-image rasterization.
//!
//! Text is wrapped greedily into lines that fit `image_width - 2 * pad_left`,
//! then drawn with a built-in 8x8 bitmap font stretched to the glyph cell
//! (`glyph_width` x `font_size`). The block of lines is centred vertically
//! with floor division, so overflowing text starts above the top edge and is
//! clipped.

use std::io::Write;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WHITE: u8 = 255;
pub const BLACK: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub font_size: usize,
    pub pad_left: usize,
    pub glyph_width: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            image_width: 800,
            image_height: 400,
            font_size: 40,
            pad_left: 20,
            glyph_width: 24,
        }
    }
}

impl RenderSpec {
    pub fn max_text_width(&self) -> usize {
        self.image_width.saturating_sub(2 * self.pad_left)
    }

    pub fn validate(&self) -> Result<()> {
        if self.glyph_width == 0 || self.font_size == 0 {
            return Err(Error::InvalidConfig(
                "glyph_width and font_size must be positive".into(),
            ));
        }
        if self.image_width <= 2 * self.pad_left || self.image_height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} leaves no room for text with pad_left {}",
                self.image_width, self.image_height, self.pad_left
            )));
        }
        Ok(())
    }
}

/// Measures rendered text width in pixels.
pub trait TextMeasure {
    fn width(&self, text: &str) -> usize;
}

/// Every character occupies the same cell width.
#[derive(Debug, Clone, Copy)]
pub struct Monospace(pub usize);

impl TextMeasure for Monospace {
    fn width(&self, text: &str) -> usize {
        self.0 * text.chars().count()
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InconsistentInput(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (P5) encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::TruncatedFile("PGM header".into()));
            }
            fields.push(&bytes[start..pos]);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != b"P5" {
            return Err(Error::InconsistentInput("not a binary PGM (P5)".into()));
        }
        let num = |f: &[u8]| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InconsistentInput("malformed PGM header".into()))
        };
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::InconsistentInput(format!("PGM maxval {maxval} unsupported")));
        }
        let raster = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| Error::TruncatedFile("PGM raster".into()))?;
        Self::from_pixels(width, height, raster.to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

/// Greedy word wrap with the monospace width model of `spec`.
pub fn wrap_lines(text: &str, spec: &RenderSpec) -> Result<Vec<String>> {
    wrap_lines_with(text, spec.max_text_width(), &Monospace(spec.glyph_width))
}

/// Greedy word wrap against an arbitrary width function.
///
/// A line accumulates `word + ' '` while `width(line + next_word)` fits. A
/// word that does not fit on an empty line is placed alone.
pub fn wrap_lines_with(text: &str, max_width: usize, measure: &dyn TextMeasure) -> Result<Vec<String>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut lines = Vec::new();
    let mut rest = &words[..];
    while let Some((first, _)) = rest.split_first() {
        let mut line = String::new();
        while let Some((word, tail)) = rest.split_first() {
            let candidate = format!("{line}{word}");
            if measure.width(&candidate) > max_width {
                break;
            }
            line = candidate + " ";
            rest = tail;
        }
        if line.is_empty() {
            line = format!("{first} ");
            rest = &rest[1..];
        }
        lines.push(line);
    }
    Ok(lines)
}

fn glyph(c: char) -> [u8; 8] {
    BASIC_FONTS.get(c).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8])
}

/// Draws one character into the cell whose top-left corner is `(x0, y0)`.
/// Pixels outside the buffer are clipped.
fn draw_glyph(img: &mut ImageBuffer, c: char, x0: i64, y0: i64, cell_w: usize, cell_h: usize) {
    let bitmap = glyph(c);
    for py in 0..cell_h {
        let y = y0 + py as i64;
        if y < 0 || y >= img.height as i64 {
            continue;
        }
        let row = bitmap[py * 8 / cell_h];
        for px in 0..cell_w {
            let x = x0 + px as i64;
            if x < 0 || x >= img.width as i64 {
                continue;
            }
            if row >> (px * 8 / cell_w) & 1 == 1 {
                img.pixels[y as usize * img.width + x as usize] = BLACK;
            }
        }
    }
}

/// Renders one glyph alone in a `cell`x`cell` square (white background).
pub fn glyph_cell(c: char, cell: usize) -> ImageBuffer {
    let mut img = ImageBuffer::filled(cell, cell, WHITE);
    draw_glyph(&mut img, c, 0, 0, cell, cell);
    img
}

pub fn render_text(text: &str, spec: &RenderSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    let lines = wrap_lines(text, spec)?;
    let mut img = ImageBuffer::filled(spec.image_width, spec.image_height, WHITE);
    let total_text_height = (lines.len() * spec.font_size) as i64;
    let mut y = (spec.image_height as i64 - total_text_height).div_euclid(2);
    for line in &lines {
        for (i, c) in line.chars().enumerate() {
            let x = (spec.pad_left + i * spec.glyph_width) as i64;
            draw_glyph(&mut img, c, x, y, spec.glyph_width, spec.font_size);
        }
        y += spec.font_size as i64;
    }
    Ok(img)
}

/// Vertical offset of the first line, as used by [`render_text`].
pub fn text_start_y(line_count: usize, spec: &RenderSpec) -> i64 {
    (spec.image_height as i64 - (line_count * spec.font_size) as i64).div_euclid(2)
}

/// Splits an image into non-overlapping square patches in row-major order.
/// Each row is one flattened patch scaled to `[0, 1]`.
pub fn patch(img: &ImageBuffer, patch_size: usize) -> Result<Array2<f32>> {
    if patch_size == 0 || !img.width.is_multiple_of(patch_size) || !img.height.is_multiple_of(patch_size) {
        return Err(Error::IndivisibleDimensions {
            width: img.width,
            height: img.height,
            patch: patch_size,
        });
    }
    let (gw, gh) = (img.width / patch_size, img.height / patch_size);
    let f = patch_size * patch_size;
    let mut out = Array2::zeros((gw * gh, f));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let v = img.get(gx * patch_size + px, gy * patch_size + py);
                    row[py * patch_size + px] = v as f32 / 255.0;
                }
            }
        }
    }
    Ok(out)
}
