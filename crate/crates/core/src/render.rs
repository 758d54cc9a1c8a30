//! Deterministic rasterization of a single line of text into a grayscale
//! image with ink = 1.0 and background = 0.0.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ab_glyph::{point, Font as _, FontArc, PxScale, ScaleFont as _};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// DejaVu Sans, shipped with the crate so that rendering never depends on
/// system fonts. Its Cyrillic and Latin homoglyphs share outlines.
pub const BUILTIN_FONT: &[u8] = include_bytes!("../assets/fonts/DejaVuSans.ttf");
pub const BUILTIN_FONT_ID: &str = "dejavu-sans";

pub const MIN_FONT_SIZE: u32 = 6;
pub const DEFAULT_FONT_SIZE: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Font file on disk; `None` selects the built-in face.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub font_path: Option<PathBuf>,
    #[serde(default = "default_font_size")]
    pub font_size: u32,
    #[serde(default)]
    pub inter_char_padding: u32,
}

fn default_font_size() -> u32 {
    DEFAULT_FONT_SIZE
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            font_path: None,
            font_size: DEFAULT_FONT_SIZE,
            inter_char_padding: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.font_size < MIN_FONT_SIZE {
            return Err(Error::invalid(format!(
                "font size {} is below the minimum of {MIN_FONT_SIZE}pt",
                self.font_size
            )));
        }
        Ok(())
    }

    pub fn font_id(&self) -> String {
        match &self.font_path {
            Some(p) => p.display().to_string(),
            None => BUILTIN_FONT_ID.to_string(),
        }
    }
}

/// A font face scaled to a fixed point size. Cheap to clone; immutable.
#[derive(Clone)]
pub struct FontHandle {
    face: FontArc,
    id: String,
    size_pt: u32,
    scale: PxScale,
    ascent: f32,
    height: usize,
}

impl std::fmt::Debug for FontHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FontHandle")
            .field("id", &self.id)
            .field("size_pt", &self.size_pt)
            .field("height", &self.height)
            .finish()
    }
}

/// Loads a TrueType/OpenType face from disk at `size` points.
pub fn load_font(path: impl AsRef<Path>, size: u32) -> Result<FontHandle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let face = FontArc::try_from_vec(bytes)
        .map_err(|_| Error::invalid(format!("unsupported font format: {}", path.display())))?;
    FontHandle::new(face, path.display().to_string(), size)
}

impl FontHandle {
    pub fn builtin(size: u32) -> Result<Self> {
        let face = FontArc::try_from_slice(BUILTIN_FONT).expect("built-in font parses");
        Self::new(face, BUILTIN_FONT_ID.to_string(), size)
    }

    fn new(face: FontArc, id: String, size: u32) -> Result<Self> {
        if size < MIN_FONT_SIZE {
            return Err(Error::invalid(format!(
                "font size {size}pt is below minimum of {MIN_FONT_SIZE}pt"
            )));
        }
        let scale = face
            .pt_to_px_scale(size as f32)
            .ok_or_else(|| Error::invalid("font has no units-per-em"))?;
        let scaled = face.as_scaled(scale);
        let ascent = scaled.ascent();
        let descent = scaled.descent();
        let height = ((ascent - descent).ceil() as usize).max(1);
        Ok(Self {
            face,
            id,
            size_pt: size,
            scale,
            ascent,
            height,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn size_pt(&self) -> u32 {
        self.size_pt
    }

    /// Line height in pixels: maximum ascent plus maximum descent.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Horizontal advance of `c` in pixels.
    pub fn advance(&self, c: char) -> f32 {
        let scaled = self.face.as_scaled(self.scale);
        scaled.h_advance(scaled.glyph_id(c))
    }

    /// Whether the face has a real glyph for `c` (as opposed to .notdef).
    pub fn has_glyph(&self, c: char) -> bool {
        self.face.glyph_id(c).0 != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values in [0, 1].
    pub pixels: Vec<f32>,
    pub source_text: String,
}

impl LineImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
            source_text: String::new(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.height).map(|r| self.get(r, col)).collect()
    }

    /// Binary PGM ("P5", maxval 255), ink stored as round(255 * v).
    pub fn to_pgm(&self) -> Vec<u8> {
        write_pgm(self.width, self.height, &self.pixels)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, pixels) = read_pgm(bytes)?;
        Ok(Self {
            height,
            width,
            pixels,
            source_text: String::new(),
        })
    }
}

pub(crate) fn write_pgm(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = || Error::invalid("malformed PGM");
    // header: magic, width, height, maxval separated by whitespace
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
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    let maxval: u32 = fields[3].parse().map_err(|_| bad())?;
    if maxval != 255 || bytes.len() < pos + width * height {
        return Err(bad());
    }
    let pixels = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok((width, height, pixels))
}

/// Rasterizes lines with a fixed font and padding.
#[derive(Debug, Clone)]
pub struct Renderer {
    font: Arc<FontHandle>,
    padding: u32,
}

impl Renderer {
    pub fn new(font: FontHandle, inter_char_padding: u32) -> Self {
        Self {
            font: Arc::new(font),
            padding: inter_char_padding,
        }
    }

    pub fn from_config(cfg: &RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let font = match &cfg.font_path {
            Some(p) => load_font(p, cfg.font_size)?,
            None => FontHandle::builtin(cfg.font_size)?,
        };
        Ok(Self::new(font, cfg.inter_char_padding))
    }

    pub fn font(&self) -> &FontHandle {
        &self.font
    }

    pub fn height(&self) -> usize {
        self.font.height
    }

    /// Renders `text` left to right, one glyph per codepoint, with no
    /// shaping and no preprocessing. Codepoints missing from the face
    /// draw the face's .notdef glyph.
    pub fn render_line(&self, text: &str) -> Result<LineImage> {
        if text.contains(['\n', '\r']) {
            return Err(Error::invalid("text to render contains a newline"));
        }
        let font = &*self.font;
        let scaled = font.face.as_scaled(font.scale);
        let height = font.height;

        let mut pen = 0.0f32;
        let mut glyphs = Vec::with_capacity(text.len());
        for c in text.chars() {
            let id = scaled.glyph_id(c);
            glyphs.push(id.with_scale_and_position(font.scale, point(pen, font.ascent)));
            pen += scaled.h_advance(id) + self.padding as f32;
        }
        let width = (pen.ceil() as usize).max(1);

        let mut pixels = vec![0.0f32; height * width];
        for glyph in glyphs {
            let Some(outline) = font.face.outline_glyph(glyph) else {
                continue;
            };
            let bounds = outline.px_bounds();
            let x0 = bounds.min.x as i64;
            let y0 = bounds.min.y as i64;
            outline.draw(|gx, gy, coverage| {
                let x = x0 + gx as i64;
                let y = y0 + gy as i64;
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    let px = &mut pixels[y as usize * width + x as usize];
                    *px = (*px + coverage).clamp(0.0, 1.0);
                }
            });
        }

        Ok(LineImage {
            height,
            width,
            pixels,
            source_text: text.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelStats {
    pub avg_density: f64,
    pub nonwhite_fraction: f64,
}

pub fn pixel_stats(img: &LineImage) -> PixelStats {
    pixel_stats_many(std::slice::from_ref(img))
}

/// Pooled statistics over all pixels of several images.
pub fn pixel_stats_many(images: &[LineImage]) -> PixelStats {
    let mut total = 0usize;
    let mut sum = 0.0f64;
    let mut nonwhite = 0usize;
    for img in images {
        total += img.pixels.len();
        for &v in &img.pixels {
            sum += v as f64;
            if v > 0.0 {
                nonwhite += 1;
            }
        }
    }
    if total == 0 {
        return PixelStats {
            avg_density: 0.0,
            nonwhite_fraction: 0.0,
        };
    }
    PixelStats {
        avg_density: sum / total as f64,
        nonwhite_fraction: nonwhite as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn renderer() -> Renderer {
        Renderer::from_config(&RenderConfig::default()).unwrap()
    }

    #[test]
    fn height_is_fixed_and_deterministic() {
        let a = FontHandle::builtin(10).unwrap();
        let b = FontHandle::builtin(10).unwrap();
        assert!(a.height() > 0);
        assert_eq!(a.height(), b.height());
        assert!(FontHandle::builtin(20).unwrap().height() > a.height());
    }

    #[test]
    fn rejects_tiny_font() {
        let err = FontHandle::builtin(3).unwrap_err();
        assert!(err.to_string().contains("below minimum"), "{err}");
        let cfg = RenderConfig {
            font_size: 5,
            ..Default::default()
        };
        assert!(Renderer::from_config(&cfg).is_err());
    }

    #[test]
    fn load_font_errors() {
        assert!(load_font("/nonexistent/font.ttf", 10).is_err());
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.ttf");
        std::fs::write(&bogus, b"not a font").unwrap();
        assert!(load_font(&bogus, 10).is_err());
        let real = dir.path().join("real.ttf");
        std::fs::write(&real, BUILTIN_FONT).unwrap();
        let f = load_font(&real, 10).unwrap();
        assert_eq!(f.height(), FontHandle::builtin(10).unwrap().height());
    }

    #[test]
    fn empty_text_is_background() {
        let img = renderer().render_line("").unwrap();
        assert_eq!(img.height, renderer().height());
        assert!(img.width >= 1);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_grows_with_text() {
        let r = renderer();
        let a = r.render_line("a").unwrap();
        let aa = r.render_line("aa").unwrap();
        assert!(aa.width > a.width);
        assert_eq!(a.height, aa.height);
    }

    #[test]
    fn newline_rejected() {
        assert!(renderer().render_line("a\nb").is_err());
    }

    #[test]
    fn render_is_bit_identical() {
        let r = renderer();
        let x = r.render_line("Visual text, ünïcödé & Кириллица").unwrap();
        let y = r.render_line("Visual text, ünïcödé & Кириллица").unwrap();
        assert_eq!(x, y);
        assert!(x.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x.pixels.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn unknown_glyph_draws_something() {
        let r = renderer();
        // private-use codepoint: not in the face, so .notdef is drawn
        assert!(!r.font().has_glyph('\u{E000}'));
        let img = r.render_line("\u{E000}").unwrap();
        assert!(img.pixels.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn padding_widens() {
        let plain = renderer().render_line("abc").unwrap();
        let padded = Renderer::from_config(&RenderConfig {
            inter_char_padding: 2,
            ..Default::default()
        })
        .unwrap()
        .render_line("abc")
        .unwrap();
        assert_eq!(padded.width, plain.width + 6);
    }

    #[test]
    fn stats_extremes() {
        let blank = LineImage::blank(4, 5);
        let s = pixel_stats(&blank);
        assert_eq!((s.avg_density, s.nonwhite_fraction), (0.0, 0.0));
        let mut ink = LineImage::blank(4, 5);
        ink.pixels.fill(1.0);
        let s = pixel_stats(&ink);
        assert_eq!((s.avg_density, s.nonwhite_fraction), (1.0, 1.0));
        let s = pixel_stats(&renderer().render_line("Hallo Welt").unwrap());
        assert!(0.0 < s.avg_density && s.avg_density <= s.nonwhite_fraction);
        assert!(s.nonwhite_fraction <= 1.0);
    }

    #[test]
    fn pgm_round_trip() {
        let img = renderer().render_line("pgm").unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n"));
        let back = LineImage::from_pgm(&bytes).unwrap();
        assert_eq!((back.width, back.height), (img.width, img.height));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(back.to_pgm(), bytes);
    }
}
