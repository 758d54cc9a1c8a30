//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export wraps a plain Rust function returning `Result<_, String>` so
//! the logic can be tested natively; only the wrappers touch JS types.

use visrep::noise::{inject, CharTable, NoiseKind, NoiseSpec};
use visrep::render::{RenderConfig, Renderer};
use visrep::segmentation::{bpe_apply, bpe_train};
use visrep::slicer::{slice_image, SliceConfig};
use wasm_bindgen::prelude::*;

/// A rendered line plus where its slices start.
#[wasm_bindgen]
pub struct Rendered {
    width: usize,
    height: usize,
    window: usize,
    gray: Vec<u8>,
    offsets: Vec<u32>,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn window(&self) -> usize {
        self.window
    }

    /// Row-major 8-bit gray, ink dark on white.
    pub fn gray(&self) -> Vec<u8> {
        self.gray.clone()
    }

    /// Left column of each slice.
    pub fn offsets(&self) -> Vec<u32> {
        self.offsets.clone()
    }
}

pub fn render_inner(text: &str, font_size: u32, window: usize, stride: usize) -> Result<Rendered, String> {
    let cfg = RenderConfig {
        font_size,
        ..Default::default()
    };
    let renderer = Renderer::from_config(&cfg).map_err(|e| e.to_string())?;
    let slice = SliceConfig::new(window, stride).map_err(|e| e.to_string())?;
    let img = renderer.render_line(text).map_err(|e| e.to_string())?;
    let seq = slice_image(&img, slice);
    Ok(Rendered {
        width: img.width,
        height: img.height,
        window,
        gray: img.pixels.iter().map(|&v| 255 - (v * 255.0).round() as u8).collect(),
        offsets: (0..seq.len()).map(|i| seq.offset(i) as u32).collect(),
    })
}

/// Renders `text` and slices it with the given window and stride.
#[wasm_bindgen]
pub fn render(text: &str, font_size: u32, window: usize, stride: usize) -> Result<Rendered, JsError> {
    render_inner(text, font_size, window, stride).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct Noised {
    text: String,
    eligible: usize,
    noised: usize,
}

#[wasm_bindgen]
impl Noised {
    #[wasm_bindgen(getter)]
    pub fn text(&self) -> String {
        self.text.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn eligible(&self) -> usize {
        self.eligible
    }

    #[wasm_bindgen(getter)]
    pub fn noised(&self) -> usize {
        self.noised
    }
}

pub fn noise_inner(text: &str, kind: &str, p: f64, seed: u64) -> Result<Noised, String> {
    let (kind, table) = match kind {
        "confusable" => (NoiseKind::MapChars, Some(CharTable::latin_to_cyrillic())),
        "l33t" => (NoiseKind::MapChars, Some(CharTable::l33t())),
        other => (other.parse::<NoiseKind>().map_err(|e| e.to_string())?, None),
    };
    let mut spec = NoiseSpec::new(kind, p, seed);
    if let Some(t) = table {
        spec = spec.with_table(t);
    }
    let (text, report) = inject(text, &spec).map_err(|e| e.to_string())?;
    Ok(Noised {
        text,
        eligible: report.tokens_eligible,
        noised: report.tokens_noised,
    })
}

/// Noise kinds: swap, cambridge, confusable, l33t, marks.
#[wasm_bindgen]
pub fn noise(text: &str, kind: &str, p: f64, seed: u64) -> Result<Noised, JsError> {
    noise_inner(text, kind, p, seed).map_err(|e| JsError::new(&e))
}

pub fn segment_inner(corpus: &str, merges: usize, text: &str) -> Result<String, String> {
    let model = bpe_train(corpus.lines(), merges).map_err(|e| e.to_string())?;
    Ok(bpe_apply(text, &model).display())
}

/// Learns `merges` BPE merges from `corpus` and segments `text`, joining
/// subwords with `·`.
#[wasm_bindgen]
pub fn segment(corpus: &str, merges: usize, text: &str) -> Result<String, JsError> {
    segment_inner(corpus, merges, text).map_err(|e| JsError::new(&e))
}
