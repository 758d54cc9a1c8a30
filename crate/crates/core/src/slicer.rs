//! Sliding-window slicing of a rendered line into overlapping full-height
//! windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{write_pgm, LineImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self { window: 25, stride: 10 }
    }
}

impl SliceConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let cfg = Self { window, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window and stride must be positive, and a window narrower than the
    /// stride would skip columns.
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("window and stride must be >= 1"));
        }
        if self.window < self.stride {
            return Err(Error::invalid(format!(
                "window ({}) must be >= stride ({})",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Number of windows needed to cover `width` columns.
pub fn num_slices(width: usize, cfg: SliceConfig) -> usize {
    if width <= cfg.window {
        1
    } else {
        (width - cfg.window).div_ceil(cfg.stride) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    pub config: SliceConfig,
    pub height: usize,
    pub source_width: usize,
    count: usize,
    /// `count` consecutive row-major `height x window` blocks.
    data: Vec<f32>,
}

impl SliceSequence {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.config.window
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.slice_len().max(1))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn offset(&self, i: usize) -> usize {
        i * self.config.stride
    }

    /// Writes each slice back at its offset. Overlapping columns carry the
    /// same source values, so any writer order reproduces the image.
    pub fn reconstruct(&self) -> LineImage {
        let (h, w) = (self.height, self.config.window);
        let mut img = LineImage::blank(h, self.source_width);
        for (i, slice) in self.iter().enumerate() {
            let start = self.offset(i);
            for r in 0..h {
                for c in 0..w {
                    let col = start + c;
                    if col < self.source_width {
                        img.pixels[r * self.source_width + col] = slice[r * w + c];
                    }
                }
            }
        }
        img
    }

    pub fn slice_to_pgm(&self, i: usize) -> Vec<u8> {
        write_pgm(self.config.window, self.height, self.slice(i))
    }
}

/// Cuts `img` into windows starting at columns 0, s, 2s, ...; columns past
/// the right edge are background.
pub fn slice_image(img: &LineImage, cfg: SliceConfig) -> SliceSequence {
    let (h, w, src_w) = (img.height, cfg.window, img.width);
    let count = num_slices(src_w, cfg);
    let mut data = vec![0.0f32; count * h * w];
    for i in 0..count {
        let start = i * cfg.stride;
        let take = w.min(src_w.saturating_sub(start));
        let block = &mut data[i * h * w..(i + 1) * h * w];
        for r in 0..h {
            let src = &img.pixels[r * src_w + start..r * src_w + start + take];
            block[r * w..r * w + take].copy_from_slice(src);
        }
    }
    SliceSequence {
        config: cfg,
        height: h,
        source_width: src_w,
        count,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates window starts until the image is covered.
    fn brute_force_count(width: usize, cfg: SliceConfig) -> usize {
        let mut starts = vec![0usize];
        while starts.last().unwrap() + cfg.window < width {
            starts.push(starts.last().unwrap() + cfg.stride);
        }
        starts.len()
    }

    fn columns(values: &[f32]) -> LineImage {
        LineImage {
            height: 1,
            width: values.len(),
            pixels: values.to_vec(),
            source_text: String::new(),
        }
    }

    #[test]
    fn counts() {
        let cfg = SliceConfig::new(20, 10).unwrap();
        assert_eq!(brute_force_count(100, cfg), 9);
        assert_eq!(num_slices(100, cfg), 9);
        assert_eq!(num_slices(15, cfg), 1);
        assert_eq!(num_slices(20, cfg), 1);
    }

    #[test]
    fn window_below_stride_rejected() {
        assert!(SliceConfig::new(5, 10).is_err());
        assert!(SliceConfig::new(0, 0).is_err());
        assert!(SliceConfig::new(10, 10).is_ok());
    }

    #[test]
    fn exact_fit() {
        let img = columns(&[0.1, 0.2]);
        let s = slice_image(&img, SliceConfig::new(2, 1).unwrap());
        assert_eq!(s.len(), 1);
        assert_eq!(s.slice(0), &[0.1, 0.2]);
    }

    #[test]
    fn stride_one_overlap() {
        let img = columns(&[0.1, 0.2, 0.3]);
        let s = slice_image(&img, SliceConfig::new(2, 1).unwrap());
        assert_eq!(s.len(), 2);
        assert_eq!(s.slice(0), &[0.1, 0.2]);
        assert_eq!(s.slice(1), &[0.2, 0.3]);
    }

    #[test]
    fn last_window_padded() {
        let img = columns(&[0.1, 0.2, 0.3]);
        let s = slice_image(&img, SliceConfig::new(2, 2).unwrap());
        assert_eq!(s.len(), 2);
        assert_eq!(s.slice(0), &[0.1, 0.2]);
        assert_eq!(s.slice(1), &[0.3, 0.0]);
    }

    #[test]
    fn multi_row_layout() {
        // 2 rows x 3 cols
        let img = LineImage {
            height: 2,
            width: 3,
            pixels: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            source_text: String::new(),
        };
        let s = slice_image(&img, SliceConfig::new(2, 1).unwrap());
        assert_eq!(s.slice(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(s.slice(1), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(s.reconstruct().pixels, img.pixels);
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(width in 1usize..400, stride in 1usize..40, extra in 0usize..40) {
            let cfg = SliceConfig::new(stride + extra, stride).unwrap();
            prop_assert_eq!(num_slices(width, cfg), brute_force_count(width, cfg));
        }

        #[test]
        fn coverage_and_reconstruction(
            values in prop::collection::vec(0.0f32..=1.0, 1..120),
            stride in 1usize..12,
            extra in 0usize..12,
        ) {
            let cfg = SliceConfig::new(stride + extra, stride).unwrap();
            let img = columns(&values);
            let s = slice_image(&img, cfg);
            prop_assert_eq!(s.len(), num_slices(values.len(), cfg));
            for col in 0..values.len() {
                prop_assert!((0..s.len()).any(|i| s.offset(i) <= col && col < s.offset(i) + cfg.window));
            }
            prop_assert_eq!(s.reconstruct().pixels, img.pixels);
        }

        #[test]
        fn overlap_between_inner_slices(
            values in prop::collection::vec(0.0f32..=1.0, 30..120),
            stride in 1usize..10,
            extra in 0usize..10,
        ) {
            let cfg = SliceConfig::new(stride + extra, stride).unwrap();
            let s = slice_image(&columns(&values), cfg);
            for i in 1..s.len() {
                if s.offset(i) + cfg.window <= values.len() {
                    let prev = s.slice(i - 1);
                    let cur = s.slice(i);
                    prop_assert_eq!(&prev[stride..], &cur[..cfg.window - stride]);
                }
            }
        }

        #[test]
        fn length_monotone(width in 1usize..500, s1 in 1usize..30, s2 in 1usize..30, w in 30usize..60) {
            let (lo, hi) = (s1.min(s2), s1.max(s2));
            prop_assert!(num_slices(width, SliceConfig::new(w, hi).unwrap()) <= num_slices(width, SliceConfig::new(w, lo).unwrap()));
            prop_assert!(num_slices(width, SliceConfig::new(w + 5, lo).unwrap()) <= num_slices(width, SliceConfig::new(w, lo).unwrap()));
        }
    }
}
