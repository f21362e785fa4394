//! Browser demo: generate a synthetic EM plane, view it under the symmetries
//! of the square, and threshold a crude membrane map into scored segments.

use icnn_core::imaging::{d8_apply, synth_plane, GrayImage, LabelMap, ProbMap, SynthConfig};
use icnn_core::metrics::{pixel_error, rand_error_fg, threshold_segment};
use icnn_core::seed;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    image: GrayImage,
    labels: LabelMap,
}

fn gray_rgba(plane: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(plane.data().len() * 4);
    for &v in plane.data() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

// Cheap hash so neighbouring ids get visibly different colours.
fn label_rgba(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.data().len() * 4);
    for &l in labels.data() {
        if l == 0 {
            out.extend_from_slice(&[0, 0, 0, 255]);
        } else {
            let h = (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            out.extend_from_slice(&[64 | (h >> 56) as u8, 64 | (h >> 48) as u8, 64 | (h >> 40) as u8, 255]);
        }
    }
    out
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed_value: u32, side: u32, cells: u32, noise: f64) -> Result<Demo, String> {
        let cfg = SynthConfig {
            height: side as usize,
            width: side as usize,
            cell_count: cells as usize,
            noise_sigma: noise,
            ..SynthConfig::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let mut rng = seed::rng_for(seed_value as u64, "web-demo");
        let plane = synth_plane(&cfg, &mut rng).map_err(|e| e.to_string())?;
        Ok(Demo { image: plane.image, labels: plane.labels })
    }

    pub fn width(&self) -> u32 {
        self.image.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.image.height() as u32
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.image)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        label_rgba(&self.labels)
    }

    /// Applies dihedral element `k` (0..8) to both image and labels.
    pub fn transform(&mut self, k: u32) -> Result<(), String> {
        self.image = d8_apply(&self.image, k as usize).map_err(|e| e.to_string())?;
        self.labels = d8_apply(&self.labels, k as usize).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Membranes are dark, so the crude map is just the inverted image.
    fn crude_map(&self) -> ProbMap {
        self.image.map(|&v| 1.0 - v)
    }

    pub fn segment_rgba(&self, threshold: f64) -> Vec<u8> {
        label_rgba(&threshold_segment(&self.crude_map(), threshold))
    }

    /// Returns `[rand_error, pixel_error, segment_count]` at `threshold`.
    pub fn score(&self, threshold: f64) -> Result<Vec<f64>, String> {
        let map = self.crude_map();
        let seg = threshold_segment(&map, threshold);
        let rand = rand_error_fg(&seg, &self.labels).map_err(|e| e.to_string())?;
        let (pix, _) = pixel_error(&map, &self.labels, &[threshold]).map_err(|e| e.to_string())?;
        let segments = seg.data().iter().copied().max().unwrap_or(0);
        Ok(vec![rand, pix, segments as f64])
    }
}
