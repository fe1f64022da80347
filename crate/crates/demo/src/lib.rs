//! Browser bindings for three small views of the library: gradient
//! projection in the plane, a mixture spectrogram, and chunk coverage.

use wasm_bindgen::prelude::*;

use unisep::data::{make_sample, DatasetSpec, NoiseKind, SAMPLE_RATE};
use unisep::gradmod::{conflicts, dot, modulate_layer};
use unisep::signal::{chunk, overlap_add, spectrogram, Representation};
use unisep::Tensor;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn text(e: unisep::Error) -> String {
    e.to_string()
}

/// Modulated SE gradient for a pair of 2-D (or any equal length) vectors.
/// Returns `[out..., conflict_before, cosine_before, cosine_after]`.
#[wasm_bindgen]
pub fn modulate(se: &[f64], ss: &[f64]) -> Result<Vec<f64>, JsError> {
    modulate_pair(se, ss).map_err(js)
}

pub fn modulate_pair(se: &[f64], ss: &[f64]) -> Result<Vec<f64>, String> {
    if se.len() != ss.len() || se.is_empty() {
        return Err("vectors must be non-empty and of equal length".into());
    }
    let out = modulate_layer(se, ss);
    let cos = |a: &[f64], b: &[f64]| {
        let d = (dot(a, a) * dot(b, b)).sqrt();
        if d > 0.0 {
            dot(a, b) / d
        } else {
            0.0
        }
    };
    let mut r = out.clone();
    r.push(if conflicts(se, ss) { 1.0 } else { 0.0 });
    r.push(cos(se, ss));
    r.push(cos(&out, ss));
    Ok(r)
}

/// Grayscale spectrogram image of a synthetic noisy mixture.
#[wasm_bindgen]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major, row 0 is the highest frequency.
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
}

/// `which`: 0 noisy mixture, 1 clean mixture, 2.. individual sources.
#[wasm_bindgen]
pub fn mixture_spectrogram(seed: u64, snr_db: f64, noise: &str, which: usize, frame: usize, hop: usize) -> Result<Image, JsError> {
    mixture_image(seed, snr_db, noise, which, frame, hop).map_err(js)
}

pub fn mixture_image(seed: u64, snr_db: f64, noise: &str, which: usize, frame: usize, hop: usize) -> Result<Image, String> {
    let spec = DatasetSpec {
        snr_mean_db: snr_db,
        snr_std_db: 0.0,
        noise: noise.parse::<NoiseKind>().map_err(text)?,
        len: SAMPLE_RATE as usize,
        ..DatasetSpec::default()
    };
    let s = make_sample(&spec, seed).map_err(text)?;
    let x = match which {
        0 => &s.x_n,
        1 => &s.x_c,
        k => s.sources.get(k - 2).ok_or("no such source")?,
    };
    let sp = spectrogram(x.data(), frame, hop).map_err(text)?;
    Ok(Image { width: sp.frames, height: sp.bins, pixels: sp.to_gray() })
}

/// Overlap-add of an all-ones map: how many chunks cover each frame.
#[wasm_bindgen]
pub fn chunk_coverage(frames: usize, chunk_len: usize) -> Result<Vec<f64>, JsError> {
    coverage(frames, chunk_len).map_err(js)
}

pub fn coverage(frames: usize, chunk_len: usize) -> Result<Vec<f64>, String> {
    let ones = Tensor::new(vec![1, frames], vec![1.0; frames]).map_err(text)?;
    let h = Representation::new(ones).map_err(text)?;
    let c = chunk(&h, chunk_len).map_err(text)?;
    Ok(overlap_add(&c).map_err(text)?.tensor().data().to_vec())
}
