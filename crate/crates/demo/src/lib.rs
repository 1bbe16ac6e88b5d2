//! WebAssembly bindings for the static page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic is
//! testable natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reconvset::data_io::{generate_phantom, PhantomSpec};
use reconvset::kernel_matrix::{build_kernel_matrix, measure_rank, random_scheme_kernels, Scheme, UnfoldedKernelMatrix};
use reconvset::metrics::mpsnr;
use reconvset::noise::{corrupt, NoiseKind, NoiseSpec};
use reconvset::tensor::DEFAULT_RANK_TOL;
use wasm_bindgen::prelude::*;

/// Largest M or C the page may request; keeps the SVD interactive.
pub const MAX_CHANNELS: usize = 32;

fn kernel_matrix(scheme: &str, m: usize, c: usize, k: usize, seed: u64) -> reconvset::error::Result<UnfoldedKernelMatrix> {
    let scheme: Scheme = scheme.parse()?;
    if m == 0 || c == 0 || m > MAX_CHANNELS || c > MAX_CHANNELS || !(1..=5).contains(&k) || k.is_multiple_of(2) {
        return Err(reconvset::error::Error::Config(format!("need 1 <= M, C <= {MAX_CHANNELS} and k in {{1, 3, 5}}")));
    }
    let kernels = random_scheme_kernels(scheme, m, c, k, &mut ChaCha8Rng::seed_from_u64(seed))?;
    build_kernel_matrix(scheme, &kernels, m, c, k)
}

fn js(e: reconvset::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Spectrum {
    predicted: usize,
    measured: usize,
    stable_rank: f64,
    normalized: Vec<f64>,
}

#[wasm_bindgen]
impl Spectrum {
    #[wasm_bindgen(getter)]
    pub fn predicted(&self) -> usize {
        self.predicted
    }
    #[wasm_bindgen(getter)]
    pub fn measured(&self) -> usize {
        self.measured
    }
    #[wasm_bindgen(getter, js_name = stableRank)]
    pub fn stable_rank(&self) -> f64 {
        self.stable_rank
    }
    /// Singular values divided by the largest, descending.
    #[wasm_bindgen(getter)]
    pub fn normalized(&self) -> Vec<f64> {
        self.normalized.clone()
    }
}

pub fn spectrum(scheme: &str, m: usize, c: usize, k: usize, seed: u64) -> reconvset::error::Result<Spectrum> {
    let report = measure_rank(&kernel_matrix(scheme, m, c, k, seed)?, DEFAULT_RANK_TOL)?;
    let max = report.singular_values.first().copied().filter(|&s| s > 0.0).unwrap_or(1.0);
    Ok(Spectrum {
        predicted: report.predicted_upper_bound,
        measured: report.measured_rank,
        stable_rank: report.stable_rank,
        normalized: report.singular_values.iter().map(|s| s / max).collect(),
    })
}

#[wasm_bindgen(js_name = kernelSpectrum)]
pub fn kernel_spectrum(scheme: &str, m: usize, c: usize, k: usize, seed: u64) -> Result<Spectrum, JsError> {
    spectrum(scheme, m, c, k, seed).map_err(js)
}

#[wasm_bindgen]
pub struct Pattern {
    rows: usize,
    cols: usize,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl Pattern {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }
    /// Row-major, 1 where the kernel matrix entry is nonzero.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

pub fn pattern(scheme: &str, m: usize, c: usize, k: usize, seed: u64) -> reconvset::error::Result<Pattern> {
    let a = kernel_matrix(scheme, m, c, k, seed)?.matrix;
    Ok(Pattern { rows: a.rows(), cols: a.cols(), mask: a.data().iter().map(|&v| u8::from(v != 0.0)).collect() })
}

#[wasm_bindgen(js_name = sparsityPattern)]
pub fn sparsity_pattern(scheme: &str, m: usize, c: usize, k: usize, seed: u64) -> Result<Pattern, JsError> {
    pattern(scheme, m, c, k, seed).map_err(js)
}

#[wasm_bindgen]
pub struct Preview {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    band_psnr: f64,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    /// Clean band on the left, noisy band on the right, grayscale RGBA.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
    #[wasm_bindgen(getter, js_name = bandPsnr)]
    pub fn band_psnr(&self) -> f64 {
        self.band_psnr
    }
}

pub fn preview(case: &str, seed: u64, band: usize, size: usize) -> reconvset::error::Result<Preview> {
    const BANDS: usize = 31;
    let kind: NoiseKind = case.parse()?;
    if !(8..=256).contains(&size) || band >= BANDS {
        return Err(reconvset::error::Error::Config(format!("need 8 <= size <= 256 and band < {BANDS}")));
    }
    let clean = generate_phantom(&PhantomSpec::new(BANDS, size, size, seed))?;
    let noisy = corrupt(&clean, &NoiseSpec::new(kind, seed))?;
    let band_psnr = mpsnr(&clean, &noisy)?.per_band[band];
    let plane = size * size;
    let (c, n) = (&clean.data()[band * plane..][..plane], &noisy.data()[band * plane..][..plane]);
    let width = 2 * size;
    let mut rgba = Vec::with_capacity(width * size * 4);
    for y in 0..size {
        for v in c[y * size..][..size].iter().chain(&n[y * size..][..size]) {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            rgba.extend_from_slice(&[g, g, g, 255]);
        }
    }
    Ok(Preview { width, height: size, rgba, band_psnr })
}

#[wasm_bindgen(js_name = noisyBandPreview)]
pub fn noisy_band_preview(case: &str, seed: u64, band: usize, size: usize) -> Result<Preview, JsError> {
    preview(case, seed, band, size).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_reports_rank_bound() {
        let s = spectrum("reconvset", 4, 4, 3, 1).unwrap();
        assert_eq!((s.predicted, s.measured), (12, 12));
        assert_eq!(s.normalized[0], 1.0);
        assert!(s.normalized.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn reconvset_pattern_touches_only_the_axis_cross() {
        let p = pattern("reconvset", 2, 3, 3, 0).unwrap();
        assert_eq!(p.mask.len(), p.rows * p.cols);
        let used_cols = (0..p.cols).filter(|&j| (0..p.rows).any(|i| p.mask[i * p.cols + j] == 1)).count();
        assert_eq!(used_cols, (3 * 3 - 2) * 3);
    }

    #[test]
    fn preview_is_side_by_side_rgba() {
        let p = preview("g50", 2, 5, 16).unwrap();
        assert_eq!((p.width, p.height, p.rgba.len()), (32, 16, 32 * 16 * 4));
        assert!((p.band_psnr - 14.15).abs() < 2.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(spectrum("conv9d", 4, 4, 3, 0).is_err());
        assert!(spectrum("conv3d", 64, 4, 3, 0).is_err());
        assert!(preview("g50", 0, 40, 16).is_err());
    }
}
