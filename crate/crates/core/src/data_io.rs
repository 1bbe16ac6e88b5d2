//! The `.hsc` cube format, the synthetic phantom generator and patch sampling.
//!
//! An `.hsc` file is the magic `HSC1`, then `B`, `H`, `W` as little-endian
//! `u32`, then `B*H*W` little-endian `f32` values in band-major order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A hyperspectral cube `[B, H, W]` with values nominally in `[0, 1]`.
pub type Cube = Tensor<f32>;

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";
pub const HSC_HEADER_LEN: usize = 16;

pub fn cube_dims(op: &'static str, cube: &Cube) -> Result<[usize; 3]> {
    match *cube.shape() {
        [b, h, w] => Ok([b, h, w]),
        ref s => Err(Error::shape(op, format!("expected a [B, H, W] cube, got shape {s:?}"))),
    }
}

pub fn encode_hsc(cube: &Cube) -> Result<Vec<u8>> {
    let dims = cube_dims("encode_hsc", cube)?;
    let mut out = Vec::with_capacity(HSC_HEADER_LEN + 4 * cube.numel());
    out.extend_from_slice(HSC_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::shape("encode_hsc", format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in cube.contiguous().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_hsc(bytes: &[u8]) -> Result<Cube> {
    if bytes.len() < HSC_HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated header: expected {HSC_HEADER_LEN} bytes, got {}", bytes.len()),
        });
    }
    if &bytes[..4] != HSC_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad magic {:?}, expected \"HSC1\"", &bytes[..4]) });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Format { offset: 4 + 4 * i as u64, detail: "zero extent in header".into() });
    }
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(HSC_HEADER_LEN))
        .ok_or_else(|| Error::Format { offset: 4, detail: format!("dimensions {dims:?} overflow the addressable size") })?;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            detail: format!("expected {expected} bytes for a {}x{}x{} cube, got {}", dims[0], dims[1], dims[2], bytes.len()),
        });
    }
    let data = bytes[HSC_HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&dims, data)
}

pub fn write_hsc(path: impl AsRef<Path>, cube: &Cube) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_hsc(cube)?).map_err(|e| Error::io(path, e))
}

pub fn read_hsc(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    decode_hsc(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Parameters of a synthetic cube.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub regions: usize,
    pub blobs: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(bands: usize, height: usize, width: usize, seed: u64) -> Self {
        PhantomSpec { bands, height, width, regions: 6, blobs: 8, seed }
    }
}

/// A smooth spectral signature in `[0.05, 0.95]`: a linear trend plus a
/// few broad Gaussian bumps over the band index.
fn signature(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let b = bands.max(2) as f64 - 1.0;
    let slope = rng.random_range(-1.0..1.0);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..=b), rng.random_range(0.25..0.6) * b.max(1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|i| {
            let x = i as f64;
            slope * x / b.max(1.0) + bumps.iter().map(|&(c, w, a)| a * (-(x - c).powi(2) / (2.0 * w * w)).exp()).sum::<f64>()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, z) = {
        let a = rng.random_range(0.05..0.45);
        (a, rng.random_range(a + 0.1..0.95))
    };
    raw.iter().map(|v| if hi > lo { a + (z - a) * (v - lo) / (hi - lo) } else { 0.5 * (a + z) }).collect()
}

/// Generates a cube whose pixels are convex mixtures of smooth signatures:
/// piecewise-constant Voronoi regions, a linear ramp between two materials
/// and Gaussian blobs, modulated by a mild spatial texture.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Cube> {
    let PhantomSpec { bands, height, width, .. } = *spec;
    if bands < 8 || height < 8 || width < 8 {
        return Err(Error::Config(format!("phantom dims must all be >= 8, got {bands}x{height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regions = spec.regions.max(1);
    let (hf, wf) = (height as f64, width as f64);
    let region_sigs: Vec<Vec<f64>> = (0..regions).map(|_| signature(&mut rng, bands)).collect();
    let seeds: Vec<(f64, f64)> = (0..regions).map(|_| (rng.random_range(0.0..hf), rng.random_range(0.0..wf))).collect();
    let ramp = [signature(&mut rng, bands), signature(&mut rng, bands)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let blobs: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..spec.blobs)
        .map(|_| {
            let cy = rng.random_range(0.0..hf);
            let cx = rng.random_range(0.0..wf);
            let r = rng.random_range(0.04..0.15) * hf.min(wf);
            let peak = rng.random_range(0.5..0.95);
            (cy, cx, r, peak, signature(&mut rng, bands))
        })
        .collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let region_weight = rng.random_range(0.4..0.8);

    let plane = height * width;
    let mut data = vec![0f32; bands * plane];
    let mut spectrum = vec![0f64; bands];
    for h in 0..height {
        for w in 0..width {
            let (y, x) = (h as f64, w as f64);
            let r = (0..regions)
                .min_by(|&i, &j| {
                    let d = |(sy, sx): (f64, f64)| (sy - y).powi(2) + (sx - x).powi(2);
                    d(seeds[i]).total_cmp(&d(seeds[j]))
                })
                .unwrap();
            let proj = (dy * y / hf + dx * x / wf + 1.0) / 2.0;
            let t = proj.clamp(0.0, 1.0);
            for (b, s) in spectrum.iter_mut().enumerate() {
                let ramp_v = (1.0 - t) * ramp[0][b] + t * ramp[1][b];
                *s = region_weight * region_sigs[r][b] + (1.0 - region_weight) * ramp_v;
            }
            for (cy, cx, rad, peak, sig) in &blobs {
                let a = peak * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * rad * rad)).exp();
                for (s, v) in spectrum.iter_mut().zip(sig) {
                    *s = (1.0 - a) * *s + a * v;
                }
            }
            let tex = waves.iter().map(|&(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum::<f64>() / waves.len() as f64;
            let gain = 0.9 + 0.1 * tex;
            for (b, s) in spectrum.iter().enumerate() {
                data[b * plane + h * width + w] = (s * gain).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[bands, height, width], data)
}

/// Copies the spatial window `[h0, h0+ph) x [w0, w0+pw)` across all bands.
pub fn crop(cube: &Cube, h0: usize, w0: usize, ph: usize, pw: usize) -> Result<Cube> {
    let [b, h, w] = cube_dims("crop", cube)?;
    if h0 + ph > h || w0 + pw > w || ph == 0 || pw == 0 {
        return Err(Error::shape("crop", format!("window {ph}x{pw} at ({h0}, {w0}) does not fit a {h}x{w} cube")));
    }
    let src = cube.contiguous();
    let mut out = Vec::with_capacity(b * ph * pw);
    for band in 0..b {
        for r in h0..h0 + ph {
            let start = (band * h + r) * w + w0;
            out.extend_from_slice(&src.data()[start..start + pw]);
        }
    }
    Tensor::new(&[b, ph, pw], out)
}

/// Uniformly random spatial origins for `count` patches of `ph x pw`.
pub fn patch_origins(dims: [usize; 3], ph: usize, pw: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let [_, h, w] = dims;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::shape("sample_patches", format!("patch {ph}x{pw} does not fit a {h}x{w} cube")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw))).collect())
}

/// Samples `count` patches of extent `patch = (B, ph, pw)`; `B` must equal
/// the cube's band count since the spectral axis is never cropped.
pub fn sample_patches(cube: &Cube, patch: [usize; 3], count: usize, seed: u64) -> Result<Vec<Cube>> {
    let dims = cube_dims("sample_patches", cube)?;
    if patch[0] != dims[0] {
        return Err(Error::shape("sample_patches", format!("patch keeps all {} bands, got patch depth {}", dims[0], patch[0])));
    }
    patch_origins(dims, patch[1], patch[2], count, seed)?
        .into_iter()
        .map(|(h0, w0)| crop(cube, h0, w0, patch[1], patch[2]))
        .collect()
}

/// Pearson correlation between consecutive bands, one value per band pair.
pub fn adjacent_band_correlation(cube: &Cube) -> Result<Vec<f64>> {
    let [b, h, w] = cube_dims("adjacent_band_correlation", cube)?;
    let c = cube.contiguous();
    let n = h * w;
    let band = |i: usize| &c.data()[i * n..(i + 1) * n];
    Ok((0..b.saturating_sub(1))
        .map(|i| {
            let (x, y) = (band(i), band(i + 1));
            let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let my = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (&a, &b) in x.iter().zip(y) {
                let (da, db) = (a as f64 - mx, b as f64 - my);
                sxy += da * db;
                sxx += da * da;
                syy += db * db;
            }
            sxy / (sxx * syy).sqrt()
        })
        .collect())
}
