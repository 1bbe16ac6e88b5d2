//! Quality metrics on `[B, H, W]` cubes: MPSNR, MSSIM and SAM.

use crate::data_io::{cube_dims, Cube};
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn pair_dims(op: &'static str, reference: &Cube, test: &Cube) -> Result<[usize; 3]> {
    let d = cube_dims(op, reference)?;
    if test.shape() != reference.shape() {
        return Err(Error::shape(op, format!("reference {:?} vs test {:?}", reference.shape(), test.shape())));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnrReport {
    pub mpsnr: f64,
    pub per_band: Vec<f64>,
}

/// Per-band PSNR with peak 1.0, capped at `cap` for zero-error bands.
pub fn mpsnr_capped(reference: &Cube, test: &Cube, cap: f64) -> Result<PsnrReport> {
    let [_, h, w] = pair_dims("mpsnr", reference, test)?;
    let (r, t) = (reference.contiguous(), test.contiguous());
    let n = h * w;
    let per_band: Vec<f64> = r
        .data()
        .chunks_exact(n)
        .zip(t.data().chunks_exact(n))
        .map(|(a, b)| {
            let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n as f64;
            if mse == 0.0 {
                cap
            } else {
                (10.0 * (1.0 / mse).log10()).min(cap)
            }
        })
        .collect();
    let mpsnr = per_band.iter().sum::<f64>() / per_band.len() as f64;
    Ok(PsnrReport { mpsnr, per_band })
}

pub fn mpsnr(reference: &Cube, test: &Cube) -> Result<PsnrReport> {
    mpsnr_capped(reference, test, PSNR_CAP)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = g.iter().enumerate().map(|(k, gk)| gk * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(k, gk)| gk * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of one band over all valid window positions.
pub fn ssim_band(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!("SSIM needs spatial dims >= {SSIM_WINDOW}, got {h}x{w}")));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim_band", format!("planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g);
    let syy = filter_valid(&prod(&y, &y), h, w, &g);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy);
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Band-mean SSIM: Gaussian window 11x11 with sigma 1.5, K1 0.01, K2 0.03, range 1.
pub fn mssim(reference: &Cube, test: &Cube) -> Result<f64> {
    let [_, h, w] = pair_dims("mssim", reference, test)?;
    let (r, t) = (reference.contiguous(), test.contiguous());
    let n = h * w;
    let vals = r
        .data()
        .chunks_exact(n)
        .zip(t.data().chunks_exact(n))
        .map(|(a, b)| ssim_band(a, b, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamReport {
    /// Mean spectral angle in radians over the pixels that were scored.
    pub mean: f64,
    /// Pixels skipped because one of the two spectra has zero norm.
    pub skipped: usize,
}

pub fn sam(reference: &Cube, test: &Cube) -> Result<SamReport> {
    let [b, h, w] = pair_dims("sam", reference, test)?;
    let (r, t) = (reference.contiguous(), test.contiguous());
    let n = h * w;
    let (mut total, mut scored, mut skipped) = (0.0, 0usize, 0usize);
    for p in 0..n {
        let (mut nr, mut nt) = (0.0f64, 0.0f64);
        for band in 0..b {
            let (x, y) = (r.data()[band * n + p] as f64, t.data()[band * n + p] as f64);
            nr += x * x;
            nt += y * y;
        }
        if nr == 0.0 || nt == 0.0 {
            skipped += 1;
            continue;
        }
        // Angle between unit vectors as 2 atan2(|u - v|, |u + v|): stable near 0 and pi.
        let (nr, nt) = (nr.sqrt(), nt.sqrt());
        let (mut diff, mut sum) = (0.0f64, 0.0f64);
        for band in 0..b {
            let u = r.data()[band * n + p] as f64 / nr;
            let v = t.data()[band * n + p] as f64 / nt;
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Domain("every pixel has a zero-norm spectrum".into()));
    }
    Ok(SamReport { mean: total / scored as f64, skipped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub mpsnr: f64,
    pub mssim: f64,
    pub sam: f64,
    pub sam_skipped: usize,
    pub per_band_psnr: Vec<f64>,
}

pub fn evaluate(reference: &Cube, test: &Cube) -> Result<QualityReport> {
    let p = mpsnr(reference, test)?;
    let s = sam(reference, test)?;
    Ok(QualityReport { mpsnr: p.mpsnr, mssim: mssim(reference, test)?, sam: s.mean, sam_skipped: s.skipped, per_band_psnr: p.per_band })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_phantom, PhantomSpec};
    use crate::noise::{corrupt, NoiseKind, NoiseSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(dims: [usize; 3], seed: u64) -> Cube {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&dims, |_| r.random::<f32>())
    }

    /// Windowed SSIM computed straight from the definition.
    fn naive_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
        let mut g2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in g2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g2[i][j] / s;
                        let x = a[(r + i) * w + c + j] as f64;
                        let y = b[(r + i) * w + c + j] as f64;
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_cubes_hit_ideal_values() {
        let c = random_cube([3, 16, 14], 0);
        let q = evaluate(&c, &c).unwrap();
        assert_eq!(q.mpsnr, 100.0);
        assert!(q.per_band_psnr.iter().all(|&v| v == 100.0));
        assert!((q.mssim - 1.0).abs() < 1e-12);
        assert_eq!(q.sam, 0.0);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let c = Tensor::<f32>::full(&[4, 12, 12], 0.25);
        let t = c.map(|v| v + 0.1);
        let p = mpsnr(&c, &t).unwrap();
        for v in p.per_band.iter().chain([&p.mpsnr]) {
            assert!((v - 20.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn ssim_matches_naive_windowed_loop() {
        let (h, w) = (19, 23);
        let a = random_cube([1, h, w], 1);
        let b = a.zip_map(&random_cube([1, h, w], 2), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let fast = ssim_band(a.data(), b.data(), h, w).unwrap();
        let slow = naive_ssim(a.data(), b.data(), h, w);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_against_flat_image_is_low() {
        let c = generate_phantom(&PhantomSpec::new(8, 32, 32, 2)).unwrap();
        let n = 32 * 32;
        let flat = Tensor::from_fn(&[8, 32, 32], |i| {
            let band = &c.data()[(i / n) * n..(i / n + 1) * n];
            band.iter().sum::<f32>() / n as f32
        });
        let tex = random_cube([8, 32, 32], 9);
        let v = mssim(&tex, &flat.map(|_| 0.5)).unwrap();
        assert!(v > -1.0 && v < 0.2, "{v}");
        let v2 = mssim(&c, &flat).unwrap();
        assert!(v2 > -1.0 && v2 < 1.0);
    }

    #[test]
    fn small_images_are_config_errors() {
        let c = random_cube([2, 10, 30], 3);
        assert!(matches!(mssim(&c, &c), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = random_cube([2, 12, 12], 3);
        let b = random_cube([2, 12, 11], 3);
        assert!(matches!(mpsnr(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(sam(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(mssim(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn sam_examples() {
        let c = random_cube([5, 6, 7], 4);
        assert!(sam(&c, &c.scale(2.0)).unwrap().mean < 1e-6);
        let r = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 1.0f32 } else { 0.0 });
        let t = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 0.0f32 } else { 1.0 });
        assert!((sam(&r, &t).unwrap().mean - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let mut z = c.clone();
        for b in 0..5 {
            z.set(&[b, 0, 0], 0.0).unwrap();
        }
        assert_eq!(sam(&z, &c).unwrap().skipped, 1);
        assert!(matches!(sam(&Tensor::zeros(&[2, 2, 2]), &c.map(|v| v)), Err(Error::Shape { .. })));
        let zero = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(matches!(sam(&zero, &zero), Err(Error::Domain(_))));
    }

    #[test]
    fn sam_ignores_per_pixel_positive_scaling() {
        let r = random_cube([6, 8, 8], 5);
        let t = random_cube([6, 8, 8], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scales: Vec<f32> = (0..64).map(|_| rng.random_range(0.1..10.0)).collect();
        let ts = Tensor::from_fn(&[6, 8, 8], |i| t.data()[i] * scales[i % 64]);
        assert!((sam(&r, &t).unwrap().mean - sam(&r, &ts).unwrap().mean).abs() < 1e-6);
    }

    #[test]
    fn metrics_ignore_spatial_transpose() {
        let r = random_cube([3, 13, 17], 8);
        let t = random_cube([3, 13, 17], 9);
        let tr = |c: &Cube| c.permute(&[0, 2, 1]).unwrap().contiguous();
        let (a, b) = (evaluate(&r, &t).unwrap(), evaluate(&tr(&r), &tr(&t)).unwrap());
        assert!((a.mpsnr - b.mpsnr).abs() < 1e-12);
        assert!((a.mssim - b.mssim).abs() < 1e-12);
        assert!((a.sam - b.sam).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_sigma_rises() {
        let c = Tensor::<f32>::full(&[4, 128, 128], 0.5);
        let vals: Vec<f64> = [10.0, 30.0, 50.0, 70.0]
            .iter()
            .map(|&s| mpsnr(&c, &corrupt(&c, &NoiseSpec::new(NoiseKind::Gaussian(s), 1)).unwrap()).unwrap().mpsnr)
            .collect();
        assert!(vals.windows(2).all(|w| w[0] > w[1]), "{vals:?}");
    }
}
