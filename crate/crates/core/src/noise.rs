//! Synthetic corruption of clean cubes.
//!
//! Sigmas are given on the 0-255 scale and applied as `sigma / 255` to
//! cubes normalised to `[0, 1]`. Outputs are never clipped.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data_io::{cube_dims, Cube};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// i.i.d. Gaussian with a fixed sigma.
    Gaussian(f64),
    /// i.i.d. Gaussian whose sigma is drawn uniformly per cube.
    BlindGaussian(f64, f64),
    /// Non-i.i.d. Gaussian: one sigma per band.
    Case1,
    /// Case 1 plus column stripes.
    Case2,
    /// Case 1 plus dead columns.
    Case3,
    /// Case 1 plus salt-and-pepper impulses.
    Case4,
    /// Per band, one of the Case 1 to Case 4 corruptions.
    Case5,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian(s) => write!(f, "gaussian:{s}"),
            NoiseKind::BlindGaussian(a, b) => write!(f, "blind:{a}:{b}"),
            NoiseKind::Case1 => f.write_str("c1"),
            NoiseKind::Case2 => f.write_str("c2"),
            NoiseKind::Case3 => f.write_str("c3"),
            NoiseKind::Case4 => f.write_str("c4"),
            NoiseKind::Case5 => f.write_str("c5"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    /// Accepts `g30`, `g50`, `g70`, `gN`, `blind`, `c1`..`c5`, and the
    /// `Display` forms `gaussian:S` and `blind:A:B`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown noise case '{s}' (expected g30|g50|g70|blind|c1..c5)"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match s {
            "blind" => Ok(NoiseKind::BlindGaussian(30.0, 70.0)),
            "c1" => Ok(NoiseKind::Case1),
            "c2" => Ok(NoiseKind::Case2),
            "c3" => Ok(NoiseKind::Case3),
            "c4" => Ok(NoiseKind::Case4),
            "c5" => Ok(NoiseKind::Case5),
            _ => {
                if let Some(v) = s.strip_prefix("gaussian:").or_else(|| s.strip_prefix('g')) {
                    Ok(NoiseKind::Gaussian(num(v)?))
                } else if let Some((a, b)) = s.strip_prefix("blind:").and_then(|r| r.split_once(':')) {
                    Ok(NoiseKind::BlindGaussian(num(a)?, num(b)?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Parameters of the complex cases. All ranges are inclusive-exclusive
/// uniform draws.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseParams {
    /// Per-band sigma range, 0-255 scale.
    pub band_sigma: (f64, f64),
    /// Fraction of bands receiving the structured corruption.
    pub band_fraction: f64,
    /// Fraction of columns hit by stripes or deadlines in an affected band.
    pub column_fraction: (f64, f64),
    /// Additive stripe offset range.
    pub stripe_offset: (f64, f64),
    /// Fraction of voxels hit by impulses in an affected band.
    pub impulse_ratio: (f64, f64),
}

impl Default for CaseParams {
    fn default() -> Self {
        CaseParams {
            band_sigma: (10.0, 70.0),
            band_fraction: 1.0 / 3.0,
            column_fraction: (0.05, 0.15),
            stripe_offset: (-0.25, 0.25),
            impulse_ratio: (0.1, 0.7),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
    pub params: CaseParams,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec { kind, seed, params: CaseParams::default() }
    }

    /// `key=value` lines recording the full spec.
    pub fn describe(&self) -> String {
        let p = &self.params;
        format!(
            "noise={}\nnoise_seed={}\nband_sigma={}:{}\nband_fraction={}\ncolumn_fraction={}:{}\nstripe_offset={}:{}\nimpulse_ratio={}:{}\n",
            self.kind,
            self.seed,
            p.band_sigma.0,
            p.band_sigma.1,
            p.band_fraction,
            p.column_fraction.0,
            p.column_fraction.1,
            p.stripe_offset.0,
            p.stripe_offset.1,
            p.impulse_ratio.0,
            p.impulse_ratio.1
        )
    }

    fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        let sig_ok = match self.kind {
            NoiseKind::Gaussian(s) => s.is_finite() && s >= 0.0,
            NoiseKind::BlindGaussian(a, b) => range_ok((a, b)) && a >= 0.0,
            _ => true,
        };
        let p = &self.params;
        if !sig_ok
            || !range_ok(p.band_sigma)
            || p.band_sigma.0 < 0.0
            || !(0.0..=1.0).contains(&p.band_fraction)
            || !range_ok(p.column_fraction)
            || !range_ok(p.stripe_offset)
            || !range_ok(p.impulse_ratio)
        {
            return Err(Error::Config(format!("invalid noise parameters: {self:?}")));
        }
        Ok(())
    }
}

/// The RNG stream for cube `cube_id` under `seed`.
pub fn cube_rng(seed: u64, cube_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cube_id);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a < b {
        rng.random_range(a..b)
    } else {
        a
    }
}

fn add_gaussian(band: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    let s = sigma / 255.0;
    if s == 0.0 {
        return;
    }
    for v in band {
        let z: f64 = rng.sample(StandardNormal);
        *v += (s * z) as f32;
    }
}

fn pick_columns(rng: &mut ChaCha8Rng, width: usize, frac: (f64, f64)) -> Vec<usize> {
    let n = ((uniform(rng, frac) * width as f64).round() as usize).clamp(1, width);
    let mut cols = sample(rng, width, n).into_vec();
    cols.sort_unstable();
    cols
}

#[derive(Clone, Copy)]
enum Extra {
    Stripe,
    Deadline,
    Impulse,
}

fn apply_extra(extra: Extra, band: &mut [f32], width: usize, p: &CaseParams, rng: &mut ChaCha8Rng) {
    match extra {
        Extra::Stripe => {
            for c in pick_columns(rng, width, p.column_fraction) {
                let off = uniform(rng, p.stripe_offset) as f32;
                band.iter_mut().skip(c).step_by(width).for_each(|v| *v += off);
            }
        }
        Extra::Deadline => {
            for c in pick_columns(rng, width, p.column_fraction) {
                band.iter_mut().skip(c).step_by(width).for_each(|v| *v = 0.0);
            }
        }
        Extra::Impulse => {
            let ratio = uniform(rng, p.impulse_ratio);
            let n = ((ratio * band.len() as f64).round() as usize).min(band.len());
            for i in sample(rng, band.len(), n).into_vec() {
                band[i] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Corrupts `clean` with the stream of cube 0.
pub fn corrupt(clean: &Cube, spec: &NoiseSpec) -> Result<Cube> {
    corrupt_keyed(clean, spec, 0)
}

/// Corrupts `clean` with the RNG stream keyed by `(spec.seed, cube_id)`.
pub fn corrupt_keyed(clean: &Cube, spec: &NoiseSpec, cube_id: u64) -> Result<Cube> {
    let [bands, h, w] = cube_dims("corrupt", clean)?;
    spec.validate()?;
    if let Some(v) = clean.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("clean cube values must lie in [0, 1], found {v}")));
    }
    let mut rng = cube_rng(spec.seed, cube_id);
    let mut out = clean.contiguous();
    let plane = h * w;
    let p = &spec.params;
    match spec.kind {
        NoiseKind::Gaussian(s) => add_gaussian(out.data_mut(), s, &mut rng),
        NoiseKind::BlindGaussian(a, b) => {
            let s = uniform(&mut rng, (a, b));
            add_gaussian(out.data_mut(), s, &mut rng);
        }
        kind => {
            let sigmas: Vec<f64> = (0..bands).map(|_| uniform(&mut rng, p.band_sigma)).collect();
            for (band, &s) in out.data_mut().chunks_exact_mut(plane).zip(&sigmas) {
                add_gaussian(band, s, &mut rng);
            }
            let extras: Vec<Option<Extra>> = match kind {
                NoiseKind::Case5 => {
                    const CHOICES: [Option<Extra>; 4] = [None, Some(Extra::Stripe), Some(Extra::Deadline), Some(Extra::Impulse)];
                    (0..bands).map(|_| CHOICES[rng.random_range(0..4)]).collect()
                }
                NoiseKind::Case1 => vec![None; bands],
                _ => {
                    let e = match kind {
                        NoiseKind::Case2 => Extra::Stripe,
                        NoiseKind::Case3 => Extra::Deadline,
                        _ => Extra::Impulse,
                    };
                    let n = ((p.band_fraction * bands as f64).round() as usize).clamp(usize::from(p.band_fraction > 0.0), bands);
                    let mut v = vec![None; bands];
                    for b in sample(&mut rng, bands, n).into_vec() {
                        v[b] = Some(e);
                    }
                    v
                }
            };
            for (band, extra) in out.data_mut().chunks_exact_mut(plane).zip(extras) {
                if let Some(e) = extra {
                    apply_extra(e, band, w, p, &mut rng);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_phantom, PhantomSpec};
    use crate::tensor::Tensor;

    fn phantom() -> Cube {
        generate_phantom(&PhantomSpec::new(10, 24, 20, 4)).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let c = phantom();
        assert_eq!(corrupt(&c, &NoiseSpec::new(NoiseKind::Gaussian(0.0), 1)).unwrap(), c);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let c = phantom();
        for kind in ["g50", "blind", "c1", "c2", "c3", "c4", "c5"] {
            let spec = NoiseSpec::new(kind.parse().unwrap(), 7);
            let a = corrupt(&c, &spec).unwrap();
            assert_eq!(a, corrupt(&c, &spec).unwrap(), "{kind}");
            assert_ne!(a, corrupt_keyed(&c, &spec, 1).unwrap(), "{kind}");
            assert_ne!(a, c);
        }
    }

    #[test]
    fn gaussian_noise_is_zero_mean_with_right_spread() {
        let c = Tensor::<f32>::full(&[4, 250, 250], 0.5);
        let sigma = 30.0;
        let n = c.numel() as f64;
        let noisy = corrupt(&c, &NoiseSpec::new(NoiseKind::Gaussian(sigma), 3)).unwrap();
        let d: Vec<f64> = noisy.data().iter().map(|&v| v as f64 - 0.5).collect();
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let s = sigma / 255.0;
        assert!(mean.abs() < 3.0 * s / n.sqrt(), "mean {mean}");
        assert!((sd - s).abs() < 0.01 * s, "sd {sd}");
    }

    #[test]
    fn output_is_not_clipped() {
        let c = Tensor::<f32>::full(&[2, 30, 30], 1.0);
        let noisy = corrupt(&c, &NoiseSpec::new(NoiseKind::Gaussian(70.0), 0)).unwrap();
        assert!(noisy.data().iter().any(|&v| v > 1.0));
    }

    #[test]
    fn deadline_columns_are_exactly_zero() {
        let c = Tensor::<f32>::full(&[9, 16, 40], 0.6);
        let noisy = corrupt(&c, &NoiseSpec::new(NoiseKind::Case3, 11)).unwrap();
        let mut dead_bands = 0;
        for b in 0..9 {
            let dead: Vec<usize> = (0..40).filter(|&x| (0..16).all(|y| noisy.get(&[b, y, x]) == Some(0.0))).collect();
            if !dead.is_empty() {
                dead_bands += 1;
                assert!((2..=6).contains(&dead.len()), "band {b}: {} dead columns", dead.len());
            }
        }
        assert_eq!(dead_bands, 3);
    }

    #[test]
    fn impulses_are_exactly_zero_or_one() {
        let c = Tensor::<f32>::full(&[6, 20, 20], 0.4);
        let spec = NoiseSpec { params: CaseParams { band_sigma: (0.0, 0.0), ..CaseParams::default() }, ..NoiseSpec::new(NoiseKind::Case4, 2) };
        let noisy = corrupt(&c, &spec).unwrap();
        let hit = noisy.data().iter().filter(|&&v| v != 0.4).count();
        assert!(hit > 0);
        assert!(noisy.data().iter().all(|&v| v == 0.4 || v == 0.0 || v == 1.0));
        let bands_hit = noisy.data().chunks(400).filter(|b| b.iter().any(|&v| v != 0.4)).count();
        assert_eq!(bands_hit, 2);
    }

    #[test]
    fn stripes_shift_whole_columns() {
        let c = Tensor::<f32>::full(&[3, 10, 30], 0.5);
        let spec = NoiseSpec { params: CaseParams { band_sigma: (0.0, 0.0), ..CaseParams::default() }, ..NoiseSpec::new(NoiseKind::Case2, 5) };
        let noisy = corrupt(&c, &spec).unwrap();
        for b in 0..3 {
            for x in 0..30 {
                let col: Vec<f32> = (0..10).map(|y| noisy.get(&[b, y, x]).unwrap()).collect();
                assert!(col.iter().all(|&v| v == col[0]));
                assert!((col[0] - 0.5).abs() <= 0.25 + 1e-6);
            }
        }
        assert!(noisy.data().iter().any(|&v| v != 0.5));
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let c = Tensor::<f32>::full(&[1, 2, 2], 1.5);
        assert!(matches!(corrupt(&c, &NoiseSpec::new(NoiseKind::Case1, 0)), Err(Error::Domain(_))));
        let ok = Tensor::<f32>::full(&[1, 2, 2], 0.5);
        assert!(matches!(corrupt(&ok, &NoiseSpec::new(NoiseKind::Gaussian(-1.0), 0)), Err(Error::Config(_))));
    }

    #[test]
    fn case_names_parse() {
        assert_eq!("g30".parse::<NoiseKind>().unwrap(), NoiseKind::Gaussian(30.0));
        assert_eq!("blind".parse::<NoiseKind>().unwrap(), NoiseKind::BlindGaussian(30.0, 70.0));
        for k in ["g50", "blind", "c1", "c2", "c3", "c4", "c5"] {
            let kind: NoiseKind = k.parse().unwrap();
            assert_eq!(kind.to_string().parse::<NoiseKind>().unwrap(), kind);
        }
        assert!("c6".parse::<NoiseKind>().is_err());
        assert!("gx".parse::<NoiseKind>().is_err());
    }
}
