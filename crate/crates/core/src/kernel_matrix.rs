//! Unfolded kernel matrices for the five feature-extraction schemes and the
//! rank statistics derived from them.
//!
//! Every scheme's linear part (biases excluded) is written as a single
//! matrix acting on the `k x k x k` unfolded input, so its output features
//! are `F = A * I`. Parallel schemes stack one block of `M` rows per
//! branch; sequential schemes collapse their chain into one composite
//! kernel, which is exact because consecutive layers act on disjoint axes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::convkit::{conv_forward, flops_estimate, ConvSpec, KernelSet};
use crate::error::{Error, Result};
use crate::tensor::{rank_from_singular_values, svd_singular_values, volume_dims, FeatureVolume, Matrix, Scalar, Tensor};

/// Feature-extraction scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Full `k x k x k` kernels.
    Conv3D,
    /// Spectral, then vertical, then horizontal 1-D kernels in sequence.
    Seq1D,
    /// Spatial `1 x k x k` kernel followed by a spectral `k x 1 x 1` kernel.
    Seq1D2D,
    /// Spatial 2-D and spectral 1-D branches side by side.
    Parallel1D2D,
    /// Spectral, vertical and horizontal 1-D branches side by side.
    ReConvSet,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Conv3D, Scheme::Seq1D, Scheme::Seq1D2D, Scheme::Parallel1D2D, Scheme::ReConvSet];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Conv3D => "conv3d",
            Scheme::Seq1D => "seq1d",
            Scheme::Seq1D2D => "seq1d2d",
            Scheme::Parallel1D2D => "par1d2d",
            Scheme::ReConvSet => "reconvset",
        }
    }

    /// Whether the layers run side by side (and need a compression layer).
    pub fn is_parallel(self) -> bool {
        matches!(self, Scheme::Parallel1D2D | Scheme::ReConvSet)
    }

    /// Kernel extents of each layer or branch, in application / stacking order.
    pub fn layer_kernels(self, k: usize) -> Vec<[usize; 3]> {
        match self {
            Scheme::Conv3D => vec![[k, k, k]],
            Scheme::Seq1D => vec![[k, 1, 1], [1, k, 1], [1, 1, k]],
            Scheme::Seq1D2D => vec![[1, k, k], [k, 1, 1]],
            Scheme::Parallel1D2D => vec![[1, k, k], [k, 1, 1]],
            Scheme::ReConvSet => vec![[k, 1, 1], [1, k, 1], [1, 1, k]],
        }
    }

    /// Layer specs of the linear part (no bias). Sequential layers after the
    /// first map `M -> M`; parallel branches all map `C -> M`.
    pub fn layer_specs(self, m: usize, c: usize, k: usize) -> Result<Vec<ConvSpec>> {
        self.layer_kernels(k)
            .into_iter()
            .enumerate()
            .map(|(i, kernel)| {
                let c_in = if i > 0 && !self.is_parallel() { m } else { c };
                ConvSpec::same(m, c_in, kernel, false)
            })
            .collect()
    }

    /// Channels produced before any compression layer.
    pub fn stacked_channels(self, m: usize) -> usize {
        if self.is_parallel() {
            m * self.layer_kernels(1).len()
        } else {
            m
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown extractor '{s}' (expected conv3d|seq1d|seq1d2d|par1d2d|reconvset)")))
    }
}

/// Standard-normal kernels for every layer of `scheme`.
pub fn random_scheme_kernels<R: Rng + ?Sized>(scheme: Scheme, m: usize, c: usize, k: usize, rng: &mut R) -> Result<Vec<KernelSet<f64>>> {
    Ok(scheme
        .layer_specs(m, c, k)?
        .iter()
        .map(|spec| {
            let mut ks = KernelSet::zeros(spec);
            for w in ks.weights.data_mut() {
                *w = rng.sample(StandardNormal);
            }
            ks
        })
        .collect())
}

/// Linear pre-compression output of `scheme`: the channel-stacked branch
/// outputs for parallel schemes, the chained output for sequential ones.
pub fn scheme_forward<T: Scalar>(scheme: Scheme, kernels: &[KernelSet<T>], input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    let [c, ..] = volume_dims("scheme_forward", input)?;
    let m = kernels.first().map(|ks| ks.weights.shape()[0]).unwrap_or(0);
    let k = kernels.first().map(|ks| ks.weights.shape()[2..].iter().copied().max().unwrap_or(1)).unwrap_or(1);
    let specs = scheme.layer_specs(m, c, k)?;
    check_kernel_count(scheme, &specs, kernels)?;
    let unbiased = |ks: &KernelSet<T>| KernelSet { weights: ks.weights.clone(), bias: None };
    if scheme.is_parallel() {
        let outs = specs
            .iter()
            .zip(kernels)
            .map(|(spec, ks)| conv_forward(spec, &unbiased(ks), input))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs)
    } else {
        let mut x = input.clone();
        for (spec, ks) in specs.iter().zip(kernels) {
            x = conv_forward(spec, &unbiased(ks), &x)?;
        }
        Ok(x)
    }
}

pub(crate) fn concat_channels<T: Scalar>(parts: &[FeatureVolume<T>]) -> Result<FeatureVolume<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
    let [_, b, h, w] = volume_dims("concat_channels", first)?;
    let mut channels = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        let [c, pb, ph, pw] = volume_dims("concat_channels", p)?;
        if [pb, ph, pw] != [b, h, w] {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        channels += c;
        data.extend_from_slice(p.as_contiguous().data());
    }
    Tensor::new(&[channels, b, h, w], data)
}

fn check_kernel_count<T: Scalar>(scheme: Scheme, specs: &[ConvSpec], kernels: &[KernelSet<T>]) -> Result<()> {
    if specs.len() != kernels.len() {
        return Err(Error::shape(
            "kernel_matrix",
            format!("{scheme} needs {} kernel sets, got {}", specs.len(), kernels.len()),
        ));
    }
    for (spec, ks) in specs.iter().zip(kernels) {
        if ks.weights.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "kernel_matrix",
                format!("{scheme}: kernel {:?}, expected {:?}", ks.weights.shape(), spec.weight_shape()),
            ));
        }
    }
    Ok(())
}

/// Kernel matrix `A` of one scheme, acting on the `k x k x k` unfold.
#[derive(Clone, Debug)]
pub struct UnfoldedKernelMatrix {
    pub matrix: Matrix<f64>,
    pub scheme: Scheme,
    pub m: usize,
    pub c: usize,
    pub k: usize,
}

/// Kernel taps as `(offset from center, [M, C] weights)`.
struct Taps {
    m: usize,
    c: usize,
    entries: Vec<([isize; 3], Vec<f64>)>,
}

impl Taps {
    fn from_kernel(ks: &KernelSet<f64>) -> Self {
        let s = ks.weights.shape();
        let (m, c, ext) = (s[0], s[1], [s[2], s[3], s[4]]);
        let w = ks.weights.contiguous();
        let taps: usize = ext.iter().product();
        let mut entries = Vec::with_capacity(taps);
        for t in 0..taps {
            let idx = [t / (ext[1] * ext[2]), (t / ext[2]) % ext[1], t % ext[2]];
            let off = [0, 1, 2].map(|ax| idx[ax] as isize - (ext[ax] / 2) as isize);
            let mat = (0..m * c).map(|mc| w.data()[mc * taps + t]).collect();
            entries.push((off, mat));
        }
        Taps { m, c, entries }
    }

    /// Cross-correlation composition: applying `self` then `next` equals a
    /// single kernel whose offsets are sums of the two.
    fn then(&self, next: &Taps) -> Taps {
        assert_eq!(next.c, self.m);
        let mut entries: Vec<([isize; 3], Vec<f64>)> = Vec::new();
        for (o1, a) in &self.entries {
            for (o2, b) in &next.entries {
                let off = [o1[0] + o2[0], o1[1] + o2[1], o1[2] + o2[2]];
                let pos = match entries.iter().position(|(o, _)| *o == off) {
                    Some(p) => p,
                    None => {
                        entries.push((off, vec![0.0; next.m * self.c]));
                        entries.len() - 1
                    }
                };
                let acc = &mut entries[pos].1;
                for mo in 0..next.m {
                    for mi in 0..self.m {
                        let bw = b[mo * self.m + mi];
                        if bw == 0.0 {
                            continue;
                        }
                        for ci in 0..self.c {
                            acc[mo * self.c + ci] += bw * a[mi * self.c + ci];
                        }
                    }
                }
            }
        }
        Taps { m: next.m, c: self.c, entries }
    }

    /// Writes rows `row0..row0+m` of a `k^3 * C`-column matrix.
    fn write_rows(&self, k: usize, row0: usize, out: &mut Matrix<f64>) -> Result<()> {
        let r = (k / 2) as isize;
        let k3 = k * k * k;
        for (off, mat) in &self.entries {
            if off.iter().any(|o| o.abs() > r) {
                return Err(Error::shape("build_kernel_matrix", format!("tap offset {off:?} exceeds the {k}^3 frame")));
            }
            let [tb, th, tw] = off.map(|o| (o + r) as usize);
            let frame = (tb * k + th) * k + tw;
            for mi in 0..self.m {
                for ci in 0..self.c {
                    out.set(row0 + mi, ci * k3 + frame, mat[mi * self.c + ci]);
                }
            }
        }
        Ok(())
    }
}

/// Builds the unfolded kernel matrix of `scheme`: `M x k^3 C` for the
/// single-output schemes, `nM x k^3 C` (branch blocks stacked in layer
/// order) for the parallel ones. Biases are ignored.
pub fn build_kernel_matrix(scheme: Scheme, kernels: &[KernelSet<f64>], m: usize, c: usize, k: usize) -> Result<UnfoldedKernelMatrix> {
    if m == 0 || c == 0 || k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("need positive M, C and odd k, got ({m}, {c}, {k})")));
    }
    let specs = scheme.layer_specs(m, c, k)?;
    check_kernel_count(scheme, &specs, kernels)?;
    let cols = k * k * k * c;
    let mut matrix = Matrix::zeros(scheme.stacked_channels(m), cols);
    if scheme.is_parallel() {
        for (i, ks) in kernels.iter().enumerate() {
            Taps::from_kernel(ks).write_rows(k, i * m, &mut matrix)?;
        }
    } else {
        let mut chain = Taps::from_kernel(&kernels[0]);
        for ks in &kernels[1..] {
            chain = chain.then(&Taps::from_kernel(ks));
        }
        chain.write_rows(k, 0, &mut matrix)?;
    }
    Ok(UnfoldedKernelMatrix { matrix, scheme, m, c, k })
}

/// Upper bound on the rank of the scheme's output feature matrix.
pub fn predicted_rank_bound(scheme: Scheme, m: usize, c: usize, k: usize) -> usize {
    let full = k * k * k * c;
    match scheme {
        Scheme::Conv3D | Scheme::Seq1D | Scheme::Seq1D2D => m.min(full),
        Scheme::Parallel1D2D => (2 * m).min(full),
        Scheme::ReConvSet => (3 * m).min((3 * k - 2) * c),
    }
}

#[derive(Clone, Debug)]
pub struct RankReport {
    pub scheme: Scheme,
    pub m: usize,
    pub c: usize,
    pub k: usize,
    pub predicted_upper_bound: usize,
    pub measured_rank: usize,
    pub singular_values: Vec<f64>,
    /// `sum(sigma_i^2) / sigma_max^2`.
    pub stable_rank: f64,
}

pub fn stable_rank(sv: &[f64]) -> f64 {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().map(|s| s * s).sum::<f64>() / (max * max),
        _ => 0.0,
    }
}

pub fn measure_rank(ukm: &UnfoldedKernelMatrix, rel_tol: f64) -> Result<RankReport> {
    let sv = svd_singular_values(&ukm.matrix)?;
    Ok(RankReport {
        scheme: ukm.scheme,
        m: ukm.m,
        c: ukm.c,
        k: ukm.k,
        predicted_upper_bound: predicted_rank_bound(ukm.scheme, ukm.m, ukm.c, ukm.k),
        measured_rank: rank_from_singular_values(&sv, rel_tol),
        stable_rank: stable_rank(&sv),
        singular_values: sv,
    })
}

/// Singular values of the `(channels x voxels)` matricized pre-compression
/// output, divided by the largest one.
pub fn feature_spectrum(scheme: Scheme, kernels: &[KernelSet<f64>], input: &FeatureVolume<f64>) -> Result<Vec<f64>> {
    let f = scheme_forward(scheme, kernels, input)?;
    let channels = f.shape()[0];
    let voxels = f.numel() / channels;
    let mat = Matrix::new(channels, voxels, f.into_data())?;
    let sv = svd_singular_values(&mat)?;
    let max = sv[0];
    if max == 0.0 {
        return Err(Error::EmptySpectrum);
    }
    Ok(sv.into_iter().map(|s| s / max).collect())
}

/// First index whose normalized singular value is below `threshold`
/// (the spectrum length if none is).
pub fn decay_index(spectrum: &[f64], threshold: f64) -> usize {
    spectrum.iter().position(|&s| s < threshold).unwrap_or(spectrum.len())
}

/// Weight count of one extraction block (biases excluded).
pub fn count_params(scheme: Scheme, m: usize, c: usize, k: usize, include_compression: bool) -> u64 {
    let (m, c, k) = (m as u64, c as u64, k as u64);
    match scheme {
        Scheme::Conv3D => m * c * k * k * k,
        Scheme::Seq1D => m * c * k + 2 * m * m * k,
        Scheme::Seq1D2D => m * c * k * k + m * m * k,
        Scheme::Parallel1D2D => m * c * k * k + m * c * k + if include_compression { 2 * m * m } else { 0 },
        Scheme::ReConvSet => 3 * m * c * k + if include_compression { 3 * m * m } else { 0 },
    }
}

/// Bias count of one extraction block. Parallel branches carry no bias of
/// their own: the compression layer is linear, so a branch bias would be
/// absorbed exactly into the compression bias.
pub fn count_biases(scheme: Scheme, m: usize, include_compression: bool) -> u64 {
    let m = m as u64;
    match scheme {
        Scheme::Conv3D => m,
        Scheme::Seq1D => 3 * m,
        Scheme::Seq1D2D => 2 * m,
        Scheme::Parallel1D2D | Scheme::ReConvSet => {
            if include_compression {
                m
            } else {
                0
            }
        }
    }
}

/// FLOPs of one block (including any compression layer) at output extents `dims`.
pub fn block_flops(scheme: Scheme, m: usize, c: usize, k: usize, dims: [usize; 3]) -> Result<u64> {
    let mut total: u64 = scheme.layer_specs(m, c, k)?.iter().map(|s| flops_estimate(s, dims)).sum();
    if scheme.is_parallel() {
        let comp = ConvSpec::same(m, scheme.stacked_channels(m), [1, 1, 1], true)?;
        total += flops_estimate(&comp, dims);
    }
    Ok(total)
}
