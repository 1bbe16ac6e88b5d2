//! 3-D convolution over `[C, B, H, W]` volumes with stride 1.
//!
//! Three forward routes compute the same map:
//! - [`conv_forward`]: per-tap shifted GEMM, used for training,
//! - [`conv_forward_unfold`]: explicit unfold followed by one matmul,
//! - [`conv_forward_direct`]: plain nested loops.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv_output_len, gemm, gemm_ld, matmul, unfold_input, volume_dims, FeatureVolume, MatRef, Matrix, Scalar, Tensor};

/// Shape of one convolution layer. Kernel axes are `(spectral, vertical, horizontal)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

impl ConvSpec {
    /// Spec with zero "same" padding so output extents equal input extents.
    pub fn same(out_channels: usize, in_channels: usize, kernel: [usize; 3], bias: bool) -> Result<Self> {
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("same padding needs odd kernel extents, got {kernel:?}")));
        }
        let spec = ConvSpec {
            out_channels,
            in_channels,
            kernel,
            padding: kernel.map(|k| k / 2),
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the kernel is one of the axis-aligned shapes
    /// `(k,k,k) (1,k,k) (k,1,1) (1,k,1) (1,1,k) (1,1,1)`.
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let k = self.kernel.iter().copied().max().unwrap_or(0);
        if k == 0 || self.kernel.iter().any(|&e| e != 1 && e != k) {
            return Err(Error::Config(format!("kernel {:?} mixes extents", self.kernel)));
        }
        let pattern = self.kernel.map(|e| e == k && k > 1);
        let allowed = matches!(
            pattern,
            [true, true, true] | [false, true, true] | [true, false, false] | [false, true, false] | [false, false, true] | [false, false, false]
        );
        if !allowed {
            return Err(Error::Config(format!("kernel {:?} is not an axis-aligned shape", self.kernel)));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kb, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kb, kh, kw]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.taps()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = conv_output_len(input[ax], self.kernel[ax], self.padding[ax])
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::shape(
                        "conv",
                        format!("kernel {:?} larger than padded input {input:?}", self.kernel),
                    )
                })?;
        }
        Ok(out)
    }

    fn check_input<T: Scalar>(&self, input: &FeatureVolume<T>) -> Result<[usize; 3]> {
        let [c, b, h, w] = volume_dims("conv", input)?;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv",
                format!("input has {c} channels, spec expects {}", self.in_channels),
            ));
        }
        self.output_dims([b, h, w])?;
        Ok([b, h, w])
    }
}

/// Weights `[M, C, kb, kh, kw]` plus an optional length-`M` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> KernelSet<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        KernelSet {
            weights: Tensor::zeros(&spec.weight_shape()),
            bias: spec.bias.then(|| vec![T::zero(); spec.out_channels]),
        }
    }

    /// Uniform `[-bound, bound]` weights with `bound = gain * sqrt(3 / fan_in)`;
    /// biases start at zero.
    pub fn kaiming_uniform<R: Rng + ?Sized>(spec: &ConvSpec, gain: f64, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.taps()) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let mut ks = KernelSet::zeros(spec);
        for w in ks.weights.data_mut() {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
        ks
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weights.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "KernelSet",
                format!("weights {:?}, spec wants {:?}", self.weights.shape(), spec.weight_shape()),
            ));
        }
        match (&self.bias, spec.bias) {
            (Some(b), true) if b.len() == spec.out_channels => {}
            (None, false) => {}
            _ => return Err(Error::shape("KernelSet", "bias presence/length disagrees with spec")),
        }
        if !self.weights.all_finite() || self.bias.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("kernel set has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Kernel matrix `M x (C*kb*kh*kw)` with columns in the same `(c, kb, kh, kw)`
/// order as [`unfold_input`].
pub fn flatten_kernels<T: Scalar>(spec: &ConvSpec, kernels: &KernelSet<T>) -> Result<Matrix<T>> {
    kernels.check(spec)?;
    let w = kernels.weights.contiguous();
    Matrix::new(spec.out_channels, spec.in_channels * spec.taps(), w.into_data())
}

fn tap_offsets(spec: &ConvSpec) -> Vec<[isize; 3]> {
    let [kb, kh, kw] = spec.kernel;
    let p = spec.padding.map(|p| p as isize);
    let mut out = Vec::with_capacity(spec.taps());
    for tb in 0..kb as isize {
        for th in 0..kh as isize {
            for tw in 0..kw as isize {
                out.push([tb - p[0], th - p[1], tw - p[2]]);
            }
        }
    }
    out
}

/// Index ranges `[lo, hi)` of output coordinates whose source `o + d` lies in `[0, n)`.
fn valid_range(out_len: usize, in_len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// `dst[c][r - r0][j] = src[c][(y, i, j) + d]` for the output rows `r = y * oh + i`
/// in `rows`, zero where the source falls outside. Every element of `dst` is written once.
fn shift_gather<T: Scalar>(src: &[T], channels: usize, in_dims: [usize; 3], out_dims: [usize; 3], d: [isize; 3], rows: Range<usize>, dst: &mut [T]) {
    let [b, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let (j0, j1) = valid_range(ow, w, d[2]);
    let sj = (j0 as isize + d[2]).max(0) as usize;
    for (c, tile) in dst.chunks_mut(rows.len() * ow).take(channels).enumerate() {
        for (r, row) in rows.clone().zip(tile.chunks_mut(ow)) {
            let (sy, si) = ((r / oh) as isize + d[0], (r % oh) as isize + d[1]);
            if j0 >= j1 || sy < 0 || sy >= b as isize || si < 0 || si >= h as isize {
                row.fill(T::zero());
                continue;
            }
            let s = ((c * b + sy as usize) * h + si as usize) * w + sj;
            row[..j0].fill(T::zero());
            row[j1..].fill(T::zero());
            row[j0..j1].copy_from_slice(&src[s..s + (j1 - j0)]);
        }
    }
}

/// Adjoint of [`shift_gather`]: `dst[c][(y, i, j) + d] += src[c][r - r0][j]`.
fn shift_scatter_add<T: Scalar>(src: &[T], channels: usize, in_dims: [usize; 3], out_dims: [usize; 3], d: [isize; 3], rows: Range<usize>, dst: &mut [T]) {
    let [b, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let (j0, j1) = valid_range(ow, w, d[2]);
    if j0 >= j1 {
        return;
    }
    let sj = (j0 as isize + d[2]) as usize;
    for (c, tile) in src.chunks(rows.len() * ow).take(channels).enumerate() {
        for (r, row) in rows.clone().zip(tile.chunks(ow)) {
            let (sy, si) = ((r / oh) as isize + d[0], (r % oh) as isize + d[1]);
            if sy < 0 || sy >= b as isize || si < 0 || si >= h as isize {
                continue;
            }
            let s = ((c * b + sy as usize) * h + si as usize) * w + sj;
            for (o, &v) in dst[s..s + (j1 - j0)].iter_mut().zip(&row[j0..j1]) {
                *o += v;
            }
        }
    }
}

/// Output rows per tile, sized so a tile of the widest operand stays in L2.
fn tile_rows(channels: usize, out_dims: [usize; 3]) -> usize {
    const TILE_ELEMS: usize = 1 << 16;
    let [ob, oh, ow] = out_dims;
    let cols = (TILE_ELEMS / channels.max(1)).min(REDUCE_CHUNK);
    (cols / ow.max(1)).clamp(1, (ob * oh).max(1))
}

/// Weight view `M x C` for a single tap `t` of a contiguous `[M, C, taps]` buffer.
fn tap_view<'a, T>(weights: &'a [T], spec: &ConvSpec, t: usize) -> MatRef<'a, T> {
    let taps = spec.taps();
    MatRef {
        data: &weights[t..],
        rows: spec.out_channels,
        cols: spec.in_channels,
        rs: spec.in_channels * taps,
        cs: taps,
    }
}

/// Forward convolution computed as one GEMM per kernel tap over a shifted
/// copy of the input.
pub fn conv_forward<T: Scalar>(spec: &ConvSpec, kernels: &KernelSet<T>, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    spec.validate()?;
    kernels.check(spec)?;
    let in_dims = spec.check_input(input)?;
    let out_dims = spec.output_dims(in_dims)?;
    let n_out: usize = out_dims.iter().product();
    let (m, c) = (spec.out_channels, spec.in_channels);
    let input = input.as_contiguous();
    let weights = kernels.weights.as_contiguous();
    let out_init = |c: usize| kernels.bias.as_ref().map_or(T::zero(), |b| b[c]);
    let mut out = Vec::with_capacity(m * n_out);
    for ch in 0..m {
        out.resize((ch + 1) * n_out, out_init(ch));
    }
    let identity = in_dims == out_dims;
    let offsets = tap_offsets(spec);
    let (rows_total, ow) = (out_dims[0] * out_dims[1], out_dims[2]);
    let step = tile_rows(c.max(m), out_dims);
    let mut shifted = vec![T::zero(); c * step * ow];
    for r0 in (0..rows_total).step_by(step) {
        let rows = r0..(r0 + step).min(rows_total);
        let (n0, cols) = (r0 * ow, rows.len() * ow);
        for (t, &d) in offsets.iter().enumerate() {
            let x = if identity && d == [0, 0, 0] {
                MatRef { data: &input.data()[n0..], rows: c, cols, rs: n_out, cs: 1 }
            } else {
                shift_gather(input.data(), c, in_dims, out_dims, d, rows.clone(), &mut shifted[..c * cols]);
                MatRef::row_major(&shifted[..c * cols], c, cols)
            };
            gemm_ld(T::one(), tap_view(weights.data(), spec, t), x, T::one(), &mut out[n0..], n_out);
        }
    }
    Tensor::new(&[m, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Forward convolution as `flatten_kernels * unfold_input` (plus bias).
pub fn conv_forward_unfold<T: Scalar>(spec: &ConvSpec, kernels: &KernelSet<T>, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    spec.validate()?;
    let in_dims = spec.check_input(input)?;
    let out_dims = spec.output_dims(in_dims)?;
    let a = flatten_kernels(spec, kernels)?;
    let cols = unfold_input(input, spec.kernel, spec.padding)?;
    let mut f = matmul(&a, &cols)?;
    if let Some(bias) = &kernels.bias {
        let n = f.cols();
        for (row, &b) in f.data_mut().chunks_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new(&[spec.out_channels, out_dims[0], out_dims[1], out_dims[2]], f.into_data())
}

/// Forward convolution by direct summation over every output voxel.
pub fn conv_forward_direct<T: Scalar>(spec: &ConvSpec, kernels: &KernelSet<T>, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    spec.validate()?;
    kernels.check(spec)?;
    let [b, h, w] = spec.check_input(input)?;
    let [ob, oh, ow] = spec.output_dims([b, h, w])?;
    let [kb, kh, kw] = spec.kernel;
    let p = spec.padding.map(|v| v as isize);
    let x = input.as_contiguous();
    let x = x.data();
    let wt = kernels.weights.as_contiguous();
    let wt = wt.data();
    let mut out = Vec::with_capacity(spec.out_channels * ob * oh * ow);
    for m in 0..spec.out_channels {
        let b0 = kernels.bias.as_ref().map_or(T::zero(), |bias| bias[m]);
        for y in 0..ob {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b0;
                    for c in 0..spec.in_channels {
                        for tb in 0..kb {
                            let sy = (y + tb) as isize - p[0];
                            if sy < 0 || sy >= b as isize {
                                continue;
                            }
                            for th in 0..kh {
                                let si = (i + th) as isize - p[1];
                                if si < 0 || si >= h as isize {
                                    continue;
                                }
                                for tw in 0..kw {
                                    let sj = (j + tw) as isize - p[2];
                                    if sj < 0 || sj >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((c * b + sy as usize) * h + si as usize) * w + sj as usize];
                                    let wv = wt[(((m * spec.in_channels + c) * kb + tb) * kh + th) * kw + tw];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[spec.out_channels, ob, oh, ow], out)
}

/// Gradients of a scalar loss with respect to every convolution argument.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: FeatureVolume<T>,
    pub weights: Tensor<T>,
    /// Length `M`; summed output gradient per channel (reported even when bias is disabled).
    pub bias: Vec<T>,
}

/// Reduction chunk along the voxel axis; partial sums are carried in f64.
const REDUCE_CHUNK: usize = 8192;

pub fn conv_backward<T: Scalar>(
    spec: &ConvSpec,
    kernels: &KernelSet<T>,
    input: &FeatureVolume<T>,
    grad_output: &FeatureVolume<T>,
) -> Result<ConvGrads<T>> {
    spec.validate()?;
    kernels.check(spec)?;
    let in_dims = spec.check_input(input)?;
    let out_dims = spec.output_dims(in_dims)?;
    let (m, c) = (spec.out_channels, spec.in_channels);
    let want = [m, out_dims[0], out_dims[1], out_dims[2]];
    if grad_output.shape() != want {
        return Err(Error::shape(
            "conv_backward",
            format!("grad_output {:?}, forward output is {want:?}", grad_output.shape()),
        ));
    }
    let n_out: usize = out_dims.iter().product();
    let n_in: usize = in_dims.iter().product();
    let taps = spec.taps();
    let input = input.as_contiguous();
    let gout = grad_output.as_contiguous();
    let gout = gout.data();
    let weights = kernels.weights.as_contiguous();

    let bias: Vec<T> = gout
        .chunks(n_out)
        .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum()))
        .collect();

    let mut grad_w = vec![0f64; m * c * taps];
    let mut grad_in = vec![T::zero(); c * n_in];
    let identity = in_dims == out_dims;
    let offsets = tap_offsets(spec);
    let (rows_total, ow) = (out_dims[0] * out_dims[1], out_dims[2]);
    let step = tile_rows(c.max(m), out_dims);
    let mut shifted = vec![T::zero(); c * step * ow];
    let mut gshift = vec![T::zero(); c * step * ow];
    let mut partial = vec![T::zero(); m * c];
    for r0 in (0..rows_total).step_by(step) {
        let rows = r0..(r0 + step).min(rows_total);
        let (n0, cols) = (r0 * ow, rows.len() * ow);
        let g = MatRef { data: &gout[n0..], rows: m, cols, rs: n_out, cs: 1 };
        for (t, &d) in offsets.iter().enumerate() {
            let same = identity && d == [0, 0, 0];
            let x = if same {
                MatRef { data: &input.data()[n0..], rows: c, cols, rs: n_out, cs: 1 }
            } else {
                shift_gather(input.data(), c, in_dims, out_dims, d, rows.clone(), &mut shifted[..c * cols]);
                MatRef::row_major(&shifted[..c * cols], c, cols)
            };
            gemm(T::one(), g, x.t(), T::zero(), &mut partial);
            for (i, v) in partial.iter().enumerate() {
                grad_w[i * taps + t] += v.as_f64();
            }
            let wt = tap_view(weights.data(), spec, t).t();
            if same {
                gemm_ld(T::one(), wt, g, T::one(), &mut grad_in[n0..], n_in);
            } else {
                gemm(T::one(), wt, g, T::zero(), &mut gshift[..c * cols]);
                shift_scatter_add(&gshift[..c * cols], c, in_dims, out_dims, d, rows.clone(), &mut grad_in);
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_in)?,
        weights: Tensor::new(&spec.weight_shape(), grad_w.into_iter().map(T::from_f64).collect())?,
        bias,
    })
}

/// Spatial stride-2 downsampling: a `(1, 2, 2)` kernel applied at stride
/// `(1, 2, 2)` with no padding. Weights are `[M, C, 1, 2, 2]`; the
/// spectral axis is preserved.
pub fn downsample_forward<T: Scalar>(kernels: &KernelSet<T>, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    let (m, c, [b, h, w]) = check_downsample(kernels, input)?;
    let (oh, ow) = (h / 2, w / 2);
    let n_out = b * oh * ow;
    let x = input.as_contiguous();
    let wt = kernels.weights.as_contiguous();
    let mut out = vec![T::zero(); m * n_out];
    if let Some(bias) = &kernels.bias {
        for (row, &bv) in out.chunks_mut(n_out).zip(bias) {
            row.fill(bv);
        }
    }
    let mut gathered = vec![T::zero(); c * n_out];
    for t in 0..4 {
        stride2_gather(x.data(), c, [b, h, w], t, &mut gathered);
        let wv = MatRef { data: &wt.data()[t..], rows: m, cols: c, rs: c * 4, cs: 4 };
        gemm(T::one(), wv, MatRef::row_major(&gathered, c, n_out), T::one(), &mut out);
    }
    Tensor::new(&[m, b, oh, ow], out)
}

pub fn downsample_backward<T: Scalar>(
    kernels: &KernelSet<T>,
    input: &FeatureVolume<T>,
    grad_output: &FeatureVolume<T>,
) -> Result<ConvGrads<T>> {
    let (m, c, [b, h, w]) = check_downsample(kernels, input)?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_output.shape() != [m, b, oh, ow] {
        return Err(Error::shape("downsample_backward", format!("grad_output {:?}, expected {:?}", grad_output.shape(), [m, b, oh, ow])));
    }
    let n_out = b * oh * ow;
    let x = input.as_contiguous();
    let wt = kernels.weights.as_contiguous();
    let gout = grad_output.as_contiguous();
    let gout = gout.data();
    let bias = gout.chunks(n_out).map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum())).collect();
    let mut grad_w = vec![0f64; m * c * 4];
    let mut grad_in = vec![T::zero(); c * b * h * w];
    let mut gathered = vec![T::zero(); c * n_out];
    let mut partial = vec![T::zero(); m * c];
    for t in 0..4 {
        stride2_gather(x.data(), c, [b, h, w], t, &mut gathered);
        let mut start = 0;
        while start < n_out {
            let len = REDUCE_CHUNK.min(n_out - start);
            let g = MatRef { data: &gout[start..], rows: m, cols: len, rs: n_out, cs: 1 };
            let xs = MatRef { data: &gathered[start..], rows: c, cols: len, rs: n_out, cs: 1 };
            gemm(T::one(), g, xs.t(), T::zero(), &mut partial);
            for (i, v) in partial.iter().enumerate() {
                grad_w[i * 4 + t] += v.as_f64();
            }
            start += len;
        }
        let wv = MatRef { data: &wt.data()[t..], rows: m, cols: c, rs: c * 4, cs: 4 };
        gemm(T::one(), wv.t(), MatRef::row_major(gout, m, n_out), T::zero(), &mut gathered);
        stride2_scatter(&gathered, c, [b, h, w], t, &mut grad_in);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_in)?,
        weights: Tensor::new(&[m, c, 1, 2, 2], grad_w.into_iter().map(T::from_f64).collect())?,
        bias,
    })
}

fn check_downsample<T: Scalar>(kernels: &KernelSet<T>, input: &FeatureVolume<T>) -> Result<(usize, usize, [usize; 3])> {
    let [c, b, h, w] = volume_dims("downsample", input)?;
    let ws = kernels.weights.shape();
    if ws.len() != 5 || ws[1] != c || ws[2..] != [1, 2, 2] {
        return Err(Error::shape("downsample", format!("weights {ws:?} for a {c}-channel input")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample", format!("spatial extents {h}x{w} are not even")));
    }
    if kernels.bias.as_ref().is_some_and(|bv| bv.len() != ws[0]) {
        return Err(Error::shape("downsample", "bias length"));
    }
    Ok((ws[0], c, [b, h, w]))
}

/// `dst[c][y][i][j] = src[c][y][2i + dh][2j + dw]` for tap `t = 2*dh + dw`.
fn stride2_gather<T: Scalar>(src: &[T], channels: usize, dims: [usize; 3], t: usize, dst: &mut [T]) {
    let [b, h, w] = dims;
    let (dh, dw) = (t / 2, t % 2);
    let (oh, ow) = (h / 2, w / 2);
    for cy in 0..channels * b {
        for i in 0..oh {
            let s = (cy * h + 2 * i + dh) * w + dw;
            let d = (cy * oh + i) * ow;
            for j in 0..ow {
                dst[d + j] = src[s + 2 * j];
            }
        }
    }
}

fn stride2_scatter<T: Scalar>(src: &[T], channels: usize, dims: [usize; 3], t: usize, dst: &mut [T]) {
    let [b, h, w] = dims;
    let (dh, dw) = (t / 2, t % 2);
    let (oh, ow) = (h / 2, w / 2);
    for cy in 0..channels * b {
        for i in 0..oh {
            let d = (cy * h + 2 * i + dh) * w + dw;
            let s = (cy * oh + i) * ow;
            for j in 0..ow {
                dst[d + 2 * j] += src[s + j];
            }
        }
    }
}

/// Nearest-neighbour 2x spatial upsampling of a `[C, B, H, W]` volume.
pub fn upsample_nearest<T: Scalar>(input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    let [c, b, h, w] = volume_dims("upsample_nearest", input)?;
    let x = input.as_contiguous();
    let mut out = vec![T::zero(); c * b * h * w * 4];
    for cy in 0..c * b {
        for i in 0..2 * h {
            let s = (cy * h + i / 2) * w;
            let d = (cy * 2 * h + i) * 2 * w;
            for j in 0..2 * w {
                out[d + j] = x.data()[s + j / 2];
            }
        }
    }
    Tensor::new(&[c, b, 2 * h, 2 * w], out)
}

/// Adjoint of [`upsample_nearest`]: sums each 2x2 spatial block.
pub fn upsample_nearest_backward<T: Scalar>(grad_output: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    let [c, b, h2, w2] = volume_dims("upsample_nearest_backward", grad_output)?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample_nearest_backward", format!("odd extents {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad_output.as_contiguous();
    let mut out = vec![T::zero(); c * b * h * w];
    for cy in 0..c * b {
        for i in 0..h2 {
            let s = (cy * h2 + i) * w2;
            let d = (cy * h + i / 2) * w;
            for j in 0..w2 {
                out[d + j / 2] += g.data()[s + j];
            }
        }
    }
    Tensor::new(&[c, b, h, w], out)
}

/// Floating-point operations of one layer, counting a multiply-add as 2.
pub fn flops_estimate(spec: &ConvSpec, output_dims: [usize; 3]) -> u64 {
    2 * (spec.in_channels * spec.out_channels * spec.taps()) as u64 * output_dims.iter().map(|&d| d as u64).product::<u64>()
}
