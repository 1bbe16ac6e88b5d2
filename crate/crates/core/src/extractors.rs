//! Trainable feature-extraction blocks, one per [`Scheme`], all mapping
//! `C` input channels to `M` output channels at unchanged extents.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::convkit::{conv_forward, ConvSpec, KernelSet};
use crate::error::{Error, Result};
use crate::kernel_matrix::{concat_channels, count_biases, count_params, Scheme};
use crate::tensor::{FeatureVolume, Scalar, Tensor};


#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub const DEFAULT: Activation = Activation::LeakyRelu(0.2);

    fn slope(self) -> Option<f64> {
        match self {
            Activation::None => None,
            Activation::Relu => Some(0.0),
            Activation::LeakyRelu(s) => Some(s),
        }
    }

    /// Kaiming gain for a layer feeding this activation.
    pub fn gain(self) -> f64 {
        match self.slope() {
            None => 1.0,
            Some(a) => (2.0 / (1.0 + a * a)).sqrt(),
        }
    }

    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self.slope() {
            None => x.clone(),
            Some(a) => {
                let a = T::from_f64(a);
                x.map(|v| if v > T::zero() { v } else { v * a })
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::None => f.write_str("none"),
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            _ => s
                .strip_prefix("leaky_relu:")
                .and_then(|v| v.parse().ok())
                .map(Activation::LeakyRelu)
                .ok_or_else(|| Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

/// Hands out consecutive parameter slots while a model records itself on a tape.
#[derive(Debug, Default)]
pub struct ParamSlots(usize);

impl ParamSlots {
    pub fn take(&mut self) -> usize {
        self.0 += 1;
        self.0 - 1
    }

    pub fn used(&self) -> usize {
        self.0
    }
}

/// Read-only view of one parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub(crate) fn kernel_params<'a, T: Scalar>(prefix: &str, ks: &'a KernelSet<T>, out: &mut Vec<ParamView<'a, T>>) {
    out.push(ParamView { name: format!("{prefix}.weight"), shape: ks.weights.shape().to_vec(), data: ks.weights.data() });
    if let Some(b) = &ks.bias {
        out.push(ParamView { name: format!("{prefix}.bias"), shape: vec![b.len()], data: b });
    }
}

pub(crate) fn kernel_params_mut<'a, T: Scalar>(ks: &'a mut KernelSet<T>, out: &mut Vec<&'a mut [T]>) {
    out.push(ks.weights.data_mut());
    if let Some(b) = &mut ks.bias {
        out.push(b.as_mut_slice());
    }
}

/// Records `spec` applied to `x`, registering the kernel set's tensors.
pub(crate) fn record_conv<T: Scalar>(tape: &mut Tape<T>, slots: &mut ParamSlots, spec: &ConvSpec, ks: &KernelSet<T>, x: Var) -> Result<Var> {
    let w = tape.param(slots.take(), ks.weights.clone())?;
    let b = match &ks.bias {
        Some(b) => Some(tape.param(slots.take(), Tensor::new(&[b.len()], b.clone())?)?),
        None => None,
    };
    tape.conv(spec, x, w, b)
}

/// One extraction block: its layers (or parallel branches), an optional
/// `1x1x1` compression, then the activation.
#[derive(Clone, Debug)]
pub struct ExtractorBlock<T> {
    pub scheme: Scheme,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub layers: Vec<(ConvSpec, KernelSet<T>)>,
    pub compression: Option<(ConvSpec, KernelSet<T>)>,
    pub activation: Activation,
}

impl<T: Scalar> ExtractorBlock<T> {
    /// Kaiming-uniform initialised block. Sequential layers and Conv3D carry
    /// biases; parallel branches do not (their bias would fold into the
    /// compression bias).
    pub fn new<R: Rng + ?Sized>(scheme: Scheme, in_channels: usize, out_channels: usize, k: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        let parallel = scheme.is_parallel();
        let specs = scheme.layer_specs(out_channels, in_channels, k)?;
        let last = specs.len() - 1;
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let spec = ConvSpec { bias: !parallel, ..s };
                let gain = if !parallel && i == last { activation.gain() } else { 1.0 };
                (spec, KernelSet::kaiming_uniform(&spec, gain, rng))
            })
            .collect();
        let compression = if parallel {
            let spec = ConvSpec::same(out_channels, scheme.stacked_channels(out_channels), [1, 1, 1], true)?;
            Some((spec, KernelSet::kaiming_uniform(&spec, activation.gain(), rng)))
        } else {
            None
        };
        Ok(ExtractorBlock { scheme, in_channels, out_channels, k, layers, compression, activation })
    }

    fn check_input(&self, input: &FeatureVolume<T>) -> Result<()> {
        match input.shape() {
            [c, _, _, _] if *c == self.in_channels => Ok(()),
            s => Err(Error::shape("extract", format!("{} block expects {} channels, got volume {s:?}", self.scheme, self.in_channels))),
        }
    }

    /// Output before compression and activation: the channel-stacked branch
    /// outputs (`nM` channels) or the end of the sequential chain.
    pub fn pre_compression(&self, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
        self.check_input(input)?;
        if self.scheme.is_parallel() {
            let parts = self.layers.iter().map(|(s, ks)| conv_forward(s, ks, input)).collect::<Result<Vec<_>>>()?;
            concat_channels(&parts)
        } else {
            let mut x = input.clone();
            for (s, ks) in &self.layers {
                x = conv_forward(s, ks, &x)?;
            }
            Ok(x)
        }
    }

    /// Output before the activation.
    pub fn pre_activation(&self, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
        let stacked = self.pre_compression(input)?;
        match &self.compression {
            Some((s, ks)) => conv_forward(s, ks, &stacked),
            None => Ok(stacked),
        }
    }

    pub fn extract(&self, input: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
        Ok(self.activation.apply(&self.pre_activation(input)?))
    }

    pub fn param_count(&self) -> u64 {
        let n = |ks: &KernelSet<T>| (ks.weights.numel() + ks.bias.as_ref().map_or(0, Vec::len)) as u64;
        self.layers.iter().map(|(_, ks)| n(ks)).sum::<u64>() + self.compression.as_ref().map_or(0, |(_, ks)| n(ks))
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (i, (_, ks)) in self.layers.iter().enumerate() {
            kernel_params(&format!("{prefix}.layer{i}"), ks, &mut out);
        }
        if let Some((_, ks)) = &self.compression {
            kernel_params(&format!("{prefix}.compress"), ks, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for (_, ks) in &mut self.layers {
            kernel_params_mut(ks, &mut out);
        }
        if let Some((_, ks)) = &mut self.compression {
            kernel_params_mut(ks, &mut out);
        }
        out
    }

    /// Records the block on `tape`; parameters are registered in [`Self::params`] order.
    pub fn record(&self, tape: &mut Tape<T>, slots: &mut ParamSlots, x: Var) -> Result<Var> {
        self.check_input(tape.value(x)?)?;
        let mut y = if self.scheme.is_parallel() {
            let parts = self
                .layers
                .iter()
                .map(|(s, ks)| record_conv(tape, slots, s, ks, x))
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&parts)?
        } else {
            let mut h = x;
            for (s, ks) in &self.layers {
                h = record_conv(tape, slots, s, ks, h)?;
            }
            h
        };
        if let Some((s, ks)) = &self.compression {
            y = record_conv(tape, slots, s, ks, y)?;
        }
        match self.activation.slope() {
            Some(a) => tape.leaky_relu(y, a),
            None => Ok(y),
        }
    }
}

/// Weight plus bias count of one block, matching [`ExtractorBlock::param_count`].
pub fn block_param_count(scheme: Scheme, m: usize, c: usize, k: usize) -> u64 {
    count_params(scheme, m, c, k, true) + count_biases(scheme, m, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_matrix::{build_kernel_matrix, random_scheme_kernels};
    use crate::tensor::{matmul, unfold_input, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn all_schemes_share_output_shape() {
        let mut r = rng(0);
        let x = Tensor::<f64>::from_fn(&[3, 5, 6, 4], |_| r.random_range(-1.0..1.0));
        for s in Scheme::ALL {
            let b = ExtractorBlock::<f64>::new(s, 3, 4, 3, Activation::DEFAULT, &mut r).unwrap();
            assert_eq!(b.extract(&x).unwrap().shape(), &[4, 5, 6, 4], "{s}");
            assert_eq!(b.compression.is_some(), s.is_parallel());
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let b = ExtractorBlock::<f64>::new(Scheme::ReConvSet, 3, 4, 3, Activation::DEFAULT, &mut rng(1)).unwrap();
        assert!(matches!(b.extract(&Tensor::zeros(&[2, 3, 3, 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_compression_gives_zero_output() {
        let mut b = ExtractorBlock::<f64>::new(Scheme::ReConvSet, 2, 3, 3, Activation::None, &mut rng(2)).unwrap();
        let (_, ks) = b.compression.as_mut().unwrap();
        *ks = KernelSet::zeros(&ConvSpec::same(3, 9, [1, 1, 1], true).unwrap());
        let mut r = rng(3);
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| r.random_range(-1.0..1.0));
        assert_eq!(b.pre_activation(&x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn selector_compression_isolates_horizontal_branch() {
        let (c, m) = (2, 3);
        let mut b = ExtractorBlock::<f64>::new(Scheme::ReConvSet, c, m, 3, Activation::None, &mut rng(4)).unwrap();
        let (spec, ks) = b.compression.as_mut().unwrap();
        *ks = KernelSet::zeros(spec);
        for i in 0..m {
            ks.weights.set(&[i, 2 * m + i, 0, 0, 0], 1.0).unwrap();
        }
        let mut r = rng(5);
        let x = Tensor::<f64>::from_fn(&[c, 3, 4, 5], |_| r.random_range(-1.0..1.0));
        let (hspec, hks) = &b.layers[2];
        assert_eq!(hspec.kernel, [1, 1, 3]);
        let direct = conv_forward(hspec, hks, &x).unwrap();
        assert_eq!(b.pre_activation(&x).unwrap(), direct);
    }

    #[test]
    fn pre_compression_equals_kernel_matrix_path() {
        let (c, m, k) = (2, 3, 3);
        let b = ExtractorBlock::<f64>::new(Scheme::ReConvSet, c, m, k, Activation::DEFAULT, &mut rng(6)).unwrap();
        let ks: Vec<_> = b.layers.iter().map(|(_, ks)| ks.clone()).collect();
        let ukm = build_kernel_matrix(Scheme::ReConvSet, &ks, m, c, k).unwrap();
        let mut r = rng(7);
        let x = Tensor::<f64>::from_fn(&[c, 4, 3, 5], |_| r.random_range(-1.0..1.0));
        let f = matmul(&ukm.matrix, &unfold_input(&x, [k, k, k], [1, 1, 1]).unwrap()).unwrap();
        let stacked = b.pre_compression(&x).unwrap();
        for (a, e) in f.data().iter().zip(stacked.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn block_counts_match_closed_form() {
        let mut r = rng(8);
        for s in Scheme::ALL {
            let b = ExtractorBlock::<f32>::new(s, 16, 16, 3, Activation::DEFAULT, &mut r).unwrap();
            assert_eq!(b.param_count(), block_param_count(s, 16, 16, 3), "{s}");
            let listed: usize = b.params("x").iter().map(|p| p.data.len()).sum();
            assert_eq!(listed as u64, b.param_count());
        }
        let rc = block_param_count(Scheme::ReConvSet, 16, 16, 3);
        assert!(rc < block_param_count(Scheme::Conv3D, 16, 16, 3));
        for s in Scheme::ALL.into_iter().filter(|s| *s != Scheme::Seq1D) {
            assert!(block_param_count(Scheme::Seq1D, 16, 16, 3) < block_param_count(s, 16, 16, 3));
        }
    }

    /// Finite-difference check of the full block through its activation.
    fn fd_check(scheme: Scheme) {
        let mut r = rng(10 + scheme as u64);
        let block = ExtractorBlock::<f64>::new(scheme, 2, 2, 3, Activation::DEFAULT, &mut r).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| r.random_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| r.random_range(-1.0..1.0));
        let loss_of = |b: &ExtractorBlock<f64>| crate::autodiff::l1_loss(&b.extract(&x).unwrap(), &y).unwrap();
        let mut tape = Tape::new();
        let mut slots = ParamSlots::default();
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let out = block.record(&mut tape, &mut slots, xv).unwrap();
        let l = tape.l1_loss(out, yv).unwrap();
        let grads = tape.backward(l).unwrap().grads;
        assert_eq!(grads.len(), block.params("b").len());
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.numel() {
                let a = g.data()[i];
                let (mut p, mut q) = (block.clone(), block.clone());
                p.params_mut()[pi][i] += h;
                q.params_mut()[pi][i] -= h;
                let num = (loss_of(&p) - loss_of(&q)) / (2.0 * h);
                if a.abs() > 1e-8 {
                    assert!((a - num).abs() <= 1e-4 * a.abs().max(num.abs()), "{scheme} p{pi}[{i}]: {a} vs {num}");
                }
            }
        }
    }

    #[test]
    fn gradients_through_every_block() {
        for s in Scheme::ALL {
            fd_check(s);
        }
    }

    #[test]
    fn branch_permutation_with_matching_compression_is_identical() {
        let (c, m) = (2, 2);
        let mut r = rng(20);
        // Dyadic values keep every sum exact, so the check can be bitwise.
        let dyadic = |r: &mut ChaCha8Rng| r.random_range(-8i32..8) as f64 / 8.0;
        let mut b = ExtractorBlock::<f64>::new(Scheme::ReConvSet, c, m, 3, Activation::DEFAULT, &mut r).unwrap();
        for (_, ks) in b.layers.iter_mut().chain(b.compression.iter_mut()) {
            ks.weights.data_mut().iter_mut().for_each(|v| *v = dyadic(&mut r));
            if let Some(bias) = &mut ks.bias {
                bias.iter_mut().for_each(|v| *v = dyadic(&mut r));
            }
        }
        let x = Tensor::<f64>::from_fn(&[c, 3, 4, 4], |_| dyadic(&mut r));
        let perm = [2usize, 0, 1];
        let mut p = b.clone();
        p.layers = perm.iter().map(|&i| b.layers[i].clone()).collect();
        let (_, comp) = p.compression.as_mut().unwrap();
        let orig = b.compression.as_ref().unwrap().1.weights.clone();
        for mo in 0..m {
            for (slot, &src) in perm.iter().enumerate() {
                for i in 0..m {
                    comp.weights.set(&[mo, slot * m + i, 0, 0, 0], orig.get(&[mo, src * m + i, 0, 0, 0]).unwrap()).unwrap();
                }
            }
        }
        assert_eq!(p.extract(&x).unwrap(), b.extract(&x).unwrap());

        // Generic weights: equal up to summation order.
        let g = ExtractorBlock::<f64>::new(Scheme::ReConvSet, c, m, 3, Activation::DEFAULT, &mut r).unwrap();
        let xs = Tensor::<f64>::from_fn(&[c, 3, 4, 4], |_| r.random_range(-1.0..1.0));
        let mut gp = g.clone();
        gp.layers = perm.iter().map(|&i| g.layers[i].clone()).collect();
        let src = g.compression.as_ref().unwrap().1.weights.clone();
        let dst = &mut gp.compression.as_mut().unwrap().1.weights;
        for mo in 0..m {
            for (slot, &s) in perm.iter().enumerate() {
                for i in 0..m {
                    dst.set(&[mo, slot * m + i, 0, 0, 0], src.get(&[mo, s * m + i, 0, 0, 0]).unwrap()).unwrap();
                }
            }
        }
        let d = gp.extract(&xs).unwrap().sub(&g.extract(&xs).unwrap()).unwrap();
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn random_scheme_kernels_feed_blocks() {
        // The analysis kernels and the trainable block agree on layer shapes.
        let mut r = rng(30);
        for s in Scheme::ALL {
            let ks = random_scheme_kernels(s, 4, 3, 3, &mut r).unwrap();
            let b = ExtractorBlock::<f64>::new(s, 3, 4, 3, Activation::None, &mut r).unwrap();
            let shapes: Vec<_> = b.layers.iter().map(|(_, k)| k.weights.shape().to_vec()).collect();
            let want: Vec<_> = ks.iter().map(|k| k.weights.shape().to_vec()).collect();
            assert_eq!(shapes, want);
        }
        let _ = Matrix::<f64>::zeros(1, 1);
    }

    #[test]
    fn activation_parsing() {
        assert_eq!("leaky_relu:0.2".parse::<Activation>().unwrap(), Activation::LeakyRelu(0.2));
        assert_eq!(Activation::DEFAULT.to_string().parse::<Activation>().unwrap(), Activation::DEFAULT);
        assert!("tanh".parse::<Activation>().is_err());
    }
}
