use proptest::prelude::*;
use reconvset::convkit::{conv_forward, conv_forward_direct, conv_forward_unfold, ConvSpec, KernelSet};
use reconvset::tensor::Tensor;

fn kernel_shape(k: usize, which: usize) -> [usize; 3] {
    [[k, k, k], [1, k, k], [k, 1, 1], [1, k, 1], [1, 1, k], [1, 1, 1]][which]
}

prop_compose! {
    fn spec_and_dims()(k in prop::sample::select(vec![1usize, 3, 5]), which in 0usize..6, m in 1usize..4, c in 1usize..4,
                       bias in any::<bool>(), pad_seed in any::<[u8; 3]>(), extra in prop::array::uniform3(0usize..4))
        -> (ConvSpec, [usize; 3]) {
        let kernel = kernel_shape(k, which);
        let padding = [0, 1, 2].map(|a| pad_seed[a] as usize % kernel[a]);
        let dims = [0, 1, 2].map(|a| kernel[a] + extra[a]);
        (ConvSpec { out_channels: m, in_channels: c, kernel, padding, bias }, dims)
    }
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    // Deterministic pseudo-random fill (SplitMix64) independent of the library's RNG use.
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn kernels(spec: &ConvSpec, seed: u64) -> KernelSet<f64> {
    let mut ks = KernelSet::zeros(spec);
    let n = ks.weights.numel();
    ks.weights.data_mut().copy_from_slice(&values(n, seed));
    if let Some(b) = &mut ks.bias {
        b.copy_from_slice(&values(spec.out_channels, seed ^ 1));
    }
    ks
}

fn volume(c: usize, dims: [usize; 3], seed: u64) -> Tensor<f64> {
    let shape = [c, dims[0], dims[1], dims[2]];
    Tensor::new(&shape, values(shape.iter().product(), seed)).unwrap()
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn three_routes_agree((spec, dims) in spec_and_dims(), seed in any::<u64>()) {
        let ks = kernels(&spec, seed);
        let x = volume(spec.in_channels, dims, seed.rotate_left(7));
        let direct = conv_forward_direct(&spec, &ks, &x).unwrap();
        prop_assert!(rel_err(&conv_forward_unfold(&spec, &ks, &x).unwrap(), &direct) <= 1e-10);
        prop_assert!(rel_err(&conv_forward(&spec, &ks, &x).unwrap(), &direct) <= 1e-10);
    }

    #[test]
    fn linear_without_bias((spec, dims) in spec_and_dims(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let spec = ConvSpec { bias: false, ..spec };
        let ks = kernels(&spec, seed);
        let x = volume(spec.in_channels, dims, seed ^ 11);
        let y = volume(spec.in_channels, dims, seed ^ 12);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv_forward(&spec, &ks, &mix).unwrap();
        let rhs = conv_forward(&spec, &ks, &x).unwrap().scale(a).add(&conv_forward(&spec, &ks, &y).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn interior_translation_equivariance(k in prop::sample::select(vec![1usize, 3]), which in 0usize..6, axis in 0usize..3, seed in any::<u64>()) {
        let spec = ConvSpec::same(2, 2, kernel_shape(k, which), true).unwrap();
        let ks = kernels(&spec, seed);
        let dims = [7, 7, 7];
        let x = volume(2, dims, seed ^ 3);
        // Shift the input by one voxel along `axis`; the new first slice is arbitrary.
        let shifted = Tensor::from_fn(&[2, 7, 7, 7], |i| {
            let mut idx = [i / 343, i / 49 % 7, i / 7 % 7, i % 7];
            if idx[axis + 1] == 0 { return 0.25; }
            idx[axis + 1] -= 1;
            x.get(&idx).unwrap()
        });
        let (y, ys) = (conv_forward(&spec, &ks, &x).unwrap(), conv_forward(&spec, &ks, &shifted).unwrap());
        let r = spec.kernel.map(|e| e / 2);
        for m in 0..2 {
            for p in 0..7 {
                for q in 0..7 {
                    for s in 0..7 {
                        let o = [p, q, s];
                        // Away from the borders the receptive fields of both outputs stay inside the data.
                        let inside = (0..3).all(|a| o[a] >= r[a] + 1 + usize::from(a == axis) && o[a] + r[a] + 1 < 7);
                        if !inside { continue; }
                        let mut src = o;
                        src[axis] -= 1;
                        let a = ys.get(&[m, o[0], o[1], o[2]]).unwrap();
                        let b = y.get(&[m, src[0], src[1], src[2]]).unwrap();
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn horizontal_kernel_keeps_w_constant_inputs_constant(k in prop::sample::select(vec![3usize, 5]), seed in any::<u64>()) {
        let spec = ConvSpec::same(3, 2, [1, 1, k], true).unwrap();
        let ks = kernels(&spec, seed);
        let w = 9;
        let base = volume(2, [4, 5, 1], seed ^ 5);
        let x = Tensor::from_fn(&[2, 4, 5, w], |i| base.data()[i / w]);
        let y = conv_forward(&spec, &ks, &x).unwrap();
        let r = k / 2;
        for m in 0..3 {
            for b in 0..4 {
                for h in 0..5 {
                    let first = y.get(&[m, b, h, r]).unwrap();
                    for col in r..w - r {
                        prop_assert!((y.get(&[m, b, h, col]).unwrap() - first).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn f32_training_path_tracks_f64() {
    let spec = ConvSpec::same(4, 3, [3, 3, 3], true).unwrap();
    let ks = kernels(&spec, 42);
    let x = volume(3, [5, 6, 6], 43);
    let ks32 = KernelSet { weights: ks.weights.cast::<f32>(), bias: ks.bias.as_ref().map(|b| b.iter().map(|&v| v as f32).collect()) };
    let y32 = conv_forward(&spec, &ks32, &x.cast::<f32>()).unwrap().cast::<f64>();
    let y64 = conv_forward_unfold(&spec, &ks, &x).unwrap();
    assert!(rel_err(&y32, &y64) <= 1e-5);
}
