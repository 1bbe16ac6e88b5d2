//! Rank, spectrum and parameter-count reports.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reconvset::kernel_matrix::{
    build_kernel_matrix, count_biases, count_params, feature_spectrum, measure_rank, random_scheme_kernels, Scheme,
};
use reconvset::tensor::Tensor;

use crate::files::write_text;

fn emit(csv: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => write_text(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn scheme_names(schemes: &[Scheme]) -> String {
    schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
}

/// One row per scheme and draw. Draw `i` seeds its kernels with `seed + i`.
pub fn rank_report(schemes: &[Scheme], [m, c, k]: [usize; 3], seed: u64, seeds: u64, tol: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let mut csv = format!(
        "# command=rank-report\n# schemes={}\n# M={m}\n# C={c}\n# k={k}\n# seed={seed}\n# seeds={seeds}\n# tol={tol:e}\n",
        scheme_names(schemes)
    );
    csv += "scheme,M,C,k,predicted_bound,measured_rank,stable_rank\n";
    for &scheme in schemes {
        for draw in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(draw));
            let kernels = random_scheme_kernels(scheme, m, c, k, &mut rng)?;
            let r = measure_rank(&build_kernel_matrix(scheme, &kernels, m, c, k)?, tol)?;
            csv += &format!("{scheme},{m},{c},{k},{},{},{}\n", r.predicted_upper_bound, r.measured_rank, r.stable_rank);
        }
    }
    emit(&csv, out)
}

/// Spectrum of each scheme's pre-compression features on one shared uniform
/// `[-1, 1)` input. Kernels are drawn after the input from the same stream.
pub fn spectrum_report(schemes: &[Scheme], [m, c, k]: [usize; 3], dims: [usize; 3], seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let mut csv = format!(
        "# command=spectrum-report\n# schemes={}\n# M={m}\n# C={c}\n# k={k}\n# dims={}x{}x{}\n# seed={seed}\n",
        scheme_names(schemes),
        dims[0],
        dims[1],
        dims[2]
    );
    csv += "scheme,index,normalized_sigma\n";
    for &scheme in schemes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[c, dims[0], dims[1], dims[2]], |_| rng.random_range(-1.0..1.0));
        let kernels = random_scheme_kernels(scheme, m, c, k, &mut rng)?;
        for (i, s) in feature_spectrum(scheme, &kernels, &x)?.iter().enumerate() {
            csv += &format!("{scheme},{i},{s}\n");
        }
    }
    emit(&csv, out)
}

pub fn param_counts(schemes: &[Scheme], label: bool, m: usize, c: usize, k: usize) {
    for &s in schemes {
        let (w, b) = (count_params(s, m, c, k, true), count_biases(s, m, true));
        let prefix = if label { format!("{s}: ") } else { String::new() };
        println!("{prefix}{w} weights + {b} biases = {}", w + b);
    }
}
