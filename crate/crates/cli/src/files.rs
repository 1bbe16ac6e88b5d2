//! Dataset, noise, denoise and evaluation commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use reconvset::data_io::{generate_phantom, read_hsc, write_hsc, Cube, PhantomSpec};
use reconvset::metrics::evaluate;
use reconvset::network::{denoise as run_model, load_checkpoint};
use reconvset::noise::{corrupt_keyed, NoiseKind, NoiseSpec};

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `.hsc` files of a directory in name order.
pub fn list_hsc(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("reading directory {}", dir.display()))?.path();
        if path.extension().is_some_and(|e| e == "hsc") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no .hsc files in {}", dir.display());
    }
    Ok(files)
}

pub fn read_dir_cubes(dir: &Path) -> anyhow::Result<Vec<Cube>> {
    list_hsc(dir)?.iter().map(|p| Ok(read_hsc(p)?)).collect()
}

/// `a/b.hsc` -> `a/b.hsc.cfg`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Pairs every input cube with its output path. A directory input maps file
/// names into the output directory.
fn io_pairs(input: &Path, out: &Path) -> anyhow::Result<(Vec<(PathBuf, PathBuf)>, PathBuf)> {
    if input.is_dir() {
        let pairs = list_hsc(input)?.into_iter().map(|p| {
            let dst = out.join(p.file_name().expect("listed files have names"));
            (p, dst)
        });
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok((pairs.collect(), out.join("run.cfg")))
    } else {
        Ok((vec![(input.to_path_buf(), out.to_path_buf())], sidecar(out)))
    }
}

pub fn gen_data(count: usize, dims: [usize; 3], seed: u64, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let template = PhantomSpec::new(dims[0], dims[1], dims[2], seed);
    for i in 0..count {
        let spec = PhantomSpec { seed: seed.wrapping_add(i as u64), ..template.clone() };
        write_hsc(out.join(format!("phantom_{i:04}.hsc")), &generate_phantom(&spec)?)?;
    }
    let cfg = format!(
        "command=gen-data\ncount={count}\ndims={}x{}x{}\nseed={seed}\nregions={}\nblobs={}\n# file i uses seed+i\n",
        dims[0], dims[1], dims[2], template.regions, template.blobs
    );
    write_text(&out.join("gen-data.cfg"), &cfg)?;
    println!("wrote {count} cube(s) to {}", out.display());
    Ok(())
}

pub fn add_noise(case: NoiseKind, seed: u64, input: &Path, out: &Path) -> anyhow::Result<()> {
    let spec = NoiseSpec::new(case, seed);
    let (pairs, cfg_path) = io_pairs(input, out)?;
    for (id, (src, dst)) in pairs.iter().enumerate() {
        write_hsc(dst, &corrupt_keyed(&read_hsc(src)?, &spec, id as u64)?)?;
    }
    let cfg = format!("command=add-noise\ninput={}\n{}# cube i (name order) uses noise stream i\n", input.display(), spec.describe());
    write_text(&cfg_path, &cfg)?;
    println!("corrupted {} cube(s) with {case}", pairs.len());
    Ok(())
}

pub fn denoise(checkpoint: &Path, input: &Path, out: &Path) -> anyhow::Result<()> {
    let (model, ckpt) = load_checkpoint(checkpoint)?;
    let (pairs, cfg_path) = io_pairs(input, out)?;
    for (src, dst) in &pairs {
        write_hsc(dst, &run_model(&model, &read_hsc(src)?)?)?;
    }
    let cfg = format!("command=denoise\ncheckpoint={}\ninput={}\n{}", checkpoint.display(), input.display(), ckpt.config);
    write_text(&cfg_path, &cfg)?;
    println!("denoised {} cube(s)", pairs.len());
    Ok(())
}

pub fn eval(reference: &Path, test: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let q = evaluate(&read_hsc(reference)?, &read_hsc(test)?)?;
    let mut csv = format!("# command=eval\n# ref={}\n# test={}\nmetric,band,value\n", reference.display(), test.display());
    for (b, p) in q.per_band_psnr.iter().enumerate() {
        csv += &format!("psnr,{b},{p}\n");
    }
    csv += &format!("mpsnr,all,{}\nmssim,all,{}\nsam,all,{}\nsam_skipped,all,{}\n", q.mpsnr, q.mssim, q.sam, q.sam_skipped);
    match out {
        Some(path) => {
            write_text(path, &csv)?;
            println!("mpsnr={:.4} mssim={:.4} sam={:.4}", q.mpsnr, q.mssim, q.sam);
        }
        None => print!("{csv}"),
    }
    Ok(())
}
