//! Training runs and the extractor ablation.
//!
//! A run is fully described by its [`ExperimentConfig`]. The config is
//! written as `experiment.cfg` and embedded in `model.rckp` and `loss.csv`;
//! passing it back through `--config` reproduces the run bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reconvset::data_io::{cube_dims, sample_patches, Cube};
use reconvset::extractors::block_param_count;
use reconvset::kernel_matrix::{count_biases, count_params, Scheme};
use reconvset::metrics::evaluate;
use reconvset::network::{denoise, parse_kv, save_checkpoint, train_with, TrainConfig, TrainLog, UNet, UNetConfig};
use reconvset::noise::{corrupt_keyed, NoiseKind, NoiseSpec};

use crate::files::{read_dir_cubes, write_text};
use crate::TrainArgs;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub patch: usize,
    pub patches_per_cube: usize,
}

impl ExperimentConfig {
    /// Everything except the network shape, which checkpoints already carry.
    fn run_kv(&self) -> String {
        format!("{}data={}\npatch={}\npatches_per_cube={}\n", self.train.to_kv(), self.data.display(), self.patch, self.patches_per_cube)
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}", self.unet.to_kv(), self.run_kv())
    }

    /// Defaults, overridden by the `--config` file, overridden by flags.
    pub fn resolve(args: &TrainArgs) -> anyhow::Result<Self> {
        let mut map = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        let mut set = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        set("extractor", args.extractor.map(|s| s.to_string()));
        set("epochs", args.epochs.map(|v| v.to_string()));
        set("seed", args.seed.map(|v| v.to_string()));
        set("lr0", args.lr.map(|v| v.to_string()));
        set("batch", args.batch.map(|v| v.to_string()));
        set("noise", args.noise.map(|v| v.to_string()));
        set("levels", args.levels.map(|v| v.to_string()));
        set("base_channels", args.base_channels.map(|v| v.to_string()));
        set("blocks_per_level", args.blocks_per_level.map(|v| v.to_string()));
        set("activation", args.activation.map(|v| v.to_string()));
        set("patch", args.patch.map(|v| v.to_string()));
        set("patches_per_cube", args.patches_per_cube.map(|v| v.to_string()));
        set("data", args.data.as_ref().map(|p| p.display().to_string()));

        let get = |key: &str, default: usize| -> anyhow::Result<usize> {
            map.get(key).map_or(Ok(default), |v| v.parse().with_context(|| format!("bad value '{v}' for {key}")))
        };
        let cfg = ExperimentConfig {
            unet: UNetConfig::from_kv(&map)?,
            train: TrainConfig::from_kv(&map)?,
            data: map.get("data").map(PathBuf::from).context("no training data: pass --data or a config with data=")?,
            patch: get("patch", 64)?,
            patches_per_cube: get("patches_per_cube", 8)?,
        };
        if cfg.patch == 0 || !cfg.patch.is_multiple_of(cfg.unet.spatial_multiple()) {
            bail!("patch {} must be a positive multiple of {}", cfg.patch, cfg.unet.spatial_multiple());
        }
        Ok(cfg)
    }
}

/// Cube `i` of the training set draws its patches with this seed.
fn patch_seed(seed: u64, i: usize) -> u64 {
    seed ^ ((i as u64 + 1) << 32)
}

fn training_patches(exp: &ExperimentConfig) -> anyhow::Result<Vec<Cube>> {
    let mut patches = Vec::new();
    for (i, cube) in read_dir_cubes(&exp.data)?.iter().enumerate() {
        let [b, _, _] = cube_dims("train", cube)?;
        patches.extend(sample_patches(cube, [b, exp.patch, exp.patch], exp.patches_per_cube, patch_seed(exp.train.seed, i))?);
    }
    Ok(patches)
}

/// Trains into `out`: `checkpoints/epoch_NNN.rckp`, `model.rckp`,
/// `loss.csv` and `experiment.cfg`.
fn run_training(exp: &ExperimentConfig, out: &Path, threads: usize) -> anyhow::Result<(UNet<f32>, TrainLog)> {
    let patches = training_patches(exp)?;
    let mut model = UNet::<f32>::new(exp.unet.clone(), &mut ChaCha8Rng::seed_from_u64(exp.train.seed))?;
    let cfg = TrainConfig { threads, ..exp.train.clone() };
    eprintln!("{}: {} patches, {} parameters", exp.unet.scheme, patches.len(), model.param_count());
    let log = train_with(&mut model, &patches, &cfg, Some(&out.join("checkpoints")), |e, loss| {
        eprintln!("  epoch {:>3}  lr {:.3e}  loss {loss:.6}", e + 1, cfg.lr_at(e));
    })?;

    let kv = exp.to_kv();
    write_text(&out.join("experiment.cfg"), &kv)?;
    let final_loss = log.epoch_loss.last().copied().unwrap_or(f64::NAN);
    save_checkpoint(&out.join("model.rckp"), &model, &format!("{}epochs_run={}\nloss={final_loss}\n", exp.run_kv(), log.epoch_loss.len()))?;
    let mut csv: String = kv.lines().map(|l| format!("# {l}\n")).collect();
    csv += "epoch,lr,loss\n";
    for (e, loss) in log.epoch_loss.iter().enumerate() {
        csv += &format!("{},{},{loss}\n", e + 1, cfg.lr_at(e));
    }
    write_text(&out.join("loss.csv"), &csv)?;
    Ok((model, log))
}

pub fn train_command(args: &TrainArgs, threads: usize) -> anyhow::Result<()> {
    let exp = ExperimentConfig::resolve(args)?;
    let (_, log) = run_training(&exp, &args.out, threads)?;
    println!("final loss {:.6}; model written to {}", log.epoch_loss.last().copied().unwrap_or(f64::NAN), args.out.join("model.rckp").display());
    Ok(())
}

/// Trains every scheme with identical data, seed and schedule, then scores
/// each on the same corrupted held-out cubes.
pub fn ablation(args: &TrainArgs, eval_data: &Path, eval_noise: NoiseKind, eval_seed: u64, threads: usize) -> anyhow::Result<()> {
    if args.extractor.is_some() {
        bail!("ablation always runs every extractor; drop --extractor");
    }
    let base = ExperimentConfig::resolve(args)?;
    let clean = read_dir_cubes(eval_data)?;
    let noise = NoiseSpec::new(eval_noise, eval_seed);
    let noisy = clean.iter().enumerate().map(|(i, c)| corrupt_keyed(c, &noise, i as u64)).collect::<Result<Vec<_>, _>>()?;

    let (m, k) = (base.unet.base_channels, base.unet.k);
    let mut csv: String = base.to_kv().lines().map(|l| format!("# {l}\n")).collect();
    csv += &format!("# eval_data={}\n", eval_data.display());
    csv += &noise.describe().lines().map(|l| format!("# eval_{l}\n")).collect::<String>();
    csv += "scheme,block_weights,block_biases,block_params,model_params,final_loss,noisy_mpsnr,mpsnr,mssim,sam\n";
    for scheme in Scheme::ALL {
        let exp = ExperimentConfig { unet: UNetConfig { scheme, ..base.unet.clone() }, ..base.clone() };
        let (model, log) = run_training(&exp, &args.out.join(scheme.name()), threads)?;
        let mut sums = [0.0; 4];
        for (c, x) in clean.iter().zip(&noisy) {
            let q = evaluate(c, &denoise(&model, x)?)?;
            for (s, v) in sums.iter_mut().zip([evaluate(c, x)?.mpsnr, q.mpsnr, q.mssim, q.sam]) {
                *s += v / clean.len() as f64;
            }
        }
        csv += &format!(
            "{scheme},{},{},{},{},{},{},{},{},{}\n",
            count_params(scheme, m, m, k, true),
            count_biases(scheme, m, true),
            block_param_count(scheme, m, m, k),
            model.param_count(),
            log.epoch_loss.last().copied().unwrap_or(f64::NAN),
            sums[0],
            sums[1],
            sums[2],
            sums[3]
        );
    }
    write_text(&args.out.join("ablation.csv"), &csv)?;
    println!("wrote {}", args.out.join("ablation.csv").display());
    Ok(())
}
