//! Residual U-Net built from extractor blocks, its ADAM training loop and
//! the `RCKP` checkpoint format.
//!
//! Layout at level `l` (width `M0 * 2^l`): encoder blocks, then a spatial
//! stride-2 downsampling conv; on the way up a `1x1x1` conv at low
//! resolution followed by nearest-neighbour upsampling, concatenation with
//! the skip, and decoder blocks. A zero-initialised `1x1x1` projection to
//! one channel is added to the input.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::convkit::{conv_forward, downsample_forward, upsample_nearest, ConvSpec, KernelSet};
use crate::data_io::{cube_dims, Cube};
use crate::error::{Error, Result};
use crate::extractors::{kernel_params, kernel_params_mut, record_conv, Activation, ExtractorBlock, ParamSlots, ParamView};
use crate::kernel_matrix::{concat_channels, Scheme};
use crate::noise::{corrupt_keyed, NoiseKind, NoiseSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub scheme: Scheme,
    pub blocks_per_level: usize,
    pub k: usize,
    pub activation: Activation,
    pub global_residual: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            scheme: Scheme::ReConvSet,
            blocks_per_level: 2,
            k: 3,
            activation: Activation::DEFAULT,
            global_residual: true,
        }
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn kv_get<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: V) -> Result<V> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad value '{s}' for {key}"))),
    }
}

impl UNetConfig {
    pub fn to_kv(&self) -> String {
        format!(
            "levels={}\nbase_channels={}\nextractor={}\nblocks_per_level={}\nk={}\nactivation={}\nskip_mode=concat\nglobal_residual={}\n",
            self.levels, self.base_channels, self.scheme, self.blocks_per_level, self.k, self.activation, self.global_residual
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = UNetConfig::default();
        if map.get("skip_mode").is_some_and(|s| s != "concat") {
            return Err(Error::Config("only skip_mode=concat is supported".into()));
        }
        let cfg = UNetConfig {
            levels: kv_get(map, "levels", d.levels)?,
            base_channels: kv_get(map, "base_channels", d.base_channels)?,
            scheme: kv_get(map, "extractor", d.scheme)?,
            blocks_per_level: kv_get(map, "blocks_per_level", d.blocks_per_level)?,
            k: kv_get(map, "k", d.k)?,
            activation: kv_get(map, "activation", d.activation)?,
            global_residual: kv_get(map, "global_residual", d.global_residual)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.blocks_per_level == 0 || self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
struct Level<T> {
    encoder: Vec<ExtractorBlock<T>>,
    /// Stride-2 conv into the next level; absent at the bottom.
    down: Option<KernelSet<T>>,
    /// `1x1x1` conv from the next level's width, applied before upsampling.
    up: Option<(ConvSpec, KernelSet<T>)>,
    decoder: Vec<ExtractorBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub config: UNetConfig,
    levels: Vec<Level<T>>,
    head: (ConvSpec, KernelSet<T>),
}

fn down_spec(m: usize, c: usize) -> ConvSpec {
    ConvSpec { out_channels: m, in_channels: c, kernel: [1, 2, 2], padding: [0; 3], bias: true }
}

/// The primitive operations a forward pass needs, evaluated either eagerly
/// or onto a tape.
trait Exec<T: Scalar> {
    type V: Clone;
    fn block(&mut self, b: &ExtractorBlock<T>, x: Self::V) -> Result<Self::V>;
    fn conv(&mut self, spec: &ConvSpec, ks: &KernelSet<T>, x: Self::V) -> Result<Self::V>;
    fn down(&mut self, ks: &KernelSet<T>, x: Self::V) -> Result<Self::V>;
    fn act(&mut self, a: Activation, x: Self::V) -> Result<Self::V>;
    fn up(&mut self, x: Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
}

struct Eager;

impl<T: Scalar> Exec<T> for Eager {
    type V = Tensor<T>;
    fn block(&mut self, b: &ExtractorBlock<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        b.extract(&x)
    }
    fn conv(&mut self, spec: &ConvSpec, ks: &KernelSet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        conv_forward(spec, ks, &x)
    }
    fn down(&mut self, ks: &KernelSet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        downsample_forward(ks, &x)
    }
    fn act(&mut self, a: Activation, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.apply(&x))
    }
    fn up(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        upsample_nearest(&x)
    }
    fn concat(&mut self, a: Tensor<T>, b: Tensor<T>) -> Result<Tensor<T>> {
        concat_channels(&[a, b])
    }
    fn add(&mut self, a: Tensor<T>, b: Tensor<T>) -> Result<Tensor<T>> {
        a.add(&b)
    }
}

struct Recorder<'a, T> {
    tape: &'a mut Tape<T>,
    slots: ParamSlots,
}

impl<T: Scalar> Recorder<'_, T> {
    fn kernel(&mut self, ks: &KernelSet<T>) -> Result<(Var, Option<Var>)> {
        let w = self.tape.param(self.slots.take(), ks.weights.clone())?;
        let b = match &ks.bias {
            Some(b) => Some(self.tape.param(self.slots.take(), Tensor::new(&[b.len()], b.clone())?)?),
            None => None,
        };
        Ok((w, b))
    }
}

impl<T: Scalar> Exec<T> for Recorder<'_, T> {
    type V = Var;
    fn block(&mut self, b: &ExtractorBlock<T>, x: Var) -> Result<Var> {
        b.record(self.tape, &mut self.slots, x)
    }
    fn conv(&mut self, spec: &ConvSpec, ks: &KernelSet<T>, x: Var) -> Result<Var> {
        record_conv(self.tape, &mut self.slots, spec, ks, x)
    }
    fn down(&mut self, ks: &KernelSet<T>, x: Var) -> Result<Var> {
        let (w, b) = self.kernel(ks)?;
        self.tape.downsample(x, w, b)
    }
    fn act(&mut self, a: Activation, x: Var) -> Result<Var> {
        match a {
            Activation::None => Ok(x),
            Activation::Relu => self.tape.leaky_relu(x, 0.0),
            Activation::LeakyRelu(s) => self.tape.leaky_relu(x, s),
        }
    }
    fn up(&mut self, x: Var) -> Result<Var> {
        self.tape.upsample(x)
    }
    fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.concat(&[a, b])
    }
    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.add(a, b)
    }
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let act = config.activation;
        let n = config.levels;
        let mut levels = Vec::with_capacity(n);
        for l in 0..n {
            let ch = config.width(l);
            let encoder = (0..config.blocks_per_level)
                .map(|i| {
                    let cin = if i == 0 && l == 0 { 1 } else { ch };
                    ExtractorBlock::new(config.scheme, cin, ch, config.k, act, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (down, up, decoder) = if l + 1 < n {
                let next = config.width(l + 1);
                let down = KernelSet::kaiming_uniform(&down_spec(next, ch), act.gain(), rng);
                let spec = ConvSpec::same(ch, next, [1, 1, 1], true)?;
                let up = (spec, KernelSet::kaiming_uniform(&spec, 1.0, rng));
                let decoder = (0..config.blocks_per_level)
                    .map(|i| ExtractorBlock::new(config.scheme, if i == 0 { 2 * ch } else { ch }, ch, config.k, act, rng))
                    .collect::<Result<Vec<_>>>()?;
                (Some(down), Some(up), decoder)
            } else {
                (None, None, Vec::new())
            };
            levels.push(Level { encoder, down, up, decoder });
        }
        let head_spec = ConvSpec::same(1, config.width(0), [1, 1, 1], true)?;
        Ok(UNet { config, levels, head: (head_spec, KernelSet::zeros(&head_spec)) })
    }

    fn run<E: Exec<T>>(&self, e: &mut E, input: E::V) -> Result<E::V> {
        let act = self.config.activation;
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut x = input.clone();
        for lv in &self.levels {
            for b in &lv.encoder {
                x = e.block(b, x)?;
            }
            if let Some(ks) = &lv.down {
                skips.push(x.clone());
                let d = e.down(ks, x)?;
                x = e.act(act, d)?;
            }
        }
        for lv in self.levels.iter().rev().skip(1) {
            let (spec, ks) = lv.up.as_ref().expect("non-bottom levels have an up conv");
            let u = e.conv(spec, ks, x)?;
            let u = e.up(u)?;
            x = e.concat(skips.pop().expect("one skip per level"), u)?;
            for b in &lv.decoder {
                x = e.block(b, x)?;
            }
        }
        let y = e.conv(&self.head.0, &self.head.1, x)?;
        if self.config.global_residual {
            e.add(input, y)
        } else {
            Ok(y)
        }
    }

    fn check_volume(&self, v: &Tensor<T>) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *v.shape() {
            [1, _, h, w] if h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok(()),
            ref s => Err(Error::shape("UNet::forward", format!("need a [1, B, H, W] volume with H and W multiples of {m}, got {s:?}"))),
        }
    }

    /// Forward pass on a `[1, B, H, W]` volume.
    pub fn forward_volume(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_volume(v)?;
        self.run(&mut Eager, v.clone())
    }

    /// Records the forward pass on `tape`. Parameters are registered in
    /// [`Self::params`] order, so gradient `i` belongs to parameter `i`.
    pub fn record(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.check_volume(tape.value(input)?)?;
        let mut r = Recorder { tape, slots: ParamSlots::default() };
        self.run(&mut r, input)
    }

    pub fn params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (l, lv) in self.levels.iter().enumerate() {
            for (i, b) in lv.encoder.iter().enumerate() {
                out.extend(b.params(&format!("enc{l}.block{i}")));
            }
            if let Some(ks) = &lv.down {
                kernel_params(&format!("down{l}"), ks, &mut out);
            }
        }
        for (l, lv) in self.levels.iter().enumerate().rev().skip(1) {
            kernel_params(&format!("up{l}"), &lv.up.as_ref().expect("up conv").1, &mut out);
            for (i, b) in lv.decoder.iter().enumerate() {
                out.extend(b.params(&format!("dec{l}.block{i}")));
            }
        }
        kernel_params("head", &self.head.1, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        let mut ups = Vec::new();
        for lv in self.levels.iter_mut() {
            for b in lv.encoder.iter_mut() {
                out.extend(b.params_mut());
            }
            if let Some(ks) = &mut lv.down {
                kernel_params_mut(ks, &mut out);
            }
            let mut tail = Vec::new();
            if let Some((_, ks)) = &mut lv.up {
                kernel_params_mut(ks, &mut tail);
            }
            for b in lv.decoder.iter_mut() {
                tail.extend(b.params_mut());
            }
            ups.push(tail);
        }
        for tail in ups.into_iter().rev() {
            out.extend(tail);
        }
        kernel_params_mut(&mut self.head.1, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        let ks = |k: &KernelSet<T>| KernelSet { weights: k.weights.cast(), bias: k.bias.as_ref().map(|b| b.iter().map(|v| U::from_f64(v.as_f64())).collect()) };
        let block = |b: &ExtractorBlock<T>| ExtractorBlock {
            scheme: b.scheme,
            in_channels: b.in_channels,
            out_channels: b.out_channels,
            k: b.k,
            layers: b.layers.iter().map(|(s, k)| (*s, ks(k))).collect(),
            compression: b.compression.as_ref().map(|(s, k)| (*s, ks(k))),
            activation: b.activation,
        };
        UNet {
            config: self.config.clone(),
            levels: self
                .levels
                .iter()
                .map(|lv| Level {
                    encoder: lv.encoder.iter().map(block).collect(),
                    down: lv.down.as_ref().map(ks),
                    up: lv.up.as_ref().map(|(s, k)| (*s, ks(k))),
                    decoder: lv.decoder.iter().map(block).collect(),
                })
                .collect(),
            head: (self.head.0, ks(&self.head.1)),
        }
    }

    /// L1 loss of one `(noisy, clean)` pair and the gradient of every parameter.
    pub fn loss_and_grads(&self, noisy: &Tensor<T>, clean: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.input(noisy.clone());
        let y = tape.input(clean.clone());
        let out = self.record(&mut tape, x)?;
        let loss = tape.l1_loss(out, y)?;
        let value = tape.value(loss)?.data()[0].as_f64();
        let grads = tape.backward(loss)?.grads;
        Ok((value, grads))
    }
}

impl UNet<f32> {
    /// Denoises a cube whose spatial extents are multiples of the level stride.
    pub fn forward_cube(&self, cube: &Cube) -> Result<Cube> {
        let [b, h, w] = cube_dims("forward_cube", cube)?;
        let out = self.forward_volume(&cube.reshape(&[1, b, h, w])?)?;
        out.reshape(&[b, h, w])
    }
}

/// Replicate-pads the spatial axes up to multiples of `m`.
fn pad_to_multiple(cube: &Cube, m: usize) -> Result<Cube> {
    let [b, h, w] = cube_dims("pad", cube)?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(cube.clone());
    }
    let src = cube.contiguous();
    Tensor::new(&[b, ph, pw], {
        let mut out = Vec::with_capacity(b * ph * pw);
        for band in 0..b {
            for r in 0..ph {
                let row = &src.data()[(band * h + r.min(h - 1)) * w..][..w];
                out.extend((0..pw).map(|c| row[c.min(w - 1)]));
            }
        }
        out
    })
}

/// Denoises a cube of any spatial size by edge-replicating up to the
/// level stride and cropping back.
pub fn denoise(model: &UNet<f32>, cube: &Cube) -> Result<Cube> {
    let [b, h, w] = cube_dims("denoise", cube)?;
    let padded = pad_to_multiple(cube, model.config.spatial_multiple())?;
    let out = model.forward_cube(&padded)?;
    if out.shape() == [b, h, w] {
        return Ok(out);
    }
    crate::data_io::crop(&out, 0, 0, h, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub noise: NoiseKind,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            halve_every: 5,
            epochs: 25,
            batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            noise: NoiseKind::BlindGaussian(30.0, 70.0),
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Learning rate for zero-based `epoch`: `lr0 * 0.5^(epoch / halve_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halve_every.max(1)) as i32)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr0={}\nhalve_every={}\nepochs={}\nbatch={}\nbeta1={}\nbeta2={}\neps={}\nseed={}\nnoise={}\n",
            self.lr0, self.halve_every, self.epochs, self.batch, self.beta1, self.beta2, self.eps, self.seed, self.noise
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            lr0: kv_get(map, "lr0", d.lr0)?,
            halve_every: kv_get(map, "halve_every", d.halve_every)?,
            epochs: kv_get(map, "epochs", d.epochs)?,
            batch: kv_get(map, "batch", d.batch)?,
            beta1: kv_get(map, "beta1", d.beta1)?,
            beta2: kv_get(map, "beta2", d.beta2)?,
            eps: kv_get(map, "eps", d.eps)?,
            seed: kv_get(map, "seed", d.seed)?,
            noise: kv_get(map, "noise", d.noise)?,
            threads: kv_get(map, "threads", d.threads)?,
        })
    }
}

/// Bias-corrected ADAM state, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape("adam_step", "parameter and gradient lists disagree"));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            p[i] = T::from_f64(p[i].as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Noise seed for one epoch, so every epoch sees fresh corruption.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sample_grads(model: &UNet<f32>, pairs: &[(Tensor<f32>, Tensor<f32>)], threads: usize) -> Result<Vec<(f64, Vec<Tensor<f32>>)>> {
    if threads <= 1 || pairs.len() <= 1 {
        return pairs.iter().map(|(x, y)| model.loss_and_grads(x, y)).collect();
    }
    let chunk = pairs.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|(x, y)| model.loss_and_grads(x, y)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::State("training worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// Trains on clean patches with on-the-fly noise. Per-sample gradients are
/// averaged in a fixed order, so results do not depend on `threads`.
/// With `checkpoint_dir` set, writes `epoch_NNN.rckp` after every epoch.
pub fn train(model: &mut UNet<f32>, clean: &[Cube], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainLog> {
    train_with(model, clean, cfg, checkpoint_dir, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with(
    model: &mut UNet<f32>,
    clean: &[Cube],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    if clean.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dims = cube_dims("train", &clean[0])?;
    if clean.iter().any(|c| c.shape() != dims) {
        return Err(Error::shape("train", "all training patches must share one shape"));
    }
    let [b, h, w] = dims;
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..clean.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch).rotate_left(17)));
        let noise = NoiseSpec::new(cfg.noise, epoch_seed(cfg.seed, epoch));
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch) {
            let pairs = batch
                .iter()
                .map(|&i| {
                    let noisy = corrupt_keyed(&clean[i], &noise, i as u64)?;
                    Ok((noisy.reshape(&[1, b, h, w])?, clean[i].reshape(&[1, b, h, w])?))
                })
                .collect::<Result<Vec<_>>>()?;
            let results = sample_grads(model, &pairs, cfg.threads)?;
            let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, lr, loss });
            }
            let n = results.len() as f64;
            let mut acc: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.numel()]).collect();
            for (_, grads) in &results {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, &v) in a.iter_mut().zip(g.data()) {
                        *x += v as f64;
                    }
                }
            }
            let mean: Vec<Vec<f32>> = acc.into_iter().map(|a| a.into_iter().map(|v| (v / n) as f32).collect()).collect();
            let grad_refs: Vec<&[f32]> = mean.iter().map(Vec::as_slice).collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut adam, lr)?;
            log.step_loss.push(loss);
            epoch_losses.push(loss);
            step += 1;
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        log.epoch_loss.push(mean);
        if let Some(dir) = checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("epoch_{:03}.rckp", epoch + 1));
            let extra = format!("{}epoch={}\nloss={mean}\n", cfg.to_kv(), epoch + 1);
            save_checkpoint(&path, model, &extra)?;
            log.checkpoints.push(path);
        }
        on_epoch(epoch, mean);
    }
    Ok(log)
}

pub const CKPT_MAGIC: &[u8; 4] = b"RCKP";
pub const CKPT_VERSION: u32 = 1;

/// Decoded checkpoint: the config text block and named tensors in
/// registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn encode_checkpoint(model: &UNet<f32>, extra_config: &str) -> Vec<u8> {
    let config = format!("{}{}", model.config.to_kv(), extra_config);
    let params = model.params();
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    u32le(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    u32le(&mut out, params.len());
    for p in params {
        u32le(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        u32le(&mut out, p.shape.len());
        for &d in &p.shape {
            u32le(&mut out, d);
        }
        for v in p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            detail: format!("truncated checkpoint: {what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos as u64;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format { offset: at, detail: format!("{what} is not UTF-8") })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic, expected \"RCKP\"".into() });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(Error::Format { offset: 4, detail: format!("unsupported checkpoint version {version}") });
    }
    let n = r.u32("config length")?;
    let config = r.text(n, "config block")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = r.text(n, "tensor name")?;
        let nd = r.u32("rank")?;
        let shape = (0..nd).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format {
            offset: r.pos as u64,
            detail: format!("tensor {name} shape {shape:?} overflows"),
        })?;
        let data = r.take(numel, &name)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, detail: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: &Path, model: &UNet<f32>, extra_config: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(model, extra_config)).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from a checkpoint, checking every tensor name and shape.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<UNet<f32>> {
    let cfg = UNetConfig::from_kv(&parse_kv(&ckpt.config)?)?;
    let mut model = UNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|p| (p.name, p.shape)).collect();
    if expected.len() != ckpt.tensors.len() {
        return Err(Error::Config(format!("checkpoint holds {} tensors, config implies {}", ckpt.tensors.len(), expected.len())));
    }
    for ((name, shape), (got_name, got_shape, _)) in expected.iter().zip(&ckpt.tensors) {
        if name != got_name || shape != got_shape {
            return Err(Error::Config(format!("checkpoint tensor {got_name} {got_shape:?} does not match expected {name} {shape:?}")));
        }
    }
    for (dst, (_, _, src)) in model.params_mut().into_iter().zip(&ckpt.tensors) {
        dst.copy_from_slice(src);
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<(UNet<f32>, Checkpoint)> {
    let ckpt = decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
    Ok((model_from_checkpoint(&ckpt)?, ckpt))
}
