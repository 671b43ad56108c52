//! Generator and discriminator construction and the alternating
//! adversarial training loop.
//!
//! A training "step" is one discriminator update followed by one generator
//! update on the same real batch:
//!
//! ```text
//! d_loss = (bce(D(x), 1) + bce(D(G(z1)), 0)) / 2      update D only
//! g_loss = bce(D(G(z2)), 1)                           update G only, D frozen
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::{self, GrayImage, NamedTensors};
use crate::error::{Error, Result};
use crate::lossopt::{bce, bce_backward, AdamConfig, AdamState};
use crate::nn::{ConvSpec, ForwardCache, Layer, LayerKind, LayerSpec, Mode};
use crate::phantom::Dataset;
use crate::tensor::{Rng, Tensor};

pub const LATENT_DIM: usize = 100;
pub const IMAGE_SIZE: usize = 64;
/// Channels of the last hidden generator layer; doubled per earlier stage.
const BASE_CHANNELS: usize = 32;
const BASE_RESOLUTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub role: Role,
    pub layers: Vec<LayerSpec>,
    pub latent_dim: usize,
    pub image_size: usize,
    pub image_channels: usize,
}

/// What [`NetworkSpec::audit`] verified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub weighted_layers: usize,
    pub batchnorm_layers: usize,
    pub leaky_relu_layers: usize,
    pub head: LayerKind,
}

fn stages(image_size: usize) -> Result<usize> {
    if image_size < 16 || !image_size.is_power_of_two() {
        return Err(Error::Config(format!("image size must be a power of two >= 16, got {image_size}")));
    }
    Ok(image_size.trailing_zeros() as usize - BASE_RESOLUTION.trailing_zeros() as usize)
}

impl NetworkSpec {
    /// Dense projection to `[C, 4, 4]`, then stride-2 transposed convolutions
    /// halving the channels down to 32 and finally to one image channel.
    /// Batchnorm and leaky ReLU follow every hidden layer; tanh is the head.
    pub fn generator(latent_dim: usize, image_size: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be >= 1".into()));
        }
        let n = stages(image_size)?;
        let top = BASE_CHANNELS << (n - 1);
        let mut layers = vec![
            LayerSpec::Dense { in_features: latent_dim, out_features: top * BASE_RESOLUTION * BASE_RESOLUTION },
            LayerSpec::Reshape { shape: vec![top, BASE_RESOLUTION, BASE_RESOLUTION] },
            LayerSpec::batchnorm(top),
            LayerSpec::leaky_relu(),
        ];
        let mut c = top;
        for stage in 0..n {
            let out = if stage + 1 == n { 1 } else { c / 2 };
            layers.push(LayerSpec::ConvTranspose2d(ConvSpec::new(c, out, 4, 2, 1)));
            if stage + 1 < n {
                layers.push(LayerSpec::batchnorm(out));
                layers.push(LayerSpec::leaky_relu());
            }
            c = out;
        }
        layers.push(LayerSpec::Tanh);
        Ok(NetworkSpec { role: Role::Generator, layers, latent_dim, image_size, image_channels: 1 })
    }

    /// Stride-2 convolutions from one channel up to the generator's widest
    /// stage, leaky ReLU after each, no batchnorm; flatten, dense to one
    /// logit, sigmoid head.
    pub fn discriminator(image_size: usize) -> Result<Self> {
        let n = stages(image_size)?;
        let mut layers = Vec::new();
        let mut c_in = 1;
        for stage in 0..n {
            let out = BASE_CHANNELS << stage;
            layers.push(LayerSpec::Conv2d(ConvSpec::new(c_in, out, 4, 2, 1)));
            layers.push(LayerSpec::leaky_relu());
            c_in = out;
        }
        let flat = c_in * BASE_RESOLUTION * BASE_RESOLUTION;
        layers.push(LayerSpec::Reshape { shape: vec![flat] });
        layers.push(LayerSpec::Dense { in_features: flat, out_features: 1 });
        layers.push(LayerSpec::Sigmoid);
        Ok(NetworkSpec { role: Role::Discriminator, layers, latent_dim: LATENT_DIM, image_size, image_channels: 1 })
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        match self.role {
            Role::Generator => vec![batch, self.latent_dim],
            Role::Discriminator => vec![batch, self.image_channels, self.image_size, self.image_size],
        }
    }

    pub fn expected_output_shape(&self, batch: usize) -> Vec<usize> {
        match self.role {
            Role::Generator => vec![batch, self.image_channels, self.image_size, self.image_size],
            Role::Discriminator => vec![batch, 1],
        }
    }

    /// Propagates `[batch, ..]` through every layer.
    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape(batch);
        for layer in &self.layers {
            layer.validate()?;
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Checks the architecture rules: every hidden weighted layer is followed
    /// (after an optional reshape) by leaky ReLU, with batchnorm in between
    /// exactly when this is the generator; the last weighted layer feeds the
    /// head directly; the head is tanh for the generator and sigmoid for the
    /// discriminator; shapes propagate to the expected output.
    pub fn audit(&self) -> Result<AuditReport> {
        let fail = |m: String| Err(Error::Audit(m));
        let (head, wants_bn) = match self.role {
            Role::Generator => (LayerKind::Tanh, true),
            Role::Discriminator => (LayerKind::Sigmoid, false),
        };
        let kinds: Vec<LayerKind> = self.layers.iter().map(LayerSpec::kind).collect();
        if kinds.last() != Some(&head) {
            return fail(format!("{:?} must end in {head}, found {:?}", self.role, kinds.last()));
        }
        let weighted: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i].is_weighted()).collect();
        let Some(&last_weighted) = weighted.last() else {
            return fail("network has no weighted layer".into());
        };
        if kinds[last_weighted + 1..] != [head] {
            return fail(format!("the output layer must feed {head} directly, found {:?}", &kinds[last_weighted + 1..]));
        }
        let mut report = AuditReport { weighted_layers: weighted.len(), batchnorm_layers: 0, leaky_relu_layers: 0, head };
        for (w, &i) in weighted.iter().enumerate() {
            if i == last_weighted {
                break;
            }
            let next = weighted[w + 1];
            let between: Vec<LayerKind> =
                kinds[i + 1..next].iter().copied().filter(|&k| k != LayerKind::Reshape).collect();
            let expected: &[LayerKind] = if wants_bn {
                &[LayerKind::BatchNorm2d, LayerKind::LeakyRelu]
            } else {
                &[LayerKind::LeakyRelu]
            };
            if between != expected {
                return fail(format!("hidden layer {i} ({}) is followed by {between:?}, expected {expected:?}", kinds[i]));
            }
        }
        report.batchnorm_layers = kinds.iter().filter(|&&k| k == LayerKind::BatchNorm2d).count();
        report.leaky_relu_layers = kinds.iter().filter(|&&k| k == LayerKind::LeakyRelu).count();
        if !wants_bn && report.batchnorm_layers != 0 {
            return fail(format!("discriminator has {} batchnorm layers", report.batchnorm_layers));
        }
        if kinds[..kinds.len() - 1].iter().any(|&k| k == LayerKind::Tanh || k == LayerKind::Sigmoid) {
            return fail("tanh/sigmoid may only appear as the head".into());
        }
        let out = self.output_shape(2)?;
        if out != self.expected_output_shape(2) {
            return fail(format!("output shape {out:?}, expected {:?}", self.expected_output_shape(2)));
        }
        Ok(report)
    }
}

/// Input gradient, when requested, and parameter gradients in layer order.
pub type NetworkGradients = (Option<Tensor<f32>>, Vec<Tensor<f32>>);

/// A layer stack with parameters, run in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<f32>>,
}

impl Network {
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.audit()?;
        let layers = spec.layers.iter().map(|l| Layer::new(l.clone(), rng)).collect::<Result<_>>()?;
        Ok(Network { spec, layers })
    }

    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<(Tensor<f32>, Vec<ForwardCache<f32>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&h, mode)?;
            caches.push(cache);
            h = y;
        }
        Ok((h, caches))
    }

    /// Forward pass without keeping caches; train mode still updates
    /// batchnorm running statistics.
    pub fn predict(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Returns the input gradient (if requested) and parameter gradients in
    /// [`Network::params`] order (empty if not requested).
    pub fn backward(
        &self,
        grad_y: &Tensor<f32>,
        caches: &[ForwardCache<f32>],
        need_input: bool,
        need_params: bool,
    ) -> Result<NetworkGradients> {
        if caches.len() != self.layers.len() {
            return Err(Error::Config(format!("{} caches for {} layers", caches.len(), self.layers.len())));
        }
        let mut grad = grad_y.clone();
        let mut per_layer: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(self.layers.len());
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want_input = i > 0 || need_input;
            let g = layer.backward(&grad, cache, want_input, need_params)?;
            per_layer.push(g.params);
            match g.input {
                Some(gx) => grad = gx,
                None => break,
            }
        }
        let input = need_input.then_some(grad);
        let params = per_layer.into_iter().rev().flatten().collect();
        Ok((input, params))
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// CRC-32 over the bits of every trainable tensor.
    pub fn param_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.params() {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Every stored tensor as `<prefix>.<layer index>.<name>`.
    pub fn named_tensors(&self, prefix: &str) -> NamedTensors {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_tensors().into_iter().map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t.clone()))
            })
            .collect()
    }

    /// Restores every tensor named `<prefix>.*`; all must be present with
    /// matching shapes and no extra `<prefix>.*` names are allowed.
    pub fn load_named(&mut self, prefix: &str, tensors: &NamedTensors) -> Result<()> {
        let mut expected = 0;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, slot) in layer.named_tensors_mut() {
                expected += 1;
                let name = format!("{prefix}.{i}.{n}");
                let t = tensors
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        let dotted = format!("{prefix}.");
        let found = tensors.iter().filter(|(k, _)| k.starts_with(&dotted)).count();
        if found != expected {
            return Err(Error::Format(format!("checkpoint has {found} `{prefix}.*` tensors, expected {expected}")));
        }
        Ok(())
    }
}

pub fn build_generator(latent_dim: usize, image_size: usize, rng: &mut Rng) -> Result<Network> {
    Network::new(NetworkSpec::generator(latent_dim, image_size)?, rng)
}

pub fn build_discriminator(image_size: usize, rng: &mut Rng) -> Result<Network> {
    Network::new(NetworkSpec::discriminator(image_size)?, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of steps; one step is one D update and one G update.
    pub steps: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub sample_every: usize,
    pub checkpoint_every: usize,
    /// Images per sample grid.
    pub sample_count: usize,
    /// Noise seed for sample grids, fixed so grids are comparable over time.
    pub sample_seed: u64,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 64,
            latent_dim: LATENT_DIM,
            seed: 0,
            sample_every: 500,
            checkpoint_every: 1000,
            sample_count: 16,
            sample_seed: 7,
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batchnorm, got {}", self.batch_size));
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.sample_every < 1 || self.checkpoint_every < 1 || self.sample_count < 1 {
            return bad("sample_every, checkpoint_every and sample_count must be >= 1".into());
        }
        self.adam_g.validate()?;
        self.adam_d.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Sequential pass over a seeded permutation, reshuffled after each pass.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(len: usize, rng: Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut b = Batcher { order: Vec::new(), cursor: 0, rng };
        b.order = b.rng.permutation(len);
        Ok(b)
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = self.rng.permutation(self.order.len());
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Copies the selected `[1, H, W]` items of `images` into one batch.
pub fn gather(images: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let plane: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        if i >= n {
            return Err(Error::Shape(format!("index {i} outside a batch of {n}")));
        }
        data.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    Ok(Tensor::from_parts(shape, data))
}

/// Networks, optimizer moments, noise stream and loss history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Network,
    pub discriminator: Network,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
    pub noise: Rng,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

fn adam_for(net: &Network, config: AdamConfig) -> Result<AdamState<f32>> {
    let shapes = net.param_shapes();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    AdamState::new(config, &refs)
}

impl TrainState {
    /// Fresh networks; generator, discriminator and noise use separate
    /// streams of `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(config.latent_dim, IMAGE_SIZE, &mut Rng::derive(config.seed, 0))?;
        let discriminator = build_discriminator(IMAGE_SIZE, &mut Rng::derive(config.seed, 1))?;
        Ok(TrainState {
            opt_g: adam_for(&generator, config.adam_g)?,
            opt_d: adam_for(&discriminator, config.adam_d)?,
            generator,
            discriminator,
            noise: Rng::derive(config.seed, 2),
            step: 0,
            history: Vec::new(),
        })
    }

    fn latent(&mut self, batch: usize) -> Result<Tensor<f32>> {
        Tensor::randn(&[batch, self.generator.spec.latent_dim], &mut self.noise)
    }

    /// Discriminator half-step; returns `d_loss`. Only D's parameters move
    /// (G's batchnorm running statistics still advance). Non-finite scores
    /// give a NaN loss and no update.
    pub fn d_step(&mut self, real: &Tensor<f32>) -> Result<f64> {
        let b = real.shape()[0];
        let z = self.latent(b)?;
        let fake = self.generator.predict(&z, Mode::Train)?;
        let both = Tensor::concat_outer(&[real, &fake])?;
        let (scores, caches) = self.discriminator.forward(&both, Mode::Train)?;
        let mut labels = vec![1f32; b];
        labels.resize(2 * b, 0.0);
        let labels = Tensor::from_vec(&[2 * b, 1], labels)?;
        // Equal halves, so the mean over both is the average of the two means.
        if !scores.all_finite() {
            return Ok(f64::NAN);
        }
        let d_loss = 0.5 * (bce(&scores.slice_outer(0, b)?, &labels.slice_outer(0, b)?)?
            + bce(&scores.slice_outer(b, b)?, &labels.slice_outer(b, b)?)?);
        let grad = bce_backward(&scores, &labels)?;
        let (_, grads) = self.discriminator.backward(&grad, &caches, false, true)?;
        self.opt_d.step(self.discriminator.params_mut(), &grads)?;
        Ok(d_loss)
    }

    /// Generator half-step against a frozen discriminator; returns `g_loss`,
    /// or NaN without an update if the scores are non-finite.
    pub fn g_step(&mut self, batch: usize) -> Result<f64> {
        let z = self.latent(batch)?;
        let (fake, g_caches) = self.generator.forward(&z, Mode::Train)?;
        let (scores, d_caches) = self.discriminator.forward(&fake, Mode::Train)?;
        if !scores.all_finite() {
            return Ok(f64::NAN);
        }
        let labels = Tensor::create(&[batch, 1], 1f32)?;
        let g_loss = bce(&scores, &labels)?;
        let grad = bce_backward(&scores, &labels)?;
        let (grad_fake, _) = self.discriminator.backward(&grad, &d_caches, true, false)?;
        let grad_fake = grad_fake.expect("input gradient was requested");
        let (_, grads) = self.generator.backward(&grad_fake, &g_caches, false, true)?;
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        Ok(g_loss)
    }
}

/// One D update then one G update; appends and returns the loss record.
pub fn train_step(state: &mut TrainState, real: &Tensor<f32>) -> Result<LossRecord> {
    let b = match *real.shape() {
        [b, 1, h, w] if h == state.generator.spec.image_size && w == h => b,
        _ => return Err(Error::Shape(format!("real batch must be [B, 1, 64, 64], got {:?}", real.shape()))),
    };
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("batch of {b} images")));
    }
    let d_loss = state.d_step(real)?;
    let g_loss = if d_loss.is_finite() { state.g_step(b)? } else { f64::NAN };
    let record = LossRecord { step: state.step, d_loss, g_loss };
    if !(d_loss.is_finite() && g_loss.is_finite()) {
        return Err(Error::NonFiniteLoss { step: state.step, d_loss, g_loss });
    }
    state.step += 1;
    state.history.push(record);
    Ok(record)
}

/// `n` images from fixed-seed noise with batchnorm in eval mode, mapped to
/// integers in `[0, 255]` by `round(255 (x + 1) / 2)`.
pub fn sample(generator: &Network, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let raw = generate(generator, n, seed)?;
    Ok(raw.map(|v| dataio::quantize(v) as f32))
}

/// Raw generator output in `[-1, 1]` for `n` latent draws from `seed`.
pub fn generate(generator: &Network, n: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let z = Tensor::randn(&[n, generator.spec.latent_dim], &mut Rng::new(seed))?;
    generator.clone().predict(&z, Mode::Eval)
}

/// Discriminator probabilities for a batch of `[N, 1, H, W]` images in `[-1, 1]`.
pub fn score(discriminator: &Network, images: &Tensor<f32>) -> Result<Vec<f32>> {
    Ok(discriminator.clone().predict(images, Mode::Eval)?.into_data())
}

pub fn sample_grid(generator: &Network, n: usize, seed: u64) -> Result<GrayImage> {
    let images = sample(generator, n, seed)?;
    let size = generator.spec.image_size;
    let tiles = (0..n)
        .map(|i| GrayImage::from_tensor(&images.slice_outer(i, 1)?.reshape(&[1, size, size])?))
        .collect::<Result<Vec<_>>>()?;
    dataio::image_grid(&tiles, dataio::default_grid_cols(n))
}

pub fn checkpoint_tensors(state: &TrainState) -> NamedTensors {
    let mut t = state.generator.named_tensors("g");
    t.extend(state.discriminator.named_tensors("d"));
    t
}

/// Rebuilds the generator stored under `g.*` in a checkpoint. The latent
/// size is read off the projection weight.
pub fn generator_from_checkpoint(tensors: &NamedTensors) -> Result<Network> {
    let latent_dim = tensors
        .iter()
        .find(|(name, _)| name == "g.0.weight")
        .and_then(|(_, t)| match *t.shape() {
            [_, latent] => Some(latent),
            _ => None,
        })
        .ok_or_else(|| Error::Format("checkpoint has no generator projection `g.0.weight`".into()))?;
    let mut g = build_generator(latent_dim, IMAGE_SIZE, &mut Rng::new(0))?;
    g.load_named("g", tensors)?;
    Ok(g)
}

pub fn discriminator_from_checkpoint(tensors: &NamedTensors) -> Result<Network> {
    let mut d = build_discriminator(IMAGE_SIZE, &mut Rng::new(0))?;
    d.load_named("d", tensors)?;
    Ok(d)
}

/// Locations of everything [`train`] writes under its output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn sample(&self, step: usize) -> PathBuf {
        self.root.join("samples").join(format!("step_{step}.pgm"))
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join("ckpt").join(format!("step_{step}"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Generator before the first update.
    pub initial_generator: Network,
}

/// Runs `config.steps` steps, writing `losses.csv`, plus sample grids and
/// checkpoints at step 0, at every multiple of `sample_every` (grids) or
/// `checkpoint_every` (checkpoints), and at the end. Grid and checkpoint names carry
/// the number of completed steps. `progress` sees every record.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = RunLayout::new(out);
    for dir in [out.join("samples"), out.join("ckpt")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut state = TrainState::new(config)?;
    let initial_generator = state.generator.clone();
    let mut batcher = Batcher::new(dataset.len(), Rng::derive(config.seed, 3))?;
    let emit_sample = |state: &TrainState, done: usize| -> Result<()> {
        let grid = sample_grid(&state.generator, config.sample_count, config.sample_seed)?;
        dataio::write_image(&layout.sample(done), &grid)
    };
    emit_sample(&state, 0)?;
    dataio::save_checkpoint(&layout.checkpoint(0), &checkpoint_tensors(&state))?;

    for step in 0..config.steps {
        let batch = gather(&dataset.images, &batcher.next_indices(config.batch_size))?;
        let record = match train_step(&mut state, &batch) {
            Ok(r) => r,
            Err(e) => {
                dataio::write_loss_csv(&layout.losses(), &state.history)?;
                return Err(e);
            }
        };
        progress(&record);
        let done = step + 1;
        if done % config.sample_every == 0 || done == config.steps {
            emit_sample(&state, done)?;
        }
        if done % config.checkpoint_every == 0 || done == config.steps {
            dataio::save_checkpoint(&layout.checkpoint(done), &checkpoint_tensors(&state))?;
        }
    }
    dataio::write_loss_csv(&layout.losses(), &state.history)?;
    Ok(TrainOutcome { state, initial_generator })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowMean {
    pub from: usize,
    pub to: usize,
    /// `None` if no record falls inside the window.
    pub d_mean: Option<f64>,
    pub g_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsReport {
    /// Step of the first record where `sign(d - g)` differs from the last
    /// non-zero sign before it.
    pub first_crossing_step: Option<usize>,
    pub window_means: Vec<WindowMean>,
    /// Strict local minima plus maxima of `(d, g)` within the final 20%.
    pub extrema_counts: (usize, usize),
    /// Pearson correlation of the first differences of `d` and `g`; absent
    /// when either difference series is constant.
    pub anticorrelation: Option<f64>,
}

fn local_extrema(xs: &[f64]) -> usize {
    xs.windows(3)
        .filter(|w| (w[1] > w[0] && w[1] > w[2]) || (w[1] < w[0] && w[1] < w[2]))
        .count()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Training-dynamics summary over inclusive step windows.
pub fn analyze_losses(log: &[LossRecord], windows: &[(usize, usize)]) -> Result<DynamicsReport> {
    if log.len() < 3 {
        return Err(Error::InvalidValue(format!("loss analysis needs >= 3 records, got {}", log.len())));
    }
    let mut first_crossing_step = None;
    let mut sign = std::cmp::Ordering::Equal;
    for r in log {
        let s = r.d_loss.partial_cmp(&r.g_loss).unwrap_or(std::cmp::Ordering::Equal);
        if s.is_ne() {
            if sign.is_ne() && s != sign {
                first_crossing_step = Some(r.step);
                break;
            }
            sign = s;
        }
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let window_means = windows
        .iter()
        .map(|&(from, to)| {
            let inside: Vec<&LossRecord> = log.iter().filter(|r| (from..=to).contains(&r.step)).collect();
            WindowMean {
                from,
                to,
                d_mean: mean(inside.iter().map(|r| r.d_loss).collect()),
                g_mean: mean(inside.iter().map(|r| r.g_loss).collect()),
            }
        })
        .collect();
    let tail = &log[log.len() - log.len().div_ceil(5)..];
    let d: Vec<f64> = tail.iter().map(|r| r.d_loss).collect();
    let g: Vec<f64> = tail.iter().map(|r| r.g_loss).collect();
    let diff = |f: fn(&LossRecord) -> f64| log.windows(2).map(|w| f(&w[1]) - f(&w[0])).collect::<Vec<_>>();
    Ok(DynamicsReport {
        first_crossing_step,
        window_means,
        extrema_counts: (local_extrema(&d), local_extrema(&g)),
        anticorrelation: pearson(&diff(|r| r.d_loss), &diff(|r| r.g_loss)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig { batch_size: 8, seed, ..TrainConfig::default() }
    }

    fn real_batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::uniform(&[n, 1, 64, 64], -1.0, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn generator_matches_the_decided_stack() {
        let spec = NetworkSpec::generator(100, 64).unwrap();
        let report = spec.audit().unwrap();
        assert_eq!(report.head, LayerKind::Tanh);
        assert_eq!(report.weighted_layers, 5);
        assert_eq!(report.batchnorm_layers, 4);
        assert_eq!(spec.output_shape(3).unwrap(), vec![3, 1, 64, 64]);
        let g = build_generator(100, 64, &mut Rng::new(1)).unwrap();
        // 100*4096+4096, then 4 transposed convs with k=4 and 4 batchnorms.
        assert_eq!(g.param_count(), 1_103_521);
    }

    #[test]
    fn discriminator_matches_the_decided_stack() {
        let spec = NetworkSpec::discriminator(64).unwrap();
        let report = spec.audit().unwrap();
        assert_eq!(report.head, LayerKind::Sigmoid);
        assert_eq!(report.batchnorm_layers, 0);
        assert_eq!(report.leaky_relu_layers, 4);
        assert_eq!(spec.output_shape(5).unwrap(), vec![5, 1]);
        let d = build_discriminator(64, &mut Rng::new(1)).unwrap();
        assert_eq!(d.param_count(), 693_217);
    }

    #[test]
    fn other_image_sizes() {
        for size in [16, 32, 128] {
            assert_eq!(NetworkSpec::generator(8, size).unwrap().output_shape(2).unwrap(), vec![2, 1, size, size]);
            assert_eq!(NetworkSpec::discriminator(size).unwrap().output_shape(2).unwrap(), vec![2, 1]);
        }
        assert!(NetworkSpec::generator(100, 48).is_err());
        assert!(NetworkSpec::generator(100, 8).is_err());
    }

    #[test]
    fn audit_rejects_rule_violations() {
        let mut g = NetworkSpec::generator(100, 64).unwrap();
        g.layers.remove(2);
        assert!(matches!(g.audit(), Err(Error::Audit(_))));

        let mut g = NetworkSpec::generator(100, 64).unwrap();
        let n = g.layers.len();
        g.layers.insert(n - 1, LayerSpec::batchnorm(1));
        assert!(g.audit().is_err());

        let mut g = NetworkSpec::generator(100, 64).unwrap();
        *g.layers.last_mut().unwrap() = LayerSpec::Sigmoid;
        assert!(g.audit().is_err());

        let mut d = NetworkSpec::discriminator(64).unwrap();
        d.layers.insert(1, LayerSpec::batchnorm(32));
        assert!(d.audit().is_err());

        let mut d = NetworkSpec::discriminator(64).unwrap();
        d.layers[1] = LayerSpec::Tanh;
        assert!(d.audit().is_err());
    }

    #[test]
    fn forward_ranges() {
        let mut g = build_generator(100, 64, &mut Rng::new(2)).unwrap();
        let z = Tensor::randn(&[4, 100], &mut Rng::new(3)).unwrap();
        let (x, _) = g.forward(&z, Mode::Train).unwrap();
        assert_eq!(x.shape(), &[4, 1, 64, 64]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = build_discriminator(64, &mut Rng::new(4)).unwrap();
        let p = score(&d, &x).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, score(&d, &x).unwrap());
    }

    #[test]
    fn initial_losses_are_near_ln2() {
        for seed in 0..20 {
            let mut state = TrainState::new(&small_config(seed)).unwrap();
            let r = train_step(&mut state, &real_batch(8, 100 + seed)).unwrap();
            assert!((0.2..=2.0).contains(&r.d_loss) && (0.2..=2.0).contains(&r.g_loss), "{r:?}");
            assert!((r.d_loss - 2f64.ln()).abs() < 0.1 && (r.g_loss - 2f64.ln()).abs() < 0.1, "{r:?}");
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut state = TrainState::new(&small_config(5)).unwrap();
            let batch = real_batch(8, 1);
            (0..3).map(|_| train_step(&mut state, &batch).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.d_loss.to_bits(), y.d_loss.to_bits());
            assert_eq!(x.g_loss.to_bits(), y.g_loss.to_bits());
        }
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let frozen = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let config = TrainConfig { adam_g: frozen, adam_d: frozen, ..small_config(2) };
        let mut state = TrainState::new(&config).unwrap();
        let (g0, d0) = (state.generator.param_checksum(), state.discriminator.param_checksum());
        train_step(&mut state, &real_batch(8, 3)).unwrap();
        assert_eq!(state.generator.param_checksum(), g0);
        assert_eq!(state.discriminator.param_checksum(), d0);
    }

    #[test]
    fn half_steps_leave_the_other_network_alone() {
        let mut state = TrainState::new(&small_config(9)).unwrap();
        let batch = real_batch(8, 4);
        for _ in 0..2 {
            let (g, d) = (state.generator.param_checksum(), state.discriminator.param_checksum());
            state.d_step(&batch).unwrap();
            assert_eq!(state.generator.param_checksum(), g);
            assert_ne!(state.discriminator.param_checksum(), d);
            let d = state.discriminator.param_checksum();
            state.g_step(8).unwrap();
            assert_eq!(state.discriminator.param_checksum(), d);
            assert_ne!(state.generator.param_checksum(), g);
        }
    }

    #[test]
    fn degenerate_and_misshapen_batches() {
        let mut state = TrainState::new(&small_config(1)).unwrap();
        assert!(matches!(train_step(&mut state, &real_batch(1, 0)), Err(Error::DegenerateBatch(_))));
        let wrong = Tensor::zeros(&[2, 1, 32, 32]).unwrap();
        assert!(matches!(train_step(&mut state, &wrong), Err(Error::Shape(_))));
        assert!(state.history.is_empty());
    }

    #[test]
    fn sample_range_and_determinism() {
        let g = build_generator(100, 64, &mut Rng::new(6)).unwrap();
        let a = sample(&g, 5, 11).unwrap();
        assert_eq!(a.shape(), &[5, 1, 64, 64]);
        assert!(a.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        assert_eq!(a, sample(&g, 5, 11).unwrap());
        assert_ne!(a, sample(&g, 5, 12).unwrap());
    }

    #[test]
    fn checkpoint_restores_the_generator() {
        let mut state = TrainState::new(&small_config(3)).unwrap();
        train_step(&mut state, &real_batch(8, 2)).unwrap();
        let tensors = checkpoint_tensors(&state);
        let bytes = dataio::encode_checkpoint(&tensors).unwrap();
        let back = dataio::decode_checkpoint(&bytes).unwrap();
        let g = generator_from_checkpoint(&back).unwrap();
        assert_eq!(g, state.generator);
        assert_eq!(sample(&g, 4, 1).unwrap(), sample(&state.generator, 4, 1).unwrap());
        assert_eq!(discriminator_from_checkpoint(&back).unwrap(), state.discriminator);

        let mut missing = back.clone();
        missing.retain(|(n, _)| n != "g.2.running_var");
        assert!(generator_from_checkpoint(&missing).is_err());
    }

    #[test]
    fn batcher_cycles_through_every_item() {
        let mut b = Batcher::new(5, Rng::new(1)).unwrap();
        let mut first: Vec<usize> = b.next_indices(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next_indices(12).len(), 12);
        assert!(matches!(Batcher::new(0, Rng::new(1)), Err(Error::EmptyDataset)));
    }

    fn log(d: &[f64], g: &[f64]) -> Vec<LossRecord> {
        d.iter().zip(g).enumerate().map(|(step, (&d_loss, &g_loss))| LossRecord { step, d_loss, g_loss }).collect()
    }

    #[test]
    fn analysis_examples() {
        let r = analyze_losses(&log(&[1.0, 0.4, 0.4], &[0.5, 0.8, 0.8]), &[]).unwrap();
        assert_eq!(r.first_crossing_step, Some(1));

        let r = analyze_losses(&log(&[0.7; 10], &[0.7; 10]), &[(0, 4)]).unwrap();
        assert_eq!(r.extrema_counts, (0, 0));
        assert_eq!(r.anticorrelation, None);
        assert_eq!(r.first_crossing_step, None);
        assert_eq!(r.window_means[0].d_mean, Some(0.7));

        let d: Vec<f64> = (0..50).map(|i| 0.7 + 0.1 * (i as f64 * 0.9).sin()).collect();
        let g: Vec<f64> = d.iter().map(|v| 2.0 - v).collect();
        let r = analyze_losses(&log(&d, &g), &[(100, 200)]).unwrap();
        assert_eq!(r.anticorrelation, Some(-1.0));
        assert_eq!(r.window_means[0].d_mean, None);

        assert!(analyze_losses(&log(&[1.0, 2.0], &[1.0, 2.0]), &[]).is_err());
    }

    #[test]
    fn extrema_in_the_final_fifth() {
        // 20 records; the last 4 are [0, 1, 0, 1] for d: one max and one min.
        let mut d = vec![0.5; 16];
        d.extend([0.0, 1.0, 0.0, 1.0]);
        let g = vec![0.3; 20];
        let r = analyze_losses(&log(&d, &g), &[]).unwrap();
        assert_eq!(r.extrema_counts, (2, 0));
    }

    #[test]
    fn short_training_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::phantom::build_dataset(&crate::phantom::DatasetConfig {
            count: 10,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig { steps: 4, batch_size: 4, sample_every: 2, checkpoint_every: 3, sample_count: 3, ..TrainConfig::default() };
        let mut seen = 0;
        let out = train(&config, &ds, dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(out.state.history.len(), 4);
        let layout = RunLayout::new(dir.path());
        let csv = fs::read_to_string(layout.losses()).unwrap();
        assert_eq!(csv.lines().count(), 5);
        for s in [0, 2, 4] {
            assert!(layout.sample(s).exists(), "step {s}");
        }
        assert!(!layout.sample(3).exists());
        assert!(layout.checkpoint(0).exists() && layout.checkpoint(3).exists() && layout.checkpoint(4).exists());
        let grid = dataio::read_image(&layout.sample(0)).unwrap();
        assert_eq!((grid.width, grid.height), (130, 130));
        assert_eq!(grid, sample_grid(&out.initial_generator, 3, config.sample_seed).unwrap());
    }
}
