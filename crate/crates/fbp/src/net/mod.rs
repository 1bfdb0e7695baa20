//! The CNN engine: architecture specs, parameter storage, forward/backward
//! passes, the Euclidean loss, SGD with momentum, and input-channel
//! adaptation for cascaded fine-tuning.
//!
//! Three fixed architectures are provided. All convolutions are stride 1
//! and each is followed by a 2×2 max pool; ReLU follows every convolution
//! and every fully-connected layer except the final single-neuron
//! regression output; dropout sits after the first fully-connected layer.
//!
//! | arch  | input (stored → crop) | conv stack                          | FC    |
//! |-------|-----------------------|-------------------------------------|-------|
//! | cnn-1 | 56 → 48               | 50@7, 100@6, 150@5                  | 300, 1|
//! | cnn-2 | 156 → 138             | 50@5, 100@5, 150@4, 200@4, 250@3    | 300, 1|
//! | cnn-3 | 256 → 227             | 50@5, 100@5, 150@4, 200@4, 250@3, 300@2 | 500, 1|

pub mod layers;
mod model;

pub use model::{load_model, load_model_bytes, save_model, save_model_bytes, ChannelDescriptor, ModelFile};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use layers::ConvShape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Valid convolution, stride 1, square kernel, ReLU fused.
    Conv { out_maps: usize, kernel: usize },
    /// Non-overlapping 2×2 max pool (floor on odd extents).
    Pool,
    FullyConnected { out_neurons: usize, relu: bool },
    Dropout { keep: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchName {
    Cnn1,
    Cnn2,
    Cnn3,
    Custom,
}

impl ArchName {
    pub fn tag(self) -> u8 {
        match self {
            ArchName::Custom => 0,
            ArchName::Cnn1 => 1,
            ArchName::Cnn2 => 2,
            ArchName::Cnn3 => 3,
        }
    }
    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => ArchName::Custom,
            1 => ArchName::Cnn1,
            2 => ArchName::Cnn2,
            3 => ArchName::Cnn3,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: ArchName,
    pub in_channels: usize,
    /// Side length images are stored at (before cropping).
    pub stored_size: usize,
    /// Side length of the network input crop.
    pub crop_size: usize,
    pub layers: Vec<LayerSpec>,
}

/// Extents after each layer, plus the flattened width entering the first
/// fully-connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeChain {
    /// (channels, side) per stage; index 0 is the input.
    pub stages: Vec<(usize, usize)>,
    pub flatten_width: usize,
    pub output_width: usize,
}

impl ShapeChain {
    /// Spatial side lengths of the input and every conv/pool output, the
    /// sequence the architecture tables are written in.
    pub fn side_lengths(&self) -> Vec<usize> {
        let mut sides = Vec::new();
        for &(_, side) in &self.stages {
            if side > 0 {
                sides.push(side);
            }
        }
        sides.dedup();
        sides
    }
}

fn conv_pool(out_maps: usize, kernel: usize) -> [LayerSpec; 2] {
    [LayerSpec::Conv { out_maps, kernel }, LayerSpec::Pool]
}

impl NetworkSpec {
    pub fn cnn1(in_channels: usize) -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_pool(50, 7));
        layers.extend(conv_pool(100, 6));
        layers.extend(conv_pool(150, 5));
        layers.push(LayerSpec::FullyConnected { out_neurons: 300, relu: true });
        layers.push(LayerSpec::Dropout { keep: 0.5 });
        layers.push(LayerSpec::FullyConnected { out_neurons: 1, relu: false });
        NetworkSpec { name: ArchName::Cnn1, in_channels, stored_size: 56, crop_size: 48, layers }
    }

    pub fn cnn2(in_channels: usize) -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_pool(50, 5));
        layers.extend(conv_pool(100, 5));
        layers.extend(conv_pool(150, 4));
        layers.extend(conv_pool(200, 4));
        layers.extend(conv_pool(250, 3));
        layers.push(LayerSpec::FullyConnected { out_neurons: 300, relu: true });
        layers.push(LayerSpec::Dropout { keep: 0.5 });
        layers.push(LayerSpec::FullyConnected { out_neurons: 1, relu: false });
        NetworkSpec { name: ArchName::Cnn2, in_channels, stored_size: 156, crop_size: 138, layers }
    }

    pub fn cnn3(in_channels: usize) -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_pool(50, 5));
        layers.extend(conv_pool(100, 5));
        layers.extend(conv_pool(150, 4));
        layers.extend(conv_pool(200, 4));
        layers.extend(conv_pool(250, 3));
        layers.extend(conv_pool(300, 2));
        layers.push(LayerSpec::FullyConnected { out_neurons: 500, relu: true });
        layers.push(LayerSpec::Dropout { keep: 0.5 });
        layers.push(LayerSpec::FullyConnected { out_neurons: 1, relu: false });
        NetworkSpec { name: ArchName::Cnn3, in_channels, stored_size: 256, crop_size: 227, layers }
    }

    pub fn custom(in_channels: usize, stored_size: usize, crop_size: usize, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { name: ArchName::Custom, in_channels, stored_size, crop_size, layers }
    }

    pub fn by_name(name: &str, in_channels: usize) -> Option<Self> {
        match name {
            "cnn1" | "cnn-1" => Some(Self::cnn1(in_channels)),
            "cnn2" | "cnn-2" => Some(Self::cnn2(in_channels)),
            "cnn3" | "cnn-3" => Some(Self::cnn3(in_channels)),
            _ => None,
        }
    }

    pub fn with_channels(&self, in_channels: usize) -> Self {
        NetworkSpec { in_channels, ..self.clone() }
    }

    /// Replace the keep rate of every dropout layer.
    pub fn with_dropout_keep(mut self, keep: f64) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dropout { keep: k } = l {
                *k = keep;
            }
        }
        self
    }

    /// Walk the layer list and verify every intermediate extent stays
    /// positive; spec errors name the offending layer (0-based).
    pub fn shape_chain(&self) -> Result<ShapeChain> {
        if self.in_channels == 0 {
            return Err(Error::Spec { layer: 0, msg: "input channels must be >= 1".into() });
        }
        if self.crop_size == 0 || self.stored_size < self.crop_size {
            return Err(Error::Spec {
                layer: 0,
                msg: format!("stored size {} must be >= crop size {}", self.stored_size, self.crop_size),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Spec { layer: 0, msg: "no layers".into() });
        }
        let mut stages = vec![(self.in_channels, self.crop_size)];
        let mut channels = self.in_channels;
        let mut side = self.crop_size;
        let mut flat: Option<usize> = None;
        let mut flatten_width = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { out_maps, kernel } => {
                    if flat.is_some() {
                        return Err(Error::Spec { layer: i, msg: "conv after flattening".into() });
                    }
                    if out_maps == 0 || kernel == 0 {
                        return Err(Error::Spec { layer: i, msg: "conv extents must be >= 1".into() });
                    }
                    if side < kernel {
                        return Err(Error::Spec {
                            layer: i,
                            msg: format!("kernel {kernel} exceeds extent {side}"),
                        });
                    }
                    side = side - kernel + 1;
                    channels = out_maps;
                    stages.push((channels, side));
                }
                LayerSpec::Pool => {
                    if flat.is_some() {
                        return Err(Error::Spec { layer: i, msg: "pool after flattening".into() });
                    }
                    if side / 2 == 0 {
                        return Err(Error::Spec {
                            layer: i,
                            msg: format!("pool of extent {side} collapses to zero"),
                        });
                    }
                    side /= 2;
                    stages.push((channels, side));
                }
                LayerSpec::FullyConnected { out_neurons, .. } => {
                    if out_neurons == 0 {
                        return Err(Error::Spec { layer: i, msg: "fc width must be >= 1".into() });
                    }
                    if flat.is_none() {
                        flatten_width = channels * side * side;
                    }
                    flat = Some(out_neurons);
                    stages.push((out_neurons, 0));
                }
                LayerSpec::Dropout { keep } => {
                    if !(keep > 0.0 && keep <= 1.0) {
                        return Err(Error::Spec {
                            layer: i,
                            msg: format!("dropout keep must be in (0,1], got {keep}"),
                        });
                    }
                    stages.push(if let Some(w) = flat { (w, 0) } else { (channels, side) });
                }
            }
        }
        let output_width = match flat {
            Some(w) => w,
            None => {
                return Err(Error::Spec {
                    layer: self.layers.len() - 1,
                    msg: "network must end in a fully-connected layer".into(),
                })
            }
        };
        if output_width != 1 {
            return Err(Error::Spec {
                layer: self.layers.len() - 1,
                msg: format!("regression output must have width 1, got {output_width}"),
            });
        }
        if flatten_width == 0 {
            flatten_width = channels * side * side;
        }
        Ok(ShapeChain { stages, flatten_width, output_width })
    }

    /// Index of the first convolution layer, if any.
    pub fn first_conv(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Conv { .. }))
    }
}

/// Weight/bias pair of one parameterized layer. Conv weights are
/// [out_maps, in_channels, k, k]; FC weights are [out, in].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients aligned with the network's layer list (None where a layer has
/// no parameters).
pub struct Gradients<T> {
    pub per_layer: Vec<Option<ParamTensor<T>>>,
}

/// Per-sample forward cache: activations after every layer (index 0 is the
/// input), pool argmax indices and dropout masks, plus the parameter
/// version stamp that backward validates.
pub struct SampleCache<T> {
    acts: Vec<Tensor<T>>,
    pool_argmax: Vec<Vec<u32>>,
    drop_masks: Vec<Vec<T>>,
    version: u64,
}

/// How `adapt_input` fills the fresh first-conv weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Fresh fan-in-scaled uniform init, bias reset to zero.
    Reinit,
    /// Replicate the channel-mean filter, rescaled by old/new channel count
    /// so responses to broadcast inputs are preserved; bias kept.
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: Vec<Option<ParamTensor<T>>>,
    velocity: Vec<Option<ParamTensor<T>>>,
    version: u64,
}

fn init_uniform<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let s = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(rng, shape, -s, s).expect("valid init shape")
}

impl<T: Real> Network<T> {
    /// Instantiate `spec` with `in_channels` input planes. Weights draw from
    /// uniform(-s, s) with s = sqrt(3 / fan_in) in layer order (weight
    /// tensor first, bias stays zero), so a seed fully determines the
    /// parameter bytes.
    pub fn build(spec: &NetworkSpec, in_channels: usize, seed: u64) -> Result<Self> {
        let spec = spec.with_channels(in_channels);
        spec.shape_chain()?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut channels = spec.in_channels;
        let mut side = spec.crop_size;
        let mut flat: Option<usize> = None;
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv { out_maps, kernel } => {
                    let fan_in = channels * kernel * kernel;
                    let w = init_uniform(&mut rng, &[out_maps, channels, kernel, kernel], fan_in);
                    let b = Tensor::zeros(&[out_maps])?;
                    params.push(Some(ParamTensor { w, b }));
                    channels = out_maps;
                    side = side - kernel + 1;
                }
                LayerSpec::Pool => {
                    params.push(None);
                    side /= 2;
                }
                LayerSpec::FullyConnected { out_neurons, .. } => {
                    let in_width = flat.unwrap_or(channels * side * side);
                    let w = init_uniform(&mut rng, &[out_neurons, in_width], in_width);
                    let b = Tensor::zeros(&[out_neurons])?;
                    params.push(Some(ParamTensor { w, b }));
                    flat = Some(out_neurons);
                }
                LayerSpec::Dropout { .. } => params.push(None),
            }
        }
        let velocity = params
            .iter()
            .map(|p| {
                p.as_ref().map(|pt| ParamTensor {
                    w: Tensor::zeros(pt.w.shape()).expect("zeros"),
                    b: Tensor::zeros(pt.b.shape()).expect("zeros"),
                })
            })
            .collect();
        Ok(Network { spec, params, velocity, version: 0 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<ParamTensor<T>>] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn from_parts(spec: NetworkSpec, params: Vec<Option<ParamTensor<T>>>) -> Result<Self> {
        spec.shape_chain()?;
        let velocity = params
            .iter()
            .map(|p| {
                p.as_ref().map(|pt| ParamTensor {
                    w: Tensor::zeros(pt.w.shape()).expect("zeros"),
                    b: Tensor::zeros(pt.b.shape()).expect("zeros"),
                })
            })
            .collect();
        Ok(Network { spec, params, velocity, version: 0 })
    }

    /// Forward pass over one [C, K, K] sample. Train mode draws dropout
    /// masks from `rng`; eval mode is deterministic and needs none.
    pub fn forward_sample(&self, x: &Tensor<T>, mode: Mode, mut rng: Option<&mut Rng>) -> Result<(T, SampleCache<T>)> {
        let expect = [self.spec.in_channels, self.spec.crop_size, self.spec.crop_size];
        if x.shape() != expect {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match spec {:?}",
                x.shape(),
                expect
            )));
        }
        let mut acts: Vec<Tensor<T>> = vec![x.clone()];
        let mut pool_argmax = Vec::new();
        let mut drop_masks = Vec::new();
        let mut channels = self.spec.in_channels;
        let mut side = self.spec.crop_size;

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let cur = acts.last().expect("non-empty");
            let next = match *layer {
                LayerSpec::Conv { out_maps, kernel } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let sh = ConvShape { in_channels: channels, in_extent: side, out_maps, kernel };
                    let out = layers::conv_forward(cur.data(), p.w.data(), p.b.data(), &sh, true);
                    side = sh.out_extent();
                    channels = out_maps;
                    Tensor::from_vec(&[channels, side, side], out)?
                }
                LayerSpec::Pool => {
                    let (out, argmax) = layers::pool_forward(cur.data(), channels, side);
                    side /= 2;
                    pool_argmax.push(argmax);
                    Tensor::from_vec(&[channels, side, side], out)?
                }
                LayerSpec::FullyConnected { out_neurons, relu } => {
                    let p = self.params[i].as_ref().expect("fc params");
                    let out = layers::fc_forward(cur.data(), p.w.data(), p.b.data(), relu);
                    Tensor::from_vec(&[out_neurons], out)?
                }
                LayerSpec::Dropout { keep } => match mode {
                    Mode::Eval => cur.clone(),
                    Mode::Train => {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::Arg("train-mode forward needs an rng for dropout".into())
                        })?;
                        let (out, mask) = layers::dropout_forward(cur.data(), keep, rng);
                        drop_masks.push(mask);
                        Tensor::from_vec(cur.shape(), out)?
                    }
                },
            };
            acts.push(next);
        }
        let pred = acts.last().expect("output").data()[0];
        Ok((
            pred,
            SampleCache { acts, pool_argmax, drop_masks, version: self.version },
        ))
    }

    /// Forward a batch, one cache per sample. Train mode requires one
    /// pre-drawn dropout seed per sample so the result does not depend on
    /// `threads`.
    pub fn forward_batch(
        &self,
        batch: &[Tensor<T>],
        mode: Mode,
        drop_seeds: Option<&[u64]>,
        threads: usize,
    ) -> Result<(Vec<T>, Vec<SampleCache<T>>)> {
        if mode == Mode::Train {
            let seeds = drop_seeds.ok_or_else(|| Error::Arg("train forward needs dropout seeds".into()))?;
            if seeds.len() != batch.len() {
                return Err(Error::Arg("one dropout seed per sample required".into()));
            }
        }
        let results = par_map(threads, batch, |i, x| match mode {
            Mode::Eval => self.forward_sample(x, Mode::Eval, None),
            Mode::Train => {
                let mut rng = Rng::new(drop_seeds.unwrap()[i]);
                self.forward_sample(x, Mode::Train, Some(&mut rng))
            }
        });
        let mut preds = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for r in results {
            let (p, c) = r?;
            preds.push(p);
            caches.push(c);
        }
        Ok((preds, caches))
    }

    /// Eval-mode activations after each of the first `upto + 1` layers
    /// (index 0 is the input). Used by the visualizers to read feature maps
    /// without paying for the full forward pass.
    pub fn forward_activations(&self, x: &Tensor<T>, upto: usize) -> Result<Vec<Tensor<T>>> {
        if upto >= self.spec.layers.len() {
            return Err(Error::Arg(format!(
                "layer {upto} out of range ({} layers)",
                self.spec.layers.len()
            )));
        }
        let expect = [self.spec.in_channels, self.spec.crop_size, self.spec.crop_size];
        if x.shape() != expect {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match spec {:?}",
                x.shape(),
                expect
            )));
        }
        let mut acts: Vec<Tensor<T>> = vec![x.clone()];
        let mut channels = self.spec.in_channels;
        let mut side = self.spec.crop_size;
        for (i, layer) in self.spec.layers.iter().take(upto + 1).enumerate() {
            let cur = acts.last().expect("non-empty");
            let next = match *layer {
                LayerSpec::Conv { out_maps, kernel } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let sh = ConvShape { in_channels: channels, in_extent: side, out_maps, kernel };
                    let out = layers::conv_forward(cur.data(), p.w.data(), p.b.data(), &sh, true);
                    side = sh.out_extent();
                    channels = out_maps;
                    Tensor::from_vec(&[channels, side, side], out)?
                }
                LayerSpec::Pool => {
                    let (out, _) = layers::pool_forward(cur.data(), channels, side);
                    side /= 2;
                    Tensor::from_vec(&[channels, side, side], out)?
                }
                LayerSpec::FullyConnected { out_neurons, relu } => {
                    let p = self.params[i].as_ref().expect("fc params");
                    let out = layers::fc_forward(cur.data(), p.w.data(), p.b.data(), relu);
                    Tensor::from_vec(&[out_neurons], out)?
                }
                LayerSpec::Dropout { .. } => cur.clone(),
            };
            acts.push(next);
        }
        Ok(acts)
    }

    /// Analytic gradients for one sample given the loss gradient at its
    /// prediction. The cache must come from a forward pass against the
    /// current parameters.
    pub fn backward_sample(&self, cache: &SampleCache<T>, dpred: T) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(Error::State(format!(
                "cache from parameter version {} used against version {}",
                cache.version, self.version
            )));
        }
        if cache.acts.len() != self.spec.layers.len() + 1 {
            return Err(Error::State("cache does not match the layer list".into()));
        }
        let mut grads: Vec<Option<ParamTensor<T>>> = self.params.iter().map(|_| None).collect();
        let mut dcur: Vec<T> = vec![dpred];
        let mut pool_i = self.spec.layers.iter().filter(|l| matches!(l, LayerSpec::Pool)).count();
        let mut drop_i = cache.drop_masks.len();

        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let post = &cache.acts[i + 1];
            match *layer {
                LayerSpec::Conv { out_maps, kernel } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let sh = ConvShape {
                        in_channels: x.shape()[0],
                        in_extent: x.shape()[1],
                        out_maps,
                        kernel,
                    };
                    let (dw, db, dx) =
                        layers::conv_backward(x.data(), p.w.data(), &sh, true, post.data(), &dcur);
                    grads[i] = Some(ParamTensor {
                        w: Tensor::from_vec(p.w.shape(), dw)?,
                        b: Tensor::from_vec(p.b.shape(), db)?,
                    });
                    dcur = dx;
                }
                LayerSpec::Pool => {
                    pool_i -= 1;
                    dcur = layers::pool_backward(&dcur, &cache.pool_argmax[pool_i], x.len());
                }
                LayerSpec::FullyConnected { relu, .. } => {
                    let p = self.params[i].as_ref().expect("fc params");
                    let (dw, db, dx) =
                        layers::fc_backward(x.data(), p.w.data(), relu, post.data(), &dcur);
                    grads[i] = Some(ParamTensor {
                        w: Tensor::from_vec(p.w.shape(), dw)?,
                        b: Tensor::from_vec(p.b.shape(), db)?,
                    });
                    dcur = dx;
                }
                LayerSpec::Dropout { .. } => {
                    // Eval-mode caches carry no masks; dropout is then the identity.
                    if !cache.drop_masks.is_empty() {
                        drop_i -= 1;
                        dcur = layers::dropout_backward(&dcur, &cache.drop_masks[drop_i]);
                    }
                }
            }
        }
        Ok(Gradients { per_layer: grads })
    }

    /// Backward over a batch with a fixed, thread-count-independent
    /// reduction: per-sample gradients are computed in parallel and summed
    /// in sample order.
    pub fn backward_batch(
        &self,
        caches: &[SampleCache<T>],
        dpreds: &[T],
        threads: usize,
    ) -> Result<Gradients<T>> {
        if caches.len() != dpreds.len() || caches.is_empty() {
            return Err(Error::Arg("caches and loss gradients must pair up".into()));
        }
        let indexed: Vec<usize> = (0..caches.len()).collect();
        let per_sample = par_map(threads, &indexed, |_, &i| self.backward_sample(&caches[i], dpreds[i]));
        let mut acc: Option<Gradients<T>> = None;
        for g in per_sample {
            let g = g?;
            acc = Some(match acc {
                None => g,
                Some(mut total) => {
                    for (t, s) in total.per_layer.iter_mut().zip(g.per_layer) {
                        if let (Some(t), Some(s)) = (t.as_mut(), s) {
                            t.w = t.w.add(&s.w)?;
                            t.b = t.b.add(&s.b)?;
                        }
                    }
                    total
                }
            });
        }
        Ok(acc.expect("non-empty batch"))
    }

    /// SGD with momentum and weight decay:
    /// v ← momentum·v − lr·(g + weight_decay·w); w ← w + v.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        self.sgd_step_scaled(grads, lr, momentum, weight_decay, |_| 1.0)
    }

    /// [`Network::sgd_step`] with a per-layer learning-rate multiplier
    /// (used to train a freshly adapted first conv layer at its own rate).
    pub fn sgd_step_scaled(
        &mut self,
        grads: &Gradients<T>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        lr_mult: impl Fn(usize) -> f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Arg(format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Arg(format!("momentum must be in [0,1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Arg(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        for g in grads.per_layer.iter().flatten() {
            if g.w.iter().any(|v| !v.is_finite()) || g.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient contains non-finite values; step aborted".into()));
            }
        }
        let mom_t = T::from_f64(momentum);
        let wd_t = T::from_f64(weight_decay);
        for (i, g) in grads.per_layer.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr_t = T::from_f64(lr * lr_mult(i));
            let p = self.params[i].as_mut().expect("param layer");
            let v = self.velocity[i].as_mut().expect("velocity layer");
            for ((w, vw), gw) in p.w.data_mut().iter_mut().zip(v.w.data_mut()).zip(g.w.iter()) {
                *vw = mom_t * *vw - lr_t * (*gw + wd_t * *w);
                *w += *vw;
            }
            for ((b, vb), gb) in p.b.data_mut().iter_mut().zip(v.b.data_mut()).zip(g.b.iter()) {
                *vb = mom_t * *vb - lr_t * *gb;
                *b += *vb;
            }
        }
        for p in self.params.iter().flatten() {
            if p.w.iter().any(|v| !v.is_finite()) || p.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameters became non-finite after step".into()));
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Rebuild the network for a different input channel count: the first
    /// conv layer is refreshed per `mode` while every deeper layer's
    /// parameters are copied verbatim. Equal channel counts return an
    /// identical copy. Velocity starts at zero either way.
    pub fn adapt_input(&self, new_channels: usize, seed: u64, mode: AdaptMode) -> Result<Network<T>> {
        if new_channels == 0 {
            return Err(Error::Arg("channel count must be >= 1".into()));
        }
        if new_channels == self.spec.in_channels {
            let mut copy = self.clone();
            copy.version = 0;
            for v in copy.velocity.iter_mut().flatten() {
                for x in v.w.data_mut() {
                    *x = T::ZERO;
                }
                for x in v.b.data_mut() {
                    *x = T::ZERO;
                }
            }
            return Ok(copy);
        }
        let conv_idx = self
            .spec
            .first_conv()
            .ok_or_else(|| Error::Arg("network has no conv layer to adapt".into()))?;
        let spec = self.spec.with_channels(new_channels);
        spec.shape_chain()?;
        let LayerSpec::Conv { out_maps, kernel } = self.spec.layers[conv_idx] else {
            unreachable!()
        };
        let old = self.params[conv_idx].as_ref().expect("conv params");
        let old_c = self.spec.in_channels;
        let new_shape = [out_maps, new_channels, kernel, kernel];
        let (w, b) = match mode {
            AdaptMode::Reinit => {
                let fan_in = new_channels * kernel * kernel;
                let mut rng = Rng::new(seed);
                (init_uniform(&mut rng, &new_shape, fan_in), Tensor::zeros(&[out_maps])?)
            }
            AdaptMode::Replicate => {
                let kk = kernel * kernel;
                let scale = T::from_f64(old_c as f64 / new_channels as f64);
                let mut w = Tensor::zeros(&new_shape)?;
                for m in 0..out_maps {
                    for j in 0..kk {
                        let mut mean = T::ZERO;
                        for c in 0..old_c {
                            mean += old.w.data()[(m * old_c + c) * kk + j];
                        }
                        mean = mean / T::from_f64(old_c as f64);
                        for c in 0..new_channels {
                            w.data_mut()[(m * new_channels + c) * kk + j] = mean * scale;
                        }
                    }
                }
                (w, old.b.clone())
            }
        };
        let mut params: Vec<Option<ParamTensor<T>>> = self.params.clone();
        params[conv_idx] = Some(ParamTensor { w, b });
        Network::from_parts(spec, params)
    }
}

/// Half mean squared error: loss = (1/2N)·Σ(pred−target)², gradient
/// (pred−target)/N per element.
pub fn loss_euclidean<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Arg("loss over an empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p.to_f64() - t.to_f64();
        loss += d * d;
        grad.push(T::from_f64(d * inv_n));
    }
    Ok((T::from_f64(0.5 * inv_n * loss), Tensor::from_vec(pred.shape(), grad)?))
}
