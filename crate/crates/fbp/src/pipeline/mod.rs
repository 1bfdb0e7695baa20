//! Dataset handling, augmentation, training, cascaded fine-tuning and
//! evaluation.
//!
//! The protocol: images are decomposed into facial channels, stacked per
//! the configured channel set, mean-subtracted with per-channel scalars
//! computed on the training split, randomly cropped `crops_per_image`
//! times per epoch, and regressed onto scores with the Euclidean loss.
//! Test-time inputs use a single deterministic center crop unless
//! multi-crop averaging is enabled. Everything is a pure function of
//! (config, seed): shuffles, crop offsets and dropout masks are all drawn
//! from one SplitMix64 stream before any parallel work starts, so results
//! are byte-identical for any thread count.

mod cache;
mod synth;

pub use cache::decompose_cached;
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::imageproc::{ChannelSet, FaceChannels, WlsParams};
use crate::net::{
    loss_euclidean, AdaptMode, ChannelDescriptor, Mode, ModelFile, Network, NetworkSpec,
};
use crate::parallel::par_map;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ScutFbp,
    Synthetic,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::ScutFbp => "scut-fbp",
            Provenance::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Image path, relative to the index's base directory.
    pub path: PathBuf,
    /// Ground-truth score in [1, 5].
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
    pub provenance: Provenance,
    /// Directory record paths resolve against (the CSV's directory).
    pub base_dir: PathBuf,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn resolve(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.records[i].path)
    }
}

/// Load a `path,score` CSV. Record order is preserved; scores must lie in
/// [1, 5] and paths must be unique. Relative paths resolve against the
/// CSV's directory.
pub fn load_index(csv_path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let base_dir = csv_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "path,score")) => {}
        Some((_, other)) => {
            return Err(Error::Validation {
                line: 1,
                msg: format!("expected header 'path,score', got '{other}'"),
            })
        }
        None => return Err(Error::Validation { line: 1, msg: "empty index file".into() }),
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (path, score_text) = line.rsplit_once(',').ok_or_else(|| Error::Validation {
            line: line_no,
            msg: "expected 'path,score'".into(),
        })?;
        let score: f64 = score_text.trim().parse().map_err(|_| Error::Validation {
            line: line_no,
            msg: format!("score '{score_text}' is not a number"),
        })?;
        if !(1.0..=5.0).contains(&score) {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("score {score} outside [1, 5]"),
            });
        }
        if !seen.insert(path.to_string()) {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("duplicate path '{path}'"),
            });
        }
        records.push(Record { path: path.into(), score });
    }
    Ok(DatasetIndex { records, provenance: Provenance::ScutFbp, base_dir })
}

/// Train/test partition as indices into a `DatasetIndex`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// All records in the training side, no held-out set. Training runs on
    /// such a split evaluate their per-epoch correlation on the training
    /// records themselves (used by the overfitting experiments).
    pub fn train_only(n: usize) -> Self {
        Split { train: (0..n).collect(), test: Vec::new() }
    }
}

/// Seeded shuffle, then the first `n_train` records train and the rest test.
pub fn split_train_test(idx: &DatasetIndex, n_train: usize, seed: u64) -> Result<Split> {
    let n = idx.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::Arg(format!("n_train must be in (0, {n}), got {n_train}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let test = order.split_off(n_train);
    Ok(Split { train: order, test })
}

/// Seeded shuffle, then k contiguous folds with sizes differing by at most
/// one (the first `n mod k` folds get the extra record). Fold i is the test
/// set of split i.
pub fn kfold(idx: &DatasetIndex, k: usize, seed: u64) -> Result<Vec<Split>> {
    let n = idx.len();
    if k < 2 || k > n {
        return Err(Error::Arg(format!("k must be in [2, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let base = n / k;
    let extra = n % k;
    let mut splits = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> =
            order[..start].iter().chain(&order[start + size..]).copied().collect();
        splits.push(Split { train, test });
        start += size;
    }
    Ok(splits)
}

/// `n` random crops of the stacked channel set; each crop uses one offset
/// pair (top drawn before left) applied to every plane.
pub fn make_training_crops<T: Real>(
    ch: &FaceChannels<T>,
    set: ChannelSet,
    crop_size: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor<T>>> {
    let stored = ch.size();
    if crop_size == 0 || crop_size > stored {
        return Err(Error::Arg(format!("crop {crop_size} exceeds stored size {stored}")));
    }
    let stacked = ch.stack(set);
    let span = stored - crop_size + 1;
    (0..n)
        .map(|_| {
            let top = rng.randint(span);
            let left = rng.randint(span);
            stacked.crop2d(top, left, crop_size, crop_size)
        })
        .collect()
}

/// Deterministic test-time crop at offset floor((S-K)/2) on both axes.
pub fn center_crop<T: Real>(ch: &FaceChannels<T>, set: ChannelSet, crop_size: usize) -> Result<Tensor<T>> {
    let stored = ch.size();
    if crop_size == 0 || crop_size > stored {
        return Err(Error::Arg(format!("crop {crop_size} exceeds stored size {stored}")));
    }
    let off = (stored - crop_size) / 2;
    ch.stack(set).crop2d(off, off, crop_size, crop_size)
}

/// Pearson correlation coefficient:
/// r = Σ(x−x̄)(y−ȳ) / sqrt(Σ(x−x̄)²·Σ(y−ȳ)²).
///
/// Zero variance in either input is an explicit error, never a silent 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Arg(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Arg("correlation needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 {
        return Err(Error::UndefinedCorrelation("first input has zero variance".into()));
    }
    if vy == 0.0 {
        return Err(Error::UndefinedCorrelation("second input has zero variance".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    /// Pearson on the evaluation subset; NaN flags an undefined correlation
    /// (zero-variance predictions) for that epoch.
    pub eval_pearson: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStat>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_pearson\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.eval_pearson);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Full training configuration; `arch.in_channels` is overridden by the
/// channel set's width at train time.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: NetworkSpec,
    pub channels: ChannelSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step decay: lr is multiplied by `lr_decay_factor` every
    /// `lr_decay_every` epochs; 0 disables the schedule.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_keep: f64,
    pub crops_per_image: usize,
    /// Freeze one crop set per image instead of redrawing each epoch.
    pub fixed_crops: bool,
    pub seed: u64,
    pub threads: usize,
    pub wls: WlsParams,
    /// Learning-rate multiplier for the first conv layer (the fresh layer
    /// during fine-tuning).
    pub conv1_lr_mult: f64,
    /// Stage >= 2 of a cascade trains at lr × this factor.
    pub finetune_lr_factor: f64,
    pub adapt_mode: AdaptMode,
    /// Stop once the epoch's evaluation Pearson reaches this value...
    pub early_stop_pearson: Option<f64>,
    /// ...and the epoch loss has dropped below this fraction of the first
    /// epoch's loss (both must hold when both are set).
    pub early_stop_loss_ratio: Option<f64>,
    /// Average predictions over `crops_per_image` random crops at test time
    /// instead of the single center crop.
    pub eval_multicrop: bool,
}

impl TrainConfig {
    pub fn new(arch: NetworkSpec, channels: ChannelSet) -> Self {
        TrainConfig {
            arch,
            channels,
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout_keep: 0.5,
            crops_per_image: 10,
            fixed_crops: false,
            seed: 1,
            threads: 1,
            wls: WlsParams::default(),
            conv1_lr_mult: 1.0,
            finetune_lr_factor: 0.1,
            adapt_mode: AdaptMode::Reinit,
            early_stop_pearson: None,
            early_stop_loss_ratio: None,
            eval_multicrop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.lr > 0.0) {
            problems.push(format!("learning_rate must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            problems.push(format!("dropout_keep must be in (0,1], got {}", self.dropout_keep));
        }
        if self.crops_per_image == 0 {
            problems.push("crops_per_image must be >= 1".to_string());
        }
        if self.threads == 0 {
            problems.push("threads must be >= 1".to_string());
        }
        if !(self.conv1_lr_mult > 0.0) {
            problems.push(format!("conv1_lr_mult must be > 0, got {}", self.conv1_lr_mult));
        }
        if !(self.finetune_lr_factor > 0.0) {
            problems.push(format!("finetune_lr_factor must be > 0, got {}", self.finetune_lr_factor));
        }
        if let Err(e) = self.wls.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub struct TrainOutcome<T> {
    /// Parameters as of the last completed epoch (cascades continue from
    /// these).
    pub final_model: ModelFile<T>,
    /// Snapshot of the epoch with the best finite evaluation Pearson
    /// (falls back to the final parameters if none was finite).
    pub best_model: ModelFile<T>,
    pub best_epoch: usize,
    pub history: History,
}

struct PreparedData<T> {
    /// Stacked [C, S, S] channel tensor per record index (only subset
    /// entries are populated).
    stacked: Vec<Option<Tensor<T>>>,
    targets: Vec<f64>,
    means: Vec<f64>,
}

fn prepare_data<T: Real>(
    cfg: &TrainConfig,
    idx: &DatasetIndex,
    needed: &BTreeSet<usize>,
    train: &[usize],
    cache_dir: Option<&Path>,
) -> Result<PreparedData<T>> {
    let set = cfg.channels;
    let size = cfg.arch.stored_size;
    let order: Vec<usize> = needed.iter().copied().collect();
    let decomposed = par_map(cfg.threads, &order, |_, &i| {
        decompose_cached::<T>(&idx.resolve(i), &cfg.wls, size, cache_dir).map(|ch| ch.stack(set))
    });
    let mut stacked: Vec<Option<Tensor<T>>> = vec![None; idx.len()];
    for (&i, tensor) in order.iter().zip(decomposed) {
        stacked[i] = Some(tensor?);
    }
    let c = set.channel_count();
    let plane = size * size;
    let mut means = vec![0.0; c];
    for &i in train {
        let t = stacked[i].as_ref().expect("train image decomposed");
        for (ch, mean) in means.iter_mut().enumerate() {
            let sum: f64 = t.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).sum();
            *mean += sum / plane as f64;
        }
    }
    for m in &mut means {
        *m /= train.len() as f64;
    }
    let targets = idx.records.iter().map(|r| r.score).collect();
    Ok(PreparedData { stacked, targets, means })
}

fn make_sample<T: Real>(
    stacked: &Tensor<T>,
    top: usize,
    left: usize,
    crop: usize,
    means: &[f64],
) -> Result<Tensor<T>> {
    let mut t = stacked.crop2d(top, left, crop, crop)?;
    let plane = crop * crop;
    for (c, &m) in means.iter().enumerate() {
        let m = T::from_f64(m);
        for v in &mut t.data_mut()[c * plane..(c + 1) * plane] {
            *v -= m;
        }
    }
    Ok(t)
}

/// Center-crop (or multi-crop averaged) predictions for `subset`, mapped
/// into score units by the `(mean, std)` output normalization.
fn predict_subset<T: Real>(
    net: &Network<T>,
    data: &PreparedData<T>,
    subset: &[usize],
    crop: usize,
    batch_size: usize,
    threads: usize,
    multicrop: Option<(usize, u64)>,
    score_norm: (f64, f64),
) -> Result<Vec<f64>> {
    let mut plans: Vec<(usize, usize, usize)> = Vec::new();
    let mut per_sample = 1;
    match multicrop {
        None => {
            for &i in subset {
                let stored = data.stacked[i].as_ref().expect("decomposed").shape()[1];
                let off = (stored - crop) / 2;
                plans.push((i, off, off));
            }
        }
        Some((n_crops, seed)) => {
            per_sample = n_crops.max(1);
            let mut rng = Rng::new(seed);
            for &i in subset {
                let stored = data.stacked[i].as_ref().expect("decomposed").shape()[1];
                let span = stored - crop + 1;
                for _ in 0..per_sample {
                    let top = rng.randint(span);
                    let left = rng.randint(span);
                    plans.push((i, top, left));
                }
            }
        }
    }
    let mut preds = Vec::with_capacity(plans.len());
    for chunk in plans.chunks(batch_size.max(1)) {
        let tensors = par_map(threads, chunk, |_, &(i, top, left)| {
            make_sample(data.stacked[i].as_ref().expect("decomposed"), top, left, crop, &data.means)
        });
        let mut batch = Vec::with_capacity(tensors.len());
        for t in tensors {
            batch.push(t?);
        }
        let (p, _) = net.forward_batch(&batch, Mode::Eval, None, threads)?;
        preds.extend(p.into_iter().map(|v| score_norm.0 + score_norm.1 * v.to_f64()));
    }
    Ok(preds
        .chunks(per_sample)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// Train from scratch. See [`train_with_init`].
pub fn train<T: Real>(
    cfg: &TrainConfig,
    idx: &DatasetIndex,
    split: &Split,
    cache_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    train_with_init(cfg, idx, split, cache_dir, None)
}

/// The epoch loop: decompose (through the cache), compute training-split
/// channel means, then per epoch draw fresh crops, run minibatch SGD and
/// evaluate with center crops on the test split — or on the training split
/// itself when the split has no test side. The best-by-Pearson and final
/// parameters are both returned.
///
/// `init` continues training from an existing network (cascade stages);
/// its spec must match the config's architecture and channel width.
pub fn train_with_init<T: Real>(
    cfg: &TrainConfig,
    idx: &DatasetIndex,
    split: &Split,
    cache_dir: Option<&Path>,
    init: Option<Network<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let channels = cfg.channels.channel_count();
    let spec = cfg.arch.with_channels(channels).with_dropout_keep(cfg.dropout_keep);
    spec.shape_chain()?;
    if split.train.is_empty() {
        return Err(Error::Arg("empty training split".into()));
    }
    for &i in split.train.iter().chain(&split.test) {
        if i >= idx.len() {
            return Err(Error::Arg(format!("split references record {i} of {}", idx.len())));
        }
    }
    let crop = spec.crop_size;
    let stored = spec.stored_size;
    if crop > stored {
        return Err(Error::Arg(format!("crop {crop} exceeds stored size {stored}")));
    }

    let needed: BTreeSet<usize> = split.train.iter().chain(&split.test).copied().collect();
    let data = prepare_data::<T>(cfg, idx, &needed, &split.train, cache_dir)?;

    // The network regresses standardized scores; predictions map back via
    // the descriptor's affine normalization.
    let t_mean = split.train.iter().map(|&i| data.targets[i]).sum::<f64>() / split.train.len() as f64;
    let t_var = split.train.iter().map(|&i| (data.targets[i] - t_mean).powi(2)).sum::<f64>()
        / split.train.len() as f64;
    let t_std = if t_var.sqrt() > 1e-12 { t_var.sqrt() } else { 1.0 };

    let mut root = Rng::new(cfg.seed);
    let init_seed = root.next_u64();
    let mut net = match init {
        Some(n) => {
            if n.spec().layers != spec.layers
                || n.spec().in_channels != channels
                || n.spec().crop_size != crop
            {
                return Err(Error::State("initial network does not match the config".into()));
            }
            n
        }
        None => Network::build(&spec, channels, init_seed)?,
    };

    // Frozen per-image crop offsets when --fixed-crops is on, drawn once in
    // record-index order.
    let span = stored - crop + 1;
    let fixed: Option<Vec<Vec<(usize, usize)>>> = cfg.fixed_crops.then(|| {
        let mut per_image: Vec<Vec<(usize, usize)>> = vec![Vec::new(); idx.len()];
        for &i in &split.train {
            per_image[i] = (0..cfg.crops_per_image)
                .map(|_| (root.randint(span), root.randint(span)))
                .collect();
        }
        per_image
    });

    let eval_subset: &[usize] = if split.test.is_empty() { &split.train } else { &split.test };
    let eval_truths: Vec<f64> = eval_subset.iter().map(|&i| data.targets[i]).collect();

    let mut history = History::default();
    let mut first_loss = f64::NAN;
    let mut best: Option<(f64, usize, Network<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = if cfg.lr_decay_every > 0 {
            cfg.lr * cfg.lr_decay_factor.powi(((epoch - 1) / cfg.lr_decay_every) as i32)
        } else {
            cfg.lr
        };

        let mut order = split.train.to_vec();
        root.shuffle(&mut order);
        // (record, top, left, dropout seed); all randomness drawn here, up
        // front, so batches can be materialized in parallel.
        let mut plan: Vec<(usize, usize, usize, u64)> =
            Vec::with_capacity(order.len() * cfg.crops_per_image);
        for &img in &order {
            for c in 0..cfg.crops_per_image {
                let (top, left) = match &fixed {
                    Some(per_image) => per_image[img][c],
                    None => (root.randint(span), root.randint(span)),
                };
                plan.push((img, top, left, root.next_u64()));
            }
        }

        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (batch_no, chunk) in plan.chunks(cfg.batch_size).enumerate() {
            let tensors = par_map(cfg.threads, chunk, |_, &(img, top, left, _)| {
                make_sample(
                    data.stacked[img].as_ref().expect("decomposed"),
                    top,
                    left,
                    crop,
                    &data.means,
                )
            });
            let mut batch = Vec::with_capacity(tensors.len());
            for t in tensors {
                batch.push(t?);
            }
            let seeds: Vec<u64> = chunk.iter().map(|&(_, _, _, s)| s).collect();
            let (preds, caches) = net.forward_batch(&batch, Mode::Train, Some(&seeds), cfg.threads)?;
            let pred_t = Tensor::from_vec(&[preds.len()], preds)?;
            let target_t = Tensor::from_vec(
                &[chunk.len()],
                chunk
                    .iter()
                    .map(|&(img, ..)| T::from_f64((data.targets[img] - t_mean) / t_std))
                    .collect(),
            )?;
            let (loss, dpred) = loss_euclidean(&pred_t, &target_t)?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {batch_no}, lr {lr}"
                )));
            }
            let grads = net.backward_batch(&caches, dpred.data(), cfg.threads)?;
            let first_conv = net.spec().first_conv();
            net.sgd_step_scaled(&grads, lr, cfg.momentum, cfg.weight_decay, |layer| {
                if Some(layer) == first_conv {
                    cfg.conv1_lr_mult
                } else {
                    1.0
                }
            })?;
            loss_sum += loss * chunk.len() as f64;
            sample_count += chunk.len();
        }
        let train_loss = loss_sum / sample_count as f64;
        if epoch == 1 {
            first_loss = train_loss;
        }

        let multicrop = cfg.eval_multicrop.then(|| (cfg.crops_per_image, root.next_u64()));
        let preds = predict_subset(
            &net,
            &data,
            eval_subset,
            crop,
            cfg.batch_size,
            cfg.threads,
            multicrop,
            (t_mean, t_std),
        )?;
        let eval_pearson = match pearson(&eval_truths, &preds) {
            Ok(r) => r,
            Err(Error::UndefinedCorrelation(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochStat { epoch, train_loss, eval_pearson });

        if eval_pearson.is_finite()
            && best.as_ref().map_or(true, |(b, _, _)| eval_pearson > *b)
        {
            best = Some((eval_pearson, epoch, net.clone()));
        }

        let pearson_ok = cfg.early_stop_pearson.map_or(false, |t| eval_pearson >= t);
        let loss_ok = cfg
            .early_stop_loss_ratio
            .map_or(false, |t| train_loss < t * first_loss);
        let stop = match (cfg.early_stop_pearson, cfg.early_stop_loss_ratio) {
            (Some(_), Some(_)) => pearson_ok && loss_ok,
            (Some(_), None) => pearson_ok,
            (None, Some(_)) => loss_ok,
            (None, None) => false,
        };
        if stop {
            break;
        }
    }

    let descriptor = ChannelDescriptor::new(cfg.channels, data.means.clone(), cfg.wls.clone())
        .with_score_norm(t_mean, t_std);
    let (best_epoch, best_net) = match best {
        Some((_, e, n)) => (e, n),
        None => (history.epochs.len(), net.clone()),
    };
    Ok(TrainOutcome {
        final_model: ModelFile { network: net, descriptor: descriptor.clone() },
        best_model: ModelFile { network: best_net, descriptor },
        best_epoch,
        history,
    })
}

pub struct CascadeOutcome<T> {
    /// One training outcome per stage, in stage order.
    pub stages: Vec<TrainOutcome<T>>,
    pub stage_sets: Vec<ChannelSet>,
}

impl<T> CascadeOutcome<T> {
    pub fn final_model(&self) -> &ModelFile<T> {
        &self.stages.last().expect("at least one stage").final_model
    }
}

/// Cascaded fine-tuning: stage 1 trains from scratch on its channel set;
/// each later stage starts from the previous stage's final parameters
/// (adapting the first conv layer when the channel width changes) and
/// trains at lr × `finetune_lr_factor`. The default stage order is
/// detail → base → rgb.
pub fn cascade_train<T: Real>(
    cfg: &TrainConfig,
    idx: &DatasetIndex,
    split: &Split,
    stages: &[ChannelSet],
    cache_dir: Option<&Path>,
) -> Result<CascadeOutcome<T>> {
    if stages.is_empty() {
        return Err(Error::Arg("cascade needs at least one stage".into()));
    }
    let mut outcomes: Vec<TrainOutcome<T>> = Vec::with_capacity(stages.len());
    let mut stage_seed_rng = Rng::new(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    for (si, &set) in stages.iter().enumerate() {
        let mut stage_cfg = cfg.clone();
        stage_cfg.channels = set;
        if si > 0 {
            stage_cfg.lr = cfg.lr * cfg.finetune_lr_factor;
            stage_cfg.seed = stage_seed_rng.next_u64();
        }
        let init = if si == 0 {
            None
        } else {
            let prev = &outcomes[si - 1].final_model.network;
            let adapt_seed = stage_seed_rng.next_u64();
            Some(prev.adapt_input(set.channel_count(), adapt_seed, cfg.adapt_mode)?)
        };
        let outcome = train_with_init(&stage_cfg, idx, split, cache_dir, init)?;
        outcomes.push(outcome);
    }
    Ok(CascadeOutcome { stages: outcomes, stage_sets: stages.to_vec() })
}

/// Per-sample predictions, Pearson (or its failure), MAE and RMSE.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_fingerprint: String,
    /// (id, ground truth, prediction) per sample.
    pub samples: Vec<(String, f64, f64)>,
    /// None when the correlation is undefined; the reason is then in
    /// `pearson_error`.
    pub pearson_r: Option<f64>,
    pub pearson_error: Option<String>,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub multicrop: bool,
    pub crops: usize,
    pub seed: u64,
    pub threads: usize,
    pub batch_size: usize,
    pub cache_dir: Option<PathBuf>,
    pub config_fingerprint: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            multicrop: false,
            crops: 10,
            seed: 1,
            threads: 1,
            batch_size: 16,
            cache_dir: None,
            config_fingerprint: String::new(),
        }
    }
}

/// Evaluate a model on `subset` of the index (center crops by default).
pub fn evaluate<T: Real>(
    model: &ModelFile<T>,
    idx: &DatasetIndex,
    subset: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if subset.is_empty() {
        return Err(Error::Arg("empty evaluation subset".into()));
    }
    let spec = model.network.spec();
    let desc = &model.descriptor;
    if desc.channel_set.channel_count() != spec.in_channels {
        return Err(Error::State("model descriptor does not match its input width".into()));
    }
    let set = desc.channel_set;
    let size = spec.stored_size;
    let order: Vec<usize> = subset.to_vec();
    let decomposed = par_map(opts.threads, &order, |_, &i| {
        decompose_cached::<T>(&idx.resolve(i), &desc.wls, size, opts.cache_dir.as_deref())
            .map(|ch| ch.stack(set))
    });
    let mut stacked: Vec<Option<Tensor<T>>> = vec![None; idx.len()];
    for (&i, t) in order.iter().zip(decomposed) {
        stacked[i] = Some(t?);
    }
    let data = PreparedData {
        stacked,
        targets: idx.records.iter().map(|r| r.score).collect(),
        means: desc.means.clone(),
    };
    let multicrop = opts.multicrop.then_some((opts.crops, opts.seed));
    let preds = predict_subset(
        &model.network,
        &data,
        subset,
        spec.crop_size,
        opts.batch_size,
        opts.threads,
        multicrop,
        (desc.score_mean, desc.score_std),
    )?;
    let truths: Vec<f64> = subset.iter().map(|&i| data.targets[i]).collect();
    let (pearson_r, pearson_error) = match pearson(&truths, &preds) {
        Ok(r) => (Some(r), None),
        Err(Error::UndefinedCorrelation(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    let n = preds.len() as f64;
    let mae = truths.iter().zip(&preds).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let rmse = (truths.iter().zip(&preds).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / n).sqrt();
    let samples = subset
        .iter()
        .zip(&preds)
        .map(|(&i, &p)| (idx.records[i].path.display().to_string(), data.targets[i], p))
        .collect();
    Ok(EvalReport {
        config_fingerprint: opts.config_fingerprint.clone(),
        samples,
        pearson_r,
        pearson_error,
        mae,
        rmse,
    })
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "null".into(),
    }
}

impl EvalReport {
    /// Human-readable JSON-shaped text with a stable key order. Floats are
    /// printed with Rust's shortest-roundtrip formatting, so reading the
    /// file back reproduces them bit-for-bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        let _ = writeln!(out, "  \"config_fingerprint\": \"{}\",", escape(&self.config_fingerprint));
        let _ = writeln!(out, "  \"n\": {},", self.samples.len());
        let _ = writeln!(out, "  \"pearson_r\": {},", fmt_opt(self.pearson_r));
        match &self.pearson_error {
            Some(msg) => {
                let _ = writeln!(out, "  \"pearson_error\": \"{}\",", escape(msg));
            }
            None => {
                let _ = writeln!(out, "  \"pearson_error\": null,");
            }
        }
        let _ = writeln!(out, "  \"mae\": {},", self.mae);
        let _ = writeln!(out, "  \"rmse\": {},", self.rmse);
        out.push_str("  \"samples\": [\n");
        for (i, (id, truth, pred)) in self.samples.iter().enumerate() {
            let comma = if i + 1 == self.samples.len() { "" } else { "," };
            let _ = writeln!(
                out,
                "    {{\"id\": \"{}\", \"truth\": {truth}, \"prediction\": {pred}}}{comma}",
                escape(id)
            );
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parse a file produced by [`EvalReport::to_text`]. This reads only
    /// that writer's layout, not arbitrary JSON.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "unrecognized report layout".into(),
        })
    }

    pub fn from_text(text: &str) -> Option<Self> {
        fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
            line.trim().strip_prefix(&format!("\"{key}\": "))?.strip_suffix(',').or_else(|| {
                line.trim().strip_prefix(&format!("\"{key}\": "))
            })
        }
        fn quoted(v: &str) -> Option<String> {
            let v = v.strip_prefix('"')?.strip_suffix('"')?;
            Some(unescape(v))
        }
        let mut fingerprint = String::new();
        let mut pearson_r = None;
        let mut pearson_error = None;
        let mut mae = None;
        let mut rmse = None;
        let mut samples = Vec::new();
        for line in text.lines() {
            let t = line.trim();
            if let Some(v) = field(t, "config_fingerprint") {
                fingerprint = quoted(v)?;
            } else if let Some(v) = field(t, "pearson_r") {
                if v != "null" {
                    pearson_r = Some(v.parse().ok()?);
                }
            } else if let Some(v) = field(t, "pearson_error") {
                if v != "null" {
                    pearson_error = Some(quoted(v)?);
                }
            } else if let Some(v) = field(t, "mae") {
                mae = Some(v.parse().ok()?);
            } else if let Some(v) = field(t, "rmse") {
                rmse = Some(v.parse().ok()?);
            } else if t.starts_with("{\"id\": ") {
                let body = t.trim_start_matches('{').trim_end_matches(',').trim_end_matches('}');
                let mut id = None;
                let mut truth = None;
                let mut pred = None;
                for part in split_top_level(body) {
                    let part = part.trim();
                    if let Some(v) = part.strip_prefix("\"id\": ") {
                        id = quoted(v);
                    } else if let Some(v) = part.strip_prefix("\"truth\": ") {
                        truth = v.parse().ok();
                    } else if let Some(v) = part.strip_prefix("\"prediction\": ") {
                        pred = v.parse().ok();
                    }
                }
                samples.push((id?, truth?, pred?));
            }
        }
        Some(EvalReport {
            config_fingerprint: fingerprint,
            samples,
            pearson_r,
            pearson_error,
            mae: mae?,
            rmse: rmse?,
        })
    }
}

/// Split on commas that sit outside quoted strings.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth_quote = false;
    let mut escape_next = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        if escape_next {
            escape_next = false;
            continue;
        }
        match c {
            '\\' => escape_next = true,
            '"' => depth_quote = !depth_quote,
            ',' if !depth_quote => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}
