//! Command-line entry point.
//!
//! One flat key=value configuration (UTF-8, `#` comments) drives every
//! subcommand; command-line `--key value` pairs override file values.
//! Unknown keys are rejected with their line number and every bad key is
//! reported before exiting. Each run writes its fully-resolved
//! configuration into the run directory as `config.resolved`.
//!
//! Subcommands: decompose, train, cascade, eval, crossval, predict,
//! visualize, synth. Diagnostics go to stderr; data goes to files (and,
//! for `predict`, to stdout).

use crate::error::{Error, Result};
use crate::imageproc::{self, ChannelSet, WlsParams};
use crate::net::{load_model, save_model, AdaptMode, LayerSpec, ModelFile, NetworkSpec};
use crate::pipeline::{
    self, cascade_train, evaluate, kfold, load_index, split_train_test, synth_dataset, train,
    DatasetIndex, EvalOptions, Split, TrainConfig, TrainOutcome,
};
use crate::real::Real;
use crate::util::{fnv1a, hex64};
use crate::viz::{self, MapStage};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Canonical key list with defaults; `config.resolved` is written in this
/// order. An empty default means "unset".
const KEY_DEFAULTS: &[(&str, &str)] = &[
    ("arch", "cnn3"),
    ("custom_layers", ""),
    ("input_size", "0"),
    ("crop_size", ""),
    ("channels", "detail"),
    ("stages", "detail,base,rgb"),
    ("index", ""),
    ("model", ""),
    ("out_dir", "runs/run"),
    ("cache_dir", ""),
    ("seed", "1"),
    ("threads", "1"),
    ("precision", "f64"),
    ("epochs", "50"),
    ("batch_size", "16"),
    ("learning_rate", "0.01"),
    ("lr_decay_factor", "0.1"),
    ("lr_decay_every", "0"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0005"),
    ("dropout_keep", "0.5"),
    ("crops_per_image", "10"),
    ("fixed_crops", "false"),
    ("eval_multicrop", "false"),
    ("early_stop_pearson", ""),
    ("early_stop_loss_ratio", ""),
    ("n_train", "400"),
    ("k", "5"),
    ("finetune_lr_factor", "0.1"),
    ("adapt_mode", "reinit"),
    ("conv1_lr_mult", "1.0"),
    ("wls_lambda", "0.125"),
    ("wls_alpha", "1.2"),
    ("wls_eps", "0.0001"),
    ("wls_cg_tol", "0.000001"),
    ("wls_cg_max_iters", "0"),
    ("layer", "1"),
    ("map_stage", "prepool"),
    ("synth_n", "32"),
    ("synth_size", "56"),
    ("resume", "false"),
];

fn is_known_key(key: &str) -> bool {
    KEY_DEFAULTS.iter().any(|(k, _)| *k == key)
}

pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub positionals: Vec<String>,
}

impl RunConfig {
    fn defaults() -> Self {
        RunConfig {
            values: KEY_DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            positionals: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    /// Fully-resolved config text in canonical key order.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEY_DEFAULTS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        hex64(fnv1a(self.resolved_text().as_bytes()))
    }
}

fn parse_config_file(path: &Path, cfg: &mut RunConfig, problems: &mut Vec<String>) {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            problems.push(format!("{}: {e}", path.display()));
            return;
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(format!("{}:{line_no}: expected 'key = value'", path.display()));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if !is_known_key(key) {
            problems.push(format!("{}:{line_no}: unknown key '{key}'", path.display()));
            continue;
        }
        cfg.set(key, value);
    }
}

/// Build the configuration: defaults, then `--config` files in order, then
/// remaining `--key value` overrides; bare arguments are positionals.
fn build_config(args: &[String], problems: &mut Vec<String>) -> RunConfig {
    let mut cfg = RunConfig::defaults();
    // First pass: config files, in order of appearance.
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                problems.push("--config needs a file argument".into());
                break;
            }
            parse_config_file(Path::new(&args[i + 1]), &mut cfg, problems);
            i += 2;
        } else {
            i += 1;
        }
    }
    // Second pass: key overrides and positionals.
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--config" {
            i += 2;
            continue;
        }
        if let Some(name) = arg.strip_prefix("--") {
            let key = name.replace('-', "_");
            if !is_known_key(&key) {
                problems.push(format!("unknown option '--{name}'"));
                i += 1;
                continue;
            }
            if i + 1 >= args.len() {
                problems.push(format!("option '--{name}' needs a value"));
                break;
            }
            cfg.set(&key, &args[i + 1]);
            i += 2;
        } else {
            cfg.positionals.push(arg.clone());
            i += 1;
        }
    }
    cfg
}

/// Typed view of the configuration. Every parse failure is collected so a
/// bad config reports all offending keys at once.
pub struct Typed {
    pub arch: NetworkSpec,
    pub channels: ChannelSet,
    pub stages: Vec<ChannelSet>,
    pub index: String,
    pub model: String,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub f64_mode: bool,
    pub n_train: usize,
    pub k: usize,
    pub layer: usize,
    pub map_stage: MapStage,
    pub synth_n: usize,
    pub synth_size: usize,
    pub resume: bool,
    pub train: TrainConfig,
    pub positionals: Vec<String>,
}

struct TypedReader<'a> {
    cfg: &'a RunConfig,
    problems: Vec<String>,
}

impl<'a> TypedReader<'a> {
    fn f64(&mut self, key: &str) -> f64 {
        match self.cfg.get(key).parse() {
            Ok(v) => v,
            Err(_) => {
                self.problems.push(format!("{key}: '{}' is not a number", self.cfg.get(key)));
                0.0
            }
        }
    }
    fn usize(&mut self, key: &str) -> usize {
        match self.cfg.get(key).parse() {
            Ok(v) => v,
            Err(_) => {
                self.problems.push(format!("{key}: '{}' is not a non-negative integer", self.cfg.get(key)));
                0
            }
        }
    }
    fn u64(&mut self, key: &str) -> u64 {
        match self.cfg.get(key).parse() {
            Ok(v) => v,
            Err(_) => {
                self.problems.push(format!("{key}: '{}' is not a 64-bit unsigned integer", self.cfg.get(key)));
                0
            }
        }
    }
    fn bool(&mut self, key: &str) -> bool {
        match self.cfg.get(key) {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                self.problems.push(format!("{key}: '{other}' is not a boolean (true/false)"));
                false
            }
        }
    }
    fn opt_f64(&mut self, key: &str) -> Option<f64> {
        let v = self.cfg.get(key);
        if v.is_empty() {
            return None;
        }
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.problems.push(format!("{key}: '{v}' is not a number"));
                None
            }
        }
    }
}

fn parse_custom_layers(text: &str, problems: &mut Vec<String>) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for tok in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if tok == "pool" {
            out.push(LayerSpec::Pool);
        } else if let Some(rest) = tok.strip_prefix("conv:") {
            let parts: Vec<&str> = rest.split('x').collect();
            match (parts.first().and_then(|p| p.parse().ok()), parts.get(1).and_then(|p| p.parse().ok())) {
                (Some(maps), Some(kernel)) if parts.len() == 2 => {
                    out.push(LayerSpec::Conv { out_maps: maps, kernel })
                }
                _ => problems.push(format!("custom_layers: bad conv token '{tok}' (want conv:MAPSxKERNEL)")),
            }
        } else if let Some(rest) = tok.strip_prefix("fc:") {
            let (n_text, relu) = match rest.strip_suffix(":linear") {
                Some(n) => (n, false),
                None => (rest, true),
            };
            match n_text.parse() {
                Ok(n) => out.push(LayerSpec::FullyConnected { out_neurons: n, relu }),
                Err(_) => problems.push(format!("custom_layers: bad fc token '{tok}'")),
            }
        } else if let Some(rest) = tok.strip_prefix("dropout:") {
            match rest.parse() {
                Ok(keep) => out.push(LayerSpec::Dropout { keep }),
                Err(_) => problems.push(format!("custom_layers: bad dropout token '{tok}'")),
            }
        } else {
            problems.push(format!("custom_layers: unknown token '{tok}'"));
        }
    }
    out
}

fn typed(cfg: &RunConfig) -> std::result::Result<Typed, Vec<String>> {
    let mut r = TypedReader { cfg, problems: Vec::new() };

    let channels = match ChannelSet::parse(cfg.get("channels")) {
        Some(c) => c,
        None => {
            r.problems.push(format!(
                "channels: '{}' (want a|b|rgb|base|detail|combined)",
                cfg.get("channels")
            ));
            ChannelSet::Detail
        }
    };
    let mut stages = Vec::new();
    for tok in cfg.get("stages").split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match ChannelSet::parse(tok) {
            Some(c) => stages.push(c),
            None => r.problems.push(format!("stages: bad channel set '{tok}'")),
        }
    }

    let arch = match cfg.get("arch") {
        "custom" => {
            let layers = parse_custom_layers(cfg.get("custom_layers"), &mut r.problems);
            let input_size = r.usize("input_size");
            let crop = match cfg.get("crop_size") {
                "" => input_size,
                _ => r.usize("crop_size"),
            };
            if layers.is_empty() {
                r.problems.push("custom arch needs custom_layers".into());
            }
            if input_size == 0 {
                r.problems.push("custom arch needs input_size >= 1".into());
            }
            NetworkSpec::custom(channels.channel_count(), input_size.max(1), crop.max(1), layers)
        }
        name => match NetworkSpec::by_name(name, channels.channel_count()) {
            Some(s) => s,
            None => {
                r.problems.push(format!("arch: '{name}' (want cnn1|cnn2|cnn3|custom)"));
                NetworkSpec::cnn1(1)
            }
        },
    };

    let f64_mode = match cfg.get("precision") {
        "f64" => true,
        "f32" => false,
        other => {
            r.problems.push(format!("precision: '{other}' (want f32|f64)"));
            true
        }
    };
    let adapt_mode = match cfg.get("adapt_mode") {
        "reinit" => AdaptMode::Reinit,
        "replicate" => AdaptMode::Replicate,
        other => {
            r.problems.push(format!("adapt_mode: '{other}' (want reinit|replicate)"));
            AdaptMode::Reinit
        }
    };
    let map_stage = match cfg.get("map_stage") {
        "prepool" => MapStage::PrePool,
        "postpool" => MapStage::PostPool,
        other => {
            r.problems.push(format!("map_stage: '{other}' (want prepool|postpool)"));
            MapStage::PrePool
        }
    };

    let wls = WlsParams {
        lambda: r.f64("wls_lambda"),
        alpha: r.f64("wls_alpha"),
        eps: r.f64("wls_eps"),
        cg_tol: r.f64("wls_cg_tol"),
        cg_max_iters: r.usize("wls_cg_max_iters"),
    };

    let mut train = TrainConfig::new(arch.clone(), channels);
    train.epochs = r.usize("epochs");
    train.batch_size = r.usize("batch_size");
    train.lr = r.f64("learning_rate");
    train.lr_decay_factor = r.f64("lr_decay_factor");
    train.lr_decay_every = r.usize("lr_decay_every");
    train.momentum = r.f64("momentum");
    train.weight_decay = r.f64("weight_decay");
    train.dropout_keep = r.f64("dropout_keep");
    train.crops_per_image = r.usize("crops_per_image");
    train.fixed_crops = r.bool("fixed_crops");
    train.seed = r.u64("seed");
    train.threads = r.usize("threads").max(1);
    train.wls = wls;
    train.conv1_lr_mult = r.f64("conv1_lr_mult");
    train.finetune_lr_factor = r.f64("finetune_lr_factor");
    train.adapt_mode = adapt_mode;
    train.early_stop_pearson = r.opt_f64("early_stop_pearson");
    train.early_stop_loss_ratio = r.opt_f64("early_stop_loss_ratio");
    train.eval_multicrop = r.bool("eval_multicrop");

    let out_dir = PathBuf::from(cfg.get("out_dir"));
    // Cache precedence: FBP_CACHE_DIR env, then the cache_dir key, then
    // <out_dir>/cache.
    let cache_dir = match std::env::var("FBP_CACHE_DIR") {
        Ok(dir) if !dir.is_empty() => Some(PathBuf::from(dir)),
        _ => match cfg.get("cache_dir") {
            "" => Some(out_dir.join("cache")),
            dir => Some(PathBuf::from(dir)),
        },
    };

    let t = Typed {
        arch,
        channels,
        stages,
        index: cfg.get("index").to_string(),
        model: cfg.get("model").to_string(),
        out_dir,
        cache_dir,
        seed: r.u64("seed"),
        threads: r.usize("threads").max(1),
        f64_mode,
        n_train: r.usize("n_train"),
        k: r.usize("k"),
        layer: r.usize("layer"),
        map_stage,
        synth_n: r.usize("synth_n"),
        synth_size: r.usize("synth_size"),
        resume: r.bool("resume"),
        train,
        positionals: cfg.positionals.clone(),
    };
    if r.problems.is_empty() {
        Ok(t)
    } else {
        Err(r.problems)
    }
}

/// Create the run directory, enforce the resume contract, and write the
/// resolved configuration.
fn open_run_dir(cfg: &RunConfig, t: &Typed) -> Result<()> {
    std::fs::create_dir_all(&t.out_dir).map_err(|e| Error::io(&t.out_dir, e))?;
    let resolved_path = t.out_dir.join("config.resolved");
    let text = cfg.resolved_text();
    if resolved_path.exists() {
        let existing = std::fs::read_to_string(&resolved_path).map_err(|e| Error::io(&resolved_path, e))?;
        let same = fnv1a(existing.as_bytes()) == fnv1a(text.as_bytes());
        if !t.resume {
            return Err(Error::Arg(format!(
                "run directory {} already holds a resolved config; pass --resume true to re-run",
                t.out_dir.display()
            )));
        }
        if !same {
            return Err(Error::Arg(format!(
                "--resume refused: config checksum differs from the one recorded in {}",
                resolved_path.display()
            )));
        }
    }
    std::fs::write(&resolved_path, &text).map_err(|e| Error::io(&resolved_path, e))?;
    Ok(())
}

fn require_index(t: &Typed) -> Result<DatasetIndex> {
    if t.index.is_empty() {
        return Err(Error::Arg("this command needs --index pointing at a path,score CSV".into()));
    }
    load_index(Path::new(&t.index))
}

fn make_split(t: &Typed, idx: &DatasetIndex) -> Result<Split> {
    if t.n_train == 0 || t.n_train >= idx.len() {
        // Train on everything; per-epoch evaluation runs on the training
        // records themselves.
        Ok(Split::train_only(idx.len()))
    } else {
        split_train_test(idx, t.n_train, t.seed)
    }
}

fn save_outcome<T: Real>(
    t: &Typed,
    outcome: &TrainOutcome<T>,
    prefix: &str,
) -> Result<()> {
    let best = t.out_dir.join(format!("{prefix}model.fbpm"));
    let fin = t.out_dir.join(format!("{prefix}model-final.fbpm"));
    save_model(&outcome.best_model.network, &outcome.best_model.descriptor, &best)?;
    save_model(&outcome.final_model.network, &outcome.final_model.descriptor, &fin)?;
    outcome.history.write_csv(&t.out_dir.join(format!("{prefix}history.csv")))?;
    Ok(())
}

fn eval_and_report<T: Real>(
    t: &Typed,
    cfg: &RunConfig,
    model: &ModelFile<T>,
    idx: &DatasetIndex,
    subset: &[usize],
    prefix: &str,
) -> Result<Option<f64>> {
    let opts = EvalOptions {
        multicrop: t.train.eval_multicrop,
        crops: t.train.crops_per_image,
        seed: t.seed,
        threads: t.threads,
        batch_size: t.train.batch_size,
        cache_dir: t.cache_dir.clone(),
        config_fingerprint: cfg.fingerprint(),
    };
    let report = evaluate(model, idx, subset, &opts)?;
    report.write(&t.out_dir.join(format!("{prefix}report.txt")))?;
    viz::scatter_report(&report, &t.out_dir.join(format!("{prefix}scatter.ppm")))?;
    Ok(report.pearson_r)
}

fn cmd_synth(cfg: &RunConfig, t: &Typed) -> Result<()> {
    open_run_dir(cfg, t)?;
    let idx = synth_dataset(t.synth_n, t.synth_size, t.seed, &t.out_dir)?;
    eprintln!("synth: wrote {} images and index.csv to {}", idx.len(), t.out_dir.display());
    Ok(())
}

fn cmd_decompose<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    if t.positionals.is_empty() {
        return Err(Error::Arg("decompose needs at least one input PPM".into()));
    }
    open_run_dir(cfg, t)?;
    let size = t.arch.stored_size;
    for input in &t.positionals {
        let path = Path::new(input);
        let img = imageproc::read_image(path)?;
        let ch = imageproc::decompose::<T>(&img, &t.train.wls, size)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        // Base is L/100 in [0,1]; detail is a small signed residual; a and
        // b are /110 in roughly [-1,1].
        imageproc::write_pgm(&ch.base, &t.out_dir.join(format!("{stem}.base.pgm")), 0.0, 1.0)?;
        imageproc::write_pgm(&ch.detail, &t.out_dir.join(format!("{stem}.detail.pgm")), -0.25, 0.25)?;
        imageproc::write_pgm(&ch.a, &t.out_dir.join(format!("{stem}.a.pgm")), -1.0, 1.0)?;
        imageproc::write_pgm(&ch.b, &t.out_dir.join(format!("{stem}.b.pgm")), -1.0, 1.0)?;
        eprintln!("decompose: {input} -> {stem}.{{base,detail,a,b}}.pgm");
    }
    Ok(())
}

fn cmd_train<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    open_run_dir(cfg, t)?;
    let idx = require_index(t)?;
    let split = make_split(t, &idx)?;
    let outcome = train::<T>(&t.train, &idx, &split, t.cache_dir.as_deref())?;
    save_outcome(t, &outcome, "")?;
    let eval_subset: &[usize] = if split.test.is_empty() { &split.train } else { &split.test };
    let r = eval_and_report(t, cfg, &outcome.best_model, &idx, eval_subset, "")?;
    eprintln!(
        "train: {} epochs, best epoch {}, eval pearson {}",
        outcome.history.epochs.len(),
        outcome.best_epoch,
        r.map_or("undefined".to_string(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn cmd_cascade<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    open_run_dir(cfg, t)?;
    if t.stages.is_empty() {
        return Err(Error::Arg("cascade needs a non-empty stages list".into()));
    }
    let idx = require_index(t)?;
    let split = make_split(t, &idx)?;
    let outcome = cascade_train::<T>(&t.train, &idx, &split, &t.stages, t.cache_dir.as_deref())?;
    for (i, (stage, set)) in outcome.stages.iter().zip(&outcome.stage_sets).enumerate() {
        save_outcome(t, stage, &format!("stage{}-{}.", i + 1, set.name()))?;
    }
    // The last stage's best model is the deliverable.
    let last = outcome.stages.last().expect("stages");
    save_outcome(t, last, "")?;
    let eval_subset: &[usize] = if split.test.is_empty() { &split.train } else { &split.test };
    let r = eval_and_report(t, cfg, &last.best_model, &idx, eval_subset, "")?;
    eprintln!(
        "cascade: {} stages done, final eval pearson {}",
        outcome.stages.len(),
        r.map_or("undefined".to_string(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn cmd_eval<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    if t.model.is_empty() {
        return Err(Error::Arg("eval needs --model".into()));
    }
    open_run_dir(cfg, t)?;
    let idx = require_index(t)?;
    let model: ModelFile<T> = load_model(Path::new(&t.model))?;
    let subset: Vec<usize> = (0..idx.len()).collect();
    let r = eval_and_report(t, cfg, &model, &idx, &subset, "")?;
    eprintln!(
        "eval: {} samples, pearson {}",
        idx.len(),
        r.map_or("undefined".to_string(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn cmd_crossval<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    open_run_dir(cfg, t)?;
    let idx = require_index(t)?;
    let splits = kfold(&idx, t.k, t.seed)?;
    let mut rows = String::from("fold,pearson\n");
    let mut sum = 0.0;
    let mut defined = 0usize;
    for (i, split) in splits.iter().enumerate() {
        let outcome = train::<T>(&t.train, &idx, split, t.cache_dir.as_deref())?;
        save_outcome(t, &outcome, &format!("fold{}.", i + 1))?;
        let r = eval_and_report(
            t,
            cfg,
            &outcome.best_model,
            &idx,
            &split.test,
            &format!("fold{}.", i + 1),
        )?;
        match r {
            Some(v) => {
                let _ = writeln!(rows, "{},{v}", i + 1);
                sum += v;
                defined += 1;
            }
            None => {
                let _ = writeln!(rows, "{},nan", i + 1);
            }
        }
        eprintln!("crossval: fold {}/{} done", i + 1, splits.len());
    }
    if defined > 0 {
        let _ = writeln!(rows, "mean,{}", sum / defined as f64);
    } else {
        let _ = writeln!(rows, "mean,nan");
    }
    let path = t.out_dir.join("crossval.csv");
    std::fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
    eprintln!("crossval: wrote {}", path.display());
    Ok(())
}

fn cmd_predict<T: Real>(t: &Typed) -> Result<()> {
    if t.model.is_empty() {
        return Err(Error::Arg("predict needs --model".into()));
    }
    if t.positionals.is_empty() {
        return Err(Error::Arg("predict needs at least one input PPM".into()));
    }
    let model: ModelFile<T> = load_model(Path::new(&t.model))?;
    let spec = model.network.spec();
    let desc = &model.descriptor;
    for input in &t.positionals {
        let path = Path::new(input);
        let ch = pipeline::decompose_cached::<T>(path, &desc.wls, spec.stored_size, t.cache_dir.as_deref())?;
        let mut x = pipeline::center_crop(&ch, desc.channel_set, spec.crop_size)?;
        let plane = spec.crop_size * spec.crop_size;
        for (c, &m) in desc.means.iter().enumerate() {
            let m = T::from_f64(m);
            for v in &mut x.data_mut()[c * plane..(c + 1) * plane] {
                *v -= m;
            }
        }
        let (pred, _) = model.network.forward_sample(&x, crate::net::Mode::Eval, None)?;
        let score = desc.to_score(pred.to_f64()).clamp(1.0, 5.0);
        println!("{input} {score}");
    }
    Ok(())
}

fn cmd_visualize<T: Real>(cfg: &RunConfig, t: &Typed) -> Result<()> {
    if t.model.is_empty() {
        return Err(Error::Arg("visualize needs --model".into()));
    }
    if t.positionals.is_empty() {
        return Err(Error::Arg("visualize needs at least one input PPM".into()));
    }
    open_run_dir(cfg, t)?;
    let model: ModelFile<T> = load_model(Path::new(&t.model))?;
    for input in &t.positionals {
        let path = Path::new(input);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let out = t.out_dir.join(format!("{stem}.conv{}.pgm", t.layer));
        let grid = viz::feature_maps(&model, path, t.layer, t.map_stage, t.cache_dir.as_deref(), &out)?;
        eprintln!(
            "visualize: {input} conv{} -> {} ({} maps, {}x{})",
            t.layer,
            out.display(),
            grid.map_count,
            grid.width,
            grid.height
        );
    }
    Ok(())
}

fn dispatch(command: &str, cfg: &RunConfig, t: &Typed) -> Result<()> {
    macro_rules! per_precision {
        ($f:ident $(, $extra:expr)*) => {
            if t.f64_mode {
                $f::<f64>($($extra),*)
            } else {
                $f::<f32>($($extra),*)
            }
        };
    }
    match command {
        "synth" => cmd_synth(cfg, t),
        "decompose" => per_precision!(cmd_decompose, cfg, t),
        "train" => per_precision!(cmd_train, cfg, t),
        "cascade" => per_precision!(cmd_cascade, cfg, t),
        "eval" => per_precision!(cmd_eval, cfg, t),
        "crossval" => per_precision!(cmd_crossval, cfg, t),
        "predict" => per_precision!(cmd_predict, t),
        "visualize" => per_precision!(cmd_visualize, cfg, t),
        other => Err(Error::Arg(format!("unknown subcommand '{other}'"))),
    }
}

const USAGE: &str = "usage: fbp <subcommand> [--config FILE] [--key value ...] [inputs...]
subcommands: decompose train cascade eval crossval predict visualize synth
global keys: --config --seed --threads --out-dir --precision {f32,f64}
see configs/ and the README for the full key list";

/// CLI entry point; returns the process exit code (0 only on success).
pub fn run(args: &[String]) -> i32 {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        eprintln!("{USAGE}");
        return if args.is_empty() { 2 } else { 0 };
    }
    let command = &args[0];
    let mut problems = Vec::new();
    let cfg = build_config(&args[1..], &mut problems);
    let t = match typed(&cfg) {
        Ok(t) if problems.is_empty() => t,
        Ok(_) => {
            eprintln!("{}", Error::Config(problems));
            return 1;
        }
        Err(mut config_problems) => {
            problems.append(&mut config_problems);
            eprintln!("{}", Error::Config(problems));
            return 1;
        }
    };
    match dispatch(command, &cfg, &t) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fbp {command}: {e}");
            1
        }
    }
}

/// Test convenience: run with string-slice arguments.
pub fn run_args(args: &[&str]) -> i32 {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    run(&owned)
}
