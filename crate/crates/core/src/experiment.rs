//! Flat `key=value` experiment configuration and the train-from-config driver.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::Aggregation;
use crate::data::{classification_set, derive_seed, load_manifest, segmentation_set, Sample, ShapeKind, ToyConfig};
use crate::error::{Error, Result};
use crate::network::config::{join_list, parse_list};
use crate::network::loss::inverse_frequency_weights;
use crate::network::{
    fit, AdamConfig, Checkpoint, EpochLog, KernelScale, LayerConfig, LossConfig, LrSchedule, Model, ModelConfig, Task,
    TrainConfig, TrainState, Variant,
};
use crate::params::ParamStore;
use crate::sampling::{FpsStart, InitSampling, ShiftWeighting};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(ToyConfig),
    Manifest(PathBuf),
}

/// Weights of the cross-entropy term.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    Uniform,
    /// Inverse label frequency over the training set.
    InverseFrequency,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub train: TrainConfig,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub class_weights: ClassWeights,
    pub cosine: bool,
    pub seed: u64,
}

const KEYS: &[&str] = &[
    "task", "variant", "sampling", "weighting", "fps_start", "aggregation", "classes", "global", "head",
    "dropout", "epochs", "target", "batch_size", "eval_batch_size", "augment", "lr", "schedule", "alpha", "beta",
    "k_rep", "h", "class_weights", "shapes", "n_train", "n_test", "n_points", "jitter", "data_seed",
    "manifest", "seed",
];

fn is_layer_key(k: &str) -> Option<usize> {
    k.strip_prefix("layer").and_then(|n| n.parse::<usize>().ok()).filter(|&n| n >= 1)
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) && is_layer_key(k).is_none() {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    /// Builds a configuration from `text` with `overrides` (`key=value`) applied on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(parse_pairs(&overrides.join("\n"))?);
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(p: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| p.get(k).map(String::as_str);
        let task: Task = get("task").unwrap_or("classification").parse()?;
        let kinds = match get("shapes") {
            Some(s) => s.split(',').map(str::parse).collect::<Result<Vec<ShapeKind>>>()?,
            None if task == Task::Segmentation => vec![ShapeKind::Sphere],
            None => ShapeKind::ALL.to_vec(),
        };
        let default_classes = match task {
            Task::Classification => kinds.len(),
            Task::Segmentation => kinds.first().map_or(2, |k| k.n_regions()),
        };
        let n_classes = get("classes").map(|v| num("classes", v)).transpose()?.unwrap_or(default_classes);
        let mut model = match task {
            Task::Classification => ModelConfig::desk_classifier(n_classes),
            Task::Segmentation => ModelConfig::desk_segmenter(n_classes),
        };
        let mut layer_keys: Vec<(usize, &String)> =
            p.iter().filter_map(|(k, v)| is_layer_key(k).map(|n| (n, v))).collect();
        if !layer_keys.is_empty() {
            layer_keys.sort();
            for (i, (n, _)) in layer_keys.iter().enumerate() {
                if *n != i + 1 {
                    return Err(Error::Config(format!("layer keys must be layer1..layerN, missing layer{}", i + 1)));
                }
            }
            let mut layers = layer_keys.iter().map(|(_, v)| v.parse()).collect::<Result<Vec<LayerConfig>>>()?;
            if task == Task::Classification {
                let global = model.layers.last().expect("default global layer").clone();
                layers.push(global);
            }
            model.layers = layers;
        }
        if let Some(g) = get("global") {
            if task != Task::Classification {
                return Err(Error::Config("`global` only applies to classification".into()));
            }
            let last = model.layers.last_mut().expect("global layer");
            last.mlp = parse_list(g)?;
        }
        if let Some(v) = get("variant") {
            model.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = get("sampling") {
            model.sampling.init = match v {
                "fps" => InitSampling::Fps,
                "random" => InitSampling::Random,
                _ => return Err(Error::Config(format!("`sampling`: expected fps or random, got `{v}`"))),
            };
        }
        if let Some(v) = get("weighting") {
            model.sampling.weighting = match v {
                "group-feature" => ShiftWeighting::GroupFeature,
                "average" => ShiftWeighting::Average,
                _ => return Err(Error::Config(format!("`weighting`: expected group-feature or average, got `{v}`"))),
            };
        }
        if let Some(v) = get("fps_start") {
            model.sampling.fps_start =
                if v == "random" { FpsStart::Random } else { FpsStart::Index(num("fps_start", v)?) };
        }
        if let Some(v) = get("aggregation") {
            model.aggregation = match v {
                "sum" => Aggregation::Sum,
                "max" => Aggregation::Max,
                _ => return Err(Error::Config(format!("`aggregation`: expected sum or max, got `{v}`"))),
            };
        }
        if let Some(v) = get("head") {
            model.head = if v.is_empty() { Vec::new() } else { parse_list(v)? };
        }
        if let Some(v) = get("dropout") {
            model.dropout = num("dropout", v)?;
        }
        model.validate()?;

        let mut train = TrainConfig::default();
        if let Some(v) = get("epochs") {
            train.epochs = num("epochs", v)?;
        }
        if let Some(v) = get("target") {
            train.target = match v {
                "none" => None,
                v => Some(num("target", v)?),
            };
        }
        if let Some(v) = get("batch_size") {
            train.batch_size = num("batch_size", v)?;
        }
        if let Some(v) = get("eval_batch_size") {
            train.eval_batch_size = num("eval_batch_size", v)?;
        }
        if let Some(v) = get("augment") {
            train.augment = flag("augment", v)?;
        }
        if train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let mut optimizer = AdamConfig::default();
        if let Some(v) = get("lr") {
            optimizer.lr = num("lr", v)?;
        }
        let cosine = match get("schedule").unwrap_or("cosine") {
            "cosine" => true,
            "constant" => false,
            v => return Err(Error::Config(format!("`schedule`: expected cosine or constant, got `{v}`"))),
        };
        let mut loss = LossConfig::default();
        if let Some(v) = get("alpha") {
            loss.alpha = num("alpha", v)?;
        }
        if let Some(v) = get("beta") {
            loss.beta = num("beta", v)?;
        }
        if let Some(v) = get("k_rep") {
            loss.k_rep = num("k_rep", v)?;
        }
        if let Some(v) = get("h") {
            loss.h = match v.strip_prefix("adaptive:") {
                Some(m) => KernelScale::Adaptive(num("h", m)?),
                None if v == "adaptive" => KernelScale::Adaptive(2.0),
                None => KernelScale::Fixed(num("h", v)?),
            };
        }
        loss.validate()?;
        let class_weights = match get("class_weights") {
            None if task == Task::Segmentation => ClassWeights::InverseFrequency,
            None | Some("uniform") => ClassWeights::Uniform,
            Some("inverse-frequency") => ClassWeights::InverseFrequency,
            Some(v) => {
                let w = v
                    .split(',')
                    .map(|x| num::<f64>("class_weights", x.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if w.len() != n_classes {
                    return Err(Error::Config(format!("{} class weights for {n_classes} classes", w.len())));
                }
                ClassWeights::Fixed(w)
            }
        };
        let seed = get("seed").map(|v| num("seed", v)).transpose()?.unwrap_or(0);
        let data = match get("manifest") {
            Some(m) => DataSource::Manifest(PathBuf::from(m)),
            None => {
                let d = ToyConfig::default();
                DataSource::Toy(ToyConfig {
                    kinds,
                    n_train: get("n_train").map(|v| num("n_train", v)).transpose()?.unwrap_or(d.n_train),
                    n_test: get("n_test").map(|v| num("n_test", v)).transpose()?.unwrap_or(d.n_test),
                    n_points: get("n_points").map(|v| num("n_points", v)).transpose()?.unwrap_or(d.n_points),
                    jitter_sigma: get("jitter").map(|v| num("jitter", v)).transpose()?.unwrap_or(d.jitter_sigma),
                    seed: get("data_seed").map(|v| num("data_seed", v)).transpose()?.unwrap_or(seed),
                })
            }
        };
        Ok(Self { model, data, train, optimizer, loss, class_weights, cosine, seed })
    }

    /// Canonical text listing every setting; parsing it rebuilds the same configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("task={}", m.task),
            format!("variant={}", m.variant),
            format!("sampling={}", if m.sampling.init == InitSampling::Fps { "fps" } else { "random" }),
            format!(
                "weighting={}",
                if m.sampling.weighting == ShiftWeighting::GroupFeature { "group-feature" } else { "average" }
            ),
            format!(
                "fps_start={}",
                match m.sampling.fps_start {
                    FpsStart::Index(i) => i.to_string(),
                    FpsStart::Random => "random".into(),
                }
            ),
            format!("aggregation={}", if m.aggregation == Aggregation::Sum { "sum" } else { "max" }),
            format!("classes={}", m.n_classes),
        ];
        let enc = match m.task {
            Task::Classification => &m.layers[..m.layers.len() - 1],
            Task::Segmentation => &m.layers[..],
        };
        for (i, l) in enc.iter().enumerate() {
            lines.push(format!("layer{}={l}", i + 1));
        }
        if m.task == Task::Classification {
            lines.push(format!("global={}", join_list(&m.layers.last().expect("global").mlp)));
        }
        lines.push(format!("head={}", join_list(&m.head)));
        lines.push(format!("dropout={}", m.dropout));
        lines.push(format!("epochs={}", self.train.epochs));
        if let Some(t) = self.train.target {
            lines.push(format!("target={t}"));
        }
        lines.push(format!("batch_size={}", self.train.batch_size));
        lines.push(format!("eval_batch_size={}", self.train.eval_batch_size));
        lines.push(format!("augment={}", self.train.augment));
        lines.push(format!("lr={}", self.optimizer.lr));
        lines.push(format!("schedule={}", if self.cosine { "cosine" } else { "constant" }));
        lines.push(format!("alpha={}", self.loss.alpha));
        lines.push(format!("beta={}", self.loss.beta));
        lines.push(format!("k_rep={}", self.loss.k_rep));
        lines.push(match self.loss.h {
            KernelScale::Adaptive(x) => format!("h=adaptive:{x}"),
            KernelScale::Fixed(x) => format!("h={x}"),
        });
        lines.push(match &self.class_weights {
            ClassWeights::Uniform => "class_weights=uniform".into(),
            ClassWeights::InverseFrequency => "class_weights=inverse-frequency".into(),
            ClassWeights::Fixed(w) => {
                format!("class_weights={}", w.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
            }
        });
        match &self.data {
            DataSource::Toy(t) => {
                lines.push(format!("shapes={}", t.kinds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")));
                lines.push(format!("n_train={}", t.n_train));
                lines.push(format!("n_test={}", t.n_test));
                lines.push(format!("n_points={}", t.n_points));
                lines.push(format!("jitter={}", t.jitter_sigma));
                lines.push(format!("data_seed={}", t.seed));
            }
            DataSource::Manifest(p) => lines.push(format!("manifest={}", p.display())),
        }
        lines.push(format!("seed={}", self.seed));
        lines.join("\n") + "\n"
    }

    /// Train and test samples.
    pub fn load_data(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match (&self.data, self.model.task) {
            (DataSource::Toy(t), Task::Classification) => classification_set(t),
            (DataSource::Toy(t), Task::Segmentation) => segmentation_set(t),
            (DataSource::Manifest(p), _) => load_manifest(p),
        }
    }

    /// Builds the model with freshly initialized parameters.
    pub fn build_model(&self) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x1417));
        let model = Model::build(&mut store, &self.model, &mut rng)?;
        Ok((model, store))
    }

    /// Loss configuration with class weights resolved against the training set.
    pub fn resolved_loss(&self, train: &[Sample]) -> Result<LossConfig> {
        let mut loss = self.loss.clone();
        loss.class_weights = match &self.class_weights {
            ClassWeights::Uniform => None,
            ClassWeights::Fixed(w) => Some(w.clone()),
            ClassWeights::InverseFrequency => {
                let labels: Vec<usize> = match self.model.task {
                    Task::Classification => train.iter().map(|s| s.label).collect(),
                    Task::Segmentation => {
                        train.iter().flat_map(|s| s.cloud.labels.iter().flatten().copied()).collect()
                    }
                };
                Some(inverse_frequency_weights(labels, self.model.n_classes))
            }
        };
        Ok(loss)
    }
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn restore(ck: &Checkpoint) -> Result<(ExperimentConfig, Model, ParamStore)> {
    let cfg = ExperimentConfig::parse(&ck.config_text, &[])?;
    let (model, fresh) = cfg.build_model()?;
    if fresh.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "config builds {} entries, checkpoint holds {}",
            fresh.len(),
            ck.params.len()
        )));
    }
    for (name, e) in fresh.iter() {
        let stored = ck.params.get(name).map_err(|_| Error::Checkpoint(format!("missing entry `{name}`")))?;
        if stored.value.shape() != e.value.shape() || stored.kind != e.kind {
            return Err(Error::Checkpoint(format!("entry `{name}` does not match the config")));
        }
    }
    Ok((cfg, model, ck.params.clone()))
}

/// Header of the per-epoch metrics CSV.
pub fn metrics_header(task: Task) -> &'static str {
    match task {
        Task::Classification => "epoch,train_loss,test_accuracy",
        Task::Segmentation => "epoch,train_loss,test_miou",
    }
}

/// One CSV row per epoch; a missing test metric is written as `NaN`.
pub fn metrics_csv(task: Task, logs: &[EpochLog]) -> String {
    let mut out = format!("{}\n", metrics_header(task));
    for l in logs {
        let m = l.test_metric(task).unwrap_or(f64::NAN);
        out.push_str(&format!("{},{},{}\n", l.epoch, l.train_loss, m));
    }
    out
}

/// A trained (or freshly built) model with its optimizer state.
pub struct Trained {
    pub model: Model,
    pub state: TrainState,
    pub logs: Vec<EpochLog>,
    pub test: Vec<Sample>,
}

/// Builds, trains and evaluates per epoch as configured.
pub fn run(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Trained> {
    run_until(cfg, |l| {
        on_epoch(l);
        false
    })
}

/// Like [`run`], but stops after the first epoch for which `stop` returns true.
pub fn run_until(cfg: &ExperimentConfig, stop: impl FnMut(&EpochLog) -> bool) -> Result<Trained> {
    let (train, test) = cfg.load_data()?;
    if train.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let (model, store) = cfg.build_model()?;
    let loss = cfg.resolved_loss(&train)?;
    let steps_per_epoch = train.len() / cfg.train.batch_size
        + usize::from(train.len() % cfg.train.batch_size >= 2);
    let mut optimizer = cfg.optimizer;
    if cfg.cosine {
        optimizer.schedule = LrSchedule::Cosine { total_steps: (steps_per_epoch * cfg.train.epochs) as u64 };
    }
    let mut state = TrainState::new(store, optimizer, cfg.seed);
    let logs = fit(&model, &mut state, &train, &test, &cfg.train, &loss, stop)?;
    Ok(Trained { model, state, logs, test })
}
