//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once; unknown keys are errors. List values are comma-separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mergelab::bounds::BoundConfig;
use mergelab::{Activation, DatasetSpec, MergeMethod, TrainConfig};

use crate::HarnessError;

pub const POOL_PRESETS: [usize; 5] = [2, 3, 5, 7, 10];
pub const DEFAULT_FACTORS: [f64; 6] = [1.0, 10.0, 50.0, 90.0, 100.0, 110.0];

/// Parameters for the `bounds` command.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSettings {
    pub taus: Vec<f64>,
    pub c_s: f64,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub sigma_w: f64,
    pub sigma_b: f64,
    /// Random networks per `tau` in the Lipschitz-chain probability check.
    pub trials: usize,
    /// Weight draws per configuration in the output-variance check.
    pub theorem_trials: usize,
    pub theorem_depths: Vec<usize>,
    pub theorem_widths: Vec<usize>,
    pub fuzz_pairs: usize,
    pub variance_entries: usize,
    pub chain_nets: usize,
}

impl Default for BoundsSettings {
    fn default() -> Self {
        Self {
            taus: vec![1.0, 2.0, 3.0],
            c_s: 1.0,
            depth: 3,
            width: 32,
            activation: Activation::Relu,
            sigma_w: 0.1,
            sigma_b: 0.1,
            trials: 1000,
            theorem_trials: 10_000,
            theorem_depths: vec![1, 2, 3],
            theorem_widths: vec![4, 16],
            fuzz_pairs: 1000,
            variance_entries: 100_000,
            chain_nets: 1000,
        }
    }
}

impl BoundsSettings {
    pub fn bound_config(&self, seed: u64) -> BoundConfig {
        BoundConfig {
            tau: self.taus.first().copied().unwrap_or(2.0),
            c_s: self.c_s,
            depth: self.depth,
            width: self.width,
            activation: self.activation,
            sigma_w: self.sigma_w,
            sigma_b: self.sigma_b,
            trials: self.trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// `None` means "follow `master_seed`".
    pub data_seed: Option<u64>,
    /// Hidden widths; empty gives a linear classifier.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub pool_size: usize,
    /// All pool members start from the stream-0 init and differ only in batch order.
    pub shared_init: bool,
    /// `None` means every pool preset up to `pool_size`.
    pub n_models_grid: Option<Vec<usize>>,
    pub factor_grid: Vec<f64>,
    /// `None` means every method the architecture supports.
    pub methods: Option<Vec<MergeMethod>>,
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub scatter_batch: usize,
    pub task2_seed: u64,
    pub template_self_merge: bool,
    pub inject_violation: bool,
    pub bounds: BoundsSettings,
}

/// Dataset preset used by the harness: noisy enough that pool members disagree.
pub fn harness_dataset() -> DatasetSpec {
    DatasetSpec {
        noise_std: 1.0,
        brightness_jitter: 0.5,
        ..DatasetSpec::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: harness_dataset(),
            data_seed: None,
            hidden: vec![64],
            activation: Activation::Relu,
            train: TrainConfig::default(),
            pool_size: 10,
            shared_init: false,
            n_models_grid: None,
            factor_grid: DEFAULT_FACTORS.to_vec(),
            methods: None,
            out_dir: PathBuf::from("out"),
            master_seed: 0,
            scatter_batch: 100,
            task2_seed: 1_000_003,
            template_self_merge: false,
            inject_violation: false,
            bounds: BoundsSettings::default(),
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, got {trimmed:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(err(line, format!("duplicate key {key:?}")));
            }
            cfg.set(line, key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), HarnessError> {
        let d = &mut self.dataset;
        let t = &mut self.train;
        let b = &mut self.bounds;
        match key {
            "n_classes" => d.n_classes = parse_num(line, key, v)?,
            "height" => d.height = parse_num(line, key, v)?,
            "width" => d.width = parse_num(line, key, v)?,
            "channels" => d.channels = parse_num(line, key, v)?,
            "train_per_class" => d.train_per_class = parse_num(line, key, v)?,
            "val_per_class" => d.val_per_class = parse_num(line, key, v)?,
            "test_per_class" => d.test_per_class = parse_num(line, key, v)?,
            "noise_std" => d.noise_std = parse_num(line, key, v)?,
            "brightness_jitter" => d.brightness_jitter = parse_num(line, key, v)?,
            "data_seed" => self.data_seed = Some(parse_num(line, key, v)?),
            "hidden" => self.hidden = parse_list(line, key, v)?,
            "activation" => self.activation = parse_num(line, key, v)?,
            "lr" => t.lr = parse_num(line, key, v)?,
            "momentum" => t.momentum = parse_num(line, key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse_num(line, key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse_num(line, key, v)?,
            "epochs" => t.epochs = parse_num(line, key, v)?,
            "batch_size" => t.batch_size = parse_num(line, key, v)?,
            "pool_size" => self.pool_size = parse_num(line, key, v)?,
            "shared_init" => self.shared_init = parse_bool(line, key, v)?,
            "n_models_grid" => self.n_models_grid = Some(parse_list(line, key, v)?),
            "factor_grid" => self.factor_grid = parse_list(line, key, v)?,
            "methods" => {
                self.methods = Some(if v == "all" {
                    MergeMethod::ALL.to_vec()
                } else {
                    v.split(',')
                        .map(str::trim)
                        .map(|s| s.parse().map_err(|_| err(line, format!("unknown method {s:?}"))))
                        .collect::<Result<_, _>>()?
                })
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "master_seed" => self.master_seed = parse_num(line, key, v)?,
            "scatter_batch" => self.scatter_batch = parse_num(line, key, v)?,
            "task2_seed" => self.task2_seed = parse_num(line, key, v)?,
            "template_self_merge" => self.template_self_merge = parse_bool(line, key, v)?,
            "inject_violation" => self.inject_violation = parse_bool(line, key, v)?,
            "bounds_tau" => b.taus = parse_list(line, key, v)?,
            "bounds_c_s" => b.c_s = parse_num(line, key, v)?,
            "bounds_depth" => b.depth = parse_num(line, key, v)?,
            "bounds_width" => b.width = parse_num(line, key, v)?,
            "bounds_activation" => b.activation = parse_num(line, key, v)?,
            "bounds_sigma_w" => b.sigma_w = parse_num(line, key, v)?,
            "bounds_sigma_b" => b.sigma_b = parse_num(line, key, v)?,
            "bounds_trials" => b.trials = parse_num(line, key, v)?,
            "bounds_theorem_trials" => b.theorem_trials = parse_num(line, key, v)?,
            "bounds_theorem_depths" => b.theorem_depths = parse_list(line, key, v)?,
            "bounds_theorem_widths" => b.theorem_widths = parse_list(line, key, v)?,
            "bounds_fuzz_pairs" => b.fuzz_pairs = parse_num(line, key, v)?,
            "bounds_variance_entries" => b.variance_entries = parse_num(line, key, v)?,
            "bounds_chain_nets" => b.chain_nets = parse_num(line, key, v)?,
            _ => return Err(err(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Semantic checks that need the whole file. Reported at line 0.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let whole = |msg: String| err(0, msg);
        self.dataset_spec().validate().map_err(|e| whole(e.to_string()))?;
        self.train_config().validate().map_err(|e| whole(e.to_string()))?;
        if !POOL_PRESETS.contains(&self.pool_size) {
            return Err(whole(format!("pool_size must be one of {POOL_PRESETS:?}, got {}", self.pool_size)));
        }
        if self.hidden.contains(&0) {
            return Err(whole("hidden widths must be positive".into()));
        }
        for &n in &self.n_models() {
            if n == 0 || n > self.pool_size {
                return Err(whole(format!("n_models_grid entry {n} outside 1..={}", self.pool_size)));
            }
        }
        if self.factor_grid.is_empty() || self.factor_grid.iter().any(|c| !c.is_finite()) {
            return Err(whole("factor_grid needs finite values".into()));
        }
        if self.hidden.is_empty() {
            if let Some(m) = self.methods.iter().flatten().find(|m| m.needs_features()) {
                return Err(whole(format!("method {m} needs a hidden layer")));
            }
        }
        if self.methods.as_ref().is_some_and(Vec::is_empty) {
            return Err(whole("methods is empty".into()));
        }
        if self.scatter_batch == 0 {
            return Err(whole("scatter_batch must be >= 1".into()));
        }
        let b = &self.bounds;
        if b.taus.is_empty() || b.taus.iter().any(|t| t.is_nan() || *t <= 0.0) {
            return Err(whole("bounds_tau needs positive values".into()));
        }
        if b.theorem_depths.is_empty() || b.theorem_widths.is_empty() {
            return Err(whole("bounds_theorem_depths and bounds_theorem_widths must be nonempty".into()));
        }
        if b.fuzz_pairs == 0 || b.chain_nets == 0 || b.variance_entries < 2 || b.theorem_trials < 2 {
            return Err(whole("bounds trial counts are too small".into()));
        }
        b.bound_config(0).validate().map_err(|e| whole(e.to_string()))?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.data_seed.unwrap_or(self.master_seed),
            ..self.dataset.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.master_seed,
            ..self.train.clone()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dataset.dim()];
        w.extend(&self.hidden);
        w.push(self.dataset.n_classes);
        w
    }

    pub fn n_models(&self) -> Vec<usize> {
        match &self.n_models_grid {
            Some(grid) => grid.clone(),
            None => POOL_PRESETS.iter().copied().filter(|&n| n <= self.pool_size).collect(),
        }
    }

    pub fn methods(&self) -> Vec<MergeMethod> {
        match &self.methods {
            Some(m) => m.clone(),
            None => MergeMethod::ALL
                .into_iter()
                .filter(|m| !self.hidden.is_empty() || !m.needs_features())
                .collect(),
        }
    }

    /// Every key with its effective value; parses back to an equivalent config.
    pub fn to_resolved_text(&self) -> String {
        let d = self.dataset_spec();
        let t = &self.train;
        let b = &self.bounds;
        let methods: Vec<&str> = self.methods().iter().map(|m| m.tag()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("n_classes", d.n_classes.to_string());
        kv("height", d.height.to_string());
        kv("width", d.width.to_string());
        kv("channels", d.channels.to_string());
        kv("train_per_class", d.train_per_class.to_string());
        kv("val_per_class", d.val_per_class.to_string());
        kv("test_per_class", d.test_per_class.to_string());
        kv("noise_std", d.noise_std.to_string());
        kv("brightness_jitter", d.brightness_jitter.to_string());
        kv("data_seed", d.seed.to_string());
        kv("hidden", join(&self.hidden));
        kv("activation", self.activation.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("pool_size", self.pool_size.to_string());
        kv("shared_init", self.shared_init.to_string());
        kv("n_models_grid", join(&self.n_models()));
        kv("factor_grid", join(&self.factor_grid));
        kv("methods", methods.join(","));
        kv("out_dir", self.out_dir.display().to_string());
        kv("master_seed", self.master_seed.to_string());
        kv("scatter_batch", self.scatter_batch.to_string());
        kv("task2_seed", self.task2_seed.to_string());
        kv("template_self_merge", self.template_self_merge.to_string());
        kv("inject_violation", self.inject_violation.to_string());
        kv("bounds_tau", join(&b.taus));
        kv("bounds_c_s", b.c_s.to_string());
        kv("bounds_depth", b.depth.to_string());
        kv("bounds_width", b.width.to_string());
        kv("bounds_activation", b.activation.to_string());
        kv("bounds_sigma_w", b.sigma_w.to_string());
        kv("bounds_sigma_b", b.sigma_b.to_string());
        kv("bounds_trials", b.trials.to_string());
        kv("bounds_theorem_trials", b.theorem_trials.to_string());
        kv("bounds_theorem_depths", join(&b.theorem_depths));
        kv("bounds_theorem_widths", join(&b.theorem_widths));
        kv("bounds_fuzz_pairs", b.fuzz_pairs.to_string());
        kv("bounds_variance_entries", b.variance_entries.to_string());
        kv("bounds_chain_nets", b.chain_nets.to_string());
        s
    }
}
