//! Experiment configuration: plain-text `key = value` with `[section]`
//! headers.
//!
//! One seed in `[experiment]` drives everything; world generation, adapter
//! initialization, and batch shuffling each derive their own stream from it
//! by label. Parsing resolves defaults immediately, so a parsed config
//! serializes to one canonical form regardless of which keys were spelled
//! out, and that form round-trips to itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use salora_core::error::{Error, Result};
use salora_core::train::{LossKind, Method, TrainConfig};
use salora_core::world::WorldConfig;

/// File locations used by the pipeline commands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub world_dir: PathBuf,
    pub run_dir: PathBuf,
    /// Input batch for `infer`.
    pub inputs: PathBuf,
    /// Output file written by `infer`.
    pub outputs: PathBuf,
}

/// Full experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub method: Method,
    pub r: usize,
    pub r_s: usize,
    pub r_t: usize,
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            method: Method::Salora,
            r: 4,
            r_s: 4,
            r_t: 4,
            seed: 42,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            paths: Paths {
                world_dir: PathBuf::from("runs/world"),
                run_dir: PathBuf::from("runs/salora"),
                inputs: PathBuf::new(),
                outputs: PathBuf::new(),
            },
        };
        cfg.resolve();
        cfg
    }
}

impl ExperimentConfig {
    /// Propagates the experiment seed and fills path defaults.
    fn resolve(&mut self) {
        self.world.seed = self.seed;
        self.train.seed = self.seed;
        if self.paths.inputs.as_os_str().is_empty() {
            self.paths.inputs = self.paths.world_dir.join("protected_inputs.mtx");
        }
        if self.paths.outputs.as_os_str().is_empty() {
            self.paths.outputs = self.paths.run_dir.join("outputs.mtx");
        }
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(format!(
                    "config line {}: expected `key = value` or `[section]`",
                    lineno + 1
                )));
            };
            if current.is_empty() {
                return Err(Error::format(format!(
                    "config line {}: key before any [section]",
                    lineno + 1
                )));
            }
            sections
                .get_mut(&current)
                .unwrap()
                .insert(k.trim().to_string(), v.trim().to_string());
        }

        let mut cfg = ExperimentConfig::default();

        let mut experiment = sections.remove("experiment").unwrap_or_default();
        if let Some(v) = experiment.remove("method") {
            cfg.method = Method::parse(&v)?;
        }
        if let Some(v) = experiment.remove("r") {
            cfg.r = parse_num(&v, "experiment.r")?;
        }
        // The paper ties the safety and task ranks to the adapter rank by
        // default; explicit keys override.
        cfg.r_s = cfg.r;
        cfg.r_t = cfg.r;
        if let Some(v) = experiment.remove("r_s") {
            cfg.r_s = parse_num(&v, "experiment.r_s")?;
        }
        if let Some(v) = experiment.remove("r_t") {
            cfg.r_t = parse_num(&v, "experiment.r_t")?;
        }
        if let Some(v) = experiment.remove("seed") {
            cfg.seed = parse_num(&v, "experiment.seed")?;
        }
        reject_unknown("experiment", &experiment)?;

        let mut world = sections.remove("world").unwrap_or_default();
        if let Some(v) = world.remove("width") {
            cfg.world.width = parse_num(&v, "world.width")?;
        }
        if let Some(v) = world.remove("layers") {
            cfg.world.layers = parse_num(&v, "world.layers")?;
        }
        if let Some(v) = world.remove("planted_rank") {
            cfg.world.planted_rank = parse_num(&v, "world.planted_rank")?;
        }
        if let Some(v) = world.remove("n_benign") {
            cfg.world.n_benign = parse_num(&v, "world.n_benign")?;
        }
        if let Some(v) = world.remove("n_protected") {
            cfg.world.n_protected = parse_num(&v, "world.n_protected")?;
        }
        reject_unknown("world", &world)?;

        let mut train = sections.remove("train").unwrap_or_default();
        if let Some(v) = train.remove("learning_rate") {
            cfg.train.learning_rate = parse_num(&v, "train.learning_rate")?;
        }
        if let Some(v) = train.remove("batch_size") {
            cfg.train.batch_size = parse_num(&v, "train.batch_size")?;
        }
        if let Some(v) = train.remove("epochs") {
            cfg.train.epochs = parse_num(&v, "train.epochs")?;
        }
        if let Some(v) = train.remove("beta1") {
            cfg.train.adamw.beta1 = parse_num(&v, "train.beta1")?;
        }
        if let Some(v) = train.remove("beta2") {
            cfg.train.adamw.beta2 = parse_num(&v, "train.beta2")?;
        }
        if let Some(v) = train.remove("eps") {
            cfg.train.adamw.eps = parse_num(&v, "train.eps")?;
        }
        if let Some(v) = train.remove("weight_decay") {
            cfg.train.adamw.weight_decay = parse_num(&v, "train.weight_decay")?;
        }
        if let Some(v) = train.remove("loss") {
            cfg.train.loss = LossKind::parse(&v)?;
        }
        reject_unknown("train", &train)?;

        let mut paths = sections.remove("paths").unwrap_or_default();
        if let Some(v) = paths.remove("world_dir") {
            cfg.paths.world_dir = PathBuf::from(v);
        }
        if let Some(v) = paths.remove("run_dir") {
            cfg.paths.run_dir = PathBuf::from(v);
        }
        cfg.paths.inputs = paths.remove("inputs").map(PathBuf::from).unwrap_or_default();
        cfg.paths.outputs = paths.remove("outputs").map(PathBuf::from).unwrap_or_default();
        reject_unknown("paths", &paths)?;

        if let Some(section) = sections.keys().next() {
            return Err(Error::format(format!("unknown config section [{section}]")));
        }

        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::parse(&text)
    }

    /// Replaces the experiment seed and re-propagates it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
    }

    /// Overrides the world directory and re-derives the default inputs path.
    pub fn set_world_dir(&mut self, dir: PathBuf) {
        self.paths.world_dir = dir;
        self.paths.inputs = self.paths.world_dir.join("protected_inputs.mtx");
    }

    /// Overrides the run directory and re-derives the default outputs path.
    pub fn set_run_dir(&mut self, dir: PathBuf) {
        self.paths.run_dir = dir;
        self.paths.outputs = self.paths.run_dir.join("outputs.mtx");
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::config("adapter rank r must be positive"));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Canonical serialization: fixed section and key order, shortest
    /// round-trip float formatting. `parse(canonical(c))` reproduces `c`.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "method = {}", self.method.name());
        let _ = writeln!(s, "r = {}", self.r);
        let _ = writeln!(s, "r_s = {}", self.r_s);
        let _ = writeln!(s, "r_t = {}", self.r_t);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[world]");
        let _ = writeln!(s, "width = {}", self.world.width);
        let _ = writeln!(s, "layers = {}", self.world.layers);
        let _ = writeln!(s, "planted_rank = {}", self.world.planted_rank);
        let _ = writeln!(s, "n_benign = {}", self.world.n_benign);
        let _ = writeln!(s, "n_protected = {}", self.world.n_protected);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "beta1 = {}", self.train.adamw.beta1);
        let _ = writeln!(s, "beta2 = {}", self.train.adamw.beta2);
        let _ = writeln!(s, "eps = {}", self.train.adamw.eps);
        let _ = writeln!(s, "weight_decay = {}", self.train.adamw.weight_decay);
        let _ = writeln!(s, "loss = {}", self.train.loss.name());
        let _ = writeln!(s);
        let _ = writeln!(s, "[paths]");
        let _ = writeln!(s, "world_dir = {}", self.paths.world_dir.display());
        let _ = writeln!(s, "run_dir = {}", self.paths.run_dir.display());
        let _ = writeln!(s, "inputs = {}", self.paths.inputs.display());
        let _ = writeln!(s, "outputs = {}", self.paths.outputs.display());
        s
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(format!("config key {key}: cannot parse `{value}`")))
}

fn reject_unknown(section: &str, leftover: &BTreeMap<String, String>) -> Result<()> {
    if let Some(key) = leftover.keys().next() {
        return Err(Error::format(format!(
            "unknown config key `{key}` in [{section}]"
        )));
    }
    Ok(())
}
