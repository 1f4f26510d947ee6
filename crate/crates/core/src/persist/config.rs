use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Everything a command needs, read from a flat `key = value` file.
///
/// Every key has a default except `seed` and `out_dir`, which may also come
/// from command-line flags; [`RunConfig::require_seed`] and
/// [`RunConfig::require_out_dir`] enforce their presence.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Defaults to `manifest.tsv` inside `out_dir`.
    pub manifest: Option<PathBuf>,
    /// Patches written by `gen-data`.
    pub samples: usize,
    /// Seeds per variant in an ablation run.
    pub ablation_seeds: usize,
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: None,
            manifest: None,
            samples: 100,
            ablation_seeds: 3,
            train: TrainConfig::default(),
            generator: GeneratorSpec::default(),
        }
    }
}

/// Keys describing the network and its optimization, in file order. A
/// checkpoint echoes exactly these.
pub const TRAIN_KEYS: [&str; 17] = [
    "seed",
    "depth",
    "base_channels",
    "kernel_size",
    "skip_mode",
    "gates",
    "skip_branch_channels",
    "num_classes",
    "input_channels",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "augment",
    "checkpoint_interval",
];

const OTHER_KEYS: [&str; 16] = [
    "out_dir",
    "manifest",
    "samples",
    "ablation_seeds",
    "canvas",
    "patch",
    "vessels_min",
    "vessels_max",
    "lumen_radius_min",
    "lumen_radius_max",
    "intima_min",
    "intima_max",
    "media_min",
    "media_max",
    "hyaline_prob",
    "noise",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored. Unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            c.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = Some(parse(key, v)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "samples" => self.samples = parse(key, v)?,
            "ablation_seeds" => self.ablation_seeds = parse(key, v)?,
            "depth" => self.train.model.depth = parse(key, v)?,
            "base_channels" => self.train.model.base_channels = parse(key, v)?,
            "kernel_size" => self.train.model.kernel_size = parse(key, v)?,
            "skip_mode" => self.train.model.skip_mode = v.parse()?,
            "gates" => self.train.model.gates = parse_bool(key, v)?,
            "skip_branch_channels" => self.train.model.skip_branch_channels = parse(key, v)?,
            "num_classes" => self.train.model.num_classes = parse(key, v)?,
            "input_channels" => self.train.model.input_channels = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.adam.lr = parse(key, v)?,
            "beta1" => self.train.adam.beta1 = parse(key, v)?,
            "beta2" => self.train.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam.eps = parse(key, v)?,
            "augment" => self.train.augment = parse_bool(key, v)?,
            "checkpoint_interval" => self.train.checkpoint_interval = parse(key, v)?,
            "canvas" => self.generator.canvas = parse(key, v)?,
            "patch" => self.generator.patch = parse(key, v)?,
            "vessels_min" => self.generator.vessels_min = parse(key, v)?,
            "vessels_max" => self.generator.vessels_max = parse(key, v)?,
            "lumen_radius_min" => self.generator.lumen_radius.0 = parse(key, v)?,
            "lumen_radius_max" => self.generator.lumen_radius.1 = parse(key, v)?,
            "intima_min" => self.generator.intima_thickness.0 = parse(key, v)?,
            "intima_max" => self.generator.intima_thickness.1 = parse(key, v)?,
            "media_min" => self.generator.media_thickness.0 = parse(key, v)?,
            "media_max" => self.generator.media_thickness.1 = parse(key, v)?,
            "hyaline_prob" => self.generator.hyaline_prob = parse(key, v)?,
            "noise" => self.generator.noise = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        if key == "seed" {
            self.train.seed = self.seed.unwrap_or(0);
        }
        Ok(())
    }

    /// Text form of `key`, or `None` for unset optional keys.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.train.model;
        let t = &self.train;
        let g = &self.generator;
        let s = match key {
            "seed" => return self.seed.map(|s| s.to_string()),
            "out_dir" => return self.out_dir.as_ref().map(|p| p.display().to_string()),
            "manifest" => return self.manifest.as_ref().map(|p| p.display().to_string()),
            "samples" => self.samples.to_string(),
            "ablation_seeds" => self.ablation_seeds.to_string(),
            "depth" => m.depth.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "kernel_size" => m.kernel_size.to_string(),
            "skip_mode" => m.skip_mode.to_string(),
            "gates" => m.gates.to_string(),
            "skip_branch_channels" => m.skip_branch_channels.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "input_channels" => m.input_channels.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "augment" => t.augment.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "canvas" => g.canvas.to_string(),
            "patch" => g.patch.to_string(),
            "vessels_min" => g.vessels_min.to_string(),
            "vessels_max" => g.vessels_max.to_string(),
            "lumen_radius_min" => g.lumen_radius.0.to_string(),
            "lumen_radius_max" => g.lumen_radius.1.to_string(),
            "intima_min" => g.intima_thickness.0.to_string(),
            "intima_max" => g.intima_thickness.1.to_string(),
            "media_min" => g.media_thickness.0.to_string(),
            "media_max" => g.media_thickness.1.to_string(),
            "hyaline_prob" => g.hyaline_prob.to_string(),
            "noise" => g.noise.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Every set key in canonical order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        TRAIN_KEYS
            .iter()
            .chain(OTHER_KEYS.iter())
            .filter_map(|k| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.train.seed = seed;
        self
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("seed is required (config key `seed` or --seed)".into()))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("output directory is required (config key `out_dir` or --out)".into()))
    }

    pub fn manifest_path(&self) -> Result<PathBuf> {
        match &self.manifest {
            Some(p) => Ok(p.clone()),
            None => Ok(self.require_out_dir()?.join("manifest.tsv")),
        }
    }

    /// Checks the training and generator sections.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        if self.ablation_seeds == 0 {
            return Err(Error::Config("ablation_seeds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Text echo of the training section, as stored in checkpoints.
pub fn train_config_text(t: &TrainConfig) -> String {
    let c = RunConfig {
        train: t.clone(),
        ..RunConfig::default()
    }
    .with_seed(t.seed);
    TRAIN_KEYS
        .iter()
        .map(|k| format!("{k} = {}\n", c.get(k).expect("training keys are always set")))
        .collect()
}

/// Inverse of [`train_config_text`]; only training keys are accepted.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let c = RunConfig::parse(text)?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let key = line.split('=').next().unwrap_or("").trim();
        if !TRAIN_KEYS.contains(&key) {
            return Err(Error::Config(format!("{key:?} is not a training key")));
        }
    }
    let mut t = c.train;
    t.seed = c.seed.unwrap_or(0);
    Ok(t)
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
