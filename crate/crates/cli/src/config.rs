//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use refilter::evaluation::{LabConfig, LatencySettings};
use refilter::fusion::FusionConfig;
use refilter::training::TrainConfig;
use refilter::Error;
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub noise_fraction: f64,
    pub shuffle: bool,
    /// Fractions swept by the `noise` experiment.
    pub noise_fractions: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { noise_fraction: 0.0, shuffle: false, noise_fractions: vec![0.0, 0.33, 0.66] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSettings {
    pub lambdas: Vec<f64>,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings { lambdas: vec![0.0, 0.001, 0.01, 0.1] }
    }
}

/// Everything a command needs. `seed` drives the corpus, the model
/// initialisation and the evaluation draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory of pretrained backbones; empty means `<out>/backbone-cache`.
    pub backbone_cache: String,
    pub lab: LabConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub bench: LatencySettings,
    pub tune: TuneSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        let mut lab = LabConfig::default();
        lab.synth.chunk_len = fusion.s;
        RunConfig {
            seed: 0,
            backbone_cache: String::new(),
            lab,
            fusion,
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            bench: LatencySettings { batch_sizes: vec![1, 4, 8, 16], trials: 20, warmup: 2, gen_tokens: 16 },
            tune: TuneSettings::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub chunk_len: Option<usize>,
    pub fusion_layers: Option<Vec<usize>>,
    pub lambda: Option<f64>,
    pub noise_fraction: Option<f64>,
    pub shuffle: bool,
    pub batch_sizes: Option<Vec<usize>>,
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Overlays `top` on `base`, refusing keys `base` does not have and values
/// of another type. Integers are accepted where floats are expected.
fn overlay(base: &mut Value, top: Value, path: &str) -> Result<(), Error> {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (key, v) in t {
                let field = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                let slot = b.get_mut(&key).ok_or_else(|| Error::Config(format!("unknown field `{field}`")))?;
                overlay(slot, v, &field)?;
            }
            Ok(())
        }
        (b @ Value::Float(_), Value::Integer(i)) => {
            *b = Value::Float(i as f64);
            Ok(())
        }
        (b @ Value::Array(_), Value::Array(items)) => {
            *b = Value::Array(items);
            Ok(())
        }
        (b, t) if std::mem::discriminant(b) == std::mem::discriminant(&t) => {
            *b = t;
            Ok(())
        }
        (b, t) => Err(Error::Config(format!("field `{path}` expects {}, found {}", kind(b), kind(&t)))),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given.
    pub fn load(file: Option<&Path>) -> Result<Self, Error> {
        let mut value = Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let top: Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            overlay(&mut value, top, "")?;
        }
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.k {
            self.fusion.k = k;
        }
        if let Some(s) = o.chunk_len {
            self.fusion.s = s;
            self.lab.synth.chunk_len = s;
        }
        if let Some(l) = &o.fusion_layers {
            self.fusion.layers = l.clone();
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(f) = o.noise_fraction {
            self.eval.noise_fraction = f;
        }
        if o.shuffle {
            self.eval.shuffle = true;
        }
        if let Some(b) = &o.batch_sizes {
            self.bench.batch_sizes = b.clone();
        }
        self.lab.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.fusion.s != self.lab.synth.chunk_len {
            return Err(Error::Config(format!(
                "field `fusion.s` ({}) must equal `lab.synth.chunk_len` ({})",
                self.fusion.s, self.lab.synth.chunk_len
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.noise_fraction) {
            return Err(Error::Config(format!("field `eval.noise_fraction` = {} is outside [0, 1]", self.eval.noise_fraction)));
        }
        if self.fusion.k == 0 {
            return Err(Error::Config("field `fusion.k` must be at least 1".into()));
        }
        if self.bench.batch_sizes.contains(&0) {
            return Err(Error::Config("field `bench.batch_sizes` has a zero batch size".into()));
        }
        self.train.validate()
    }

    pub fn backbone_cache(&self, out: &Path) -> PathBuf {
        if self.backbone_cache.is_empty() {
            out.join("backbone-cache")
        } else {
            PathBuf::from(&self.backbone_cache)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serialises")
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, out: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
