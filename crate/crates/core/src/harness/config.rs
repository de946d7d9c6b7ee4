use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gptq::DampSearchSpace;
use crate::landscape::LandscapeConfig;
use crate::lm::{DataConfig, ModelConfig, PretrainConfig, Propagation};
use crate::qaft::TrainConfig;
use crate::quant::QuantFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    Gptq,
    Qaft,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rtn, Method::Gptq, Method::Qaft];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Qaft => "qaft",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Method::Rtn),
            "gptq" => Ok(Method::Gptq),
            "qaft" => Ok(Method::Qaft),
            _ => Err(Error::Config(format!(
                "unknown method {s:?}; expected rtn, gptq or qaft"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GptqConfig {
    pub damp_grid: DampSearchSpace,
    pub propagation: Propagation,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            damp_grid: DampSearchSpace::default(),
            propagation: Propagation::SequentialQuantized,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test blocks used for reported NLL; `None` evaluates the whole split.
    pub test_blocks: Option<usize>,
    /// Calibration blocks whose full-precision taps define the reported layer MSE.
    pub mse_blocks: Option<usize>,
}

fn default_formats() -> Vec<QuantFormat> {
    QuantFormat::all()
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything that determines a run. The run `seed` also seeds model
/// initialization and pretraining batch sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_formats")]
    pub formats: Vec<QuantFormat>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub gptq: GptqConfig,
    #[serde(default)]
    pub qaft: TrainConfig,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            seed: 0,
            out_dir: out_dir.into(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            formats: default_formats(),
            methods: default_methods(),
            gptq: GptqConfig::default(),
            qaft: TrainConfig::default(),
            landscape: LandscapeConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validated()
    }

    /// Reads a TOML config; a relative corpus path is resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus = dir.join(&cfg.corpus);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the run seed and checks every section.
    pub fn validated(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.model.validate()?;
        self.gptq.damp_grid.validate()?;
        self.qaft.validate()?;
        if self.formats.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("formats and methods must be non-empty".into()));
        }
        let mut f = self.formats.clone();
        f.sort();
        f.dedup();
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if f.len() != self.formats.len() || m.len() != self.methods.len() {
            return Err(Error::Config("formats and methods must not repeat".into()));
        }
        if self.landscape.n_directions == 0 || self.landscape.n_radii < 2 || self.landscape.segment_samples < 2 {
            return Err(Error::Config(
                "landscape needs directions, at least two radii and two segment samples".into(),
            ));
        }
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.validated()
    }

    /// SHA-256 over the canonical JSON of every field that affects results.
    /// The output directory and the corpus location are excluded; the corpus
    /// content hash is folded in instead.
    pub fn hash(&self, corpus_sha256: &str) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.corpus = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(corpus_sha256.as_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
