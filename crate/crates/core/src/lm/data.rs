use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Blocks in the calibration / fine-tuning split.
    pub n_calib: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.1,
            n_calib: 128,
        }
    }
}

/// Contiguous fixed-length token blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    tokens: Vec<u16>,
    seq_len: usize,
}

impl Split {
    pub fn new(tokens: Vec<u16>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::contract(
                "Split::new",
                "token count must be a multiple of seq_len",
            ));
        }
        Ok(Self { tokens, seq_len })
    }

    pub fn blocks(&self) -> Vec<&[u16]> {
        self.tokens.chunks(self.seq_len).collect()
    }

    /// The first `n` blocks (all of them when fewer exist).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            tokens: self.tokens[..n * self.seq_len].to_vec(),
            seq_len: self.seq_len,
        }
    }

    pub fn block(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }
}

/// Train/validation/test blocks of a byte-tokenized corpus.
///
/// `pretrain` is the whole training region; `train` is its first `n_calib`
/// blocks, the small set shared by GPTQ calibration and fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenDataset {
    pub pretrain: Split,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl TokenDataset {
    /// Splits byte tokens into contiguous train, validation and test regions.
    pub fn from_bytes(bytes: &[u8], seq_len: usize, cfg: &DataConfig, source: &Path) -> Result<Self> {
        let fail = |detail: String| Error::Ingestion {
            path: source.to_path_buf(),
            detail,
        };
        let n_blocks = bytes.len() / seq_len.max(1);
        if n_blocks == 0 {
            return Err(fail(format!(
                "{} bytes is shorter than one block of {seq_len}",
                bytes.len()
            )));
        }
        if !(0.0..1.0).contains(&cfg.val_fraction)
            || !(0.0..1.0).contains(&cfg.test_fraction)
            || cfg.val_fraction + cfg.test_fraction >= 1.0
        {
            return Err(Error::Config(
                "split fractions must be in [0, 1) and sum below 1".into(),
            ));
        }
        let n_val = (n_blocks as f64 * cfg.val_fraction).floor() as usize;
        let n_test = (n_blocks as f64 * cfg.test_fraction).floor() as usize;
        let n_train = n_blocks - n_val - n_test;
        if n_val == 0 || n_test == 0 {
            return Err(fail(format!(
                "{n_blocks} blocks leave an empty validation or test split"
            )));
        }
        if n_train < cfg.n_calib {
            return Err(fail(format!(
                "training region has {n_train} blocks, fewer than n_calib = {}",
                cfg.n_calib
            )));
        }
        let tokens: Vec<u16> = bytes[..n_blocks * seq_len].iter().map(|&b| b as u16).collect();
        let cut = |from: usize, to: usize| Split::new(tokens[from * seq_len..to * seq_len].to_vec(), seq_len);
        let pretrain = cut(0, n_train)?;
        Ok(Self {
            train: pretrain.head(cfg.n_calib),
            pretrain,
            val: cut(n_train, n_train + n_val)?,
            test: cut(n_train + n_val, n_blocks)?,
        })
    }
}

pub fn ingest_corpus(path: &Path, seq_len: usize, cfg: &DataConfig) -> Result<TokenDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            detail: "empty file".into(),
        });
    }
    TokenDataset::from_bytes(&bytes, seq_len, cfg, path)
}
