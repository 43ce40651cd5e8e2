use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccr::CcrConfig;
use crate::contrastive::ContrastiveConfig;
use crate::encoder::Architecture;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::synth::StreamConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackletConfig {
    pub min_len: usize,
    /// Optional floor on matched cosine similarity.
    pub min_similarity: Option<f64>,
}

impl Default for TrackletConfig {
    fn default() -> Self {
        Self {
            min_len: 5,
            min_similarity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub identities: usize,
    pub cameras: usize,
    /// Leading share of the training stream (by time) used for training.
    pub data_fraction: f64,
    pub precision: Precision,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub deterministic: bool,
    pub stream: StreamConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub tracklet: TrackletConfig,
    pub ccr: CcrConfig,
    pub eval: EvalProtocol,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            identities: 200,
            cameras: 6,
            data_fraction: 1.0,
            precision: Precision::F32,
            workers: 0,
            deterministic: false,
            stream: StreamConfig::default(),
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            tracklet: TrackletConfig::default(),
            ccr: CcrConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.stream.d_obs, &self.encoder.hidden, self.encoder.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if self.tracklet.min_len == 0 {
            return Err(Error::Config("tracklet.min_len must be at least 1".into()));
        }
        if let Some(k) = self.ccr.k {
            if k == 0 || k > self.cameras {
                return Err(Error::Config(format!("ccr.k = {k} outside 1..={}", self.cameras)));
            }
        }
        if !(self.eval.query_fraction > 0.0 && self.eval.query_fraction < 1.0) {
            return Err(Error::Config("eval.query_fraction must lie in (0, 1)".into()));
        }
        if self.identities < 2 || self.cameras < 2 {
            return Err(Error::Config("need at least two identities and two cameras".into()));
        }
        self.stream.validate()?;
        self.architecture().validate()?;
        self.contrastive.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical serialisation, ignoring fields that do not
    /// affect results.
    pub fn fingerprint(&self) -> String {
        let mut canon = self.clone();
        canon.workers = 0;
        canon.deterministic = false;
        hex::encode(Sha256::digest(canon.to_toml().as_bytes()))
    }
}
