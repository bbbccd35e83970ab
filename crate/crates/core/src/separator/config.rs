use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sequence model used inside each half of a dual-path block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Bidirectional gated recurrent unit.
    Recurrent,
    /// Single-head scaled dot-product attention with sinusoidal positions.
    Attention,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Recurrent => "recurrent",
            BlockKind::Attention => "attention",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(BlockKind::Recurrent),
            "attention" => Ok(BlockKind::Attention),
            _ => Err(Error::Config(format!("unknown block kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorConfig {
    /// Encoder filters N.
    pub n_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Human speakers C.
    pub num_speakers: usize,
    /// Predict the background noise as an extra source.
    pub noise_speaker: bool,
    /// Chunk size K (even).
    pub chunk_size: usize,
    pub blocks: usize,
    pub block_kind: BlockKind,
    /// Width of the intra/inter sequence models.
    pub hidden: usize,
    /// Width Q of the patch projection head.
    pub embed_dim: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            n_filters: 64,
            kernel: 16,
            stride: 8,
            num_speakers: 2,
            noise_speaker: true,
            chunk_size: 50,
            blocks: 2,
            block_kind: BlockKind::Recurrent,
            hidden: 64,
            embed_dim: 256,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl SeparatorConfig {
    /// Configuration small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_filters: 8,
            kernel: 16,
            stride: 8,
            num_speakers: 2,
            noise_speaker: true,
            chunk_size: 4,
            blocks: 1,
            block_kind: BlockKind::Recurrent,
            hidden: 4,
            embed_dim: 8,
        }
    }

    /// Output sources G.
    pub fn num_sources(&self) -> usize {
        self.num_speakers + usize::from(self.noise_speaker)
    }

    pub fn frames(&self, samples: usize) -> usize {
        (samples - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_filters", self.n_filters),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("chunk_size", self.chunk_size),
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((k, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.stride > self.kernel {
            return Err(Error::Config(format!("stride {} exceeds kernel {}", self.stride, self.kernel)));
        }
        if self.chunk_size < 2 || self.chunk_size % 2 != 0 {
            return Err(Error::Config(format!("chunk_size must be even and at least 2, got {}", self.chunk_size)));
        }
        if !(2..=3).contains(&self.num_speakers) {
            return Err(Error::Config(format!("num_speakers must be 2 or 3, got {}", self.num_speakers)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("n_filters", self.n_filters.to_string()),
            ("kernel", self.kernel.to_string()),
            ("stride", self.stride.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("noise_speaker", self.noise_speaker.to_string()),
            ("chunk_size", self.chunk_size.to_string()),
            ("blocks", self.blocks.to_string()),
            ("block_kind", self.block_kind.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` setting; returns false if the key is not a separator key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_filters" => self.n_filters = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "num_speakers" => self.num_speakers = parse(key, value)?,
            "noise_speaker" => self.noise_speaker = parse_bool(key, value)?,
            "chunk_size" => self.chunk_size = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "block_kind" => self.block_kind = value.trim().parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from `key=value` pairs, ignoring keys it does not own.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_validation() {
        let mut cfg = SeparatorConfig::tiny();
        cfg.block_kind = BlockKind::Attention;
        let kv = cfg.to_kv();
        let back = SeparatorConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);

        let mut bad = SeparatorConfig::tiny();
        bad.chunk_size = 5;
        assert!(bad.validate().is_err());
        bad = SeparatorConfig::tiny();
        bad.stride = 32;
        assert!(bad.validate().is_err());
        bad = SeparatorConfig::tiny();
        bad.num_speakers = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn source_count() {
        let mut cfg = SeparatorConfig::default();
        assert_eq!(cfg.num_sources(), 3);
        cfg.noise_speaker = false;
        assert_eq!(cfg.num_sources(), 2);
        assert_eq!(cfg.frames(32000), 3999);
    }
}
