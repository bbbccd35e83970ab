//! Synthetic dataset generation and the line-oriented manifest format.
//!
//! A manifest is UTF-8 text. The first line is a header
//! `# sample_rate=<hz>\tnum_speakers=<C>\tsplit=<train|valid|test>`; every
//! following line is one item: mixture, speaker 1..C and noise WAV paths,
//! tab separated and relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::synth::{synth_noise, synth_source, NoiseKind, SourceKind};
use super::wav::{read_wav, write_wav, BitDepth};
use super::{loudest_speaker, mix_at_snr, AudioSignal, MixtureItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_speakers: usize,
    pub items: usize,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub split: Split,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_speakers: 2,
            items: 8,
            duration_s: 1.0,
            snr_min_db: -6.0,
            snr_max_db: 3.0,
            seed: 0,
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            split: Split::Train,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_speakers) {
            return Err(Error::Config(format!("num_speakers must be 2 or 3, got {}", self.num_speakers)));
        }
        if self.items == 0 {
            return Err(Error::Config("item count must be positive".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config(format!("duration must be positive, got {}", self.duration_s)));
        }
        if !(-20.0 <= self.snr_min_db && self.snr_min_db <= self.snr_max_db && self.snr_max_db <= 20.0) {
            return Err(Error::Config(format!(
                "snr range [{}, {}] must lie within [-20, 20] dB",
                self.snr_min_db, self.snr_max_db
            )));
        }
        if self.sample_rate < 1000 {
            return Err(Error::Config(format!("sample rate {} Hz is too low", self.sample_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    pub mixture: PathBuf,
    pub speakers: Vec<PathBuf>,
    pub noise: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub sample_rate: u32,
    pub num_speakers: usize,
    pub split: Split,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

fn quantize_f32(s: &AudioSignal) -> Result<AudioSignal> {
    AudioSignal::new(s.samples().iter().map(|&v| v as f32 as f64).collect(), s.sample_rate())
}

/// Draws `count` fundamentals at least a factor 1.3 apart.
fn draw_f0s(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let mut f0s: Vec<f64> = Vec::with_capacity(count);
    while f0s.len() < count {
        let f: f64 = rng.gen_range(110.0..420.0);
        if f0s.iter().all(|g| (f / g).max(g / f) >= 1.3) {
            f0s.push(f);
        }
    }
    f0s
}

/// Builds item `index` of a dataset; depends only on (config, index).
pub fn generate_item(cfg: &DatasetConfig, index: usize) -> Result<MixtureItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let f0s = draw_f0s(&mut rng, cfg.num_speakers);
    let speakers = f0s
        .iter()
        .map(|&f0| {
            let kind = SourceKind::ALL[rng.gen_range(0..SourceKind::ALL.len())];
            synth_source(kind, cfg.duration_s, f0, rng.gen(), cfg.sample_rate).and_then(|s| quantize_f32(&s))
        })
        .collect::<Result<Vec<_>>>()?;
    if speakers.iter().any(|s| s.power() == 0.0) {
        return Err(Error::Degenerate("generated a silent speaker stem".into()));
    }
    let noise_kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
    let noise = synth_noise(noise_kind, cfg.duration_s, rng.gen(), cfg.sample_rate)?;
    let snr_db = if cfg.snr_max_db > cfg.snr_min_db {
        rng.gen_range(cfg.snr_min_db..cfg.snr_max_db)
    } else {
        cfg.snr_min_db
    };
    let mixed = mix_at_snr(&speakers, &noise, snr_db)?;
    // store exactly what a float32 WAV can hold, then rebuild the sum from the stored stems
    let noise = quantize_f32(&mixed.noise)?;
    let mut mix = noise.samples().to_vec();
    for s in &speakers {
        mix.iter_mut().zip(s.samples()).for_each(|(m, v)| *m += v);
    }
    let mixture = quantize_f32(&AudioSignal::new(mix, cfg.sample_rate)?)?;
    Ok(MixtureItem {
        mixture,
        speakers,
        noise,
        snr_db,
    })
}

/// Writes mixtures and stems as float32 WAVs under `out_dir/<split>/` and a
/// manifest at `out_dir/<split>.tsv`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let split_dir = out_dir.join(cfg.split.to_string());
    fs::create_dir_all(&split_dir)?;
    let items = (0..cfg.items)
        .into_par_iter()
        .map(|i| -> Result<ManifestItem> {
            let item = generate_item(cfg, i)?;
            let rel = |suffix: &str| PathBuf::from(cfg.split.to_string()).join(format!("item{i:04}_{suffix}.wav"));
            let entry = ManifestItem {
                mixture: rel("mix"),
                speakers: (1..=cfg.num_speakers).map(|c| rel(&format!("s{c}"))).collect(),
                noise: rel("noise"),
            };
            write_wav(&out_dir.join(&entry.mixture), &item.mixture, BitDepth::Float32)?;
            for (p, s) in entry.speakers.iter().zip(&item.speakers) {
                write_wav(&out_dir.join(p), s, BitDepth::Float32)?;
            }
            write_wav(&out_dir.join(&entry.noise), &item.noise, BitDepth::Float32)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        items,
        sample_rate: cfg.sample_rate,
        num_speakers: cfg.num_speakers,
        split: cfg.split,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(format!("{}.tsv", cfg.split)))?;
    Ok(manifest)
}

fn path_str(p: &Path) -> Result<&str> {
    p.to_str()
        .filter(|s| !s.contains('\t') && !s.contains('\n'))
        .ok_or_else(|| Error::Param(format!("path {p:?} cannot be stored in a manifest")))
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!(
            "# sample_rate={}\tnum_speakers={}\tsplit={}\n",
            self.sample_rate, self.num_speakers, self.split
        );
        for item in &self.items {
            let mut cols = vec![path_str(&item.mixture)?];
            for s in &item.speakers {
                cols.push(path_str(s)?);
            }
            cols.push(path_str(&item.noise)?);
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    /// Parses a manifest without touching the referenced audio.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::Format("manifest header line missing".into()))?;
        let (mut rate, mut c, mut split) = (None, None, None);
        for field in header.split('\t') {
            let (k, v) = field
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            match k {
                "sample_rate" => rate = v.parse::<u32>().ok(),
                "num_speakers" => c = v.parse::<usize>().ok(),
                "split" => split = Some(v.parse::<Split>()?),
                _ => {}
            }
        }
        let (sample_rate, num_speakers, split) = match (rate, c, split) {
            (Some(r), Some(c), Some(s)) => (r, c, s),
            _ => return Err(Error::Format("manifest header needs sample_rate, num_speakers and split".into())),
        };
        let mut items = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != num_speakers + 2 {
                return Err(Error::Format(format!(
                    "manifest line {} has {} columns, expected {}",
                    n + 2,
                    cols.len(),
                    num_speakers + 2
                )));
            }
            items.push(ManifestItem {
                mixture: PathBuf::from(cols[0]),
                speakers: cols[1..=num_speakers].iter().map(PathBuf::from).collect(),
                noise: PathBuf::from(cols[num_speakers + 1]),
            });
        }
        Ok(Self {
            items,
            sample_rate,
            num_speakers,
            split,
            root: root.to_path_buf(),
        })
    }

    /// Reads a manifest and checks that every referenced file parses and agrees.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, &root)?;
        for i in 0..m.len() {
            m.load_item(i)?;
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Loads one item; the SNR is measured from the stored stems.
    pub fn load_item(&self, index: usize) -> Result<MixtureItem> {
        let entry = self
            .items
            .get(index)
            .ok_or_else(|| Error::Param(format!("item {index} out of range")))?;
        let mixture = read_wav(&self.resolve(&entry.mixture))?;
        let speakers = entry
            .speakers
            .iter()
            .map(|p| read_wav(&self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        let noise = read_wav(&self.resolve(&entry.noise))?;
        for s in speakers.iter().chain([&noise]) {
            if s.len() != mixture.len() || s.sample_rate() != mixture.sample_rate() {
                return Err(Error::Format(format!("item {index}: stems disagree with mixture in length or rate")));
            }
        }
        if mixture.sample_rate() != self.sample_rate {
            return Err(Error::Format(format!(
                "item {index}: sample rate {} differs from manifest {}",
                mixture.sample_rate(),
                self.sample_rate
            )));
        }
        if speakers.iter().any(|s| s.power() == 0.0) {
            return Err(Error::Degenerate(format!("item {index}: silent speaker stem")));
        }
        let p_loud = speakers[loudest_speaker(&speakers)].power();
        let snr_db = 10.0 * (p_loud / noise.power()).log10();
        Ok(MixtureItem {
            mixture,
            speakers,
            noise,
            snr_db,
        })
    }
}
