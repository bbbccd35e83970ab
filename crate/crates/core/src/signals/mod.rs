//! Waveforms, synthetic sources, SNR-controlled mixing and on-disk datasets.

mod dataset;
mod synth;
mod wav;

pub use dataset::{generate_item, make_dataset, DatasetConfig, DatasetManifest, ManifestItem, Split};
pub use synth::{synth_noise, synth_source, NoiseKind, SourceKind};
pub use wav::{read_wav, write_wav, BitDepth, WavWriteReport};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Param("signal must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Param("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Param(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `start..start+len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::Param(format!(
                "segment {start}..{} outside signal of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// A noisy mixture with its ground-truth stems.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureItem {
    pub mixture: AudioSignal,
    pub speakers: Vec<AudioSignal>,
    pub noise: AudioSignal,
    /// Loudest speaker to noise ratio in dB.
    pub snr_db: f64,
}

impl MixtureItem {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Same window of every constituent signal.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            mixture: self.mixture.segment(start, len)?,
            speakers: self.speakers.iter().map(|s| s.segment(start, len)).collect::<Result<_>>()?,
            noise: self.noise.segment(start, len)?,
            snr_db: self.snr_db,
        })
    }
}

/// Index of the speaker with the largest power; ties go to the lowest index.
pub fn loudest_speaker(speakers: &[AudioSignal]) -> usize {
    let mut best = 0;
    for (i, s) in speakers.iter().enumerate().skip(1) {
        if s.power() > speakers[best].power() {
            best = i;
        }
    }
    best
}

/// Rescales `noise` so the loudest speaker sits `snr_db` above it, then sums.
pub fn mix_at_snr(speakers: &[AudioSignal], noise: &AudioSignal, snr_db: f64) -> Result<MixtureItem> {
    let first = speakers
        .first()
        .ok_or_else(|| Error::Param("at least one speaker is required".into()))?;
    if !snr_db.is_finite() {
        return Err(Error::Param(format!("snr must be finite, got {snr_db}")));
    }
    for s in speakers.iter().chain(std::iter::once(noise)) {
        if s.len() != first.len() || s.sample_rate() != first.sample_rate() {
            return Err(Error::Param(format!(
                "stems disagree: {} samples @ {} Hz vs {} samples @ {} Hz",
                s.len(),
                s.sample_rate(),
                first.len(),
                first.sample_rate()
            )));
        }
    }
    let p_loud = speakers[loudest_speaker(speakers)].power();
    let p_noise = noise.power();
    if p_loud == 0.0 {
        return Err(Error::Degenerate("loudest speaker is silent".into()));
    }
    if p_noise == 0.0 {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    let gain = (p_loud / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise = noise.scaled(gain);
    let mut mix = noise.samples().to_vec();
    for s in speakers {
        mix.iter_mut().zip(s.samples()).for_each(|(m, v)| *m += v);
    }
    Ok(MixtureItem {
        mixture: AudioSignal::new(mix, first.sample_rate())?,
        speakers: speakers.to_vec(),
        noise,
        snr_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, n: usize) -> AudioSignal {
        AudioSignal::new((0..n).map(|i| if i % 2 == 0 { v } else { -v }).collect(), 8000).unwrap()
    }

    #[test]
    fn invalid_signals_are_rejected() {
        assert!(AudioSignal::new(vec![], 8000).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
        assert!(AudioSignal::new(vec![f64::NAN], 8000).is_err());
    }

    #[test]
    fn noise_is_scaled_to_loudest_speaker() {
        let s1 = constant(0.2, 100); // power 0.04
        let s2 = constant(0.1, 100); // power 0.01
        let n = constant(1.0, 100);
        let item = mix_at_snr(&[s1.clone(), s2.clone()], &n, 0.0).unwrap();
        assert!((item.noise.power() - 0.04).abs() < 1e-15);
        assert_eq!(item.speakers, vec![s1.clone(), s2.clone()]);

        let item = mix_at_snr(&[s1, s2], &n, 3.0).unwrap();
        let expected = 0.04 / 10f64.powf(0.3);
        assert!((item.noise.power() - expected).abs() < 1e-15);
        assert!((expected - 0.020050).abs() < 1e-5);
        for (i, m) in item.mixture.samples().iter().enumerate() {
            let sum: f64 = item.speakers.iter().map(|s| s.samples()[i]).sum::<f64>() + item.noise.samples()[i];
            assert!((m - sum).abs() <= 1e-6);
        }
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let s = constant(0.2, 10);
        let z = constant(0.0, 10);
        assert!(matches!(mix_at_snr(&[s.clone()], &z, 0.0), Err(Error::Degenerate(_))));
        assert!(matches!(mix_at_snr(&[z.clone()], &s, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loudest_tie_goes_to_lowest_index() {
        let a = constant(0.3, 10);
        assert_eq!(loudest_speaker(&[a.clone(), a.clone()]), 0);
        assert_eq!(loudest_speaker(&[constant(0.1, 10), a]), 1);
    }
}
