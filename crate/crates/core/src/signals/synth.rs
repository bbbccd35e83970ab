//! Deterministic parametric stand-ins for speech and background noise.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::AudioSignal;
use crate::error::{Error, Result};

const PEAK: f64 = 0.5;
const NOISE_RMS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Harmonic series with slight vibrato.
    Harmonic,
    /// Two-partial tone under a slow syllable-rate envelope.
    AmTone,
    /// Linear frequency sweep upward from `f0`.
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    /// Sum of many quiet, randomly pitched and gated harmonic voices.
    BabbleLike,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Harmonic, SourceKind::AmTone, SourceKind::Chirp];
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::BabbleLike];
}

impl FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmonic" => Ok(Self::Harmonic),
            "am_tone" => Ok(Self::AmTone),
            "chirp" => Ok(Self::Chirp),
            _ => Err(Error::Param(format!("unknown source kind {s:?}"))),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "babble_like" => Ok(Self::BabbleLike),
            _ => Err(Error::Param(format!("unknown noise kind {s:?}"))),
        }
    }
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::Param(format!("duration must be positive, got {duration_s}")));
    }
    if sample_rate == 0 {
        return Err(Error::Param("sample rate must be positive".into()));
    }
    Ok(((duration_s * sample_rate as f64).round() as usize).max(1))
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// Additive harmonic voice with vibrato; phase is integrated so the pitch glides smoothly.
fn harmonic_voice(n: usize, rate: f64, f0: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nyquist = rate / 2.0;
    let partials = ((0.9 * nyquist / f0).floor() as usize).clamp(1, 8);
    let phases: Vec<f64> = (0..partials).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let mut theta = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let f = f0 * (1.0 + 0.015 * (2.0 * PI * vib_rate * t + vib_phase).sin());
            theta += 2.0 * PI * f / rate;
            phases
                .iter()
                .enumerate()
                .filter(|(h, _)| (*h as f64 + 1.0) * f < 0.95 * nyquist)
                .map(|(h, p)| ((h as f64 + 1.0) * theta + p).sin() / (h as f64 + 1.0))
                .sum()
        })
        .collect()
}

/// Generates a deterministic test source peak-normalized to 0.5.
pub fn synth_source(kind: SourceKind, duration_s: f64, f0_hz: f64, seed: u64, sample_rate: u32) -> Result<AudioSignal> {
    let n = sample_count(duration_s, sample_rate)?;
    let rate = sample_rate as f64;
    if !(f0_hz > 0.0 && f0_hz < rate / 2.0) {
        return Err(Error::Param(format!("f0 {f0_hz} Hz outside (0, {}) Hz", rate / 2.0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match kind {
        SourceKind::Harmonic => harmonic_voice(n, rate, f0_hz, &mut rng),
        SourceKind::AmTone => {
            let fm = rng.gen_range(2.0..5.0);
            let (p0, p1, pm) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            let second = (2.0 * f0_hz < 0.95 * rate / 2.0) as u8 as f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    let env = 0.55 + 0.45 * (2.0 * PI * fm * t + pm).sin();
                    env * ((2.0 * PI * f0_hz * t + p0).sin() + 0.5 * second * (4.0 * PI * f0_hz * t + p1).sin())
                })
                .collect()
        }
        SourceKind::Chirp => {
            let f1 = (2.0 * f0_hz).min(0.45 * rate);
            let p0 = rng.gen_range(0.0..2.0 * PI);
            let dur = n as f64 / rate;
            let k = (f1 - f0_hz) / dur;
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    (2.0 * PI * (f0_hz * t + 0.5 * k * t * t) + p0).sin()
                })
                .collect()
        }
    };
    AudioSignal::new(normalize_peak(x, PEAK), sample_rate)
}

/// Generates zero-mean noise with RMS 0.1.
pub fn synth_noise(kind: NoiseKind, duration_s: f64, seed: u64, sample_rate: u32) -> Result<AudioSignal> {
    let n = sample_count(duration_s, sample_rate)?;
    let rate = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::Pink => {
            // Kellet's refined 1/f filter
            let mut b = [0.0f64; 7];
            (0..n)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    out
                })
                .collect()
        }
        NoiseKind::BabbleLike => {
            let mut acc = vec![0.0; n];
            for _ in 0..8 {
                let f0 = rng.gen_range(90.0..300.0);
                let voice = harmonic_voice(n, rate, f0, &mut rng);
                let gate_rate = rng.gen_range(1.5..4.0);
                let gate_phase = rng.gen_range(0.0..2.0 * PI);
                for (i, (a, v)) in acc.iter_mut().zip(voice).enumerate() {
                    let env = (2.0 * PI * gate_rate * i as f64 / rate + gate_phase).sin().max(0.0);
                    *a += env * v;
                }
            }
            acc.iter_mut().for_each(|a| *a += 0.05 * rng.sample::<f64, _>(StandardNormal));
            acc
        }
    };
    let mean = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }
    AudioSignal::new(x, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ncc(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn harmonic_length_and_peak() {
        let s = synth_source(SourceKind::Harmonic, 1.0, 220.0, 7, 8000).unwrap();
        assert_eq!(s.len(), 8000);
        assert!((s.peak() - 0.5).abs() < 1e-12);
        let again = synth_source(SourceKind::Harmonic, 1.0, 220.0, 7, 8000).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn chirp_autocorrelation_at_zero_lag() {
        let s = synth_source(SourceKind::Chirp, 0.5, 300.0, 1, 8000).unwrap();
        assert!((ncc(s.samples(), s.samples()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_sources_are_weakly_correlated() {
        let specs = [
            (SourceKind::Harmonic, 140.0),
            (SourceKind::Harmonic, 230.0),
            (SourceKind::AmTone, 310.0),
            (SourceKind::Chirp, 180.0),
        ];
        let sigs: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, (k, f))| synth_source(*k, 1.0, *f, i as u64, 8000).unwrap())
            .collect();
        for i in 0..sigs.len() {
            for j in i + 1..sigs.len() {
                let c = ncc(sigs[i].samples(), sigs[j].samples()).abs();
                assert!(c < 0.5, "{i} vs {j}: {c}");
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(synth_source(SourceKind::Harmonic, 0.0, 220.0, 0, 8000).is_err());
        assert!(synth_source(SourceKind::Harmonic, 1.0, 4000.0, 0, 8000).is_err());
        assert!(synth_source(SourceKind::Harmonic, 1.0, -1.0, 0, 8000).is_err());
        assert!(synth_noise(NoiseKind::White, -1.0, 0, 8000).is_err());
    }

    #[test]
    fn white_noise_is_zero_mean_and_seeded() {
        let a = synth_noise(NoiseKind::White, 1.0, 3, 8000).unwrap();
        let b = synth_noise(NoiseKind::White, 1.0, 4, 8000).unwrap();
        assert_eq!(a.len(), 8000);
        let mean = a.samples().iter().sum::<f64>() / 8000.0;
        assert!(mean.abs() < 1e-3 * a.power().sqrt());
        assert_ne!(a.samples(), b.samples());
        assert_eq!(a, synth_noise(NoiseKind::White, 1.0, 3, 8000).unwrap());
    }

    #[test]
    fn pink_noise_tilts_toward_low_frequencies() {
        // periodogram oracle by direct DFT over the two bands
        let s = synth_noise(NoiseKind::Pink, 2.0, 5, 8000).unwrap();
        let x = s.samples();
        let n = x.len();
        let band = |lo: f64, hi: f64| -> f64 {
            let (k0, k1) = ((lo * n as f64 / 8000.0).ceil() as usize, (hi * n as f64 / 8000.0).floor() as usize);
            (k0..=k1)
                .map(|k| {
                    let w = 2.0 * PI * k as f64 / n as f64;
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, v) in x.iter().enumerate() {
                        re += v * (w * i as f64).cos();
                        im -= v * (w * i as f64).sin();
                    }
                    re * re + im * im
                })
                .sum()
        };
        assert!(band(50.0, 500.0) > band(2000.0, 3950.0));
    }

    #[test]
    fn every_noise_kind_is_zero_mean() {
        for kind in NoiseKind::ALL {
            let s = synth_noise(kind, 0.5, 11, 8000).unwrap();
            let mean = s.samples().iter().sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 1e-3 * s.power().sqrt(), "{kind:?}");
        }
    }
}
