//! Improvement metrics, per-utterance evaluation reports and spectrogram export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::objective::{capped_db, si_snr, upit_si_snr_loss};
use crate::separator::{separate, SeparatorModel};
use crate::signals::{AudioSignal, DatasetManifest, MixtureItem};

pub const REPORT_HEADER: &str = "item,perm,si_snri_db,sdri_db,noise_si_snr_db";

/// Plain energy-ratio SDR in dB, bounded to ±60.
pub fn sdr(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape("sdr", format!("lengths {} and {} differ", est.len(), reference.len())));
    }
    let rr: f64 = reference.samples().iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::Degenerate("SDR reference is silent".into()));
    }
    let ee: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (e - r) * (e - r))
        .sum();
    Ok(capped_db(rr, ee))
}

pub fn si_snri(est: &AudioSignal, reference: &AudioSignal, mixture: &AudioSignal) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mixture, reference)?)
}

pub fn sdri(est: &AudioSignal, reference: &AudioSignal, mixture: &AudioSignal) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub item: String,
    /// `permutation[k]` is the truth speaker matched to estimate `k`.
    pub permutation: Vec<usize>,
    /// Mean over human speakers.
    pub si_snri_db: f64,
    pub sdri_db: f64,
    pub noise_si_snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn mean_si_snri(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.si_snri_db)).unwrap_or(f64::NAN)
    }

    pub fn mean_sdri(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.sdri_db)).unwrap_or(f64::NAN)
    }

    pub fn mean_noise_si_snr(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.noise_si_snr_db))
    }

    /// CSV with one row per item and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        let noise = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let perm: Vec<String> = r.permutation.iter().map(|p| (p + 1).to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.item,
                perm.join("-"),
                r.si_snri_db,
                r.sdri_db,
                noise(r.noise_si_snr_db)
            );
        }
        let _ = writeln!(
            out,
            "mean,,{},{},{}",
            self.mean_si_snri(),
            self.mean_sdri(),
            noise(self.mean_noise_si_snr())
        );
        out
    }
}

/// Scores estimates (speakers in any order, then the noise if present)
/// against an item under the best speaker assignment.
pub fn evaluate_estimates(id: &str, ests: &[AudioSignal], item: &MixtureItem) -> Result<EvalRow> {
    let c = item.num_speakers();
    let with_noise = match ests.len() {
        n if n == c => false,
        n if n == c + 1 => true,
        n => return Err(Error::Contract(format!("{n} estimates for {c} speakers"))),
    };
    let mut refs = item.speakers.clone();
    if with_noise {
        refs.push(item.noise.clone());
    }
    let upit = upit_si_snr_loss(ests, &refs, with_noise, f64::NEG_INFINITY)?;
    let mut si = 0.0;
    let mut sd = 0.0;
    for (k, &t) in upit.permutation.iter().enumerate() {
        si += si_snri(&ests[k], &item.speakers[t], &item.mixture)?;
        sd += sdri(&ests[k], &item.speakers[t], &item.mixture)?;
    }
    let noise_si_snr_db = if with_noise { Some(si_snr(&ests[c], &item.noise)?) } else { None };
    Ok(EvalRow {
        item: id.to_string(),
        permutation: upit.permutation,
        si_snri_db: si / c as f64,
        sdri_db: sd / c as f64,
        noise_si_snr_db,
    })
}

/// Separates and scores every item; rows follow the input order.
pub fn evaluate_items(model: &SeparatorModel, items: &[(String, MixtureItem)]) -> Result<EvalReport> {
    if let Some((id, it)) = items.iter().find(|(_, it)| it.num_speakers() != model.config().num_speakers) {
        return Err(Error::Config(format!(
            "model separates {} speakers, item {id} has {}",
            model.config().num_speakers,
            it.num_speakers()
        )));
    }
    let rows = items
        .par_iter()
        .map(|(id, item)| {
            let sep = separate(model, &item.mixture)?;
            let ests: Vec<AudioSignal> = sep.sources().into_iter().cloned().collect();
            evaluate_estimates(id, &ests, item)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

/// Evaluates a model on every item of a manifest.
pub fn evaluate(model: &SeparatorModel, manifest: &DatasetManifest) -> Result<EvalReport> {
    if manifest.num_speakers != model.config().num_speakers {
        return Err(Error::Config(format!(
            "model separates {} speakers, manifest has {}",
            model.config().num_speakers,
            manifest.num_speakers
        )));
    }
    let items = (0..manifest.len())
        .map(|i| {
            let id = manifest.items[i]
                .mixture
                .file_stem()
                .map_or_else(|| i.to_string(), |s| s.to_string_lossy().into_owned());
            Ok((id, manifest.load_item(i)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_items(model, &items)
}

// ------------------------------------------------------------ spectrogram

/// Hann-windowed STFT magnitudes, `frames x (frame/2 + 1)`.
pub fn stft_magnitude(signal: &AudioSignal, frame: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if frame < 2 || hop == 0 {
        return Err(Error::Param(format!("invalid frame {frame} / hop {hop}")));
    }
    if signal.len() < frame {
        return Err(Error::Param(format!(
            "signal of {} samples is shorter than one frame of {frame}",
            signal.len()
        )));
    }
    let frames = (signal.len() - frame) / hop + 1;
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let x = signal.samples();
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    for f in 0..frames {
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[f * hop + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..frame / 2 + 1].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SpectrogramFiles {
    pub pgm: PathBuf,
    pub csv: PathBuf,
    pub frames: usize,
    pub bins: usize,
}

/// Writes `<stem>.pgm` (time left to right, low frequencies at the bottom,
/// log magnitude scaled to 0..255) and `<stem>.csv` (raw magnitudes, one
/// frame per row).
pub fn export_spectrogram(signal: &AudioSignal, frame: usize, hop: usize, stem: &Path) -> Result<SpectrogramFiles> {
    let mags = stft_magnitude(signal, frame, hop)?;
    let (frames, bins) = (mags.len(), mags[0].len());
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut csv = String::new();
    for row in &mags {
        let cells: Vec<String> = row.iter().map(|m| m.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let logs: Vec<Vec<f64>> = mags
        .iter()
        .map(|r| r.iter().map(|&m| if m > 0.0 { m.log10() } else { f64::NEG_INFINITY }).collect())
        .collect();
    let finite = logs.iter().flatten().filter(|v| v.is_finite());
    let hi = finite.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
    // 80 dB of display range below the peak
    let lo = finite.cloned().fold(f64::INFINITY, f64::min).max(hi - 4.0);
    let mut pgm = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for b in (0..bins).rev() {
        for row in &logs {
            let v = row[b];
            let px = if !v.is_finite() {
                0
            } else if hi <= lo {
                255
            } else {
                (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            pgm.push(px);
        }
    }
    let pgm_path = stem.with_extension("pgm");
    let csv_path = stem.with_extension("csv");
    fs::write(&pgm_path, pgm)?;
    fs::write(&csv_path, csv)?;
    Ok(SpectrogramFiles {
        pgm: pgm_path,
        csv: csv_path,
        frames,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(v: &[f64]) -> AudioSignal {
        AudioSignal::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn sdri_hand_value() {
        let v = sdri(&sig(&[1.0, 1.0]), &sig(&[1.0, 0.0]), &sig(&[1.0, 0.5])).unwrap();
        assert!((v + 10.0 * 4f64.log10()).abs() < 1e-12);
        let m = sig(&[0.2, -0.3, 0.4]);
        let r = sig(&[0.1, -0.1, 0.5]);
        assert_eq!(si_snri(&m, &r, &m).unwrap(), 0.0);
        assert_eq!(sdri(&m, &r, &m).unwrap(), 0.0);
    }

    #[test]
    fn tone_peak_bin() {
        let x: Vec<f64> = (0..2048)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 8000.0).sin())
            .collect();
        let mags = stft_magnitude(&sig(&x), 256, 64).unwrap();
        assert_eq!(mags.len(), (2048 - 256) / 64 + 1);
        for row in &mags {
            assert_eq!(row.len(), 129);
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, 32);
        }
        let z = stft_magnitude(&sig(&[0.0; 300]), 256, 64).unwrap();
        assert!(z.iter().flatten().all(|&m| m == 0.0));
        assert!(stft_magnitude(&sig(&[0.0; 100]), 256, 64).is_err());
    }
}
