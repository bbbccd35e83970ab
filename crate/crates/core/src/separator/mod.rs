//! Encoder, dual-path masking network and decoder.
//!
//! The mixture waveform is encoded into a nonnegative `N x L` feature map,
//! the masking network predicts one mask per source (human speakers first,
//! the background noise last when `noise_speaker` is on), and every masked
//! map is decoded back to a waveform of the input length.

mod config;
mod model;

pub use config::{BlockKind, SeparatorConfig};
pub(crate) use config::parse_bool;
pub use model::{ForwardVars, SeparatorModel};

use crate::autodiff::{ChunkGeometry, Graph};
use crate::error::{Error, Result};
use crate::signals::AudioSignal;

/// Feature map of shape `N x L` (filters x frames), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Repr {
    n: usize,
    l: usize,
    values: Vec<f64>,
}

impl Repr {
    pub fn new(n: usize, l: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || l == 0 || values.len() != n * l {
            return Err(Error::shape(
                "repr",
                format!("{} values do not form a {n}x{l} map", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("repr".into()));
        }
        Ok(Self { n, l, values })
    }

    pub fn filters(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.l
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, filter: usize, frame: usize) -> f64 {
        self.values[filter * self.l + frame]
    }

    /// The `N`-vector at one frame.
    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n).map(|f| self.at(f, frame)).collect()
    }
}

/// `N x K x S` chunks with 50% overlap plus what is needed to undo them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedRepr {
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub values: Vec<f64>,
    pub original_l: usize,
    pub pad_amount: usize,
}

/// Result of a full separation pass.
#[derive(Debug, Clone)]
pub struct Separation {
    /// One waveform per human speaker, in output order.
    pub speakers: Vec<AudioSignal>,
    /// Predicted background noise when the noise-speaker is enabled.
    pub noise: Option<AudioSignal>,
    pub mixture_repr: Repr,
    /// Masked maps, speakers first, noise last.
    pub reprs: Vec<Repr>,
}

impl Separation {
    /// All outputs in model order.
    pub fn sources(&self) -> Vec<&AudioSignal> {
        self.speakers.iter().chain(self.noise.as_ref()).collect()
    }
}

fn repr_of(g: &Graph, v: crate::autodiff::Var) -> Result<Repr> {
    let s = g.shape(v);
    Repr::new(s[0], s[1], g.value(v).to_vec())
}

pub fn encode(model: &SeparatorModel, x: &AudioSignal) -> Result<Repr> {
    let k = model.config().kernel;
    if x.len() < k {
        return Err(Error::shape(
            "encode",
            format!("signal of {} samples is shorter than the kernel {k}", x.len()),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(&[1, x.len()], x.samples().to_vec())?;
    let h = model.encode_var(&mut g, xv)?;
    repr_of(&g, h)
}

pub fn decode(model: &SeparatorModel, h: &Repr, sample_rate: u32) -> Result<AudioSignal> {
    let mut g = Graph::new();
    let hv = g.constant(&[h.n, h.l], h.values.clone())?;
    let y = model.decode_var(&mut g, hv)?;
    AudioSignal::new(g.value(y).to_vec(), sample_rate)
}

pub fn chunk(h: &Repr, k: usize) -> Result<ChunkedRepr> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Param(format!("chunk size must be even and at least 2, got {k}")));
    }
    let mut g = Graph::new();
    let hv = g.constant(&[h.n, h.l], h.values.clone())?;
    let c = g.chunk(hv, k)?;
    let geo = ChunkGeometry::new(h.l, k);
    Ok(ChunkedRepr {
        n: h.n,
        k,
        s: geo.chunks,
        values: g.value(c).to_vec(),
        original_l: h.l,
        pad_amount: geo.pad(),
    })
}

pub fn overlap_add(c: &ChunkedRepr) -> Result<Repr> {
    let mut g = Graph::new();
    let cv = g.constant(&[c.n, c.k, c.s], c.values.clone())?;
    let h = g.overlap_add(cv, c.original_l)?;
    repr_of(&g, h)
}

pub fn masking_net(model: &SeparatorModel, h: &Repr) -> Result<Vec<Repr>> {
    let mut g = Graph::new();
    let hv = g.constant(&[h.n, h.l], h.values.clone())?;
    let masks = model.masking_net_var(&mut g, hv)?;
    masks.iter().map(|&m| repr_of(&g, m)).collect()
}

pub fn apply_masks(h: &Repr, masks: &[Repr]) -> Result<Vec<Repr>> {
    masks
        .iter()
        .map(|m| {
            if (m.n, m.l) != (h.n, h.l) {
                return Err(Error::shape(
                    "apply_masks",
                    format!("mask {}x{} vs representation {}x{}", m.n, m.l, h.n, h.l),
                ));
            }
            let v = m.values.iter().zip(&h.values).map(|(a, b)| a * b).collect();
            Repr::new(h.n, h.l, v)
        })
        .collect()
}

pub fn separate(model: &SeparatorModel, x: &AudioSignal) -> Result<Separation> {
    let mut g = Graph::new();
    let xv = g.constant(&[x.len()], x.samples().to_vec())?;
    let fw = model.forward_var(&mut g, xv)?;
    let mut outputs = fw
        .outputs
        .iter()
        .map(|&y| AudioSignal::new(g.value(y).to_vec(), x.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    let noise = if model.config().noise_speaker { outputs.pop() } else { None };
    Ok(Separation {
        speakers: outputs,
        noise,
        mixture_repr: repr_of(&g, fw.mixture_repr)?,
        reprs: fw.reprs.iter().map(|&r| repr_of(&g, r)).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{synth_source, SourceKind};

    fn probe(len: usize) -> AudioSignal {
        synth_source(SourceKind::Harmonic, len as f64 / 8000.0, 220.0, 1, 8000).unwrap()
    }

    #[test]
    fn encode_shape_and_nonnegative() {
        let model = SeparatorModel::new(SeparatorConfig::default(), 3).unwrap();
        let x = probe(32000);
        let h = encode(&model, &x).unwrap();
        assert_eq!((h.filters(), h.frames()), (64, 3999));
        assert!(h.values().iter().all(|&v| v >= 0.0));
        assert_eq!(decode(&model, &h, 8000).unwrap().len(), 32000);
        let short = AudioSignal::new(vec![0.1; 15], 8000).unwrap();
        assert!(matches!(encode(&model, &short), Err(Error::Shape { op: "encode", .. })));
    }

    #[test]
    fn zero_repr_decodes_to_zero() {
        let model = SeparatorModel::new(SeparatorConfig::tiny(), 3).unwrap();
        let h = Repr::new(8, 5, vec![0.0; 40]).unwrap();
        let y = decode(&model, &h, 8000).unwrap();
        assert_eq!(y.len(), 4 * 8 + 16);
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_examples() {
        let h = Repr::new(2, 5, (0..10).map(f64::from).collect()).unwrap();
        let c = chunk(&h, 4).unwrap();
        assert_eq!((c.k, c.s, c.pad_amount), (4, 2, 1));
        assert_eq!(overlap_add(&c).unwrap(), h);
        let h8 = Repr::new(1, 8, vec![1.0; 8]).unwrap();
        assert_eq!(chunk(&h8, 4).unwrap().s, 3);
    }

    #[test]
    fn masks_and_separation() {
        let model = SeparatorModel::new(SeparatorConfig::tiny(), 11).unwrap();
        let x = probe(160);
        let h = encode(&model, &x).unwrap();
        let masks = masking_net(&model, &h).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks.iter().all(|m| m.values().iter().all(|&v| v >= 0.0)));

        let ones = Repr::new(h.filters(), h.frames(), vec![1.0; h.values().len()]).unwrap();
        assert_eq!(apply_masks(&h, &[ones]).unwrap()[0], h);

        let sep = separate(&model, &x).unwrap();
        assert_eq!(sep.speakers.len(), 2);
        assert!(sep.noise.is_some());
        assert!(sep.sources().iter().all(|s| s.len() == 160));
        let prod = apply_masks(&h, &masks).unwrap();
        assert_eq!(sep.reprs, prod);

        let mut cfg = SeparatorConfig::tiny();
        cfg.noise_speaker = false;
        let model = SeparatorModel::new(cfg, 11).unwrap();
        let sep = separate(&model, &probe(163)).unwrap();
        assert_eq!(sep.sources().len(), 2);
        assert!(sep.sources().iter().all(|s| s.len() == 163));
    }

    #[test]
    fn attention_blocks_run() {
        let mut cfg = SeparatorConfig::tiny();
        cfg.block_kind = BlockKind::Attention;
        let model = SeparatorModel::new(cfg, 2).unwrap();
        let sep = separate(&model, &probe(200)).unwrap();
        assert_eq!(sep.sources().len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = SeparatorModel::new(SeparatorConfig::tiny(), 5).unwrap();
        let ck = model.to_checkpoint();
        let back = SeparatorModel::from_checkpoint(&crate::autodiff::Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let x = probe(160);
        let a = separate(&model, &x).unwrap();
        let b = separate(&back, &x).unwrap();
        for (p, q) in a.sources().iter().zip(b.sources()) {
            assert_eq!(p.samples(), q.samples());
        }
    }

    #[test]
    fn noise_speaker_parameter_delta() {
        let on = SeparatorModel::new(SeparatorConfig::default(), 0).unwrap().num_params();
        let mut cfg = SeparatorConfig::default();
        cfg.noise_speaker = false;
        let off = SeparatorModel::new(cfg, 0).unwrap().num_params();
        assert_eq!(on - off, 64 * 64 + 64);
    }
}
