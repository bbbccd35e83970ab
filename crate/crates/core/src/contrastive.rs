//! Patch-wise contrastive loss between separated speech and noise.
//!
//! Frames (patches of width one) are sampled from feature maps, projected
//! onto the unit sphere by the model's projection head, and scored with an
//! InfoNCE cross-entropy: each query should pick its positive out of
//! `M + 1` candidates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::separator::{Repr, SeparatorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Queries from each separated speaker, negatives from the predicted noise.
    SpeechToNoise,
    /// Queries from the predicted noise, negatives from the speaker stems.
    NoiseToSpeech,
    Both,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::SpeechToNoise => "s_to_n",
            Direction::NoiseToSpeech => "n_to_s",
            Direction::Both => "both",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s_to_n" => Ok(Direction::SpeechToNoise),
            "n_to_s" => Ok(Direction::NoiseToSpeech),
            "both" => Ok(Direction::Both),
            _ => Err(Error::Config(format!("unknown contrastive direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PclConfig {
    /// Negatives (and queries) per comparison set.
    pub m: usize,
    /// Patch size; only 1 is supported.
    pub p: usize,
    /// Projection width.
    pub q: usize,
    pub tau: f64,
    pub direction: Direction,
    pub lambda: f64,
}

impl Default for PclConfig {
    fn default() -> Self {
        Self {
            m: 256,
            p: 1,
            q: 256,
            tau: 0.07,
            direction: Direction::SpeechToNoise,
            lambda: 2.0,
        }
    }
}

impl PclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.q == 0 {
            return Err(Error::Config("pcl_m and pcl_q must be at least 1".into()));
        }
        if self.p != 1 {
            return Err(Error::Config(format!("patch size {} is not supported (only 1)", self.p)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One comparison set: `M` queries, their positives and `M` shared negatives,
/// each a unit vector of width `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Frame index of each query (and of its positive).
    pub query_frames: Vec<usize>,
    /// `(source, frame)` of each negative.
    pub negative_frames: Vec<(usize, usize)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean InfoNCE cross-entropy of a patch set.
pub fn pcl_loss(ps: &PatchSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let m = ps.queries.len();
    if m == 0 || ps.positives.len() != m || ps.negatives.is_empty() {
        return Err(Error::shape(
            "pcl_loss",
            format!("{m} queries, {} positives, {} negatives", ps.positives.len(), ps.negatives.len()),
        ));
    }
    let mut total = 0.0;
    for (q, p) in ps.queries.iter().zip(&ps.positives) {
        let pos = dot(q, p);
        // logits relative to the positive: log(1 + Σ exp(Δ))
        let logits: Vec<f64> = std::iter::once(0.0)
            .chain(ps.negatives.iter().map(|n| (dot(q, n) - pos) / tau))
            .collect();
        let (at, mx) = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best });
        let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != at).map(|(_, l)| (l - mx).exp()).sum();
        total += mx + rest.ln_1p();
    }
    Ok(total / m as f64)
}

fn check_same(a: &Repr, b: &Repr, what: &str) -> Result<()> {
    if (a.filters(), a.frames()) != (b.filters(), b.frames()) {
        return Err(Error::shape(
            "sample_patches",
            format!(
                "{what} is {}x{}, prediction is {}x{}",
                b.filters(),
                b.frames(),
                a.filters(),
                a.frames()
            ),
        ));
    }
    Ok(())
}

fn frame_rows(g: &mut Graph, h: Var, frames: &[usize]) -> Result<Var> {
    let ht = g.transpose(h, &[1, 0])?; // [L, N]
    g.gather_rows(ht, frames)
}

/// Draws one comparison set from `pred`/`truth`/`noise` maps and projects it.
pub fn sample_patches(
    model: &SeparatorModel,
    h_pred: &Repr,
    h_truth: &Repr,
    h_noise: &Repr,
    cfg: &PclConfig,
    rng: &mut impl Rng,
) -> Result<PatchSet> {
    check_same(h_pred, h_truth, "truth")?;
    check_same(h_pred, h_noise, "noise")?;
    let l = h_pred.frames();
    let query_frames: Vec<usize> = (0..cfg.m).map(|_| rng.gen_range(0..l)).collect();
    let neg: Vec<usize> = (0..cfg.m).map(|_| rng.gen_range(0..l)).collect();
    let mut g = Graph::new();
    let n = h_pred.filters();
    let project = |g: &mut Graph, h: &Repr, frames: &[usize]| -> Result<Vec<Vec<f64>>> {
        let hv = g.constant(&[n, l], h.values().to_vec())?;
        let rows = frame_rows(g, hv, frames)?;
        let e = model.project_var(g, rows)?;
        Ok(g.value(e).chunks(g.shape(e)[1]).map(<[f64]>::to_vec).collect())
    };
    Ok(PatchSet {
        queries: project(&mut g, h_pred, &query_frames)?,
        positives: project(&mut g, h_truth, &query_frames)?,
        negatives: project(&mut g, h_noise, &neg)?,
        query_frames,
        negative_frames: neg.into_iter().map(|f| (0, f)).collect(),
    })
}

/// Differentiable mean InfoNCE over embeddings `q`, `p` `[M, Q]` and `neg` `[M', Q]`.
pub fn pcl_loss_var(g: &mut Graph, q: Var, p: Var, neg: Var, tau: f64) -> Result<Var> {
    let m = g.shape(q)[0];
    let n_neg = g.shape(neg)[0];
    // logits are taken relative to the positive, so the loss is
    // log(1 + Σ exp(Δ)) and stays accurate when it is close to zero
    let qp = g.mul(q, p)?;
    let pos = g.sum_last(qp)?; // [M]
    let pos_col = g.reshape(pos, &[m, 1])?;
    let ones = g.constant(&[1, n_neg], vec![1.0; n_neg])?;
    let pos_rows = g.matmul(pos_col, ones, false)?;
    let negs = g.matmul(q, neg, true)?;
    let delta = g.sub(negs, pos_rows)?;
    let delta = g.scale(delta, 1.0 / tau)?;
    let zero = g.constant(&[m, 1], vec![0.0; m])?;
    let logits = g.concat(&[zero, delta], 1)?;
    let per = g.logsumexp_last(logits)?;
    g.mean(per)
}

/// Differentiable contrastive term for one separation.
///
/// `pred` holds the predicted maps (speakers in output order, then noise),
/// `truth` the detached encoded stems (speakers, then noise). `permutation[k]`
/// is the truth speaker assigned to output `k`. Returns the loss together
/// with the permutation actually used for alignment.
pub fn pcl_total_var(
    g: &mut Graph,
    model: &SeparatorModel,
    pred: &[Var],
    truth: &[Var],
    permutation: &[usize],
    cfg: &PclConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    let c = permutation.len();
    if pred.len() != c + 1 || truth.len() != c + 1 {
        return Err(Error::Config(format!(
            "contrastive loss needs a noise representation: {} predicted and {} truth maps for {c} speakers",
            pred.len(),
            truth.len()
        )));
    }
    for &t in truth {
        if g.requires_grad(t) {
            return Err(Error::Contract("truth representations must be detached".into()));
        }
    }
    let l = g.shape(pred[0])[1];
    let draw = |rng: &mut dyn rand::RngCore, m: usize| -> Vec<usize> { (0..m).map(|_| rng.gen_range(0..l)).collect() };
    let mut terms = Vec::new();
    if matches!(cfg.direction, Direction::SpeechToNoise | Direction::Both) {
        let mut per_speaker = Vec::with_capacity(c);
        for t in 0..c {
            let k = permutation
                .iter()
                .position(|&p| p == t)
                .ok_or_else(|| Error::Contract(format!("permutation {permutation:?} is not a bijection")))?;
            let qf = draw(rng, cfg.m);
            let nf = draw(rng, cfg.m);
            let qr = frame_rows(g, pred[k], &qf)?;
            let pr = frame_rows(g, truth[t], &qf)?;
            let nr = frame_rows(g, pred[c], &nf)?;
            let (qe, pe, ne) = (model.project_var(g, qr)?, model.project_var(g, pr)?, model.project_var(g, nr)?);
            per_speaker.push(pcl_loss_var(g, qe, pe, ne, cfg.tau)?);
        }
        let stacked = g.concat(&per_speaker, 0)?;
        terms.push(g.mean(stacked)?);
    }
    if matches!(cfg.direction, Direction::NoiseToSpeech | Direction::Both) {
        let qf = draw(rng, cfg.m);
        let qr = frame_rows(g, pred[c], &qf)?;
        let pr = frame_rows(g, truth[c], &qf)?;
        let mut rows = Vec::with_capacity(cfg.m);
        for _ in 0..cfg.m {
            let t = rng.gen_range(0..c);
            let f = rng.gen_range(0..l);
            rows.push(t * l + f);
        }
        let all: Vec<Var> = truth[..c]
            .iter()
            .map(|&h| g.transpose(h, &[1, 0]))
            .collect::<Result<_>>()?;
        let stacked = g.concat(&all, 0)?; // [C·L, N]
        let nr = g.gather_rows(stacked, &rows)?;
        let (qe, pe, ne) = (model.project_var(g, qr)?, model.project_var(g, pr)?, model.project_var(g, nr)?);
        terms.push(pcl_loss_var(g, qe, pe, ne, cfg.tau)?);
    }
    let loss = if terms.len() == 2 { g.add(terms[0], terms[1])? } else { terms[0] };
    Ok((loss, permutation.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(q: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; q];
        v[i] = 1.0;
        v
    }

    fn uniform_set(m: usize) -> PatchSet {
        let v = unit(4, 0);
        PatchSet {
            queries: vec![v.clone(); m],
            positives: vec![v.clone(); m],
            negatives: vec![v; m],
            query_frames: vec![0; m],
            negative_frames: vec![(0, 0); m],
        }
    }

    #[test]
    fn closed_forms() {
        let l = pcl_loss(&uniform_set(256), 0.07).unwrap();
        assert!((l - 257f64.ln()).abs() < 1e-6);
        let l = pcl_loss(&uniform_set(1), 0.07).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);

        let mut ps = uniform_set(16);
        let mut neg = vec![0.0; 4];
        neg[0] = -1.0;
        ps.negatives = vec![neg; 16];
        assert!(pcl_loss(&ps, 0.07).unwrap() < 1e-10);
    }

    #[test]
    fn graph_matches_plain() {
        let m = 5;
        let mk = |s: f64| -> Vec<Vec<f64>> {
            (0..m)
                .map(|i| {
                    let v: Vec<f64> = (0..3).map(|j| ((i * 3 + j) as f64 * s).sin()).collect();
                    let n = dot(&v, &v).sqrt();
                    v.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let ps = PatchSet {
            queries: mk(0.7),
            positives: mk(1.3),
            negatives: mk(2.1),
            query_frames: vec![0; m],
            negative_frames: vec![(0, 0); m],
        };
        let mut g = Graph::new();
        let flat = |v: &Vec<Vec<f64>>| v.concat();
        let q = g.constant(&[m, 3], flat(&ps.queries)).unwrap();
        let p = g.constant(&[m, 3], flat(&ps.positives)).unwrap();
        let n = g.constant(&[m, 3], flat(&ps.negatives)).unwrap();
        let l = pcl_loss_var(&mut g, q, p, n, 0.1).unwrap();
        assert!((g.scalar(l) - pcl_loss(&ps, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PclConfig::default().validate().is_ok());
        let bad = PclConfig { p: 2, ..PclConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("both".parse::<Direction>().unwrap(), Direction::Both);
        assert!("x".parse::<Direction>().is_err());
    }
}
