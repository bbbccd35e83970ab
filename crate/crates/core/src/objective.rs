//! Scale-invariant SNR, utterance-level permutation search and the combined
//! training objective.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::contrastive::{pcl_total_var, PclConfig};
use crate::error::{Error, Result};
use crate::separator::{encode, ForwardVars, Repr, SeparatorModel};
use crate::signals::AudioSignal;

/// Bound applied to every reported log-ratio metric.
pub const DB_CAP: f64 = 60.0;
/// Floor on the per-source negative SI-SNR loss.
pub const DEFAULT_CLAMP_DB: f64 = -30.0;
/// Guards the logarithms of the differentiable SI-SNR.
const GRAPH_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// `10·log10(num/den)` bounded to `±DB_CAP`.
pub(crate) fn capped_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        -DB_CAP
    } else if den <= 0.0 {
        DB_CAP
    } else {
        (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
    }
}

/// SI-SNR in dB over raw sample slices.
pub fn si_snr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths("si_snr", est, reference)?;
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::Degenerate("SI-SNR reference is silent".into()));
    }
    let a = dot(est, reference) / rr;
    let (mut tt, mut ee) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = a * r;
        tt += t * t;
        ee += (e - t) * (e - t);
    }
    Ok(capped_db(tt, ee))
}

pub fn si_snr(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    si_snr_samples(est.samples(), reference.samples())
}

/// Differentiable SI-SNR (dB) of `est` `[T]` against a constant reference.
pub fn si_snr_var(g: &mut Graph, est: Var, reference: &[f64]) -> Result<Var> {
    let t = g.value(est).len();
    if t != reference.len() {
        return Err(Error::shape("si_snr", format!("lengths {t} and {} differ", reference.len())));
    }
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::Degenerate("SI-SNR reference is silent".into()));
    }
    let r = g.constant(&[t], reference.to_vec())?;
    let er = g.mul(est, r)?;
    let proj = g.sum(er)?;
    let a = g.scale(proj, 1.0 / rr)?;
    let target = g.scale_by(r, a)?;
    let resid = g.sub(est, target)?;
    let t2 = g.mul(target, target)?;
    let tt = g.sum(t2)?;
    let e2 = g.mul(resid, resid)?;
    let ee = g.sum(e2)?;
    let tt = g.add_scalar(tt, GRAPH_EPS)?;
    let ee = g.add_scalar(ee, GRAPH_EPS)?;
    let (lt, le) = (g.log(tt)?, g.log(ee)?);
    let diff = g.sub(lt, le)?;
    g.scale(diff, 10.0 / std::f64::consts::LN_10)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpitResult {
    /// Mean clamped loss over all sources under the chosen assignment.
    pub loss: f64,
    /// `permutation[k]` is the truth speaker matched to estimated speaker `k`.
    pub permutation: Vec<usize>,
    /// SI-SNR (dB) of each estimate against its matched reference, in estimate order.
    pub per_source_si_snr: Vec<f64>,
}

/// Brute-force utterance-level permutation search over the human speakers.
///
/// `ests` and `refs` list the speakers first and, when `with_noise`, the noise
/// last; the noise pair is matched by index and never permuted.
pub fn upit_si_snr_loss(
    ests: &[AudioSignal],
    refs: &[AudioSignal],
    with_noise: bool,
    clamp_db: f64,
) -> Result<UpitResult> {
    let e: Vec<&[f64]> = ests.iter().map(|s| s.samples()).collect();
    let r: Vec<&[f64]> = refs.iter().map(|s| s.samples()).collect();
    upit_samples(&e, &r, with_noise, clamp_db)
}

pub(crate) fn upit_samples(ests: &[&[f64]], refs: &[&[f64]], with_noise: bool, clamp_db: f64) -> Result<UpitResult> {
    if ests.len() != refs.len() {
        return Err(Error::Contract(format!("{} estimates for {} references", ests.len(), refs.len())));
    }
    let c = ests.len() - usize::from(with_noise);
    if !(2..=3).contains(&c) {
        return Err(Error::Contract(format!("expected 2 or 3 speakers, got {c}")));
    }
    let g = ests.len() as f64;
    // table[k][t]: SI-SNR of estimate k against truth t
    let table: Vec<Vec<f64>> = (0..c)
        .map(|k| (0..c).map(|t| si_snr_samples(ests[k], refs[t])).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let noise = if with_noise { Some(si_snr_samples(ests[c], refs[c])?) } else { None };
    let term = |s: f64| (-s).max(clamp_db);
    let noise_term = noise.map_or(0.0, term);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let sum: f64 = perm.iter().enumerate().map(|(k, &t)| term(table[k][t])).sum::<f64>() + noise_term;
        let loss = sum / g;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    let (loss, permutation) = best.expect("at least one permutation");
    let mut per_source_si_snr: Vec<f64> = permutation.iter().enumerate().map(|(k, &t)| table[k][t]).collect();
    per_source_si_snr.extend(noise);
    Ok(UpitResult {
        loss,
        permutation,
        per_source_si_snr,
    })
}

/// Ground truth for one training example.
#[derive(Debug, Clone)]
pub struct Truth<'a> {
    pub speakers: &'a [AudioSignal],
    pub noise: &'a AudioSignal,
    /// Encoded stems (speakers, then noise); computed from the model when absent.
    pub reprs: Option<&'a [Repr]>,
}

/// Encodes every stem (speakers, then noise) with the model's encoder.
pub fn truth_reprs(model: &SeparatorModel, truth: &Truth<'_>) -> Result<Vec<Repr>> {
    truth
        .speakers
        .iter()
        .chain(std::iter::once(truth.noise))
        .map(|s| encode(model, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub si_snr_term: f64,
    pub pcl_term: f64,
    pub permutation: Vec<usize>,
    /// Permutation the contrastive term aligned with.
    pub pcl_permutation: Vec<usize>,
    pub per_source_si_snr: Vec<f64>,
}

/// Loss settings shared by training and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub clamp_db: f64,
    pub pcl: PclConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clamp_db: DEFAULT_CLAMP_DB,
            pcl: PclConfig::default(),
        }
    }
}

/// Builds the total loss on `g` for a forward pass and reports its parts.
///
/// The permutation is chosen once on the SI-SNR term and reused to align the
/// contrastive comparisons.
pub fn total_loss_var(
    g: &mut Graph,
    model: &SeparatorModel,
    fw: &ForwardVars,
    truth: &Truth<'_>,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossReport)> {
    let with_noise = model.config().noise_speaker;
    let c = truth.speakers.len();
    if c != model.config().num_speakers {
        return Err(Error::Config(format!(
            "model separates {} speakers, truth has {c}",
            model.config().num_speakers
        )));
    }
    let mut refs: Vec<&[f64]> = truth.speakers.iter().map(|s| s.samples()).collect();
    if with_noise {
        refs.push(truth.noise.samples());
    }
    let ests: Vec<&[f64]> = fw.outputs.iter().map(|&o| g.value(o)).collect();
    let upit = upit_samples(&ests, &refs, with_noise, cfg.clamp_db)?;

    let mut terms = Vec::with_capacity(refs.len());
    for (k, &out) in fw.outputs.iter().enumerate() {
        let t = if k < c { upit.permutation[k] } else { c };
        let s = si_snr_var(g, out, refs[t])?;
        let neg = g.scale(s, -1.0)?;
        terms.push(g.clamp_min(neg, cfg.clamp_db)?);
    }
    let stacked = g.concat(&terms, 0)?;
    let si_term = g.mean(stacked)?;

    let (total, pcl_term, pcl_permutation) = if with_noise && cfg.pcl.lambda > 0.0 {
        let owned;
        let reprs = match truth.reprs {
            Some(r) => r,
            None => {
                owned = truth_reprs(model, truth)?;
                &owned
            }
        };
        if reprs.len() != c + 1 {
            return Err(Error::Contract(format!("{} truth representations for {c} speakers and noise", reprs.len())));
        }
        let truth_reprs = reprs
            .iter()
            .map(|r| g.constant(&[r.filters(), r.frames()], r.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let (pcl, used) = pcl_total_var(g, model, &fw.reprs, &truth_reprs, &upit.permutation, &cfg.pcl, rng)?;
        let weighted = g.scale(pcl, cfg.pcl.lambda)?;
        let total = g.add(si_term, weighted)?;
        (total, g.scalar(pcl), used)
    } else {
        (si_term, 0.0, upit.permutation.clone())
    };
    let report = LossReport {
        total: g.scalar(total),
        si_snr_term: g.scalar(si_term),
        pcl_term,
        permutation: upit.permutation,
        pcl_permutation,
        per_source_si_snr: upit.per_source_si_snr,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(v: &[f64]) -> AudioSignal {
        AudioSignal::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn hand_values() {
        let v = si_snr(&sig(&[1.0, 0.5, 0.0, 0.0]), &sig(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((v - 10.0 * 4f64.log10()).abs() < 1e-12);
        let v = si_snr(&sig(&[1.0, 1.0, 0.0, 0.0]), &sig(&[2.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(v.abs() < 1e-12);
        let r = sig(&[0.3, -0.2, 0.5]);
        assert_eq!(si_snr(&r.scaled(3.0), &r).unwrap(), DB_CAP);
        assert_eq!(si_snr(&r, &r).unwrap(), DB_CAP);
        assert_eq!(si_snr(&sig(&[0.0; 3]), &r).unwrap(), -DB_CAP);
        assert!(matches!(si_snr(&r, &sig(&[0.0; 3])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn graph_matches_plain() {
        let est = [0.3, -0.1, 0.7, 0.2, -0.4];
        let reference = [0.5, 0.1, 0.4, -0.2, -0.3];
        let mut g = Graph::new();
        let e = g.constant(&[5], est.to_vec()).unwrap();
        let s = si_snr_var(&mut g, e, &reference).unwrap();
        assert!((g.scalar(s) - si_snr_samples(&est, &reference).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn permutation_examples() {
        assert_eq!(permutations(3).len(), 6);
        let s1 = sig(&[1.0, 0.0, 0.0, 0.0]);
        let s2 = sig(&[0.0, 1.0, 0.0, 0.0]);
        let n = sig(&[0.0, 0.0, 1.0, 0.0]);
        let r = upit_si_snr_loss(&[s2.clone(), s1.clone(), n.clone()], &[s1.clone(), s2.clone(), n.clone()], true, -30.0)
            .unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        let r = upit_si_snr_loss(&[s1.clone(), s2.clone()], &[s1.clone(), s2.clone()], false, -30.0).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
        assert_eq!(r.loss, -30.0);
        assert!(upit_si_snr_loss(&[s1.clone()], &[s1, s2], false, -30.0).is_err());
    }
}
