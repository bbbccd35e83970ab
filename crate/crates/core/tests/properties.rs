//! Property tests over shapes, chunking, metrics and the contrastive loss.

use noisy_sep::contrastive::{pcl_loss, PatchSet};
use noisy_sep::objective::{si_snr, upit_si_snr_loss, DEFAULT_CLAMP_DB};
use noisy_sep::separator::{chunk, decode, encode, masking_net, overlap_add, separate, Repr, SeparatorConfig, SeparatorModel};
use noisy_sep::signals::AudioSignal;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sig(v: Vec<f64>) -> AudioSignal {
    AudioSignal::new(v, 8000).unwrap()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunk_then_overlap_add_is_identity(n in 1usize..5, len in 1usize..300, half in 1usize..30, seed in any::<u64>()) {
        let h = Repr::new(n, len, gaussian(seed, n * len)).unwrap();
        let c = chunk(&h, 2 * half).unwrap();
        let back = overlap_add(&c).unwrap();
        prop_assert_eq!((back.filters(), back.frames()), (n, len));
        for (a, b) in h.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoder_decoder_length_algebra(kernel in 2usize..24, stride_frac in 0.1f64..1.0, extra in 0usize..200, seed in any::<u64>()) {
        let stride = ((kernel as f64 * stride_frac).ceil() as usize).clamp(1, kernel);
        let cfg = SeparatorConfig { kernel, stride, ..SeparatorConfig::tiny() };
        let model = SeparatorModel::new(cfg, seed).unwrap();
        let t = kernel + extra;
        let x = sig(gaussian(seed, t));
        let h = encode(&model, &x).unwrap();
        prop_assert_eq!(h.frames(), (t - kernel) / stride + 1);
        prop_assert!(h.values().iter().all(|&v| v >= 0.0));
        let y = decode(&model, &h, 8000).unwrap();
        prop_assert_eq!(y.len(), (h.frames() - 1) * stride + kernel);
        // at most one partial hop is lost at the tail
        prop_assert!(y.len() <= t && y.len() + stride > t);
        let sep = separate(&model, &x).unwrap();
        prop_assert!(sep.sources().iter().all(|s| s.len() == t));
    }

    #[test]
    fn masks_are_nonnegative(seed in any::<u64>(), frames in 1usize..40) {
        let model = SeparatorModel::new(SeparatorConfig::tiny(), seed).unwrap();
        let n = model.config().n_filters;
        let h = Repr::new(n, frames, gaussian(seed ^ 1, n * frames).into_iter().map(f64::abs).collect()).unwrap();
        let masks = masking_net(&model, &h).unwrap();
        prop_assert_eq!(masks.len(), 3);
        for m in &masks {
            prop_assert!(m.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pcl_ignores_negative_order(seed in any::<u64>(), m in 1usize..20) {
        let q = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| unit((0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let queries: Vec<_> = (0..m).map(|_| draw(&mut rng)).collect();
        let positives: Vec<_> = (0..m).map(|_| draw(&mut rng)).collect();
        let negatives: Vec<_> = (0..m).map(|_| draw(&mut rng)).collect();
        let ps = PatchSet { queries, positives, negatives, query_frames: vec![0; m], negative_frames: vec![(0, 0); m] };
        let mut shuffled = ps.clone();
        shuffled.negatives.shuffle(&mut rng);
        let a = pcl_loss(&ps, 0.07).unwrap();
        let b = pcl_loss(&shuffled, 0.07).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn pcl_falls_as_the_positive_aligns(a in -0.95f64..0.9, step in 0.01f64..0.05, seed in any::<u64>()) {
        // query e0, positive at cosine `a`, negatives fixed
        let q = 4;
        let mut e0 = vec![0.0; q];
        e0[0] = 1.0;
        let positive = |c: f64| {
            let mut v = vec![0.0; q];
            v[0] = c;
            v[1] = (1.0 - c * c).sqrt();
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let negatives: Vec<_> = (0..8).map(|_| unit((0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())).collect();
        let set = |c: f64| PatchSet {
            queries: vec![e0.clone()],
            positives: vec![positive(c)],
            negatives: negatives.clone(),
            query_frames: vec![0],
            negative_frames: vec![(0, 0); 8],
        };
        prop_assert!(pcl_loss(&set(a + step), 0.07).unwrap() < pcl_loss(&set(a), 0.07).unwrap());
    }

    #[test]
    fn upit_beats_every_assignment(seed in any::<u64>(), c in 2usize..4, with_noise in any::<bool>()) {
        let g = c + usize::from(with_noise);
        let refs: Vec<_> = (0..g).map(|k| sig(gaussian(seed.wrapping_add(k as u64), 48))).collect();
        let ests: Vec<_> = (0..g).map(|k| sig(gaussian(seed.wrapping_add(100 + k as u64), 48))
            .samples().iter().zip(refs[(k + 1) % g].samples()).map(|(e, r)| 0.7 * e + r).collect())
            .map(sig).collect();
        let best = upit_si_snr_loss(&ests, &refs, with_noise, DEFAULT_CLAMP_DB).unwrap();
        let term = |s: f64| (-s).max(DEFAULT_CLAMP_DB);
        let noise = if with_noise { term(si_snr(&ests[c], &refs[c]).unwrap()) } else { 0.0 };
        let perms: Vec<Vec<usize>> = if c == 2 {
            vec![vec![0, 1], vec![1, 0]]
        } else {
            vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
        };
        for p in perms {
            let l = (p.iter().enumerate().map(|(k, &t)| term(si_snr(&ests[k], &refs[t]).unwrap())).sum::<f64>() + noise) / g as f64;
            prop_assert!(best.loss <= l);
        }
        prop_assert!(best.loss >= DEFAULT_CLAMP_DB);
    }

    #[test]
    fn upit_choice_ignores_estimate_gain(seed in any::<u64>(), alpha in 0.1f64..10.0, k in 0usize..2) {
        let refs: Vec<_> = (0..3).map(|i| sig(gaussian(seed.wrapping_add(i), 64))).collect();
        let ests: Vec<_> = (0..3).map(|i| {
            let src = [1usize, 0, 2][i as usize];
            sig(gaussian(seed.wrapping_add(50 + i), 64).iter().zip(refs[src].samples()).map(|(e, r)| 0.5 * e + r).collect())
        }).collect();
        let base = upit_si_snr_loss(&ests, &refs, true, DEFAULT_CLAMP_DB).unwrap();
        let mut scaled = ests.clone();
        scaled[k] = ests[k].scaled(alpha);
        let after = upit_si_snr_loss(&scaled, &refs, true, DEFAULT_CLAMP_DB).unwrap();
        prop_assert_eq!(&after.permutation, &base.permutation);
        for (a, b) in after.per_source_si_snr.iter().zip(&base.per_source_si_snr) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn si_snr_ignores_gain(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let r = sig(gaussian(seed, 128));
        let e = sig(gaussian(seed ^ 7, 128).iter().zip(r.samples()).map(|(n, s)| s + 0.3 * n).collect());
        let d = si_snr(&e.scaled(alpha), &r).unwrap() - si_snr(&e, &r).unwrap();
        prop_assert!(d.abs() < 1e-6);
    }
}

#[test]
fn clamp_floors_solved_sources() {
    let refs: Vec<_> = (0..3).map(|i| sig(gaussian(i, 64))).collect();
    // near-perfect speakers exceed the 30 dB floor; the noise estimate does not
    let mut ests: Vec<_> = refs.iter().map(|r| sig(r.samples().iter().map(|v| v * 1.000001).collect())).collect();
    ests[2] = sig(gaussian(99, 64));
    let r = upit_si_snr_loss(&ests, &refs, true, DEFAULT_CLAMP_DB).unwrap();
    let noise_term = -r.per_source_si_snr[2];
    assert!(r.per_source_si_snr[..2].iter().all(|&s| s > 30.0));
    assert!((r.loss - (2.0 * DEFAULT_CLAMP_DB + noise_term) / 3.0).abs() < 1e-12);
}
