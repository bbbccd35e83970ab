//! End-to-end acceptance run: one line per criterion, written straight to
//! stderr so it shows up even when test output is captured.
//!
//! Everything runs sequentially inside a single test so the timings are not
//! disturbed by other tests sharing the CPU.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use noisy_sep::checks::{gradcheck_suite, TOLERANCE};
use noisy_sep::contrastive::{pcl_loss, PatchSet};
use noisy_sep::eval::{evaluate_items, sdr};
use noisy_sep::objective::{si_snr, upit_si_snr_loss, DEFAULT_CLAMP_DB};
use noisy_sep::separator::{chunk, overlap_add, Repr, SeparatorConfig, SeparatorModel};
use noisy_sep::signals::{generate_item, AudioSignal, DatasetConfig, MixtureItem};
use noisy_sep::trainer::{loss_and_grads, train_items, TrainConfig, BEST, LATEST, LOG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeds for data, initialization and training in the overfit run.
const PINNED_SEEDS: [u64; 1] = [0];
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_ITEMS: usize = 8;
/// Chosen on a desk run; the default 1.5e-4 is tuned for corpus-scale data.
const OVERFIT_LR: f64 = 1e-3;

struct Ledger {
    failed: Vec<u32>,
}

impl Ledger {
    fn report(&mut self, n: u32, pass: bool, detail: String) {
        if !pass {
            self.failed.push(n);
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "criterion {n:>2}: {verdict}  {detail}");
    }
}

fn sig(v: Vec<f64>) -> AudioSignal {
    AudioSignal::new(v, 8000).unwrap()
}

fn noise_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gradients(l: &mut Ledger) {
    let t = Instant::now();
    let outcomes = gradcheck_suite(0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = outcomes.iter().map(|o| o.report.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.report.pass).map(|o| o.name.as_str()).collect();
    let below: usize = outcomes.iter().map(|o| o.report.below_resolution).sum();
    let kinks: usize = outcomes.iter().map(|o| o.report.kinks_skipped).sum();
    l.report(
        1,
        failing.is_empty() && worst <= TOLERANCE && secs < 120.0,
        format!(
            "{} checks, max rel err {worst:.2e} (tol {TOLERANCE:e}), {kinks} kink stencils skipped, \
             {below} sub-floor coords held to the floor, {secs:.1} s; failing: {failing:?}",
            outcomes.len()
        ),
    );
}

/// Exhaustive search written independently of the library's enumeration.
fn oracle(ests: &[AudioSignal], refs: &[AudioSignal], c: usize, clamp: f64) -> (f64, Vec<usize>) {
    fn rec(prefix: &mut Vec<usize>, c: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == c {
            out.push(prefix.clone());
            return;
        }
        for t in 0..c {
            if !prefix.contains(&t) {
                prefix.push(t);
                rec(prefix, c, out);
                prefix.pop();
            }
        }
    }
    let mut perms = Vec::new();
    rec(&mut Vec::new(), c, &mut perms);
    let g = ests.len() as f64;
    let term = |s: f64| (-s).max(clamp);
    let noise = if ests.len() > c { term(si_snr(&ests[c], &refs[c]).unwrap()) } else { 0.0 };
    let mut best = (f64::INFINITY, Vec::new());
    for p in perms {
        let sum: f64 = p.iter().enumerate().map(|(k, &t)| term(si_snr(&ests[k], &refs[t]).unwrap())).sum::<f64>() + noise;
        if sum / g < best.0 {
            best = (sum / g, p);
        }
    }
    best
}

fn upit(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut total = 0;
    for c in [2usize, 3] {
        for i in 0..200 {
            let with_noise = i % 2 == 0;
            let g = c + usize::from(with_noise);
            let refs: Vec<AudioSignal> = (0..g).map(|_| sig(noise_vec(&mut rng, 64))).collect();
            // estimates are noisy, shuffled copies so the optimum is not trivial
            let ests: Vec<AudioSignal> = (0..g)
                .map(|k| {
                    let src = if k < c { rng.gen_range(0..c) } else { c };
                    let a: f64 = rng.gen_range(0.1..2.0);
                    sig(refs[src].samples().iter().map(|v| v + a * rng.sample::<f64, _>(StandardNormal)).collect())
                })
                .collect();
            let got = upit_si_snr_loss(&ests, &refs, with_noise, DEFAULT_CLAMP_DB).unwrap();
            let (loss, perm) = oracle(&ests, &refs, c, DEFAULT_CLAMP_DB);
            total += 1;
            if got.loss != loss || got.permutation != perm {
                mismatches += 1;
            }
        }
    }
    l.report(2, mismatches == 0, format!("{total} instances (200 each for C=2, C=3), {mismatches} differ from exhaustive search"));
}

fn scale_invariance(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_si: f64 = 0.0;
    let mut sdr_invariant = 0;
    for _ in 0..100 {
        let r = sig(noise_vec(&mut rng, 256));
        let e = sig(r.samples().iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect());
        let base = si_snr(&e, &r).unwrap();
        let base_sdr = sdr(&e, &r).unwrap();
        for alpha in [0.1, 1.0, 10.0] {
            let scaled = e.scaled(alpha);
            worst_si = worst_si.max((si_snr(&scaled, &r).unwrap() - base).abs());
            if alpha != 1.0 && (sdr(&scaled, &r).unwrap() - base_sdr).abs() < 1e-3 {
                sdr_invariant += 1;
            }
        }
    }
    l.report(
        3,
        worst_si < 1e-6 && sdr_invariant == 0,
        format!("max SI-SNR drift {worst_si:.2e} dB over 100 pairs x 3 gains; plain SDR unchanged on {sdr_invariant}/200 rescaled pairs"),
    );
}

fn contrastive_closed_forms(l: &mut Ledger) {
    let unit = |i: usize| {
        let mut v = vec![0.0; 8];
        v[i] = 1.0;
        v
    };
    let set = |m: usize, negative: Vec<f64>| PatchSet {
        queries: vec![unit(0); m],
        positives: vec![unit(0); m],
        negatives: vec![negative; m],
        query_frames: vec![0; m],
        negative_frames: vec![(0, 0); m],
    };
    let e256 = (pcl_loss(&set(256, unit(0)), 0.07).unwrap() - 257f64.ln()).abs();
    let e1 = (pcl_loss(&set(1, unit(0)), 0.07).unwrap() - 2f64.ln()).abs();
    let mut anti = unit(0);
    anti[0] = -1.0;
    let sat = pcl_loss(&set(256, anti), 0.07).unwrap();
    l.report(
        4,
        e256 < 1e-6 && e1 < 1e-9 && sat < 1e-10,
        format!("|loss - ln 257| = {e256:.1e}, |loss - ln 2| = {e1:.1e}, saturated margin loss = {sat:.1e}"),
    );
}

fn chunk_round_trip(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let cases = 500;
    for _ in 0..cases {
        let n = rng.gen_range(1..6);
        let len = rng.gen_range(1..400);
        let k = 2 * rng.gen_range(1..40);
        let h = Repr::new(n, len, noise_vec(&mut rng, n * len)).unwrap();
        let back = overlap_add(&chunk(&h, k).unwrap()).unwrap();
        let err = h.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    l.report(5, worst <= 1e-12, format!("{cases} sampled (N, L, K), max abs error {worst:.1e}"));
}

fn overfit_config(seed: u64, dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: OVERFIT_STEPS / OVERFIT_ITEMS,
        lr0: OVERFIT_LR,
        seed,
        checkpoint_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    };
    cfg.model = SeparatorConfig {
        n_filters: 64,
        chunk_size: 50,
        blocks: 2,
        num_speakers: 2,
        noise_speaker: true,
        ..cfg.model
    };
    cfg.objective.pcl.lambda = 2.0;
    cfg.objective.pcl.m = 256;
    cfg.objective.pcl.tau = 0.07;
    cfg
}

struct Run {
    log: Vec<u8>,
    latest: Vec<u8>,
    best: Vec<u8>,
}

impl Run {
    fn read(dir: &Path) -> Run {
        Run {
            log: fs::read(dir.join(LOG)).unwrap(),
            latest: fs::read(dir.join(LATEST)).unwrap(),
            best: fs::read(dir.join(BEST)).unwrap(),
        }
    }
}

fn overfit(l: &mut Ledger) {
    let root = tempfile::tempdir().unwrap();
    // both runs use the same directory so the paths in the headers agree
    let dir = root.path().join("run");
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    for &seed in &PINNED_SEEDS {
        let data = DatasetConfig {
            items: OVERFIT_ITEMS,
            duration_s: 1.0,
            seed,
            ..DatasetConfig::default()
        };
        let items: Vec<MixtureItem> = (0..OVERFIT_ITEMS).map(|i| generate_item(&data, i).unwrap()).collect();
        let cfg = overfit_config(seed, &dir);

        let t = Instant::now();
        let (mut model, outcome) = train_items(&cfg, &items, &[], false).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let steps = outcome.state.step as usize;
        let first = Run::read(&dir);
        fs::remove_dir_all(&dir).unwrap();

        let named: Vec<(String, MixtureItem)> = items.iter().enumerate().map(|(i, it)| (i.to_string(), it.clone())).collect();
        let report = evaluate_items(&model, &named).unwrap();
        let si = report.mean_si_snri();
        let noise = report.mean_noise_si_snr().unwrap();
        l.report(
            6,
            si >= 8.0 && steps <= OVERFIT_STEPS && secs < 900.0,
            format!("seed {seed}: training-set SI-SNRi {si:.2} dB after {steps} steps in {secs:.0} s on {cores} core(s)"),
        );
        l.report(7, noise >= 0.0, format!("seed {seed}: noise-output SI-SNR {noise:.2} dB on the training set"));

        // the trainer refuses any step whose contrastive alignment differs, so
        // a complete log means every step held; recheck on the final weights
        let logged = String::from_utf8_lossy(&first.log).lines().skip(1).count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = items.iter().all(|it| {
            let (r, _) = loss_and_grads(&mut model, it, &cfg, &mut rng).unwrap();
            r.permutation == r.pcl_permutation
        });
        l.report(
            8,
            shared && logged == steps,
            format!(
                "seed {seed}: alignment asserted on {logged}/{steps} logged steps; final-weight recheck {}",
                if shared { "agrees" } else { "DIFFERS" }
            ),
        );

        train_items(&cfg, &items, &[], false).unwrap();
        let second = Run::read(&dir);
        fs::remove_dir_all(&dir).unwrap();
        let identical = first.log == second.log && first.latest == second.latest && first.best == second.best;
        l.report(
            9,
            identical,
            format!(
                "seed {seed}: rerun log {} B, latest {} B, best {} B, {}",
                second.log.len(),
                second.latest.len(),
                second.best.len(),
                if identical { "bit-identical" } else { "DIFFERENT" }
            ),
        );
    }
}

fn parameter_delta(l: &mut Ledger) {
    let out = Command::new(env!("CARGO_BIN_EXE_noisy-sep")).arg("params").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let field = |prefix: &str| -> usize {
        text.lines()
            .find_map(|l| l.strip_prefix(prefix))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .unwrap()
    };
    let off = field("without noise output: ");
    let on = field("with noise output: ");
    let cfg = SeparatorConfig::default();
    let lib_off = SeparatorModel::new(SeparatorConfig { noise_speaker: false, ..cfg.clone() }, 0).unwrap().num_params();
    let pct = 100.0 * (on - off) as f64 / off as f64;
    l.report(
        10,
        out.status.success() && lib_off == off && on > off && pct < 2.0,
        format!("CLI params: {off} -> {on} (+{}, {pct:.3}%), head widening N*N+N = {}", on - off, cfg.n_filters * cfg.n_filters + cfg.n_filters),
    );
}

#[test]
fn acceptance_criteria() {
    let mut l = Ledger { failed: Vec::new() };
    gradients(&mut l);
    upit(&mut l);
    scale_invariance(&mut l);
    contrastive_closed_forms(&mut l);
    chunk_round_trip(&mut l);
    overfit(&mut l);
    parameter_delta(&mut l);
    assert!(l.failed.is_empty(), "failed criteria: {:?}", l.failed);
}
