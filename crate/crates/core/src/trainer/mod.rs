//! Seeded training loop: Adam, global gradient clipping, plateau-based
//! learning-rate halving, checkpoints and resumption.
//!
//! All randomness is derived from the configured seed: the item order of an
//! epoch from `(seed, epoch)`, segment crops and patch sampling from
//! `(seed, step)`, and validation patch sampling from `(seed, item)`. A run
//! resumed from a checkpoint therefore replays exactly what an uninterrupted
//! run would have done.

mod config;
mod optim;

pub use config::TrainConfig;
pub use optim::{clip_gradients, global_norm, optimizer_step, AdamState, ADAM_EPS, BETA1, BETA2};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Checkpoint, Graph, Tensor};
use crate::error::{Error, Result};
use crate::objective::{total_loss_var, LossReport, Truth};
use crate::separator::SeparatorModel;
use crate::signals::{DatasetManifest, MixtureItem};

pub const LOG_HEADER: &str = "step,epoch,lr,total,si_snr,pcl";
pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";
pub const LOG: &str = "train_log.csv";

const ORDER_DOMAIN: u64 = 0x6f72_6465_7273_6565;
const VALID_DOMAIN: u64 = 0x7661_6c69_6473_6565;

fn stream_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(stream);
    rng
}

/// Mutable progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer updates taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    /// Consecutive scheduled epochs without improvement.
    pub bad_epochs: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: &SeparatorModel, lr: f64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            lr,
            best_val: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
            adam: AdamState::new(&model.params),
        }
    }
}

/// Records validation loss `val` for epoch `state.epoch` and halves the
/// learning rate after `patience` scheduled epochs without strict improvement.
/// Epochs before `halving_start_epoch` only update the best value.
pub fn lr_schedule_update(state: &mut TrainState, val: f64, cfg: &TrainConfig) -> f64 {
    if val < state.best_val {
        state.best_val = val;
        state.best_epoch = Some(state.epoch);
        state.bad_epochs = 0;
    } else if state.epoch >= cfg.halving_start_epoch {
        state.bad_epochs += 1;
        if state.bad_epochs >= cfg.patience {
            state.lr /= 2.0;
            state.bad_epochs = 0;
        }
    }
    state.lr
}

/// What one optimizer update saw.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

/// Forward, loss and gradients for one example; parameters are untouched.
pub fn loss_and_grads(
    model: &mut SeparatorModel,
    item: &MixtureItem,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let x = g.constant(&[item.mixture.len()], item.mixture.samples().to_vec())?;
    let fw = model.forward_var(&mut g, x)?;
    let truth = Truth {
        speakers: &item.speakers,
        noise: &item.noise,
        reprs: None,
    };
    let (loss, report) = total_loss_var(&mut g, model, &fw, &truth, &cfg.objective, rng)?;
    if report.permutation != report.pcl_permutation {
        return Err(Error::Contract(format!(
            "contrastive alignment {:?} differs from the SI-SNR permutation {:?}",
            report.pcl_permutation, report.permutation
        )));
    }
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    g.accumulate(&grads, &mut model.params);
    let out = model.params.grads();
    model.params.zero_grad();
    Ok((report, out))
}

/// Loss of one example without gradients.
pub fn loss_only(model: &SeparatorModel, item: &MixtureItem, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<LossReport> {
    let mut g = Graph::new();
    let x = g.constant(&[item.mixture.len()], item.mixture.samples().to_vec())?;
    let fw = model.forward_var(&mut g, x)?;
    let truth = Truth {
        speakers: &item.speakers,
        noise: &item.noise,
        reprs: None,
    };
    Ok(total_loss_var(&mut g, model, &fw, &truth, &cfg.objective, rng)?.1)
}

/// One clipped Adam update on `item`.
pub fn train_step(
    model: &mut SeparatorModel,
    state: &mut TrainState,
    item: &MixtureItem,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let (loss, mut grads) = loss_and_grads(model, item, cfg, rng)?;
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    let applied_norm = global_norm(&grads);
    optimizer_step(&mut state.adam, &mut model.params, &grads, state.lr)?;
    state.step += 1;
    Ok(StepReport {
        loss,
        grad_norm,
        applied_norm,
    })
}

fn segment_len(cfg: &TrainConfig, item: &MixtureItem) -> usize {
    (cfg.segment_s * item.mixture.sample_rate() as f64).round() as usize
}

/// Random `segment_s` window of `item`, or the whole item if shorter.
pub fn crop(item: &MixtureItem, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<MixtureItem> {
    let seg = segment_len(cfg, item);
    let len = item.mixture.len();
    if len <= seg {
        return Ok(item.clone());
    }
    let start = rng.gen_range(0..=len - seg);
    item.segment(start, seg)
}

/// Mean total loss over `items`, each cropped to its leading segment.
pub fn validation_loss(model: &SeparatorModel, items: &[MixtureItem], cfg: &TrainConfig) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Param("validation set is empty".into()));
    }
    let losses = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let seg = segment_len(cfg, item).min(item.mixture.len());
            let item = item.segment(0, seg)?;
            let mut rng = stream_rng(cfg.seed, VALID_DOMAIN, i as u64);
            Ok(loss_only(model, &item, cfg, &mut rng)?.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ------------------------------------------------------------ checkpoints

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unbits(key: &str, s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Format(format!("bad {key} in checkpoint header")))
}

/// Serializes model, optimizer moments, progress and configuration.
pub fn training_checkpoint(model: &SeparatorModel, state: &TrainState, cfg: &TrainConfig) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    let known: Vec<String> = ck.header.iter().map(|(k, _)| k.clone()).collect();
    ck.header
        .extend(cfg.to_kv().into_iter().filter(|(k, _)| !known.contains(k)));
    ck.header.extend([
        ("state.step".to_string(), state.step.to_string()),
        ("state.epoch".to_string(), state.epoch.to_string()),
        ("state.lr".to_string(), bits(state.lr)),
        ("state.best_val".to_string(), bits(state.best_val)),
        (
            "state.best_epoch".to_string(),
            state.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        ),
        ("state.bad_epochs".to_string(), state.bad_epochs.to_string()),
        ("state.adam_t".to_string(), state.adam.t.to_string()),
    ]);
    for (i, (name, t)) in model.params.iter().enumerate() {
        let shape = t.shape().to_vec();
        for (tag, buf) in [("m", &state.adam.m[i]), ("v", &state.adam.v[i])] {
            let tensor = Tensor::new(&shape, buf.clone()).expect("moment matches parameter");
            ck.records.push((format!("adam.{tag}.{name}"), tensor));
        }
    }
    ck
}

/// Restores model and state written by [`training_checkpoint`].
pub fn restore_training(ck: &Checkpoint) -> Result<(SeparatorModel, TrainState)> {
    let model = SeparatorModel::from_checkpoint(ck)?;
    let get = |k: &str| {
        ck.header_value(k)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks {k}")))
    };
    let int = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad {k} in checkpoint header")))
    };
    let mut adam = AdamState::new(&model.params);
    adam.t = int("state.adam_t")?;
    for (i, (name, _)) in model.params.iter().enumerate() {
        for (tag, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let rec = ck
                .record(&format!("adam.{tag}.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer moment {tag} of {name}")))?;
            if rec.numel() != buf.len() {
                return Err(Error::Format(format!("optimizer moment {tag} of {name} has the wrong size")));
            }
            buf.copy_from_slice(rec.data());
        }
    }
    let best_epoch = match get("state.best_epoch")? {
        "none" => None,
        s => Some(
            s.parse()
                .map_err(|_| Error::Format("bad state.best_epoch in checkpoint header".into()))?,
        ),
    };
    let state = TrainState {
        step: int("state.step")?,
        epoch: int("state.epoch")? as usize,
        lr: unbits("state.lr", get("state.lr")?)?,
        best_val: unbits("state.best_val", get("state.best_val")?)?,
        best_epoch,
        bad_epochs: int("state.bad_epochs")? as usize,
        adam,
    };
    Ok((model, state))
}

// ------------------------------------------------------------ loop

/// Where a run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub latest: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
}

fn load_items(path: &Path) -> Result<Vec<MixtureItem>> {
    let m = DatasetManifest::load(path)?;
    (0..m.len()).map(|i| m.load_item(i)).collect()
}

/// Trains from the manifests named in `cfg`.
pub fn train(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is not set".into()))?;
    let train = load_items(train_path)?;
    let valid = match &cfg.valid_manifest {
        Some(p) => load_items(p)?,
        None => Vec::new(),
    };
    train_items(cfg, &train, &valid, resume).map(|(_, o)| o)
}

fn rewrite_log(path: &Path, keep_through: u64) -> Result<fs::File> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::from(LOG_HEADER);
    kept.push('\n');
    for line in text.lines().skip(1) {
        let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if step <= keep_through {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

/// Trains on in-memory items; validation falls back to the training items
/// when `valid` is empty. With `resume`, continues from `latest.ckpt` in the
/// checkpoint directory if present.
pub fn train_items(
    cfg: &TrainConfig,
    train: &[MixtureItem],
    valid: &[MixtureItem],
    resume: bool,
) -> Result<(SeparatorModel, TrainOutcome)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    if let Some(bad) = train.iter().chain(valid).find(|it| it.num_speakers() != cfg.model.num_speakers) {
        return Err(Error::Config(format!(
            "model separates {} speakers, data item has {}",
            cfg.model.num_speakers,
            bad.num_speakers()
        )));
    }
    let valid = if valid.is_empty() { train } else { valid };
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir)?;
    let latest = dir.join(LATEST);
    let best = dir.join(BEST);
    let log_path = dir.join(LOG);

    let (mut model, mut state) = if resume && latest.exists() {
        restore_training(&Checkpoint::load(&latest)?)?
    } else {
        let model = SeparatorModel::new(cfg.model.clone(), cfg.seed)?;
        let state = TrainState::new(&model, cfg.lr0);
        (model, state)
    };
    if state.step == 0 {
        fs::write(&log_path, format!("{LOG_HEADER}\n"))?;
        training_checkpoint(&model, &state, cfg).save(&latest)?;
    }
    let mut log = rewrite_log(&log_path, state.step)?;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, ORDER_DOMAIN, epoch as u64));
        for &idx in &order {
            let mut rng = stream_rng(cfg.seed, 0, state.step);
            let item = crop(&train[idx], cfg, &mut rng)?;
            let lr = state.lr;
            let r = train_step(&mut model, &mut state, &item, cfg, &mut rng)?;
            writeln!(
                log,
                "{},{},{},{},{},{}",
                state.step, epoch, lr, r.loss.total, r.loss.si_snr_term, r.loss.pcl_term
            )?;
        }
        let val = validation_loss(&model, valid, cfg)?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let improved = val < state.best_val;
        lr_schedule_update(&mut state, val, cfg);
        state.epoch += 1;
        let ck = training_checkpoint(&model, &state, cfg);
        ck.save(&latest)?;
        if improved {
            ck.save(&best)?;
        }
    }
    log.flush()?;
    if !best.exists() {
        training_checkpoint(&model, &state, cfg).save(&best)?;
    }
    Ok((
        model,
        TrainOutcome {
            state,
            latest,
            best,
            log: log_path,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(halving_start_epoch: usize) -> TrainConfig {
        TrainConfig {
            halving_start_epoch,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_rules() {
        let model = SeparatorModel::new(crate::separator::SeparatorConfig::tiny(), 0).unwrap();
        let cfg = sched(2);
        let mut s = TrainState::new(&model, 1.0);
        for (e, v) in [5.0, 4.0, 3.0, 2.0].into_iter().enumerate() {
            s.epoch = e;
            lr_schedule_update(&mut s, v, &cfg);
        }
        assert_eq!(s.lr, 1.0);

        let mut s = TrainState::new(&model, 1.0);
        let mut lrs = Vec::new();
        for e in 0..9 {
            s.epoch = e;
            lrs.push(lr_schedule_update(&mut s, 1.0, &cfg));
        }
        // best at epoch 0; plateau counted from epoch 2
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn state_round_trip() {
        let model = SeparatorModel::new(crate::separator::SeparatorConfig::tiny(), 4).unwrap();
        let mut state = TrainState::new(&model, 1.5e-4 / 3.0);
        state.step = 17;
        state.epoch = 3;
        state.best_val = -3.25;
        state.best_epoch = Some(2);
        state.bad_epochs = 1;
        state.adam.t = 17;
        state.adam.m[0][0] = 0.125;
        state.adam.v[1][0] = 1e-9;
        let ck = training_checkpoint(&model, &state, &TrainConfig::default());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (m2, s2) = restore_training(&back).unwrap();
        assert_eq!(s2, state);
        assert_eq!(m2.params.iter().count(), model.params.iter().count());
    }
}
