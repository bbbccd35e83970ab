//! Finite-difference gradient checks for every primitive and for the
//! composite objectives on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, Graph, ParamId, Params, Tensor, Var};
use crate::contrastive::{pcl_total_var, Direction, PclConfig};
use crate::error::Result;
use crate::objective::{total_loss_var, truth_reprs, ObjectiveConfig, Truth};
use crate::separator::{encode, SeparatorConfig, SeparatorModel};
use crate::signals::{generate_item, DatasetConfig, MixtureItem};

pub const TOLERANCE: f64 = 1e-4;
/// Step for single primitives, whose inputs are kept away from kinks.
pub const PRIMITIVE_STEP: f64 = 1e-4;
/// Step for whole-model checks: large enough to resolve the small recurrent
/// gradients, small enough to keep truncation error on the decoder bias (whose
/// gradient runs into the hundreds) well inside tolerance.
pub const MODEL_STEP: f64 = 1e-5;
/// Samples in the tiny-model checks.
pub const TINY_SAMPLES: usize = 160;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Normal samples pushed at least `gap` away from zero.
fn off_kink(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    normal(rng, n)
        .into_iter()
        .map(|v| if v.abs() < gap { gap.copysign(v) * 2.0 } else { v })
        .collect()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()
}

fn param(p: &mut Params, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
    p.add(name, Tensor::new(shape, data).expect("consistent check shape"))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn probe(g: &mut Graph, y: Var, w: &[f64]) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let wv = g.constant(&shape, w[..g.value(y).len()].to_vec())?;
    let prod = g.mul(y, wv)?;
    g.sum(prod)
}

type Build = Box<dyn Fn(&mut Graph, &Params, &[ParamId]) -> Result<Var>>;

fn primitive(name: &str, params: Params, build: Build, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let ids: Vec<ParamId> = params.ids().collect();
    let w = normal(rng, 4096);
    let report = grad_check(
        |g, p| {
            let y = build(g, p, &ids)?;
            probe(g, y, &w)
        },
        &params,
        PRIMITIVE_STEP,
        TOLERANCE,
    )?;
    Ok(CheckOutcome {
        name: name.to_string(),
        report,
    })
}

macro_rules! vars {
    ($g:ident, $p:ident, $ids:ident => $($v:ident),+) => {
        let mut _it = $ids.iter();
        $(let $v = $g.param($p, *_it.next().unwrap())?;)+
    };
}

/// One random instance of every differentiable primitive.
pub fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let two = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        let mut p = Params::new();
        param(&mut p, "a", shape, normal(rng, n));
        param(&mut p, "b", shape, normal(rng, n));
        p
    };
    let one = |rng: &mut ChaCha8Rng, shape: &[usize], data: &dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>| {
        let mut p = Params::new();
        param(&mut p, "x", shape, data(rng, shape.iter().product()));
        p
    };
    let nrm = |r: &mut ChaCha8Rng, n: usize| normal(r, n);

    let p = two(rng, &[3, 4]);
    out.push(primitive("add", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.add(a, b) }), rng)?);
    let p = two(rng, &[3, 4]);
    out.push(primitive("sub", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.sub(a, b) }), rng)?);
    let p = two(rng, &[3, 4]);
    out.push(primitive("mul", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.mul(a, b) }), rng)?);
    let p = one(rng, &[5], &nrm);
    out.push(primitive("scale", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.scale(a, -1.7) }), rng)?);
    let p = one(rng, &[5], &nrm);
    out.push(primitive("add_scalar", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.add_scalar(a, 0.3) }), rng)?);
    let mut p = one(rng, &[5], &nrm);
    param(&mut p, "s", &[1], vec![0.8]);
    out.push(primitive("scale_by", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, s); g.scale_by(a, s) }), rng)?);
    let p = one(rng, &[6], &nrm);
    out.push(primitive("exp", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.exp(a) }), rng)?);
    let p = one(rng, &[6], &positive);
    out.push(primitive("log", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.log(a) }), rng)?);
    let gap = 10.0 * PRIMITIVE_STEP;
    let p = one(rng, &[8], &move |r: &mut ChaCha8Rng, n| off_kink(r, n, gap));
    out.push(primitive("relu", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.relu(a) }), rng)?);
    let mut p = one(rng, &[8], &move |r: &mut ChaCha8Rng, n| off_kink(r, n, gap));
    param(&mut p, "alpha", &[1], vec![0.25]);
    out.push(primitive("prelu", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, s); g.prelu(a, s) }), rng)?);
    let p = one(rng, &[6], &nrm);
    out.push(primitive("sigmoid", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.sigmoid(a) }), rng)?);
    let p = one(rng, &[6], &nrm);
    out.push(primitive("tanh", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.tanh(a) }), rng)?);
    let p = one(rng, &[8], &move |r: &mut ChaCha8Rng, n| off_kink(r, n, gap));
    out.push(primitive("clamp_min", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.clamp_min(a, 0.0) }), rng)?);
    let p = one(rng, &[3, 4], &nrm);
    out.push(primitive("sum", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.sum(a) }), rng)?);
    let p = one(rng, &[3, 4], &nrm);
    out.push(primitive("mean", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.mean(a) }), rng)?);
    let p = one(rng, &[3, 4], &nrm);
    out.push(primitive("sum_last", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.sum_last(a) }), rng)?);
    let p = one(rng, &[3, 5], &nrm);
    out.push(primitive("logsumexp_last", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.logsumexp_last(a) }), rng)?);

    let mut p = Params::new();
    param(&mut p, "a", &[3, 4], normal(rng, 12));
    param(&mut p, "b", &[4, 2], normal(rng, 8));
    out.push(primitive("matmul", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.matmul(a, b, false) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "a", &[3, 4], normal(rng, 12));
    param(&mut p, "b", &[5, 4], normal(rng, 20));
    out.push(primitive("matmul_t", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.matmul(a, b, true) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "x", &[4, 3], normal(rng, 12));
    param(&mut p, "w", &[5, 3], normal(rng, 15));
    param(&mut p, "b", &[5], normal(rng, 5));
    out.push(primitive("affine", p, Box::new(|g, p, ids| { vars!(g, p, ids => x, w, b); g.affine(x, w, Some(b)) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "x", &[2, 20], normal(rng, 40));
    param(&mut p, "w", &[3, 2, 4], normal(rng, 24));
    param(&mut p, "b", &[3], normal(rng, 3));
    out.push(primitive("conv1d", p, Box::new(|g, p, ids| { vars!(g, p, ids => x, w, b); g.conv1d(x, w, Some(b), 2) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "x", &[3, 6], normal(rng, 18));
    param(&mut p, "w", &[3, 2, 4], normal(rng, 24));
    param(&mut p, "b", &[2], normal(rng, 2));
    out.push(primitive(
        "conv1d_transpose",
        p,
        Box::new(|g, p, ids| { vars!(g, p, ids => x, w, b); g.conv1d_transpose(x, w, Some(b), 2) }),
        rng,
    )?);
    let mut p = Params::new();
    param(&mut p, "x", &[3, 5], normal(rng, 15));
    param(&mut p, "g", &[5], normal(rng, 5));
    param(&mut p, "b", &[5], normal(rng, 5));
    out.push(primitive("layer_norm", p, Box::new(|g, p, ids| { vars!(g, p, ids => x, gn, b); g.layer_norm(x, gn, b, 1e-8) }), rng)?);
    let p = one(rng, &[3, 4], &nrm);
    out.push(primitive("l2_normalize", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.l2_normalize(a, 1, 1e-12) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "a", &[2, 3, 2], normal(rng, 12));
    param(&mut p, "b", &[2, 1, 2], normal(rng, 4));
    out.push(primitive("concat", p, Box::new(|g, p, ids| { vars!(g, p, ids => a, b); g.concat(&[a, b], 1) }), rng)?);
    let p = one(rng, &[3, 5, 2], &nrm);
    out.push(primitive("slice", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.slice(a, 1, 1, 3) }), rng)?);
    let p = one(rng, &[3, 4], &nrm);
    out.push(primitive("reshape", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.reshape(a, &[2, 6]) }), rng)?);
    let p = one(rng, &[2, 3, 4], &nrm);
    out.push(primitive("transpose", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.transpose(a, &[2, 0, 1]) }), rng)?);
    let p = one(rng, &[4, 3], &nrm);
    out.push(primitive("flip", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.flip(a) }), rng)?);
    let p = one(rng, &[4, 3], &nrm);
    out.push(primitive("gather_rows", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.gather_rows(a, &[2, 0, 2, 3]) }), rng)?);
    let p = one(rng, &[2, 7], &nrm);
    out.push(primitive("chunk", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.chunk(a, 4) }), rng)?);
    let p = one(rng, &[2, 4, 3], &nrm);
    out.push(primitive("overlap_add", p, Box::new(|g, p, ids| { vars!(g, p, ids => a); g.overlap_add(a, 7) }), rng)?);
    let mut p = Params::new();
    param(&mut p, "gx", &[5, 2, 9], normal(rng, 90));
    param(&mut p, "w", &[9, 3], normal(rng, 27).into_iter().map(|v| v * 0.5).collect());
    param(&mut p, "b", &[9], normal(rng, 9));
    out.push(primitive("gru", p, Box::new(|g, p, ids| { vars!(g, p, ids => gx, w, b); g.gru(gx, w, b) }), rng)?);
    let mut p = Params::new();
    for n in ["q", "k", "v"] {
        param(&mut p, n, &[2, 4, 3], normal(rng, 24));
    }
    out.push(primitive("attention", p, Box::new(|g, p, ids| { vars!(g, p, ids => q, k, v); g.attention(q, k, v) }), rng)?);
    Ok(out)
}

/// Tiny configuration used by the composite checks.
pub fn tiny_model(seed: u64) -> Result<SeparatorModel> {
    SeparatorModel::new(SeparatorConfig::tiny(), seed)
}

pub fn tiny_objective() -> ObjectiveConfig {
    ObjectiveConfig {
        clamp_db: -30.0,
        pcl: PclConfig {
            m: 4,
            q: SeparatorConfig::tiny().embed_dim,
            direction: Direction::Both,
            ..PclConfig::default()
        },
    }
}

pub fn tiny_item(seed: u64) -> Result<MixtureItem> {
    let cfg = DatasetConfig {
        items: 1,
        duration_s: TINY_SAMPLES as f64 / 8000.0,
        seed,
        ..DatasetConfig::default()
    };
    generate_item(&cfg, 0)
}

fn composite(
    name: &str,
    step: f64,
    model: &SeparatorModel,
    mut build: impl FnMut(&mut Graph, &SeparatorModel) -> Result<Var>,
) -> Result<CheckOutcome> {
    let mut probe_model = model.clone();
    let report = grad_check(
        |g, p| {
            probe_model.params = p.clone();
            build(g, &probe_model)
        },
        &model.params,
        step,
        TOLERANCE,
    )?;
    Ok(CheckOutcome {
        name: name.to_string(),
        report,
    })
}

/// Masking network, separator, SI-SNR, contrastive and total objectives on
/// the tiny model, checked against every parameter.
pub fn model_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    model_checks_with_step(seed, MODEL_STEP)
}

pub fn model_checks_with_step(seed: u64, step: f64) -> Result<Vec<CheckOutcome>> {
    let model = tiny_model(seed)?;
    let item = tiny_item(seed)?;
    let obj = tiny_objective();
    let mix = item.mixture.samples().to_vec();
    let t = mix.len();
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = normal(&mut wrng, 3 * 8 * 32);
    let fixed = Truth {
        speakers: &item.speakers,
        noise: &item.noise,
        reprs: None,
    };
    // encoder outputs on the stems are constants of the objective
    let reprs = truth_reprs(&model, &fixed)?;
    let truth = Truth {
        reprs: Some(&reprs),
        ..fixed
    };
    let h_mix = encode(&model, &item.mixture)?;
    let mut out = Vec::new();

    out.push(composite("masking_net", step, &model, |g, m| {
        let h = g.constant(&[h_mix.filters(), h_mix.frames()], h_mix.values().to_vec())?;
        let masks = m.masking_net_var(g, h)?;
        let all = g.concat(&masks, 0)?;
        probe(g, all, &w)
    })?);

    out.push(composite("separator", step, &model, |g, m| {
        let x = g.constant(&[t], mix.clone())?;
        let fw = m.forward_var(g, x)?;
        let all = g.concat(&fw.outputs, 0)?;
        probe(g, all, &w.repeat(t))
    })?);

    let no_pcl = ObjectiveConfig {
        pcl: PclConfig { lambda: 0.0, ..obj.pcl.clone() },
        ..obj.clone()
    };
    out.push(composite("si_snr_upit", step, &model, |g, m| {
        let x = g.constant(&[t], mix.clone())?;
        let fw = m.forward_var(g, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(total_loss_var(g, m, &fw, &truth, &no_pcl, &mut rng)?.0)
    })?);

    out.push(composite("contrastive", step, &model, |g, m| {
        let x = g.constant(&[t], mix.clone())?;
        let fw = m.forward_var(g, x)?;
        let truth_reprs = reprs
            .iter()
            .map(|r| g.constant(&[r.filters(), r.frames()], r.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm: Vec<usize> = (0..item.speakers.len()).collect();
        Ok(pcl_total_var(g, m, &fw.reprs, &truth_reprs, &perm, &obj.pcl, &mut rng)?.0)
    })?);

    out.push(composite("total", step, &model, |g, m| {
        let x = g.constant(&[t], mix.clone())?;
        let fw = m.forward_var(g, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(total_loss_var(g, m, &fw, &truth, &obj, &mut rng)?.0)
    })?);
    Ok(out)
}

/// Full suite: one instance of each primitive plus the model checks.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitive_checks(&mut rng)?;
    out.extend(model_checks(seed)?);
    Ok(out)
}
