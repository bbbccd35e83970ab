//! Trainable encoder, dual-path masking network, decoder and patch projection head.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BlockKind, SeparatorConfig};
use crate::autodiff::{Checkpoint, Graph, ParamId, Params, Tensor, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct GruDir {
    input: Linear,
    w_hh: ParamId,
    b_hh: ParamId,
}

#[derive(Debug, Clone)]
enum PathModel {
    Recurrent { fwd: GruDir, bwd: GruDir, out: Linear },
    Attention { q: Linear, k: Linear, v: Linear, out: Linear },
}

#[derive(Debug, Clone)]
struct PathBlock {
    model: PathModel,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct DualPathBlock {
    intra: PathBlock,
    inter: PathBlock,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_w: ParamId,
    enc_b: ParamId,
    in_norm: Norm,
    in_linear: Linear,
    blocks: Vec<DualPathBlock>,
    prelu: ParamId,
    head: Linear,
    mlp1: Linear,
    mlp2: Linear,
    dec_w: ParamId,
    dec_b: ParamId,
    proj1: Linear,
    proj2: Linear,
}

struct Builder {
    params: Params,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape, data).expect("valid parameter shape"))
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.params.add(name, Tensor::new(shape, vec![v; n]).expect("valid parameter shape"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.uniform(&format!("{name}.w"), &[fan_out, fan_in], bound),
            b: self.uniform(&format!("{name}.b"), &[fan_out], bound),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.fill(&format!("{name}.g"), &[width], 1.0),
            b: self.fill(&format!("{name}.b"), &[width], 0.0),
        }
    }

    fn gru(&mut self, name: &str, input: usize, hidden: usize) -> GruDir {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruDir {
            input: Linear {
                w: self.uniform(&format!("{name}.w_ih"), &[3 * hidden, input], bound),
                b: self.uniform(&format!("{name}.b_ih"), &[3 * hidden], bound),
            },
            w_hh: self.uniform(&format!("{name}.w_hh"), &[3 * hidden, hidden], bound),
            b_hh: self.uniform(&format!("{name}.b_hh"), &[3 * hidden], bound),
        }
    }

    fn path(&mut self, name: &str, cfg: &SeparatorConfig) -> PathBlock {
        let (n, h) = (cfg.n_filters, cfg.hidden);
        let model = match cfg.block_kind {
            BlockKind::Recurrent => PathModel::Recurrent {
                fwd: self.gru(&format!("{name}.fwd"), n, h),
                bwd: self.gru(&format!("{name}.bwd"), n, h),
                out: self.linear(&format!("{name}.out"), 2 * h, n),
            },
            BlockKind::Attention => PathModel::Attention {
                q: self.linear(&format!("{name}.q"), n, h),
                k: self.linear(&format!("{name}.k"), n, h),
                v: self.linear(&format!("{name}.v"), n, h),
                out: self.linear(&format!("{name}.out"), h, n),
            },
        };
        PathBlock {
            model,
            norm: self.norm(&format!("{name}.norm"), n),
        }
    }
}

/// All trainable parameters plus the architecture they instantiate.
#[derive(Debug, Clone)]
pub struct SeparatorModel {
    config: SeparatorConfig,
    pub params: Params,
    layout: Layout,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Encoded mixture `[N, L]`.
    pub mixture_repr: Var,
    /// One `[N, L]` mask per source (speakers first, noise last).
    pub masks: Vec<Var>,
    /// Masked representations `[N, L]`.
    pub reprs: Vec<Var>,
    /// Separated waveforms `[T]`, trimmed to the input length.
    pub outputs: Vec<Var>,
}

impl SeparatorModel {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Params::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (n, k, g, q) = (config.n_filters, config.kernel, config.num_sources(), config.embed_dim);
        let enc_bound = 1.0 / (k as f64).sqrt();
        let enc_w = b.uniform("encoder.w", &[n, 1, k], enc_bound);
        let enc_b = b.fill("encoder.b", &[n], 0.0);
        let in_norm = b.norm("mask.norm", n);
        let in_linear = b.linear("mask.in", n, n);
        let blocks = (0..config.blocks)
            .map(|i| DualPathBlock {
                intra: b.path(&format!("block{i}.intra"), &config),
                inter: b.path(&format!("block{i}.inter"), &config),
            })
            .collect();
        let prelu = b.fill("mask.prelu", &[1], 0.25);
        let head = b.linear("mask.head", n, g * n);
        let mlp1 = b.linear("mask.mlp1", n, n);
        let mlp2 = b.linear("mask.mlp2", n, n);
        let dec_bound = 1.0 / ((n * k) as f64).sqrt();
        let dec_w = b.uniform("decoder.w", &[n, 1, k], dec_bound);
        let dec_b = b.fill("decoder.b", &[1], 0.0);
        let proj1 = b.linear("proj.l1", n, q);
        let proj2 = b.linear("proj.l2", q, q);
        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                enc_w,
                enc_b,
                in_norm,
                in_linear,
                blocks,
                prelu,
                head,
                mlp1,
                mlp2,
                dec_w,
                dec_b,
                proj1,
                proj2,
            },
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.count()
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Result<Var> {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let (w, b) = (self.p(g, l.w)?, self.p(g, l.b)?);
        g.affine(x, w, Some(b))
    }

    /// Linear map over the last axis of any-rank `x`.
    fn linear_last(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let width = *shape.last().unwrap();
        let rows = g.value(x).len() / width;
        let flat = g.reshape(x, &[rows, width])?;
        let y = self.linear(g, flat, l)?;
        let out = g.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out;
        g.reshape(y, &out_shape)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let (gain, shift) = (self.p(g, n.g)?, self.p(g, n.b)?);
        g.layer_norm(x, gain, shift, NORM_EPS)
    }

    /// x `[1, T]` -> `[N, L]`, rectified.
    pub fn encode_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (self.p(g, self.layout.enc_w)?, self.p(g, self.layout.enc_b)?);
        let h = g.conv1d(x, w, Some(b), self.config.stride)?;
        g.relu(h)
    }

    /// h `[N, L]` -> `[(L-1)·stride + kernel]`.
    pub fn decode_var(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let n = self.config.n_filters;
        if g.shape(h).len() != 2 || g.shape(h)[0] != n {
            return Err(Error::shape(
                "decode",
                format!("representation {:?} does not have {n} filters", g.shape(h)),
            ));
        }
        let (w, b) = (self.p(g, self.layout.dec_w)?, self.p(g, self.layout.dec_b)?);
        let y = g.conv1d_transpose(h, w, Some(b), self.config.stride)?;
        let t = g.shape(y)[1];
        g.reshape(y, &[t])
    }

    fn gru_dir(&self, g: &mut Graph, x: Var, dir: &GruDir, reverse: bool) -> Result<Var> {
        let gx = self.linear_last(g, x, &dir.input)?;
        let gx = if reverse { g.flip(gx)? } else { gx };
        let (w, b) = (self.p(g, dir.w_hh)?, self.p(g, dir.b_hh)?);
        let h = g.gru(gx, w, b)?;
        if reverse {
            g.flip(h)
        } else {
            Ok(h)
        }
    }

    /// Sequence model over axis 0 of x `[T, B, N]` with residual and norm.
    fn path(&self, g: &mut Graph, x: Var, block: &PathBlock) -> Result<Var> {
        let y = match &block.model {
            PathModel::Recurrent { fwd, bwd, out } => {
                let f = self.gru_dir(g, x, fwd, false)?;
                let r = self.gru_dir(g, x, bwd, true)?;
                let both = g.concat(&[f, r], 2)?;
                self.linear_last(g, both, out)?
            }
            PathModel::Attention { q, k, v, out } => {
                let s = g.shape(x).to_vec();
                let pe = g.constant(&s, positional_encoding(s[0], s[1], s[2]))?;
                let xp = g.add(x, pe)?;
                let xb = g.transpose(xp, &[1, 0, 2])?;
                let (qv, kv, vv) = (
                    self.linear_last(g, xb, q)?,
                    self.linear_last(g, xb, k)?,
                    self.linear_last(g, xb, v)?,
                );
                let a = g.attention(qv, kv, vv)?;
                let o = self.linear_last(g, a, out)?;
                g.transpose(o, &[1, 0, 2])?
            }
        };
        let res = g.add(x, y)?;
        self.norm(g, res, &block.norm)
    }

    /// h `[N, L]` -> G masks `[N, L]`, all nonnegative.
    pub fn masking_net_var(&self, g: &mut Graph, h: Var) -> Result<Vec<Var>> {
        let (n, gs) = (self.config.n_filters, self.config.num_sources());
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::shape("masking_net", format!("input {shape:?} does not have {n} filters")));
        }
        let l = shape[1];
        let x = g.transpose(h, &[1, 0])?;
        let x = self.norm(g, x, &self.layout.in_norm)?;
        let x = self.linear(g, x, &self.layout.in_linear)?;
        let x = g.transpose(x, &[1, 0])?;
        let chunks = g.chunk(x, self.config.chunk_size)?; // [N, K, S]
        let mut x = g.transpose(chunks, &[1, 2, 0])?; // [K, S, N]
        for block in &self.layout.blocks {
            x = self.path(g, x, &block.intra)?;
            let xt = g.transpose(x, &[1, 0, 2])?; // [S, K, N]
            let xt = self.path(g, xt, &block.inter)?;
            x = g.transpose(xt, &[1, 0, 2])?;
        }
        let alpha = self.p(g, self.layout.prelu)?;
        let x = g.prelu(x, alpha)?;
        let x = self.linear_last(g, x, &self.layout.head)?; // [K, S, G·N]
        let x = g.transpose(x, &[2, 0, 1])?; // [G·N, K, S]
        let x = g.overlap_add(x, l)?; // [G·N, L]
        let x = g.transpose(x, &[1, 0])?; // [L, G·N]
        let x = g.reshape(x, &[l * gs, n])?;
        let x = self.linear(g, x, &self.layout.mlp1)?;
        let x = g.relu(x)?;
        let x = self.linear(g, x, &self.layout.mlp2)?;
        let x = g.relu(x)?;
        let x = g.reshape(x, &[l, gs, n])?;
        let x = g.transpose(x, &[1, 2, 0])?; // [G, N, L]
        (0..gs)
            .map(|k| {
                let m = g.slice(x, 0, k, 1)?;
                g.reshape(m, &[n, l])
            })
            .collect()
    }

    /// Full pipeline on a `[T]` waveform node.
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let t = g.value(x).len();
        if t < self.config.kernel {
            return Err(Error::shape(
                "separate",
                format!("signal of {t} samples is shorter than the kernel {}", self.config.kernel),
            ));
        }
        let x2 = g.reshape(x, &[1, t])?;
        let mixture_repr = self.encode_var(g, x2)?;
        let masks = self.masking_net_var(g, mixture_repr)?;
        let mut reprs = Vec::with_capacity(masks.len());
        let mut outputs = Vec::with_capacity(masks.len());
        for &m in &masks {
            let h = g.mul(m, mixture_repr)?;
            let y = self.decode_var(g, h)?;
            reprs.push(h);
            outputs.push(fit_length(g, y, t)?);
        }
        Ok(ForwardVars {
            mixture_repr,
            masks,
            reprs,
            outputs,
        })
    }

    /// Projects frame vectors `[M, N]` onto the unit sphere in `Q` dimensions.
    pub fn project_var(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let h = self.linear(g, frames, &self.layout.proj1)?;
        let h = g.relu(h)?;
        let h = self.linear(g, h, &self.layout.proj2)?;
        g.l2_normalize(h, 1, 1e-12)
    }

    /// Parameter ids of the patch projection head.
    pub fn projection_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        vec![l.proj1.w, l.proj1.b, l.proj2.w, l.proj2.b]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.config.to_kv(),
            records: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = SeparatorConfig::from_kv(ck.header.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut model = Self::new(cfg, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = ck
                .record(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            let dst = model.params.get_mut(id);
            if t.shape() != dst.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

/// Tail-truncates or zero-pads a `[T']` node to `t` samples.
fn fit_length(g: &mut Graph, y: Var, t: usize) -> Result<Var> {
    let have = g.value(y).len();
    if have == t {
        Ok(y)
    } else if have > t {
        g.slice(y, 0, 0, t)
    } else {
        let pad = g.constant(&[t - have], vec![0.0; t - have])?;
        g.concat(&[y, pad], 0)
    }
}

/// Sinusoidal positions along axis 0 of a `[T, B, D]` tensor.
fn positional_encoding(t: usize, b: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * b * d);
    for pos in 0..t {
        let row: Vec<f64> = (0..d)
            .map(|i| {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = pos as f64 * freq;
                if i % 2 == 0 {
                    a.sin()
                } else {
                    (a + PI / 2.0).sin()
                }
            })
            .collect();
        for _ in 0..b {
            out.extend_from_slice(&row);
        }
    }
    out
}
