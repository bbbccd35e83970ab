//! Forward and backward kernels for the heavier primitives. Plain slices in,
//! plain vectors out; the graph owns bookkeeping.

use super::linalg::{gemm, matmul, Mat};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- conv1d

pub(crate) fn conv_out_len(t: usize, kernel: usize, stride: usize) -> usize {
    (t - kernel) / stride + 1
}

pub(crate) fn convt_out_len(l: usize, kernel: usize, stride: usize) -> usize {
    (l - 1) * stride + kernel
}

/// `cols[l, c*k + j] = x[c, l*stride + j]`
fn im2col(x: &[f64], chans: usize, t: usize, kernel: usize, stride: usize, frames: usize) -> Vec<f64> {
    let mut cols = vec![0.0; frames * chans * kernel];
    for l in 0..frames {
        let row = &mut cols[l * chans * kernel..(l + 1) * chans * kernel];
        for c in 0..chans {
            let src = &x[c * t + l * stride..c * t + l * stride + kernel];
            row[c * kernel..(c + 1) * kernel].copy_from_slice(src);
        }
    }
    cols
}

fn col2im_add(cols: &[f64], out: &mut [f64], chans: usize, t: usize, kernel: usize, stride: usize, frames: usize) {
    for l in 0..frames {
        let row = &cols[l * chans * kernel..(l + 1) * chans * kernel];
        for c in 0..chans {
            let dst = &mut out[c * t + l * stride..c * t + l * stride + kernel];
            dst.iter_mut().zip(&row[c * kernel..(c + 1) * kernel]).for_each(|(d, s)| *d += s);
        }
    }
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// x `[cin, t]`, w `[cout, cin, k]`, b `[cout]` -> `[cout, frames]`
pub(crate) fn conv1d_forward(x: &[f64], t: usize, w: &[f64], b: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let frames = conv_out_len(t, d.kernel, d.stride);
    let cols = im2col(x, d.cin, t, d.kernel, d.stride, frames);
    let mut out = vec![0.0; d.cout * frames];
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(frames).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        1.0,
        Mat::new(w, d.cout, d.cin * d.kernel),
        Mat::new(&cols, frames, d.cin * d.kernel).t(),
        beta,
        &mut out,
    );
    out
}

/// Returns (dx, dw, db).
pub(crate) fn conv1d_backward(
    dout: &[f64],
    x: &[f64],
    t: usize,
    w: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let frames = conv_out_len(t, d.kernel, d.stride);
    let ck = d.cin * d.kernel;
    let cols = im2col(x, d.cin, t, d.kernel, d.stride, frames);
    let dw = matmul(Mat::new(dout, d.cout, frames), Mat::new(&cols, frames, ck));
    let db = dout.chunks(frames).map(|r| r.iter().sum()).collect();
    let dcols = matmul(Mat::new(dout, d.cout, frames).t(), Mat::new(w, d.cout, ck));
    let mut dx = vec![0.0; d.cin * t];
    col2im_add(&dcols, &mut dx, d.cin, t, d.kernel, d.stride, frames);
    (dx, dw, db)
}

/// x `[cin, frames]`, w `[cin, cout, k]`, b `[cout]` -> `[cout, (frames-1)*stride + k]`
pub(crate) fn convt_forward(x: &[f64], frames: usize, w: &[f64], b: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let t = convt_out_len(frames, d.kernel, d.stride);
    let ck = d.cout * d.kernel;
    let cols = matmul(Mat::new(x, d.cin, frames).t(), Mat::new(w, d.cin, ck));
    let mut out = vec![0.0; d.cout * t];
    col2im_add(&cols, &mut out, d.cout, t, d.kernel, d.stride, frames);
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(t).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub(crate) fn convt_backward(
    dout: &[f64],
    x: &[f64],
    frames: usize,
    w: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = convt_out_len(frames, d.kernel, d.stride);
    let ck = d.cout * d.kernel;
    let dcols = im2col(dout, d.cout, t, d.kernel, d.stride, frames);
    let dx = matmul(Mat::new(w, d.cin, ck), Mat::new(&dcols, frames, ck).t());
    let dw = matmul(Mat::new(x, d.cin, frames), Mat::new(&dcols, frames, ck));
    let db = dout.chunks(t).map(|r| r.iter().sum()).collect();
    (dx, dw, db)
}

// ---------------------------------------------------------------- chunking

/// Geometry of 50%-overlapped chunking over `frames` with chunk size `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub frames: usize,
    pub k: usize,
    pub hop: usize,
    pub padded: usize,
    pub chunks: usize,
}

impl ChunkGeometry {
    pub fn new(frames: usize, k: usize) -> Self {
        let hop = k / 2;
        let padded = if frames <= k { k } else { k + (frames - k).div_ceil(hop) * hop };
        Self {
            frames,
            k,
            hop,
            padded,
            chunks: (padded - k) / hop + 1,
        }
    }

    pub fn pad(&self) -> usize {
        self.padded - self.frames
    }

    /// Number of chunks covering padded frame `l`.
    fn coverage(&self, l: usize) -> usize {
        (0..self.chunks)
            .filter(|s| l >= s * self.hop && l < s * self.hop + self.k)
            .count()
    }
}

/// x `[f, frames]` -> `[f, k, chunks]`
pub(crate) fn chunk_forward(x: &[f64], feats: usize, g: &ChunkGeometry) -> Vec<f64> {
    let (k, s_n) = (g.k, g.chunks);
    let mut out = vec![0.0; feats * k * s_n];
    for f in 0..feats {
        let src = &x[f * g.frames..(f + 1) * g.frames];
        for kk in 0..k {
            for s in 0..s_n {
                let l = s * g.hop + kk;
                if l < g.frames {
                    out[(f * k + kk) * s_n + s] = src[l];
                }
            }
        }
    }
    out
}

pub(crate) fn chunk_backward(dout: &[f64], feats: usize, g: &ChunkGeometry) -> Vec<f64> {
    let (k, s_n) = (g.k, g.chunks);
    let mut dx = vec![0.0; feats * g.frames];
    for f in 0..feats {
        for kk in 0..k {
            for s in 0..s_n {
                let l = s * g.hop + kk;
                if l < g.frames {
                    dx[f * g.frames + l] += dout[(f * k + kk) * s_n + s];
                }
            }
        }
    }
    dx
}

/// x `[f, k, chunks]` -> `[f, frames]`, averaging overlapped positions.
pub(crate) fn overlap_add_forward(x: &[f64], feats: usize, g: &ChunkGeometry) -> Vec<f64> {
    let (k, s_n) = (g.k, g.chunks);
    let inv: Vec<f64> = (0..g.frames).map(|l| 1.0 / g.coverage(l) as f64).collect();
    let mut out = vec![0.0; feats * g.frames];
    for f in 0..feats {
        let dst = &mut out[f * g.frames..(f + 1) * g.frames];
        for kk in 0..k {
            for s in 0..s_n {
                let l = s * g.hop + kk;
                if l < g.frames {
                    dst[l] += x[(f * k + kk) * s_n + s];
                }
            }
        }
        dst.iter_mut().zip(&inv).for_each(|(v, w)| *v *= w);
    }
    out
}

pub(crate) fn overlap_add_backward(dout: &[f64], feats: usize, g: &ChunkGeometry) -> Vec<f64> {
    let (k, s_n) = (g.k, g.chunks);
    let inv: Vec<f64> = (0..g.frames).map(|l| 1.0 / g.coverage(l) as f64).collect();
    let mut dx = vec![0.0; feats * k * s_n];
    for f in 0..feats {
        for kk in 0..k {
            for s in 0..s_n {
                let l = s * g.hop + kk;
                if l < g.frames {
                    dx[(f * k + kk) * s_n + s] = dout[f * g.frames + l] * inv[l];
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- GRU

/// Saved activations of a GRU sequence pass.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub ghn: Vec<f64>,
}

pub(crate) struct GruDims {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
}

/// gx `[T, B, 3H]` (input projections, gate order r|z|n), w `[3H, H]`, b `[3H]`.
/// Zero initial state. Returns the hidden sequence `[T, B, H]`.
pub(crate) fn gru_forward(gx: &[f64], w: &[f64], b: &[f64], d: &GruDims) -> (Vec<f64>, GruCache) {
    let (t_n, bn, h) = (d.steps, d.batch, d.hidden);
    let sz = t_n * bn * h;
    let mut out = vec![0.0; sz];
    let mut cache = GruCache {
        r: vec![0.0; sz],
        z: vec![0.0; sz],
        n: vec![0.0; sz],
        ghn: vec![0.0; sz],
    };
    let zeros = vec![0.0; bn * h];
    let mut gh = vec![0.0; bn * 3 * h];
    for t in 0..t_n {
        let (prev_part, cur_part) = out.split_at_mut(t * bn * h);
        let h_prev: &[f64] = if t == 0 { &zeros } else { &prev_part[(t - 1) * bn * h..] };
        let h_cur = &mut cur_part[..bn * h];
        for row in gh.chunks_mut(3 * h) {
            row.copy_from_slice(b);
        }
        gemm(1.0, Mat::new(h_prev, bn, h), Mat::new(w, 3 * h, h).t(), 1.0, &mut gh);
        for bi in 0..bn {
            let gxr = &gx[(t * bn + bi) * 3 * h..(t * bn + bi + 1) * 3 * h];
            let ghr = &gh[bi * 3 * h..(bi + 1) * 3 * h];
            for j in 0..h {
                let idx = (t * bn + bi) * h + j;
                let r = sigmoid(gxr[j] + ghr[j]);
                let z = sigmoid(gxr[h + j] + ghr[h + j]);
                let ghn = ghr[2 * h + j];
                let n = (gxr[2 * h + j] + r * ghn).tanh();
                h_cur[bi * h + j] = (1.0 - z) * n + z * h_prev[bi * h + j];
                cache.r[idx] = r;
                cache.z[idx] = z;
                cache.n[idx] = n;
                cache.ghn[idx] = ghn;
            }
        }
    }
    (out, cache)
}

/// Returns (dgx, dw, db).
pub(crate) fn gru_backward(
    dout: &[f64],
    out: &[f64],
    w: &[f64],
    cache: &GruCache,
    d: &GruDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t_n, bn, h) = (d.steps, d.batch, d.hidden);
    let mut dgx = vec![0.0; t_n * bn * 3 * h];
    let mut dw = vec![0.0; 3 * h * h];
    let mut db = vec![0.0; 3 * h];
    let mut carry = vec![0.0; bn * h];
    let mut dgh = vec![0.0; bn * 3 * h];
    let zeros = vec![0.0; bn * h];
    for t in (0..t_n).rev() {
        let h_prev: &[f64] = if t == 0 { &zeros } else { &out[(t - 1) * bn * h..t * bn * h] };
        for bi in 0..bn {
            for j in 0..h {
                let idx = (t * bn + bi) * h + j;
                let dh = dout[idx] + carry[bi * h + j];
                let (r, z, n, ghn) = (cache.r[idx], cache.z[idx], cache.n[idx], cache.ghn[idx]);
                let dn = dh * (1.0 - z);
                let dz = dh * (h_prev[bi * h + j] - n);
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * ghn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                let g = (t * bn + bi) * 3 * h;
                dgx[g + j] = dr_pre;
                dgx[g + h + j] = dz_pre;
                dgx[g + 2 * h + j] = dn_pre;
                let gb = bi * 3 * h;
                dgh[gb + j] = dr_pre;
                dgh[gb + h + j] = dz_pre;
                dgh[gb + 2 * h + j] = dn_pre * r;
                carry[bi * h + j] = dh * z;
            }
        }
        gemm(1.0, Mat::new(&dgh, bn, 3 * h).t(), Mat::new(h_prev, bn, h), 1.0, &mut dw);
        for row in dgh.chunks(3 * h) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        gemm(1.0, Mat::new(&dgh, bn, 3 * h), Mat::new(w, 3 * h, h), 1.0, &mut carry);
    }
    (dgx, dw, db)
}

// ---------------------------------------------------------------- attention

/// Scaled dot-product attention over `[B, T, D]` operands; returns (out, probs).
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], bn: usize, t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; bn * t * t];
    let mut out = vec![0.0; bn * t * d];
    for b in 0..bn {
        let qs = &q[b * t * d..(b + 1) * t * d];
        let ks = &k[b * t * d..(b + 1) * t * d];
        let vs = &v[b * t * d..(b + 1) * t * d];
        let p = &mut probs[b * t * t..(b + 1) * t * t];
        gemm(scale, Mat::new(qs, t, d), Mat::new(ks, t, d).t(), 0.0, p);
        for row in p.chunks_mut(t) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        gemm(1.0, Mat::new(p, t, t), Mat::new(vs, t, d), 0.0, &mut out[b * t * d..(b + 1) * t * d]);
    }
    (out, probs)
}

/// Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    bn: usize,
    t: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; bn * t * d];
    let mut dk = vec![0.0; bn * t * d];
    let mut dv = vec![0.0; bn * t * d];
    for b in 0..bn {
        let r = b * t * d..(b + 1) * t * d;
        let p = &probs[b * t * t..(b + 1) * t * t];
        let go = &dout[r.clone()];
        gemm(1.0, Mat::new(p, t, t).t(), Mat::new(go, t, d), 0.0, &mut dv[r.clone()]);
        let mut ds = matmul(Mat::new(go, t, d), Mat::new(&v[r.clone()], t, d).t());
        for (dsr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
            let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
            dsr.iter_mut().zip(pr).for_each(|(g, pp)| *g = pp * (*g - dot));
        }
        gemm(scale, Mat::new(&ds, t, t), Mat::new(&k[r.clone()], t, d), 0.0, &mut dq[r.clone()]);
        gemm(scale, Mat::new(&ds, t, t).t(), Mat::new(&q[r.clone()], t, d), 0.0, &mut dk[r]);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_geometry_examples() {
        let g = ChunkGeometry::new(8, 4);
        assert_eq!((g.hop, g.padded, g.chunks, g.pad()), (2, 8, 3, 0));
        let g = ChunkGeometry::new(4, 4);
        assert_eq!((g.chunks, g.pad()), (1, 0));
        let g = ChunkGeometry::new(5, 4);
        assert_eq!((g.padded, g.chunks, g.pad()), (6, 2, 1));
        let g = ChunkGeometry::new(3, 4);
        assert_eq!((g.padded, g.chunks, g.pad()), (4, 1, 1));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and no bias
        let d = ConvDims { cin: 1, cout: 3, kernel: 4, stride: 2 };
        let t = 12;
        let x: Vec<f64> = (0..t).map(|i| (i as f64 * 0.7).sin()).collect();
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let y_frames = conv_out_len(t, 4, 2);
        let y: Vec<f64> = (0..3 * y_frames).map(|i| (i as f64 * 0.11).sin()).collect();
        let cx = conv1d_forward(&x, t, &w, None, &d);
        // transpose layer maps [cout=3, frames] back to [1, t]; weight layout [cin=3, cout=1, k]
        let dt = ConvDims { cin: 3, cout: 1, kernel: 4, stride: 2 };
        let ty = convt_forward(&y, y_frames, &w, None, &dt);
        assert_eq!(ty.len(), t);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
