//! Dense f32 kernels over flat row-major buffers.
//!
//! Reductions use a fixed eight-lane accumulation order so results do not
//! depend on the execution mode.

use crate::par::{self, Exec};

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(exec: Exec, a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::rows_mut(exec, out, n, |i, row| {
        row.fill(0.0);
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_t(exec: Exec, a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    par::rows_mut(exec, out, n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn(exec: Exec, a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    par::rows_mut(exec, out, n, |p, row| {
        row.fill(0.0);
        for i in 0..m {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[i * n..(i + 1) * n], row);
            }
        }
    });
}

/// Geometry of a batched multi-head causal attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Causal scaled dot-product attention. `q`, `k`, `v` and `out` are
/// `[batch*seq, hidden]` with heads laid out contiguously along `hidden`.
/// `probs` receives `[batch, heads, seq, seq]`, zero above the diagonal.
pub fn attention_forward(
    exec: Exec,
    s: AttnShape,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    out: &mut [f32],
    probs: &mut [f32],
) {
    let (t_len, h, d) = (s.seq, s.hidden, s.head_dim());
    let scale = 1.0 / (d as f32).sqrt();
    let block = t_len * h;
    let pblock = s.heads * t_len * t_len;
    // probs rows and out rows are both indexed per batch element
    let mut work: Vec<(usize, &mut [f32], &mut [f32])> = out
        .chunks_mut(block)
        .zip(probs.chunks_mut(pblock))
        .enumerate()
        .map(|(b, (o, p))| (b, o, p))
        .collect();
    let body = |(b, o, p): &mut (usize, &mut [f32], &mut [f32])| {
        let base = *b * block;
        o.fill(0.0);
        for head in 0..s.heads {
            let off = head * d;
            for t in 0..t_len {
                let qt = &q[base + t * h + off..base + t * h + off + d];
                let prow = &mut p[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                let mut max = f32::NEG_INFINITY;
                for (u, pu) in prow.iter_mut().enumerate().take(t + 1) {
                    let ku = &k[base + u * h + off..base + u * h + off + d];
                    *pu = dot(qt, ku) * scale;
                    max = max.max(*pu);
                }
                let mut z = 0.0;
                for pu in prow.iter_mut().take(t + 1) {
                    *pu = (*pu - max).exp();
                    z += *pu;
                }
                let inv = 1.0 / z;
                for pu in prow.iter_mut().take(t + 1) {
                    *pu *= inv;
                }
                prow[t + 1..].fill(0.0);
                let ot = &mut o[t * h + off..t * h + off + d];
                for (u, &pu) in prow.iter().enumerate().take(t + 1) {
                    axpy(pu, &v[base + u * h + off..base + u * h + off + d], ot);
                }
            }
        }
    };
    run_blocks(exec, &mut work, body);
}

/// Adjoint of [`attention_forward`]. Gradients are written (not accumulated)
/// into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    exec: Exec,
    s: AttnShape,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let (t_len, h, d) = (s.seq, s.hidden, s.head_dim());
    let scale = 1.0 / (d as f32).sqrt();
    let block = t_len * h;
    par::rows_mut3(exec, dq, dk, dv, block, |b, dqb, dkb, dvb| {
        let base = b * block;
        dqb.fill(0.0);
        dkb.fill(0.0);
        dvb.fill(0.0);
        let mut dp = vec![0f32; t_len];
        for head in 0..s.heads {
            let off = head * d;
            for t in 0..t_len {
                let prow = &probs[((b * s.heads + head) * t_len + t) * t_len..][..t_len];
                let go = &dout[base + t * h + off..base + t * h + off + d];
                let mut inner = 0.0;
                for u in 0..=t {
                    let vu = &v[base + u * h + off..base + u * h + off + d];
                    axpy(prow[u], go, &mut dvb[u * h + off..u * h + off + d]);
                    dp[u] = dot(go, vu);
                    inner += prow[u] * dp[u];
                }
                let qt = &q[base + t * h + off..base + t * h + off + d];
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - inner) * scale;
                    if ds != 0.0 {
                        let ku = &k[base + u * h + off..base + u * h + off + d];
                        axpy(ds, ku, &mut dqb[t * h + off..t * h + off + d]);
                        axpy(ds, qt, &mut dkb[u * h + off..u * h + off + d]);
                    }
                }
            }
        }
    });
}

fn run_blocks<T, F>(exec: Exec, work: &mut [T], body: F)
where
    T: Send,
    F: Fn(&mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && work.len() > 1 {
        use rayon::prelude::*;
        work.par_iter_mut().for_each(body);
        return;
    }
    let _ = exec;
    work.iter_mut().for_each(body);
}
